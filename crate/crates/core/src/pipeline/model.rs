use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::DecoderConfig;
use crate::dftu::{DftuConfig, LatentDims, RecurrentState};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};
use crate::teqe::TeqeConfig;
use crate::topology::{EntanglementGraph, TopologyKind, DEFAULT_CORRELATION_THRESHOLD};

/// Which quantum paths are switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum Ablation {
    #[default]
    None,
    /// No enhancer and no fusion: the recurrent state is purely classical.
    NoQemid,
    /// The hidden-state channels never reach the decoder.
    NoQedecoder,
    NoBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::None,
        Ablation::NoQemid,
        Ablation::NoQedecoder,
        Ablation::NoBoth,
    ];

    pub fn quantum_mid(self) -> bool {
        matches!(self, Ablation::None | Ablation::NoQedecoder)
    }

    pub fn quantum_decoder(self) -> bool {
        matches!(self, Ablation::None | Ablation::NoQemid)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-qemid" => Ok(Ablation::NoQemid),
            "no-qedecoder" => Ok(Ablation::NoQedecoder),
            "no-both" => Ok(Ablation::NoBoth),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (none|no-qemid|no-qedecoder|no-both)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::NoQemid => "no-qemid",
            Ablation::NoQedecoder => "no-qedecoder",
            Ablation::NoBoth => "no-both",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub c_hid: usize,
    pub strides: Vec<usize>,
    pub teqe: TeqeConfig,
    pub topology: TopologyKind,
    pub correlation_threshold: f64,
    pub dftu: DftuConfig,
    pub refine3d: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 8,
            height: 32,
            width: 32,
            t_in: 5,
            t_out: 2,
            c_hid: 16,
            strides: vec![1, 2, 1, 2],
            teqe: TeqeConfig::default(),
            topology: TopologyKind::Ring,
            correlation_threshold: DEFAULT_CORRELATION_THRESHOLD,
            dftu: DftuConfig::default(),
            refine3d: true,
            ablation: Ablation::None,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.channels,
            c_hid: self.c_hid,
            strides: self.strides.clone(),
        }
    }

    pub fn latent_dims(&self) -> LatentDims {
        let f = self.encoder().downsample();
        LatentDims {
            c: self.c_hid,
            c_q: self.teqe.c_q,
            h: self.height / f,
            w: self.width / f,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        let enc = self.encoder();
        DecoderConfig {
            channels: self.channels,
            c_hid: self.c_hid,
            strides: self.strides.clone(),
            skip_channels: enc.skip_channels(),
            t_in: self.t_in,
            t_out: self.t_out,
            c_enh: self.c_hid + self.dftu.c_h,
            refine3d: self.refine3d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        self.encoder().validate(self.height, self.width)?;
        self.teqe.validate()?;
        self.dftu.validate()?;
        self.decoder().validate()?;
        if self.topology == TopologyKind::Correlation && self.c_hid < self.teqe.qubits {
            return Err(Error::Config(format!(
                "correlation topology needs c_hid ({}) ≥ q ({})",
                self.c_hid, self.teqe.qubits
            )));
        }
        Ok(())
    }

    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ModelParams<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let ld = self.latent_dims();
        self.encoder().init_params(&mut p, &mut rng)?;
        self.teqe.init_params(&mut p, ld.c, ld.h, ld.w, &mut rng)?;
        self.dftu.init_params(&mut p, ld, &mut rng)?;
        self.decoder().init_params(&mut p, &mut rng)?;
        Ok(p)
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Forecast `[B, T_out, C, H, W]`.
    pub forecast: Var,
    /// Final fused hidden state `[B, D_h]`.
    pub hidden: Var,
}

/// Configuration, parameters and the frozen entanglement graph.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    topology: Option<EntanglementGraph>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Self::with_params(config, params)
    }

    /// Wrap existing parameters after checking them against the config.
    pub fn with_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        let reference = config.init_params::<T>(0)?;
        for (name, t) in reference.iter() {
            let have = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("parameter `{name}` missing")))?;
            if have.shape() != t.shape() {
                return Err(Error::dim(
                    "model params",
                    name.to_string(),
                    format!("expected {:?}, found {:?}", t.shape(), have.shape()),
                ));
            }
        }
        if let Some(extra) = params.names().find(|n| reference.get(n).is_none()) {
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        let topology = match config.topology {
            TopologyKind::Correlation => None,
            kind => Some(EntanglementGraph::build::<T>(
                kind,
                config.teqe.qubits,
                None,
                config.correlation_threshold,
            )?),
        };
        Ok(Model {
            config,
            params,
            topology,
        })
    }

    pub fn topology(&self) -> Option<&EntanglementGraph> {
        self.topology.as_ref()
    }

    /// Freeze a specific graph (e.g. one restored from a checkpoint).
    pub fn set_topology(&mut self, graph: EntanglementGraph) -> Result<()> {
        if graph.qubits() != self.config.teqe.qubits {
            return Err(Error::Config(format!(
                "topology over {} qubits, model uses {}",
                graph.qubits(),
                self.config.teqe.qubits
            )));
        }
        self.topology = Some(graph);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.total_count()
    }

    /// Record the forward pass of `x[B,T_in,C,H,W]` on `g`. A correlation
    /// topology is chosen from the first latent seen and then frozen.
    pub fn forward(&mut self, g: &mut Graph<T>, pv: &ParamVars, x: Var) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let xs = g.shape(x).to_vec();
        let want = [cfg.t_in, cfg.channels, cfg.height, cfg.width];
        if xs.len() != 5 || xs[1..] != want {
            return Err(Error::dim(
                "forward",
                "input",
                format!(
                    "expected [B,{},{},{},{}], got {xs:?}",
                    want[0], want[1], want[2], want[3]
                ),
            ));
        }
        if g.value(x).data().iter().any(|v| !(T::zero()..=T::one()).contains(v)) {
            return Err(Error::Data("forward input must lie in [0,1]".into()));
        }
        let b = xs[0];
        let (z, skips) = cfg.encoder().encode(g, pv, x)?;
        let mid = cfg.ablation.quantum_mid();
        if mid && self.topology.is_none() {
            let graph = EntanglementGraph::build(
                cfg.topology,
                cfg.teqe.qubits,
                Some(g.value(z)),
                cfg.correlation_threshold,
            )?;
            self.topology = Some(graph);
        }
        let cfg = &self.config;
        let ld = cfg.latent_dims();
        let mut state = RecurrentState::zeros(g, b, cfg.dftu.d_h);
        let mut enhanced = Vec::with_capacity(cfg.t_in);
        for t in 0..cfg.t_in {
            let zt = g.narrow(z, 1, t, 1)?;
            let zt = g.reshape(zt, &[b, ld.c, ld.h, ld.w])?;
            let q = match (&self.topology, mid) {
                (Some(graph), true) => Some(cfg.teqe.enhance(g, pv, zt, graph)?),
                _ => None,
            };
            let (enh, next) = cfg.dftu.step(g, pv, zt, state, q, cfg.ablation.quantum_decoder())?;
            state = next;
            let es = g.shape(enh).to_vec();
            enhanced.push(g.reshape(enh, &[b, 1, es[1], es[2], es[3]])?);
        }
        let stack = g.concat(&enhanced, 1)?;
        let forecast = cfg.decoder().decode(g, pv, stack, &skips)?;
        Ok(ForwardOutput {
            forecast,
            hidden: state.h,
        })
    }

    /// Inference on a concrete batch; returns the forecast and the final
    /// hidden state.
    pub fn predict_with_hidden(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &pv, xv)?;
        Ok((g.value(out.forecast).clone(), g.value(out.hidden).clone()))
    }

    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.predict_with_hidden(x)?.0)
    }
}
