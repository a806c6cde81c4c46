//! Topological entanglement quantum enhancer: latent frame → rotation
//! phases → simulated circuit → Pauli readout → spatial quantum feature map.
//!
//! The circuit is not differentiated through its amplitudes. Its Jacobian
//! with respect to the phases comes from the parameter-shift rule and is
//! attached to the graph as an opaque row-wise map, so the chain rule into
//! the phase projection and the readout head is handled by the tensor graph.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamVars};
use crate::quantum::{self, PauliObservable, PhaseVector};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};
use crate::topology::EntanglementGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Measurements {
    #[default]
    LocalZ,
    LocalZParity,
}

impl FromStr for Measurements {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local-z" => Ok(Measurements::LocalZ),
            "local-z+parity" => Ok(Measurements::LocalZParity),
            other => Err(Error::Config(format!(
                "unknown measurements `{other}` (local-z|local-z+parity)"
            ))),
        }
    }
}

impl fmt::Display for Measurements {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measurements::LocalZ => "local-z",
            Measurements::LocalZParity => "local-z+parity",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeqeConfig {
    pub qubits: usize,
    pub layers: usize,
    pub measurements: Measurements,
    /// Channels of the quantum feature map.
    pub c_q: usize,
}

impl Default for TeqeConfig {
    fn default() -> Self {
        TeqeConfig {
            qubits: 8,
            layers: 2,
            measurements: Measurements::LocalZ,
            c_q: 2,
        }
    }
}

impl TeqeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=12).contains(&self.qubits) {
            return Err(Error::Config(format!("q = {} outside [2, 12]", self.qubits)));
        }
        if !(1..=4).contains(&self.layers) {
            return Err(Error::Config(format!("layers = {} outside [1, 4]", self.layers)));
        }
        if self.c_q == 0 {
            return Err(Error::Config("c_q must be at least 1".into()));
        }
        Ok(())
    }

    /// `|φ| = q·(1 + 3L)`.
    pub fn n_phases(&self) -> usize {
        PhaseVector::<f64>::len_for(self.qubits, self.layers)
    }

    pub fn observables(&self) -> Vec<PauliObservable> {
        quantum::local_z_observables(self.qubits, self.measurements == Measurements::LocalZParity)
    }

    pub fn n_readouts(&self) -> usize {
        self.observables().len()
    }

    /// `C'·|φ| + |φ| + m·(C_q·H'·W') + C_q·H'·W'`.
    pub fn param_count(&self, latent_channels: usize, latent_h: usize, latent_w: usize) -> usize {
        let p = self.n_phases();
        let map = self.c_q * latent_h * latent_w;
        latent_channels * p + p + self.n_readouts() * map + map
    }

    pub fn init_params<T: Scalar>(
        &self,
        p: &mut ModelParams<T>,
        latent_channels: usize,
        latent_h: usize,
        latent_w: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let np = self.n_phases();
        let m = self.n_readouts();
        let map = self.c_q * latent_h * latent_w;
        p.uniform("teqe.proj.w", &[np, latent_channels], latent_channels, rng)?;
        p.zeros("teqe.proj.b", &[np])?;
        p.uniform("teqe.fc.w", &[map, m], m, rng)?;
        p.zeros("teqe.fc.b", &[map])?;
        Ok(())
    }

    /// `φ = π·σ(W·pool(z_t) + b)` per sample, shape `[B, |φ|]`.
    pub fn project_phases<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, z_t: Var) -> Result<Var> {
        let zs = g.shape(z_t).to_vec();
        if zs.len() != 4 {
            return Err(Error::dim(
                "project_phases",
                "rank",
                format!("expected [B,C',H',W'], got {zs:?}"),
            ));
        }
        let v = g.mean_pool(z_t, &[2, 3])?;
        let a = g.linear(v, pv.get("teqe.proj.w")?, pv.get("teqe.proj.b")?)?;
        let s = g.sigmoid(a);
        Ok(g.scale(s, T::lit(PI)))
    }

    /// Simulate one circuit per row of `phases` and return the readouts
    /// `[B, m]`, each in `[−1, 1]`.
    pub fn readout<T: Scalar>(&self, g: &mut Graph<T>, phases: Var, graph: &EntanglementGraph) -> Result<Var> {
        if graph.qubits() != self.qubits {
            return Err(Error::Contract(format!(
                "entanglement graph over {} qubits, enhancer uses {}",
                graph.qubits(),
                self.qubits
            )));
        }
        let ps = g.shape(phases).to_vec();
        let np = self.n_phases();
        if ps.len() != 2 || ps[1] != np {
            return Err(Error::dim(
                "readout",
                "axis 1 (phases)",
                format!("expected [B,{np}], got {ps:?}"),
            ));
        }
        let obs = self.observables();
        let m = obs.len();
        let rows = ps[0];
        let need_jac = g.requires_grad(phases);
        let values = g.value(phases).data();
        let simulate = |chunk: &[T]| -> Result<(Vec<T>, Vec<T>)> {
            let (mut out, mut jac) = (Vec::new(), Vec::new());
            for row in chunk.chunks(np) {
                let phi = PhaseVector::new(self.qubits, self.layers, row.to_vec())?;
                out.extend(quantum::circuit_expectations(&phi, graph, &obs)?);
                if need_jac {
                    jac.extend_from_slice(quantum::parameter_shift_grad(&phi, graph, &obs)?.data());
                }
            }
            Ok((out, jac))
        };
        let workers = if crate::deterministic() {
            1
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get()).min(rows)
        };
        let parts: Vec<Result<(Vec<T>, Vec<T>)>> = if workers <= 1 {
            vec![simulate(values)]
        } else {
            let per = rows.div_ceil(workers) * np;
            std::thread::scope(|s| {
                let handles: Vec<_> = values.chunks(per).map(|c| s.spawn(move || simulate(c))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("circuit worker panicked"))
                    .collect()
            })
        };
        let mut out = Vec::with_capacity(rows * m);
        let mut jac = Vec::with_capacity(if need_jac { rows * m * np } else { 0 });
        for part in parts {
            let (o, j) = part?;
            out.extend(o);
            jac.extend(j);
        }
        let y = Tensor::new(vec![rows, m], out)?;
        g.map_with_jacobian(phases, y, need_jac.then_some(jac))
    }

    /// `Q_t = reshape(FC(m))`, shape `[B, C_q, H', W']`.
    pub fn enhance<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        z_t: Var,
        graph: &EntanglementGraph,
    ) -> Result<Var> {
        let zs = g.shape(z_t).to_vec();
        let phases = self.project_phases(g, pv, z_t)?;
        let m = self.readout(g, phases, graph)?;
        let fc = g.linear(m, pv.get("teqe.fc.w")?, pv.get("teqe.fc.b")?)?;
        g.reshape(fc, &[zs[0], self.c_q, zs[2], zs[3]])
    }
}
