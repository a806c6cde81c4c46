//! Spatial-temporal encoder: ConvSC downsampling blocks interleaved with
//! multi-scale Inception modules. Every frame goes through the same weights.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Slope of the leaky rectifier used throughout the classical blocks.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Input channels (vertical levels).
    pub channels: usize,
    pub c_hid: usize,
    /// One stride per ConvSC block, each 1 or 2.
    pub strides: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: 8,
            c_hid: 16,
            strides: vec![1, 2, 1, 2],
        }
    }
}

impl EncoderConfig {
    pub fn n_blocks(&self) -> usize {
        self.strides.len()
    }

    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.strides.is_empty() {
            return Err(Error::Config("encoder needs at least one ConvSC block".into()));
        }
        if let Some(s) = self.strides.iter().find(|&&s| s != 1 && s != 2) {
            return Err(Error::Config(format!("encoder stride {s} not in {{1,2}}")));
        }
        if self.c_hid == 0 || self.c_hid % 4 != 0 {
            return Err(Error::Config(format!(
                "c_hid = {} must be a positive multiple of 4 (MSIM branches)",
                self.c_hid
            )));
        }
        let f = self.downsample();
        if height % f != 0 || width % f != 0 {
            return Err(Error::Config(format!(
                "grid {height}x{width} not divisible by total encoder stride {f}"
            )));
        }
        Ok(())
    }

    /// Channel count of each skip feature, outermost resolution first.
    pub fn skip_channels(&self) -> Vec<usize> {
        let mut cin = self.channels;
        let mut out = Vec::new();
        for &s in &self.strides {
            if s == 2 {
                out.push(cin);
            }
            cin = self.c_hid;
        }
        out
    }

    pub fn init_params<T: Scalar>(&self, p: &mut ModelParams<T>, rng: &mut impl Rng) -> Result<()> {
        let mut cin = self.channels;
        for (i, &s) in self.strides.iter().enumerate() {
            p.uniform(&format!("enc.sc{i}.w"), &[self.c_hid, cin, 3, 3], cin * 9, rng)?;
            p.zeros(&format!("enc.sc{i}.b"), &[self.c_hid])?;
            if s == 2 {
                init_msim(p, &format!("enc.msim{i}"), self.c_hid, rng)?;
            }
            cin = self.c_hid;
        }
        Ok(())
    }

    /// Encode `x[B,T,C,H,W]` into `Z[B,T,C_hid,H',W']` plus the
    /// pre-downsampling features of the last frame (outermost first).
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, x: Var) -> Result<(Var, Vec<Var>)> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(Error::dim(
                "encode",
                "rank",
                format!("expected [B,T,C,H,W], got {xs:?}"),
            ));
        }
        let (b, t, c, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        if c != self.channels {
            return Err(Error::dim(
                "encode",
                "axis 2 (channels)",
                format!("input has {c} levels, encoder expects {}", self.channels),
            ));
        }
        self.validate(h, w)?;
        // frames fold into the batch axis: one set of weights for every t
        let mut cur = g.reshape(x, &[b * t, c, h, w])?;
        let mut skips = Vec::new();
        for (i, &s) in self.strides.iter().enumerate() {
            if s == 2 {
                skips.push(last_frame(g, cur, b, t)?);
            }
            cur = conv_sc(g, pv, &format!("enc.sc{i}"), cur, s)?;
            if s == 2 {
                cur = msim(g, pv, &format!("enc.msim{i}"), cur)?;
            }
        }
        let zs = g.shape(cur).to_vec();
        let z = g.reshape(cur, &[b, t, zs[1], zs[2], zs[3]])?;
        Ok((z, skips))
    }
}

fn last_frame<T: Scalar>(g: &mut Graph<T>, folded: Var, b: usize, t: usize) -> Result<Var> {
    let s = g.shape(folded).to_vec();
    let unfolded = g.reshape(folded, &[b, t, s[1], s[2], s[3]])?;
    let last = g.narrow(unfolded, 1, t - 1, 1)?;
    g.reshape(last, &[b, s[1], s[2], s[3]])
}

fn init_msim<T: Scalar>(p: &mut ModelParams<T>, prefix: &str, c_hid: usize, rng: &mut impl Rng) -> Result<()> {
    let quarter = c_hid / 4;
    for k in [3usize, 5, 7, 1] {
        p.uniform(&format!("{prefix}.k{k}.w"), &[quarter, c_hid, k, k], c_hid * k * k, rng)?;
        p.zeros(&format!("{prefix}.k{k}.b"), &[quarter])?;
    }
    Ok(())
}

/// ConvSC block: `act(conv3x3(x) + b)`, plus the input itself when the
/// stride is 1 and the channel count is unchanged.
pub fn conv_sc<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!("ConvSC stride {stride} not in {{1,2}}")));
    }
    let k = pv.get(&format!("{prefix}.w"))?;
    let bias = pv.get(&format!("{prefix}.b"))?;
    let y = g.conv2d(x, k, stride, 1)?;
    let y = g.bias_add(y, bias)?;
    let y = g.leaky_relu(y, T::lit(LEAKY_SLOPE));
    if stride == 1 && g.shape(x) == g.shape(y) {
        g.add(y, x)
    } else {
        Ok(y)
    }
}

/// Multi-scale Inception module: 3×3, 5×5, 7×7 and 1×1 branches, each to
/// a quarter of the channels, concatenated and added to the input.
pub fn msim<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let c = g.shape(x).get(1).copied().unwrap_or(0);
    if c == 0 || c % 4 != 0 {
        return Err(Error::Config(format!("MSIM needs channels divisible by 4, got {c}")));
    }
    let mut branches = Vec::with_capacity(4);
    for k in [3usize, 5, 7, 1] {
        let w = pv.get(&format!("{prefix}.k{k}.w"))?;
        let b = pv.get(&format!("{prefix}.k{k}.b"))?;
        let y = g.conv2d(x, w, 1, k / 2)?;
        branches.push(g.bias_add(y, b)?);
    }
    let cat = g.concat(&branches, 1)?;
    let act = g.leaky_relu(cat, T::lit(LEAKY_SLOPE));
    g.add(act, x)
}
