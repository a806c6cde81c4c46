//! Dynamic fusion temporal unit: an LSTM cell whose state is blended with a
//! pooled quantum feature map through learned gates.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    /// Four scalars per sample, broadcast over the hidden width.
    #[default]
    Scalar,
    /// Four gate vectors of hidden width.
    Vector,
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(GateMode::Scalar),
            "vector" => Ok(GateMode::Vector),
            other => Err(Error::Config(format!("unknown gate_mode `{other}` (scalar|vector)"))),
        }
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Scalar => "scalar",
            GateMode::Vector => "vector",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DftuConfig {
    pub d_h: usize,
    /// Channels of the reshaped hidden map appended to each latent.
    pub c_h: usize,
    pub gate_mode: GateMode,
}

impl Default for DftuConfig {
    fn default() -> Self {
        DftuConfig {
            d_h: 12,
            c_h: 2,
            gate_mode: GateMode::Scalar,
        }
    }
}

/// Hidden and cell state, each `[B, D_h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecurrentState {
    pub h: Var,
    pub c: Var,
}

impl RecurrentState {
    pub fn zeros<T: Scalar>(g: &mut Graph<T>, batch: usize, d_h: usize) -> Self {
        RecurrentState {
            h: g.constant(Tensor::zeros(vec![batch, d_h])),
            c: g.constant(Tensor::zeros(vec![batch, d_h])),
        }
    }
}

/// Latent geometry seen by the unit: `C'`, `C_q`, `H'`, `W'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentDims {
    pub c: usize,
    pub c_q: usize,
    pub h: usize,
    pub w: usize,
}

impl DftuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.c_h == 0 {
            return Err(Error::Config("d_h and c_h must be positive".into()));
        }
        Ok(())
    }

    fn gate_width(&self) -> usize {
        match self.gate_mode {
            GateMode::Scalar => 4,
            GateMode::Vector => 4 * self.d_h,
        }
    }

    pub fn init_params<T: Scalar>(&self, p: &mut ModelParams<T>, dims: LatentDims, rng: &mut impl Rng) -> Result<()> {
        let d = self.d_h;
        let din = dims.c * dims.h * dims.w;
        p.uniform("dftu.lstm.w", &[4 * d, din + d], din + d, rng)?;
        p.zeros("dftu.lstm.b", &[4 * d])?;
        p.uniform("dftu.gate.w", &[self.gate_width(), d + dims.c_q], d + dims.c_q, rng)?;
        p.zeros("dftu.gate.b", &[self.gate_width()])?;
        p.uniform("dftu.fch.w", &[d, dims.c_q], dims.c_q, rng)?;
        p.zeros("dftu.fch.b", &[d])?;
        p.uniform("dftu.fcc.w", &[d, dims.c_q], dims.c_q, rng)?;
        p.zeros("dftu.fcc.b", &[d])?;
        let map = self.c_h * dims.h * dims.w;
        p.uniform("dftu.out.w", &[map, d], d, rng)?;
        p.zeros("dftu.out.b", &[map])?;
        Ok(())
    }

    /// Gated recurrent update with gate order input, forget, candidate, output.
    pub fn lstm_cell<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        x: Var,
        state: RecurrentState,
    ) -> Result<RecurrentState> {
        let d = self.d_h;
        let hs = g.shape(state.h).to_vec();
        if hs.len() != 2 || hs[1] != d {
            return Err(Error::dim(
                "lstm_cell",
                "axis 1 (hidden)",
                format!("expected [B,{d}], got {hs:?}"),
            ));
        }
        let xh = g.concat(&[x, state.h], 1)?;
        let a = g.linear(xh, pv.get("dftu.lstm.w")?, pv.get("dftu.lstm.b")?)?;
        let ai = g.narrow(a, 1, 0, d)?;
        let af = g.narrow(a, 1, d, d)?;
        let ac = g.narrow(a, 1, 2 * d, d)?;
        let ao = g.narrow(a, 1, 3 * d, d)?;
        let i = g.sigmoid(ai);
        let f = g.sigmoid(af);
        let cand = g.tanh(ac);
        let o = g.sigmoid(ao);
        let fc = g.mul(f, state.c)?;
        let ic = g.mul(i, cand)?;
        let c = g.add(fc, ic)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(RecurrentState { h, c })
    }

    /// Fusion gates `[B, 4]` (or `[B, 4·D_h]` in vector mode), each in (0,1).
    pub fn gates<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, h_cls: Var, pooled: Var) -> Result<Var> {
        let hp = g.concat(&[h_cls, pooled], 1)?;
        let a = g.linear(hp, pv.get("dftu.gate.w")?, pv.get("dftu.gate.b")?)?;
        Ok(g.sigmoid(a))
    }

    /// `h = g0·h_cls + g1·FC_h(p)`, `c = g2·c_cls + g3·FC_c(p)` with `p` the
    /// spatially pooled quantum map.
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        cls: RecurrentState,
        q: Var,
    ) -> Result<RecurrentState> {
        let qs = g.shape(q).to_vec();
        if qs.len() != 4 {
            return Err(Error::dim(
                "fuse",
                "rank",
                format!("expected Q_t [B,C_q,H',W'], got {qs:?}"),
            ));
        }
        let p = g.mean_pool(q, &[2, 3])?;
        let gate = self.gates(g, pv, cls.h, p)?;
        let b = qs[0];
        let d = self.d_h;
        let width = self.gate_width() / 4;
        let lane = |g: &mut Graph<T>, k: usize| -> Result<Var> {
            let gk = g.narrow(gate, 1, k * width, width)?;
            if width == d {
                Ok(gk)
            } else {
                g.broadcast_to(gk, &[b, d])
            }
        };
        let g0 = lane(g, 0)?;
        let g1 = lane(g, 1)?;
        let g2 = lane(g, 2)?;
        let g3 = lane(g, 3)?;
        let qh = g.linear(p, pv.get("dftu.fch.w")?, pv.get("dftu.fch.b")?)?;
        let qc = g.linear(p, pv.get("dftu.fcc.w")?, pv.get("dftu.fcc.b")?)?;
        let a = g.mul(g0, cls.h)?;
        let bq = g.mul(g1, qh)?;
        let h = g.add(a, bq)?;
        let a = g.mul(g2, cls.c)?;
        let bq = g.mul(g3, qc)?;
        let c = g.add(a, bq)?;
        Ok(RecurrentState { h, c })
    }

    /// Learned map from the hidden vector to a `[B, C_h, H', W']` grid.
    pub fn hidden_map<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, h: Var, lh: usize, lw: usize) -> Result<Var> {
        let b = g.shape(h)[0];
        let m = g.linear(h, pv.get("dftu.out.w")?, pv.get("dftu.out.b")?)?;
        g.reshape(m, &[b, self.c_h, lh, lw])
    }

    /// One time step. `q = None` bypasses the fusion (the classical state is
    /// passed through unchanged); `emit_hidden = false` replaces the hidden
    /// channels of the enhanced latent with zeros.
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        z_t: Var,
        state: RecurrentState,
        q: Option<Var>,
        emit_hidden: bool,
    ) -> Result<(Var, RecurrentState)> {
        let zs = g.shape(z_t).to_vec();
        if zs.len() != 4 {
            return Err(Error::dim(
                "dftu step",
                "rank",
                format!("expected [B,C',H',W'], got {zs:?}"),
            ));
        }
        let x = g.flatten(z_t)?;
        let cls = self.lstm_cell(g, pv, x, state)?;
        let next = match q {
            Some(q) => self.fuse(g, pv, cls, q)?,
            None => cls,
        };
        let hm = if emit_hidden {
            self.hidden_map(g, pv, next.h, zs[2], zs[3])?
        } else {
            g.constant(Tensor::zeros(vec![zs[0], self.c_h, zs[2], zs[3]]))
        };
        let enh = g.concat(&[z_t, hm], 1)?;
        Ok((enh, next))
    }
}
