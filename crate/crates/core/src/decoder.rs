//! Decoder: temporal aggregation of enhanced latents, transposed-conv
//! upsampling with encoder skips, sigmoid head and a 3D residual refinement.

use rand::Rng;

use crate::encoder::LEAKY_SLOPE;
use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Output channels (vertical levels).
    pub channels: usize,
    pub c_hid: usize,
    /// Encoder stride schedule; the decoder walks it backwards.
    pub strides: Vec<usize>,
    /// Skip channel counts, outermost resolution first.
    pub skip_channels: Vec<usize>,
    pub t_in: usize,
    pub t_out: usize,
    /// Channels per enhanced latent frame (`C' + C_h`).
    pub c_enh: usize,
    pub refine3d: bool,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let n_up = self.strides.iter().filter(|&&s| s == 2).count();
        if n_up != self.skip_channels.len() {
            return Err(Error::Config(format!(
                "{} stride-2 stages but {} skip features",
                n_up,
                self.skip_channels.len()
            )));
        }
        if self.t_in == 0 || self.t_out == 0 {
            return Err(Error::Config("t_in and t_out must be positive".into()));
        }
        Ok(())
    }

    /// Strides in decoding order.
    pub fn decode_strides(&self) -> Vec<usize> {
        self.strides.iter().rev().copied().collect()
    }

    pub fn init_params<T: Scalar>(&self, p: &mut ModelParams<T>, rng: &mut impl Rng) -> Result<()> {
        let cin = self.t_in * self.c_enh;
        let cout = self.t_out * self.c_hid;
        p.uniform("dec.agg.w", &[cout, cin, 1, 1], cin, rng)?;
        p.zeros("dec.agg.b", &[cout])?;
        let c = self.c_hid;
        for (i, &sc) in self.skip_channels.iter().enumerate().rev() {
            p.uniform(&format!("dec.up{i}.w"), &[c, c, 3, 3], c * 9, rng)?;
            p.zeros(&format!("dec.up{i}.b"), &[c])?;
            p.uniform(&format!("dec.mix{i}.w"), &[c, c + sc, 3, 3], (c + sc) * 9, rng)?;
            p.zeros(&format!("dec.mix{i}.b"), &[c])?;
        }
        p.uniform("dec.head.w", &[self.channels, c, 1, 1], c, rng)?;
        p.zeros("dec.head.b", &[self.channels])?;
        if self.refine3d {
            p.uniform("dec.refine.w", &[1, 1, 3, 3, 3], 27, rng)?;
            p.zeros("dec.refine.b", &[1])?;
        }
        Ok(())
    }

    /// `[B,T_in,C_enh,H',W']` → `[B,T_out,C_hid,H',W']` by channel stacking
    /// and a 1×1 convolution.
    pub fn aggregate<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, stack: Var) -> Result<Var> {
        let s = g.shape(stack).to_vec();
        if s.len() != 5 || s[1] != self.t_in || s[2] != self.c_enh {
            return Err(Error::dim(
                "aggregate",
                "axes 1..2 (time, channels)",
                format!("expected [B,{},{},H',W'], got {s:?}", self.t_in, self.c_enh),
            ));
        }
        let x = g.reshape(stack, &[s[0], s[1] * s[2], s[3], s[4]])?;
        let y = g.conv2d(x, pv.get("dec.agg.w")?, 1, 0)?;
        let y = g.bias_add(y, pv.get("dec.agg.b")?)?;
        g.reshape(y, &[s[0], self.t_out, self.c_hid, s[3], s[4]])
    }

    /// Decode frames `u[N,C_hid,H',W']` with skips `[N,C_s,H_s,W_s]`
    /// (outermost first) into `[N,C,H,W]` in `[0,1]`.
    pub fn decode_frame<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, u: Var, skips: &[Var]) -> Result<Var> {
        if skips.len() != self.skip_channels.len() {
            return Err(Error::Contract(format!(
                "decoder expects {} skips, got {}",
                self.skip_channels.len(),
                skips.len()
            )));
        }
        let slope = T::lit(LEAKY_SLOPE);
        let mut cur = u;
        for i in (0..skips.len()).rev() {
            let up = g.conv_transpose2d(cur, pv.get(&format!("dec.up{i}.w"))?, 2, 1, 1)?;
            let up = g.bias_add(up, pv.get(&format!("dec.up{i}.b"))?)?;
            let up = g.leaky_relu(up, slope);
            let (us, ss) = (g.shape(up).to_vec(), g.shape(skips[i]).to_vec());
            if us[0] != ss[0] || us[2..] != ss[2..] {
                return Err(Error::dim(
                    "decode_frame",
                    "axes 2..3 (skip resolution)",
                    format!("upsampled {us:?} vs skip {ss:?}"),
                ));
            }
            let cat = g.concat(&[up, skips[i]], 1)?;
            let y = g.conv2d(cat, pv.get(&format!("dec.mix{i}.w"))?, 1, 1)?;
            let y = g.bias_add(y, pv.get(&format!("dec.mix{i}.b"))?)?;
            cur = g.leaky_relu(y, slope);
        }
        let y = g.conv2d(cur, pv.get("dec.head.w")?, 1, 0)?;
        let y = g.bias_add(y, pv.get("dec.head.b")?)?;
        Ok(g.sigmoid(y))
    }

    /// Residual 3D refinement over the level axis: `clamp(y + conv3d(y))`.
    pub fn refine<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, y: Var) -> Result<Var> {
        let s = g.shape(y).to_vec();
        if s.len() != 5 {
            return Err(Error::dim(
                "refine3d",
                "rank",
                format!("expected [B,T,C,H,W], got {s:?}"),
            ));
        }
        let vol = g.reshape(y, &[s[0] * s[1], 1, s[2], s[3], s[4]])?;
        let r = g.conv3d(vol, pv.get("dec.refine.w")?, 1)?;
        let r = g.bias_add(r, pv.get("dec.refine.b")?)?;
        let sum = g.add(vol, r)?;
        let out = g.clamp(sum, T::zero(), T::one());
        g.reshape(out, &s)
    }

    /// Full decoder: aggregate, decode every output frame against the shared
    /// skips, then refine. Skips are `[B, C_s, H_s, W_s]`.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, stack: Var, skips: &[Var]) -> Result<Var> {
        let u = self.aggregate(g, pv, stack)?;
        let us = g.shape(u).to_vec();
        let (b, t) = (us[0], us[1]);
        let u = g.reshape(u, &[b * t, us[2], us[3], us[4]])?;
        let mut tiled = Vec::with_capacity(skips.len());
        for &s in skips {
            let ss = g.shape(s).to_vec();
            let x = g.reshape(s, &[ss[0], 1, ss[1], ss[2], ss[3]])?;
            let x = g.broadcast_to(x, &[ss[0], t, ss[1], ss[2], ss[3]])?;
            tiled.push(g.reshape(x, &[ss[0] * t, ss[1], ss[2], ss[3]])?);
        }
        let frames = self.decode_frame(g, pv, u, &tiled)?;
        let fs = g.shape(frames).to_vec();
        let y = g.reshape(frames, &[b, t, fs[1], fs[2], fs[3]])?;
        if self.refine3d {
            self.refine(g, pv, y)
        } else {
            Ok(y)
        }
    }
}
