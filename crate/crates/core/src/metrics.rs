//! Verification scores: pointwise errors, SSIM, threshold contingency
//! scores, the persistence reference and feature coherence.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topology::pearson;

/// Thresholds used for the categorical scores.
pub const THRESHOLDS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.8];

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ElementCount {
            op,
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Data(format!("{op}: empty input")));
    }
    Ok(())
}

pub fn mse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_len("mse", pred, obs)?;
    Ok(pred.iter().zip(obs).map(|(p, o)| (p - o) * (p - o)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_len("mae", pred, obs)?;
    Ok(pred.iter().zip(obs).map(|(p, o)| (p - o).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    Ok(mse(pred, obs)?.sqrt())
}

/// 1 iff `x ≥ tau`.
pub fn binarize(x: f64, tau: f64) -> u8 {
    u8::from(x >= tau)
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn ssim_from_moments(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Single-window SSIM over the whole image with uniform weights.
pub fn ssim_global(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len("ssim", x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    Ok(ssim_from_moments(mx, my, vx / n, vy / n, cxy / n))
}

/// Separable valid-mode correlation of an `h×w` image with `k` on both axes.
fn filter2(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = k.iter().enumerate().map(|(i, &kv)| kv * img[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = k.iter().enumerate().map(|(i, &kv)| kv * rows[(r + i) * wo + c]).sum();
        }
    }
    out
}

/// Mean SSIM of two `h×w` images over every position of an 11×11 Gaussian
/// window (σ = 1.5) that fits inside the image. Images smaller than the
/// window fall back to [`ssim_global`].
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    check_len("ssim", x, y)?;
    if x.len() != h * w {
        return Err(Error::ElementCount {
            op: "ssim",
            expected: h * w,
            actual: x.len(),
        });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return ssim_global(x, y);
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, my) = (filter2(x, h, w, &k), filter2(y, h, w, &k));
    let (sxx, syy, sxy) = (filter2(&xx, h, w, &k), filter2(&yy, h, w, &k), filter2(&xy, h, w, &k));
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        total += ssim_from_moments(a, b, sxx[i] - a * a, syy[i] - b * b, sxy[i] - a * b);
    }
    Ok(total / mx.len() as f64)
}

/// Mean SSIM over every `H×W` slice of two tensors shaped `[..., H, W]`.
pub fn ssim_volume(pred: &Tensor<f64>, obs: &Tensor<f64>) -> Result<f64> {
    if pred.shape() != obs.shape() || pred.rank() < 2 {
        return Err(Error::dim(
            "ssim_volume",
            "shape",
            format!("{:?} vs {:?}", pred.shape(), obs.shape()),
        ));
    }
    let s = pred.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let slices = pred.numel() / (h * w);
    let mut total = 0.0;
    for i in 0..slices {
        let r = i * h * w..(i + 1) * h * w;
        total += ssim(&pred.data()[r.clone()], &obs.data()[r], h, w)?;
    }
    Ok(total / slices as f64)
}

/// 2×2 contingency counts after binarization at one threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ContingencyTable {
    pub hits: u64,
    pub false_alarms: u64,
    pub misses: u64,
    pub correct_negatives: u64,
}

impl ContingencyTable {
    pub fn from_fields(pred: &[f64], obs: &[f64], tau: f64) -> Result<Self> {
        check_len("contingency", pred, obs)?;
        let mut t = ContingencyTable::default();
        t.add(pred, obs, tau);
        Ok(t)
    }

    fn add(&mut self, pred: &[f64], obs: &[f64], tau: f64) {
        for (&p, &o) in pred.iter().zip(obs) {
            match (binarize(p, tau), binarize(o, tau)) {
                (1, 1) => self.hits += 1,
                (1, 0) => self.false_alarms += 1,
                (0, 1) => self.misses += 1,
                _ => self.correct_negatives += 1,
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.hits + self.false_alarms + self.misses + self.correct_negatives
    }

    pub fn merge(&mut self, other: &ContingencyTable) {
        self.hits += other.hits;
        self.false_alarms += other.false_alarms;
        self.misses += other.misses;
        self.correct_negatives += other.correct_negatives;
    }

    pub fn csi(&self) -> f64 {
        ratio(self.hits as f64, (self.hits + self.false_alarms + self.misses) as f64)
    }

    pub fn pod(&self) -> f64 {
        ratio(self.hits as f64, (self.hits + self.misses) as f64)
    }

    pub fn hss(&self) -> f64 {
        let (a, b, c, d) = (
            self.hits as f64,
            self.false_alarms as f64,
            self.misses as f64,
            self.correct_negatives as f64,
        );
        ratio(2.0 * (a * d - b * c), (a + c) * (c + d) + (a + b) * (b + d))
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Scores of one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdScores {
    pub tau: f64,
    pub csi: f64,
    pub pod: f64,
    pub hss: f64,
}

/// Aggregate scores of one model over an evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub model: String,
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub thresholds: Vec<ThresholdScores>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "model,threshold,mse,mae,rmse,ssim,csi,pod,hss";

    /// One CSV row per threshold, without header.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for t in &self.thresholds {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                self.model, t.tau, self.mse, self.mae, self.rmse, self.ssim, t.csi, t.pod, t.hss
            )
            .unwrap();
        }
        s
    }

    pub fn to_csv(reports: &[MetricReport]) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in reports {
            s.push_str(&r.csv_rows());
        }
        s
    }
}

/// Streaming accumulator: feed forecast/target batches, then [`finish`].
///
/// [`finish`]: MetricAccumulator::finish
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    sq: f64,
    abs: f64,
    count: u64,
    ssim_sum: f64,
    ssim_count: u64,
    tables: Vec<(f64, ContingencyTable)>,
}

impl Default for MetricAccumulator {
    fn default() -> Self {
        Self::new(&THRESHOLDS)
    }
}

impl MetricAccumulator {
    pub fn new(thresholds: &[f64]) -> Self {
        MetricAccumulator {
            sq: 0.0,
            abs: 0.0,
            count: 0,
            ssim_sum: 0.0,
            ssim_count: 0,
            tables: thresholds.iter().map(|&t| (t, ContingencyTable::default())).collect(),
        }
    }

    /// Add a batch of fields shaped `[..., H, W]`.
    pub fn add(&mut self, pred: &Tensor<f64>, obs: &Tensor<f64>) -> Result<()> {
        if pred.shape() != obs.shape() || pred.rank() < 2 {
            return Err(Error::dim(
                "metrics",
                "shape",
                format!("{:?} vs {:?}", pred.shape(), obs.shape()),
            ));
        }
        for (&p, &o) in pred.data().iter().zip(obs.data()) {
            self.sq += (p - o) * (p - o);
            self.abs += (p - o).abs();
        }
        self.count += pred.numel() as u64;
        let s = pred.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let slices = pred.numel() / (h * w);
        for i in 0..slices {
            let r = i * h * w..(i + 1) * h * w;
            self.ssim_sum += ssim(&pred.data()[r.clone()], &obs.data()[r], h, w)?;
        }
        self.ssim_count += slices as u64;
        for (tau, t) in &mut self.tables {
            t.add(pred.data(), obs.data(), *tau);
        }
        Ok(())
    }

    pub fn finish(&self, model: &str) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::Data("no fields were scored".into()));
        }
        let mse = self.sq / self.count as f64;
        Ok(MetricReport {
            model: model.to_string(),
            mse,
            mae: self.abs / self.count as f64,
            rmse: mse.sqrt(),
            ssim: self.ssim_sum / self.ssim_count as f64,
            thresholds: self
                .tables
                .iter()
                .map(|(tau, t)| ThresholdScores {
                    tau: *tau,
                    csi: t.csi(),
                    pod: t.pod(),
                    hss: t.hss(),
                })
                .collect(),
        })
    }
}

/// Repeat the last input frame of `x[B,T_in,...]` `t_out` times.
pub fn persistence_baseline(x: &Tensor<f64>, t_out: usize) -> Result<Tensor<f64>> {
    let s = x.shape();
    if s.len() < 2 || t_out == 0 {
        return Err(Error::dim(
            "persistence",
            "shape",
            format!("need [B,T_in,...], got {s:?}"),
        ));
    }
    let (b, t_in) = (s[0], s[1]);
    let frame: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(b * t_out * frame);
    for bi in 0..b {
        let last = &x.data()[(bi * t_in + t_in - 1) * frame..(bi * t_in + t_in) * frame];
        for _ in 0..t_out {
            out.extend_from_slice(last);
        }
    }
    let mut shape = s.to_vec();
    shape[1] = t_out;
    Tensor::new(shape, out)
}

/// Pearson correlation between every pair of columns of `features[N,M]`.
/// Zero-variance columns correlate 0 with everything but themselves.
pub fn coherence_matrix(features: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::dim("coherence", "rank", format!("expected [N,M], got {s:?}")));
    }
    let (n, m) = (s[0], s[1]);
    if n < 2 {
        return Err(Error::Data(format!("coherence needs at least 2 samples, got {n}")));
    }
    let cols: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..n).map(|i| features.data()[i * m + j]).collect())
        .collect();
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        out[i * m + i] = 1.0;
        for j in i + 1..m {
            let r = pearson(&cols[i], &cols[j]);
            out[i * m + j] = r;
            out[j * m + i] = r;
        }
    }
    Tensor::new(vec![m, m], out)
}
