//! Cloud-field series: synthetic plume generator, CVT files and sliding
//! windows.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{fnv1a64, Reader};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const CVT_MAGIC: [u8; 4] = *b"CVT1";
pub const CVT_VERSION: u32 = 1;
pub const GENERATOR_VERSION: u32 = 1;

/// One sequence of volumetric frames, values in `[0, 1]`, layout `[T,C,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudVolumeSeries {
    pub values: Tensor<f64>,
    /// Generator seed, when the series was synthesized in this process.
    pub seed: Option<u64>,
    pub generator_version: Option<u32>,
}

impl CloudVolumeSeries {
    pub fn new(values: Tensor<f64>) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::Data(format!(
                "series must be [T,C,H,W], got {:?}",
                values.shape()
            )));
        }
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("series value {v} outside [0,1]")));
        }
        Ok(CloudVolumeSeries {
            values,
            seed: None,
            generator_version: None,
        })
    }

    /// `[T, C, H, W]`.
    pub fn dims(&self) -> [usize; 4] {
        let s = self.values.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn frames(&self) -> usize {
        self.dims()[0]
    }

    fn frame_len(&self) -> usize {
        let [_, c, h, w] = self.dims();
        c * h * w
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.values.data()[t * n..(t + 1) * n]
    }
}

/// Ranges the plume generator samples from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub min_plumes: usize,
    pub max_plumes: usize,
    /// Horizontal drift bound, cells per frame.
    pub max_drift: f64,
    /// Per-frame relative radius growth is drawn from this range.
    pub growth: (f64, f64),
    /// Horizontal center offset per vertical level.
    pub max_tilt: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            min_plumes: 3,
            max_plumes: 6,
            max_drift: 2.0,
            growth: (-0.04, 0.08),
            max_tilt: 0.5,
        }
    }
}

impl GeneratorConfig {
    /// No drift and no growth: every frame of a sequence is identical.
    pub fn frozen() -> Self {
        GeneratorConfig {
            max_drift: 0.0,
            growth: (0.0, 0.0),
            ..Self::default()
        }
    }
}

struct Plume {
    center: [f64; 3],
    radius: [f64; 3],
    velocity: [f64; 2],
    tilt: [f64; 2],
    growth: f64,
    amplitude: f64,
}

fn sample_range(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

impl Plume {
    fn sample(rng: &mut impl Rng, c: usize, h: usize, w: usize, cfg: &GeneratorConfig) -> Self {
        let (c, h, w) = (c as f64, h as f64, w as f64);
        Plume {
            center: [rng.gen_range(0.0..c), rng.gen_range(0.0..h), rng.gen_range(0.0..w)],
            radius: [
                sample_range(rng, c / 6.0, c / 2.0).max(0.75),
                sample_range(rng, h / 12.0, h / 5.0).max(1.0),
                sample_range(rng, w / 12.0, w / 5.0).max(1.0),
            ],
            velocity: [
                sample_range(rng, -cfg.max_drift, cfg.max_drift),
                sample_range(rng, -cfg.max_drift, cfg.max_drift),
            ],
            tilt: [
                sample_range(rng, -cfg.max_tilt, cfg.max_tilt),
                sample_range(rng, -cfg.max_tilt, cfg.max_tilt),
            ],
            growth: sample_range(rng, cfg.growth.0, cfg.growth.1),
            amplitude: rng.gen_range(0.7..1.3),
        }
    }

    fn value(&self, t: f64, z: f64, y: f64, x: f64) -> f64 {
        let scale = (1.0 + self.growth * t).max(0.2);
        let dz = z - self.center[0];
        let cy = self.center[1] + self.velocity[0] * t + self.tilt[0] * dz;
        let cx = self.center[2] + self.velocity[1] * t + self.tilt[1] * dz;
        let (rz, ry, rx) = (self.radius[0], self.radius[1] * scale, self.radius[2] * scale);
        let r2 = (dz / rz).powi(2) + ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2);
        self.amplitude * (-0.5 * r2).exp()
    }
}

/// `n` plume sequences of shape `[T,C,H,W]`, deterministic in `seed`.
/// Values are rounded to `f32` precision so they survive a CVT round trip.
pub fn generate(n: usize, dims: [usize; 4], seed: u64, cfg: &GeneratorConfig) -> Result<Vec<CloudVolumeSeries>> {
    let [t, c, h, w] = dims;
    if dims.iter().any(|&d| d < 4) {
        return Err(Error::Config(format!(
            "generator extents {dims:?} must all be at least 4"
        )));
    }
    if cfg.min_plumes == 0 || cfg.min_plumes > cfg.max_plumes {
        return Err(Error::Config("plume count range is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.gen_range(cfg.min_plumes..=cfg.max_plumes);
        let plumes: Vec<Plume> = (0..k).map(|_| Plume::sample(&mut rng, c, h, w, cfg)).collect();
        let values = Tensor::from_fn(vec![t, c, h, w], |i| {
            let (ti, rest) = (i / (c * h * w), i % (c * h * w));
            let (zi, yi, xi) = (rest / (h * w), (rest / w) % h, rest % w);
            let v = plumes
                .iter()
                .map(|p| p.value(ti as f64, zi as f64, yi as f64, xi as f64))
                .fold(0.0, f64::max);
            v.clamp(0.0, 1.0) as f32 as f64
        });
        out.push(CloudVolumeSeries {
            values,
            seed: Some(seed),
            generator_version: Some(GENERATOR_VERSION),
        });
    }
    Ok(out)
}

/// Parse `TxCxHxW`.
pub fn parse_dims(s: &str) -> Result<[usize; 4]> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 4 {
        return Err(Error::Config(format!("dims `{s}` must look like TxCxHxW")));
    }
    let mut d = [0usize; 4];
    for (slot, p) in d.iter_mut().zip(&parts) {
        *slot = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("dims `{s}`: `{p}` is not a positive integer")))?;
        if *slot == 0 {
            return Err(Error::Config(format!("dims `{s}` has a zero extent")));
        }
    }
    Ok(d)
}

pub fn encode_cvt(series: &CloudVolumeSeries) -> Vec<u8> {
    let dims = series.dims();
    let mut payload = Vec::with_capacity(series.values.numel() * 4);
    for &v in series.values.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut out = Vec::with_capacity(payload.len() + 32);
    out.extend_from_slice(&CVT_MAGIC);
    out.extend_from_slice(&CVT_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    out
}

pub fn decode_cvt(bytes: &[u8]) -> Result<CloudVolumeSeries> {
    let mut r = Reader::new(bytes);
    r.magic(CVT_MAGIC)?;
    let version = r.u32()?;
    if version != CVT_VERSION {
        return Err(FormatError::Version {
            expected: CVT_VERSION,
            found: version,
        }
        .into());
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    if dims.contains(&0) {
        return Err(FormatError::Shape(format!("zero extent in {dims:?}")).into());
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::Shape(format!("extents {dims:?} overflow")))?;
    if r.remaining() > count + 8 {
        return Err(FormatError::Shape(format!(
            "header {dims:?} implies {count} payload bytes, file carries {}",
            r.remaining() - 8
        ))
        .into());
    }
    let payload = r.take(count)?;
    let stored = r.u64()?;
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    CloudVolumeSeries::new(Tensor::new(dims.to_vec(), data)?)
}

pub fn write_cvt(series: &CloudVolumeSeries, path: &Path) -> Result<()> {
    fs::write(path, encode_cvt(series))?;
    Ok(())
}

pub fn read_cvt(path: &Path) -> Result<CloudVolumeSeries> {
    decode_cvt(&fs::read(path)?)
}

/// File name of sequence `i` inside a dataset directory.
pub fn sequence_file_name(i: usize) -> String {
    format!("seq_{i:05}.cvt")
}

/// Write every series as `seq_NNNNN.cvt` under `dir`.
pub fn write_dataset(series: &[CloudVolumeSeries], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(series.len());
    for (i, s) in series.iter().enumerate() {
        let p = dir.join(sequence_file_name(i));
        write_cvt(s, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Read a single CVT file, or every `.cvt` file of a directory in name order.
pub fn read_dataset(path: &Path) -> Result<Vec<CloudVolumeSeries>> {
    if path.is_file() {
        return Ok(vec![read_cvt(path)?]);
    }
    if !path.is_dir() {
        return Err(Error::Data(format!("no dataset at {}", path.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "cvt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no .cvt files in {}", path.display())));
    }
    let series = files.iter().map(|p| read_cvt(p)).collect::<Result<Vec<_>>>()?;
    let dims = series[0].dims();
    if let Some(s) = series.iter().find(|s| s.dims()[1..] != dims[1..]) {
        return Err(Error::Data(format!(
            "mixed grids in dataset: {:?} vs {:?}",
            &dims[1..],
            &s.dims()[1..]
        )));
    }
    Ok(series)
}

/// Input frames `[T_in,C,H,W]` and target frames `[T_out,C,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub input: Tensor<f64>,
    pub target: Tensor<f64>,
}

/// Sliding windows: sample `k` reads frames `[k·stride, k·stride+T_in)` and
/// predicts the following `T_out`.
pub fn windows(series: &CloudVolumeSeries, t_in: usize, t_out: usize, stride: usize) -> Result<Vec<SequenceSample>> {
    let [t, c, h, w] = series.dims();
    if t_in == 0 || t_out == 0 || stride == 0 {
        return Err(Error::Config("t_in, t_out and stride must be positive".into()));
    }
    if t < t_in + t_out {
        return Err(Error::Data(format!(
            "series has {t} frames, a window needs {}",
            t_in + t_out
        )));
    }
    let f = c * h * w;
    let d = series.values.data();
    let mut out = Vec::new();
    let mut k = 0;
    while k + t_in + t_out <= t {
        let input = Tensor::new(vec![t_in, c, h, w], d[k * f..(k + t_in) * f].to_vec())?;
        let target = Tensor::new(vec![t_out, c, h, w], d[(k + t_in) * f..(k + t_in + t_out) * f].to_vec())?;
        out.push(SequenceSample { input, target });
        k += stride;
    }
    Ok(out)
}

/// Stack samples into `([B,T_in,C,H,W], [B,T_out,C,H,W])`.
pub fn stack(samples: &[&SequenceSample]) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
    let mut xs = Vec::with_capacity(samples.len() * first.input.numel());
    let mut ys = Vec::with_capacity(samples.len() * first.target.numel());
    for s in samples {
        if s.input.shape() != first.input.shape() || s.target.shape() != first.target.shape() {
            return Err(Error::Data("samples in a batch differ in shape".into()));
        }
        xs.extend_from_slice(s.input.data());
        ys.extend_from_slice(s.target.data());
    }
    let mut xshape = vec![samples.len()];
    xshape.extend_from_slice(first.input.shape());
    let mut yshape = vec![samples.len()];
    yshape.extend_from_slice(first.target.shape());
    Ok((Tensor::new(xshape, xs)?, Tensor::new(yshape, ys)?))
}
