use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::Model;
use super::optim::{clip_grad_norm, Adam};
use crate::data::{self, CloudVolumeSeries, SequenceSample};
use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: f64,
    /// Fraction of whole sequences held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch: 8,
            lr: 1e-3,
            seed: 42,
            clip_norm: 1.0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr = {} must be a finite non-negative number",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,train_mse,val_mse";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            writeln!(s, "{},{},{}", r.epoch, r.train_mse, r.val_mse).unwrap();
        }
        s
    }

    /// Record with the lowest validation error (earliest on ties).
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_mse <= r.val_mse => Some(b),
                _ => Some(r),
            })
    }
}

/// Whole-sequence split. Returns `(train, val)` indices, each sorted.
pub fn split_sequences(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if n >= 2 && val_fraction > 0.0 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Windowed samples of the selected sequences, in sequence order.
pub fn samples_of(
    series: &[CloudVolumeSeries],
    indices: &[usize],
    t_in: usize,
    t_out: usize,
) -> Result<Vec<SequenceSample>> {
    let mut out = Vec::new();
    for &i in indices {
        out.extend(data::windows(&series[i], t_in, t_out, 1)?);
    }
    Ok(out)
}

pub fn cast<T: Scalar>(t: &Tensor<f64>) -> Tensor<T> {
    let d = t.data();
    Tensor::from_fn(t.shape().to_vec(), |i| T::lit(d[i]))
}

/// Mean squared error of the model over `samples`, accumulated in `f64`.
pub fn evaluate_mse<T: Scalar>(model: &mut Model<T>, samples: &[SequenceSample], batch: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SequenceSample> = chunk.iter().collect();
        let (x, y) = data::stack(&refs)?;
        let yhat = model.predict(&cast::<T>(&x))?;
        for (p, t) in yhat.data().iter().zip(y.data()) {
            let d = p.as_f64() - t;
            sum += d * d;
        }
        count += y.numel();
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone)]
pub struct TrainReport<T> {
    /// Parameters at the epoch with the lowest validation error.
    pub best: ModelParams<T>,
    pub best_epoch: usize,
    pub history: History,
    pub steps: u64,
}

fn non_finite_error<T: Scalar>(g: &Graph<T>, pv: &ParamVars, params: &ModelParams<T>, what: &str) -> Error {
    if let Some(name) = params.first_non_finite() {
        return Error::NonFinite {
            tensor: name.to_string(),
        };
    }
    if let Some((var, op)) = g.first_non_finite() {
        if let Some((name, _)) = pv.iter().find(|(_, v)| *v == var) {
            return Error::NonFinite {
                tensor: name.to_string(),
            };
        }
        return Error::NonFinite {
            tensor: format!("{op} output (node {})", var.index()),
        };
    }
    Error::NonFinite {
        tensor: what.to_string(),
    }
}

/// Train `model` in place on `series`. Epochs are numbered from
/// `first_epoch`; `on_epoch` sees every record as it is produced. The model
/// is left holding the best-validation parameters.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    series: &[CloudVolumeSeries],
    cfg: &TrainConfig,
    first_epoch: usize,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    if series.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let (t_in, t_out) = (model.config.t_in, model.config.t_out);
    let (train_idx, val_idx) = split_sequences(series.len(), cfg.val_fraction, cfg.seed);
    let train_samples = samples_of(series, &train_idx, t_in, t_out)?;
    let val_samples = if val_idx.is_empty() {
        train_samples.clone()
    } else {
        samples_of(series, &val_idx, t_in, t_out)?
    };
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut history = History::default();
    let mut best = model.params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = first_epoch;
    for e in 0..cfg.epochs {
        let epoch = first_epoch + e;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            if let Some(name) = model.params.first_non_finite() {
                return Err(Error::NonFinite {
                    tensor: name.to_string(),
                });
            }
            let refs: Vec<&SequenceSample> = chunk.iter().map(|&i| &train_samples[i]).collect();
            let (x, y) = data::stack(&refs)?;
            let mut g = Graph::new();
            let pv = model.params.bind(&mut g, true);
            let xv = g.constant(cast(&x));
            let yv = g.constant(cast(&y));
            let out = model.forward(&mut g, &pv, xv)?;
            let loss = g.mse_loss(out.forecast, yv)?;
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(non_finite_error(&g, &pv, &model.params, "loss"));
            }
            g.backward(loss)?;
            let mut grads = Vec::with_capacity(model.params.len());
            for ((name, var), (_, p)) in pv.iter().zip(model.params.iter()) {
                let grad = match g.grad(var) {
                    Some(gr) => gr.to_vec(),
                    None => vec![T::zero(); p.numel()],
                };
                if grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        tensor: format!("gradient of {name}"),
                    });
                }
                grads.push(grad);
            }
            clip_grad_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut model.params, &grads)?;
            if let Some(name) = model.params.first_non_finite() {
                return Err(Error::NonFinite {
                    tensor: name.to_string(),
                });
            }
            loss_sum += lv * chunk.len() as f64;
        }
        let train_mse = loss_sum / train_samples.len() as f64;
        let val_mse = evaluate_mse(model, &val_samples, cfg.batch)?;
        if !val_mse.is_finite() {
            return Err(Error::NonFinite {
                tensor: "validation forecast".into(),
            });
        }
        let rec = EpochRecord {
            epoch,
            train_mse,
            val_mse,
        };
        on_epoch(&rec);
        history.records.push(rec);
        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best = model.params.clone();
        }
    }
    model.params = best.clone();
    Ok(TrainReport {
        best,
        best_epoch,
        history,
        steps: opt.steps(),
    })
}
