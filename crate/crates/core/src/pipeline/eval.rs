use std::fmt::Write as _;

use super::model::Model;
use super::train::cast;
use crate::data::{self, SequenceSample};
use crate::error::{Error, Result};
use crate::metrics::{persistence_baseline, MetricAccumulator, MetricReport};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn widen<T: Scalar>(t: &Tensor<T>) -> Tensor<f64> {
    let d = t.data();
    Tensor::from_fn(t.shape().to_vec(), |i| d[i].as_f64())
}

/// Score the model's forecasts over `samples`.
pub fn model_report<T: Scalar>(
    model: &mut Model<T>,
    samples: &[SequenceSample],
    batch: usize,
    name: &str,
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SequenceSample> = chunk.iter().collect();
        let (x, y) = data::stack(&refs)?;
        let yhat = widen(&model.predict(&cast::<T>(&x))?);
        acc.add(&yhat, &y)?;
    }
    acc.finish(name)
}

/// Score the repeat-last-frame forecast over `samples`.
pub fn persistence_report(samples: &[SequenceSample], name: &str) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    for s in samples {
        let t_out = s.target.shape()[0];
        let mut shape = vec![1];
        shape.extend_from_slice(s.input.shape());
        let x = s.input.reshaped(shape)?;
        let p = persistence_baseline(&x, t_out)?.reshaped(s.target.shape().to_vec())?;
        acc.add(&p, &s.target)?;
    }
    acc.finish(name)
}

/// Final fused hidden state of every sample, `[N, D_h]`.
pub fn hidden_features<T: Scalar>(
    model: &mut Model<T>,
    samples: &[SequenceSample],
    batch: usize,
) -> Result<Tensor<f64>> {
    if samples.is_empty() {
        return Err(Error::Data("no samples".into()));
    }
    let mut rows = Vec::new();
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SequenceSample> = chunk.iter().collect();
        let (x, _) = data::stack(&refs)?;
        let (_, h) = model.predict_with_hidden(&cast::<T>(&x))?;
        rows.extend(h.data().iter().map(|v| v.as_f64()));
    }
    let d = model.config.dftu.d_h;
    Tensor::new(vec![samples.len(), d], rows)
}

/// One row per report: pointwise scores plus threshold scores averaged over
/// the thresholds.
pub fn summary_table(reports: &[MetricReport]) -> String {
    let mut s = String::from("model,mse,mae,rmse,ssim,mean_csi,mean_pod,mean_hss\n");
    for r in reports {
        let n = r.thresholds.len().max(1) as f64;
        let (csi, pod, hss) = r
            .thresholds
            .iter()
            .fold((0.0, 0.0, 0.0), |a, t| (a.0 + t.csi, a.1 + t.pod, a.2 + t.hss));
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.model,
            r.mse,
            r.mae,
            r.rmse,
            r.ssim,
            csi / n,
            pod / n,
            hss / n
        )
        .unwrap();
    }
    s
}
