//! Entanglement topology: which qubit pairs receive a CNOT in every layer.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered list of directed `(control, target)` pairs. Gates are applied in
/// list order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EntanglementGraph {
    qubits: usize,
    edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TopologyKind {
    Chain,
    #[default]
    Ring,
    /// Rule-based selector driven by channel-group correlations of the latent.
    Correlation,
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain" => Ok(TopologyKind::Chain),
            "ring" => Ok(TopologyKind::Ring),
            "correlation" => Ok(TopologyKind::Correlation),
            other => Err(Error::Config(format!(
                "unknown topology `{other}` (chain|ring|correlation)"
            ))),
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TopologyKind::Chain => "chain",
            TopologyKind::Ring => "ring",
            TopologyKind::Correlation => "correlation",
        })
    }
}

/// Default absolute Pearson correlation above which two qubit groups are
/// linked.
pub const DEFAULT_CORRELATION_THRESHOLD: f64 = 0.5;

impl EntanglementGraph {
    /// Graph with an explicit edge list, applied in the given order.
    pub fn from_edges(qubits: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        for (i, &(c, t)) in edges.iter().enumerate() {
            if c >= qubits || t >= qubits {
                return Err(Error::Contract(format!(
                    "edge ({c},{t}) references a qubit outside 0..{qubits}"
                )));
            }
            if c == t {
                return Err(Error::Contract(format!("edge ({c},{t}) has control == target")));
            }
            if edges[..i].contains(&(c, t)) {
                return Err(Error::Contract(format!("duplicate edge ({c},{t})")));
            }
        }
        Ok(EntanglementGraph { qubits, edges })
    }

    /// Graph with no entangling gates.
    pub fn empty(qubits: usize) -> Self {
        EntanglementGraph {
            qubits,
            edges: Vec::new(),
        }
    }

    pub fn chain(qubits: usize) -> Result<Self> {
        check_qubits(qubits)?;
        Ok(EntanglementGraph {
            qubits,
            edges: (0..qubits - 1).map(|i| (i, i + 1)).collect(),
        })
    }

    pub fn ring(qubits: usize) -> Result<Self> {
        let mut g = Self::chain(qubits)?;
        g.edges.push((qubits - 1, 0));
        Ok(g)
    }

    /// Correlation selector over a latent `[B, (T,) C, H, W]` (channels on
    /// axis −3).
    ///
    /// Channel `c` joins group `c % qubits`. Each group yields one signal: the
    /// mean over its channels, indexed by every batch/time/space position.
    /// Groups whose signals correlate with |r| ≥ `threshold` are linked
    /// (lower index controls). With fewer than `qubits − 1` such links the
    /// chain is used; otherwise isolated qubits get their chain edge.
    pub fn correlation<T: Scalar>(qubits: usize, latent: &Tensor<T>, threshold: f64) -> Result<Self> {
        check_qubits(qubits)?;
        let signals = group_signals(qubits, latent)?;
        let mut edges = Vec::new();
        for i in 0..qubits {
            for j in i + 1..qubits {
                if pearson(&signals[i], &signals[j]).abs() >= threshold {
                    edges.push((i, j));
                }
            }
        }
        if edges.len() < qubits - 1 {
            return Self::chain(qubits);
        }
        for v in 0..qubits {
            if !edges.iter().any(|&(c, t)| c == v || t == v) {
                let e = if v + 1 < qubits { (v, v + 1) } else { (v - 1, v) };
                if !edges.contains(&e) {
                    edges.push(e);
                }
            }
        }
        edges.sort_by_key(|&(c, t)| (c.min(t), c.max(t), c));
        Ok(EntanglementGraph { qubits, edges })
    }

    pub fn build<T: Scalar>(
        kind: TopologyKind,
        qubits: usize,
        latent: Option<&Tensor<T>>,
        threshold: f64,
    ) -> Result<Self> {
        match kind {
            TopologyKind::Chain => Self::chain(qubits),
            TopologyKind::Ring => Self::ring(qubits),
            TopologyKind::Correlation => {
                let latent =
                    latent.ok_or_else(|| Error::Contract("correlation topology needs a latent tensor".into()))?;
                Self::correlation(qubits, latent, threshold)
            }
        }
    }

    pub fn qubits(&self) -> usize {
        self.qubits
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

fn check_qubits(qubits: usize) -> Result<()> {
    if qubits < 2 {
        return Err(Error::Contract(format!(
            "topology needs at least 2 qubits, got {qubits}"
        )));
    }
    Ok(())
}

/// Per-group channel-mean signals, flattened over the non-channel axes.
pub(crate) fn group_signals<T: Scalar>(qubits: usize, latent: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let s = latent.shape();
    if s.len() < 3 {
        return Err(Error::dim(
            "topology",
            "rank",
            format!("latent must have a channel axis, got {s:?}"),
        ));
    }
    let c_axis = s.len() - 3;
    let channels = s[c_axis];
    if channels < qubits {
        return Err(Error::dim(
            "topology",
            format!("axis {c_axis} (channels)"),
            format!("{channels} channels cannot fill {qubits} groups"),
        ));
    }
    let outer: usize = s[..c_axis].iter().product();
    let inner: usize = s[c_axis + 1..].iter().product();
    let data = latent.data();
    let mut signals = vec![vec![0.0; outer * inner]; qubits];
    let mut counts = vec![0usize; qubits];
    for c in 0..channels {
        counts[c % qubits] += 1;
    }
    for o in 0..outer {
        for c in 0..channels {
            let g = c % qubits;
            let base = (o * channels + c) * inner;
            for p in 0..inner {
                signals[g][o * inner + p] += data[base + p].as_f64() / counts[g] as f64;
            }
        }
    }
    Ok(signals)
}

/// Pearson correlation; 0 when either series has zero variance.
pub(crate) fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chain_and_ring_edges() {
        assert_eq!(EntanglementGraph::chain(4).unwrap().edges(), &[(0, 1), (1, 2), (2, 3)]);
        assert_eq!(EntanglementGraph::ring(3).unwrap().edges(), &[(0, 1), (1, 2), (2, 0)]);
        for q in 2..10 {
            assert_eq!(EntanglementGraph::chain(q).unwrap().len(), q - 1);
            assert_eq!(EntanglementGraph::ring(q).unwrap().len(), q);
        }
    }

    #[test]
    fn too_few_qubits_rejected() {
        assert!(EntanglementGraph::chain(1).is_err());
        assert!(EntanglementGraph::build::<f64>(TopologyKind::Correlation, 4, None, 0.5).is_err());
    }

    #[test]
    fn explicit_edges_validated() {
        assert!(EntanglementGraph::from_edges(3, vec![(0, 3)]).is_err());
        assert!(EntanglementGraph::from_edges(3, vec![(1, 1)]).is_err());
        assert!(EntanglementGraph::from_edges(3, vec![(0, 1), (0, 1)]).is_err());
        assert!(EntanglementGraph::from_edges(3, vec![(0, 1), (1, 0)]).is_ok());
    }

    fn latent_with_copied_groups(seed: u64) -> Tensor<f64> {
        // q = 4 groups, 8 channels: group g holds channels g and g + 4.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, c, h, w) = (3, 8, 5, 5);
        let mut t = Tensor::from_fn(vec![b, c, h, w], |_| rng.gen::<f64>());
        let d = t.data_mut();
        for bi in 0..b {
            for &ch in &[1usize, 5] {
                let src = (bi * c + ch - 1) * h * w;
                let dst = (bi * c + ch) * h * w;
                for p in 0..h * w {
                    d[dst + p] = d[src + p];
                }
            }
        }
        t
    }

    #[test]
    fn correlated_groups_are_linked() {
        let latent = latent_with_copied_groups(7);
        let signals = group_signals(4, &latent).unwrap();
        // direct check of the statistic the selector uses
        assert!((pearson(&signals[0], &signals[1]) - 1.0).abs() < 1e-12);
        let g = EntanglementGraph::correlation(4, &latent, 0.5).unwrap();
        assert!(g.edges().contains(&(0, 1)));
        for v in 0..4 {
            assert!(g.edges().iter().any(|&(c, t)| c == v || t == v), "qubit {v} isolated");
        }
    }

    #[test]
    fn correlation_is_deterministic_and_connected() {
        let latent = latent_with_copied_groups(11);
        let a = EntanglementGraph::correlation(4, &latent, 0.5).unwrap();
        let b = EntanglementGraph::correlation(4, &latent, 0.5).unwrap();
        assert_eq!(a, b);
        // only one strong pair out of 3 required: falls back to the chain
        assert_eq!(a, EntanglementGraph::chain(4).unwrap());
        // a tiny threshold links everything and keeps lexicographic order
        let all = EntanglementGraph::correlation(4, &latent, 0.0).unwrap();
        assert_eq!(all.edges(), &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn isolated_qubits_get_chain_edges() {
        // groups 0,1,2 perfectly correlated, group 3 constant (r = 0 with all)
        let (b, c, h, w) = (2, 4, 3, 3);
        let t = Tensor::from_fn(vec![b, c, h, w], |i| {
            let ch = (i / (h * w)) % c;
            if ch == 3 {
                0.25
            } else {
                (i % (h * w)) as f64 + (i / (c * h * w)) as f64
            }
        });
        let g = EntanglementGraph::correlation(4, &t, 0.5).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 2), (1, 2), (2, 3)]);
    }
}
