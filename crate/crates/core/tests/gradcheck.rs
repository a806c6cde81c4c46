mod common;

use common::ops::{self, H};
use common::{gradcheck, random_tensor};
use qeno::teqe::TeqeConfig;
use qeno::topology::EntanglementGraph;
use qeno::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;
const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    for (name, shapes, f) in ops::cases() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| ops::away_from_zero(s, &mut rng)).collect();
            let err = common::worst_fd_error(&gradcheck(&inputs, f.as_ref(), seed + 100, H));
            assert!(err < TOL, "{name} seed {seed}: rel err {err:e}");
        }
    }
}

#[test]
fn quantum_readout_matches_finite_differences() {
    let cfg = TeqeConfig {
        qubits: 4,
        layers: 2,
        ..TeqeConfig::default()
    };
    let graph = EntanglementGraph::ring(4).unwrap();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases = random_tensor(&[2, cfg.n_phases()], 0.2, 2.9, &mut rng);
        // last-layer RZ phases commute with every Z readout, so some true
        // gradients are exactly zero and need an absolute floor
        for (a, n) in gradcheck(&[phases], &|g, v| cfg.readout(g, v[0], &graph).unwrap(), seed, H) {
            let err = common::rel_err(a, n, 1e-6);
            assert!(err < TOL, "seed {seed}: analytic {a:e} numeric {n:e}");
        }
    }
}

#[test]
fn full_model_backward_matches_finite_differences() {
    let err = ops::micro_model_worst_error();
    assert!(err < 1e-3, "worst rel err {err:e}");
}
