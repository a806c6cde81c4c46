mod common;

use qeno::data::{self, CloudVolumeSeries, GeneratorConfig};
use qeno::pipeline::eval::model_report;
use qeno::pipeline::train::samples_of;
use qeno::pipeline::{load_model, save_model, train, Ablation, CheckpointMeta, Model, ModelConfig, TrainConfig};
use qeno::teqe::TeqeConfig;
use qeno::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        channels: 4,
        height: 8,
        width: 8,
        t_in: 3,
        t_out: 2,
        c_hid: 4,
        strides: vec![1, 2],
        teqe: TeqeConfig {
            qubits: 4,
            layers: 1,
            ..TeqeConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn small_data(n: usize, frames: usize, seed: u64) -> Vec<CloudVolumeSeries> {
    data::generate(n, [frames, 4, 8, 8], seed, &GeneratorConfig::default()).unwrap()
}

fn quiet() -> impl FnMut(&qeno::pipeline::EpochRecord) {
    |_| {}
}

#[test]
fn overfits_a_single_sample() {
    let series = small_data(1, 5, 3);
    let mut model = Model::<f64>::new(small_config(), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch: 1,
        lr: 3e-3,
        seed: 0,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &series, &cfg, 1, &mut quiet()).unwrap();
    assert_eq!(report.steps, 200);
    let first = report.history.records[0].train_mse;
    let best = report.history.best().unwrap().val_mse;
    assert!(best < 0.1 * first, "initial {first}, best {best}");
}

#[test]
fn zero_learning_rate_keeps_parameters_bit_exact() {
    let series = small_data(3, 6, 4);
    let mut model = Model::<f64>::new(small_config(), 2).unwrap();
    let before = model.params.clone();
    let cfg = TrainConfig {
        epochs: 2,
        batch: 2,
        lr: 0.0,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &series, &cfg, 1, &mut quiet()).unwrap();
    assert!(report.steps > 0);
    assert_eq!(model.params, before);
}

#[test]
fn no_qemid_ignores_enhancer_parameters() {
    let mut cfg = small_config();
    cfg.ablation = Ablation::NoQemid;
    let mut model = Model::<f64>::new(cfg, 5).unwrap();
    let x = common::random_tensor(&[2, 3, 4, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let base = model.predict(&x).unwrap();
    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| n.starts_with("teqe."))
        .map(String::from)
        .collect();
    assert!(!names.is_empty());
    for n in names {
        for v in model.params.get_mut(&n).unwrap().data_mut() {
            *v += 3.7;
        }
    }
    assert!(model.predict(&x).unwrap().max_abs_diff(&base) < 1e-12);
}

#[test]
fn enhancer_parameters_matter_with_quantum_path() {
    let mut model = Model::<f64>::new(small_config(), 5).unwrap();
    let x = common::random_tensor(&[1, 3, 4, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let base = model.predict(&x).unwrap();
    for v in model.params.get_mut("teqe.proj.b").unwrap().data_mut() {
        *v += 1.0;
    }
    assert!(model.predict(&x).unwrap().max_abs_diff(&base) > 0.0);
}

#[test]
fn ablations_share_parameter_layout() {
    let counts: Vec<usize> = Ablation::ALL
        .iter()
        .map(|&a| {
            let mut c = small_config();
            c.ablation = a;
            Model::<f64>::new(c, 0).unwrap().param_count()
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn identical_runs_produce_identical_artifacts() {
    let series = small_data(4, 6, 8);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch: 2,
        ..TrainConfig::default()
    };
    let run = |tag: &str| {
        let mut model = Model::<f64>::new(small_config(), cfg.seed).unwrap();
        let report = train(&mut model, &series, &cfg, 1, &mut quiet()).unwrap();
        let path = dir.path().join(format!("{tag}.qeno"));
        let meta = CheckpointMeta {
            epoch: 2,
            seed: cfg.seed,
            lr: cfg.lr,
            clip_norm: cfg.clip_norm,
            val_fraction: cfg.val_fraction,
        };
        save_model(&model, &meta, &path).unwrap();
        let all: Vec<usize> = (0..series.len()).collect();
        let samples = samples_of(&series, &all, 3, 2).unwrap();
        let metrics = model_report(&mut model, &samples, 2, "m").unwrap();
        (
            std::fs::read(&path).unwrap(),
            report.history.to_csv(),
            format!("{metrics:?}"),
        )
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn checkpoint_restores_an_equivalent_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.topology = qeno::topology::TopologyKind::Correlation;
    let mut model = Model::<f64>::new(cfg, 3).unwrap();
    let x = common::random_tensor(&[1, 3, 4, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let y = model.predict(&x).unwrap();
    let path = dir.path().join("m.qeno");
    let meta = CheckpointMeta {
        epoch: 7,
        seed: 11,
        lr: 1e-3,
        clip_norm: 1.0,
        val_fraction: 0.1,
    };
    save_model(&model, &meta, &path).unwrap();
    let (mut back, meta_back) = load_model(&path).unwrap();
    assert_eq!(meta_back, meta);
    assert_eq!(back.topology(), model.topology());
    assert_eq!(back.predict(&x).unwrap(), y);
}

#[test]
fn divergence_names_the_first_bad_tensor() {
    let series = small_data(2, 5, 9);
    let mut model = Model::<f64>::new(small_config(), 0).unwrap();
    model.params.get_mut("dec.head.b").unwrap().data_mut()[0] = f64::NAN;
    let cfg = TrainConfig {
        epochs: 1,
        batch: 1,
        ..TrainConfig::default()
    };
    match train(&mut model, &series, &cfg, 1, &mut quiet()) {
        Err(Error::NonFinite { tensor }) => assert_eq!(tensor, "dec.head.b"),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn out_of_range_input_rejected() {
    let mut model = Model::<f64>::new(small_config(), 0).unwrap();
    let mut x = Tensor::full(vec![1, 3, 4, 8, 8], 0.5);
    x.data_mut()[0] = 1.5;
    assert!(matches!(model.predict(&x), Err(Error::Data(_))));
    let wrong = Tensor::full(vec![1, 4, 4, 8, 8], 0.5);
    assert!(matches!(model.predict(&wrong), Err(Error::Dimension { .. })));
}

#[test]
fn f32_model_runs() {
    let mut model = Model::<f32>::new(small_config(), 0).unwrap();
    let x = qeno::tensor::Tensor::<f32>::full(vec![1, 3, 4, 8, 8], 0.25);
    let y = model.predict(&x).unwrap();
    assert_eq!(y.shape(), &[1, 2, 4, 8, 8]);
    assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
