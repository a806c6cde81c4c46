//! Finite-difference harnesses for the tensor ops and a micro model.

use qeno::pipeline::{Model, ModelConfig};
use qeno::tensor::Graph;
use qeno::teqe::TeqeConfig;
use qeno::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::random_tensor;

pub const H: f64 = 1e-5;

pub type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

/// Values kept at least 0.1 away from zero so kinked ops stay differentiable.
pub fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        (
            "conv2d s1 p1",
            vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3]],
            Box::new(|g, v| g.conv2d(v[0], v[1], 1, 1).unwrap()),
        ),
        (
            "conv2d s2 p2",
            vec![vec![1, 2, 6, 7], vec![2, 2, 5, 5]],
            Box::new(|g, v| g.conv2d(v[0], v[1], 2, 2).unwrap()),
        ),
        (
            "conv_transpose2d",
            vec![vec![2, 2, 3, 4], vec![2, 3, 3, 3]],
            Box::new(|g, v| g.conv_transpose2d(v[0], v[1], 2, 1, 1).unwrap()),
        ),
        (
            "conv_transpose2d s1",
            vec![vec![1, 3, 4, 4], vec![3, 2, 3, 3]],
            Box::new(|g, v| g.conv_transpose2d(v[0], v[1], 1, 1, 0).unwrap()),
        ),
        (
            "conv3d",
            vec![vec![2, 2, 3, 4, 4], vec![2, 2, 3, 3, 3]],
            Box::new(|g, v| g.conv3d(v[0], v[1], 1).unwrap()),
        ),
        (
            "linear",
            vec![vec![3, 5], vec![4, 5], vec![4]],
            Box::new(|g, v| g.linear(v[0], v[1], v[2]).unwrap()),
        ),
        (
            "bias_add",
            vec![vec![2, 3, 2, 2], vec![3]],
            Box::new(|g, v| g.bias_add(v[0], v[1]).unwrap()),
        ),
        ("sigmoid", vec![vec![3, 4]], Box::new(|g, v| g.sigmoid(v[0]))),
        ("tanh", vec![vec![3, 4]], Box::new(|g, v| g.tanh(v[0]))),
        ("relu", vec![vec![3, 4]], Box::new(|g, v| g.relu(v[0]))),
        ("leaky_relu", vec![vec![3, 4]], Box::new(|g, v| g.leaky_relu(v[0], 0.2))),
        (
            "clamp",
            vec![vec![3, 4]],
            Box::new(|g, v| {
                let s = g.scale(v[0], 2.0);
                g.clamp(s, -1.0, 1.0)
            }),
        ),
        ("scale", vec![vec![3, 4]], Box::new(|g, v| g.scale(v[0], -1.7))),
        (
            "add",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|g, v| g.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
        ),
        (
            "mul self",
            vec![vec![2, 3]],
            Box::new(|g, v| g.mul(v[0], v[0]).unwrap()),
        ),
        (
            "concat axis 1",
            vec![vec![2, 1, 3], vec![2, 2, 3]],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1).unwrap()),
        ),
        (
            "narrow",
            vec![vec![2, 5, 3]],
            Box::new(|g, v| g.narrow(v[0], 1, 1, 3).unwrap()),
        ),
        (
            "mean_pool",
            vec![vec![2, 3, 4, 5]],
            Box::new(|g, v| g.mean_pool(v[0], &[2, 3]).unwrap()),
        ),
        (
            "broadcast_to",
            vec![vec![2, 1, 3]],
            Box::new(|g, v| g.broadcast_to(v[0], &[2, 4, 3]).unwrap()),
        ),
        (
            "reshape",
            vec![vec![2, 6]],
            Box::new(|g, v| g.reshape(v[0], &[3, 4]).unwrap()),
        ),
        (
            "flatten",
            vec![vec![2, 3, 2]],
            Box::new(|g, v| g.flatten(v[0]).unwrap()),
        ),
        ("sum", vec![vec![3, 3]], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![vec![3, 3]], Box::new(|g, v| g.mean(v[0]))),
        (
            "mse_loss",
            vec![vec![2, 4], vec![2, 4]],
            Box::new(|g, v| g.mse_loss(v[0], v[1]).unwrap()),
        ),
        (
            "map_with_jacobian",
            vec![vec![2, 3]],
            Box::new(|g, v| {
                // y_r = [sin x0·x1, x2²] with its exact Jacobian
                let x = g.value(v[0]).data().to_vec();
                let mut y = Vec::new();
                let mut jac = Vec::new();
                for r in x.chunks(3) {
                    y.extend([r[0].sin() * r[1], r[2] * r[2]]);
                    jac.extend([r[0].cos() * r[1], r[0].sin(), 0.0, 0.0, 0.0, 2.0 * r[2]]);
                }
                let y = Tensor::new(vec![2, 2], y).unwrap();
                let need = g.requires_grad(v[0]);
                g.map_with_jacobian(v[0], y, need.then_some(jac)).unwrap()
            }),
        ),
    ]
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        channels: 4,
        height: 8,
        width: 8,
        t_in: 5,
        t_out: 2,
        teqe: TeqeConfig {
            qubits: 4,
            layers: 1,
            ..TeqeConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn model_loss(
    model: &mut Model<f64>,
    x: &Tensor,
    y: &Tensor,
    grads: bool,
) -> (f64, Option<Graph<f64>>, Vec<(String, Var)>) {
    let mut g = Graph::new();
    let pv = model.params.bind(&mut g, grads);
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let out = model.forward(&mut g, &pv, xv).unwrap();
    let loss = g.mse_loss(out.forecast, yv).unwrap();
    let value = g.value(loss).item();
    if !grads {
        return (value, None, Vec::new());
    }
    g.backward(loss).unwrap();
    let names = pv.iter().map(|(n, v)| (n.to_string(), v)).collect();
    (value, Some(g), names)
}

/// Worst relative error between backprop and central differences on 20
/// parameters of a `1×5×4×8×8` model, five from each module.
pub fn micro_model_worst_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = Model::<f64>::new(micro_config(), 9).unwrap();
    let x = random_tensor(&[1, 5, 4, 8, 8], 0.05, 0.95, &mut rng);
    let y = random_tensor(&[1, 2, 4, 8, 8], 0.0, 1.0, &mut rng);
    let (_, g, names) = model_loss(&mut model, &x, &y, true);
    let g = g.unwrap();
    let all: Vec<(String, usize)> = model
        .params
        .iter()
        .flat_map(|(n, t)| (0..t.numel()).map(move |i| (n.to_string(), i)))
        .collect();
    // a few samples per module so every stage of the pipeline is probed
    let mut picks: Vec<(String, usize)> = Vec::new();
    for prefix in ["enc.", "teqe.", "dftu.", "dec."] {
        let pool: Vec<&(String, usize)> = all.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
        for _ in 0..5 {
            picks.push(pool[rng.gen_range(0..pool.len())].clone());
        }
    }
    assert_eq!(picks.len(), 20);
    let mut worst = 0.0f64;
    for (name, i) in picks {
        let var = names.iter().find(|(n, _)| *n == name).unwrap().1;
        let analytic = g.grad(var).unwrap()[i];
        let orig = model.params.get(&name).unwrap().data()[i];
        model.params.get_mut(&name).unwrap().data_mut()[i] = orig + H;
        let plus = model_loss(&mut model, &x, &y, false).0;
        model.params.get_mut(&name).unwrap().data_mut()[i] = orig - H;
        let minus = model_loss(&mut model, &x, &y, false).0;
        model.params.get_mut(&name).unwrap().data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * H);
        let err = super::rel_err(analytic, numeric, 1e-7);
        worst = worst.max(err);
    }
    worst
}
