//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod ops;

use num_complex::Complex64 as C;
use qeno::tensor::Graph;
use qeno::{Tensor, Var};
use rand::Rng;

pub type Dense = Vec<Vec<C>>;

pub fn identity(n: usize) -> Dense {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { C::new(1.0, 0.0) } else { C::new(0.0, 0.0) })
                .collect()
        })
        .collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    let mut out = vec![vec![C::new(0.0, 0.0); n]; n];
    for i in 0..n {
        for k in 0..n {
            if a[i][k] == C::new(0.0, 0.0) {
                continue;
            }
            for j in 0..n {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn kron(a: &Dense, b: &Dense) -> Dense {
    let (na, nb) = (a.len(), b.len());
    let mut out = vec![vec![C::new(0.0, 0.0); na * nb]; na * nb];
    for i in 0..na {
        for j in 0..na {
            for k in 0..nb {
                for l in 0..nb {
                    out[i * nb + k][j * nb + l] = a[i][j] * b[k][l];
                }
            }
        }
    }
    out
}

pub fn rx(t: f64) -> Dense {
    let (c, s) = ((t / 2.0).cos(), (t / 2.0).sin());
    vec![
        vec![C::new(c, 0.0), C::new(0.0, -s)],
        vec![C::new(0.0, -s), C::new(c, 0.0)],
    ]
}

pub fn ry(t: f64) -> Dense {
    let (c, s) = ((t / 2.0).cos(), (t / 2.0).sin());
    vec![
        vec![C::new(c, 0.0), C::new(-s, 0.0)],
        vec![C::new(s, 0.0), C::new(c, 0.0)],
    ]
}

pub fn rz(t: f64) -> Dense {
    vec![
        vec![C::from_polar(1.0, -t / 2.0), C::new(0.0, 0.0)],
        vec![C::new(0.0, 0.0), C::from_polar(1.0, t / 2.0)],
    ]
}

/// `gate` on `qubit` of a `q`-qubit register, qubit 0 least significant.
pub fn embed(gate: &Dense, qubit: usize, q: usize) -> Dense {
    let mut out = identity(1);
    for k in (0..q).rev() {
        let f = if k == qubit { gate.clone() } else { identity(2) };
        out = kron(&out, &f);
    }
    out
}

pub fn cnot_dense(control: usize, target: usize, q: usize) -> Dense {
    let n = 1 << q;
    let mut out = vec![vec![C::new(0.0, 0.0); n]; n];
    for i in 0..n {
        let j = if i >> control & 1 == 1 { i ^ (1 << target) } else { i };
        out[j][i] = C::new(1.0, 0.0);
    }
    out
}

/// Full circuit unitary as an ordered product of dense gate matrices.
pub fn circuit_unitary(phases: &[f64], q: usize, layers: usize, edges: &[(usize, usize)]) -> Dense {
    let mut u = identity(1 << q);
    for i in 0..q {
        u = matmul(&embed(&ry(phases[i]), i, q), &u);
    }
    for l in 0..layers {
        let s = q + 3 * q * l;
        for (off, gate) in [(0, rx as fn(f64) -> Dense), (q, ry), (2 * q, rz)] {
            for i in 0..q {
                u = matmul(&embed(&gate(phases[s + off + i]), i, q), &u);
            }
        }
        for &(c, t) in edges {
            u = matmul(&cnot_dense(c, t, q), &u);
        }
    }
    u
}

/// First column of the unitary: its action on `|0…0⟩`.
pub fn dense_state(phases: &[f64], q: usize, layers: usize, edges: &[(usize, usize)]) -> Vec<C> {
    circuit_unitary(phases, q, layers, edges)
        .iter()
        .map(|row| row[0])
        .collect()
}

pub fn dense_local_z(psi: &[C], qubit: usize) -> f64 {
    psi.iter()
        .enumerate()
        .map(|(i, a)| {
            if i >> qubit & 1 == 1 {
                -a.norm_sqr()
            } else {
                a.norm_sqr()
            }
        })
        .sum()
}

/// Random directed edges without self loops, possibly repeated.
pub fn random_edges(q: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    if q < 2 {
        return Vec::new();
    }
    let n = rng.gen_range(0..=(q + 1).min(q * (q - 1) / 2));
    let mut out = Vec::new();
    while out.len() < n {
        let (a, b) = (rng.gen_range(0..q), rng.gen_range(0..q));
        if a != b && !out.contains(&(a, b)) && !out.contains(&(b, a)) {
            out.push((a, b));
        }
    }
    out
}

/// Mixed relative error with an absolute floor for tiny gradients.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Checks the analytic gradient of `Σ w ⊙ f(inputs)` against central
/// differences for every input element. Returns `(analytic, numeric)` pairs.
pub fn gradcheck(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    weights_seed: u64,
    h: f64,
) -> Vec<(f64, f64)> {
    use rand::SeedableRng;
    let loss = |vals: &[Tensor], want_grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| {
                if want_grad {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let y = f(&mut g, &vars);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(weights_seed);
        let w = random_tensor(g.shape(y), -1.0, 1.0, &mut rng);
        let wv = g.constant(w);
        let prod = g.mul(y, wv).unwrap();
        let s = g.sum(prod);
        let value = g.value(s).item();
        if !want_grad {
            return (value, Vec::new());
        }
        g.backward(s).unwrap();
        let grads = vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map(|d| d.to_vec())
                    .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
            })
            .collect();
        (value, grads)
    };
    let (_, analytic) = loss(inputs, true);
    let mut out = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut vals = inputs.to_vec();
            vals[k].data_mut()[i] = t.data()[i] + h;
            let plus = loss(&vals, false).0;
            vals[k].data_mut()[i] = t.data()[i] - h;
            let minus = loss(&vals, false).0;
            let numeric = (plus - minus) / (2.0 * h);
            out.push((analytic[k][i], numeric));
        }
    }
    out
}

/// Worst `|analytic − numeric| / (|numeric| + 1e-8)` over the pairs.
pub fn worst_fd_error(pairs: &[(f64, f64)]) -> f64 {
    pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// Contingency counts by explicit enumeration.
pub fn brute_contingency(pred: &[f64], obs: &[f64], tau: f64) -> [u64; 4] {
    let mut c = [0u64; 4];
    for (&p, &o) in pred.iter().zip(obs) {
        let (p, o) = (p >= tau, o >= tau);
        let k = match (p, o) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        c[k] += 1;
    }
    c
}

/// SSIM by explicit 2D window loops over every valid position.
pub fn ssim_loops(x: &[f64], y: &[f64], h: usize, w: usize, size: usize, sigma: f64) -> f64 {
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let r = (size / 2) as f64;
    let mut k = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (a, row) in k.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (da, db) = (a as f64 - r, b as f64 - r);
            *v = (-(da * da + db * db) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..=h - size {
        for j in 0..=w - size {
            let (mut mx, mut my) = (0.0, 0.0);
            for a in 0..size {
                for b in 0..size {
                    let wgt = k[a][b] / total;
                    mx += wgt * x[(i + a) * w + j + b];
                    my += wgt * y[(i + a) * w + j + b];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for a in 0..size {
                for b in 0..size {
                    let wgt = k[a][b] / total;
                    let (dx, dy) = (x[(i + a) * w + j + b] - mx, y[(i + a) * w + j + b] - my);
                    vx += wgt * dx * dx;
                    vy += wgt * dy * dy;
                    cxy += wgt * dx * dy;
                }
            }
            sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}
