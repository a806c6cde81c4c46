//! Exact statevector simulation of the shallow phase-parameterized circuit.
//!
//! Basis index `i` encodes `|b_{q-1} … b_0⟩` with qubit 0 the least
//! significant bit. A circuit is an `R_y` angle encoding of `|0…0⟩` followed
//! by `L` layers of `RX`, `RY`, `RZ` on every qubit and CNOTs along the
//! entanglement graph.

use std::f64::consts::PI;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::topology::EntanglementGraph;

pub const MAX_QUBITS: usize = 12;

type Mat2<T> = [[Complex<T>; 2]; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector<T> {
    qubits: usize,
    amps: Vec<Complex<T>>,
}

impl<T: Scalar> StateVector<T> {
    /// `|0…0⟩`.
    pub fn zero(qubits: usize) -> Result<Self> {
        check_qubits(qubits)?;
        let mut amps = vec![Complex::new(T::zero(), T::zero()); 1 << qubits];
        amps[0] = Complex::new(T::one(), T::zero());
        Ok(StateVector { qubits, amps })
    }

    /// Wrap raw amplitudes; the length must be a power of two.
    pub fn from_amplitudes(amps: Vec<Complex<T>>) -> Result<Self> {
        let n = amps.len();
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::Contract(format!("amplitude count {n} is not 2^q with q ≥ 1")));
        }
        let qubits = n.trailing_zeros() as usize;
        check_qubits(qubits)?;
        Ok(StateVector { qubits, amps })
    }

    pub fn qubits(&self) -> usize {
        self.qubits
    }

    pub fn amplitudes(&self) -> &[Complex<T>] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> T {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    fn check_qubit(&self, qubit: usize) -> Result<()> {
        if qubit >= self.qubits {
            return Err(Error::Contract(format!(
                "qubit {qubit} out of range for a {}-qubit register",
                self.qubits
            )));
        }
        Ok(())
    }

    /// Apply a 2×2 unitary to one qubit.
    pub fn apply_single(&mut self, qubit: usize, m: &Mat2<T>) -> Result<()> {
        self.check_qubit(qubit)?;
        apply_mat(&mut self.amps, qubit, m);
        Ok(())
    }

    pub fn apply_rx(&mut self, qubit: usize, theta: T) -> Result<()> {
        self.apply_single(qubit, &rx(theta))
    }

    pub fn apply_ry(&mut self, qubit: usize, theta: T) -> Result<()> {
        self.apply_single(qubit, &ry(theta))
    }

    pub fn apply_rz(&mut self, qubit: usize, theta: T) -> Result<()> {
        self.apply_single(qubit, &rz(theta))
    }

    pub fn apply_cnot(&mut self, control: usize, target: usize) -> Result<()> {
        self.check_qubit(control)?;
        self.check_qubit(target)?;
        if control == target {
            return Err(Error::Contract(format!("CNOT with control == target == {control}")));
        }
        cnot(&mut self.amps, control, target);
        Ok(())
    }

    /// CNOTs along the graph edges, in edge order.
    pub fn apply_entangler(&mut self, graph: &EntanglementGraph) -> Result<()> {
        if graph.qubits() != self.qubits {
            return Err(Error::Contract(format!(
                "graph over {} qubits applied to a {}-qubit register",
                graph.qubits(),
                self.qubits
            )));
        }
        for &(c, t) in graph.edges() {
            self.apply_cnot(c, t)?;
        }
        Ok(())
    }
}

fn check_qubits(qubits: usize) -> Result<()> {
    if qubits == 0 || qubits > MAX_QUBITS {
        return Err(Error::Contract(format!(
            "qubit count {qubits} outside 1..={MAX_QUBITS}"
        )));
    }
    Ok(())
}

fn c<T: Scalar>(re: T, im: T) -> Complex<T> {
    Complex::new(re, im)
}

fn half_angle<T: Scalar>(theta: T) -> (T, T) {
    let h = theta * T::lit(0.5);
    (h.cos(), h.sin())
}

pub fn rx<T: Scalar>(theta: T) -> Mat2<T> {
    let (co, si) = half_angle(theta);
    let z = T::zero();
    [[c(co, z), c(z, -si)], [c(z, -si), c(co, z)]]
}

pub fn ry<T: Scalar>(theta: T) -> Mat2<T> {
    let (co, si) = half_angle(theta);
    let z = T::zero();
    [[c(co, z), c(-si, z)], [c(si, z), c(co, z)]]
}

pub fn rz<T: Scalar>(theta: T) -> Mat2<T> {
    let (co, si) = half_angle(theta);
    let z = T::zero();
    [[c(co, -si), c(z, z)], [c(z, z), c(co, si)]]
}

fn matmul2<T: Scalar>(a: &Mat2<T>, b: &Mat2<T>) -> Mat2<T> {
    let mut out = [[c(T::zero(), T::zero()); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn apply_mat<T: Scalar>(amps: &mut [Complex<T>], qubit: usize, m: &Mat2<T>) {
    let stride = 1usize << qubit;
    let n = amps.len();
    let mut base = 0;
    while base < n {
        for i in base..base + stride {
            let (a0, a1) = (amps[i], amps[i + stride]);
            amps[i] = m[0][0] * a0 + m[0][1] * a1;
            amps[i + stride] = m[1][0] * a0 + m[1][1] * a1;
        }
        base += 2 * stride;
    }
}

fn cnot<T: Scalar>(amps: &mut [Complex<T>], control: usize, target: usize) {
    let (cm, tm) = (1usize << control, 1usize << target);
    for i in 0..amps.len() {
        if i & cm != 0 && i & tm == 0 {
            amps.swap(i, i | tm);
        }
    }
}

/// Phases for one circuit: `q` encoding angles, then per layer `q` RX,
/// `q` RY and `q` RZ angles.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseVector<T> {
    qubits: usize,
    layers: usize,
    values: Vec<T>,
}

impl<T: Scalar> PhaseVector<T> {
    pub fn len_for(qubits: usize, layers: usize) -> usize {
        qubits * (1 + 3 * layers)
    }

    /// Phases on the model path, each required to lie in `[0, π]`.
    pub fn new(qubits: usize, layers: usize, values: Vec<T>) -> Result<Self> {
        let pv = Self::unchecked(qubits, layers, values)?;
        let pi = T::lit(PI);
        if let Some((i, v)) = pv
            .values
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v >= T::zero() && v <= pi))
        {
            return Err(Error::Contract(format!("phase {i} = {v} outside [0, π]")));
        }
        Ok(pv)
    }

    /// Phases with only the length checked, for harnesses probing angles
    /// outside `[0, π]`.
    pub fn unchecked(qubits: usize, layers: usize, values: Vec<T>) -> Result<Self> {
        check_qubits(qubits)?;
        if layers == 0 {
            return Err(Error::Contract("circuit needs at least one layer".into()));
        }
        let want = Self::len_for(qubits, layers);
        if values.len() != want {
            return Err(Error::ElementCount {
                op: "phase vector",
                expected: want,
                actual: values.len(),
            });
        }
        Ok(PhaseVector { qubits, layers, values })
    }

    pub fn qubits(&self) -> usize {
        self.qubits
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn encoding(&self) -> &[T] {
        &self.values[..self.qubits]
    }

    /// `(rx, ry, rz)` angles of layer `l` (0-based).
    pub fn layer(&self, l: usize) -> (&[T], &[T], &[T]) {
        let q = self.qubits;
        let s = q + 3 * q * l;
        (
            &self.values[s..s + q],
            &self.values[s + q..s + 2 * q],
            &self.values[s + 2 * q..s + 3 * q],
        )
    }
}

/// `⊗_i R_y(φ_i)|0⟩`.
pub fn angle_encode<T: Scalar>(phi: &[T], qubits: usize) -> Result<StateVector<T>> {
    check_qubits(qubits)?;
    if phi.len() != qubits {
        return Err(Error::ElementCount {
            op: "angle_encode",
            expected: qubits,
            actual: phi.len(),
        });
    }
    let mut psi = StateVector {
        qubits,
        amps: Vec::new(),
    };
    encode_into(phi, &mut psi.amps);
    Ok(psi)
}

/// Product-state amplitudes `Π_i (bit_i ? sin : cos)(φ_i / 2)`.
fn encode_into<T: Scalar>(phi: &[T], amps: &mut Vec<Complex<T>>) {
    let q = phi.len();
    amps.clear();
    amps.resize(1 << q, c(T::one(), T::zero()));
    let halves: Vec<(T, T)> = phi.iter().map(|&p| half_angle(p)).collect();
    for (i, a) in amps.iter_mut().enumerate() {
        let mut v = T::one();
        for (b, &(co, si)) in halves.iter().enumerate() {
            v *= if i >> b & 1 == 1 { si } else { co };
        }
        *a = c(v, T::zero());
    }
}

fn check_layer_lengths<T>(q: usize, rx: &[T], ry: &[T], rz: &[T]) -> Result<()> {
    for (name, l) in [("rx", rx.len()), ("ry", ry.len()), ("rz", rz.len())] {
        if l != q {
            return Err(Error::Contract(format!(
                "{name} phase list has {l} entries for {q} qubits"
            )));
        }
    }
    Ok(())
}

/// One layer: all RX, then all RY, then all RZ, then the CNOTs of `graph`.
pub fn apply_layer<T: Scalar>(
    psi: &mut StateVector<T>,
    rx_phases: &[T],
    ry_phases: &[T],
    rz_phases: &[T],
    graph: &EntanglementGraph,
) -> Result<()> {
    check_layer_lengths(psi.qubits, rx_phases, ry_phases, rz_phases)?;
    if graph.qubits() != psi.qubits {
        return Err(Error::Contract(format!(
            "graph over {} qubits applied to a {}-qubit register",
            graph.qubits(),
            psi.qubits
        )));
    }
    if let Some(&(c, t)) = graph.edges().iter().find(|&&(c, t)| c >= psi.qubits || t >= psi.qubits) {
        return Err(Error::Contract(format!("edge ({c},{t}) out of range")));
    }
    layer_unchecked(&mut psi.amps, rx_phases, ry_phases, rz_phases, graph);
    Ok(())
}

fn layer_unchecked<T: Scalar>(
    amps: &mut [Complex<T>],
    rx_phases: &[T],
    ry_phases: &[T],
    rz_phases: &[T],
    graph: &EntanglementGraph,
) {
    // single-qubit gates on distinct qubits commute, so the three rotation
    // sweeps fuse into one RZ·RY·RX per qubit
    for i in 0..rx_phases.len() {
        let u = matmul2(&rz(rz_phases[i]), &matmul2(&ry(ry_phases[i]), &rx(rx_phases[i])));
        apply_mat(amps, i, &u);
    }
    for &(c, t) in graph.edges() {
        cnot(amps, c, t);
    }
}

fn check_graph(qubits: usize, graph: &EntanglementGraph) -> Result<()> {
    if graph.qubits() != qubits {
        return Err(Error::Contract(format!(
            "graph over {} qubits, circuit over {qubits}",
            graph.qubits()
        )));
    }
    Ok(())
}

/// Angle-encode then apply every layer with its phase subset.
pub fn run_circuit<T: Scalar>(phi: &PhaseVector<T>, graph: &EntanglementGraph) -> Result<StateVector<T>> {
    check_graph(phi.qubits, graph)?;
    let mut psi = StateVector {
        qubits: phi.qubits,
        amps: Vec::new(),
    };
    run_into(&phi.values, phi.qubits, phi.layers, graph, &mut psi.amps);
    Ok(psi)
}

fn run_into<T: Scalar>(values: &[T], q: usize, layers: usize, graph: &EntanglementGraph, amps: &mut Vec<Complex<T>>) {
    encode_into(&values[..q], amps);
    for l in 0..layers {
        let s = q + 3 * q * l;
        layer_unchecked(
            amps,
            &values[s..s + q],
            &values[s + q..s + 2 * q],
            &values[s + 2 * q..s + 3 * q],
            graph,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PauliObservable {
    /// `Z` on one qubit.
    LocalZ(usize),
    /// `Z^{⊗q}`.
    GlobalParity,
}

/// Measurement set: `LocalZ` on every qubit, optionally followed by the
/// global parity.
pub fn local_z_observables(qubits: usize, with_parity: bool) -> Vec<PauliObservable> {
    let mut obs: Vec<_> = (0..qubits).map(PauliObservable::LocalZ).collect();
    if with_parity {
        obs.push(PauliObservable::GlobalParity);
    }
    obs
}

/// Expectation `⟨ψ|P_j|ψ⟩` of each observable, each in `[−1, 1]`.
pub fn measure<T: Scalar>(psi: &StateVector<T>, obs: &[PauliObservable]) -> Result<Vec<T>> {
    if obs.is_empty() {
        return Err(Error::Contract("measure: empty observable list".into()));
    }
    for o in obs {
        if let PauliObservable::LocalZ(i) = *o {
            psi.check_qubit(i)?;
        }
    }
    Ok(expectations(&psi.amps, obs))
}

fn expectations<T: Scalar>(amps: &[Complex<T>], obs: &[PauliObservable]) -> Vec<T> {
    let mut out = vec![T::zero(); obs.len()];
    for (i, a) in amps.iter().enumerate() {
        let p = a.norm_sqr();
        for (m, o) in out.iter_mut().zip(obs) {
            let odd = match *o {
                PauliObservable::LocalZ(q) => i >> q & 1 == 1,
                PauliObservable::GlobalParity => i.count_ones() % 2 == 1,
            };
            if odd {
                *m -= p;
            } else {
                *m += p;
            }
        }
    }
    out.iter_mut().for_each(|m| *m = m.max(-T::one()).min(T::one()));
    out
}

/// Measurement vector of the full circuit.
pub fn circuit_expectations<T: Scalar>(
    phi: &PhaseVector<T>,
    graph: &EntanglementGraph,
    obs: &[PauliObservable],
) -> Result<Vec<T>> {
    measure(&run_circuit(phi, graph)?, obs)
}

/// `∂m_j/∂φ_k` as a `[|obs|, |φ|]` tensor via the parameter-shift rule:
/// two full circuit runs per phase at `φ_k ± π/2`.
pub fn parameter_shift_grad<T: Scalar>(
    phi: &PhaseVector<T>,
    graph: &EntanglementGraph,
    obs: &[PauliObservable],
) -> Result<Tensor<T>> {
    check_graph(phi.qubits, graph)?;
    if obs.is_empty() {
        return Err(Error::Contract("parameter_shift_grad: empty observable list".into()));
    }
    for o in obs {
        if let PauliObservable::LocalZ(i) = *o {
            if i >= phi.qubits {
                return Err(Error::Contract(format!("observable on qubit {i} out of range")));
            }
        }
    }
    let (q, layers) = (phi.qubits, phi.layers);
    let n = phi.values.len();
    let shift = T::lit(PI / 2.0);
    let half = T::lit(0.5);
    let mut jac = vec![T::zero(); obs.len() * n];
    let mut shifted = phi.values.clone();
    let mut amps = Vec::with_capacity(1 << q);
    for k in 0..n {
        let orig = shifted[k];
        shifted[k] = orig + shift;
        run_into(&shifted, q, layers, graph, &mut amps);
        let plus = expectations(&amps, obs);
        shifted[k] = orig - shift;
        run_into(&shifted, q, layers, graph, &mut amps);
        let minus = expectations(&amps, obs);
        shifted[k] = orig;
        for j in 0..obs.len() {
            jac[j * n + k] = (plus[j] - minus[j]) * half;
        }
    }
    Tensor::new(vec![obs.len(), n], jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn encoding_examples() {
        let psi = angle_encode(&[0.0f64; 3], 3).unwrap();
        assert_eq!(psi.amplitudes()[0], Complex::new(1.0, 0.0));
        assert!(psi.amplitudes()[1..].iter().all(|a| a.norm() == 0.0));

        let one = angle_encode(&[PI], 1).unwrap();
        assert!(one.amplitudes()[0].norm() < 1e-15);
        assert!(close(one.amplitudes()[1].re, 1.0, 1e-15));

        let half = angle_encode(&[PI / 2.0], 1).unwrap();
        assert!(close(half.amplitudes()[0].re, FRAC_1_SQRT_2, 1e-15));
        assert!(close(half.amplitudes()[1].re, FRAC_1_SQRT_2, 1e-15));
        assert!(angle_encode(&[0.0f64; 2], 3).is_err());
    }

    #[test]
    fn zero_layer_is_identity_bit_exact() {
        let mut psi = angle_encode(&[0.3f64, 1.1, 2.0], 3).unwrap();
        let before = psi.clone();
        apply_layer(&mut psi, &[0.0; 3], &[0.0; 3], &[0.0; 3], &EntanglementGraph::empty(3)).unwrap();
        assert_eq!(psi, before);
    }

    #[test]
    fn cnot_truth_table() {
        // |10⟩: qubit 1 set, index 2
        let mut amps = vec![Complex::new(0.0f64, 0.0); 4];
        amps[2] = Complex::new(1.0, 0.0);
        let mut psi = StateVector::from_amplitudes(amps).unwrap();
        let g = EntanglementGraph::from_edges(2, vec![(1, 0)]).unwrap();
        apply_layer(&mut psi, &[0.0; 2], &[0.0; 2], &[0.0; 2], &g).unwrap();
        assert_eq!(psi.amplitudes()[3], Complex::new(1.0, 0.0));
    }

    #[test]
    fn layer_rejects_bad_lengths_and_edges() {
        let mut psi = StateVector::<f64>::zero(2).unwrap();
        let g = EntanglementGraph::chain(2).unwrap();
        assert!(apply_layer(&mut psi, &[0.0; 1], &[0.0; 2], &[0.0; 2], &g).is_err());
        assert!(apply_layer(
            &mut psi,
            &[0.0; 2],
            &[0.0; 2],
            &[0.0; 2],
            &EntanglementGraph::chain(3).unwrap()
        )
        .is_err());
        assert!(psi.apply_cnot(0, 2).is_err());
    }

    #[test]
    fn run_circuit_examples() {
        let phi = PhaseVector::new(3, 1, vec![0.0f64; 12]).unwrap();
        let psi = run_circuit(&phi, &EntanglementGraph::empty(3)).unwrap();
        assert_eq!(psi.amplitudes()[0], Complex::new(1.0, 0.0));

        let theta = 1.234;
        let mut v = vec![0.0; 4];
        v[0] = theta;
        let phi = PhaseVector::new(1, 1, v).unwrap();
        let psi = run_circuit(&phi, &EntanglementGraph::empty(1)).unwrap();
        assert!(close(psi.amplitudes()[0].re, (theta / 2.0).cos(), 1e-15));
        assert!(close(psi.amplitudes()[1].re, (theta / 2.0).sin(), 1e-15));
    }

    #[test]
    fn phase_vector_contract() {
        assert!(PhaseVector::new(2, 1, vec![0.5f64; 8]).is_ok());
        assert!(PhaseVector::new(2, 1, vec![0.5f64; 7]).is_err());
        let mut v = vec![0.5f64; 8];
        v[3] = 3.5;
        assert!(PhaseVector::new(2, 1, v.clone()).is_err());
        assert!(PhaseVector::unchecked(2, 1, v).is_ok());
        assert!(PhaseVector::new(2, 0, Vec::<f64>::new()).is_err());
        assert!(PhaseVector::new(13, 1, vec![0.0f64; 52]).is_err());
    }

    #[test]
    fn layout_of_layer_subsets() {
        let v: Vec<f64> = (0..14).map(|i| i as f64).collect();
        let phi = PhaseVector::unchecked(2, 2, v).unwrap();
        assert_eq!(phi.encoding(), &[0.0, 1.0]);
        let (x, y, z) = phi.layer(1);
        assert_eq!((x[0], y[0], z[0]), (8.0, 10.0, 12.0));
    }

    #[test]
    fn measurement_examples() {
        let zero = StateVector::<f64>::zero(1).unwrap();
        assert_eq!(measure(&zero, &[PauliObservable::LocalZ(0)]).unwrap(), vec![1.0]);

        let half = angle_encode(&[PI / 2.0], 1).unwrap();
        assert!(close(
            measure(&half, &[PauliObservable::LocalZ(0)]).unwrap()[0],
            0.0,
            1e-15
        ));

        let mut amps = vec![Complex::new(0.0f64, 0.0); 4];
        amps[3] = Complex::new(1.0, 0.0);
        let eleven = StateVector::from_amplitudes(amps).unwrap();
        let m = measure(
            &eleven,
            &[
                PauliObservable::GlobalParity,
                PauliObservable::LocalZ(0),
                PauliObservable::LocalZ(1),
            ],
        )
        .unwrap();
        assert_eq!(m, vec![1.0, -1.0, -1.0]);
        assert!(measure(&eleven, &[]).is_err());
        assert!(measure(&eleven, &[PauliObservable::LocalZ(2)]).is_err());
    }

    #[test]
    fn shift_gradient_single_qubit() {
        for &theta in &[0.0, 0.4, 1.3, 2.9] {
            let mut v = vec![0.0f64; 4];
            v[0] = theta;
            let phi = PhaseVector::new(1, 1, v).unwrap();
            let g = parameter_shift_grad(&phi, &EntanglementGraph::empty(1), &[PauliObservable::LocalZ(0)]).unwrap();
            assert_eq!(g.shape(), &[1, 4]);
            assert!(close(g.data()[0], -theta.sin(), 1e-12), "theta {theta}");
        }
    }

    #[test]
    fn f32_circuit_runs() {
        let phi = PhaseVector::new(2, 1, vec![0.7f32; 8]).unwrap();
        let psi = run_circuit(&phi, &EntanglementGraph::chain(2).unwrap()).unwrap();
        assert!((psi.norm_sqr() - 1.0).abs() < 1e-5);
    }
}
