//! Exact finite-dimensional quantum mechanics over d-dimensional systems:
//! pure and mixed states, Weyl-Heisenberg unitaries, the generalized Bell
//! basis and measurement, projective tests and fidelity.
//!
//! All linear algebra is double-precision complex. Global phases are never
//! compared; equality checks go through fidelity or trace distance.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::SimRng;

/// Tolerance for direct invariants (normalization, hermiticity, trace).
pub const TOL_INVARIANT: f64 = 1e-12;
/// Tolerance for derived identities (twirl, round trips, orthogonality).
pub const TOL_DERIVED: f64 = 1e-10;

pub type C64 = Complex64;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// A normalized pure state of a d-dimensional system, d ≥ 2.
#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    amps: DVector<C64>,
}

impl PureState {
    pub fn new(amps: Vec<C64>) -> Result<Self> {
        let v = DVector::from_vec(amps);
        if v.len() < 2 {
            return Err(Error::argument("pure state dimension must be at least 2"));
        }
        let norm_sq: f64 = v.iter().map(|a| a.norm_sqr()).sum();
        if (norm_sq - 1.0).abs() > 1e6 * TOL_INVARIANT {
            return Err(Error::State(format!(
                "pure state not normalized: |psi|^2 = {norm_sq}"
            )));
        }
        Ok(PureState { amps: v })
    }

    /// Construct and normalize; errors only on (near-)zero vectors.
    pub fn normalized(amps: Vec<C64>) -> Result<Self> {
        let mut v = DVector::from_vec(amps);
        if v.len() < 2 {
            return Err(Error::argument("pure state dimension must be at least 2"));
        }
        let norm: f64 = v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if norm < 1e-14 {
            return Err(Error::State("cannot normalize zero vector".into()));
        }
        v /= c(norm, 0.0);
        Ok(PureState { amps: v })
    }

    /// Computational basis state |j> in dimension d.
    pub fn basis(d: usize, j: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::argument("dimension must be at least 2"));
        }
        if j >= d {
            return Err(Error::argument(format!("basis index {j} out of range for d={d}")));
        }
        let mut amps = vec![c(0.0, 0.0); d];
        amps[j] = c(1.0, 0.0);
        PureState::new(amps)
    }

    /// Haar-random pure state: normalized vector of i.i.d. complex Gaussians.
    pub fn haar_random(d: usize, rng: &mut SimRng) -> Result<Self> {
        if d < 2 {
            return Err(Error::argument("dimension must be at least 2"));
        }
        let mut amps = Vec::with_capacity(d);
        loop {
            amps.clear();
            for _ in 0..d {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                amps.push(c(re, im));
            }
            let norm_sq: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
            if norm_sq > 1e-12 {
                break;
            }
        }
        PureState::normalized(amps.clone())
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amps(&self) -> &DVector<C64> {
        &self.amps
    }

    pub fn density(&self) -> DensityMatrix {
        let d = self.dim();
        let mat = DMatrix::from_fn(d, d, |i, j| self.amps[i] * self.amps[j].conj());
        DensityMatrix { mat }
    }

    pub fn apply(&self, u: &Unitary) -> Result<PureState> {
        if u.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: u.dim(),
            });
        }
        Ok(PureState {
            amps: &u.mat * &self.amps,
        })
    }

    /// |<phi|psi>|^2 between two pure states.
    pub fn overlap(&self, other: &PureState) -> Result<f64> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let ip: C64 = self
            .amps
            .iter()
            .zip(other.amps.iter())
            .map(|(a, b)| a.conj() * b)
            .sum();
        Ok(ip.norm_sqr())
    }
}

/// A density matrix: Hermitian, unit trace, positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    mat: DMatrix<C64>,
}

impl DensityMatrix {
    pub fn new(mat: DMatrix<C64>) -> Result<Self> {
        let d = mat.nrows();
        if d < 2 || mat.ncols() != d {
            return Err(Error::argument("density matrix must be square, d >= 2"));
        }
        for i in 0..d {
            for j in 0..d {
                if (mat[(i, j)] - mat[(j, i)].conj()).norm() > 1e3 * TOL_INVARIANT {
                    return Err(Error::State("density matrix not Hermitian".into()));
                }
            }
        }
        let tr: C64 = (0..d).map(|i| mat[(i, i)]).sum();
        if (tr.re - 1.0).abs() > 1e6 * TOL_INVARIANT || tr.im.abs() > 1e3 * TOL_INVARIANT {
            return Err(Error::State(format!("density matrix trace = {tr}, expected 1")));
        }
        let eig = mat.clone().symmetric_eigenvalues();
        if eig.iter().any(|&l| l < -1e2 * TOL_DERIVED) {
            return Err(Error::State(format!(
                "density matrix not positive semidefinite (min eigenvalue {})",
                eig.iter().cloned().fold(f64::INFINITY, f64::min)
            )));
        }
        Ok(DensityMatrix { mat })
    }

    /// I_d / d.
    pub fn maximally_mixed(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::argument("dimension must be at least 2"));
        }
        let mat = DMatrix::from_diagonal_element(d, d, c(1.0 / d as f64, 0.0));
        Ok(DensityMatrix { mat })
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn mat(&self) -> &DMatrix<C64> {
        &self.mat
    }

    /// U rho U^dagger.
    pub fn conjugate_by(&self, u: &Unitary) -> Result<DensityMatrix> {
        if u.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: u.dim(),
            });
        }
        let m = &u.mat * &self.mat * u.mat.adjoint();
        Ok(DensityMatrix { mat: m })
    }

    /// Trace distance (1/2)||rho - sigma||_1 via Hermitian eigenvalues.
    pub fn trace_distance(&self, other: &DensityMatrix) -> Result<f64> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let diff = &self.mat - &other.mat;
        let eig = diff.symmetric_eigenvalues();
        Ok(0.5 * eig.iter().map(|l| l.abs()).sum::<f64>())
    }

    /// Diagonal as a probability vector (computational-basis outcome law).
    pub fn diagonal_probs(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.mat[(i, i)].re.max(0.0)).collect()
    }

    /// Sample a computational-basis measurement outcome.
    pub fn sample_basis_outcome(&self, rng: &mut SimRng) -> usize {
        let probs = self.diagonal_probs();
        let total: f64 = probs.iter().sum();
        let mut x: f64 = rng.random::<f64>() * total;
        for (i, p) in probs.iter().enumerate() {
            x -= p;
            if x <= 0.0 {
                return i;
            }
        }
        probs.len() - 1
    }
}

/// Index (a, b) of the Weyl-Heisenberg unitary X^a Z^b; the flat index
/// a*d + b is the classical teleportation datum, ranging over [0, d^2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeylIndex {
    pub a: usize,
    pub b: usize,
}

impl WeylIndex {
    pub fn new(d: usize, a: usize, b: usize) -> Result<Self> {
        if a >= d || b >= d {
            return Err(Error::argument(format!(
                "Weyl index ({a},{b}) out of range for d={d}"
            )));
        }
        Ok(WeylIndex { a, b })
    }

    pub fn flat(&self, d: usize) -> usize {
        self.a * d + self.b
    }

    pub fn from_flat(d: usize, i: usize) -> Result<Self> {
        if i >= d * d {
            return Err(Error::argument(format!("flat Weyl index {i} out of range for d={d}")));
        }
        Ok(WeylIndex { a: i / d, b: i % d })
    }

    pub fn all(d: usize) -> impl Iterator<Item = WeylIndex> {
        (0..d).flat_map(move |a| (0..d).map(move |b| WeylIndex { a, b }))
    }

    pub fn random(d: usize, rng: &mut SimRng) -> WeylIndex {
        WeylIndex {
            a: rng.random_range(0..d),
            b: rng.random_range(0..d),
        }
    }
}

/// A d x d unitary matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Unitary {
    mat: DMatrix<C64>,
}

impl Unitary {
    pub fn new(mat: DMatrix<C64>) -> Result<Self> {
        let d = mat.nrows();
        if d < 2 || mat.ncols() != d {
            return Err(Error::argument("unitary must be square, d >= 2"));
        }
        let prod = mat.adjoint() * &mat;
        for i in 0..d {
            for j in 0..d {
                let expect = if i == j { c(1.0, 0.0) } else { c(0.0, 0.0) };
                if (prod[(i, j)] - expect).norm() > 1e2 * TOL_DERIVED {
                    return Err(Error::State("matrix is not unitary".into()));
                }
            }
        }
        Ok(Unitary { mat })
    }

    pub fn identity(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::argument("dimension must be at least 2"));
        }
        Ok(Unitary {
            mat: DMatrix::identity(d, d),
        })
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn mat(&self) -> &DMatrix<C64> {
        &self.mat
    }

    pub fn dagger(&self) -> Unitary {
        Unitary {
            mat: self.mat.adjoint(),
        }
    }

    /// Hilbert-Schmidt inner product Tr[self^dagger other].
    pub fn hs_inner(&self, other: &Unitary) -> C64 {
        let mut acc = c(0.0, 0.0);
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                acc += self.mat[(j, i)].conj() * other.mat[(j, i)];
            }
        }
        acc
    }

    /// Haar-random unitary via QR of a complex Ginibre matrix.
    pub fn haar_random(d: usize, rng: &mut SimRng) -> Result<Self> {
        if d < 2 {
            return Err(Error::argument("dimension must be at least 2"));
        }
        let g = DMatrix::from_fn(d, d, |_, _| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            c(re, im)
        });
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        // Fix the phase ambiguity so the distribution is Haar.
        for j in 0..d {
            let rjj = r[(j, j)];
            let phase = if rjj.norm() > 0.0 { rjj / rjj.norm() } else { c(1.0, 0.0) };
            for i in 0..d {
                q[(i, j)] *= phase.conj();
            }
        }
        Unitary::new(q)
    }
}

/// The Weyl-Heisenberg unitary U_(a,b) = X^a Z^b, with
/// X|j> = |j+1 mod d> and Z|j> = omega^j |j>, omega = e^{2 pi i / d}.
pub fn weyl_unitary(d: usize, idx: WeylIndex) -> Result<Unitary> {
    if d < 2 {
        return Err(Error::argument("dimension must be at least 2"));
    }
    if idx.a >= d || idx.b >= d {
        return Err(Error::argument(format!(
            "Weyl index ({},{}) out of range for d={d}",
            idx.a, idx.b
        )));
    }
    let omega = 2.0 * std::f64::consts::PI / d as f64;
    let mut mat = DMatrix::from_element(d, d, c(0.0, 0.0));
    for j in 0..d {
        // Z^b then X^a: |j> -> omega^{jb} |j+a>
        let phase = omega * (j * idx.b) as f64;
        mat[((j + idx.a) % d, j)] = c(phase.cos(), phase.sin());
    }
    Unitary::new(mat)
}

/// All d^2 Weyl unitaries, indexed by flat index.
pub fn weyl_family(d: usize) -> Result<Vec<Unitary>> {
    WeylIndex::all(d).map(|i| weyl_unitary(d, i)).collect()
}

/// Average of U_i rho U_i^dagger over all d^2 Weyl unitaries.
///
/// Maps every input to the maximally mixed state I_d/d.
pub fn weyl_twirl(rho: &DensityMatrix) -> Result<DensityMatrix> {
    let d = rho.dim();
    let mut acc = DMatrix::from_element(d, d, c(0.0, 0.0));
    for idx in WeylIndex::all(d) {
        let u = weyl_unitary(d, idx)?;
        acc += u.mat() * rho.mat() * u.mat().adjoint();
    }
    acc /= c((d * d) as f64, 0.0);
    DensityMatrix::new(acc)
}

/// A pure state of a bipartite system, amplitudes row-major over (A, B)
/// basis pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteState {
    dim_a: usize,
    dim_b: usize,
    amps: DVector<C64>,
}

impl BipartiteState {
    pub fn new(dim_a: usize, dim_b: usize, amps: Vec<C64>) -> Result<Self> {
        if amps.len() != dim_a * dim_b {
            return Err(Error::argument(format!(
                "amplitude vector length {} does not match {dim_a}x{dim_b}",
                amps.len()
            )));
        }
        let v = DVector::from_vec(amps);
        let norm_sq: f64 = v.iter().map(|a| a.norm_sqr()).sum();
        if (norm_sq - 1.0).abs() > 1e6 * TOL_INVARIANT {
            return Err(Error::State(format!(
                "bipartite state not normalized: |psi|^2 = {norm_sq}"
            )));
        }
        Ok(BipartiteState { dim_a, dim_b, amps: v })
    }

    /// Product state |a> tensor |b>.
    pub fn product(a: &PureState, b: &PureState) -> Result<Self> {
        let amps: Vec<C64> = a
            .amps
            .iter()
            .flat_map(|&x| b.amps.iter().map(move |&y| x * y))
            .collect();
        BipartiteState::new(a.dim(), b.dim(), amps)
    }

    pub fn dim_a(&self) -> usize {
        self.dim_a
    }

    pub fn dim_b(&self) -> usize {
        self.dim_b
    }

    pub fn amps(&self) -> &DVector<C64> {
        &self.amps
    }

    /// Reduced state on subsystem A.
    pub fn reduced_a(&self) -> Result<DensityMatrix> {
        let mut mat = DMatrix::from_element(self.dim_a, self.dim_a, c(0.0, 0.0));
        for i in 0..self.dim_a {
            for j in 0..self.dim_a {
                let mut acc = c(0.0, 0.0);
                for k in 0..self.dim_b {
                    acc += self.amps[i * self.dim_b + k] * self.amps[j * self.dim_b + k].conj();
                }
                mat[(i, j)] = acc;
            }
        }
        DensityMatrix::new(mat)
    }

    /// Reduced state on subsystem B.
    pub fn reduced_b(&self) -> Result<DensityMatrix> {
        let mut mat = DMatrix::from_element(self.dim_b, self.dim_b, c(0.0, 0.0));
        for i in 0..self.dim_b {
            for j in 0..self.dim_b {
                let mut acc = c(0.0, 0.0);
                for k in 0..self.dim_a {
                    acc += self.amps[k * self.dim_b + i] * self.amps[k * self.dim_b + j].conj();
                }
                mat[(i, j)] = acc;
            }
        }
        DensityMatrix::new(mat)
    }

    /// Schmidt coefficients (singular values of the coefficient matrix).
    pub fn schmidt_coefficients(&self) -> Vec<f64> {
        let m = DMatrix::from_fn(self.dim_a, self.dim_b, |i, j| self.amps[i * self.dim_b + j]);
        let svd = m.svd(false, false);
        let mut s: Vec<f64> = svd.singular_values.iter().cloned().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s
    }
}

/// The canonical maximally entangled state (1/sqrt d) sum_i |i>|i>.
pub fn bell_state(d: usize) -> Result<BipartiteState> {
    if d < 2 {
        return Err(Error::argument("dimension must be at least 2"));
    }
    let mut amps = vec![c(0.0, 0.0); d * d];
    let coeff = c(1.0 / (d as f64).sqrt(), 0.0);
    for i in 0..d {
        amps[i * d + i] = coeff;
    }
    BipartiteState::new(d, d, amps)
}

/// Generalized Bell basis vector for outcome `idx`:
/// |Phi_i> = (I tensor conj(U_i)) |Phi_0>.
///
/// The conjugation fixes the teleportation convention: when qudit 1 holds
/// |psi> and qudits (2,3) hold `bell_state(d)`, outcome i leaves qudit 3
/// in exactly U_i |psi>, so the receiver's correction is U_i^dagger.
/// The round-trip test, not documentation, is the arbiter of this choice.
pub fn bell_basis_vector(d: usize, idx: WeylIndex) -> Result<BipartiteState> {
    let u = weyl_unitary(d, idx)?;
    let coeff = 1.0 / (d as f64).sqrt();
    let mut amps = vec![c(0.0, 0.0); d * d];
    for j in 0..d {
        for k in 0..d {
            // (conj U_i |j>)_k = conj(U_i[k,j])
            amps[j * d + k] = u.mat()[(k, j)].conj() * c(coeff, 0.0);
        }
    }
    BipartiteState::new(d, d, amps)
}

/// Projective generalized Bell measurement on the first two qudits of a
/// joint state whose A part is a pair of d-dimensional qudits.
///
/// Returns the outcome index and the collapsed state of the remaining
/// subsystem (`None` when there is nothing left to collapse). Outcome
/// distribution follows the Born rule.
pub fn bell_measure(
    joint: &BipartiteState,
    d: usize,
    rng: &mut SimRng,
) -> Result<(WeylIndex, Option<PureState>)> {
    if joint.dim_a != d * d {
        return Err(Error::DimensionMismatch {
            expected: d * d,
            got: joint.dim_a,
        });
    }
    let dim_b = joint.dim_b;
    // Residual (unnormalized) B amplitudes for each outcome.
    let mut residuals: Vec<Vec<C64>> = Vec::with_capacity(d * d);
    let mut probs: Vec<f64> = Vec::with_capacity(d * d);
    for idx in WeylIndex::all(d) {
        let phi = bell_basis_vector(d, idx)?;
        let mut res = vec![c(0.0, 0.0); dim_b];
        for (jk, phi_amp) in phi.amps.iter().enumerate() {
            let w = phi_amp.conj();
            for r in 0..dim_b {
                res[r] += w * joint.amps[jk * dim_b + r];
            }
        }
        probs.push(res.iter().map(|a| a.norm_sqr()).sum());
        residuals.push(res);
    }
    let total: f64 = probs.iter().sum();
    let mut x: f64 = rng.random::<f64>() * total;
    let mut outcome = d * d - 1;
    for (i, p) in probs.iter().enumerate() {
        x -= p;
        if x <= 0.0 {
            outcome = i;
            break;
        }
    }
    let idx = WeylIndex::from_flat(d, outcome)?;
    let collapsed = if dim_b >= 2 {
        Some(PureState::normalized(residuals[outcome].clone())?)
    } else {
        None
    };
    Ok((idx, collapsed))
}

/// Teleport `psi` through a fresh maximally entangled pair.
///
/// Returns the classical outcome and the receiver-side state before
/// correction; applying U_i^dagger recovers `psi` exactly.
pub fn teleport(psi: &PureState, rng: &mut SimRng) -> Result<(WeylIndex, PureState)> {
    let d = psi.dim();
    let resource = bell_state(d)?;
    // Joint state: qudit 1 = psi, qudits (2,3) = resource; A = (1,2), B = 3.
    let mut amps = vec![c(0.0, 0.0); d * d * d];
    for j in 0..d {
        for k in 0..d {
            for r in 0..d {
                amps[(j * d + k) * d + r] = psi.amps[j] * resource.amps()[k * d + r];
            }
        }
    }
    let joint = BipartiteState::new(d * d, d, amps)?;
    let (idx, collapsed) = bell_measure(&joint, d, rng)?;
    Ok((idx, collapsed.expect("receiver subsystem present")))
}

/// <psi| rho |psi>, the probability of passing a projective test onto psi.
pub fn fidelity(rho: &DensityMatrix, psi: &PureState) -> Result<f64> {
    if rho.dim() != psi.dim() {
        return Err(Error::DimensionMismatch {
            expected: psi.dim(),
            got: rho.dim(),
        });
    }
    let mut acc = c(0.0, 0.0);
    for i in 0..psi.dim() {
        for j in 0..psi.dim() {
            acc += psi.amps[i].conj() * rho.mat()[(i, j)] * psi.amps[j];
        }
    }
    if acc.im.abs() > 1e3 * TOL_INVARIANT {
        return Err(Error::State(format!(
            "fidelity has non-real residue {}",
            acc.im
        )));
    }
    Ok(acc.re.clamp(0.0, 1.0 + TOL_DERIVED).min(1.0))
}

/// Two-outcome measurement {|psi><psi|, I - |psi><psi|}; returns true with
/// probability fidelity(rho, psi). Consumes the state conceptually; the
/// transcript layer marks the handle measured.
pub fn projective_test(rho: &DensityMatrix, psi: &PureState, rng: &mut SimRng) -> Result<bool> {
    let p = fidelity(rho, psi)?;
    Ok(rng.random::<f64>() < p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_for_run;

    fn rng() -> SimRng {
        rng_for_run(7, 0)
    }

    #[test]
    fn weyl_identity_and_pauli_x() {
        let u = weyl_unitary(2, WeylIndex { a: 0, b: 0 }).unwrap();
        assert!((u.mat() - DMatrix::<C64>::identity(2, 2)).norm() < TOL_INVARIANT);
        let x = weyl_unitary(2, WeylIndex { a: 1, b: 0 }).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)]);
        assert!((x.mat() - expect).norm() < TOL_INVARIANT);
    }

    #[test]
    fn weyl_out_of_range_rejected() {
        assert!(weyl_unitary(2, WeylIndex { a: 2, b: 0 }).is_err());
        assert!(WeylIndex::new(3, 1, 3).is_err());
    }

    #[test]
    fn weyl_hs_orthogonality() {
        // All pairs for d <= 7: distinct indices orthogonal, diagonal = d.
        for d in 2..=7 {
            let fam = weyl_family(d).unwrap();
            for (i, u) in fam.iter().enumerate() {
                for (j, v) in fam.iter().enumerate() {
                    let ip = u.hs_inner(v);
                    if i == j {
                        assert!((ip.norm() - d as f64).abs() < TOL_DERIVED, "d={d} i={i}");
                    } else {
                        assert!(ip.norm() < TOL_DERIVED, "d={d} i={i} j={j}");
                    }
                }
            }
        }
    }

    #[test]
    fn twirl_maps_everything_to_maximally_mixed() {
        let mut r = rng();
        // Pinned cases from the identity.
        let zero = PureState::basis(2, 0).unwrap().density();
        let mixed2 = DensityMatrix::maximally_mixed(2).unwrap();
        assert!(weyl_twirl(&zero).unwrap().trace_distance(&mixed2).unwrap() < TOL_DERIVED);
        assert!(weyl_twirl(&mixed2).unwrap().trace_distance(&mixed2).unwrap() < TOL_DERIVED);
        for d in [2usize, 3, 5] {
            let mixed = DensityMatrix::maximally_mixed(d).unwrap();
            for _ in 0..100 {
                let psi = PureState::haar_random(d, &mut r).unwrap();
                let out = weyl_twirl(&psi.density()).unwrap();
                assert!(out.trace_distance(&mixed).unwrap() < TOL_DERIVED);
            }
        }
    }

    #[test]
    fn bell_state_reductions_and_schmidt() {
        let b2 = bell_state(2).unwrap();
        let inv_sqrt2 = 1.0 / 2f64.sqrt();
        assert!((b2.amps()[0].re - inv_sqrt2).abs() < TOL_INVARIANT);
        assert!(b2.amps()[1].norm() < TOL_INVARIANT);
        assert!(b2.amps()[2].norm() < TOL_INVARIANT);
        assert!((b2.amps()[3].re - inv_sqrt2).abs() < TOL_INVARIANT);

        let b3 = bell_state(3).unwrap();
        let mixed3 = DensityMatrix::maximally_mixed(3).unwrap();
        assert!(b3.reduced_a().unwrap().trace_distance(&mixed3).unwrap() < TOL_INVARIANT * 1e2);
        assert!(b3.reduced_b().unwrap().trace_distance(&mixed3).unwrap() < TOL_INVARIANT * 1e2);

        let b5 = bell_state(5).unwrap();
        let s = b5.schmidt_coefficients();
        assert_eq!(s.len(), 5);
        for x in s {
            assert!((x - 1.0 / 5f64.sqrt()).abs() < 1e-10);
        }
        assert!(bell_state(1).is_err());
    }

    #[test]
    fn teleport_basis_state_outcome_zero() {
        // Outcome (0,0) needs no correction.
        let mut r = rng();
        let psi = PureState::basis(2, 0).unwrap();
        loop {
            let (idx, received) = teleport(&psi, &mut r).unwrap();
            if idx == (WeylIndex { a: 0, b: 0 }) {
                assert!(received.overlap(&psi).unwrap() > 1.0 - TOL_DERIVED);
                break;
            }
        }
    }

    #[test]
    fn teleport_round_trip_all_outcomes() {
        // Every d, every outcome, random states: correction restores psi.
        let mut r = rng();
        for d in [2usize, 3, 5] {
            let mut seen = vec![0usize; d * d];
            for _ in 0..20 {
                let psi = PureState::haar_random(d, &mut r).unwrap();
                for _ in 0..(8 * d * d) {
                    let (idx, received) = teleport(&psi, &mut r).unwrap();
                    seen[idx.flat(d)] += 1;
                    let corr = weyl_unitary(d, idx).unwrap().dagger();
                    let fixed = received.apply(&corr).unwrap();
                    assert!(
                        fixed.overlap(&psi).unwrap() > 1.0 - TOL_DERIVED,
                        "d={d} idx=({},{})",
                        idx.a,
                        idx.b
                    );
                }
            }
            assert!(seen.iter().all(|&n| n > 0), "d={d}: not all outcomes observed");
        }
    }

    #[test]
    fn teleport_outcomes_equiprobable() {
        // d=3: 9 outcomes, each with empirical frequency 1/9 within 3 sigma.
        let mut r = rng();
        let psi = PureState::haar_random(3, &mut r).unwrap();
        let trials = 100_000;
        let mut counts = vec![0usize; 9];
        for _ in 0..trials {
            let (idx, _) = teleport(&psi, &mut r).unwrap();
            counts[idx.flat(3)] += 1;
        }
        let p = 1.0 / 9.0;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for (i, &n) in counts.iter().enumerate() {
            assert!(
                (n as f64 - trials as f64 * p).abs() < 3.0 * sigma + 1.0,
                "outcome {i}: count {n}"
            );
        }
    }

    #[test]
    fn fidelity_examples() {
        let zero = PureState::basis(2, 0).unwrap();
        assert!((fidelity(&zero.density(), &zero).unwrap() - 1.0).abs() < TOL_INVARIANT);
        let mut r = rng();
        for d in [2usize, 3, 5] {
            let psi = PureState::haar_random(d, &mut r).unwrap();
            let mixed = DensityMatrix::maximally_mixed(d).unwrap();
            assert!((fidelity(&mixed, &psi).unwrap() - 1.0 / d as f64).abs() < TOL_INVARIANT * 1e2);
        }
    }

    #[test]
    fn fidelity_dimension_mismatch() {
        let rho = DensityMatrix::maximally_mixed(2).unwrap();
        let psi = PureState::basis(3, 0).unwrap();
        assert!(matches!(
            fidelity(&rho, &psi),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn fidelity_linear_and_unitary_invariant() {
        let mut r = rng();
        for _ in 0..20 {
            let d = 3;
            let psi = PureState::haar_random(d, &mut r).unwrap();
            let a = PureState::haar_random(d, &mut r).unwrap().density();
            let b = PureState::haar_random(d, &mut r).unwrap().density();
            let lam = 0.3;
            let mix = DensityMatrix::new(a.mat() * c(lam, 0.0) + b.mat() * c(1.0 - lam, 0.0)).unwrap();
            let f_mix = fidelity(&mix, &psi).unwrap();
            let f_lin = lam * fidelity(&a, &psi).unwrap() + (1.0 - lam) * fidelity(&b, &psi).unwrap();
            assert!((f_mix - f_lin).abs() < TOL_DERIVED);

            let u = Unitary::haar_random(d, &mut r).unwrap();
            let f_rot = fidelity(&a.conjugate_by(&u).unwrap(), &psi.apply(&u).unwrap()).unwrap();
            assert!((f_rot - fidelity(&a, &psi).unwrap()).abs() < TOL_DERIVED);
        }
    }

    #[test]
    fn projective_test_deterministic_cases() {
        let mut r = rng();
        let psi = PureState::haar_random(2, &mut r).unwrap();
        for _ in 0..50 {
            assert!(projective_test(&psi.density(), &psi, &mut r).unwrap());
        }
        // Orthogonal state always fails.
        let zero = PureState::basis(2, 0).unwrap();
        let one = PureState::basis(2, 1).unwrap();
        for _ in 0..50 {
            assert!(!projective_test(&zero.density(), &one, &mut r).unwrap());
        }
    }

    #[test]
    fn projective_test_born_frequency() {
        let mut r = rng();
        let mixed = DensityMatrix::maximally_mixed(2).unwrap();
        let zero = PureState::basis(2, 0).unwrap();
        let trials = 100_000;
        let mut passes = 0usize;
        for _ in 0..trials {
            if projective_test(&mixed, &zero, &mut r).unwrap() {
                passes += 1;
            }
        }
        let sigma = (trials as f64 * 0.25).sqrt();
        assert!((passes as f64 - trials as f64 * 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn bell_measure_born_uniformity() {
        // Product-with-Bell inputs give uniform outcomes; chi-square elsewhere
        // (stats module) covers the p-value form of this check.
        let mut r = rng();
        let d = 2;
        let psi = PureState::haar_random(d, &mut r).unwrap();
        let trials = 40_000;
        let mut counts = vec![0usize; d * d];
        for _ in 0..trials {
            let (idx, _) = teleport(&psi, &mut r).unwrap();
            counts[idx.flat(d)] += 1;
        }
        let p = 1.0 / (d * d) as f64;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for &n in &counts {
            assert!((n as f64 - trials as f64 * p).abs() < 4.0 * sigma);
        }
    }

    #[test]
    fn density_matrix_invariants_enforced() {
        // Non-unit trace rejected.
        let m = DMatrix::from_diagonal_element(2, 2, c(1.0, 0.0));
        assert!(DensityMatrix::new(m).is_err());
        // Non-Hermitian rejected.
        let m = DMatrix::from_row_slice(2, 2, &[c(0.5, 0.), c(0.3, 0.), c(0.1, 0.), c(0.5, 0.)]);
        assert!(DensityMatrix::new(m).is_err());
        // Negative eigenvalue rejected.
        let m = DMatrix::from_row_slice(2, 2, &[c(1.2, 0.), c(0., 0.), c(0., 0.), c(-0.2, 0.)]);
        assert!(DensityMatrix::new(m).is_err());
    }

    #[test]
    fn bell_measure_dimension_mismatch() {
        let joint = bell_state(3).unwrap();
        assert!(matches!(
            bell_measure(&joint, 2, &mut rng()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
