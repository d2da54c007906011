//! Sender strategies, honest and dishonest. The dishonest zoo contains the
//! optimal universal 1→2 cloner (which saturates the single-qudit bound
//! p1 + p2 = 1 + 2/(d+1)), the split attack, and the teleport-postselect
//! reduction with small collective operations.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qudit::{weyl_family, DensityMatrix, PureState, Unitary, C64};
use crate::SimRng;

fn c(re: f64, im: f64) -> C64 {
    Complex64::new(re, im)
}

/// Closed-form single-clone fidelity of the optimal universal 1→2 cloner.
pub fn cloner_marginal_fidelity(d: usize) -> f64 {
    0.5 + 1.0 / (d as f64 + 1.0)
}

/// Single-qudit two-site bound 1 + 2/(d+1).
pub fn two_site_bound(d: usize) -> f64 {
    1.0 + 2.0 / (d as f64 + 1.0)
}

/// The optimal universal 1→2 cloner: the completely positive map
/// rho -> (2/(d+1)) P_sym (rho tensor I_d) P_sym, with P_sym the projector
/// onto the symmetric subspace of C^d tensor C^d.
#[derive(Debug, Clone)]
pub struct ClonerChannel {
    d: usize,
}

/// Both clone marginals of a single input.
#[derive(Debug, Clone)]
pub struct CloneMarginals {
    pub site1: DensityMatrix,
    pub site2: DensityMatrix,
}

impl ClonerChannel {
    pub fn new(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::argument("dimension must be at least 2"));
        }
        Ok(ClonerChannel { d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Projector onto the symmetric subspace of C^d tensor C^d.
    pub fn symmetric_projector(d: usize) -> DMatrix<C64> {
        let dd = d * d;
        DMatrix::from_fn(dd, dd, |row, col| {
            let (i, j) = (row / d, row % d);
            let (k, l) = (col / d, col % d);
            let mut v = 0.0;
            if i == k && j == l {
                v += 0.5;
            }
            if i == l && j == k {
                v += 0.5;
            }
            c(v, 0.0)
        })
    }

    /// Kraus operators K_m: C^d -> C^{d^2}, K_m |psi> =
    /// sqrt(2/(d+1)) P_sym (|psi> tensor |m>).
    pub fn kraus_operators(&self) -> Vec<DMatrix<C64>> {
        let d = self.d;
        let coeff = (2.0 / (d as f64 + 1.0)).sqrt();
        (0..d)
            .map(|m| {
                DMatrix::from_fn(d * d, d, |row, col| {
                    let (i, j) = (row / d, row % d);
                    // P_sym (|col> tensor |m>) amplitude on |i,j>
                    let mut v = 0.0;
                    if i == col && j == m {
                        v += 0.5;
                    }
                    if i == m && j == col {
                        v += 0.5;
                    }
                    c(coeff * v, 0.0)
                })
            })
            .collect()
    }

    /// Full two-clone output for a mixed input, as a d^2-dimensional state.
    pub fn apply_joint(&self, rho: &DensityMatrix) -> Result<DensityMatrix> {
        if rho.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: rho.dim(),
            });
        }
        let mut out = DMatrix::from_element(self.d * self.d, self.d * self.d, c(0.0, 0.0));
        for k in self.kraus_operators() {
            out += &k * rho.mat() * k.adjoint();
        }
        DensityMatrix::new(out)
    }

    /// Both clone marginals for a pure input, computed without forming the
    /// joint output (the route used in hot loops and for large d).
    pub fn clone_pure(&self, psi: &PureState) -> Result<CloneMarginals> {
        let d = self.d;
        if psi.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: psi.dim(),
            });
        }
        let coeff = 2.0 / (d as f64 + 1.0);
        let mut m1 = DMatrix::from_element(d, d, c(0.0, 0.0));
        let mut m2 = DMatrix::from_element(d, d, c(0.0, 0.0));
        // Joint output = coeff * sum_j |phi_j><phi_j| with
        // phi_j = (psi tensor e_j + e_j tensor psi) / 2.
        let a = psi.amps();
        for j in 0..d {
            // phi[(x,y)] = (a[x] d_{yj} + d_{xj} a[y]) / 2
            for x in 0..d {
                for xp in 0..d {
                    let mut acc1 = c(0.0, 0.0);
                    let mut acc2 = c(0.0, 0.0);
                    for y in 0..d {
                        let phi_xy = phi_amp(a, j, x, y);
                        let phi_xpy = phi_amp(a, j, xp, y);
                        acc1 += phi_xy * phi_xpy.conj();
                        let phi_yx = phi_amp(a, j, y, x);
                        let phi_yxp = phi_amp(a, j, y, xp);
                        acc2 += phi_yx * phi_yxp.conj();
                    }
                    m1[(x, xp)] += acc1 * c(coeff, 0.0);
                    m2[(x, xp)] += acc2 * c(coeff, 0.0);
                }
            }
        }
        Ok(CloneMarginals {
            site1: DensityMatrix::new(m1)?,
            site2: DensityMatrix::new(m2)?,
        })
    }
}

#[inline]
fn phi_amp(a: &nalgebra::DVector<C64>, j: usize, x: usize, y: usize) -> C64 {
    let mut v = c(0.0, 0.0);
    if y == j {
        v += a[x];
    }
    if x == j {
        v += a[y];
    }
    v * c(0.5, 0.0)
}

/// What a strategy returns for one qudit: the effective (derandomized)
/// state Alice's agents hand back toward each branch, or `None` when
/// nothing is returned there.
pub type BranchStates = Vec<Option<DensityMatrix>>;

/// A sender strategy. Implementations are immutable after construction;
/// per-round sampling state flows through the rng handle, so instances are
/// shareable across parallel runs.
pub trait Strategy: Send + Sync {
    fn name(&self) -> String;

    /// Whether the strategy acts collectively across qudits.
    fn collective(&self) -> bool {
        false
    }

    /// Route one of Bob's qudits: produce the state returned toward each
    /// branch. `round` is the qudit index within `n_total`.
    fn route(
        &self,
        round: usize,
        n_total: usize,
        psi: &PureState,
        n_branches: usize,
        rng: &mut SimRng,
    ) -> Result<BranchStates>;

    /// The test-only miswired strategy asks the engine to attempt a
    /// superluminal classical delivery; everything sane returns false.
    fn miswired(&self) -> bool {
        false
    }
}

/// Honest Alice: the genuine state goes to her chosen branch, fresh
/// maximally-mixed dummies (with dummy classical data) everywhere else.
pub struct HonestStrategy {
    pub branch: usize,
}

impl Strategy for HonestStrategy {
    fn name(&self) -> String {
        format!("honest(branch={})", self.branch)
    }

    fn route(
        &self,
        _round: usize,
        _n_total: usize,
        psi: &PureState,
        n_branches: usize,
        _rng: &mut SimRng,
    ) -> Result<BranchStates> {
        if self.branch >= n_branches {
            return Err(Error::argument(format!(
                "branch {} out of range for {n_branches} branches",
                self.branch
            )));
        }
        let dummy = DensityMatrix::maximally_mixed(psi.dim())?;
        Ok((0..n_branches)
            .map(|j| {
                if j == self.branch {
                    Some(psi.density())
                } else {
                    Some(dummy.clone())
                }
            })
            .collect())
    }
}

/// Cloning attack: one optimal clone toward each of the two branches.
pub struct ClonerStrategy;

impl Strategy for ClonerStrategy {
    fn name(&self) -> String {
        "cloner".into()
    }

    fn route(
        &self,
        _round: usize,
        _n_total: usize,
        psi: &PureState,
        n_branches: usize,
        _rng: &mut SimRng,
    ) -> Result<BranchStates> {
        if n_branches != 2 {
            return Err(Error::UnsupportedStrategy(format!(
                "cloner supports exactly 2 branches, got {n_branches} \
                 (general 1->n bound is a configuration hook)"
            )));
        }
        let cloner = ClonerChannel::new(psi.dim())?;
        let clones = cloner.clone_pure(psi)?;
        Ok(vec![Some(clones.site1), Some(clones.site2)])
    }
}

/// Split attack: the first ceil(f N) qudits go genuinely to branch 1, the
/// rest to branch 2; nothing is returned at the other site.
pub struct SplitStrategy {
    pub fraction: f64,
}

impl Strategy for SplitStrategy {
    fn name(&self) -> String {
        format!("split(f={})", self.fraction)
    }

    fn route(
        &self,
        round: usize,
        n_total: usize,
        psi: &PureState,
        n_branches: usize,
        _rng: &mut SimRng,
    ) -> Result<BranchStates> {
        if n_branches != 2 {
            return Err(Error::UnsupportedStrategy(
                "split attack is defined for 2 branches".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::argument("split fraction must lie in [0, 1]"));
        }
        let to_first = (self.fraction * n_total as f64).ceil() as usize;
        let target = if round < to_first { 0 } else { 1 };
        Ok((0..2)
            .map(|j| (j == target).then(|| psi.density()))
            .collect())
    }
}

/// The collective operation plugged into the teleport-postselect
/// reduction. Each input slot yields one output per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveOp {
    /// Pass each qudit to site 1 untouched; fresh maximally mixed dummy to
    /// site 2.
    Identity,
    /// Optimal 1→2 cloner applied independently per qudit.
    PerQuditCloner,
    /// A Haar-random joint unitary on all input qudits, then the per-qudit
    /// cloner.
    RandomUnitaryThenClone,
}

/// Teleport-postselect reduction: prepare decoys plus an entangled pair,
/// apply the collective operation, postselect the decoy test results on a
/// target pattern, then teleport the real qudit through the remaining
/// entangled half and correct both outputs.
pub struct TeleportPostselectStrategy {
    d: usize,
    k: usize,
    op: CollectiveOp,
    target_pattern: Vec<(bool, bool)>,
    acceptance: f64,
    /// rho_B marginal of the conditioned residual state.
    rho_b: DMatrix<C64>,
    /// a1[a][ap][m][n] = sum_b rho_cond[(a,b,m),(ap,b,n)]
    a1: Vec<C64>,
    a2: Vec<C64>,
    weyl: Vec<Unitary>,
}

const POSTSELECT_FLOOR: f64 = 1e-4;
const POSTSELECT_MAX_DIM: usize = 4096;

impl TeleportPostselectStrategy {
    /// Build the strategy, sampling decoys (and the random collective
    /// unitary where applicable) once; the conditioning is computed in
    /// closed form rather than by literal rejection sampling.
    pub fn new(
        d: usize,
        k: usize,
        op: CollectiveOp,
        target_pattern: Vec<(bool, bool)>,
        rng: &mut SimRng,
    ) -> Result<Self> {
        if d < 2 || d > 3 {
            return Err(Error::UnsupportedStrategy(format!(
                "teleport-postselect is desk scale: d <= 3, got d={d}"
            )));
        }
        if k < 1 || k > 4 {
            return Err(Error::argument(format!("k must lie in 1..=4, got {k}")));
        }
        if target_pattern.len() != k - 1 {
            return Err(Error::argument(format!(
                "target pattern length {} != k-1 = {}",
                target_pattern.len(),
                k - 1
            )));
        }
        // Final state carries 2k output slots plus the entangled half.
        if d.pow(2 * k as u32 + 1) > POSTSELECT_MAX_DIM {
            return Err(Error::UnsupportedStrategy(format!(
                "collective size k={k} at d={d} exceeds the dense-state budget"
            )));
        }

        let decoys: Vec<PureState> = (0..k - 1)
            .map(|_| PureState::haar_random(d, rng))
            .collect::<Result<_>>()?;

        // Initial slots: decoys..., A, B with (A, B) maximally entangled.
        let mut dims: Vec<usize> = vec![d; k + 1];
        let mut vec_amps: Vec<C64> = vec![c(1.0, 0.0)];
        for psi in &decoys {
            vec_amps = kron_vec(&vec_amps, psi.amps().as_slice());
        }
        let bell: Vec<C64> = {
            let mut v = vec![c(0.0, 0.0); d * d];
            let w = 1.0 / (d as f64).sqrt();
            for i in 0..d {
                v[i * d + i] = c(w, 0.0);
            }
            v
        };
        vec_amps = kron_vec(&vec_amps, &bell);
        let n = vec_amps.len();
        let mut rho = DMatrix::from_fn(n, n, |i, j| vec_amps[i] * vec_amps[j].conj());

        if matches!(op, CollectiveOp::RandomUnitaryThenClone) {
            let v = Unitary::haar_random(d.pow(k as u32), rng)?;
            let full = v.mat().kronecker(&DMatrix::identity(d, d));
            rho = &full * rho * full.adjoint();
        }

        // Split each input slot into its two site outputs, last slot first
        // so earlier positions stay put.
        let cloner = ClonerChannel::new(d)?;
        let clone_kraus = cloner.kraus_operators();
        let identity_kraus: Vec<DMatrix<C64>> = (0..d)
            .map(|m| {
                let w = 1.0 / (d as f64).sqrt();
                DMatrix::from_fn(d * d, d, |row, col| {
                    if row / d == col && row % d == m {
                        c(w, 0.0)
                    } else {
                        c(0.0, 0.0)
                    }
                })
            })
            .collect();
        for slot in (0..k).rev() {
            let kraus = match op {
                CollectiveOp::Identity => &identity_kraus,
                CollectiveOp::PerQuditCloner | CollectiveOp::RandomUnitaryThenClone => &clone_kraus,
            };
            rho = split_slot(&rho, &mut dims, slot, kraus, d);
        }
        // Slots now: 1a,1b,2a,2b,...,ka,kb,B.

        // Condition the decoy outputs on the target pattern, highest slot
        // first.
        for j in (0..k - 1).rev() {
            let (want1, want2) = target_pattern[j];
            for (offset, want) in [(1usize, want2), (0usize, want1)] {
                let slot = 2 * j + offset;
                rho = condition_slot(&rho, &mut dims, slot, &decoys[j], want);
            }
        }
        debug_assert_eq!(dims, vec![d, d, d]);

        let acceptance = (0..rho.nrows()).map(|i| rho[(i, i)].re).sum::<f64>();
        if acceptance < POSTSELECT_FLOOR {
            return Err(Error::SamplingBudget(format!(
                "postselection acceptance {acceptance:.2e} below floor {POSTSELECT_FLOOR:.0e}"
            )));
        }
        rho /= c(acceptance, 0.0);

        // Precompute the contraction tensors over (site1, site2, B).
        let mut rho_b = DMatrix::from_element(d, d, c(0.0, 0.0));
        let mut a1 = vec![c(0.0, 0.0); d * d * d * d];
        let mut a2 = vec![c(0.0, 0.0); d * d * d * d];
        let idx = |a: usize, b: usize, m: usize| (a * d + b) * d + m;
        for m in 0..d {
            for n in 0..d {
                for a in 0..d {
                    for b in 0..d {
                        rho_b[(m, n)] += rho[(idx(a, b, m), idx(a, b, n))];
                    }
                }
                for a in 0..d {
                    for ap in 0..d {
                        let mut acc = c(0.0, 0.0);
                        for b in 0..d {
                            acc += rho[(idx(a, b, m), idx(ap, b, n))];
                        }
                        a1[((a * d + ap) * d + m) * d + n] = acc;
                    }
                }
                for b in 0..d {
                    for bp in 0..d {
                        let mut acc = c(0.0, 0.0);
                        for a in 0..d {
                            acc += rho[(idx(a, b, m), idx(a, bp, n))];
                        }
                        a2[((b * d + bp) * d + m) * d + n] = acc;
                    }
                }
            }
        }

        Ok(TeleportPostselectStrategy {
            d,
            k,
            op,
            target_pattern,
            acceptance,
            rho_b,
            a1,
            a2,
            weyl: weyl_family(d)?,
        })
    }

    /// Probability that one postselection attempt hits the target pattern.
    pub fn acceptance_probability(&self) -> f64 {
        self.acceptance
    }

    pub fn target_pattern(&self) -> &[(bool, bool)] {
        &self.target_pattern
    }
}

fn kron_vec(a: &[C64], b: &[C64]) -> Vec<C64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &x in a {
        for &y in b {
            out.push(x * y);
        }
    }
    out
}

/// Replace `slot` (dimension d) by two d-dimensional output slots via the
/// given Kraus set (each d^2 x d).
fn split_slot(
    rho: &DMatrix<C64>,
    dims: &mut Vec<usize>,
    slot: usize,
    kraus: &[DMatrix<C64>],
    d: usize,
) -> DMatrix<C64> {
    let pre: usize = dims[..slot].iter().product();
    let post: usize = dims[slot + 1..].iter().product();
    let i_pre = DMatrix::<C64>::identity(pre, pre);
    let i_post = DMatrix::<C64>::identity(post, post);
    let new_dim = pre * d * d * post;
    let mut out = DMatrix::from_element(new_dim, new_dim, c(0.0, 0.0));
    for k in kraus {
        let f = i_pre.kronecker(&k.kronecker(&i_post));
        out += &f * rho * f.adjoint();
    }
    dims.splice(slot..=slot, [d, d]);
    out
}

/// Condition `slot` on a projective test against `psi` passing (`want` =
/// true) or failing, returning the unnormalized conditioned state with the
/// slot traced out.
fn condition_slot(
    rho: &DMatrix<C64>,
    dims: &mut Vec<usize>,
    slot: usize,
    psi: &PureState,
    want: bool,
) -> DMatrix<C64> {
    let d = dims[slot];
    let pre: usize = dims[..slot].iter().product();
    let post: usize = dims[slot + 1..].iter().product();
    let rest = pre * post;
    let full_idx = |p: usize, m: usize, q: usize| (p * d + m) * post + q;
    let mut pass = DMatrix::from_element(rest, rest, c(0.0, 0.0));
    let mut traced = DMatrix::from_element(rest, rest, c(0.0, 0.0));
    let a = psi.amps();
    for p in 0..pre {
        for q in 0..post {
            let row_rest = p * post + q;
            for pp in 0..pre {
                for qq in 0..post {
                    let col_rest = pp * post + qq;
                    let mut acc_pass = c(0.0, 0.0);
                    let mut acc_tr = c(0.0, 0.0);
                    for m in 0..d {
                        acc_tr += rho[(full_idx(p, m, q), full_idx(pp, m, qq))];
                        for n in 0..d {
                            acc_pass += a[m].conj()
                                * rho[(full_idx(p, m, q), full_idx(pp, n, qq))]
                                * a[n];
                        }
                    }
                    pass[(row_rest, col_rest)] = acc_pass;
                    traced[(row_rest, col_rest)] = acc_tr;
                }
            }
        }
    }
    dims.remove(slot);
    if want {
        pass
    } else {
        traced - pass
    }
}

impl Strategy for TeleportPostselectStrategy {
    fn name(&self) -> String {
        format!("teleport_postselect(k={}, op={:?})", self.k, self.op)
    }

    fn collective(&self) -> bool {
        self.k > 1
    }

    fn route(
        &self,
        _round: usize,
        _n_total: usize,
        psi: &PureState,
        n_branches: usize,
        rng: &mut SimRng,
    ) -> Result<BranchStates> {
        if n_branches != 2 {
            return Err(Error::UnsupportedStrategy(
                "teleport-postselect is defined for 2 branches".into(),
            ));
        }
        if psi.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: psi.dim(),
            });
        }
        let d = self.d;
        let sqrt_d_inv = 1.0 / (d as f64).sqrt();
        // Bell-measure (psi, B): outcome i collapses B with the vector
        // c_i = (1/sqrt d) U_i psi; the correction on both outputs is
        // U_i^dagger.
        let mut coll: Vec<Vec<C64>> = Vec::with_capacity(d * d);
        let mut probs: Vec<f64> = Vec::with_capacity(d * d);
        for u in &self.weyl {
            let mut cv = vec![c(0.0, 0.0); d];
            for m in 0..d {
                let mut acc = c(0.0, 0.0);
                for j in 0..d {
                    acc += u.mat()[(m, j)] * psi.amps()[j];
                }
                cv[m] = acc * c(sqrt_d_inv, 0.0);
            }
            let mut p = c(0.0, 0.0);
            for m in 0..d {
                for n in 0..d {
                    p += cv[m] * self.rho_b[(m, n)] * cv[n].conj();
                }
            }
            probs.push(p.re.max(0.0));
            coll.push(cv);
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
        let cv = &coll[outcome];
        let prob = probs[outcome].max(1e-300);
        let correction = self.weyl[outcome].dagger();
        let marginal = |tensor: &[C64]| -> Result<DensityMatrix> {
            let mut m_out = DMatrix::from_element(d, d, c(0.0, 0.0));
            for a in 0..d {
                for ap in 0..d {
                    let mut acc = c(0.0, 0.0);
                    for m in 0..d {
                        for n in 0..d {
                            acc += tensor[((a * d + ap) * d + m) * d + n] * cv[m] * cv[n].conj();
                        }
                    }
                    m_out[(a, ap)] = acc / c(prob, 0.0);
                }
            }
            // Symmetrize away floating point residue before validation.
            let herm = (&m_out + m_out.adjoint()) * c(0.5, 0.0);
            DensityMatrix::new(herm)?.conjugate_by(&correction)
        };
        let rho1 = marginal(&self.a1)?;
        let rho2 = marginal(&self.a2)?;
        Ok(vec![Some(rho1), Some(rho2)])
    }
}

/// Test-only: behaves honestly but asks the engine to deliver its reveal
/// data along a spacelike path, which the channel layer must reject.
pub struct MiswiredStrategy {
    inner: HonestStrategy,
}

impl MiswiredStrategy {
    pub fn new(branch: usize) -> Self {
        MiswiredStrategy {
            inner: HonestStrategy { branch },
        }
    }
}

impl Strategy for MiswiredStrategy {
    fn name(&self) -> String {
        "miswired".into()
    }

    fn route(
        &self,
        round: usize,
        n_total: usize,
        psi: &PureState,
        n_branches: usize,
        rng: &mut SimRng,
    ) -> Result<BranchStates> {
        self.inner.route(round, n_total, psi, n_branches, rng)
    }

    fn miswired(&self) -> bool {
        true
    }
}

/// Config-level strategy selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum StrategySpec {
    Honest {
        #[serde(default)]
        branch: usize,
    },
    Cloner,
    Split { fraction: f64 },
    TeleportPostselect {
        k: usize,
        op: CollectiveOp,
        /// Per-decoy (site1, site2) target test results; defaults to
        /// all-pass.
        #[serde(default)]
        pattern: Option<Vec<(bool, bool)>>,
    },
    Miswired,
}

/// Instantiate a strategy for dimension `d`. Construction randomness
/// (decoys, random collective unitaries) comes from `rng`.
pub fn build_strategy(spec: &StrategySpec, d: usize, rng: &mut SimRng) -> Result<Box<dyn Strategy>> {
    match spec {
        StrategySpec::Honest { branch } => Ok(Box::new(HonestStrategy { branch: *branch })),
        StrategySpec::Cloner => Ok(Box::new(ClonerStrategy)),
        StrategySpec::Split { fraction } => Ok(Box::new(SplitStrategy {
            fraction: *fraction,
        })),
        StrategySpec::TeleportPostselect { k, op, pattern } => {
            let pat = pattern
                .clone()
                .unwrap_or_else(|| vec![(true, true); k.saturating_sub(1)]);
            Ok(Box::new(TeleportPostselectStrategy::new(
                d,
                *k,
                op.clone(),
                pat,
                rng,
            )?))
        }
        StrategySpec::Miswired => Ok(Box::new(MiswiredStrategy::new(0))),
    }
}
