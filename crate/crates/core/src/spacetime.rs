//! Minkowski geometry in units where c = 1: events, causal interval
//! classification, and validation of the protocol's geometric
//! preconditions (lightlike collinearity of each transmission branch,
//! spacelike separation of the return and reveal sites).

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Default dimensionless geometric tolerance.
pub const TAU_GEO_DEFAULT: f64 = 1e-9;

/// A point in Minkowski space, time plus 1 or 3 spatial coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub x: Vec<f64>,
}

impl Event {
    pub fn new(t: f64, x: Vec<f64>) -> Result<Self> {
        if x.is_empty() || (x.len() != 1 && x.len() != 3) {
            return Err(Error::argument("spatial dimension must be 1 or 3"));
        }
        if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("event coordinates must be finite"));
        }
        Ok(Event { t, x })
    }

    /// Convenience constructor for 1+1 dimensions.
    pub fn d1(t: f64, x: f64) -> Self {
        Event { t, x: vec![x] }
    }

    pub fn spatial_dim(&self) -> usize {
        self.x.len()
    }

    fn spatial_distance(&self, other: &Event) -> f64 {
        self.x
            .iter()
            .zip(other.x.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(t={}, x={:?})", self.t, self.x)
    }
}

/// Temporal orientation of a causal interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CausalSign {
    Future,
    Past,
}

/// Classification of the interval between two events by the sign of
/// (dt)^2 - |dx|^2 within a tolerance band around the light cone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum IntervalKind {
    Timelike(CausalSign),
    Lightlike(CausalSign),
    Spacelike,
}

impl IntervalKind {
    pub fn is_spacelike(&self) -> bool {
        matches!(self, IntervalKind::Spacelike)
    }

    pub fn is_causal_future(&self) -> bool {
        matches!(
            self,
            IntervalKind::Timelike(CausalSign::Future) | IntervalKind::Lightlike(CausalSign::Future)
        )
    }
}

/// Classify the interval from `e1` to `e2`.
///
/// Lightlike when |(dt)^2 - |dx|^2| <= tau_geo, timelike when
/// (dt)^2 > |dx|^2 + tau_geo, spacelike otherwise.
pub fn classify(e1: &Event, e2: &Event, tau_geo: f64) -> Result<IntervalKind> {
    if e1.spatial_dim() != e2.spatial_dim() {
        return Err(Error::DimensionMismatch {
            expected: e1.spatial_dim(),
            got: e2.spatial_dim(),
        });
    }
    let dt = e2.t - e1.t;
    let dx = e1.spatial_distance(e2);
    let interval = dt * dt - dx * dx;
    let sign = if dt >= 0.0 { CausalSign::Future } else { CausalSign::Past };
    if interval.abs() <= tau_geo {
        Ok(IntervalKind::Lightlike(sign))
    } else if interval > tau_geo {
        Ok(IntervalKind::Timelike(sign))
    } else {
        Ok(IntervalKind::Spacelike)
    }
}

/// True iff a signal leaving `from` at the given fraction of light speed
/// can arrive at `to` (forward in time), within tolerance.
pub fn causal_reachable(from: &Event, to: &Event, speed_limit: f64, tau_geo: f64) -> Result<bool> {
    if !(speed_limit > 0.0 && speed_limit <= 1.0) {
        return Err(Error::argument("speed_limit must lie in (0, 1]"));
    }
    if from.spatial_dim() != to.spatial_dim() {
        return Err(Error::DimensionMismatch {
            expected: from.spatial_dim(),
            got: to.spatial_dim(),
        });
    }
    let dt = to.t - from.t;
    let dx = from.spatial_distance(to);
    Ok(dt >= -tau_geo && dt >= dx / speed_limit - tau_geo)
}

/// One transmission wing: the randomization/return point P'_j and the
/// reveal/verification site Q_j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub p_prime: Event,
    pub q: Event,
}

/// Full protocol geometry: origin P plus one branch per candidate site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub origin: Event,
    pub branches: Vec<Branch>,
    #[serde(default = "default_tau")]
    pub tau_geo: f64,
}

fn default_tau() -> f64 {
    TAU_GEO_DEFAULT
}

/// A single violated geometric predicate. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GeometryViolation {
    /// P -> P'_j -> Q_j is not a future-lightlike collinear chain.
    BranchNotLightlikeCollinear { branch: usize, detail: String },
    /// Q_j is not in the causal future of P.
    SiteOutsideCausalFuture { branch: usize },
    /// A pair of return points P'_j, P'_k is not spacelike separated.
    ReturnPointsNotSpacelike { branch_a: usize, branch_b: usize },
    /// A pair of reveal sites Q_j, Q_k is not spacelike separated.
    SitesNotSpacelike { branch_a: usize, branch_b: usize },
    /// Fewer than two branches, or mixed spatial dimensions.
    Malformed { detail: String },
}

impl fmt::Display for GeometryViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryViolation::BranchNotLightlikeCollinear { branch, detail } => {
                write!(f, "branch {branch}: P, P', Q not lightlike-collinear ({detail})")
            }
            GeometryViolation::SiteOutsideCausalFuture { branch } => {
                write!(f, "branch {branch}: Q outside the causal future of P")
            }
            GeometryViolation::ReturnPointsNotSpacelike { branch_a, branch_b } => {
                write!(f, "return points P'_{branch_a}, P'_{branch_b} not spacelike separated")
            }
            GeometryViolation::SitesNotSpacelike { branch_a, branch_b } => {
                write!(f, "sites Q_{branch_a}, Q_{branch_b} not spacelike separated")
            }
            GeometryViolation::Malformed { detail } => write!(f, "malformed geometry: {detail}"),
        }
    }
}

/// Result of validating a [`GeometryConfig`]; empty iff admissible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<GeometryViolation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            write!(f, "geometry admissible")
        } else {
            for v in &self.violations {
                writeln!(f, "- {v}")?;
            }
            Ok(())
        }
    }
}

/// Check every geometric predicate of the protocol independently and
/// report all violations.
pub fn validate_geometry(g: &GeometryConfig) -> ValidationReport {
    let mut report = ValidationReport::default();
    if g.branches.len() < 2 {
        report.violations.push(GeometryViolation::Malformed {
            detail: format!("need at least 2 branches, got {}", g.branches.len()),
        });
        return report;
    }
    let sd = g.origin.spatial_dim();
    if g
        .branches
        .iter()
        .any(|b| b.p_prime.spatial_dim() != sd || b.q.spatial_dim() != sd)
    {
        report.violations.push(GeometryViolation::Malformed {
            detail: "mixed spatial dimensions".into(),
        });
        return report;
    }
    let tau = g.tau_geo;
    for (j, b) in g.branches.iter().enumerate() {
        // Future-lightlike legs P -> P'_j and P'_j -> Q_j.
        let leg1 = classify(&g.origin, &b.p_prime, tau).expect("dims checked");
        let leg2 = classify(&b.p_prime, &b.q, tau).expect("dims checked");
        let mut ok = matches!(leg1, IntervalKind::Lightlike(CausalSign::Future))
            && matches!(leg2, IntervalKind::Lightlike(CausalSign::Future));
        if ok && sd == 3 {
            // Lightlike legs may still bend; require parallel directions.
            ok = collinear_directions(&g.origin, &b.p_prime, &b.q, tau);
        }
        if !ok {
            report
                .violations
                .push(GeometryViolation::BranchNotLightlikeCollinear {
                    branch: j,
                    detail: format!("legs classified {leg1:?}, {leg2:?}"),
                });
        }
        let whole = classify(&g.origin, &b.q, tau).expect("dims checked");
        if !(whole.is_causal_future() ) {
            report
                .violations
                .push(GeometryViolation::SiteOutsideCausalFuture { branch: j });
        }
    }
    for j in 0..g.branches.len() {
        for k in (j + 1)..g.branches.len() {
            let pp = classify(&g.branches[j].p_prime, &g.branches[k].p_prime, tau).expect("dims");
            if !pp.is_spacelike() {
                report
                    .violations
                    .push(GeometryViolation::ReturnPointsNotSpacelike {
                        branch_a: j,
                        branch_b: k,
                    });
            }
            let qq = classify(&g.branches[j].q, &g.branches[k].q, tau).expect("dims");
            if !qq.is_spacelike() {
                report.violations.push(GeometryViolation::SitesNotSpacelike {
                    branch_a: j,
                    branch_b: k,
                });
            }
        }
    }
    report
}

fn collinear_directions(p: &Event, m: &Event, q: &Event, tau: f64) -> bool {
    let u: Vec<f64> = m.x.iter().zip(p.x.iter()).map(|(a, b)| a - b).collect();
    let v: Vec<f64> = q.x.iter().zip(m.x.iter()).map(|(a, b)| a - b).collect();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < tau || nv < tau {
        return true;
    }
    let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    (dot / (nu * nv) - 1.0).abs() <= 1e3 * tau
}

/// The canonical two-branch configuration in 1+1 dimensions: symmetric
/// lightlike wings from the origin.
pub fn canonical_two_branch() -> GeometryConfig {
    GeometryConfig {
        origin: Event::d1(0.0, 0.0),
        branches: vec![
            Branch {
                p_prime: Event::d1(1.0, -1.0),
                q: Event::d1(10.0, -10.0),
            },
            Branch {
                p_prime: Event::d1(1.0, 1.0),
                q: Event::d1(10.0, 10.0),
            },
        ],
        tau_geo: TAU_GEO_DEFAULT,
    }
}
