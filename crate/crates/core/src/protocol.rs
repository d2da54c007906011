//! End-to-end protocol engine: Bob supplies N random qudits at the origin,
//! Alice's strategy routes them, and Bob verifies at the return sites under
//! one of the verification modes (direct, B1, B2, B3). Produces a
//! causally-audited transcript plus per-site tallies and verdicts.

use serde::{Deserialize, Serialize};

use crate::adversary::Strategy;
use crate::channels::{apply_loss, state_digest, ChannelKind, LossModel, Message, PayloadMeta};
use crate::error::{Error, Result};
use crate::qudit::{projective_test, weyl_family, PureState, WeylIndex};
use crate::spacetime::{causal_reachable, validate_geometry, Event, GeometryConfig};
use crate::stats::MartingaleTrace;
use crate::SimRng;

pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

/// Which verification scheme Bob runs at the return sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum VerifyMode {
    /// Test at Q_j against the original record.
    Direct,
    /// Bob carries the randomized state from P'_j to Q_j and derandomizes
    /// there with the delivered classical data.
    B1,
    /// Bob stores the randomized state at the spatial coordinate of P'_j
    /// and transmits the classical data back from Q_j; verification happens
    /// at the later rendezvous event.
    B2,
    /// Bob guesses the randomization index per round at P'_j and later
    /// keeps only the rounds where the guess matched the delivered index.
    B3 { m: usize },
}

/// Which acceptance threshold formula to use. Both appear in the source
/// analysis; the proof of the exponential bound uses `Methods`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdConvention {
    /// N_j > (N/2)(1 + 1/(d+1) + eps)
    Body,
    /// N_j >= (N/2)(1 + 2/(d+1) + eps)
    #[default]
    Methods,
}

/// Full configuration of one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub d: usize,
    pub n: usize,
    #[serde(default = "GeometryConfig::canonical_default")]
    pub geometry: GeometryConfig,
    #[serde(default = "default_mode")]
    pub verify_mode: VerifyMode,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "LossModel::lossless")]
    pub loss: LossModel,
    #[serde(default)]
    pub threshold_convention: ThresholdConvention,
    /// When set, the per-site acceptance threshold becomes
    /// `pass_count >= accept_fraction_override * rounds` instead of the
    /// redundant-protocol formula. This models a misconfigured verifier
    /// that tolerates a loss rate of 1 - override (the split-attack demo).
    #[serde(default)]
    pub accept_fraction_override: Option<f64>,
    /// Speed at which Bob's own couriers move (B1 leg), in units of c.
    #[serde(default = "default_speed")]
    pub bob_speed_limit: f64,
    /// Maximum quantum storage duration for B2; `None` = unbounded.
    #[serde(default)]
    pub storage_lifetime: Option<f64>,
    /// Constant in the multi-site (> 2 branches) acceptance bound
    /// sum_j p_j <= 1 + bound_constant / d; no value is assumed when absent.
    #[serde(default)]
    pub bound_constant: Option<f64>,
    /// Record the full per-event transcript (memory-heavy at large N).
    #[serde(default)]
    pub record_events: bool,
    /// Sample computational-basis probe outcomes of every adversary-visible
    /// in-flight state (the hiding-test instrumentation). The randomization
    /// layer is statistically transparent to Bob's own verification, so
    /// runs skip the explicit twirl when probes are off.
    #[serde(default)]
    pub record_probes: bool,
}

fn default_mode() -> VerifyMode {
    VerifyMode::Direct
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_speed() -> f64 {
    1.0
}

impl GeometryConfig {
    fn canonical_default() -> GeometryConfig {
        crate::spacetime::canonical_two_branch()
    }
}

impl ProtocolConfig {
    /// A two-branch configuration with the canonical geometry and
    /// otherwise default knobs.
    pub fn canonical(d: usize, n: usize) -> Self {
        ProtocolConfig {
            d,
            n,
            geometry: crate::spacetime::canonical_two_branch(),
            verify_mode: VerifyMode::Direct,
            epsilon: default_epsilon(),
            loss: LossModel::lossless(),
            threshold_convention: ThresholdConvention::Methods,
            accept_fraction_override: None,
            bob_speed_limit: 1.0,
            storage_lifetime: None,
            bound_constant: None,
            record_events: false,
            record_probes: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Config("dimension must be at least 2".into()));
        }
        if self.n < 1 {
            return Err(Error::Config("qudit count must be at least 1".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        self.loss.validate()?;
        let report = validate_geometry(&self.geometry);
        if !report.is_valid() {
            return Err(Error::GeometryInvalid(report));
        }
        if let Some(f) = self.accept_fraction_override {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(
                    "accept_fraction_override must lie in [0, 1]".into(),
                ));
            }
        }
        if let VerifyMode::B3 { m } = self.verify_mode {
            if m < 1 || self.n != m * self.d * self.d {
                return Err(Error::Config(format!(
                    "B3 requires N = M d^2; got N={}, M={}, d={}",
                    self.n, m, self.d
                )));
            }
        }
        Ok(())
    }
}

/// Per-site outcome of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
    /// B3 only: too few matched guesses — a sampling failure, not evidence
    /// of cheating.
    Inconclusive,
}

/// Per-site counting state of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestTally {
    pub rounds: usize,
    /// Qudits that passed verification at each site (B3: among matched
    /// rounds only).
    pub pass_counts: Vec<u64>,
    /// Qudits for which anything at all was returned at each site.
    pub returned_counts: Vec<u64>,
    /// B3: rounds where Bob's guess matched the delivered index.
    pub matched_counts: Option<Vec<u64>>,
    /// Z_k trace (two-branch, non-B3 runs).
    pub trace: Option<MartingaleTrace>,
}

impl TestTally {
    fn new(n_branches: usize, d: usize, mode: VerifyMode) -> Self {
        let trace = (n_branches == 2 && !matches!(mode, VerifyMode::B3 { .. }))
            .then(|| MartingaleTrace::new(MartingaleTrace::two_site_bound(d)).expect("bound > 0"));
        TestTally {
            rounds: 0,
            pass_counts: vec![0; n_branches],
            returned_counts: vec![0; n_branches],
            matched_counts: matches!(mode, VerifyMode::B3 { .. })
                .then(|| vec![0; n_branches]),
            trace,
        }
    }
}

/// One transcript line: either a causally-stamped message or a local event
/// at a single site, with optional qudit-handle bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<Event>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handle_created: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handle_consumed: Option<u64>,
}

/// Counters kept even when full event recording is off. Message causality
/// is enforced at construction time, so a completed (non-aborted) run has
/// zero violations by construction; the counters evidence coverage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub messages_validated: u64,
    pub handles_created: u64,
    pub handles_consumed: u64,
}

/// Complete record of one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub schema_version: u32,
    pub strategy: String,
    pub d: usize,
    pub n: usize,
    pub verify_mode: VerifyMode,
    pub tau_geo: f64,
    /// True when the run hard-aborted on an attempted causality violation;
    /// the offending event is the last transcript entry.
    pub aborted: bool,
    pub tally: TestTally,
    pub verdicts: Vec<Verdict>,
    pub audit: AuditSummary,
    /// Histogram (branch-major, length n_branches * d) of computational
    /// basis probe outcomes on adversary-visible pre-reveal deliveries.
    pub probe_counts: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<EventRecord>,
}

/// Per-site acceptance threshold of the redundant protocol.
pub fn threshold(rounds: usize, d: usize, epsilon: f64, convention: ThresholdConvention) -> f64 {
    let c = match convention {
        ThresholdConvention::Body => 1.0,
        ThresholdConvention::Methods => 2.0,
    };
    (rounds as f64 / 2.0) * (1.0 + c / (d as f64 + 1.0) + epsilon)
}

/// The exponential soundness bound exp[-N eps^2 / (2 (1 + 2/(d+1))^2)] on
/// the excess of P1 + P2 over 1.
pub fn azuma_bound(n: usize, d: usize, epsilon: f64) -> Result<f64> {
    crate::stats::azuma_tail(n as u64, epsilon, MartingaleTrace::two_site_bound(d))
}

/// Maximum tolerable loss fraction, 1/2 - 1/(d+1).
pub fn loss_tolerance(d: usize) -> f64 {
    0.5 - 1.0 / (d as f64 + 1.0)
}

/// Apply the per-site threshold rule to a completed tally.
pub fn redundant_verdict(tally: &TestTally, config: &ProtocolConfig) -> Vec<Verdict> {
    let n_sites = tally.pass_counts.len();
    let mut out = Vec::with_capacity(n_sites);
    for j in 0..n_sites {
        let (pass, basis) = match &tally.matched_counts {
            Some(matched) => {
                // B3: statistics restricted to matched rounds; too few
                // matches means Bob cannot run the test at all.
                let m_total = match config.verify_mode {
                    VerifyMode::B3 { m } => m,
                    _ => 0,
                };
                if (matched[j] as f64) < 2.0 * m_total as f64 / 3.0 {
                    out.push(Verdict::Inconclusive);
                    continue;
                }
                (tally.pass_counts[j], matched[j] as usize)
            }
            None => (tally.pass_counts[j], tally.rounds),
        };
        let verdict = if let Some(frac) = config.accept_fraction_override {
            if pass as f64 >= frac * basis as f64 {
                Verdict::Accept
            } else {
                Verdict::Reject
            }
        } else {
            let thr = threshold(basis, config.d, config.epsilon, config.threshold_convention);
            let ok = match config.threshold_convention {
                ThresholdConvention::Body => (pass as f64) > thr,
                ThresholdConvention::Methods => (pass as f64) >= thr,
            };
            if ok {
                Verdict::Accept
            } else {
                Verdict::Reject
            }
        };
        out.push(verdict);
    }
    out
}

/// Run with verify_mode = Direct.
pub fn run_direct(
    config: &ProtocolConfig,
    strategy: &dyn Strategy,
    rng: &mut SimRng,
) -> Result<TranscriptRecord> {
    if config.verify_mode != VerifyMode::Direct {
        return Err(Error::Config("run_direct requires Direct mode".into()));
    }
    run_protocol(config, strategy, rng)
}

/// Run with verify_mode in {B1, B2}.
pub fn run_extended(
    config: &ProtocolConfig,
    strategy: &dyn Strategy,
    rng: &mut SimRng,
) -> Result<TranscriptRecord> {
    if !matches!(config.verify_mode, VerifyMode::B1 | VerifyMode::B2) {
        return Err(Error::Config("run_extended requires B1 or B2 mode".into()));
    }
    run_protocol(config, strategy, rng)
}

/// Run with verify_mode = B3.
pub fn run_b3(
    config: &ProtocolConfig,
    strategy: &dyn Strategy,
    rng: &mut SimRng,
) -> Result<TranscriptRecord> {
    if !matches!(config.verify_mode, VerifyMode::B3 { .. }) {
        return Err(Error::Config("run_b3 requires B3 mode".into()));
    }
    run_protocol(config, strategy, rng)
}

/// Mode-dispatching entry point.
pub fn run_protocol(
    config: &ProtocolConfig,
    strategy: &dyn Strategy,
    rng: &mut SimRng,
) -> Result<TranscriptRecord> {
    config.validate()?;
    let d = config.d;
    let geometry = &config.geometry;
    let tau = geometry.tau_geo;
    let n_branches = geometry.branches.len();
    let origin = geometry.origin.clone();

    // B1: Bob's courier must reach Q_j from P'_j at his own speed limit.
    if config.verify_mode == VerifyMode::B1 {
        for (j, br) in geometry.branches.iter().enumerate() {
            if !causal_reachable(&br.p_prime, &br.q, config.bob_speed_limit, tau)? {
                return Err(Error::Scheduling(format!(
                    "branch {j}: Bob cannot carry the state from P' to Q at speed {}",
                    config.bob_speed_limit
                )));
            }
        }
    }

    // B2: rendezvous event per branch — the classical data travels from
    // Q_j back to the storage coordinate at light speed.
    let b2_rendezvous: Vec<(Event, f64)> = geometry
        .branches
        .iter()
        .map(|br| {
            let dist: f64 = br
                .q
                .x
                .iter()
                .zip(br.p_prime.x.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let t_v = br.q.t + dist;
            (
                Event {
                    t: t_v,
                    x: br.p_prime.x.clone(),
                },
                t_v - br.p_prime.t,
            )
        })
        .collect();
    let b2_expired: Vec<bool> = match (config.verify_mode, config.storage_lifetime) {
        (VerifyMode::B2, Some(lifetime)) => b2_rendezvous
            .iter()
            .map(|(_, duration)| *duration > lifetime + tau)
            .collect(),
        _ => vec![false; n_branches],
    };

    let weyl = weyl_family(d)?;
    let mut tally = TestTally::new(n_branches, d, config.verify_mode);
    let mut transcript = TranscriptRecord {
        schema_version: TRANSCRIPT_SCHEMA_VERSION,
        strategy: strategy.name(),
        d,
        n: config.n,
        verify_mode: config.verify_mode,
        tau_geo: tau,
        aborted: false,
        tally: TestTally::new(n_branches, d, config.verify_mode),
        verdicts: vec![],
        audit: AuditSummary::default(),
        probe_counts: vec![0; n_branches * d],
        events: vec![],
    };
    let mut next_handle: u64 = 0;
    let mut new_handle = |audit: &mut AuditSummary| {
        let h = next_handle;
        next_handle += 1;
        audit.handles_created += 1;
        h
    };

    // A miswired sender tries to push its reveal data to Q_1 essentially
    // instantaneously. The channel layer refuses to construct the message;
    // the engine hard-aborts and logs the attempt verbatim for the audit.
    if strategy.miswired() {
        let target = &geometry.branches[0].q;
        let deliver = Event {
            t: origin.t + 10.0 * tau,
            x: target.x.clone(),
        };
        let payload = PayloadMeta::ClassicalLabel {
            label: "reveal".into(),
        };
        match Message::new(
            payload.clone(),
            origin.clone(),
            deliver.clone(),
            ChannelKind::ClassicalSecure,
            1.0,
            tau,
        ) {
            Ok(_) => {
                return Err(Error::State(
                    "miswired delivery unexpectedly passed the causality check".into(),
                ))
            }
            Err(Error::Causality(_)) => {
                transcript.aborted = true;
                transcript.events.push(EventRecord {
                    kind: "superluminal_attempt".into(),
                    message: Some(Message {
                        payload,
                        emit: origin,
                        deliver,
                        channel: ChannelKind::ClassicalSecure,
                        visible_to_adversary: false,
                        speed_limit: 1.0,
                    }),
                    at: None,
                    handle_created: None,
                    handle_consumed: None,
                });
                transcript.tally = tally;
                transcript.verdicts = vec![Verdict::Reject; n_branches];
                return Ok(transcript);
            }
            Err(e) => return Err(e),
        }
    }

    for k in 0..config.n {
        let psi = PureState::haar_random(d, rng)?;
        let supply_handle = new_handle(&mut transcript.audit);
        if config.record_events {
            transcript.events.push(EventRecord {
                kind: "qudit_supply".into(),
                message: None,
                at: Some(origin.clone()),
                handle_created: Some(supply_handle),
                handle_consumed: None,
            });
        }
        let routed = strategy.route(k, config.n, &psi, n_branches, rng)?;
        if routed.len() != n_branches {
            return Err(Error::State(format!(
                "strategy returned {} branch slots for {n_branches} branches",
                routed.len()
            )));
        }
        transcript.audit.handles_consumed += 1;
        if config.record_events {
            transcript.events.push(EventRecord {
                kind: "strategy_ingest".into(),
                message: None,
                at: Some(origin.clone()),
                handle_created: None,
                handle_consumed: Some(supply_handle),
            });
        }

        let mut passes = vec![false; n_branches];
        for (j, slot) in routed.iter().enumerate() {
            let branch = &geometry.branches[j];
            let Some(rho) = slot else { continue };
            tally.returned_counts[j] += 1;

            // Randomization layer. The strategy output is the effective
            // derandomized return, so verification statistics are index-
            // independent; the explicit twirl only matters for what the
            // adversary can see in flight and for B3's index bookkeeping.
            let index = WeylIndex::random(d, rng);
            let flat = index.flat(d);
            if config.record_probes {
                let in_flight = rho.conjugate_by(&weyl[flat])?;
                let outcome = in_flight.sample_basis_outcome(rng);
                transcript.probe_counts[j * d + outcome] += 1;
            }

            // Quantum return leg P -> delivery site, adversary-visible.
            let return_handle = new_handle(&mut transcript.audit);
            let q_deliver = match config.verify_mode {
                VerifyMode::Direct => branch.q.clone(),
                _ => branch.p_prime.clone(),
            };
            let return_msg = Message::new(
                PayloadMeta::Quantum {
                    handle: return_handle,
                    digest: state_digest(rho),
                },
                origin.clone(),
                q_deliver,
                ChannelKind::RandomizedTransmission,
                1.0,
                tau,
            )?;
            transcript.audit.messages_validated += 1;

            // Classical reveal leg P -> Q_j (genuine at the chosen branch,
            // structurally identical dummy traffic elsewhere).
            let reveal_msg = Message::new(
                PayloadMeta::ClassicalWeyl {
                    indices: vec![index],
                },
                origin.clone(),
                branch.q.clone(),
                ChannelKind::ClassicalSecure,
                1.0,
                tau,
            )?;
            transcript.audit.messages_validated += 1;

            let mut carry_msg = None;
            let mut back_msg = None;
            let verify_at = match config.verify_mode {
                VerifyMode::Direct => branch.q.clone(),
                VerifyMode::B1 => {
                    carry_msg = Some(Message::new(
                        PayloadMeta::Quantum {
                            handle: return_handle,
                            digest: state_digest(rho),
                        },
                        branch.p_prime.clone(),
                        branch.q.clone(),
                        ChannelKind::PhysicallySecure,
                        config.bob_speed_limit,
                        tau,
                    )?);
                    transcript.audit.messages_validated += 1;
                    branch.q.clone()
                }
                VerifyMode::B2 => {
                    back_msg = Some(Message::new(
                        PayloadMeta::ClassicalWeyl {
                            indices: vec![index],
                        },
                        branch.q.clone(),
                        b2_rendezvous[j].0.clone(),
                        ChannelKind::ClassicalSecure,
                        1.0,
                        tau,
                    )?);
                    transcript.audit.messages_validated += 1;
                    b2_rendezvous[j].0.clone()
                }
                VerifyMode::B3 { .. } => branch.p_prime.clone(),
            };

            // Loss acts once on the quantum return leg; B2 storage expiry
            // is an additional deterministic loss.
            let survived = if b2_expired[j] {
                None
            } else {
                apply_loss(rho.clone(), &config.loss, rng)?
            };

            let pass = match config.verify_mode {
                VerifyMode::B3 { .. } => {
                    // Bob measures {U_g |psi><psi| U_g^dag, complement} at
                    // P'_j and keeps the round iff his guess g equals the
                    // delivered index; on a match the test is identical to
                    // the derandomized test.
                    let guess = WeylIndex::random(d, rng);
                    if guess.flat(d) == flat {
                        tally.matched_counts.as_mut().expect("B3 tally")[j] += 1;
                        match &survived {
                            Some(s) => {
                                let ok = projective_test(s, &psi, rng)?;
                                if ok {
                                    tally.pass_counts[j] += 1;
                                }
                                ok
                            }
                            None => false,
                        }
                    } else {
                        false
                    }
                }
                _ => match &survived {
                    Some(s) => {
                        let ok = projective_test(s, &psi, rng)?;
                        if ok {
                            tally.pass_counts[j] += 1;
                        }
                        ok
                    }
                    None => false,
                },
            };
            passes[j] = pass;

            if config.record_events {
                transcript.events.push(EventRecord {
                    kind: "quantum_return".into(),
                    message: Some(return_msg),
                    at: None,
                    handle_created: Some(return_handle),
                    handle_consumed: None,
                });
                if config.record_probes {
                    transcript.events.push(EventRecord {
                        kind: "adversary_probe".into(),
                        message: None,
                        at: Some(branch.p_prime.clone()),
                        handle_created: None,
                        handle_consumed: None,
                    });
                }
                transcript.events.push(EventRecord {
                    kind: "classical_reveal".into(),
                    message: Some(reveal_msg),
                    at: None,
                    handle_created: None,
                    handle_consumed: None,
                });
                if let Some(m) = carry_msg {
                    transcript.events.push(EventRecord {
                        kind: "bob_carry".into(),
                        message: Some(m),
                        at: None,
                        handle_created: None,
                        handle_consumed: None,
                    });
                }
                if let Some(m) = back_msg {
                    transcript.events.push(EventRecord {
                        kind: "classical_return".into(),
                        message: Some(m),
                        at: None,
                        handle_created: None,
                        handle_consumed: None,
                    });
                }
                transcript.events.push(EventRecord {
                    kind: "verify".into(),
                    message: None,
                    at: Some(verify_at),
                    handle_created: None,
                    handle_consumed: Some(return_handle),
                });
                transcript.audit.handles_consumed += 1;
            } else {
                transcript.audit.handles_consumed += 1;
            }
        }
        tally.rounds += 1;
        if let Some(trace) = tally.trace.as_mut() {
            trace.push_round(passes[0], passes[1]);
        }
    }

    transcript.verdicts = redundant_verdict(&tally, config);
    transcript.tally = tally;
    Ok(transcript)
}

/// Post-hoc audit findings over one transcript.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub events_checked: usize,
    pub causality_violations: Vec<String>,
    pub linearity_violations: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.causality_violations.is_empty() && self.linearity_violations.is_empty()
    }
}

/// Check causal consistency of every recorded message and linearity of
/// every qudit handle (created exactly once, consumed at most once).
pub fn audit_transcript(transcript: &TranscriptRecord) -> AuditReport {
    let mut report = AuditReport::default();
    let mut created: std::collections::HashMap<u64, u32> = std::collections::HashMap::new();
    let mut consumed: std::collections::HashMap<u64, u32> = std::collections::HashMap::new();
    for (idx, ev) in transcript.events.iter().enumerate() {
        report.events_checked += 1;
        if let Some(msg) = &ev.message {
            if !msg.causally_consistent(transcript.tau_geo) {
                report.causality_violations.push(format!(
                    "event {idx} ({}): delivery {} not causally reachable from {} at speed {}",
                    ev.kind, msg.deliver, msg.emit, msg.speed_limit
                ));
            }
        }
        if let Some(h) = ev.handle_created {
            *created.entry(h).or_insert(0) += 1;
        }
        if let Some(h) = ev.handle_consumed {
            *consumed.entry(h).or_insert(0) += 1;
        }
    }
    for (h, count) in created.iter() {
        if *count > 1 {
            report
                .linearity_violations
                .push(format!("handle {h} created {count} times"));
        }
    }
    for (h, count) in consumed.iter() {
        if *count > 1 {
            report
                .linearity_violations
                .push(format!("handle {h} consumed {count} times"));
        }
        if !created.contains_key(h) {
            report
                .linearity_violations
                .push(format!("handle {h} consumed but never created"));
        }
    }
    report
}

/// Header line of the line-delimited transcript serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TranscriptHeader {
    schema_version: u32,
    strategy: String,
    d: usize,
    n: usize,
    verify_mode: VerifyMode,
    tau_geo: f64,
    aborted: bool,
    tally: TestTally,
    verdicts: Vec<Verdict>,
    audit: AuditSummary,
    probe_counts: Vec<u64>,
}

impl TranscriptRecord {
    /// Serialize as one JSON header line followed by one JSON line per
    /// event.
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let header = TranscriptHeader {
            schema_version: self.schema_version,
            strategy: self.strategy.clone(),
            d: self.d,
            n: self.n,
            verify_mode: self.verify_mode,
            tau_geo: self.tau_geo,
            aborted: self.aborted,
            tally: self.tally.clone(),
            verdicts: self.verdicts.clone(),
            audit: self.audit.clone(),
            probe_counts: self.probe_counts.clone(),
        };
        let io_err = |e: std::io::Error| Error::State(format!("transcript write: {e}"));
        let ser_err = |e: serde_json::Error| Error::State(format!("transcript encode: {e}"));
        writeln!(w, "{}", serde_json::to_string(&header).map_err(ser_err)?).map_err(io_err)?;
        for ev in &self.events {
            writeln!(w, "{}", serde_json::to_string(ev).map_err(ser_err)?).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: std::io::BufRead>(r: R) -> Result<TranscriptRecord> {
        let mut lines = r.lines();
        let parse_err = |e: String| Error::State(format!("transcript parse: {e}"));
        let header_line = lines
            .next()
            .ok_or_else(|| parse_err("empty transcript".into()))?
            .map_err(|e| parse_err(e.to_string()))?;
        let header: TranscriptHeader =
            serde_json::from_str(&header_line).map_err(|e| parse_err(e.to_string()))?;
        let mut events = Vec::new();
        for line in lines {
            let line = line.map_err(|e| parse_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?);
        }
        Ok(TranscriptRecord {
            schema_version: header.schema_version,
            strategy: header.strategy,
            d: header.d,
            n: header.n,
            verify_mode: header.verify_mode,
            tau_geo: header.tau_geo,
            aborted: header.aborted,
            tally: header.tally,
            verdicts: header.verdicts,
            audit: header.audit,
            probe_counts: header.probe_counts,
            events,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{
        ClonerStrategy, HonestStrategy, MiswiredStrategy, SplitStrategy,
    };
    use crate::rng_for_run;
    use crate::spacetime::canonical_two_branch;
    use crate::stats::{binomial_tail, homogeneity_test, supermartingale_check};

    fn rng(run: u64) -> SimRng {
        rng_for_run(2027, run)
    }

    #[test]
    fn threshold_and_verdict_examples() {
        // d=2, N=1000, eps=0.1, Methods: 500 * (1 + 2/3 + 0.1) = 883.33.
        let thr = threshold(1000, 2, 0.1, ThresholdConvention::Methods);
        assert!((thr - 2650.0 / 3.0).abs() < 1e-9);
        let config = ProtocolConfig::canonical(2, 1000);
        let mut tally = TestTally::new(2, 2, VerifyMode::Direct);
        tally.rounds = 1000;
        tally.pass_counts = vec![884, 883];
        assert_eq!(
            redundant_verdict(&tally, &config),
            vec![Verdict::Accept, Verdict::Reject]
        );
        // Perfect score accepts; exactly N/2 rejects under Methods.
        tally.pass_counts = vec![1000, 500];
        assert_eq!(
            redundant_verdict(&tally, &config),
            vec![Verdict::Accept, Verdict::Reject]
        );
        // Body convention is strictly-greater with the 1/(d+1) term.
        let body = threshold(1000, 2, 0.1, ThresholdConvention::Body);
        assert!((body - 500.0 * (1.0 + 1.0 / 3.0 + 0.1)).abs() < 1e-9);
        assert!(body < thr);
    }

    #[test]
    fn azuma_bound_examples() {
        let v = azuma_bound(1000, 2, 0.1).unwrap();
        assert!((v - (-1.8f64).exp()).abs() < 1e-12);
        assert!((v - 0.16529889).abs() < 1e-7);
        assert!((azuma_bound(1000, 2, 1e-9).unwrap() - 1.0).abs() < 1e-6);
        assert!(azuma_bound(10_000_000, 2, 0.1).unwrap() < 1e-100);
    }

    #[test]
    fn loss_tolerance_values() {
        assert!((loss_tolerance(2) - 1.0 / 6.0).abs() < 1e-12);
        assert!((loss_tolerance(3) - 0.25).abs() < 1e-12);
        assert!((loss_tolerance(1_000_000) - 0.5).abs() < 1e-5);
    }

    #[test]
    fn direct_honest_single_round() {
        let config = ProtocolConfig::canonical(2, 1);
        let strategy = HonestStrategy { branch: 0 };
        let mut dummy_passes = 0u64;
        let runs = 2000;
        for run in 0..runs {
            let mut r = rng(run);
            let t = run_direct(&config, &strategy, &mut r).unwrap();
            assert_eq!(t.tally.pass_counts[0], 1, "chosen site always passes");
            dummy_passes += t.tally.pass_counts[1];
        }
        // Dummy branch passes with probability 1/d = 1/2.
        let rate = dummy_passes as f64 / runs as f64;
        let sigma = (0.25 / runs as f64).sqrt();
        assert!((rate - 0.5).abs() < 3.0 * sigma + 0.01, "rate {rate}");
    }

    #[test]
    fn direct_cloner_rates() {
        let config = ProtocolConfig::canonical(2, 10_000);
        let mut r = rng(0);
        let t = run_direct(&config, &ClonerStrategy, &mut r).unwrap();
        let sigma = (10_000.0f64 * (5.0 / 6.0) * (1.0 / 6.0)).sqrt();
        for j in 0..2 {
            let count = t.tally.pass_counts[j] as f64;
            assert!(
                (count - 10_000.0 * 5.0 / 6.0).abs() < 3.0 * sigma,
                "site {j}: {count}"
            );
        }
    }

    #[test]
    fn direct_honest_with_loss() {
        let mut config = ProtocolConfig::canonical(2, 1000);
        config.loss = LossModel {
            loss_prob: 0.2,
            depolarize_prob: 0.0,
        };
        let mut r = rng(1);
        let t = run_direct(&config, &HonestStrategy { branch: 0 }, &mut r).unwrap();
        let sigma = (1000.0f64 * 0.8 * 0.2).sqrt();
        let count = t.tally.pass_counts[0] as f64;
        assert!((count - 800.0).abs() < 3.0 * sigma, "count {count}");
    }

    #[test]
    fn b1_honest_perfect() {
        let mut config = ProtocolConfig::canonical(2, 100);
        config.verify_mode = VerifyMode::B1;
        let mut r = rng(2);
        let t = run_extended(&config, &HonestStrategy { branch: 1 }, &mut r).unwrap();
        assert_eq!(t.tally.pass_counts[1], 100);
    }

    #[test]
    fn b1_slow_bob_is_scheduling_error() {
        let mut config = ProtocolConfig::canonical(2, 10);
        config.verify_mode = VerifyMode::B1;
        config.bob_speed_limit = 0.5;
        let mut r = rng(3);
        assert!(matches!(
            run_extended(&config, &HonestStrategy { branch: 0 }, &mut r),
            Err(Error::Scheduling(_))
        ));
    }

    #[test]
    fn b2_verification_is_delayed_and_audits_clean() {
        let mut config = ProtocolConfig::canonical(2, 3);
        config.verify_mode = VerifyMode::B2;
        config.record_events = true;
        let mut r = rng(4);
        let t = run_extended(&config, &HonestStrategy { branch: 0 }, &mut r).unwrap();
        let q_times: Vec<f64> = canonical_two_branch()
            .branches
            .iter()
            .map(|b| b.q.t)
            .collect();
        let mut verify_events = 0;
        for ev in &t.events {
            if ev.kind == "verify" {
                verify_events += 1;
                let at = ev.at.as_ref().unwrap();
                assert!(
                    q_times.iter().all(|qt| at.t > *qt),
                    "verification at t={} is not after Q (t={q_times:?})",
                    at.t
                );
            }
        }
        assert_eq!(verify_events, 6);
        assert!(audit_transcript(&t).is_clean());
    }

    #[test]
    fn b2_storage_expiry_loses_everything() {
        let mut config = ProtocolConfig::canonical(2, 50);
        config.verify_mode = VerifyMode::B2;
        // Canonical geometry needs 18 time units of storage.
        config.storage_lifetime = Some(5.0);
        let mut r = rng(5);
        let t = run_extended(&config, &HonestStrategy { branch: 0 }, &mut r).unwrap();
        assert_eq!(t.tally.pass_counts, vec![0, 0]);
        config.storage_lifetime = Some(20.0);
        let mut r = rng(5);
        let t = run_extended(&config, &HonestStrategy { branch: 0 }, &mut r).unwrap();
        assert_eq!(t.tally.pass_counts[0], 50);
    }

    #[test]
    fn extended_modes_match_direct_statistics() {
        // Same strategy, same loss: per-site pass probabilities agree
        // across Direct/B1/B2 within 3 sigma.
        let runs = 100u64;
        let n = 100usize;
        let mut rates = vec![];
        for mode in [VerifyMode::Direct, VerifyMode::B1, VerifyMode::B2] {
            let mut config = ProtocolConfig::canonical(2, n);
            config.verify_mode = mode;
            let mut passes = 0u64;
            for run in 0..runs {
                let mut r = rng(100 + run);
                let t = run_protocol(&config, &ClonerStrategy, &mut r).unwrap();
                passes += t.tally.pass_counts[0];
            }
            rates.push(passes as f64 / (runs as f64 * n as f64));
        }
        let sigma = ((5.0 / 6.0) * (1.0 / 6.0) / (runs as f64 * n as f64)).sqrt();
        for pair in rates.windows(2) {
            assert!(
                (pair[0] - pair[1]).abs() < 3.0 * (2.0f64).sqrt() * sigma,
                "rates {rates:?}"
            );
        }
    }

    #[test]
    fn b3_honest_matched_rounds_accept() {
        let m = 300;
        let mut config = ProtocolConfig::canonical(2, m * 4);
        config.verify_mode = VerifyMode::B3 { m };
        let mut accepts = 0;
        let runs = 50;
        for run in 0..runs {
            let mut r = rng(200 + run);
            let t = run_b3(&config, &HonestStrategy { branch: 0 }, &mut r).unwrap();
            let matched = t.tally.matched_counts.as_ref().unwrap();
            // Matching rate 1/d^2 = 1/4 over N = 1200 rounds.
            let sigma = (1200.0f64 * 0.25 * 0.75).sqrt();
            assert!((matched[0] as f64 - 300.0).abs() < 5.0 * sigma);
            // Lossless honest: every matched round passes.
            assert_eq!(t.tally.pass_counts[0], matched[0]);
            if t.verdicts[0] == Verdict::Accept {
                accepts += 1;
            }
            assert_ne!(t.verdicts[1], Verdict::Accept, "dummy site must not accept");
        }
        assert_eq!(accepts, runs);
        // Binomial tail: P(matched >= 2M/3) at p=1/4 over N=1200.
        let p_enough = binomial_tail(1200, 200, 0.25).unwrap();
        assert!(p_enough > 0.9999);
    }

    #[test]
    fn b3_too_few_matches_is_inconclusive() {
        let config = ProtocolConfig {
            verify_mode: VerifyMode::B3 { m: 300 },
            ..ProtocolConfig::canonical(2, 1200)
        };
        let mut tally = TestTally::new(2, 2, VerifyMode::B3 { m: 300 });
        tally.rounds = 1200;
        tally.matched_counts = Some(vec![150, 300]);
        tally.pass_counts = vec![150, 150];
        let v = redundant_verdict(&tally, &config);
        assert_eq!(v[0], Verdict::Inconclusive);
        assert_eq!(v[1], Verdict::Reject);
    }

    #[test]
    fn b3_requires_square_count() {
        let mut config = ProtocolConfig::canonical(2, 1000);
        config.verify_mode = VerifyMode::B3 { m: 300 };
        let mut r = rng(6);
        assert!(matches!(
            run_b3(&config, &HonestStrategy { branch: 0 }, &mut r),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_rejected_then_accepted_under_permissive_threshold() {
        let config = ProtocolConfig::canonical(2, 1000);
        let strategy = SplitStrategy { fraction: 0.5 };
        let mut r = rng(7);
        let t = run_direct(&config, &strategy, &mut r).unwrap();
        // Deterministic 500 passes per site, threshold 883.33.
        assert_eq!(t.tally.pass_counts, vec![500, 500]);
        assert_eq!(t.verdicts, vec![Verdict::Reject, Verdict::Reject]);
        // Misconfigured verifier tolerating 60% loss: accept at both.
        let mut permissive = config.clone();
        permissive.accept_fraction_override = Some(0.4);
        let mut r = rng(7);
        let t = run_direct(&permissive, &strategy, &mut r).unwrap();
        assert_eq!(t.verdicts, vec![Verdict::Accept, Verdict::Accept]);
    }

    #[test]
    fn miswired_strategy_aborts_and_audit_flags_it() {
        let mut config = ProtocolConfig::canonical(2, 10);
        config.record_events = true;
        let mut r = rng(8);
        let t = run_protocol(&config, &MiswiredStrategy::new(0), &mut r).unwrap();
        assert!(t.aborted);
        let report = audit_transcript(&t);
        assert!(!report.causality_violations.is_empty());
        // An honest transcript with full recording audits clean.
        let mut r = rng(8);
        let t = run_protocol(&config, &HonestStrategy { branch: 0 }, &mut r).unwrap();
        assert!(!t.aborted);
        assert!(audit_transcript(&t).is_clean());
    }

    #[test]
    fn transcript_jsonl_round_trip() {
        let mut config = ProtocolConfig::canonical(2, 5);
        config.record_events = true;
        config.record_probes = true;
        let mut r = rng(9);
        let t = run_protocol(&config, &HonestStrategy { branch: 1 }, &mut r).unwrap();
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let back = TranscriptRecord::read_jsonl(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(t, back);
        assert!(audit_transcript(&back).is_clean());
    }

    #[test]
    fn invalid_geometry_is_config_error() {
        let mut config = ProtocolConfig::canonical(2, 10);
        config.geometry.branches[1].q = Event::d1(10.0, -10.0);
        let mut r = rng(10);
        assert!(matches!(
            run_direct(&config, &HonestStrategy { branch: 0 }, &mut r),
            Err(Error::GeometryInvalid(_))
        ));
    }

    #[test]
    fn product_strategy_increments_are_supermartingale() {
        let config = ProtocolConfig::canonical(2, 50);
        let mut traces = Vec::new();
        for run in 0..1200 {
            let mut r = rng(300 + run);
            let t = run_direct(&config, &ClonerStrategy, &mut r).unwrap();
            traces.push(t.tally.trace.clone().unwrap());
        }
        let report = supermartingale_check(&traces, 0.999).unwrap();
        assert!(!report.violation, "max bin mean {}", report.max_mean);
    }

    #[test]
    fn probe_histograms_hide_branch_choice() {
        // Everything visible before the reveal is independent of Alice's
        // branch choice: probe outcomes for j=0 runs vs j=1 runs are
        // homogeneous.
        let mut config = ProtocolConfig::canonical(2, 20);
        config.record_probes = true;
        let collect = |branch: usize| {
            let mut hist = vec![0u64; 4];
            for run in 0..200u64 {
                let mut r = rng(2000 + 10_000 * branch as u64 + run);
                let t = run_direct(&config, &HonestStrategy { branch }, &mut r).unwrap();
                for (i, c) in t.probe_counts.iter().enumerate() {
                    hist[i] += c;
                }
            }
            hist
        };
        let h0 = collect(0);
        let h1 = collect(1);
        let p = homogeneity_test(&h0, &h1).unwrap();
        assert!(p > 0.001, "p = {p}, h0 {h0:?} h1 {h1:?}");
    }
}
