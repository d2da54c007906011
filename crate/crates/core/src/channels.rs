//! Secure-channel constructions: physically secure transport, teleportation
//! over predistributed entanglement, and randomized-state transmission,
//! plus the classical channel abstractions and the per-transmission loss
//! model. Every delivery is causally stamped; enqueueing a message that
//! outruns its channel's speed limit is an error, not a logged event.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qudit::{
    bell_measure, fidelity, weyl_unitary, BipartiteState, DensityMatrix, PureState, WeylIndex,
};
use crate::spacetime::{causal_reachable, Event};
use crate::SimRng;

/// The channel types of the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// S1: quantum transmission inside a physically secure region.
    PhysicallySecure,
    /// S2: teleportation between secure sites over predistributed
    /// entanglement; only classical data travels.
    TeleportPredistributed,
    /// S3: the randomized state travels an insecure quantum channel while
    /// the Weyl index travels a secure classical one.
    RandomizedTransmission,
    /// One-time-pad protected classical channel; adversary sees timing and
    /// length only.
    ClassicalSecure,
    /// Public classical broadcast.
    ClassicalPublic,
}

impl ChannelKind {
    /// Whether the in-flight payload content is observable by the adversary.
    pub fn payload_visible(&self) -> bool {
        matches!(
            self,
            ChannelKind::RandomizedTransmission | ChannelKind::ClassicalPublic
        )
    }

    pub fn is_quantum(&self) -> bool {
        matches!(
            self,
            ChannelKind::PhysicallySecure
                | ChannelKind::TeleportPredistributed
                | ChannelKind::RandomizedTransmission
        )
    }
}

/// Per-transmission loss and depolarization probabilities, applied
/// independently per qudit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    #[serde(default)]
    pub loss_prob: f64,
    #[serde(default)]
    pub depolarize_prob: f64,
}

impl LossModel {
    pub fn lossless() -> Self {
        LossModel {
            loss_prob: 0.0,
            depolarize_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.loss_prob) {
            return Err(Error::argument("loss_prob must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.depolarize_prob) {
            return Err(Error::argument("depolarize_prob must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Apply the loss model: with probability `loss_prob` the state is gone,
/// otherwise with probability `depolarize_prob` it is replaced by the
/// maximally mixed state.
pub fn apply_loss(
    state: DensityMatrix,
    model: &LossModel,
    rng: &mut SimRng,
) -> Result<Option<DensityMatrix>> {
    model.validate()?;
    use rand::Rng;
    if rng.random::<f64>() < model.loss_prob {
        return Ok(None);
    }
    if rng.random::<f64>() < model.depolarize_prob {
        return Ok(Some(DensityMatrix::maximally_mixed(state.dim())?));
    }
    Ok(Some(state))
}

/// Payload metadata recorded in the transcript. Quantum payloads are
/// referenced by handle and content digest; the state itself flows through
/// the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayloadMeta {
    Quantum { handle: u64, digest: u64 },
    ClassicalWeyl { indices: Vec<WeylIndex> },
    ClassicalBits { bits: Vec<u8> },
    ClassicalLabel { label: String },
}

/// Content digest of a density matrix, for transcript audit lines.
pub fn state_digest(rho: &DensityMatrix) -> u64 {
    let mut acc: u64 = 0xcbf29ce484222325;
    for v in rho.mat().iter() {
        for bits in [v.re.to_bits(), v.im.to_bits()] {
            acc ^= bits;
            acc = acc.wrapping_mul(0x100000001b3);
        }
    }
    acc
}

/// A causally-stamped message. Construction enforces that the delivery
/// event is reachable from the emission event at the channel's speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub payload: PayloadMeta,
    pub emit: Event,
    pub deliver: Event,
    pub channel: ChannelKind,
    pub visible_to_adversary: bool,
    pub speed_limit: f64,
}

impl Message {
    pub fn new(
        payload: PayloadMeta,
        emit: Event,
        deliver: Event,
        channel: ChannelKind,
        speed_limit: f64,
        tau_geo: f64,
    ) -> Result<Self> {
        if !causal_reachable(&emit, &deliver, speed_limit, tau_geo)? {
            return Err(Error::Causality(format!(
                "delivery {deliver} not reachable from {emit} at speed {speed_limit}"
            )));
        }
        Ok(Message {
            visible_to_adversary: channel.payload_visible(),
            payload,
            emit,
            deliver,
            channel,
            speed_limit,
        })
    }

    /// Re-check the causality stamp (used by the post-hoc audit).
    pub fn causally_consistent(&self, tau_geo: f64) -> bool {
        causal_reachable(&self.emit, &self.deliver, self.speed_limit, tau_geo).unwrap_or(false)
    }
}

/// A convex spatial region (ball, constant in time) modeling a party's
/// physically secure laboratory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecureRegion {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl SecureRegion {
    pub fn contains(&self, e: &Event) -> bool {
        if e.spatial_dim() != self.center.len() {
            return false;
        }
        let dist2: f64 = e
            .x
            .iter()
            .zip(self.center.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        dist2.sqrt() <= self.radius + 1e-12
    }
}

/// Result of an S1 send: the logged message and the delivered state
/// (absent when the loss model ate it).
#[derive(Debug)]
pub struct S1Delivery {
    pub message: Message,
    pub delivered: Option<DensityMatrix>,
}

/// Physically secure quantum transmission: the straight path must stay
/// inside the sender's secure region and respect causality; the adversary
/// gains nothing.
pub fn send_s1(
    state: DensityMatrix,
    handle: u64,
    from: &Event,
    to: &Event,
    region: &SecureRegion,
    loss: &LossModel,
    speed_limit: f64,
    tau_geo: f64,
    rng: &mut SimRng,
) -> Result<S1Delivery> {
    if !region.contains(from) || !region.contains(to) {
        return Err(Error::Geometry(format!(
            "S1 path {from} -> {to} exits the secure region"
        )));
    }
    let digest = state_digest(&state);
    let message = Message::new(
        PayloadMeta::Quantum { handle, digest },
        from.clone(),
        to.clone(),
        ChannelKind::PhysicallySecure,
        speed_limit,
        tau_geo,
    )?;
    let delivered = apply_loss(state, loss, rng)?;
    Ok(S1Delivery { message, delivered })
}

/// A predistributed entanglement resource between two endpoints; consumed
/// by the first teleport.
#[derive(Debug)]
pub struct SharedEntanglement {
    resource: Option<BipartiteState>,
}

impl SharedEntanglement {
    pub fn new(resource: BipartiteState) -> Self {
        SharedEntanglement {
            resource: Some(resource),
        }
    }

    fn take(&mut self) -> Result<BipartiteState> {
        self.resource
            .take()
            .ok_or_else(|| Error::State("entanglement resource already consumed".into()))
    }
}

/// Result of an S2 teleport send.
#[derive(Debug)]
pub struct S2Delivery {
    pub classical_message: Message,
    pub outcome: WeylIndex,
    /// State materialized at the destination after the correction unitary.
    pub delivered: PureState,
}

/// Teleport `psi` between secure sites over a predistributed maximally
/// entangled pair, transmitting only the classical outcome (which may use
/// a public channel: it is independent of `psi`).
pub fn send_s2_teleport(
    psi: &PureState,
    resource: &mut SharedEntanglement,
    from: &Event,
    to: &Event,
    classical_channel: ChannelKind,
    speed_limit: f64,
    tau_geo: f64,
    rng: &mut SimRng,
) -> Result<S2Delivery> {
    let pair = resource.take()?;
    let d = psi.dim();
    if pair.dim_a() != d || pair.dim_b() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: pair.dim_a(),
        });
    }
    // Joint state (psi, pair) with A = qudits (1,2) and B = receiver side.
    let mut amps = vec![num_complex::Complex64::new(0.0, 0.0); d * d * d];
    for j in 0..d {
        for k in 0..d {
            for r in 0..d {
                amps[(j * d + k) * d + r] = psi.amps()[j] * pair.amps()[k * d + r];
            }
        }
    }
    let joint = BipartiteState::new(d * d, d, amps)?;
    let (outcome, collapsed) = bell_measure(&joint, d, rng)?;
    let received = collapsed.expect("receiver side present");
    let correction = weyl_unitary(d, outcome)?.dagger();
    let delivered = received.apply(&correction)?;
    let classical_message = Message::new(
        PayloadMeta::ClassicalWeyl {
            indices: vec![outcome],
        },
        from.clone(),
        to.clone(),
        classical_channel,
        speed_limit,
        tau_geo,
    )?;
    Ok(S2Delivery {
        classical_message,
        outcome,
        delivered,
    })
}

/// Result of an S3 randomized-state send. The quantum leg is adversary
/// visible; the classical leg carries the Weyl index securely.
#[derive(Debug)]
pub struct S3Delivery {
    pub quantum_message: Message,
    pub classical_message: Message,
    pub index: WeylIndex,
    /// In-flight state U_i |psi>, as carried by the insecure quantum leg.
    pub in_flight: PureState,
}

impl S3Delivery {
    /// Apply U_i^dagger at the end of the path, regenerating the input.
    pub fn derandomize(&self) -> Result<PureState> {
        let d = self.in_flight.dim();
        let corr = weyl_unitary(d, self.index)?.dagger();
        self.in_flight.apply(&corr)
    }
}

/// Randomized-state transmission: apply a uniformly random teleportation
/// unitary, send U_i |psi> over an insecure quantum channel and the index i
/// over a secure classical channel. Averaged over i, the quantum leg
/// carries the maximally mixed state.
pub fn send_s3_randomized(
    psi: &PureState,
    handle: u64,
    from: &Event,
    to: &Event,
    speed_limit: f64,
    tau_geo: f64,
    rng: &mut SimRng,
) -> Result<S3Delivery> {
    let d = psi.dim();
    let index = WeylIndex::random(d, rng);
    let u = weyl_unitary(d, index)?;
    let in_flight = psi.apply(&u)?;
    let quantum_message = Message::new(
        PayloadMeta::Quantum {
            handle,
            digest: state_digest(&in_flight.density()),
        },
        from.clone(),
        to.clone(),
        ChannelKind::RandomizedTransmission,
        speed_limit,
        tau_geo,
    )?;
    // Secure classical legs are modeled lossless; see module docs.
    let classical_message = Message::new(
        PayloadMeta::ClassicalWeyl {
            indices: vec![index],
        },
        from.clone(),
        to.clone(),
        ChannelKind::ClassicalSecure,
        speed_limit,
        tau_geo,
    )?;
    debug_assert!(quantum_message.visible_to_adversary);
    debug_assert!(!classical_message.visible_to_adversary);
    Ok(S3Delivery {
        quantum_message,
        classical_message,
        index,
        in_flight,
    })
}

/// Sanity identity used by tests and the engine: a lossless S3 round trip
/// is the identity channel.
pub fn s3_round_trip_fidelity(psi: &PureState, rng: &mut SimRng) -> Result<f64> {
    let from = Event::d1(0.0, 0.0);
    let to = Event::d1(1.0, 1.0);
    let s3 = send_s3_randomized(psi, 0, &from, &to, 1.0, 1e-9, rng)?;
    let back = s3.derandomize()?;
    fidelity(&back.density(), psi)
}
