//! Discrete-event channel simulation.
//!
//! A link serializes messages first-in-first-out at the usable fraction
//! of channel capacity, then delays them by the propagation latency.
//! Zero-bit control messages ride the same queue without occupying the
//! serializer. Loss is an independent coin per message. All timing is
//! integer microseconds so runs replay exactly.

mod session;

pub use session::{
    run_session, BacklogSample, SessionMetrics, SessionOutcome, SessionSetup, SourceSpec,
    TranscriptEntry, WindowSample, DEFAULT_DRAIN_TIMEOUT_S,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::protocol::ProtocolError;

/// Channel parameters: raw capacity C in bits/s, one-way propagation
/// latency L in seconds, usable fraction eta, and an i.i.d. loss coin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    pub capacity_bps: f64,
    pub latency_s: f64,
    pub eta: f64,
    #[serde(default)]
    pub loss_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ChannelModel {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(self.capacity_bps.is_finite() && self.capacity_bps > 0.0) {
            return Err(ProtocolError::InvalidConfig(format!(
                "capacity must be positive, got {}",
                self.capacity_bps
            )));
        }
        if !(self.latency_s.is_finite() && self.latency_s >= 0.0) {
            return Err(ProtocolError::InvalidConfig(format!(
                "latency must be nonnegative, got {}",
                self.latency_s
            )));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(ProtocolError::InvalidConfig(format!(
                "eta must be in (0,1], got {}",
                self.eta
            )));
        }
        if !(0.0..1.0).contains(&self.loss_prob) {
            return Err(ProtocolError::InvalidConfig(format!(
                "loss probability must be in [0,1), got {}",
                self.loss_prob
            )));
        }
        Ok(())
    }

    /// Bits per second actually available to message payloads.
    pub fn usable_bps(&self) -> f64 {
        self.eta * self.capacity_bps
    }

    /// Time to push `bits` through the serializer, rounded up.
    pub fn serialization_us(&self, bits: u64) -> u64 {
        if bits == 0 {
            return 0;
        }
        (bits as f64 * 1e6 / self.usable_bps()).ceil() as u64
    }

    pub fn latency_us(&self) -> u64 {
        (self.latency_s * 1e6).round() as u64
    }
}

/// One direction of the channel.
pub struct Link {
    model: ChannelModel,
    busy_until_us: u64,
    rng: ChaCha12Rng,
    pub bits_sent: u64,
    pub messages_sent: u64,
    pub messages_lost: u64,
}

impl Link {
    pub fn new(model: ChannelModel, seed_salt: u64) -> Self {
        let rng = ChaCha12Rng::seed_from_u64(model.seed ^ seed_salt);
        Self {
            model,
            busy_until_us: 0,
            rng,
            bits_sent: 0,
            messages_sent: 0,
            messages_lost: 0,
        }
    }

    pub fn is_free(&self, now_us: u64) -> bool {
        self.busy_until_us <= now_us
    }

    pub fn free_at(&self) -> u64 {
        self.busy_until_us
    }

    /// Queues a message. Returns its delivery time and whether the loss
    /// coin ate it (it still occupied the serializer either way).
    pub fn send(&mut self, now_us: u64, bits: u64) -> (u64, bool) {
        let start = now_us.max(self.busy_until_us);
        let done = start + self.model.serialization_us(bits);
        self.busy_until_us = done;
        self.bits_sent += bits;
        self.messages_sent += 1;
        let lost = self.model.loss_prob > 0.0 && self.rng.gen::<f64>() < self.model.loss_prob;
        if lost {
            self.messages_lost += 1;
        }
        (done + self.model.latency_us(), lost)
    }
}
