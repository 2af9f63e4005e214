//! Predictive-state synchronization protocol.
//!
//! Both endpoints hold the same state descriptor (model, tokenizer tag,
//! generation policy, committed context) named by a collision-resistant
//! StateID. The receiver speculates provisional tokens beyond the last
//! committed anchor; the sender mirrors that speculation, diffs it
//! against the realized stream, and sends compressed patches naming the
//! baseline they apply to. Periodic commits advance the anchor on both
//! sides; resynchronization retransmits the committed context outright
//! when patching is unsafe.

mod receiver;
mod sender;
mod wire;

pub use receiver::{PatchDisposition, Receiver, ReceiverReport, TickReport};
pub use sender::{FaultPlan, Sender};
pub use wire::{decode_message, encode_message, WireMessage};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{CodecError, PatchPayload};
use crate::predictor::{Distribution, Predictor, PredictorError, PredictorSpec, Token};

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    /// Divergence reaches into committed history; patching cannot help.
    #[error("resynchronization required: {0}")]
    ResyncRequired(String),
    /// Commit attempted past the reconciled frontier.
    #[error("commit refused: {0}")]
    CommitRefused(String),
    #[error("malformed wire message: {0}")]
    Wire(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

/// How provisional tokens are chosen from the model's distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodingRule {
    Greedy,
    SeededSampling,
}

/// Generation policy: the deterministic decoding procedure both
/// endpoints run to extend provisional state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationPolicy {
    pub rule: DecodingRule,
    pub seed: u64,
    pub temperature: f64,
}

impl GenerationPolicy {
    pub fn greedy() -> Self {
        Self {
            rule: DecodingRule::Greedy,
            seed: 0,
            temperature: 1.0,
        }
    }

    pub fn seeded(seed: u64) -> Self {
        Self {
            rule: DecodingRule::SeededSampling,
            seed,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(ProtocolError::InvalidConfig(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Session regime: with reproducible decoding the receiver's provisional
/// trajectory is exactly computable at the sender; the tolerant regime
/// injects per-token divergence between the two with the given
/// probability, modeling imperfectly mirrored generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Reproducible,
    NondeterminismTolerant { divergence_prob: f64 },
}

impl Regime {
    pub fn divergence_prob(&self) -> f64 {
        match self {
            Regime::Reproducible => 0.0,
            Regime::NondeterminismTolerant { divergence_prob } => *divergence_prob,
        }
    }
}

/// Core protocol parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    /// Rollback window: deepest token history a patch may rewrite.
    pub w: u64,
    /// Speculation horizon: provisional depth the receiver may reach.
    pub h: u64,
    /// Anchor period: commits advance in multiples of this many tokens.
    pub k: u64,
    /// Fraction of the rollback window counted as "deep" rollback.
    pub rho: f64,
    /// Token rate in tokens per second.
    pub r: f64,
    pub regime: Regime,
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.h == 0 || self.h > self.w {
            return Err(ProtocolError::InvalidConfig(format!(
                "require 0 < H <= W, got H={} W={}",
                self.h, self.w
            )));
        }
        if self.k == 0 || self.k > self.w {
            return Err(ProtocolError::InvalidConfig(format!(
                "require 0 < K <= W, got K={} W={}",
                self.k, self.w
            )));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(ProtocolError::InvalidConfig(format!(
                "require rho in (0,1), got {}",
                self.rho
            )));
        }
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(ProtocolError::InvalidConfig(format!(
                "require positive token rate, got {}",
                self.r
            )));
        }
        let p = self.regime.divergence_prob();
        if !(0.0..1.0).contains(&p) {
            return Err(ProtocolError::InvalidConfig(format!(
                "divergence probability must be in [0,1), got {p}"
            )));
        }
        // The anchor trails the reconciled frontier by the deep-rollback
        // zone (rho*W tokens) so healthy patches never look deep; the
        // horizon must leave room beyond that lag plus one anchor period
        // or patches could never cover new ground.
        if self.h <= self.anchor_lag() + self.k {
            return Err(ProtocolError::InvalidConfig(format!(
                "require H > rho*W + K for forward progress, got H={} rho*W={} K={}",
                self.h,
                self.anchor_lag(),
                self.k
            )));
        }
        Ok(())
    }

    /// Tokens the committed anchor stays behind the reconciled frontier.
    pub fn anchor_lag(&self) -> u64 {
        (self.rho * self.w as f64).ceil() as u64
    }
}

/// Full predictive-state descriptor: everything that must match for two
/// endpoints to share a state, including the committed context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateDescriptor {
    pub model: PredictorSpec,
    pub tokenizer_id: String,
    pub policy: GenerationPolicy,
    pub committed_context: Vec<Token>,
}

/// Collision-resistant name for a predictive state.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateId(pub [u8; 32]);

impl StateId {
    pub fn zero() -> Self {
        Self([0; 32])
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl std::fmt::Debug for StateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "StateId({}..)", &self.to_hex()[..12])
    }
}

impl std::fmt::Display for StateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Incremental digest over a token stream. Cloneable snapshots make
/// per-commit digests O(new tokens) instead of O(context).
#[derive(Clone)]
pub struct ContextHasher {
    inner: Sha256,
    fed: u64,
}

impl ContextHasher {
    pub fn new(alphabet_size: u32) -> Self {
        let mut inner = Sha256::new();
        inner.update(b"ctx");
        inner.update(alphabet_size.to_le_bytes());
        Self { inner, fed: 0 }
    }

    /// Number of tokens absorbed so far.
    pub fn fed(&self) -> u64 {
        self.fed
    }

    pub fn absorb(&mut self, tokens: &[Token]) {
        for &t in tokens {
            self.inner.update(t.to_le_bytes());
        }
        self.fed += tokens.len() as u64;
    }

    /// Digest of everything absorbed so far, without consuming.
    pub fn digest(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        out.copy_from_slice(&self.inner.clone().finalize());
        out
    }
}

impl std::fmt::Debug for ContextHasher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ContextHasher(fed={})", self.fed)
    }
}

/// Digest over a full context slice, non-incremental form.
pub fn context_digest(alphabet_size: u32, tokens: &[Token]) -> [u8; 32] {
    let mut h = ContextHasher::new(alphabet_size);
    h.absorb(tokens);
    h.digest()
}

/// Digest over the static descriptor parts (model, tokenizer, policy).
pub fn header_digest(
    model: &PredictorSpec,
    tokenizer_id: &str,
    policy: &GenerationPolicy,
) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"hdr");
    let model_bytes = model.canonical_bytes();
    h.update((model_bytes.len() as u64).to_le_bytes());
    h.update(&model_bytes);
    h.update((tokenizer_id.len() as u64).to_le_bytes());
    h.update(tokenizer_id.as_bytes());
    let policy_bytes =
        serde_json::to_vec(&serde_json::to_value(policy).expect("policy serializes"))
            .expect("policy canonical bytes");
    h.update((policy_bytes.len() as u64).to_le_bytes());
    h.update(&policy_bytes);
    let mut out = [0u8; 32];
    out.copy_from_slice(&h.finalize());
    out
}

fn state_id_from_digests(header: &[u8; 32], context: &[u8; 32]) -> StateId {
    let mut h = Sha256::new();
    h.update(b"sid");
    h.update(header);
    h.update(context);
    let mut out = [0u8; 32];
    out.copy_from_slice(&h.finalize());
    StateId(out)
}

/// StateID of a full descriptor: SHA-256 over all four components.
pub fn compute_state_id(descriptor: &StateDescriptor) -> StateId {
    let header = header_digest(
        &descriptor.model,
        &descriptor.tokenizer_id,
        &descriptor.policy,
    );
    let ctx = context_digest(descriptor.model.v, &descriptor.committed_context);
    state_id_from_digests(&header, &ctx)
}

/// Committed checkpoint: everything before `index` is immutable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchor {
    pub index: u64,
    pub context_digest: [u8; 32],
    pub state_id: StateId,
}

impl Anchor {
    /// The session-initial anchor at index 0 over the empty context.
    pub fn initial(alphabet_size: u32, header: &[u8; 32]) -> Self {
        let digest = context_digest(alphabet_size, &[]);
        Self {
            index: 0,
            context_digest: digest,
            state_id: state_id_from_digests(header, &digest),
        }
    }
}

/// Reconciliation message: rewrite the provisional suffix from
/// `start_rel` (tokens past the anchor) with the carried payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub baseline: StateId,
    pub anchor_digest: [u8; 32],
    pub anchor_index: u64,
    /// Target range [start, end), token indices relative to the anchor.
    pub start_rel: u64,
    pub end_rel: u64,
    pub payload: PatchPayload,
    pub auth_tag: [u8; 16],
    pub seq: u64,
}

/// Anchor-advance announcement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommitMsg {
    pub seq: u64,
    pub index: u64,
    pub context_digest: [u8; 32],
    pub state_id: StateId,
}

/// Receiver monitor summary piggybacked on acknowledgements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowReport {
    pub window_seq: u64,
    pub cp: Option<f64>,
    pub rp: f64,
    pub h: u64,
}

/// Receiver -> sender status: acknowledges the anchor at `index` (ok) or
/// reports disagreement; may also request resynchronization outright.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommitAck {
    pub index: u64,
    pub ok: bool,
    pub state_id: StateId,
    pub resync_needed: bool,
    pub window: Option<WindowReport>,
}

/// Full committed-context retransmission restoring agreement.
#[derive(Debug, Clone, PartialEq)]
pub struct ResyncMsg {
    pub seq: u64,
    pub index: u64,
    pub context_digest: [u8; 32],
    pub state_id: StateId,
    pub tokens: Vec<Token>,
}

const POS_SALT_BASE: u64 = 0x9e37_79b9_7f4a_7c15;
const POS_SALT_DIVERGE: u64 = 0x517c_c1b7_2722_0a95;
const POS_SALT_RESAMPLE: u64 = 0x2545_f491_4f6c_dd1d;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Uniform value in [0,1) determined by (seed, position, salt). Both
/// endpoints derive identical draws without sharing RNG state.
pub fn position_unit(seed: u64, position: u64, salt: u64) -> f64 {
    let z = splitmix64(seed ^ splitmix64(position.wrapping_mul(salt) ^ salt));
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic provisional token at `position` given the prefix: the
/// policy's decoding rule applied to the model's prediction.
pub fn generate_token(
    predictor: &dyn Predictor,
    policy: &GenerationPolicy,
    position: u64,
    prefix: &[Token],
) -> Result<Token, ProtocolError> {
    let dist = predictor.raw_predict(prefix)?;
    Ok(decode_from(&dist, policy, position))
}

fn decode_from(dist: &Distribution, policy: &GenerationPolicy, position: u64) -> Token {
    match policy.rule {
        DecodingRule::Greedy => dist.argmax(),
        DecodingRule::SeededSampling => {
            let u = position_unit(policy.seed, position, POS_SALT_BASE);
            if (policy.temperature - 1.0).abs() < 1e-12 {
                dist.sample(u)
            } else {
                dist.with_temperature(policy.temperature).sample(u)
            }
        }
    }
}

/// Receiver-side provisional token: the deterministic base draw, except
/// that in the tolerant regime a position-keyed coin flips it to an
/// independent resample with the configured probability.
pub fn generate_token_perturbed(
    predictor: &dyn Predictor,
    policy: &GenerationPolicy,
    regime: Regime,
    divergence_seed: u64,
    position: u64,
    prefix: &[Token],
) -> Result<Token, ProtocolError> {
    let dist = predictor.raw_predict(prefix)?;
    let p = regime.divergence_prob();
    if p > 0.0 && position_unit(divergence_seed, position, POS_SALT_DIVERGE) < p {
        let u = position_unit(divergence_seed, position, POS_SALT_RESAMPLE);
        return Ok(dist.sample(u));
    }
    Ok(decode_from(&dist, policy, position))
}

/// First 16 bytes of SHA-256 over (session key, message body). A
/// stand-in message authenticator, not cryptographic-grade keying.
pub fn auth_tag(session_key: &[u8; 32], body: &[u8]) -> [u8; 16] {
    let mut h = Sha256::new();
    h.update(b"tag");
    h.update(session_key);
    h.update(body);
    let full = h.finalize();
    let mut out = [0u8; 16];
    out.copy_from_slice(&full[..16]);
    out
}

/// Session key derived from a seed shared out of band.
pub fn session_key(seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"key");
    h.update(seed.to_le_bytes());
    let mut out = [0u8; 32];
    out.copy_from_slice(&h.finalize());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::PredictorSpec;

    fn descriptor() -> StateDescriptor {
        StateDescriptor {
            model: PredictorSpec::uniform(4),
            tokenizer_id: "unit-v1".to_string(),
            policy: GenerationPolicy::seeded(7),
            committed_context: vec![1, 2, 3],
        }
    }

    #[test]
    fn identical_descriptors_share_a_state_id() {
        assert_eq!(compute_state_id(&descriptor()), compute_state_id(&descriptor()));
    }

    #[test]
    fn seed_change_changes_the_state_id() {
        let a = descriptor();
        let mut b = descriptor();
        b.policy.seed = 8;
        assert_ne!(compute_state_id(&a), compute_state_id(&b));
    }

    #[test]
    fn context_token_change_changes_the_state_id() {
        let a = descriptor();
        let mut b = descriptor();
        b.committed_context[1] ^= 1;
        assert_ne!(compute_state_id(&a), compute_state_id(&b));
    }

    #[test]
    fn model_and_tokenizer_are_covered() {
        let a = descriptor();
        let mut b = descriptor();
        b.model = PredictorSpec::uniform(5);
        assert_ne!(compute_state_id(&a), compute_state_id(&b));
        let mut c = descriptor();
        c.tokenizer_id = "unit-v2".to_string();
        assert_ne!(compute_state_id(&a), compute_state_id(&c));
    }

    #[test]
    fn incremental_hasher_matches_oneshot_digest() {
        let tokens = [5u32, 0, 9, 2, 2, 7];
        let mut h = ContextHasher::new(16);
        h.absorb(&tokens[..2]);
        let snapshot = h.clone();
        h.absorb(&tokens[2..]);
        assert_eq!(h.digest(), context_digest(16, &tokens));
        assert_eq!(snapshot.digest(), context_digest(16, &tokens[..2]));
        assert_eq!(h.fed(), 6);
    }

    #[test]
    fn state_id_matches_incremental_path() {
        let d = descriptor();
        let header = header_digest(&d.model, &d.tokenizer_id, &d.policy);
        let ctx = context_digest(4, &d.committed_context);
        assert_eq!(compute_state_id(&d), state_id_from_digests(&header, &ctx));
    }

    #[test]
    fn initial_anchor_is_shared_and_deterministic() {
        let d = descriptor();
        let header = header_digest(&d.model, &d.tokenizer_id, &d.policy);
        let a = Anchor::initial(4, &header);
        let b = Anchor::initial(4, &header);
        assert_eq!(a, b);
        assert_eq!(a.index, 0);
        assert_eq!(a.context_digest, context_digest(4, &[]));
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let good = SessionConfig {
            w: 128,
            h: 96,
            k: 16,
            rho: 0.25,
            r: 10.0,
            regime: Regime::Reproducible,
        };
        good.validate().unwrap();
        let mut bad = good;
        bad.h = 0;
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.h = 256;
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.k = 256;
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.rho = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.r = 0.0;
        assert!(bad.validate().is_err());
        // horizon must clear the anchor lag plus one period
        let mut bad = good;
        bad.h = 48;
        bad.rho = 0.5;
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.regime = Regime::NondeterminismTolerant {
            divergence_prob: 1.5,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn greedy_generation_follows_argmax() {
        use crate::predictor::{MarkovChain, MarkovPredictor};
        // Stay-biased chain: greedy from state 0 stays at 0 forever.
        let chain = MarkovChain::binary_flip(0.1).unwrap();
        let pred = MarkovPredictor::new(chain);
        let policy = GenerationPolicy::greedy();
        let mut prefix: Vec<Token> = vec![0];
        for pos in 1..20u64 {
            let t = generate_token(&pred, &policy, pos, &prefix).unwrap();
            assert_eq!(t, 0);
            prefix.push(t);
        }
    }

    #[test]
    fn seeded_generation_is_reproducible_and_seed_sensitive() {
        use crate::predictor::{TokenAlphabet, UniformPredictor};
        let pred = UniformPredictor::new(TokenAlphabet::new(6).unwrap());
        let a: Vec<Token> = (0..64)
            .map(|p| generate_token(&pred, &GenerationPolicy::seeded(1), p, &[]).unwrap())
            .collect();
        let b: Vec<Token> = (0..64)
            .map(|p| generate_token(&pred, &GenerationPolicy::seeded(1), p, &[]).unwrap())
            .collect();
        let c: Vec<Token> = (0..64)
            .map(|p| generate_token(&pred, &GenerationPolicy::seeded(2), p, &[]).unwrap())
            .collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // all tokens valid and reasonably spread
        assert!(a.iter().all(|&t| t < 6));
        let distinct: std::collections::BTreeSet<_> = a.iter().collect();
        assert!(distinct.len() >= 4);
    }

    #[test]
    fn perturbation_rate_tracks_divergence_probability() {
        use crate::predictor::{TokenAlphabet, UniformPredictor};
        let pred = UniformPredictor::new(TokenAlphabet::new(8).unwrap());
        let policy = GenerationPolicy::seeded(3);
        let regime = Regime::NondeterminismTolerant {
            divergence_prob: 0.2,
        };
        let n = 20_000u64;
        let mut diverged = 0usize;
        for p in 0..n {
            let base = generate_token(&pred, &policy, p, &[]).unwrap();
            let pert = generate_token_perturbed(&pred, &policy, regime, 99, p, &[]).unwrap();
            if base != pert {
                diverged += 1;
            }
        }
        // Coin fires at 0.2; an independent resample still agrees 1/8 of
        // the time, so the observed rate sits near 0.2 * 7/8 = 0.175.
        let rate = diverged as f64 / n as f64;
        assert!((rate - 0.175).abs() < 0.02, "rate {rate}");
        // Reproducible regime never perturbs.
        for p in 0..200 {
            let base = generate_token(&pred, &policy, p, &[]).unwrap();
            let same =
                generate_token_perturbed(&pred, &policy, Regime::Reproducible, 99, p, &[]).unwrap();
            assert_eq!(base, same);
        }
    }

    #[test]
    fn auth_tags_detect_body_changes() {
        let key = session_key(42);
        let tag = auth_tag(&key, b"hello patch");
        assert_ne!(tag, auth_tag(&key, b"hello patcg"));
        assert_ne!(tag, auth_tag(&session_key(43), b"hello patch"));
        assert_eq!(tag, auth_tag(&session_key(42), b"hello patch"));
    }
}
