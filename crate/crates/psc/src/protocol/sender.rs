//! Sending endpoint: owns the realized stream, mirrors the receiver's
//! speculation, and turns divergence into patches.
//!
//! The mirror is optimistic: once a patch or commit is sent it is
//! assumed delivered and applied, so no per-patch feedback is needed.
//! Wrong assumptions surface later as commit rejections, which trigger
//! either a windowed repair (rewind the anchor view and repatch) or a
//! full resynchronization.

use super::wire::WireMessage;
use super::{
    generate_token, header_digest, state_id_from_digests, Anchor, CommitAck, CommitMsg,
    ContextHasher, GenerationPolicy, Patch, ProtocolError, ResyncMsg, SessionConfig, StateId,
};
use crate::codec::{encode_payload, EditOp, EditScript};
use crate::monitor::{control_step, ControlState, ControlThresholds};
use crate::predictor::{Predictor, PredictorSpec, Token};

/// Deliberate misbehavior for fault-injection runs. Ordinals count
/// patches in construction order, starting at zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultPlan {
    /// These patches are built against a stale baseline StateID.
    pub stale_baseline_patches: Vec<u64>,
    /// The channel flips one byte of these patches in flight.
    pub corrupt_patch_wire: Vec<u64>,
}

impl FaultPlan {
    pub fn is_stale(&self, ordinal: u64) -> bool {
        self.stale_baseline_patches.contains(&ordinal)
    }

    pub fn wants_corruption(&self, ordinal: u64) -> bool {
        self.corrupt_patch_wire.contains(&ordinal)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SenderStats {
    pub patches_built: u64,
    pub commits_sent: u64,
    pub commit_resends: u64,
    pub resyncs_sent: u64,
    pub resync_tokens: u64,
    pub rewinds: u64,
    pub fast_forwards: u64,
    pub acks_ok: u64,
    pub acks_rejected: u64,
    pub max_patch_span: u64,
}

#[derive(Debug, Clone, Copy)]
struct PendingCommit {
    index: u64,
    last_sent_us: u64,
}

pub struct Sender {
    cfg: SessionConfig,
    predictor: Box<dyn Predictor>,
    policy: GenerationPolicy,
    header: [u8; 32],
    realized: Vec<Token>,
    source_complete: bool,
    /// Expected receiver content, assuming every sent message landed.
    mirror: Vec<Token>,
    /// Length of the realized prefix the mirror agrees on.
    agree_len: usize,
    anchor: Anchor,
    prev_anchor_state: StateId,
    /// Fed with `realized[..anchor.index]`.
    hasher: ContextHasher,
    next_seq: u64,
    h_view: u64,
    k_cur: u64,
    rto_us: u64,
    pending_commit: Option<PendingCommit>,
    resync_due: bool,
    last_resync_sent_us: Option<u64>,
    fault: FaultPlan,
    adaptive: Option<(ControlState, ControlThresholds)>,
    last_window_seq: Option<u64>,
    pub stats: SenderStats,
}

impl Sender {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: SessionConfig,
        model: &PredictorSpec,
        tokenizer_id: &str,
        policy: GenerationPolicy,
        rto_us: u64,
        fault: FaultPlan,
        adaptive_budget: Option<f64>,
    ) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        policy.validate()?;
        let predictor = model.build()?;
        let header = header_digest(model, tokenizer_id, &policy);
        let anchor = Anchor::initial(model.v, &header);
        let adaptive = adaptive_budget.map(|budget| {
            let lag = cfg.anchor_lag();
            // keep H > lag + K reachable under control so patches can
            // always cover fresh ground
            let h_min = (lag + cfg.k + 1).min(cfg.w);
            (
                ControlState::new(cfg.h, cfg.k, (h_min, cfg.w), (1, cfg.k)),
                ControlThresholds::new(budget),
            )
        });
        Ok(Self {
            cfg,
            predictor,
            policy,
            header,
            realized: Vec::new(),
            source_complete: false,
            mirror: Vec::new(),
            agree_len: 0,
            anchor,
            prev_anchor_state: anchor.state_id,
            hasher: ContextHasher::new(model.v),
            next_seq: 0,
            h_view: cfg.h,
            k_cur: cfg.k,
            rto_us,
            pending_commit: None,
            resync_due: false,
            last_resync_sent_us: None,
            fault,
            adaptive,
            last_window_seq: None,
            stats: SenderStats::default(),
        })
    }

    pub fn push_source(&mut self, token: Token) -> Result<(), ProtocolError> {
        self.predictor.alphabet().check(token)?;
        self.realized.push(token);
        self.reconcile()
    }

    pub fn finish_source(&mut self) {
        self.source_complete = true;
    }

    pub fn realized(&self) -> &[Token] {
        &self.realized
    }

    pub fn anchor_index(&self) -> u64 {
        self.anchor.index
    }

    pub fn state_id(&self) -> StateId {
        self.anchor.state_id
    }

    /// Realized tokens not yet known to agree with the mirror.
    pub fn backlog(&self) -> u64 {
        (self.realized.len() - self.agree_len) as u64
    }

    /// True once every realized token is reconciled, committed, and the
    /// final commit acknowledged.
    pub fn drained(&self) -> bool {
        self.source_complete
            && !self.resync_due
            && self.pending_commit.is_none()
            && self.agree_len == self.realized.len()
            && self.anchor.index == self.realized.len() as u64
    }

    /// Extends the mirror by deterministic generation and advances the
    /// agreed prefix. Generation past the realized stream is pointless
    /// for diffing, so the mirror stops at the shorter of the realized
    /// length and the speculation horizon.
    fn reconcile(&mut self) -> Result<(), ProtocolError> {
        let cap = (self.realized.len() as u64).min(self.anchor.index + self.h_view) as usize;
        while self.mirror.len() < cap {
            let p = self.mirror.len() as u64;
            let t = generate_token(self.predictor.as_ref(), &self.policy, p, &self.mirror)?;
            self.mirror.push(t);
        }
        let m = self.mirror.len().min(self.realized.len());
        while self.agree_len < m && self.mirror[self.agree_len] == self.realized[self.agree_len] {
            self.agree_len += 1;
        }
        Ok(())
    }

    fn context_digest_at(&mut self, index: u64) -> [u8; 32] {
        debug_assert!(index >= self.hasher.fed());
        let fed = self.hasher.fed() as usize;
        self.hasher.absorb(&self.realized[fed..index as usize]);
        self.hasher.digest()
    }

    /// Next message to hand to the channel, or None if idle. Call only
    /// when the forward link is free; control messages cost nothing to
    /// serialize, so callers should keep polling until a patch or
    /// resync comes out (or None).
    pub fn next_message(&mut self, now_us: u64) -> Result<Option<WireMessage>, ProtocolError> {
        self.reconcile()?;
        if self.resync_due {
            let gate_open = self
                .last_resync_sent_us
                .map_or(true, |t| now_us.saturating_sub(t) >= self.rto_us);
            if gate_open {
                return Ok(Some(WireMessage::Resync(self.build_resync(now_us))));
            }
            // a resync is in flight; patches and commits would be noise
            return Ok(None);
        }
        if let Some(index) = self.commit_candidate() {
            return Ok(Some(WireMessage::Commit(self.build_commit(index, now_us))));
        }
        if let Some(pending) = self.pending_commit {
            if now_us.saturating_sub(pending.last_sent_us) >= self.rto_us {
                self.stats.commit_resends += 1;
                return Ok(Some(WireMessage::Commit(
                    self.rebuild_commit(pending.index, now_us),
                )));
            }
        }
        if let Some(patch) = self.try_make_patch()? {
            return Ok(Some(WireMessage::Patch(patch)));
        }
        Ok(None)
    }

    /// Smallest useful anchor advance: the largest multiple of the
    /// anchor period that trails the agreed frontier by the deep-rollback
    /// zone. Once the source is done the lag is waived so the session
    /// can close with a commit at the exact stream length.
    fn commit_candidate(&self) -> Option<u64> {
        let agree = self.agree_len as u64;
        let n = self.realized.len() as u64;
        if self.source_complete && agree == n && self.anchor.index < n {
            return Some(n);
        }
        let base = agree.saturating_sub(self.cfg.anchor_lag());
        let cand = (base / self.k_cur) * self.k_cur;
        (cand > self.anchor.index).then_some(cand)
    }

    fn build_commit(&mut self, index: u64, now_us: u64) -> CommitMsg {
        let digest = self.context_digest_at(index);
        let state_id = state_id_from_digests(&self.header, &digest);
        self.prev_anchor_state = self.anchor.state_id;
        self.anchor = Anchor {
            index,
            context_digest: digest,
            state_id,
        };
        self.pending_commit = Some(PendingCommit {
            index,
            last_sent_us: now_us,
        });
        self.stats.commits_sent += 1;
        let seq = self.next_seq;
        self.next_seq += 1;
        CommitMsg {
            seq,
            index,
            context_digest: digest,
            state_id,
        }
    }

    fn rebuild_commit(&mut self, index: u64, now_us: u64) -> CommitMsg {
        debug_assert_eq!(index, self.anchor.index);
        self.pending_commit = Some(PendingCommit {
            index,
            last_sent_us: now_us,
        });
        let seq = self.next_seq;
        self.next_seq += 1;
        CommitMsg {
            seq,
            index,
            context_digest: self.anchor.context_digest,
            state_id: self.anchor.state_id,
        }
    }

    fn try_make_patch(&mut self) -> Result<Option<Patch>, ProtocolError> {
        let start = self.agree_len;
        let n = self.realized.len();
        if (start as u64) < self.anchor.index {
            return Err(ProtocolError::ResyncRequired(format!(
                "divergence at {start} precedes the anchor at {}",
                self.anchor.index
            )));
        }
        if start >= n {
            return Ok(None);
        }
        let tip = n.min((self.anchor.index + self.h_view) as usize);
        if tip <= start {
            // horizon exhausted; the next commit restores headroom
            return Ok(None);
        }
        let tokens = self.realized[start..tip].to_vec();
        let script = EditScript::new(vec![EditOp::Insert(tokens.clone())]);
        let payload = encode_payload(&script, self.predictor.as_ref(), &self.realized[..start])?;
        let ordinal = self.stats.patches_built;
        let baseline = if self.fault.is_stale(ordinal) {
            if self.prev_anchor_state != self.anchor.state_id {
                self.prev_anchor_state
            } else {
                StateId([0x5a; 32])
            }
        } else {
            self.anchor.state_id
        };
        let seq = self.next_seq;
        self.next_seq += 1;
        self.stats.patches_built += 1;
        self.stats.max_patch_span = self.stats.max_patch_span.max((tip - start) as u64);
        let patch = Patch {
            baseline,
            anchor_digest: self.anchor.context_digest,
            anchor_index: self.anchor.index,
            start_rel: start as u64 - self.anchor.index,
            end_rel: tip as u64 - self.anchor.index,
            payload,
            auth_tag: [0; 16],
            seq,
        };
        // optimism: assume the receiver applies it
        self.mirror.truncate(start);
        self.mirror.extend_from_slice(&tokens);
        self.agree_len = tip;
        Ok(Some(patch))
    }

    fn build_resync(&mut self, now_us: u64) -> ResyncMsg {
        let index = self.anchor.index;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.resync_due = false;
        self.last_resync_sent_us = Some(now_us);
        self.pending_commit = None;
        self.stats.resyncs_sent += 1;
        self.stats.resync_tokens += index;
        // assume the receiver adopts the committed context wholesale
        self.mirror.clear();
        self.mirror
            .extend_from_slice(&self.realized[..index as usize]);
        self.agree_len = index as usize;
        ResyncMsg {
            seq,
            index,
            context_digest: self.anchor.context_digest,
            state_id: self.anchor.state_id,
            tokens: self.realized[..index as usize].to_vec(),
        }
    }

    /// Rebuilds the anchor view at an index the receiver vouches for.
    /// Returns false if the receiver's state does not match any state
    /// derivable from the realized stream.
    fn rewind_to(&mut self, index: u64, state: StateId) -> bool {
        if index > self.realized.len() as u64 {
            return false;
        }
        if index == self.anchor.index && state == self.anchor.state_id {
            // already aligned; keep repair progress
            return true;
        }
        let mut fresh = ContextHasher::new(self.predictor.alphabet().size());
        fresh.absorb(&self.realized[..index as usize]);
        let digest = fresh.digest();
        let expect = state_id_from_digests(&self.header, &digest);
        if expect != state {
            return false;
        }
        self.hasher = fresh;
        self.anchor = Anchor {
            index,
            context_digest: digest,
            state_id: expect,
        };
        self.prev_anchor_state = expect;
        self.mirror.clear();
        self.mirror
            .extend_from_slice(&self.realized[..index as usize]);
        self.agree_len = index as usize;
        self.pending_commit = None;
        self.stats.rewinds += 1;
        true
    }

    /// Advances to an anchor the receiver already confirmed (it saw a
    /// commit we have since rewound past, or we missed its progress).
    fn fast_forward_to(&mut self, index: u64, state: StateId) -> bool {
        if index > self.realized.len() as u64 || index < self.hasher.fed() {
            return false;
        }
        let digest = self.context_digest_at(index);
        let expect = state_id_from_digests(&self.header, &digest);
        if expect != state {
            return false;
        }
        self.prev_anchor_state = self.anchor.state_id;
        self.anchor = Anchor {
            index,
            context_digest: digest,
            state_id: expect,
        };
        // the receiver holds the realized stream up to the new anchor
        if self.agree_len < index as usize {
            self.mirror.truncate(self.agree_len);
            self.mirror
                .extend_from_slice(&self.realized[self.agree_len..index as usize]);
            self.agree_len = index as usize;
        }
        self.stats.fast_forwards += 1;
        true
    }

    pub fn on_ack(&mut self, ack: &CommitAck, _now_us: u64) {
        if ack.ok {
            self.stats.acks_ok += 1;
            match ack.index.cmp(&self.anchor.index) {
                std::cmp::Ordering::Greater => {
                    if !self.fast_forward_to(ack.index, ack.state_id) {
                        self.resync_due = true;
                    }
                }
                std::cmp::Ordering::Equal => {
                    if ack.state_id != self.anchor.state_id {
                        self.resync_due = true;
                    }
                }
                std::cmp::Ordering::Less => {}
            }
            if let Some(p) = self.pending_commit {
                if ack.index >= p.index {
                    self.pending_commit = None;
                }
            }
        } else {
            self.stats.acks_rejected += 1;
            // the receiver names its last good anchor; repair from there
            if !self.rewind_to(ack.index, ack.state_id) {
                self.resync_due = true;
            }
        }
        if ack.resync_needed {
            self.resync_due = true;
        }
        if let (Some((state, thresholds)), Some(report)) = (self.adaptive.as_mut(), &ack.window) {
            if self.last_window_seq != Some(report.window_seq) {
                self.last_window_seq = Some(report.window_seq);
                *state = control_step(*state, report.cp, report.rp, thresholds);
                self.k_cur = state.k;
                // the receiver's horizon is authoritative
                self.h_view = report.h;
            }
        }
    }

    /// True when the final acknowledged anchor covers the whole stream.
    pub fn final_commit_acked(&self) -> bool {
        self.source_complete
            && self.anchor.index == self.realized.len() as u64
            && self.pending_commit.is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Regime;

    fn cfg() -> SessionConfig {
        SessionConfig {
            w: 64,
            h: 48,
            k: 8,
            rho: 0.25,
            r: 10.0,
            regime: Regime::Reproducible,
        }
    }

    fn flip_spec(p: f64) -> PredictorSpec {
        let q = 1.0 - p;
        PredictorSpec::markov(&[vec![q, p], vec![p, q]], &[0.5, 0.5])
    }

    fn new_sender(cfg: SessionConfig, spec: &PredictorSpec) -> Sender {
        Sender::new(
            cfg,
            spec,
            "unit",
            GenerationPolicy::greedy(),
            1_000_000,
            FaultPlan::default(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn matched_source_needs_no_patches() {
        // greedy generation from the stay-biased chain emits token 0
        // forever, so an all-zero source never diverges
        let spec = flip_spec(0.1);
        let mut s = new_sender(cfg(), &spec);
        let mut commits = 0;
        for i in 0..100u64 {
            s.push_source(0).unwrap();
            while let Some(msg) = s.next_message(i * 1000).unwrap() {
                match msg {
                    WireMessage::Commit(c) => {
                        commits += 1;
                        // lag 16, period 8
                        assert_eq!(c.index % 8, 0);
                        let ack = CommitAck {
                            index: c.index,
                            ok: true,
                            state_id: c.state_id,
                            resync_needed: false,
                            window: None,
                        };
                        s.on_ack(&ack, i * 1000);
                    }
                    other => panic!("unexpected {other:?}"),
                }
            }
        }
        assert_eq!(s.stats.patches_built, 0);
        assert_eq!(s.backlog(), 0);
        assert!(commits > 0);
        // agree 100, lag 16 -> commits reach 80
        assert_eq!(s.anchor_index(), 80);
    }

    #[test]
    fn diverging_source_emits_insert_patches_under_the_horizon() {
        let spec = flip_spec(0.1);
        let mut s = new_sender(cfg(), &spec);
        // alternating source diverges from the all-zero greedy mirror
        for i in 0..40u64 {
            s.push_source((i % 2) as Token).unwrap();
        }
        let msg = s.next_message(0).unwrap().expect("patch due");
        let patch = match msg {
            WireMessage::Patch(p) => p,
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(patch.anchor_index, 0);
        assert_eq!(patch.start_rel, 1, "greedy agrees on the leading zero");
        assert_eq!(patch.end_rel, 40);
        assert!(patch.end_rel <= s.cfg.w);
        assert_eq!(s.backlog(), 0, "optimistic mirror counts the patch");
        // agreement jumped to 40, which makes a commit due; after that
        // there is nothing left to say until new tokens arrive
        match s.next_message(1).unwrap() {
            Some(WireMessage::Commit(c)) => assert_eq!(c.index, 24),
            other => panic!("unexpected {other:?}"),
        }
        assert!(s.next_message(2).unwrap().is_none());
    }

    #[test]
    fn commit_candidate_respects_lag_and_period() {
        let spec = flip_spec(0.1);
        let mut s = new_sender(cfg(), &spec);
        for _ in 0..23 {
            s.push_source(0).unwrap();
        }
        // agree 23, lag 16 -> base 7 -> no multiple of 8 above 0
        assert!(s.next_message(0).unwrap().is_none());
        s.push_source(0).unwrap();
        // agree 24 -> base 8 -> commit at 8
        match s.next_message(1).unwrap() {
            Some(WireMessage::Commit(c)) => assert_eq!(c.index, 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unacked_commit_is_resent_after_the_timeout() {
        let spec = flip_spec(0.1);
        let mut s = new_sender(cfg(), &spec);
        for _ in 0..30 {
            s.push_source(0).unwrap();
        }
        let first = match s.next_message(0).unwrap() {
            Some(WireMessage::Commit(c)) => c,
            other => panic!("unexpected {other:?}"),
        };
        // before the timeout nothing happens
        assert!(s.next_message(10).unwrap().is_none());
        let again = match s.next_message(1_000_001).unwrap() {
            Some(WireMessage::Commit(c)) => c,
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(again.index, first.index);
        assert_eq!(again.context_digest, first.context_digest);
        assert!(again.seq > first.seq);
        assert_eq!(s.stats.commit_resends, 1);
    }

    #[test]
    fn fault_plan_marks_chosen_patches_stale() {
        let spec = flip_spec(0.1);
        let mut s = Sender::new(
            cfg(),
            &spec,
            "unit",
            GenerationPolicy::greedy(),
            1_000_000,
            FaultPlan {
                stale_baseline_patches: vec![0, 1],
                corrupt_patch_wire: vec![],
            },
            None,
        )
        .unwrap();
        for _ in 0..10 {
            s.push_source(1).unwrap();
        }
        let p0 = match s.next_message(0).unwrap() {
            Some(WireMessage::Patch(p)) => p,
            other => panic!("unexpected {other:?}"),
        };
        assert_ne!(p0.baseline, s.state_id(), "fault swaps the baseline");
        for _ in 0..10 {
            s.push_source(0).unwrap();
        }
        let p1 = match s.next_message(1).unwrap() {
            Some(WireMessage::Patch(p)) => p,
            other => panic!("unexpected {other:?}"),
        };
        assert_ne!(p1.baseline, s.state_id());
    }

    #[test]
    fn rejection_rewinds_to_the_receivers_anchor() {
        let spec = flip_spec(0.1);
        let mut s = new_sender(cfg(), &spec);
        for i in 0..40u64 {
            s.push_source((i % 3 == 0) as Token).unwrap();
        }
        // drain one patch and one commit
        let mut saw_patch = false;
        let mut commit: Option<CommitMsg> = None;
        while let Some(msg) = s.next_message(0).unwrap() {
            match msg {
                WireMessage::Patch(_) => saw_patch = true,
                WireMessage::Commit(c) => commit = Some(c),
                other => panic!("unexpected {other:?}"),
            }
            if saw_patch && commit.is_some() {
                break;
            }
        }
        let c = commit.expect("commit flowed");
        // receiver rejects, vouching for the initial anchor
        let initial = Anchor::initial(2, &header_digest(&spec, "unit", &GenerationPolicy::greedy()));
        let nak = CommitAck {
            index: 0,
            ok: false,
            state_id: initial.state_id,
            resync_needed: false,
            window: None,
        };
        s.on_ack(&nak, 5);
        assert_eq!(s.stats.rewinds, 1);
        assert_eq!(s.anchor_index(), 0);
        assert_ne!(c.index, 0);
        // repair patch starts right at the anchor: full-depth rewrite
        match s.next_message(6).unwrap() {
            Some(WireMessage::Patch(p)) => {
                assert_eq!(p.anchor_index, 0);
                assert_eq!(p.start_rel, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_rejection_state_forces_full_resync() {
        let spec = flip_spec(0.1);
        let mut s = new_sender(cfg(), &spec);
        for _ in 0..30 {
            s.push_source(0).unwrap();
        }
        while let Some(WireMessage::Commit(_)) = s.next_message(0).unwrap() {}
        let nak = CommitAck {
            index: 4,
            ok: false,
            state_id: StateId([9; 32]),
            resync_needed: false,
            window: None,
        };
        s.on_ack(&nak, 5);
        match s.next_message(6).unwrap() {
            Some(WireMessage::Resync(r)) => {
                assert_eq!(r.index, s.anchor_index());
                assert_eq!(r.tokens.len() as u64, r.index);
                assert_eq!(r.tokens, &s.realized()[..r.index as usize]);
            }
            other => panic!("unexpected {other:?}"),
        }
        // gate holds until the timeout passes
        s.resync_due = true;
        assert!(s.next_message(7).unwrap().is_none());
        assert!(matches!(
            s.next_message(6 + 1_000_000).unwrap(),
            Some(WireMessage::Resync(_))
        ));
    }

    #[test]
    fn drain_ends_with_a_commit_at_the_exact_stream_length() {
        let spec = flip_spec(0.1);
        let mut s = new_sender(cfg(), &spec);
        for _ in 0..21 {
            s.push_source(0).unwrap();
        }
        s.finish_source();
        match s.next_message(0).unwrap() {
            Some(WireMessage::Commit(c)) => {
                assert_eq!(c.index, 21, "drain waives lag and rounding");
                let ack = CommitAck {
                    index: 21,
                    ok: true,
                    state_id: c.state_id,
                    resync_needed: false,
                    window: None,
                };
                s.on_ack(&ack, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(s.drained());
        assert!(s.final_commit_acked());
    }
}
