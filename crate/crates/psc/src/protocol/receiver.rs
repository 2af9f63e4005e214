//! Receiving endpoint: speculates provisional tokens ahead of the last
//! committed anchor and reconciles against incoming patches.
//!
//! Patches apply only when both the baseline StateID and the anchor
//! digest match the local committed state; anything else leaves state
//! untouched. Commits advance the anchor after verifying a digest over
//! the local prefix, so silent divergence cannot be committed. Repeated
//! inapplicable patches, failed commits, or heavy deep-rollback traffic
//! escalate to a resynchronization request.

use std::collections::VecDeque;

use super::wire::{decode_message, WireError, WireMessage};
use super::{
    generate_token_perturbed, header_digest, state_id_from_digests, Anchor, CommitAck, CommitMsg,
    ContextHasher, GenerationPolicy, Patch, ProtocolError, ResyncMsg, SessionConfig, StateId,
    WindowReport,
};
use crate::codec::{apply, decode_payload};
use crate::monitor::{control_step, ControlState, ControlThresholds, MetricsWindow, PatchRecord};
use crate::predictor::{Predictor, PredictorSpec, Token};

/// How many inapplicable patches in a row trigger a resync request.
pub const NA_RESYNC_THRESHOLD: u32 = 3;
/// Rollback pressure above this requests a resync outright.
pub const RP_RESYNC_THRESHOLD: f64 = 0.5;
/// Pressure-based resync needs at least this many patches in a window,
/// so a lone deep repair after recovery cannot loop into another resync.
pub const RP_RESYNC_MIN_PATCHES: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatchDisposition {
    Applied {
        rollback_depth: u64,
        innovation_bits: u64,
        clamped: bool,
    },
    NotApplicable {
        reason: String,
    },
    Duplicate,
    Tampered {
        reason: String,
    },
}

impl PatchDisposition {
    pub fn label(&self) -> &'static str {
        match self {
            PatchDisposition::Applied { .. } => "applied",
            PatchDisposition::NotApplicable { .. } => "not_applicable",
            PatchDisposition::Duplicate => "duplicate",
            PatchDisposition::Tampered { .. } => "tampered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReceiverReport {
    Patch {
        seq: u64,
        disposition: PatchDisposition,
    },
    Commit {
        seq: u64,
        index: u64,
        outcome: &'static str,
    },
    Resync {
        seq: u64,
        index: u64,
    },
    Corrupt {
        reason: String,
    },
}

/// One speculation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TickReport {
    pub generated: Option<Token>,
    pub starved: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReceiverStats {
    pub provisional_tokens: u64,
    pub starvation_ticks: u64,
    pub innovation_bits: u64,
    pub patches_applied: u64,
    pub patches_not_applicable: u64,
    pub patches_duplicate: u64,
    pub patches_tampered: u64,
    pub rollback_events: u64,
    pub rollback_tokens: u64,
    pub max_rollback_depth: u64,
    pub max_speculation_depth: u64,
    pub clamped_patches: u64,
    pub commits_ok: u64,
    pub commits_rejected: u64,
    pub commits_deferred: u64,
    pub resyncs_adopted: u64,
    pub na_resync_triggers: u64,
    pub rp_resync_triggers: u64,
    pub deferred_commit_expiries: u64,
}

pub struct Receiver {
    cfg: SessionConfig,
    predictor: Box<dyn Predictor>,
    policy: GenerationPolicy,
    header: [u8; 32],
    key: [u8; 32],
    v: u32,
    divergence_seed: u64,
    content: Vec<Token>,
    anchor: Anchor,
    /// Fed with `content[..anchor.index]`.
    hasher: ContextHasher,
    watermark: Option<u64>,
    consecutive_na: u32,
    awaiting_resync: bool,
    last_request_us: Option<u64>,
    pending_commit: Option<(CommitMsg, u64)>,
    h_cur: u64,
    rto_us: u64,
    monitor: MetricsWindow,
    window_seq: u64,
    latest_window: Option<WindowReport>,
    adaptive: Option<(ControlState, ControlThresholds)>,
    outbox: VecDeque<CommitAck>,
    pub stats: ReceiverStats,
}

impl Receiver {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: SessionConfig,
        model: &PredictorSpec,
        tokenizer_id: &str,
        policy: GenerationPolicy,
        key: [u8; 32],
        divergence_seed: u64,
        rto_us: u64,
        window_tokens: u64,
        adaptive_budget: Option<f64>,
    ) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        policy.validate()?;
        let predictor = model.build()?;
        let header = header_digest(model, tokenizer_id, &policy);
        let anchor = Anchor::initial(model.v, &header);
        let adaptive = adaptive_budget.map(|budget| {
            let lag = cfg.anchor_lag();
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
            key,
            v: model.v,
            divergence_seed,
            content: Vec::new(),
            anchor,
            hasher: ContextHasher::new(model.v),
            watermark: None,
            consecutive_na: 0,
            awaiting_resync: false,
            last_request_us: None,
            pending_commit: None,
            h_cur: cfg.h,
            rto_us,
            monitor: MetricsWindow::new(window_tokens, cfg.rho, cfg.w),
            window_seq: 0,
            latest_window: None,
            adaptive,
            outbox: VecDeque::new(),
            stats: ReceiverStats::default(),
        })
    }

    pub fn content(&self) -> &[Token] {
        &self.content
    }

    /// The committed prefix: immutable, covered by the anchor digest.
    pub fn committed(&self) -> &[Token] {
        &self.content[..self.anchor.index as usize]
    }

    pub fn anchor_index(&self) -> u64 {
        self.anchor.index
    }

    pub fn state_id(&self) -> StateId {
        self.anchor.state_id
    }

    pub fn speculation_depth(&self) -> u64 {
        self.content.len() as u64 - self.anchor.index
    }

    pub fn horizon(&self) -> u64 {
        self.h_cur
    }

    pub fn latest_window(&self) -> Option<WindowReport> {
        self.latest_window
    }

    /// No repair work pending and no unsent feedback queued. Together
    /// with a drained sender and an empty channel this means the
    /// session has nothing left to say.
    pub fn quiescent(&self) -> bool {
        !self.awaiting_resync && self.pending_commit.is_none() && self.outbox.is_empty()
    }

    pub fn take_acks(&mut self) -> Vec<CommitAck> {
        self.outbox.drain(..).collect()
    }

    fn ack_current(&self, ok: bool, resync_needed: bool) -> CommitAck {
        CommitAck {
            index: self.anchor.index,
            ok,
            state_id: self.anchor.state_id,
            resync_needed,
            window: self.latest_window,
        }
    }

    fn request_resync(&mut self, now_us: u64) {
        self.awaiting_resync = true;
        self.last_request_us = Some(now_us);
        let ack = self.ack_current(true, true);
        self.outbox.push_back(ack);
    }

    /// One speculation step: extend provisional state by a single token
    /// unless the horizon is exhausted, then service timers.
    pub fn tick(&mut self, now_us: u64) -> Result<TickReport, ProtocolError> {
        let report = if self.speculation_depth() < self.h_cur {
            let pos = self.content.len() as u64;
            let t = generate_token_perturbed(
                self.predictor.as_ref(),
                &self.policy,
                self.cfg.regime,
                self.divergence_seed,
                pos,
                &self.content,
            )?;
            self.content.push(t);
            self.stats.provisional_tokens += 1;
            self.note_depth();
            self.monitor.record_provisional(1);
            self.roll_window_if_due();
            TickReport {
                generated: Some(t),
                starved: false,
            }
        } else {
            self.stats.starvation_ticks += 1;
            TickReport {
                generated: None,
                starved: true,
            }
        };
        // a commit that outran our content and never became checkable
        // means we lost the traffic that should have produced it
        if let Some((_, first_seen)) = self.pending_commit {
            if now_us.saturating_sub(first_seen) >= self.rto_us {
                self.pending_commit = None;
                self.stats.deferred_commit_expiries += 1;
                self.request_resync(now_us);
            }
        }
        if self.awaiting_resync {
            let due = self
                .last_request_us
                .map_or(true, |t| now_us.saturating_sub(t) >= self.rto_us);
            if due {
                self.request_resync(now_us);
            }
        }
        Ok(report)
    }

    fn note_depth(&mut self) {
        let depth = self.speculation_depth();
        if depth > self.stats.max_speculation_depth {
            self.stats.max_speculation_depth = depth;
        }
    }

    fn roll_window_if_due(&mut self) {
        if let Some(summary) = self.monitor.poll_boundary() {
            self.window_seq += 1;
            if let Some((state, thresholds)) = self.adaptive.as_mut() {
                *state = control_step(*state, summary.cp, summary.rp, thresholds);
                self.h_cur = state.h;
            }
            self.latest_window = Some(WindowReport {
                window_seq: self.window_seq,
                cp: summary.cp,
                rp: summary.rp,
                h: self.h_cur,
            });
            if summary.patch_count >= RP_RESYNC_MIN_PATCHES
                && summary.rp > RP_RESYNC_THRESHOLD
                && !self.awaiting_resync
            {
                self.stats.rp_resync_triggers += 1;
                // timer fields set by request_resync on the next tick
                self.awaiting_resync = true;
                self.last_request_us = None;
            }
        }
    }

    /// Ingests one forward-channel message.
    pub fn on_forward(&mut self, bytes: &[u8], now_us: u64) -> ReceiverReport {
        let msg = match decode_message(bytes, &self.key, self.v) {
            Ok(m) => m,
            Err(WireError::Tampered(reason)) => {
                self.stats.patches_tampered += 1;
                return ReceiverReport::Corrupt { reason };
            }
            Err(WireError::Malformed(reason)) => {
                self.stats.patches_tampered += 1;
                return ReceiverReport::Corrupt { reason };
            }
        };
        let seq = match &msg {
            WireMessage::Patch(p) => p.seq,
            WireMessage::Commit(c) => c.seq,
            WireMessage::Resync(r) => r.seq,
            WireMessage::Ack(_) => {
                return ReceiverReport::Corrupt {
                    reason: "ack on the forward channel".into(),
                }
            }
        };
        if let Some(mark) = self.watermark {
            if seq <= mark {
                if let WireMessage::Patch(_) = msg {
                    self.stats.patches_duplicate += 1;
                    return ReceiverReport::Patch {
                        seq,
                        disposition: PatchDisposition::Duplicate,
                    };
                }
                return ReceiverReport::Corrupt {
                    reason: format!("stale seq {seq} at watermark {mark}"),
                };
            }
        }
        self.watermark = Some(seq);
        match msg {
            WireMessage::Patch(p) => {
                let disposition = self.apply_patch(&p, now_us);
                ReceiverReport::Patch { seq, disposition }
            }
            WireMessage::Commit(c) => {
                let outcome = self.handle_commit(c, now_us);
                ReceiverReport::Commit {
                    seq,
                    index: c.index,
                    outcome,
                }
            }
            WireMessage::Resync(r) => {
                let index = r.index;
                self.adopt_resync(r);
                ReceiverReport::Resync { seq, index }
            }
            WireMessage::Ack(_) => unreachable!("rejected above"),
        }
    }

    fn not_applicable(&mut self, now_us: u64, reason: impl Into<String>) -> PatchDisposition {
        self.stats.patches_not_applicable += 1;
        self.consecutive_na += 1;
        if self.consecutive_na == NA_RESYNC_THRESHOLD {
            self.stats.na_resync_triggers += 1;
            self.request_resync(now_us);
        }
        PatchDisposition::NotApplicable {
            reason: reason.into(),
        }
    }

    fn apply_patch(&mut self, p: &Patch, now_us: u64) -> PatchDisposition {
        if p.baseline != self.anchor.state_id {
            return self.not_applicable(now_us, "baseline StateID mismatch");
        }
        if p.anchor_index != self.anchor.index || p.anchor_digest != self.anchor.context_digest {
            return self.not_applicable(now_us, "anchor mismatch");
        }
        if p.start_rel > p.end_rel || p.end_rel > self.cfg.w {
            return self.not_applicable(now_us, "target range outside the rollback window");
        }
        let start_abs = self.anchor.index + p.start_rel;
        if start_abs > self.anchor.index + self.h_cur {
            return self.not_applicable(now_us, "target range beyond the speculation horizon");
        }
        // a patch can reference positions our tick-paced generation has
        // not reached yet; speculation is deterministic, so produce the
        // missing prefix on demand
        while (self.content.len() as u64) < start_abs {
            let pos = self.content.len() as u64;
            let t = match generate_token_perturbed(
                self.predictor.as_ref(),
                &self.policy,
                self.cfg.regime,
                self.divergence_seed,
                pos,
                &self.content,
            ) {
                Ok(t) => t,
                Err(e) => return self.not_applicable(now_us, format!("gap generation: {e}")),
            };
            self.content.push(t);
            self.stats.provisional_tokens += 1;
            self.monitor.record_provisional(1);
            self.roll_window_if_due();
        }
        let context = &self.content[..start_abs as usize];
        let script = match decode_payload(&p.payload, self.predictor.as_ref(), context) {
            Ok(s) => s,
            Err(e) => {
                // the frame was authentic, so this is a protocol-level
                // defect rather than channel noise; patching stops here
                return self.not_applicable(now_us, format!("undecodable payload: {e}"));
            }
        };
        if script.source_len() != 0 {
            return self.not_applicable(now_us, "script consumes provisional input");
        }
        let tokens = match apply(&[], &script) {
            Ok(t) => t,
            Err(e) => return self.not_applicable(now_us, format!("inapplicable script: {e}")),
        };
        if tokens.len() as u64 != p.end_rel - p.start_rel {
            return self.not_applicable(now_us, "token count disagrees with target range");
        }
        let rollback = self.content.len() as u64 - start_abs;
        let cap = self.anchor.index + self.h_cur;
        let keep = (cap.saturating_sub(start_abs) as usize).min(tokens.len());
        let clamped = keep < tokens.len();
        self.content.truncate(start_abs as usize);
        self.content.extend_from_slice(&tokens[..keep]);
        let coded = p.payload.coded_bits() as u64;
        self.stats.patches_applied += 1;
        self.stats.innovation_bits += coded;
        if rollback > 0 {
            self.stats.rollback_events += 1;
            self.stats.rollback_tokens += rollback;
            if rollback > self.stats.max_rollback_depth {
                self.stats.max_rollback_depth = rollback;
            }
        }
        if clamped {
            self.stats.clamped_patches += 1;
        }
        self.note_depth();
        self.monitor.record_innovation_bits(coded);
        self.monitor.record_patch(PatchRecord {
            start_depth: p.start_rel,
        });
        self.consecutive_na = 0;
        self.awaiting_resync = false;
        PatchDisposition::Applied {
            rollback_depth: rollback,
            innovation_bits: coded,
            clamped,
        }
    }

    fn handle_commit(&mut self, c: CommitMsg, now_us: u64) -> &'static str {
        if c.index < self.anchor.index {
            // already past it; re-acknowledge so the sender can settle
            let ack = self.ack_current(true, false);
            self.outbox.push_back(ack);
            return "stale";
        }
        if c.index == self.anchor.index {
            let ok = c.context_digest == self.anchor.context_digest;
            let ack = self.ack_current(ok, false);
            self.outbox.push_back(ack);
            return if ok { "ok" } else { "mismatch" };
        }
        if c.index > self.content.len() as u64 {
            // content has not caught up; hold it briefly
            if self.pending_commit.is_none() {
                self.pending_commit = Some((c, now_us));
            }
            self.stats.commits_deferred += 1;
            return "deferred";
        }
        self.verify_and_advance(c)
    }

    fn verify_and_advance(&mut self, c: CommitMsg) -> &'static str {
        debug_assert!(c.index >= self.hasher.fed());
        let mut probe = self.hasher.clone();
        probe.absorb(&self.content[self.hasher.fed() as usize..c.index as usize]);
        let digest = probe.digest();
        let state_id = state_id_from_digests(&self.header, &digest);
        if digest != c.context_digest || state_id != c.state_id {
            self.stats.commits_rejected += 1;
            // vouch for the last good anchor so the sender can repair
            let ack = self.ack_current(false, false);
            self.outbox.push_back(ack);
            return "mismatch";
        }
        self.hasher = probe;
        self.anchor = Anchor {
            index: c.index,
            context_digest: digest,
            state_id,
        };
        self.stats.commits_ok += 1;
        self.awaiting_resync = false;
        let ack = self.ack_current(true, false);
        self.outbox.push_back(ack);
        "ok"
    }

    /// Retries a deferred commit once content has caught up.
    pub fn service_pending_commit(&mut self) {
        if let Some((c, _)) = self.pending_commit {
            if c.index <= self.content.len() as u64 && c.index >= self.anchor.index {
                self.pending_commit = None;
                if c.index == self.anchor.index {
                    let ok = c.context_digest == self.anchor.context_digest;
                    let ack = self.ack_current(ok, false);
                    self.outbox.push_back(ack);
                } else {
                    self.verify_and_advance(c);
                }
            } else if c.index < self.anchor.index {
                self.pending_commit = None;
            }
        }
    }

    fn adopt_resync(&mut self, r: ResyncMsg) {
        if r.index < self.anchor.index {
            // the snapshot predates our committed frontier (the sender
            // rewound on a vouch that commits in flight have overtaken).
            // Adopting would roll back committed content, so answer
            // with our position and let the sender fast-forward.
            self.consecutive_na = 0;
            self.awaiting_resync = false;
            let ack = self.ack_current(true, false);
            self.outbox.push_back(ack);
            return;
        }
        let digest = super::context_digest(self.v, &r.tokens);
        let state_id = state_id_from_digests(&self.header, &digest);
        if digest != r.context_digest || state_id != r.state_id {
            // inconsistent retransmission; keep asking
            self.request_resync(0);
            return;
        }
        let discarded = self.content.len() as u64;
        self.content = r.tokens;
        let mut fresh = ContextHasher::new(self.v);
        fresh.absorb(&self.content);
        self.hasher = fresh;
        self.anchor = Anchor {
            index: r.index,
            context_digest: digest,
            state_id,
        };
        self.consecutive_na = 0;
        self.awaiting_resync = false;
        self.pending_commit = None;
        self.stats.resyncs_adopted += 1;
        if discarded > r.index {
            self.stats.rollback_events += 1;
            let depth = discarded - r.index;
            self.stats.rollback_tokens += depth;
            if depth > self.stats.max_rollback_depth {
                self.stats.max_rollback_depth = depth;
            }
        }
        let ack = self.ack_current(true, false);
        self.outbox.push_back(ack);
    }
}
