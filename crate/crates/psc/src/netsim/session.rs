//! End-to-end session runner: a token source feeding a sender, a
//! receiver speculating ahead, and two simulated links between them.
//!
//! The run is a single-threaded discrete-event loop. Ties in time break
//! by event class (deliveries before the tick at the same instant,
//! wakeups last) and then by insertion order, so a given setup replays
//! byte-identically.

use std::cmp::Ordering;
use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use super::{ChannelModel, Link};
use crate::predictor::{MarkovChain, PredictorSpec, Token};
use crate::protocol::{
    encode_message, session_key, CommitAck, FaultPlan, GenerationPolicy, ProtocolError, Receiver,
    ReceiverReport, Sender, SessionConfig, WireMessage,
};

/// How long after the source stops the run may keep repairing before it
/// is declared stuck.
pub const DEFAULT_DRAIN_TIMEOUT_S: f64 = 240.0;

/// Number of backlog samples kept per run (stride-sampled above this).
const BACKLOG_SAMPLE_CAP: u64 = 2048;

/// Where the realized token stream comes from.
#[derive(Debug, Clone)]
pub enum SourceSpec {
    /// Sample a Markov chain with its own stream of randomness.
    Markov { chain: MarkovChain, seed: u64 },
    /// Replay a fixed token sequence.
    Corpus { tokens: Vec<Token> },
}

impl SourceSpec {
    fn realize(&self, max_tokens: u64) -> Vec<Token> {
        match self {
            SourceSpec::Markov { chain, seed } => {
                let mut rng = ChaCha12Rng::seed_from_u64(*seed);
                chain.sample(&mut rng, max_tokens as usize)
            }
            SourceSpec::Corpus { tokens } => {
                let n = tokens.len().min(max_tokens as usize);
                tokens[..n].to_vec()
            }
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone)]
pub struct SessionSetup {
    pub config: SessionConfig,
    pub channel: ChannelModel,
    pub model: PredictorSpec,
    pub tokenizer_id: String,
    pub policy: GenerationPolicy,
    pub source: SourceSpec,
    pub max_tokens: u64,
    pub key_seed: u64,
    pub divergence_seed: u64,
    pub fault: FaultPlan,
    /// Drive horizon and anchor period from receiver window reports.
    pub adaptive: bool,
    pub window_tokens: u64,
    pub drain_timeout_s: f64,
}

impl SessionSetup {
    pub fn new(
        config: SessionConfig,
        channel: ChannelModel,
        model: PredictorSpec,
        source: SourceSpec,
        max_tokens: u64,
    ) -> Self {
        Self {
            config,
            channel,
            model,
            tokenizer_id: "tok-v1".to_string(),
            policy: GenerationPolicy::greedy(),
            source,
            max_tokens,
            key_seed: 1,
            divergence_seed: 2,
            fault: FaultPlan::default(),
            adaptive: false,
            window_tokens: crate::monitor::DEFAULT_WINDOW_TOKENS,
            drain_timeout_s: DEFAULT_DRAIN_TIMEOUT_S,
        }
    }
}

/// Sender-side unreconciled queue length at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BacklogSample {
    pub t_us: u64,
    pub tokens: u64,
}

/// One receiver monitoring window as it closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowSample {
    pub t_us: u64,
    pub window_seq: u64,
    pub cp: Option<f64>,
    pub rp: f64,
    pub h: u64,
}

/// One wire-level event. `send` entries appear for every message that
/// enters a link (lost ones included); `deliver` entries appear when a
/// surviving message reaches the far side, with the outcome in
/// `detail`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranscriptEntry {
    pub t_us: u64,
    pub event: &'static str,
    pub dir: &'static str,
    pub kind: &'static str,
    pub seq: u64,
    pub bits: u64,
    pub lost: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionMetrics {
    pub source_tokens: u64,
    pub duration_us: u64,
    pub source_end_us: u64,
    /// Clean termination: source done, channel empty, both sides idle.
    pub drained: bool,
    pub timed_out: bool,
    pub committed_tokens: u64,
    /// Receiver committed stream equals the full realized stream.
    pub committed_matches_realized: bool,
    /// Receiver committed stream is a prefix of the realized stream.
    /// This is the safety property; it should hold even mid-flight.
    pub committed_is_prefix: bool,
    pub state_ids_equal: bool,
    pub provisional_at_source_end: u64,
    pub starvation_at_source_end: u64,
    pub provisional_tokens_total: u64,
    pub starvation_ticks_total: u64,
    /// Coded patch bits accepted by the receiver over the whole run.
    pub innovation_bits: u64,
    /// innovation_bits over provisional tokens generated while the
    /// source was live; the per-token price of staying synchronized.
    pub mean_correction_pressure: Option<f64>,
    pub patches_built: u64,
    pub patches_applied: u64,
    pub patches_not_applicable: u64,
    pub patches_duplicate: u64,
    pub patches_tampered: u64,
    pub patches_clamped: u64,
    pub max_patch_span: u64,
    pub commits_sent: u64,
    pub commit_resends: u64,
    pub commits_ok: u64,
    pub commits_rejected: u64,
    pub commits_deferred: u64,
    pub deferred_commit_expiries: u64,
    pub resyncs_sent: u64,
    pub resyncs_adopted: u64,
    pub resync_tokens: u64,
    pub rewinds: u64,
    pub fast_forwards: u64,
    pub na_resync_triggers: u64,
    pub rp_resync_triggers: u64,
    pub rollback_events: u64,
    pub rollback_tokens: u64,
    pub max_rollback_depth: u64,
    pub max_speculation_depth: u64,
    pub forward_bits: u64,
    pub forward_msgs: u64,
    pub forward_drops: u64,
    pub reverse_msgs: u64,
    pub reverse_drops: u64,
    pub sender_anchor_index: u64,
    pub receiver_anchor_index: u64,
    /// Late-run backlog floor sits well above the early-run ceiling:
    /// the reconciliation queue is growing without bound.
    pub backlog_growth: bool,
    pub backlog: Vec<BacklogSample>,
    pub windows: Vec<WindowSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionOutcome {
    pub metrics: SessionMetrics,
    pub transcript: Vec<TranscriptEntry>,
}

const PRIO_DELIVER: u8 = 0;
const PRIO_TICK: u8 = 1;
const PRIO_WAKE: u8 = 2;

enum Pending {
    Tick(u64),
    DeliverFwd {
        bytes: Vec<u8>,
        kind: &'static str,
        seq: u64,
        bits: u64,
    },
    DeliverRev {
        ack: CommitAck,
    },
    Wake,
}

struct Event {
    t: u64,
    prio: u8,
    id: u64,
    what: Pending,
}

impl Event {
    fn key(&self) -> (u64, u8, u64) {
        (self.t, self.prio, self.id)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

fn message_seq(msg: &WireMessage) -> u64 {
    match msg {
        WireMessage::Patch(p) => p.seq,
        WireMessage::Commit(c) => c.seq,
        WireMessage::Resync(r) => r.seq,
        WireMessage::Ack(_) => 0,
    }
}

fn report_detail(report: &ReceiverReport) -> String {
    use crate::protocol::PatchDisposition as D;
    match report {
        ReceiverReport::Patch { disposition, .. } => match disposition {
            D::Applied {
                rollback_depth,
                innovation_bits,
                clamped,
            } => format!(
                "applied rollback={rollback_depth} bits={innovation_bits}{}",
                if *clamped { " clamped" } else { "" }
            ),
            D::NotApplicable { reason } => format!("not_applicable: {reason}"),
            D::Duplicate => "duplicate".to_string(),
            D::Tampered { reason } => format!("tampered: {reason}"),
        },
        ReceiverReport::Commit { index, outcome, .. } => format!("{outcome} index={index}"),
        ReceiverReport::Resync { index, .. } => format!("adopted index={index}"),
        ReceiverReport::Corrupt { reason } => format!("corrupt: {reason}"),
    }
}

/// Heuristic: the queue has stopped returning to its early operating
/// floor. A stable queue is a sawtooth whose dips recur forever, so the
/// late floor stays near the early floor; under sustained overload the
/// dip floor itself climbs past the early envelope.
fn detect_backlog_growth(samples: &[BacklogSample]) -> bool {
    if samples.len() < 30 {
        return false;
    }
    let third = samples.len() / 3;
    let early = samples[..third].iter().map(|s| s.tokens);
    let early_min = early.clone().min().unwrap_or(0);
    let early_max = early.max().unwrap_or(0);
    let tail = samples.len() - samples.len() / 10;
    let late_min = samples[tail..].iter().map(|s| s.tokens).min().unwrap_or(0);
    late_min >= (4 * early_min).max(32) && 2 * late_min >= early_max
}

struct Sim<'a> {
    setup: &'a SessionSetup,
    key: [u8; 32],
    alphabet: u32,
    sender: Sender,
    receiver: Receiver,
    fwd: Link,
    rev: Link,
    heap: BinaryHeap<Reverse<Event>>,
    next_id: u64,
    in_flight: u64,
    transcript: Vec<TranscriptEntry>,
    windows: Vec<WindowSample>,
    last_window_seq: Option<u64>,
}

impl Sim<'_> {
    fn schedule(&mut self, t: u64, prio: u8, what: Pending) {
        let id = self.next_id;
        self.next_id += 1;
        self.heap.push(Reverse(Event { t, prio, id, what }));
    }

    /// Flushes receiver feedback onto the reverse link, then feeds the
    /// forward link until it is busy or the sender goes idle.
    fn pump(&mut self, now: u64) -> Result<(), ProtocolError> {
        for ack in self.receiver.take_acks() {
            let (deliver_at, lost) = self.rev.send(now, 0);
            self.transcript.push(TranscriptEntry {
                t_us: now,
                event: "send",
                dir: "rev",
                kind: "ack",
                seq: 0,
                bits: 0,
                lost,
                detail: format!(
                    "index={} ok={}{}",
                    ack.index,
                    ack.ok,
                    if ack.resync_needed { " resync" } else { "" }
                ),
            });
            if !lost {
                self.in_flight += 1;
                self.schedule(deliver_at, PRIO_DELIVER, Pending::DeliverRev { ack });
            }
        }
        while self.fwd.is_free(now) {
            let Some(msg) = self.sender.next_message(now)? else {
                break;
            };
            let mut bytes = encode_message(&msg, &self.key, self.alphabet);
            let kind = msg.kind_name();
            let seq = message_seq(&msg);
            // commits and acks are small fixed-size control frames;
            // the model charges them nothing on the wire
            let bits = match &msg {
                WireMessage::Commit(_) | WireMessage::Ack(_) => 0,
                _ => bytes.len() as u64 * 8,
            };
            let mut detail = String::new();
            if matches!(&msg, WireMessage::Patch(_)) {
                let ordinal = self.sender.stats.patches_built.saturating_sub(1);
                if self.setup.fault.is_stale(ordinal) {
                    detail.push_str("stale_baseline");
                }
                if self.setup.fault.wants_corruption(ordinal) {
                    let mid = bytes.len() / 2;
                    bytes[mid] ^= 0x01;
                    if !detail.is_empty() {
                        detail.push(' ');
                    }
                    detail.push_str("corrupted");
                }
            }
            let (deliver_at, lost) = self.fwd.send(now, bits);
            self.transcript.push(TranscriptEntry {
                t_us: now,
                event: "send",
                dir: "fwd",
                kind,
                seq,
                bits,
                lost,
                detail,
            });
            if !lost {
                self.in_flight += 1;
                self.schedule(
                    deliver_at,
                    PRIO_DELIVER,
                    Pending::DeliverFwd {
                        bytes,
                        kind,
                        seq,
                        bits,
                    },
                );
            }
            if bits > 0 {
                let free = self.fwd.free_at();
                if free > now {
                    self.schedule(free, PRIO_WAKE, Pending::Wake);
                }
                break;
            }
        }
        Ok(())
    }

    fn record_window(&mut self, now: u64) {
        if let Some(w) = self.receiver.latest_window() {
            if self.last_window_seq != Some(w.window_seq) {
                self.last_window_seq = Some(w.window_seq);
                self.windows.push(WindowSample {
                    t_us: now,
                    window_seq: w.window_seq,
                    cp: w.cp,
                    rp: w.rp,
                    h: w.h,
                });
            }
        }
    }
}

pub fn run_session(setup: &SessionSetup) -> Result<SessionOutcome, ProtocolError> {
    setup.config.validate()?;
    setup.channel.validate()?;
    if setup.config.r > 1e6 {
        return Err(ProtocolError::InvalidConfig(format!(
            "token rate {} exceeds the microsecond clock",
            setup.config.r
        )));
    }
    if setup.max_tokens == 0 {
        return Err(ProtocolError::InvalidConfig(
            "max_tokens must be positive".to_string(),
        ));
    }
    match &setup.source {
        SourceSpec::Markov { chain, .. } => {
            if chain.size() as u32 != setup.model.v {
                return Err(ProtocolError::InvalidConfig(format!(
                    "source alphabet {} != model alphabet {}",
                    chain.size(),
                    setup.model.v
                )));
            }
        }
        SourceSpec::Corpus { tokens } => {
            if tokens.is_empty() {
                return Err(ProtocolError::InvalidConfig(
                    "corpus source is empty".to_string(),
                ));
            }
            if let Some(&t) = tokens.iter().find(|&&t| t >= setup.model.v) {
                return Err(ProtocolError::InvalidConfig(format!(
                    "corpus token {t} outside alphabet of size {}",
                    setup.model.v
                )));
            }
        }
    }
    let stream = setup.source.realize(setup.max_tokens);
    let n = stream.len() as u64;

    let tick_period = 1e6 / setup.config.r;
    let tick_time = |i: u64| (i as f64 * tick_period).round() as u64;
    let tick_us = tick_period.round().max(1.0) as u64;
    let rto_us = 4 * setup.channel.latency_us() + 16 * tick_us + 100_000;
    let budget = setup
        .adaptive
        .then(|| setup.channel.usable_bps() / setup.config.r);
    let key = session_key(setup.key_seed);

    let sender = Sender::new(
        setup.config,
        &setup.model,
        &setup.tokenizer_id,
        setup.policy.clone(),
        rto_us,
        setup.fault.clone(),
        budget,
    )?;
    let receiver = Receiver::new(
        setup.config,
        &setup.model,
        &setup.tokenizer_id,
        setup.policy.clone(),
        key,
        setup.divergence_seed,
        rto_us,
        setup.window_tokens,
        budget,
    )?;

    let mut sim = Sim {
        setup,
        key,
        alphabet: setup.model.v,
        sender,
        receiver,
        fwd: Link::new(setup.channel, 0x66),
        rev: Link::new(setup.channel, 0x72),
        heap: BinaryHeap::new(),
        next_id: 0,
        in_flight: 0,
        transcript: Vec::new(),
        windows: Vec::new(),
        last_window_seq: None,
    };
    sim.schedule(0, PRIO_TICK, Pending::Tick(0));

    let drain_timeout_us = (setup.drain_timeout_s * 1e6).round() as u64;
    let hard_deadline = tick_time(n.saturating_sub(1)) + drain_timeout_us;
    let stride = (n / BACKLOG_SAMPLE_CAP).max(1);

    let mut backlog = Vec::new();
    let mut now = 0u64;
    let mut source_end_us = 0u64;
    let mut provisional_at_source_end = 0u64;
    let mut starvation_at_source_end = 0u64;
    let mut drained = false;
    let mut timed_out = false;

    while let Some(Reverse(ev)) = sim.heap.pop() {
        now = ev.t;
        if now > hard_deadline {
            timed_out = true;
            break;
        }
        match ev.what {
            Pending::Tick(i) => {
                sim.receiver.tick(now)?;
                sim.receiver.service_pending_commit();
                if i < n {
                    sim.sender.push_source(stream[i as usize])?;
                    if i + 1 == n {
                        sim.sender.finish_source();
                    }
                }
                sim.pump(now)?;
                if i < n && (i % stride == 0 || i + 1 == n) {
                    backlog.push(BacklogSample {
                        t_us: now,
                        tokens: sim.sender.backlog(),
                    });
                }
                if i + 1 == n {
                    source_end_us = now;
                    provisional_at_source_end = sim.receiver.stats.provisional_tokens;
                    starvation_at_source_end = sim.receiver.stats.starvation_ticks;
                }
                sim.schedule(tick_time(i + 1), PRIO_TICK, Pending::Tick(i + 1));
            }
            Pending::DeliverFwd {
                bytes, kind, seq, bits,
            } => {
                sim.in_flight -= 1;
                let report = sim.receiver.on_forward(&bytes, now);
                sim.receiver.service_pending_commit();
                sim.transcript.push(TranscriptEntry {
                    t_us: now,
                    event: "deliver",
                    dir: "fwd",
                    kind,
                    seq,
                    bits,
                    lost: false,
                    detail: report_detail(&report),
                });
                sim.pump(now)?;
            }
            Pending::DeliverRev { ack } => {
                sim.in_flight -= 1;
                sim.sender.on_ack(&ack, now);
                sim.transcript.push(TranscriptEntry {
                    t_us: now,
                    event: "deliver",
                    dir: "rev",
                    kind: "ack",
                    seq: 0,
                    bits: 0,
                    lost: false,
                    detail: format!("index={} ok={}", ack.index, ack.ok),
                });
                sim.pump(now)?;
            }
            Pending::Wake => {
                sim.pump(now)?;
            }
        }
        sim.record_window(now);
        if sim.sender.drained() && sim.in_flight == 0 && sim.receiver.quiescent() {
            drained = true;
            break;
        }
    }

    let s = &sim.sender.stats;
    let r = &sim.receiver.stats;
    let metrics = SessionMetrics {
        source_tokens: n,
        duration_us: now,
        source_end_us,
        drained,
        timed_out,
        committed_tokens: sim.receiver.committed().len() as u64,
        committed_matches_realized: sim.receiver.committed() == sim.sender.realized(),
        committed_is_prefix: sim.sender.realized().starts_with(sim.receiver.committed()),
        state_ids_equal: sim.receiver.state_id() == sim.sender.state_id(),
        provisional_at_source_end,
        starvation_at_source_end,
        provisional_tokens_total: r.provisional_tokens,
        starvation_ticks_total: r.starvation_ticks,
        innovation_bits: r.innovation_bits,
        mean_correction_pressure: (provisional_at_source_end > 0)
            .then(|| r.innovation_bits as f64 / provisional_at_source_end as f64),
        patches_built: s.patches_built,
        patches_applied: r.patches_applied,
        patches_not_applicable: r.patches_not_applicable,
        patches_duplicate: r.patches_duplicate,
        patches_tampered: r.patches_tampered,
        patches_clamped: r.clamped_patches,
        max_patch_span: s.max_patch_span,
        commits_sent: s.commits_sent,
        commit_resends: s.commit_resends,
        commits_ok: r.commits_ok,
        commits_rejected: r.commits_rejected,
        commits_deferred: r.commits_deferred,
        deferred_commit_expiries: r.deferred_commit_expiries,
        resyncs_sent: s.resyncs_sent,
        resyncs_adopted: r.resyncs_adopted,
        resync_tokens: s.resync_tokens,
        rewinds: s.rewinds,
        fast_forwards: s.fast_forwards,
        na_resync_triggers: r.na_resync_triggers,
        rp_resync_triggers: r.rp_resync_triggers,
        rollback_events: r.rollback_events,
        rollback_tokens: r.rollback_tokens,
        max_rollback_depth: r.max_rollback_depth,
        max_speculation_depth: r.max_speculation_depth,
        forward_bits: sim.fwd.bits_sent,
        forward_msgs: sim.fwd.messages_sent,
        forward_drops: sim.fwd.messages_lost,
        reverse_msgs: sim.rev.messages_sent,
        reverse_drops: sim.rev.messages_lost,
        sender_anchor_index: sim.sender.anchor_index(),
        receiver_anchor_index: sim.receiver.anchor_index(),
        backlog_growth: detect_backlog_growth(&backlog),
        backlog,
        windows: sim.windows,
    };
    Ok(SessionOutcome {
        metrics,
        transcript: sim.transcript,
    })
}
