//! Mismatch monitoring and the adaptive control loop.
//!
//! A tumbling window over provisional generation accumulates innovation
//! bits and patch records. Two pressures fall out of it: correction
//! pressure (bits of innovation per provisional token) and rollback
//! pressure (fraction of patches starting near the committed anchor).
//! An AIMD rule steers the speculation horizon H and the anchor period K
//! from those pressures.

/// Default window length in provisional tokens.
pub const DEFAULT_WINDOW_TOKENS: u64 = 256;
/// Rollback-pressure level that triggers multiplicative decrease (and,
/// at the protocol layer, resynchronization).
pub const RP_HIGH: f64 = 0.5;
/// Rollback-pressure level below which additive increase applies.
pub const RP_LOW: f64 = 0.1;

/// One patch as the monitor sees it: where its edit span started,
/// measured in tokens from the committed anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRecord {
    pub start_depth: u64,
}

/// Completed-window snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSummary {
    pub provisional_tokens: u64,
    pub innovation_bits: u64,
    pub patch_count: u64,
    /// Bits per provisional token; absent when the window saw no tokens.
    pub cp: Option<f64>,
    pub rp: f64,
}

/// Tumbling metrics window: counters reset wholesale at each boundary.
#[derive(Debug, Clone)]
pub struct MetricsWindow {
    window_tokens: u64,
    provisional_tokens: u64,
    innovation_bits: u64,
    patches: Vec<PatchRecord>,
    rho: f64,
    w: u64,
}

impl MetricsWindow {
    pub fn new(window_tokens: u64, rho: f64, w: u64) -> Self {
        assert!(window_tokens > 0, "window length must be positive");
        Self {
            window_tokens,
            provisional_tokens: 0,
            innovation_bits: 0,
            patches: Vec::new(),
            rho,
            w,
        }
    }

    pub fn record_provisional(&mut self, tokens: u64) {
        self.provisional_tokens += tokens;
    }

    pub fn record_innovation_bits(&mut self, bits: u64) {
        self.innovation_bits += bits;
    }

    pub fn record_patch(&mut self, record: PatchRecord) {
        self.patches.push(record);
    }

    /// Bits of innovation per provisional token in the open window.
    /// Undefined (None) until the window has seen at least one token.
    pub fn correction_pressure(&self) -> Option<f64> {
        if self.provisional_tokens == 0 {
            return None;
        }
        Some(self.innovation_bits as f64 / self.provisional_tokens as f64)
    }

    /// Fraction of window patches whose edit span starts inside the
    /// earliest `rho * W` tokens after the anchor. Zero without patches.
    pub fn rollback_pressure(&self) -> f64 {
        if self.patches.is_empty() {
            return 0.0;
        }
        let threshold = self.rho * self.w as f64;
        let deep = self
            .patches
            .iter()
            .filter(|p| (p.start_depth as f64) < threshold)
            .count();
        deep as f64 / self.patches.len() as f64
    }

    /// Rolls the window if it has accumulated a full `window_tokens` of
    /// provisional generation, returning the completed summary and
    /// resetting every counter.
    pub fn poll_boundary(&mut self) -> Option<WindowSummary> {
        if self.provisional_tokens < self.window_tokens {
            return None;
        }
        let summary = WindowSummary {
            provisional_tokens: self.provisional_tokens,
            innovation_bits: self.innovation_bits,
            patch_count: self.patches.len() as u64,
            cp: self.correction_pressure(),
            rp: self.rollback_pressure(),
        };
        self.provisional_tokens = 0;
        self.innovation_bits = 0;
        self.patches.clear();
        Some(summary)
    }
}

/// Adaptive-control thresholds. `cp_budget` is the per-token bit budget
/// the channel affords, eta*C / r.
#[derive(Debug, Clone, Copy)]
pub struct ControlThresholds {
    pub rp_high: f64,
    pub rp_low: f64,
    pub cp_budget: f64,
}

impl ControlThresholds {
    pub fn new(cp_budget: f64) -> Self {
        Self {
            rp_high: RP_HIGH,
            rp_low: RP_LOW,
            cp_budget,
        }
    }
}

/// Current horizon/anchor-period operating point with its bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlState {
    pub h: u64,
    pub k: u64,
    pub h_min: u64,
    pub h_max: u64,
    pub k_min: u64,
    pub k_max: u64,
}

impl ControlState {
    pub fn new(h: u64, k: u64, h_bounds: (u64, u64), k_bounds: (u64, u64)) -> Self {
        let s = Self {
            h,
            k,
            h_min: h_bounds.0,
            h_max: h_bounds.1,
            k_min: k_bounds.0,
            k_max: k_bounds.1,
        };
        assert!(s.h_min <= s.h && s.h <= s.h_max, "H out of bounds");
        assert!(s.k_min <= s.k && s.k <= s.k_max, "K out of bounds");
        s
    }
}

/// One AIMD update. Pressure (deep rollbacks or over-budget correction
/// cost) halves the horizon; calm windows grow it one token at a time.
/// The anchor period moves inversely with rollback pressure.
pub fn control_step(
    state: ControlState,
    cp: Option<f64>,
    rp: f64,
    thresholds: &ControlThresholds,
) -> ControlState {
    let over_budget = cp.is_some_and(|c| c > thresholds.cp_budget);
    let mut next = state;
    if rp > thresholds.rp_high || over_budget {
        next.h = (state.h / 2).max(state.h_min);
    } else if rp < thresholds.rp_low {
        next.h = (state.h + 1).min(state.h_max);
    }
    if rp > thresholds.rp_high {
        next.k = (state.k / 2).max(state.k_min);
    } else if rp < thresholds.rp_low {
        next.k = (state.k + 1).min(state.k_max);
    }
    next
}
