//! Perception-capacity feasibility accounting.
//!
//! A link with raw capacity `C` and payload fraction `eta` can carry
//! `eta * C` innovation bits per second. A consumer that needs tokens at
//! rate `r` from a model whose per-token cost is `h_bar` bits is feasible
//! only on the closed band
//!
//! `r0 <= r <= min(kappa / L, eta * C / h_bar)`,
//!
//! where `r0` is the minimum acceptable token rate and `kappa` bounds how
//! much speculation (rate times delay) the application tolerates. Rates
//! below `r0` starve; rates with `r * L > kappa` overrun the speculation
//! tolerance; rates above `eta * C / h_bar` exceed the innovation capacity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeasibilityError {
    #[error("invalid link budget: {0}")]
    InvalidBudget(String),
    #[error("invalid tolerance parameters: {0}")]
    InvalidTolerance(String),
    #[error("degenerate predictor cost: h_bar must be positive and finite, got {0}")]
    DegeneratePredictor(f64),
    #[error("invalid sweep grid: {0}")]
    InvalidGrid(String),
}

/// Channel budget: raw capacity in bits/s, payload fraction, one-way delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    /// Raw channel capacity C in bits per second.
    pub capacity: f64,
    /// Fraction of capacity available to innovation payload, in (0, 1].
    pub eta: f64,
    /// One-way delay L in seconds.
    pub delay: f64,
}

impl LinkBudget {
    pub fn new(capacity: f64, eta: f64, delay: f64) -> Result<Self, FeasibilityError> {
        let b = Self {
            capacity,
            eta,
            delay,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), FeasibilityError> {
        if !(self.capacity > 0.0) || !self.capacity.is_finite() {
            return Err(FeasibilityError::InvalidBudget(format!(
                "capacity must be positive, got {}",
                self.capacity
            )));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(FeasibilityError::InvalidBudget(format!(
                "eta must lie in (0, 1], got {}",
                self.eta
            )));
        }
        if !(self.delay >= 0.0) || !self.delay.is_finite() {
            return Err(FeasibilityError::InvalidBudget(format!(
                "delay must be nonnegative, got {}",
                self.delay
            )));
        }
        Ok(())
    }

    /// Innovation capacity `eta * C` in bits per second.
    pub fn innovation_capacity(&self) -> f64 {
        self.eta * self.capacity
    }
}

/// Application tolerances: minimum token rate and speculation budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceParams {
    /// Minimum acceptable consumption rate r0 in tokens per second.
    pub r0: f64,
    /// Maximum tolerated speculation depth kappa in tokens.
    pub kappa: f64,
}

impl ToleranceParams {
    pub fn new(r0: f64, kappa: f64) -> Result<Self, FeasibilityError> {
        let t = Self { r0, kappa };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), FeasibilityError> {
        if !(self.r0 >= 0.0) || !self.r0.is_finite() {
            return Err(FeasibilityError::InvalidTolerance(format!(
                "r0 must be nonnegative, got {}",
                self.r0
            )));
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(FeasibilityError::InvalidTolerance(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        Ok(())
    }
}

/// A rate ceiling that may be absent (no delay means no speculation limit).
/// Serializes as a number or the string "unbounded", never a float infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateCeiling {
    Finite(f64),
    Unbounded,
}

impl RateCeiling {
    pub fn min_with(self, other: f64) -> f64 {
        match self {
            RateCeiling::Finite(x) => x.min(other),
            RateCeiling::Unbounded => other,
        }
    }

    pub fn as_finite(&self) -> Option<f64> {
        match self {
            RateCeiling::Finite(x) => Some(*x),
            RateCeiling::Unbounded => None,
        }
    }
}

impl Serialize for RateCeiling {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            RateCeiling::Finite(x) => serializer.serialize_f64(*x),
            RateCeiling::Unbounded => serializer.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for RateCeiling {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Tag(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(x) => Ok(RateCeiling::Finite(x)),
            Raw::Tag(s) if s == "unbounded" => Ok(RateCeiling::Unbounded),
            Raw::Tag(s) => Err(serde::de::Error::custom(format!(
                "expected number or \"unbounded\", got {s:?}"
            ))),
        }
    }
}

/// Closed feasible rate interval `[r_min, r_max]` with its constituents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityBand {
    /// Per-token model cost used to derive the capacity ceiling.
    pub h_bar: f64,
    /// Starvation floor r0.
    pub r_min: f64,
    /// min(speculation ceiling, capacity ceiling).
    pub r_max: f64,
    /// Capacity ceiling eta * C / h_bar.
    pub capacity_ceiling: f64,
    /// Speculation ceiling kappa / L, absent when L = 0.
    pub speculation_ceiling: RateCeiling,
    /// Band endpoints are inclusive; nonempty iff r_min <= r_max.
    pub nonempty: bool,
}

/// Innovation throughput `r * h_bar` demanded by rate `r`, in bits/s.
pub fn innovation_throughput(rate: f64, h_bar: f64) -> f64 {
    rate * h_bar
}

/// 1 if the rate starves the consumer (`r < r0`), else 0.
pub fn starvation_indicator(rate: f64, tol: &ToleranceParams) -> u8 {
    u8::from(rate < tol.r0)
}

/// 1 if speculation overruns tolerance (`r * L > kappa`), else 0.
pub fn speculation_indicator(rate: f64, budget: &LinkBudget, tol: &ToleranceParams) -> u8 {
    u8::from(rate * budget.delay > tol.kappa)
}

/// Computes the feasible band for per-token cost `h_bar` on a link.
pub fn feasibility_band(
    h_bar: f64,
    budget: &LinkBudget,
    tol: &ToleranceParams,
) -> Result<FeasibilityBand, FeasibilityError> {
    budget.validate()?;
    tol.validate()?;
    if !(h_bar > 0.0) || !h_bar.is_finite() {
        return Err(FeasibilityError::DegeneratePredictor(h_bar));
    }
    let capacity_ceiling = budget.innovation_capacity() / h_bar;
    let speculation_ceiling = if budget.delay == 0.0 {
        RateCeiling::Unbounded
    } else {
        RateCeiling::Finite(tol.kappa / budget.delay)
    };
    let r_max = speculation_ceiling.min_with(capacity_ceiling);
    let r_min = tol.r0;
    Ok(FeasibilityBand {
        h_bar,
        r_min,
        r_max,
        capacity_ceiling,
        speculation_ceiling,
        nonempty: r_min <= r_max,
    })
}

/// One row of a sweep over per-token cost and delay grids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub h_bar: f64,
    pub delay: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub capacity_ceiling: f64,
    pub speculation_ceiling: RateCeiling,
    pub nonempty: bool,
}

/// Evaluates the band over the cross product of `h_grid` x `l_grid`,
/// holding capacity, eta, r0 and kappa fixed. Row order follows the grids.
pub fn band_sweep(
    h_grid: &[f64],
    l_grid: &[f64],
    budget: &LinkBudget,
    tol: &ToleranceParams,
) -> Result<Vec<SweepRow>, FeasibilityError> {
    if h_grid.is_empty() || l_grid.is_empty() {
        return Err(FeasibilityError::InvalidGrid("empty grid".into()));
    }
    let mut rows = Vec::with_capacity(h_grid.len() * l_grid.len());
    for &h in h_grid {
        for &l in l_grid {
            let b = LinkBudget {
                delay: l,
                ..*budget
            };
            let band = feasibility_band(h, &b, tol)?;
            rows.push(SweepRow {
                h_bar: h,
                delay: l,
                r_min: band.r_min,
                r_max: band.r_max,
                capacity_ceiling: band.capacity_ceiling,
                speculation_ceiling: band.speculation_ceiling,
                nonempty: band.nonempty,
            });
        }
    }
    Ok(rows)
}

/// Parses a grid given either as a comma list ("1,2,3") or as
/// "start:stop:step" with an inclusive stop.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, FeasibilityError> {
    let bad = |m: String| FeasibilityError::InvalidGrid(m);
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(bad(format!("expected start:stop:step, got {text:?}")));
        }
        let start: f64 = parts[0].trim().parse().map_err(|e| bad(format!("{e}")))?;
        let stop: f64 = parts[1].trim().parse().map_err(|e| bad(format!("{e}")))?;
        let step: f64 = parts[2].trim().parse().map_err(|e| bad(format!("{e}")))?;
        if !(step > 0.0) {
            return Err(bad(format!("step must be positive, got {step}")));
        }
        if stop < start {
            return Err(bad(format!("stop {stop} below start {start}")));
        }
        let mut out = Vec::new();
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        for i in 0..=n {
            out.push(start + step * i as f64);
        }
        Ok(out)
    } else {
        text.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| bad(format!("{e}"))))
            .collect()
    }
}

/// Renders a band as an interval with endpoints rounded to one decimal,
/// preserving endpoints even when the band is empty, e.g. "[5.0, 3.8]".
pub fn format_band_1dp(band: &FeasibilityBand) -> String {
    format!("[{:.1}, {:.1}]", band.r_min, band.r_max)
}

/// Default raw capacity (bits/s) used by the reference configuration.
pub const DEFAULT_CAPACITY: f64 = 50.0;
/// Default payload fraction; together with the capacity this yields an
/// innovation capacity of 40 bits/s.
pub const DEFAULT_ETA: f64 = 0.8;
/// Default one-way delay in seconds.
pub const DEFAULT_DELAY: f64 = 2.0;
/// Default starvation floor in tokens/s.
pub const DEFAULT_R0: f64 = 5.0;
/// Default speculation tolerance in tokens.
pub const DEFAULT_KAPPA: f64 = 20.0;

pub fn default_budget() -> LinkBudget {
    LinkBudget {
        capacity: DEFAULT_CAPACITY,
        eta: DEFAULT_ETA,
        delay: DEFAULT_DELAY,
    }
}

pub fn default_tolerances() -> ToleranceParams {
    ToleranceParams {
        r0: DEFAULT_R0,
        kappa: DEFAULT_KAPPA,
    }
}
