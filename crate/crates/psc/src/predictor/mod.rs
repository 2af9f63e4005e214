//! Token-level probabilistic models and exact information accounting.
//!
//! Everything downstream (coding, protocol, simulation) consumes the
//! `Predictor` interface defined here. Predictions used for coding are
//! always floored so that no symbol carries zero mass; the exact-rate
//! computations on Markov chains deliberately skip that floor so closed
//! forms match to analytic precision.

mod markov;

pub use markov::{
    markov_cross_entropy_rate, markov_entropy_rate, markov_kl_rate, MarkovChain,
};

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense token id in `0..V`.
pub type Token = u32;

/// Probability floor applied to every distribution used for coding.
pub const P_FLOOR: f64 = 9.094947017729282e-13; // 2^-40

/// Default add-delta smoothing constant for n-gram training.
pub const DEFAULT_SMOOTHING: f64 = 0.5;

/// Reserved token used to left-pad contexts shorter than a model's order.
pub const PAD_TOKEN: Token = 0;

const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("alphabet must contain at least two tokens, got {0}")]
    AlphabetTooSmall(u32),
    #[error("token {token} outside alphabet of size {size}")]
    InvalidToken { token: Token, size: u32 },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("degenerate model: {0}")]
    DegenerateModel(String),
    #[error("transition matrix is not irreducible")]
    NotIrreducible,
    #[error("cross entropy diverges: Q assigns zero mass where P does not")]
    InfiniteCrossEntropy,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("numerical underflow while accumulating log losses")]
    NumericalUnderflow,
    #[error("stationary solve did not reach residual {residual:e} within {max_iters} iterations")]
    ConvergenceFailure { residual: f64, max_iters: u64 },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("corpus parse error at line {line}: {message}")]
    CorpusParse { line: usize, message: String },
    #[error("predictor spec error: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Finite token alphabet `0..V`, with `V >= 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenAlphabet {
    size: u32,
}

impl TokenAlphabet {
    pub fn new(size: u32) -> Result<Self, PredictorError> {
        if size < 2 {
            return Err(PredictorError::AlphabetTooSmall(size));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn contains(&self, token: Token) -> bool {
        token < self.size
    }

    pub fn check(&self, token: Token) -> Result<(), PredictorError> {
        if self.contains(token) {
            Ok(())
        } else {
            Err(PredictorError::InvalidToken {
                token,
                size: self.size,
            })
        }
    }

    pub fn check_all(&self, tokens: &[Token]) -> Result<(), PredictorError> {
        tokens.iter().try_for_each(|&t| self.check(t))
    }

    /// Bits needed to transmit one token uncoded.
    pub fn raw_bits_per_token(&self) -> u32 {
        32 - (self.size - 1).leading_zeros()
    }
}

/// Probability vector over an alphabet: nonnegative, sums to one within 1e-12.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, PredictorError> {
        if probs.len() < 2 {
            return Err(PredictorError::InvalidDistribution(format!(
                "need at least two entries, got {}",
                probs.len()
            )));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(PredictorError::InvalidDistribution(format!(
                    "entry {i} is {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(PredictorError::InvalidDistribution(format!(
                "mass sums to {sum}, off by more than {SUM_TOLERANCE:e}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(alphabet: TokenAlphabet) -> Self {
        let v = alphabet.size() as usize;
        Self {
            probs: vec![1.0 / v as f64; v],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: Token) -> f64 {
        self.probs[token as usize]
    }

    /// Mixes in enough uniform mass that every entry is at least `P_FLOOR`,
    /// then renormalizes. The uniform distribution is a fixed point.
    pub fn floored(&self) -> Distribution {
        let v = self.probs.len() as f64;
        // Mix target of 2*P_FLOOR leaves headroom so renormalization cannot
        // push the minimum back under P_FLOOR.
        let lambda = v * 2.0 * P_FLOOR;
        let keep = 1.0 - lambda;
        let mut out: Vec<f64> = self
            .probs
            .iter()
            .map(|&p| keep * p + 2.0 * P_FLOOR)
            .collect();
        let sum: f64 = out.iter().sum();
        out.iter_mut().for_each(|p| *p /= sum);
        Distribution { probs: out }
    }

    pub fn entropy_bits(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.log2())
            .sum()
    }

    /// Inverse-CDF sample for a uniform draw `u` in `[0, 1)`.
    pub fn sample(&self, u: f64) -> Token {
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i as Token;
            }
        }
        (self.probs.len() - 1) as Token
    }

    /// Highest-mass token; ties resolve to the lowest id.
    pub fn argmax(&self) -> Token {
        let mut best = 0usize;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        best as Token
    }

    /// Rescales mass by `p^(1/temperature)`. Temperature 1.0 is the identity.
    pub fn with_temperature(&self, temperature: f64) -> Distribution {
        if temperature == 1.0 {
            return self.clone();
        }
        let inv = 1.0 / temperature;
        let mut out: Vec<f64> = self.probs.iter().map(|&p| p.powf(inv)).collect();
        let sum: f64 = out.iter().sum();
        out.iter_mut().for_each(|p| *p /= sum);
        Distribution { probs: out }
    }
}

/// Deterministic token-level model: same context, same distribution.
///
/// `predict` output always sums to one within 1e-12 and every mass is at
/// least `P_FLOOR`; `raw_predict` exposes the unfloored model for exact
/// accounting.
pub trait Predictor {
    fn alphabet(&self) -> TokenAlphabet;

    fn order(&self) -> usize;

    fn raw_predict(&self, context: &[Token]) -> Result<Distribution, PredictorError>;

    fn predict(&self, context: &[Token]) -> Result<Distribution, PredictorError> {
        Ok(self.raw_predict(context)?.floored())
    }

    fn spec(&self) -> PredictorSpec;
}

/// Left-pads with `PAD_TOKEN` and truncates to the trailing `order` tokens.
pub fn coding_context(order: usize, context: &[Token]) -> Vec<Token> {
    let mut out = Vec::with_capacity(order);
    if context.len() >= order {
        out.extend_from_slice(&context[context.len() - order..]);
    } else {
        out.resize(order - context.len(), PAD_TOKEN);
        out.extend_from_slice(context);
    }
    out
}

/// Context-free predictor assigning equal mass to every token.
#[derive(Debug, Clone)]
pub struct UniformPredictor {
    alphabet: TokenAlphabet,
}

impl UniformPredictor {
    pub fn new(alphabet: TokenAlphabet) -> Self {
        Self { alphabet }
    }
}

impl Predictor for UniformPredictor {
    fn alphabet(&self) -> TokenAlphabet {
        self.alphabet
    }

    fn order(&self) -> usize {
        0
    }

    fn raw_predict(&self, context: &[Token]) -> Result<Distribution, PredictorError> {
        self.alphabet.check_all(context)?;
        Ok(Distribution::uniform(self.alphabet))
    }

    fn spec(&self) -> PredictorSpec {
        PredictorSpec::uniform(self.alphabet.size())
    }
}

/// Order-k model with add-delta smoothing:
/// `P(x | ctx) = (count(ctx, x) + delta) / (count(ctx) + delta * V)`.
///
/// Training counts use only contexts fully inside the corpus; prediction
/// left-pads short query contexts with `PAD_TOKEN`.
#[derive(Debug, Clone)]
pub struct NgramPredictor {
    alphabet: TokenAlphabet,
    order: usize,
    delta: f64,
    counts: BTreeMap<Vec<Token>, Vec<u64>>,
}

impl NgramPredictor {
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn context_count(&self) -> usize {
        self.counts.len()
    }
}

pub fn train_ngram(
    corpus: &Corpus,
    order: usize,
    delta: f64,
) -> Result<NgramPredictor, PredictorError> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(PredictorError::Spec(format!(
            "smoothing delta must be finite and nonnegative, got {delta}"
        )));
    }
    let alphabet = corpus.alphabet();
    let v = alphabet.size() as usize;
    let tokens = corpus.tokens();
    let mut counts: BTreeMap<Vec<Token>, Vec<u64>> = BTreeMap::new();
    for t in order..tokens.len() {
        let ctx = tokens[t - order..t].to_vec();
        let row = counts.entry(ctx).or_insert_with(|| vec![0; v]);
        row[tokens[t] as usize] += 1;
    }
    if delta == 0.0 {
        // Without smoothing an unseen context has no conditional at all
        // (0/0); the probability floor cannot repair that, so refuse.
        let universe = (v as u128).checked_pow(order as u32);
        let covered = match universe {
            Some(u) => (counts.len() as u128) == u,
            None => false,
        };
        if !covered {
            return Err(PredictorError::DegenerateModel(format!(
                "delta = 0 with unseen order-{order} contexts over V = {v}"
            )));
        }
    }
    Ok(NgramPredictor {
        alphabet,
        order,
        delta,
        counts,
    })
}

impl Predictor for NgramPredictor {
    fn alphabet(&self) -> TokenAlphabet {
        self.alphabet
    }

    fn order(&self) -> usize {
        self.order
    }

    fn raw_predict(&self, context: &[Token]) -> Result<Distribution, PredictorError> {
        self.alphabet.check_all(context)?;
        let ctx = coding_context(self.order, context);
        let v = self.alphabet.size() as usize;
        let (row, total) = match self.counts.get(&ctx) {
            Some(row) => (Some(row), row.iter().sum::<u64>()),
            None => (None, 0),
        };
        if total == 0 && self.delta == 0.0 {
            return Err(PredictorError::DegenerateModel(format!(
                "unsmoothed model queried on unseen context {ctx:?}"
            )));
        }
        let denom = total as f64 + self.delta * v as f64;
        let probs: Vec<f64> = (0..v)
            .map(|x| {
                let c = row.map_or(0, |r| r[x]);
                (c as f64 + self.delta) / denom
            })
            .collect();
        Distribution::new(probs)
    }

    fn spec(&self) -> PredictorSpec {
        let counts: Vec<(Vec<Token>, Vec<u64>)> = self
            .counts
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        PredictorSpec::ngram(self.alphabet.size(), self.order, self.delta, counts)
    }
}

/// Order-1 predictor reading rows of a Markov transition matrix.
#[derive(Debug, Clone)]
pub struct MarkovPredictor {
    chain: MarkovChain,
}

impl MarkovPredictor {
    pub fn new(chain: MarkovChain) -> Self {
        Self { chain }
    }

    pub fn chain(&self) -> &MarkovChain {
        &self.chain
    }
}

impl Predictor for MarkovPredictor {
    fn alphabet(&self) -> TokenAlphabet {
        self.chain.alphabet()
    }

    fn order(&self) -> usize {
        1
    }

    fn raw_predict(&self, context: &[Token]) -> Result<Distribution, PredictorError> {
        self.alphabet().check_all(context)?;
        let ctx = coding_context(1, context);
        Distribution::new(self.chain.row(ctx[0]).to_vec())
    }

    fn spec(&self) -> PredictorSpec {
        PredictorSpec::markov(self.chain.transition(), self.chain.initial().probs())
    }
}

/// Token sequence over a fixed alphabet.
#[derive(Debug, Clone)]
pub struct Corpus {
    alphabet: TokenAlphabet,
    tokens: Vec<Token>,
}

impl Corpus {
    pub fn new(tokens: Vec<Token>, alphabet: TokenAlphabet) -> Result<Self, PredictorError> {
        alphabet.check_all(&tokens)?;
        Ok(Self { alphabet, tokens })
    }

    /// Reads one nonnegative integer token per line; blank lines are ignored.
    pub fn from_file(path: &Path, alphabet: TokenAlphabet) -> Result<Self, PredictorError> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut tokens = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let token: Token = trimmed.parse().map_err(|e| PredictorError::CorpusParse {
                line: idx + 1,
                message: format!("{e}"),
            })?;
            alphabet.check(token).map_err(|_| PredictorError::CorpusParse {
                line: idx + 1,
                message: format!("token {token} outside alphabet of size {}", alphabet.size()),
            })?;
            tokens.push(token);
        }
        Ok(Self { alphabet, tokens })
    }

    pub fn alphabet(&self) -> TokenAlphabet {
        self.alphabet
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Mean log-loss of a predictor teacher-forced over a corpus:
/// `-(1/n) * sum_t log2 Q(x_t | x_{<t})`, in bits per token.
pub fn empirical_cross_entropy(
    corpus: &Corpus,
    predictor: &dyn Predictor,
) -> Result<f64, PredictorError> {
    if corpus.is_empty() {
        return Err(PredictorError::EmptyCorpus);
    }
    if corpus.alphabet().size() != predictor.alphabet().size() {
        return Err(PredictorError::DimensionMismatch(format!(
            "corpus alphabet {} vs predictor alphabet {}",
            corpus.alphabet().size(),
            predictor.alphabet().size()
        )));
    }
    let tokens = corpus.tokens();
    let mut total_bits = 0.0;
    for t in 0..tokens.len() {
        let dist = predictor.predict(&tokens[..t])?;
        let q = dist.prob(tokens[t]);
        if !(q > 0.0) {
            return Err(PredictorError::NumericalUnderflow);
        }
        total_bits -= q.log2();
    }
    Ok(total_bits / tokens.len() as f64)
}

/// Serializable model description: `{type, order, V, parameters}`.
///
/// The canonical byte form (sorted keys, no whitespace) is what state
/// digests are computed over, so two equal models always digest equally.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PredictorSpec {
    #[serde(rename = "type")]
    pub kind: String,
    pub order: usize,
    #[serde(rename = "V")]
    pub v: u32,
    pub parameters: serde_json::Value,
}

impl PredictorSpec {
    pub fn uniform(v: u32) -> Self {
        Self {
            kind: "uniform".into(),
            order: 0,
            v,
            parameters: serde_json::json!({}),
        }
    }

    pub fn ngram(v: u32, order: usize, delta: f64, counts: Vec<(Vec<Token>, Vec<u64>)>) -> Self {
        let counts_json: Vec<serde_json::Value> = counts
            .into_iter()
            .map(|(ctx, row)| serde_json::json!([ctx, row]))
            .collect();
        Self {
            kind: "ngram".into(),
            order,
            v,
            parameters: serde_json::json!({ "delta": delta, "counts": counts_json }),
        }
    }

    pub fn markov(transition: &[Vec<f64>], initial: &[f64]) -> Self {
        Self {
            kind: "markov".into(),
            order: 1,
            v: transition.len() as u32,
            parameters: serde_json::json!({ "transition": transition, "initial": initial }),
        }
    }

    /// Canonical serialization: JSON with lexicographically sorted keys and
    /// no whitespace. Byte-stable for equal specs.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("spec serializes");
        serde_json::to_vec(&value).expect("value serializes")
    }

    /// Instantiates the described model.
    pub fn build(&self) -> Result<Box<dyn Predictor>, PredictorError> {
        let alphabet = TokenAlphabet::new(self.v)?;
        match self.kind.as_str() {
            "uniform" => Ok(Box::new(UniformPredictor::new(alphabet))),
            "unigram" | "ngram" => {
                let params: NgramParams = serde_json::from_value(self.parameters.clone())
                    .map_err(|e| PredictorError::Spec(format!("ngram parameters: {e}")))?;
                let mut counts = BTreeMap::new();
                for (ctx, row) in params.counts {
                    if ctx.len() != self.order {
                        return Err(PredictorError::Spec(format!(
                            "context {ctx:?} does not match order {}",
                            self.order
                        )));
                    }
                    if row.len() != self.v as usize {
                        return Err(PredictorError::Spec(format!(
                            "count row of length {} does not match V={}",
                            row.len(),
                            self.v
                        )));
                    }
                    alphabet.check_all(&ctx)?;
                    counts.insert(ctx, row);
                }
                Ok(Box::new(NgramPredictor {
                    alphabet,
                    order: self.order,
                    delta: params.delta,
                    counts,
                }))
            }
            "markov" => {
                let params: MarkovParams = serde_json::from_value(self.parameters.clone())
                    .map_err(|e| PredictorError::Spec(format!("markov parameters: {e}")))?;
                let initial = match params.initial {
                    Some(probs) => Some(Distribution::new(probs)?),
                    None => None,
                };
                let chain = MarkovChain::new(params.transition, initial)?;
                Ok(Box::new(MarkovPredictor::new(chain)))
            }
            other => Err(PredictorError::Spec(format!("unknown predictor type {other:?}"))),
        }
    }
}

#[derive(Deserialize)]
struct NgramParams {
    delta: f64,
    counts: Vec<(Vec<Token>, Vec<u64>)>,
}

#[derive(Deserialize)]
struct MarkovParams {
    transition: Vec<Vec<f64>>,
    #[serde(default)]
    initial: Option<Vec<f64>>,
}
