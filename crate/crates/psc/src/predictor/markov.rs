//! Finite Markov chains with exact entropy-rate accounting.
//!
//! For an irreducible chain P with stationary distribution pi, the entropy
//! rate is sum_s pi(s) * H(P(.|s)). Scoring P's rows under another chain Q
//! gives the cross-entropy rate sum_s pi(s) sum_x P(x|s) * -log2 Q(x|s),
//! and the divergence rate is the difference of the two.

use rand::Rng;

use super::{Distribution, PredictorError, Token, TokenAlphabet};

const ROW_SUM_TOLERANCE: f64 = 1e-12;
const STATIONARY_RESIDUAL: f64 = 1e-12;
const STATIONARY_MAX_ITERS: u64 = 1_000_000;

/// Row-stochastic transition matrix plus an initial distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    transition: Vec<Vec<f64>>,
    initial: Distribution,
}

impl MarkovChain {
    /// Validates squareness and row sums. `initial` defaults to uniform.
    pub fn new(
        transition: Vec<Vec<f64>>,
        initial: Option<Distribution>,
    ) -> Result<Self, PredictorError> {
        let v = transition.len();
        if v < 2 {
            return Err(PredictorError::AlphabetTooSmall(v as u32));
        }
        for (s, row) in transition.iter().enumerate() {
            if row.len() != v {
                return Err(PredictorError::DimensionMismatch(format!(
                    "row {s} has length {} in a {v}-state chain",
                    row.len()
                )));
            }
            let mut sum = 0.0;
            for (x, &p) in row.iter().enumerate() {
                if !p.is_finite() || p < 0.0 {
                    return Err(PredictorError::InvalidDistribution(format!(
                        "transition[{s}][{x}] is {p}"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(PredictorError::InvalidDistribution(format!(
                    "row {s} sums to {sum}"
                )));
            }
        }
        let alphabet = TokenAlphabet::new(v as u32)?;
        let initial = match initial {
            Some(d) => {
                if d.len() != v {
                    return Err(PredictorError::DimensionMismatch(format!(
                        "initial distribution length {} in a {v}-state chain",
                        d.len()
                    )));
                }
                d
            }
            None => Distribution::uniform(alphabet),
        };
        Ok(Self {
            transition,
            initial,
        })
    }

    /// Symmetric binary chain that flips state with probability `p`.
    pub fn binary_flip(p: f64) -> Result<Self, PredictorError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(PredictorError::InvalidDistribution(format!(
                "flip probability {p} outside [0, 1]"
            )));
        }
        Self::new(vec![vec![1.0 - p, p], vec![p, 1.0 - p]], None)
    }

    pub fn alphabet(&self) -> TokenAlphabet {
        TokenAlphabet::new(self.transition.len() as u32).expect("validated at construction")
    }

    pub fn size(&self) -> usize {
        self.transition.len()
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn row(&self, state: Token) -> &[f64] {
        &self.transition[state as usize]
    }

    pub fn initial(&self) -> &Distribution {
        &self.initial
    }

    /// Strong connectivity of the positive-probability support graph.
    pub fn is_irreducible(&self) -> bool {
        let v = self.size();
        let reach = |forward: bool| -> Vec<bool> {
            let mut seen = vec![false; v];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(s) = stack.pop() {
                for t in 0..v {
                    let edge = if forward {
                        self.transition[s][t] > 0.0
                    } else {
                        self.transition[t][s] > 0.0
                    };
                    if edge && !seen[t] {
                        seen[t] = true;
                        stack.push(t);
                    }
                }
            }
            seen
        };
        reach(true).iter().all(|&b| b) && reach(false).iter().all(|&b| b)
    }

    /// Stationary distribution by damped power iteration.
    ///
    /// Iterates pi <- pi * (P + I)/2, which shares fixed points with P and
    /// converges for every irreducible chain (periodic ones included).
    /// The residual check `max_x |(pi P)(x) - pi(x)| <= 1e-12` runs against
    /// the undamped matrix.
    pub fn stationary(&self) -> Result<Vec<f64>, PredictorError> {
        if !self.is_irreducible() {
            return Err(PredictorError::NotIrreducible);
        }
        let v = self.size();
        let mut pi = vec![1.0 / v as f64; v];
        let mut next = vec![0.0; v];
        for _ in 0..STATIONARY_MAX_ITERS {
            // next = pi * P
            next.iter_mut().for_each(|x| *x = 0.0);
            for s in 0..v {
                let ps = pi[s];
                if ps == 0.0 {
                    continue;
                }
                for x in 0..v {
                    next[x] += ps * self.transition[s][x];
                }
            }
            let residual = pi
                .iter()
                .zip(next.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if residual <= STATIONARY_RESIDUAL {
                let sum: f64 = pi.iter().sum();
                pi.iter_mut().for_each(|x| *x /= sum);
                return Ok(pi);
            }
            for x in 0..v {
                pi[x] = 0.5 * (pi[x] + next[x]);
            }
        }
        Err(PredictorError::ConvergenceFailure {
            residual: STATIONARY_RESIDUAL,
            max_iters: STATIONARY_MAX_ITERS,
        })
    }

    /// Samples `n` tokens; the first is drawn from the initial distribution.
    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<Token> {
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return out;
        }
        let mut state = self.initial.sample(rng.gen::<f64>());
        out.push(state);
        for _ in 1..n {
            let u: f64 = rng.gen();
            let row = &self.transition[state as usize];
            let mut acc = 0.0;
            let mut next = (self.size() - 1) as Token;
            for (x, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    next = x as Token;
                    break;
                }
            }
            state = next;
            out.push(state);
        }
        out
    }
}

fn check_same_size(p: &MarkovChain, q: &MarkovChain) -> Result<(), PredictorError> {
    if p.size() != q.size() {
        return Err(PredictorError::DimensionMismatch(format!(
            "chains over {} vs {} states",
            p.size(),
            q.size()
        )));
    }
    Ok(())
}

/// Entropy rate of an irreducible chain, in bits per token.
pub fn markov_entropy_rate(p: &MarkovChain) -> Result<f64, PredictorError> {
    let pi = p.stationary()?;
    let mut h = 0.0;
    for s in 0..p.size() {
        let mut hs = 0.0;
        for &prob in p.row(s as Token) {
            if prob > 0.0 {
                hs -= prob * prob.log2();
            }
        }
        h += pi[s] * hs;
    }
    Ok(h)
}

/// Cross-entropy rate of coding P's output with Q's conditionals.
///
/// Requires Q(x|s) > 0 wherever P(x|s) > 0 on states with stationary mass.
pub fn markov_cross_entropy_rate(
    p: &MarkovChain,
    q: &MarkovChain,
) -> Result<f64, PredictorError> {
    check_same_size(p, q)?;
    let pi = p.stationary()?;
    let mut h = 0.0;
    for s in 0..p.size() {
        if pi[s] == 0.0 {
            continue;
        }
        for x in 0..p.size() {
            let ps = p.transition()[s][x];
            if ps == 0.0 {
                continue;
            }
            let qs = q.transition()[s][x];
            if qs <= 0.0 {
                return Err(PredictorError::InfiniteCrossEntropy);
            }
            h -= pi[s] * ps * qs.log2();
        }
    }
    Ok(h)
}

/// Divergence rate D(P || Q) in bits per token; always nonnegative.
pub fn markov_kl_rate(p: &MarkovChain, q: &MarkovChain) -> Result<f64, PredictorError> {
    check_same_size(p, q)?;
    let pi = p.stationary()?;
    let mut d = 0.0;
    for s in 0..p.size() {
        if pi[s] == 0.0 {
            continue;
        }
        for x in 0..p.size() {
            let ps = p.transition()[s][x];
            if ps == 0.0 {
                continue;
            }
            let qs = q.transition()[s][x];
            if qs <= 0.0 {
                return Err(PredictorError::InfiniteCrossEntropy);
            }
            d += pi[s] * ps * (ps / qs).log2();
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn assert_close(actual: f64, expected: f64, tol: f64) {
        assert!(
            (actual - expected).abs() <= tol,
            "expected {expected} +- {tol}, got {actual}"
        );
    }

    #[test]
    fn rejects_malformed_matrices() {
        assert!(MarkovChain::new(vec![vec![1.0]], None).is_err());
        assert!(MarkovChain::new(vec![vec![0.5, 0.5], vec![1.0]], None).is_err());
        assert!(MarkovChain::new(vec![vec![0.6, 0.5], vec![0.5, 0.5]], None).is_err());
        assert!(MarkovChain::new(vec![vec![-0.1, 1.1], vec![0.5, 0.5]], None).is_err());
    }

    #[test]
    fn irreducibility_detection() {
        let reducible = MarkovChain::new(vec![vec![1.0, 0.0], vec![0.5, 0.5]], None).unwrap();
        assert!(!reducible.is_irreducible());
        assert!(matches!(
            reducible.stationary().unwrap_err(),
            PredictorError::NotIrreducible
        ));
        let flip = MarkovChain::binary_flip(0.1).unwrap();
        assert!(flip.is_irreducible());
    }

    #[test]
    fn stationary_of_symmetric_flip_is_uniform() {
        let chain = MarkovChain::binary_flip(0.3).unwrap();
        let pi = chain.stationary().unwrap();
        assert_close(pi[0], 0.5, 1e-10);
        assert_close(pi[1], 0.5, 1e-10);
    }

    #[test]
    fn stationary_handles_periodic_chains() {
        // Deterministic 3-cycle: stationary is uniform even though the
        // chain is periodic.
        let chain = MarkovChain::new(
            vec![
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![1.0, 0.0, 0.0],
            ],
            None,
        )
        .unwrap();
        let pi = chain.stationary().unwrap();
        for &x in &pi {
            assert_close(x, 1.0 / 3.0, 1e-10);
        }
        assert_close(markov_entropy_rate(&chain).unwrap(), 0.0, 1e-12);
    }

    #[test]
    fn entropy_rate_matches_binary_entropy() {
        let h01 = markov_entropy_rate(&MarkovChain::binary_flip(0.1).unwrap()).unwrap();
        assert_close(h01, 0.46900, 1e-4);
        let h05 = markov_entropy_rate(&MarkovChain::binary_flip(0.5).unwrap()).unwrap();
        assert_close(h05, 1.0, 1e-12);
    }

    #[test]
    fn cross_entropy_and_kl_match_closed_forms() {
        let p = MarkovChain::binary_flip(0.1).unwrap();
        let q = MarkovChain::binary_flip(0.2).unwrap();
        let hpq = markov_cross_entropy_rate(&p, &q).unwrap();
        assert_close(hpq, 0.52193, 1e-4);
        let kl = markov_kl_rate(&p, &q).unwrap();
        assert_close(kl, 0.05293, 1e-4);
    }

    #[test]
    fn cross_entropy_decomposition_is_tight() {
        let p = MarkovChain::binary_flip(0.1).unwrap();
        let q = MarkovChain::binary_flip(0.2).unwrap();
        let hpq = markov_cross_entropy_rate(&p, &q).unwrap();
        let hp = markov_entropy_rate(&p).unwrap();
        let kl = markov_kl_rate(&p, &q).unwrap();
        assert!((hpq - hp - kl).abs() < 1e-10);
    }

    #[test]
    fn absolute_continuity_is_required() {
        let p = MarkovChain::binary_flip(0.1).unwrap();
        let q = MarkovChain::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], None).unwrap();
        assert!(matches!(
            markov_cross_entropy_rate(&p, &q).unwrap_err(),
            PredictorError::InfiniteCrossEntropy
        ));
    }

    #[test]
    fn sampled_frequencies_track_stationary_mass() {
        let chain = MarkovChain::new(
            vec![vec![0.8, 0.2, 0.0], vec![0.1, 0.7, 0.2], vec![0.3, 0.0, 0.7]],
            None,
        )
        .unwrap();
        let pi = chain.stationary().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let sample = chain.sample(&mut rng, 200_000);
        let mut counts = [0usize; 3];
        for &t in &sample {
            counts[t as usize] += 1;
        }
        for s in 0..3 {
            let freq = counts[s] as f64 / sample.len() as f64;
            assert_close(freq, pi[s], 0.01);
        }
    }

    #[test]
    fn monte_carlo_cross_entropy_agrees_with_exact_rate() {
        // Empirical mean of -log2 Q(x_t | x_{t-1}) over a 1e5-token sample
        // from P stays within 3 standard errors of the exact rate.
        use crate::predictor::{empirical_cross_entropy, Corpus, MarkovPredictor};
        let p = MarkovChain::binary_flip(0.1).unwrap();
        let q = MarkovChain::binary_flip(0.2).unwrap();
        let exact = markov_cross_entropy_rate(&p, &q).unwrap();

        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let n = 100_000usize;
        let tokens = p.sample(&mut rng, n);
        let corpus = Corpus::new(tokens.clone(), p.alphabet()).unwrap();
        let pred = MarkovPredictor::new(q.clone());
        let mean = empirical_cross_entropy(&corpus, &pred).unwrap();

        let mut sq = 0.0;
        for t in 1..n {
            let bits = -q.transition()[tokens[t - 1] as usize][tokens[t] as usize].log2();
            sq += (bits - exact) * (bits - exact);
        }
        let se = (sq / ((n - 1) as f64)).sqrt() / (n as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 3.0 * se + 1e-3,
            "mean {mean} vs exact {exact} (3 SE = {})",
            3.0 * se
        );
    }
}
