mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use psc::feasibility::{
    band_sweep, parse_grid, LinkBudget, RateCeiling, SweepRow, ToleranceParams, DEFAULT_CAPACITY,
    DEFAULT_ETA, DEFAULT_KAPPA, DEFAULT_R0,
};
use psc::netsim::{run_session, SessionMetrics, SessionOutcome};
use psc::predictor::{
    markov_cross_entropy_rate, markov_entropy_rate, markov_kl_rate, Distribution, MarkovChain,
    PredictorSpec, Token,
};

use config::ExperimentConfig;

/// Predictive-state communication laboratory: information accounting,
/// feasibility bands, and simulated reconciliation sessions.
#[derive(Parser)]
#[command(name = "psc", version, about)]
struct Cli {
    /// Reseed run randomness (sources, channel loss, divergence coins).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output format for tabular reports.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the primary report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Cmd {
    /// Score a token corpus under a predictor, in bits per token.
    Xent {
        /// Corpus file: JSON array of tokens, or whitespace-separated
        /// integers.
        #[arg(long)]
        corpus: PathBuf,
        /// Predictor: "uniform:V", "flip:p", or a predictor JSON file.
        #[arg(long)]
        predictor: String,
        /// Also report the innovation throughput r * h at this rate.
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Feasible token-rate band per link budget and tolerances.
    Band {
        /// Per-token cost grid: comma list or start:stop:step.
        #[arg(long = "h-bar", default_value = "4.68,10.40,15.62")]
        h_bar: String,
        /// Raw channel capacity C in bits/s.
        #[arg(long, default_value_t = DEFAULT_CAPACITY)]
        capacity: f64,
        /// Usable fraction of capacity left for innovations.
        #[arg(long, default_value_t = DEFAULT_ETA)]
        eta: f64,
        /// Round-trip delay grid in seconds; 0 lifts the ceiling.
        #[arg(long, default_value = "2.0")]
        delay: String,
        /// Starvation floor in tokens/s.
        #[arg(long, default_value_t = DEFAULT_R0)]
        r0: f64,
        /// Speculation tolerance in tokens.
        #[arg(long, default_value_t = DEFAULT_KAPPA)]
        kappa: f64,
    },
    /// Entropy rate of P, cross-entropy rate of P under Q, and the KL
    /// mismatch penalty, all in bits/token.
    Markov {
        /// True chain: "flip:p" or a JSON file with transition/initial.
        #[arg(long)]
        p: String,
        /// Model chain; defaults to P itself (zero penalty).
        #[arg(long)]
        q: Option<String>,
    },
    /// Run one reconciliation session from a config file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Wire transcript destination (JSON lines); overrides config.
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Metrics destination (JSON); overrides config.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run the configured session across a token-rate grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Token rates: comma list or start:stop:step.
        #[arg(long)]
        rates: String,
    },
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

fn invalid<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Xent {
            corpus,
            predictor,
            rate,
        } => cmd_xent(&cli, corpus, predictor, *rate),
        Cmd::Band {
            h_bar,
            capacity,
            eta,
            delay,
            r0,
            kappa,
        } => cmd_band(&cli, h_bar, *capacity, *eta, delay, *r0, *kappa),
        Cmd::Markov { p, q } => cmd_markov(&cli, p, q.as_deref()),
        Cmd::Simulate {
            config,
            transcript,
            metrics,
        } => cmd_simulate(&cli, config, transcript.as_deref(), metrics.as_deref()),
        Cmd::Sweep { config, rates } => cmd_sweep(&cli, config, rates),
    }
}

/// Writes the report to --out or stdout.
fn emit(cli: &Cli, text: &str) -> Result<(), CliError> {
    match &cli.out {
        Some(path) => fs::write(path, text).map_err(runtime),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ---- xent ----------------------------------------------------------

#[derive(Serialize)]
struct XentReport {
    tokens: u64,
    bits_per_token: f64,
    se_bits_per_token: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    innovation_bps: Option<f64>,
}

fn read_corpus(path: &Path) -> Result<Vec<Token>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| invalid(format!("cannot read corpus {}: {e}", path.display())))?;
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(invalid)
    } else {
        trimmed
            .split_whitespace()
            .map(|w| w.parse::<Token>().map_err(invalid))
            .collect()
    }
}

/// "uniform:V", "flip:p", or a path to a predictor JSON file.
fn parse_predictor_spec(text: &str) -> Result<PredictorSpec, CliError> {
    if let Some(v) = text.strip_prefix("uniform:") {
        let v: u32 = v.parse().map_err(invalid)?;
        return Ok(PredictorSpec::uniform(v));
    }
    if let Some(p) = text.strip_prefix("flip:") {
        let p: f64 = p.parse().map_err(invalid)?;
        let chain = MarkovChain::binary_flip(p).map_err(invalid)?;
        return Ok(PredictorSpec::markov(
            chain.transition(),
            chain.initial().probs(),
        ));
    }
    let body = fs::read_to_string(text)
        .map_err(|e| invalid(format!("cannot read predictor {text}: {e}")))?;
    serde_json::from_str(&body).map_err(invalid)
}

fn cmd_xent(
    cli: &Cli,
    corpus_path: &Path,
    predictor_text: &str,
    rate: Option<f64>,
) -> Result<(), CliError> {
    let corpus = read_corpus(corpus_path)?;
    if corpus.is_empty() {
        return Err(CliError::Validation("corpus is empty".to_string()));
    }
    let spec = parse_predictor_spec(predictor_text)?;
    let predictor = spec.build().map_err(invalid)?;
    let n = corpus.len();
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for i in 0..n {
        let dist = predictor.predict(&corpus[..i]).map_err(runtime)?;
        let p = dist.prob(corpus[i]);
        let cost = -p.log2();
        sum += cost;
        sumsq += cost * cost;
    }
    let mean = sum / n as f64;
    let var = (sumsq / n as f64 - mean * mean).max(0.0);
    let se = (var / n as f64).sqrt();
    let report = XentReport {
        tokens: n as u64,
        bits_per_token: mean,
        se_bits_per_token: se,
        rate,
        innovation_bps: rate.map(|r| r * mean),
    };
    let text = match cli.format {
        Format::Json => format!("{}\n", serde_json::to_string_pretty(&report).unwrap()),
        Format::Csv => {
            let mut s = String::from("tokens,bits_per_token,se_bits_per_token");
            if rate.is_some() {
                s.push_str(",rate,innovation_bps");
            }
            s.push('\n');
            s.push_str(&format!(
                "{},{},{}",
                report.tokens, report.bits_per_token, report.se_bits_per_token
            ));
            if let (Some(r), Some(b)) = (report.rate, report.innovation_bps) {
                s.push_str(&format!(",{r},{b}"));
            }
            s.push('\n');
            s
        }
    };
    emit(cli, &text)
}

// ---- band ----------------------------------------------------------

#[derive(Serialize)]
struct BandRow {
    h_bar: f64,
    delay: f64,
    r_min: f64,
    r_max: f64,
    capacity_ceiling: f64,
    speculation_ceiling: RateCeiling,
    nonempty: bool,
    band_1dp: String,
}

fn band_row(sr: &SweepRow) -> BandRow {
    BandRow {
        h_bar: sr.h_bar,
        delay: sr.delay,
        r_min: sr.r_min,
        r_max: sr.r_max,
        capacity_ceiling: sr.capacity_ceiling,
        speculation_ceiling: sr.speculation_ceiling,
        nonempty: sr.nonempty,
        band_1dp: format!("{:.1}..{:.1}", sr.r_min, sr.r_max),
    }
}

fn ceiling_text(c: &RateCeiling) -> String {
    match c.as_finite() {
        Some(x) => x.to_string(),
        None => "unbounded".to_string(),
    }
}

fn cmd_band(
    cli: &Cli,
    h_text: &str,
    capacity: f64,
    eta: f64,
    delay_text: &str,
    r0: f64,
    kappa: f64,
) -> Result<(), CliError> {
    let h_grid = parse_grid(h_text).map_err(invalid)?;
    let l_grid = parse_grid(delay_text).map_err(invalid)?;
    let tol = ToleranceParams::new(r0, kappa).map_err(invalid)?;
    // delay is swept per row; the budget carries capacity and eta
    let budget = LinkBudget::new(capacity, eta, l_grid[0]).map_err(invalid)?;
    let rows: Vec<BandRow> = band_sweep(&h_grid, &l_grid, &budget, &tol)
        .map_err(invalid)?
        .iter()
        .map(band_row)
        .collect();
    let text = match cli.format {
        Format::Json => format!("{}\n", serde_json::to_string_pretty(&rows).unwrap()),
        Format::Csv => {
            let mut s = String::from(
                "h_bar,delay,r_min,r_max,capacity_ceiling,speculation_ceiling,nonempty,band_1dp\n",
            );
            for r in &rows {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.h_bar,
                    r.delay,
                    r.r_min,
                    r.r_max,
                    r.capacity_ceiling,
                    ceiling_text(&r.speculation_ceiling),
                    r.nonempty,
                    r.band_1dp
                ));
            }
            s
        }
    };
    emit(cli, &text)
}

// ---- markov --------------------------------------------------------

#[derive(Serialize)]
struct MarkovReport {
    entropy_rate_p: f64,
    cross_entropy_pq: f64,
    kl_rate: f64,
    /// H(P,Q) - H(P) - KL; zero up to float noise by construction.
    identity_residual: f64,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainFile {
    transition: Vec<Vec<f64>>,
    #[serde(default)]
    initial: Option<Vec<f64>>,
}

/// "flip:p" or a path to a JSON file with a transition matrix.
fn parse_chain(text: &str) -> Result<MarkovChain, CliError> {
    if let Some(p) = text.strip_prefix("flip:") {
        let p: f64 = p.parse().map_err(invalid)?;
        return MarkovChain::binary_flip(p).map_err(invalid);
    }
    let body = fs::read_to_string(text)
        .map_err(|e| invalid(format!("cannot read chain {text}: {e}")))?;
    let file: ChainFile = serde_json::from_str(&body).map_err(invalid)?;
    let initial = match file.initial {
        Some(probs) => Some(Distribution::new(probs).map_err(invalid)?),
        None => None,
    };
    MarkovChain::new(file.transition, initial).map_err(invalid)
}

fn cmd_markov(cli: &Cli, p_text: &str, q_text: Option<&str>) -> Result<(), CliError> {
    let p = parse_chain(p_text)?;
    let q = match q_text {
        Some(t) => parse_chain(t)?,
        None => p.clone(),
    };
    let h_p = markov_entropy_rate(&p).map_err(invalid)?;
    let h_pq = markov_cross_entropy_rate(&p, &q).map_err(invalid)?;
    let kl = markov_kl_rate(&p, &q).map_err(invalid)?;
    let report = MarkovReport {
        entropy_rate_p: h_p,
        cross_entropy_pq: h_pq,
        kl_rate: kl,
        identity_residual: h_pq - h_p - kl,
    };
    let text = match cli.format {
        Format::Json => format!("{}\n", serde_json::to_string_pretty(&report).unwrap()),
        Format::Csv => format!(
            "entropy_rate_p,cross_entropy_pq,kl_rate,identity_residual\n{},{},{},{}\n",
            report.entropy_rate_p, report.cross_entropy_pq, report.kl_rate,
            report.identity_residual
        ),
    };
    emit(cli, &text)
}

// ---- simulate ------------------------------------------------------

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let body = fs::read_to_string(path)
        .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&body).map_err(invalid)
}

fn summary_line(m: &SessionMetrics) -> String {
    let agreement = m.committed_matches_realized && m.state_ids_equal;
    format!(
        "agreement={} drained={} committed={}/{} patches_built={} patches_applied={} \
         not_applicable={} tampered={} resyncs={} rewinds={} max_rollback={} max_speculation={} \
         cp={} backlog_growth={} duration_s={:.3}",
        agreement,
        m.drained,
        m.committed_tokens,
        m.source_tokens,
        m.patches_built,
        m.patches_applied,
        m.patches_not_applicable,
        m.patches_tampered,
        m.resyncs_adopted,
        m.rewinds,
        m.max_rollback_depth,
        m.max_speculation_depth,
        m.mean_correction_pressure
            .map_or_else(|| "-".to_string(), |cp| format!("{cp:.4}")),
        m.backlog_growth,
        m.duration_us as f64 / 1e6
    )
}

fn write_outputs(
    outcome: &SessionOutcome,
    transcript: Option<&Path>,
    metrics: Option<&Path>,
) -> Result<(), CliError> {
    if let Some(path) = transcript {
        let mut text = String::new();
        for entry in &outcome.transcript {
            text.push_str(&serde_json::to_string(entry).unwrap());
            text.push('\n');
        }
        fs::write(path, text).map_err(runtime)?;
    }
    if let Some(path) = metrics {
        let text = format!("{}\n", serde_json::to_string_pretty(&outcome.metrics).unwrap());
        fs::write(path, text).map_err(runtime)?;
    }
    Ok(())
}

fn cmd_simulate(
    cli: &Cli,
    config_path: &Path,
    transcript: Option<&Path>,
    metrics: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let setup = cfg.to_setup(cli.seed).map_err(CliError::Validation)?;
    let outcome = run_session(&setup).map_err(invalid)?;
    let transcript_path = transcript.or(cfg.output.transcript.as_deref());
    let metrics_path = metrics.or(cfg.output.metrics.as_deref());
    write_outputs(&outcome, transcript_path, metrics_path)?;
    println!("{}", summary_line(&outcome.metrics));
    let m = &outcome.metrics;
    if m.committed_matches_realized && m.state_ids_equal && m.drained {
        Ok(())
    } else {
        Err(CliError::Runtime(
            "session ended without full agreement".to_string(),
        ))
    }
}

// ---- sweep ---------------------------------------------------------

#[derive(Serialize)]
struct SweepRunRow {
    index: usize,
    r: f64,
    drained: bool,
    agreement: bool,
    backlog_growth: bool,
    mean_cp: Option<f64>,
    max_rollback_depth: u64,
    max_speculation_depth: u64,
    patches_built: u64,
    resyncs: u64,
    forward_bits: u64,
    committed_tokens: u64,
    duration_s: f64,
}

fn cmd_sweep(cli: &Cli, config_path: &Path, rates_text: &str) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let rates = parse_grid(rates_text).map_err(invalid)?;
    let base = cfg.to_setup(cli.seed).map_err(CliError::Validation)?;
    // sessions are independent; fan out and merge in grid order
    let results: Vec<Result<SessionOutcome, String>> = std::thread::scope(|scope| {
        let handles: Vec<_> = rates
            .iter()
            .map(|&r| {
                let mut setup = base.clone();
                scope.spawn(move || {
                    setup.config.r = r;
                    run_session(&setup).map_err(|e| e.to_string())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("session worker panicked"))
            .collect()
    });
    let mut rows = Vec::with_capacity(rates.len());
    for (index, (r, res)) in rates.iter().zip(results).enumerate() {
        let outcome = res.map_err(CliError::Runtime)?;
        let m = outcome.metrics;
        rows.push(SweepRunRow {
            index,
            r: *r,
            drained: m.drained,
            agreement: m.committed_matches_realized && m.state_ids_equal,
            backlog_growth: m.backlog_growth,
            mean_cp: m.mean_correction_pressure,
            max_rollback_depth: m.max_rollback_depth,
            max_speculation_depth: m.max_speculation_depth,
            patches_built: m.patches_built,
            resyncs: m.resyncs_adopted,
            forward_bits: m.forward_bits,
            committed_tokens: m.committed_tokens,
            duration_s: m.duration_us as f64 / 1e6,
        });
    }
    let text = match cli.format {
        Format::Json => format!("{}\n", serde_json::to_string_pretty(&rows).unwrap()),
        Format::Csv => {
            let mut s = String::from(
                "index,r,drained,agreement,backlog_growth,mean_cp,max_rollback_depth,\
                 max_speculation_depth,patches_built,resyncs,forward_bits,committed_tokens,\
                 duration_s\n",
            );
            for row in &rows {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    row.index,
                    row.r,
                    row.drained,
                    row.agreement,
                    row.backlog_growth,
                    row.mean_cp.map_or_else(|| "-".to_string(), |c| c.to_string()),
                    row.max_rollback_depth,
                    row.max_speculation_depth,
                    row.patches_built,
                    row.resyncs,
                    row.forward_bits,
                    row.committed_tokens,
                    row.duration_s
                ));
            }
            s
        }
    };
    emit(cli, &text)
}
