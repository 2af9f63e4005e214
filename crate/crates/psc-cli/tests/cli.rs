//! End-to-end checks of the installed binary: exit codes, output
//! formats, determinism, and agreement semantics.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde_json::{json, Value};

use psc::predictor::MarkovChain;

fn psc_bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psc"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn stdout_ok(args: &[&str]) -> String {
    let out = psc_bin(args);
    assert!(
        out.status.success(),
        "psc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn json_ok(args: &[&str]) -> Value {
    serde_json::from_str(&stdout_ok(args)).expect("json stdout")
}

fn write_json(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn flip_config(tokens: u64) -> Value {
    json!({
        "predictor": {"type": "markov", "order": 1, "V": 2,
                      "parameters": {"transition": [[0.9, 0.1], [0.1, 0.9]],
                                     "initial": [0.5, 0.5]}},
        "source": {"kind": "flip", "p": 0.1, "seed": 7, "tokens": tokens},
        "channel": {"capacity_bps": 20000.0, "latency_s": 0.005, "eta": 0.8,
                    "loss_prob": 0.05, "seed": 11},
        "session": {"w": 64, "h": 48, "k": 8, "rho": 0.25, "r": 100.0,
                    "regime": "reproducible"}
    })
}

// ---- band ------------------------------------------------------------

#[test]
fn band_defaults_reproduce_the_reference_rows() {
    let text = stdout_ok(&["band", "--format", "csv"]);
    let lines: Vec<&str> = text.trim_end().lines().collect();
    assert_eq!(
        lines[0],
        "h_bar,delay,r_min,r_max,capacity_ceiling,speculation_ceiling,nonempty,band_1dp"
    );
    assert_eq!(lines.len(), 4);
    let expect = [
        ("4.68", "8.5", "true", "5.0..8.5"),
        ("10.4", "3.8", "false", "5.0..3.8"),
        ("15.62", "2.6", "false", "5.0..2.6"),
    ];
    for (line, (h, ceiling_1dp, nonempty, band)) in lines[1..].iter().zip(expect) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], h);
        let ceiling: f64 = cols[4].parse().unwrap();
        assert_eq!(format!("{:.1}", ceiling), ceiling_1dp);
        assert_eq!(cols[6], nonempty);
        assert_eq!(cols[7], band);
    }
    // byte-stable on rerun
    assert_eq!(text, stdout_ok(&["band", "--format", "csv"]));
}

#[test]
fn band_depends_on_capacity_only_through_the_usable_product() {
    let default_out = stdout_ok(&["band", "--format", "csv"]);
    let scaled = stdout_ok(&[
        "band", "--format", "csv", "--capacity", "80", "--eta", "0.5",
    ]);
    // 80 * 0.5 = 50 * 0.8, so every derived column matches
    assert_eq!(default_out, scaled);
}

#[test]
fn band_zero_delay_lifts_the_speculation_ceiling() {
    let rows = json_ok(&["band", "--delay", "0", "--h-bar", "4.68"]);
    let row = &rows.as_array().unwrap()[0];
    assert_eq!(row["speculation_ceiling"], json!("unbounded"));
    assert_eq!(row["r_max"], row["capacity_ceiling"]);
    assert_eq!(row["band_1dp"], json!("5.0..8.5"));
}

#[test]
fn band_rejects_a_malformed_grid() {
    let out = psc_bin(&["band", "--delay", "a:b"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

// ---- markov ----------------------------------------------------------

#[test]
fn markov_rates_match_the_closed_forms() {
    let rep = json_ok(&["markov", "--p", "flip:0.1", "--q", "flip:0.2"]);
    let h = |x: f64| -> f64 { -(x * x.log2() + (1.0 - x) * (1.0 - x).log2()) };
    let kl = |p: f64, q: f64| -> f64 {
        p * (p / q).log2() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).log2()
    };
    assert!((rep["entropy_rate_p"].as_f64().unwrap() - h(0.1)).abs() < 1e-12);
    assert!((rep["kl_rate"].as_f64().unwrap() - kl(0.1, 0.2)).abs() < 1e-12);
    assert!(
        (rep["cross_entropy_pq"].as_f64().unwrap() - (h(0.1) + kl(0.1, 0.2))).abs() < 1e-12
    );
    assert!(rep["identity_residual"].as_f64().unwrap().abs() < 1e-14);
}

#[test]
fn markov_without_q_reports_zero_mismatch() {
    let rep = json_ok(&["markov", "--p", "flip:0.1"]);
    assert_eq!(rep["kl_rate"].as_f64().unwrap(), 0.0);
    assert_eq!(
        rep["cross_entropy_pq"].as_f64().unwrap(),
        rep["entropy_rate_p"].as_f64().unwrap()
    );
}

// ---- xent ------------------------------------------------------------

#[test]
fn xent_on_a_uniform_alphabet_is_exactly_two_bits() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    let tokens: Vec<String> = (0..4096u32).map(|i| (i % 4).to_string()).collect();
    std::fs::write(&corpus, tokens.join(" ")).unwrap();
    let rep = json_ok(&[
        "xent",
        "--corpus",
        corpus.to_str().unwrap(),
        "--predictor",
        "uniform:4",
        "--rate",
        "5",
    ]);
    assert_eq!(rep["bits_per_token"].as_f64().unwrap(), 2.0);
    assert_eq!(rep["se_bits_per_token"].as_f64().unwrap(), 0.0);
    assert_eq!(rep["innovation_bps"].as_f64().unwrap(), 10.0);
}

#[test]
fn xent_tracks_the_flip_chain_entropy_rate() {
    let dir = tempfile::tempdir().unwrap();
    let chain = MarkovChain::binary_flip(0.1).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    let sample = chain.sample(&mut rng, 20_000);
    let corpus = dir.path().join("corpus.json");
    std::fs::write(&corpus, serde_json::to_string(&sample).unwrap()).unwrap();
    let rep = json_ok(&[
        "xent",
        "--corpus",
        corpus.to_str().unwrap(),
        "--predictor",
        "flip:0.1",
    ]);
    let mean = rep["bits_per_token"].as_f64().unwrap();
    let se = rep["se_bits_per_token"].as_f64().unwrap();
    assert!(se > 0.0 && se < 0.01);
    assert!(
        (mean - 0.46900).abs() < 3.0 * se + 1e-4,
        "empirical rate {mean} strayed from the oracle"
    );
}

#[test]
fn xent_rejects_an_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("empty.txt");
    std::fs::write(&corpus, "").unwrap();
    let out = psc_bin(&[
        "xent",
        "--corpus",
        corpus.to_str().unwrap(),
        "--predictor",
        "uniform:4",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

// ---- simulate --------------------------------------------------------

#[test]
fn simulate_sends_nothing_when_the_mirror_is_already_right() {
    let dir = tempfile::tempdir().unwrap();
    // greedy generation under this chain emits all zeros, and the
    // source replays exactly that, so no innovation ever flows
    let cfg = json!({
        "predictor": {"type": "markov", "order": 1, "V": 2,
                      "parameters": {"transition": [[0.95, 0.05], [0.5, 0.5]],
                                     "initial": [0.9, 0.1]}},
        "source": {"kind": "corpus", "tokens": vec![0; 300]},
        "channel": {"capacity_bps": 20000.0, "latency_s": 0.005, "eta": 0.8},
        "session": {"w": 64, "h": 48, "k": 8, "rho": 0.25, "r": 100.0,
                    "regime": "reproducible"}
    });
    let cfg_path = write_json(dir.path(), "cfg.json", &cfg);
    let metrics_path = dir.path().join("metrics.json");
    let summary = stdout_ok(&[
        "simulate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--metrics",
        metrics_path.to_str().unwrap(),
    ]);
    assert!(summary.contains("agreement=true"));
    assert!(summary.contains("patches_built=0"));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(&metrics_path).unwrap()).unwrap();
    assert_eq!(m["patches_built"], json!(0));
    assert_eq!(m["innovation_bits"], json!(0));
    assert_eq!(m["committed_tokens"], json!(300));
    assert_eq!(m["state_ids_equal"], json!(true));
}

#[test]
fn simulate_survives_stale_baseline_faults() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = flip_config(400);
    cfg["channel"]["loss_prob"] = json!(0.0);
    cfg["session"] = json!({"w": 256, "h": 256, "k": 64, "rho": 0.5, "r": 100.0,
                            "regime": "reproducible"});
    cfg["fault"] = json!({"stale_baseline_patches": [0, 1, 2]});
    let cfg_path = write_json(dir.path(), "cfg.json", &cfg);
    let metrics_path = dir.path().join("metrics.json");
    let summary = stdout_ok(&[
        "simulate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--metrics",
        metrics_path.to_str().unwrap(),
    ]);
    assert!(summary.contains("agreement=true"));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(&metrics_path).unwrap()).unwrap();
    assert!(m["patches_not_applicable"].as_u64().unwrap() >= 3);
    assert!(m["resyncs_adopted"].as_u64().unwrap() >= 1);
}

#[test]
fn simulate_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = flip_config(500);
    cfg["session"]["regime"] = json!({"nondeterminism-tolerant": {"divergence_prob": 0.02}});
    cfg["policy"] = json!({"rule": "seeded-sampling", "seed": 13, "temperature": 1.0});
    let cfg_path = write_json(dir.path(), "cfg.json", &cfg);
    let run = |tag: &str| -> (String, String, String) {
        let transcript = dir.path().join(format!("t{tag}.jsonl"));
        let metrics = dir.path().join(format!("m{tag}.json"));
        let summary = stdout_ok(&[
            "simulate",
            "--config",
            cfg_path.to_str().unwrap(),
            "--transcript",
            transcript.to_str().unwrap(),
            "--metrics",
            metrics.to_str().unwrap(),
        ]);
        (
            summary,
            std::fs::read_to_string(transcript).unwrap(),
            std::fs::read_to_string(metrics).unwrap(),
        )
    };
    let a = run("a");
    let b = run("b");
    assert!(!a.1.is_empty());
    assert_eq!(a, b);
    // a different seed must change the wire activity
    let reseeded = stdout_ok(&[
        "--seed",
        "99",
        "simulate",
        "--config",
        cfg_path.to_str().unwrap(),
    ]);
    assert!(reseeded.contains("agreement=true"));
    assert_ne!(a.0, reseeded);
}

#[test]
fn simulate_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = flip_config(100);
    cfg["wndow_tokens"] = json!(128);
    let cfg_path = write_json(dir.path(), "cfg.json", &cfg);
    let out = psc_bin(&["simulate", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("wndow_tokens"), "stderr was: {err}");
}

#[test]
fn simulate_signals_a_session_that_cannot_drain() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = flip_config(50);
    // propagation alone exceeds the drain budget, so the final
    // acknowledgements can never land in time
    cfg["channel"] = json!({"capacity_bps": 20000.0, "latency_s": 5.0, "eta": 0.8});
    cfg["drain_timeout_s"] = json!(0.01);
    let cfg_path = write_json(dir.path(), "cfg.json", &cfg);
    let out = psc_bin(&["simulate", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("drained=false"));
}

// ---- sweep -----------------------------------------------------------

#[test]
fn sweep_emits_rows_in_grid_order_and_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_json(dir.path(), "cfg.json", &flip_config(200));
    let args = [
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--rates",
        "50:250:50",
        "--format",
        "csv",
    ];
    let text = stdout_ok(&args);
    let lines: Vec<&str> = text.trim_end().lines().collect();
    // inclusive grid: 50, 100, 150, 200, 250
    assert_eq!(lines.len(), 6, "header and one row per rate: {text}");
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], i.to_string());
        assert_eq!(cols[1], (50 * (i + 1)).to_string());
        assert_eq!(cols[3], "true", "rate {} lost agreement", cols[1]);
    }
    assert_eq!(text, stdout_ok(&args));
}

// ---- output redirection ----------------------------------------------

#[test]
fn out_flag_moves_the_report_off_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let inline = stdout_ok(&["band", "--format", "csv"]);
    let path = dir.path().join("bands.csv");
    let out = psc_bin(&["band", "--format", "csv", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    assert_eq!(std::fs::read_to_string(&path).unwrap(), inline);
}
