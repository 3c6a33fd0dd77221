use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stlstm::cells::Variant;
use stlstm::checkpoint::Checkpoint;
use stlstm::data::Corpus;
use stlstm::eval::MetricsRecord;
use stlstm::model::{ModelConfig, ModelParams};

fn stlstm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stlstm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = stlstm(args);
    assert!(
        out.status.success(),
        "stlstm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn prepare_synth(dir: &Path, users: &str, pois: &str, seed: &str) -> PathBuf {
    ok(&[
        "prepare",
        "--synth",
        "--users",
        users,
        "--pois",
        pois,
        "--seed",
        seed,
        "--out-dir",
        p(dir),
    ]);
    dir.join("corpus.bin")
}

fn records(path: &Path) -> Vec<MetricsRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn prepare_synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = prepare_synth(&tmp.path().join("a"), "50", "40", "7");
    let b = prepare_synth(&tmp.path().join("b"), "50", "40", "7");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(tmp.path().join("a/stats.json")).unwrap(),
        fs::read(tmp.path().join("b/stats.json")).unwrap()
    );
    let c = prepare_synth(&tmp.path().join("c"), "50", "40", "8");
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn prepare_from_snap_file_reports_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = String::new();
    // 12 users × 12 check-ins over 4 POIs, plus one sparse user and a bad line
    for u in 0..12 {
        for k in 0..12 {
            text.push_str(&format!(
                "{u}\t2010-10-{:02}T{:02}:00:00Z\t30.{k}\t-97.7\t{}\n",
                1 + k,
                u % 24,
                100 + k % 4
            ));
        }
    }
    text.push_str("99\t2010-10-01T00:00:00Z\t30.0\t-97.7\t100\n");
    text.push_str("broken line\n");
    let input = tmp.path().join("checkins.txt");
    fs::write(&input, text).unwrap();
    let out_dir = tmp.path().join("prep");
    let stdout = ok(&[
        "prepare",
        "--input",
        p(&input),
        "--format",
        "snap",
        "--out-dir",
        p(&out_dir),
    ]);
    assert!(stdout.contains("raw: 13 users, 4 POIs, 145 check-ins"), "{stdout}");
    assert!(stdout.contains("cleaned: 12 users, 4 POIs, 144 check-ins"), "{stdout}");
    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["malformed_lines"], 1);
    let corpus = Corpus::load(&out_dir.join("corpus.bin")).unwrap();
    assert_eq!(corpus.users.len(), 12);
    assert!(corpus.users.iter().all(|u| u.n_train == 9 && u.n_test() == 3));
}

#[test]
fn prepare_missing_file_fails_without_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("prep");
    let out = stlstm(&[
        "prepare",
        "--input",
        "/nonexistent/checkins.txt",
        "--out-dir",
        p(&out_dir),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/checkins.txt"));
    assert!(!out_dir.join("corpus.bin").exists());
}

fn small_train(corpus: &Path, out: &Path, epochs: &str, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--corpus",
        p(corpus),
        "--cell-size",
        "8",
        "--embed-size",
        "8",
        "--epochs",
        epochs,
        "--lr",
        "0.01",
        "--seed",
        "3",
        "--out-dir",
        p(out),
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn train_is_bitwise_reproducible_and_writes_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = prepare_synth(&tmp.path().join("data"), "20", "24", "1");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_train(&corpus, &a, "20", &[]);
    small_train(&corpus, &b, "20", &[]);
    for f in [
        "final.ckpt",
        "last.ckpt",
        "metrics.jsonl",
        "metrics.txt",
        "train_log.jsonl",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 3);
    let hash = Corpus::load(&corpus).unwrap().content_hash();
    assert_eq!(cfg["corpus_hash"], hash.as_str());
    assert_eq!(cfg["train"]["batch_size"], 10);

    // epoch loss falls between the first and the 20th epoch
    let log: Vec<serde_json::Value> = fs::read_to_string(a.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log.len(), 20);
    assert!(log[19]["mean_loss"].as_f64().unwrap() < log[0]["mean_loss"].as_f64().unwrap());
}

#[test]
fn resume_continues_to_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = prepare_synth(&tmp.path().join("data"), "12", "18", "2");
    let full = tmp.path().join("full");
    small_train(&corpus, &full, "20", &[]);
    let part = tmp.path().join("part");
    small_train(&corpus, &part, "12", &[]);
    let resumed = tmp.path().join("resumed");
    let ck = part.join("last.ckpt");
    small_train(&corpus, &resumed, "20", &["--resume", p(&ck)]);
    assert_eq!(
        fs::read(full.join("final.ckpt")).unwrap(),
        fs::read(resumed.join("final.ckpt")).unwrap()
    );
}

#[test]
fn distance_only_ablation_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = prepare_synth(&tmp.path().join("data"), "10", "12", "4");
    let run = tmp.path().join("run");
    small_train(&corpus, &run, "2", &["--variant", "st-clstm", "--fix-t1", "--fix-t2"]);
    let recs = records(&run.join("metrics.jsonl"));
    assert_eq!(recs[0].ablation, "distance-only");
    let ck = Checkpoint::load(&run.join("final.ckpt")).unwrap();
    assert!(ck.config.ablation.fix_t1 && ck.config.ablation.fix_t2);
    assert!(!ck.config.ablation.fix_d1 && !ck.config.ablation.fix_d2);
}

/// Checkpoint that one-hot encodes the current POI and maps it to its
/// successor, so it predicts a deterministic cycle perfectly.
fn oracle_checkpoint(corpus: &Corpus, path: &Path) {
    let n = corpus.n_pois();
    let mut succ = vec![0usize; n];
    for u in &corpus.users {
        for w in u.pois.windows(2) {
            succ[w[0]] = w[1];
        }
    }
    let cfg = ModelConfig::new(Variant::Lstm, n).with_sizes(n, n);
    let mut params = ModelParams::zeros(&cfg);
    let big = 20.0;
    for (j, &next) in succ.iter().enumerate() {
        params.embedding.set(j, j, 1.0);
        // candidate reads the input half of [h, x]
        params.cell.candidate.w.set(j, n + j, big);
        params.w_out.set(next, j, big);
    }
    params.cell.input.b.fill(big);
    params.cell.forget.as_mut().unwrap().b.fill(-big);
    params.cell.output.b.fill(big);
    Checkpoint {
        config: cfg,
        params,
        optimizer: None,
        epochs_completed: 0,
        seed: 0,
    }
    .save(path)
    .unwrap();
}

#[test]
fn eval_oracle_checkpoint_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus_path = prepare_synth(&tmp.path().join("data"), "30", "30", "5");
    let corpus = Corpus::load(&corpus_path).unwrap();
    let ck = tmp.path().join("oracle.ckpt");
    oracle_checkpoint(&corpus, &ck);
    let out = tmp.path().join("eval");
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--corpus",
        p(&corpus_path),
        "--out-dir",
        p(&out),
        "--rank-dump",
    ]);
    assert!(stdout.contains("lstm.full.all.acc@1 = 1.000000"), "{stdout}");
    let recs = records(&out.join("metrics.jsonl"));
    assert_eq!(recs.len(), 1, "cold cohort is empty and skipped");
    assert!(recs[0].metrics.acc.iter().all(|&(_, a)| a == 1.0));
    assert_eq!(recs[0].metrics.map, 1.0);
    let dump = fs::read_to_string(out.join("ranks.tsv")).unwrap();
    assert_eq!(dump.lines().count(), recs[0].metrics.n_instances + 1);
}

#[test]
fn eval_random_init_is_near_uniform() {
    let tmp = tempfile::tempdir().unwrap();
    let n = 200usize;
    let corpus_path = prepare_synth(&tmp.path().join("data"), "600", "200", "6");
    let mut accs = Vec::new();
    for seed in 0..8 {
        let run = tmp.path().join(format!("init{seed}"));
        let seed = seed.to_string();
        ok(&[
            "train",
            "--corpus",
            p(&corpus_path),
            "--epochs",
            "0",
            "--cell-size",
            "8",
            "--embed-size",
            "8",
            "--seed",
            &seed,
            "--out-dir",
            p(&run),
        ]);
        let recs = records(&run.join("metrics.jsonl"));
        accs.push(recs[0].metrics.acc_at(10).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let expected = 10.0 / n as f64;
    // instances of one user share a 3-cycle, so count users, not instances,
    // as independent draws: 600 users × 8 initializations
    let sigma = (expected * (1.0 - expected) / (600.0 * 8.0)).sqrt();
    assert!(
        (mean - expected).abs() < 3.0 * sigma.max(0.004),
        "mean acc@10 {mean} vs {expected} ({accs:?})"
    );
}

#[test]
fn eval_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus_a = prepare_synth(&tmp.path().join("a"), "10", "12", "1");
    let corpus_b = prepare_synth(&tmp.path().join("b"), "10", "15", "1");
    let run = tmp.path().join("run");
    small_train(&corpus_a, &run, "1", &[]);
    let ck = run.join("final.ckpt");

    let out = stlstm(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--corpus",
        p(&corpus_b),
        "--out-dir",
        p(&tmp.path().join("e1")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));

    let out = stlstm(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--corpus",
        p(&corpus_a),
        "--cohort",
        "cold",
        "--cold-threshold",
        "5",
        "--out-dir",
        p(&tmp.path().join("e2")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cold cohort is empty"));

    let out = stlstm(&[
        "eval",
        "--checkpoint",
        p(&corpus_a),
        "--corpus",
        p(&corpus_a),
        "--out-dir",
        p(&tmp.path().join("e3")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn eval_topk_recommendations() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = prepare_synth(&tmp.path().join("data"), "10", "12", "1");
    let run = tmp.path().join("run");
    small_train(&corpus, &run, "1", &[]);
    let out = tmp.path().join("eval");
    ok(&[
        "eval",
        "--checkpoint",
        p(&run.join("final.ckpt")),
        "--corpus",
        p(&corpus),
        "--topk",
        "3",
        "--out-dir",
        p(&out),
    ]);
    let text = fs::read_to_string(out.join("recommendations.tsv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 10 * 3);
}

#[test]
fn grid_cross_product_and_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = prepare_synth(&tmp.path().join("data"), "10", "12", "3");
    let grid = |dir: &Path, jobs: &str| {
        ok(&[
            "grid",
            "--corpus",
            p(&corpus),
            "--variants",
            "lstm,st-lstm,st-clstm",
            "--cell-sizes",
            "4,8",
            "--embed-size",
            "4",
            "--epochs",
            "2",
            "--jobs",
            jobs,
            "--out-dir",
            p(dir),
        ])
    };
    let a = tmp.path().join("g1");
    let table = grid(&a, "1");
    assert_eq!(table.lines().count(), 1 + 6);
    assert!(table.lines().skip(1).all(|l| l.ends_with("\tok")));
    let b = tmp.path().join("g2");
    grid(&b, "3");
    assert_eq!(
        fs::read(a.join("grid.tsv")).unwrap(),
        fs::read(b.join("grid.tsv")).unwrap()
    );
    assert!(a.join("legs/st-clstm-full-c8-b10-s0/final.ckpt").exists());
}

#[test]
fn grid_ablations_and_failed_legs() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = prepare_synth(&tmp.path().join("data"), "10", "12", "3");
    let out = tmp.path().join("g");
    let table = ok(&[
        "grid",
        "--corpus",
        p(&corpus),
        "--variants",
        "st-clstm",
        "--ablations",
        "full,time-only,distance-only,short-term-only,long-term-only",
        "--cell-sizes",
        "4",
        "--embed-size",
        "4",
        "--epochs",
        "1",
        "--out-dir",
        p(&out),
    ]);
    for name in [
        "full",
        "time-only",
        "distance-only",
        "short-term-only",
        "long-term-only",
    ] {
        assert!(table.contains(&format!("\t{name}\t")), "{name} missing:\n{table}");
    }

    // a zero batch size is rejected per leg; the grid finishes and exits nonzero
    let res = stlstm(&[
        "grid",
        "--corpus",
        p(&corpus),
        "--variants",
        "lstm",
        "--cell-sizes",
        "4",
        "--batch-sizes",
        "0,5",
        "--embed-size",
        "4",
        "--epochs",
        "1",
        "--out-dir",
        p(&tmp.path().join("bad")),
    ]);
    assert!(!res.status.success());
    let table = fs::read_to_string(tmp.path().join("bad/grid.tsv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("failed: configuration error"));
    assert!(table.lines().nth(1).unwrap().ends_with("\tok"));
}

#[test]
fn gradcheck_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&["gradcheck", "--out-dir", p(tmp.path())]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 11);
    assert!(tmp.path().join("gradcheck.json").exists());
}

#[test]
fn usage_errors_exit_nonzero() {
    assert!(!stlstm(&["train"]).status.success());
    assert!(!stlstm(&["prepare", "--synth", "--input", "x", "--out-dir", "y"])
        .status
        .success());
    assert!(stlstm(&["--help"]).status.success());
}
