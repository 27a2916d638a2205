use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use elf_core::io::{load_corpus, read_file, EmbeddingMeta, EmbeddingRecord, EmbeddingSet, Table};
use elf_core::model::EncoderConfig;
use elf_core::trainer::{checkpoint_to_bytes, MoCoState, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn elf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elf"))
        .args(args)
        .current_dir(dir)
        .env("ELF_NO_COLOR", "1")
        .env_remove("ELF_CORRUPT_GRADIENT")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = elf(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    std::fs::write(dir.join(name), body).unwrap();
    name.to_string()
}

const SMALL: &str = r#"{
  "corpus": {"n_slides": 40, "n_models": 2, "model_dims": [8, 12], "patches_per_slide": [4, 12], "test_fraction": 0.25},
  "encoder": {"unified_dim": 16},
  "pretrain": {"epochs": 4, "warmup_epochs": 1, "batch_size": 10, "validate_every": 1},
  "probe": {"folds": 3, "n_bootstrap": 100},
  "output_dir": "out",
  "seed": 2
}"#;

fn report(dir: &Path, path: &str) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join(path)).unwrap()).unwrap()
}

#[test]
fn generate_round_trips_the_config_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "min.json",
        r#"{"corpus": {"n_slides": 10, "n_models": 2, "model_dims": [4, 6]}, "output_dir": "a"}"#,
    );
    let stdout = ok(tmp.path(), &["generate", "--config", &cfg]);
    assert!(stdout.contains("10 slides × 2 models") && stdout.contains("[4, 6]"), "{stdout}");
    let corpus = load_corpus(&tmp.path().join("a/corpus.elfe")).unwrap();
    assert_eq!(corpus.config.n_slides, 10);
    assert_eq!(corpus.config.model_dims, vec![4, 6]);

    let first = std::fs::read(tmp.path().join("a/corpus.elfe")).unwrap();
    ok(tmp.path(), &["generate", "--config", &cfg]);
    assert_eq!(first, std::fs::read(tmp.path().join("a/corpus.elfe")).unwrap());
    let labels = std::fs::read_to_string(tmp.path().join("a/labels.csv")).unwrap();
    assert!(labels.starts_with("# config_digest=") && labels.contains("# seed=0"));

    ok(tmp.path(), &["generate", "--config", &cfg, "--seed", "5"]);
    assert_ne!(first, std::fs::read(tmp.path().join("a/corpus.elfe")).unwrap());
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", r#"{"corpus": {"n_models": 1, "model_dims": [4]}}"#);
    let out = elf(tmp.path(), &["generate", "--config", &cfg]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_slides"));

    let cfg = write_config(
        tmp.path(),
        "typo.json",
        r#"{"corpus": {"n_slides": 4, "n_models": 1, "model_dims": [4]}, "pretrain": {"batch": 3}}"#,
    );
    let out = elf(tmp.path(), &["generate", "--config", &cfg]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain"));
}

#[test]
fn unwritable_output_is_an_io_failure() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("blocker"), "not a directory").unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"corpus": {"n_slides": 4, "n_models": 1, "model_dims": [4]}, "output_dir": "blocker/out"}"#,
    );
    let out = elf(tmp.path(), &["generate", "--config", &cfg]);
    assert_eq!(code(&out), 3);
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, "run.json", SMALL);
    ok(dir, &["generate", "--config", &cfg]);
    ok(dir, &["pretrain", "--config", &cfg]);

    // logged validation scores never beat the retained checkpoint
    let lines: Vec<Value> = std::fs::read_to_string(dir.join("out/metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l["config_digest"].is_string() && l["seed"] == 2));
    let val = |l: &Value| (l["val_organ_ba"].as_f64().unwrap() + l["val_cancer_ba"].as_f64().unwrap()) / 2.0;
    let best = elf_core::trainer::load_checkpoint(&dir.join("out/checkpoint_best.elfe")).unwrap();
    let kept = best.best_score.unwrap();
    assert!(kept >= val(&lines[0]));
    assert!(lines.iter().all(|l| kept >= val(l)));

    // embedding: one record per slide, byte-identical across runs and thread counts
    ok(dir, &["embed", "--config", &cfg, "--threads", "1"]);
    let first = std::fs::read(dir.join("out/embeddings.elfe")).unwrap();
    ok(dir, &["embed", "--config", &cfg, "--threads", "3"]);
    assert_eq!(first, std::fs::read(dir.join("out/embeddings.elfe")).unwrap());
    let set = EmbeddingSet::from_bytes(&first).unwrap();
    assert_eq!(set.records.len(), 40);
    assert!(set.records.iter().all(|r| r.fused.len() == (16 + 8) + (16 + 12)));

    ok(dir, &["probe", "--config", &cfg]);
    let r = report(dir, "out/probe_report.json");
    assert_eq!(r["mode"], "cv");
    assert_eq!(r["folds"].as_array().unwrap().len(), 3);
    let ba = &r["out_of_fold"]["balanced_accuracy"];
    assert!(ba["lower"].as_f64().unwrap() <= ba["upper"].as_f64().unwrap());
    assert!(r["out_of_fold"]["auc"]["point"].is_number());
    let scores = Table::read(&dir.join("out/probe_scores.csv")).unwrap();
    assert_eq!(scores.rows.len(), 40);

    ok(dir, &["probe", "--config", &cfg, "--external-embeddings", "out/embeddings.elfe"]);
    assert!(report(dir, "out/probe_report.json")["external"]["balanced_accuracy"]["point"].is_number());

    let stdout = ok(dir, &["attnmap", "--config", &cfg, "--slide", "slide-00001", "--model", "1"]);
    assert!(stdout.contains("model 1"));
    let pgm = std::fs::read(dir.join("out/attnmap/slide-00001_m1.pgm")).unwrap();
    let (cols, rows, px) = elf_core::attnmap::parse_pgm(&pgm).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
    let csv = std::fs::read_to_string(dir.join("out/attnmap/slide-00001_m1.csv")).unwrap();
    let grid: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!((grid.len(), grid[0].split(',').count()), (rows, cols));
    assert_eq!(px.len(), rows * cols);

    let out = elf(dir, &["attnmap", "--config", &cfg, "--slide", "slide-99999"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("slide-99999"));
}

#[test]
fn zero_epochs_keeps_the_initial_state_and_resume_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let zero = SMALL.replace(r#""epochs": 4, "warmup_epochs": 1"#, r#""epochs": 0, "warmup_epochs": 0"#);
    let cfg = write_config(dir, "zero.json", &zero);
    ok(dir, &["generate", "--config", &cfg]);
    ok(dir, &["pretrain", "--config", &cfg]);
    let init = MoCoState::init(
        EncoderConfig::desk(vec![8, 12], 16, 4),
        TrainConfig { epochs: 0, warmup_epochs: 0, batch_size: 10, validate_every: 1, seed: 2, ..TrainConfig::desk() },
    )
    .unwrap();
    assert_eq!(read_file(&dir.join("out/checkpoint_final.elfe")).unwrap(), checkpoint_to_bytes(&init).unwrap());

    let two = write_config(dir, "two.json", &SMALL.replace(r#""epochs": 4"#, r#""epochs": 2"#));
    ok(dir, &["pretrain", "--config", &two]);
    let full = write_config(dir, "full.json", SMALL);
    ok(dir, &["pretrain", "--config", &full, "--resume", "out/checkpoint_final.elfe"]);
    let epochs: Vec<(u64, u64)> = std::fs::read_to_string(dir.join("out/metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            (v["epoch"].as_u64().unwrap(), v["step"].as_u64().unwrap())
        })
        .collect();
    assert_eq!(epochs.iter().map(|e| e.0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(epochs.windows(2).all(|w| w[1].1 > w[0].1));
}

#[test]
fn nan_abort_has_its_own_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, "nan.json", &SMALL.replace(r#""epochs": 4"#, r#""epochs": 3, "peak_lr": 1e250"#));
    ok(dir, &["generate", "--config", &cfg]);
    let out = elf(dir, &["pretrain", "--config", &cfg]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn embed_reports_incompatible_dims_and_singleton_attention() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let single = SMALL.replace(r#""patches_per_slide": [4, 12]"#, r#""patches_per_slide": [1, 1]"#);
    let cfg = write_config(dir, "one.json", &single);
    ok(dir, &["generate", "--config", &cfg]);
    ok(dir, &["pretrain", "--config", &cfg]);
    ok(dir, &["embed", "--config", &cfg]);
    let set = EmbeddingSet::from_bytes(&std::fs::read(dir.join("out/embeddings.elfe")).unwrap()).unwrap();
    assert!(set.records.iter().all(|r| r.attention.iter().all(|a| a == &vec![1.0])));

    let other = write_config(
        dir,
        "other.json",
        r#"{"corpus": {"n_slides": 5, "n_models": 2, "model_dims": [8, 20]}, "output_dir": "other"}"#,
    );
    ok(dir, &["generate", "--config", &other]);
    let out = elf(dir, &["embed", "--config", &cfg, "--corpus", "other/corpus.elfe"]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[8, 12]") && err.contains("[8, 20]"), "{err}");
}

/// Two Gaussian blobs in `d` dimensions, written as an embedding set plus labels.
fn planted_embeddings(dir: &Path, n: usize, separation: f64, shuffle: bool, seed: u64) -> (PathBuf, PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 6;
    let ids: Vec<String> = (0..n).map(|i| format!("case-{i:03}")).collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let records = ids
        .iter()
        .zip(&labels)
        .map(|(id, &y)| EmbeddingRecord {
            slide_id: id.clone(),
            fused: (0..d).map(|j| rng.random::<f64>() + if j == 0 { separation * y as f64 } else { 0.0 }).collect(),
            attention: vec![vec![1.0]],
        })
        .collect();
    if shuffle {
        for i in (1..n).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
    }
    let set = EmbeddingSet {
        meta: EmbeddingMeta { config_digest: "0".repeat(64), seed, unified_dim: 2, model_dims: vec![4], slide_ids: ids.clone() },
        records,
    };
    let emb = dir.join(format!("planted{seed}.elfe"));
    std::fs::write(&emb, set.to_bytes().unwrap()).unwrap();
    let table = Table {
        headers: vec!["slide_id".into(), "cancer".into(), "split".into()],
        rows: ids
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(k, (i, y))| vec![i.clone(), y.to_string(), if k < n / 2 { "train" } else { "test" }.into()])
            .collect(),
    };
    let lab = dir.join(format!("planted{seed}.csv"));
    std::fs::write(&lab, table.to_csv(&[]).unwrap()).unwrap();
    (emb, lab)
}

#[test]
fn probe_on_planted_and_null_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(
        dir,
        "p.json",
        r#"{"corpus": {"n_slides": 1, "n_models": 1, "model_dims": [4]}, "probe": {"n_bootstrap": 300}, "output_dir": "out"}"#,
    );
    let (emb, lab) = planted_embeddings(dir, 60, 5.0, false, 1);
    ok(dir, &["probe", "--config", &cfg, "--embeddings", emb.to_str().unwrap(), "--labels", lab.to_str().unwrap()]);
    let r = report(dir, "out/probe_report.json");
    assert_eq!(r["k"], 5);
    assert_eq!(r["out_of_fold"]["balanced_accuracy"]["point"], 1.0);

    // pooled out-of-fold scores are biased below 0.5 on null data, so the null
    // check uses a held-out split
    let split = write_config(
        dir,
        "s.json",
        r#"{"corpus": {"n_slides": 1, "n_models": 1, "model_dims": [4]}, "probe": {"mode": "split", "n_bootstrap": 300}, "output_dir": "out"}"#,
    );
    let (emb, lab) = planted_embeddings(dir, 160, 0.0, true, 2);
    ok(dir, &["probe", "--config", &split, "--embeddings", emb.to_str().unwrap(), "--labels", lab.to_str().unwrap()]);
    let auc = &report(dir, "out/probe_report.json")["test"]["auc"];
    assert!(auc["lower"].as_f64().unwrap() <= 0.5 && auc["upper"].as_f64().unwrap() >= 0.5, "{auc}");

    let partial = dir.join("partial.csv");
    std::fs::write(&partial, "slide_id,cancer\ncase-000,1\n").unwrap();
    let out = elf(dir, &["probe", "--config", &cfg, "--embeddings", emb.to_str().unwrap(), "--labels", partial.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("case-001"));
}

fn survival_files(dir: &Path, rows: &[(f64, f64, bool)]) -> (String, String) {
    let mut scores = String::from("slide_id,score\n");
    let mut surv = String::from("slide_id,time,event\n");
    for (i, (s, t, e)) in rows.iter().enumerate() {
        scores.push_str(&format!("p{i},{s}\n"));
        surv.push_str(&format!("p{i},{t},{}\n", *e as u8));
    }
    std::fs::write(dir.join("scores.csv"), scores).unwrap();
    std::fs::write(dir.join("surv.csv"), surv).unwrap();
    ("scores.csv".into(), "surv.csv".into())
}

#[test]
fn eval_survival_detects_a_planted_effect() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // high scores: hazard 1/6 per month; low scores: 1/24
    let rows: Vec<(f64, f64, bool)> = (0..100)
        .map(|i| {
            let high = i % 2 == 0;
            let rate = if high { 1.0 / 6.0 } else { 1.0 / 24.0 };
            let t = -rng.random::<f64>().ln() / rate;
            (if high { 1.0 } else { 0.0 } + rng.random::<f64>(), t.min(36.0), t < 36.0)
        })
        .collect();
    let (s, v) = survival_files(dir, &rows);
    ok(dir, &["eval-survival", "--scores", &s, "--survival", &v, "--out", "surv"]);
    let r = report(dir, "surv/survival_report.json");
    assert!(r["log_rank"]["p_value"].as_f64().unwrap() < 0.05);
    assert!(r["log_rank"]["hazard_ratio"].as_f64().unwrap() > 1.0);
    assert_eq!(r["log_rank"]["hazard_ratio_method"], "observed_over_expected");
    assert_eq!(r["groups"]["high"]["n"], 50);
    let km = Table::read(&dir.join("surv/km_high.csv")).unwrap();
    assert_eq!(km.headers, vec!["time", "at_risk", "events", "censored", "survival"]);
    let groups = Table::read(&dir.join("surv/groups.csv")).unwrap();
    let durable = groups.column("durable_response").unwrap();
    let (time, event) = (groups.column("time").unwrap(), groups.column("event").unwrap());
    for row in &groups.rows {
        let t: f64 = row[time].parse().unwrap();
        if t >= 6.0 {
            assert_eq!(row[durable], "1");
        } else if row[event] == "1" {
            assert_eq!(row[durable], "0");
        }
    }
}

#[test]
fn eval_survival_identical_groups_and_all_censored_group() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // the same outcomes in both halves of the score range
    let outcomes = [(3.0, true), (5.0, false), (8.0, true), (11.0, true)];
    let rows: Vec<(f64, f64, bool)> = (0..8).map(|i| (i as f64, outcomes[i % 4].0, outcomes[i % 4].1)).collect();
    let (s, v) = survival_files(dir, &rows);
    ok(dir, &["eval-survival", "--scores", &s, "--survival", &v, "--out", "same"]);
    assert_eq!(report(dir, "same/survival_report.json")["log_rank"]["p_value"], 1.0);

    // low scores are all censored late, while high scores have events early
    let rows: Vec<(f64, f64, bool)> =
        (0..8).map(|i| if i < 4 { (i as f64, 20.0 + i as f64, false) } else { (i as f64, i as f64 - 2.0, true) }).collect();
    let (s, v) = survival_files(dir, &rows);
    ok(dir, &["eval-survival", "--scores", &s, "--survival", &v, "--out", "cens"]);
    let r = report(dir, "cens/survival_report.json");
    assert_eq!(r["groups"]["low"]["median_undefined"], true);
    assert_eq!(r["groups"]["high"]["median_undefined"], false);
    assert!(r["log_rank"]["chi2"].as_f64().unwrap() > 0.0);
}

#[test]
fn verify_passes_and_catches_a_corrupted_gradient() {
    let tmp = tempfile::tempdir().unwrap();
    let started = std::time::Instant::now();
    let stdout = ok(tmp.path(), &["verify"]);
    assert!(started.elapsed().as_secs() < 120);
    assert!(!stdout.contains("FAIL") && stdout.contains("checks passed"));
    assert!(!stdout.contains('\x1b'));

    let out = Command::new(env!("CARGO_BIN_EXE_elf"))
        .args(["verify", "--points", "5", "--instances", "5"])
        .env("ELF_CORRUPT_GRADIENT", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("grad/"));
}
