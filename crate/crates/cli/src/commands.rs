use std::collections::HashMap;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};

use elf_core::attnmap::attention_grid;
use elf_core::encoder::{encode_bag, PatchBag};
use elf_core::io::{label_manifest, load_corpus, save_corpus, write_file, EmbeddingMeta, EmbeddingRecord, EmbeddingSet, Table};
use elf_core::stats::{
    auc, balanced_accuracy, bootstrap_ci, cross_validate, durable_response, fit_linear_probe, km_estimate, log_rank,
    median_stratify, KmCurve, MetricReport, RiskGroup, SurvivalRecord,
};
use elf_core::synth::{generate_corpus, Split, SyntheticSlide};
use elf_core::trainer::{argmax, load_checkpoint, save_checkpoint, train, MoCoState};
use elf_core::verify::{run_suite, VerifyOptions};
use elf_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Features, ProbeMode, RunConfig};
use crate::Failure;

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

struct Stamp {
    digest: String,
    seed: u64,
}

impl Stamp {
    fn of(cfg: &RunConfig) -> Result<Self> {
        Ok(Self { digest: cfg.digest()?, seed: cfg.seed })
    }

    fn comments(&self) -> [(&'static str, String); 2] {
        [("config_digest", self.digest.clone()), ("seed", self.seed.to_string())]
    }

    fn report(&self, mut body: Value) -> Value {
        let obj = body.as_object_mut().expect("reports are objects");
        obj.insert("config_digest".into(), json!(self.digest));
        obj.insert("seed".into(), json!(self.seed));
        body
    }
}

/// First `cap` patches of every bag, with their lattice positions.
fn capped(slide: &SyntheticSlide, cap: usize) -> Result<(Vec<PatchBag>, Vec<(u32, u32)>)> {
    let n = slide.n_patches();
    if n <= cap {
        return Ok((slide.bags.clone(), slide.coords.clone()));
    }
    let keep: Vec<usize> = (0..cap).collect();
    let bags = slide.bags.iter().map(|b| b.subset(&keep)).collect::<Result<Vec<_>>>()?;
    Ok((bags, slide.coords[..cap].to_vec()))
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let stamp = Stamp::of(cfg)?;
    save_corpus(&corpus, &cfg.out("corpus.elfe"))?;
    write_file(&cfg.out("labels.csv"), label_manifest(&corpus).to_csv(&stamp.comments())?.as_bytes())?;
    let count = |s: Split| corpus.split(s).len();
    println!(
        "generated {} slides × {} models, dims {:?} (train {}, val {}, test {}) → {}",
        corpus.slides.len(),
        cfg.corpus.n_models,
        cfg.corpus.model_dims,
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        cfg.output_dir.display()
    );
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, corpus: Option<PathBuf>, resume: Option<PathBuf>) -> Result<()> {
    let corpus = load_corpus(&corpus.unwrap_or_else(|| cfg.out("corpus.elfe")))?;
    let state = match resume {
        Some(path) => {
            let mut s = load_checkpoint(&path)?;
            if s.encoder != cfg.encoder {
                return Err(Error::Config("checkpoint encoder differs from the config's encoder section".into()));
            }
            let same_except_epochs = elf_core::trainer::TrainConfig { epochs: cfg.pretrain.epochs, ..s.train.clone() };
            if same_except_epochs != cfg.pretrain {
                return Err(Error::Config("only pretrain.epochs may change when resuming".into()));
            }
            s.train = cfg.pretrain.clone();
            s
        }
        None => MoCoState::init(cfg.encoder.clone(), cfg.pretrain.clone())?,
    };
    let resumed_at = state.epoch;
    let stamp = Stamp::of(cfg)?;
    let mut lines = String::new();
    let outcome = train(&corpus, state, &mut |m| {
        let line = stamp.report(to_value(m));
        lines.push_str(&serde_json::to_string(&line).expect("metrics serialize"));
        lines.push('\n');
        let val = match (m.val_organ_ba, m.val_cancer_ba) {
            (Some(o), Some(c)) => format!("  val organ {o:.3} cancer {c:.3}"),
            _ => String::new(),
        };
        eprintln!("epoch {:>4}  loss {:.4} (cont {:.4}, cls {:.4})  lr {:.2e}{val}", m.epoch, m.l_total, m.l_cont, m.l_cls, m.lr);
    })?;
    let metrics = cfg.out("metrics.jsonl");
    if resumed_at > 0 && metrics.exists() {
        let mut prior = std::fs::read_to_string(&metrics)?;
        prior.push_str(&lines);
        lines = prior;
    }
    write_file(&metrics, lines.as_bytes())?;
    save_checkpoint(&outcome.final_state, &cfg.out("checkpoint_final.elfe"))?;
    let best = outcome.best.as_ref().unwrap_or(&outcome.final_state);
    save_checkpoint(best, &cfg.out("checkpoint_best.elfe"))?;
    println!(
        "pretrained to epoch {} (step {}); best validation score {}",
        outcome.final_state.epoch,
        outcome.final_state.step,
        best.best_score.map_or("n/a".into(), |s| format!("{s:.4}"))
    );
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| cfg.out("checkpoint_best.elfe"))
}

pub fn embed(cfg: &RunConfig, corpus: Option<PathBuf>, checkpoint: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let corpus = load_corpus(&corpus.unwrap_or_else(|| cfg.out("corpus.elfe")))?;
    let state = load_checkpoint(&checkpoint_path(cfg, checkpoint))?;
    if let Some(s) = corpus.slides.first() {
        state.encoder.check_bags(&s.bags)?;
    }
    let cap = state.train.max_patches;
    let records = corpus
        .slides
        .par_iter()
        .map(|s| {
            let (bags, _) = capped(s, cap)?;
            let rep = state.base.represent(&bags)?;
            Ok(EmbeddingRecord {
                slide_id: s.slide_id.clone(),
                fused: rep.fused,
                attention: rep.per_model.into_iter().map(|v| v.attention).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = EmbeddingSet {
        meta: EmbeddingMeta {
            config_digest: cfg.digest()?,
            seed: cfg.seed,
            unified_dim: state.encoder.unified_dim,
            model_dims: state.encoder.model_dims.clone(),
            slide_ids: records.iter().map(|r| r.slide_id.clone()).collect(),
        },
        records,
    };
    let path = out.unwrap_or_else(|| cfg.out("embeddings.elfe"));
    write_file(&path, &set.to_bytes()?)?;
    println!("embedded {} slides (fused width {}) → {}", set.records.len(), state.encoder.fused_dim(), path.display());
    Ok(())
}

fn features(set: &EmbeddingSet, rec: &EmbeddingRecord, kind: Features) -> Vec<f64> {
    match kind {
        Features::Fused => rec.fused.clone(),
        Features::Unified => (0..set.meta.model_dims.len())
            .flat_map(|m| {
                let (o, l) = set.unified_span(m);
                rec.fused[o..o + l].to_vec()
            })
            .collect(),
    }
}

struct Joined {
    ids: Vec<String>,
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
    split: Vec<Option<Split>>,
}

fn join(set: &EmbeddingSet, labels: &Table, cfg: &RunConfig) -> Result<Joined> {
    let id_col = labels.column("slide_id")?;
    let y_col = labels.column(cfg.probe.task.column())?;
    let split_col = labels.column("split").ok();
    let by_id: HashMap<&str, &Vec<String>> = labels.rows.iter().map(|r| (r[id_col].as_str(), r)).collect();
    let missing: Vec<&str> = set.records.iter().map(|r| r.slide_id.as_str()).filter(|id| !by_id.contains_key(id)).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{} embedded slides have no label row; first: {:?}",
            missing.len(),
            &missing[..missing.len().min(5)]
        )));
    }
    let mut j = Joined { ids: Vec::new(), x: Vec::new(), y: Vec::new(), split: Vec::new() };
    for rec in &set.records {
        let row = by_id[rec.slide_id.as_str()];
        let y = row[y_col]
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("label {:?} for {} is not a class index", row[y_col], rec.slide_id)))?;
        j.ids.push(rec.slide_id.clone());
        j.x.push(features(set, rec, cfg.probe.features));
        j.y.push(y);
        j.split.push(split_col.and_then(|c| Split::parse(&row[c])));
    }
    Ok(j)
}

/// BA (and AUC for two classes) with bootstrap intervals over (label, probabilities) rows.
fn score_report(y: &[usize], proba: &[Vec<f64>], cfg: &RunConfig) -> Result<Value> {
    let rows: Vec<(usize, Vec<f64>)> = y.iter().copied().zip(proba.iter().cloned()).collect();
    let ba = |r: &[(usize, Vec<f64>)]| {
        let (t, p): (Vec<usize>, Vec<usize>) = r.iter().map(|(t, p)| (*t, argmax(p))).unzip();
        balanced_accuracy(&t, &p).ok()
    };
    let n_boot = cfg.probe.n_bootstrap;
    let ba_report: MetricReport = bootstrap_ci(&rows, ba, n_boot, cfg.seed)?;
    let mut out = json!({ "n": y.len(), "balanced_accuracy": to_value(&ba_report) });
    if proba.first().is_some_and(|p| p.len() == 2) {
        let roc = |r: &[(usize, Vec<f64>)]| {
            let (t, s): (Vec<bool>, Vec<f64>) = r.iter().map(|(t, p)| (*t == 1, p[1])).unzip();
            auc(&t, &s).ok()
        };
        out["auc"] = to_value(&bootstrap_ci(&rows, roc, n_boot, cfg.seed)?);
    }
    Ok(out)
}

fn scores_table(ids: &[String], y: &[usize], proba: &[Vec<f64>]) -> Table {
    Table {
        headers: ["slide_id", "label", "predicted", "score"].map(String::from).to_vec(),
        rows: ids
            .iter()
            .zip(y)
            .zip(proba)
            .map(|((id, t), p)| {
                let score = if p.len() == 2 { p[1] } else { p[argmax(p)] };
                vec![id.clone(), t.to_string(), argmax(p).to_string(), score.to_string()]
            })
            .collect(),
    }
}

pub fn probe(
    cfg: &RunConfig,
    embeddings: Option<PathBuf>,
    labels: Option<PathBuf>,
    external: Option<(PathBuf, Option<PathBuf>)>,
) -> Result<()> {
    let set = EmbeddingSet::from_bytes(&elf_core::io::read_file(&embeddings.unwrap_or_else(|| cfg.out("embeddings.elfe")))?)?;
    let labels_path = labels.unwrap_or_else(|| cfg.out("labels.csv"));
    let data = join(&set, &Table::read(&labels_path)?, cfg)?;
    let opts = cfg.probe.options();
    let stamp = Stamp::of(cfg)?;
    let k = cfg.probe.folds;

    let (mut report, ids, y, proba, predictor): (Value, Vec<String>, Vec<usize>, Vec<Vec<f64>>, Box<dyn Fn(&[f64]) -> Result<Vec<f64>>>) =
        match cfg.probe.mode {
            ProbeMode::Cv => {
                let cv = cross_validate(&data.x, &data.y, k, cfg.seed, &opts)?;
                let report = json!({
                    "mode": "cv",
                    "k": k,
                    "folds": to_value(&cv.folds),
                    "mean_fold_balanced_accuracy": cv.mean_balanced_accuracy(),
                    "out_of_fold": score_report(&data.y, &cv.out_of_fold, cfg)?,
                });
                let proba = cv.out_of_fold.clone();
                (report, data.ids, data.y, proba, Box::new(move |x| cv.ensemble_proba(x)))
            }
            ProbeMode::Split => {
                let pick = |want: Split| -> Vec<usize> { (0..data.ids.len()).filter(|&i| data.split[i] == Some(want)).collect() };
                let (tr, te) = (pick(Split::Train), pick(Split::Test));
                if tr.is_empty() || te.is_empty() {
                    return Err(Error::Data("split mode needs train and test rows in the label table".into()));
                }
                let gather = |idx: &[usize]| idx.iter().map(|&i| data.x[i].clone()).collect::<Vec<_>>();
                let ys = |idx: &[usize]| idx.iter().map(|&i| data.y[i]).collect::<Vec<_>>();
                let model = fit_linear_probe(&gather(&tr), &ys(&tr), &opts, cfg.seed)?;
                let proba = gather(&te).iter().map(|x| model.predict_proba(x)).collect::<Result<Vec<_>>>()?;
                let report = json!({
                    "mode": "split",
                    "n_train": tr.len(),
                    "converged": model.converged,
                    "test": score_report(&ys(&te), &proba, cfg)?,
                });
                let ids = te.iter().map(|&i| data.ids[i].clone()).collect();
                (report, ids, ys(&te), proba, Box::new(move |x| model.predict_proba(x)))
            }
        };
    report["task"] = json!(cfg.probe.task);
    report["features"] = json!(cfg.probe.features);

    if let Some((ext_emb, ext_labels)) = external {
        let ext = EmbeddingSet::from_bytes(&elf_core::io::read_file(&ext_emb)?)?;
        if ext.meta.model_dims != set.meta.model_dims || ext.meta.unified_dim != set.meta.unified_dim {
            return Err(Error::Data(format!(
                "external embeddings have dims {:?}/{} but the probe was fit on {:?}/{}",
                ext.meta.model_dims, ext.meta.unified_dim, set.meta.model_dims, set.meta.unified_dim
            )));
        }
        let ext_data = join(&ext, &Table::read(&ext_labels.unwrap_or(labels_path))?, cfg)?;
        let p = ext_data.x.iter().map(|x| predictor(x)).collect::<Result<Vec<_>>>()?;
        report["external"] = score_report(&ext_data.y, &p, cfg)?;
        write_file(&cfg.out("probe_external_scores.csv"), scores_table(&ext_data.ids, &ext_data.y, &p).to_csv(&stamp.comments())?.as_bytes())?;
    }

    write_file(&cfg.out("probe_scores.csv"), scores_table(&ids, &y, &proba).to_csv(&stamp.comments())?.as_bytes())?;
    let path = cfg.out("probe_report.json");
    let headline = report["out_of_fold"]["balanced_accuracy"]["point"]
        .as_f64()
        .or(report["test"]["balanced_accuracy"]["point"].as_f64())
        .unwrap_or(f64::NAN);
    write_json(&path, &stamp.report(report))?;
    println!("probe {} ({} slides): balanced accuracy {headline:.4} → {}", cfg.probe.task.column(), y.len(), path.display());
    Ok(())
}

pub fn attnmap(cfg: &RunConfig, slide_id: &str, corpus: Option<PathBuf>, checkpoint: Option<PathBuf>, model: Option<usize>) -> Result<()> {
    let corpus = load_corpus(&corpus.unwrap_or_else(|| cfg.out("corpus.elfe")))?;
    let state = load_checkpoint(&checkpoint_path(cfg, checkpoint))?;
    let Some(slide) = corpus.find(slide_id) else {
        return Err(Error::Data(format!("no slide {slide_id:?} in the corpus")));
    };
    state.encoder.check_bags(&slide.bags)?;
    let (bags, coords) = capped(slide, state.train.max_patches)?;
    let models: Vec<usize> = match model {
        Some(m) if m < bags.len() => vec![m],
        Some(m) => return Err(Error::Data(format!("model {m} out of range for {} models", bags.len()))),
        None => (0..bags.len()).collect(),
    };
    let stamp = Stamp::of(cfg)?;
    let mut comments = stamp.comments().to_vec();
    comments.push(("slide_id", slide_id.to_string()));
    for m in models {
        let attention = encode_bag(&bags[m], &state.base.encoders[m])?.attention;
        let grid = attention_grid(&coords, &attention, &cfg.eval.grid)?;
        let stem = format!("attnmap/{slide_id}_m{m}");
        let mut csv = String::new();
        for (k, v) in &comments {
            csv.push_str(&format!("# {k}={v}\n"));
        }
        csv.push_str(&grid.to_csv());
        write_file(&cfg.out(&format!("{stem}.csv")), csv.as_bytes())?;
        write_file(&cfg.out(&format!("{stem}.pgm")), &grid.to_pgm(&comments))?;
        if grid.degenerate {
            eprintln!("warning: model {m} attention is uniform over {slide_id}; the normalized grid is all zeros");
        }
        let (r, c) = grid.argmax();
        println!("model {m}: {}×{} grid, peak at ({r}, {c}) → {}", grid.rows, grid.cols, cfg.out(&stem).display());
    }
    Ok(())
}

fn km_table(curve: &KmCurve) -> Table {
    Table {
        headers: ["time", "at_risk", "events", "censored", "survival"].map(String::from).to_vec(),
        rows: curve
            .steps
            .iter()
            .map(|s| vec![s.time.to_string(), s.at_risk.to_string(), s.events.to_string(), s.censored.to_string(), s.survival.to_string()])
            .collect(),
    }
}

fn parse_event(v: &str, id: &str) -> Result<bool> {
    match v {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        _ => Err(Error::Data(format!("event for {id} must be 0/1, got {v:?}"))),
    }
}

pub fn eval_survival(cfg: &RunConfig, scores: &Path, survival: &Path, out: Option<PathBuf>) -> Result<()> {
    let id = cfg.eval.id_column.as_str();
    let scores = Table::read(scores)?;
    let surv = Table::read(survival)?;
    let (sid, sscore) = (scores.column(id)?, scores.column("score")?);
    let (vid, vtime, vevent) = (surv.column(id)?, surv.column("time")?, surv.column("event")?);
    let by_id: HashMap<&str, &Vec<String>> = surv.rows.iter().map(|r| (r[vid].as_str(), r)).collect();
    let missing: Vec<&str> = scores.rows.iter().map(|r| r[sid].as_str()).filter(|k| !by_id.contains_key(k)).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{} scored ids have no survival row; first: {:?}",
            missing.len(),
            &missing[..missing.len().min(5)]
        )));
    }
    let num = |v: &str, what: &str, key: &str| {
        v.parse::<f64>().map_err(|_| Error::Data(format!("{what} for {key} is not a number: {v:?}")))
    };
    let mut ids = Vec::new();
    let mut score = Vec::new();
    let mut outcome = Vec::new();
    for r in &scores.rows {
        let key = r[sid].as_str();
        let s = by_id[key];
        ids.push(key.to_string());
        score.push(num(&r[sscore], "score", key)?);
        outcome.push((num(&s[vtime], "time", key)?, parse_event(&s[vevent], key)?));
    }
    let strata = median_stratify(&score)?;
    let records: Vec<SurvivalRecord> =
        outcome.iter().zip(&strata.groups).map(|(&(t, e), &g)| SurvivalRecord::new(t, e, g)).collect();
    let group = |g: RiskGroup| records.iter().filter(|r| r.group == g).cloned().collect::<Vec<_>>();
    let (high, low) = (group(RiskGroup::High), group(RiskGroup::Low));
    if high.is_empty() || low.is_empty() {
        return Err(Error::Analysis(format!(
            "median split of {} scores put everyone in one group (median {})",
            score.len(),
            strata.median
        )));
    }
    let dir = out.unwrap_or_else(|| cfg.out("survival"));
    let stamp = Stamp::of(cfg)?;
    let mut groups_json = serde_json::Map::new();
    for (name, recs) in [(RiskGroup::High, &high), (RiskGroup::Low, &low)] {
        let curve = km_estimate(recs)?;
        write_file(&dir.join(format!("km_{}.csv", name.as_str())), km_table(&curve).to_csv(&stamp.comments())?.as_bytes())?;
        groups_json.insert(
            name.as_str().into(),
            json!({
                "n": recs.len(),
                "events": recs.iter().filter(|r| r.event).count(),
                "median_survival": curve.median,
                "median_undefined": curve.median.is_none(),
            }),
        );
    }
    let lr = log_rank(&high, &low)?;
    let patients = Table {
        headers: [id, "score", "group", "time", "event", "durable_response"].map(String::from).to_vec(),
        rows: (0..ids.len())
            .map(|i| {
                let (t, e) = outcome[i];
                let durable = durable_response(t, e).map_or(String::new(), |d| (d as u8).to_string());
                vec![ids[i].clone(), score[i].to_string(), strata.groups[i].as_str().into(), t.to_string(), (e as u8).to_string(), durable]
            })
            .collect(),
    };
    write_file(&dir.join("groups.csv"), patients.to_csv(&stamp.comments())?.as_bytes())?;
    let report = json!({
        "n": ids.len(),
        "score_median": strata.median,
        "groups": groups_json,
        "log_rank": to_value(&lr),
    });
    write_json(&dir.join("survival_report.json"), &stamp.report(report))?;
    let hr = lr.hazard_ratio.map_or("undefined".into(), |h| format!("{h:.3}"));
    println!("log-rank χ² {:.4}, p {:.4e}, HR (high/low, O/E) {hr} → {}", lr.chi2, lr.p_value, dir.display());
    Ok(())
}

fn color() -> bool {
    std::env::var_os("ELF_NO_COLOR").is_none() && std::io::stdout().is_terminal()
}

pub fn verify(opts: &VerifyOptions) -> std::result::Result<(), Failure> {
    let outcomes = run_suite(opts);
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    let paint = color();
    for o in &outcomes {
        let tag = match (o.passed, paint) {
            (true, true) => "\x1b[32mPASS\x1b[0m",
            (false, true) => "\x1b[31mFAIL\x1b[0m",
            (true, false) => "PASS",
            (false, false) => "FAIL",
        };
        println!("{tag}  {:<width$}  {:>7.2}s  {}", o.name, o.seconds, o.detail);
    }
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.clone()).collect();
    let total: f64 = outcomes.iter().map(|o| o.seconds).sum();
    println!("{} of {} checks passed in {total:.1}s", outcomes.len() - failed.len(), outcomes.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(failed))
    }
}
