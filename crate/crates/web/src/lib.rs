//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export returns a JSON string; the page draws it on a canvas. The plain
//! `*_json` functions hold the logic so they can be tested natively.

use elf_core::attnmap::{attention_grid, GridSpec};
use elf_core::encoder::encode_bag;
use elf_core::model::EncoderConfig;
use elf_core::stats::{km_estimate, log_rank, median_stratify, KmCurve, RiskGroup, SurvivalRecord};
use elf_core::synth::{generate_corpus, CorpusConfig, Split};
use elf_core::trainer::{lr_schedule, momentum_schedule, train, MoCoState, Schedule, TrainConfig};
use elf_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn finish(r: Result<Value>) -> std::result::Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e.to_string()))
}

/// Trains a tiny two-model encoder and maps one held-out slide's attention
/// onto its patch lattice, next to the lattice of patches that carry signal.
pub fn attention_json(seed: u64, epochs: usize, tile: usize, stride: usize) -> Result<Value> {
    let dims = vec![16, 24];
    let mut cc = CorpusConfig::new(48, dims.clone());
    cc.seed = seed;
    cc.patches_per_slide = [36, 64];
    cc.signal_fraction = [0.15, 0.3];
    cc.val_fraction = 0.0;
    cc.test_fraction = 0.25;
    let corpus = generate_corpus(&cc)?;
    let tc = TrainConfig {
        epochs,
        warmup_epochs: (epochs / 10).min(epochs.saturating_sub(1)),
        batch_size: 12,
        seed,
        ..TrainConfig::desk()
    };
    let outcome = train(&corpus, MoCoState::init(EncoderConfig::desk(dims, 16, cc.n_organs), tc)?, &mut |_| {})?;
    let params = &outcome.final_state.base;
    let slide = corpus.split(Split::Test)[0];
    let spec = GridSpec { tile, stride };
    let signal: Vec<f64> = slide.signal.iter().map(|&s| s as u8 as f64).collect();
    let truth = attention_grid(&slide.coords, &signal, &spec)?;
    let mut models = Vec::new();
    for (m, bag) in slide.bags.iter().enumerate() {
        let attention = encode_bag(bag, &params.encoders[m])?.attention;
        let mass: f64 = attention.iter().zip(&slide.signal).filter(|(_, &s)| s).map(|(a, _)| a).sum();
        let grid = attention_grid(&slide.coords, &attention, &spec)?;
        models.push(json!({ "model": m, "values": grid.values, "degenerate": grid.degenerate, "signal_mass": mass }));
    }
    Ok(json!({
        "slide_id": slide.slide_id,
        "rows": truth.rows,
        "cols": truth.cols,
        "empty": truth.empty,
        "signal": truth.values,
        "signal_fraction": signal.iter().sum::<f64>() / signal.len() as f64,
        "models": models,
        "final_loss": outcome.log.last().map(|m| m.l_total),
    }))
}

#[wasm_bindgen]
pub fn attention_demo(seed: u32, epochs: u32, tile: u32, stride: u32) -> std::result::Result<String, JsValue> {
    finish(attention_json(seed as u64, epochs as usize, tile as usize, stride as usize))
}

/// Per-step learning rate and key-encoder momentum, thinned to at most
/// `max_points` samples.
pub fn schedules_json(
    peak_lr: f64,
    warmup_epochs: usize,
    epochs: usize,
    steps_per_epoch: usize,
    momentum_start: f64,
    momentum_end: f64,
    max_points: usize,
) -> Result<Value> {
    let tc = TrainConfig {
        peak_lr,
        warmup_epochs,
        epochs,
        batch_size: 1,
        momentum_start,
        momentum_end,
        ..TrainConfig::paper()
    };
    tc.validate()?;
    if steps_per_epoch == 0 || max_points < 2 {
        return Err(Error::Config("steps_per_epoch must be positive and max_points ≥ 2".into()));
    }
    let sched = Schedule::new(&tc, steps_per_epoch);
    let total = sched.total_steps;
    let every = total.div_ceil(max_points as u64 - 1).max(1);
    let mut steps: Vec<u64> = (0..=total).step_by(every as usize).chain(std::iter::once(total)).collect();
    steps.dedup();
    let lr: Vec<f64> = steps.iter().map(|&s| lr_schedule(s, &sched, peak_lr)).collect();
    let m: Vec<f64> = steps.iter().map(|&s| momentum_schedule(s, &sched, &tc)).collect();
    Ok(json!({ "steps": steps, "lr": lr, "momentum": m, "warmup_steps": sched.warmup_steps, "total_steps": total }))
}

#[wasm_bindgen]
pub fn schedules_demo(
    peak_lr: f64,
    warmup_epochs: u32,
    epochs: u32,
    steps_per_epoch: u32,
    momentum_start: f64,
    momentum_end: f64,
) -> std::result::Result<String, JsValue> {
    finish(schedules_json(
        peak_lr,
        warmup_epochs as usize,
        epochs as usize,
        steps_per_epoch as usize,
        momentum_start,
        momentum_end,
        400,
    ))
}

fn curve_json(c: &KmCurve) -> Value {
    let t: Vec<f64> = c.steps.iter().map(|s| s.time).collect();
    let s: Vec<f64> = c.steps.iter().map(|s| s.survival).collect();
    json!({ "time": t, "survival": s, "median": c.median })
}

/// Simulated cohort: a score splits patients at its median; the high-score
/// half has `hazard_ratio` times the baseline hazard of 1/24 per month.
pub fn survival_json(hazard_ratio: f64, n_per_arm: usize, follow_up: f64, seed: u64) -> Result<Value> {
    if !(hazard_ratio > 0.0) || n_per_arm < 2 || !(follow_up > 12.0) {
        return Err(Error::Config("need hazard_ratio > 0, n_per_arm ≥ 2 and follow_up > 12 months".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = 1.0 / 24.0;
    let mut scores = Vec::new();
    let mut outcomes = Vec::new();
    for arm in 0..2 {
        let exp = Exp::new(if arm == 1 { hazard_ratio * base } else { base }).expect("positive rate");
        for _ in 0..n_per_arm {
            scores.push(arm as f64 + rng.random::<f64>());
            let t: f64 = exp.sample(&mut rng);
            let censor = rng.random_range(12.0..follow_up);
            outcomes.push((t.min(censor), t <= censor));
        }
    }
    let strata = median_stratify(&scores)?;
    let records: Vec<SurvivalRecord> =
        outcomes.iter().zip(&strata.groups).map(|(&(t, e), &g)| SurvivalRecord::new(t, e, g)).collect();
    let group = |g: RiskGroup| records.iter().filter(|r| r.group == g).cloned().collect::<Vec<_>>();
    let (high, low) = (group(RiskGroup::High), group(RiskGroup::Low));
    let lr = log_rank(&high, &low)?;
    Ok(json!({
        "high": curve_json(&km_estimate(&high)?),
        "low": curve_json(&km_estimate(&low)?),
        "chi2": lr.chi2,
        "p_value": lr.p_value,
        "hazard_ratio": lr.hazard_ratio,
    }))
}

#[wasm_bindgen]
pub fn survival_demo(hazard_ratio: f64, n_per_arm: u32, follow_up: f64, seed: u32) -> std::result::Result<String, JsValue> {
    finish(survival_json(hazard_ratio, n_per_arm as usize, follow_up, seed as u64))
}
