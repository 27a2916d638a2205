use super::{adamw_step, lr_schedule, momentum_schedule, MoCoState, Schedule, TrainConfig};
use crate::encoder::{encode_bag, encode_on_tape, PatchBag};
use crate::error::{bail, Error, Result};
use crate::io::digest_hex;
use crate::model::ModelParams;
use crate::objectives::{
    classification_loss_on_tape, info_nce_on_tape, momentum_update, plan_pairs, PairKind, QuerySet,
    SlideViews, WeakLabels,
};
use crate::params::ParamTree;
use crate::stats::balanced_accuracy;
use crate::synth::{sample_view_indices, Corpus, Split, SyntheticSlide};
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_cont: f64,
    pub l_cls: f64,
    pub l_total: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub step: u64,
    pub l_cont: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub lr: f64,
    pub m: f64,
    pub val_organ_ba: Option<f64>,
    pub val_cancer_ba: Option<f64>,
    pub digest: String,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_state: MoCoState,
    /// State at the best validation score, when validation ran.
    pub best: Option<MoCoState>,
    pub log: Vec<EpochMetrics>,
}

/// Patch indices for the two views of a bag, after capping its size.
fn draw_views<R: Rng + ?Sized>(n: usize, config: &TrainConfig, rng: &mut R) -> Result<SlideViews> {
    let pool: Vec<usize> = if n > config.max_patches {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(rng);
        let mut kept = all[..config.max_patches].to_vec();
        kept.sort_unstable();
        kept
    } else {
        (0..n).collect()
    };
    let (a, b) = sample_view_indices(pool.len(), config.view_fraction, config.view_overlap, rng)?;
    Ok(SlideViews {
        view1: a.iter().map(|&i| pool[i]).collect(),
        view2: b.iter().map(|&i| pool[i]).collect(),
    })
}

/// Row-stacked, normalized momentum-encoder projections `[view1, view2]`
/// for every model.
fn momentum_keys(momentum: &ModelParams<Tensor>, bags: &[&[PatchBag]], views: &[SlideViews]) -> Result<Vec<[Tensor; 2]>> {
    (0..momentum.encoders.len())
        .map(|m| {
            let mut out = [Vec::new(), Vec::new()];
            for (slide, v) in bags.iter().zip(views) {
                for (rows, idx) in out.iter_mut().zip([&v.view1, &v.view2]) {
                    let e = encode_bag(&slide[m].subset(idx)?, &momentum.encoders[m])?;
                    rows.push(momentum.project(m, &e.s_unified)?);
                }
            }
            let [a, b] = out;
            Ok([Tensor::from_rows(&a)?, Tensor::from_rows(&b)?])
        })
        .collect()
}

/// Records `L_cont + λ·L_cls` for one batch; returns `(total, cont, cls)`.
fn loss_on_tape(
    tape: &mut Tape,
    base: &ModelParams<Var>,
    keys: &[[Tensor; 2]],
    bags: &[&[PatchBag]],
    views: &[SlideViews],
    labels: &[WeakLabels],
    plan: &[QuerySet],
    config: &TrainConfig,
) -> Result<(Var, Var, Var)> {
    let n_models = base.encoders.len();
    let mut s_unified = vec![[None, None]; n_models];
    let mut fused_parts: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
    for m in 0..n_models {
        for (v, slot) in [0usize, 1].into_iter().zip(fused_parts.iter_mut()) {
            let mut uni = Vec::with_capacity(bags.len());
            let mut raw = Vec::with_capacity(bags.len());
            for (slide, sv) in bags.iter().zip(views) {
                let idx = if v == 0 { &sv.view1 } else { &sv.view2 };
                let x = slide[m].embeddings.select_rows(idx)?;
                let out = encode_on_tape(tape, &base.encoders[m], &x)?;
                uni.push(out.s_unified);
                raw.push(out.s_raw);
            }
            let u = tape.concat(&uni, 0)?;
            let r = tape.concat(&raw, 0)?;
            s_unified[m][v] = Some(u);
            slot.push(u);
            slot.push(r);
        }
    }

    let mut cancer = [None, None];
    let mut organ = [None, None];
    for v in 0..2 {
        let fused = tape.concat(&fused_parts[v], 1)?;
        cancer[v] = Some(base.cancer_head.forward(tape, fused)?);
        organ[v] = Some(base.organ_head.forward(tape, fused)?);
    }
    let l_cls = classification_loss_on_tape(
        tape,
        [cancer[0].unwrap(), cancer[1].unwrap()],
        [organ[0].unwrap(), organ[1].unwrap()],
        labels,
    )?;

    let mut queries: Vec<Option<Var>> = vec![None; n_models];
    let positives: Vec<usize> = (0..bags.len()).collect();
    let mut l_cont: Option<Var> = None;
    for set in plan {
        let q = match queries[set.query_model] {
            Some(q) => q,
            None => {
                let s = s_unified[set.query_model][0].expect("encoded above");
                let z = base.projectors[set.query_model].forward(tape, s)?;
                let z = base.predictor.forward(tape, z)?;
                let q = tape.l2_normalize_rows(z)?;
                queries[set.query_model] = Some(q);
                q
            }
        };
        let key_view = match set.kind {
            PairKind::CrossModel => 0,
            PairKind::CrossView => 1,
        };
        let k = tape.constant(keys[set.key_model][key_view].clone());
        let l = info_nce_on_tape(tape, q, k, &positives, config.tau)?;
        let l = tape.scale(l, set.weight)?;
        l_cont = Some(match l_cont {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let l_cont = l_cont.expect("plans are nonempty");
    let weighted = tape.scale(l_cls, config.lambda)?;
    let total = tape.add(l_cont, weighted)?;
    Ok((total, l_cont, l_cls))
}

/// Loss and base-parameter gradients for one batch.
pub(crate) fn batch_gradients(
    base: &ModelParams<Tensor>,
    momentum: &ModelParams<Tensor>,
    bags: &[&[PatchBag]],
    views: &[SlideViews],
    labels: &[WeakLabels],
    config: &TrainConfig,
) -> Result<(StepLosses, Vec<Tensor>)> {
    let plan = plan_pairs(base.encoders.len(), config.view_overlap, config.pair_ratio)?;
    let keys = momentum_keys(momentum, bags, views)?;
    let mut tape = Tape::new();
    let bound = base.bind(&mut tape, true);
    let (total, cont, cls) = loss_on_tape(&mut tape, &bound, &keys, bags, views, labels, &plan, config)?;
    let losses = StepLosses {
        l_cont: tape.value(cont).item()?,
        l_cls: tape.value(cls).item()?,
        l_total: tape.value(total).item()?,
    };
    let grads = tape.backward(total)?;
    Ok((losses, ModelParams::grads_of(&bound, &grads)))
}

/// Scalar total loss as a tape function of flattened base parameters;
/// momentum keys are computed from `momentum` and held constant.
pub fn loss_of_params(
    tape: &mut Tape,
    params: &[Var],
    template: &ModelParams<Tensor>,
    momentum: &ModelParams<Tensor>,
    bags: &[&[PatchBag]],
    views: &[SlideViews],
    labels: &[WeakLabels],
    config: &TrainConfig,
) -> Result<Var> {
    let plan = plan_pairs(template.encoders.len(), config.view_overlap, config.pair_ratio)?;
    let keys = momentum_keys(momentum, bags, views)?;
    let bound = template.rebind(params)?;
    Ok(loss_on_tape(tape, &bound, &keys, bags, views, labels, &plan, config)?.0)
}

/// One optimizer step: gradients, AdamW at the scheduled learning rate, then
/// the momentum-encoder update at the scheduled coefficient.
pub fn train_step(
    state: &mut MoCoState,
    slides: &[&SyntheticSlide],
    views: &[SlideViews],
    schedule: &Schedule,
) -> Result<StepLosses> {
    let bags: Vec<&[PatchBag]> = slides.iter().map(|s| s.bags.as_slice()).collect();
    let labels: Vec<WeakLabels> = slides.iter().map(|s| WeakLabels::new(s.cancer, s.organ)).collect();
    let (losses, grads) = batch_gradients(&state.base, &state.momentum, &bags, views, &labels, &state.train)?;
    if !losses.l_total.is_finite() {
        return Err(Error::NonFinite { op: "total loss" });
    }
    let t = state.step + 1;
    let lr = lr_schedule(t, schedule, state.train.peak_lr);
    let m = momentum_schedule(t, schedule, &state.train);
    state.base = adamw_step(&state.base, &grads, &mut state.adam, t, lr, &state.train)?;
    state.momentum = momentum_update(&state.base, &state.momentum, m)?;
    state.step = t;
    Ok(losses)
}

/// Balanced accuracies `(organ, cancer)` of the pretraining heads on `slides`.
pub fn evaluate_heads(params: &ModelParams<Tensor>, slides: &[&SyntheticSlide], max_patches: usize) -> Result<(f64, f64)> {
    let (mut yo, mut po, mut yc, mut pc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in slides {
        let bags: Vec<PatchBag> = s
            .bags
            .iter()
            .map(|b| {
                if b.n_patches() > max_patches {
                    b.subset(&(0..max_patches).collect::<Vec<_>>())
                } else {
                    Ok(b.clone())
                }
            })
            .collect::<Result<_>>()?;
        let rep = params.represent(&bags)?;
        let (lc, lo) = params.head_logits(&rep.fused)?;
        yo.push(s.organ);
        po.push(argmax(&lo));
        yc.push(s.cancer as usize);
        pc.push(argmax(&lc));
    }
    Ok((balanced_accuracy(&yo, &po)?, balanced_accuracy(&yc, &pc)?))
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    rng
}

/// Runs epochs `state.epoch..epochs` on the corpus's training split, so a
/// loaded checkpoint resumes exactly where it stopped. Validation on the
/// `val` split every `validate_every` epochs keeps the state with the best
/// mean of organ and cancer balanced accuracy.
pub fn train(corpus: &Corpus, mut state: MoCoState, on_epoch: &mut dyn FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    state.encoder.validate()?;
    state.train.validate()?;
    let train_set = corpus.split(Split::Train);
    let val_set = corpus.split(Split::Val);
    if train_set.is_empty() {
        bail!(Data, "corpus has no training slides");
    }
    for s in corpus.slides.iter().take(1) {
        state.encoder.check_bags(&s.bags)?;
    }
    for s in &corpus.slides {
        WeakLabels::new(s.cancer, s.organ).check(state.encoder.n_organs)?;
    }
    let config = state.train.clone();
    let schedule = Schedule::new(&config, train_set.len());
    let digest = digest_hex(&state.config_digest()?);
    let mut log = Vec::new();
    let mut best = None;

    while state.epoch < config.epochs as u64 {
        let mut rng = epoch_rng(config.seed, state.epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut n_steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let slides: Vec<&SyntheticSlide> = chunk.iter().map(|&i| train_set[i]).collect();
            let views = slides
                .iter()
                .map(|s| draw_views(s.n_patches(), &config, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let losses = train_step(&mut state, &slides, &views, &schedule).map_err(|e| match e {
                Error::NonFinite { op } => Error::Numerical(format!(
                    "non-finite value in {op} at epoch {}, step {}; epoch-mean losses so far: cont {:.6}, cls {:.6}",
                    state.epoch + 1,
                    state.step + 1,
                    sums[0] / n_steps.max(1) as f64,
                    sums[1] / n_steps.max(1) as f64
                )),
                other => other,
            })?;
            sums[0] += losses.l_cont;
            sums[1] += losses.l_cls;
            sums[2] += losses.l_total;
            n_steps += 1;
        }
        state.epoch += 1;

        let (mut val_organ_ba, mut val_cancer_ba) = (None, None);
        if state.epoch % config.validate_every as u64 == 0 && !val_set.is_empty() {
            let (o, c) = evaluate_heads(&state.base, &val_set, config.max_patches)?;
            val_organ_ba = Some(o);
            val_cancer_ba = Some(c);
            let score = 0.5 * (o + c);
            if state.best_score.is_none_or(|b| score > b) {
                state.best_score = Some(score);
                best = Some(state.clone());
            }
        }
        let n = n_steps as f64;
        let metrics = EpochMetrics {
            epoch: state.epoch,
            step: state.step,
            l_cont: sums[0] / n,
            l_cls: sums[1] / n,
            l_total: sums[2] / n,
            lr: lr_schedule(state.step, &schedule, config.peak_lr),
            m: momentum_schedule(state.step, &schedule, &config),
            val_organ_ba,
            val_cancer_ba,
            digest: digest.clone(),
            seed: config.seed,
        };
        on_epoch(&metrics);
        log.push(metrics);
    }
    Ok(TrainOutcome {
        final_state: state,
        best,
        log,
    })
}
