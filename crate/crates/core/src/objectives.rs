//! Pretraining losses: InfoNCE over cross-model and cross-view positive pairs,
//! the two-view cancer/organ classification loss, their weighted sum, and the
//! exponential-moving-average update of the momentum encoder.
//!
//! Each loss has a value-level form used for evaluation and tests, and a tape
//! form used by the trainer.

use crate::encoder::PatchBag;
use crate::error::{bail, Result};
use crate::model::ModelParams;
use crate::params::ParamTree;
use crate::tensor::{log_sum_exp, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

pub const DEFAULT_TAU: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakLabels {
    pub cancer: usize,
    pub organ: usize,
}

impl WeakLabels {
    pub fn new(cancer: bool, organ: usize) -> Self {
        Self {
            cancer: cancer as usize,
            organ,
        }
    }

    pub fn check(&self, n_organs: usize) -> Result<()> {
        if self.cancer > 1 {
            bail!(Data, "cancer label {} is not binary", self.cancer);
        }
        if self.organ >= n_organs {
            bail!(Data, "organ label {} out of range for {} organs", self.organ, n_organs);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    /// Same patches, query from model `m`, key from a different model `m'`.
    CrossModel,
    /// Two overlapping patch subsets of the same model.
    CrossView,
}

/// One InfoNCE query set: every slide in the batch contributes one query and
/// one key, and each query's positive is the key of its own slide.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub kind: PairKind,
    pub query_model: usize,
    pub key_model: usize,
    /// Contribution to the contrastive loss; weights over a plan sum to 1.
    pub weight: f64,
}

/// Query sets for a step: all ordered cross-model pairs share `cross_model_ratio`
/// of the weight and the per-model cross-view sets share the rest. When only
/// one kind is available it receives the full weight.
pub fn plan_pairs(n_models: usize, overlap: f64, cross_model_ratio: f64) -> Result<Vec<QuerySet>> {
    if n_models == 0 {
        bail!(Config, "at least one model is required");
    }
    if !(0.0..=1.0).contains(&cross_model_ratio) {
        bail!(Config, "pair-type ratio must lie in [0, 1], got {}", cross_model_ratio);
    }
    let a_possible = n_models >= 2 && cross_model_ratio > 0.0;
    let b_possible = overlap > 0.0 && cross_model_ratio < 1.0;
    if !a_possible && !b_possible {
        if n_models < 2 && overlap <= 0.0 {
            bail!(Config, "a single model with zero view overlap has no valid positive pairs");
        }
        bail!(
            Config,
            "pair-type ratio {} selects a pair kind unavailable with {} models and overlap {}",
            cross_model_ratio,
            n_models,
            overlap
        );
    }
    let (wa, wb) = match (a_possible, b_possible) {
        (true, true) => (cross_model_ratio, 1.0 - cross_model_ratio),
        (true, false) => (1.0, 0.0),
        _ => (0.0, 1.0),
    };
    let mut sets = Vec::new();
    if a_possible {
        let n_pairs = (n_models * (n_models - 1)) as f64;
        for q in 0..n_models {
            for k in (0..n_models).filter(|&k| k != q) {
                sets.push(QuerySet {
                    kind: PairKind::CrossModel,
                    query_model: q,
                    key_model: k,
                    weight: wa / n_pairs,
                });
            }
        }
    }
    if b_possible {
        for m in 0..n_models {
            sets.push(QuerySet {
                kind: PairKind::CrossView,
                query_model: m,
                key_model: m,
                weight: wb / n_models as f64,
            });
        }
    }
    Ok(sets)
}

/// Value-level InfoNCE batch. Keys are shared by all queries.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub query_ids: Vec<String>,
    pub queries: Vec<Vec<f64>>,
    pub key_ids: Vec<String>,
    pub keys: Vec<Vec<f64>>,
    pub positive_index: Vec<usize>,
}

impl PairBatch {
    pub fn validate(&self) -> Result<()> {
        let nq = self.queries.len();
        if nq == 0 || self.keys.is_empty() {
            bail!(Contract, "pair batch needs at least one query and one key");
        }
        if self.query_ids.len() != nq || self.positive_index.len() != nq || self.key_ids.len() != self.keys.len() {
            bail!(Contract, "pair batch id/positive lists do not match the vectors");
        }
        let dim = self.queries[0].len();
        for v in self.queries.iter().chain(&self.keys) {
            if v.len() != dim {
                bail!(Dimension, "pair batch vectors have mixed widths {} and {}", dim, v.len());
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                bail!(Contract, "pair batch vector has norm {}, expected unit norm", norm);
            }
        }
        for (i, &p) in self.positive_index.iter().enumerate() {
            if p >= self.keys.len() || self.key_ids[p] != self.query_ids[i] {
                bail!(Contract, "query {} has no positive key from its own slide", i);
            }
        }
        Ok(())
    }

    pub fn n_negatives_per_query(&self) -> usize {
        self.keys.len() - 1
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        bail!(Contract, "temperature must be positive, got {}", tau);
    }
    Ok(())
}

/// Mean over queries of `−log softmax(q·K/τ)[positive]`.
pub fn info_nce(batch: &PairBatch, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    batch.validate()?;
    let mut total = 0.0;
    for (q, &pos) in batch.queries.iter().zip(&batch.positive_index) {
        let sims: Vec<f64> = batch
            .keys
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum())
            .collect();
        total += nce_from_similarities(&sims, pos, tau);
    }
    Ok(total / batch.queries.len() as f64)
}

/// `−log softmax(sims/τ)[pos]` for one query.
pub(crate) fn nce_from_similarities(sims: &[f64], pos: usize, tau: f64) -> f64 {
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    log_sum_exp(&logits) - logits[pos]
}

/// Tape form of [`info_nce`] for row-stacked unit queries `S×P` and keys `K×P`.
pub fn info_nce_on_tape(tape: &mut Tape, queries: Var, keys: Var, positives: &[usize], tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let kt = tape.transpose(keys)?;
    let sims = tape.matmul(queries, kt)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    tape.cross_entropy(logits, positives)
}

/// Per-view head outputs for one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLogits {
    pub cancer: Vec<f64>,
    pub organ: Vec<f64>,
}

fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        bail!(Data, "label {} out of range for {} classes", target, logits.len());
    }
    Ok(log_sum_exp(logits) - logits[target])
}

/// `¼[CE(c₁) + CE(c₂) + CE(o₁) + CE(o₂)]`, each term averaged over slides.
pub fn classification_loss(view1: &[HeadLogits], view2: &[HeadLogits], labels: &[WeakLabels]) -> Result<f64> {
    if view1.is_empty() || view1.len() != view2.len() || view1.len() != labels.len() {
        bail!(
            Contract,
            "classification loss needs matching nonempty views and labels ({}, {}, {})",
            view1.len(),
            view2.len(),
            labels.len()
        );
    }
    let mut total = 0.0;
    for ((a, b), y) in view1.iter().zip(view2).zip(labels) {
        if a.cancer.len() != 2 || b.cancer.len() != 2 {
            bail!(Dimension, "cancer head must output 2 logits");
        }
        total += cross_entropy(&a.cancer, y.cancer)?
            + cross_entropy(&b.cancer, y.cancer)?
            + cross_entropy(&a.organ, y.organ)?
            + cross_entropy(&b.organ, y.organ)?;
    }
    Ok(total / (4.0 * labels.len() as f64))
}

/// Tape form of [`classification_loss`] over row-stacked logits.
pub fn classification_loss_on_tape(
    tape: &mut Tape,
    cancer: [Var; 2],
    organ: [Var; 2],
    labels: &[WeakLabels],
) -> Result<Var> {
    let yc: Vec<usize> = labels.iter().map(|l| l.cancer).collect();
    let yo: Vec<usize> = labels.iter().map(|l| l.organ).collect();
    let terms = [
        tape.cross_entropy(cancer[0], &yc)?,
        tape.cross_entropy(cancer[1], &yc)?,
        tape.cross_entropy(organ[0], &yo)?,
        tape.cross_entropy(organ[1], &yo)?,
    ];
    let mut sum = terms[0];
    for t in &terms[1..] {
        sum = tape.add(sum, *t)?;
    }
    tape.scale(sum, 0.25)
}

pub fn total_loss(l_cont: f64, l_cls: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        bail!(Contract, "lambda must be nonnegative, got {}", lambda);
    }
    Ok(l_cont + lambda * l_cls)
}

/// `θ_k ← m·θ_k + (1 − m)·θ_q`. Each result is clamped to the interval spanned
/// by its two inputs, so equal entries are an exact fixed point and rounding
/// never leaves the convex hull.
pub fn momentum_update<P: ParamTree>(theta_q: &P, theta_k: &P, m: f64) -> Result<P> {
    if !(0.0..1.0).contains(&m) {
        bail!(Contract, "momentum coefficient must lie in [0, 1), got {}", m);
    }
    theta_q.check_same_structure(theta_k)?;
    let step = 1.0 - m;
    let updated = theta_q
        .tensors()
        .into_iter()
        .zip(theta_k.tensors())
        .map(|(q, k)| {
            let data = q.data().iter().zip(k.data()).map(|(&q, &k)| (m * k + step * q).clamp(q.min(k), q.max(k))).collect();
            Tensor::new(q.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    theta_k.with_tensors(updated)
}

/// Patch views of one slide: indices shared by all of the slide's models.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideViews {
    pub view1: Vec<usize>,
    pub view2: Vec<usize>,
}

/// Value-level positive-pair construction: for every query set of `plan`,
/// base-encoder queries (projector then predictor) against momentum-encoder
/// keys (projector only), one of each per slide.
pub fn build_positive_pairs(
    slides: &[&[PatchBag]],
    views: &[SlideViews],
    base: &ModelParams<Tensor>,
    momentum: &ModelParams<Tensor>,
    plan: &[QuerySet],
) -> Result<Vec<PairBatch>> {
    if slides.is_empty() || slides.len() != views.len() {
        bail!(Contract, "need one view pair per slide");
    }
    let n_models = base.encoders.len();
    // embed[slide][model][view] for both encoders
    let embed = |params: &ModelParams<Tensor>, query: bool| -> Result<Vec<Vec<[Vec<f64>; 2]>>> {
        slides
            .iter()
            .zip(views)
            .map(|(bags, v)| {
                if bags.len() != n_models {
                    bail!(Data, "slide has {} bags for {} models", bags.len(), n_models);
                }
                bags.iter()
                    .zip(&params.encoders)
                    .map(|(bag, enc)| {
                        let mut out = [Vec::new(), Vec::new()];
                        for (slot, idx) in out.iter_mut().zip([&v.view1, &v.view2]) {
                            let e = crate::encoder::encode_bag(&bag.subset(idx)?, enc)?;
                            *slot = if query {
                                predict(params, bag.model, &e.s_unified)?
                            } else {
                                params.project(bag.model, &e.s_unified)?
                            };
                        }
                        Ok(out)
                    })
                    .collect()
            })
            .collect()
    };
    let q = embed(base, true)?;
    let k = embed(momentum, false)?;
    let ids: Vec<String> = slides.iter().map(|b| b[0].slide_id.clone()).collect();
    plan.iter()
        .map(|set| {
            let key_view = match set.kind {
                PairKind::CrossModel => 0,
                PairKind::CrossView => 1,
            };
            let batch = PairBatch {
                query_ids: ids.clone(),
                queries: q.iter().map(|s| s[set.query_model][0].clone()).collect(),
                key_ids: ids.clone(),
                keys: k.iter().map(|s| s[set.key_model][key_view].clone()).collect(),
                positive_index: (0..ids.len()).collect(),
            };
            batch.validate()?;
            Ok(batch)
        })
        .collect()
}

/// Normalized `predictor(projector_m(s))`.
pub fn predict(params: &ModelParams<Tensor>, m: usize, s_unified: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(Tensor::matrix(1, s_unified.len(), s_unified.to_vec())?);
    let Some(proj) = bound.projectors.get(m) else {
        bail!(Contract, "no projector for model {}", m);
    };
    let z = proj.forward(&mut tape, x)?;
    let z = bound.predictor.forward(&mut tape, z)?;
    let z = tape.l2_normalize_rows(z)?;
    Ok(tape.value(z).data().to_vec())
}
