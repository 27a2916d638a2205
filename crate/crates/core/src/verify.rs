//! Built-in oracle suite: finite-difference gradient checks and statistics
//! cross-checks against brute-force or hand-tabulated answers.
//!
//! Every check draws its instances from a fixed seed, so a run is
//! reproducible and needs no artifacts on disk.

use crate::encoder::{encode_on_tape, AttentionLayout, EncoderParams, PatchBag};
use crate::error::Result;
use crate::model::{EncoderConfig, ModelParams};
use crate::objectives::{info_nce_on_tape, SlideViews, WeakLabels};
use crate::params::ParamTree;
use crate::stats::{auc, km_estimate, log_rank, wilcoxon_signed_rank, RiskGroup, SurvivalRecord};
use crate::tensor::{finite_diff_check_tampered, Tape, Tensor, Var};
use crate::trainer::{loss_of_params, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Largest accepted `|analytic − numeric| / max(1, |numeric|)`.
pub const GRAD_TOL: f64 = 1e-4;
pub const FD_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    /// Random instances per gradient check.
    pub points: usize,
    /// Random instances per statistics check.
    pub instances: usize,
    pub seed: u64,
    /// Negative control: offsets one analytic gradient entry in every check.
    pub corrupt_gradient: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { points: 100, instances: 100, seed: 0, corrupt_gradient: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn outcome(name: impl Into<String>, started: Instant, result: Result<(bool, String)>) -> CheckOutcome {
    let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome { name: name.into(), passed, detail, seconds: started.elapsed().as_secs_f64() }
}

fn rng_for(opts: &VerifyOptions, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(stream);
    rng
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("finite")
}

fn tamper_for(opts: &VerifyOptions) -> impl Fn(usize, &mut [f64]) + '_ {
    move |k, g| {
        if opts.corrupt_gradient && k == 0 && !g.is_empty() {
            g[0] += 1e-2 * (1.0 + g[0].abs());
        }
    }
}

/// Worst error over `opts.points` draws of `instance`.
fn worst_over_points(
    opts: &VerifyOptions,
    stream: u64,
    mut instance: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<(bool, String)> {
    let mut rng = rng_for(opts, stream);
    let mut worst = 0.0f64;
    for _ in 0..opts.points {
        worst = worst.max(instance(&mut rng)?);
    }
    Ok((worst < GRAD_TOL, format!("max rel err {worst:.2e} over {} points", opts.points)))
}

type TapeFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Contracts a tensor-valued output with fixed random weights so every
/// output coordinate contributes to the checked scalar.
fn contract(weights: Tensor, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> TapeFn {
    Box::new(move |t, v| {
        let y = f(t, v)?;
        let w = t.constant(weights.clone());
        let p = t.hadamard(y, w)?;
        t.sum(p)
    })
}

pub const TENSOR_OPS: &[&str] = &[
    "matmul",
    "add",
    "add_row",
    "hadamard",
    "scale",
    "tanh",
    "sigmoid",
    "gelu",
    "softmax_rows",
    "layer_norm",
    "resize_linear_up",
    "resize_linear_down",
    "concat_rows",
    "concat_cols",
    "slice_cols",
    "mean_axis0",
    "mean_axis1",
    "sum",
    "mean",
    "transpose",
    "l2_normalize_rows",
    "cross_entropy",
];

/// Random inputs and a scalar tape function exercising `op`.
fn op_instance(op: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, TapeFn) {
    let r = rng.random_range(1..=4usize);
    let c = rng.random_range(2..=5usize);
    let k = rng.random_range(1..=4usize);
    let x = |rng: &mut ChaCha8Rng, s: Vec<usize>| rand_tensor(rng, s, 1.5);
    let a = x(rng, vec![r, c]);
    let w_rc = x(rng, vec![r, c]);
    match op {
        "matmul" => {
            let b = x(rng, vec![c, k]);
            let w = x(rng, vec![r, k]);
            (vec![a, b], contract(w, |t, v| t.matmul(v[0], v[1])))
        }
        "add" => (vec![a, x(rng, vec![r, c])], contract(w_rc, |t, v| t.add(v[0], v[1]))),
        "add_row" => (vec![a, x(rng, vec![c])], contract(w_rc, |t, v| t.add_row(v[0], v[1]))),
        "hadamard" => (vec![a, x(rng, vec![r, c])], contract(w_rc, |t, v| t.hadamard(v[0], v[1]))),
        "scale" => {
            let s = rng.random_range(-2.0..2.0);
            (vec![a], contract(w_rc, move |t, v| t.scale(v[0], s)))
        }
        "tanh" => (vec![a], contract(w_rc, |t, v| t.tanh(v[0]))),
        "sigmoid" => (vec![a], contract(w_rc, |t, v| t.sigmoid(v[0]))),
        "gelu" => (vec![a], contract(w_rc, |t, v| t.gelu(v[0]))),
        "softmax_rows" => (vec![a], contract(w_rc, |t, v| t.softmax_rows(v[0]))),
        "layer_norm" => {
            let g = x(rng, vec![c]);
            let b = x(rng, vec![c]);
            (vec![a, g, b], contract(w_rc, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)))
        }
        "resize_linear_up" | "resize_linear_down" => {
            let target = if op.ends_with("up") { c + rng.random_range(1..=4) } else { rng.random_range(1..c) };
            let w = x(rng, vec![r, target]);
            (vec![a], contract(w, move |t, v| t.resize_linear(v[0], target)))
        }
        "concat_rows" => {
            let b = x(rng, vec![k, c]);
            let w = x(rng, vec![r + k, c]);
            (vec![a, b], contract(w, |t, v| t.concat(&[v[0], v[1]], 0)))
        }
        "concat_cols" => {
            let b = x(rng, vec![r, k]);
            let w = x(rng, vec![r, c + k]);
            (vec![a, b], contract(w, |t, v| t.concat(&[v[0], v[1]], 1)))
        }
        "slice_cols" => {
            let start = rng.random_range(0..c - 1);
            let end = rng.random_range(start + 1..=c);
            let w = x(rng, vec![r, end - start]);
            (vec![a], contract(w, move |t, v| t.slice_cols(v[0], start, end)))
        }
        "mean_axis0" => (vec![a], contract(x(rng, vec![1, c]), |t, v| t.mean_axis(v[0], 0))),
        "mean_axis1" => (vec![a], contract(x(rng, vec![r, 1]), |t, v| t.mean_axis(v[0], 1))),
        "sum" => (vec![a], Box::new(|t, v| t.sum(v[0]))),
        "mean" => (vec![a], Box::new(|t, v| t.mean(v[0]))),
        "transpose" => (vec![a], contract(x(rng, vec![c, r]), |t, v| t.transpose(v[0]))),
        "l2_normalize_rows" => (vec![a], contract(w_rc, |t, v| t.l2_normalize_rows(v[0]))),
        "cross_entropy" => {
            let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            (vec![a], Box::new(move |t, v| t.cross_entropy(v[0], &targets)))
        }
        other => unreachable!("unknown op {other}"),
    }
}

pub fn op_gradient_checks(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let tamper = tamper_for(opts);
    TENSOR_OPS
        .iter()
        .enumerate()
        .map(|(i, op)| {
            let started = Instant::now();
            let res = worst_over_points(opts, 100 + i as u64, |rng| {
                let (inputs, f) = op_instance(op, rng);
                finite_diff_check_tampered(f, &inputs, FD_EPS, &tamper)
            });
            outcome(format!("grad/{op}"), started, res)
        })
        .collect()
}

fn randomize<P: ParamTree>(params: &P, rng: &mut ChaCha8Rng, scale: f64) -> Result<P> {
    params.with_tensors(params.tensors().iter().map(|t| rand_tensor(rng, t.shape().to_vec(), scale)).collect())
}

/// Encoder over several bags → normalized slide embeddings → InfoNCE against
/// fixed unit keys, differentiated with respect to every encoder parameter.
pub fn encoder_info_nce_check(opts: &VerifyOptions) -> CheckOutcome {
    let started = Instant::now();
    let tamper = tamper_for(opts);
    let layout = AttentionLayout { unified_dim: 8, n_heads: 2, attn_hidden: 3, ln_eps: 1e-5 };
    let res = worst_over_points(opts, 10, |rng| {
        let template = EncoderParams::init(layout, rng)?;
        let params = randomize(&template, rng, 0.8)?;
        let n_slides = rng.random_range(2..=4usize);
        let bags: Vec<Tensor> = (0..n_slides)
            .map(|_| {
                let n = rng.random_range(1..=6usize);
                rand_tensor(rng, vec![n, 5], 1.0)
            })
            .collect();
        let mut keys = rand_tensor(rng, vec![n_slides, 8], 1.0).into_data();
        for row in keys.chunks_mut(8) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        let keys = Tensor::matrix(n_slides, 8, keys)?;
        let positives: Vec<usize> = (0..n_slides).collect();
        let inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let f = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let mut it = v.iter().copied();
            let bound = template.map("enc", &mut |_, _| it.next().expect("one var per tensor"));
            let rows = bags
                .iter()
                .map(|b| encode_on_tape(t, &bound, b).map(|o| o.s_unified))
                .collect::<Result<Vec<_>>>()?;
            let s = t.concat(&rows, 0)?;
            let q = t.l2_normalize_rows(s)?;
            let k = t.constant(keys.clone());
            info_nce_on_tape(t, q, k, &positives, 0.2)
        };
        finite_diff_check_tampered(f, &inputs, FD_EPS, &tamper)
    });
    outcome("grad/encoder_info_nce", started, res)
}

/// The complete pretraining objective `L_cont + λ·L_cls` over a tiny
/// two-model ensemble, differentiated with respect to every base parameter.
pub fn total_loss_check(opts: &VerifyOptions) -> CheckOutcome {
    let started = Instant::now();
    let tamper = tamper_for(opts);
    let mut enc = EncoderConfig::desk(vec![3, 5], 4, 3);
    enc.n_heads = 2;
    enc.proj_hidden = 4;
    enc.proj_dim = 3;
    enc.pred_hidden = 4;
    let train = TrainConfig::desk();
    let res = worst_over_points(opts, 11, |rng| {
        let template = ModelParams::init(&enc, rng)?;
        let base = randomize(&template, rng, 0.8)?;
        let momentum = randomize(&template, rng, 0.8)?;
        let n_slides = rng.random_range(2..=3usize);
        let mut slides = Vec::new();
        let mut views = Vec::new();
        let mut labels = Vec::new();
        for s in 0..n_slides {
            let n = rng.random_range(2..=5usize);
            let bags: Vec<PatchBag> = enc
                .model_dims
                .iter()
                .enumerate()
                .map(|(m, &d)| PatchBag::new(format!("s{s}"), m, rand_tensor(rng, vec![n, d], 1.0)))
                .collect::<Result<_>>()?;
            let (v1, v2) = crate::synth::sample_view_indices(n, 0.75, 0.5, rng)?;
            slides.push(bags);
            views.push(SlideViews { view1: v1, view2: v2 });
            labels.push(WeakLabels::new(rng.random(), rng.random_range(0..enc.n_organs)));
        }
        let inputs: Vec<Tensor> = base.tensors().into_iter().cloned().collect();
        let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let bags: Vec<&[PatchBag]> = slides.iter().map(|b| b.as_slice()).collect();
            loss_of_params(t, v, &template, &momentum, &bags, &views, &labels, &train)
        };
        finite_diff_check_tampered(f, &inputs, FD_EPS, &tamper)
    });
    outcome("grad/total_loss", started, res)
}

/// Two-sided exact p by walking all 2ⁿ sign patterns of the nonzero |d| ranks.
pub fn wilcoxon_enumerated_p(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = d.len();
    let ranks: Vec<f64> = (0..n)
        .map(|i| {
            let less = d.iter().filter(|x| x.abs() < d[i].abs()).count() as f64;
            let equal = d.iter().filter(|x| x.abs() == d[i].abs()).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let w: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| ranks[i]).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0..(1u64 << n) {
        let s: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        le += (s <= w + 1e-9) as u64;
        ge += (s >= w - 1e-9) as u64;
    }
    (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)
}

pub fn wilcoxon_check(opts: &VerifyOptions) -> CheckOutcome {
    let started = Instant::now();
    let mut rng = rng_for(opts, 20);
    let res = (|| {
        let mut worst = 0.0f64;
        let mut done = 0;
        while done < opts.instances {
            let n = rng.random_range(1..=10usize);
            // coarse grid values so ties and zeros occur
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-6..=6) as f64 * 0.25).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-6..=6) as f64 * 0.25).collect();
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            if d.iter().all(|v| *v == 0.0) {
                continue;
            }
            let got = wilcoxon_signed_rank(&a, &b)?;
            worst = worst.max((got.p_value - wilcoxon_enumerated_p(&d)).abs());
            done += 1;
        }
        Ok((worst <= 1e-12, format!("max |Δp| {worst:.1e} over {} instances", opts.instances)))
    })();
    outcome("stats/wilcoxon_exact_vs_enumeration", started, res)
}

/// Fraction of (positive, negative) pairs ordered correctly, ties ½.
pub fn auc_pairs(y: &[bool], s: &[f64]) -> f64 {
    let (mut good, mut total) = (0.0, 0.0);
    for i in 0..y.len() {
        for j in 0..y.len() {
            if y[i] && !y[j] {
                total += 1.0;
                good += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    good / total
}

pub fn auc_check(opts: &VerifyOptions) -> CheckOutcome {
    let started = Instant::now();
    let mut rng = rng_for(opts, 21);
    let res = (|| {
        let mut worst = 0.0f64;
        for _ in 0..opts.instances {
            let n = rng.random_range(2..=40usize);
            let mut y: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            y[0] = true;
            y[1] = false;
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
            worst = worst.max((auc(&y, &s)? - auc_pairs(&y, &s)).abs());
        }
        Ok((worst <= 1e-12, format!("max |Δauc| {worst:.1e} over {} instances", opts.instances)))
    })();
    outcome("stats/auc_vs_pairs", started, res)
}

pub fn km_check(opts: &VerifyOptions) -> CheckOutcome {
    let started = Instant::now();
    let mut rng = rng_for(opts, 22);
    let res = (|| {
        let trials = opts.instances.div_ceil(2);
        for _ in 0..trials {
            let n = rng.random_range(1..=30usize);
            let times: Vec<f64> = (0..n).map(|_| rng.random_range(0..12) as f64).collect();
            let recs: Vec<SurvivalRecord> = times.iter().map(|&t| SurvivalRecord::new(t, true, RiskGroup::Low)).collect();
            let curve = km_estimate(&recs)?;
            for step in &curve.steps {
                let surviving = times.iter().filter(|&&t| t > step.time).count();
                let empirical = surviving as f64 / n as f64;
                if step.survival != empirical {
                    return Ok((false, format!("S({}) = {} but empirical {}", step.time, step.survival, empirical)));
                }
            }
        }
        let hand = km_estimate(&[1.0, 2.0, 3.0].map(|t| SurvivalRecord::new(t, true, RiskGroup::Low)))?;
        let s: Vec<f64> = hand.steps.iter().map(|s| s.survival).collect();
        if s != [2.0 / 3.0, 1.0 / 3.0, 0.0] || hand.median != Some(2.0) {
            return Ok((false, format!("hand case gave {s:?}")));
        }
        Ok((true, format!("{trials} uncensored instances exact; hand cases match")))
    })();
    outcome("stats/km_vs_empirical", started, res)
}

pub fn log_rank_check(_opts: &VerifyOptions) -> CheckOutcome {
    let started = Instant::now();
    let res = (|| {
        let rec = |t: f64, e: bool| SurvivalRecord::new(t, e, RiskGroup::Low);
        let a = [rec(1.0, true), rec(2.0, true)];
        let b = [rec(3.0, true), rec(4.0, true)];
        let r = log_rank(&a, &b)?;
        // t=1: E_a = 1/2, V = 1/4; t=2: E_a = 1/3, V = 2/9; later times have no A at risk.
        let chi2 = (2.0f64 - 5.0 / 6.0).powi(2) / (1.0 / 4.0 + 2.0 / 9.0);
        if (r.chi2 - chi2).abs() > 1e-9 {
            return Ok((false, format!("chi2 {} vs hand {}", r.chi2, chi2)));
        }
        let c = [rec(1.0, true), rec(2.0, false), rec(2.0, true), rec(5.0, true)];
        let d = [rec(1.0, false), rec(3.0, true), rec(4.0, false)];
        // t=1: n=(4,3) d=(1,0): E=4/7, V=(1)(4/7)(3/7)(6/6)=12/49
        // t=2: n=(3,2) d=(1,0): E=3/5, V=(3/5)(2/5)=6/25
        // t=3: n=(1,2) d=(0,1): E=1/3, V=(1/3)(2/3)=2/9
        // t=5: n=(1,0) d=(1,0): E=1, V=0
        let o_e = 3.0 - (4.0 / 7.0 + 3.0 / 5.0 + 1.0 / 3.0 + 1.0);
        let v = 12.0 / 49.0 + 6.0 / 25.0 + 2.0 / 9.0;
        let r2 = log_rank(&c, &d)?;
        if (r2.chi2 - o_e * o_e / v).abs() > 1e-9 {
            return Ok((false, format!("censored case chi2 {} vs hand {}", r2.chi2, o_e * o_e / v)));
        }
        let same = log_rank(&c, &c)?;
        if same.chi2 != 0.0 || same.p_value != 1.0 {
            return Ok((false, format!("identical groups gave chi2 {} p {}", same.chi2, same.p_value)));
        }
        Ok((true, "hand-tabulated chi2 match; identical groups give p = 1".into()))
    })();
    outcome("stats/log_rank_hand_cases", started, res)
}

pub fn gradient_checks(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let mut out = op_gradient_checks(opts);
    out.push(encoder_info_nce_check(opts));
    out.push(total_loss_check(opts));
    out
}

pub fn statistics_checks(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    vec![wilcoxon_check(opts), auc_check(opts), km_check(opts), log_rank_check(opts)]
}

pub fn run_suite(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let mut out = gradient_checks(opts);
    out.extend(statistics_checks(opts));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(corrupt: bool) -> VerifyOptions {
        VerifyOptions { points: 3, instances: 20, seed: 5, corrupt_gradient: corrupt }
    }

    #[test]
    fn quick_suite_passes() {
        let failed: Vec<CheckOutcome> = run_suite(&quick(false)).into_iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let checks = gradient_checks(&quick(true));
        assert!(checks.iter().all(|c| !c.passed), "{checks:#?}");
        assert!(statistics_checks(&quick(true)).iter().all(|c| c.passed));
    }

    #[test]
    fn enumerated_wilcoxon_reference() {
        assert_eq!(wilcoxon_enumerated_p(&[1.0, 2.0, 3.0]), 0.25);
        assert_eq!(wilcoxon_enumerated_p(&[-1.0, 2.0]), 1.0);
    }
}
