//! Seeded synthetic multi-model slide corpora.
//!
//! Each slide draws a latent vector `z` around its organ mean, optionally
//! shifted along a shared cancer direction. A slide holds a variable number
//! of patches laid out on a virtual lattice; a contiguous cluster of "signal"
//! patches carries the slide latent while the remaining background patches
//! carry only the organ mean. Virtual model `m` sees patch latent `l_p`
//! through its own fixed map and latent mask:
//!
//! `x_p = tanh(W_m (l_p ⊙ mask_m) + signal_p · v_m) + ε`
//!
//! where `l_p` includes a per-patch jitter that is centered within the slide,
//! `v_m` is a per-model marker direction for signal patches, and
//! `ε ~ N(0, noise_sigma²)`. Everything is derived from the seed: global
//! structure from stream 0 and slide `i` from stream `i + 1`, so slides can
//! be generated in any order.

use crate::encoder::{PatchBag, DEFAULT_MAX_PATCHES};
use crate::error::{bail, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CancerRule {
    /// Bernoulli(prevalence) label that shifts `z` along a fixed direction.
    Shift,
    /// Label is 1 when the slide's deviation summed over these latents is positive.
    Latents { indices: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_slides: usize,
    pub n_models: usize,
    pub model_dims: Vec<usize>,
    #[serde(default = "defaults::patches")]
    pub patches_per_slide: [usize; 2],
    #[serde(default = "defaults::n_organs")]
    pub n_organs: usize,
    #[serde(default = "defaults::prevalence")]
    pub cancer_prevalence: f64,
    #[serde(default = "defaults::cancer_rule")]
    pub cancer_rule: CancerRule,
    #[serde(default = "defaults::latent_dim")]
    pub latent_dim: usize,
    /// Latent coordinates each model observes; `None` means all of them.
    #[serde(default)]
    pub model_latent_masks: Option<Vec<Vec<usize>>>,
    #[serde(default = "defaults::organ_separation")]
    pub organ_separation: f64,
    #[serde(default = "defaults::slide_sigma")]
    pub slide_sigma: f64,
    #[serde(default = "defaults::cancer_shift")]
    pub cancer_shift: f64,
    #[serde(default = "defaults::jitter_sigma")]
    pub jitter_sigma: f64,
    #[serde(default = "defaults::noise_sigma")]
    pub noise_sigma: f64,
    /// Range of the fraction of patches that carry the slide latent.
    #[serde(default = "defaults::signal_fraction")]
    pub signal_fraction: [f64; 2],
    #[serde(default = "defaults::marker_strength")]
    pub marker_strength: f64,
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    use super::CancerRule;
    pub fn patches() -> [usize; 2] {
        [8, 64]
    }
    pub fn n_organs() -> usize {
        4
    }
    pub fn prevalence() -> f64 {
        0.5
    }
    pub fn cancer_rule() -> CancerRule {
        CancerRule::Shift
    }
    pub fn latent_dim() -> usize {
        16
    }
    pub fn organ_separation() -> f64 {
        1.0
    }
    pub fn slide_sigma() -> f64 {
        1.5
    }
    pub fn cancer_shift() -> f64 {
        5.0
    }
    pub fn jitter_sigma() -> f64 {
        0.3
    }
    pub fn noise_sigma() -> f64 {
        0.05
    }
    pub fn signal_fraction() -> [f64; 2] {
        [0.5, 0.9]
    }
    pub fn marker_strength() -> f64 {
        1.0
    }
    pub fn val_fraction() -> f64 {
        0.1
    }
}

impl CorpusConfig {
    /// Desk-scale defaults for `n_slides` slides over models of the given widths.
    pub fn new(n_slides: usize, model_dims: Vec<usize>) -> Self {
        Self {
            n_slides,
            n_models: model_dims.len(),
            model_dims,
            patches_per_slide: defaults::patches(),
            n_organs: defaults::n_organs(),
            cancer_prevalence: defaults::prevalence(),
            cancer_rule: defaults::cancer_rule(),
            latent_dim: defaults::latent_dim(),
            model_latent_masks: None,
            organ_separation: defaults::organ_separation(),
            slide_sigma: defaults::slide_sigma(),
            cancer_shift: defaults::cancer_shift(),
            jitter_sigma: defaults::jitter_sigma(),
            noise_sigma: defaults::noise_sigma(),
            signal_fraction: defaults::signal_fraction(),
            marker_strength: defaults::marker_strength(),
            val_fraction: defaults::val_fraction(),
            test_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slides == 0 {
            bail!(Config, "n_slides must be positive");
        }
        if self.n_models == 0 || self.model_dims.len() != self.n_models {
            bail!(
                Config,
                "model_dims has {} entries for n_models = {}",
                self.model_dims.len(),
                self.n_models
            );
        }
        if self.model_dims.contains(&0) {
            bail!(Config, "model dims must be positive");
        }
        let [lo, hi] = self.patches_per_slide;
        if lo == 0 || lo > hi || hi > DEFAULT_MAX_PATCHES {
            bail!(
                Config,
                "patches_per_slide [{}, {}] must satisfy 1 <= min <= max <= {}",
                lo,
                hi,
                DEFAULT_MAX_PATCHES
            );
        }
        if self.n_organs == 0 {
            bail!(Config, "n_organs must be positive");
        }
        if !(self.cancer_prevalence > 0.0 && self.cancer_prevalence < 1.0) {
            bail!(Config, "cancer_prevalence must lie in (0, 1)");
        }
        if self.latent_dim == 0 {
            bail!(Config, "latent_dim must be positive");
        }
        if let Some(masks) = &self.model_latent_masks {
            if masks.len() != self.n_models {
                bail!(Config, "{} latent masks for {} models", masks.len(), self.n_models);
            }
            for (m, mask) in masks.iter().enumerate() {
                if mask.is_empty() || mask.iter().any(|&i| i >= self.latent_dim) {
                    bail!(Config, "latent mask of model {} must be a nonempty subset of [0, {})", m, self.latent_dim);
                }
            }
        }
        if let CancerRule::Latents { indices } = &self.cancer_rule {
            if indices.is_empty() || indices.iter().any(|&i| i >= self.latent_dim) {
                bail!(Config, "cancer_rule latents must be a nonempty subset of [0, {})", self.latent_dim);
            }
        }
        let [flo, fhi] = self.signal_fraction;
        if !(0.0 < flo && flo <= fhi && fhi <= 1.0) {
            bail!(Config, "signal_fraction must satisfy 0 < min <= max <= 1");
        }
        for (name, v) in [
            ("organ_separation", self.organ_separation),
            ("slide_sigma", self.slide_sigma),
            ("cancer_shift", self.cancer_shift),
            ("jitter_sigma", self.jitter_sigma),
            ("noise_sigma", self.noise_sigma),
            ("marker_strength", self.marker_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bail!(Config, "{} must be finite and nonnegative", name);
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..1.0).contains(&self.test_fraction) {
            bail!(Config, "val_fraction and test_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    fn mask(&self, m: usize) -> Vec<usize> {
        match &self.model_latent_masks {
            Some(masks) => masks[m].clone(),
            None => (0..self.latent_dim).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSlide {
    pub slide_id: String,
    pub organ: usize,
    pub cancer: bool,
    pub latent: Vec<f64>,
    pub split: Split,
    /// Lattice position `(row, col)` of each patch.
    pub coords: Vec<(u32, u32)>,
    /// Whether each patch carries the slide latent.
    pub signal: Vec<bool>,
    /// One bag per model, in model order.
    pub bags: Vec<PatchBag>,
}

impl SyntheticSlide {
    pub fn n_patches(&self) -> usize {
        self.coords.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub slides: Vec<SyntheticSlide>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&SyntheticSlide> {
        self.slides.iter().filter(|s| s.split == split).collect()
    }

    pub fn model_dims(&self) -> &[usize] {
        &self.config.model_dims
    }

    pub fn find(&self, slide_id: &str) -> Option<&SyntheticSlide> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }
}

struct ModelMap {
    mask: Vec<usize>,
    /// `dim × |mask|`, row-major.
    weights: Vec<f64>,
    marker: Vec<f64>,
    dim: usize,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn slide_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let l = config.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let organ_means: Vec<Vec<f64>> = (0..config.n_organs)
        .map(|_| (0..l).map(|_| config.organ_separation * normal(&mut rng)).collect())
        .collect();
    let mut cancer_dir: Vec<f64> = (0..l).map(|_| normal(&mut rng)).collect();
    let norm = cancer_dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    cancer_dir.iter_mut().for_each(|v| *v /= norm);

    let maps: Vec<ModelMap> = (0..config.n_models)
        .map(|m| {
            let mask = config.mask(m);
            let dim = config.model_dims[m];
            let scale = 1.0 / (mask.len() as f64).sqrt();
            let weights = (0..dim * mask.len()).map(|_| scale * normal(&mut rng)).collect();
            let marker = (0..dim).map(|_| config.marker_strength * normal(&mut rng)).collect();
            ModelMap {
                mask,
                weights,
                marker,
                dim,
            }
        })
        .collect();

    let n = config.n_slides;
    let n_test = (config.test_fraction * n as f64).round() as usize;
    let n_val = (config.val_fraction * (n - n_test) as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_test {
            splits[i] = Split::Test;
        } else if rank < n_test + n_val {
            splits[i] = Split::Val;
        }
    }

    let slides = (0..n)
        .map(|i| generate_slide(config, i, splits[i], &organ_means, &cancer_dir, &maps))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: config.clone(),
        slides,
    })
}

fn generate_slide(
    config: &CorpusConfig,
    index: usize,
    split: Split,
    organ_means: &[Vec<f64>],
    cancer_dir: &[f64],
    maps: &[ModelMap],
) -> Result<SyntheticSlide> {
    let l = config.latent_dim;
    let mut rng = slide_rng(config.seed, index);
    let organ = rng.random_range(0..config.n_organs);
    let dev: Vec<f64> = (0..l).map(|_| config.slide_sigma * normal(&mut rng)).collect();
    let cancer = match &config.cancer_rule {
        CancerRule::Shift => rng.random::<f64>() < config.cancer_prevalence,
        CancerRule::Latents { indices } => indices.iter().map(|&i| dev[i]).sum::<f64>() > 0.0,
    };
    let shift = if matches!(config.cancer_rule, CancerRule::Shift) && cancer {
        config.cancer_shift
    } else {
        0.0
    };
    let mean = &organ_means[organ];
    let latent: Vec<f64> = (0..l).map(|k| mean[k] + dev[k] + shift * cancer_dir[k]).collect();

    let [lo, hi] = config.patches_per_slide;
    let n = rng.random_range(lo..=hi);
    let [flo, fhi] = config.signal_fraction;
    let frac = if fhi > flo { rng.random_range(flo..=fhi) } else { flo };
    let n_signal = ((frac * n as f64).round() as usize).clamp(1, n);

    let width = (n as f64).sqrt().ceil() as usize;
    let coords: Vec<(u32, u32)> = (0..n).map(|p| ((p / width) as u32, (p % width) as u32)).collect();
    let center = coords[rng.random_range(0..n)];
    let mut by_distance: Vec<usize> = (0..n).collect();
    let dist = |p: usize| {
        let dr = coords[p].0 as i64 - center.0 as i64;
        let dc = coords[p].1 as i64 - center.1 as i64;
        dr * dr + dc * dc
    };
    by_distance.sort_by_key(|&p| (dist(p), p));
    let mut signal = vec![false; n];
    for &p in &by_distance[..n_signal] {
        signal[p] = true;
    }

    let mut jitter: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..l).map(|_| config.jitter_sigma * normal(&mut rng)).collect())
        .collect();
    for k in 0..l {
        let mu = jitter.iter().map(|j| j[k]).sum::<f64>() / n as f64;
        jitter.iter_mut().for_each(|j| j[k] -= mu);
    }
    let patch_latents: Vec<Vec<f64>> = (0..n)
        .map(|p| {
            let base = if signal[p] { &latent } else { &mean };
            (0..l).map(|k| base[k] + jitter[p][k]).collect()
        })
        .collect();

    let slide_id = format!("slide-{index:05}");
    let bags = maps
        .iter()
        .enumerate()
        .map(|(m, map)| {
            let k = map.mask.len();
            let mut data = Vec::with_capacity(n * map.dim);
            for p in 0..n {
                let observed: Vec<f64> = map.mask.iter().map(|&i| patch_latents[p][i]).collect();
                for d in 0..map.dim {
                    let w = &map.weights[d * k..(d + 1) * k];
                    let mut pre: f64 = w.iter().zip(&observed).map(|(a, b)| a * b).sum();
                    if signal[p] {
                        pre += map.marker[d];
                    }
                    data.push(pre.tanh() + config.noise_sigma * normal(&mut rng));
                }
            }
            PatchBag::new(slide_id.clone(), m, Tensor::matrix(n, map.dim, data)?)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticSlide {
        slide_id,
        organ,
        cancer,
        latent,
        split,
        coords,
        signal,
        bags,
    })
}

/// Rounds `x` up, ignoring floating-point error just above an integer.
fn ceil_tol(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Two patch-index subsets of size `⌈f·n⌉` sharing `⌈ρ·f·n⌉` indices, the
/// overlap clamped to what `n` allows. Both subsets are returned sorted.
pub fn sample_view_indices<R: Rng + ?Sized>(
    n: usize,
    fraction: f64,
    overlap: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        bail!(Contract, "cannot sample views of an empty bag");
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        bail!(Contract, "view fraction must lie in (0, 1], got {}", fraction);
    }
    if !(0.0..=1.0).contains(&overlap) {
        bail!(Contract, "view overlap must lie in [0, 1], got {}", overlap);
    }
    let k = ceil_tol(fraction * n as f64).clamp(1, n);
    let shared = ceil_tol(overlap * fraction * n as f64).clamp((2 * k).saturating_sub(n), k);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut a: Vec<usize> = perm[..k].to_vec();
    let mut b: Vec<usize> = perm[..shared].to_vec();
    b.extend_from_slice(&perm[k..k + (k - shared)]);
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

/// Bag-level form of [`sample_view_indices`].
pub fn sample_views<R: Rng + ?Sized>(
    bag: &PatchBag,
    fraction: f64,
    overlap: f64,
    rng: &mut R,
) -> Result<(PatchBag, PatchBag)> {
    let (a, b) = sample_view_indices(bag.n_patches(), fraction, overlap, rng)?;
    Ok((bag.subset(&a)?, bag.subset(&b)?))
}
