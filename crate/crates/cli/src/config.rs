//! Run configuration: one JSON document drives every subcommand.
//!
//! `encoder` and `pretrain` are partial overlays on the desk presets, so a
//! config only spells out what it changes. Model widths and organ count are
//! taken from `corpus`; the top-level `seed` seeds the corpus, the trainer
//! and every resampling step.

use std::path::{Path, PathBuf};

use elf_core::attnmap::GridSpec;
use elf_core::io::{digest_hex, digest_json};
use elf_core::model::EncoderConfig;
use elf_core::stats::{ProbeOptions, DEFAULT_BOOTSTRAP, DEFAULT_FOLDS};
use elf_core::synth::CorpusConfig;
use elf_core::trainer::TrainConfig;
use elf_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cancer,
    Organ,
}

impl Task {
    pub fn column(self) -> &'static str {
        match self {
            Task::Cancer => "cancer",
            Task::Organ => "organ",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    /// Stratified k-fold over every labelled slide.
    Cv,
    /// Fit on the `train` split, score the `test` split.
    Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Features {
    /// `[s_unified; s_raw]` of every model.
    Fused,
    /// The unified parts only.
    Unified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub task: Task,
    pub mode: ProbeMode,
    pub folds: usize,
    pub features: Features,
    pub n_bootstrap: usize,
    pub l2: Option<f64>,
    pub max_iter: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            task: Task::Cancer,
            mode: ProbeMode::Cv,
            folds: DEFAULT_FOLDS,
            features: Features::Fused,
            n_bootstrap: DEFAULT_BOOTSTRAP,
            l2: None,
            max_iter: ProbeOptions::default().max_iter,
        }
    }
}

impl ProbeSection {
    pub fn options(&self) -> ProbeOptions {
        ProbeOptions { l2: self.l2, max_iter: self.max_iter, ..ProbeOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub grid: GridSpec,
    /// Join key shared by score and survival tables.
    pub id_column: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { grid: GridSpec::default(), id_column: "slide_id".into() }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    corpus: Map<String, Value>,
    #[serde(default)]
    encoder: Map<String, Value>,
    #[serde(default)]
    pretrain: Map<String, Value>,
    #[serde(default)]
    probe: Value,
    #[serde(default)]
    eval: Value,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    #[serde(default)]
    seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("elf-out")
}

/// Fully resolved configuration; its digest is stamped on every output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub pretrain: TrainConfig,
    pub probe: ProbeSection,
    pub eval: EvalSection,
    pub output_dir: PathBuf,
    pub seed: u64,
}

fn section<T: DeserializeOwned>(name: &str, value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let at = if path == "." { name.to_string() } else { format!("{name}.{path}") };
        Error::Config(format!("{at}: {}", e.inner()))
    })
}

fn overlay<T: Serialize>(base: &T, patch: Map<String, Value>) -> Result<Value> {
    let mut v = serde_json::to_value(base).map_err(|e| Error::Config(e.to_string()))?;
    let obj = v.as_object_mut().expect("presets serialize to objects");
    obj.extend(patch);
    Ok(v)
}

fn reject(section: &str, map: &Map<String, Value>, key: &str, why: &str) -> Result<()> {
    if map.contains_key(key) {
        return Err(Error::Config(format!("{section}.{key}: {why}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let raw: RawConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Error::Config(e.inner().to_string())
            } else {
                Error::Config(format!("{path}: {}", e.inner()))
            }
        })?;
        let seed = seed_override.unwrap_or(raw.seed);
        let top_seed = "set the top-level `seed` instead";
        reject("corpus", &raw.corpus, "seed", top_seed)?;
        reject("pretrain", &raw.pretrain, "seed", top_seed)?;
        reject("encoder", &raw.encoder, "model_dims", "taken from corpus.model_dims")?;
        reject("encoder", &raw.encoder, "n_organs", "taken from corpus.n_organs")?;

        let mut corpus: CorpusConfig = section("corpus", Value::Object(raw.corpus))?;
        corpus.seed = seed;
        corpus.validate()?;
        let desk = EncoderConfig::desk(corpus.model_dims.clone(), 32, corpus.n_organs);
        let encoder: EncoderConfig = section("encoder", overlay(&desk, raw.encoder)?)?;
        encoder.validate()?;
        let mut pretrain: TrainConfig = section("pretrain", overlay(&TrainConfig::desk(), raw.pretrain)?)?;
        pretrain.seed = seed;
        pretrain.validate()?;
        let probe: ProbeSection = if raw.probe.is_null() { ProbeSection::default() } else { section("probe", raw.probe)? };
        if probe.folds < 2 || probe.n_bootstrap == 0 {
            return Err(Error::Config("probe.folds must be ≥ 2 and probe.n_bootstrap ≥ 1".into()));
        }
        let eval: EvalSection = if raw.eval.is_null() { EvalSection::default() } else { section("eval", raw.eval)? };
        eval.grid.validate()?;
        Ok(Self { corpus, encoder, pretrain, probe, eval, output_dir: raw.output_dir, seed })
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, seed_override)
    }

    /// Defaults for subcommands that can run without a config file.
    pub fn fallback(seed_override: Option<u64>) -> Result<Self> {
        Self::parse(r#"{"corpus": {"n_slides": 1, "n_models": 1, "model_dims": [1]}}"#, seed_override)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(digest_hex(&digest_json(self)?))
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}
