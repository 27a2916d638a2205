//! Corpus, embedding and table files.

pub mod binary;

use crate::encoder::PatchBag;
use crate::error::{bail, Result};
use crate::synth::{Corpus, CorpusConfig, Split, SyntheticSlide};
use crate::tensor::Tensor;
use binary::{Array, Container, FileKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// SHA-256 of the compact JSON serialization of `value`.
pub fn digest_json<T: Serialize + ?Sized>(value: &T) -> Result<[u8; 32]> {
    let bytes = serde_json::to_vec(value).map_err(|e| crate::Error::Config(e.to_string()))?;
    Ok(Sha256::digest(&bytes).into())
}

pub fn digest_hex(d: &[u8; 32]) -> String {
    hex::encode(d)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(std::fs::write(path, bytes)?)
}

fn parse_header<T: for<'de> Deserialize<'de>>(c: &Container) -> Result<T> {
    serde_json::from_str(&c.header).map_err(|e| crate::Error::Format(format!("bad header: {e}")))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| crate::Error::Format(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct SlideMeta {
    slide_id: String,
    organ: usize,
    cancer: bool,
    split: Split,
    latent: Vec<f64>,
    coords: Vec<(u32, u32)>,
    signal: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    config: CorpusConfig,
    slides: Vec<SlideMeta>,
}

pub fn corpus_to_bytes(corpus: &Corpus) -> Result<Vec<u8>> {
    let header = CorpusHeader {
        config: corpus.config.clone(),
        slides: corpus
            .slides
            .iter()
            .map(|s| SlideMeta {
                slide_id: s.slide_id.clone(),
                organ: s.organ,
                cancer: s.cancer,
                split: s.split,
                latent: s.latent.clone(),
                coords: s.coords.clone(),
                signal: s.signal.clone(),
            })
            .collect(),
    };
    let arrays = corpus
        .slides
        .iter()
        .flat_map(|s| {
            s.bags.iter().map(move |b| Array {
                name: format!("{}/m{}", s.slide_id, b.model),
                shape: b.embeddings.shape().to_vec(),
                data: b.embeddings.data().to_vec(),
            })
        })
        .collect();
    Container {
        kind: FileKind::Corpus,
        digest: digest_json(&corpus.config)?,
        header: to_json(&header)?,
        arrays,
    }
    .to_bytes()
}

pub fn corpus_from_bytes(bytes: &[u8]) -> Result<Corpus> {
    let c = Container::from_bytes(bytes)?;
    c.expect_kind(FileKind::Corpus)?;
    let header: CorpusHeader = parse_header(&c)?;
    if digest_json(&header.config)? != c.digest {
        bail!(Format, "corpus digest does not match its config header");
    }
    let n_models = header.config.n_models;
    let slides = header
        .slides
        .into_iter()
        .map(|m| {
            let bags = (0..n_models)
                .map(|k| {
                    let a = c.array(&format!("{}/m{}", m.slide_id, k))?;
                    PatchBag::new(m.slide_id.clone(), k, Tensor::new(a.shape.clone(), a.data.clone())?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SyntheticSlide {
                slide_id: m.slide_id,
                organ: m.organ,
                cancer: m.cancer,
                latent: m.latent,
                split: m.split,
                coords: m.coords,
                signal: m.signal,
                bags,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: header.config,
        slides,
    })
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    write_file(path, &corpus_to_bytes(corpus)?)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    corpus_from_bytes(&read_file(path)?)
}

/// One encoded slide.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub slide_id: String,
    pub fused: Vec<f64>,
    /// Post-softmax attention over the slide's patches, one vector per model.
    pub attention: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub config_digest: String,
    pub seed: u64,
    pub unified_dim: usize,
    pub model_dims: Vec<usize>,
    pub slide_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub meta: EmbeddingMeta,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingSet {
    /// `(offset, len)` of model `m`'s unified part inside a fused vector.
    pub fn unified_span(&self, m: usize) -> (usize, usize) {
        let u = self.meta.unified_dim;
        let offset: usize = self.meta.model_dims[..m].iter().map(|d| u + d).sum();
        (offset, u)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        for r in &self.records {
            arrays.push(Array {
                name: format!("{}/fused", r.slide_id),
                shape: vec![r.fused.len()],
                data: r.fused.clone(),
            });
            for (m, a) in r.attention.iter().enumerate() {
                arrays.push(Array {
                    name: format!("{}/attention/m{}", r.slide_id, m),
                    shape: vec![a.len()],
                    data: a.clone(),
                });
            }
        }
        let mut digest = [0u8; 32];
        hex::decode_to_slice(&self.meta.config_digest, &mut digest)
            .map_err(|_| crate::Error::Contract("config digest must be 64 hex characters".into()))?;
        Container {
            kind: FileKind::Embeddings,
            digest,
            header: to_json(&self.meta)?,
            arrays,
        }
        .to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes)?;
        c.expect_kind(FileKind::Embeddings)?;
        let meta: EmbeddingMeta = parse_header(&c)?;
        let records = meta
            .slide_ids
            .iter()
            .map(|id| {
                Ok(EmbeddingRecord {
                    slide_id: id.clone(),
                    fused: c.array(&format!("{id}/fused"))?.data.clone(),
                    attention: (0..meta.model_dims.len())
                        .map(|m| Ok(c.array(&format!("{id}/attention/m{m}"))?.data.clone()))
                        .collect::<Result<Vec<_>>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { meta, records })
    }
}

/// A CSV table with a header row; `#` lines are comments.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Result<usize> {
        match self.headers.iter().position(|h| h == name) {
            Some(i) => Ok(i),
            None => bail!(Data, "missing column {:?} (have {:?})", name, self.headers),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| crate::Error::Data(format!("bad CSV header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = reader
            .records()
            .map(|r| {
                r.map(|r| r.iter().map(str::to_string).collect())
                    .map_err(|e| crate::Error::Data(format!("bad CSV row: {e}")))
            })
            .collect::<Result<Vec<Vec<String>>>>()?;
        Ok(Self { headers, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serializes with one `# key=value` comment line per entry of `comments`.
    pub fn to_csv(&self, comments: &[(&str, String)]) -> Result<String> {
        let mut out = String::new();
        for (k, v) in comments {
            out.push_str(&format!("# {k}={v}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).map_err(|e| crate::Error::Data(e.to_string()))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| crate::Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::Data(e.to_string()))?;
        out.push_str(&String::from_utf8(bytes).expect("CSV output is UTF-8"));
        Ok(out)
    }
}

/// `slide_id, organ, cancer, split` for every slide of `corpus`.
pub fn label_manifest(corpus: &Corpus) -> Table {
    Table {
        headers: ["slide_id", "organ", "cancer", "split"].map(String::from).to_vec(),
        rows: corpus
            .slides
            .iter()
            .map(|s| {
                vec![
                    s.slide_id.clone(),
                    s.organ.to_string(),
                    (s.cancer as u8).to_string(),
                    s.split.as_str().to_string(),
                ]
            })
            .collect(),
    }
}
