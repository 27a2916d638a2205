use super::{config_digest, AdamState, MoCoState, TrainConfig};
use crate::error::{bail, Result};
use crate::io::binary::{Array, Container, FileKind};
use crate::io::{read_file, write_file};
use crate::model::{EncoderConfig, ModelParams};
use crate::params::ParamTree;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    train: TrainConfig,
    step: u64,
    epoch: u64,
    best_score: Option<f64>,
}

fn push_all(out: &mut Vec<Array>, prefix: &str, names: &[String], tensors: &[&Tensor]) {
    for (n, t) in names.iter().zip(tensors) {
        out.push(Array {
            name: format!("{prefix}/{n}"),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        });
    }
}

pub fn checkpoint_to_bytes(state: &MoCoState) -> Result<Vec<u8>> {
    let names: Vec<String> = state.base.named().into_iter().map(|(n, _)| n).collect();
    let mut arrays = Vec::new();
    push_all(&mut arrays, "base", &names, &state.base.tensors());
    push_all(&mut arrays, "momentum", &names, &state.momentum.tensors());
    push_all(&mut arrays, "adam_m", &names, &state.adam.m.iter().collect::<Vec<_>>());
    push_all(&mut arrays, "adam_v", &names, &state.adam.v.iter().collect::<Vec<_>>());
    let header = Header {
        encoder: state.encoder.clone(),
        train: state.train.clone(),
        step: state.step,
        epoch: state.epoch,
        best_score: state.best_score,
    };
    Container {
        kind: FileKind::Checkpoint,
        digest: state.config_digest()?,
        header: serde_json::to_string(&header).map_err(|e| crate::Error::Format(e.to_string()))?,
        arrays,
    }
    .to_bytes()
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<MoCoState> {
    let c = Container::from_bytes(bytes)?;
    c.expect_kind(FileKind::Checkpoint)?;
    let h: Header = serde_json::from_str(&c.header).map_err(|e| crate::Error::Format(format!("bad checkpoint header: {e}")))?;
    if config_digest(&h.encoder, &h.train)? != c.digest {
        bail!(Format, "checkpoint digest does not match its stored configuration");
    }
    let template = ModelParams::init(&h.encoder, &mut ChaCha8Rng::seed_from_u64(0))?;
    let names: Vec<String> = template.named().into_iter().map(|(n, _)| n).collect();
    let load = |prefix: &str| -> Result<Vec<Tensor>> {
        names
            .iter()
            .map(|n| {
                let a = c.array(&format!("{prefix}/{n}"))?;
                Tensor::new(a.shape.clone(), a.data.clone()).map_err(|e| crate::Error::Format(format!("{prefix}/{n}: {e}")))
            })
            .collect()
    };
    let base = template.with_tensors(load("base")?)?;
    let momentum = template.with_tensors(load("momentum")?)?;
    let m = load("adam_m")?;
    let v = load("adam_v")?;
    for ((t, a), b) in template.tensors().iter().zip(&m).zip(&v) {
        if a.shape() != t.shape() || b.shape() != t.shape() {
            bail!(Format, "optimizer moment shape mismatch");
        }
    }
    Ok(MoCoState {
        encoder: h.encoder,
        train: h.train,
        base,
        momentum,
        adam: AdamState { m, v },
        step: h.step,
        epoch: h.epoch,
        best_score: h.best_score,
    })
}

pub fn save_checkpoint(state: &MoCoState, path: &Path) -> Result<()> {
    write_file(path, &checkpoint_to_bytes(state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<MoCoState> {
    checkpoint_from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn state() -> MoCoState {
        let mut s = MoCoState::init(EncoderConfig::desk(vec![3, 5], 8, 3), TrainConfig::desk()).unwrap();
        s.step = 12;
        s.epoch = 3;
        s.best_score = Some(0.7512345678901234);
        s.adam.m[0] = Tensor::full(s.adam.m[0].shape().to_vec(), 1e-300);
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = state();
        let bytes = checkpoint_to_bytes(&s).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(checkpoint_to_bytes(&back).unwrap(), bytes);
        assert_eq!(back.config_digest().unwrap(), config_digest(&s.encoder, &s.train).unwrap());
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.elfe");
        let s = state();
        save_checkpoint(&s, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), s);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Format(_))));
        bytes[0] = b'Z';
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Format(_))));
    }
}
