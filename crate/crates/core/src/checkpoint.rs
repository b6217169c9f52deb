//! Checkpoint persistence: magic `SBC1`, a JSON header describing named
//! tensors (and, optionally, the optimizer moments), then raw little-endian
//! 32-bit float payloads. Save -> load -> save is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ParamStore;
use crate::numerics::{AdamParams, OptimizerState};

const MAGIC: &[u8; 4] = b"SBC1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint file: {0}")]
    Format(String),
    #[error("config hash mismatch: checkpoint {checkpoint}, current config {current}")]
    HashMismatch { checkpoint: String, current: String },
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Pretrain,
    Classifier,
}

/// Serializable ChaCha20 state: seed, 128-bit word position, stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedRngState {
    pub seed_hex: String,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
    pub stream: u64,
}

impl SavedRngState {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        let seed = rng.get_seed();
        let pos = rng.get_word_pos();
        SavedRngState {
            seed_hex: seed.iter().map(|b| format!("{b:02x}")).collect(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha20Rng, CheckpointError> {
        if self.seed_hex.len() != 64 {
            return Err(CheckpointError::Format("rng seed must be 32 bytes".into()));
        }
        let mut seed = [0u8; 32];
        for i in 0..32 {
            seed[i] = u8::from_str_radix(&self.seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|e| CheckpointError::Format(format!("bad rng seed hex: {e}")))?;
        }
        let mut rng = ChaCha20Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    step: u64,
    params: AdamParams,
    first_moment: Vec<TensorEntry>,
    second_moment: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: ModelKind,
    config_hash: String,
    epoch: u32,
    rng: SavedRngState,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
}

/// In-memory checkpoint. Parameters are stored at 32-bit precision.
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config_hash: String,
    pub epoch: u32,
    pub rng: SavedRngState,
    pub params: ParamStore<f32>,
    pub optimizer: Option<SavedOptimizer>,
}

pub struct SavedOptimizer {
    pub step: u64,
    pub params: AdamParams,
    /// aligned with the parameter-store order
    pub first_moment: Vec<ArrayD<f32>>,
    pub second_moment: Vec<ArrayD<f32>>,
}

impl Checkpoint {
    pub fn from_training(
        kind: ModelKind,
        config_hash: &str,
        epoch: u32,
        rng: &ChaCha20Rng,
        params: &ParamStore<f32>,
        optimizer: Option<&OptimizerState<f32>>,
    ) -> Self {
        Checkpoint {
            kind,
            config_hash: config_hash.to_string(),
            epoch,
            rng: SavedRngState::capture(rng),
            params: params.clone(),
            optimizer: optimizer.map(|o| SavedOptimizer {
                step: o.step,
                params: o.params.clone(),
                first_moment: o.first_moment.clone(),
                second_moment: o.second_moment.clone(),
            }),
        }
    }

    /// Rebuild an optimizer state from the saved moments.
    pub fn optimizer_state(&self) -> Option<OptimizerState<f32>> {
        self.optimizer.as_ref().map(|o| OptimizerState {
            params: o.params.clone(),
            first_moment: o.first_moment.clone(),
            second_moment: o.second_moment.clone(),
            step: o.step,
        })
    }

    /// Number of classes of a classifier checkpoint, from the head bias.
    pub fn classes(&self) -> Option<usize> {
        self.params.index_of("head.class_b").map(|i| self.params.arrays()[i].len())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut payload: Vec<u8> = Vec::new();
        let write_tensors = |arrays: &[ArrayD<f32>],
                                 names: Vec<String>,
                                 payload: &mut Vec<u8>|
         -> Vec<TensorEntry> {
            let mut entries = Vec::with_capacity(arrays.len());
            for (arr, name) in arrays.iter().zip(names) {
                entries.push(TensorEntry {
                    name,
                    shape: arr.shape().to_vec(),
                    offset: payload.len(),
                });
                for &v in arr.iter() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            entries
        };
        let tensors = write_tensors(
            self.params.arrays(),
            self.params.names().to_vec(),
            &mut payload,
        );
        let optimizer = self.optimizer.as_ref().map(|o| OptimizerEntry {
            step: o.step,
            params: o.params.clone(),
            first_moment: write_tensors(
                &o.first_moment,
                self.params.names().iter().map(|n| format!("m.{n}")).collect(),
                &mut payload,
            ),
            second_moment: write_tensors(
                &o.second_moment,
                self.params.names().iter().map(|n| format!("v.{n}")).collect(),
                &mut payload,
            ),
        });
        let header = serde_json::to_vec(&Header {
            version: FORMAT_VERSION,
            kind: self.kind,
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            tensors,
            optimizer,
        })
        .expect("header serialization");
        let mut file = std::fs::File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&FORMAT_VERSION.to_le_bytes())?;
        file.write_all(&(header.len() as u32).to_le_bytes())?;
        file.write_all(&header)?;
        file.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[0..4] != MAGIC {
            return Err(CheckpointError::Format("missing SBC1 magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + header_len {
            return Err(CheckpointError::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
            .map_err(|e| CheckpointError::Format(format!("bad header json: {e}")))?;
        let data = &bytes[12 + header_len..];
        let read_tensor = |e: &TensorEntry| -> Result<ArrayD<f32>, CheckpointError> {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            if end > data.len() {
                return Err(CheckpointError::Format(format!(
                    "tensor `{}` out of bounds",
                    e.name
                )));
            }
            let vals: Vec<f32> = data[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ArrayD::from_shape_vec(IxDyn(&e.shape), vals)
                .map_err(|err| CheckpointError::Format(err.to_string()))
        };
        let mut params = ParamStore::<f32>::new();
        for e in &header.tensors {
            params.push(&e.name, read_tensor(e)?);
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                if o.first_moment.len() != header.tensors.len()
                    || o.second_moment.len() != header.tensors.len()
                {
                    return Err(CheckpointError::Format(
                        "optimizer moment count does not match parameters".into(),
                    ));
                }
                let first = o
                    .first_moment
                    .iter()
                    .map(read_tensor)
                    .collect::<Result<Vec<_>, _>>()?;
                let second = o
                    .second_moment
                    .iter()
                    .map(read_tensor)
                    .collect::<Result<Vec<_>, _>>()?;
                Some(SavedOptimizer {
                    step: o.step,
                    params: o.params.clone(),
                    first_moment: first,
                    second_moment: second,
                })
            }
        };
        Ok(Checkpoint {
            kind: header.kind,
            config_hash: header.config_hash,
            epoch: header.epoch,
            rng: header.rng,
            params,
            optimizer,
        })
    }

    /// Fail unless the stored parameters exactly match the expected
    /// architecture (same names, same shapes, same order).
    pub fn validate_architecture(
        &self,
        expected: &ParamStore<f32>,
    ) -> Result<(), CheckpointError> {
        if self.params.len() != expected.len() {
            return Err(CheckpointError::ArchMismatch(format!(
                "checkpoint has {} tensors, architecture expects {}",
                self.params.len(),
                expected.len()
            )));
        }
        for ((n1, a1), (n2, a2)) in self.params.iter().zip(expected.iter()) {
            if n1 != n2 {
                return Err(CheckpointError::ArchMismatch(format!(
                    "tensor order differs: `{n1}` vs expected `{n2}`"
                )));
            }
            if a1.shape() != a2.shape() {
                return Err(CheckpointError::ArchMismatch(format!(
                    "tensor `{n1}` has shape {:?}, architecture expects {:?}",
                    a1.shape(),
                    a2.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn check_config_hash(&self, current: &str) -> Result<(), CheckpointError> {
        if self.config_hash != current {
            return Err(CheckpointError::HashMismatch {
                checkpoint: self.config_hash.clone(),
                current: current.to_string(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_backbone, init_latent_head, ModelConfig};
    use rand::SeedableRng as _;

    fn demo_checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            embed_dim: 16,
            encoder_layers: 1,
            encoder_heads: 2,
            ffn_dim: 32,
            dropout: 0.0,
            frames: 4,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut params = ParamStore::<f32>::new();
        init_backbone(&cfg, &mut rng, &mut params);
        init_latent_head(&cfg, &mut rng, &mut params);
        let shapes = params.shapes();
        let mut opt = OptimizerState::<f32>::new(AdamParams::default(), &shapes);
        opt.step = 17;
        Checkpoint::from_training(
            ModelKind::Pretrain,
            "deadbeef",
            3,
            &rng,
            &params,
            Some(&opt),
        )
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.sbc");
        let p2 = dir.path().join("b.sbc");
        let ck = demo_checkpoint();
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // arrays round-trip bitwise
        for (a, b) in ck.params.arrays().iter().zip(loaded.params.arrays()) {
            assert_eq!(a, b);
        }
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.kind, ModelKind::Pretrain);
        assert_eq!(loaded.optimizer.as_ref().unwrap().step, 17);
    }

    #[test]
    fn rng_state_round_trips_through_the_header() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        rng.set_stream(5);
        let _: u64 = rand::Rng::gen(&mut rng);
        let saved = SavedRngState::capture(&rng);
        let mut restored = saved.restore().unwrap();
        let a: u64 = rand::Rng::gen(&mut rng);
        let b: u64 = rand::Rng::gen(&mut restored);
        assert_eq!(a, b);
    }

    #[test]
    fn architecture_mismatch_is_detected_before_compute() {
        let ck = demo_checkpoint();
        let cfg = ModelConfig {
            embed_dim: 32, // different width
            encoder_layers: 1,
            encoder_heads: 2,
            ffn_dim: 32,
            dropout: 0.0,
            frames: 4,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut expected = ParamStore::<f32>::new();
        init_backbone(&cfg, &mut rng, &mut expected);
        init_latent_head(&cfg, &mut rng, &mut expected);
        assert!(matches!(
            ck.validate_architecture(&expected),
            Err(CheckpointError::ArchMismatch(_))
        ));
    }

    #[test]
    fn hash_mismatch_reports_both_hashes() {
        let ck = demo_checkpoint();
        let err = ck.check_config_hash("cafebabe").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("deadbeef") && msg.contains("cafebabe"), "{msg}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.sbc");
        std::fs::write(&p, b"NOPE....").unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(CheckpointError::Format(_))
        ));
    }
}
