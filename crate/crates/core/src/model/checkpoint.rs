//! Single-file checkpoints.
//!
//! ```text
//! offset 0   b"SEBN"
//! offset 4   u32 LE format version
//! offset 8   u32 LE metadata length n
//! offset 12  n bytes of compact JSON metadata
//! offset 12+n  f32 LE tensor payloads, in directory order
//! ```
//!
//! The metadata always ends with `,"header_sha256":"<hex>"}`. That hash
//! covers the first 12 bytes plus the metadata with the suffix replaced by
//! `}`; `payload_sha256` covers everything after the metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState, Optimizer, Phase, SwatsState};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SEBN";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREFIX_LEN: usize = 12;
const HASH_KEY: &str = ",\"header_sha256\":\"";
const HASH_HEX_LEN: usize = 64;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub step: u64,
    pub epoch: usize,
    pub seed: u64,
}

/// Scalar optimizer state; moment vectors travel in the payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerSnapshot {
    Adam {
        adam: AdamConfig,
        step: u64,
    },
    Sgd {
        lr: f64,
    },
    Swats {
        adam: AdamConfig,
        step: u64,
        phase: Phase,
        lambda: f64,
        sgd_lr: Option<f64>,
        eps_switch: f64,
        switch_step: Option<u64>,
        lambda_updates: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    vocab: Vec<char>,
    training: TrainingMeta,
    optimizer: Option<OptimizerSnapshot>,
    params: Vec<DirEntry>,
    payload_sha256: String,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<f32>,
    pub training: TrainingMeta,
    pub optimizer: Option<Optimizer<f32>>,
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

fn header_hash(prefix: &[u8], core: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(prefix);
    h.update(core);
    hex::encode(h.finalize())
}

fn push_tensor(dir: &mut Vec<DirEntry>, payload: &mut Vec<u8>, name: String, shape: Vec<usize>, data: &[f32]) {
    let offset = payload.len();
    for x in data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    dir.push(DirEntry {
        name,
        shape,
        offset,
        len: payload.len() - offset,
    });
}

impl ModelCheckpoint {
    /// Rebuilds the model structure, validating the stored weights against it.
    pub fn model(&self) -> Result<Model> {
        if self.vocab.len() != self.config.encoder.vocab_size {
            return Err(Error::Compat(format!(
                "vocabulary has {} ids but the encoder expects {}",
                self.vocab.len(),
                self.config.encoder.vocab_size
            )));
        }
        Model::from_store(self.config.clone(), &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut dir = Vec::new();
        let mut payload = Vec::new();
        for (name, t) in self.params.iter() {
            push_tensor(&mut dir, &mut payload, name.to_string(), t.shape().to_vec(), t.data());
        }
        let snapshot = match &self.optimizer {
            None => None,
            Some(Optimizer::Sgd { lr }) => Some(OptimizerSnapshot::Sgd { lr: *lr as f64 }),
            Some(Optimizer::Adam(st)) => {
                self.push_moments(&mut dir, &mut payload, st)?;
                Some(OptimizerSnapshot::Adam {
                    adam: st.cfg,
                    step: st.step,
                })
            }
            Some(Optimizer::Swats(st)) => {
                self.push_moments(&mut dir, &mut payload, &st.adam)?;
                Some(OptimizerSnapshot::Swats {
                    adam: st.adam.cfg,
                    step: st.adam.step,
                    phase: st.phase,
                    lambda: st.lambda as f64,
                    sgd_lr: st.sgd_lr.map(|x| x as f64),
                    eps_switch: st.eps_switch,
                    switch_step: st.switch_step,
                    lambda_updates: st.lambda_updates,
                })
            }
        };
        let meta = Metadata {
            config: self.config.clone(),
            vocab: self.vocab.chars().to_vec(),
            training: self.training.clone(),
            optimizer: snapshot,
            params: dir,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let core = serde_json::to_string(&meta)?;
        let final_len = core.len() - 1 + HASH_KEY.len() + HASH_HEX_LEN + 2;
        let len32 = u32::try_from(final_len).map_err(|_| fmt_err(8, "metadata too large"))?;

        let mut out = Vec::with_capacity(PREFIX_LEN + final_len + payload.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&len32.to_le_bytes());
        let hash = header_hash(&out, core.as_bytes());
        out.extend_from_slice(&core.as_bytes()[..core.len() - 1]);
        out.extend_from_slice(HASH_KEY.as_bytes());
        out.extend_from_slice(hash.as_bytes());
        out.extend_from_slice(b"\"}");
        out.extend_from_slice(&payload);
        Ok(out)
    }

    fn push_moments(&self, dir: &mut Vec<DirEntry>, payload: &mut Vec<u8>, st: &AdamState<f32>) -> Result<()> {
        if st.m.len() != self.params.len() || st.v.len() != self.params.len() {
            return Err(Error::Contract("optimizer state does not match the parameters".into()));
        }
        for (prefix, moments) in [("optim.m", &st.m), ("optim.v", &st.v)] {
            for ((name, t), m) in self.params.iter().zip(moments.iter()) {
                if m.len() != t.numel() {
                    return Err(Error::Contract(format!("optimizer moment size mismatch for `{name}`")));
                }
                push_tensor(dir, payload, format!("{prefix}.{name}"), t.shape().to_vec(), m);
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN {
            return Err(fmt_err(bytes.len(), "truncated header"));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt_err(0, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Compat(format!("unsupported checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let meta_end = PREFIX_LEN
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt_err(8, "metadata length exceeds file size"))?;
        let meta = &bytes[PREFIX_LEN..meta_end];

        let tail = HASH_KEY.len() + HASH_HEX_LEN + 2;
        if meta.len() < tail + 1 || !meta.ends_with(b"\"}") {
            return Err(fmt_err(PREFIX_LEN, "metadata does not end with a header hash"));
        }
        let key_at = meta.len() - tail;
        if &meta[key_at..key_at + HASH_KEY.len()] != HASH_KEY.as_bytes() {
            return Err(fmt_err(PREFIX_LEN + key_at, "metadata does not end with a header hash"));
        }
        let stored = &meta[key_at + HASH_KEY.len()..meta.len() - 2];
        let mut core = meta[..key_at].to_vec();
        core.push(b'}');
        let actual = header_hash(&bytes[..PREFIX_LEN], &core);
        if stored != actual.as_bytes() {
            return Err(fmt_err(PREFIX_LEN, "header checksum mismatch"));
        }
        let meta: Metadata =
            serde_json::from_slice(&core).map_err(|e| fmt_err(PREFIX_LEN, format!("metadata: {e}")))?;

        let payload = &bytes[meta_end..];
        if hex::encode(Sha256::digest(payload)) != meta.payload_sha256 {
            return Err(fmt_err(meta_end, "payload checksum mismatch"));
        }
        let read = |e: &DirEntry| -> Result<Tensor<f32>> {
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.len).filter(|&x| x <= payload.len());
            if end.is_none() || e.len != n * 4 {
                return Err(fmt_err(meta_end + e.offset, format!("bad directory entry `{}`", e.name)));
            }
            let data = payload[e.offset..e.offset + e.len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::new(e.shape.clone(), data)
        };

        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &meta.params {
            let t = read(e)?;
            if let Some(name) = e.name.strip_prefix("optim.m.") {
                check_moment(&params, name, &t)?;
                m.push(t.into_data());
            } else if let Some(name) = e.name.strip_prefix("optim.v.") {
                check_moment(&params, name, &t)?;
                v.push(t.into_data());
            } else {
                params.add(e.name.clone(), t)?;
            }
        }

        let moments_for = |cfg: AdamConfig, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>| -> Result<AdamState<f32>> {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(Error::Compat("optimizer moments missing from checkpoint".into()));
            }
            Ok(AdamState { cfg, m, v, step })
        };
        let optimizer = match meta.optimizer {
            None => None,
            Some(OptimizerSnapshot::Sgd { lr }) => Some(Optimizer::Sgd { lr: lr as f32 }),
            Some(OptimizerSnapshot::Adam { adam, step }) => Some(Optimizer::Adam(moments_for(adam, step, m, v)?)),
            Some(OptimizerSnapshot::Swats {
                adam,
                step,
                phase,
                lambda,
                sgd_lr,
                eps_switch,
                switch_step,
                lambda_updates,
            }) => Some(Optimizer::Swats(SwatsState {
                phase,
                adam: moments_for(adam, step, m, v)?,
                lambda: lambda as f32,
                sgd_lr: sgd_lr.map(|x| x as f32),
                eps_switch,
                switch_step,
                lambda_updates,
            })),
        };

        Ok(Self {
            config: meta.config,
            vocab: Vocabulary::from_chars(meta.vocab)?,
            params,
            training: meta.training,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn check_moment(params: &ParamStore<f32>, name: &str, t: &Tensor<f32>) -> Result<()> {
    match params.id(name) {
        Some(id) if params.get(id).shape() == t.shape() => Ok(()),
        _ => Err(Error::Compat(format!("optimizer moment for unknown parameter `{name}`"))),
    }
}
