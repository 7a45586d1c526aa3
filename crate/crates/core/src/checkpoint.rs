//! Checkpoint container shared by dense, reordered and adapted models.
//!
//! Layout:
//!
//! ```text
//! b"DMOECKPT"             8 bytes
//! manifest length         u64, little endian
//! manifest                JSON document (see [`Manifest`])
//! payload                 every tensor, little endian IEEE-754, back to back
//! ```
//!
//! Tensor offsets are relative to the start of the payload. Tensors are
//! written in the model's parameter order, so loading a file and saving it
//! again reproduces it byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptMeta, AdaptedModel, ReorderedModel};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{DenseModel, ModelConfig};
use crate::nested::{expert_widths, ImportanceScores};
use crate::router::{Router, RouterConfig};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"DMOECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Dense,
    Reordered,
    Adapted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub vocab: Option<Vocab>,
    /// Per-layer importance scores (reordered and adapted checkpoints).
    pub importance: Option<Vec<ImportanceScores>>,
    pub widths: Option<Vec<usize>>,
    pub router: Option<RouterConfig>,
    pub adapt: Option<AdaptMeta>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel<T> {
    Dense(DenseModel<T>),
    Reordered(ReorderedModel<T>),
    Adapted(AdaptedModel<T>, Vec<ImportanceScores>),
}

impl<T: Real> LoadedModel<T> {
    pub fn kind(&self) -> CheckpointKind {
        match self {
            LoadedModel::Dense(_) => CheckpointKind::Dense,
            LoadedModel::Reordered(_) => CheckpointKind::Reordered,
            LoadedModel::Adapted(..) => CheckpointKind::Adapted,
        }
    }

    /// The dense weights, whatever stage the checkpoint is at.
    pub fn dense(&self) -> &DenseModel<T> {
        match self {
            LoadedModel::Dense(m) => m,
            LoadedModel::Reordered(r) => &r.model,
            LoadedModel::Adapted(a, _) => &a.base,
        }
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let named = match self {
            LoadedModel::Dense(m) => m.named_params(),
            LoadedModel::Reordered(r) => r.model.named_params(),
            LoadedModel::Adapted(a, _) => a.named_params(),
        };
        named.into_iter().map(|(n, _, t)| (n, t)).collect()
    }
}

/// A model plus the vocabulary it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: LoadedModel<T>,
    pub vocab: Option<Vocab>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: LoadedModel<T>, vocab: Option<Vocab>) -> Self {
        Self { model, vocab }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.model.named_tensors() {
            let offset = payload.len() as u64;
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            tensors.push(TensorEntry {
                name,
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                offset,
                length: payload.len() as u64 - offset,
            });
        }
        let (importance, widths, router, adapt) = match &self.model {
            LoadedModel::Dense(_) => (None, None, None, None),
            LoadedModel::Reordered(r) => (Some(r.scores.clone()), None, None, None),
            LoadedModel::Adapted(a, scores) => (
                Some(scores.clone()),
                Some(a.widths.clone()),
                Some(a.router_config),
                Some(a.meta.clone()),
            ),
        };
        let manifest = Manifest {
            version: FORMAT_VERSION,
            kind: self.model.kind(),
            model: self.model.dense().config.clone(),
            vocab: self.vocab.clone(),
            importance,
            widths,
            router,
            adapt,
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = split_container(bytes)?;
        let mut tensors = read_tensors::<T>(&manifest, payload)?.into_iter();
        let mc = manifest.model.clone();
        mc.validate()?;
        let mut dense = DenseModel::<T>::init(mc.clone())?;
        let require = |what: &str, present: bool| {
            if present {
                Ok(())
            } else {
                Err(Error::checkpoint("<manifest>", format!("{what} missing")))
            }
        };
        let model = match manifest.kind {
            CheckpointKind::Dense => {
                fill(dense.named_params_mut(), &mut tensors)?;
                LoadedModel::Dense(dense)
            }
            CheckpointKind::Reordered => {
                fill(dense.named_params_mut(), &mut tensors)?;
                require("importance scores", manifest.importance.is_some())?;
                LoadedModel::Reordered(ReorderedModel {
                    model: dense,
                    scores: manifest.importance.clone().unwrap_or_default(),
                })
            }
            CheckpointKind::Adapted => {
                require("importance scores", manifest.importance.is_some())?;
                let (Some(widths), Some(router), Some(meta)) =
                    (&manifest.widths, manifest.router, &manifest.adapt)
                else {
                    return Err(Error::checkpoint(
                        "<manifest>",
                        "adapted checkpoint lacks widths, router or adapt metadata",
                    ));
                };
                if *widths != expert_widths(mc.hidden_dim, widths.len())? {
                    return Err(Error::checkpoint(
                        "<manifest>",
                        format!("widths {widths:?} do not follow the nested rule"),
                    ));
                }
                let routers = (0..mc.num_layers)
                    .map(|_| Router {
                        w1: Tensor::zeros(&[router.hidden, mc.embed_dim]),
                        w2: Tensor::zeros(&[widths.len(), router.hidden]),
                        nonlinearity: router.nonlinearity,
                    })
                    .collect();
                let mut adapted = AdaptedModel {
                    base: dense,
                    widths: widths.clone(),
                    routers,
                    router_config: router,
                    meta: meta.clone(),
                };
                fill(adapted.named_params_mut(), &mut tensors)?;
                LoadedModel::Adapted(adapted, manifest.importance.clone().unwrap_or_default())
            }
        };
        if let Some((name, _)) = tensors.next() {
            return Err(Error::checkpoint(name, "not a parameter of this model"));
        }
        Ok(Self {
            model,
            vocab: manifest.vocab,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Parses the header and returns the manifest and the payload bytes.
pub fn split_container(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 {
        return Err(Error::checkpoint(
            "<header>",
            "file is shorter than the header",
        ));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::checkpoint("<header>", "bad magic bytes"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            Error::checkpoint(
                "<manifest>",
                format!("manifest length {len} runs past end of file"),
            )
        })?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::checkpoint("<manifest>", format!("corrupt manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::checkpoint(
            "<manifest>",
            format!(
                "unsupported version {} (expected {FORMAT_VERSION})",
                manifest.version
            ),
        ));
    }
    Ok((manifest, &bytes[end..]))
}

fn read_tensors<T: Real>(manifest: &Manifest, payload: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let mut cursor = 0u64;
    for entry in &manifest.tensors {
        let fail = |reason: String| Error::checkpoint(entry.name.clone(), reason);
        if entry.dtype != T::DTYPE {
            return Err(fail(format!(
                "dtype {:?} but loading as {:?}",
                entry.dtype,
                T::DTYPE
            )));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| fail("shape overflows".into()))?;
        let size = entry.dtype.size() as u64;
        if numel.checked_mul(size) != Some(entry.length) {
            return Err(fail(format!(
                "length {} does not match shape {:?}",
                entry.length, entry.shape
            )));
        }
        if entry.offset != cursor {
            return Err(fail(format!(
                "offset {} overlaps or leaves a gap (expected {cursor})",
                entry.offset
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.length)
            .ok_or_else(|| fail("offset overflow".into()))?;
        if end > payload.len() as u64 {
            return Err(fail(format!(
                "payload truncated: needs {end} bytes, has {}",
                payload.len()
            )));
        }
        let bytes = &payload[entry.offset as usize..end as usize];
        let data = bytes.chunks_exact(size as usize).map(T::read_le).collect();
        out.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        cursor = end;
    }
    if cursor != payload.len() as u64 {
        return Err(Error::checkpoint(
            "<payload>",
            format!(
                "{} trailing bytes not owned by any tensor",
                payload.len() as u64 - cursor
            ),
        ));
    }
    Ok(out)
}

fn fill<T: Real>(
    params: Vec<(String, crate::model::ParamRole, &mut Tensor<T>)>,
    tensors: &mut impl Iterator<Item = (String, Tensor<T>)>,
) -> Result<()> {
    for (name, _, slot) in params {
        let (found, t) = tensors
            .next()
            .ok_or_else(|| Error::checkpoint(name.clone(), "missing from checkpoint"))?;
        if found != name {
            return Err(Error::checkpoint(
                found,
                format!("found where {name} was expected"),
            ));
        }
        if t.shape() != slot.shape() {
            return Err(Error::checkpoint(
                name,
                format!(
                    "shape {:?} but the model needs {:?}",
                    t.shape(),
                    slot.shape()
                ),
            ));
        }
        *slot = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::{AdaptConfig, ReorderedModel};
    use crate::autodiff::Activation;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            embed_dim: 8,
            hidden_dim: 12,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 16,
            activation: Activation::Silu,
            seed: 3,
        }
    }

    fn dense() -> Checkpoint<f32> {
        Checkpoint::new(
            LoadedModel::Dense(DenseModel::init(config()).unwrap()),
            Some(Vocab::from_text("abcdef")),
        )
    }

    fn adapted() -> Checkpoint<f64> {
        let base = ReorderedModel {
            model: DenseModel::init(config()).unwrap(),
            scores: vec![
                ImportanceScores {
                    scores: (0..12).map(|i| 0.1 * i as f64 + 1.0 / 3.0).collect(),
                    token_count: 5,
                };
                2
            ],
        };
        let cfg = AdaptConfig {
            num_experts: 3,
            router: RouterConfig {
                hidden: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = AdaptedModel::from_base(&base, &cfg).unwrap();
        Checkpoint::new(LoadedModel::Adapted(a, base.scores), None)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = dense().to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, dense());
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let bytes = adapted().to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, adapted());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_payload_names_a_tensor() {
        let bytes = dense().to_bytes().unwrap();
        let err = Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Checkpoint { tensor, reason } => {
                assert_eq!(tensor, "head");
                assert!(reason.contains("truncated"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn dtype_mismatch_names_the_first_tensor() {
        let bytes = dense().to_bytes().unwrap();
        let err = Checkpoint::<f64>::from_bytes(&bytes).unwrap_err();
        assert!(
            matches!(err, Error::Checkpoint { ref tensor, .. } if tensor == "embed"),
            "{err}"
        );
    }

    #[test]
    fn offset_overflow_is_rejected() {
        let ck = dense();
        let bytes = ck.to_bytes().unwrap();
        let (mut manifest, payload) = split_container(&bytes).unwrap();
        manifest.tensors[1].offset = u64::MAX - 2;
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut forged = MAGIC.to_vec();
        forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(payload);
        let err = Checkpoint::<f32>::from_bytes(&forged).unwrap_err();
        assert!(
            matches!(err, Error::Checkpoint { ref tensor, .. } if tensor == "pos"),
            "{err}"
        );
    }

    #[test]
    fn corrupt_manifest_and_magic() {
        let mut bytes = dense().to_bytes().unwrap();
        bytes[20] = b'!';
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes),
            Err(Error::Checkpoint { ref tensor, .. }) if tensor == "<manifest>"
        ));
        let mut bytes = dense().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = dense().to_bytes().unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
    }
}
