//! Weight file format.
//!
//! ```text
//! magic    4 bytes   "SPFW"
//! version  u32 LE
//! mlen     u64 LE    manifest length in bytes
//! manifest mlen bytes of UTF-8 JSON: {"config": ModelConfig, "tensors": [...]}
//! payload  tensors in manifest order, little-endian 64-bit words
//! ```
//!
//! A `dense` tensor of shape `[r, c]` is `r·c` f64 values, row-major. A
//! `csr` tensor of shape `[r, c]` with `nnz` entries is `r+1` u64 row
//! offsets, `nnz` u64 column indices, then `nnz` f64 values.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerNorm, LayerParams, LinformerProjections, Model, ModelConfig};
use crate::attention::AttentionHeadParams;
use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, DenseMatrix};
use crate::predictor::PredictorParams;

pub const WEIGHT_FILE_MAGIC: [u8; 4] = *b"SPFW";
pub const WEIGHT_FILE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    Dense(DenseMatrix),
    Csr(CsrMatrix),
}

impl Tensor {
    pub fn shape(&self) -> [usize; 2] {
        match self {
            Tensor::Dense(m) => [m.rows(), m.cols()],
            Tensor::Csr(m) => [m.rows(), m.cols()],
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TensorKind {
    Dense,
    Csr,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    dtype: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nnz: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus the model configuration, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn teacher_attention_name(layer: usize, head: usize) -> String {
    format!("teacher.attn.{layer}.{head}")
}

impl WeightFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name, tensor)),
        }
    }

    /// Teacher attention map stored as `teacher.attn.{layer}.{head}`.
    pub fn teacher_attention(&self, layer: usize, head: usize) -> Option<&DenseMatrix> {
        match self.get(&teacher_attention_name(layer, head)) {
            Some(Tensor::Dense(m)) => Some(m),
            _ => None,
        }
    }

    pub fn from_model(model: &Model) -> Self {
        let mut t: Vec<(String, Tensor)> = Vec::new();
        let dense = |name: String, m: &DenseMatrix| (name, Tensor::Dense(m.clone()));
        t.push(dense("patch_proj".into(), &model.patch_proj));
        t.push(dense("patch_bias".into(), &model.patch_bias));
        t.push(dense("cls_token".into(), &model.cls_token));
        t.push(dense("pos_embed".into(), &model.pos_embed));
        for (l, layer) in model.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                t.push(dense(format!("layers.{l}.heads.{h}.w_q"), &head.w_q));
                t.push(dense(format!("layers.{l}.heads.{h}.w_k"), &head.w_k));
                t.push(dense(format!("layers.{l}.heads.{h}.w_v"), &head.w_v));
            }
            t.push(dense(format!("layers.{l}.w_o"), &layer.w_o));
            t.push(dense(format!("layers.{l}.predictor.w_down"), layer.predictor.w_down()));
            t.push((w_up_name(l), Tensor::Csr(layer.predictor.w_up().clone())));
            t.push(dense(format!("layers.{l}.mlp_in"), &layer.mlp_in));
            t.push(dense(format!("layers.{l}.mlp_out"), &layer.mlp_out));
            t.push(dense(format!("layers.{l}.norm1.gamma"), &layer.norm1.gamma));
            t.push(dense(format!("layers.{l}.norm1.beta"), &layer.norm1.beta));
            t.push(dense(format!("layers.{l}.norm2.gamma"), &layer.norm2.gamma));
            t.push(dense(format!("layers.{l}.norm2.beta"), &layer.norm2.beta));
            if let Some(lin) = &layer.linformer {
                t.push(dense(format!("layers.{l}.linformer.e_proj"), &lin.e_proj));
                t.push(dense(format!("layers.{l}.linformer.f_proj"), &lin.f_proj));
            }
        }
        t.push(dense("final_norm.gamma".into(), &model.final_norm.gamma));
        t.push(dense("final_norm.beta".into(), &model.final_norm.beta));
        t.push(dense("head".into(), &model.head));
        t.push(dense("head_bias".into(), &model.head_bias));
        Self {
            config: model.config.clone(),
            tensors: t,
        }
    }

    /// Assembles a model, checking every expected tensor's name and shape.
    pub fn to_model(&self) -> Result<Model> {
        let cfg = &self.config;
        cfg.validate()?;
        let index: HashMap<&str, &Tensor> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let (d, n, dh, hid) = (cfg.d_model, cfg.n_tokens(), cfg.d_head(), cfg.hidden_dim());
        let pc = cfg.predictor;

        let lookup = |name: &str, expected: [usize; 2]| -> Result<&Tensor> {
            let t = index.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            if t.shape() != expected {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    declared: t.shape().to_vec(),
                    expected: expected.to_vec(),
                });
            }
            Ok(t)
        };
        let dense = |name: &str, r: usize, c: usize| -> Result<DenseMatrix> {
            match lookup(name, [r, c])? {
                Tensor::Dense(m) => Ok(m.clone()),
                Tensor::Csr(_) => Err(Error::Manifest(format!("tensor {name} must be dense"))),
            }
        };
        let norm = |prefix: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                gamma: dense(&format!("{prefix}.gamma"), 1, d)?,
                beta: dense(&format!("{prefix}.beta"), 1, d)?,
            })
        };

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let heads = (0..cfg.n_heads)
                .map(|h| {
                    AttentionHeadParams::new(
                        dense(&format!("layers.{l}.heads.{h}.w_q"), d, dh)?,
                        dense(&format!("layers.{l}.heads.{h}.w_k"), d, dh)?,
                        dense(&format!("layers.{l}.heads.{h}.w_v"), d, dh)?,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let up_name = w_up_name(l);
            let w_up = match lookup(&up_name, [pc.n_down, n])? {
                Tensor::Csr(m) => m.clone(),
                Tensor::Dense(m) => CsrMatrix::from_dense(m),
            };
            let predictor = PredictorParams::new(
                dense(&format!("layers.{l}.predictor.w_down"), pc.n_down, n)?,
                w_up,
                pc.tau,
                pc.budget,
            )?;
            let linformer = match cfg.linformer_rank {
                Some(k) => Some(LinformerProjections {
                    e_proj: dense(&format!("layers.{l}.linformer.e_proj"), k, n)?,
                    f_proj: dense(&format!("layers.{l}.linformer.f_proj"), k, n)?,
                }),
                None => None,
            };
            layers.push(LayerParams {
                heads,
                w_o: dense(&format!("layers.{l}.w_o"), d, d)?,
                predictor,
                mlp_in: dense(&format!("layers.{l}.mlp_in"), d, hid)?,
                mlp_out: dense(&format!("layers.{l}.mlp_out"), hid, d)?,
                norm1: norm(&format!("layers.{l}.norm1"))?,
                norm2: norm(&format!("layers.{l}.norm2"))?,
                linformer,
            });
        }
        Ok(Model {
            config: cfg.clone(),
            patch_proj: dense("patch_proj", cfg.patch_dim(), d)?,
            patch_bias: dense("patch_bias", 1, d)?,
            cls_token: dense("cls_token", 1, d)?,
            pos_embed: dense("pos_embed", n, d)?,
            layers,
            final_norm: norm("final_norm")?,
            head: dense("head", d, cfg.n_classes)?,
            head_bias: dense("head_bias", 1, cfg.n_classes)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| match t {
                Tensor::Dense(m) => TensorEntry {
                    name: name.clone(),
                    kind: TensorKind::Dense,
                    dtype: "f64".into(),
                    shape: vec![m.rows(), m.cols()],
                    nnz: None,
                },
                Tensor::Csr(m) => TensorEntry {
                    name: name.clone(),
                    kind: TensorKind::Csr,
                    dtype: "f64".into(),
                    shape: vec![m.rows(), m.cols()],
                    nnz: Some(m.nnz()),
                },
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            config: self.config.clone(),
            tensors: entries,
        })
        .expect("manifest serialises");

        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len());
        out.extend_from_slice(&WEIGHT_FILE_MAGIC);
        out.extend_from_slice(&WEIGHT_FILE_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            match t {
                Tensor::Dense(m) => m.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Tensor::Csr(m) => {
                    for &p in m.row_ptr().iter().chain(m.col_idx()) {
                        out.extend_from_slice(&(p as u64).to_le_bytes());
                    }
                    m.values().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != WEIGHT_FILE_MAGIC {
            return Err(Error::BadMagic {
                expected: WEIGHT_FILE_MAGIC,
                found: magic,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != WEIGHT_FILE_VERSION {
            return Err(Error::VersionMismatch {
                expected: WEIGHT_FILE_VERSION,
                found: version,
            });
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let manifest_bytes = bytes
            .get(HEADER_LEN..HEADER_LEN.saturating_add(mlen))
            .ok_or_else(|| Error::Truncated(format!("manifest needs {mlen} bytes")))?;
        let manifest: Manifest =
            serde_json::from_slice(manifest_bytes).map_err(|e| Error::Manifest(e.to_string()))?;

        let mut reader = WordReader {
            bytes,
            pos: HEADER_LEN + mlen,
        };
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f64" {
                return Err(Error::Manifest(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
            }
            let [rows, cols] = <[usize; 2]>::try_from(e.shape.as_slice())
                .map_err(|_| Error::Manifest(format!("tensor {}: shape must have 2 dims", e.name)))?;
            let tensor = match e.kind {
                TensorKind::Dense => {
                    let data = reader.f64s(rows * cols, &e.name)?;
                    Tensor::Dense(DenseMatrix::new(rows, cols, data)?)
                }
                TensorKind::Csr => {
                    let nnz = e
                        .nnz
                        .ok_or_else(|| Error::Manifest(format!("csr tensor {} lacks nnz", e.name)))?;
                    let row_ptr = reader.u64s(rows + 1, &e.name)?;
                    let col_idx = reader.u64s(nnz, &e.name)?;
                    let values = reader.f64s(nnz, &e.name)?;
                    Tensor::Csr(CsrMatrix::new(rows, cols, row_ptr, col_idx, values)?)
                }
            };
            tensors.push((e.name, tensor));
        }
        if reader.pos != bytes.len() {
            return Err(Error::Manifest(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - reader.pos
            )));
        }
        Ok(Self {
            config: manifest.config,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn w_up_name(layer: usize) -> String {
    format!("layers.{layer}.predictor.w_up")
}

struct WordReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl WordReader<'_> {
    fn words(&mut self, count: usize, name: &str) -> Result<&[u8]> {
        let len = count
            .checked_mul(8)
            .ok_or_else(|| Error::Manifest(format!("tensor {name} is too large")))?;
        let end = self.pos.saturating_add(len);
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::Truncated(format!(
                "tensor {name} needs {len} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        self.pos = end;
        Ok(chunk)
    }

    fn f64s(&mut self, count: usize, name: &str) -> Result<Vec<f64>> {
        Ok(self
            .words(count, name)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn u64s(&mut self, count: usize, name: &str) -> Result<Vec<usize>> {
        Ok(self
            .words(count, name)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::PredictorConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            mlp_ratio: 2.0,
            n_classes: 3,
            predictor: PredictorConfig {
                n_down: 3,
                tau: 0.05,
                budget: 4,
            },
            linformer_rank: Some(2),
        }
    }

    fn bits(m: &Model) -> Vec<u64> {
        WeightFile::from_model(m)
            .tensors
            .iter()
            .flat_map(|(_, t)| match t {
                Tensor::Dense(d) => d.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                Tensor::Csr(c) => c.values().iter().map(|v| v.to_bits()).collect(),
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.spfw");
        let m = Model::random(cfg(), 42).unwrap();
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = WeightFile::from_model(&Model::random(cfg(), 1).unwrap()).to_bytes();
        for cut in [2, 10, 40, bytes.len() - 3] {
            let err = WeightFile::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Truncated(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = WeightFile::from_model(&Model::random(cfg(), 1).unwrap()).to_bytes();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(WeightFile::from_bytes(&wrong), Err(Error::BadMagic { .. })));
        bytes[4] = 9;
        assert!(matches!(
            WeightFile::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let m = Model::random(cfg(), 1).unwrap();
        let mut wf = WeightFile::from_model(&m);
        wf.insert("layers.1.w_o", Tensor::Dense(DenseMatrix::zeros(8, 7)));
        let back = WeightFile::from_bytes(&wf.to_bytes()).unwrap();
        match back.to_model() {
            Err(Error::ShapeMismatch { name, declared, expected }) => {
                assert_eq!(name, "layers.1.w_o");
                assert_eq!(declared, vec![8, 7]);
                assert_eq!(expected, vec![8, 8]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_tensor_and_trailing_bytes() {
        let m = Model::random(cfg(), 1).unwrap();
        let mut wf = WeightFile::from_model(&m);
        wf.tensors.retain(|(n, _)| n != "head");
        assert!(matches!(wf.to_model(), Err(Error::MissingTensor(n)) if n == "head"));

        let mut bytes = WeightFile::from_model(&m).to_bytes();
        bytes.push(0);
        assert!(matches!(WeightFile::from_bytes(&bytes), Err(Error::Manifest(_))));
    }

    #[test]
    fn teacher_tensors_survive_round_trip() {
        let m = Model::random(cfg(), 1).unwrap();
        let mut wf = WeightFile::from_model(&m);
        let a = DenseMatrix::filled(5, 5, 0.2).unwrap();
        wf.insert(teacher_attention_name(1, 0), Tensor::Dense(a.clone()));
        let back = WeightFile::from_bytes(&wf.to_bytes()).unwrap();
        assert_eq!(back.teacher_attention(1, 0), Some(&a));
        assert_eq!(back.teacher_attention(0, 0), None);
        assert_eq!(back.to_model().unwrap(), m);
    }
}
