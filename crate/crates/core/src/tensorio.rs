//! Model, calibration and compressed-artifact storage.
//!
//! Every artifact is a JSON manifest next to a single binary blob. The
//! manifest carries the model geometry, any structured metadata, and a tensor
//! table of `{name, file, offset, shape, dtype}` entries pointing into raw
//! little-endian IEEE-754 data. `f32` tensors are upcast to `f64` on load.
//! Loading validates every shape against the declared geometry and rejects
//! non-finite values and short reads.
//!
//! The layout is described in full in the book chapter on file formats.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{Mlp, ToyModel};
use crate::error::{Error, Result};
use crate::headgroup::HeadGrouping;
use crate::keycomp::CompressedKey;
use crate::linalg::LowRankPair;
use crate::matrix::Matrix;
use crate::rankalloc::RankAllocation;
use crate::valuecomp::CompressedValue;

pub const FORMAT_NAME: &str = "latentkv";
pub const FORMAT_VERSION: u32 = 1;

/// Attention geometry shared by every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub rope_theta: f64,
    /// Only needed by the engine; zero for weight-only manifests.
    #[serde(default)]
    pub vocab_size: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::invalid("model has no layers"));
        }
        if self.n_heads == 0 || self.d_head == 0 {
            return Err(Error::invalid("head count and head width must be positive"));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::invalid(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::invalid(format!(
                "{} kv heads do not divide {} query heads",
                self.n_kv_heads, self.n_heads
            )));
        }
        if !(self.rope_theta > 0.0) || !self.rope_theta.is_finite() {
            return Err(Error::invalid(format!("rope_theta must be positive, got {}", self.rope_theta)));
        }
        Ok(())
    }

    /// Uncompressed key (or value) floats per token per layer.
    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Query heads per kv head.
    pub fn gqa_share(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
}

/// Projection matrices of one attention block, all in `Y = X·W` orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

impl LayerWeights {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let q = spec.n_heads * spec.d_head;
        let kv = spec.kv_width();
        let d = spec.d_model;
        for (name, m, want) in [
            ("w_q", &self.w_q, (d, q)),
            ("w_k", &self.w_k, (d, kv)),
            ("w_v", &self.w_v, (d, kv)),
            ("w_o", &self.w_o, (q, d)),
        ] {
            if m.shape() != want {
                return Err(Error::shape(format!("{name} is {:?}, expected {want:?}", m.shape())));
            }
        }
        Ok(())
    }
}

/// Per-layer attention-block inputs collected over calibration tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub layers: Vec<Matrix>,
    pub source_tokens: usize,
    pub provenance: String,
}

impl CalibrationSet {
    pub fn new(layers: Vec<Matrix>, source_tokens: usize, provenance: impl Into<String>) -> Result<Self> {
        let set = CalibrationSet {
            layers,
            source_tokens,
            provenance: provenance.into(),
        };
        set.check_uniform()?;
        Ok(set)
    }

    fn check_uniform(&self) -> Result<()> {
        let t = self.tokens();
        if let Some((i, m)) = self.layers.iter().enumerate().find(|(_, m)| m.rows() != t) {
            return Err(Error::shape(format!(
                "layer {i} has {} calibration tokens, layer 0 has {t}",
                m.rows()
            )));
        }
        Ok(())
    }

    /// Token rows per layer.
    pub fn tokens(&self) -> usize {
        self.layers.first().map_or(0, Matrix::rows)
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() != spec.n_layers {
            return Err(Error::shape(format!(
                "calibration has {} layers, model has {}",
                self.layers.len(),
                spec.n_layers
            )));
        }
        self.check_uniform()?;
        if let Some((i, m)) = self.layers.iter().enumerate().find(|(_, m)| m.cols() != spec.d_model) {
            return Err(Error::shape(format!(
                "layer {i} activations have {} columns, d_model is {}",
                m.cols(),
                spec.d_model
            )));
        }
        Ok(())
    }
}

/// Compressed key and value projections of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub key: CompressedKey,
    pub value: CompressedValue,
}

impl CompressedLayer {
    /// Cached floats per token in this layer: `Σ_j r_gj + r_v`.
    pub fn latent_width(&self) -> usize {
        self.key.latent_width() + self.value.rank()
    }
}

/// A full compressed artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub spec: ModelSpec,
    pub layers: Vec<CompressedLayer>,
    pub allocation: Option<RankAllocation>,
}

impl CompressedModel {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.layers.is_empty() {
            return Err(Error::invalid("no layers"));
        }
        if self.layers.len() != self.spec.n_layers {
            return Err(Error::shape(format!(
                "{} compressed layers for a {}-layer model",
                self.layers.len(),
                self.spec.n_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let check = || -> Result<()> {
                if l.key.grouping().heads() != self.spec.n_kv_heads || l.key.d_head() != self.spec.d_head {
                    return Err(Error::shape("key grouping does not match model geometry"));
                }
                if l.key.d_model() != self.spec.d_model {
                    return Err(Error::shape("key factors do not match d_model"));
                }
                CompressedValue::new(
                    l.value.left().clone(),
                    l.value.right().cloned(),
                    l.value.fused_w_o().clone(),
                    &self.spec,
                )?;
                Ok(())
            };
            check().map_err(|e| e.in_layer(i))?;
        }
        Ok(())
    }

    /// Fraction of per-token KV width removed across all layers.
    pub fn compression_ratio(&self) -> f64 {
        let kept: usize = self.layers.iter().map(CompressedLayer::latent_width).sum();
        let full = 2 * self.spec.kv_width() * self.layers.len();
        1.0 - kept as f64 / full as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestKind {
    Model,
    Compressed,
    Calibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub offset: u64,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

/// Per-layer structure of a compressed artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedLayerMeta {
    pub grouping: HeadGrouping,
    pub key_ranks: Vec<usize>,
    pub value_rank: usize,
    pub value_right_factor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMeta {
    pub source_tokens: usize,
    pub provenance: String,
}

/// The JSON manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: ManifestKind,
    pub spec: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compressed_layers: Option<Vec<CompressedLayerMeta>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<RankAllocation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationMeta>,
    pub tensors: Vec<TensorEntry>,
}

/// Accumulates tensors into one blob while building the tensor table.
struct BlobWriter {
    file: String,
    dtype: DType,
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl BlobWriter {
    fn new(file: String, dtype: DType) -> Self {
        BlobWriter {
            file,
            dtype,
            bytes: Vec::new(),
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: impl Into<String>, m: &Matrix) {
        self.push_shaped(name, vec![m.rows(), m.cols()], m.data());
    }

    fn push_vector(&mut self, name: impl Into<String>, v: &[f64]) {
        self.push_shaped(name, vec![v.len()], v);
    }

    fn push_shaped(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) {
        let offset = self.bytes.len() as u64;
        for &v in data {
            match self.dtype {
                DType::F64 => self.bytes.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => self.bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        self.entries.push(TensorEntry {
            name: name.into(),
            file: self.file.clone(),
            offset,
            shape,
            dtype: self.dtype,
        });
    }
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn write_artifact(path: &Path, mut manifest: Manifest, blob: BlobWriter) -> Result<()> {
    manifest.tensors = blob.entries;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(path, format!("cannot serialise manifest: {e}")))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bin = blob_path(path);
    fs::write(&bin, &blob.bytes).map_err(|e| Error::io(&bin, e))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn new_writer(path: &Path, dtype: DType) -> BlobWriter {
    let file = blob_path(path)
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| "tensors.bin".into());
    BlobWriter::new(file, dtype)
}

fn manifest_for(kind: ManifestKind, spec: &ModelSpec) -> Manifest {
    Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        kind,
        spec: spec.clone(),
        compressed_layers: None,
        allocation: None,
        calibration: None,
        tensors: Vec::new(),
    }
}

/// Loaded manifest plus decoded tensors by name.
pub struct Artifact {
    pub manifest: Manifest,
    path: PathBuf,
    tensors: BTreeMap<String, Matrix>,
}

impl Artifact {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if manifest.format != FORMAT_NAME {
            return Err(Error::format(path, format!("unknown format `{}`", manifest.format)));
        }
        if manifest.version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {}", manifest.version)));
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        for entry in &manifest.tensors {
            if !blobs.contains_key(&entry.file) {
                let p = resolve(base, &entry.file);
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                blobs.insert(entry.file.clone(), bytes);
            }
            let m = decode(entry, &blobs[&entry.file], path)?;
            if tensors.insert(entry.name.clone(), m).is_some() {
                return Err(Error::format(path, format!("duplicate tensor `{}`", entry.name)));
            }
        }
        Ok(Artifact {
            manifest,
            path: path.to_path_buf(),
            tensors,
        })
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Take a tensor, checking its shape.
    pub fn take(&mut self, name: &str, shape: (usize, usize)) -> Result<Matrix> {
        let m = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::format(&self.path, format!("missing tensor `{name}`")))?;
        if m.shape() != shape {
            return Err(Error::shape(format!(
                "tensor `{name}` is {:?}, expected {shape:?}",
                m.shape()
            )));
        }
        Ok(m)
    }

    pub fn take_vector(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        Ok(self.take(name, (1, len))?.into_data())
    }

    fn take_any(&mut self, name: &str) -> Result<Matrix> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::format(&self.path, format!("missing tensor `{name}`")))
    }

    fn expect_kind(&self, kind: ManifestKind) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(Error::format(
                &self.path,
                format!("expected a {kind:?} manifest, found {:?}", self.manifest.kind),
            ));
        }
        Ok(())
    }
}

fn resolve(base: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn decode(entry: &TensorEntry, blob: &[u8], manifest: &Path) -> Result<Matrix> {
    let (rows, cols) = match entry.shape.as_slice() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => {
            return Err(Error::format(
                manifest,
                format!("tensor `{}` has unsupported rank {}", entry.name, other.len()),
            ))
        }
    };
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format(manifest, format!("tensor `{}` too large", entry.name)))?;
    let size = entry.dtype.size();
    let start = usize::try_from(entry.offset)
        .map_err(|_| Error::format(manifest, format!("tensor `{}` offset overflows", entry.name)))?;
    let end = count
        .checked_mul(size)
        .and_then(|n| n.checked_add(start))
        .ok_or_else(|| Error::format(manifest, format!("tensor `{}` too large", entry.name)))?;
    if end > blob.len() {
        return Err(Error::format(
            manifest,
            format!(
                "tensor `{}` needs bytes {start}..{end} but `{}` has {}",
                entry.name,
                entry.file,
                blob.len()
            ),
        ));
    }
    let bytes = &blob[start..end];
    let data: Vec<f64> = match entry.dtype {
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
            .collect(),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("tensor `{}`", entry.name)));
    }
    Matrix::new(rows, cols, data)
}

/// Write a model manifest. Engine tensors (embedding, norms, head, MLPs) are
/// included so the toy engine can run from disk.
pub fn save_model(path: impl AsRef<Path>, model: &ToyModel) -> Result<()> {
    save_model_as(path, model, DType::F64)
}

pub fn save_model_as(path: impl AsRef<Path>, model: &ToyModel, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    model.validate()?;
    let mut w = new_writer(path, dtype);
    for (i, l) in model.layers.iter().enumerate() {
        w.push(format!("layers.{i}.w_q"), &l.w_q);
        w.push(format!("layers.{i}.w_k"), &l.w_k);
        w.push(format!("layers.{i}.w_v"), &l.w_v);
        w.push(format!("layers.{i}.w_o"), &l.w_o);
        w.push_vector(format!("layers.{i}.attn_norm"), &model.attn_norms[i]);
        if let Some(mlps) = &model.mlps {
            w.push_vector(format!("layers.{i}.mlp.norm"), &mlps[i].norm);
            w.push(format!("layers.{i}.mlp.w_in"), &mlps[i].w_in);
            w.push(format!("layers.{i}.mlp.w_out"), &mlps[i].w_out);
        }
    }
    w.push("embedding", &model.embedding);
    w.push("output_head", &model.output_head);
    w.push_vector("final_norm", &model.final_norm);
    write_artifact(path, manifest_for(ManifestKind::Model, &model.spec), w)
}

fn read_layers(a: &mut Artifact) -> Result<Vec<LayerWeights>> {
    let spec = a.manifest.spec.clone();
    let q = spec.n_heads * spec.d_head;
    let kv = spec.kv_width();
    let d = spec.d_model;
    (0..spec.n_layers)
        .map(|i| {
            Ok(LayerWeights {
                w_q: a.take(&format!("layers.{i}.w_q"), (d, q))?,
                w_k: a.take(&format!("layers.{i}.w_k"), (d, kv))?,
                w_v: a.take(&format!("layers.{i}.w_v"), (d, kv))?,
                w_o: a.take(&format!("layers.{i}.w_o"), (q, d))?,
            })
        })
        .collect()
}

/// Load geometry and attention projections from a model manifest.
pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelSpec, Vec<LayerWeights>)> {
    let mut a = Artifact::read(path)?;
    a.expect_kind(ManifestKind::Model)?;
    a.manifest.spec.validate()?;
    let layers = read_layers(&mut a)?;
    Ok((a.manifest.spec.clone(), layers))
}

/// Load a model manifest including the engine-only tensors.
pub fn load_toy_model(path: impl AsRef<Path>) -> Result<ToyModel> {
    let mut a = Artifact::read(path)?;
    a.expect_kind(ManifestKind::Model)?;
    let spec = a.manifest.spec.clone();
    spec.validate()?;
    if spec.vocab_size == 0 {
        return Err(Error::invalid("engine needs vocab_size > 0"));
    }
    let layers = read_layers(&mut a)?;
    let d = spec.d_model;
    let attn_norms = (0..spec.n_layers)
        .map(|i| a.take_vector(&format!("layers.{i}.attn_norm"), d))
        .collect::<Result<Vec<_>>>()?;
    let mlps = if a.has("layers.0.mlp.w_in") {
        let mut out = Vec::with_capacity(spec.n_layers);
        for i in 0..spec.n_layers {
            let w_in = a.take_any(&format!("layers.{i}.mlp.w_in"))?;
            let hidden = w_in.cols();
            if w_in.rows() != d {
                return Err(Error::shape(format!("layer {i} mlp input is {:?}", w_in.shape())));
            }
            out.push(Mlp {
                norm: a.take_vector(&format!("layers.{i}.mlp.norm"), d)?,
                w_in,
                w_out: a.take(&format!("layers.{i}.mlp.w_out"), (hidden, d))?,
            });
        }
        Some(out)
    } else {
        None
    };
    let model = ToyModel {
        embedding: a.take("embedding", (spec.vocab_size, d))?,
        output_head: a.take("output_head", (d, spec.vocab_size))?,
        final_norm: a.take_vector("final_norm", d)?,
        spec,
        layers,
        attn_norms,
        mlps,
    };
    model.validate()?;
    Ok(model)
}

/// Write a compressed artifact. The spec, head permutations, ranks and any
/// rank allocation go into the manifest; factors go into the blob.
pub fn save_compressed(path: impl AsRef<Path>, model: &CompressedModel) -> Result<()> {
    let path = path.as_ref();
    model.validate()?;
    let mut w = new_writer(path, DType::F64);
    let mut metas = Vec::with_capacity(model.layers.len());
    for (i, l) in model.layers.iter().enumerate() {
        for (j, f) in l.key.factors().iter().enumerate() {
            w.push(format!("layers.{i}.key.{j}.left"), &f.left);
            w.push(format!("layers.{i}.key.{j}.right"), &f.right);
        }
        w.push(format!("layers.{i}.value.left"), l.value.left());
        if let Some(r) = l.value.right() {
            w.push(format!("layers.{i}.value.right"), r);
        }
        w.push(format!("layers.{i}.value.fused_w_o"), l.value.fused_w_o());
        metas.push(CompressedLayerMeta {
            grouping: l.key.grouping().clone(),
            key_ranks: l.key.ranks(),
            value_rank: l.value.rank(),
            value_right_factor: l.value.right().is_some(),
        });
    }
    let mut manifest = manifest_for(ManifestKind::Compressed, &model.spec);
    manifest.compressed_layers = Some(metas);
    manifest.allocation = model.allocation.clone();
    write_artifact(path, manifest, w)
}

pub fn load_compressed(path: impl AsRef<Path>) -> Result<CompressedModel> {
    let path = path.as_ref();
    let mut a = Artifact::read(path)?;
    a.expect_kind(ManifestKind::Compressed)?;
    let spec = a.manifest.spec.clone();
    spec.validate()?;
    let metas = a
        .manifest
        .compressed_layers
        .clone()
        .ok_or_else(|| Error::format(path, "compressed manifest lacks layer metadata"))?;
    if metas.is_empty() {
        return Err(Error::invalid("no layers"));
    }
    let d = spec.d_model;
    let mut layers = Vec::with_capacity(metas.len());
    for (i, meta) in metas.iter().enumerate() {
        let group_width = meta.grouping.group_size() * spec.d_head;
        let mut factors = Vec::with_capacity(meta.key_ranks.len());
        for (j, &r) in meta.key_ranks.iter().enumerate() {
            factors.push(LowRankPair::new(
                a.take(&format!("layers.{i}.key.{j}.left"), (d, r))?,
                a.take(&format!("layers.{i}.key.{j}.right"), (r, group_width))?,
            )?);
        }
        let key = CompressedKey::new(meta.grouping.clone(), factors, spec.d_head).map_err(|e| e.in_layer(i))?;
        let r = meta.value_rank;
        let left = a.take(&format!("layers.{i}.value.left"), (d, r))?;
        let right = if meta.value_right_factor {
            Some(a.take(&format!("layers.{i}.value.right"), (r, spec.kv_width()))?)
        } else {
            None
        };
        let fused = a.take(&format!("layers.{i}.value.fused_w_o"), (spec.n_heads * r, d))?;
        let value = CompressedValue::new(left, right, fused, &spec).map_err(|e| e.in_layer(i))?;
        layers.push(CompressedLayer { key, value });
    }
    let model = CompressedModel {
        spec,
        layers,
        allocation: a.manifest.allocation.clone(),
    };
    model.validate()?;
    Ok(model)
}

pub fn save_calibration(path: impl AsRef<Path>, spec: &ModelSpec, calib: &CalibrationSet) -> Result<()> {
    let path = path.as_ref();
    calib.validate(spec)?;
    let mut w = new_writer(path, DType::F64);
    for (i, m) in calib.layers.iter().enumerate() {
        w.push(format!("layers.{i}.activations"), m);
    }
    let mut manifest = manifest_for(ManifestKind::Calibration, spec);
    manifest.calibration = Some(CalibrationMeta {
        source_tokens: calib.source_tokens,
        provenance: calib.provenance.clone(),
    });
    write_artifact(path, manifest, w)
}

/// Load calibration activations and check them against `spec`.
pub fn load_calibration(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<CalibrationSet> {
    let path = path.as_ref();
    let mut a = Artifact::read(path)?;
    a.expect_kind(ManifestKind::Calibration)?;
    let n = a
        .manifest
        .tensors
        .iter()
        .filter(|t| t.name.starts_with("layers.") && t.name.ends_with(".activations"))
        .count();
    if n != spec.n_layers {
        return Err(Error::shape(format!(
            "calibration file has {n} layers, model has {}",
            spec.n_layers
        )));
    }
    let layers = (0..n)
        .map(|i| a.take_any(&format!("layers.{i}.activations")))
        .collect::<Result<Vec<_>>>()?;
    let meta = a.manifest.calibration.clone().unwrap_or(CalibrationMeta {
        source_tokens: layers.first().map_or(0, Matrix::rows),
        provenance: String::new(),
    });
    let set = CalibrationSet {
        layers,
        source_tokens: meta.source_tokens,
        provenance: meta.provenance,
    };
    set.validate(spec)?;
    Ok(set)
}
