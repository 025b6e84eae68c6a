//! End-to-end compression pipeline and evaluation.
//!
//! `compress_layers` runs, in order: importance scores (supplied), rank
//! allocation, then for every layer the key path (head similarity, greedy
//! reordering, grouped SVD) and the value path (SVD, calibration, fusion).
//! Each step is recorded as a [`Stage`] so a run can be audited afterwards.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cka::{head_similarity, HeadSource};
use crate::engine::{
    attention_reference, fidelity_report, full_cache_bytes, latent_cache_bytes, CompressedSession,
    FidelityReport, KeyMode, QuantConfig, SessionOptions, ToyModel, ValuePath,
};
use crate::error::{Error, Result};
use crate::headgroup::{greedy_group, HeadGrouping};
use crate::keycomp::{compress_key_with_grouping, uniform_group_ranks, DEFAULT_GROUP_SIZE};
use crate::matrix::Matrix;
use crate::rankalloc::{allocate, AllocationOptions, AllocationRule, FisherScores, Pooling, RankAllocation};
use crate::tensorio::{CalibrationSet, CompressedLayer, CompressedModel, LayerWeights, ModelSpec};
use crate::valuecomp::{compress_value_split, ValueCompressionOptions, DEFAULT_CALIBRATION_ITERS};

/// Which representation head similarity is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityMode {
    #[default]
    Weights,
    Activations,
}

/// Where importance scores come from.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum FisherSource {
    #[default]
    FiniteDifference,
    Uniform,
    File(PathBuf),
}

/// Pipeline settings. Every field has a key in the flat config format.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub target_ratio: f64,
    pub group_size: usize,
    /// Calibration activations file; synthesised from `seed` when absent.
    pub calibration: Option<PathBuf>,
    pub seed: u64,
    pub calib_tokens: usize,
    pub whiten: bool,
    pub reorder: bool,
    pub calibrate: bool,
    pub calib_iters: usize,
    /// Whiten on the first half of the calibration tokens and calibrate on
    /// the second half.
    pub split_calibration: bool,
    /// Cache quantization bit width used by `eval`; `None` is off.
    pub quant: Option<u8>,
    pub ridge: f64,
    pub output: Option<PathBuf>,
    pub similarity: SimilarityMode,
    pub fisher: FisherSource,
    pub fisher_tokens: usize,
    pub fisher_epsilon: f64,
    pub fisher_samples: usize,
    pub allocation: AllocationRule,
    pub pooling: Pooling,
    pub min_rank: usize,
    pub keep_right_factor: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            target_ratio: 0.5,
            group_size: DEFAULT_GROUP_SIZE,
            calibration: None,
            seed: 0,
            calib_tokens: 256,
            whiten: true,
            reorder: true,
            calibrate: true,
            calib_iters: DEFAULT_CALIBRATION_ITERS,
            split_calibration: false,
            quant: None,
            ridge: 0.0,
            output: None,
            similarity: SimilarityMode::Weights,
            fisher: FisherSource::FiniteDifference,
            fisher_tokens: 64,
            fisher_epsilon: 1e-3,
            fisher_samples: 32,
            allocation: AllocationRule::HighestAverages,
            pooling: Pooling::Joint,
            min_rank: 1,
            keep_right_factor: true,
        }
    }
}

/// Keys accepted by [`PipelineConfig::set`], in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "target_ratio",
    "group_size",
    "calibration",
    "seed",
    "calib_tokens",
    "whiten",
    "reorder",
    "calibrate",
    "calib_iters",
    "split_calibration",
    "quant",
    "ridge",
    "output",
    "similarity",
    "fisher",
    "fisher_tokens",
    "fisher_epsilon",
    "fisher_samples",
    "allocation",
    "pooling",
    "min_rank",
    "keep_right_factor",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("bad value `{value}` for `{key}`; expected true or false"))),
    }
}

/// Parse `off`, `3` or `4`.
pub fn parse_quant(value: &str) -> Result<Option<u8>> {
    match value {
        "off" | "none" | "16" => Ok(None),
        "3" => Ok(Some(3)),
        "4" => Ok(Some(4)),
        _ => Err(Error::invalid(format!("bad quant setting `{value}`; expected off, 4 or 3"))),
    }
}

impl PipelineConfig {
    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "target_ratio" => self.target_ratio = parse(key, v)?,
            "group_size" => self.group_size = parse(key, v)?,
            "calibration" => self.calibration = (!v.is_empty()).then(|| PathBuf::from(v)),
            "seed" => self.seed = parse(key, v)?,
            "calib_tokens" => self.calib_tokens = parse(key, v)?,
            "whiten" => self.whiten = parse_bool(key, v)?,
            "reorder" => self.reorder = parse_bool(key, v)?,
            "calibrate" => self.calibrate = parse_bool(key, v)?,
            "calib_iters" => self.calib_iters = parse(key, v)?,
            "split_calibration" => self.split_calibration = parse_bool(key, v)?,
            "quant" => self.quant = parse_quant(v)?,
            "ridge" => self.ridge = parse(key, v)?,
            "output" => self.output = (!v.is_empty()).then(|| PathBuf::from(v)),
            "similarity" => {
                self.similarity = match v {
                    "weights" => SimilarityMode::Weights,
                    "activations" => SimilarityMode::Activations,
                    _ => return Err(Error::invalid(format!("bad similarity mode `{v}`"))),
                }
            }
            "fisher" => {
                self.fisher = match v {
                    "finite-difference" | "fd" => FisherSource::FiniteDifference,
                    "uniform" => FisherSource::Uniform,
                    path => FisherSource::File(PathBuf::from(path)),
                }
            }
            "fisher_tokens" => self.fisher_tokens = parse(key, v)?,
            "fisher_epsilon" => self.fisher_epsilon = parse(key, v)?,
            "fisher_samples" => self.fisher_samples = parse(key, v)?,
            "allocation" => {
                self.allocation = match v {
                    "proportional" => AllocationRule::Proportional,
                    "highest-averages" => AllocationRule::HighestAverages,
                    _ => return Err(Error::invalid(format!("bad allocation rule `{v}`"))),
                }
            }
            "pooling" => {
                self.pooling = match v {
                    "joint" => Pooling::Joint,
                    "per-type" => Pooling::PerType,
                    _ => return Err(Error::invalid(format!("bad pooling `{v}`"))),
                }
            }
            "min_rank" => self.min_rank = parse(key, v)?,
            "keep_right_factor" => self.keep_right_factor = parse_bool(key, v)?,
            other => return Err(Error::invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Apply a flat `key = value` text. Blank lines and `#` comments are
    /// ignored; unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::invalid(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = PipelineConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio > 0.0 && self.target_ratio < 1.0) {
            return Err(Error::invalid(format!("ratio must be in (0,1), got {}", self.target_ratio)));
        }
        if self.group_size == 0 {
            return Err(Error::invalid("group_size must be at least 1"));
        }
        if self.calib_iters == 0 && self.calibrate {
            return Err(Error::invalid("calib_iters must be positive when calibrating"));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::invalid("ridge must be non-negative"));
        }
        if self.min_rank == 0 {
            return Err(Error::invalid("min_rank must be at least 1"));
        }
        Ok(())
    }

    pub fn quant_config(&self) -> Option<QuantConfig> {
        self.quant.map(|bits| QuantConfig {
            seed: self.seed,
            ..QuantConfig::new(bits)
        })
    }
}

/// One recorded pipeline step.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub step: &'static str,
    pub layer: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "[layer {l}] {}: {}", self.step, self.detail),
            None => write!(f, "{}: {}", self.step, self.detail),
        }
    }
}

fn stage(step: &'static str, layer: Option<usize>, detail: impl Into<String>) -> Stage {
    Stage {
        step,
        layer,
        detail: detail.into(),
    }
}

pub struct CompressOutcome {
    pub model: CompressedModel,
    pub trace: Vec<Stage>,
}

/// Allocate ranks and compress every layer. `calib` is required whenever
/// whitening, calibration or activation similarity is enabled.
pub fn compress_layers(
    spec: &ModelSpec,
    layers: &[LayerWeights],
    calib: Option<&CalibrationSet>,
    scores: &FisherScores,
    cfg: &PipelineConfig,
) -> Result<CompressOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if layers.len() != spec.n_layers {
        return Err(Error::shape(format!("{} layers for a {}-layer spec", layers.len(), spec.n_layers)));
    }
    let needs_calib = cfg.whiten || cfg.calibrate || cfg.similarity == SimilarityMode::Activations;
    if needs_calib && calib.is_none() {
        return Err(Error::invalid(
            "calibration activations are required for whitening, calibration or activation similarity",
        ));
    }
    if let Some(c) = calib {
        c.validate(spec)?;
    }
    let mut trace = vec![stage(
        "fisher",
        None,
        format!(
            "{} scores from {} tokens: {}",
            scores.method,
            scores.tokens,
            scores
                .layers
                .iter()
                .map(|s| format!("({:.3e}, {:.3e})", s.key_score, s.value_score))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    )];
    let alloc_opts = AllocationOptions {
        rule: cfg.allocation,
        pooling: cfg.pooling,
        min_rank: cfg.min_rank,
    };
    let allocation = allocate(scores, spec, cfg.target_ratio, cfg.group_size, &alloc_opts)?;
    trace.push(stage(
        "allocate",
        None,
        format!(
            "budget {} of {}, achieved ratio {:.6}",
            allocation.budget,
            2 * spec.kv_width() * spec.n_layers,
            allocation.achieved_ratio
        ),
    ));

    let per_layer: Vec<(CompressedLayer, Vec<Stage>)> = layers
        .par_iter()
        .enumerate()
        .map(|(l, w)| {
            compress_one(l, w, spec, calib.map(|c| &c.layers[l]), &allocation, cfg).map_err(|e| e.in_layer(l))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out_layers = Vec::with_capacity(per_layer.len());
    for (layer, stages) in per_layer {
        trace.extend(stages);
        out_layers.push(layer);
    }
    let model = CompressedModel {
        spec: spec.clone(),
        layers: out_layers,
        allocation: Some(allocation),
    };
    model.validate()?;
    Ok(CompressOutcome { model, trace })
}

fn compress_one(
    l: usize,
    w: &LayerWeights,
    spec: &ModelSpec,
    x: Option<&Matrix>,
    alloc: &RankAllocation,
    cfg: &PipelineConfig,
) -> Result<(CompressedLayer, Vec<Stage>)> {
    let mut trace = Vec::new();
    let ranks = alloc.layers[l];
    let groups = spec.n_kv_heads / cfg.group_size;

    let grouping = if cfg.reorder && cfg.group_size > 1 {
        let source = match cfg.similarity {
            SimilarityMode::Weights => HeadSource::Weights,
            SimilarityMode::Activations => HeadSource::Activations(x.expect("checked by caller")),
        };
        let sim = head_similarity(&w.w_k, spec.d_head, source)?;
        trace.push(stage("key.similarity", Some(l), format!("{:?} CKA over {} heads", cfg.similarity, sim.heads())));
        let g = greedy_group(&sim, cfg.group_size)?;
        trace.push(stage("key.reorder", Some(l), format!("groups {:?}", g.groups())));
        g
    } else {
        trace.push(stage("key.reorder", Some(l), "disabled; consecutive groups"));
        HeadGrouping::identity(spec.n_kv_heads, cfg.group_size)?
    };
    let key_ranks = uniform_group_ranks(ranks.key_rank_per_group, groups);
    let whiten_x = if cfg.whiten { x } else { None };
    let key = compress_key_with_grouping(&w.w_k, spec.d_head, grouping, &key_ranks, whiten_x, cfg.ridge)?;
    trace.push(stage(
        "key.grouped_svd",
        Some(l),
        format!("{} groups at rank {}{}", groups, ranks.key_rank_per_group, if whiten_x.is_some() { ", whitened" } else { "" }),
    ));
    trace.push(stage("key.update", Some(l), format!("key latent width {}", key.latent_width())));

    let (wx, cx) = match (x, cfg.split_calibration) {
        (Some(x), true) if x.rows() >= 2 => {
            let half = x.rows() / 2;
            (Some(x.row_block(0, half)), Some(x.row_block(half, x.rows() - half)))
        }
        (x, _) => (x.cloned(), x.cloned()),
    };
    let vopts = ValueCompressionOptions {
        whiten: cfg.whiten,
        calibrate: cfg.calibrate,
        iters: cfg.calib_iters,
        ridge: cfg.ridge,
        keep_right_factor: cfg.keep_right_factor,
    };
    trace.push(stage(
        "value.svd",
        Some(l),
        format!("rank {}{}", ranks.value_rank, if cfg.whiten { ", whitened" } else { "" }),
    ));
    let value = compress_value_split(&w.w_v, &w.w_o, spec, ranks.value_rank, wx.as_ref(), cx.as_ref(), &vopts)?;
    trace.push(stage(
        "value.calibrate",
        Some(l),
        if cfg.calibrate {
            format!("{} alternating iteration(s)", cfg.calib_iters)
        } else {
            "disabled".to_string()
        },
    ));
    trace.push(stage("value.fuse", Some(l), format!("{} fused output blocks", spec.n_heads)));
    trace.push(stage("value.update", Some(l), format!("value latent width {}", value.rank())));
    Ok((CompressedLayer { key, value }, trace))
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryReport {
    pub elem_bytes: usize,
    pub tokens: usize,
    pub baseline_bytes: usize,
    pub compressed_bytes: usize,
    pub fraction_of_baseline: f64,
}

/// Output of `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub tokens: usize,
    pub quant_bits: Option<u8>,
    pub value_path: ValuePath,
    pub compression_ratio: f64,
    pub fidelity: FidelityReport,
    pub memory: MemoryReport,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::invalid(format!("unsupported report schema {}", self.schema_version)));
        }
        let f = &self.fidelity;
        if !(f.max_abs_err >= 0.0) || !(f.frobenius_rel_err >= 0.0) || !(-1.0..=1.0).contains(&f.final_token_cosine) {
            return Err(Error::invalid("fidelity fields out of range"));
        }
        if !(0.0..=1.0).contains(&self.compression_ratio) {
            return Err(Error::invalid("compression ratio out of range"));
        }
        if let Some(b) = self.quant_bits {
            if b != 3 && b != 4 {
                return Err(Error::invalid(format!("unsupported quant bits {b}")));
            }
        }
        let m = &self.memory;
        if m.tokens != self.tokens || m.elem_bytes == 0 {
            return Err(Error::invalid("memory fields inconsistent"));
        }
        let fraction = m.compressed_bytes as f64 / m.baseline_bytes as f64;
        if m.baseline_bytes != 0 && fraction != m.fraction_of_baseline {
            return Err(Error::invalid("memory fraction does not match byte counts"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Parse and validate a report.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("report schema: {e}")))?;
        r.validate()?;
        Ok(r)
    }
}

fn same_geometry(a: &ModelSpec, b: &ModelSpec) -> bool {
    a.d_model == b.d_model
        && a.n_layers == b.n_layers
        && a.n_heads == b.n_heads
        && a.n_kv_heads == b.n_kv_heads
        && a.d_head == b.d_head
        && a.rope_theta == b.rope_theta
}

/// Compare reference and compressed logits for `tokens`.
pub fn evaluate(
    model: &ToyModel,
    compressed: &CompressedModel,
    tokens: &[u32],
    quant: Option<QuantConfig>,
    value_path: ValuePath,
    elem_bytes: usize,
) -> Result<EvalReport> {
    if !same_geometry(&model.spec, &compressed.spec) {
        return Err(Error::invalid("compressed artifact was built for a different model geometry"));
    }
    let reference = attention_reference(model, tokens)?;
    let opts = SessionOptions {
        value_path,
        key_mode: KeyMode::Recompute,
        quant,
        elem_bytes,
    };
    let mut session = CompressedSession::new(model, &compressed.layers, opts)?;
    let logits = session.prefill(tokens)?;
    let fidelity = fidelity_report(&reference, &logits)?;
    let baseline = full_cache_bytes(&model.spec, tokens.len(), elem_bytes);
    let stored = session.cache_bytes();
    debug_assert_eq!(stored, latent_cache_bytes(&compressed.layers, tokens.len(), elem_bytes, quant.as_ref()));
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        tokens: tokens.len(),
        quant_bits: quant.map(|q| q.bits),
        value_path,
        compression_ratio: compressed.compression_ratio(),
        fidelity,
        memory: MemoryReport {
            elem_bytes,
            tokens: tokens.len(),
            baseline_bytes: baseline,
            compressed_bytes: stored,
            fraction_of_baseline: stored as f64 / baseline as f64,
        },
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_parses() {
        let mut c = PipelineConfig::default();
        c.apply_text("# comment\ntarget_ratio = 0.7\n\ngroup_size=2 # trailing\nquant = 3\nwhiten = false\n")
            .unwrap();
        assert_eq!(c.target_ratio, 0.7);
        assert_eq!(c.group_size, 2);
        assert_eq!(c.quant, Some(3));
        assert!(!c.whiten);
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("target_ratio").is_err());
        assert!(c.apply_text("quant = 5").is_err());
    }

    #[test]
    fn every_documented_key_is_settable() {
        let samples = [
            "0.5", "2", "c.json", "1", "8", "true", "true", "true", "1", "false", "off", "0", "o.json", "weights",
            "uniform", "16", "0.001", "4", "proportional", "joint", "1", "false",
        ];
        for (k, v) in CONFIG_KEYS.iter().zip(samples) {
            PipelineConfig::default().set(k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn ratio_range_enforced() {
        let c = PipelineConfig {
            target_ratio: 0.0,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("ratio must be in (0,1)"));
    }
}
