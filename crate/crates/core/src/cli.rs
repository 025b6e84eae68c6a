//! Command-line front end: `compress`, `eval`, `fisher`, `report` and `synth`.
//!
//! Exit codes: 0 on success, 1 for invalid input or I/O failures, 2 for
//! numerical failures.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::engine::{collect_activations, ToyModel, ValuePath, DEFAULT_ELEM_BYTES};
use crate::error::{Error, Result};
use crate::pipeline::{compress_layers, evaluate, parse_quant, FisherSource, PipelineConfig, SimilarityMode};
use crate::rankalloc::{fisher_scores, FiniteDifferenceOptions, FisherMethod, FisherScores};
use crate::synth::{random_tokens, toy_model, ToyModelOptions};
use crate::tensorio::{
    load_calibration, load_compressed, load_model, load_toy_model, save_calibration, save_compressed, save_model,
    CalibrationSet, ModelSpec,
};

#[derive(Debug, Parser)]
#[command(name = "latentkv", version, about = "Low-rank KV-cache compression toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a model manifest into a latent-cache artifact.
    Compress(CompressArgs),
    /// Compare reference and compressed logits and report cache memory.
    Eval(EvalArgs),
    /// Estimate per-layer importance scores and write a score file.
    Fisher(FisherArgs),
    /// Summarise a compressed artifact.
    Report(ReportArgs),
    /// Write a seeded synthetic model manifest.
    Synth(SynthArgs),
}

/// Overrides for every config key; values use the config-file syntax.
#[derive(Debug, Args, Default)]
pub struct ConfigFlags {
    #[arg(long)]
    pub target_ratio: Option<String>,
    #[arg(long)]
    pub group_size: Option<String>,
    #[arg(long)]
    pub calibration: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub calib_tokens: Option<String>,
    #[arg(long)]
    pub whiten: Option<String>,
    #[arg(long)]
    pub reorder: Option<String>,
    #[arg(long)]
    pub calibrate: Option<String>,
    #[arg(long)]
    pub calib_iters: Option<String>,
    #[arg(long)]
    pub split_calibration: Option<String>,
    #[arg(long)]
    pub quant: Option<String>,
    #[arg(long)]
    pub ridge: Option<String>,
    #[arg(long, short)]
    pub output: Option<String>,
    #[arg(long)]
    pub similarity: Option<String>,
    #[arg(long)]
    pub fisher: Option<String>,
    #[arg(long)]
    pub fisher_tokens: Option<String>,
    #[arg(long)]
    pub fisher_epsilon: Option<String>,
    #[arg(long)]
    pub fisher_samples: Option<String>,
    #[arg(long)]
    pub allocation: Option<String>,
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub min_rank: Option<String>,
    #[arg(long)]
    pub keep_right_factor: Option<String>,
}

impl ConfigFlags {
    fn pairs(&self) -> [(&'static str, &Option<String>); 22] {
        [
            ("target_ratio", &self.target_ratio),
            ("group_size", &self.group_size),
            ("calibration", &self.calibration),
            ("seed", &self.seed),
            ("calib_tokens", &self.calib_tokens),
            ("whiten", &self.whiten),
            ("reorder", &self.reorder),
            ("calibrate", &self.calibrate),
            ("calib_iters", &self.calib_iters),
            ("split_calibration", &self.split_calibration),
            ("quant", &self.quant),
            ("ridge", &self.ridge),
            ("output", &self.output),
            ("similarity", &self.similarity),
            ("fisher", &self.fisher),
            ("fisher_tokens", &self.fisher_tokens),
            ("fisher_epsilon", &self.fisher_epsilon),
            ("fisher_samples", &self.fisher_samples),
            ("allocation", &self.allocation),
            ("pooling", &self.pooling),
            ("min_rank", &self.min_rank),
            ("keep_right_factor", &self.keep_right_factor),
        ]
    }

    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        for (key, value) in self.pairs() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// Model manifest (JSON).
    pub model: PathBuf,
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub model: PathBuf,
    pub compressed: PathBuf,
    /// Comma-separated token ids; random tokens from `--seed` otherwise.
    #[arg(long, value_delimiter = ',')]
    pub tokens: Option<Vec<u32>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub length: usize,
    /// Cache quantization: off, 4 or 3.
    #[arg(long, default_value = "off")]
    pub quant: String,
    /// fused or explicit.
    #[arg(long, default_value = "fused")]
    pub value_path: String,
    #[arg(long, default_value_t = DEFAULT_ELEM_BYTES)]
    pub elem_bytes: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FisherArgs {
    pub model: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub fisher_tokens: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub fisher_epsilon: f64,
    #[arg(long, default_value_t = 32)]
    pub fisher_samples: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub artifact: PathBuf,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 8)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 10_000.0)]
    pub rope_theta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Make key heads noisy copies of this many prototypes.
    #[arg(long)]
    pub key_clusters: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// Also write calibration activations for random tokens.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub calib_tokens: usize,
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 1;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let _ = writeln!(err, "  caused by: {s}");
                source = s.source();
            }
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Compress(a) => cmd_compress(&a, out, err),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Fisher(a) => cmd_fisher(&a, out),
        Command::Report(a) => cmd_report(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Fisher and calibration token stream for a seed.
fn seeded_tokens(len: usize, spec: &ModelSpec, seed: u64) -> Result<Vec<u32>> {
    if spec.vocab_size == 0 {
        return Err(Error::invalid("model has no vocabulary; supply calibration and scores from files"));
    }
    Ok(random_tokens(len, spec.vocab_size, seed))
}

pub fn cmd_compress(a: &CompressArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    a.flags.apply(&mut cfg)?;
    cfg.validate()?;
    let output = cfg
        .output
        .clone()
        .ok_or_else(|| Error::invalid("no output path; pass --output or set `output`"))?;

    let toy = load_toy_model(&a.model).ok();
    let (spec, layers) = match &toy {
        Some(m) => (m.spec.clone(), m.layers.clone()),
        None => load_model(&a.model)?,
    };
    let engine = |what: &str| -> Result<&ToyModel> {
        toy.as_ref()
            .ok_or_else(|| Error::invalid(format!("{what} needs engine tensors in the model manifest")))
    };

    let needs_calib = cfg.whiten || cfg.calibrate || cfg.similarity == SimilarityMode::Activations;
    let calib: Option<CalibrationSet> = match (&cfg.calibration, needs_calib) {
        (Some(p), _) => Some(load_calibration(p, &spec)?),
        (None, true) => {
            let tokens = seeded_tokens(cfg.calib_tokens, &spec, cfg.seed)?;
            Some(collect_activations(engine("synthesised calibration")?, &tokens)?)
        }
        (None, false) => None,
    };

    let scores = match &cfg.fisher {
        FisherSource::Uniform => FisherScores::uniform(spec.n_layers),
        FisherSource::File(p) => {
            let s = FisherScores::load(p)?;
            if s.layers.len() != spec.n_layers {
                return Err(Error::invalid(format!(
                    "score file covers {} layers, model has {}",
                    s.layers.len(),
                    spec.n_layers
                )));
            }
            s
        }
        FisherSource::FiniteDifference => {
            let m = engine("finite-difference Fisher scores")?;
            let tokens = seeded_tokens(cfg.fisher_tokens, &spec, cfg.seed)?;
            let o = FiniteDifferenceOptions {
                epsilon: cfg.fisher_epsilon,
                samples: cfg.fisher_samples,
                seed: cfg.seed,
            };
            fisher_scores(m, &tokens, &FisherMethod::FiniteDifference(o))?
        }
    };

    let outcome = compress_layers(&spec, &layers, calib.as_ref(), &scores, &cfg)?;
    for s in &outcome.trace {
        writeln!(err, "{s}").map_err(io_err)?;
    }
    save_compressed(&output, &outcome.model)?;
    writeln!(err, "save: {}", output.display()).map_err(io_err)?;

    let alloc = outcome.model.allocation.as_ref().expect("pipeline records allocation");
    writeln!(out, "layer  key_rank/group  groups  value_rank  ratio").map_err(io_err)?;
    for (l, layer) in outcome.model.layers.iter().enumerate() {
        writeln!(
            out,
            "{l:>5}  {:>14}  {:>6}  {:>10}  {:.4}",
            alloc.layers[l].key_rank_per_group,
            layer.key.grouping().num_groups(),
            layer.value.rank(),
            crate::engine::layer_compression_ratio(&spec, layer)
        )
        .map_err(io_err)?;
    }
    writeln!(
        out,
        "target ratio {:.4}, achieved ratio {:.6}, kept width {}",
        cfg.target_ratio, alloc.achieved_ratio, alloc.budget
    )
    .map_err(io_err)?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_toy_model(&a.model)?;
    let compressed = load_compressed(&a.compressed)?;
    let tokens = match &a.tokens {
        Some(t) => t.clone(),
        None => seeded_tokens(a.length, &model.spec, a.seed)?,
    };
    let quant = parse_quant(&a.quant)?.map(|bits| crate::engine::QuantConfig {
        seed: a.seed,
        ..crate::engine::QuantConfig::new(bits)
    });
    let value_path = match a.value_path.as_str() {
        "fused" => ValuePath::Fused,
        "explicit" => ValuePath::Explicit,
        other => return Err(Error::invalid(format!("bad value path `{other}`"))),
    };
    let report = evaluate(&model, &compressed, &tokens, quant, value_path, a.elem_bytes)?;
    let f = &report.fidelity;
    let m = &report.memory;
    writeln!(out, "tokens              {}", report.tokens).map_err(io_err)?;
    writeln!(out, "compression ratio   {:.6}", report.compression_ratio).map_err(io_err)?;
    writeln!(out, "max abs error       {:.6e}", f.max_abs_err).map_err(io_err)?;
    writeln!(out, "frobenius rel error {:.6e}", f.frobenius_rel_err).map_err(io_err)?;
    writeln!(out, "final token cosine  {:.9}", f.final_token_cosine).map_err(io_err)?;
    writeln!(
        out,
        "cache bytes         {} of {} ({:.4} of baseline)",
        m.compressed_bytes, m.baseline_bytes, m.fraction_of_baseline
    )
    .map_err(io_err)?;
    if let Some(p) = &a.json {
        fs::write(p, report.to_json() + "\n").map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

pub fn cmd_fisher(a: &FisherArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_toy_model(&a.model)?;
    let tokens = seeded_tokens(a.fisher_tokens, &model.spec, a.seed)?;
    let o = FiniteDifferenceOptions {
        epsilon: a.fisher_epsilon,
        samples: a.fisher_samples,
        seed: a.seed,
    };
    let scores = fisher_scores(&model, &tokens, &FisherMethod::FiniteDifference(o))?;
    scores.save(&a.output)?;
    for (l, s) in scores.layers.iter().enumerate() {
        writeln!(out, "layer {l}: key {:.6e}, value {:.6e}", s.key_score, s.value_score).map_err(io_err)?;
    }
    Ok(())
}

pub fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let m = load_compressed(&a.artifact)?;
    let per_token: usize = m.layers.iter().map(|l| l.latent_width()).sum();
    if a.json {
        let layers: Vec<_> = m
            .layers
            .iter()
            .map(|l| {
                serde_json::json!({
                    "groups": l.key.grouping().groups(),
                    "key_ranks": l.key.ranks(),
                    "value_rank": l.value.rank(),
                    "value_right_factor": l.value.right().is_some(),
                })
            })
            .collect();
        let v = serde_json::json!({
            "spec": m.spec,
            "layers": layers,
            "latent_width_per_token": per_token,
            "full_width_per_token": 2 * m.spec.kv_width() * m.spec.n_layers,
            "compression_ratio": m.compression_ratio(),
            "allocation": m.allocation,
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&v).expect("json value")).map_err(io_err)?;
        return Ok(());
    }
    let s = &m.spec;
    writeln!(
        out,
        "model: d_model {} layers {} heads {} kv_heads {} d_head {}",
        s.d_model, s.n_layers, s.n_heads, s.n_kv_heads, s.d_head
    )
    .map_err(io_err)?;
    for (i, l) in m.layers.iter().enumerate() {
        writeln!(
            out,
            "layer {i}: key groups {:?} ranks {:?}; value rank {}{}",
            l.key.grouping().groups(),
            l.key.ranks(),
            l.value.rank(),
            if l.value.right().is_some() { "" } else { " (right factor stripped)" }
        )
        .map_err(io_err)?;
    }
    writeln!(
        out,
        "latent width per token {per_token} of {}; compression ratio {:.6}",
        2 * s.kv_width() * s.n_layers,
        m.compression_ratio()
    )
    .map_err(io_err)?;
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    if a.heads == 0 || a.d_model % a.heads != 0 {
        return Err(Error::invalid(format!("{} heads do not divide d_model {}", a.heads, a.d_model)));
    }
    let spec = ModelSpec {
        d_model: a.d_model,
        n_layers: a.layers,
        n_heads: a.heads,
        n_kv_heads: a.kv_heads,
        d_head: a.d_model / a.heads,
        rope_theta: a.rope_theta,
        vocab_size: a.vocab,
    };
    spec.validate()?;
    let opts = ToyModelOptions {
        key_clusters: a.key_clusters,
        mlp_hidden: a.mlp_hidden,
        ..Default::default()
    };
    let model = toy_model(&spec, &opts, a.seed);
    save_model(&a.output, &model)?;
    writeln!(out, "wrote {}", a.output.display()).map_err(io_err)?;
    if let Some(p) = &a.calibration {
        let tokens = seeded_tokens(a.calib_tokens, &spec, a.seed)?;
        let calib = collect_activations(&model, &tokens)?;
        save_calibration(p, &spec, &calib)?;
        writeln!(out, "wrote {}", p.display()).map_err(io_err)?;
    }
    Ok(())
}

/// Entry point used by the binary.
pub fn main_with_args() -> i32 {
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    run(std::env::args_os(), &mut out, &mut err)
}
