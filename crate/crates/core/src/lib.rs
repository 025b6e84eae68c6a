//! Low-rank compression of attention key/value caches.
//!
//! Keys: heads are reordered so that similar heads (by linear CKA) share a
//! group, and each group of key projections gets one truncated SVD. Values:
//! one SVD of the whole projection, refined by alternating least squares on
//! calibration activations, with the right factor folded into the output
//! projection. The cache then holds only the latents `x·L`.
//!
//! The crate also ships a small reference engine (RoPE, grouped-query
//! attention, incremental decoding) that runs against both full weights and
//! compressed artifacts, a per-token latent quantizer, importance-driven rank
//! allocation, and a file format for models, calibration sets and artifacts.
//!
//! ```
//! use latentkv::synth::{random_tokens, toy_model, ToyModelOptions};
//! use latentkv::{attention_reference, collect_activations, ModelSpec};
//! use latentkv::pipeline::{compress_layers, PipelineConfig};
//! use latentkv::rankalloc::FisherScores;
//! use latentkv::engine::{attention_compressed, fidelity_report, SessionOptions};
//!
//! let spec = ModelSpec {
//!     d_model: 32, n_layers: 2, n_heads: 4, n_kv_heads: 4, d_head: 8,
//!     rope_theta: 10_000.0, vocab_size: 50,
//! };
//! let model = toy_model(&spec, &ToyModelOptions::default(), 7);
//! let calib = collect_activations(&model, &random_tokens(128, 50, 1))?;
//! let cfg = PipelineConfig { target_ratio: 0.5, group_size: 2, ..Default::default() };
//! let out = compress_layers(&spec, &model.layers, Some(&calib), &FisherScores::uniform(2), &cfg)?;
//! assert_eq!(out.model.compression_ratio(), 0.5);
//!
//! let tokens = random_tokens(16, 50, 2);
//! let reference = attention_reference(&model, &tokens)?;
//! let compressed = attention_compressed(&model, &out.model.layers, &tokens, SessionOptions::default())?;
//! let report = fidelity_report(&reference, &compressed)?;
//! assert!(report.final_token_cosine > 0.5);
//! # Ok::<(), latentkv::Error>(())
//! ```

pub mod cka;
pub mod cli;
pub mod engine;
mod error;
pub mod headgroup;
pub mod keycomp;
pub mod latentquant;
pub mod linalg;
mod matrix;
pub mod pipeline;
pub mod rankalloc;
pub mod synth;
pub mod tensorio;
pub mod valuecomp;

pub use engine::{attention_reference, collect_activations, ToyModel};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use tensorio::{CalibrationSet, CompressedLayer, CompressedModel, LayerWeights, ModelSpec};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/linear_algebra.md")]
    mod linear_algebra {}
    #[doc = include_str!("../../../book/src/head_similarity.md")]
    mod head_similarity {}
    #[doc = include_str!("../../../book/src/keys.md")]
    mod keys {}
    #[doc = include_str!("../../../book/src/values.md")]
    mod values {}
    #[doc = include_str!("../../../book/src/allocation.md")]
    mod allocation {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    mod quantization {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/file_formats.md")]
    mod file_formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
