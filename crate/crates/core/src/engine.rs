//! Desk-scale decoder-only attention engine.
//!
//! Blocks are pre-norm: `h ← h + Attn(norm(h))`, then optionally
//! `h ← h + W_out·silu(W_in·norm(h))`. Normalisation is RMS style with
//! `eps = 1e-6` and a per-channel gain. Logits are `norm(h)·output_head`.
//!
//! Rotary embedding rotates interleaved pairs `(2i, 2i+1)` of every head by
//! `p·θ_i`, with `θ_i = rope_theta^(−2i/d_head)` at position `p`. It is
//! applied to queries and to keys after any latent expansion.
//!
//! The compressed path keeps only latents in its cache: `z_gj = x·L_gj` per
//! key group and `z_v = x·L_v` for values. Keys are expanded and rotated
//! every step; values are consumed through the fused output blocks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keycomp::{reconstruct_keys, CompressedKey};
use crate::latentquant::{cache_bytes_per_token, dequantize_token, quantize_token, QuantizedLatent};
use crate::matrix::{dot, Matrix};
use crate::tensorio::{CalibrationSet, CompressedLayer, LayerWeights, ModelSpec};

pub const NORM_EPS: f64 = 1e-6;

/// Longest sequence the engine accepts.
pub const MAX_SEQ_LEN: usize = 4096;

/// Optional two-layer feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub norm: Vec<f64>,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

/// A small decoder-only model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub spec: ModelSpec,
    pub layers: Vec<LayerWeights>,
    pub embedding: Matrix,
    pub output_head: Matrix,
    pub attn_norms: Vec<Vec<f64>>,
    pub final_norm: Vec<f64>,
    pub mlps: Option<Vec<Mlp>>,
}

impl ToyModel {
    pub fn validate(&self) -> Result<()> {
        let s = &self.spec;
        s.validate()?;
        if s.d_head % 2 != 0 {
            return Err(Error::invalid(format!("rotary embedding needs an even d_head, got {}", s.d_head)));
        }
        if s.vocab_size == 0 {
            return Err(Error::invalid("vocab_size must be positive"));
        }
        if self.layers.len() != s.n_layers || self.attn_norms.len() != s.n_layers {
            return Err(Error::shape(format!(
                "{} layers and {} norms for a {}-layer spec",
                self.layers.len(),
                self.attn_norms.len(),
                s.n_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(s).map_err(|e| e.in_layer(i))?;
        }
        if self.embedding.shape() != (s.vocab_size, s.d_model) {
            return Err(Error::shape(format!("embedding is {:?}", self.embedding.shape())));
        }
        if self.output_head.shape() != (s.d_model, s.vocab_size) {
            return Err(Error::shape(format!("output head is {:?}", self.output_head.shape())));
        }
        if self.final_norm.len() != s.d_model || self.attn_norms.iter().any(|g| g.len() != s.d_model) {
            return Err(Error::shape("norm gain length differs from d_model"));
        }
        if let Some(mlps) = &self.mlps {
            if mlps.len() != s.n_layers {
                return Err(Error::shape(format!("{} MLPs for {} layers", mlps.len(), s.n_layers)));
            }
            for (i, m) in mlps.iter().enumerate() {
                let hidden = m.w_in.cols();
                if m.norm.len() != s.d_model
                    || m.w_in.rows() != s.d_model
                    || m.w_out.shape() != (hidden, s.d_model)
                {
                    return Err(Error::shape("MLP shapes do not match d_model").in_layer(i));
                }
            }
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        let d = self.spec.d_model;
        let mut h = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= self.spec.vocab_size {
                return Err(Error::invalid(format!(
                    "token id {t} out of vocabulary of {}",
                    self.spec.vocab_size
                )));
            }
            h.row_mut(i).copy_from_slice(self.embedding.row(t as usize));
        }
        Ok(h)
    }

    fn mlp_residual(&self, layer: usize, h: &mut Matrix) {
        if let Some(mlps) = &self.mlps {
            let m = &mlps[layer];
            let a = rms_norm(h, &m.norm).matmul(&m.w_in).map(silu);
            h.add_assign(&a.matmul(&m.w_out));
        }
    }

    fn logits(&self, h: &Matrix) -> Matrix {
        rms_norm(h, &self.final_norm).matmul(&self.output_head)
    }
}

fn check_tokens(tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid("token sequence is empty"));
    }
    if tokens.len() > MAX_SEQ_LEN {
        return Err(Error::invalid(format!(
            "sequence of {} tokens exceeds the maximum of {MAX_SEQ_LEN}",
            tokens.len()
        )));
    }
    Ok(())
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Row-wise RMS normalisation with gain.
pub fn rms_norm(x: &Matrix, gain: &[f64]) -> Matrix {
    let mut out = x.clone();
    let d = x.cols() as f64;
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / d + NORM_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v *= inv * g;
        }
    }
    out
}

/// Rotation frequency of pair `i` in a head of width `d_head`.
pub fn rope_frequency(i: usize, d_head: usize, theta: f64) -> f64 {
    theta.powf(-2.0 * i as f64 / d_head as f64)
}

/// Rotate every head of `m` in place; row `k` sits at position `start + k`.
pub fn apply_rope(m: &mut Matrix, d_head: usize, start: usize, theta: f64) {
    let freqs: Vec<f64> = (0..d_head / 2).map(|i| rope_frequency(i, d_head, theta)).collect();
    let heads = m.cols() / d_head;
    for k in 0..m.rows() {
        let pos = (start + k) as f64;
        let row = m.row_mut(k);
        for h in 0..heads {
            for (i, f) in freqs.iter().enumerate() {
                let (sin, cos) = (pos * f).sin_cos();
                let a = h * d_head + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * cos - x1 * sin;
                row[a + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

/// Causal softmax attention weights of queries at positions
/// `q_start..q_start + t_q` over keys at positions `0..t_k`.
fn attention_probs(q: &Matrix, k: &Matrix, q_start: usize) -> Matrix {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut p = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let visible = (q_start + i + 1).min(k.rows());
        let qi = q.row(i);
        let row = p.row_mut(i);
        for (j, s) in row.iter_mut().enumerate().take(visible) {
            *s = dot(qi, k.row(j)) * scale;
        }
        let m = row[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in row[..visible].iter_mut() {
            *s = (*s - m).exp();
            z += *s;
        }
        for s in row[..visible].iter_mut() {
            *s /= z;
        }
    }
    p
}

/// Uncompressed attention block on normalised inputs `x` (rows at
/// positions `0..t`).
pub fn attention_block(x: &Matrix, w: &LayerWeights, spec: &ModelSpec) -> Matrix {
    let d_h = spec.d_head;
    let mut q = x.matmul(&w.w_q);
    let mut k = x.matmul(&w.w_k);
    let v = x.matmul(&w.w_v);
    apply_rope(&mut q, d_h, 0, spec.rope_theta);
    apply_rope(&mut k, d_h, 0, spec.rope_theta);
    let share = spec.gqa_share();
    let heads: Vec<Matrix> = (0..spec.n_heads)
        .map(|h| {
            let kv = h / share;
            let p = attention_probs(&q.col_block(h * d_h, d_h), &k.col_block(kv * d_h, d_h), 0);
            p.matmul(&v.col_block(kv * d_h, d_h))
        })
        .collect();
    Matrix::hstack(&heads).matmul(&w.w_o)
}

/// Reference forward pass. With `capture`, also returns the normalised
/// input of every attention block.
pub fn forward_reference(model: &ToyModel, tokens: &[u32], capture: bool) -> Result<(Matrix, Vec<Matrix>)> {
    check_tokens(tokens)?;
    let mut h = model.embed(tokens)?;
    let mut captured = Vec::new();
    for (l, w) in model.layers.iter().enumerate() {
        let x = rms_norm(&h, &model.attn_norms[l]);
        h.add_assign(&attention_block(&x, w, &model.spec));
        if capture {
            captured.push(x);
        }
        model.mlp_residual(l, &mut h);
    }
    Ok((model.logits(&h), captured))
}

/// Logits (`t × vocab`) of the uncompressed model.
pub fn attention_reference(model: &ToyModel, tokens: &[u32]) -> Result<Matrix> {
    Ok(forward_reference(model, tokens, false)?.0)
}

/// Per-layer attention-block inputs for `tokens`.
pub fn collect_activations(model: &ToyModel, tokens: &[u32]) -> Result<CalibrationSet> {
    let (_, layers) = forward_reference(model, tokens, true)?;
    CalibrationSet::new(layers, tokens.len(), "toy engine, normalised attention inputs")
}

/// Next-token cross-entropy at every position but the last.
pub fn token_losses(model: &ToyModel, tokens: &[u32]) -> Result<Vec<f64>> {
    if tokens.len() < 2 {
        return Err(Error::invalid("need at least two tokens for a next-token loss"));
    }
    let logits = attention_reference(model, tokens)?;
    let losses: Vec<f64> = (0..tokens.len() - 1)
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[tokens[i + 1] as usize]
        })
        .collect();
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::numeric("non-finite loss"));
    }
    Ok(losses)
}

/// How value latents reach the output projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValuePath {
    /// Attention weights times `z_v`, then each head's fused block.
    #[default]
    Fused,
    /// Expand `z_v·R_v` to full values, then the original `W_o`. Needs the
    /// right factor in the artifact.
    Explicit,
}

/// How cached key latents are expanded each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KeyMode {
    /// Expand every cached latent again at each step.
    #[default]
    Recompute,
    /// Keep expanded, rotated keys of the most recent `n` positions and
    /// re-expand only older ones.
    Window(usize),
}

/// Cache quantization settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    pub bits: u8,
    pub keys: bool,
    pub values: bool,
    pub seed: u64,
}

impl QuantConfig {
    pub fn new(bits: u8) -> Self {
        QuantConfig {
            bits,
            keys: true,
            values: true,
            seed: 0,
        }
    }

    /// Sign seed of one latent stream; shared by all tokens of the stream.
    pub fn stream_seed(&self, layer: usize, stream: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((layer as u64) << 32 | stream as u64)
    }
}

/// Default nominal bytes per cached element (16-bit storage).
pub const DEFAULT_ELEM_BYTES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionOptions {
    pub value_path: ValuePath,
    pub key_mode: KeyMode,
    pub quant: Option<QuantConfig>,
    pub elem_bytes: usize,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions {
            value_path: ValuePath::Fused,
            key_mode: KeyMode::Recompute,
            quant: None,
            elem_bytes: DEFAULT_ELEM_BYTES,
        }
    }
}

/// One growable latent stream (a key group or the value latent).
#[derive(Debug, Clone)]
pub struct LatentStore {
    width: usize,
    values: Matrix,
    quant: Option<(u8, u64, Vec<QuantizedLatent>)>,
}

impl LatentStore {
    fn new(width: usize, quant: Option<(u8, u64)>) -> Self {
        LatentStore {
            width,
            values: Matrix::zeros(0, width),
            quant: quant.map(|(bits, seed)| (bits, seed, Vec::new())),
        }
    }

    fn append(&mut self, z: &Matrix) -> Result<()> {
        match &mut self.quant {
            None => self.values.append_rows(z),
            Some((bits, seed, stored)) => {
                let mut decoded = Matrix::zeros(z.rows(), self.width);
                for i in 0..z.rows() {
                    let q = quantize_token(z.row(i), *bits, *seed)?;
                    decoded.row_mut(i).copy_from_slice(&dequantize_token(&q));
                    stored.push(q);
                }
                self.values.append_rows(&decoded);
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tokens(&self) -> usize {
        self.values.rows()
    }

    /// Latents as the attention consumes them (dequantized if quantized).
    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn quantized(&self) -> Option<&[QuantizedLatent]> {
        self.quant.as_ref().map(|(_, _, q)| q.as_slice())
    }

    /// Bytes held, from what is actually stored.
    pub fn bytes(&self, elem_bytes: usize) -> usize {
        match &self.quant {
            None => self.values.rows() * self.width * elem_bytes,
            Some((_, _, q)) => q.iter().map(QuantizedLatent::cache_bytes).sum(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub key_groups: Vec<LatentStore>,
    pub value: LatentStore,
}

/// Latent KV cache of a compressed decoding session.
#[derive(Debug, Clone)]
pub struct LatentCache {
    layers: Vec<LayerCache>,
    tokens: usize,
}

impl LatentCache {
    pub fn new(artifacts: &[CompressedLayer], quant: Option<&QuantConfig>) -> Self {
        let layers = artifacts
            .iter()
            .enumerate()
            .map(|(l, a)| {
                let kq = quant.filter(|q| q.keys);
                let key_groups = a
                    .key
                    .ranks()
                    .into_iter()
                    .enumerate()
                    .map(|(j, r)| LatentStore::new(r, kq.map(|q| (q.bits, q.stream_seed(l, j)))))
                    .collect();
                let vq = quant.filter(|q| q.values);
                let value = LatentStore::new(
                    a.value.rank(),
                    vq.map(|q| (q.bits, q.stream_seed(l, a.key.factors().len()))),
                );
                LayerCache { key_groups, value }
            })
            .collect();
        LatentCache { layers, tokens: 0 }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    /// Total bytes held across layers and streams.
    pub fn bytes(&self, elem_bytes: usize) -> usize {
        self.layers
            .iter()
            .map(|l| l.key_groups.iter().map(|s| s.bytes(elem_bytes)).sum::<usize>() + l.value.bytes(elem_bytes))
            .sum()
    }
}

/// Closed-form latent cache bytes for `tokens` positions.
pub fn latent_cache_bytes(
    artifacts: &[CompressedLayer],
    tokens: usize,
    elem_bytes: usize,
    quant: Option<&QuantConfig>,
) -> usize {
    let stream = |r: usize, quantized: bool| match quant {
        Some(q) if quantized => cache_bytes_per_token(r, q.bits),
        _ => r * elem_bytes,
    };
    let per_token: usize = artifacts
        .iter()
        .map(|a| {
            let keys: usize = a
                .key
                .ranks()
                .into_iter()
                .map(|r| stream(r, quant.is_some_and(|q| q.keys)))
                .sum();
            keys + stream(a.value.rank(), quant.is_some_and(|q| q.values))
        })
        .sum();
    tokens * per_token
}

/// Bytes of an uncompressed key/value cache.
pub fn full_cache_bytes(spec: &ModelSpec, tokens: usize, elem_bytes: usize) -> usize {
    tokens * spec.n_layers * 2 * spec.kv_width() * elem_bytes
}

/// `1 − (Σ_j r_gj + r_v) / (2·n_kv_heads·d_head)` for one layer.
pub fn layer_compression_ratio(spec: &ModelSpec, layer: &CompressedLayer) -> f64 {
    1.0 - layer.latent_width() as f64 / (2 * spec.kv_width()) as f64
}

/// Incremental decoding against a latent cache.
pub struct CompressedSession<'a> {
    model: &'a ToyModel,
    artifacts: &'a [CompressedLayer],
    opts: SessionOptions,
    cache: LatentCache,
    /// Per layer: first position held in `key_window` and the expanded,
    /// rotated keys from there on.
    key_window: Vec<(usize, Matrix)>,
}

impl<'a> CompressedSession<'a> {
    pub fn new(model: &'a ToyModel, artifacts: &'a [CompressedLayer], opts: SessionOptions) -> Result<Self> {
        model.validate()?;
        let spec = &model.spec;
        if artifacts.len() != spec.n_layers {
            return Err(Error::shape(format!(
                "{} compressed layers for a {}-layer model",
                artifacts.len(),
                spec.n_layers
            )));
        }
        for (l, a) in artifacts.iter().enumerate() {
            let check = || -> Result<()> {
                if a.key.d_model() != spec.d_model
                    || a.key.d_head() != spec.d_head
                    || a.key.grouping().heads() != spec.n_kv_heads
                {
                    return Err(Error::shape("key artifact does not match model geometry"));
                }
                if a.value.left().rows() != spec.d_model
                    || a.value.fused_w_o().shape() != (spec.n_heads * a.value.rank(), spec.d_model)
                {
                    return Err(Error::shape("value artifact does not match model geometry"));
                }
                if opts.value_path == ValuePath::Explicit && a.value.right().is_none() {
                    return Err(Error::invalid("explicit value path needs the value right factor"));
                }
                Ok(())
            };
            check().map_err(|e| e.in_layer(l))?;
        }
        if opts.elem_bytes == 0 {
            return Err(Error::invalid("elem_bytes must be positive"));
        }
        Ok(CompressedSession {
            model,
            artifacts,
            opts,
            cache: LatentCache::new(artifacts, opts.quant.as_ref()),
            key_window: vec![(0, Matrix::zeros(0, spec.kv_width())); spec.n_layers],
        })
    }

    pub fn cache(&self) -> &LatentCache {
        &self.cache
    }

    pub fn tokens(&self) -> usize {
        self.cache.tokens
    }

    /// Bytes currently held by the latent cache.
    pub fn cache_bytes(&self) -> usize {
        self.cache.bytes(self.opts.elem_bytes)
    }

    /// Process `tokens` after everything already cached; returns their logits.
    pub fn prefill(&mut self, tokens: &[u32]) -> Result<Matrix> {
        check_tokens(tokens)?;
        if self.cache.tokens + tokens.len() > MAX_SEQ_LEN {
            return Err(Error::invalid(format!("sequence would exceed {MAX_SEQ_LEN} tokens")));
        }
        let start = self.cache.tokens;
        let mut h = self.model.embed(tokens)?;
        for l in 0..self.artifacts.len() {
            let x = rms_norm(&h, &self.model.attn_norms[l]);
            let out = self.attend(l, &x, start).map_err(|e| e.in_layer(l))?;
            h.add_assign(&out);
            self.model.mlp_residual(l, &mut h);
        }
        self.cache.tokens += tokens.len();
        Ok(self.model.logits(&h))
    }

    /// Process one token; returns its logits.
    pub fn decode(&mut self, token: u32) -> Result<Vec<f64>> {
        Ok(self.prefill(&[token])?.into_data())
    }

    fn attend(&mut self, l: usize, x: &Matrix, start: usize) -> Result<Matrix> {
        let spec = &self.model.spec;
        let art = &self.artifacts[l];
        let d_h = spec.d_head;
        let t_new = x.rows();

        let z_keys = art.key.project(x)?;
        let layer = &mut self.cache.layers[l];
        for (store, z) in layer.key_groups.iter_mut().zip(&z_keys) {
            store.append(z)?;
        }
        layer.value.append(&x.matmul(art.value.left()))?;
        let layer = &self.cache.layers[l];

        let keys = match self.opts.key_mode {
            KeyMode::Recompute => expand_keys(&art.key, &layer.key_groups, 0, start + t_new, spec)?,
            KeyMode::Window(n) => {
                let (w_start, window) = &mut self.key_window[l];
                let fresh = expand_keys(&art.key, &layer.key_groups, start, start + t_new, spec)?;
                window.append_rows(&fresh);
                let total = start + t_new;
                let keep = n.min(total);
                if window.rows() > keep {
                    let drop = window.rows() - keep;
                    *window = window.row_block(drop, keep);
                    *w_start += drop;
                }
                let older = expand_keys(&art.key, &layer.key_groups, 0, *w_start, spec)?;
                Matrix::vstack(&[older, window.clone()])
            }
        };

        let mut q = x.matmul(&self.model.layers[l].w_q);
        apply_rope(&mut q, d_h, start, spec.rope_theta);
        let z_v = layer.value.values();
        let share = spec.gqa_share();
        let probs: Vec<Matrix> = (0..spec.n_heads)
            .map(|h| {
                let kv = h / share;
                attention_probs(&q.col_block(h * d_h, d_h), &keys.col_block(kv * d_h, d_h), start)
            })
            .collect();

        match self.opts.value_path {
            ValuePath::Fused => {
                let mut out = Matrix::zeros(t_new, spec.d_model);
                for (h, p) in probs.iter().enumerate() {
                    out.add_assign(&p.matmul(z_v).matmul(&art.value.fused_block(h)));
                }
                Ok(out)
            }
            ValuePath::Explicit => {
                let right = art.value.right().expect("checked at session start");
                let v = z_v.matmul(right);
                let heads: Vec<Matrix> = probs
                    .iter()
                    .enumerate()
                    .map(|(h, p)| p.matmul(&v.col_block((h / share) * d_h, d_h)))
                    .collect();
                Ok(Matrix::hstack(&heads).matmul(&self.model.layers[l].w_o))
            }
        }
    }
}

/// Expanded, rotated keys for positions `from..to`.
fn expand_keys(key: &CompressedKey, groups: &[LatentStore], from: usize, to: usize, spec: &ModelSpec) -> Result<Matrix> {
    let z: Vec<Matrix> = groups.iter().map(|g| g.values().row_block(from, to - from)).collect();
    let mut k = reconstruct_keys(key, &z)?;
    apply_rope(&mut k, spec.d_head, from, spec.rope_theta);
    Ok(k)
}

/// Logits of the compressed model for `tokens`, processed in one prefill.
pub fn attention_compressed(
    model: &ToyModel,
    artifacts: &[CompressedLayer],
    tokens: &[u32],
    opts: SessionOptions,
) -> Result<Matrix> {
    CompressedSession::new(model, artifacts, opts)?.prefill(tokens)
}

/// Agreement between reference and compressed logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidelityReport {
    pub max_abs_err: f64,
    /// `‖C − R‖_F / ‖R‖_F`; zero when both are zero.
    pub frobenius_rel_err: f64,
    /// Cosine of the last rows; one when both are zero, zero when exactly one is.
    pub final_token_cosine: f64,
}

pub fn fidelity_report(reference: &Matrix, compressed: &Matrix) -> Result<FidelityReport> {
    if reference.shape() != compressed.shape() {
        return Err(Error::shape(format!(
            "reference {:?} vs compressed {:?}",
            reference.shape(),
            compressed.shape()
        )));
    }
    if reference.rows() == 0 {
        return Err(Error::invalid("empty logits"));
    }
    let diff = compressed.sub(reference);
    let ref_norm = reference.frobenius_norm();
    let diff_norm = diff.frobenius_norm();
    let frobenius_rel_err = if ref_norm > 0.0 {
        diff_norm / ref_norm
    } else if diff_norm == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let last = reference.rows() - 1;
    let (a, b) = (reference.row(last), compressed.row(last));
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    let final_token_cosine = match (na > 0.0, nb > 0.0) {
        (true, true) => (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
        (false, false) => 1.0,
        _ => 0.0,
    };
    Ok(FidelityReport {
        max_abs_err: diff.max_abs(),
        frobenius_rel_err,
        final_token_cosine,
    })
}

/// Run several independent sequences in parallel, results in input order.
pub fn attention_reference_batch(model: &ToyModel, sequences: &[Vec<u32>]) -> Result<Vec<Matrix>> {
    sequences.par_iter().map(|s| attention_reference(model, s)).collect()
}
