//! Seeded synthetic data: random matrices, toy models and token streams.
//!
//! All generators use ChaCha8 seeded from a `u64`, so a seed fully determines
//! the output on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::engine::{Mlp, ToyModel};
use crate::matrix::Matrix;
use crate::tensorio::{LayerWeights, ModelSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal entries.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng(seed);
    gaussian(rows, cols, &mut r)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random orthogonal `n × n` matrix (Q factor of a Gaussian matrix).
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
    let g = gaussian(n, n, rng);
    // Gram-Schmidt on columns
    let mut q = Matrix::zeros(n, n);
    for j in 0..n {
        let mut v = g.column(j);
        for _ in 0..2 {
            for k in 0..j {
                let proj: f64 = (0..n).map(|i| q[(i, k)] * v[i]).sum();
                for (i, x) in v.iter_mut().enumerate() {
                    *x -= proj * q[(i, k)];
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (i, x) in v.iter().enumerate() {
            q[(i, j)] = x / norm;
        }
    }
    q
}

/// Uniform random token ids.
pub fn random_tokens(len: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut r = rng(seed);
    (0..len).map(|_| r.random_range(0..vocab as u32)).collect()
}

/// Options for [`toy_model`].
#[derive(Debug, Clone)]
pub struct ToyModelOptions {
    /// Number of distinct key-head prototypes per layer. When set, every key
    /// head is a noisy copy of one prototype and prototypes are scattered
    /// across head positions, giving the similarity structure that head
    /// reordering exploits. `None` gives independent Gaussian heads.
    pub key_clusters: Option<usize>,
    /// Relative noise added to clustered key heads.
    pub cluster_noise: f64,
    /// Rank of the value projection before noise; `None` leaves it full rank.
    pub value_rank: Option<usize>,
    pub value_noise: f64,
    pub mlp_hidden: Option<usize>,
}

impl Default for ToyModelOptions {
    fn default() -> Self {
        ToyModelOptions {
            key_clusters: None,
            cluster_noise: 0.05,
            value_rank: None,
            value_noise: 0.05,
            mlp_hidden: None,
        }
    }
}

/// A seeded random toy model. Projections are scaled by `1/sqrt(d_model)` so
/// attention logits stay O(1).
pub fn toy_model(spec: &ModelSpec, opts: &ToyModelOptions, seed: u64) -> ToyModel {
    let mut r = rng(seed);
    let d = spec.d_model;
    let kv = spec.n_kv_heads * spec.d_head;
    let scale = 1.0 / (d as f64).sqrt();
    let mut layers = Vec::with_capacity(spec.n_layers);
    for _ in 0..spec.n_layers {
        let w_q = gaussian(d, spec.n_heads * spec.d_head, &mut r).scale(scale);
        let w_k = match opts.key_clusters {
            Some(c) => clustered_heads(d, spec.n_kv_heads, spec.d_head, c, opts.cluster_noise, &mut r)
                .scale(scale),
            None => gaussian(d, kv, &mut r).scale(scale),
        };
        let w_v = match opts.value_rank {
            Some(rank) => {
                let a = gaussian(d, rank, &mut r);
                let b = gaussian(rank, kv, &mut r);
                let noise = gaussian(d, kv, &mut r).scale(opts.value_noise);
                a.matmul(&b).scale(1.0 / (rank as f64).sqrt()).add(&noise).scale(scale)
            }
            None => gaussian(d, kv, &mut r).scale(scale),
        };
        let w_o = gaussian(spec.n_heads * spec.d_head, d, &mut r).scale(scale);
        layers.push(LayerWeights { w_q, w_k, w_v, w_o });
    }
    let embedding = gaussian(spec.vocab_size, d, &mut r);
    let output_head = gaussian(d, spec.vocab_size, &mut r).scale(scale);
    let attn_norms = (0..spec.n_layers)
        .map(|_| (0..d).map(|_| 1.0 + 0.1 * r.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let final_norm = (0..d).map(|_| 1.0 + 0.1 * r.sample::<f64, _>(StandardNormal)).collect();
    let mlps = opts.mlp_hidden.map(|hidden| {
        (0..spec.n_layers)
            .map(|_| Mlp {
                norm: vec![1.0; d],
                w_in: gaussian(d, hidden, &mut r).scale(scale),
                w_out: gaussian(hidden, d, &mut r).scale(1.0 / (hidden as f64).sqrt()),
            })
            .collect()
    });
    ToyModel {
        spec: spec.clone(),
        layers,
        embedding,
        output_head,
        attn_norms,
        final_norm,
        mlps,
    }
}

/// Key projection whose heads are noisy copies of `clusters` prototypes,
/// each prototype placed at scattered head positions.
fn clustered_heads(
    d_model: usize,
    heads: usize,
    d_head: usize,
    clusters: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> Matrix {
    let clusters = clusters.clamp(1, heads);
    let prototypes: Vec<Matrix> = (0..clusters).map(|_| gaussian(d_model, d_head, rng)).collect();
    // round-robin assignment scatters members of one cluster
    let mut assignment: Vec<usize> = (0..heads).map(|h| h % clusters).collect();
    // shuffle positions so the layout differs between layers
    for i in (1..heads).rev() {
        let j = rng.random_range(0..=i);
        assignment.swap(i, j);
    }
    let mut w = Matrix::zeros(d_model, heads * d_head);
    for (h, &c) in assignment.iter().enumerate() {
        let mix = random_orthogonal(d_head, rng);
        let block = prototypes[c]
            .matmul(&mix)
            .add(&gaussian(d_model, d_head, rng).scale(noise));
        w.set_col_block(h * d_head, &block);
    }
    w
}
