//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; the
//! process exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use latentkv::cka::{head_similarity, HeadSource};
use latentkv::engine::{
    attention_compressed, attention_reference, collect_activations, fidelity_report, full_cache_bytes,
    CompressedSession, KeyMode, QuantConfig, SessionOptions, ValuePath,
};
use latentkv::headgroup::{greedy_group, HeadGrouping};
use latentkv::keycomp::{compress_key_with_grouping, uniform_group_ranks};
use latentkv::latentquant::{dequantize_token, forward_transform, hadamard, inverse_transform, quantize_token};
use latentkv::linalg::{svd, truncate, whitened_truncate, LowRankPair};
use latentkv::pipeline::{compress_layers, evaluate, FisherSource, PipelineConfig};
use latentkv::rankalloc::{allocate, width_budget, AllocationOptions, FisherScores, LayerScore};
use latentkv::synth::{gaussian, random_orthogonal, random_tokens, rng, toy_model, ToyModelOptions};
use latentkv::valuecomp::{
    activation_error, calibrate_traced, compress_value, svd_value, update_left, update_right,
    ValueCompressionOptions,
};
use latentkv::{CompressedLayer, Matrix, ModelSpec, ToyModel};
use nalgebra::DMatrix;
use rand::Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "full-rank losslessness", budget: Duration::from_secs(60), run: lossless },
        Criterion { id: 2, name: "truncation optimality", budget: Duration::from_secs(10), run: eckart_young },
        Criterion { id: 3, name: "whitened optimality", budget: Duration::from_secs(30), run: whitened_optimality },
        Criterion { id: 4, name: "calibration monotonicity", budget: Duration::from_secs(60), run: calibration },
        Criterion { id: 5, name: "fusion identity", budget: Duration::from_secs(30), run: fusion },
        Criterion { id: 6, name: "reordering benefit", budget: Duration::from_secs(30), run: reordering },
        Criterion { id: 7, name: "similarity properties", budget: Duration::from_secs(10), run: cka_properties },
        Criterion { id: 8, name: "allocation budget and monotonicity", budget: Duration::from_secs(10), run: allocation },
        Criterion { id: 9, name: "cache quantization", budget: Duration::from_secs(60), run: quantization },
        Criterion { id: 10, name: "ablation direction", budget: Duration::from_secs(300), run: ablation },
        Criterion { id: 11, name: "memory accounting", budget: Duration::from_secs(10), run: memory },
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; took {elapsed:.1?}, limit {:?}", c.budget)),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} [{:>2}] {}: {} ({:.2?})",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            elapsed
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// Σ_{i≥r} σᵢ² from nalgebra's SVD.
fn oracle_tail(m: &Matrix, r: usize) -> f64 {
    let mut s: Vec<f64> = to_na(m).svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.iter().skip(r).map(|x| x * x).sum()
}

fn spec(d_model: usize, layers: usize, heads: usize, kv: usize, vocab: usize) -> ModelSpec {
    ModelSpec {
        d_model,
        n_layers: layers,
        n_heads: heads,
        n_kv_heads: kv,
        d_head: d_model / heads,
        rope_theta: 10_000.0,
        vocab_size: vocab,
    }
}

fn random_spec(r: &mut impl Rng) -> ModelSpec {
    let d_model = [32, 64][r.random_range(0..2)];
    let heads = [2, 4, 8][r.random_range(0..3)];
    let kv_choices: Vec<usize> = [1, 2, 4, 8].into_iter().filter(|k| heads % k == 0).collect();
    let kv = kv_choices[r.random_range(0..kv_choices.len())];
    spec(d_model, r.random_range(1..=4), heads, kv, 48)
}

fn full_rank_layers(model: &ToyModel, calib: Option<&latentkv::CalibrationSet>, seed: u64) -> Vec<CompressedLayer> {
    let spec = &model.spec;
    let mut r = rng(seed);
    model
        .layers
        .iter()
        .enumerate()
        .map(|(l, w)| {
            let divisors: Vec<usize> = (1..=spec.n_kv_heads).filter(|g| spec.n_kv_heads % g == 0).collect();
            let g = divisors[r.random_range(0..divisors.len())];
            let sim = head_similarity(&w.w_k, spec.d_head, HeadSource::Weights).unwrap();
            let grouping = greedy_group(&sim, g).unwrap();
            let x = calib.map(|c| &c.layers[l]);
            let width = (g * spec.d_head).min(spec.d_model);
            let ranks = uniform_group_ranks(width, grouping.num_groups());
            let key = compress_key_with_grouping(&w.w_k, spec.d_head, grouping, &ranks, x, 0.0).unwrap();
            let opts = ValueCompressionOptions {
                whiten: x.is_some(),
                calibrate: x.is_some(),
                ..Default::default()
            };
            let value = compress_value(&w.w_v, &w.w_o, spec, spec.kv_width().min(spec.d_model), x, &opts).unwrap();
            CompressedLayer { key, value }
        })
        .collect()
}

fn lossless() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut r = rng(1000 + seed);
        let spec = random_spec(&mut r);
        let opts = ToyModelOptions {
            mlp_hidden: (seed % 2 == 0).then_some(2 * spec.d_model),
            ..Default::default()
        };
        let model = toy_model(&spec, &opts, seed);
        let whitened = seed % 3 != 0;
        let calib = whitened.then(|| collect_activations(&model, &random_tokens(96, spec.vocab_size, seed + 7)).unwrap());
        let layers = full_rank_layers(&model, calib.as_ref(), seed);
        let len = r.random_range(1..=128);
        let tokens = random_tokens(len, spec.vocab_size, seed + 11);
        let reference = attention_reference(&model, &tokens).unwrap();
        let compressed = attention_compressed(&model, &layers, &tokens, SessionOptions::default()).unwrap();
        let err = reference.max_abs_diff(&compressed);
        worst = worst.max(err);
        ensure(err <= 1e-8, || format!("seed {seed} ({spec:?}): max abs error {err:e}"))?;
    }
    Ok(format!("50 models, worst max-abs error {worst:.2e} (tolerance 1e-8)"))
}

fn eckart_young() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut r = rng(2000 + seed);
        let (m, n) = (r.random_range(2..=64), r.random_range(2..=64));
        let rank = r.random_range(1..m.min(n));
        let a = gaussian(m, n, &mut r);
        let pair = truncate(&svd(&a).map_err(|e| e.to_string())?, rank).map_err(|e| e.to_string())?;
        let residual = pair.product().sub(&a).frobenius_norm_sq();
        let tail = oracle_tail(&a, rank);
        let rel = (residual - tail).abs() / tail;
        worst = worst.max(rel);
        ensure(rel <= 1e-9, || format!("seed {seed} {m}x{n} r={rank}: relative gap {rel:e}"))?;
    }
    Ok(format!("100 matrices, worst relative gap {worst:.2e} (tolerance 1e-9)"))
}

fn whitened_optimality() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut r = rng(3000 + seed);
        let d = r.random_range(2..=24);
        let cols = r.random_range(2..=24);
        let t = d + r.random_range(1..=40);
        let rank = r.random_range(1..d.min(cols));
        let x = gaussian(t, d, &mut r);
        let w = gaussian(d, cols, &mut r);
        let pair = whitened_truncate(&w, &x, rank, 0.0).map_err(|e| e.to_string())?;
        let e = activation_error(&pair.left, &pair.right, &w, &x).map_err(|e| e.to_string())?;
        let tail = oracle_tail(&x.matmul(&w), rank);
        let rel = (e - tail).abs() / tail;
        worst = worst.max(rel);
        ensure(rel <= 1e-7, || format!("seed {seed}: relative gap {rel:e}"))?;
    }
    Ok(format!("100 instances, worst relative gap {worst:.2e} (tolerance 1e-7)"))
}

/// Central-difference gradient of `f` with respect to every entry of `m`.
fn fd_gradient(m: &Matrix, f: impl Fn(&Matrix) -> f64) -> f64 {
    let h = 1e-4;
    let mut sq = 0.0;
    for i in 0..m.data().len() {
        let mut plus = m.clone();
        plus.data_mut()[i] += h;
        let mut minus = m.clone();
        minus.data_mut()[i] -= h;
        let g = (f(&plus) - f(&minus)) / (2.0 * h);
        sq += g * g;
    }
    sq.sqrt()
}

fn calibration() -> Outcome {
    let mut worst_rise: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for seed in 0..200u64 {
        let mut r = rng(4000 + seed);
        let d = r.random_range(2..=12);
        let cols = r.random_range(2..=12);
        let t = d + r.random_range(1..=30);
        let rank = r.random_range(1..d.min(cols));
        let x = gaussian(t, d, &mut r);
        let w = gaussian(d, cols, &mut r);
        let start = if seed % 2 == 0 {
            svd_value(&w, rank, None, 0.0)
        } else {
            LowRankPair::new(gaussian(d, rank, &mut r), gaussian(rank, cols, &mut r))
        }
        .map_err(|e| e.to_string())?;
        let trace = calibrate_traced(&start, &w, &x, 3, 0.0).map_err(|e| e.to_string())?;
        for pair in trace.errors.windows(2) {
            let rise = pair[1] - pair[0];
            worst_rise = worst_rise.max(rise);
            ensure(rise <= 1e-9, || format!("seed {seed}: error rose by {rise:e}"))?;
        }

        let xw = x.matmul(&w);
        let bound = 1e-6 * (1.0 + w.frobenius_norm());
        let right = update_right(&start.left, &start.right, &x, &xw, 0.0).map_err(|e| e.to_string())?;
        let left_fixed = start.left.clone();
        let g_right = fd_gradient(&right, |rr| activation_error(&left_fixed, rr, &w, &x).unwrap());
        let left = update_left(&right, &w, 0.0).map_err(|e| e.to_string())?;
        let g_left = fd_gradient(&left, |ll| activation_error(ll, &right, &w, &x).unwrap());
        worst_grad = worst_grad.max(g_right / bound).max(g_left / bound);
        ensure(g_right <= bound && g_left <= bound, || {
            format!("seed {seed}: gradient norms {g_right:e} / {g_left:e} exceed {bound:e}")
        })?;
    }
    Ok(format!(
        "200 instances, largest rise {worst_rise:.1e} (tolerance 1e-9), largest gradient at {:.1}% of bound",
        100.0 * worst_grad
    ))
}

fn fusion() -> Outcome {
    let configs = [(32, 4, 4), (32, 4, 2), (64, 8, 8), (64, 8, 2), (64, 8, 1)];
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (i, &(d, h, kv)) in configs.iter().enumerate() {
        let spec = spec(d, 2, h, kv, 40);
        let model = toy_model(&spec, &ToyModelOptions::default(), 500 + i as u64);
        let calib = collect_activations(&model, &random_tokens(128, 40, 7)).unwrap();
        let tokens = random_tokens(48, 40, 9 + i as u64);
        let width = spec.kv_width();
        let ranks: Vec<usize> = [1, width / 4, width / 2, width].into_iter().filter(|&r| r >= 1).collect();
        for &rank in &ranks {
            let layers: Vec<CompressedLayer> = model
                .layers
                .iter()
                .enumerate()
                .map(|(l, w)| {
                    let grouping = HeadGrouping::identity(kv, 1).unwrap();
                    let key_rank = rank.div_ceil(kv).clamp(1, spec.d_head);
                    let key = compress_key_with_grouping(
                        &w.w_k,
                        spec.d_head,
                        grouping,
                        &uniform_group_ranks(key_rank, kv),
                        None,
                        0.0,
                    )
                    .unwrap();
                    let value = compress_value(
                        &w.w_v,
                        &w.w_o,
                        &spec,
                        rank,
                        Some(&calib.layers[l]),
                        &ValueCompressionOptions::default(),
                    )
                    .unwrap();
                    CompressedLayer { key, value }
                })
                .collect();
            let run = |path| {
                let opts = SessionOptions {
                    value_path: path,
                    ..Default::default()
                };
                attention_compressed(&model, &layers, &tokens, opts).unwrap()
            };
            let err = run(ValuePath::Fused).max_abs_diff(&run(ValuePath::Explicit));
            worst = worst.max(err);
            cases += 1;
            ensure(err <= 1e-10, || format!("d={d} h={h} kv={kv} rank={rank}: {err:e}"))?;
        }
    }
    Ok(format!("{cases} configurations, worst max-abs gap {worst:.2e} (tolerance 1e-10)"))
}

/// Key projection whose heads come in rotated duplicate pairs placed so that
/// no pair is adjacent in identity order.
fn duplicated_key(d_model: usize, heads: usize, d_head: usize, r: &mut impl Rng) -> Matrix {
    let layout = loop {
        let mut positions: Vec<usize> = (0..heads).collect();
        for i in (1..heads).rev() {
            positions.swap(i, r.random_range(0..=i));
        }
        let split = positions
            .chunks(2)
            .all(|p| p[0] / 2 != p[1] / 2);
        if split {
            break positions;
        }
    };
    let mut w = Matrix::zeros(d_model, heads * d_head);
    for pair in layout.chunks(2) {
        let base = gaussian(d_model, d_head, r);
        let q = random_orthogonal(d_head, r);
        w.set_col_block(pair[0] * d_head, &base);
        let copy = base.matmul(&q).add(&gaussian(d_model, d_head, r).scale(0.01));
        w.set_col_block(pair[1] * d_head, &copy);
    }
    w
}

fn key_error(w: &Matrix, d_head: usize, grouping: HeadGrouping) -> f64 {
    let ranks = uniform_group_ranks(d_head, grouping.num_groups());
    let ck = compress_key_with_grouping(w, d_head, grouping, &ranks, None, 0.0).unwrap();
    ck.reconstruct_weight().sub(w).frobenius_norm_sq()
}

fn reordering() -> Outcome {
    let (d_model, heads, d_head) = (32, 8, 4);
    let mut not_worse = 0;
    let mut clearly_better = 0;
    let mut mean_gain = 0.0;
    for seed in 0..50u64 {
        let mut r = rng(6000 + seed);
        let w = duplicated_key(d_model, heads, d_head, &mut r);
        let sim = head_similarity(&w, d_head, HeadSource::Weights).unwrap();
        let greedy = key_error(&w, d_head, greedy_group(&sim, 2).unwrap());
        let identity = key_error(&w, d_head, HeadGrouping::identity(heads, 2).unwrap());
        if greedy <= identity {
            not_worse += 1;
        }
        if greedy < 0.9 * identity {
            clearly_better += 1;
        }
        mean_gain += 1.0 - greedy / identity;
    }
    let detail = format!(
        "not worse on {not_worse}/50, >10% better on {clearly_better}/50, mean reduction {:.1}%",
        100.0 * mean_gain / 50.0
    );
    ensure(not_worse == 50 && clearly_better >= 45, || detail.clone())?;
    Ok(detail)
}

fn cka_properties() -> Outcome {
    let tol = 1e-10;
    for seed in 0..100u64 {
        let mut r = rng(7000 + seed);
        let heads = r.random_range(2..=8);
        let d_head = r.random_range(1..=6);
        let d_model = r.random_range(d_head + 2..=32);
        let w = gaussian(d_model, heads * d_head, &mut r);
        let use_acts = seed % 2 == 1;
        let x = gaussian(d_model + 8, d_model, &mut r);
        let source = || if use_acts { HeadSource::Activations(&x) } else { HeadSource::Weights };
        let s = head_similarity(&w, d_head, source()).map_err(|e| e.to_string())?;
        for i in 0..heads {
            ensure((s.get(i, i) - 1.0).abs() <= tol, || format!("seed {seed}: diagonal {}", s.get(i, i)))?;
            for j in 0..heads {
                let v = s.get(i, j);
                ensure((v - s.get(j, i)).abs() <= tol, || format!("seed {seed}: asymmetric at ({i},{j})"))?;
                ensure((-tol..=1.0 + tol).contains(&v), || format!("seed {seed}: value {v} out of range"))?;
            }
        }

        // per-head orthogonal mixing and scaling leave every entry unchanged
        let mut mixed = w.clone();
        for h in 0..heads {
            let q = random_orthogonal(d_head, &mut r);
            let c = 0.1 + 5.0 * r.random::<f64>();
            mixed.set_col_block(h * d_head, &w.col_block(h * d_head, d_head).matmul(&q).scale(c));
        }
        let s2 = head_similarity(&mixed, d_head, source()).map_err(|e| e.to_string())?;
        let gap = s.values().max_abs_diff(s2.values());
        ensure(gap <= tol, || format!("seed {seed}: invariance gap {gap:e}"))?;

        // permuting heads permutes the matrix
        let mut perm: Vec<usize> = (0..heads).collect();
        for i in (1..heads).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permuted = Matrix::hstack(&perm.iter().map(|&p| w.col_block(p * d_head, d_head)).collect::<Vec<_>>());
        let s3 = head_similarity(&permuted, d_head, source()).map_err(|e| e.to_string())?;
        for i in 0..heads {
            for j in 0..heads {
                let gap = (s3.get(i, j) - s.get(perm[i], perm[j])).abs();
                ensure(gap <= tol, || format!("seed {seed}: permutation gap {gap:e}"))?;
            }
        }
    }
    Ok("100 instances: symmetry, unit diagonal, range, invariance, equivariance within 1e-10".into())
}

fn allocation() -> Outcome {
    let mut checked = 0;
    let mut worst_ratio_gap: f64 = 0.0;
    for seed in 0..500u64 {
        let mut r = rng(8000 + seed);
        let heads = [2, 4, 8][r.random_range(0..3)];
        let kv_choices: Vec<usize> = [1, 2, 4, 8].into_iter().filter(|k| heads % k == 0).collect();
        let kv = kv_choices[r.random_range(0..kv_choices.len())];
        let spec = spec(heads * r.random_range(2..=8), r.random_range(1..=6), heads, kv, 0);
        let g_choices: Vec<usize> = (1..=kv).filter(|g| kv % g == 0).collect();
        let group = g_choices[r.random_range(0..g_choices.len())];
        let target = r.random_range(0.05..0.95);
        let layers: Vec<LayerScore> = (0..spec.n_layers)
            .map(|_| LayerScore {
                key_score: r.random_range(0.0..10.0),
                value_score: r.random_range(0.0..10.0),
            })
            .collect();
        let scores = FisherScores::new(layers.clone(), "external", 0).unwrap();
        let opts = AllocationOptions::default();
        let groups = kv / group;
        let min_total = spec.n_layers * (groups + 1);
        let budget = width_budget(&spec, target);
        let base = match allocate(&scores, &spec, target, group, &opts) {
            Ok(a) => a,
            Err(e) if budget < min_total => {
                ensure(e.to_string().contains("infeasible"), || format!("seed {seed}: {e}"))?;
                continue;
            }
            Err(e) => return Err(format!("seed {seed}: {e}")),
        };
        checked += 1;
        let kept = base.total_width(&spec);
        ensure(kept == budget, || format!("seed {seed}: kept {kept}, budget {budget}"))?;
        let unit = 1.0 / (2 * spec.n_layers * spec.kv_width()) as f64;
        let gap = (base.achieved_ratio - target).abs();
        worst_ratio_gap = worst_ratio_gap.max(gap / unit);
        ensure(gap <= 0.5 * unit + 1e-12, || format!("seed {seed}: achieved ratio off by {gap}"))?;

        // raising one score never lowers that entry's width
        let l = r.random_range(0..spec.n_layers);
        let boost_key = r.random::<bool>();
        let mut raised = layers.clone();
        let factor = 1.0 + r.random_range(0.01..3.0);
        if boost_key {
            raised[l].key_score *= factor;
        } else {
            raised[l].value_score *= factor;
        }
        let after = allocate(&FisherScores::new(raised, "external", 0).unwrap(), &spec, target, group, &opts)
            .map_err(|e| format!("seed {seed}: {e}"))?;
        let (before_w, after_w) = if boost_key {
            (base.key_width(l, &spec), after.key_width(l, &spec))
        } else {
            (base.layers[l].value_rank, after.layers[l].value_rank)
        };
        ensure(after_w >= before_w, || {
            format!("seed {seed}: raising layer {l} score shrank its width {before_w} -> {after_w}")
        })?;
    }
    Ok(format!(
        "{checked} feasible cases: budget exact, monotone, ratio within {worst_ratio_gap:.2} width units"
    ))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn quantization() -> Outcome {
    let mut r = rng(9000);
    for n in [1usize, 2, 4, 8, 16, 64, 256] {
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let once = hadamard(&v).map_err(|e| e.to_string())?;
        let twice = hadamard(&once).map_err(|e| e.to_string())?;
        let inv = v.iter().zip(&twice).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let norm = (once.iter().map(|x| x * x).sum::<f64>().sqrt() - v.iter().map(|x| x * x).sum::<f64>().sqrt()).abs();
        ensure(inv <= 1e-10 && norm <= 1e-10, || format!("n={n}: involution {inv:e}, norm {norm:e}"))?;
    }
    for r_len in [1usize, 3, 7, 12, 33] {
        let v: Vec<f64> = (0..r_len).map(|_| r.random_range(-3.0..3.0)).collect();
        let back = inverse_transform(&forward_transform(&v, 5), r_len, 5);
        let gap = v.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(gap <= 1e-10, || format!("signed transform round trip gap {gap:e}"))?;
    }

    let mut worst: f64 = 0.0;
    for i in 0..10_000u64 {
        let len = r.random_range(1..=64);
        let spread = 10f64.powf(r.random_range(-3.0..3.0));
        let v: Vec<f64> = (0..len).map(|_| spread * r.random_range(-1.0..1.0)).collect();
        let bits = if i % 2 == 0 { 4 } else { 3 };
        let q = quantize_token(&v, bits, i).map_err(|e| e.to_string())?;
        if q.is_constant() {
            ensure(dequantize_token(&q) == v, || format!("token {i}: constant vector not exact"))?;
            continue;
        }
        let y = forward_transform(&v, i);
        let y_hat = q.transformed();
        for (a, b) in y.iter().zip(&y_hat) {
            let ratio = (a - b).abs() / (q.scale() / 2.0);
            worst = worst.max(ratio);
            ensure(ratio <= 1.0 + 1e-12, || format!("token {i}: error {:.3e} vs scale/2 {:.3e}", (a - b).abs(), q.scale() / 2.0))?;
        }
    }

    let mut ordered = 0;
    let seeds = 20u64;
    let mut means = [0.0; 3];
    for seed in 0..seeds {
        let spec = spec(64, 2, 8, 8, 64);
        let model = toy_model(&spec, &ToyModelOptions::default(), 9100 + seed);
        let calib = collect_activations(&model, &random_tokens(256, 64, seed)).unwrap();
        let cfg = PipelineConfig {
            target_ratio: 0.5,
            group_size: 2,
            fisher: FisherSource::Uniform,
            ..Default::default()
        };
        let out = compress_layers(&spec, &model.layers, Some(&calib), &FisherScores::uniform(2), &cfg).unwrap();
        let mut cos = [0.0; 3];
        for s in 0..4u64 {
            let tokens = random_tokens(48, 64, 9200 + 10 * seed + s);
            let reference = attention_reference(&model, &tokens).unwrap();
            for (k, bits) in [None, Some(4u8), Some(3u8)].into_iter().enumerate() {
                let quant = bits.map(|b| QuantConfig { seed, ..QuantConfig::new(b) });
                let logits = attention_compressed(
                    &model,
                    &out.model.layers,
                    &tokens,
                    SessionOptions { quant, ..Default::default() },
                )
                .unwrap();
                let last = tokens.len() - 1;
                cos[k] += cosine(reference.row(last), logits.row(last)) / 4.0;
            }
        }
        if cos[0] >= cos[1] && cos[1] >= cos[2] {
            ordered += 1;
        }
        for k in 0..3 {
            means[k] += cos[k] / seeds as f64;
        }
    }
    let detail = format!(
        "transform within 1e-10, 10^4 tokens within scale/2 (worst {worst:.4}), trend held on {ordered}/{seeds} seeds, mean cosines {:.4}/{:.4}/{:.4}",
        means[0], means[1], means[2]
    );
    ensure(2 * ordered > seeds, || detail.clone())?;
    Ok(detail)
}

fn ablation_fidelity(model: &ToyModel, calib: &latentkv::CalibrationSet, reorder: bool, calibrate: bool, seed: u64) -> f64 {
    let cfg = PipelineConfig {
        target_ratio: 0.75,
        group_size: 2,
        whiten: false,
        reorder,
        calibrate,
        fisher: FisherSource::Uniform,
        ..Default::default()
    };
    let scores = FisherScores::uniform(model.spec.n_layers);
    let out = compress_layers(&model.spec, &model.layers, Some(calib), &scores, &cfg).unwrap();
    let sequences: Vec<Vec<u32>> = (0..4).map(|s| random_tokens(48, model.spec.vocab_size, seed * 100 + s)).collect();
    sequences
        .iter()
        .map(|tokens| {
            let reference = attention_reference(model, tokens).unwrap();
            let logits = attention_compressed(model, &out.model.layers, tokens, SessionOptions::default()).unwrap();
            fidelity_report(&reference, &logits).unwrap().final_token_cosine
        })
        .sum::<f64>()
        / sequences.len() as f64
}

fn ablation() -> Outcome {
    let seeds = 30u64;
    let spec = spec(64, 2, 8, 8, 64);
    let opts = ToyModelOptions {
        key_clusters: Some(4),
        ..Default::default()
    };
    // wins: both ≥ reorder, reorder ≥ neither, both ≥ calibrate, calibrate ≥ neither
    let mut wins = [0usize; 4];
    let mut means = [0.0; 4];
    for seed in 0..seeds {
        let model = toy_model(&spec, &opts, 10_000 + seed);
        let calib = collect_activations(&model, &random_tokens(256, 64, 10_500 + seed)).unwrap();
        let neither = ablation_fidelity(&model, &calib, false, false, seed);
        let reorder = ablation_fidelity(&model, &calib, true, false, seed);
        let calibrate = ablation_fidelity(&model, &calib, false, true, seed);
        let both = ablation_fidelity(&model, &calib, true, true, seed);
        for (k, (hi, lo)) in [(both, reorder), (reorder, neither), (both, calibrate), (calibrate, neither)]
            .into_iter()
            .enumerate()
        {
            if hi >= lo {
                wins[k] += 1;
            }
        }
        for (k, v) in [neither, reorder, calibrate, both].into_iter().enumerate() {
            means[k] += v / seeds as f64;
        }
    }
    let detail = format!(
        "wins/30: both>=reorder {}, reorder>=neither {}, both>=calib {}, calib>=neither {}; mean cosine neither {:.4}, reorder {:.4}, calib {:.4}, both {:.4}",
        wins[0], wins[1], wins[2], wins[3], means[0], means[1], means[2], means[3]
    );
    let needed = (0.7 * seeds as f64).ceil() as usize;
    ensure(wins.iter().all(|&w| w >= needed), || detail.clone())?;
    Ok(detail)
}

/// Independent closed form: Σ over layers and streams of per-token bytes.
fn expected_bytes(layers: &[CompressedLayer], tokens: usize, elem_bytes: usize, quant: Option<&QuantConfig>) -> usize {
    let per = |r: usize, quantized: bool| match quant {
        Some(q) if quantized => (r.next_power_of_two() * q.bits as usize).div_ceil(8) + 4,
        _ => r * elem_bytes,
    };
    tokens
        * layers
            .iter()
            .map(|l| {
                l.key.factors().iter().map(|f| per(f.left.cols(), quant.is_some_and(|q| q.keys))).sum::<usize>()
                    + per(l.value.left().cols(), quant.is_some_and(|q| q.values))
            })
            .sum::<usize>()
}

fn memory() -> Outcome {
    let mut cases = 0;
    for (i, &(d, h, kv, layers)) in [(32, 4, 4, 1), (32, 4, 2, 2), (64, 8, 4, 2), (64, 8, 8, 3)].iter().enumerate() {
        let spec = spec(d, layers, h, kv, 32);
        let model = toy_model(&spec, &ToyModelOptions::default(), 11_000 + i as u64);
        let calib = collect_activations(&model, &random_tokens(128, 32, 3)).unwrap();
        for &target in &[0.3, 0.5, 0.8] {
            let group = if kv % 2 == 0 { 2 } else { 1 };
            let mut score_rng = rng(11_100 + i as u64);
            let scores = FisherScores::new(
                (0..layers)
                    .map(|_| LayerScore {
                        key_score: score_rng.random_range(0.1..2.0),
                        value_score: score_rng.random_range(0.1..2.0),
                    })
                    .collect(),
                "external",
                0,
            )
            .unwrap();
            let cfg = PipelineConfig {
                target_ratio: target,
                group_size: group,
                fisher: FisherSource::Uniform,
                ..Default::default()
            };
            let out = compress_layers(&spec, &model.layers, Some(&calib), &scores, &cfg).map_err(|e| e.to_string())?;
            let unit = 1.0 / (2 * layers * spec.kv_width()) as f64;
            let achieved = out.model.compression_ratio();
            ensure((achieved - target).abs() <= unit, || {
                format!("spec {i} target {target}: achieved {achieved}, unit {unit}")
            })?;
            let quants = [
                None,
                Some(QuantConfig::new(4)),
                Some(QuantConfig { keys: false, ..QuantConfig::new(3) }),
                Some(QuantConfig { values: false, ..QuantConfig::new(4) }),
            ];
            for quant in quants {
                for elem_bytes in [1, 2, 4] {
                    let tokens = random_tokens(20, 32, 5);
                    let opts = SessionOptions {
                        quant,
                        elem_bytes,
                        key_mode: KeyMode::Window(4),
                        ..Default::default()
                    };
                    let mut session = CompressedSession::new(&model, &out.model.layers, opts).map_err(|e| e.to_string())?;
                    session.prefill(&tokens[..12]).map_err(|e| e.to_string())?;
                    for &t in &tokens[12..] {
                        session.decode(t).map_err(|e| e.to_string())?;
                    }
                    let expected = expected_bytes(&out.model.layers, tokens.len(), elem_bytes, quant.as_ref());
                    ensure(session.cache_bytes() == expected, || {
                        format!("session reports {} bytes, closed form {expected}", session.cache_bytes())
                    })?;
                    let report = evaluate(&model, &out.model, &tokens, quant, ValuePath::Fused, elem_bytes)
                        .map_err(|e| e.to_string())?;
                    ensure(report.memory.compressed_bytes == expected, || {
                        format!("eval reports {} bytes, closed form {expected}", report.memory.compressed_bytes)
                    })?;
                    ensure(report.memory.baseline_bytes == full_cache_bytes(&spec, tokens.len(), elem_bytes), || {
                        "baseline bytes mismatch".into()
                    })?;
                    if quant.is_none() {
                        let fraction = 1.0 - achieved;
                        ensure((report.memory.fraction_of_baseline - fraction).abs() <= 1e-12, || {
                            format!("fraction {} vs kept share {fraction}", report.memory.fraction_of_baseline)
                        })?;
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} configurations: reported bytes equal the closed form, ratios within one width unit"))
}
