//! Layer importance scores and rank allocation under a width budget.
//!
//! Importance is the diagonal empirical Fisher information of each layer's key
//! and value projections: the mean over tokens of the squared per-token loss
//! gradient, summed over the matrix entries. Gradients are estimated by
//! central finite differences on a seeded subsample of entries and the sum is
//! extrapolated to the whole matrix by `entries / sampled`.
//!
//! Allocation turns scores into per-layer latent widths that add up to
//! exactly `B = round((1 − target)·Σ_layers 2·n_kv_heads·d_head)`.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{token_losses, ToyModel};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::synth::rng;
use crate::tensorio::ModelSpec;

/// Smallest rank any key group or value projection may receive.
pub const DEFAULT_MIN_RANK: usize = 1;

/// Importance of one layer's key and value projections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerScore {
    pub key_score: f64,
    pub value_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherScores {
    pub layers: Vec<LayerScore>,
    pub method: String,
    pub tokens: usize,
}

impl FisherScores {
    pub fn new(layers: Vec<LayerScore>, method: impl Into<String>, tokens: usize) -> Result<Self> {
        let s = FisherScores {
            layers,
            method: method.into(),
            tokens,
        };
        s.validate()?;
        Ok(s)
    }

    /// Equal scores for every projection.
    pub fn uniform(n_layers: usize) -> Self {
        FisherScores {
            layers: vec![
                LayerScore {
                    key_score: 1.0,
                    value_score: 1.0
                };
                n_layers
            ],
            method: "uniform".into(),
            tokens: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("scores cover no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for v in [l.key_score, l.value_score] {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::invalid(format!("layer {i} has invalid score {v}")));
                }
            }
        }
        Ok(())
    }

    /// Score file: a JSON list of `{key_score, value_score}`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(&self.layers)
            .map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let layers: Vec<LayerScore> =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let s = FisherScores {
            layers,
            method: "external".into(),
            tokens: 0,
        };
        s.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(s)
    }
}

#[derive(Debug, Clone)]
pub struct FiniteDifferenceOptions {
    pub epsilon: f64,
    /// Entries perturbed per projection matrix; all entries if larger.
    pub samples: usize,
    pub seed: u64,
}

impl Default for FiniteDifferenceOptions {
    fn default() -> Self {
        FiniteDifferenceOptions {
            epsilon: 1e-3,
            samples: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum FisherMethod<'a> {
    FiniteDifference(FiniteDifferenceOptions),
    External(&'a Path),
}

/// Fisher scores of every layer's key and value projections.
pub fn fisher_scores(model: &ToyModel, tokens: &[u32], method: &FisherMethod<'_>) -> Result<FisherScores> {
    let opts = match method {
        FisherMethod::External(path) => {
            let s = FisherScores::load(path)?;
            if s.layers.len() != model.spec.n_layers {
                return Err(Error::invalid(format!(
                    "score file covers {} layers, model has {}",
                    s.layers.len(),
                    model.spec.n_layers
                )));
            }
            return Ok(s);
        }
        FisherMethod::FiniteDifference(o) => o,
    };
    model.validate()?;
    if !(opts.epsilon > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if opts.samples == 0 {
        return Err(Error::invalid("need at least one sampled entry"));
    }
    let n_losses = token_losses(model, tokens)?.len() as f64;
    let layers = (0..model.spec.n_layers)
        .map(|l| {
            let key = matrix_fisher(model, tokens, l, Projection::Key, opts, n_losses)?;
            let value = matrix_fisher(model, tokens, l, Projection::Value, opts, n_losses)?;
            Ok(LayerScore {
                key_score: key,
                value_score: value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FisherScores::new(layers, "finite-difference", tokens.len())
}

#[derive(Clone, Copy)]
enum Projection {
    Key,
    Value,
}

fn projection_mut(model: &mut ToyModel, layer: usize, p: Projection) -> &mut Matrix {
    match p {
        Projection::Key => &mut model.layers[layer].w_k,
        Projection::Value => &mut model.layers[layer].w_v,
    }
}

fn matrix_fisher(
    model: &ToyModel,
    tokens: &[u32],
    layer: usize,
    p: Projection,
    opts: &FiniteDifferenceOptions,
    n_losses: f64,
) -> Result<f64> {
    let (rows, cols) = match p {
        Projection::Key => model.layers[layer].w_k.shape(),
        Projection::Value => model.layers[layer].w_v.shape(),
    };
    let total = rows * cols;
    let tag = match p {
        Projection::Key => 0,
        Projection::Value => 1,
    };
    let entries: Vec<usize> = if opts.samples >= total {
        (0..total).collect()
    } else {
        let mut r = rng(opts.seed ^ ((layer as u64) << 8 | tag));
        let mut idx = sample(&mut r, total, opts.samples).into_vec();
        idx.sort_unstable();
        idx
    };
    let per_entry: Vec<f64> = entries
        .par_iter()
        .map(|&e| {
            let mut m = model.clone();
            let w = projection_mut(&mut m, layer, p);
            let orig = w.data()[e];
            w.data_mut()[e] = orig + opts.epsilon;
            let plus = token_losses(&m, tokens)?;
            projection_mut(&mut m, layer, p).data_mut()[e] = orig - opts.epsilon;
            let minus = token_losses(&m, tokens)?;
            let sq: f64 = plus
                .iter()
                .zip(&minus)
                .map(|(a, b)| ((a - b) / (2.0 * opts.epsilon)).powi(2))
                .sum();
            Ok(sq / n_losses)
        })
        .collect::<Result<Vec<_>>>()?;
    let sampled: f64 = per_entry.iter().sum();
    Ok(sampled * total as f64 / entries.len() as f64)
}

/// Per-layer ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRanks {
    pub key_rank_per_group: usize,
    pub value_rank: usize,
}

/// Ranks for every layer and the ratio they achieve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankAllocation {
    pub layers: Vec<LayerRanks>,
    pub group_size: usize,
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    /// Total kept latent width across layers.
    pub budget: usize,
}

impl RankAllocation {
    /// Key latent width of layer `l`: rank per group times group count.
    pub fn key_width(&self, l: usize, spec: &ModelSpec) -> usize {
        self.layers[l].key_rank_per_group * (spec.n_kv_heads / self.group_size)
    }

    pub fn total_width(&self, spec: &ModelSpec) -> usize {
        (0..self.layers.len())
            .map(|l| self.key_width(l, spec) + self.layers[l].value_rank)
            .sum()
    }
}

/// How scores become widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationRule {
    /// Widths proportional to score shares, rounded and clamped, then
    /// adjusted one unit at a time until the budget is met.
    Proportional,
    /// Units handed out one at a time to the entry with the highest
    /// `score / (width + unit)`.
    #[default]
    HighestAverages,
}

/// Whether key and value widths compete for one budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Joint,
    /// Keys and values each receive half of the budget.
    PerType,
}

#[derive(Debug, Clone)]
pub struct AllocationOptions {
    pub rule: AllocationRule,
    pub pooling: Pooling,
    pub min_rank: usize,
}

impl Default for AllocationOptions {
    fn default() -> Self {
        AllocationOptions {
            rule: AllocationRule::default(),
            pooling: Pooling::default(),
            min_rank: DEFAULT_MIN_RANK,
        }
    }
}

/// Total kept width for `target_ratio`.
pub fn width_budget(spec: &ModelSpec, target_ratio: f64) -> usize {
    let full = (2 * spec.kv_width() * spec.n_layers) as f64;
    ((1.0 - target_ratio) * full).round() as usize
}

/// One allocatable width: a layer's key or value projection.
#[derive(Debug, Clone, Copy)]
struct Entry {
    score: f64,
    unit: usize,
    min: usize,
    max: usize,
}

/// Allocate per-layer ranks meeting the budget exactly.
pub fn allocate(
    scores: &FisherScores,
    spec: &ModelSpec,
    target_ratio: f64,
    group_size: usize,
    opts: &AllocationOptions,
) -> Result<RankAllocation> {
    spec.validate()?;
    scores.validate()?;
    if !(target_ratio > 0.0 && target_ratio < 1.0) {
        return Err(Error::invalid(format!("ratio must be in (0,1), got {target_ratio}")));
    }
    if group_size == 0 || spec.n_kv_heads % group_size != 0 {
        return Err(Error::invalid(format!(
            "group size {group_size} does not divide {} kv heads",
            spec.n_kv_heads
        )));
    }
    if scores.layers.len() != spec.n_layers {
        return Err(Error::invalid(format!(
            "scores cover {} layers, model has {}",
            scores.layers.len(),
            spec.n_layers
        )));
    }
    let full = spec.kv_width();
    let groups = spec.n_kv_heads / group_size;
    let r_min = opts.min_rank.max(1);
    if r_min > group_size * spec.d_head {
        return Err(Error::invalid(format!("minimum rank {r_min} exceeds group width")));
    }
    let budget = width_budget(spec, target_ratio);
    let key_entry = |s: &LayerScore| Entry {
        score: s.key_score,
        unit: groups,
        min: groups * r_min,
        max: full,
    };
    let value_entry = |s: &LayerScore| Entry {
        score: s.value_score,
        unit: 1,
        min: r_min,
        max: full,
    };
    let min_total = spec.n_layers * (groups * r_min + r_min);
    if budget < min_total {
        return Err(Error::invalid(format!(
            "target ratio {target_ratio} is infeasible: budget {budget} below minimum width {min_total}"
        )));
    }

    let widths: Vec<(usize, usize)> = match opts.pooling {
        Pooling::Joint => {
            let entries: Vec<Entry> = scores
                .layers
                .iter()
                .flat_map(|s| [key_entry(s), value_entry(s)])
                .collect();
            let w = distribute(&entries, budget, opts.rule)?;
            w.chunks(2).map(|c| (c[0], c[1])).collect()
        }
        Pooling::PerType => {
            let keys: Vec<Entry> = scores.layers.iter().map(key_entry).collect();
            let values: Vec<Entry> = scores.layers.iter().map(value_entry).collect();
            let key_min: usize = keys.iter().map(|e| e.min).sum();
            let key_max: usize = keys.iter().map(|e| e.max).sum();
            let value_min: usize = values.iter().map(|e| e.min).sum();
            // key half rounded down to a whole number of units, kept feasible
            let key_budget = ((budget / 2) / groups * groups)
                .clamp(key_min, key_max)
                .min(budget - value_min) / groups * groups;
            let kw = distribute(&keys, key_budget, opts.rule)?;
            let vw = distribute(&values, budget - key_budget, opts.rule)?;
            kw.into_iter().zip(vw).collect()
        }
    };

    let layers: Vec<LayerRanks> = widths
        .iter()
        .map(|&(k, v)| LayerRanks {
            key_rank_per_group: k / groups,
            value_rank: v,
        })
        .collect();
    let kept: usize = widths.iter().map(|(k, v)| k + v).sum();
    debug_assert_eq!(kept, budget);
    Ok(RankAllocation {
        layers,
        group_size,
        target_ratio,
        achieved_ratio: 1.0 - kept as f64 / (2 * full * spec.n_layers) as f64,
        budget,
    })
}

/// Split `budget` over `entries` so every width is a multiple of its unit
/// within `[min, max]` and the widths add up to `budget`.
fn distribute(entries: &[Entry], budget: usize, rule: AllocationRule) -> Result<Vec<usize>> {
    let min_total: usize = entries.iter().map(|e| e.min).sum();
    let max_total: usize = entries.iter().map(|e| e.max).sum();
    if budget < min_total || budget > max_total {
        return Err(Error::invalid(format!(
            "budget {budget} outside feasible range {min_total}..={max_total}"
        )));
    }
    let mut w = match rule {
        AllocationRule::Proportional => proportional_start(entries, budget),
        AllocationRule::HighestAverages => entries.iter().map(|e| e.min).collect(),
    };
    fill(entries, &mut w, budget);
    repair(entries, &mut w, budget)?;
    Ok(w)
}

fn proportional_start(entries: &[Entry], budget: usize) -> Vec<usize> {
    let total: f64 = entries.iter().map(|e| e.score).sum();
    entries
        .iter()
        .map(|e| {
            let share = if total > 0.0 {
                e.score / total
            } else {
                1.0 / entries.len() as f64
            };
            let raw = share * budget as f64 / e.unit as f64;
            (raw.round() as usize * e.unit).clamp(e.min, e.max)
        })
        .collect()
}

/// Priority of the next unit for entry `i`; higher is granted first.
fn priority(e: &Entry, width: usize) -> f64 {
    e.score / (width + e.unit) as f64
}

/// Move towards the budget one unit at a time: add to the highest-priority
/// entry that fits, or remove from the lowest-priority one above its minimum.
fn fill(entries: &[Entry], w: &mut [usize], budget: usize) {
    loop {
        let sum: usize = w.iter().sum();
        if sum < budget {
            let room = budget - sum;
            let pick = (0..entries.len())
                .filter(|&i| entries[i].unit <= room && w[i] + entries[i].unit <= entries[i].max)
                .max_by(|&a, &b| {
                    priority(&entries[a], w[a])
                        .total_cmp(&priority(&entries[b], w[b]))
                        .then(b.cmp(&a))
                });
            match pick {
                Some(i) => w[i] += entries[i].unit,
                None => return,
            }
        } else if sum > budget {
            let excess = sum - budget;
            // the unit most recently earned has priority score / width
            let pick = (0..entries.len())
                .filter(|&i| entries[i].unit <= excess && w[i] >= entries[i].min + entries[i].unit)
                .min_by(|&a, &b| {
                    let pa = entries[a].score / w[a] as f64;
                    let pb = entries[b].score / w[b] as f64;
                    pa.total_cmp(&pb).then(b.cmp(&a))
                });
            match pick {
                Some(i) => w[i] -= entries[i].unit,
                None => return,
            }
        } else {
            return;
        }
    }
}

/// Resolve a remainder smaller than any unit that could still move by
/// trading one coarse unit against unit-width entries.
fn repair(entries: &[Entry], w: &mut [usize], budget: usize) -> Result<()> {
    for _ in 0..entries.len() * 4 {
        let sum: usize = w.iter().sum();
        if sum == budget {
            return Ok(());
        }
        if sum < budget {
            // grant a coarse unit, then shed the overshoot from fine entries
            let pick = (0..entries.len())
                .filter(|&i| entries[i].unit > budget - sum && w[i] + entries[i].unit <= entries[i].max)
                .max_by(|&a, &b| {
                    priority(&entries[a], w[a])
                        .total_cmp(&priority(&entries[b], w[b]))
                        .then(b.cmp(&a))
                });
            let Some(i) = pick else { break };
            w[i] += entries[i].unit;
        } else {
            let pick = (0..entries.len())
                .filter(|&i| entries[i].unit > sum - budget && w[i] >= entries[i].min + entries[i].unit)
                .min_by(|&a, &b| {
                    let pa = entries[a].score / w[a] as f64;
                    let pb = entries[b].score / w[b] as f64;
                    pa.total_cmp(&pb).then(b.cmp(&a))
                });
            let Some(i) = pick else { break };
            w[i] -= entries[i].unit;
        }
        fill(entries, w, budget);
    }
    if w.iter().sum::<usize>() == budget {
        Ok(())
    } else {
        Err(Error::invalid(format!("no allocation meets budget {budget} with the given group layout")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{random_tokens, toy_model, ToyModelOptions};

    fn spec(layers: usize, kv: usize, d_head: usize) -> ModelSpec {
        ModelSpec {
            d_model: kv * d_head,
            n_layers: layers,
            n_heads: kv,
            n_kv_heads: kv,
            d_head,
            rope_theta: 10_000.0,
            vocab_size: 13,
        }
    }

    fn scores(pairs: &[(f64, f64)]) -> FisherScores {
        FisherScores::new(
            pairs
                .iter()
                .map(|&(k, v)| LayerScore {
                    key_score: k,
                    value_score: v,
                })
                .collect(),
            "test",
            0,
        )
        .unwrap()
    }

    #[test]
    fn uniform_halves() {
        let s = spec(2, 4, 4);
        for rule in [AllocationRule::Proportional, AllocationRule::HighestAverages] {
            let opts = AllocationOptions { rule, ..Default::default() };
            let a = allocate(&scores(&[(1.0, 1.0), (1.0, 1.0)]), &s, 0.5, 2, &opts).unwrap();
            for l in &a.layers {
                assert_eq!(l.key_rank_per_group, 2 * 4 / 2);
                assert_eq!(l.value_rank, 8);
            }
            assert_eq!(a.achieved_ratio, 0.5);
        }
    }

    #[test]
    fn higher_score_gets_more() {
        let s = spec(4, 4, 4);
        let sc = scores(&[(2.0, 2.0), (1.0, 1.0), (1.0, 1.0), (1.0, 1.0)]);
        let a = allocate(&sc, &s, 0.6, 2, &AllocationOptions::default()).unwrap();
        for l in 1..4 {
            assert!(a.layers[0].key_rank_per_group >= a.layers[l].key_rank_per_group);
            assert!(a.layers[0].value_rank >= a.layers[l].value_rank);
        }
    }

    #[test]
    fn budget_sum_exact() {
        let s = spec(4, 4, 4);
        let sc = scores(&[(0.3, 1.7), (2.2, 0.1), (0.9, 0.9), (1.4, 0.05)]);
        for rule in [AllocationRule::Proportional, AllocationRule::HighestAverages] {
            for pooling in [Pooling::Joint, Pooling::PerType] {
                let opts = AllocationOptions { rule, pooling, ..Default::default() };
                let a = allocate(&sc, &s, 0.7, 2, &opts).unwrap();
                let kept: usize = a.layers.iter().map(|l| l.key_rank_per_group * 2 + l.value_rank).sum();
                assert_eq!(kept, (0.3f64 * 2.0 * 16.0 * 4.0).round() as usize);
                assert_eq!(kept, a.budget);
            }
        }
    }

    #[test]
    fn invalid_targets() {
        let s = spec(1, 4, 4);
        let sc = scores(&[(1.0, 1.0)]);
        let o = AllocationOptions::default();
        assert!(allocate(&sc, &s, 0.0, 2, &o).unwrap_err().to_string().contains("ratio must be in (0,1)"));
        assert!(allocate(&sc, &s, 1.0, 2, &o).is_err());
        assert!(allocate(&sc, &s, 0.99, 2, &o).is_err());
        assert!(allocate(&sc, &s, 0.5, 3, &o).is_err());
    }

    #[test]
    fn score_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.json");
        let sc = scores(&[(0.125, 3.5), (1e-9, 0.0)]);
        sc.save(&p).unwrap();
        let back = FisherScores::load(&p).unwrap();
        assert_eq!(back.layers, sc.layers);
        fs::write(&p, r#"[{"key_score": -1, "value_score": 0}]"#).unwrap();
        assert!(FisherScores::load(&p).is_err());
        fs::write(&p, r#"{"layers": []}"#).unwrap();
        assert!(FisherScores::load(&p).is_err());
    }

    #[test]
    fn flat_loss_scores_zero() {
        let s = spec(2, 2, 4);
        let mut m = toy_model(&s, &ToyModelOptions::default(), 1);
        for l in &mut m.layers {
            l.w_k = Matrix::zeros(8, 8);
            l.w_v = Matrix::zeros(8, 8);
        }
        m.output_head = Matrix::zeros(8, 13);
        let tokens = random_tokens(6, 13, 2);
        let f = fisher_scores(&m, &tokens, &FisherMethod::FiniteDifference(Default::default())).unwrap();
        assert!(f.layers.iter().all(|l| l.key_score == 0.0 && l.value_score == 0.0));
    }

    #[test]
    fn step_sizes_agree() {
        let s = spec(2, 2, 4);
        let m = toy_model(&s, &ToyModelOptions::default(), 4);
        let tokens = random_tokens(12, 13, 5);
        let run = |epsilon| {
            let o = FiniteDifferenceOptions { epsilon, samples: 16, seed: 3 };
            fisher_scores(&m, &tokens, &FisherMethod::FiniteDifference(o)).unwrap()
        };
        let (a, b) = (run(1e-3), run(1e-4));
        for (x, y) in a.layers.iter().zip(&b.layers) {
            for (p, q) in [(x.key_score, y.key_score), (x.value_score, y.value_score)] {
                if p.abs() > 1e-8 {
                    assert!((p - q).abs() <= 0.05 * p.abs(), "{p} vs {q}");
                }
            }
        }
    }
}
