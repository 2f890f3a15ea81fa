//! Extraction quality: weight recovery, coverage, (ε, δ) agreement on the recovered
//! part of the input space and the taxonomy of unrecovered weights.
//!
//! Everything here reads the target's weights. None of it is part of the attack.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{dot, NetworkModel};
use crate::search::{CriticalPoint, Domain};

const CHUNK: usize = 4096;

/// Draws `samples` points from `domain` in fixed-size chunks, each from its own
/// seeded stream, and maps every chunk with `f`. Results come back in chunk order,
/// so reductions over counts do not depend on the thread count.
fn sample_chunks<T, F>(domain: &Domain, samples: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&[Vec<f64>]) -> T + Sync,
{
    let chunks = samples.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(c as u64 + 1);
            let n = CHUNK.min(samples - c * CHUNK);
            let xs: Vec<Vec<f64>> = (0..n).map(|_| domain.sample(&mut rng)).collect();
            f(&xs)
        })
        .collect()
}

/// Hidden activation bits, layer by layer.
fn hidden_pattern(net: &NetworkModel, x: &[f64]) -> Vec<Vec<bool>> {
    let pre = net.pre_activations(x);
    pre[..net.depth()]
        .iter()
        .map(|z| z.iter().map(|v| *v > 0.0).collect())
        .collect()
}

/// When an activation fraction counts as zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroRule {
    /// No sample hit it.
    Strict,
    /// Below the given fraction.
    Below(f64),
}

impl ZeroRule {
    pub fn is_zero(self, fraction: f64) -> bool {
        match self {
            ZeroRule::Strict => fraction == 0.0,
            ZeroRule::Below(t) => fraction < t,
        }
    }
}

impl std::str::FromStr for ZeroRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "strict" {
            return Ok(ZeroRule::Strict);
        }
        s.parse::<f64>()
            .ok()
            .filter(|t| *t > 0.0)
            .map(ZeroRule::Below)
            .ok_or_else(|| Error::Config(format!("zero rule must be `strict` or a positive fraction, got {s:?}")))
    }
}

/// Activation frequencies of every hidden neuron and neuron pair over random inputs.
///
/// Layers are 1-based in the accessors. For layer 1 the "previous neuron" of a weight
/// is an input coordinate, which counts as always active.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActivationStats {
    pub samples: usize,
    pub seed: u64,
    /// `neuron[i-1][k]`: fraction of samples where neuron k of layer i is active.
    pub neuron: Vec<Vec<f64>>,
    /// `plus_plus[i-1][k][j]`: neuron k of layer i and neuron j of layer i-1 both active.
    pub plus_plus: Vec<Vec<Vec<f64>>>,
    /// `plus_minus[i-1][k][j]`: neuron j of layer i-1 active, neuron k of layer i not.
    pub plus_minus: Vec<Vec<Vec<f64>>>,
}

impl ActivationStats {
    /// Activation of the weight's own neuron, zeroed when the neuron feeding it
    /// through this weight never fires.
    pub fn input_activation(&self, layer: usize, k: usize, j: usize, rule: ZeroRule) -> f64 {
        if layer > 1 && rule.is_zero(self.neuron[layer - 2][j]) {
            return 0.0;
        }
        self.neuron[layer - 1][k]
    }

    pub fn depth(&self) -> usize {
        self.neuron.len()
    }
}

/// Counts activations of all hidden neurons and adjacent-layer pairs on `samples`
/// uniform inputs.
pub fn activation_tests(truth: &NetworkModel, domain: &Domain, samples: usize, seed: u64) -> ActivationStats {
    let widths = truth.widths().to_vec();
    let depth = truth.depth();
    let prev_width = |i: usize| if i == 0 { 0 } else { widths[i] };
    struct Counts {
        neuron: Vec<Vec<u64>>,
        pp: Vec<Vec<Vec<u64>>>,
        pm: Vec<Vec<Vec<u64>>>,
    }
    let zero = || Counts {
        neuron: (0..depth).map(|i| vec![0; widths[i + 1]]).collect(),
        pp: (0..depth).map(|i| vec![vec![0; prev_width(i)]; widths[i + 1]]).collect(),
        pm: (0..depth).map(|i| vec![vec![0; prev_width(i)]; widths[i + 1]]).collect(),
    };
    let parts = sample_chunks(domain, samples, seed, |xs| {
        let mut c = zero();
        for x in xs {
            let pat = hidden_pattern(truth, x);
            for i in 0..depth {
                for (k, &on) in pat[i].iter().enumerate() {
                    if on {
                        c.neuron[i][k] += 1;
                    }
                    if i == 0 {
                        continue;
                    }
                    for (j, &prev) in pat[i - 1].iter().enumerate() {
                        if prev && on {
                            c.pp[i][k][j] += 1;
                        } else if prev {
                            c.pm[i][k][j] += 1;
                        }
                    }
                }
            }
        }
        c
    });
    let mut total = zero();
    for p in parts {
        for i in 0..depth {
            for k in 0..widths[i + 1] {
                total.neuron[i][k] += p.neuron[i][k];
                for j in 0..prev_width(i) {
                    total.pp[i][k][j] += p.pp[i][k][j];
                    total.pm[i][k][j] += p.pm[i][k][j];
                }
            }
        }
    }
    let n = samples.max(1) as f64;
    let neuron: Vec<Vec<f64>> = total
        .neuron
        .iter()
        .map(|l| l.iter().map(|c| *c as f64 / n).collect())
        .collect();
    let mut plus_plus = Vec::with_capacity(depth);
    let mut plus_minus = Vec::with_capacity(depth);
    for i in 0..depth {
        if i == 0 {
            let d0 = widths[0];
            plus_plus.push(neuron[0].iter().map(|a| vec![*a; d0]).collect());
            plus_minus.push(neuron[0].iter().map(|a| vec![1.0 - a; d0]).collect());
        } else {
            let frac = |m: &Vec<Vec<u64>>| -> Vec<Vec<f64>> {
                m.iter().map(|r| r.iter().map(|c| *c as f64 / n).collect()).collect()
            };
            plus_plus.push(frac(&total.pp[i]));
            plus_minus.push(frac(&total.pm[i]));
        }
    }
    ActivationStats {
        samples,
        seed,
        neuron,
        plus_plus,
        plus_minus,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightClass {
    AlwaysOff,
    UnreachableInactive,
    UnreachableActive,
    QueryIntensive,
}

impl WeightClass {
    pub const ALL: [WeightClass; 4] = [
        WeightClass::AlwaysOff,
        WeightClass::UnreachableInactive,
        WeightClass::UnreachableActive,
        WeightClass::QueryIntensive,
    ];

    /// The first two never contribute to the output.
    pub fn is_dead(self) -> bool {
        matches!(self, WeightClass::AlwaysOff | WeightClass::UnreachableInactive)
    }

    pub fn label(self) -> &'static str {
        match self {
            WeightClass::AlwaysOff => "always-off",
            WeightClass::UnreachableInactive => "unreachable-inactive",
            WeightClass::UnreachableActive => "unreachable-active",
            WeightClass::QueryIntensive => "query-intensive",
        }
    }

    /// Decision table on the three activation tests. The checks run in order, so
    /// every triple gets exactly one class.
    pub fn from_tests(input: f64, plus_plus: f64, plus_minus: f64, rule: ZeroRule) -> Self {
        if rule.is_zero(input) {
            WeightClass::AlwaysOff
        } else if rule.is_zero(plus_plus) {
            WeightClass::UnreachableInactive
        } else if rule.is_zero(plus_minus) {
            WeightClass::UnreachableActive
        } else {
            WeightClass::QueryIntensive
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaxonomyEntry {
    pub layer: usize,
    /// Neuron of `layer` the weight belongs to.
    pub neuron: usize,
    /// Neuron of `layer - 1` (or input coordinate) it reads from.
    pub input: usize,
    pub input_activation: f64,
    pub plus_plus: f64,
    pub plus_minus: f64,
    pub class: WeightClass,
}

/// Classifies missing weights given as `(layer, neuron, input)`.
pub fn classify_unrecovered(
    missing: &[(usize, usize, usize)],
    stats: &ActivationStats,
    rule: ZeroRule,
) -> Vec<TaxonomyEntry> {
    missing
        .iter()
        .map(|&(layer, k, j)| {
            let input = stats.input_activation(layer, k, j, rule);
            let pp = stats.plus_plus[layer - 1][k][j];
            let pm = stats.plus_minus[layer - 1][k][j];
            TaxonomyEntry {
                layer,
                neuron: k,
                input: j,
                input_activation: input,
                plus_plus: pp,
                plus_minus: pm,
                class: WeightClass::from_tests(input, pp, pm, rule),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyCounts {
    pub always_off: usize,
    pub unreachable_inactive: usize,
    pub unreachable_active: usize,
    pub query_intensive: usize,
}

impl TaxonomyCounts {
    pub fn from_entries(entries: &[TaxonomyEntry]) -> Self {
        let mut c = Self::default();
        for e in entries {
            match e.class {
                WeightClass::AlwaysOff => c.always_off += 1,
                WeightClass::UnreachableInactive => c.unreachable_inactive += 1,
                WeightClass::UnreachableActive => c.unreachable_active += 1,
                WeightClass::QueryIntensive => c.query_intensive += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.always_off + self.unreachable_inactive + self.unreachable_active + self.query_intensive
    }

    pub fn dead(&self) -> usize {
        self.always_off + self.unreachable_inactive
    }
}

/// Unrecovered parts of one hidden layer, in ground-truth indices.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LayerMissing {
    pub layer: usize,
    /// Neurons without any recovered counterpart.
    pub neurons: Vec<usize>,
    /// `(neuron, input)` weights of recovered neurons that are unknown or wrong.
    pub weights: Vec<(usize, usize)>,
}

impl LayerMissing {
    /// Every missing weight of the layer, including all weights of missed neurons.
    pub fn all_weights(&self, inputs: usize) -> Vec<(usize, usize)> {
        let mut out = self.weights.clone();
        for &k in &self.neurons {
            out.extend((0..inputs).map(|j| (k, j)));
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Some missed neuron or missed weight is in use under this activation pattern.
    /// The output layer has no activation bits; its neurons count as always on.
    fn touches(&self, pattern: &[Vec<bool>]) -> bool {
        let on = |k: usize| pattern.get(self.layer - 1).is_none_or(|here| here[k]);
        if self.neurons.iter().any(|&k| on(k)) {
            return true;
        }
        self.weights
            .iter()
            .any(|&(k, j)| on(k) && (self.layer == 1 || pattern[self.layer - 2][j]))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverageReport {
    pub samples: usize,
    pub seed: u64,
    /// `(layer, coverage)` for every layer in the missing set.
    pub layers: Vec<(usize, f64)>,
    pub model: f64,
}

impl CoverageReport {
    pub fn layer(&self, layer: usize) -> Option<f64> {
        self.layers.iter().find(|(l, _)| *l == layer).map(|(_, c)| *c)
    }
}

/// Fraction of uniform samples on which nothing unrecovered is active, per layer and
/// for all layers together. Every scope uses the same samples.
pub fn coverage(
    truth: &NetworkModel,
    domain: &Domain,
    missing: &[LayerMissing],
    samples: usize,
    seed: u64,
) -> CoverageReport {
    let parts = sample_chunks(domain, samples, seed, |xs| {
        let mut layer_hits = vec![0u64; missing.len()];
        let mut model_hits = 0u64;
        for x in xs {
            let pat = hidden_pattern(truth, x);
            let mut any = false;
            for (m, lm) in missing.iter().enumerate() {
                if lm.touches(&pat) {
                    layer_hits[m] += 1;
                    any = true;
                }
            }
            if any {
                model_hits += 1;
            }
        }
        (layer_hits, model_hits)
    });
    let mut layer_hits = vec![0u64; missing.len()];
    let mut model_hits = 0;
    for (l, m) in parts {
        for (a, b) in layer_hits.iter_mut().zip(l) {
            *a += b;
        }
        model_hits += m;
    }
    let n = samples.max(1) as f64;
    CoverageReport {
        samples,
        seed,
        layers: missing
            .iter()
            .zip(&layer_hits)
            .map(|(lm, h)| (lm.layer, 1.0 - *h as f64 / n))
            .collect(),
        model: 1.0 - model_hits as f64 / n,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpsilonDelta {
    pub epsilon: f64,
    /// Samples drawn in total.
    pub drawn: usize,
    /// Samples inside the recovered space.
    pub recovered: usize,
    /// Recovered-space samples left out because `|f(x)|` was below 1e-12.
    pub tiny_outputs: usize,
    /// Samples whose relative error exceeded ε.
    pub exceeding: usize,
    pub delta: f64,
    pub max_relative_error: f64,
}

/// Measured δ of `extracted` against `truth` at tolerance ε, over uniform samples
/// restricted to the recovered space (nothing in `missing` active).
pub fn epsilon_delta(
    truth: &NetworkModel,
    extracted: &NetworkModel,
    domain: &Domain,
    missing: &[LayerMissing],
    samples: usize,
    epsilon: f64,
    seed: u64,
) -> Result<EpsilonDelta> {
    if truth.input_dim() != extracted.input_dim() || truth.output_dim() != extracted.output_dim() {
        return Err(Error::Shape(format!(
            "cannot compare {} with {}",
            truth.architecture(),
            extracted.architecture()
        )));
    }
    let parts = sample_chunks(domain, samples, seed, |xs| {
        let (mut rec, mut tiny, mut over, mut worst) = (0usize, 0usize, 0usize, 0.0f64);
        for x in xs {
            let pat = hidden_pattern(truth, x);
            if missing.iter().any(|m| m.touches(&pat)) {
                continue;
            }
            rec += 1;
            let f = truth.eval(x);
            let g = extracted.eval(x);
            let norm = dot(&f, &f).sqrt();
            if norm < 1e-12 {
                tiny += 1;
                continue;
            }
            let diff: f64 = f.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let rel = diff / norm;
            // A NaN output from the extracted model counts as a failure.
            if !(rel <= epsilon) {
                over += 1;
            }
            if rel.is_nan() {
                worst = f64::INFINITY;
            } else {
                worst = worst.max(rel);
            }
        }
        (rec, tiny, over, worst)
    });
    let mut out = EpsilonDelta {
        epsilon,
        drawn: samples,
        recovered: 0,
        tiny_outputs: 0,
        exceeding: 0,
        delta: 0.0,
        max_relative_error: 0.0,
    };
    for (r, t, o, w) in parts {
        out.recovered += r;
        out.tiny_outputs += t;
        out.exceeding += o;
        out.max_relative_error = out.max_relative_error.max(w);
    }
    let counted = out.recovered - out.tiny_outputs;
    out.delta = if counted == 0 {
        0.0
    } else {
        out.exceeding as f64 / counted as f64
    };
    Ok(out)
}

/// The hidden neuron whose hyperplane is nearest to `x`, as `(layer, neuron)`; the
/// ground-truth owner of a critical point.
pub fn owner(truth: &NetworkModel, x: &[f64]) -> (usize, usize) {
    let mut best = (f64::INFINITY, 0, 0);
    for i in 1..=truth.depth() {
        let Ok(map) = truth.local_affine(x, i) else { continue };
        let z = map.apply(x);
        for (k, zk) in z.iter().enumerate() {
            let g = map.matrix.row(k).norm();
            if g == 0.0 {
                continue;
            }
            let d = zk.abs() / g;
            if d < best.0 {
                best = (d, i, k);
            }
        }
    }
    (best.1, best.2)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerCorrelation {
    pub layer: usize,
    /// Share of the layer's critical points owned by each neuron.
    pub shares: Vec<f64>,
    /// `min(a, 1 - a)` of each neuron's activation `a`.
    pub balance: Vec<f64>,
    /// Pearson correlation; `None` when fewer than three neurons have points or a
    /// variance vanishes.
    pub correlation: Option<f64>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Per layer, correlation between how balanced each neuron's activation is and its
/// share of the harvested critical points.
pub fn correlation_report(truth: &NetworkModel, points: &[CriticalPoint], stats: &ActivationStats) -> Vec<LayerCorrelation> {
    let depth = truth.depth();
    let mut counts: Vec<Vec<usize>> = (1..=depth).map(|i| vec![0; truth.widths()[i]]).collect();
    let owners: Vec<(usize, usize)> = points.par_iter().map(|p| owner(truth, &p.x)).collect();
    for (i, k) in owners {
        if i >= 1 {
            counts[i - 1][k] += 1;
        }
    }
    counts
        .iter()
        .enumerate()
        .map(|(l, c)| {
            let total: usize = c.iter().sum();
            let shares: Vec<f64> = c
                .iter()
                .map(|v| if total == 0 { 0.0 } else { *v as f64 / total as f64 })
                .collect();
            let balance: Vec<f64> = stats.neuron[l].iter().map(|a| a.min(1.0 - a)).collect();
            let nonzero = c.iter().filter(|v| **v > 0).count();
            let correlation = if nonzero < 3 { None } else { pearson(&balance, &shares) };
            LayerCorrelation {
                layer: l + 1,
                shares,
                balance,
                correlation,
            }
        })
        .collect()
}

/// How one extracted layer lines up with the true one.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerComparison {
    pub layer: usize,
    /// For every true neuron, the extracted neuron matched to it.
    pub matching: Vec<Option<usize>>,
    /// Factor taking the true neuron onto its extracted counterpart.
    pub scales: Vec<f64>,
    pub total_weights: usize,
    pub recovered_weights: usize,
    pub missing: LayerMissing,
    /// Largest relative entry error over recovered weights.
    pub max_weight_error: f64,
    pub max_bias_error: f64,
    /// Matched neurons whose factor is negative.
    pub sign_errors: usize,
}

impl LayerComparison {
    pub fn recovery_rate(&self) -> f64 {
        if self.total_weights == 0 {
            1.0
        } else {
            self.recovered_weights as f64 / self.total_weights as f64
        }
    }
}

/// Matches `extracted` against `truth` up to permutation and per-neuron scaling,
/// layer by layer, output layer included. An extracted weight counts as recovered when it is within
/// `tolerance` (relative to the row's largest entry) of the scaled true weight.
pub fn compare_models(truth: &NetworkModel, extracted: &NetworkModel, tolerance: f64) -> Result<Vec<LayerComparison>> {
    if truth.widths() != extracted.widths() {
        return Err(Error::Shape(format!(
            "architectures differ: {} vs {}",
            truth.architecture(),
            extracted.architecture()
        )));
    }
    let depth = truth.depth();
    let mut out = Vec::with_capacity(depth + 1);
    let d0 = truth.input_dim();
    // Where each true neuron of the previous layer went, and by which factor.
    let mut prev: Vec<(Option<usize>, f64)> = (0..d0).map(|j| (Some(j), 1.0)).collect();
    for i in 1..=depth + 1 {
        let t = truth.layer(i);
        let e = extracted.layer(i);
        // True rows expressed in the extracted column order and scale.
        let expected: Vec<Vec<f64>> = (0..t.rows())
            .map(|k| {
                let mut row = vec![0.0; e.cols()];
                for (j, (dst, c)) in prev.iter().enumerate() {
                    if let Some(d) = dst {
                        row[*d] = t.weight(k, j) / c;
                    }
                }
                row
            })
            .collect();
        // Outputs are neither permuted nor rescaled.
        let (matching, scales) = if i == depth + 1 {
            ((0..t.rows()).map(Some).collect(), vec![1.0; t.rows()])
        } else {
            match_rows(&expected, e)
        };
        let mut missing = LayerMissing {
            layer: i,
            ..Default::default()
        };
        let mut recovered = 0;
        let mut max_err: f64 = 0.0;
        let mut max_bias: f64 = 0.0;
        let mut sign_errors = 0;
        for k in 0..t.rows() {
            let Some(r) = matching[k] else {
                missing.neurons.push(k);
                continue;
            };
            let c = scales[k];
            if c < 0.0 {
                sign_errors += 1;
            }
            let target: Vec<f64> = expected[k].iter().map(|v| v * c).collect();
            let scale = target.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (j, (dst, _)) in prev.iter().enumerate() {
                let ok = match dst {
                    Some(d) => {
                        let err = (e.weight(r, *d) - target[*d]).abs() / scale.max(f64::MIN_POSITIVE);
                        if err <= tolerance {
                            max_err = max_err.max(err);
                            true
                        } else {
                            false
                        }
                    }
                    None => false,
                };
                if ok {
                    recovered += 1;
                } else {
                    missing.weights.push((k, j));
                }
            }
            let tb = t.bias()[k] * c;
            max_bias = max_bias.max((e.bias()[r] - tb).abs() / scale.max(tb.abs()).max(f64::MIN_POSITIVE));
        }
        out.push(LayerComparison {
            layer: i,
            total_weights: t.rows() * t.cols(),
            recovered_weights: recovered,
            max_weight_error: max_err,
            max_bias_error: max_bias,
            sign_errors,
            matching: matching.clone(),
            scales: scales.clone(),
            missing,
        });
        prev = (0..t.rows()).map(|k| (matching[k], scales[k])).collect();
    }
    Ok(out)
}

/// Greedy |cosine| matching of true rows to extracted rows, each extracted row
/// compared on its nonzero entries. Returns the match and the fitted factor.
fn match_rows(expected: &[Vec<f64>], e: &crate::network::Layer) -> (Vec<Option<usize>>, Vec<f64>) {
    let mut pairs = Vec::new();
    for (k, t) in expected.iter().enumerate() {
        for r in 0..e.rows() {
            let row = e.row(r);
            let masked: Vec<f64> = t
                .iter()
                .zip(row)
                .map(|(a, b)| if *b != 0.0 { *a } else { 0.0 })
                .collect();
            let rr = dot(row, row);
            let tt = dot(&masked, &masked);
            if rr == 0.0 || tt == 0.0 {
                continue;
            }
            let rt = dot(row, &masked);
            pairs.push((rt.abs() / (rr * tt).sqrt(), k, r, rt / tt));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matching = vec![None; expected.len()];
    let mut scales = vec![1.0; expected.len()];
    let mut used = vec![false; e.rows()];
    for (cos, k, r, c) in pairs {
        // Rows that are not even roughly collinear are not the same neuron.
        if cos < 0.5 {
            break;
        }
        if matching[k].is_none() && !used[r] {
            matching[k] = Some(r);
            scales[k] = c;
            used[r] = true;
        }
    }
    (matching, scales)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub weight_recovery: f64,
    pub coverage: f64,
    pub queries: u64,
    pub queries_log2: f64,
    pub wall_seconds: f64,
    pub missed_neurons: usize,
    pub missing_weights: usize,
    pub max_weight_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub architecture: String,
    pub layers: Vec<LayerReport>,
    pub model_coverage: f64,
    pub epsilon_delta: Option<EpsilonDelta>,
    pub taxonomy: TaxonomyCounts,
    pub taxonomy_entries: Vec<TaxonomyEntry>,
    /// Free-form provenance: seeds, config values, sign mode.
    pub settings: Vec<(String, String)>,
}

impl ExtractionReport {
    /// Tab-separated per-layer metrics with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "layer\tweight_recovery\tcoverage\tqueries\tqueries_log2\twall_seconds\tmissed_neurons\tmissing_weights\tmax_weight_error\n",
        );
        for l in &self.layers {
            s.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{}\t{:.2}\t{:.3}\t{}\t{}\t{:.3e}\n",
                l.layer,
                l.weight_recovery,
                l.coverage,
                l.queries,
                l.queries_log2,
                l.wall_seconds,
                l.missed_neurons,
                l.missing_weights,
                l.max_weight_error
            ));
        }
        s.push_str(&format!("model\t\t{:.6}\t\t\t\t\t\t\n", self.model_coverage));
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("target {}\n", self.architecture);
        s.push_str("layer  recovered  coverage  queries     time\n");
        for l in &self.layers {
            let q = if l.queries == 0 {
                "0".to_string()
            } else {
                format!("2^{:.2}", l.queries_log2)
            };
            s.push_str(&format!(
                "{:>5}  {:>8.2}%  {:>7.2}%  {:>9}  {:>6.1}s\n",
                l.layer,
                100.0 * l.weight_recovery,
                100.0 * l.coverage,
                q,
                l.wall_seconds
            ));
        }
        s.push_str(&format!("model coverage {:.2}%\n", 100.0 * self.model_coverage));
        if let Some(ed) = &self.epsilon_delta {
            s.push_str(&format!(
                "delta at eps={} on {} recovered-space samples: {:e} ({} tiny outputs skipped)\n",
                ed.epsilon, ed.recovered, ed.delta, ed.tiny_outputs
            ));
        }
        let t = &self.taxonomy;
        s.push_str(&format!(
            "unrecovered weights: {} always-off, {} unreachable-inactive, {} unreachable-active, {} query-intensive\n",
            t.always_off, t.unreachable_inactive, t.unreachable_active, t.query_intensive
        ));
        for (k, v) in &self.settings {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

/// Per-neuron activation fractions as a matrix: one line per hidden layer, one
/// tab-separated column per neuron.
pub fn heatmap_tsv(stats: &ActivationStats) -> String {
    let mut s = String::new();
    for l in &stats.neuron {
        let cells: Vec<String> = l.iter().map(|a| format!("{a:.4}")).collect();
        s.push_str(&cells.join("\t"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{example_network, generate_random, Layer, RandomInit};

    #[test]
    fn decision_table_rows() {
        use WeightClass::*;
        let r = ZeroRule::Strict;
        assert_eq!(WeightClass::from_tests(0.0, 0.0, 0.3, r), AlwaysOff);
        assert_eq!(WeightClass::from_tests(0.0, 0.0, 0.0, r), AlwaysOff);
        assert_eq!(WeightClass::from_tests(0.11, 0.0, 0.40, r), UnreachableInactive);
        assert_eq!(WeightClass::from_tests(0.83, 0.11, 0.0, r), UnreachableActive);
        assert_eq!(WeightClass::from_tests(0.11, 0.11, 0.48, r), QueryIntensive);
        assert_eq!(WeightClass::from_tests(0.0005, 0.2, 0.2, ZeroRule::Below(1e-3)), AlwaysOff);
        assert!(AlwaysOff.is_dead() && UnreachableInactive.is_dead());
        assert!(!UnreachableActive.is_dead() && !QueryIntensive.is_dead());
    }

    fn all_active() -> NetworkModel {
        // Positive weights and biases on a positive box: everything fires.
        NetworkModel::new(vec![
            Layer::from_rows(&[vec![1.0, 0.5], vec![0.2, 1.0]], &[0.1, 0.1]).unwrap(),
            Layer::from_rows(&[vec![1.0, 1.0], vec![0.3, 0.7], vec![2.0, 0.1]], &[0.5, 0.5, 0.5]).unwrap(),
            Layer::from_rows(&[vec![1.0, 1.0, 1.0]], &[0.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn all_active_network_has_full_plus_plus() {
        let s = activation_tests(&all_active(), &Domain::unit(2), 5000, 3);
        for l in &s.plus_plus {
            for row in l {
                assert!(row.iter().all(|v| *v == 1.0));
            }
        }
        assert!(s.plus_minus.iter().flatten().flatten().all(|v| *v == 0.0));
    }

    /// Direct counts over the same samples the chunked sampler draws.
    #[test]
    fn activation_fractions_match_a_direct_count() {
        let net = generate_random(&[3, 5, 4, 1], 11, &RandomInit::default()).unwrap();
        let domain = Domain::unit(3);
        let n = 10_000;
        let s = activation_tests(&net, &domain, n, 5);
        let xs: Vec<Vec<f64>> = sample_chunks(&domain, n, 5, |xs| xs.to_vec()).into_iter().flatten().collect();
        assert_eq!(xs.len(), n);
        let (mut on, mut pp, mut pm) = (0, 0, 0);
        for x in &xs {
            let h1 = net.partial_forward(x, 1).unwrap();
            let h2 = net.partial_forward(x, 2).unwrap();
            if h2[2] > 0.0 {
                on += 1;
            }
            if h1[4] > 0.0 && h2[2] > 0.0 {
                pp += 1;
            }
            if h1[4] > 0.0 && h2[2] <= 0.0 {
                pm += 1;
            }
        }
        assert_eq!(s.neuron[1][2], on as f64 / n as f64);
        assert_eq!(s.plus_plus[1][2][4], pp as f64 / n as f64);
        assert_eq!(s.plus_minus[1][2][4], pm as f64 / n as f64);
    }

    #[test]
    fn activation_tests_are_reproducible() {
        let net = generate_random(&[4, 6, 6, 1], 2, &RandomInit::default()).unwrap();
        let a = activation_tests(&net, &Domain::unit(4), 9000, 1);
        let b = activation_tests(&net, &Domain::unit(4), 9000, 1);
        assert_eq!(a.neuron, b.neuron);
        assert_eq!(a.plus_plus, b.plus_plus);
    }

    #[test]
    fn nothing_missing_is_full_coverage() {
        let net = example_network();
        let missing = vec![
            LayerMissing { layer: 1, ..Default::default() },
            LayerMissing { layer: 2, ..Default::default() },
        ];
        let c = coverage(&net, &Domain::new(2, -10.0, 10.0), &missing, 10_000, 0);
        assert_eq!(c.model, 1.0);
        assert!(c.layers.iter().all(|(_, v)| *v == 1.0));
    }

    #[test]
    fn single_missing_weight_costs_its_plus_plus_fraction() {
        let net = generate_random(&[5, 6, 6, 1], 4, &RandomInit::default()).unwrap();
        let domain = Domain::unit(5);
        let stats = activation_tests(&net, &domain, 200_000, 9);
        let missing = vec![LayerMissing {
            layer: 2,
            neurons: vec![],
            weights: vec![(3, 1)],
        }];
        let c = coverage(&net, &domain, &missing, 100_000, 17);
        let p = stats.plus_plus[1][3][1];
        let n = 100_000.0;
        let sigma = (p * (1.0 - p) / n).sqrt() + (p * (1.0 - p) / 200_000.0).sqrt();
        assert!(((1.0 - c.model) - p).abs() <= 3.0 * sigma + 1e-12, "{} vs {p}", 1.0 - c.model);
    }

    #[test]
    fn model_coverage_is_below_every_layer() {
        let net = generate_random(&[4, 6, 6, 6, 1], 8, &RandomInit::default()).unwrap();
        let missing = vec![
            LayerMissing { layer: 1, neurons: vec![2], weights: vec![] },
            LayerMissing { layer: 2, neurons: vec![], weights: vec![(0, 1), (4, 5)] },
            LayerMissing { layer: 3, neurons: vec![5], weights: vec![(1, 1)] },
        ];
        let c = coverage(&net, &Domain::unit(4), &missing, 20_000, 1);
        for (_, v) in &c.layers {
            assert!(c.model <= *v);
        }
    }

    #[test]
    fn identical_models_have_zero_delta() {
        let net = generate_random(&[6, 8, 8, 1], 5, &RandomInit::default()).unwrap();
        let ed = epsilon_delta(&net, &net, &Domain::unit(6), &[], 20_000, 1e-12, 0).unwrap();
        assert_eq!(ed.delta, 0.0);
        assert_eq!(ed.recovered, 20_000);
    }

    /// Scaling a hidden layer's neurons by positive factors and dividing the next
    /// layer's columns by the same factors is an exact symmetry.
    #[test]
    fn rescaled_layer_has_zero_delta() {
        let net = generate_random(&[6, 8, 8, 1], 6, &RandomInit::default()).unwrap();
        let mut layers = net.layers().to_vec();
        let c: Vec<f64> = (0..8).map(|k| 0.5 + 0.25 * k as f64).collect();
        for k in 0..8 {
            layers[1].row_mut(k).iter_mut().for_each(|v| *v *= c[k]);
            layers[1].bias_mut()[k] *= c[k];
            layers[2].row_mut(0)[k] /= c[k];
        }
        let scaled = NetworkModel::new(layers).unwrap();
        let ed = epsilon_delta(&net, &scaled, &Domain::unit(6), &[], 20_000, 1e-6, 2).unwrap();
        assert_eq!(ed.delta, 0.0);
        let cmp = compare_models(&net, &scaled, 1e-9).unwrap();
        assert!(cmp.iter().all(|l| l.recovery_rate() == 1.0));
        for k in 0..8 {
            assert!((cmp[1].scales[k] - c[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn comparison_sees_permutation_and_a_zeroed_neuron() {
        let net = generate_random(&[5, 6, 6, 1], 12, &RandomInit::default()).unwrap();
        let mut layers = net.layers().to_vec();
        // Swap neurons 0 and 3 of layer 1 (rows, then the columns reading them).
        let perm = [3, 1, 2, 0, 4, 5];
        let l1 = &layers[0];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&k| l1.row(k).to_vec()).collect();
        let bias: Vec<f64> = perm.iter().map(|&k| l1.bias()[k]).collect();
        layers[0] = Layer::from_rows(&rows, &bias).unwrap();
        let l2 = &layers[1];
        let rows: Vec<Vec<f64>> = (0..6).map(|r| perm.iter().map(|&k| l2.weight(r, k)).collect()).collect();
        layers[1] = Layer::from_rows(&rows, l2.bias()).unwrap();
        layers[1].row_mut(2).iter_mut().for_each(|v| *v = 0.0);
        layers[1].bias_mut()[2] = 0.0;
        let ext = NetworkModel::new(layers).unwrap();
        let cmp = compare_models(&net, &ext, 1e-9).unwrap();
        assert_eq!(cmp[0].recovered_weights, 30);
        assert_eq!(cmp[0].matching[0], Some(3));
        assert_eq!(cmp[1].missing.neurons, vec![2]);
        assert_eq!(cmp[1].recovered_weights, 30);
    }

    #[test]
    fn missing_weights_partition_into_classes() {
        let net = generate_random(&[4, 8, 8, 8, 1], 21, &RandomInit::default()).unwrap();
        let stats = activation_tests(&net, &Domain::unit(4), 20_000, 0);
        let missing: Vec<(usize, usize, usize)> = (1..=3)
            .flat_map(|l| (0..8).flat_map(move |k| (0..if l == 1 { 4 } else { 8 }).map(move |j| (l, k, j))))
            .collect();
        let entries = classify_unrecovered(&missing, &stats, ZeroRule::Strict);
        let counts = TaxonomyCounts::from_entries(&entries);
        assert_eq!(counts.total(), missing.len());
        for e in &entries {
            let matches = WeightClass::ALL
                .iter()
                .filter(|c| **c == WeightClass::from_tests(e.input_activation, e.plus_plus, e.plus_minus, ZeroRule::Strict))
                .count();
            assert_eq!(matches, 1);
        }
    }

    #[test]
    fn pearson_edge_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]), None);
    }

    #[test]
    fn owner_of_a_first_layer_kink() {
        let net = example_network();
        // On 0.5x + 2y - 5 = 0, away from the other hyperplanes.
        let x = [2.0, 2.0];
        assert_eq!(owner(&net, &x), (1, 2));
    }
}
