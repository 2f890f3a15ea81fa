//! Finishing a layer: missing entries, biases, signs, and the final linear layer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{try_merge, AffineSignature, Component, MergeConfig};
use crate::network::{dot, Layer, Prefix};
use crate::oracle::PhasedOracle;
use crate::search::{scan_line, CriticalPoint, Domain, SearchConfig};
use crate::signature::{least_squares, recover_solution_space, SignatureConfig, SolutionSpace};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetedConfig {
    /// Walk steps allowed per missing entry, per previous-layer neuron.
    pub step_budget: usize,
    /// First step length, as a fraction of the domain diagonal.
    pub initial_step: f64,
    /// Member points tried as starting positions for one missing entry.
    pub starts: usize,
}

impl Default for TargetedConfig {
    fn default() -> Self {
        Self {
            step_budget: 50,
            initial_step: 1e-2,
            starts: 3,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TargetedOutcome {
    pub points: Vec<CriticalPoint>,
    pub spaces: Vec<SolutionSpace>,
    pub steps: usize,
    /// Entries that became known.
    pub filled: Vec<usize>,
    /// Entries still unknown after the budget ran out.
    pub exhausted: Vec<usize>,
}

/// Everything the targeted walk needs besides the oracle.
pub struct TargetedContext<'a> {
    pub prefix: &'a Prefix,
    pub domain: &'a Domain,
    pub search: &'a SearchConfig,
    pub signature: &'a SignatureConfig,
    pub merge: &'a MergeConfig,
    pub config: &'a TargetedConfig,
}

/// Walks along the component's hyperplane towards places where a previous-layer
/// neuron with a still-unknown weight switches on, then recovers a partial signature
/// there and merges it in. `component.signature` is updated in place.
///
/// Each step moves in the tangent space of the predicted hyperplane in the direction
/// that raises the targeted neuron's pre-activation, then finds the real kink again
/// with a short scan across the hyperplane. Failed re-searches halve the step.
pub fn targeted_search(
    oracle: &PhasedOracle,
    ctx: &TargetedContext,
    component: &mut Component,
    members: &[&CriticalPoint],
    next_id: &mut usize,
) -> Result<TargetedOutcome> {
    let mut out = TargetedOutcome::default();
    let width = component.signature.mask.len();
    if ctx.prefix.is_empty() || members.is_empty() {
        return Ok(out);
    }
    let budget = ctx.config.step_budget * width;
    for k in 0..width {
        if component.signature.mask[k] {
            continue;
        }
        let mut starts: Vec<&CriticalPoint> = members.to_vec();
        starts.sort_by(|a, b| {
            let za = last_pre(ctx.prefix, &a.x)[k];
            let zb = last_pre(ctx.prefix, &b.x)[k];
            zb.total_cmp(&za).then(a.id.cmp(&b.id))
        });
        let mut steps_left = budget;
        for start in starts.into_iter().take(ctx.config.starts) {
            if steps_left == 0 || component.signature.mask[k] {
                break;
            }
            let candidates = walk_to_neuron(oracle, ctx, &component.signature, start, k, &mut steps_left)?;
            out.steps = budget - steps_left;
            // The kink nearest the prediction may belong to another neuron; the merge
            // test decides.
            for x in candidates {
                let mut point = start.clone();
                point.id = *next_id;
                point.output = oracle.query(&x)?;
                point.bracket = (x.clone(), x.clone());
                point.x = x;
                *next_id += 1;
                let eps = ctx.signature.eps_initial * ctx.domain.diagonal();
                let Ok(space) = recover_solution_space(oracle, ctx.prefix, &point, eps, ctx.signature) else {
                    continue;
                };
                let sig = AffineSignature::from(&space);
                if let Ok(merged) = try_merge(&component.signature, &sig, ctx.merge) {
                    for j in 0..width {
                        if merged.mask[j] && !component.signature.mask[j] {
                            out.filled.push(j);
                        }
                    }
                    component.signature = merged;
                    component.members.push(point.id);
                    out.points.push(point);
                    out.spaces.push(space);
                    break;
                }
            }
        }
        if !component.signature.mask[k] {
            out.exhausted.push(k);
        }
    }
    out.filled.sort_unstable();
    out.filled.dedup();
    Ok(out)
}

fn last_pre(prefix: &Prefix, x: &[f64]) -> Vec<f64> {
    prefix.pre_activations(x).pop().unwrap_or_default()
}

/// One walk from `start` until previous-layer neuron `k` is comfortably active.
/// Returns the kinks found at the last step where `k` is active, nearest first.
fn walk_to_neuron(
    oracle: &PhasedOracle,
    ctx: &TargetedContext,
    signature: &AffineSignature,
    start: &CriticalPoint,
    k: usize,
    steps_left: &mut usize,
) -> Result<Vec<Vec<f64>>> {
    let prefix = ctx.prefix;
    let diag = ctx.domain.diagonal();
    let row = &signature.particular;
    let mut y = start.x.clone();
    let z0 = last_pre(prefix, &y)[k];
    // Aim a bit past the switching point so the second differences stay inside.
    let goal = 0.2 * z0.abs().max(1e-3);
    let known_max = row.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
    let mut cap = ctx.config.initial_step * diag;
    while *steps_left > 0 {
        let z = last_pre(prefix, &y)[k];
        *steps_left -= 1;
        let normal = prefix.pullback(&y, row);
        let nn = dot(&normal, &normal);
        let grad = prefix.pre_activation_gradient(&y, k);
        if nn == 0.0 {
            return Ok(Vec::new());
        }
        let c = dot(&grad, &normal) / nn;
        let mut v: Vec<f64> = grad.iter().zip(&normal).map(|(g, n)| g - c * n).collect();
        let vn = dot(&v, &v).sqrt();
        if vn <= 1e-12 * dot(&grad, &grad).sqrt() || vn == 0.0 {
            return Ok(Vec::new());
        }
        v.iter_mut().for_each(|a| *a /= vn);
        let rate = dot(&grad, &v);
        let need = (1.2 * goal - z) / rate;
        let exit = ctx.domain.exit_time(&y, &v);
        let step = cap.min(need).min(0.999 * exit);
        if step <= 1e-9 * diag {
            return Ok(Vec::new());
        }
        let target: Vec<f64> = y.iter().zip(&v).map(|(a, b)| a + step * b).collect();
        // Past the switching point the hyperplane bends by an amount set by the
        // unknown weight; allow for weights a few times the largest known one.
        let past = (z + rate * step).max(0.0);
        let reach = (0.5 * step).max(8.0 * known_max * past / nn.sqrt());
        let found = research(oracle, ctx, &target, &normal, reach)?;
        if found.is_empty() {
            cap *= 0.5;
            if cap <= 1e-9 * diag {
                return Ok(Vec::new());
            }
            continue;
        }
        let arrived: Vec<Vec<f64>> = found
            .iter()
            .filter(|x| last_pre(prefix, x)[k] >= goal)
            .cloned()
            .collect();
        if !arrived.is_empty() {
            return Ok(arrived);
        }
        y = found.into_iter().next().unwrap();
        cap *= 1.5;
    }
    Ok(Vec::new())
}

/// Kinks on a short segment through `target` along `normal`, nearest first, skipping
/// kinks of the extracted prefix itself.
fn research(
    oracle: &PhasedOracle,
    ctx: &TargetedContext,
    target: &[f64],
    normal: &[f64],
    reach: f64,
) -> Result<Vec<Vec<f64>>> {
    let diag = ctx.domain.diagonal();
    let nn = dot(normal, normal).sqrt();
    let reach = reach.max(1e-4 * diag);
    let a: Vec<f64> = target.iter().zip(normal).map(|(t, n)| t - reach * n / nn).collect();
    let b: Vec<f64> = target.iter().zip(normal).map(|(t, n)| t + reach * n / nn).collect();
    if !ctx.domain.contains(&a) || !ctx.domain.contains(&b) {
        let clipped = clip_segment(ctx.domain, target, normal, reach);
        let Some((a, b)) = clipped else { return Ok(Vec::new()) };
        return kinks_by_distance(oracle, ctx, &a, &b);
    }
    kinks_by_distance(oracle, ctx, &a, &b)
}

fn clip_segment(domain: &Domain, c: &[f64], n: &[f64], reach: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let nn = dot(n, n).sqrt();
    let u: Vec<f64> = n.iter().map(|v| v / nn).collect();
    let back: Vec<f64> = u.iter().map(|v| -v).collect();
    let tf = domain.exit_time(c, &u).min(reach);
    let tb = domain.exit_time(c, &back).min(reach);
    if tf + tb <= 0.0 {
        return None;
    }
    let a = c.iter().zip(&u).map(|(x, v)| x - tb * v).collect();
    let b = c.iter().zip(&u).map(|(x, v)| x + tf * v).collect();
    Some((a, b))
}

fn kinks_by_distance(oracle: &PhasedOracle, ctx: &TargetedContext, a: &[f64], b: &[f64]) -> Result<Vec<Vec<f64>>> {
    let slope = ctx.search.slope_step * ctx.domain.diagonal();
    let found = scan_line(oracle, a, b, slope, ctx.search)?;
    let floor = 1e-7 * ctx.domain.diagonal();
    let mut kinks: Vec<(f64, Vec<f64>)> = found
        .into_iter()
        .filter(|p| !p.pathological && ctx.prefix.boundary_distance(&p.x) > floor)
        .map(|p| ((p.t - 0.5).abs(), p.x))
        .collect();
    kinks.sort_by(|p, q| p.0.total_cmp(&q.0));
    Ok(kinks.into_iter().map(|k| k.1).collect())
}

/// Scaled bias making the hyperplane pass through a critical point: `-row · F(x)`.
pub fn recover_bias(row: &[f64], x: &[f64], prefix: &Prefix) -> f64 {
    -dot(row, &prefix.features(x))
}

/// Median of [`recover_bias`] over several member points.
pub fn median_bias(row: &[f64], points: &[&CriticalPoint], prefix: &Prefix) -> Option<f64> {
    let mut b: Vec<f64> = points.iter().map(|p| recover_bias(row, &p.x, prefix)).collect();
    if b.is_empty() {
        return None;
    }
    b.sort_by(f64::total_cmp);
    let m = b.len() / 2;
    Some(if b.len() % 2 == 1 { b[m] } else { 0.5 * (b[m - 1] + b[m]) })
}

/// Least-squares fit of the final linear layer on stored `(input, output)` pairs,
/// through the extracted hidden layers. No queries.
///
/// Hidden neurons that are inactive on every stored pair get zero weights.
pub fn recover_last_layer(pairs: &[(Vec<f64>, Vec<f64>)], hidden: &Prefix) -> Result<Layer> {
    let width = hidden.output_dim();
    let Some(outputs) = pairs.first().map(|p| p.1.len()) else {
        return Err(Error::RankDeficient { rank: 0, needed: width + 1 });
    };
    let features: Vec<Vec<f64>> = pairs.iter().map(|(x, _)| hidden.features(x)).collect();
    let live: Vec<usize> = (0..width)
        .filter(|&j| features.iter().any(|f| f[j] != 0.0))
        .collect();
    let cols = live.len() + 1;
    let m = DMatrix::from_fn(pairs.len(), cols, |r, c| {
        if c < live.len() {
            features[r][live[c]]
        } else {
            1.0
        }
    });
    let mut weights = vec![0.0; outputs * width];
    let mut bias = vec![0.0; outputs];
    for o in 0..outputs {
        let rhs = DVector::from_iterator(pairs.len(), pairs.iter().map(|p| p.1[o]));
        let (sol, _, rank) = least_squares(&m, &rhs, 1e-12);
        if rank < cols || pairs.len() < cols {
            return Err(Error::RankDeficient { rank, needed: cols });
        }
        for (c, &j) in live.iter().enumerate() {
            weights[o * width + j] = sol[c];
        }
        bias[o] = sol[live.len()];
    }
    Layer::new(outputs, width, weights, bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignMode {
    /// Match against the true rows. Evaluation only: it reads the target's weights.
    GroundTruth,
    ZeroQuery,
    None,
}

impl std::str::FromStr for SignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground-truth" => Ok(Self::GroundTruth),
            "zero-query" => Ok(Self::ZeroQuery),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown sign mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeuronStatus {
    Recovered,
    AlwaysOff,
    Missed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecoveredNeuron {
    /// Scaled row, signed when `sign` is known; unknown entries are zero.
    pub row: Vec<f64>,
    pub bias: f64,
    pub mask: Vec<bool>,
    pub status: NeuronStatus,
    /// `None` when the sign could not be settled; the row is then stored as recovered.
    pub sign: Option<f64>,
    pub component: Option<usize>,
    pub truth_index: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecoveredLayer {
    pub layer: usize,
    pub sign_mode: SignMode,
    pub neurons: Vec<RecoveredNeuron>,
}

impl RecoveredLayer {
    pub fn count(&self, status: NeuronStatus) -> usize {
        self.neurons.iter().filter(|n| n.status == status).count()
    }

    pub fn to_layer(&self) -> Result<Layer> {
        let rows: Vec<Vec<f64>> = self.neurons.iter().map(|n| n.row.clone()).collect();
        let bias: Vec<f64> = self.neurons.iter().map(|n| n.bias).collect();
        Layer::from_rows(&rows, &bias)
    }

    /// `(true neuron, input entry)` pairs not recovered, in ground-truth order.
    pub fn missing_weights(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (k, n) in self.neurons.iter().enumerate() {
            if n.status != NeuronStatus::Recovered {
                continue;
            }
            let k = n.truth_index.unwrap_or(k);
            for (j, m) in n.mask.iter().enumerate() {
                if !m {
                    out.push((k, j));
                }
            }
        }
        out
    }

    /// True neurons without a recovered counterpart.
    pub fn missing_neurons(&self) -> Vec<usize> {
        self.neurons
            .iter()
            .enumerate()
            .filter(|(_, n)| n.status != NeuronStatus::Recovered)
            .map(|(k, n)| n.truth_index.unwrap_or(k))
            .collect()
    }
}

/// A finished component before its sign is settled.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnsignedNeuron {
    pub row: Vec<f64>,
    pub bias: f64,
    pub mask: Vec<bool>,
    pub component: usize,
}

/// Settles signs (and in ground-truth mode the order and scale) of a layer's neurons.
///
/// Ground-truth mode pairs each recovered row with the true row it is most collinear
/// with (on its known entries), rescales it to the true magnitude and orders neurons
/// like the target, padding unmatched true neurons with zero rows marked missed.
pub fn resolve_signs(
    mode: SignMode,
    layer: usize,
    width: usize,
    neurons: Vec<UnsignedNeuron>,
    truth: Option<&Layer>,
    prefix: &Prefix,
    witness: Option<&[f64]>,
) -> Result<RecoveredLayer> {
    let inputs = neurons.first().map_or_else(|| truth.map_or(0, Layer::cols), |n| n.row.len());
    let recovered = |n: UnsignedNeuron, sign: Option<f64>, scale: f64, truth_index| RecoveredNeuron {
        row: n.row.iter().map(|v| v * scale).collect(),
        bias: n.bias * scale,
        mask: n.mask,
        status: NeuronStatus::Recovered,
        sign,
        component: Some(n.component),
        truth_index,
    };
    let missed = |truth_index| RecoveredNeuron {
        row: vec![0.0; inputs],
        bias: 0.0,
        mask: vec![false; inputs],
        status: NeuronStatus::Missed,
        sign: None,
        component: None,
        truth_index,
    };
    let mut out = match mode {
        SignMode::GroundTruth => {
            let truth = truth.ok_or(Error::MissingTruth)?;
            let assignment = align(&neurons, truth);
            let mut slots: Vec<Option<RecoveredNeuron>> = (0..truth.rows()).map(|_| None).collect();
            let mut extra = Vec::new();
            for (n, a) in neurons.into_iter().zip(assignment) {
                match a {
                    Some((t, scale)) => slots[t] = Some(recovered(n, Some(scale.signum()), scale, Some(t))),
                    None => extra.push(recovered(n, None, 1.0, None)),
                }
            }
            let mut list: Vec<RecoveredNeuron> = slots
                .into_iter()
                .enumerate()
                .map(|(t, s)| s.unwrap_or_else(|| missed(Some(t))))
                .collect();
            if !extra.is_empty() {
                log::warn!("{} recovered neurons matched no true neuron", extra.len());
            }
            list.extend(extra);
            list
        }
        SignMode::ZeroQuery => {
            let signs = match witness {
                Some(w) => {
                    let pairs: Vec<(Vec<f64>, f64)> = neurons.iter().map(|n| (n.row.clone(), n.bias)).collect();
                    crate::filter::zero_query_signs(prefix, &pairs, w)
                }
                None => vec![None; neurons.len()],
            };
            neurons
                .into_iter()
                .zip(signs)
                .map(|(n, s)| recovered(n, s, s.unwrap_or(1.0), None))
                .collect()
        }
        SignMode::None => neurons.into_iter().map(|n| recovered(n, None, 1.0, None)).collect(),
    };
    while out.len() < width {
        out.push(missed(None));
    }
    Ok(RecoveredLayer {
        layer,
        sign_mode: mode,
        neurons: out,
    })
}

/// Greedy matching by |cosine| on each recovered row's known entries. Returns, per
/// recovered neuron, the true index and the factor mapping it onto the true row.
fn align(neurons: &[UnsignedNeuron], truth: &Layer) -> Vec<Option<(usize, f64)>> {
    let mut pairs = Vec::new();
    for (r, n) in neurons.iter().enumerate() {
        for t in 0..truth.rows() {
            let tr: Vec<f64> = truth
                .row(t)
                .iter()
                .zip(&n.mask)
                .map(|(w, m)| if *m { *w } else { 0.0 })
                .collect();
            let rr = dot(&n.row, &n.row);
            let tt = dot(&tr, &tr);
            if rr == 0.0 || tt == 0.0 {
                continue;
            }
            let rt = dot(&n.row, &tr);
            pairs.push((rt.abs() / (rr * tt).sqrt(), r, t, rt / rr));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; neurons.len()];
    let mut used = vec![false; truth.rows()];
    for (_, r, t, scale) in pairs {
        if out[r].is_none() && !used[t] {
            out[r] = Some((t, scale));
            used[t] = true;
        }
    }
    out
}

/// Finished row of a component: the particular solution with unknown entries zero.
pub fn component_row(component: &Component) -> Vec<f64> {
    component
        .signature
        .particular
        .iter()
        .zip(&component.signature.mask)
        .map(|(v, m)| if *m { *v } else { 0.0 })
        .collect()
}
