//! Telling target-layer critical points and components apart from deeper ones.
//!
//! A critical point of a deeper neuron still yields a consistent partial signature,
//! but the hyperplane it predicts is wrong as soon as the true hyperplane bends on a
//! neuron that has not been extracted yet. The depth test walks the predicted
//! hyperplane through the cells of the extracted prefix and checks on the oracle that
//! the function still kinks where the prediction says it should.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::merge::Component;
use crate::network::{dot, Prefix};
use crate::oracle::PhasedOracle;
use crate::search::{CriticalPoint, Domain};
use crate::signature::SolutionSpace;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub probes: usize,
    /// `None` picks by layer width: 0.1 up to width 8, 0.2 from width 16 on.
    pub tau_threshold: Option<f64>,
    pub size_fraction: f64,
    pub unknown_half_rule: bool,
    /// Half-width of the probe stencil, as a fraction of the domain diagonal.
    pub probe_step: f64,
    pub seed: u64,
    /// Walks along a hyperplane may leave the domain by this many side lengths. In
    /// high dimension almost every direction hits a face of the box within a tiny
    /// distance, so walks confined to it barely move.
    pub probe_margin: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            probes: 100,
            tau_threshold: None,
            size_fraction: 0.1,
            unknown_half_rule: true,
            probe_step: 1e-4,
            seed: 0,
            probe_margin: 1.0,
        }
    }
}

impl FilterConfig {
    pub fn tau_for_width(&self, width: usize) -> f64 {
        self.tau_threshold
            .unwrap_or(if width >= 16 { 0.2 } else { 0.1 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Deeper,
    Inconclusive,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DepthTestResult {
    pub point: usize,
    pub verdict: Verdict,
    /// Probes that gave a clear answer.
    pub probes: usize,
    /// Probes whose neighbourhood was too cluttered to read.
    pub unclear: usize,
    pub failing_probe: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeOutcome {
    Critical,
    NotCritical,
    Unclear,
}

/// Is there a kink at `p` across direction `normal`?
///
/// Samples `p ± h, p ± 2h, p ± 3h`. Both sides must be linear, the slopes must differ,
/// and the two side lines must meet within `h` of `p`. Clutter (another kink inside
/// the stencil) shrinks the stencil a few times before giving up.
pub fn probe_criticality(
    oracle: &PhasedOracle,
    p: &[f64],
    normal: &[f64],
    step: f64,
    min_step: f64,
) -> Result<ProbeOutcome> {
    let norm = dot(normal, normal).sqrt();
    if norm == 0.0 {
        return Ok(ProbeOutcome::Unclear);
    }
    let u: Vec<f64> = normal.iter().map(|v| v / norm).collect();
    let mut h = step;
    while h >= min_step {
        let at = |t: f64| -> Result<f64> {
            let q: Vec<f64> = p.iter().zip(&u).map(|(a, b)| a + t * b).collect();
            oracle.scalar(&q)
        };
        let f = [at(-3.0 * h)?, at(-2.0 * h)?, at(-h)?, at(h)?, at(2.0 * h)?, at(3.0 * h)?];
        let scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let noise = 256.0 * f64::EPSILON * scale / h;
        let l2 = (f[1] - f[0]) / h;
        let l1 = (f[2] - f[1]) / h;
        let r1 = (f[4] - f[3]) / h;
        let r2 = (f[5] - f[4]) / h;
        let same = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()) + noise;
        if same(l1, l2) && same(r1, r2) {
            let (l, r) = (0.5 * (l1 + l2), 0.5 * (r1 + r2));
            let middle = (f[3] - f[2]) / (2.0 * h);
            if same(l, r) {
                // A flat neighbourhood hides every kink, on the hyperplane or not.
                if l.abs() <= noise && r.abs() <= noise {
                    return Ok(ProbeOutcome::Unclear);
                }
                if same(middle, l) {
                    return Ok(ProbeOutcome::NotCritical);
                }
            } else {
                // Where the two side lines meet.
                let t = (f[3] - f[2] - h * (l + r)) / (l - r);
                if t.abs() <= h {
                    return Ok(ProbeOutcome::Critical);
                }
            }
        }
        h /= 8.0;
    }
    Ok(ProbeOutcome::Unclear)
}

/// The hyperplane predicted by a partial signature: zero set of
/// `row · features(x) + offset` where `offset` makes it pass through the point.
struct Hyperplane<'a> {
    prefix: &'a Prefix,
    row: &'a [f64],
    known: &'a [bool],
    offset: f64,
}

impl Hyperplane<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        dot(self.row, &self.prefix.features(x)) + self.offset
    }

    fn normal(&self, x: &[f64]) -> Vec<f64> {
        self.prefix.pullback(x, self.row)
    }

    /// The prediction only holds in cells whose active neurons all have known weights.
    fn predictable(&self, x: &[f64]) -> bool {
        self.prefix
            .mask(x)
            .iter()
            .zip(self.known)
            .all(|(active, known)| !active || *known)
    }

    fn project(&self, x: &mut [f64], normal: &[f64]) {
        let nn = dot(normal, normal);
        if nn > 0.0 {
            let c = self.value(x) / nn;
            for (xi, ni) in x.iter_mut().zip(normal) {
                *xi -= c * ni;
            }
        }
    }
}

/// Walks the hyperplane predicted by `space` from `point`, probing up to
/// `config.probes` places for a kink. Any probe without a kink means the true
/// hyperplane bent somewhere the extracted prefix does not know about.
pub fn test_point_depth(
    oracle: &PhasedOracle,
    prefix: &Prefix,
    space: &SolutionSpace,
    point: &CriticalPoint,
    domain: &Domain,
    config: &FilterConfig,
) -> Result<DepthTestResult> {
    let mut result = DepthTestResult {
        point: point.id,
        verdict: Verdict::Inconclusive,
        probes: 0,
        unclear: 0,
        failing_probe: None,
    };
    if config.probes == 0 {
        return Ok(result);
    }
    let plane = Hyperplane {
        prefix,
        row: &space.particular,
        known: &space.mask,
        offset: -dot(&space.particular, &prefix.features(&point.x)),
    };
    // With a kernel only the cell of the point itself is determined.
    let may_cross = space.kernel.is_empty();
    let diag = domain.diagonal();
    let step = config.probe_step * diag;
    let region = domain.expanded(config.probe_margin);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed ^ (point.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut y = point.x.clone();
    let max_legs = 4 * config.probes;
    for _ in 0..max_legs {
        if result.probes >= config.probes {
            break;
        }
        let normal = plane.normal(&y);
        let nn = dot(&normal, &normal);
        if nn == 0.0 {
            break;
        }
        let mut v: Vec<f64> = (0..y.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = dot(&v, &normal) / nn;
        for (vi, ni) in v.iter_mut().zip(&normal) {
            *vi -= c * ni;
        }
        let vn = dot(&v, &v).sqrt();
        if vn == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vn);

        let (pre, rates) = prefix.directional(&y, &v);
        let mut t_cross = f64::INFINITY;
        for (z, r) in pre.iter().flatten().zip(rates.iter().flatten()) {
            let t = -z / r;
            if t > 1e-12 * diag && t < t_cross {
                t_cross = t;
            }
        }
        let t_exit = region.exit_time(&y, &v);
        let t_leg = t_cross.min(t_exit);
        if !(t_leg > 10.0 * step) {
            y = point.x.clone();
            continue;
        }

        // Just short of the next prefix boundary; anywhere along the leg if none is ahead.
        let reach = if t_cross < t_exit {
            0.9 * t_leg
        } else {
            rng.random_range(0.05..0.9) * t_leg
        };
        let mut p: Vec<f64> = y.iter().zip(&v).map(|(a, b)| a + reach * b).collect();
        plane.project(&mut p, &normal);
        match probe_criticality(oracle, &p, &normal, step, step * 1e-3)? {
            ProbeOutcome::Critical => result.probes += 1,
            ProbeOutcome::NotCritical => {
                result.probes += 1;
                result.verdict = Verdict::Deeper;
                result.failing_probe = Some(p);
                return Ok(result);
            }
            ProbeOutcome::Unclear => result.unclear += 1,
        }

        y = if may_cross && t_cross < t_exit {
            let mut next: Vec<f64> = y
                .iter()
                .zip(&v)
                .map(|(a, b)| a + (t_cross + 1e-9 * diag) * b)
                .collect();
            let n2 = plane.normal(&next);
            plane.project(&mut next, &n2);
            if region.contains(&next) && plane.predictable(&next) {
                next
            } else {
                point.x.clone()
            }
        } else {
            point.x.clone()
        };
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscardReason {
    /// Smaller than the size fraction of the largest component.
    Small,
    HighTau,
    /// At least half the entries unknown while some members are deep.
    SparseAndNoisy,
    /// Dropped because more than `d_i` components survived.
    Excess,
}

/// Applies the three component criteria. Sizes are compared with the largest
/// component before anything is dropped.
pub fn discard_components(
    components: Vec<Component>,
    config: &FilterConfig,
    width: usize,
) -> (Vec<Component>, Vec<(Component, DiscardReason)>) {
    let largest = components.iter().map(Component::size).max().unwrap_or(0);
    let tau_max = config.tau_for_width(width);
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for c in components {
        let reason = if (c.size() as f64) < config.size_fraction * largest as f64 {
            Some(DiscardReason::Small)
        } else if c.tau > tau_max {
            Some(DiscardReason::HighTau)
        } else if config.unknown_half_rule && c.tau > 0.0 && c.unknown_fraction() >= 0.5 {
            Some(DiscardReason::SparseAndNoisy)
        } else {
            None
        };
        match reason {
            Some(r) => dropped.push((c, r)),
            None => kept.push(c),
        }
    }
    (kept, dropped)
}

/// A neuron of the attacked layer with its sign settled: active where
/// `row · features + bias > 0`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SignedNeuron {
    pub row: Vec<f64>,
    pub bias: f64,
}

impl SignedNeuron {
    pub fn value(&self, features: &[f64]) -> f64 {
        dot(&self.row, features) + self.bias
    }
}

/// Stops counting deep-flagged members that sit on the inactive side of every trusted
/// neuron: there the candidate may be the only active neuron of its layer, and deeper
/// critical points legitimately merge with it. Updates and returns the candidate's τ.
pub fn rescue_check(
    prefix: &Prefix,
    trusted: &[SignedNeuron],
    candidate: &mut Component,
    points: &[CriticalPoint],
) -> f64 {
    if trusted.is_empty() || candidate.deep_members.is_empty() {
        return candidate.tau;
    }
    let before = candidate.deep_members.len();
    candidate.deep_members.retain(|id| {
        let Some(p) = points.iter().find(|p| p.id == *id) else {
            return true;
        };
        let features = prefix.features(&p.x);
        !trusted.iter().all(|n| n.value(&features) < 0.0)
    });
    if candidate.deep_members.len() < before {
        candidate.rescued = true;
    }
    candidate.recompute_tau();
    candidate.tau
}

/// Signs from an input where every neuron of the layer is inactive: each neuron's
/// value there must be negative. `+1` keeps a row, `-1` flips it, `None` when the value
/// is exactly zero. No queries.
pub fn zero_query_signs(
    prefix: &Prefix,
    neurons: &[(Vec<f64>, f64)],
    witness: &[f64],
) -> Vec<Option<f64>> {
    let features = prefix.features(witness);
    neurons
        .iter()
        .map(|(row, bias)| {
            let v = dot(row, &features) + bias;
            if v < 0.0 {
                Some(1.0)
            } else if v > 0.0 {
                Some(-1.0)
            } else {
                None
            }
        })
        .collect()
}
