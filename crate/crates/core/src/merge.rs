//! Clustering partial signatures into components.
//!
//! Two partial signatures of the same neuron agree (up to scale) wherever both are
//! known. Without kernels that is a proportionality test on the shared entries; with
//! kernels it becomes a small linear system asking whether the two affine spaces meet
//! after rescaling one of them.

use serde::{Deserialize, Serialize};

use crate::network::dot;
use crate::signature::{least_squares, svd, SolutionSpace};
use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    /// Per-entry tolerance, relative to the largest shared magnitude.
    pub proportional_tol: f64,
    pub min_shared: usize,
    pub allow_threeway: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            proportional_tol: 1e-5,
            min_shared: 2,
            allow_threeway: false,
        }
    }
}

/// Affine set of candidate rows: `particular + span(kernel)`, both zero off `mask`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineSignature {
    pub particular: Vec<f64>,
    pub kernel: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl From<&SolutionSpace> for AffineSignature {
    fn from(s: &SolutionSpace) -> Self {
        Self {
            particular: s.particular.clone(),
            kernel: s.kernel.clone(),
            mask: s.mask.clone(),
        }
    }
}

impl AffineSignature {
    pub fn full(values: Vec<f64>, mask: Vec<bool>) -> Self {
        Self {
            particular: values,
            kernel: Vec::new(),
            mask,
        }
    }

    pub fn kernel_dim(&self) -> usize {
        self.kernel.len()
    }

    pub fn known(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn overlap(&self, other: &AffineSignature) -> usize {
        self.mask
            .iter()
            .zip(&other.mask)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    /// Rescales so the largest-magnitude entry of the particular solution is `+1`.
    pub fn normalized(mut self) -> Self {
        let pivot = self
            .particular
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot != 0.0 {
            for v in &mut self.particular {
                *v /= pivot;
            }
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeFailure {
    /// Fewer shared equations than the consistency check needs.
    InsufficientOverlap,
    Inconsistent,
    /// A solution exists only with one side scaled to (almost) zero.
    Degenerate,
}

/// Merge of two kernel-free signatures whose shared entries are proportional.
pub fn try_merge_full(
    a: &AffineSignature,
    b: &AffineSignature,
    config: &MergeConfig,
) -> Result<AffineSignature, MergeFailure> {
    debug_assert!(a.kernel.is_empty() && b.kernel.is_empty());
    let shared: Vec<usize> = (0..a.mask.len()).filter(|&j| a.mask[j] && b.mask[j]).collect();
    if shared.len() < config.min_shared.max(2) {
        return Err(MergeFailure::InsufficientOverlap);
    }
    let va: Vec<f64> = shared.iter().map(|&j| a.particular[j]).collect();
    let vb: Vec<f64> = shared.iter().map(|&j| b.particular[j]).collect();
    let bb = dot(&vb, &vb);
    let scale_a = va.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if bb == 0.0 || scale_a == 0.0 {
        return Err(MergeFailure::Degenerate);
    }
    let lambda = dot(&va, &vb) / bb;
    if lambda.abs() * vb.iter().fold(0.0f64, |m, v| m.max(v.abs())) < 1e-6 * scale_a {
        return Err(MergeFailure::Degenerate);
    }
    let ok = va
        .iter()
        .zip(&vb)
        .all(|(x, y)| (x - lambda * y).abs() <= config.proportional_tol * scale_a);
    if !ok {
        return Err(MergeFailure::Inconsistent);
    }
    let n = a.mask.len();
    let mut values = vec![0.0; n];
    let mut mask = vec![false; n];
    for j in 0..n {
        match (a.mask[j], b.mask[j]) {
            (true, true) => values[j] = 0.5 * (a.particular[j] + lambda * b.particular[j]),
            (true, false) => values[j] = a.particular[j],
            (false, true) => values[j] = lambda * b.particular[j],
            (false, false) => continue,
        }
        mask[j] = true;
    }
    Ok(AffineSignature::full(values, mask).normalized())
}

/// Pairwise intersection; see [`intersect_many`].
pub fn intersect_spaces(
    a: &AffineSignature,
    b: &AffineSignature,
    config: &MergeConfig,
) -> Result<AffineSignature, MergeFailure> {
    intersect_many(&[a, b], config)
}

/// Intersection of several affine signature spaces, each free to be rescaled except
/// the first.
///
/// Unknowns are the merged row `w` on the union of the masks, the kernel coordinates
/// `μ` of the first space, and for every other space `j` a scale `λ_j` and kernel
/// coordinates `ν_j` (stored pre-multiplied by `λ_j` to keep the system linear):
///
/// ```text
/// w|mask_1 = L_1 + E_1 μ,    w|mask_j = λ_j L_j + E_j ν_j
/// ```
///
/// Eliminating `w` leaves `Σ|mask_j| - |union|` equations for `Σ k_j + (n - 1)`
/// unknowns. At least one spare equation is required so a consistent solution means
/// something; for two spaces this is `shared > 1 + k_1 + k_2`.
pub fn intersect_many(
    spaces: &[&AffineSignature],
    config: &MergeConfig,
) -> Result<AffineSignature, MergeFailure> {
    let n = spaces[0].mask.len();
    let union: Vec<usize> = (0..n).filter(|&j| spaces.iter().any(|s| s.mask[j])).collect();
    let mut col_of = vec![usize::MAX; n];
    for (c, &j) in union.iter().enumerate() {
        col_of[j] = c;
    }
    let equations: usize = spaces.iter().map(|s| s.known()).sum::<usize>() - union.len();
    let free: usize = spaces.iter().map(|s| s.kernel_dim()).sum::<usize>() + spaces.len() - 1;
    if equations <= free {
        return Err(MergeFailure::InsufficientOverlap);
    }

    // Column layout: w | μ | (λ_j, ν_j) for j >= 1.
    let mut offsets = Vec::with_capacity(spaces.len());
    let mut cols = union.len();
    offsets.push(cols);
    cols += spaces[0].kernel_dim();
    for s in &spaces[1..] {
        offsets.push(cols);
        cols += 1 + s.kernel_dim();
    }
    let rows: usize = spaces.iter().map(|s| s.known()).sum();
    let mut m = DMatrix::zeros(rows, cols);
    let mut rhs = DVector::zeros(rows);
    let mut r = 0;
    for (idx, s) in spaces.iter().enumerate() {
        for j in (0..n).filter(|&j| s.mask[j]) {
            m[(r, col_of[j])] = 1.0;
            let base = offsets[idx];
            if idx == 0 {
                rhs[r] = s.particular[j];
                for (q, e) in s.kernel.iter().enumerate() {
                    m[(r, base + q)] = -e[j];
                }
            } else {
                m[(r, base)] = -s.particular[j];
                for (q, e) in s.kernel.iter().enumerate() {
                    m[(r, base + 1 + q)] = -e[j];
                }
            }
            r += 1;
        }
    }

    let (sol, null, _) = least_squares(&m, &rhs, 1e-9);
    let w: Vec<f64> = (0..union.len()).map(|c| sol[c]).collect();
    let scale = w.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return Err(MergeFailure::Degenerate);
    }
    let residual = (&m * &sol - &rhs).amax();
    if residual > config.proportional_tol * scale {
        return Err(MergeFailure::Inconsistent);
    }
    for (idx, s) in spaces.iter().enumerate().skip(1) {
        let lambda = sol[offsets[idx]];
        let size = s.particular.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if lambda.abs() * size < 1e-6 * scale {
            return Err(MergeFailure::Degenerate);
        }
    }

    // Directions left free by the system, seen on the merged row.
    let mut kernel: Vec<Vec<f64>> = Vec::new();
    if !null.is_empty() {
        let block = DMatrix::from_fn(union.len(), null.len(), |c, q| null[q][c]);
        let svd = svd(block, true, false);
        let u = svd.u.unwrap();
        for (q, sv) in svd.singular_values.iter().enumerate() {
            if *sv > 1e-8 {
                let mut e = vec![0.0; n];
                for (c, &j) in union.iter().enumerate() {
                    e[j] = u[(c, q)];
                }
                kernel.push(e);
            }
        }
    }
    let mut particular = vec![0.0; n];
    for (c, &j) in union.iter().enumerate() {
        particular[j] = w[c];
    }
    for e in &kernel {
        let c = dot(&particular, e);
        for (p, ej) in particular.iter_mut().zip(e) {
            *p -= c * ej;
        }
    }
    let mut mask = vec![false; n];
    for &j in &union {
        mask[j] = true;
    }
    Ok(AffineSignature {
        particular,
        kernel,
        mask,
    }
    .normalized())
}

/// Full merge when both sides are kernel-free, intersection otherwise.
pub fn try_merge(
    a: &AffineSignature,
    b: &AffineSignature,
    config: &MergeConfig,
) -> Result<AffineSignature, MergeFailure> {
    if a.kernel.is_empty() && b.kernel.is_empty() {
        try_merge_full(a, b, config)
    } else {
        intersect_spaces(a, b, config)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Component {
    pub id: usize,
    pub layer: usize,
    pub signature: AffineSignature,
    /// Ids of member critical points.
    pub members: Vec<usize>,
    /// Members flagged as coming from a deeper layer.
    pub deep_members: Vec<usize>,
    pub deep_merges: usize,
    pub tau: f64,
    /// Some deep-flagged members were excused by the only-active-neuron check.
    pub rescued: bool,
}

impl Component {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn recompute_tau(&mut self) {
        self.deep_merges = self.deep_members.len();
        self.tau = if self.members.is_empty() {
            0.0
        } else {
            self.deep_merges as f64 / self.members.len() as f64
        };
    }

    /// Fraction of entries not yet known.
    pub fn unknown_fraction(&self) -> f64 {
        let n = self.signature.mask.len();
        (n - self.signature.known()) as f64 / n as f64
    }

    pub fn is_full(&self) -> bool {
        self.signature.kernel.is_empty() && self.signature.mask.iter().all(|m| *m)
    }
}

/// Outcome counters of a clustering run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ClusterStats {
    pub merges: usize,
    pub incomparable: usize,
    pub rejected: usize,
    pub component_merges: usize,
    pub threeway_merges: usize,
    /// Pairs of distinct components whose signatures look collinear.
    pub near_duplicates: Vec<(usize, usize)>,
}

/// Greedy clustering of solution spaces into components.
///
/// `deep[i]` marks spaces whose critical point failed the depth test. Those never seed
/// or reshape a component; they only join an existing compatible one and count
/// towards its size and deep-merge tally.
pub fn cluster(
    spaces: &[SolutionSpace],
    deep: &[bool],
    config: &MergeConfig,
) -> (Vec<Component>, ClusterStats) {
    let mut stats = ClusterStats::default();
    let layer = spaces.first().map_or(0, |s| s.layer);
    let sigs: Vec<AffineSignature> = spaces.iter().map(AffineSignature::from).collect();

    let mut order: Vec<usize> = (0..spaces.len()).filter(|&i| !deep[i]).collect();
    order.sort_by_key(|&i| (sigs[i].kernel_dim(), std::cmp::Reverse(sigs[i].known()), i));

    let mut comps: Vec<Component> = Vec::new();
    let mut next_id = 0;
    for &i in &order {
        match best_match(&comps, &sigs[i], config, &mut stats) {
            Some((c, merged)) => {
                comps[c].signature = merged;
                comps[c].members.push(spaces[i].source);
                stats.merges += 1;
            }
            None => {
                comps.push(Component {
                    id: next_id,
                    layer,
                    signature: sigs[i].clone().normalized(),
                    members: vec![spaces[i].source],
                    deep_members: Vec::new(),
                    deep_merges: 0,
                    tau: 0.0,
                    rescued: false,
                });
                next_id += 1;
            }
        }
    }

    merge_components(&mut comps, config, &mut stats);
    if config.allow_threeway {
        threeway_pass(&mut comps, config, &mut stats);
        merge_components(&mut comps, config, &mut stats);
    }

    for i in (0..spaces.len()).filter(|&i| deep[i]) {
        if let Some((c, _)) = best_match(&comps, &sigs[i], config, &mut stats) {
            comps[c].members.push(spaces[i].source);
            comps[c].deep_members.push(spaces[i].source);
        }
    }
    for c in &mut comps {
        c.recompute_tau();
    }

    for a in 0..comps.len() {
        for b in a + 1..comps.len() {
            if collinear(&comps[a].signature, &comps[b].signature, config) {
                log::warn!(
                    "components {} and {} have collinear signatures on their shared support",
                    comps[a].id,
                    comps[b].id
                );
                stats.near_duplicates.push((comps[a].id, comps[b].id));
            }
        }
    }
    (comps, stats)
}

/// Compatible component with the largest overlap; ties go to the older component.
fn best_match(
    comps: &[Component],
    sig: &AffineSignature,
    config: &MergeConfig,
    stats: &mut ClusterStats,
) -> Option<(usize, AffineSignature)> {
    let mut best: Option<(usize, usize, AffineSignature)> = None;
    for (c, comp) in comps.iter().enumerate() {
        let overlap = comp.signature.overlap(sig);
        if best.as_ref().is_some_and(|b| overlap <= b.1) {
            continue;
        }
        match try_merge(&comp.signature, sig, config) {
            Ok(merged) => best = Some((c, overlap, merged)),
            Err(MergeFailure::InsufficientOverlap) => stats.incomparable += 1,
            Err(_) => stats.rejected += 1,
        }
    }
    best.map(|(c, _, m)| (c, m))
}

fn absorb(comps: &mut Vec<Component>, keep: usize, drop: usize, merged: AffineSignature) {
    let gone = comps.remove(drop);
    let keep = if drop < keep { keep - 1 } else { keep };
    let k = &mut comps[keep];
    k.signature = merged;
    k.members.extend(gone.members);
    k.deep_members.extend(gone.deep_members);
    k.id = k.id.min(gone.id);
}

fn merge_components(comps: &mut Vec<Component>, config: &MergeConfig, stats: &mut ClusterStats) {
    loop {
        let mut changed = false;
        'outer: for a in 0..comps.len() {
            for b in a + 1..comps.len() {
                if let Ok(merged) = try_merge(&comps[a].signature, &comps[b].signature, config) {
                    absorb(comps, a, b, merged);
                    stats.component_merges += 1;
                    changed = true;
                    break 'outer;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Tries to resolve components that cannot merge pairwise by intersecting three at a time.
fn threeway_pass(comps: &mut Vec<Component>, config: &MergeConfig, stats: &mut ClusterStats) {
    loop {
        let mut found = None;
        'search: for a in 0..comps.len() {
            for b in a + 1..comps.len() {
                if comps[a].signature.overlap(&comps[b].signature) == 0 {
                    continue;
                }
                for c in b + 1..comps.len() {
                    let trio = [&comps[a].signature, &comps[b].signature, &comps[c].signature];
                    if let Ok(merged) = intersect_many(&trio, config) {
                        found = Some((a, b, c, merged));
                        break 'search;
                    }
                }
            }
        }
        let Some((a, b, c, merged)) = found else { break };
        let placeholder = comps[a].signature.clone();
        absorb(comps, a, c, placeholder);
        absorb(comps, a, b, merged);
        stats.threeway_merges += 1;
    }
}

fn collinear(a: &AffineSignature, b: &AffineSignature, config: &MergeConfig) -> bool {
    if !a.kernel.is_empty() || !b.kernel.is_empty() {
        return false;
    }
    let shared: Vec<usize> = (0..a.mask.len()).filter(|&j| a.mask[j] && b.mask[j]).collect();
    if shared.len() < 2 {
        return false;
    }
    let va: Vec<f64> = shared.iter().map(|&j| a.particular[j]).collect();
    let vb: Vec<f64> = shared.iter().map(|&j| b.particular[j]).collect();
    let cos = dot(&va, &vb) / (dot(&va, &va) * dot(&vb, &vb)).sqrt();
    (1.0 - cos.abs()) < config.proportional_tol * 1e-2
}
