//! One layer of the attack from harvest to signed rows, and the per-layer run over
//! a whole network.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::completion::{
    median_bias, recover_last_layer, resolve_signs, targeted_search, NeuronStatus, RecoveredLayer, SignMode,
    TargetedContext, UnsignedNeuron,
};
use crate::config::{AttackConfig, ExcessRule};
use crate::error::{Error, Result};
use crate::evaluation::{
    activation_tests, classify_unrecovered, compare_models, coverage, epsilon_delta, ExtractionReport, LayerMissing,
    LayerReport, TaxonomyCounts,
};
use crate::filter::{discard_components, rescue_check, test_point_depth, DiscardReason, SignedNeuron, Verdict};
use crate::merge::{cluster, AffineSignature, ClusterStats, Component};
use crate::network::{Layer, NetworkModel, Prefix};
use crate::oracle::{Oracle, OracleStats, Phase, PhasedOracle};
use crate::search::{harvest, CriticalPoint, DepthStatus, Domain};
use crate::signature::{recover_solution_space, SolutionSpace};

/// Gap between the id ranges handed to concurrent targeted searches.
const ID_STRIDE: usize = 1 << 24;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AttackStats {
    pub harvested: usize,
    pub lines_scanned: usize,
    pub harvest_exhausted: bool,
    pub spaces: usize,
    /// Points without a usable solution space, by cause.
    pub failed_spaces: BTreeMap<String, usize>,
    pub deep_points: usize,
    pub cluster: ClusterStats,
    pub components: usize,
    pub kept: usize,
    pub rescued: usize,
    pub targeted_steps: usize,
    pub targeted_points: usize,
    pub targeted_filled: usize,
    pub queries: OracleStats,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerAttack {
    pub layer: usize,
    pub recovered: RecoveredLayer,
    pub components: Vec<Component>,
    pub discarded: Vec<(Component, DiscardReason)>,
    pub stats: AttackStats,
    /// Input used for zero-query signs, if one was found.
    pub witness: Option<Vec<f64>>,
    /// Oracle evaluations collected on the way, for the last layer.
    pub stored: Vec<(Vec<f64>, Vec<f64>)>,
    #[serde(skip)]
    pub points: Vec<CriticalPoint>,
    #[serde(skip)]
    pub spaces: Vec<SolutionSpace>,
    /// Depth verdict of each entry of `spaces`.
    #[serde(skip)]
    pub deep: Vec<bool>,
}

fn failure_kind(e: &Error) -> &'static str {
    match e {
        Error::EpsilonNotConverged { .. } => "epsilon-not-converged",
        Error::DegenerateDirection => "degenerate-direction",
        Error::NoActiveInputs => "no-active-inputs",
        Error::Inconsistent { .. } => "inconsistent",
        Error::RankDeficient { .. } => "rank-deficient",
        _ => "other",
    }
}

/// Known entries of a signature whose value is pinned down: inside the mask and
/// untouched by any kernel direction.
fn pinned_mask(sig: &AffineSignature) -> Vec<bool> {
    (0..sig.mask.len())
        .map(|j| sig.mask[j] && sig.kernel.iter().all(|v| v[j].abs() <= 1e-12))
        .collect()
}

/// Attacks hidden layer `prefix.target_layer()` of the oracle's network with
/// `prefix` standing in for the layers in front of it.
///
/// `truth` is the true layer, read only by the ground-truth sign mode.
pub fn attack_layer(oracle: &Oracle, prefix: &Prefix, truth: Option<&Layer>, config: &AttackConfig) -> Result<LayerAttack> {
    let start = Instant::now();
    let before = oracle.stats();
    let layer = prefix.target_layer();
    let widths = oracle.widths();
    if layer + 1 >= widths.len() {
        return Err(Error::LayerIndex {
            index: layer,
            max: widths.len() - 2,
        });
    }
    if prefix.input_dim() != oracle.input_dim() {
        return Err(Error::Dimension {
            expected: oracle.input_dim(),
            got: prefix.input_dim(),
        });
    }
    let width = widths[layer];
    let domain = config.domain(oracle.input_dim());
    let diag = domain.diagonal();
    let mut stats = AttackStats::default();

    let floor = config.attack.prefix_distance * diag;
    let h = harvest(
        &oracle.phase(Phase::CriticalSearch),
        &domain,
        &config.search,
        &config.harvest,
        |p| prefix.boundary_distance(&p.x) > floor,
    )?;
    stats.harvested = h.points.len();
    stats.lines_scanned = h.lines_scanned;
    stats.harvest_exhausted = h.exhausted;
    if h.exhausted {
        log::warn!("layer {layer}: line budget ran out after {} critical points", h.points.len());
    }
    let mut points = h.points;
    let stored: Vec<(Vec<f64>, Vec<f64>)> = points
        .iter()
        .take(config.attack.stored_pairs)
        .map(|p| (p.x.clone(), p.output.clone()))
        .collect();

    let sig_oracle = oracle.phase(Phase::Signature);
    let eps = config.signature.eps_initial * diag;
    let results: Vec<Result<SolutionSpace>> = points
        .par_iter()
        .map(|p| recover_solution_space(&sig_oracle, prefix, p, eps, &config.signature))
        .collect();
    let mut spaces = Vec::new();
    for r in results {
        match r {
            Ok(s) => spaces.push(s),
            Err(e) => *stats.failed_spaces.entry(failure_kind(&e).to_string()).or_default() += 1,
        }
    }
    stats.spaces = spaces.len();
    let index: HashMap<usize, usize> = points.iter().enumerate().map(|(i, p)| (p.id, i)).collect();

    let deep: Vec<bool> = if config.attack.depth_test {
        let filt = oracle.phase(Phase::Filtering);
        spaces
            .par_iter()
            .map(|s| {
                let p = &points[index[&s.source]];
                test_point_depth(&filt, prefix, s, p, &domain, &config.filter).map(|r| r.verdict == Verdict::Deeper)
            })
            .collect::<Result<_>>()?
    } else {
        vec![false; spaces.len()]
    };
    for (s, d) in spaces.iter().zip(&deep) {
        let status = if *d { DepthStatus::Deeper } else { DepthStatus::Candidate };
        points[index[&s.source]].set_depth(status);
    }
    stats.deep_points = deep.iter().filter(|d| **d).count();

    let (clustered, cstats) = cluster(&spaces, &deep, &config.merge);
    stats.cluster = cstats;
    stats.components = clustered.len();
    for c in &clustered {
        for m in &c.members {
            points[index[m]].component = Some(c.id);
        }
    }
    log::info!(
        "layer {layer}: {} points, {} spaces, {} deep, {} components",
        points.len(),
        spaces.len(),
        stats.deep_points,
        clustered.len()
    );

    let (kept, _) = discard_components(clustered.clone(), &config.filter, width);
    let ctx = TargetedContext {
        prefix,
        domain: &domain,
        search: &config.search,
        signature: &config.signature,
        merge: &config.merge,
        config: &config.targeted,
    };
    let mut finished = Finished::default();
    finish(oracle, &ctx, kept, &points, &index, points.len(), &mut finished)?;

    // Settle the signs of the trusted neurons so deep members of noisy components
    // can be checked against them.
    let mut witness = None;
    if config.signs.mode == SignMode::ZeroQuery {
        witness = find_flat_witness(&oracle.phase(Phase::Filtering), &points, &domain, config.attack.witness_candidates)?;
    }
    let trusted = trusted_neurons(config.signs.mode, layer, width, &finished, truth, prefix, witness.as_deref())?;

    let mut rescored = clustered;
    let mut rescued_ids = Vec::new();
    for c in rescored.iter_mut() {
        if c.tau > 0.0 && !finished.has(c.id) {
            let before = c.tau;
            rescue_check(prefix, &trusted, c, &points);
            if c.tau < before {
                log::info!("layer {layer}: component {} rescued, tau {before:.3} -> {:.3}", c.id, c.tau);
                rescued_ids.push(c.id);
            }
        }
    }
    let (kept, mut discarded) = discard_components(rescored, &config.filter, width);
    let late: Vec<Component> = kept.into_iter().filter(|c| !finished.has(c.id)).collect();
    stats.rescued = rescued_ids.len();
    let base = points.len() + (finished.components.len() + 1) * ID_STRIDE;
    finish(oracle, &ctx, late, &points, &index, base, &mut finished)?;

    stats.kept = finished.components.len();
    if finished.components.len() > width && config.attack.on_excess != ExcessRule::Fail {
        log::warn!(
            "layer {layer}: {} survivors for {width} neurons, keeping by {:?}",
            finished.components.len(),
            config.attack.on_excess
        );
        let mut order: Vec<usize> = (0..finished.components.len()).collect();
        let comps = &finished.components;
        match config.attack.on_excess {
            ExcessRule::Largest => order.sort_by_key(|&i| std::cmp::Reverse(comps[i].size())),
            _ => order.sort_by(|&a, &b| {
                comps[a]
                    .tau
                    .total_cmp(&comps[b].tau)
                    .then(comps[b].size().cmp(&comps[a].size()))
            }),
        }
        let mut dropped = order.split_off(width);
        // Highest index first so removals do not shift the rest.
        dropped.sort_unstable_by(|a, b| b.cmp(a));
        for i in dropped {
            let c = finished.components.remove(i);
            finished.neurons.remove(i);
            discarded.push((c, DiscardReason::Excess));
        }
    }
    if finished.components.len() > width {
        return Err(Error::Extraction(format!(
            "layer {layer}: {} components survived filtering but the layer has {width} neurons (sizes {:?}, tau {:?})",
            finished.components.len(),
            finished.components.iter().map(Component::size).collect::<Vec<_>>(),
            finished.components.iter().map(|c| c.tau).collect::<Vec<_>>(),
        )));
    }

    stats.targeted_steps = finished.steps;
    stats.targeted_points = finished.new_points.len();
    stats.targeted_filled = finished.filled;
    let recovered = resolve_signs(
        config.signs.mode,
        layer,
        width,
        finished.neurons.clone(),
        truth,
        prefix,
        witness.as_deref(),
    )?;
    points.extend(finished.new_points);
    spaces.extend(finished.new_spaces);
    let deep_all: Vec<bool> = deep.iter().copied().chain(std::iter::repeat(false)).take(spaces.len()).collect();

    stats.queries = oracle.stats().since(&before);
    stats.wall_seconds = start.elapsed().as_secs_f64();
    log::info!(
        "layer {layer}: kept {}, recovered {}, {} queries in {:.1}s",
        stats.kept,
        recovered.count(NeuronStatus::Recovered),
        stats.queries.total,
        stats.wall_seconds
    );
    Ok(LayerAttack {
        layer,
        recovered,
        components: finished.components,
        discarded,
        stats,
        witness,
        stored,
        points,
        spaces,
        deep: deep_all,
    })
}

#[derive(Default)]
struct Finished {
    components: Vec<Component>,
    neurons: Vec<UnsignedNeuron>,
    new_points: Vec<CriticalPoint>,
    new_spaces: Vec<SolutionSpace>,
    steps: usize,
    filled: usize,
}

impl Finished {
    fn has(&self, id: usize) -> bool {
        self.components.iter().any(|c| c.id == id)
    }
}

/// Targeted search and bias for each component, concurrently.
fn finish(
    oracle: &Oracle,
    ctx: &TargetedContext,
    comps: Vec<Component>,
    points: &[CriticalPoint],
    index: &HashMap<usize, usize>,
    id_base: usize,
    out: &mut Finished,
) -> Result<()> {
    let targeted = oracle.phase(Phase::Targeted);
    let done: Vec<(Component, UnsignedNeuron, Vec<CriticalPoint>, Vec<SolutionSpace>, usize, usize)> = comps
        .into_par_iter()
        .enumerate()
        .map(|(n, mut c)| {
            let members: Vec<&CriticalPoint> = c
                .members
                .iter()
                .filter(|m| !c.deep_members.contains(m))
                .filter_map(|m| index.get(m).map(|&i| &points[i]))
                .collect();
            let mut next_id = id_base + (n + 1) * ID_STRIDE;
            let outcome = if c.is_full() {
                Default::default()
            } else {
                targeted_search(&targeted, ctx, &mut c, &members, &mut next_id)?
            };
            let mask = pinned_mask(&c.signature);
            let row: Vec<f64> = c
                .signature
                .particular
                .iter()
                .zip(&mask)
                .map(|(v, m)| if *m { *v } else { 0.0 })
                .collect();
            // Rescued deep members share the signature but sit on a deeper neuron's
            // hyperplane, so they say nothing about the bias.
            let mut all: Vec<&CriticalPoint> = members
                .iter()
                .copied()
                .filter(|p| p.depth != DepthStatus::Deeper)
                .collect();
            all.extend(outcome.points.iter());
            if all.is_empty() {
                all = members.clone();
            }
            // Only points where every unknown entry reads an inactive neuron see the
            // full hyperplane equation.
            let clean: Vec<&CriticalPoint> = all
                .iter()
                .copied()
                .filter(|p| {
                    let f = ctx.prefix.features(&p.x);
                    f.iter().zip(&mask).all(|(v, m)| *m || *v == 0.0)
                })
                .collect();
            let used = if clean.is_empty() { &all } else { &clean };
            let bias = median_bias(&row, used, ctx.prefix).unwrap_or(0.0);
            let neuron = UnsignedNeuron {
                row,
                bias,
                mask,
                component: c.id,
            };
            let filled = outcome.filled.len();
            Ok((c, neuron, outcome.points, outcome.spaces, outcome.steps, filled))
        })
        .collect::<Result<_>>()?;
    for (c, n, p, s, steps, filled) in done {
        out.components.push(c);
        out.neurons.push(n);
        out.new_points.extend(p);
        out.new_spaces.extend(s);
        out.steps += steps;
        out.filled += filled;
    }
    Ok(())
}

/// Signed versions of the finished, fully known neurons, under the run's sign mode.
fn trusted_neurons(
    mode: SignMode,
    layer: usize,
    width: usize,
    finished: &Finished,
    truth: Option<&Layer>,
    prefix: &Prefix,
    witness: Option<&[f64]>,
) -> Result<Vec<SignedNeuron>> {
    let full: Vec<UnsignedNeuron> = finished
        .neurons
        .iter()
        .zip(&finished.components)
        .filter(|(_, c)| c.is_full())
        .map(|(n, _)| n.clone())
        .collect();
    if full.is_empty() || mode == SignMode::None || (mode == SignMode::ZeroQuery && witness.is_none()) {
        return Ok(Vec::new());
    }
    let signed = resolve_signs(mode, layer, width, full, truth, prefix, witness)?;
    Ok(signed
        .neurons
        .into_iter()
        .filter(|n| n.status == NeuronStatus::Recovered && n.sign.is_some())
        .map(|n| SignedNeuron { row: n.row, bias: n.bias })
        .collect())
}

/// Looks next to deep-flagged critical points for an input where the function is
/// locally constant while it is not on the other side of the kink. There every
/// neuron of the attacked layer is taken to be off.
pub fn find_flat_witness(
    oracle: &PhasedOracle,
    points: &[CriticalPoint],
    domain: &Domain,
    budget: usize,
) -> Result<Option<Vec<f64>>> {
    let diag = domain.diagonal();
    let offset = 1e-5 * diag;
    let h = 1e-7 * diag;
    let mut rng = ChaCha20Rng::seed_from_u64(0x5157);
    let dirs: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let v: Vec<f64> = (0..domain.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / n).collect()
        })
        .collect();
    let slopes = |y: &[f64]| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for v in &dirs {
            let plus: Vec<f64> = y.iter().zip(v).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = y.iter().zip(v).map(|(a, b)| a - h * b).collect();
            worst = worst.max(((oracle.scalar(&plus)? - oracle.scalar(&minus)?) / (2.0 * h)).abs());
        }
        Ok(worst)
    };
    for p in points.iter().filter(|p| p.depth == DepthStatus::Deeper).take(budget) {
        let u: Vec<f64> = p.bracket.1.iter().zip(&p.bracket.0).map(|(a, b)| a - b).collect();
        let n = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n == 0.0 {
            continue;
        }
        let a: Vec<f64> = p.x.iter().zip(&u).map(|(x, d)| x - offset * d / n).collect();
        let b: Vec<f64> = p.x.iter().zip(&u).map(|(x, d)| x + offset * d / n).collect();
        if !domain.contains(&a) || !domain.contains(&b) {
            continue;
        }
        let (sa, sb) = (slopes(&a)?, slopes(&b)?);
        if sa <= 1e-6 * sb {
            return Ok(Some(a));
        }
        if sb <= 1e-6 * sa {
            return Ok(Some(b));
        }
    }
    Ok(None)
}

/// The final linear layer from stored evaluations; no queries.
pub fn attack_output_layer(hidden: &Prefix, stored: &[(Vec<f64>, Vec<f64>)]) -> Result<Layer> {
    recover_last_layer(stored, hidden)
}

/// Result of attacking every layer of a known target, each with the true prefix.
pub struct PerLayerRun {
    pub attacks: Vec<LayerAttack>,
    pub output: Layer,
    pub output_seconds: f64,
    pub extracted: NetworkModel,
}

/// Attacks layers `1..=depth` one at a time, each behind the true prefix, then fits
/// the output layer from the stored evaluations and assembles the extracted model.
pub fn attack_per_layer(oracle: &Oracle, truth: &NetworkModel, config: &AttackConfig) -> Result<PerLayerRun> {
    let mut attacks = Vec::with_capacity(truth.depth());
    for i in 1..=truth.depth() {
        let prefix = truth.prefix(i - 1)?;
        attacks.push(attack_layer(oracle, &prefix, Some(truth.layer(i)), config)?);
    }
    let stored: Vec<(Vec<f64>, Vec<f64>)> = attacks.iter().flat_map(|a| a.stored.iter().cloned()).collect();
    let t = Instant::now();
    let output = attack_output_layer(&truth.prefix(truth.depth())?, &stored)?;
    let output_seconds = t.elapsed().as_secs_f64();
    let mut layers: Vec<Layer> = attacks.iter().map(|a| a.recovered.to_layer()).collect::<Result<_>>()?;
    layers.push(output.clone());
    let extracted = NetworkModel::new(layers)?;
    Ok(PerLayerRun {
        attacks,
        output,
        output_seconds,
        extracted,
    })
}

/// Cost of attacking one layer, for the report.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LayerCost {
    pub queries: u64,
    pub wall_seconds: f64,
}

/// Full comparison of an extracted model with the target.
pub fn build_report(
    truth: &NetworkModel,
    extracted: &NetworkModel,
    costs: &[Option<LayerCost>],
    config: &AttackConfig,
) -> Result<ExtractionReport> {
    let domain = config.domain(truth.input_dim());
    let ev = &config.eval;
    let cmp = compare_models(truth, extracted, ev.weight_tolerance)?;
    let missing: Vec<LayerMissing> = cmp.iter().map(|c| c.missing.clone()).collect();
    let cov = coverage(truth, &domain, &missing, ev.coverage_samples, ev.seed);
    let stats = activation_tests(truth, &domain, ev.activation_samples, ev.seed.wrapping_add(1));
    let depth = truth.depth();
    let mut weights = Vec::new();
    for c in cmp.iter().filter(|c| c.layer <= depth) {
        let inputs = truth.layer(c.layer).cols();
        weights.extend(c.missing.all_weights(inputs).into_iter().map(|(k, j)| (c.layer, k, j)));
    }
    let entries = classify_unrecovered(&weights, &stats, ev.zero_rule());
    let ed = epsilon_delta(truth, extracted, &domain, &missing, ev.delta_samples, ev.epsilon, ev.seed.wrapping_add(2))?;
    let layers = cmp
        .iter()
        .map(|c| {
            let cost = costs.get(c.layer - 1).copied().flatten().unwrap_or_default();
            LayerReport {
                layer: c.layer,
                weight_recovery: c.recovery_rate(),
                coverage: cov.layer(c.layer).unwrap_or(1.0),
                queries: cost.queries,
                queries_log2: if cost.queries == 0 { 0.0 } else { (cost.queries as f64).log2() },
                wall_seconds: cost.wall_seconds,
                missed_neurons: c.missing.neurons.len(),
                missing_weights: c.total_weights - c.recovered_weights,
                max_weight_error: c.max_weight_error,
            }
        })
        .collect();
    let mut settings = config.entries();
    settings.push(("eval.sign_mode_note".into(), sign_note(config.signs.mode).into()));
    Ok(ExtractionReport {
        architecture: truth.architecture(),
        layers,
        model_coverage: cov.model,
        epsilon_delta: Some(ed),
        taxonomy: TaxonomyCounts::from_entries(&entries),
        taxonomy_entries: entries,
        settings,
    })
}

fn sign_note(mode: SignMode) -> &'static str {
    match mode {
        SignMode::GroundTruth => "signs from ground truth (evaluation only, not an attack result)",
        SignMode::ZeroQuery => "signs from a flat-region witness",
        SignMode::None => "signs unresolved",
    }
}
