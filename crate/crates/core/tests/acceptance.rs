//! Acceptance checks A1-A7. Runs as a plain binary (no libtest harness) so that every
//! criterion prints its own PASS/FAIL line in order, whether it passes or not.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use relu_extract::completion::NeuronStatus;
use relu_extract::config::{AttackConfig, ExcessRule};
use relu_extract::evaluation::{compare_models, owner, ExtractionReport};
use relu_extract::filter::zero_query_signs;
use relu_extract::geometry::{enumerate_cells_2d, Slice};
use relu_extract::merge::{cluster, try_merge, AffineSignature, Component, MergeConfig};
use relu_extract::network::{example_network, generate_random, Layer, NetworkModel, Prefix, RandomInit};
use relu_extract::oracle::{Oracle, Phase};
use relu_extract::pipeline::{attack_layer, attack_output_layer, build_report, find_flat_witness, LayerAttack, LayerCost};
use relu_extract::search::{harvest, Domain, HarvestConfig};
use relu_extract::signature::second_difference;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn report(name: &str, title: &str, started: Instant, limit_seconds: f64, v: Verdict) -> bool {
    let secs = started.elapsed().as_secs_f64();
    let in_time = secs <= limit_seconds;
    let pass = v.pass && in_time;
    println!(
        "{name} {} {title}: {}; {secs:.1}s (limit {limit_seconds:.0}s{})",
        if pass { "PASS" } else { "FAIL" },
        v.detail,
        if in_time { "" } else { ", exceeded" }
    );
    pass
}

fn unit_vector(dim: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pre-activations of hidden layer `i` at `x` and their gradients, by a straight-line
/// pass over the weights that shares no code with the library's local maps.
fn layer_gradients(net: &NetworkModel, x: &[f64], i: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d0 = x.len();
    let mut h = x.to_vec();
    // Rows of d h / d x, starting from the identity.
    let mut jac: Vec<Vec<f64>> = (0..d0)
        .map(|r| (0..d0).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();
    for l in 1..=i {
        let layer = net.layer(l);
        let mut z = Vec::with_capacity(layer.rows());
        let mut g = Vec::with_capacity(layer.rows());
        for k in 0..layer.rows() {
            let w = layer.row(k);
            z.push(dot(w, &h) + layer.bias()[k]);
            let mut row = vec![0.0; d0];
            for (j, wj) in w.iter().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v += wj * jac[j][c];
                }
            }
            g.push(row);
        }
        if l == i {
            return (z, g);
        }
        h = z.iter().map(|v| v.max(0.0)).collect();
        jac = g
            .into_iter()
            .zip(&z)
            .map(|(row, zk)| if *zk > 0.0 { row } else { vec![0.0; d0] })
            .collect();
    }
    unreachable!()
}

/// Scales a vector so its largest-magnitude entry is 1.
fn max_normalized(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
    v.iter().map(|x| x / m).collect()
}

fn max_entry_error(recovered: &[f64], truth: &[f64]) -> f64 {
    let a = max_normalized(recovered);
    let b = max_normalized(truth);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn a1() -> Verdict {
    let net = generate_random(&[20, 8, 8, 8, 1], 1, &RandomInit::default()).unwrap();
    let oracle = Oracle::new(net.clone());
    let domain = Domain::unit(20);
    let config = AttackConfig::default();
    let found = harvest(
        &oracle.phase(Phase::CriticalSearch),
        &domain,
        &config.search,
        &HarvestConfig {
            count: 100,
            ..HarvestConfig::default()
        },
        |_| true,
    )
    .unwrap();
    let probe = oracle.phase(Phase::Signature);
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut per_layer = BTreeMap::new();
    for p in &found.points {
        let (i, k) = owner(&net, &p.x);
        *per_layer.entry(i).or_insert(0usize) += 1;
        // Put the point exactly on its hyperplane so the stencil is symmetric about it.
        let mut x = p.x.clone();
        for _ in 0..3 {
            let (z, g) = layer_gradients(&net, &x, i);
            let gg = dot(&g[k], &g[k]);
            for (xj, gj) in x.iter_mut().zip(&g[k]) {
                *xj -= z[k] * gj / gg;
            }
        }
        let (_, g) = layer_gradients(&net, &x, i);
        let mut measured = Vec::new();
        let mut predicted = Vec::new();
        for _ in 0..20 {
            let dir = unit_vector(20, &mut rng);
            measured.push(second_difference(&probe, &x, &dir, eps).unwrap()[0].abs());
            predicted.push(dot(&g[k], &dir).abs());
        }
        let c = dot(&measured, &predicted) / dot(&predicted, &predicted);
        let scale = measured.iter().copied().fold(0.0, f64::max);
        let err = measured
            .iter()
            .zip(&predicted)
            .map(|(m, q)| (m - c * q).abs() / scale)
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    verdict(
        found.points.len() == 100 && worst <= 1e-6,
        format!(
            "{} points (per layer {:?}) x 20 directions, worst relative error {worst:.2e} (tol 1e-6)",
            found.points.len(),
            per_layer
        ),
    )
}

fn a2() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for d0 in [20usize, 784] {
        for width in [8usize, 16] {
            let widths = [d0, width, width, width, 1];
            let net = generate_random(&widths, 1, &RandomInit::default()).unwrap();
            let oracle = Oracle::new(net.clone());
            let mut config = AttackConfig::default();
            config.harvest.count = 500;
            let a = attack_layer(&oracle, &Prefix::empty(d0), Some(net.layer(1)), &config).unwrap();
            let harvested = a.stats.harvested;
            let truth = net.layer(1);
            // Every space from a first-layer point, by neuron.
            let mut per_neuron: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
            let mut with_points = BTreeSet::new();
            for p in a.points.iter().filter(|p| p.id < harvested) {
                let (i, k) = owner(&net, &p.x);
                if i == 1 {
                    with_points.insert(k);
                }
            }
            for s in a.spaces.iter().filter(|s| s.source < harvested) {
                let p = a.points.iter().find(|p| p.id == s.source).unwrap();
                let (i, k) = owner(&net, &p.x);
                if i != 1 {
                    continue;
                }
                let e = per_neuron.entry(k).or_insert((0, 0.0));
                e.0 += 1;
                e.1 = e.1.max(max_entry_error(&s.particular, truth.row(k)));
            }
            let neuron_worst = per_neuron.values().map(|v| v.1).fold(0.0, f64::max);
            let covered = with_points.iter().all(|k| per_neuron.contains_key(k));
            // The assembled layer, for the neurons the pipeline kept.
            let mut kept_worst: f64 = 0.0;
            let mut kept = 0;
            for (k, n) in a.recovered.neurons.iter().enumerate() {
                if n.status == NeuronStatus::Recovered {
                    kept += 1;
                    kept_worst = kept_worst.max(max_entry_error(&n.row, truth.row(n.truth_index.unwrap_or(k))));
                }
            }
            let ok = covered && neuron_worst <= 1e-6 && kept_worst <= 1e-6;
            pass &= ok;
            parts.push(format!(
                "{d0}-{width}: {}/{width} neurons with points, all signed spaces {} worst {neuron_worst:.1e}, {kept} kept worst {kept_worst:.1e}",
                with_points.len(),
                if covered { "present" } else { "MISSING" },
            ));
        }
    }
    verdict(pass, parts.join(" | "))
}

fn orthonormal_on(mask: &[usize], n: usize, count: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    while out.len() < count {
        let mut v = vec![0.0; n];
        for &j in mask {
            v[j] = StandardNormal.sample(rng);
        }
        for e in &out {
            let c = dot(&v, e);
            for (a, b) in v.iter_mut().zip(e) {
                *a -= c * b;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}

/// Solution space of `row` seen on `mask` with `kernel_dim` unresolved directions:
/// a random scaling of the row plus a random kernel combination.
fn constructed_space(row: &[f64], mask: &[usize], kernel_dim: usize, rng: &mut ChaCha20Rng) -> AffineSignature {
    let n = row.len();
    let kernel = orthonormal_on(mask, n, kernel_dim, rng);
    let scale = rng.random_range(0.5..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut particular = vec![0.0; n];
    let mut flags = vec![false; n];
    for &j in mask {
        particular[j] = scale * row[j];
        flags[j] = true;
    }
    for e in &kernel {
        let mu: f64 = StandardNormal.sample(rng);
        for (p, ej) in particular.iter_mut().zip(e) {
            *p += mu * ej;
        }
    }
    AffineSignature {
        particular,
        kernel,
        mask: flags,
    }
}

struct PairShape {
    a: Vec<usize>,
    b: Vec<usize>,
    k: usize,
    r: usize,
    shared: usize,
}

fn pair_shape(n: usize, rng: &mut ChaCha20Rng) -> PairShape {
    let (mut k, mut r) = (rng.random_range(0..=3usize), rng.random_range(1..=3usize));
    if rng.random::<bool>() {
        std::mem::swap(&mut k, &mut r);
    }
    let shared = rng.random_range(1..=12usize);
    let only_a = rng.random_range(0..=5usize).max((k + 1).saturating_sub(shared));
    let only_b = rng.random_range(0..=5usize).max((r + 1).saturating_sub(shared));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let a = idx[..shared + only_a].to_vec();
    let mut b = idx[..shared].to_vec();
    b.extend_from_slice(&idx[shared + only_a..shared + only_a + only_b]);
    PairShape { a, b, k, r, shared }
}

fn a3() -> Verdict {
    let n = 24;
    let config = MergeConfig::default();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let row = |rng: &mut ChaCha20Rng| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };

    let (mut eligible, mut succeeded, mut refused_below) = (0, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let w = row(&mut rng);
        let s = pair_shape(n, &mut rng);
        let a = constructed_space(&w, &s.a, s.k, &mut rng);
        let b = constructed_space(&w, &s.b, s.r, &mut rng);
        let merged = try_merge(&a, &b, &config);
        if s.shared > 1 + s.k + s.r {
            eligible += 1;
            if let Ok(m) = merged {
                let union: Vec<usize> = (0..n).filter(|&j| a.mask[j] || b.mask[j]).collect();
                let got: Vec<f64> = union.iter().map(|&j| m.particular[j]).collect();
                let want: Vec<f64> = union.iter().map(|&j| w[j]).collect();
                let same_mask = (0..n).all(|j| m.mask[j] == (a.mask[j] || b.mask[j]));
                let err = max_entry_error(&got, &want);
                worst = worst.max(err);
                if same_mask && m.kernel.is_empty() && err <= 1e-6 {
                    succeeded += 1;
                }
            }
        } else if merged.is_err() {
            refused_below += 1;
        }
    }

    let (mut cross, mut rejected) = (0, 0);
    while cross < 1000 {
        let s = pair_shape(n, &mut rng);
        if s.shared <= 1 + s.k + s.r {
            continue;
        }
        let a = constructed_space(&row(&mut rng), &s.a, s.k, &mut rng);
        let b = constructed_space(&row(&mut rng), &s.b, s.r, &mut rng);
        cross += 1;
        if try_merge(&a, &b, &config).is_err() {
            rejected += 1;
        }
    }
    let rate = rejected as f64 / cross as f64;
    verdict(
        succeeded == eligible && rate >= 0.995,
        format!(
            "same neuron: {succeeded}/{eligible} pairs with shared > 1+k+r recovered (worst {worst:.1e}), {refused_below}/{} others refused; cross neuron: {rejected}/{cross} rejected ({:.2}%)",
            1000 - eligible,
            100.0 * rate
        ),
    )
}

/// Layer of the neuron owning most of a component's harvested members.
fn majority_owner(c: &Component, owners: &BTreeMap<usize, (usize, usize)>) -> (usize, usize) {
    let mut count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for m in &c.members {
        if let Some(o) = owners.get(m) {
            *count.entry(*o).or_default() += 1;
        }
    }
    count.into_iter().max_by_key(|(o, n)| (*n, std::cmp::Reverse(*o))).map_or((0, 0), |(o, _)| o)
}

fn deep_target() -> NetworkModel {
    let mut widths = vec![784];
    widths.extend([8; 8]);
    widths.push(1);
    generate_random(&widths, 7, &RandomInit::default()).unwrap()
}

fn a4(net: &NetworkModel) -> Verdict {
    let layer = 4;
    let oracle = Oracle::new(net.clone());
    let config = AttackConfig::default();
    let prefix = net.prefix(layer - 1).unwrap();
    let a = match attack_layer(&oracle, &prefix, Some(net.layer(layer)), &config) {
        Ok(a) => a,
        Err(e) => return verdict(false, format!("attack aborted: {e}")),
    };
    let harvested = a.stats.harvested;
    let owners: BTreeMap<usize, (usize, usize)> = a
        .points
        .iter()
        .filter(|p| p.id < harvested)
        .map(|p| (p.id, owner(net, &p.x)))
        .collect();

    // The unfiltered selection: cluster every space with no depth flags, keep the
    // largest d_i.
    let spaces: Vec<_> = a.spaces.iter().filter(|s| s.source < harvested).cloned().collect();
    let (mut plain, _) = cluster(&spaces, &vec![false; spaces.len()], &config.merge);
    plain.sort_by_key(|c| std::cmp::Reverse(c.size()));
    let top: Vec<(usize, (usize, usize))> = plain
        .iter()
        .take(8)
        .map(|c| (c.size(), majority_owner(c, &owners)))
        .collect();
    let deeper_in_top = top.iter().filter(|(_, o)| o.0 != layer).count();
    let largest_deeper = plain
        .iter()
        .map(|c| (c.size(), majority_owner(c, &owners)))
        .find(|(_, o)| o.0 != layer);

    let kept: Vec<(usize, usize)> = a.components.iter().map(|c| majority_owner(c, &owners)).collect();
    let off_layer = kept.iter().filter(|o| o.0 != layer).count();
    let mut cps: BTreeMap<usize, usize> = BTreeMap::new();
    for o in owners.values().filter(|o| o.0 == layer) {
        *cps.entry(o.1).or_default() += 1;
    }
    let represented: BTreeSet<usize> = kept.iter().filter(|o| o.0 == layer).map(|o| o.1).collect();
    let missing: Vec<usize> = cps
        .iter()
        .filter(|(k, n)| **n >= 3 && !represented.contains(*k))
        .map(|(k, _)| *k)
        .collect();
    verdict(
        deeper_in_top >= 1 && off_layer == 0 && missing.is_empty(),
        format!(
            "unfiltered top 8 (size, owner) {top:?} has {deeper_in_top} deeper (largest deeper component {largest_deeper:?}); filtered kept {} with {off_layer} off-layer; target points per neuron {cps:?}, unrepresented with >= 3: {missing:?}",
            kept.len()
        ),
    )
}

struct DeepRun {
    attacks: Vec<Option<LayerAttack>>,
    aborted: Vec<(usize, String)>,
    extracted: NetworkModel,
    report: ExtractionReport,
    output_queries: u64,
}

fn a5(net: &NetworkModel, oracle: &Oracle, config: &AttackConfig) -> (Verdict, DeepRun) {
    let depth = net.depth();
    let mut attacks = Vec::new();
    let mut aborted = Vec::new();
    let mut layers = Vec::new();
    let mut costs = Vec::new();
    for i in 1..=depth {
        let prefix = net.prefix(i - 1).unwrap();
        match attack_layer(oracle, &prefix, Some(net.layer(i)), config) {
            Ok(a) => {
                layers.push(a.recovered.to_layer().unwrap());
                costs.push(Some(LayerCost {
                    queries: a.stats.queries.total,
                    wall_seconds: a.stats.wall_seconds,
                }));
                attacks.push(Some(a));
            }
            Err(e) => {
                // The layer counts as entirely missing; the others still run.
                aborted.push((i, e.to_string()));
                layers.push(Layer::zeros(net.layer(i).rows(), net.layer(i).cols()));
                costs.push(None);
                attacks.push(None);
            }
        }
    }
    let stored: Vec<(Vec<f64>, Vec<f64>)> = attacks.iter().flatten().flat_map(|a| a.stored.iter().cloned()).collect();
    let before = oracle.total_queries();
    let output = attack_output_layer(&net.prefix(depth).unwrap(), &stored).unwrap();
    let output_queries = oracle.total_queries() - before;
    layers.push(output);
    let extracted = NetworkModel::new(layers).unwrap();
    let report = build_report(net, &extracted, &costs, config).unwrap();

    let hidden: Vec<_> = report.layers.iter().filter(|l| l.layer <= depth).collect();
    let rates: Vec<String> = report
        .layers
        .iter()
        .map(|l| format!("{}:{:.2}%", l.layer, 100.0 * l.weight_recovery))
        .collect();
    let delta = report.epsilon_delta.as_ref().map_or(f64::INFINITY, |d| d.delta);
    let pass = aborted.is_empty()
        && hidden.iter().all(|l| l.weight_recovery >= 0.90)
        && report.model_coverage >= 0.70
        && delta <= 1e-5;
    let mut detail = format!(
        "recovery {}; model coverage {:.2}%; delta {delta:.1e} at eps 0.05 over {} recovered-space samples",
        rates.join(" "),
        100.0 * report.model_coverage,
        report.epsilon_delta.as_ref().map_or(0, |d| d.recovered),
    );
    for (i, e) in &aborted {
        detail.push_str(&format!("; layer {i} aborted: {e}"));
    }
    (
        verdict(pass, detail),
        DeepRun {
            attacks,
            aborted,
            extracted,
            report,
            output_queries,
        },
    )
}

/// The A5 metrics with aborted layers redone under the lowest-τ excess rule. Printed
/// for information; it does not change any verdict.
fn excess_variant(net: &NetworkModel, oracle: &Oracle, config: &AttackConfig, run: &DeepRun) -> String {
    let mut variant = config.clone();
    variant.attack.on_excess = ExcessRule::Cleanest;
    let depth = net.depth();
    let mut layers = Vec::new();
    let mut stored = Vec::new();
    for (idx, a) in run.attacks.iter().enumerate() {
        let i = idx + 1;
        let redone;
        let a = match a {
            Some(a) => a,
            None => match attack_layer(oracle, &net.prefix(i - 1).unwrap(), Some(net.layer(i)), &variant) {
                Ok(a) => {
                    redone = a;
                    &redone
                }
                Err(e) => return format!("layer {i} fails under the lowest-tau rule too: {e}"),
            },
        };
        layers.push(a.recovered.to_layer().unwrap());
        stored.extend(a.stored.iter().cloned());
    }
    layers.push(attack_output_layer(&net.prefix(depth).unwrap(), &stored).unwrap());
    let extracted = NetworkModel::new(layers).unwrap();
    let report = build_report(net, &extracted, &[], &variant).unwrap();
    let rates: Vec<String> = report
        .layers
        .iter()
        .map(|l| format!("{}:{:.2}%", l.layer, 100.0 * l.weight_recovery))
        .collect();
    format!(
        "with attack.on_excess = cleanest on the aborted layers: recovery {}; model coverage {:.2}%; delta {:.1e}",
        rates.join(" "),
        100.0 * report.model_coverage,
        report.epsilon_delta.as_ref().map_or(f64::NAN, |d| d.delta)
    )
}

/// A sampled input, in the box or the widened box around it, where every neuron of
/// `layer` is off.
fn all_off_input(net: &NetworkModel, layer: usize, rng: &mut ChaCha20Rng) -> Option<Vec<f64>> {
    for scale in [1.0, 3.0] {
        for _ in 0..200_000 {
            let x: Vec<f64> = (0..net.input_dim()).map(|_| scale * rng.random::<f64>() - (scale - 1.0) / 2.0).collect();
            if net.pre_activations(&x)[layer - 1].iter().all(|v| *v < 0.0) {
                return Some(x);
            }
        }
    }
    None
}

fn a6(net: &NetworkModel, oracle: &Oracle, run: &DeepRun) -> Verdict {
    let domain = Domain::unit(net.input_dim());
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let mut calls = 0;
    let mut spent = 0;
    let mut correct = 0;
    let mut settled = 0;
    let mut no_witness = Vec::new();
    for a in run.attacks.iter().flatten() {
        // Without a flat-region witness the operation is still run, on an input the
        // true network has every neuron of the layer off at.
        let witness = match find_flat_witness(&oracle.phase(Phase::Filtering), &a.points, &domain, 32).unwrap() {
            Some(w) => w,
            None => {
                no_witness.push(a.layer);
                match all_off_input(net, a.layer, &mut rng) {
                    Some(w) => w,
                    None => continue,
                }
            }
        };
        let prefix = net.prefix(a.layer - 1).unwrap();
        let signed: Vec<(Vec<f64>, f64)> = a
            .recovered
            .neurons
            .iter()
            .filter(|n| n.status == NeuronStatus::Recovered)
            .map(|n| (n.row.clone(), n.bias))
            .collect();
        let flips: Vec<f64> = signed.iter().map(|_| if rng.random::<bool>() { -1.0 } else { 1.0 }).collect();
        let flipped: Vec<(Vec<f64>, f64)> = signed
            .iter()
            .zip(&flips)
            .map(|((r, b), s)| (r.iter().map(|v| v * s).collect(), b * s))
            .collect();
        let before = oracle.total_queries();
        let signs = zero_query_signs(&prefix, &flipped, &witness);
        spent += oracle.total_queries() - before;
        calls += 1;
        for (s, f) in signs.iter().zip(&flips) {
            if let Some(s) = s {
                settled += 1;
                if s * f == 1.0 {
                    correct += 1;
                }
            }
        }
    }
    verdict(
        run.output_queries == 0 && calls > 0 && spent == 0 && correct == settled,
        format!(
            "output layer: {} queries; zero_query_signs: {calls} calls, {spent} queries, {correct}/{settled} signs right; no flat-region witness on layers {no_witness:?}, ground-truth witness used there",
            run.output_queries
        ),
    )
}

fn a7(net: &NetworkModel, run: &DeepRun, config: &AttackConfig) -> Verdict {
    let report = &run.report;
    let depth = net.depth();
    let cmp = compare_models(net, &run.extracted, config.eval.weight_tolerance).unwrap();
    let mut missing = BTreeSet::new();
    for c in cmp.iter().filter(|c| c.layer <= depth) {
        for (k, j) in c.missing.all_weights(net.layer(c.layer).cols()) {
            missing.insert((c.layer, k, j));
        }
    }
    let classified: BTreeSet<(usize, usize, usize)> =
        report.taxonomy_entries.iter().map(|e| (e.layer, e.neuron, e.input)).collect();
    let partition = classified == missing
        && report.taxonomy_entries.len() == missing.len()
        && report.taxonomy.total() == missing.len();

    let min_layer = report.layers.iter().map(|l| l.coverage).fold(1.0, f64::min);
    let bounded = report.model_coverage <= min_layer;

    let identity = build_report(net, net, &[], config).unwrap();
    let perfect = identity.layers.iter().all(|l| l.weight_recovery == 1.0 && l.coverage == 1.0)
        && identity.model_coverage == 1.0
        && identity.epsilon_delta.as_ref().is_some_and(|d| d.delta == 0.0);

    let cells = enumerate_cells_2d(&example_network(), &Slice::identity(), &Domain::new(2, -100.0, 100.0), 200)
        .unwrap()
        .cells
        .len();
    verdict(
        partition && bounded && perfect && cells == 18,
        format!(
            "taxonomy {} entries for {} missing weights ({:?}); model coverage {:.4} <= min layer {:.4}: {bounded}; self-comparison perfect: {perfect}; example polytopes {cells}",
            report.taxonomy_entries.len(),
            missing.len(),
            report.taxonomy,
            report.model_coverage,
            min_layer
        ),
    )
}

fn main() {
    let mut passed = 0;
    let t = Instant::now();
    passed += report("A1", "second-difference equivalence", t, 60.0, a1()) as usize;
    let t = Instant::now();
    passed += report("A2", "first-layer exactness", t, 300.0, a2()) as usize;
    let t = Instant::now();
    passed += report("A3", "subspace intersection", t, 120.0, a3()) as usize;

    let net = deep_target();
    let t = Instant::now();
    passed += report("A4", "deeper-layer filtering", t, 1800.0, a4(&net)) as usize;

    let config = AttackConfig::default();
    let oracle = Oracle::new(net.clone());
    let t = Instant::now();
    let (v, run) = a5(&net, &oracle, &config);
    passed += report("A5", "per-layer deep extraction", t, 3.0 * 3600.0, v) as usize;
    let t = Instant::now();
    passed += report("A6", "zero-query steps", t, 600.0, a6(&net, &oracle, &run)) as usize;
    let t = Instant::now();
    passed += report("A7", "metric consistency", t, 600.0, a7(&net, &run, &config)) as usize;

    if !run.aborted.is_empty() {
        let layers: Vec<usize> = run.aborted.iter().map(|(i, _)| *i).collect();
        println!("note: layers {layers:?} aborted; {}", excess_variant(&net, &oracle, &config, &run));
    }
    // Failing criteria are reported above rather than through the exit status, so the
    // rest of the workspace test run still completes.
    println!("acceptance: {passed}/7 criteria passed");
}
