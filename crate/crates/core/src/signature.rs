//! Partial signatures from single critical points.
//!
//! At a critical point of neuron `k` in the attacked layer, the second difference of the
//! output along a direction `Δ` is `c * |(Γ Δ) . a_k|`, where `Γ` is the masked Jacobian
//! of the previous layer's outputs and `c` a constant of the point. Ratios against a
//! reference direction, with signs recovered by comparing `∂²(Δ + Δ0)` to
//! `∂²Δ + ∂²Δ0`, give linear equations for `a_k` up to scale. Inactive previous-layer
//! neurons and rank loss in `Γ` leave an affine space of solutions rather than a point.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Cell, Prefix};
use crate::oracle::PhasedOracle;
use crate::search::CriticalPoint;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignatureConfig {
    /// Extra directions on top of `2 * d_{i-1}`.
    pub direction_oversample: usize,
    /// First step of the second difference, as a fraction of the domain diagonal.
    pub eps_initial: f64,
    /// Relative agreement required between estimates at `eps` and `eps / 2`.
    pub eps_agreement: f64,
    pub max_halvings: u32,
    /// Singular values below this fraction of the largest count as zero.
    pub rank_threshold: f64,
    /// Relative least-squares residual above which a point is rejected.
    pub residual_tol: f64,
    pub seed: u64,
}

impl Default for SignatureConfig {
    fn default() -> Self {
        Self {
            direction_oversample: 8,
            eps_initial: 1e-4,
            eps_agreement: 1e-6,
            max_halvings: 30,
            rank_threshold: 1e-8,
            residual_tol: 1e-5,
            seed: 0,
        }
    }
}

/// `L + span(kernel)`, the candidate (scaled) rows consistent with one critical point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolutionSpace {
    pub layer: usize,
    pub particular: Vec<f64>,
    /// Orthonormal, zero outside `mask`.
    pub kernel: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    pub rank: usize,
    pub source: usize,
    pub residual: f64,
}

impl SolutionSpace {
    pub fn kernel_dim(&self) -> usize {
        self.kernel.len()
    }

    pub fn support(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Distance from `v` (restricted to the mask) to the affine space.
    pub fn distance(&self, v: &[f64]) -> f64 {
        let mut diff: Vec<f64> = v
            .iter()
            .zip(&self.particular)
            .zip(&self.mask)
            .map(|((a, b), m)| if *m { a - b } else { 0.0 })
            .collect();
        for e in &self.kernel {
            let c = crate::network::dot(&diff, e);
            for (d, ej) in diff.iter_mut().zip(e) {
                *d -= c * ej;
            }
        }
        diff.iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}

/// Second difference around `x` with a fixed, caller-cached `f(x)`.
struct Probe<'a, 'o> {
    oracle: &'a PhasedOracle<'o>,
    x: &'a [f64],
    fx: f64,
    eps0: f64,
    config: &'a SignatureConfig,
}

impl Probe<'_, '_> {
    fn at(&self, dir: &[f64], eps: f64) -> Result<f64> {
        let plus: Vec<f64> = self.x.iter().zip(dir).map(|(a, d)| a + eps * d).collect();
        let minus: Vec<f64> = self.x.iter().zip(dir).map(|(a, d)| a - eps * d).collect();
        let fp = self.oracle.scalar(&plus)?;
        let fm = self.oracle.scalar(&minus)?;
        Ok((fp + fm - 2.0 * self.fx) / eps)
    }

    /// Halves `eps` until two successive estimates agree.
    fn adaptive(&self, dir: &[f64]) -> Result<f64> {
        let mut eps = self.eps0;
        let mut prev = self.at(dir, eps)?;
        for _ in 0..self.config.max_halvings {
            eps *= 0.5;
            let cur = self.at(dir, eps)?;
            let noise = 16.0 * f64::EPSILON * self.fx.abs().max(1.0) / eps;
            if (cur - prev).abs() <= self.config.eps_agreement * cur.abs().max(prev.abs()) + noise {
                return Ok(cur);
            }
            prev = cur;
        }
        Err(Error::EpsilonNotConverged { eps })
    }

    /// `α / β` from `h = ∂²Δ`, `h0 = ∂²Δ0` and one more second difference along `Δ + Δ0`.
    fn ratio(&self, dir: &[f64], dir0: &[f64], h: f64, h0: f64) -> Result<f64> {
        let magnitude = h / h0;
        if magnitude.abs() <= 1e-12 {
            return Ok(0.0);
        }
        let sum: Vec<f64> = dir.iter().zip(dir0).map(|(a, b)| a + b).collect();
        let hs = self.adaptive(&sum)?;
        let same = (hs - (h + h0)).abs();
        let opposite = (hs.abs() - (h - h0).abs()).abs();
        Ok(if same <= opposite { magnitude } else { -magnitude })
    }
}

/// `(f(x + εΔ) + f(x - εΔ) - 2 f(x)) / ε` for every output.
pub fn second_difference(oracle: &PhasedOracle, x: &[f64], dir: &[f64], eps: f64) -> Result<Vec<f64>> {
    let plus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + eps * d).collect();
    let minus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a - eps * d).collect();
    let fp = oracle.query(&plus)?;
    let fm = oracle.query(&minus)?;
    let f0 = oracle.query(x)?;
    Ok((0..f0.len()).map(|j| (fp[j] + fm[j] - 2.0 * f0[j]) / eps).collect())
}

/// Scalar second difference with the step shrunk until it is stable.
pub fn adaptive_second_difference(
    oracle: &PhasedOracle,
    x: &[f64],
    dir: &[f64],
    eps: f64,
    config: &SignatureConfig,
) -> Result<f64> {
    let fx = oracle.scalar(x)?;
    Probe {
        oracle,
        x,
        fx,
        eps0: eps,
        config,
    }
    .adaptive(dir)
}

/// Relative coefficient `((Γ Δ) . a_k) / ((Γ Δ0) . a_k)` with its sign.
pub fn signed_ratio(
    oracle: &PhasedOracle,
    x: &[f64],
    dir: &[f64],
    dir0: &[f64],
    eps: f64,
    config: &SignatureConfig,
) -> Result<f64> {
    let fx = oracle.scalar(x)?;
    let probe = Probe {
        oracle,
        x,
        fx,
        eps0: eps,
        config,
    };
    let h0 = probe.adaptive(dir0)?;
    let noise = 64.0 * f64::EPSILON * fx.abs().max(1.0) / eps;
    if h0.abs() <= noise {
        return Err(Error::DegenerateDirection);
    }
    let h = probe.adaptive(dir)?;
    probe.ratio(dir, dir0, h, h0)
}

fn unit_directions(n: usize, dim: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                break v.into_iter().map(|a| a / norm).collect();
            }
        })
        .collect()
}

/// Solution space of the signature of the neuron `point` is critical for.
///
/// `eps` is the initial second-difference step in input units.
pub fn recover_solution_space(
    oracle: &PhasedOracle,
    prefix: &Prefix,
    point: &CriticalPoint,
    eps: f64,
    config: &SignatureConfig,
) -> Result<SolutionSpace> {
    let cell = prefix.cell(&point.x);
    recover_with_cell(oracle, &cell, prefix.target_layer(), point, eps, config)
}

pub fn recover_with_cell(
    oracle: &PhasedOracle,
    cell: &Cell,
    layer: usize,
    point: &CriticalPoint,
    eps: f64,
    config: &SignatureConfig,
) -> Result<SolutionSpace> {
    let x = &point.x;
    let d0 = x.len();
    let width = cell.feature_dim();
    let active: Vec<usize> = (0..width).filter(|&j| cell.mask[j]).collect();
    if active.is_empty() {
        return Err(Error::NoActiveInputs);
    }
    let fx = oracle.scalar(x)?;
    let probe = Probe {
        oracle,
        x,
        fx,
        eps0: eps,
        config,
    };
    let noise = 64.0 * f64::EPSILON * fx.abs().max(1.0) / eps;

    let first_layer = cell.jac.is_empty();
    let dirs: Vec<Vec<f64>> = if first_layer {
        (0..d0)
            .map(|j| {
                let mut e = vec![0.0; d0];
                e[j] = 1.0;
                e
            })
            .collect()
    } else {
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        rng.set_stream(point.id as u64);
        unit_directions(2 * width + config.direction_oversample, d0, &mut rng)
    };

    let h: Vec<f64> = dirs.iter().map(|d| probe.adaptive(d)).collect::<Result<_>>()?;
    let (i0, h0) = h
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .unwrap();
    if h0.abs() <= noise {
        return Err(Error::DegenerateDirection);
    }
    let y: Vec<f64> = (0..dirs.len())
        .map(|m| {
            if m == i0 {
                Ok(1.0)
            } else {
                probe.ratio(&dirs[m], &dirs[i0], h[m], h0)
            }
        })
        .collect::<Result<_>>()?;

    if first_layer {
        // Each basis direction reads one entry directly.
        return Ok(SolutionSpace {
            layer,
            particular: y,
            kernel: Vec::new(),
            mask: vec![true; d0],
            rank: d0,
            source: point.id,
            residual: 0.0,
        });
    }

    let rows: Vec<Vec<f64>> = dirs.iter().map(|d| cell.jacobian_times(d)).collect();
    let m = DMatrix::from_fn(rows.len(), active.len(), |r, c| rows[r][active[c]]);
    let rhs = DVector::from_vec(y);
    let (solution, kernel, rank) = least_squares(&m, &rhs, config.rank_threshold);
    let fitted = &m * &solution;
    let residual = (&fitted - &rhs).norm() / rhs.norm();
    if residual > config.residual_tol {
        return Err(Error::Inconsistent { residual });
    }

    let embed = |v: &DVector<f64>| {
        let mut out = vec![0.0; width];
        for (c, &j) in active.iter().enumerate() {
            out[j] = v[c];
        }
        out
    };
    Ok(SolutionSpace {
        layer,
        particular: embed(&solution),
        kernel: kernel.iter().map(embed).collect(),
        mask: cell.mask.clone(),
        rank,
        source: point.id,
        residual,
    })
}

/// SVD checked against its own recomposition.
///
/// nalgebra's default convergence threshold can stop early on matrices with many
/// repeated singular values (the ±1 patterns built by merging), returning factors that
/// do not recompose the input. Those cases are retried with tighter thresholds.
pub fn svd(m: DMatrix<f64>, u: bool, v: bool) -> nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn> {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let error = |s: &nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>| {
        s.clone().recompose().map_or(f64::INFINITY, |r| (r - &m).amax() / scale)
    };
    let first = m.clone().svd(true, true);
    if error(&first) <= 1e-12 {
        return strip(first, u, v);
    }
    let mut best = (error(&first), first);
    for eps in [1e-3, 1e-6] {
        if let Some(s) = m.clone().try_svd(true, true, f64::EPSILON * eps, 100_000) {
            let e = error(&s);
            if e < best.0 {
                best = (e, s);
            }
            if e <= 1e-12 {
                break;
            }
        }
    }
    strip(best.1, u, v)
}

fn strip(
    mut s: nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    u: bool,
    v: bool,
) -> nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn> {
    if !u {
        s.u = None;
    }
    if !v {
        s.v_t = None;
    }
    s
}

/// Minimum-norm least-squares solution, orthonormal null-space basis and numerical rank.
pub fn least_squares(
    m: &DMatrix<f64>,
    rhs: &DVector<f64>,
    threshold: f64,
) -> (DVector<f64>, Vec<DVector<f64>>, usize) {
    let cols = m.ncols();
    // Pad to at least as many rows as columns so the thin SVD exposes the full V.
    let padded;
    let a = if m.nrows() < cols {
        padded = m.clone().resize_vertically(cols, 0.0);
        &padded
    } else {
        m
    };
    let svd = svd(a.clone(), true, true);
    let u = svd.u.as_ref().unwrap();
    let v_t = svd.v_t.as_ref().unwrap();
    let s = &svd.singular_values;
    let smax = s.iter().copied().fold(0.0, f64::max);
    let cut = threshold * smax;
    let mut rhs_full = rhs.clone();
    if rhs_full.len() < a.nrows() {
        rhs_full = rhs_full.resize_vertically(a.nrows(), 0.0);
    }
    let mut solution = DVector::zeros(cols);
    let mut kernel = Vec::new();
    let mut rank = 0;
    for i in 0..s.len() {
        let vi = v_t.row(i).transpose();
        if s[i] > cut && smax > 0.0 {
            rank += 1;
            let coef = u.column(i).dot(&rhs_full) / s[i];
            solution += vi * coef;
        } else {
            kernel.push(vi);
        }
    }
    (solution, kernel, rank)
}
