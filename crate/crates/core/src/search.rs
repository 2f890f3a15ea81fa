//! Critical points along random lines.
//!
//! Along a line the network is a piecewise linear function of one parameter `t`. A
//! segment whose two end slopes agree holds no kink. Otherwise we guess that it holds
//! exactly one, at the intersection of the two end tangents, and check the guess with
//! one query. A confirmed guess is then sharpened with secants through points just
//! either side of it; an unconfirmed one is split in half.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::oracle::PhasedOracle;

/// Axis-aligned input box `[low, high]^dim`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub dim: usize,
    pub low: f64,
    pub high: f64,
}

impl Domain {
    pub fn new(dim: usize, low: f64, high: f64) -> Self {
        Self { dim, low, high }
    }

    pub fn unit(dim: usize) -> Self {
        Self::new(dim, 0.0, 1.0)
    }

    pub fn diagonal(&self) -> f64 {
        (self.high - self.low) * (self.dim as f64).sqrt()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().all(|v| *v >= self.low && *v <= self.high)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.dim)
            .map(|_| rng.random_range(self.low..=self.high))
            .collect()
    }

    /// The box widened by `margin` times its side length on every side.
    pub fn expanded(&self, margin: f64) -> Self {
        let w = margin * (self.high - self.low);
        Self::new(self.dim, self.low - w, self.high + w)
    }

    /// Largest `t >= 0` with `x + t * dir` still inside the box.
    pub fn exit_time(&self, x: &[f64], dir: &[f64]) -> f64 {
        let mut t = f64::INFINITY;
        for (xi, di) in x.iter().zip(dir) {
            if *di > 0.0 {
                t = t.min((self.high - xi) / di);
            } else if *di < 0.0 {
                t = t.min((self.low - xi) / di);
            }
        }
        t.max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DepthStatus {
    #[default]
    Unknown,
    Deeper,
    Candidate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub id: usize,
    pub x: Vec<f64>,
    /// Full oracle output at `x`.
    pub output: Vec<f64>,
    /// Index of the line it was found on.
    pub line: usize,
    /// Position along that line (0 at the first endpoint, 1 at the second).
    pub t: f64,
    pub bracket: (Vec<f64>, Vec<f64>),
    /// Disagreement between the predicted and the measured value, relative to the
    /// segment's value scale. Large for points emitted by the recursion floor.
    pub residual: f64,
    pub pathological: bool,
    pub depth: DepthStatus,
    pub component: Option<usize>,
}

impl CriticalPoint {
    pub fn set_depth(&mut self, status: DepthStatus) {
        if self.depth == DepthStatus::Unknown {
            self.depth = status;
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Relative tolerance on slope equality and on value predictions.
    pub tolerance: f64,
    /// Segments shorter than this fraction of the line are not split further.
    pub refine_floor: f64,
    /// Finite-difference step, as a fraction of the domain diagonal.
    pub slope_step: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            refine_floor: 1e-10,
            slope_step: 1e-6,
        }
    }
}

/// One line `a + t (b - a)`, with the scalar oracle restricted to it.
struct LineFn<'a, 'o> {
    oracle: &'a PhasedOracle<'o>,
    a: &'a [f64],
    b: &'a [f64],
}

impl LineFn<'_, '_> {
    fn point(&self, t: f64) -> Vec<f64> {
        self.a
            .iter()
            .zip(self.b)
            .map(|(a, b)| a + t * (b - a))
            .collect()
    }

    fn eval(&self, t: f64) -> Result<f64> {
        self.oracle.scalar(&self.point(t))
    }
}

/// A segment end: position, value, and the one-sided slope pointing into the segment.
#[derive(Clone, Copy, Debug)]
struct End {
    t: f64,
    g: f64,
    slope: f64,
    /// Baseline the slope was measured over.
    h: f64,
}

struct Scanner<'a, 'o> {
    line: LineFn<'a, 'o>,
    /// Slope step in `t` units.
    h: f64,
    tol: f64,
    floor: f64,
    /// Largest |g| seen on the line; stands in for the size of the rounding errors.
    gscale: f64,
    /// Rounding noise of a single evaluation, measured on this line.
    measured: f64,
    found: Vec<(f64, f64, f64, bool, f64)>,
    overflow: bool,
}

/// A line producing more findings than this is cut short.
const MAX_FINDINGS: usize = 4096;

/// Segments are split slightly off-centre: hand-built networks put kinks at exact
/// midpoints surprisingly often, and a kink on the split point is seen by neither half.
const SPLIT: f64 = 0.4973;

impl Scanner<'_, '_> {
    /// Rounding noise of a slope measured over a baseline `h`.
    fn noise(&self, h: f64) -> f64 {
        self.value_noise() / h
    }

    fn value_noise(&self) -> f64 {
        (64.0 * f64::EPSILON * self.gscale).max(self.measured)
    }

    /// No kink is assumed when both end slopes agree with each other and with the
    /// chord; the chord catches pairs of kinks whose slope changes cancel.
    fn is_linear(&self, l: &End, r: &End) -> bool {
        let chord = (r.g - l.g) / (r.t - l.t);
        let scale = l.slope.abs().max(r.slope.abs()).max(chord.abs());
        let slack = self.tol * scale + self.noise(l.h.min(r.h));
        (l.slope - r.slope).abs() <= slack
            && (l.slope - chord).abs() <= slack
            && (r.slope - chord).abs() <= slack
    }

    fn value_tol(&self, l: &End, r: &End) -> f64 {
        let w = r.t - l.t;
        let scale = l.g.abs().max(r.g.abs()).max(l.slope.abs() * w).max(r.slope.abs() * w);
        self.tol * scale + 16.0 * f64::EPSILON * scale.max(1e-300)
    }

    /// Re-measures an end slope over a shorter baseline. A kink closer to the end
    /// than the old baseline spoils the slope; once the baseline is short enough the
    /// kink moves inside the segment proper.
    fn shorten(&self, end: End, h: f64, inward: f64) -> Result<End> {
        let g = self.line.eval(end.t + inward * h)?;
        Ok(End {
            slope: inward * (g - end.g) / h,
            h,
            ..end
        })
    }

    fn scan(&mut self, mut l: End, mut r: End) -> Result<()> {
        if self.found.len() >= MAX_FINDINGS {
            self.overflow = true;
            return Ok(());
        }
        let w = r.t - l.t;
        let h = w / 8.0;
        if w > self.floor && l.h > h {
            l = self.shorten(l, h, 1.0)?;
        }
        if w > self.floor && r.h > h {
            r = self.shorten(r, h, -1.0)?;
        }
        if self.is_linear(&l, &r) {
            return Ok(());
        }
        if w <= self.floor {
            let tm = 0.5 * (l.t + r.t);
            let gm = self.line.eval(tm)?;
            let pred = l.g + l.slope * (tm - l.t);
            let res = (gm - pred).abs() / self.value_tol(&l, &r).max(1e-300);
            self.found.push((tm, l.t, r.t, true, res.max(1.0)));
            return Ok(());
        }
        // Tangent from the left end: g = l.g + l.slope (t - l.t), and from the right end.
        let t_star = (r.g - l.g + l.slope * l.t - r.slope * r.t) / (l.slope - r.slope);
        let margin = 1e-6 * w;
        if t_star.is_finite() && t_star > l.t + margin && t_star < r.t - margin {
            let g_star = self.line.eval(t_star)?;
            let pred = l.g + l.slope * (t_star - l.t);
            let tol = self.value_tol(&l, &r);
            if (g_star - pred).abs() <= tol {
                if let Some((t, lo, hi, res)) = self.refine(&l, &r, t_star)? {
                    self.found.push((t, lo, hi, false, res));
                    return Ok(());
                }
            }
        }
        self.split(l, r)
    }

    fn split(&mut self, l: End, r: End) -> Result<()> {
        let tm = l.t + SPLIT * (r.t - l.t);
        let h = self.h.min(0.25 * (r.t - l.t));
        let gm = self.line.eval(tm)?;
        self.gscale = self.gscale.max(gm.abs());
        let g_left = self.line.eval(tm - h)?;
        let g_right = self.line.eval(tm + h)?;
        let mid_left = End {
            t: tm,
            g: gm,
            slope: (gm - g_left) / h,
            h,
        };
        let mid_right = End {
            t: tm,
            g: gm,
            slope: (g_right - gm) / h,
            h,
        };
        self.scan(l, mid_left)?;
        self.scan(mid_right, r)
    }

    /// Secant refinement around a confirmed single kink.
    ///
    /// The first round puts a probe on each side of the guess and checks it against
    /// the end tangents. From then on each side is described by the secant through the
    /// segment end and the latest probe on that side, which is accurate to rounding,
    /// and the probes move in by a factor 1000 per round until the bracket reaches the
    /// refinement floor. A probe that leaves its secant line means the previous bracket
    /// was already as tight as the data allows.
    fn refine(&self, l: &End, r: &End, t0: f64) -> Result<Option<(f64, f64, f64, f64)>> {
        let w = r.t - l.t;
        let value_noise = (256.0 * f64::EPSILON * self.gscale).max(4.0 * self.measured);
        let mut delta = (1e-4 * w).max(self.floor);
        let mut t = t0;
        // Left and right lines as (anchor t, anchor g, slope).
        let mut left = (l.t, l.g, l.slope);
        let mut right = (r.t, r.g, r.slope);
        let mut bracket = None;
        let mut residual = 0.0f64;
        for round in 0.. {
            let tl = t - delta;
            let tr = t + delta;
            if tl <= l.t || tr >= r.t {
                break;
            }
            let gl = self.line.eval(tl)?;
            let gr = self.line.eval(tr)?;
            let dev_l = (gl - (left.1 + left.2 * (tl - left.0))).abs();
            let dev_r = (gr - (right.1 + right.2 * (tr - right.0))).abs();
            // A probe on the wrong side of the kink misses its line by about
            // |slope change| * distance; allow a small fraction of that on top of
            // the extrapolation error of the end slopes.
            let limit = if round == 0 {
                let reach = (t - l.t).max(r.t - t);
                1e-3 * (l.slope - r.slope).abs() * delta
                    + self.noise(l.h.min(r.h)) * reach
                    + value_noise
            } else {
                value_noise
            };
            if dev_l > limit || dev_r > limit {
                break;
            }
            residual = residual.max(dev_l.max(dev_r) / limit.max(1e-300));
            let sl = (gl - l.g) / (tl - l.t);
            let sr = (r.g - gr) / (r.t - tr);
            // Long-baseline slopes are nearly noise free; if they agree, the end
            // slopes only differed by rounding and there is no kink here.
            let baseline = (tl - l.t).min(r.t - tr);
            if (sl - sr).abs() <= self.tol * sl.abs().max(sr.abs()) + self.noise(baseline) {
                return Ok(None);
            }
            let next = (gr - gl + sl * tl - sr * tr) / (sl - sr);
            if !(next > tl && next < tr) {
                break;
            }
            left = (tl, gl, sl);
            right = (tr, gr, sr);
            bracket = Some((tl, tr));
            t = next;
            if delta <= self.floor {
                break;
            }
            delta = (delta * 1e-3).max(self.floor);
        }
        Ok(bracket.map(|(lo, hi)| (t, lo, hi, residual * self.tol)))
    }
}

/// Evaluation noise on a line: second differences over a step far below any
/// kink spacing are pure rounding. Sixteen times the median of eight of them.
fn measure_noise(line: &LineFn, floor: f64) -> Result<f64> {
    let d = 10.0 * floor;
    let mut v: Vec<f64> = (0..8)
        .map(|k| {
            let t = (k as f64 + 0.5) / 8.0;
            Ok((line.eval(t - d)? - 2.0 * line.eval(t)? + line.eval(t + d)?).abs())
        })
        .collect::<Result<_>>()?;
    v.sort_by(f64::total_cmp);
    Ok(16.0 * 0.5 * (v[3] + v[4]))
}

/// Every critical point detected strictly between `a` and `b`, sorted along the line.
pub fn scan_line(
    oracle: &PhasedOracle,
    a: &[f64],
    b: &[f64],
    slope_step: f64,
    config: &SearchConfig,
) -> Result<Vec<CriticalPoint>> {
    let len = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    if len == 0.0 {
        return Ok(Vec::new());
    }
    let line = LineFn { oracle, a, b };
    let h = (slope_step / len).min(0.25);
    let g0 = line.eval(0.0)?;
    let g1 = line.eval(1.0)?;
    let g0h = line.eval(h)?;
    let g1h = line.eval(1.0 - h)?;
    let measured = measure_noise(&line, config.refine_floor)?;
    let mut scanner = Scanner {
        line,
        h,
        tol: config.tolerance,
        floor: config.refine_floor,
        gscale: g0.abs().max(g1.abs()).max(g0h.abs()).max(g1h.abs()),
        measured,
        found: Vec::new(),
        overflow: false,
    };
    scanner.scan(
        End {
            t: 0.0,
            g: g0,
            slope: (g0h - g0) / h,
            h,
        },
        End {
            t: 1.0,
            g: g1,
            slope: (g1 - g1h) / h,
            h,
        },
    )?;
    if scanner.overflow {
        log::warn!("line scan stopped after {MAX_FINDINGS} findings");
    }
    let mut found = std::mem::take(&mut scanner.found);
    found.sort_by(|p, q| p.0.total_cmp(&q.0));
    let line = &scanner.line;
    found
        .into_iter()
        .map(|(t, lo, hi, pathological, residual)| {
            let x = line.point(t);
            let output = oracle.query(&x)?;
            Ok(CriticalPoint {
                id: 0,
                bracket: (line.point(lo), line.point(hi)),
                x,
                output,
                line: 0,
                t,
                residual,
                pathological,
                depth: DepthStatus::Unknown,
                component: None,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarvestConfig {
    pub count: usize,
    pub line_budget: usize,
    pub seed: u64,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            count: 3000,
            line_budget: 200_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Harvest {
    pub points: Vec<CriticalPoint>,
    pub lines_scanned: usize,
    /// The line budget ran out before `count` points were accepted.
    pub exhausted: bool,
}

/// Endpoints of line `n` for a given seed; independent of scan order.
pub fn line_endpoints(domain: &Domain, seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(n as u64);
    let a = domain.sample(&mut rng);
    let mut b = domain.sample(&mut rng);
    while b == a {
        b = domain.sample(&mut rng);
    }
    (a, b)
}

const LINES_PER_BATCH: usize = 32;

/// Scans random lines until `count` points pass `accept`.
///
/// Lines are scanned in fixed-size parallel batches; each batch's points are ordered
/// by (line, t) before being appended, so the result does not depend on the number
/// of worker threads.
pub fn harvest<F>(
    oracle: &PhasedOracle,
    domain: &Domain,
    search: &SearchConfig,
    config: &HarvestConfig,
    accept: F,
) -> Result<Harvest>
where
    F: Fn(&CriticalPoint) -> bool + Sync,
{
    let mut points = Vec::new();
    let mut next_line = 0;
    let step = search.slope_step * domain.diagonal();
    while points.len() < config.count && next_line < config.line_budget {
        let end = (next_line + LINES_PER_BATCH).min(config.line_budget);
        let batch: Vec<Vec<CriticalPoint>> = (next_line..end)
            .into_par_iter()
            .map(|n| {
                let (a, b) = line_endpoints(domain, config.seed, n);
                let mut found = scan_line(oracle, &a, &b, step, search)?;
                found.retain(|p| !p.pathological && accept(p));
                for p in &mut found {
                    p.line = n;
                }
                Ok(found)
            })
            .collect::<Result<_>>()?;
        next_line = end;
        for p in batch.into_iter().flatten() {
            if points.len() == config.count {
                break;
            }
            points.push(p);
        }
    }
    for (id, p) in points.iter_mut().enumerate() {
        p.id = id;
    }
    Ok(Harvest {
        exhausted: points.len() < config.count,
        points,
        lines_scanned: next_line,
    })
}
