//! Activation regions of a network restricted to a plane.
//!
//! Cells are seeded from a grid, then each cell's exact polygon is cut out of the
//! box by the half-planes of its pattern and neighbours are found by stepping
//! across its edges. The summed area tells whether anything was missed.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::network::NetworkModel;
use crate::search::Domain;

/// A plane through input space: `(s, t) -> origin + s * u + t * v`.
#[derive(Clone, Debug)]
pub struct Slice {
    pub origin: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Slice {
    /// The input space itself, for 2-D networks.
    pub fn identity() -> Self {
        Self {
            origin: vec![0.0, 0.0],
            u: vec![1.0, 0.0],
            v: vec![0.0, 1.0],
        }
    }

    pub fn point(&self, p: [f64; 2]) -> Vec<f64> {
        (0..self.origin.len())
            .map(|j| self.origin[j] + p[0] * self.u[j] + p[1] * self.v[j])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolytopeCell {
    /// Hidden-layer activity, one entry per layer.
    pub pattern: Vec<Vec<bool>>,
    /// Interior point in plane coordinates.
    pub point: [f64; 2],
    /// Counter-clockwise polygon in plane coordinates.
    pub vertices: Vec<[f64; 2]>,
}

impl PolytopeCell {
    pub fn area(&self) -> f64 {
        polygon_area(&self.vertices)
    }

    pub fn label(&self) -> String {
        pattern_label(&self.pattern)
    }
}

pub fn pattern_label(pattern: &[Vec<bool>]) -> String {
    pattern
        .iter()
        .map(|l| l.iter().map(|b| if *b { '1' } else { '0' }).collect::<String>())
        .collect::<Vec<_>>()
        .join("|")
}

#[derive(Clone, Debug)]
pub struct CellMap {
    pub cells: Vec<PolytopeCell>,
    pub box_area: f64,
    pub covered_area: f64,
    pub warnings: Vec<String>,
}

impl CellMap {
    /// One row per polygon vertex and one per representative point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,pattern,kind,index,s,t\n");
        for (c, cell) in self.cells.iter().enumerate() {
            let label = cell.label();
            let _ = writeln!(out, "{c},{label},point,0,{},{}", cell.point[0], cell.point[1]);
            for (i, v) in cell.vertices.iter().enumerate() {
                let _ = writeln!(out, "{c},{label},vertex,{i},{},{}", v[0], v[1]);
            }
        }
        out
    }
}

fn polygon_area(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (p[i], p[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
}

fn centroid(p: &[[f64; 2]]) -> [f64; 2] {
    let a = polygon_area(p);
    let n = p.len();
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let (u, v) = (p[i], p[(i + 1) % n]);
        let cross = u[0] * v[1] - v[0] * u[1];
        cx += (u[0] + v[0]) * cross;
        cy += (u[1] + v[1]) * cross;
    }
    [cx / (6.0 * a), cy / (6.0 * a)]
}

/// Keeps the part of a convex polygon where `g·p + c >= 0`.
fn clip(poly: &[[f64; 2]], g: [f64; 2], c: f64) -> Vec<[f64; 2]> {
    let val = |p: [f64; 2]| g[0] * p[0] + g[1] * p[1] + c;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (va, vb) = (val(a), val(b));
        if va >= 0.0 {
            out.push(a);
        }
        if (va >= 0.0) != (vb >= 0.0) {
            let t = va / (va - vb);
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

/// Pre-activations of every hidden layer as affine functions of the plane
/// coordinates, under a fixed activation pattern.
fn pattern_maps(model: &NetworkModel, slice: &Slice, pattern: &[Vec<bool>]) -> Vec<Vec<([f64; 2], f64)>> {
    // Current layer input as (d/ds, d/dt, offset) per coordinate.
    let mut h: Vec<([f64; 2], f64)> = (0..slice.origin.len())
        .map(|j| ([slice.u[j], slice.v[j]], slice.origin[j]))
        .collect();
    let mut out = Vec::with_capacity(model.depth());
    for (i, bits) in pattern.iter().enumerate() {
        let layer = model.layer(i + 1);
        let pre: Vec<([f64; 2], f64)> = (0..layer.rows())
            .map(|k| {
                let mut g = [0.0, 0.0];
                let mut c = layer.bias()[k];
                for (w, (hg, hc)) in layer.row(k).iter().zip(&h) {
                    g[0] += w * hg[0];
                    g[1] += w * hg[1];
                    c += w * hc;
                }
                (g, c)
            })
            .collect();
        h = pre
            .iter()
            .zip(bits)
            .map(|(p, on)| if *on { *p } else { ([0.0, 0.0], 0.0) })
            .collect();
        out.push(pre);
    }
    out
}

fn cell_polygon(model: &NetworkModel, slice: &Slice, bounds: &[[f64; 2]], pattern: &[Vec<bool>]) -> Vec<[f64; 2]> {
    let mut poly = bounds.to_vec();
    for (pre, bits) in pattern_maps(model, slice, pattern).iter().zip(pattern) {
        for ((g, c), on) in pre.iter().zip(bits) {
            let sign = if *on { 1.0 } else { -1.0 };
            poly = clip(&poly, [sign * g[0], sign * g[1]], sign * c);
            if poly.len() < 3 {
                return Vec::new();
            }
        }
    }
    // Drop repeated vertices left by cuts through a corner.
    let scale = bounds.iter().fold(0.0f64, |m, p| m.max(p[0].abs()).max(p[1].abs())).max(1.0);
    let mut clean: Vec<[f64; 2]> = Vec::with_capacity(poly.len());
    for p in poly {
        if clean
            .last()
            .is_none_or(|q| (q[0] - p[0]).abs() + (q[1] - p[1]).abs() > 1e-12 * scale)
        {
            clean.push(p);
        }
    }
    while clean.len() > 1 {
        let (a, b) = (clean[0], clean[clean.len() - 1]);
        if (a[0] - b[0]).abs() + (a[1] - b[1]).abs() > 1e-12 * scale {
            break;
        }
        clean.pop();
    }
    clean
}

/// Enumerates the activation regions of `model` on `slice` inside the square
/// `domain` (plane coordinates). `resolution` is the seed grid size per axis.
pub fn enumerate_cells_2d(model: &NetworkModel, slice: &Slice, domain: &Domain, resolution: usize) -> Result<CellMap> {
    if domain.dim != 2 {
        return Err(Error::Dimension { expected: 2, got: domain.dim });
    }
    if slice.origin.len() != model.input_dim() || slice.u.len() != model.input_dim() || slice.v.len() != model.input_dim()
    {
        return Err(Error::Dimension {
            expected: model.input_dim(),
            got: slice.origin.len(),
        });
    }
    if resolution == 0 {
        return Err(Error::Config("resolution must be at least 1".into()));
    }
    let (lo, hi) = (domain.low, domain.high);
    let bounds = [[lo, lo], [hi, lo], [hi, hi], [lo, hi]];
    let box_area = (hi - lo) * (hi - lo);
    let size = hi - lo;
    let pattern_at = |p: [f64; 2]| -> Result<Vec<Vec<bool>>> { Ok(model.forward(&slice.point(p))?.pattern.layers) };

    let mut seen: BTreeMap<Vec<Vec<bool>>, Option<usize>> = BTreeMap::new();
    let mut queue = VecDeque::new();
    let mut grid = Vec::with_capacity(resolution * resolution);
    for a in 0..resolution {
        for b in 0..resolution {
            let p = [
                lo + size * (a as f64 + 0.5) / resolution as f64,
                lo + size * (b as f64 + 0.5) / resolution as f64,
            ];
            let pat = pattern_at(p)?;
            if !seen.contains_key(&pat) {
                seen.insert(pat.clone(), None);
                queue.push_back(pat.clone());
            }
            grid.push(pat);
        }
    }

    let mut warnings = Vec::new();
    // Neighbouring grid samples more than one neuron apart hide a vertex or a thin cell.
    for a in 0..resolution {
        for b in 0..resolution {
            let here = &grid[a * resolution + b];
            for (na, nb) in [(a + 1, b), (a, b + 1)] {
                if na < resolution && nb < resolution {
                    let there = &grid[na * resolution + nb];
                    let flips: usize = here
                        .iter()
                        .zip(there)
                        .map(|(x, y)| x.iter().zip(y).filter(|(p, q)| p != q).count())
                        .sum();
                    if flips > 2 {
                        warnings.push(format!(
                            "grid samples ({a},{b}) and ({na},{nb}) differ in {flips} neurons: {} vs {}",
                            pattern_label(here),
                            pattern_label(there)
                        ));
                    }
                }
            }
        }
    }

    let mut cells = Vec::new();
    while let Some(pat) = queue.pop_front() {
        let poly = cell_polygon(model, slice, &bounds, &pat);
        if poly.len() < 3 || polygon_area(&poly) <= 1e-14 * box_area {
            continue;
        }
        let mut point = centroid(&poly);
        if pattern_at(point)? != pat {
            // The centroid of a sliver can round into a neighbour; try the vertex average.
            let n = poly.len() as f64;
            point = [
                poly.iter().map(|p| p[0]).sum::<f64>() / n,
                poly.iter().map(|p| p[1]).sum::<f64>() / n,
            ];
            if pattern_at(point)? != pat {
                warnings.push(format!("cell {} has no representable interior point", pattern_label(&pat)));
                continue;
            }
        }
        // Step across every edge at a few places to reach the neighbours.
        for i in 0..poly.len() {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = (dx * dx + dy * dy).sqrt();
            if len == 0.0 {
                continue;
            }
            // Outward normal of a counter-clockwise polygon.
            let out = [dy / len, -dx / len];
            let step = (1e-3 * len).min(1e-7 * size);
            for frac in [1e-4, 0.25, 0.5, 0.75, 1.0 - 1e-4] {
                let q = [a[0] + frac * dx + step * out[0], a[1] + frac * dy + step * out[1]];
                if q[0] < lo || q[0] > hi || q[1] < lo || q[1] > hi {
                    continue;
                }
                let np = pattern_at(q)?;
                if !seen.contains_key(&np) {
                    seen.insert(np.clone(), None);
                    queue.push_back(np);
                }
            }
        }
        seen.insert(pat.clone(), Some(cells.len()));
        cells.push(PolytopeCell {
            pattern: pat,
            point,
            vertices: poly,
        });
    }

    let covered_area: f64 = cells.iter().map(PolytopeCell::area).sum();
    if (covered_area - box_area).abs() > 1e-9 * box_area {
        warnings.push(format!(
            "cells cover {covered_area} of the box area {box_area}; raise the resolution"
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(CellMap {
        cells,
        box_area,
        covered_area,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{example_network, generate_random, Layer, RandomInit};

    /// Regions cut from a square by lines in general position: one, plus one per
    /// line crossing it, plus one per crossing inside it.
    fn arrangement_count(lines: &[([f64; 2], f64)], lo: f64, hi: f64) -> usize {
        let inside = |p: [f64; 2]| p[0] > lo && p[0] < hi && p[1] > lo && p[1] < hi;
        let corners = [[lo, lo], [hi, lo], [hi, hi], [lo, hi]];
        let crossing = lines
            .iter()
            .filter(|(g, c)| {
                let s: Vec<f64> = corners.iter().map(|p| g[0] * p[0] + g[1] * p[1] + c).collect();
                s.iter().any(|v| *v > 0.0) && s.iter().any(|v| *v < 0.0)
            })
            .count();
        let mut vertices = 0;
        for i in 0..lines.len() {
            for j in i + 1..lines.len() {
                let ((a, c1), (b, c2)) = (lines[i], lines[j]);
                let det = a[0] * b[1] - a[1] * b[0];
                if det.abs() < 1e-15 {
                    continue;
                }
                let p = [(-c1 * b[1] + c2 * a[1]) / det, (-a[0] * c2 + b[0] * c1) / det];
                if inside(p) {
                    vertices += 1;
                }
            }
        }
        1 + crossing + vertices
    }

    #[test]
    fn worked_example_has_eighteen_regions() {
        let net = example_network();
        let map = enumerate_cells_2d(&net, &Slice::identity(), &Domain::new(2, -100.0, 100.0), 200).unwrap();
        assert_eq!(map.cells.len(), 18, "{:?}", map.cells.iter().map(|c| c.label()).collect::<Vec<_>>());
        assert!((map.covered_area - map.box_area).abs() < 1e-6 * map.box_area);
    }

    #[test]
    fn cells_reproduce_their_patterns_and_are_distinct() {
        let net = example_network();
        let map = enumerate_cells_2d(&net, &Slice::identity(), &Domain::new(2, -30.0, 30.0), 50).unwrap();
        for c in &map.cells {
            assert_eq!(net.forward(&c.point).unwrap().pattern.layers, c.pattern);
        }
        let mut labels: Vec<String> = map.cells.iter().map(PolytopeCell::label).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), map.cells.len());
    }

    #[test]
    fn linear_network_is_one_cell() {
        let net = NetworkModel::new(vec![Layer::from_rows(&[vec![1.0, -2.0]], &[0.5]).unwrap()]).unwrap();
        let map = enumerate_cells_2d(&net, &Slice::identity(), &Domain::unit(2), 10).unwrap();
        assert_eq!(map.cells.len(), 1);
        // A hidden layer whose lines all miss the box.
        let net = NetworkModel::new(vec![
            Layer::from_rows(&[vec![1.0, 1.0], vec![-1.0, 0.5]], &[5.0, -4.0]).unwrap(),
            Layer::from_rows(&[vec![1.0, 1.0]], &[0.0]).unwrap(),
        ])
        .unwrap();
        assert_eq!(enumerate_cells_2d(&net, &Slice::identity(), &Domain::unit(2), 10).unwrap().cells.len(), 1);
    }

    #[test]
    fn one_hidden_layer_matches_the_line_arrangement() {
        for seed in 0..8 {
            let net = generate_random(&[2, 16, 1], seed, &RandomInit::default()).unwrap();
            let lines: Vec<([f64; 2], f64)> = (0..16)
                .map(|k| ([net.layer(1).weight(k, 0), net.layer(1).weight(k, 1)], net.layer(1).bias()[k]))
                .collect();
            let map = enumerate_cells_2d(&net, &Slice::identity(), &Domain::unit(2), 40).unwrap();
            assert_eq!(map.cells.len(), arrangement_count(&lines, 0.0, 1.0), "seed {seed}");
        }
    }

    #[test]
    fn slice_of_a_wider_input() {
        let net = generate_random(&[5, 6, 4, 1], 2, &RandomInit::default()).unwrap();
        let slice = Slice {
            origin: vec![0.5; 5],
            u: vec![0.3, -0.1, 0.2, 0.0, 0.1],
            v: vec![0.0, 0.2, 0.1, -0.3, 0.1],
        };
        let map = enumerate_cells_2d(&net, &slice, &Domain::new(2, -1.0, 1.0), 30).unwrap();
        assert!(map.cells.len() > 1);
        for c in &map.cells {
            assert_eq!(net.forward(&slice.point(c.point)).unwrap().pattern.layers, c.pattern);
        }
        assert!((map.covered_area - map.box_area).abs() < 1e-9 * map.box_area);
    }

    #[test]
    fn csv_lists_points_and_vertices() {
        let map = enumerate_cells_2d(&example_network(), &Slice::identity(), &Domain::new(2, -30.0, 30.0), 40).unwrap();
        let csv = map.to_csv();
        let rows = csv.lines().count() - 1;
        let expected: usize = map.cells.iter().map(|c| 1 + c.vertices.len()).sum();
        assert_eq!(rows, expected);
        assert!(csv.starts_with("cell,pattern,kind,index,s,t\n"));
    }
}
