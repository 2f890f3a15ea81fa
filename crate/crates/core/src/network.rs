//! Fully connected ReLU networks in exact 64-bit arithmetic.
//!
//! Layers are indexed from 1: layer `i` maps the `d_{i-1}` outputs of the previous
//! layer (or the input when `i == 1`) to `d_i` pre-activations. The last layer is
//! linear; every other layer is followed by a ReLU.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Magic first line of a model file.
pub const MODEL_MAGIC: &str = "RELUXT1";

/// Sequential dot product. The accumulation order is fixed so repeated evaluations
/// (and evaluations on other machines) agree bit for bit.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// One affine layer `x -> A x + b`, weights stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("empty layer {rows}x{cols}")));
        }
        if weights.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} weights for a {rows}x{cols} layer",
                weights.len()
            )));
        }
        if bias.len() != rows {
            return Err(Error::Shape(format!(
                "bias of length {} for {rows} neurons",
                bias.len()
            )));
        }
        if let Some(v) = weights.iter().chain(&bias).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{v} in layer parameters")));
        }
        Ok(Self {
            rows,
            cols,
            weights,
            bias,
        })
    }

    /// Builds a layer from nested rows; convenient for small hand-written networks.
    pub fn from_rows(rows: &[Vec<f64>], bias: &[f64]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged weight rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat(), bias.to_vec())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.cols..(k + 1) * self.cols]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.weights[k * self.cols..(k + 1) * self.cols]
    }

    pub fn weight(&self, k: usize, j: usize) -> f64 {
        self.weights[k * self.cols + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Pre-activations `A x + b`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|k| dot(self.row(k), x) + self.bias[k])
            .collect()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.weights)
    }
}

/// Per hidden layer, which neurons have a strictly positive pre-activation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationPattern {
    pub layers: Vec<Vec<bool>>,
    /// `(layer, neuron)` pairs (1-based layer) whose pre-activation was exactly zero.
    /// Those neurons are recorded as inactive.
    pub exact_zeros: Vec<(usize, usize)>,
}

impl ActivationPattern {
    pub fn is_active(&self, layer: usize, neuron: usize) -> bool {
        self.layers[layer - 1][neuron]
    }

    pub fn is_ambiguous(&self) -> bool {
        !self.exact_zeros.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Vec<f64>,
    pub pattern: ActivationPattern,
}

/// Affine map `x -> Γ x + γ` equal to the pre-activations of one layer near a point.
#[derive(Clone, Debug)]
pub struct LocalAffineMap {
    pub layer: usize,
    pub matrix: DMatrix<f64>,
    pub offset: Vec<f64>,
    /// Some pre-activation of an earlier layer was exactly zero at the base point,
    /// so the map is one of several valid one-sided maps.
    pub boundary_ambiguous: bool,
}

impl LocalAffineMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.matrix.nrows())
            .map(|k| {
                let mut acc = 0.0;
                for (j, xj) in x.iter().enumerate() {
                    acc += self.matrix[(k, j)] * xj;
                }
                acc + self.offset[k]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel {
    widths: Vec<usize>,
    layers: Vec<Layer>,
}

impl NetworkModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a network needs at least one layer".into()));
        }
        let mut widths = vec![layers[0].cols];
        for (idx, layer) in layers.iter().enumerate() {
            if layer.cols != widths[idx] {
                return Err(Error::Shape(format!(
                    "layer {} expects {} inputs but the previous width is {}",
                    idx + 1,
                    layer.cols,
                    widths[idx]
                )));
            }
            widths.push(layer.rows);
        }
        Ok(Self { widths, layers })
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn architecture(&self) -> String {
        format_architecture(&self.widths)
    }

    /// Layer `i`, 1-based.
    pub fn layer(&self, i: usize) -> &Layer {
        &self.layers[i - 1]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        &mut self.layers[i - 1]
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{v} in input")));
        }
        Ok(())
    }

    fn check_layer(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.layers.len() {
            return Err(Error::LayerIndex {
                index: i,
                max: self.layers.len(),
            });
        }
        Ok(())
    }

    /// Network output without any bookkeeping. Caller guarantees the input length.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if idx < last {
                relu_in_place(&mut h);
            }
        }
        h
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_input(x)?;
        let mut pattern = ActivationPattern {
            layers: Vec::with_capacity(self.depth()),
            exact_zeros: Vec::new(),
        };
        let mut h = x.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if idx < self.depth() {
                let mut bits = Vec::with_capacity(h.len());
                for (k, v) in h.iter_mut().enumerate() {
                    if *v == 0.0 {
                        pattern.exact_zeros.push((idx + 1, k));
                    }
                    bits.push(*v > 0.0);
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
                pattern.layers.push(bits);
            }
        }
        Ok(Forward { output: h, pattern })
    }

    /// Pre-activation `F^(i)(x)`, no trailing ReLU.
    pub fn partial_forward(&self, x: &[f64], i: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_layer(i)?;
        let mut h = x.to_vec();
        for (idx, layer) in self.layers[..i].iter().enumerate() {
            h = layer.apply(&h);
            if idx + 1 < i {
                relu_in_place(&mut h);
            }
        }
        Ok(h)
    }

    /// Pre-activations of every layer, output layer last.
    pub fn pre_activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let z = layer.apply(&h);
            h = z.iter().map(|v| v.max(0.0)).collect();
            out.push(z);
        }
        out
    }

    /// Affine map reproducing `F^(i)` on the cell containing `x`:
    /// `Γ = A^(i) I^(i-1) A^(i-1) ... I^(1) A^(1)` with `I^(j)` the active masks at `x`.
    pub fn local_affine(&self, x: &[f64], i: usize) -> Result<LocalAffineMap> {
        self.check_input(x)?;
        self.check_layer(i)?;
        let mut ambiguous = false;
        let mut h = x.to_vec();
        let mut jac = self.layers[0].matrix();
        for (idx, layer) in self.layers[..i].iter().enumerate() {
            let z = layer.apply(&h);
            if idx > 0 {
                jac = layer.matrix() * jac;
            }
            if idx + 1 == i {
                let gx = &jac * nalgebra::DVector::from_column_slice(x);
                let offset = z.iter().zip(gx.iter()).map(|(a, b)| a - b).collect();
                return Ok(LocalAffineMap {
                    layer: i,
                    matrix: jac,
                    offset,
                    boundary_ambiguous: ambiguous,
                });
            }
            for (k, v) in z.iter().enumerate() {
                if *v == 0.0 {
                    ambiguous = true;
                }
                if *v <= 0.0 {
                    jac.row_mut(k).fill(0.0);
                }
            }
            h = z.iter().map(|v| v.max(0.0)).collect();
        }
        unreachable!("layer index checked above")
    }

    /// Hidden layers `1..=upto` as an attack prefix.
    pub fn prefix(&self, upto: usize) -> Result<Prefix> {
        if upto > self.depth() {
            return Err(Error::LayerIndex {
                index: upto,
                max: self.depth(),
            });
        }
        Prefix::new(self.input_dim(), self.layers[..upto].to_vec())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MODEL_MAGIC);
        out.push('\n');
        out.push_str(&self.architecture());
        out.push('\n');
        for (idx, layer) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "# layer {}", idx + 1);
            for k in 0..layer.rows {
                write_row(&mut out, layer.row(k));
            }
            write_row(&mut out, &layer.bias);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());

        let fmt_err = |line: usize, msg: &str| Error::Format {
            line,
            msg: msg.to_string(),
        };
        match lines.next() {
            Some((_, MODEL_MAGIC)) => {}
            Some((n, _)) => return Err(fmt_err(n, "missing RELUXT1 header")),
            None => return Err(fmt_err(0, "empty file")),
        }
        let (n, arch) = lines
            .next()
            .ok_or_else(|| fmt_err(0, "missing architecture line"))?;
        let widths = parse_architecture(arch).map_err(|_| fmt_err(n, "bad architecture line"))?;

        let mut layers = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let (cols, rows) = (w[0], w[1]);
            let mut weights = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                weights.extend(read_row(&mut lines, cols)?);
            }
            let bias = read_row(&mut lines, rows)?;
            layers.push(Layer::new(rows, cols, weights, bias)?);
        }
        if let Some((n, _)) = lines.next() {
            return Err(Error::Shape(format!(
                "unexpected data after the last layer (line {n})"
            )));
        }
        Self::new(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn relu_in_place(h: &mut [f64]) {
    for v in h {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

fn write_row(out: &mut String, values: &[f64]) {
    for (j, v) in values.iter().enumerate() {
        if j > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{:016x}", v.to_bits());
    }
    out.push_str(" #");
    for v in values {
        let _ = write!(out, " {v}");
    }
    out.push('\n');
}

fn read_row<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    expected: usize,
) -> Result<Vec<f64>> {
    let (n, line) = lines
        .next()
        .ok_or_else(|| Error::Shape("file ends before all layers are read".into()))?;
    let values = line
        .split_whitespace()
        .map(|tok| {
            if tok.len() != 16 {
                return Err(Error::Format {
                    line: n,
                    msg: format!("`{tok}` is not a 16-digit hex float"),
                });
            }
            let bits = u64::from_str_radix(tok, 16).map_err(|_| Error::Format {
                line: n,
                msg: format!("`{tok}` is not hexadecimal"),
            })?;
            let v = f64::from_bits(bits);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{v} at line {n}")));
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != expected {
        return Err(Error::Shape(format!(
            "line {n} has {} values, expected {expected}",
            values.len()
        )));
    }
    Ok(values)
}

pub fn parse_architecture(s: &str) -> Result<Vec<usize>> {
    let widths = s
        .trim()
        .split('-')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Architecture(s.to_string()))?;
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::Architecture(s.to_string()));
    }
    Ok(widths)
}

pub fn format_architecture(widths: &[usize]) -> String {
    widths
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("-")
}

/// Extracted (or true) hidden layers `1..i-1` in front of an attacked layer `i`.
///
/// With no layers the prefix is the identity on the input.
#[derive(Clone, Debug)]
pub struct Prefix {
    input_dim: usize,
    layers: Vec<Layer>,
}

/// Everything the attack needs about the prefix at one input point.
#[derive(Clone, Debug)]
pub struct Cell {
    /// Pre-activations of each prefix layer.
    pub pre: Vec<Vec<f64>>,
    /// Jacobians of those pre-activations with respect to the input (`d_j x d_0`).
    pub jac: Vec<DMatrix<f64>>,
    /// `σ(F^(i-1)(x))`, or `x` itself for an empty prefix.
    pub features: Vec<f64>,
    /// Active neurons of the last prefix layer (all true for an empty prefix).
    pub mask: Vec<bool>,
}

impl Cell {
    pub fn feature_dim(&self) -> usize {
        self.features.len()
    }

    /// `Γ v` where `Γ` is the masked Jacobian of the features.
    pub fn jacobian_times(&self, v: &[f64]) -> Vec<f64> {
        match self.jac.last() {
            None => v.to_vec(),
            Some(j) => (0..j.nrows())
                .map(|k| {
                    if !self.mask[k] {
                        return 0.0;
                    }
                    let mut acc = 0.0;
                    for (c, vc) in v.iter().enumerate() {
                        acc += j[(k, c)] * vc;
                    }
                    acc
                })
                .collect(),
        }
    }

    /// `Γ^T y`, a vector in input space.
    pub fn jacobian_t_times(&self, y: &[f64]) -> Vec<f64> {
        match self.jac.last() {
            None => y.to_vec(),
            Some(j) => {
                let mut out = vec![0.0; j.ncols()];
                for k in 0..j.nrows() {
                    if !self.mask[k] || y[k] == 0.0 {
                        continue;
                    }
                    for (c, o) in out.iter_mut().enumerate() {
                        *o += j[(k, c)] * y[k];
                    }
                }
                out
            }
        }
    }

    /// Smallest `|pre-activation|` over all prefix neurons, with its position.
    pub fn nearest_boundary(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (l, z) in self.pre.iter().enumerate() {
            for (k, v) in z.iter().enumerate() {
                if best.is_none_or(|b| v.abs() < b.2) {
                    best = Some((l + 1, k, v.abs()));
                }
            }
        }
        best
    }
}

impl Prefix {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut width = input_dim;
        for (idx, l) in layers.iter().enumerate() {
            if l.cols != width {
                return Err(Error::Shape(format!(
                    "prefix layer {} expects {} inputs, got {width}",
                    idx + 1,
                    l.cols
                )));
            }
            width = l.rows;
        }
        Ok(Self { input_dim, layers })
    }

    pub fn empty(input_dim: usize) -> Self {
        Self {
            input_dim,
            layers: Vec::new(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Width of the features fed to the attacked layer.
    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, Layer::rows)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Index of the attacked layer.
    pub fn target_layer(&self) -> usize {
        self.layers.len() + 1
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.apply(&h);
            relu_in_place(&mut h);
        }
        h
    }

    /// Pre-activations of each prefix layer.
    pub fn pre_activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let z = layer.apply(&h);
            h = z.iter().map(|v| v.max(0.0)).collect();
            out.push(z);
        }
        out
    }

    /// Active mask of the last prefix layer.
    pub fn mask(&self, x: &[f64]) -> Vec<bool> {
        match self.pre_activations(x).pop() {
            None => vec![true; self.input_dim],
            Some(z) => z.iter().map(|v| *v > 0.0).collect(),
        }
    }

    /// Pre-activations at `x` and their rates of change along `v`, without building
    /// Jacobians.
    pub fn directional(&self, x: &[f64], v: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut rates = Vec::with_capacity(self.layers.len());
        let (mut h, mut dh) = (x.to_vec(), v.to_vec());
        for layer in &self.layers {
            let z = layer.apply(&h);
            let dz: Vec<f64> = (0..layer.rows).map(|k| dot(layer.row(k), &dh)).collect();
            h = z.iter().map(|v| v.max(0.0)).collect();
            dh = dz.iter().zip(&z).map(|(d, z)| if *z > 0.0 { *d } else { 0.0 }).collect();
            pre.push(z);
            rates.push(dz);
        }
        (pre, rates)
    }

    /// Input-space gradient of `y · features(x)` inside the cell of `x`.
    pub fn pullback(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.pullback_through(x, self.layers.len(), y)
    }

    /// Input-space gradient of the pre-activation of neuron `k` in the last prefix layer.
    pub fn pre_activation_gradient(&self, x: &[f64], k: usize) -> Vec<f64> {
        match self.layers.last() {
            None => {
                let mut e = vec![0.0; self.input_dim];
                e[k] = 1.0;
                e
            }
            Some(last) => self.pullback_through(x, self.layers.len() - 1, last.row(k)),
        }
    }

    /// Gradient of `y · σ(layer upto)` with respect to the input.
    fn pullback_through(&self, x: &[f64], upto: usize, y: &[f64]) -> Vec<f64> {
        let pre = self.pre_activations(x);
        let mut g = y.to_vec();
        for (layer, z) in self.layers[..upto].iter().zip(&pre).rev() {
            let mut next = vec![0.0; layer.cols];
            for (k, zk) in z.iter().enumerate() {
                if *zk > 0.0 && g[k] != 0.0 {
                    for (n, w) in next.iter_mut().zip(layer.row(k)) {
                        *n += w * g[k];
                    }
                }
            }
            g = next;
        }
        g
    }

    /// Distance from `x` to the nearest prefix hyperplane, measured with the local
    /// linear map of each neuron. Infinite for an empty prefix.
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        let cell = self.cell(x);
        let mut best = f64::INFINITY;
        for (z, j) in cell.pre.iter().zip(&cell.jac) {
            for (k, zk) in z.iter().enumerate() {
                let g = j.row(k).norm();
                if g > 0.0 {
                    best = best.min(zk.abs() / g);
                }
            }
        }
        best
    }

    pub fn cell(&self, x: &[f64]) -> Cell {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut jac: Vec<DMatrix<f64>> = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let z = layer.apply(&h);
            let j = match jac.last() {
                None => layer.matrix(),
                Some(prev) => {
                    let prev_z: &Vec<f64> = pre.last().unwrap();
                    let mut masked = prev.clone();
                    for (k, v) in prev_z.iter().enumerate() {
                        if *v <= 0.0 {
                            masked.row_mut(k).fill(0.0);
                        }
                    }
                    layer.matrix() * masked
                }
            };
            h = z.iter().map(|v| v.max(0.0)).collect();
            pre.push(z);
            jac.push(j);
        }
        let mask = match pre.last() {
            None => vec![true; self.input_dim],
            Some(z) => z.iter().map(|v| *v > 0.0).collect(),
        };
        Cell {
            pre,
            jac,
            features: h,
            mask,
        }
    }
}

/// Parameters for [`generate_random`].
#[derive(Clone, Debug)]
pub struct RandomInit {
    /// Weights are drawn uniformly from `[-weight_range, weight_range]`.
    pub weight_range: f64,
    /// Biases are drawn uniformly from `[-bias_range, bias_range]`.
    pub bias_range: f64,
    /// Rescale each layer on sampled inputs so neurons switch on about half the time.
    pub calibrate: bool,
    pub calibration_samples: usize,
    /// Box the calibration inputs are drawn from.
    pub domain: (f64, f64),
}

impl Default for RandomInit {
    fn default() -> Self {
        Self {
            weight_range: 1.0,
            bias_range: 0.5,
            calibrate: true,
            calibration_samples: 512,
            domain: (0.0, 1.0),
        }
    }
}

/// Seeded random network.
///
/// With calibration on, every layer is divided by the mean standard deviation of its
/// pre-activations over random inputs, and each neuron's bias is re-centred so its
/// pre-activation median sits near `bias * std`. Neurons then fire on roughly
/// 30-70% of the domain, which keeps deep layers from dying out.
pub fn generate_random(widths: &[usize], seed: u64, init: &RandomInit) -> Result<NetworkModel> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::Architecture(format_architecture(widths)));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for w in widths.windows(2) {
        let (cols, rows) = (w[0], w[1]);
        let weights = (0..rows * cols)
            .map(|_| rng.random_range(-init.weight_range..=init.weight_range))
            .collect();
        let bias = (0..rows)
            .map(|_| rng.random_range(-init.bias_range..=init.bias_range))
            .collect();
        layers.push(Layer::new(rows, cols, weights, bias)?);
    }
    if !init.calibrate || init.calibration_samples < 2 {
        return NetworkModel::new(layers);
    }

    let (lo, hi) = init.domain;
    let mut inputs: Vec<Vec<f64>> = (0..init.calibration_samples)
        .map(|_| (0..widths[0]).map(|_| rng.random_range(lo..=hi)).collect())
        .collect();
    let last = layers.len() - 1;
    for (idx, layer) in layers.iter_mut().enumerate() {
        let n = inputs.len() as f64;
        let rows = layer.rows;
        // Pre-activations without the bias.
        let z: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| (0..rows).map(|k| dot(layer.row(k), x)).collect())
            .collect();
        let mut mean = vec![0.0; rows];
        let mut std = vec![0.0; rows];
        for k in 0..rows {
            mean[k] = z.iter().map(|v| v[k]).sum::<f64>() / n;
            let var = z.iter().map(|v| (v[k] - mean[k]).powi(2)).sum::<f64>() / n;
            std[k] = var.sqrt();
        }
        let scale = std.iter().sum::<f64>() / rows as f64;
        let scale = if scale > 0.0 { scale } else { 1.0 };
        for v in layer.weights.iter_mut() {
            *v /= scale;
        }
        if idx < last {
            for k in 0..rows {
                let spread = if std[k] > 0.0 { std[k] } else { scale };
                let offset = if init.bias_range > 0.0 {
                    0.5 * layer.bias[k] / init.bias_range
                } else {
                    0.0
                };
                layer.bias[k] = (offset * spread - mean[k]) / scale;
            }
            inputs = inputs
                .iter()
                .map(|x| {
                    let mut h = layer.apply(x);
                    relu_in_place(&mut h);
                    h
                })
                .collect();
        }
    }
    NetworkModel::new(layers)
}

/// The 2-3-2-1 network used throughout the documentation and tests.
pub fn example_network() -> NetworkModel {
    NetworkModel::new(vec![
        Layer::from_rows(
            &[vec![1.0, 1.0], vec![1.0, -1.0], vec![0.5, 2.0]],
            &[1.0, -2.0, -5.0],
        )
        .unwrap(),
        Layer::from_rows(&[vec![2.0, -4.0, -1.0], vec![-3.0, 4.0, 5.0]], &[-2.0, -3.0]).unwrap(),
        Layer::from_rows(&[vec![1.0, -1.0]], &[3.0]).unwrap(),
    ])
    .unwrap()
}
