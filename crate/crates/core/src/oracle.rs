//! Query-counting black box around a target network.
//!
//! The target model is a private field; attack code only ever holds a [`PhasedOracle`],
//! which can evaluate the network and nothing else.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    CriticalSearch,
    Signature,
    Filtering,
    Targeted,
    Evaluation,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::CriticalSearch,
        Phase::Signature,
        Phase::Filtering,
        Phase::Targeted,
        Phase::Evaluation,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Phase::CriticalSearch => "critical-search",
            Phase::Signature => "signature",
            Phase::Filtering => "filtering",
            Phase::Targeted => "targeted",
            Phase::Evaluation => "evaluation",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleStats {
    pub total: u64,
    pub per_phase: BTreeMap<String, u64>,
}

impl OracleStats {
    pub fn get(&self, phase: Phase) -> u64 {
        self.per_phase.get(phase.label()).copied().unwrap_or(0)
    }

    /// `log2(total)`, or 0 when nothing was queried.
    pub fn log2_total(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            (self.total as f64).log2()
        }
    }

    /// Counts accumulated since `earlier`.
    pub fn since(&self, earlier: &OracleStats) -> OracleStats {
        let per_phase = self
            .per_phase
            .iter()
            .map(|(k, v)| (k.clone(), v - earlier.per_phase.get(k).copied().unwrap_or(0)))
            .collect();
        OracleStats {
            total: self.total - earlier.total,
            per_phase,
        }
    }
}

pub struct Oracle {
    target: NetworkModel,
    counts: [AtomicU64; 5],
    projection: Vec<f64>,
}

impl Oracle {
    pub fn new(target: NetworkModel) -> Self {
        let d = target.output_dim();
        // Scalar view of vector outputs: a fixed, generic combination of the outputs.
        let projection = if d == 1 {
            vec![1.0]
        } else {
            (0..d).map(|j| 1.0 + (j as f64 + 1.0).sqrt().fract()).collect()
        };
        Self {
            target,
            counts: Default::default(),
            projection,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.target.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.target.output_dim()
    }

    /// Public architecture string; widths are assumed known to the attacker.
    pub fn widths(&self) -> Vec<usize> {
        self.target.widths().to_vec()
    }

    pub fn phase(&self, phase: Phase) -> PhasedOracle<'_> {
        PhasedOracle {
            oracle: self,
            phase,
        }
    }

    pub fn stats(&self) -> OracleStats {
        let mut per_phase = BTreeMap::new();
        let mut total = 0;
        for p in Phase::ALL {
            let c = self.counts[p.index()].load(Ordering::SeqCst);
            total += c;
            per_phase.insert(p.label().to_string(), c);
        }
        OracleStats { total, per_phase }
    }

    pub fn total_queries(&self) -> u64 {
        self.counts.iter().map(|c| c.load(Ordering::SeqCst)).sum()
    }

    fn query(&self, phase: Phase, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{v} in query")));
        }
        self.counts[phase.index()].fetch_add(1, Ordering::Relaxed);
        Ok(self.target.eval(x))
    }
}

/// Oracle handle that charges its queries to one phase.
#[derive(Clone, Copy)]
pub struct PhasedOracle<'a> {
    oracle: &'a Oracle,
    phase: Phase,
}

impl<'a> PhasedOracle<'a> {
    pub fn with_phase(self, phase: Phase) -> PhasedOracle<'a> {
        PhasedOracle {
            oracle: self.oracle,
            phase,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn input_dim(&self) -> usize {
        self.oracle.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.oracle.output_dim()
    }

    pub fn query(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.oracle.query(self.phase, x)
    }

    /// The scalar the attack works with: the output itself for one output,
    /// otherwise a fixed combination of all outputs (still piecewise linear).
    pub fn scalar(&self, x: &[f64]) -> Result<f64> {
        let y = self.query(x)?;
        Ok(project(&self.oracle.projection, &y))
    }

    pub fn project(&self, y: &[f64]) -> f64 {
        project(&self.oracle.projection, y)
    }

    /// `(f(x + step * direction) - f(x)) / step`, two queries.
    pub fn directional_slope(&self, x: &[f64], direction: &[f64], step: f64) -> Result<Vec<f64>> {
        let moved: Vec<f64> = x.iter().zip(direction).map(|(a, d)| a + step * d).collect();
        let f1 = self.query(&moved)?;
        let f0 = self.query(x)?;
        Ok(f1.iter().zip(&f0).map(|(a, b)| (a - b) / step).collect())
    }
}

fn project(w: &[f64], y: &[f64]) -> f64 {
    if w.len() == 1 {
        return y[0];
    }
    let mut acc = 0.0;
    for (a, b) in w.iter().zip(y) {
        acc += a * b;
    }
    acc
}
