//! Every tunable of an attack run in one serializable struct.
//!
//! Keys are dotted paths (`filter.probes`, `signs.mode`); files are TOML with one
//! table per section.

use serde::{Deserialize, Serialize};

use crate::completion::{SignMode, TargetedConfig};
use crate::error::{Error, Result};
use crate::evaluation::ZeroRule;
use crate::filter::FilterConfig;
use crate::merge::MergeConfig;
use crate::search::{Domain, HarvestConfig, SearchConfig};
use crate::signature::SignatureConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub low: f64,
    pub high: f64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self { low: 0.0, high: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    /// Run the depth test on every critical point. Off reproduces the unfiltered
    /// attack.
    pub depth_test: bool,
    /// Kinks closer than this fraction of the domain diagonal to an extracted
    /// hyperplane belong to the prefix and are skipped.
    pub prefix_distance: f64,
    /// Critical-point evaluations kept in the attack output for the last layer.
    pub stored_pairs: usize,
    /// Flat-region checks spent looking for a zero-query sign witness.
    pub witness_candidates: usize,
    /// What to do when more components survive filtering than the layer has neurons.
    pub on_excess: ExcessRule,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            depth_test: true,
            prefix_distance: 1e-7,
            stored_pairs: 256,
            witness_candidates: 32,
            on_excess: ExcessRule::Fail,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExcessRule {
    Fail,
    /// Keep the `d_i` largest.
    Largest,
    /// Keep the `d_i` with the lowest τ, larger first on ties. A deeper neuron whose
    /// hyperplane never bends within reach passes the depth test on most of its
    /// points, but rarely on all of them.
    Cleanest,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignsConfig {
    pub mode: SignMode,
}

impl Default for SignsConfig {
    fn default() -> Self {
        Self {
            mode: SignMode::GroundTruth,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub activation_samples: usize,
    pub coverage_samples: usize,
    pub delta_samples: usize,
    pub epsilon: f64,
    /// Activation fractions below this count as zero; 0 means "no sample hit it".
    pub zero_threshold: f64,
    /// Relative tolerance for counting an extracted weight as recovered.
    pub weight_tolerance: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            activation_samples: 200_000,
            coverage_samples: 1_000_000,
            delta_samples: 1_000_000,
            epsilon: 0.05,
            zero_threshold: 0.0,
            weight_tolerance: 1e-4,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn zero_rule(&self) -> ZeroRule {
        if self.zero_threshold > 0.0 {
            ZeroRule::Below(self.zero_threshold)
        } else {
            ZeroRule::Strict
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub domain: DomainConfig,
    pub harvest: HarvestConfig,
    pub search: SearchConfig,
    pub signature: SignatureConfig,
    pub merge: MergeConfig,
    pub filter: FilterConfig,
    pub targeted: TargetedConfig,
    pub signs: SignsConfig,
    pub attack: AttackSettings,
    pub eval: EvalConfig,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
}

/// Keys that may be absent, meaning "pick automatically".
const OPTIONAL_KEYS: &[&str] = &["filter.tau_threshold"];

impl AttackConfig {
    pub fn domain(&self, dim: usize) -> Domain {
        Domain::new(dim, self.domain.low, self.domain.high)
    }

    /// Named variants of the defaults. `double-points` doubles the critical-point
    /// budget for the comparison against the standard 3,000.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::default();
        match name {
            "default" => {}
            "double-points" => c.harvest.count = 6000,
            "unfiltered" => {
                c.attack.depth_test = false;
                c.filter.size_fraction = 0.0;
                c.filter.unknown_half_rule = false;
                c.filter.tau_threshold = Some(1.0);
            }
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        }
        Ok(c)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Sets one dotted key from its text form, with the type of the current value.
    /// `auto` clears an optional key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().ok_or_else(|| Error::Config("empty key".into()))?;
        let mut table = root
            .as_table_mut()
            .ok_or_else(|| Error::Config("config is not a table".into()))?;
        for p in path {
            table = table
                .get_mut(*p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        }
        let optional = OPTIONAL_KEYS.contains(&key);
        let parsed = match table.get(*last) {
            Some(current) => parse_like(current, value),
            None if optional => parse_like(&toml::Value::Float(0.0), value),
            None => return Err(Error::Config(format!("unknown key {key:?}"))),
        };
        if optional && value == "auto" {
            table.remove(*last);
        } else {
            let v = parsed.ok_or_else(|| Error::Config(format!("bad value {value:?} for {key}")))?;
            table.insert((*last).to_string(), v);
        }
        let updated: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// All leaf keys with their current values, sorted.
    pub fn entries(&self) -> Vec<(String, String)> {
        fn walk(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
            match v {
                toml::Value::Table(t) => {
                    for (k, v) in t {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, v, out);
                    }
                }
                toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
                other => out.push((prefix.to_string(), other.to_string())),
            }
        }
        let mut out = Vec::new();
        let root = toml::Value::try_from(self).expect("config always serializes");
        walk("", &root, &mut out);
        for k in OPTIONAL_KEYS {
            if !out.iter().any(|(key, _)| key == k) {
                out.push(((*k).to_string(), "auto".to_string()));
            }
        }
        out.sort();
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("search.tolerance", self.search.tolerance),
            ("search.refine_floor", self.search.refine_floor),
            ("search.slope_step", self.search.slope_step),
            ("signature.eps_initial", self.signature.eps_initial),
            ("signature.eps_agreement", self.signature.eps_agreement),
            ("signature.rank_threshold", self.signature.rank_threshold),
            ("signature.residual_tol", self.signature.residual_tol),
            ("merge.proportional_tol", self.merge.proportional_tol),
            ("filter.probe_step", self.filter.probe_step),
            ("targeted.initial_step", self.targeted.initial_step),
            ("attack.prefix_distance", self.attack.prefix_distance),
            ("eval.epsilon", self.eval.epsilon),
            ("eval.weight_tolerance", self.eval.weight_tolerance),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if let Some(t) = self.filter.tau_threshold {
            if !(t > 0.0) {
                return Err(Error::Config(format!("filter.tau_threshold must be positive, got {t}")));
            }
        }
        if !(self.filter.probe_margin >= 0.0) {
            return Err(Error::Config("filter.probe_margin must not be negative".into()));
        }
        if !(self.filter.size_fraction >= 0.0 && self.filter.size_fraction <= 1.0) {
            return Err(Error::Config("filter.size_fraction must lie in [0, 1]".into()));
        }
        if !(self.domain.low < self.domain.high) {
            return Err(Error::Config("domain.low must be below domain.high".into()));
        }
        if self.merge.min_shared == 0 {
            return Err(Error::Config("merge.min_shared must be at least 1".into()));
        }
        if !(self.eval.zero_threshold >= 0.0) {
            return Err(Error::Config("eval.zero_threshold must not be negative".into()));
        }
        Ok(())
    }
}

fn parse_like(current: &toml::Value, text: &str) -> Option<toml::Value> {
    match current {
        toml::Value::Integer(_) => text.parse::<i64>().ok().filter(|v| *v >= 0).map(toml::Value::Integer),
        toml::Value::Float(_) => text.parse::<f64>().ok().map(toml::Value::Float),
        toml::Value::Boolean(_) => text.parse::<bool>().ok().map(toml::Value::Boolean),
        toml::Value::String(_) => Some(toml::Value::String(text.to_string())),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = AttackConfig::default();
        let back = AttackConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c.entries(), back.entries());
        assert_eq!(back.harvest.count, 3000);
        assert_eq!(back.filter.probes, 100);
        assert_eq!(back.eval.activation_samples, 200_000);
    }

    #[test]
    fn set_parses_by_type() {
        let mut c = AttackConfig::default();
        c.set("filter.probes", "40").unwrap();
        c.set("filter.tau_threshold", "0.2").unwrap();
        c.set("signs.mode", "zero-query").unwrap();
        c.set("merge.allow_threeway", "true").unwrap();
        c.set("eval.epsilon", "0.01").unwrap();
        assert_eq!(c.filter.probes, 40);
        assert_eq!(c.filter.tau_threshold, Some(0.2));
        assert_eq!(c.signs.mode, SignMode::ZeroQuery);
        assert!(c.merge.allow_threeway);
        c.set("filter.tau_threshold", "auto").unwrap();
        assert_eq!(c.filter.tau_threshold, None);
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        let mut c = AttackConfig::default();
        assert!(matches!(c.set("filter.nope", "1"), Err(Error::Config(_))));
        assert!(matches!(c.set("filter.probes", "many"), Err(Error::Config(_))));
        assert!(matches!(c.set("signs.mode", "guess"), Err(Error::Config(_))));
        assert!(matches!(c.set("eval.epsilon", "-1"), Err(Error::Config(_))));
        assert!(matches!(AttackConfig::from_toml("[filter]\nprobez = 3\n"), Err(Error::Config(_))));
        // A failed set leaves the config untouched.
        assert_eq!(c.eval.epsilon, 0.05);
    }

    #[test]
    fn partial_files_keep_other_defaults() {
        let c = AttackConfig::from_toml("threads = 2\n[harvest]\ncount = 500\n").unwrap();
        assert_eq!(c.harvest.count, 500);
        assert_eq!(c.threads, 2);
        assert_eq!(c.filter.size_fraction, 0.1);
    }

    #[test]
    fn presets() {
        assert_eq!(AttackConfig::preset("double-points").unwrap().harvest.count, 6000);
        assert!(!AttackConfig::preset("unfiltered").unwrap().attack.depth_test);
        assert!(AttackConfig::preset("fast").is_err());
    }
}
