//! Experimental design: draws the parameter vector of each simulation.
//!
//! Monte Carlo draws are counter based. The generator for simulation `i`
//! is ChaCha8 seeded with the run seed and positioned on stream `i`, so
//! `next_params(i)` is a pure function of `(space, seed, i)` no matter in
//! which order or in which process it is evaluated.

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Named real parameters defining one simulation instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    names: Arc<[String]>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(names: Arc<[String]>, values: Vec<f64>) -> Self {
        assert_eq!(names.len(), values.len(), "one value per name");
        Self { names, values }
    }

    /// Positional parameters named `p0, p1, ...`.
    pub fn unnamed(values: Vec<f64>) -> Self {
        let names: Arc<[String]> = (0..values.len()).map(|i| format!("p{i}")).collect();
        Self { names, values }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shared_names(&self) -> Arc<[String]> {
        self.names.clone()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().copied())
    }

    /// `k=v,k=v` form used on the client command line.
    pub fn to_kv_string(&self) -> String {
        self.iter()
            .map(|(k, v)| format!("{k}={v:?}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamKind {
    UniformReal { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
    DiscreteSet { values: Vec<f64> },
    Fixed { value: f64 },
}

impl ParamKind {
    /// Support bounds, `None` for unbounded directions.
    pub fn support(&self) -> (Option<f64>, Option<f64>) {
        match self {
            Self::UniformReal { lo, hi } => (Some(*lo), Some(*hi)),
            Self::Normal { .. } => (None, None),
            Self::DiscreteSet { values } => (
                values.iter().copied().reduce(f64::min),
                values.iter().copied().reduce(f64::max),
            ),
            Self::Fixed { value } => (Some(*value), Some(*value)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEntry", into = "RawEntry")]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
}

impl ParamEntry {
    pub fn uniform(name: &str, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::UniformReal { lo, hi },
        }
    }
    pub fn normal(name: &str, mean: f64, std: f64) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Normal { mean, std },
        }
    }
    pub fn discrete(name: &str, values: &[f64]) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::DiscreteSet {
                values: values.to_vec(),
            },
        }
    }
    pub fn fixed(name: &str, value: f64) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Fixed { value },
        }
    }

    fn validate(&self) -> Result<(), SamplerError> {
        let bad = |reason: &'static str| SamplerError::InvalidEntry {
            name: self.name.clone(),
            reason,
        };
        match &self.kind {
            ParamKind::UniformReal { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(bad("uniform_real needs finite lo < hi"));
                }
            }
            ParamKind::Normal { mean, std } => {
                if !(mean.is_finite() && std.is_finite() && *std > 0.0) {
                    return Err(bad("normal needs finite mean and std > 0"));
                }
            }
            ParamKind::DiscreteSet { values } => {
                if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                    return Err(bad("discrete_set needs at least one finite value"));
                }
            }
            ParamKind::Fixed { value } => {
                if !value.is_finite() {
                    return Err(bad("fixed value must be finite"));
                }
            }
        }
        Ok(())
    }
}

/// Flat on-disk form of a [`ParamEntry`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
}

impl TryFrom<RawEntry> for ParamEntry {
    type Error = String;

    fn try_from(r: RawEntry) -> Result<Self, String> {
        let need = |v: Option<f64>, key: &str| {
            v.ok_or_else(|| format!("parameter `{}` ({}) is missing `{key}`", r.name, r.kind))
        };
        let kind = match r.kind.as_str() {
            "uniform_real" => ParamKind::UniformReal {
                lo: need(r.lo, "lo")?,
                hi: need(r.hi, "hi")?,
            },
            "normal" => ParamKind::Normal {
                mean: need(r.mean, "mean")?,
                std: need(r.std, "std")?,
            },
            "discrete_set" => ParamKind::DiscreteSet {
                values: r
                    .values
                    .clone()
                    .ok_or_else(|| format!("parameter `{}` is missing `values`", r.name))?,
            },
            "fixed" => ParamKind::Fixed {
                value: need(r.value, "value")?,
            },
            other => return Err(format!("unknown parameter kind `{other}`")),
        };
        let entry = ParamEntry { name: r.name, kind };
        entry.validate().map_err(|e| e.to_string())?;
        Ok(entry)
    }
}

impl From<ParamEntry> for RawEntry {
    fn from(e: ParamEntry) -> Self {
        let mut r = RawEntry {
            name: e.name,
            kind: String::new(),
            lo: None,
            hi: None,
            mean: None,
            std: None,
            values: None,
            value: None,
        };
        match e.kind {
            ParamKind::UniformReal { lo, hi } => {
                r.kind = "uniform_real".into();
                r.lo = Some(lo);
                r.hi = Some(hi);
            }
            ParamKind::Normal { mean, std } => {
                r.kind = "normal".into();
                r.mean = Some(mean);
                r.std = Some(std);
            }
            ParamKind::DiscreteSet { values } => {
                r.kind = "discrete_set".into();
                r.values = Some(values);
            }
            ParamKind::Fixed { value } => {
                r.kind = "fixed".into();
                r.value = Some(value);
            }
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpace {
    entries: Vec<ParamEntry>,
    names: Arc<[String]>,
}

impl ParamSpace {
    pub fn new(entries: Vec<ParamEntry>) -> Result<Self, SamplerError> {
        let mut seen = HashSet::new();
        for e in &entries {
            e.validate()?;
            if !seen.insert(e.name.as_str()) {
                return Err(SamplerError::DuplicateName(e.name.clone()));
            }
        }
        let names = entries.iter().map(|e| e.name.clone()).collect();
        Ok(Self { entries, names })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn names(&self) -> Arc<[String]> {
        self.names.clone()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Wraps raw values (e.g. from a ParamAssign message) with this space's names.
    pub fn vector(&self, values: Vec<f64>) -> Result<ParamVector, SamplerError> {
        if values.len() != self.entries.len() {
            return Err(SamplerError::Arity {
                expected: self.entries.len(),
                got: values.len(),
            });
        }
        Ok(ParamVector::new(self.names.clone(), values))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingStrategy {
    MonteCarlo {
        seed: u64,
    },
    /// Walks the discrete values of `axis` in ascending order, each repeated
    /// `ceil(ensemble / |values|)` times; other axes are drawn as Monte Carlo.
    OrderedSweep {
        axis: String,
        seed: u64,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("parameter `{name}`: {reason}")]
    InvalidEntry { name: String, reason: &'static str },
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("sweep axis `{0}` must be a discrete_set parameter")]
    BadSweepAxis(String),
    #[error("index {index} outside ensemble of {ensemble_size}")]
    IndexOutOfRange { index: u64, ensemble_size: u64 },
    #[error("expected {expected} parameter values, got {got}")]
    Arity { expected: usize, got: usize },
}

#[derive(Debug, Clone)]
pub struct Sampler {
    space: ParamSpace,
    strategy: SamplingStrategy,
    ensemble_size: u64,
    sweep: Option<(usize, Vec<f64>)>,
}

impl Sampler {
    pub fn new(
        space: ParamSpace,
        strategy: SamplingStrategy,
        ensemble_size: u64,
    ) -> Result<Self, SamplerError> {
        let sweep = match &strategy {
            SamplingStrategy::MonteCarlo { .. } => None,
            SamplingStrategy::OrderedSweep { axis, .. } => {
                let idx = space
                    .index_of(axis)
                    .ok_or_else(|| SamplerError::BadSweepAxis(axis.clone()))?;
                let ParamKind::DiscreteSet { values } = &space.entries[idx].kind else {
                    return Err(SamplerError::BadSweepAxis(axis.clone()));
                };
                let mut sorted = values.clone();
                sorted.sort_by(f64::total_cmp);
                Some((idx, sorted))
            }
        };
        Ok(Self {
            space,
            strategy,
            ensemble_size,
            sweep,
        })
    }

    pub fn space(&self) -> &ParamSpace {
        &self.space
    }

    pub fn ensemble_size(&self) -> u64 {
        self.ensemble_size
    }

    pub fn next_params(&self, index: u64) -> Result<ParamVector, SamplerError> {
        if index >= self.ensemble_size {
            return Err(SamplerError::IndexOutOfRange {
                index,
                ensemble_size: self.ensemble_size,
            });
        }
        let seed = match &self.strategy {
            SamplingStrategy::MonteCarlo { seed } | SamplingStrategy::OrderedSweep { seed, .. } => {
                *seed
            }
        };
        let mut values = monte_carlo_draw(&self.space, seed, index);
        if let Some((axis, sorted)) = &self.sweep {
            let per = self.ensemble_size.div_ceil(sorted.len() as u64).max(1);
            let slot = ((index / per) as usize).min(sorted.len() - 1);
            values[*axis] = sorted[slot];
        }
        Ok(ParamVector::new(self.space.names(), values))
    }
}

/// One Monte Carlo draw of every entry, pure in `(seed, index)`.
pub fn monte_carlo_draw(space: &ParamSpace, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    space
        .entries
        .iter()
        .map(|e| match &e.kind {
            ParamKind::UniformReal { lo, hi } => rng.random_range(*lo..*hi),
            ParamKind::Normal { mean, std } => Normal::new(*mean, *std)
                .expect("validated std > 0")
                .sample(&mut rng),
            ParamKind::DiscreteSet { values } => values[rng.random_range(0..values.len())],
            ParamKind::Fixed { value } => *value,
        })
        .collect()
}

/// Parses `k=v,k=v` into pairs, keeping order.
pub fn parse_kv(s: &str) -> Result<Vec<(String, f64)>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{p}`"))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| format!("`{k}` has non-numeric value `{v}`"))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rho_values() -> Vec<f64> {
        vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0]
    }

    #[test]
    fn fixed_entry_always_same() {
        let space = ParamSpace::new(vec![ParamEntry::fixed("t", 300.0)]).unwrap();
        let s = Sampler::new(space, SamplingStrategy::MonteCarlo { seed: 1 }, 50).unwrap();
        for i in 0..50 {
            assert_eq!(s.next_params(i).unwrap().values(), &[300.0]);
        }
    }

    #[test]
    fn ordered_sweep_repeats_in_order() {
        let space = ParamSpace::new(vec![
            ParamEntry::normal("x0", 15.0, 30.0),
            ParamEntry::discrete("rho", &[100.0, 0.0, 40.0, 20.0, 80.0, 60.0]),
        ])
        .unwrap();
        let s = Sampler::new(
            space,
            SamplingStrategy::OrderedSweep {
                axis: "rho".into(),
                seed: 3,
            },
            12,
        )
        .unwrap();
        let rhos: Vec<f64> = (0..12)
            .map(|i| s.next_params(i).unwrap().get("rho").unwrap())
            .collect();
        let expected: Vec<f64> = rho_values().iter().flat_map(|&v| [v, v]).collect();
        assert_eq!(rhos, expected);
    }

    #[test]
    fn draws_are_pure_in_seed_and_index() {
        let space = ParamSpace::new(vec![
            ParamEntry::uniform("a", 100.0, 500.0),
            ParamEntry::normal("b", 15.0, 30.0),
            ParamEntry::discrete("c", &rho_values()),
        ])
        .unwrap();
        let s = Sampler::new(space.clone(), SamplingStrategy::MonteCarlo { seed: 9 }, 100).unwrap();
        let forward: Vec<_> = (0..100).map(|i| s.next_params(i).unwrap()).collect();
        let backward: Vec<_> = (0..100).rev().map(|i| s.next_params(i).unwrap()).collect();
        for (i, p) in forward.iter().enumerate() {
            assert_eq!(p, &backward[99 - i]);
        }
        assert_ne!(forward[0], forward[1]);
        let other = Sampler::new(space, SamplingStrategy::MonteCarlo { seed: 10 }, 100).unwrap();
        assert_ne!(other.next_params(0).unwrap(), forward[0]);
    }

    #[test]
    fn rejects_bad_spaces() {
        assert!(ParamSpace::new(vec![ParamEntry::uniform("a", 2.0, 1.0)]).is_err());
        assert!(ParamSpace::new(vec![ParamEntry::normal("a", 0.0, 0.0)]).is_err());
        assert!(ParamSpace::new(vec![ParamEntry::discrete("a", &[])]).is_err());
        assert_eq!(
            ParamSpace::new(vec![ParamEntry::fixed("a", 1.0), ParamEntry::fixed("a", 2.0)])
                .unwrap_err(),
            SamplerError::DuplicateName("a".into())
        );
        let space = ParamSpace::new(vec![ParamEntry::uniform("a", 0.0, 1.0)]).unwrap();
        assert!(Sampler::new(
            space.clone(),
            SamplingStrategy::OrderedSweep {
                axis: "a".into(),
                seed: 0
            },
            4
        )
        .is_err());
        let s = Sampler::new(space, SamplingStrategy::MonteCarlo { seed: 0 }, 4).unwrap();
        assert!(matches!(
            s.next_params(4),
            Err(SamplerError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn entry_toml_round_trip_and_strictness() {
        #[derive(Deserialize, Serialize)]
        struct W {
            p: Vec<ParamEntry>,
        }
        let w: W = toml::from_str(
            r#"
            [[p]]
            name = "rho"
            kind = "discrete_set"
            values = [0.0, 20.0]
            [[p]]
            name = "x0"
            kind = "normal"
            mean = 15.0
            std = 30.0
        "#,
        )
        .unwrap();
        assert_eq!(w.p[0], ParamEntry::discrete("rho", &[0.0, 20.0]));
        assert_eq!(w.p[1], ParamEntry::normal("x0", 15.0, 30.0));
        let again: W = toml::from_str(&toml::to_string(&w).unwrap()).unwrap();
        assert_eq!(again.p, w.p);

        let typo = toml::from_str::<W>("[[p]]\nname='a'\nkind='fixed'\nvalu=1.0\n");
        assert!(typo.is_err());
        let bad = toml::from_str::<W>("[[p]]\nname='a'\nkind='uniform_real'\nlo=3.0\nhi=1.0\n");
        assert!(bad.is_err());
    }

    #[test]
    fn kv_parsing() {
        assert_eq!(
            parse_kv("rho=28, x0=-1.5e0").unwrap(),
            vec![("rho".to_string(), 28.0), ("x0".to_string(), -1.5)]
        );
        assert!(parse_kv("rho").is_err());
        assert!(parse_kv("rho=abc").is_err());
        assert!(parse_kv("").unwrap().is_empty());
    }
}
