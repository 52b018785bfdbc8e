//! Task-recognition / task-learning probes over yes/no questions.
//!
//! * `standard` leaves demonstrations untouched.
//! * `mismatch` keeps exactly `round(correct_fraction * n)` demonstration
//!   answers per sequence and flips the rest (yes <-> no).
//! * `new_mapping` renames the label space (e.g. yes->tiger, no->lion) in
//!   every demonstration and in the expected query answers.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::InContextSequence;
use crate::dataset::{SupportSet, VqaSample};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    #[default]
    Standard,
    Mismatch,
    NewMapping,
}

fn default_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub mode: ProbeMode,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mapping: BTreeMap<String, String>,
    #[serde(default = "default_fraction")]
    pub correct_fraction: f64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            mode: ProbeMode::Standard,
            mapping: BTreeMap::new(),
            correct_fraction: default_fraction(),
        }
    }
}

fn flip(answer: &str) -> Option<&'static str> {
    match answer {
        "yes" => Some("no"),
        "no" => Some("yes"),
        _ => None,
    }
}

impl ProbeSpec {
    pub fn standard() -> Self {
        Self::default()
    }

    pub fn mismatch(correct_fraction: f64) -> Self {
        Self {
            mode: ProbeMode::Mismatch,
            correct_fraction,
            ..Self::default()
        }
    }

    pub fn new_mapping(pairs: &[(&str, &str)]) -> Self {
        Self {
            mode: ProbeMode::NewMapping,
            mapping: pairs
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ProbeMode::Mismatch if !(0.0..=1.0).contains(&self.correct_fraction) => Err(
                Error::Probe(format!("correct_fraction {} outside [0, 1]", self.correct_fraction)),
            ),
            ProbeMode::NewMapping => {
                if self.mapping.is_empty() {
                    return Err(Error::Probe("new_mapping needs a mapping".into()));
                }
                let range: BTreeSet<&String> = self.mapping.values().collect();
                if range.len() != self.mapping.len() {
                    return Err(Error::Probe("mapping is not injective".into()));
                }
                if range.iter().any(|v| self.mapping.contains_key(*v)) {
                    return Err(Error::Probe("mapping range overlaps its domain".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// The reverse bijection (new_mapping only).
    pub fn inverse(&self) -> Self {
        Self {
            mapping: self
                .mapping
                .iter()
                .map(|(a, b)| (b.clone(), a.clone()))
                .collect(),
            ..self.clone()
        }
    }

    fn map_sample(&self, s: &VqaSample) -> Result<VqaSample> {
        let canonical = self.mapping.get(&s.canonical_answer).ok_or_else(|| {
            Error::Probe(format!(
                "sample {} has answer {:?} outside the mapped label space",
                s.sample_id, s.canonical_answer
            ))
        })?;
        let range: BTreeSet<&String> = self.mapping.values().collect();
        let mut out = s.clone();
        for a in &mut out.gt_answers {
            if let Some(m) = self.mapping.get(a) {
                *a = m.clone();
            } else if range.contains(a) {
                return Err(Error::Probe(format!(
                    "sample {} already contains mapped label {a:?}",
                    s.sample_id
                )));
            }
        }
        out.canonical_answer = canonical.clone();
        Ok(out)
    }

    /// Expected answers for scoring a query under this probe.
    pub fn map_query(&self, s: &VqaSample) -> Result<VqaSample> {
        match self.mode {
            ProbeMode::NewMapping => self.map_sample(s),
            _ => Ok(s.clone()),
        }
    }
}

/// Transforms a yes/no supporting set for a probe. Only `new_mapping`
/// changes the set; `mismatch` acts per sequence via
/// [`apply_mismatch_probe`].
pub fn build_trtl_probe(support: &SupportSet, probe: &ProbeSpec) -> Result<SupportSet> {
    probe.validate()?;
    match probe.mode {
        ProbeMode::Standard | ProbeMode::Mismatch => Ok(support.clone()),
        ProbeMode::NewMapping => support.map_samples(|s| probe.map_sample(s)),
    }
}

/// Keeps exactly `round(fraction * n)` answers, flipping the others; which
/// positions stay correct is drawn from `rng`.
pub fn apply_mismatch_probe(
    seq: &InContextSequence,
    correct_fraction: f64,
    rng: &mut StreamRng,
) -> Result<InContextSequence> {
    let n = seq.demos.len();
    let keep = (correct_fraction * n as f64).round() as usize;
    let keep = keep.min(n);
    let kept: BTreeSet<usize> = index::sample(rng, n, keep).into_iter().collect();
    let mut out = seq.clone();
    for (i, d) in out.demos.iter_mut().enumerate() {
        if kept.contains(&i) {
            continue;
        }
        d.answer = flip(&d.answer)
            .ok_or_else(|| Error::Probe(format!("cannot flip non yes/no answer {:?}", d.answer)))?
            .to_string();
    }
    out.provenance.log.push(format!("probe:mismatch:{correct_fraction}"));
    Ok(out)
}
