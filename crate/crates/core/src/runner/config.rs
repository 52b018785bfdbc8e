//! Experiment configuration (TOML).
//!
//! Relative paths are resolved against the config file's directory and
//! `${VAR}` references are replaced from the environment before parsing.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetKind, DatasetPaths};
use crate::embed_index::{EmbeddingClient, HashingEmbedder, Modality, TextEmbedder};
use crate::error::{Error, Result};
use crate::manipulate::{Manipulation, ProbeMode, ProbeSpec};
use crate::oracle::OracleSpec;
use crate::prompt::{default_template, PromptTemplate, TemplateOverrides};
use crate::strategies::{StrategyKind, StrategySpec};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_answer: Option<PathBuf>,
}

impl EmbeddingPaths {
    pub fn get(&self, m: Modality) -> Option<&Path> {
        match m {
            Modality::Image => self.image.as_deref(),
            Modality::Question => self.question.as_deref(),
            Modality::QuestionAnswer => self.question_answer.as_deref(),
        }
    }

    pub fn present(&self) -> Vec<(Modality, &Path)> {
        [Modality::Image, Modality::Question, Modality::QuestionAnswer]
            .into_iter()
            .filter_map(|m| self.get(m).map(|p| (m, p)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub questions: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_template: Option<String>,
    /// Directory that relative image refs are resolved against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
    #[serde(default)]
    pub embeddings: EmbeddingPaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_tags: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_tags: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_tokens: Option<PathBuf>,
    /// Keep only yes/no questions (probe experiments).
    #[serde(default)]
    pub yes_no_only: bool,
}

impl DatasetConfig {
    pub fn paths(&self) -> DatasetPaths {
        DatasetPaths {
            questions: self.questions.clone(),
            annotations: self.annotations.clone(),
            samples: self.samples.clone(),
            image_template: self.image_template.clone(),
        }
    }

    /// Every data file referenced, in a fixed order.
    pub fn files(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = [&self.questions, &self.annotations, &self.samples]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path)
            .collect();
        out.extend(self.embeddings.present().into_iter().map(|(_, p)| p));
        out.extend(
            [&self.image_tags, &self.question_tags, &self.key_tokens]
                .into_iter()
                .flatten()
                .map(PathBuf::as_path),
        );
        out
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.questions);
        fix(&mut self.annotations);
        fix(&mut self.samples);
        fix(&mut self.image_root);
        fix(&mut self.embeddings.image);
        fix(&mut self.embeddings.question);
        fix(&mut self.embeddings.question_answer);
        fix(&mut self.image_tags);
        fix(&mut self.question_tags);
        fix(&mut self.key_tokens);
    }
}

/// Text embedder for SQPA's pseudo-answer keys and for ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderSpec {
    Hashing {
        dim: usize,
    },
    Service {
        endpoint: String,
        dim: usize,
        #[serde(default = "default_embed_timeout")]
        timeout_ms: u64,
    },
}

fn default_embed_timeout() -> u64 {
    30_000
}

impl EmbedderSpec {
    pub fn dim(&self) -> usize {
        match self {
            EmbedderSpec::Hashing { dim } | EmbedderSpec::Service { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> Box<dyn TextEmbedder> {
        match self {
            EmbedderSpec::Hashing { dim } => Box::new(HashingEmbedder::new(*dim)),
            EmbedderSpec::Service {
                endpoint,
                dim,
                timeout_ms,
            } => Box::new(EmbeddingClient::new(
                endpoint.clone(),
                *dim,
                Duration::from_millis(*timeout_ms),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    /// Row label; defaults to the strategy label plus manipulations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// `shots` here is ignored; the grid supplies it.
    pub strategy: StrategySpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub manipulations: Vec<Manipulation>,
    #[serde(default)]
    pub probe: ProbeSpec,
}

fn manipulation_label(m: &Manipulation) -> String {
    match m {
        Manipulation::Mismatch { mode } => format!("mismatch({})", mode.label()),
        Manipulation::Reorder { by } => format!("reorder({by:?})").to_lowercase(),
        Manipulation::Reverse => "reverse".into(),
        Manipulation::Instruction { text } => format!("instruction({text})"),
        Manipulation::Declarative => "declarative".into(),
        Manipulation::DegradeQuestion => "degrade_question".into(),
        Manipulation::BlurQuery { sigma } => format!("blur({sigma})"),
    }
}

impl ArmConfig {
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let mut s = self.strategy.label();
        for m in &self.manipulations {
            s.push('+');
            s.push_str(&manipulation_label(m));
        }
        match self.probe.mode {
            ProbeMode::Standard => {}
            ProbeMode::Mismatch => s.push_str(&format!("+probe:mismatch({})", self.probe.correct_fraction)),
            ProbeMode::NewMapping => s.push_str("+probe:new_mapping"),
        }
        s
    }
}

fn default_shots() -> Vec<usize> {
    vec![4, 8, 16]
}
fn default_workers() -> usize {
    1
}
fn default_output() -> PathBuf {
    PathBuf::from("runs/latest")
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    /// Evaluate only the first `query_count` queries (by id).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_ids: Option<Vec<u64>>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub normalize_answers: bool,
    pub support: DatasetConfig,
    /// Separate query split; when absent, queries are drawn from the
    /// supporting set and never retrieve themselves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<DatasetConfig>,
    #[serde(default)]
    pub template: TemplateOverrides,
    pub oracle: OracleSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sqpa_embedder: Option<EmbedderSpec>,
    pub arms: Vec<ArmConfig>,
}

/// Replaces `${NAME}` with the environment value; unset names are errors.
pub fn interpolate_env(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| Error::Config("unterminated ${ in config".into()))?;
        let name = &after[..end];
        let value = std::env::var(name)
            .map_err(|_| Error::Config(format!("environment variable {name} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn sha256_file(path: &Path) -> Result<String> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(&interpolate_env(text)?).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.support.resolve(base);
        if let Some(q) = &mut self.queries {
            q.resolve(base);
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    pub fn template(&self) -> PromptTemplate {
        self.template.apply(default_template())
    }

    pub fn data_files(&self) -> Vec<&Path> {
        let mut files = self.support.files();
        if let Some(q) = &self.queries {
            files.extend(q.files());
        }
        files
    }

    /// Query-side dataset (the supporting set when none is configured).
    pub fn query_dataset(&self) -> &DatasetConfig {
        self.queries.as_ref().unwrap_or(&self.support)
    }

    /// Canonical JSON of everything that affects results. Execution
    /// settings (`workers`, `output_dir`) and file locations are left out;
    /// file contents enter the fingerprint through their hashes.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("object");
        obj.remove("workers");
        obj.remove("output_dir");
        for side in ["support", "queries"] {
            if let Some(ds) = obj.get_mut(side).and_then(|d| d.as_object_mut()) {
                for key in [
                    "questions",
                    "annotations",
                    "samples",
                    "image_root",
                    "embeddings",
                    "image_tags",
                    "question_tags",
                    "key_tokens",
                ] {
                    ds.remove(key);
                }
            }
        }
        // serde_json maps are sorted, so this string is canonical.
        serde_json::to_string(&v).expect("value serializes")
    }

    /// `sha256(canonical config, then each data file's role and sha256)`.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.canonical_json().as_bytes());
        for (role, ds) in [("support", Some(&self.support)), ("queries", self.queries.as_ref())] {
            let Some(ds) = ds else { continue };
            let labelled: Vec<(&str, Option<&Path>)> = vec![
                ("questions", ds.questions.as_deref()),
                ("annotations", ds.annotations.as_deref()),
                ("samples", ds.samples.as_deref()),
                ("image_emb", ds.embeddings.image.as_deref()),
                ("question_emb", ds.embeddings.question.as_deref()),
                ("qa_emb", ds.embeddings.question_answer.as_deref()),
                ("image_tags", ds.image_tags.as_deref()),
                ("question_tags", ds.question_tags.as_deref()),
                ("key_tokens", ds.key_tokens.as_deref()),
            ];
            for (name, path) in labelled {
                if let Some(p) = path {
                    h.update(format!("\n{role}.{name}=").as_bytes());
                    h.update(sha256_file(p)?.as_bytes());
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.shots.is_empty() || self.shots.contains(&0) {
            return cfg_err("shots must be a non-empty list of positive counts".into());
        }
        if self.workers == 0 {
            return cfg_err("workers must be positive".into());
        }
        if self.arms.is_empty() {
            return cfg_err("at least one arm is required".into());
        }
        if self.query_count == Some(0) {
            return cfg_err("query_count must be positive".into());
        }
        for f in self.data_files() {
            if !f.is_file() {
                return cfg_err(format!("referenced file does not exist: {}", f.display()));
            }
        }
        self.template().validate()?;
        self.oracle.validate()?;

        let mut labels = BTreeSet::new();
        let q = self.query_dataset();
        for arm in &self.arms {
            let label = arm.label();
            if !labels.insert(label.clone()) {
                return cfg_err(format!("duplicate arm label {label:?}; set `name`"));
            }
            for &s in &self.shots {
                arm.strategy.with_shots(s).validate()?;
            }
            arm.probe.validate()?;
            for kind in std::iter::once(arm.strategy.kind)
                .chain(arm.strategy.inner.as_ref().map(|i| i.kind))
            {
                self.check_strategy_inputs(&label, kind, q)?;
            }
            for m in &arm.manipulations {
                if let Some(mo) = m.needs_modality() {
                    self.require_emb(&label, &self.support, mo, "supporting")?;
                    self.require_emb(&label, q, mo, "query")?;
                }
                if let Manipulation::Instruction { text } = m {
                    if text.trim().is_empty() {
                        return cfg_err(format!("{label}: empty instruction"));
                    }
                }
            }
        }
        if matches!(self.oracle, OracleSpec::MockCopy) {
            self.require_emb("mock_copy", &self.support, Modality::Question, "supporting")?;
            self.require_emb("mock_copy", q, Modality::Question, "query")?;
        }
        Ok(())
    }

    fn require_emb(&self, who: &str, ds: &DatasetConfig, m: Modality, side: &str) -> Result<()> {
        if ds.embeddings.get(m).is_none() {
            return Err(Error::Config(format!(
                "{who}: needs {} embeddings for the {side} set",
                m.as_str()
            )));
        }
        Ok(())
    }

    fn check_strategy_inputs(&self, label: &str, kind: StrategyKind, q: &DatasetConfig) -> Result<()> {
        if kind == StrategyKind::Sqpa {
            if self.sqpa_embedder.is_none() {
                return Err(Error::Config(format!("{label}: SQPA needs `sqpa_embedder`")));
            }
            return self.require_emb(label, &self.support, Modality::QuestionAnswer, "supporting");
        }
        for (qm, im) in kind.required_modalities() {
            self.require_emb(label, q, qm, "query")?;
            self.require_emb(label, &self.support, im, "supporting")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 1
[support]
kind = "synthetic"
samples = "s.jsonl"
[oracle]
kind = "mock_fixed"
text = "yes"
[[arms]]
strategy = { kind = "RS" }
"#;

    #[test]
    fn defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.shots, vec![4, 8, 16]);
        assert_eq!(c.workers, 1);
        assert!(c.normalize_answers);
        assert_eq!(c.arms[0].label(), "RS");
    }

    #[test]
    fn seed_is_mandatory() {
        let text = MINIMAL.replace("seed = 1", "");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn env_interpolation() {
        std::env::set_var("VQA_ICL_TEST_TEXT", "banana");
        assert_eq!(interpolate_env("a ${VQA_ICL_TEST_TEXT} b").unwrap(), "a banana b");
        assert!(interpolate_env("${VQA_ICL_SURELY_UNSET_VAR}").is_err());
        assert!(interpolate_env("${UNTERMINATED").is_err());
    }

    #[test]
    fn canonical_json_ignores_execution_settings() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.workers = 8;
        b.output_dir = "elsewhere".into();
        b.support.samples = Some("/abs/s.jsonl".into());
        assert_eq!(a.canonical_json(), b.canonical_json());
        b.seed = 2;
        assert_ne!(a.canonical_json(), b.canonical_json());
    }

    #[test]
    fn arm_labels() {
        let text = MINIMAL.replace(
            "strategy = { kind = \"RS\" }",
            "strategy = { kind = \"SQPA\", inner = { kind = \"SI\", shots = 4 } }\nmanipulations = [{ op = \"mismatch\", mode = \"MA\" }]",
        );
        let c = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(c.arms[0].label(), "SQPA(SI-4)+mismatch(MA)");
    }
}
