use std::borrow::Cow;
use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ArmConfig, DatasetConfig, ExperimentConfig};
use crate::dataset::{load_vqa_dataset, read_tag_file, VqaSample};
use crate::embed_index::{load_embeddings, Modality, SimilarityIndex, TextEmbedder};
use crate::error::{Error, Result};
use crate::manipulate::{
    apply_mismatch_probe, build_sequence, build_trtl_probe, KeyTokens, LabelSpace,
    ManipulationContext, ProbeMode,
};
use crate::metrics::{failed_row, score, EvalReport, QueryResult};
use crate::oracle::{
    postprocess_answer, GenerationRequest, MockCopy, MockFixed, MockLookup, Oracle, OracleSpec,
    RemoteOracle,
};
use crate::prompt::{serialize, PromptTemplate};
use crate::rng::stream_rng;
use crate::strategies::{Corpus, RetrievalContext, SqpaDeps, StrategyKind};

pub const ROWS_FILE: &str = "rows.jsonl";
pub const META_FILE: &str = "run.json";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Discard rows from a previous run instead of resuming.
    pub fresh: bool,
    /// Stop after this many new rows (simulates an interruption).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub fingerprint: String,
    pub output_dir: PathBuf,
    pub resumed_rows: usize,
    pub new_rows: usize,
    pub failed_rows: usize,
    pub network_calls: u64,
    /// `None` when the run stopped before covering every cell.
    pub report: Option<EvalReport>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunMeta {
    fingerprint: String,
    config: ExperimentConfig,
}

/// Loads a dataset with its tags and embedding indexes.
pub fn load_corpus(ds: &DatasetConfig) -> Result<Corpus> {
    let mut full = load_vqa_dataset(&ds.paths(), ds.kind)?;
    if let Some(p) = &ds.image_tags {
        full.attach_tags(&read_tag_file(p)?, true)?;
    }
    if let Some(p) = &ds.question_tags {
        full.attach_tags(&read_tag_file(p)?, false)?;
    }
    let mut tables = Vec::new();
    for (m, p) in ds.embeddings.present() {
        tables.push(load_embeddings(p, m, Some(&full))?);
    }
    let set = if ds.yes_no_only {
        full.filter(|s| s.canonical_answer == "yes" || s.canonical_answer == "no")?
    } else {
        full
    };
    let mut corpus = Corpus::new(set);
    for mut t in tables {
        t.retain(|id| corpus.samples.contains(id));
        corpus = corpus.with_index(SimilarityIndex::build(t)?)?;
    }
    Ok(corpus)
}

/// Everything a run needs, loaded and checked.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub fingerprint: String,
    pub support: Corpus,
    /// `None` when queries come from the supporting set.
    pub query_corpus: Option<Corpus>,
    pub query_ids: Vec<u64>,
    pub key_tokens: KeyTokens,
    pub template: PromptTemplate,
}

impl Prepared {
    pub fn queries(&self) -> &Corpus {
        self.query_corpus.as_ref().unwrap_or(&self.support)
    }

    pub fn exclude_self(&self) -> bool {
        self.query_corpus.is_none()
    }
}

fn require_full_index(c: &Corpus, m: Modality, ids: &[u64]) -> Result<()> {
    let index = c.index(m)?;
    match ids.iter().find(|id| !index.contains(**id)) {
        Some(&id) => Err(Error::MissingEmbedding {
            modality: m.as_str().to_string(),
            sample_id: id,
        }),
        None => Ok(()),
    }
}

fn require_tags(c: &Corpus, ids: &[u64], image_side: bool) -> Result<()> {
    for &id in ids {
        let s = c.samples.sample(id)?;
        let t = if image_side { s.image_tags() } else { s.question_tags() };
        if t.is_none_or(|t| t.is_empty()) {
            return Err(Error::MissingTags {
                sample_id: id,
                categories: vec![if image_side { "image" } else { "question" }.to_string()],
            });
        }
    }
    Ok(())
}

/// Validates the config, loads data and checks every input the arms need.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let fingerprint = config.fingerprint()?;
    let support = load_corpus(&config.support)?;
    let query_corpus = config.queries.as_ref().map(load_corpus).transpose()?;
    let queries = query_corpus.as_ref().unwrap_or(&support);

    let mut all: Vec<u64> = queries.samples.ids().collect();
    all.sort_unstable();
    let query_ids = match (&config.query_ids, config.query_count) {
        (Some(ids), _) => {
            for id in ids {
                queries.samples.sample(*id)?;
            }
            let mut ids = ids.clone();
            ids.sort_unstable();
            ids.dedup();
            ids.truncate(config.query_count.unwrap_or(usize::MAX));
            ids
        }
        (None, Some(n)) => all.into_iter().take(n).collect(),
        (None, None) => all,
    };

    let support_ids: Vec<u64> = support.samples.ids().collect();
    let mut kinds: Vec<StrategyKind> = Vec::new();
    for arm in &config.arms {
        kinds.push(arm.strategy.kind);
        kinds.extend(arm.strategy.inner.as_ref().map(|i| i.kind));
        for m in &arm.manipulations {
            if let Some(mo) = m.needs_modality() {
                require_full_index(&support, mo, &support_ids)?;
                require_full_index(queries, mo, &query_ids)?;
            }
        }
    }
    for kind in kinds {
        for (qm, im) in kind.required_modalities() {
            require_full_index(queries, qm, &query_ids)?;
            require_full_index(&support, im, &support_ids)?;
        }
        if kind == StrategyKind::Sqpa {
            require_full_index(&support, Modality::QuestionAnswer, &support_ids)?;
        }
        if kind.uses_image_tags() {
            require_tags(queries, &query_ids, true)?;
        }
        if kind.uses_question_tags() {
            require_tags(queries, &query_ids, false)?;
        }
    }
    if let (Some(e), true) = (&config.sqpa_embedder, support.has_index(Modality::QuestionAnswer)) {
        let dim = support.index(Modality::QuestionAnswer)?.dim();
        if e.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: e.dim(),
            });
        }
    }

    let key_tokens = match &config.query_dataset().key_tokens {
        Some(p) => KeyTokens::load(p)?,
        None => KeyTokens::default(),
    };
    Ok(Prepared {
        config: config.clone(),
        fingerprint,
        support,
        query_corpus,
        query_ids,
        key_tokens,
        template: config.template(),
    })
}

struct Arm<'a> {
    label: String,
    cfg: &'a ArmConfig,
    support: Cow<'a, Corpus>,
    labels: LabelSpace,
    oracle: Arc<dyn Oracle>,
}

fn build_arms<'a>(p: &'a Prepared, remote: Option<&Arc<RemoteOracle>>) -> Result<Vec<Arm<'a>>> {
    let queries = p.queries();
    p.config
        .arms
        .iter()
        .map(|cfg| {
            let support = match cfg.probe.mode {
                ProbeMode::NewMapping => {
                    let mapped = build_trtl_probe(&p.support.samples, &cfg.probe)?;
                    let mut c = Corpus::new(mapped);
                    for m in [Modality::Image, Modality::Question, Modality::QuestionAnswer] {
                        if p.support.has_index(m) {
                            c = c.with_shared_index(p.support.shared_index(m)?)?;
                        }
                    }
                    Cow::Owned(c)
                }
                _ => Cow::Borrowed(&p.support),
            };
            let oracle: Arc<dyn Oracle> = match &p.config.oracle {
                OracleSpec::RemoteHttp(_) => remote.expect("remote oracle built").clone(),
                OracleSpec::MockFixed { text } => Arc::new(MockFixed::new(text.clone())),
                OracleSpec::MockLookup => {
                    let mut table = HashMap::with_capacity(p.query_ids.len());
                    for &id in &p.query_ids {
                        let q = cfg.probe.map_query(queries.samples.sample(id)?)?;
                        table.insert(id, q.canonical_answer);
                    }
                    Arc::new(MockLookup::new(table))
                }
                OracleSpec::MockCopy => Arc::new(MockCopy::new(
                    support.shared_index(Modality::Question)?,
                    queries.shared_index(Modality::Question)?,
                )),
            };
            Ok(Arm {
                label: cfg.label(),
                labels: LabelSpace::from_support(&support.samples),
                cfg,
                support,
                oracle,
            })
        })
        .collect()
}

struct Worker<'a> {
    p: &'a Prepared,
    embedder: Option<&'a dyn TextEmbedder>,
    stops: Vec<String>,
    blur_dir: PathBuf,
}

impl Worker<'_> {
    fn run_one(&self, arm: &Arm<'_>, shots: usize, query: &VqaSample) -> Result<QueryResult> {
        let p = self.p;
        let qid = query.sample_id;
        let spec = arm.cfg.strategy.with_shots(shots);
        let mut rng = stream_rng(p.config.seed, &arm.label, shots, qid);
        let ctx = RetrievalContext {
            support: &arm.support,
            queries: p.queries(),
            exclude_self: p.exclude_self(),
            sqpa: self.embedder.map(|embedder| SqpaDeps {
                oracle: arm.oracle.as_ref(),
                template: &p.template,
                embedder,
            }),
        };
        let list = ctx.retrieve(query, &spec, &mut rng)?;
        let mut seq = build_sequence(&arm.support.samples, query, &list)?;
        if arm.cfg.probe.mode == ProbeMode::Mismatch {
            seq = apply_mismatch_probe(&seq, arm.cfg.probe.correct_fraction, &mut rng)?;
        }
        let mctx = ManipulationContext {
            support: &arm.support,
            queries: p.queries(),
            labels: &arm.labels,
            key_tokens: &p.key_tokens,
            image_root: p.config.query_dataset().image_root.as_deref(),
            blur_dir: Some(&self.blur_dir),
        };
        for m in &arm.cfg.manipulations {
            seq = m.apply(&seq, &mctx, &mut rng)?;
        }
        let prompt = serialize(&seq, &p.template)?;
        let answer = arm.oracle.generate(&GenerationRequest {
            query_id: qid,
            prompt: &prompt,
            sequence: &seq,
        })?;
        let raw = postprocess_answer(&answer.text, &self.stops);
        let expected = arm.cfg.probe.map_query(query)?;
        let demo_ids = seq.demos.iter().map(|d| d.sample_id).collect();
        let demo_answers: Vec<String> = seq.demos.iter().map(|d| d.answer.clone()).collect();
        score(
            &arm.label,
            shots,
            qid,
            &raw,
            &expected.gt_answers,
            demo_ids,
            &demo_answers,
            p.config.normalize_answers,
        )
    }
}

fn read_meta(path: &Path) -> Result<RunMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Resume(format!("{}: {e}", path.display())))
}

/// Reads completed rows, dropping a torn final line.
fn read_rows(path: &Path) -> Result<Vec<QueryResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let complete = match text.rfind('\n') {
        Some(i) => i + 1,
        None => 0,
    };
    if complete < text.len() {
        log::warn!("dropping partial final row in {}", path.display());
        let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
        f.set_len(complete as u64).map_err(|e| Error::io(path, e))?;
    }
    text[..complete]
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Resume(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn open_rows(p: &Prepared, fresh: bool) -> Result<(Vec<QueryResult>, File)> {
    let dir = &p.config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows_path = dir.join(ROWS_FILE);
    let meta_path = dir.join(META_FILE);
    if fresh && rows_path.exists() {
        std::fs::remove_file(&rows_path).map_err(|e| Error::io(&rows_path, e))?;
    }
    let done = if rows_path.exists() {
        let meta = read_meta(&meta_path)?;
        if meta.fingerprint != p.fingerprint {
            return Err(Error::Resume(format!(
                "{} belongs to a different config or data (fingerprint {}, current {}); rerun with a fresh output",
                dir.display(),
                meta.fingerprint,
                p.fingerprint
            )));
        }
        read_rows(&rows_path)?
    } else {
        Vec::new()
    };
    let meta = RunMeta {
        fingerprint: p.fingerprint.clone(),
        config: p.config.clone(),
    };
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("meta serializes"))
        .map_err(|e| Error::io(&meta_path, e))?;
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&rows_path)
        .map_err(|e| Error::io(&rows_path, e))?;
    Ok((done, file))
}

/// Sorts rows into arm, shot-grid and query-id order.
fn sort_rows(rows: &mut [QueryResult], arms: &[String], shots: &[usize]) {
    let pos = |v: &[String], x: &String| v.iter().position(|y| y == x).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| {
        (
            pos(arms, &r.strategy),
            shots.iter().position(|s| *s == r.shots).unwrap_or(usize::MAX),
            r.query_id,
        )
    });
}

/// Runs (or resumes) an experiment and writes its report.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    let p = prepare(config)?;
    run_prepared(&p, opts)
}

pub fn run_prepared(p: &Prepared, opts: &RunOptions) -> Result<RunSummary> {
    let start = Instant::now();
    let remote = match &p.config.oracle {
        OracleSpec::RemoteHttp(params) => {
            Some(Arc::new(RemoteOracle::new(params, p.template.stop_tokens())?))
        }
        _ => None,
    };
    let arms = build_arms(p, remote.as_ref())?;
    let embedder = p.config.sqpa_embedder.as_ref().map(|e| e.build());
    let worker = Worker {
        p,
        embedder: embedder.as_deref(),
        stops: p.template.stop_tokens(),
        blur_dir: p.config.output_dir.join("blurred"),
    };

    let (mut rows, mut file) = open_rows(p, opts.fresh)?;
    let resumed_rows = rows.len();
    let done: HashSet<(String, usize, u64)> = rows.iter().map(QueryResult::key).collect();
    let queries = p.queries();
    let mut work: Vec<(usize, usize, &VqaSample)> = Vec::new();
    for (ai, arm) in arms.iter().enumerate() {
        for &shots in &p.config.shots {
            for &qid in &p.query_ids {
                if !done.contains(&(arm.label.clone(), shots, qid)) {
                    work.push((ai, shots, queries.samples.sample(qid)?));
                }
            }
        }
    }
    let budget = opts.stop_after.unwrap_or(usize::MAX).min(work.len());
    log::info!(
        "{} rows resumed, {} to run ({} arms x {} shot counts x {} queries)",
        resumed_rows,
        work.len(),
        arms.len(),
        p.config.shots.len(),
        p.query_ids.len()
    );

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<QueryResult>();
    let mut new_rows = 0;
    let mut write_err: Option<Error> = None;
    let rows_path = p.config.output_dir.join(ROWS_FILE);
    std::thread::scope(|scope| {
        for _ in 0..p.config.workers.min(budget.max(1)) {
            let tx = tx.clone();
            let (next, work, arms, worker) = (&next, &work, &arms, &worker);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= budget {
                    break;
                }
                let (ai, shots, q) = work[i];
                let arm = &arms[ai];
                let row = worker.run_one(arm, shots, q).unwrap_or_else(|e| {
                    log::warn!("{} {}-shot query {}: {e}", arm.label, shots, q.sample_id);
                    failed_row(&arm.label, shots, q.sample_id, e.to_string())
                });
                if tx.send(row).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for row in rx {
            if write_err.is_none() {
                let mut line = serde_json::to_string(&row).expect("row serializes");
                line.push('\n');
                if let Err(e) = file.write_all(line.as_bytes()) {
                    write_err = Some(Error::io(&rows_path, e));
                    // Stop handing out work; in-flight rows are dropped.
                    next.store(usize::MAX / 2, Ordering::SeqCst);
                }
            }
            new_rows += 1;
            if new_rows % 500 == 0 {
                log::info!("{new_rows}/{budget} rows");
            }
            rows.push(row);
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }

    let network_calls = remote.as_ref().map_or(0, |r| r.network_calls());
    let failed_rows = rows.iter().filter(|r| r.failed()).count();
    let complete = new_rows == work.len();
    let report = if complete {
        let labels: Vec<String> = arms.iter().map(|a| a.label.clone()).collect();
        sort_rows(&mut rows, &labels, &p.config.shots);
        let report = EvalReport::new(p.fingerprint.clone(), rows, &p.config.shots);
        report.write_all(&p.config.output_dir)?;
        Some(report)
    } else {
        None
    };
    log::info!(
        "run finished in {:.2}s: {new_rows} new rows, {failed_rows} failed, {network_calls} network calls",
        start.elapsed().as_secs_f64()
    );
    Ok(RunSummary {
        fingerprint: p.fingerprint.clone(),
        output_dir: p.config.output_dir.clone(),
        resumed_rows,
        new_rows,
        failed_rows,
        network_calls,
        report,
    })
}
