use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vqa_icl::dataset::{load_vqa_dataset, DatasetKind, DatasetPaths};
use vqa_icl::embed_index::{qa_key_text, EmbeddingTable, Modality};
use vqa_icl::manipulate::{build_trtl_probe, ProbeSpec};
use vqa_icl::metrics::{EvalReport, Metric};
use vqa_icl::oracle::stub::{serve_blocking, StubConfig, StubMode};
use vqa_icl::oracle::OracleSpec;
use vqa_icl::runner::{prepare, run_prepared, EmbedderSpec, ExperimentConfig, RunOptions};
use vqa_icl::synthetic::{generate, SyntheticSpec, DESK_EXPERIMENT};

#[derive(Parser)]
#[command(name = "vqa-icl", version, about = "In-context demonstration harness for VQA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config and its data files without running anything.
    Validate {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Run (or resume) an experiment.
    Run(RunArgs),
    /// Re-emit a finished report in another format.
    Report {
        /// Run directory containing report.json.
        #[arg(short, long)]
        dir: PathBuf,
        #[arg(short, long, value_enum, default_value_t = ReportFormat::Csv)]
        format: ReportFormat,
        /// Write here instead of stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Embed a dataset split into an embedding file.
    IngestEmbeddings(IngestArgs),
    /// Build a task-recognition / task-learning probe set.
    Probe(ProbeArgs),
    /// Serve the stub generation/embedding endpoints.
    ServeStub(StubArgs),
    /// Write a synthetic dataset plus a desk experiment config.
    Synth {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        dim: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the remote oracle endpoint.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    query_count: Option<usize>,
    /// Ignore rows from an earlier run in the same output directory.
    #[arg(long)]
    fresh: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
    CopyCsv,
    Plotdata,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    questions: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long)]
    image_template: Option<String>,
}

impl DatasetArgs {
    fn load(&self) -> Result<vqa_icl::dataset::SupportSet> {
        let paths = DatasetPaths {
            questions: self.questions.clone(),
            annotations: self.annotations.clone(),
            samples: self.samples.clone(),
            image_template: self.image_template.clone(),
        };
        Ok(load_vqa_dataset(&paths, self.kind.into())?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Vqav2,
    Vizwiz,
    Okvqa,
    Synthetic,
}

impl From<KindArg> for DatasetKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Vqav2 => DatasetKind::Vqav2,
            KindArg::Vizwiz => DatasetKind::Vizwiz,
            KindArg::Okvqa => DatasetKind::Okvqa,
            KindArg::Synthetic => DatasetKind::Synthetic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Image,
    Question,
    QuestionAnswer,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Image => Modality::Image,
            ModalityArg::Question => Modality::Question,
            ModalityArg::QuestionAnswer => Modality::QuestionAnswer,
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long, value_enum)]
    modality: ModalityArg,
    /// Embedding service base URL; omit to use the local hashing embedder.
    #[arg(long, env = "VQA_ICL_EMBED_ENDPOINT")]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 512)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeModeArg {
    Standard,
    Mismatch,
    NewMapping,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long, value_enum)]
    mode: ProbeModeArg,
    /// Label renaming for new-mapping, e.g. `--map yes=tiger --map no=lion`.
    #[arg(long = "map", value_parser = parse_pair)]
    mapping: Vec<(String, String)>,
    #[arg(long, default_value_t = 0.5)]
    correct_fraction: f64,
    #[arg(short, long)]
    out: PathBuf,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .ok_or_else(|| format!("expected FROM=TO, got {s:?}"))
}

#[derive(Clone, Copy, ValueEnum)]
enum StubModeArg {
    Echo,
    Fixed,
    Malformed,
}

#[derive(Args)]
struct StubArgs {
    #[arg(long, default_value = "127.0.0.1:8089")]
    addr: String,
    #[arg(long, value_enum, default_value_t = StubModeArg::Fixed)]
    mode: StubModeArg,
    #[arg(long, default_value = "yes")]
    text: String,
    /// Answer the first N generate requests with 503.
    #[arg(long, default_value_t = 0)]
    fail_first: usize,
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn validate(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let p = prepare(&cfg)?;
    println!("config ok");
    println!("fingerprint  {}", p.fingerprint);
    println!("support      {} samples", p.support.samples.len());
    println!("queries      {}", p.query_ids.len());
    println!("arms         {}", cfg.arms.len());
    println!("shots        {:?}", cfg.shots);
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(d) = args.output_dir {
        cfg.output_dir = d;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(n) = args.query_count {
        cfg.query_count = Some(n);
    }
    if let Some(e) = args.endpoint {
        match &mut cfg.oracle {
            OracleSpec::RemoteHttp(p) => p.endpoint = Some(e),
            _ => bail!("--endpoint given but the oracle is not remote_http"),
        }
    }
    let p = prepare(&cfg)?;
    let summary = run_prepared(
        &p,
        &RunOptions {
            fresh: args.fresh,
            ..Default::default()
        },
    )?;
    println!(
        "{} rows ({} resumed, {} failed), {} network calls",
        summary.resumed_rows + summary.new_rows,
        summary.resumed_rows,
        summary.failed_rows,
        summary.network_calls
    );
    if let Some(report) = summary.report {
        report.write_csv(io::stdout().lock(), Metric::Accuracy)?;
        println!("report written to {}", summary.output_dir.display());
    }
    Ok(())
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn report(dir: &Path, format: ReportFormat, out: &Option<PathBuf>) -> Result<()> {
    let rep = EvalReport::read_json(&dir.join("report.json"))?;
    if rep.recompute() != rep.aggregates {
        bail!("report.json aggregates do not match its rows");
    }
    let mut w = sink(out)?;
    match format {
        ReportFormat::Json => writeln!(w, "{}", rep.to_json())?,
        ReportFormat::Csv => rep.write_csv(w, Metric::Accuracy)?,
        ReportFormat::CopyCsv => rep.write_csv(w, Metric::CopyRate)?,
        ReportFormat::Plotdata => rep.write_plotdata(w)?,
    }
    Ok(())
}

fn ingest(args: IngestArgs) -> Result<()> {
    let set = args.dataset.load()?;
    let modality: Modality = args.modality.into();
    let spec = match &args.endpoint {
        Some(e) => EmbedderSpec::Service {
            endpoint: e.clone(),
            dim: args.dim,
            timeout_ms: args.timeout_ms,
        },
        None => EmbedderSpec::Hashing { dim: args.dim },
    };
    let embedder = spec.build();
    let mut table = EmbeddingTable::new(modality, args.dim);
    for chunk in set.samples().chunks(args.batch.max(1)) {
        let inputs: Vec<String> = chunk
            .iter()
            .map(|s| match modality {
                Modality::Image => s.image_ref.clone(),
                Modality::Question => s.question.clone(),
                Modality::QuestionAnswer => qa_key_text(&s.question, &s.canonical_answer),
            })
            .collect();
        let vectors = match modality {
            Modality::Image => embedder.embed_images(&inputs)?,
            _ => embedder.embed_texts(&inputs)?,
        };
        for (s, v) in chunk.iter().zip(&vectors) {
            table.push(s.sample_id, v)?;
        }
        log::info!("{}/{} embedded", table.len(), set.len());
    }
    table.write(&args.out)?;
    println!("{} {} embeddings -> {}", table.len(), modality.as_str(), args.out.display());
    Ok(())
}

fn probe(args: ProbeArgs) -> Result<()> {
    let set = args.dataset.load()?;
    let yes_no = set.filter(|s| s.canonical_answer == "yes" || s.canonical_answer == "no")?;
    let spec = match args.mode {
        ProbeModeArg::Standard => ProbeSpec::standard(),
        ProbeModeArg::Mismatch => ProbeSpec::mismatch(args.correct_fraction),
        ProbeModeArg::NewMapping => {
            let pairs: Vec<(&str, &str)> =
                args.mapping.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            ProbeSpec::new_mapping(&pairs)
        }
    };
    let out = build_trtl_probe(&yes_no, &spec)?;
    out.write_jsonl(&args.out)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in out.samples() {
        *counts.entry(s.canonical_answer.as_str()).or_default() += 1;
    }
    println!("{} yes/no samples -> {} {counts:?}", out.len(), args.out.display());
    Ok(())
}

fn serve_stub(args: StubArgs) -> Result<()> {
    let cfg = StubConfig {
        mode: match args.mode {
            StubModeArg::Echo => StubMode::Echo,
            StubModeArg::Fixed => StubMode::Fixed(args.text),
            StubModeArg::Malformed => StubMode::Malformed,
        },
        fail_first: args.fail_first,
        delay: Duration::from_millis(args.delay_ms),
        embed_dim: args.embed_dim,
    };
    eprintln!("stub listening on http://{}", args.addr);
    serve_blocking(&args.addr, cfg)?;
    Ok(())
}

fn synth(out: &Path, n: usize, seed: u64, dim: usize) -> Result<()> {
    let data = generate(SyntheticSpec { n, seed, dim })?;
    data.write(out)?;
    let cfg = out.join("experiment.toml");
    std::fs::write(&cfg, DESK_EXPERIMENT).with_context(|| format!("writing {}", cfg.display()))?;
    println!("{n} samples written to {}; run with --config {}", out.display(), cfg.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Validate { config } => validate(&config),
        Command::Run(args) => run(args),
        Command::Report { dir, format, out } => report(&dir, format, &out),
        Command::IngestEmbeddings(args) => ingest(args),
        Command::Probe(args) => probe(args),
        Command::ServeStub(args) => serve_stub(args),
        Command::Synth { out, n, seed, dim } => synth(&out, n, seed, dim),
    }
}
