use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use phonicl_core::corpus::{self, DatasetFormat, Example};
use phonicl_core::g2p;
use phonicl_core::harness::{self, EvalReport, MetricKind, RunManifest, TableFormat};
use phonicl_core::inference::CacheMode;
use phonicl_core::metrics::MetricConfig;
use phonicl_core::promptkit;
use phonicl_core::retrieve::{self, Bm25Params, Channel, RetrievalResult, RetrieveOptions, Retriever, StrategyId, VectorStore};
use phonicl_core::tokenize::Tokenizer;

#[derive(Parser)]
#[command(name = "phonicl", version, about = "Phoneme-augmented in-context example retrieval and evaluation")]
struct Cli {
    /// Experiment manifest (JSON).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, transliterate and split every dataset of a manifest.
    Prepare {
        /// Directory for `<task>.<lang>.{pool,test}.jsonl` and split manifests.
        #[arg(long)]
        out: PathBuf,
    },
    /// Transliterate text with a profile; reads stdin lines when --text is absent.
    Transliterate {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        lang: String,
        #[arg(long)]
        text: Option<String>,
    },
    /// Build a BM25 index snapshot for one channel of a pool.
    Index {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, value_enum)]
        channel: ChannelArg,
        #[command(flatten)]
        tok: TokArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select demonstrations for each query; writes JSONL retrieval results.
    Retrieve(RetrieveArgs),
    /// Run a full experiment from a manifest.
    Run {
        #[arg(long, value_enum)]
        cache_mode: Option<CacheModeArg>,
        #[arg(long)]
        output_dir: Option<String>,
        /// Also print the score table.
        #[arg(long)]
        table: bool,
    },
    /// Score a hypothesis file against a reference file (one segment per line).
    Evaluate {
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long, default_value = "eng")]
        lang: String,
    },
    /// Overlap, gap and table views over run outputs.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Print the built-in prompt templates.
    DumpTemplates {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Analyze {
    /// Percentage of shared demonstrations between two retrieval files.
    Overlap {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Latin vs non-Latin gap and gains over Random.
    Gap {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        latin: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        nonlatin: Vec<String>,
        #[arg(long, value_enum, default_value_t = FormatArg::Text)]
        format: FormatArg,
    },
    /// Render a report's scores.
    Table {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Text)]
        format: FormatArg,
    },
}

#[derive(Args)]
struct TokArgs {
    #[arg(long, value_enum, default_value_t = TokKind::Ws)]
    tok_kind: TokKind,
    /// HF-style tokenizer.json for `--tok-kind bpe`.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
}

impl TokArgs {
    fn build(&self) -> Result<Tokenizer> {
        let kind = match self.tok_kind {
            TokKind::Ws => "ws",
            TokKind::Cs => "cs",
            TokKind::Bpe => "bpe",
        };
        Tokenizer::from_kind(kind, self.tokenizer.as_deref()).context("loading tokenizer")
    }
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// e.g. random:7, script, ipa, mixed, mixed:script+roman, harmonic, split-half:ipa-first
    #[arg(long)]
    strategy: String,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Seed for `random` / `split-half:shuffle` when none is given inline.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    tok: TokArgs,
    #[arg(long, default_value_t = 1.5)]
    k1: f64,
    #[arg(long, default_value_t = 0.75)]
    b: f64,
    /// Min-max normalize channel scores before fusion.
    #[arg(long)]
    normalize: bool,
    /// Vector sidecar for `dense:` strategies.
    #[arg(long)]
    vectors: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TokKind {
    Ws,
    Cs,
    Bpe,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelArg {
    Script,
    Ipa,
    Roman,
}

impl From<ChannelArg> for Channel {
    fn from(c: ChannelArg) -> Self {
        match c {
            ChannelArg::Script => Channel::Script,
            ChannelArg::Ipa => Channel::Ipa,
            ChannelArg::Roman => Channel::Roman,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CacheModeArg {
    Record,
    Replay,
    Passthrough,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Bleu,
    Chrf,
    F1,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Csv,
}

impl From<FormatArg> for TableFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Text => TableFormat::Text,
            FormatArg::Csv => TableFormat::Csv,
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let manifest = || -> Result<RunManifest> {
        let path = cli.manifest.as_deref().context("this command needs --manifest")?;
        RunManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
    };
    match &cli.command {
        Command::Prepare { out } => prepare(&manifest()?, out),
        Command::Transliterate { profiles, lang, text } => transliterate(profiles, lang, text.as_deref()),
        Command::Index { pool, channel, tok, out } => {
            let examples = load_examples(pool)?;
            let index = retrieve::build_index(&examples, (*channel).into(), &tok.build()?)?;
            retrieve::save_index(&index, out)?;
            eprintln!("indexed {} documents ({} terms)", index.n_docs(), index.postings.len());
            Ok(())
        }
        Command::Retrieve(args) => retrieve_cmd(args),
        Command::Run {
            cache_mode,
            output_dir,
            table,
        } => {
            let mut m = manifest()?;
            if let Some(mode) = cache_mode {
                m.cache.mode = match mode {
                    CacheModeArg::Record => CacheMode::Record,
                    CacheModeArg::Replay => CacheMode::Replay,
                    CacheModeArg::Passthrough => CacheMode::Passthrough,
                };
            }
            if let Some(dir) = output_dir {
                // Relative to the working directory, not the manifest.
                m.output_dir = std::path::absolute(dir)?.display().to_string();
            }
            let report = harness::run_experiment(&m)?;
            let failed: usize = report.scores.iter().map(|r| r.n_failed).sum();
            if failed > 0 {
                eprintln!("warning: {failed} items failed; see completions.jsonl");
            }
            if *table {
                print!("{}", harness::render_report(&report, TableFormat::Text));
            }
            eprintln!("wrote {}", m.resolve(&m.output_dir).join("report.json").display());
            Ok(())
        }
        Command::Evaluate {
            hyps,
            refs,
            metric,
            lang,
        } => {
            let h = read_lines(hyps)?;
            let r = read_lines(refs)?;
            let kind = match metric {
                MetricArg::Bleu => MetricKind::Bleu,
                MetricArg::Chrf => MetricKind::Chrf,
                MetricArg::F1 => MetricKind::F1,
            };
            let cfg = match &cli.manifest {
                Some(_) => manifest()?.metrics,
                None => MetricConfig::default(),
            };
            let score = kind.score(&h, &r, lang, &cfg)?;
            println!("{} {score:.4}", kind.as_str());
            Ok(())
        }
        Command::Analyze(a) => analyze(a),
        Command::DumpTemplates { out } => {
            let text = match &cli.manifest {
                Some(_) => {
                    let m = manifest()?;
                    match &m.templates {
                        Some(p) => promptkit::dump_templates(&promptkit::load_templates(&m.resolve(p))?),
                        None => promptkit::DEFAULT_TEMPLATES.to_string(),
                    }
                }
                None => promptkit::DEFAULT_TEMPLATES.to_string(),
            };
            match out {
                Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
                None => {
                    io::stdout().write_all(text.as_bytes())?;
                    Ok(())
                }
            }
        }
    }
}

fn load_examples(path: &Path) -> Result<Vec<Example>> {
    corpus::load_dataset(path, DatasetFormat::from_path(path)).with_context(|| format!("reading {}", path.display()))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn prepare(m: &RunManifest, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    for spec in &m.datasets {
        let data = harness::prepare_dataset(m, spec)?;
        let key = data.key();
        fs::write(out.join(format!("{key}.pool.jsonl")), corpus::to_jsonl(&data.pool))?;
        fs::write(out.join(format!("{key}.test.jsonl")), corpus::to_jsonl(&data.test))?;
        fs::write(out.join(format!("{key}.split.json")), data.split_manifest.to_json())?;
        eprintln!("{key}: pool {} test {}", data.pool.len(), data.test.len());
    }
    Ok(())
}

fn transliterate(profiles: &Path, lang: &str, text: Option<&str>) -> Result<()> {
    let profile = g2p::load_profile(profiles, lang)?;
    let mut stdout = io::stdout().lock();
    match text {
        Some(t) => writeln!(stdout, "{}", profile.transliterate(t))?,
        None => {
            for line in io::stdin().lock().lines() {
                writeln!(stdout, "{}", profile.transliterate(&line?))?;
            }
        }
    }
    Ok(())
}

fn retrieve_cmd(args: &RetrieveArgs) -> Result<()> {
    let pool = load_examples(&args.pool)?;
    let queries = load_examples(&args.queries)?;
    let strategy = StrategyId::parse_with_seed(&args.strategy, args.seed)?;
    let params = Bm25Params {
        k1: args.k1,
        b: args.b,
        ..Bm25Params::default()
    };
    let mut retriever = Retriever::build(&pool, &strategy.channels(), args.tok.build()?, params)?
        .with_options(RetrieveOptions {
            normalize: args.normalize,
        });
    if let StrategyId::Dense(path) = &strategy {
        let p = args.vectors.clone().unwrap_or_else(|| PathBuf::from(path));
        retriever = retriever.with_dense(VectorStore::load(&p)?);
    }
    let mut out = String::new();
    for r in retriever.retrieve_batch(&queries, &strategy, args.k, args.parallelism) {
        out.push_str(&serde_json::to_string(&r?)?);
        out.push('\n');
    }
    match &args.out {
        Some(p) => fs::write(p, out).with_context(|| format!("writing {}", p.display()))?,
        None => io::stdout().write_all(out.as_bytes())?,
    }
    Ok(())
}

fn read_results(path: &Path) -> Result<Vec<RetrievalResult>> {
    read_lines(path)?
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing {}", path.display())))
        .collect()
}

fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(EvalReport::from_json(&text)?)
}

fn analyze(a: &Analyze) -> Result<()> {
    match a {
        Analyze::Overlap { a, b, k } => {
            let pct = harness::overlap_at_k(&read_results(a)?, &read_results(b)?, *k)?;
            println!("overlap@{k} {pct:.2}%");
        }
        Analyze::Gap {
            report,
            latin,
            nonlatin,
            format,
        } => {
            let table = harness::gap_report(&load_report(report)?, latin, nonlatin)?;
            print!("{}", harness::render_gap_table(&table, (*format).into()));
        }
        Analyze::Table { report, format } => {
            let r = load_report(report)?;
            harness::audit(&r)?;
            print!("{}", harness::render_report(&r, (*format).into()));
        }
    }
    Ok(())
}
