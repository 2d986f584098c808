use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use exrec_core::corpus::{load_reviews, split, SplitSpec};
use exrec_core::evalkit::{Evaluator, Explanation};
use exrec_core::fixtures::write_toy_corpus;
use exrec_core::pipeline::{run_pipeline_with, PipelineConfig, Ports, RunManifest, Stage};
use exrec_core::retrieval::{bench_retrieval, UnitVector, VectorIndex};

#[derive(Parser)]
#[command(name = "exrec", version, about = "Retrieval-augmented explanation generation for recommendations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set retrieval.top_q=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory (overrides `run.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage, reusing cached outputs.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Stop after this stage.
        #[arg(long)]
        until: Option<Stage>,
    },
    /// Load and validate the review corpus, then split it.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Split a review file without a config.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    TrainGcn {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    BuildProfiles {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    Embed {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    FinetuneAdapter {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    Retrieve {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `latent` or `profile`.
        #[arg(long)]
        query_type: Option<String>,
        #[arg(long)]
        top_q: Option<usize>,
    },
    Assemble {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a run, or two explanation files given with --refs and --cands.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, requires = "cands")]
        refs: Option<PathBuf>,
        #[arg(long, requires = "refs")]
        cands: Option<PathBuf>,
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
    },
    /// Time brute-force search over a random index.
    BenchRetrieval {
        #[arg(long, default_value_t = 100_000)]
        rows: usize,
        #[arg(long, default_value_t = 768)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        queries: usize,
        #[arg(long, default_value_t = 8)]
        top_q: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the 50-user synthetic corpus.
    ToyCorpus {
        #[arg(long, default_value = "reviews.jsonl")]
        out: PathBuf,
    },
    /// Print the default config as TOML.
    DefaultConfig,
}

fn load_config(args: &ConfigArgs, extra: &[String]) -> Result<PipelineConfig> {
    let overrides: Vec<String> = args.overrides.iter().chain(extra).cloned().collect();
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p, &overrides)?,
        None => PipelineConfig::from_toml_str("", &overrides)?,
    };
    if let Some(out) = &args.out {
        cfg.run.dir = out.clone();
    }
    Ok(cfg)
}

fn run_until(args: &ConfigArgs, extra: &[String], until: Option<Stage>) -> Result<()> {
    let cfg = load_config(args, extra)?;
    let ports = Ports::from_config(&cfg.ports)?;
    let manifest = run_pipeline_with(&cfg, &ports, until)?;
    print_manifest(&manifest);
    Ok(())
}

fn print_manifest(m: &RunManifest) {
    for s in &m.stages {
        println!("{:<17} {:<8} {:>9.1} ms", s.name, format!("{:?}", s.status).to_lowercase(), s.millis);
    }
}

fn read_explanations(path: &Path) -> Result<Vec<Explanation>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), k + 1)))
        .collect()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { cfg, until } => run_until(&cfg, &[], until)?,
        Command::Ingest { cfg } => run_until(&cfg, &[], Some(Stage::Ingest))?,
        Command::TrainGcn { cfg } => run_until(&cfg, &[], Some(Stage::TrainGcn))?,
        Command::BuildProfiles { cfg } => run_until(&cfg, &[], Some(Stage::BuildProfiles))?,
        Command::Embed { cfg } => run_until(&cfg, &[], Some(Stage::Embed))?,
        Command::FinetuneAdapter { cfg } => run_until(&cfg, &[], Some(Stage::FinetuneAdapter))?,
        Command::Retrieve { cfg, query_type, top_q } => {
            let mut extra = Vec::new();
            if let Some(q) = query_type {
                extra.push(format!("retrieval.query_type=\"{q}\""));
            }
            if let Some(q) = top_q {
                extra.push(format!("retrieval.top_q={q}"));
            }
            run_until(&cfg, &extra, Some(Stage::Retrieve))?
        }
        Command::Assemble { cfg } => run_until(&cfg, &[], Some(Stage::Assemble))?,
        Command::Generate { cfg } => run_until(&cfg, &[], Some(Stage::Generate))?,
        Command::Evaluate { cfg, refs, cands, report } => match (refs, cands) {
            (Some(refs), Some(cands)) => {
                let config = load_config(&cfg, &[])?;
                let templates = config.validate()?;
                let ports = Ports::from_config(&config.ports)?;
                let evaluator = Evaluator {
                    tokens: ports.tokens.as_ref(),
                    judge: config.evaluation.judge.then_some(ports.judge.as_ref()),
                    judge_template: templates.judge,
                    options: config.evaluation.bertscore,
                    retry: config.ports.retry,
                };
                let r = evaluator.evaluate(&read_explanations(&refs)?, &read_explanations(&cands)?)?;
                r.write(&report)?;
                println!(
                    "{} samples, BERT P {:.4} R {:.4} F1 {:.4}",
                    r.n, r.bert_p.mean, r.bert_r.mean, r.bert_f1.mean
                );
            }
            _ => run_until(&cfg, &[], Some(Stage::Evaluate))?,
        },
        Command::Split {
            input,
            train_fraction,
            seed,
            out,
        } => {
            let data = load_reviews(&input, Default::default())?;
            let parts = split(&data, SplitSpec::new(train_fraction, seed)?)?;
            std::fs::create_dir_all(&out)?;
            parts.train.write_jsonl(&out.join("train.jsonl"))?;
            parts.test.write_jsonl(&out.join("test.jsonl"))?;
            std::fs::write(out.join("split.json"), serde_json::to_vec_pretty(&parts.manifest(seed))?)?;
            println!("train {} / test {}", parts.train.len(), parts.test.len());
        }
        Command::BenchRetrieval {
            rows,
            dim,
            queries,
            top_q,
            threads,
            seed,
        } => {
            if rows == 0 || dim == 0 || queries == 0 {
                bail!("rows, dim and queries must be positive");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut index = VectorIndex::new(dim);
            for k in 0..rows {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                index.push(&k.to_string(), "u", &k.to_string(), v)?;
            }
            let qs: Vec<UnitVector> = (0..queries)
                .map(|_| UnitVector::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let report = bench_retrieval(&index, &qs, top_q, threads)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::ToyCorpus { out } => {
            write_toy_corpus(&out)?;
            println!("wrote {}", out.display());
        }
        Command::DefaultConfig => print!("{}", PipelineConfig::default().to_toml()?),
    }
    Ok(())
}
