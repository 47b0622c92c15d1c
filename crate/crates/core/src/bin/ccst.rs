use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ccst::error::{Error, Result};
use ccst::eval::format_table;
use ccst::hnsw::HnswConfig;
use ccst::pipeline::{
    cmd_bench, cmd_build, cmd_compress, cmd_eval, cmd_gt, cmd_search, cmd_synth, cmd_train, IndexKind, IndexSection,
    PipelineConfig, SearchParams,
};
use ccst::synth::MixtureConfig;

/// Learned neighborhood-preserving compression and ANN search.
///
/// Set CCST_THREADS to bound the worker threads used for batch compression
/// and batch search.
#[derive(Parser)]
#[command(name = "ccst", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a compressor on a base set.
    Train(TrainArgs),
    /// Compress vectors with a trained checkpoint.
    Compress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1024)]
        batch_size: usize,
    },
    /// Exact k nearest neighbors, written as ivecs.
    Gt {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build an index.
    Build(BuildArgs),
    /// Search an index; results are written as ivecs.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long)]
        ef: Option<usize>,
        #[arg(long)]
        nprobe: Option<usize>,
        /// Build vectors of an hnsw index.
        #[arg(long)]
        vectors: Option<PathBuf>,
        /// Id-aligned vectors that hnsw distances are computed against.
        #[arg(long)]
        search_vectors: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Recall of result lists against ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "results")]
        label: String,
        #[arg(long, default_value = "")]
        params: String,
        /// Also write the report as a JSON line.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Train, compress, index, search and score in one run.
    Bench(BenchArgs),
    /// Write a synthetic Gaussian mixture as fvecs.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        base_out: PathBuf,
        #[arg(long)]
        queries_out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct RunOverrides {
    /// JSON pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    d_out: Option<usize>,
    /// Print one line per epoch to stderr.
    #[arg(long)]
    verbose: bool,
}

impl RunOverrides {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(b) = &self.base {
            cfg.base = Some(b.clone());
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr0 = lr;
        }
        if let Some(d) = self.d_out {
            cfg.model.d_out = Some(d);
        }
        cfg.propagate_seed();
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOverrides,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunOverrides,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Skip throughput measurement so reports are reproducible.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    kind: Option<IndexKind>,
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long)]
    search_vectors: Option<PathBuf>,
    /// JSON pipeline configuration; its `index` block is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    ef_construction: Option<usize>,
    #[arg(long)]
    nlist: Option<usize>,
    /// Subquantizers for pq and ivfadc.
    #[arg(long)]
    pq_m: Option<usize>,
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CCST_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("CCST_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

fn logger(verbose: bool) -> impl FnMut(&str) {
    move |line: &str| {
        if verbose {
            eprintln!("{line}");
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Train(a) => {
            let cfg = a.run.resolve()?;
            let out = cmd_train(&cfg, &mut logger(a.run.verbose))?;
            println!(
                "trained {} epochs, final eval loss {:e}, checkpoint {}",
                out.report.epochs.len(),
                out.report.final_eval_loss,
                out.checkpoint.display()
            );
        }
        Command::Compress {
            checkpoint,
            input,
            output,
            batch_size,
        } => {
            let out = cmd_compress(&checkpoint, &input, &output, batch_size)?;
            println!("compressed {} vectors to dimension {}", out.count(), out.dim());
        }
        Command::Gt { base, queries, k, output } => {
            let gt = cmd_gt(&base, &queries, k, &output)?;
            println!("wrote {} neighbor lists of length {}", gt.query_count(), gt.k());
        }
        Command::Build(a) => {
            let mut section = match &a.config {
                Some(p) => {
                    let mut c = PipelineConfig::load(p)?;
                    c.propagate_seed();
                    c.index
                }
                None => IndexSection::default(),
            };
            if let Some(k) = a.kind {
                section.kind = k;
            }
            if let Some(s) = a.seed {
                section.hnsw.seed = s;
                section.pq.seed = s;
                section.ivf.pq.seed = s;
            }
            if let Some(m) = a.m {
                section.hnsw = HnswConfig { m, ..section.hnsw };
            }
            if let Some(e) = a.ef_construction {
                section.hnsw.ef_construction = e;
            }
            if let Some(n) = a.nlist {
                section.ivf.nlist = n;
            }
            if let Some(m) = a.pq_m {
                section.pq.m = m;
                section.ivf.pq.m = m;
            }
            cmd_build(&section, &a.vectors, a.search_vectors.as_deref(), &a.output)?;
            println!("built {} index {}", section.kind.name(), a.output.display());
        }
        Command::Search {
            index,
            queries,
            k,
            ef,
            nprobe,
            vectors,
            search_vectors,
            output,
        } => {
            let res = cmd_search(
                &index,
                &queries,
                k,
                SearchParams { ef, nprobe },
                vectors.as_deref(),
                search_vectors.as_deref(),
                &output,
            )?;
            println!("wrote {} result lists of length {}", res.query_count(), res.k());
        }
        Command::Eval {
            results,
            gt,
            label,
            params,
            jsonl,
        } => {
            let rep = cmd_eval(&results, &gt, &label, &params, jsonl.as_deref())?;
            print!("{}", format_table(&[rep]));
        }
        Command::Bench(a) => {
            let mut cfg = a.run.resolve()?;
            if let Some(q) = a.queries {
                cfg.queries = Some(q);
            }
            if let Some(c) = a.checkpoint {
                cfg.bench.checkpoint = Some(c);
            }
            if a.no_timing {
                cfg.bench.timing = false;
            }
            let reports = cmd_bench(&cfg, &mut logger(a.run.verbose))?;
            print!("{}", format_table(&reports));
        }
        Command::Synth {
            config,
            base_out,
            queries_out,
            count,
            queries,
            dim,
            clusters,
            seed,
        } => {
            let mut cfg = match config {
                Some(p) => PipelineConfig::load(&p)?.synth.unwrap_or_default(),
                None => MixtureConfig::default(),
            };
            if let Some(v) = count {
                cfg.base_count = v;
            }
            if let Some(v) = queries {
                cfg.query_count = v;
            }
            if let Some(v) = dim {
                cfg.dim = v;
            }
            if let Some(v) = clusters {
                cfg.clusters = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            cmd_synth(&cfg, &base_out, &queries_out)?;
            println!("wrote {} base and {} query vectors", cfg.base_count, cfg.query_count);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
