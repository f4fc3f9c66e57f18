//! The `forgetrace` command line.
//!
//! Every command checks its inputs (flags, config, data directory) before it
//! touches the filesystem. Exit codes: 0 success, 1 usage error with nothing
//! written, 2 runtime failure with a `FAILED` note in the output directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crate::memory::{Memory, RetrievalStrategy, StoragePolicy};
use crate::metrics::{read_items, write_items, EvalItem};
use crate::scheduler::data::{A_DOCS, B_DOCS, ENTITIES_FILE, EVALSET_FILE, VOCAB_FILE};
use crate::scheduler::report::{export_curves, table1, TABLE1_FILE};
use crate::scheduler::run::{CONFIG_FILE, MEMORY_FILE};
use crate::scheduler::{
    cap_pairs, eval_items, run_experiment, run_forgetting_curve, run_upper_bound, Dataset, RunConfig, Strategy,
};
use crate::synth::{generate, SynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Overrides the data root; `--data-dir` wins over it.
pub const DATA_DIR_ENV: &str = "FORGETRACE_DATA_DIR";
/// Written into the output directory when a command fails mid-way.
pub const FAILED_FILE: &str = "FAILED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "forgetrace", version, about = "Measure and mitigate forgetting in tiny LM pre-training runs")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Run seed; replaces the config's seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat `key = value` run config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Where the command writes. Nothing is written anywhere else.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Prepared data directory (overrides FORGETRACE_DATA_DIR and the config).
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize A/B corpora (raw JSONL or a synthetic preset) into a data directory.
    BuildCorpus {
        #[arg(long, requires = "b", conflicts_with = "synth")]
        a: Option<PathBuf>,
        #[arg(long, requires = "a")]
        b: Option<PathBuf>,
        /// Entity dictionary to tag with right away.
        #[arg(long, conflicts_with = "synth")]
        entities: Option<PathBuf>,
        /// Synthetic corpus preset: transition, mixed or curve.
        #[arg(long, value_parser = parse_preset)]
        synth: Option<String>,
        #[arg(long, default_value_t = 2048)]
        vocab_size: usize,
    },
    /// Re-tag a data directory with an entity dictionary.
    TagEntities {
        #[arg(long)]
        entities: PathBuf,
    },
    /// Build the entity eval set of a data directory.
    BuildEvalset,
    /// Pre-train with one replay strategy.
    Train {
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        /// Run only the upper-bound phase from this checkpoint.
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
    },
    /// Forgetting curves after intensive learning of one difficulty bucket.
    Curve,
    /// Collect final rows and curves of finished runs.
    Report {
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
        /// Write table1.csv.
        #[arg(long)]
        table1: bool,
        /// Copy curve CSVs into curves/.
        #[arg(long)]
        curves: bool,
    },
    /// Print the replay-count histogram of a memory dump or run directory.
    InspectMemory {
        #[arg(long)]
        memory: PathBuf,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.as_str()).collect();
        format!("unknown strategy; expected one of {}", names.join(", "))
    })
}

fn parse_preset(s: &str) -> Result<String, String> {
    if SynthConfig::PRESETS.contains(&s) {
        Ok(s.to_string())
    } else {
        Err(format!("unknown preset; expected one of {}", SynthConfig::PRESETS.join(", ")))
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let env = std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    match execute(&cli, env) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            if let Some(out) = &cli.common.out_dir {
                if out.is_dir() {
                    let _ = fs::write(out.join(FAILED_FILE), format!("{e:#}\n"));
                }
            }
            EXIT_RUNTIME
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p).map_err(|e| CliError::Usage(e.messages().join("\n")))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn finish_config(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate().map_err(|e| CliError::Usage(e.messages().join("\n")))
}

/// Flag, then environment, then the config's `data_dir`.
pub fn resolve_data_dir(flag: Option<&Path>, env: Option<&Path>, cfg: Option<&RunConfig>) -> Option<PathBuf> {
    flag.or(env).map(Path::to_path_buf).or_else(|| cfg.and_then(|c| c.data_dir.clone()))
}

fn data_dir(common: &Common, env: Option<&Path>, cfg: Option<&RunConfig>) -> Result<PathBuf, CliError> {
    let Some(dir) = resolve_data_dir(common.data_dir.as_deref(), env, cfg) else {
        return usage(format!("no data directory: pass --data-dir or set {DATA_DIR_ENV}"));
    };
    for f in [VOCAB_FILE, A_DOCS, B_DOCS] {
        if !dir.join(f).is_file() {
            return usage(format!("data directory {} lacks {f}; run build-corpus first", dir.display()));
        }
    }
    Ok(dir)
}

fn out_dir(common: &Common) -> Result<&Path, CliError> {
    match &common.out_dir {
        Some(p) => Ok(p),
        None => usage("--out-dir is required for this command"),
    }
}

fn existing_file(p: &Path, what: &str) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        usage(format!("{what} {} does not exist", p.display()))
    }
}

/// Runs a parsed command. `env_data_dir` is the value of the data-root
/// environment variable, if any.
pub fn execute(cli: &Cli, env_data_dir: Option<PathBuf>) -> Result<(), CliError> {
    let common = &cli.common;
    let env = env_data_dir.as_deref();
    match &cli.command {
        Command::BuildCorpus { a, b, entities, synth, vocab_size } => {
            let out = out_dir(common)?;
            if *vocab_size < 4 {
                return usage("--vocab-size must be at least 4");
            }
            match (a, b, synth) {
                (Some(a), Some(b), None) => {
                    existing_file(a, "corpus file")?;
                    existing_file(b, "corpus file")?;
                    if let Some(e) = entities {
                        existing_file(e, "entity dictionary")?;
                    }
                    let mut ds = Dataset::from_raw_files(a, b, *vocab_size)?;
                    if let Some(e) = entities {
                        ds.tag(crate::corpus::read_entities(e, &ds.vocab).context("reading the dictionary")?)?;
                    }
                    ds.save(out)?;
                    if let Some(e) = entities {
                        fs::copy(e, out.join(ENTITIES_FILE)).context("copying the dictionary")?;
                    }
                    println!("A docs {} B docs {} vocab {}", ds.a.len(), ds.b.len(), ds.vocab.len());
                }
                (None, None, Some(name)) => {
                    let sc = SynthConfig::preset(name, common.seed.unwrap_or(0)).expect("validated by clap");
                    let corpus = generate(&sc)?;
                    let ds = Dataset::from_synth(&corpus, *vocab_size)?;
                    corpus.write(out)?;
                    ds.save(out)?;
                    println!("A docs {} B docs {} vocab {} entities {}", ds.a.len(), ds.b.len(), ds.vocab.len(), ds.dict.len());
                }
                _ => return usage("pass either --a and --b, or --synth"),
            }
            Ok(())
        }
        Command::TagEntities { entities } => {
            let out = out_dir(common)?;
            let dir = data_dir(common, env, None)?;
            existing_file(entities, "entity dictionary")?;
            let mut ds = Dataset::load(&dir)?;
            ds.tag(crate::corpus::read_entities(entities, &ds.vocab).context("reading the dictionary")?)?;
            ds.save(out)?;
            fs::copy(entities, out.join(ENTITIES_FILE)).context("copying the dictionary")?;
            let tagged = ds.a.iter().chain(&ds.b).filter(|d| d.has_entity()).count();
            println!("tagged {tagged} of {} documents", ds.a.len() + ds.b.len());
            Ok(())
        }
        Command::BuildEvalset => {
            let cfg = load_config(common)?;
            finish_config(&cfg)?;
            let out = out_dir(common)?;
            let dir = data_dir(common, env, Some(&cfg))?;
            let ds = Dataset::load(&dir)?;
            let items = eval_items(&ds, &cfg)?;
            fs::create_dir_all(out).context("creating the output directory")?;
            write_items(&out.join(EVALSET_FILE), &items).context("writing the eval set")?;
            println!("{} items over {} pairs", items.len(), items.len() / 2);
            Ok(())
        }
        Command::Train { strategy, from_checkpoint } => {
            let mut cfg = load_config(common)?;
            if let Some(s) = strategy {
                cfg.strategy = *s;
            }
            finish_config(&cfg)?;
            let out = out_dir(common)?;
            let dir = data_dir(common, env, Some(&cfg))?;
            if let Some(ckpt) = from_checkpoint {
                if cfg.strategy != Strategy::UpperBound {
                    return usage("--from-checkpoint only applies to --strategy upper_bound");
                }
                existing_file(ckpt, "checkpoint")?;
                let ds = Dataset::load(&dir)?;
                let items = items_for(&ds, &dir, &cfg)?;
                let (r, n) = run_upper_bound(ckpt, &items, &cfg, out)?;
                println!("upper_bound epochs {n} m_ex {:.4} m_in {:.4} ppl {:.4}", r.m_ex, r.m_in, r.ppl);
                return Ok(());
            }
            let ds = Dataset::load(&dir)?;
            let items = items_for(&ds, &dir, &cfg)?;
            for (seed, r) in run_experiment(&cfg, &ds, &items, out)? {
                let last = r.reports.last().context("run produced no rows")?;
                println!(
                    "seed {seed} {} m_ex {:.4} m_in {:.4} ppl {:.4} mf {:.4} cost_ratio {:.6}",
                    cfg.strategy, last.m_ex, last.m_in, last.ppl, last.mf, r.cost.ratio
                );
            }
            Ok(())
        }
        Command::Curve => {
            let cfg = load_config(common)?;
            finish_config(&cfg)?;
            let out = out_dir(common)?;
            let dir = data_dir(common, env, Some(&cfg))?;
            let ds = Dataset::load(&dir)?;
            let items = items_for(&ds, &dir, &cfg)?;
            for &seed in &cfg.seeds {
                let target = if cfg.seeds.len() == 1 { out.to_path_buf() } else { out.join(format!("seed_{seed}")) };
                let o = run_forgetting_curve(&cfg, &ds, &items, seed, &target)?;
                for c in &o.curves {
                    println!(
                        "seed {seed} e={}{} after_intensive {:.4} final {:.4} sessions {}",
                        c.intensive_epochs,
                        if c.periodic { " periodic" } else { "" },
                        c.after_intensive(),
                        c.final_m_ex(),
                        c.sessions
                    );
                }
            }
            Ok(())
        }
        Command::Report { runs, table1: want_table, curves } => {
            let out = out_dir(common)?;
            if !want_table && !curves {
                return usage("nothing to report: pass --table1 and/or --curves");
            }
            for r in runs {
                if !r.is_dir() {
                    return usage(format!("run directory {} does not exist", r.display()));
                }
            }
            // build everything before writing so a bad run leaves no table behind
            let table = if *want_table { Some(table1(runs)?) } else { None };
            fs::create_dir_all(out).context("creating the output directory")?;
            if let Some(t) = table {
                fs::write(out.join(TABLE1_FILE), t).context("writing table1.csv")?;
                println!("wrote {}", out.join(TABLE1_FILE).display());
            }
            if *curves {
                let n = export_curves(runs, out)?.len();
                println!("copied {n} curve files");
            }
            Ok(())
        }
        Command::InspectMemory { memory } => {
            let path = if memory.is_dir() { memory.join(MEMORY_FILE) } else { memory.clone() };
            existing_file(&path, "memory dump")?;
            let exit = memory
                .is_dir()
                .then(|| RunConfig::from_file(&memory.join(CONFIG_FILE)).ok())
                .flatten()
                .and_then(|c| c.exit_threshold());
            let mem = Memory::restore(&path, StoragePolicy::All, RetrievalStrategy::Random, exit, None)
                .with_context(|| format!("reading {}", path.display()))?;
            print!("{}", mem.histogram_report());
            if let Some(m) = exit {
                println!("exit threshold {m}");
            }
            Ok(())
        }
    }
}

/// The stored eval set when the data directory has one, else a fresh one.
fn items_for(ds: &Dataset, dir: &Path, cfg: &RunConfig) -> anyhow::Result<Vec<EvalItem>> {
    let stored = dir.join(EVALSET_FILE);
    if stored.is_file() {
        Ok(cap_pairs(&read_items(&stored)?, cfg.eval_max_pairs))
    } else {
        eval_items(ds, cfg)
    }
}
