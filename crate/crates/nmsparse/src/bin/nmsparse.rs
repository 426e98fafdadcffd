//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 configuration error, 2 training divergence,
//! 3 I/O or malformed-file error.

use clap::{Args, Parser, Subcommand};
use nmsparse::config::{RunConfig, SweepSpec};
use nmsparse::error::Error;
use nmsparse::model::ModelConfig;
use nmsparse::nm::NmPattern;
use nmsparse::report::{collect_runs, render_report, run_sweep};
use nmsparse::storage::pack;
use nmsparse::task::generate_task;
use nmsparse::trainer::{load_checkpoint, masks_for_params, train};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "nmsparse", about = "N:M structured-sparsity training engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a config file.
    Train(TrainArgs),
    /// Run every cell of a sweep specification.
    Sweep(SweepArgs),
    /// Print the analytic cost model for a model configuration.
    Cost(CostArgs),
    /// Aggregate run directories into a comparison table.
    Report(ReportArgs),
    /// Pack a trained checkpoint's sparsifiable weights into .nmpk files.
    Pack(PackArgs),
    /// Write the deterministic task dataset as JSON.
    ExportData(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run config file (key = value lines). Defaults apply if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set schedule.recipe=sr_ste
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep spec file (base config, cap, and axis.* lines).
    #[arg(long)]
    spec: PathBuf,
    /// Root directory for per-cell run directories.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    /// Named configuration: "desk" or "reference".
    #[arg(long, default_value = "reference")]
    model: String,
    /// Sequence length assumed for FLOPs counting.
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    /// Vocabulary size assumed for embedding/projection costs.
    #[arg(long)]
    vocab: Option<usize>,
    /// Also print the compression report for this pattern.
    #[arg(long)]
    pattern: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, or directories containing run directories.
    dirs: Vec<PathBuf>,
    /// Also write the rows as JSON to this path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct PackArgs {
    /// Checkpoint file written by `train` (checkpoint.nmsf).
    #[arg(long)]
    checkpoint: PathBuf,
    /// N:M pattern to pack with, e.g. 2:4.
    #[arg(long)]
    pattern: String,
    /// Output directory for the .nmpk files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Relative output paths land under $NMSPARSE_OUT_ROOT when it is set.
fn resolve_out(dir: PathBuf) -> PathBuf {
    match std::env::var_os("NMSPARSE_OUT_ROOT") {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::Divergence { .. } => 2,
        _ => 3,
    }
}

fn run(cli: Cli) -> nmsparse::Result<()> {
    match cli.command {
        Command::Train(args) => {
            let mut cfg = match &args.config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            cfg.apply_overrides(&args.sets)?;
            let dir = resolve_out(args.out.unwrap_or_else(|| cfg.out_dir.clone()));
            let out = train(&cfg, &dir)?;
            println!(
                "run {} done: val_loss {:.4} token_acc {:.4} seq_acc {:.4} ({})",
                cfg.run_id(),
                out.final_eval.val_loss,
                out.final_eval.token_acc,
                out.final_eval.seq_acc,
                dir.display()
            );
        }
        Command::Sweep(args) => {
            let spec = SweepSpec::load(&args.spec)?;
            let out = resolve_out(args.out);
            let cells = run_sweep(&spec, &out)?;
            let failed = cells.iter().filter(|c| c.error.is_some()).count();
            println!(
                "{} cells complete ({failed} failed); see {}",
                cells.len(),
                out.join("sweep.txt").display()
            );
        }
        Command::Cost(args) => {
            let cfg = match args.model.as_str() {
                "desk" => ModelConfig::desk(),
                "reference" => ModelConfig::paper_reference(),
                other => {
                    return Err(Error::Config(format!(
                        "unknown model '{other}' (expected desk or reference)"
                    )))
                }
            };
            let vocab = args.vocab.unwrap_or(cfg.vocab);
            let report = nmsparse::cost::count_costs(&cfg, args.seq_len, vocab)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::Malformed(e.to_string()))?
            );
            if let Some(p) = &args.pattern {
                let pattern = NmPattern::parse(p)?;
                let comp = nmsparse::cost::compression(&report, pattern, None);
                println!(
                    "{}",
                    serde_json::to_string_pretty(&comp)
                        .map_err(|e| Error::Malformed(e.to_string()))?
                );
            }
        }
        Command::Report(args) => {
            if args.dirs.is_empty() {
                return Err(Error::Config("report needs at least one directory".into()));
            }
            let (rows, skipped) = collect_runs(&args.dirs)?;
            print!("{}", render_report(&rows));
            for s in &skipped {
                eprintln!("skipped: {s}");
            }
            if let Some(path) = &args.json {
                std::fs::write(
                    path,
                    serde_json::to_string_pretty(&rows)
                        .map_err(|e| Error::Malformed(e.to_string()))?,
                )?;
            }
        }
        Command::Pack(args) => {
            let pattern = NmPattern::parse(&args.pattern)?;
            let (config_text, params) = load_checkpoint(&args.checkpoint)?;
            let cfg = RunConfig::parse_text(&config_text)?;
            let mut model = nmsparse::build_model(&cfg.model, 0)?;
            for (name, t) in params {
                if let Some(slot) = model.params.get_mut(&name) {
                    *slot = t;
                } else {
                    return Err(Error::Malformed(format!(
                        "checkpoint tensor '{name}' not part of the model"
                    )));
                }
            }
            let masks = masks_for_params(&model, pattern)?;
            std::fs::create_dir_all(&args.out)?;
            let mut packed_bits = 0u64;
            let mut dense_bits = 0u64;
            for entry in &model.registry {
                let packed = pack(&model.params[&entry.name], &masks[&entry.name], pattern)?;
                packed_bits += packed.packed_size_bits();
                dense_bits += packed.dense_size_bits();
                let file = args.out.join(format!("{}.nmpk", entry.name));
                std::fs::write(&file, packed.to_bytes())?;
            }
            println!(
                "packed {} tensors at {pattern}: {packed_bits} bits vs {dense_bits} dense ({:.1}% saved)",
                model.registry.len(),
                100.0 * (1.0 - packed_bits as f64 / dense_bits as f64)
            );
        }
        Command::ExportData(args) => {
            let mut task = nmsparse::task::ToyTask::default();
            task.seed = args.seed;
            let model = ModelConfig::desk();
            let ds = generate_task(&task, model.max_len)?;
            std::fs::write(
                &args.out,
                serde_json::to_string(&ds).map_err(|e| Error::Malformed(e.to_string()))?,
            )?;
            println!(
                "wrote {} train / {} val examples to {}",
                ds.train.len(),
                ds.val.len(),
                args.out.display()
            );
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
            ExitCode::from(exit_code_for(&e))
        }
    }
}
