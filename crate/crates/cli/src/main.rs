use std::fmt::Write as _;
use std::io::{self, Write as _};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hydra_cli::bench::{append_csv, run_bench, BenchConfig, BenchKind};
use hydra_cli::gradsuite::{run_all, Op};
use hydra_cli::toy::{train, write_metrics, TrainConfig, DEFAULT_HYDRA, DEFAULT_LR};
use hydra_cli::{configs, frechet, rollout, with_threads, CliError};
use hydra_core::attention::HydraConfig;

#[derive(Parser)]
#[command(
    name = "hydra-na",
    version,
    about = "Neighborhood and Hydra attention tools"
)]
struct Cli {
    /// Worker threads for kernel-level parallelism (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count head configurations for a resolution or a layout file.
    Configs {
        #[arg(long, conflicts_with = "layout", required_unless_present = "layout")]
        resolution: Option<usize>,
        #[arg(long)]
        layout: Option<PathBuf>,
    },
    /// Time forward passes and append a row to a CSV file.
    Bench {
        #[arg(long)]
        kind: BenchKind,
        #[arg(long, num_args = 2, value_names = ["H", "W"])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        dmodel: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 7)]
        kernel: usize,
        #[arg(long, default_value_t = 1)]
        dilation: usize,
        /// Head groups for `--kind hydra`, e.g. 7x1:2,7x2:2.
        #[arg(long)]
        hydra: Option<HydraConfig>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Finite-difference certification of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, hide = true)]
        sabotage: Option<Op>,
    },
    /// Train the toy stripes classifier and write per-step metrics.
    Toytrain {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value = DEFAULT_HYDRA)]
        hydra: HydraConfig,
        #[arg(long, default_value_t = DEFAULT_LR)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-head attention density maps as PGM files.
    Rollout {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = rollout::DEFAULT_HYDRA)]
        hydra: HydraConfig,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Fréchet distance between two CSV feature sets.
    Frechet { a: PathBuf, b: PathBuf },
}

fn run(command: Command, buf: &mut String) -> Result<(), CliError> {
    match command {
        Command::Configs { resolution, layout } => {
            let table = match (resolution, layout) {
                (Some(r), _) => configs::resolution_table(r)?,
                (None, Some(path)) => configs::layout_table(&configs::load_layout(&path)?)?.0,
                (None, None) => {
                    return Err(CliError::Usage("need --resolution or --layout".into()))
                }
            };
            buf.push_str(&table);
        }
        Command::Bench {
            kind,
            size,
            dmodel,
            heads,
            kernel,
            dilation,
            hydra,
            repeats,
            seed,
            csv,
        } => {
            let cfg = BenchConfig {
                kind,
                height: size[0],
                width: size[1],
                d_model: dmodel,
                heads,
                kernel,
                dilation,
                hydra,
                repeats,
                seed,
            };
            let record = run_bench(&cfg)?;
            append_csv(&csv, std::slice::from_ref(&record))?;
            let _ = writeln!(
                buf,
                "{} {}x{}: {} ns, {} MACs, {} attention scalars",
                record.kind,
                record.height,
                record.width,
                record.time_ns,
                record.macs,
                record.attn_state
            );
        }
        Command::Gradcheck {
            seed,
            cases,
            sabotage,
        } => {
            let reports =
                run_all(seed, cases, sabotage).map_err(|e| CliError::Failure(e.to_string()))?;
            let mut failed = 0;
            for r in &reports {
                let status = if r.passed() { "pass" } else { "FAIL" };
                let _ = match &r.worst {
                    Some(w) => writeln!(
                        buf,
                        "{status} {:<18} cases={:<3} max_rel_error={:.3e} worst={:?}",
                        r.op.name(),
                        r.cases,
                        w.max_rel_error,
                        w.worst
                    ),
                    None => writeln!(buf, "{status} {:<18} cases=0", r.op.name()),
                };
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(CliError::Failure(format!(
                    "{failed} operator(s) failed the gradient check"
                )));
            }
        }
        Command::Toytrain {
            seed,
            steps,
            hydra,
            lr,
            out,
        } => {
            let rows = train(&TrainConfig {
                seed,
                steps,
                hydra,
                lr,
            })?;
            write_metrics(&out, &rows)?;
            let (first, last) = (&rows[0], &rows[rows.len() - 1]);
            let _ = writeln!(
                buf,
                "loss {:.4} -> {:.4}, train accuracy {:.3}, test accuracy {:.3}",
                first.loss, last.loss, last.accuracy, last.test_accuracy
            );
        }
        Command::Rollout {
            seed,
            hydra,
            outdir,
        } => {
            let maps = rollout::head_maps(seed, &hydra)?;
            for path in rollout::write_maps(&maps, &outdir)? {
                let _ = writeln!(buf, "{}", path.display());
            }
        }
        Command::Frechet { a, b } => {
            let _ = writeln!(buf, "{}", frechet::frechet_from_files(&a, &b)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = String::new();
    let result = with_threads(cli.threads, || run(cli.command, &mut out)).and_then(|r| r);
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = io::stdout().lock().write_all(out.as_bytes());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
