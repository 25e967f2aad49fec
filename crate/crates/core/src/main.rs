use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use depthflow::cli;
use depthflow::config::RunConfig;

// The glibc allocator trims and remaps the heap between the differently
// sized tensors of a scout run, which dominates the millisecond timings.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "depthflow",
    version,
    about = "Depth-distilled one-step flow maps on toy mixtures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed (also the scout noise seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for checkpoints, metrics and reports.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base velocity field by flow matching.
    TrainBase(Common),
    /// Distill the base field into a one-step flow map.
    DistillFreeflow(Common),
    /// Distill the flow map into the shared-block student.
    DistillSlt(Common),
    /// Preview candidates with the student and refine the best with the teacher.
    Scout(Common),
    /// One teacher sample from the first scout noise.
    Generate(Common),
    /// Time the sampling strategies.
    Bench(Common),
    /// Print parameter counts of the configured models.
    Params(Common),
}

fn load(common: &Common) -> depthflow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.scout.seed = seed;
    }
    Ok(cfg)
}

fn run(command: Command) -> depthflow::Result<()> {
    match command {
        Command::TrainBase(c) => {
            let rows = cli::cmd_train_base(&load(&c)?, &c.out)?;
            if let Some(last) = rows.last() {
                println!("base loss {:.5} at step {}", last.loss, last.step);
            }
        }
        Command::DistillFreeflow(c) => {
            let rows = cli::cmd_distill_freeflow(&load(&c)?, &c.out)?;
            if let Some(last) = rows.last() {
                println!("freeflow loss {:.5} at step {}", last.loss, last.step);
            }
        }
        Command::DistillSlt(c) => {
            let rows = cli::cmd_distill_slt(&load(&c)?, &c.out)?;
            if let Some(last) = rows.last() {
                println!(
                    "slt loss_total {:.5} (output {:.5}, patches {:.5}) at step {}",
                    last.loss_total, last.loss_output, last.loss_patches, last.step
                );
            }
        }
        Command::Scout(c) => {
            let (sample, report) = cli::cmd_scout(&load(&c)?, &c.out)?;
            println!(
                "best candidate {} score {:.5}; sample {:?}; scout {:.3} ms, refine {:.3} ms",
                report.best,
                report.candidates[report.best].score,
                sample.data(),
                report.scout_ms,
                report.refine_ms
            );
        }
        Command::Generate(c) => {
            let x = cli::cmd_generate(&load(&c)?, &c.out)?;
            println!("sample {:?}", x.data());
        }
        Command::Bench(c) => {
            let report = cli::cmd_bench(&load(&c)?, &c.out)?;
            report.write_csv(std::io::stdout())?;
        }
        Command::Params(c) => {
            let rows = cli::cmd_params(&load(&c)?)?;
            cli::print_params(&rows, std::io::stdout())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
