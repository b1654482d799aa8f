use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smoothinv::Result;
use smoothinv_cli::config::ExperimentConfig;
use smoothinv_cli::runner::{self, AttackMode, ProbeKind, ProbeParams};
use smoothinv_cli::{exit_code, exit_code_for, verify};

/// Label-smoothing / model-inversion laboratory.
#[derive(Parser)]
#[command(name = "smoothinv", version, about)]
struct Cli {
    /// Number of worker threads for parallel attack stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config JSON; omit to use the bundled toy preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Smoothing factor for the toy preset (ignored with --config).
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    /// Master seed; overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let config = match &self.config {
            Some(path) => {
                let config = ExperimentConfig::load(path)?;
                match self.seed {
                    Some(seed) => config.with_seed(seed),
                    None => config,
                }
            }
            None => ExperimentConfig::toy_preset(self.alpha, self.seed.unwrap_or(0)),
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and write data.csv with provenance.
    GenData(ExperimentArgs),
    /// Train the target model; writes checkpoint.json and history.csv.
    Train(ExperimentArgs),
    /// Run an inversion attack against the trained checkpoint.
    Attack {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// "simple" (single gradient descent per class) or "ppa" (full
        /// three-stage pipeline).
        #[arg(long, default_value = "ppa")]
        mode: AttackMode,
    },
    /// Score a finished attack run with the full metric suite.
    Evaluate(ExperimentArgs),
    /// Run the analytic-vs-finite-difference verification suite.
    VerifyGradients {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Number of random instances per gradient check.
        #[arg(long, default_value_t = 1000)]
        instances: usize,
    },
    /// Export the model's class-confidence surface over a 2D grid.
    ConfidenceGrid {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Domain as x1_min,x1_max,x2_min,x2_max.
        #[arg(long, default_value = "-4,4,-4,4", value_delimiter = ',', num_args = 4)]
        bounds: Vec<f64>,
        /// Grid points per axis.
        #[arg(long, default_value_t = 101)]
        resolution: usize,
    },
    /// Measure adversarial-probe success rates on the test split.
    Robustness {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// fgsm, pgd, or bim.
        #[arg(long, default_value = "fgsm")]
        probe: ProbeKind,
        #[arg(long, default_value_t = 0.3)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.1)]
        step_size: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(args) => {
            let config = args.resolve()?;
            let path = runner::run_gen_data(&config, &args.out)?;
            println!("wrote {}", path.display());
        }
        Command::Train(args) => {
            let config = args.resolve()?;
            let summary = runner::run_train(&config, &args.out)?;
            println!(
                "trained {} epochs: loss {:.6}, train acc {:.4}, test acc {:.4}, test ECE {:.4}",
                summary.epochs,
                summary.final_loss,
                summary.final_train_accuracy,
                summary.test_accuracy,
                summary.test_ece
            );
            println!("checkpoint sha256 {}", summary.checkpoint_sha256);
        }
        Command::Attack { experiment, mode } => {
            let config = experiment.resolve()?;
            runner::run_attack(&config, &experiment.out, mode)?;
            println!("attack artifacts written to {}", experiment.out.display());
        }
        Command::Evaluate(args) => {
            let config = args.resolve()?;
            let report = runner::run_evaluate(&config, &args.out)?;
            let m = &report.metrics;
            println!(
                "acc@1 {:.4}  acc@{} {:.4}  delta_eval {:.4}  xi_train {:.4}  xi_test {:.4}  ece {:.4}",
                m.acc_at_1, m.k, m.acc_at_k, m.delta_eval, m.xi_train, m.xi_test, m.ece
            );
        }
        Command::VerifyGradients { seed, instances } => {
            let report = verify::verify_gradients(seed, instances)?;
            for check in &report.checks {
                println!(
                    "{} {:<45} max dev {:.3e} (tol {:.1e}, n={})",
                    if check.passed { "PASS" } else { "FAIL" },
                    check.name,
                    check.max_deviation,
                    check.tolerance,
                    check.instances
                );
            }
            if !report.passed() {
                eprintln!("verification failed: {}", report.failed_names().join(", "));
                return Ok(exit_code::VERIFICATION);
            }
        }
        Command::ConfidenceGrid {
            experiment,
            bounds,
            resolution,
        } => {
            let config = experiment.resolve()?;
            let bounds = [bounds[0], bounds[1], bounds[2], bounds[3]];
            let path = runner::run_confidence_grid(&config, &experiment.out, bounds, resolution)?;
            println!("wrote {}", path.display());
        }
        Command::Robustness {
            experiment,
            probe,
            epsilon,
            step_size,
            steps,
        } => {
            let config = experiment.resolve()?;
            let params = ProbeParams {
                kind: probe,
                epsilon,
                step_size,
                steps,
            };
            let report = runner::run_robustness(&config, &experiment.out, params)?;
            println!(
                "clean acc {:.4}  untargeted success {:.4}  targeted success {:.4}",
                report.clean_accuracy, report.untargeted_success, report.targeted_success
            );
        }
    }
    Ok(exit_code::OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
        {
            eprintln!("error: failed to configure thread pool: {e}");
            return ExitCode::from(exit_code::USAGE as u8);
        }
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
