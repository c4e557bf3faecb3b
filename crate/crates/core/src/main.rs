use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{CommandFactory, Parser, Subcommand};

use icleq::checks::{gradcheck_all, kernelcheck, lmmse_oracle};
use icleq::config::{load_config, parse_method};
use icleq::error::{Error, Result};
use icleq::harness::{emit_csv, evaluate, parse_csv};
use icleq::model::{train, write_loss_curve, TrainStatus};
use icleq::plot::emit_plot;

#[derive(Parser)]
#[command(
    name = "icleq",
    about = "In-context-learning equalization workbench for time-varying MIMO channels"
)]
struct Cli {
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// TOML configuration file (see README for the schema).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for checkpoints, CSVs, and plots.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an equalizer; writes checkpoint.ckpt and loss_curve.csv.
    Train,
    /// Monte-Carlo MSE of one or more methods at fixed channel parameters.
    Eval {
        /// Method spec: zero, lmmse, or model:<checkpoint>. Repeatable.
        #[arg(long = "method")]
        methods: Vec<String>,
        #[arg(long)]
        n_eval: Option<usize>,
    },
    /// Run the configured parameter sweep; writes sweep.csv and sweep.svg.
    Sweep,
    /// Check every model gradient against central finite differences.
    Gradcheck,
    /// Check the attention kernel algebra (closed form, error law, bounds).
    Kernelcheck,
    /// Check the closed-form estimator against independent solves and an
    /// empirically fitted linear filter.
    OracleLmmse,
    /// Render a sweep CSV to an SVG plot.
    Plot {
        /// Result CSV produced by `sweep`.
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error: {}", msg.lines().next().unwrap_or("invalid arguments"));
            eprintln!("{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    let seed = cli.seed.or(config.seed).unwrap_or(2024);
    std::fs::create_dir_all(&cli.out)?;

    match cli.command {
        Command::Train => {
            let channel = config.channel.resolve()?;
            let model_cfg = config.model.resolve(&channel)?;
            let train_cfg = config.train.resolve(seed, channel)?;
            println!(
                "training {} attention: {} steps, batch {}, pool {}, seed {seed}",
                model_cfg.attention, train_cfg.steps, train_cfg.batch_size, train_cfg.pool_size
            );
            let t0 = Instant::now();
            let result = train(model_cfg, &train_cfg, Some(&cli.out))?;
            write_loss_curve(&cli.out.join("loss_curve.csv"), &result.curve)?;
            let ckpt = cli.out.join("checkpoint.ckpt");
            match result.status {
                TrainStatus::Completed => {
                    println!(
                        "done in {:.1}s, final loss {:.6}, checkpoint {}",
                        t0.elapsed().as_secs_f64(),
                        result.curve.last().copied().unwrap_or(f64::NAN),
                        ckpt.display()
                    );
                    Ok(())
                }
                TrainStatus::Diverged { step, loss } => {
                    println!("last-good checkpoint kept at {}", ckpt.display());
                    Err(Error::Diverged { step, loss })
                }
            }
        }
        Command::Eval { methods, n_eval } => {
            let channel = config.channel.resolve()?;
            let n_eval = n_eval.or(config.n_eval).unwrap_or(200);
            let specs = if methods.is_empty() {
                vec!["lmmse".to_string(), "zero".to_string()]
            } else {
                methods
            };
            println!(
                "eval at rho={} snr_db={} bits={} k={} (n_eval={n_eval}, seed={seed})",
                channel.rho, channel.snr_db, channel.bits, channel.k
            );
            for spec in &specs {
                let method = parse_method(spec)?;
                let (mse, se) = evaluate(&method, &channel, n_eval, seed)?;
                println!("{:<12} mse={mse:.6e} stderr={se:.3e}", method.name());
            }
            Ok(())
        }
        Command::Sweep => {
            let channel = config.channel.resolve()?;
            let section = config
                .sweep
                .clone()
                .ok_or_else(|| Error::contract("config has no [sweep] section"))?;
            let spec = section.resolve(channel, seed, config.n_eval.unwrap_or(200))?;
            let table = icleq::harness::run_sweep(&spec)?;
            let csv = cli.out.join("sweep.csv");
            let svg = cli.out.join("sweep.svg");
            emit_csv(&table, &csv)?;
            emit_plot(&table, &svg)?;
            for r in &table.rows {
                println!(
                    "{}={:<8} {:<12} mse={:.6e} stderr={:.3e}",
                    r.axis, r.value, r.method, r.mse, r.stderr
                );
            }
            println!("wrote {} and {}", csv.display(), svg.display());
            Ok(())
        }
        Command::Gradcheck => {
            let reports = gradcheck_all(seed)?;
            let mut ok = true;
            for r in &reports {
                ok &= r.pass();
                println!(
                    "gradcheck {:<10} max rel err {:.3e} over {} params (worst: {}) {}",
                    r.kind.to_string(),
                    r.max_rel_err,
                    r.params_checked,
                    r.worst_tensor,
                    if r.pass() { "PASS" } else { "FAIL" }
                );
            }
            if ok {
                Ok(())
            } else {
                Err(Error::contract("gradient check failed"))
            }
        }
        Command::Kernelcheck => {
            let r = kernelcheck(seed);
            println!(
                "multi-step closed form vs iterated: max |delta| {:.3e} {}",
                r.multi_vs_iterated_max_abs,
                if r.pass_multi() { "PASS" } else { "FAIL" }
            );
            println!(
                "geometric residual law:             max rel {:.3e} {}",
                r.geometric_law_max_rel,
                if r.pass_geometric() { "PASS" } else { "FAIL" }
            );
            println!(
                "single-step vs delta-rule form:     max |delta| {:.3e} {}",
                r.delta_form_max_abs,
                if r.pass_delta_form() { "PASS" } else { "FAIL" }
            );
            println!(
                "bounded vs unbounded updates:       lrms dev {:.3e}, lms ratio {:.3e} {}",
                r.lrms_update_max_dev,
                r.lms_outlier_min_ratio,
                if r.pass_robustness() { "PASS" } else { "FAIL" }
            );
            if r.pass() {
                Ok(())
            } else {
                Err(Error::contract("kernel check failed"))
            }
        }
        Command::OracleLmmse => {
            let r = lmmse_oracle(seed, 100_000)?;
            println!(
                "ridge solve agreement: max |delta| {:.3e} {}",
                r.ridge_max_diff,
                if r.pass_ridge() { "PASS" } else { "FAIL" }
            );
            println!(
                "closed form mse {:.6e} (se {:.1e}) vs fitted filter mse {:.6e} (se {:.1e}) {}",
                r.lmmse_mse,
                r.lmmse_se,
                r.fitted_mse,
                r.fitted_se,
                if r.pass_optimality() { "PASS" } else { "FAIL" }
            );
            if r.pass() {
                Ok(())
            } else {
                Err(Error::contract("estimator oracle check failed"))
            }
        }
        Command::Plot { input } => {
            let table = parse_csv(&input)?;
            let stem = input
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("plot");
            let svg = cli.out.join(format!("{stem}.svg"));
            emit_plot(&table, &svg)?;
            println!("wrote {}", svg.display());
            Ok(())
        }
    }
}
