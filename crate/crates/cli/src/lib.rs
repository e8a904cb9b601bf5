//! Library side of the `sia` command-line tool.
//!
//! Each subcommand resolves a [`config::RunConfig`] (file first, then flags)
//! and hands it to the matching function in [`commands`].

pub mod args;
pub mod commands;
pub mod config;
pub mod output;

use sia_core::ErrorCategory;

use args::{Cli, Command, CommonArgs};
use config::RunConfig;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<sia_core::Error>() {
            return match e.category() {
                ErrorCategory::Validation => EXIT_VALIDATION,
                ErrorCategory::Io => EXIT_IO,
                ErrorCategory::Check => EXIT_CHECK,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_VALIDATION
}

fn base_config(common: &CommonArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    common.apply(&mut cfg);
    Ok(cfg)
}

/// Resolves the configuration for `command` without running it.
pub fn resolve(command: &Command) -> anyhow::Result<RunConfig> {
    let cfg = match command {
        Command::GenSynth { common, synth } => {
            let mut cfg = base_config(common)?;
            synth.apply(&mut cfg);
            cfg
        }
        Command::Train { common, data, bank, train, classifier } => {
            let mut cfg = base_config(common)?;
            data.apply(&mut cfg);
            bank.apply(&mut cfg);
            train.apply(&mut cfg);
            classifier.apply(&mut cfg);
            cfg
        }
        Command::Eval { common, data, bank, classifier, init_bank, export_features } => {
            let mut cfg = base_config(common)?;
            data.apply(&mut cfg);
            bank.apply(&mut cfg);
            classifier.apply(&mut cfg);
            cfg.eval.init_bank |= *init_bank;
            cfg.eval.export_features |= *export_features;
            cfg
        }
        Command::Gradcheck { common, check } => {
            let mut cfg = base_config(common)?;
            check.apply(&mut cfg);
            cfg
        }
        Command::AblateN { common, data, bank, train, classifier, n_list, thin_per_cell } => {
            let mut cfg = base_config(common)?;
            data.apply(&mut cfg);
            bank.apply(&mut cfg);
            train.apply(&mut cfg);
            classifier.apply(&mut cfg);
            if let Some(n) = n_list {
                cfg.ablate.n_values.clone_from(n);
            }
            if thin_per_cell.is_some() {
                cfg.ablate.thin_per_cell = *thin_per_cell;
            }
            cfg
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command line, printing a short summary to stdout.
pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli.command)?;
    match &cli.command {
        Command::GenSynth { .. } => {
            let s = commands::gen_synth(&cfg)?;
            println!(
                "wrote {} samples ({} train, {} eval); oracle eval accuracy {}",
                s.samples,
                s.train_samples,
                s.eval_samples,
                fmt_opt(s.oracle_accuracy_eval)
            );
        }
        Command::Train { .. } => {
            let s = commands::train(&cfg)?;
            println!(
                "checkpoint {}; loss {:.6} -> {:.6}",
                s.checkpoint.display(),
                s.report.initial_loss,
                s.report.final_loss
            );
        }
        Command::Eval { .. } => {
            let s = commands::eval(&cfg)?;
            println!(
                "accuracy {:.4}; baseline {:.4}; gain {:+.4}",
                s.adapted.overall_accuracy, s.baseline.overall_accuracy, s.accuracy_gain
            );
        }
        Command::Gradcheck { check, .. } => {
            let s = commands::gradcheck(&cfg, check.corrupt_gradients)?;
            println!(
                "{}: max relative error {:e} over {} coordinates ({} skipped), tolerance {:e}",
                if s.passed { "PASS" } else { "FAIL" },
                s.report.max_rel_error,
                s.report.compared,
                s.report.skipped,
                s.tolerance
            );
            if !s.passed {
                return Err(sia_core::Error::CheckFailed(format!(
                    "max relative error {:e} exceeds {:e}",
                    s.report.max_rel_error, s.tolerance
                ))
                .into());
            }
        }
        Command::AblateN { .. } => {
            let s = commands::ablate_n(&cfg)?;
            println!("num_adapters\taccuracy");
            for r in &s.rows {
                println!("{}\t{:.4}", r.num_adapters, r.accuracy);
            }
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}
