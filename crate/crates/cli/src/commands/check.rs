//! `rice check` — runtime verification against the reference oracles.
//!
//! Runs the finite-difference gradient audits for every component, the
//! masked-attention equivalence suite, and the margin-logit reference suite.
//! Each suite prints one PASS/FAIL line; the command exits 0 only if every
//! tolerance holds, 1 otherwise.

use clap::{Args, ValueEnum};
use rice_core::gradcheck::{
    grad_check, margin_reference_check, mask_oracle_check, CheckComponent,
};
use serde_json::json;

use crate::{CliError, CmdResult, Format, Globals};

const DEFAULT_MASK_CASES: usize = 100;
const DEFAULT_MARGIN_TRIALS: usize = 50;

/// One selectable verification suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    #[value(alias = "encoder")]
    Encoder,
    #[value(alias = "object_loss")]
    ObjectLoss,
    #[value(alias = "ocr_loss")]
    OcrLoss,
    #[value(alias = "end_to_end")]
    EndToEnd,
    #[value(alias = "mask_oracle")]
    MaskOracle,
    #[value(alias = "margin_logits")]
    MarginLogits,
}

impl Suite {
    fn all() -> [Suite; 6] {
        [
            Suite::Encoder,
            Suite::ObjectLoss,
            Suite::OcrLoss,
            Suite::EndToEnd,
            Suite::MaskOracle,
            Suite::MarginLogits,
        ]
    }

    fn label(self) -> &'static str {
        match self {
            Suite::Encoder => "encoder gradients",
            Suite::ObjectLoss => "object-loss gradients",
            Suite::OcrLoss => "ocr-loss gradients",
            Suite::EndToEnd => "end-to-end gradients",
            Suite::MaskOracle => "mask-oracle equivalence",
            Suite::MarginLogits => "margin-logit reference",
        }
    }

    fn grad_component(self) -> Option<CheckComponent> {
        match self {
            Suite::Encoder => Some(CheckComponent::Encoder),
            Suite::ObjectLoss => Some(CheckComponent::ObjectLoss),
            Suite::OcrLoss => Some(CheckComponent::OcrLoss),
            Suite::EndToEnd => Some(CheckComponent::EndToEnd),
            _ => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Run only this suite.
    #[arg(long, value_enum, value_name = "SUITE")]
    pub component: Option<Suite>,

    /// Override the per-suite trial counts.
    #[arg(long)]
    pub trials: Option<usize>,

    /// Override the mask-equivalence case count.
    #[arg(long)]
    pub cases: Option<usize>,

    /// Fault-injection fixture: negate the margin fed to the loss under
    /// test so the margin suite is expected to fail. Exists to prove the
    /// check has teeth.
    #[arg(long, hide = true)]
    pub inject_margin_sign_error: bool,
}

struct SuiteOutcome {
    suite: Suite,
    passed: bool,
    detail: String,
    report: serde_json::Value,
}

fn run_suite(suite: Suite, args: &CheckArgs, seed: u64) -> Result<SuiteOutcome, CliError> {
    let outcome = match suite.grad_component() {
        Some(component) => {
            let trials = args.trials.unwrap_or(component.default_trials());
            let report = grad_check(component, trials, seed)?;
            SuiteOutcome {
                suite,
                passed: report.passed(),
                detail: format!(
                    "max rel err {:.2e} vs {:.0e}, {} trials, {} coords",
                    report.max_rel_err, report.tolerance, report.trials, report.coords_checked
                ),
                report: serde_json::to_value(&report).expect("report serializes"),
            }
        }
        None if suite == Suite::MaskOracle => {
            let cases = args.cases.unwrap_or(DEFAULT_MASK_CASES);
            let report = mask_oracle_check(cases, seed)?;
            SuiteOutcome {
                suite,
                passed: report.passed(),
                detail: format!(
                    "max abs diff {:.2e} vs {:.0e}, {} cases",
                    report.max_abs_diff, report.tolerance, report.cases
                ),
                report: serde_json::to_value(&report).expect("report serializes"),
            }
        }
        None => {
            let trials = args.trials.unwrap_or(DEFAULT_MARGIN_TRIALS);
            let report = margin_reference_check(trials, seed, args.inject_margin_sign_error)?;
            SuiteOutcome {
                suite,
                passed: report.passed(),
                detail: format!(
                    "max abs diff {:.2e} vs {:.0e}, {} trials",
                    report.max_abs_diff, report.tolerance, report.trials
                ),
                report: serde_json::to_value(&report).expect("report serializes"),
            }
        }
    };
    Ok(outcome)
}

pub fn run(args: &CheckArgs, globals: &Globals) -> CmdResult {
    let suites: Vec<Suite> = match args.component {
        Some(one) => vec![one],
        None => Suite::all().to_vec(),
    };
    let seed = globals.effective_seed()?;

    let mut outcomes = Vec::with_capacity(suites.len());
    for suite in suites {
        outcomes.push(run_suite(suite, args, seed)?);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();

    match globals.format {
        Format::Text => {
            for outcome in &outcomes {
                let verdict = if outcome.passed { "PASS" } else { "FAIL" };
                println!(
                    "check: {verdict} - {} ({})",
                    outcome.suite.label(),
                    outcome.detail
                );
            }
            if failed == 0 {
                println!("all {} checks passed", outcomes.len());
            }
        }
        Format::Json => println!(
            "{}",
            json!({
                "passed": failed == 0,
                "suites": outcomes
                    .iter()
                    .map(|o| json!({
                        "suite": o.suite.label(),
                        "passed": o.passed,
                        "report": o.report,
                    }))
                    .collect::<Vec<_>>(),
            })
        ),
    }

    if failed > 0 {
        return Err(CliError::ChecksFailed {
            failed,
            total: outcomes.len(),
        });
    }
    Ok(())
}
