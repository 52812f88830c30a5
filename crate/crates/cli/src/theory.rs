//! Identifiability checks on a family specification read from JSON.

use std::path::Path;

use gcl_core::numerics::SeededRng;
use gcl_core::theorycheck::{
    check_alt_variability, check_expfam_consistency_form, check_variability, lambda_bar_condition,
    ConditionalFamily, ConsistencyReport, ExpFamily, ExpFamilySpec, VariabilityVerdict,
};
use serde::{Deserialize, Serialize};

use crate::config::{parse_json, read_json};
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TheoryCheck {
    Variability {
        y: Vec<f64>,
        #[serde(default = "default_trials")]
        n_trials: usize,
        #[serde(default)]
        seed: u64,
    },
    AltVariability {
        y: Vec<f64>,
        /// Coordinate of `u` to differentiate along.
        #[serde(default)]
        j: usize,
        #[serde(default = "default_trials")]
        n_trials: usize,
        #[serde(default)]
        seed: u64,
    },
    LambdaBar {
        #[serde(default = "default_trials")]
        n_draws: usize,
        #[serde(default)]
        seed: u64,
    },
    ConsistencyForm,
}

fn default_trials() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryDoc {
    pub family: ExpFamilySpec,
    pub check: TheoryCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaBarVerdict {
    pub n_draws: usize,
    pub finite: usize,
    /// Condition number of every draw; `None` marks a singular matrix.
    pub conditions: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum TheoryVerdict {
    Variability(VariabilityVerdict),
    AltVariability(VariabilityVerdict),
    LambdaBar(LambdaBarVerdict),
    ConsistencyForm(ConsistencyReport),
}

pub fn load_doc(path: &Path) -> Result<TheoryDoc, CliError> {
    read_json(path)
}

pub fn parse_doc(text: &str) -> Result<TheoryDoc, CliError> {
    parse_json(text)
}

/// Draws `nk + 1` aux points per draw and records the condition number of
/// the resulting centred λ matrix.
pub fn lambda_bar_draws(fam: &ExpFamily, n_draws: usize, seed: u64) -> Result<LambdaBarVerdict, CliError> {
    if n_draws == 0 {
        return Err(CliError::Config("check.n_draws must be at least 1".into()));
    }
    let root = SeededRng::new(seed);
    let points = fam.n * fam.k + 1;
    let conditions = (0..n_draws)
        .map(|d| {
            let us = fam.aux.sample(points, &mut root.split(d as u64));
            let c = lambda_bar_condition(fam, &us)?;
            Ok(c.is_finite().then_some(c))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(LambdaBarVerdict {
        n_draws,
        finite: conditions.iter().filter(|c| c.is_some()).count(),
        conditions,
    })
}

pub fn run_check(doc: &TheoryDoc) -> Result<TheoryVerdict, CliError> {
    let check_y = |y: &[f64]| {
        if y.len() != doc.family.n {
            Err(CliError::Config(format!(
                "check.y has {} entries, the family has n = {}",
                y.len(),
                doc.family.n
            )))
        } else {
            Ok(())
        }
    };
    Ok(match &doc.check {
        TheoryCheck::Variability { y, n_trials, seed } => {
            check_y(y)?;
            let fam = ConditionalFamily::from_spec(&doc.family)?;
            TheoryVerdict::Variability(check_variability(&fam, y, *n_trials, &SeededRng::new(*seed))?)
        }
        TheoryCheck::AltVariability { y, j, n_trials, seed } => {
            check_y(y)?;
            let fam = ConditionalFamily::from_spec(&doc.family)?;
            TheoryVerdict::AltVariability(check_alt_variability(&fam, y, *j, *n_trials, &SeededRng::new(*seed))?)
        }
        TheoryCheck::LambdaBar { n_draws, seed } => {
            let fam = ExpFamily::new(&doc.family)?;
            TheoryVerdict::LambdaBar(lambda_bar_draws(&fam, *n_draws, *seed)?)
        }
        TheoryCheck::ConsistencyForm => {
            let fam = ExpFamily::new(&doc.family)?;
            TheoryVerdict::ConsistencyForm(check_expfam_consistency_form(&fam))
        }
    })
}
