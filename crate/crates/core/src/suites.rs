//! Seeded multi-run drivers. Runs are independent rayon tasks; results are
//! sorted by trial index before they are folded, so output does not depend on
//! the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{AdversarySpec, SpecError};
use crate::bitcoin_sim::{run, SimError};
use crate::metrics::{bitcoin_suite, max_reorg_depth, merge_reports, prism_suite, ImplicationReport, ScanPlan};
use crate::params::ProtocolParams;
use crate::prism_sim::run_prism;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SuiteError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("trial {trial}: {source}")]
    Sim { trial: u64, source: SimError },
}

fn sorted<T: Send>(mut v: Vec<(u64, T)>) -> impl Iterator<Item = T> {
    v.sort_by_key(|(t, _)| *t);
    v.into_iter().map(|(_, x)| x)
}

/// Implication suites over `trials` Bitcoin runs.
pub fn bitcoin_implications(
    params: &ProtocolParams,
    adversary: &AdversarySpec,
    trials: u64,
    plan: &ScanPlan,
    allow_unsafe: bool,
) -> Result<Vec<ImplicationReport>, SuiteError> {
    adversary.bitcoin()?;
    let runs = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut adv = adversary.bitcoin()?;
            let rec = run(params, adv.as_mut(), trial, allow_unsafe).map_err(|source| SuiteError::Sim { trial, source })?;
            Ok((trial, bitcoin_suite(&rec, plan)))
        })
        .collect::<Result<Vec<_>, SuiteError>>()?;
    Ok(merge_reports(sorted(runs)))
}

/// Implication suites over `trials` Prism runs.
pub fn prism_implications(
    params: &ProtocolParams,
    adversary: &AdversarySpec,
    trials: u64,
    plan: &ScanPlan,
    allow_unsafe: bool,
) -> Result<Vec<ImplicationReport>, SuiteError> {
    adversary.prism()?;
    let runs = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut adv = adversary.prism()?;
            let rec =
                run_prism(params, adv.as_mut(), trial, allow_unsafe).map_err(|source| SuiteError::Sim { trial, source })?;
            Ok((trial, prism_suite(&rec, plan)))
        })
        .collect::<Result<Vec<_>, SuiteError>>()?;
    Ok(merge_reports(sorted(runs)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OvertakeReport {
    pub adversary: String,
    pub depth: u32,
    pub trials: u64,
    /// Runs in which some honest miner abandoned a block buried under `depth` others.
    pub overtaken: u64,
    /// Deepest reorganization per run, in trial order.
    pub max_depths: Vec<u32>,
}

/// Counts runs where an honest miner drops a block with at least `depth` blocks on top.
pub fn overtake_rate(
    params: &ProtocolParams,
    adversary: &AdversarySpec,
    trials: u64,
    depth: u32,
    allow_unsafe: bool,
) -> Result<OvertakeReport, SuiteError> {
    adversary.bitcoin()?;
    let runs = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut adv = adversary.bitcoin()?;
            let rec = run(params, adv.as_mut(), trial, allow_unsafe).map_err(|source| SuiteError::Sim { trial, source })?;
            Ok((trial, max_reorg_depth(&rec.blocks, &rec.tips)))
        })
        .collect::<Result<Vec<_>, SuiteError>>()?;
    let max_depths: Vec<u32> = sorted(runs).collect();
    Ok(OvertakeReport {
        adversary: adversary.name().to_string(),
        depth,
        trials,
        overtaken: max_depths.iter().filter(|&&d| d > depth).count() as u64,
        max_depths,
    })
}
