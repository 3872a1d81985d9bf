use std::path::Path;

use anyhow::{bail, Result};
use chainlab::bitcoin_sim::run;
use chainlab::bounds::{depth_reports, span_reports, tx_wait, wait_reports, BoundReport, Model};
use chainlab::metrics::{
    bitcoin_suite, event_frequency, merge_reports, planted_fixture_reports, prism_suite, tx_latencies, wilson,
    EventId, FrequencyReport, ImplicationReport, Z99,
};
use chainlab::params::{DerivedParams, ProtocolParams, Rates};
use chainlab::prism_sim::run_prism;
use chainlab::trace::{stream_rng, Stream};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{check_admissible, ExperimentConfig, NetModel, Protocol, Suite};
use crate::output::{
    write_csv, write_json, write_text, BOUNDS_SCHEMA, FREQUENCIES_SCHEMA, IMPLICATIONS_SCHEMA, LATENCY_SCHEMA,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Clean,
    Violations,
}

impl Status {
    fn and(self, other: Status) -> Status {
        if self == Status::Violations || other == Status::Violations {
            Status::Violations
        } else {
            Status::Clean
        }
    }
}

fn bound_model(m: NetModel) -> Model {
    match m {
        NetModel::Sync => Model::Synchronous,
        NetModel::Bounded => Model::BoundedDelay,
    }
}

/// The bound table for the config's rates over its grid.
pub fn bound_table(cfg: &ExperimentConfig, d: &DerivedParams) -> Vec<BoundReport> {
    let rates = d.rates();
    let g = &cfg.bounds;
    let mut rows: Vec<BoundReport> = g.spans.iter().flat_map(|&s| span_reports(s, &rates, d.delay)).collect();
    rows.extend(g.depths.iter().flat_map(|&k| depth_reports(k, &rates, cfg.params.m, d.delay)));
    for model in [Model::Synchronous, Model::BoundedDelay] {
        rows.extend(g.epsilons.iter().flat_map(|&e| wait_reports(e, &rates, cfg.params.m, model, d.delay)));
    }
    rows
}

pub fn bounds(cfg: &ExperimentConfig) -> Result<Status> {
    let params = cfg.protocol_params()?;
    let d = chainlab::params::derive_unchecked(&params)?;
    emit_bounds(cfg, &d)?;
    Ok(Status::Clean)
}

fn emit_bounds(cfg: &ExperimentConfig, d: &DerivedParams) -> Result<()> {
    let rows = bound_table(cfg, d);
    let dir = &cfg.outputs.dir;
    write_csv(&dir.join("bounds.csv"), &rows)?;
    write_json(&dir.join("bounds.json"), BOUNDS_SCHEMA, &rows)?;
    println!("bounds: {} rows (xi = {:.6}, q = {:.6}) -> {}", rows.len(), d.xi, d.q, dir.join("bounds.csv").display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct ImplicationRow<'a> {
    theorem: &'a str,
    scanned: u64,
    held: u64,
    violations: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LatencySummary {
    pub epsilon: f64,
    /// tx_wait(ε), absent when the bound is unavailable for these parameters.
    pub wait: Option<u64>,
    /// Transactions mined at least `wait` rounds before the end of the run.
    pub eligible: u64,
    pub within_wait: u64,
    pub unresolved: u64,
    pub fraction: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub vacuous: bool,
    pub flagged: bool,
}

struct TrialOut {
    reports: Vec<ImplicationReport>,
    latency: (u64, u64, u64),
}

fn run_trials(cfg: &ExperimentConfig, params: &ProtocolParams, wait: Option<u64>, unsafe_run: bool, records: bool) -> Result<Vec<TrialOut>> {
    let want_impl = cfg.suites.contains(&Suite::Implications);
    let want_latency = cfg.suites.contains(&Suite::Latency) && cfg.protocol == Protocol::Prism;
    let dir = cfg.outputs.dir.join("records");
    let mut outs = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| -> Result<(u64, TrialOut)> {
            let mut out = TrialOut { reports: Vec::new(), latency: (0, 0, 0) };
            match cfg.protocol {
                Protocol::Bitcoin => {
                    let mut adv = cfg.adversary.bitcoin()?;
                    let rec = run(params, adv.as_mut(), trial, unsafe_run)?;
                    if want_impl {
                        out.reports = bitcoin_suite(&rec, &cfg.scan);
                    }
                    if records {
                        write_text(&dir.join(format!("trial-{trial:06}.json")), &rec.to_json())?;
                    }
                }
                Protocol::Prism => {
                    let mut adv = cfg.adversary.prism()?;
                    let rec = run_prism(params, adv.as_mut(), trial, unsafe_run)?;
                    if want_impl {
                        out.reports = prism_suite(&rec, &cfg.scan);
                    }
                    if let (true, Some(w)) = (want_latency, wait) {
                        let end = rec.end_round();
                        for (tx, lat) in tx_latencies(&rec, cfg.latency.step) {
                            let mined = rec.store.block(tx as u32).mined_round;
                            if u64::from(mined) + w > u64::from(end) {
                                continue;
                            }
                            out.latency.0 += 1;
                            match lat {
                                Some(l) if u64::from(l) <= w => out.latency.1 += 1,
                                Some(_) => {}
                                None => out.latency.2 += 1,
                            }
                        }
                    }
                    if records {
                        write_text(&dir.join(format!("trial-{trial:06}.json")), &rec.to_json())?;
                    }
                }
            }
            Ok((trial, out))
        })
        .collect::<Result<Vec<_>>>()?;
    outs.sort_by_key(|(t, _)| *t);
    Ok(outs.into_iter().map(|(_, o)| o).collect())
}

fn events_for(model: NetModel) -> &'static [EventId] {
    match model {
        NetModel::Sync => &[EventId::E, EventId::E1, EventId::E2, EventId::E3],
        NetModel::Bounded => &[EventId::F],
    }
}

fn frequencies(cfg: &ExperimentConfig, params: &ProtocolParams) -> Result<Vec<FrequencyReport>> {
    let jobs: Vec<(u64, EventId, u32)> = events_for(cfg.model)
        .iter()
        .flat_map(|&e| cfg.events.spans.iter().map(move |&s| (e, s)))
        .enumerate()
        .map(|(i, (e, s))| (i as u64, e, s))
        .collect();
    let trials = cfg.events.trials;
    let mut out = jobs
        .into_par_iter()
        .map(|(i, e, s)| {
            let mut rng = stream_rng(params.seed, i, Stream::Aux);
            Ok((i, event_frequency(e, s, params, trials, &mut rng)?))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, r)| r).collect())
}

fn latency_wait(cfg: &ExperimentConfig, d: &DerivedParams) -> Option<u64> {
    let rates = Rates::new(d.xi, d.q);
    tx_wait(cfg.latency.epsilon, &rates, cfg.params.m, bound_model(cfg.model), d.delay).ok()
}

/// Shared pipeline of `simulate` and `verify`.
fn pipeline(cfg: &ExperimentConfig, records: bool) -> Result<Status> {
    let params = cfg.protocol_params()?;
    let (d, unsafe_run) = check_admissible(cfg.model, &params, cfg.unsafe_override)?;
    let dir = &cfg.outputs.dir;
    let mut status = Status::Clean;
    if cfg.suites.contains(&Suite::Bounds) {
        emit_bounds(cfg, &d)?;
    }
    if cfg.suites.contains(&Suite::Events) {
        let reps = frequencies(cfg, &params)?;
        for r in &reps {
            let tag = if r.flagged { "FLAGGED" } else if r.vacuous { "vacuous" } else { "ok" };
            println!(
                "event {:?} span {}: success {:.5} (99% CI [{:.5}, {:.5}]) vs bound {:.5} {tag}",
                r.event, r.span, r.success_freq, r.wilson_lo, r.wilson_hi, r.analytic_lb
            );
            if r.flagged {
                status = Status::Violations;
            }
        }
        write_csv(&dir.join("frequencies.csv"), &reps)?;
        write_json(&dir.join("frequencies.json"), FREQUENCIES_SCHEMA, &reps)?;
    }
    let want_latency = cfg.suites.contains(&Suite::Latency);
    if want_latency && cfg.protocol != Protocol::Prism {
        eprintln!("warning: the latency suite applies to prism only; skipped");
    }
    let wait = latency_wait(cfg, &d);
    if cfg.suites.contains(&Suite::Implications) || want_latency || records {
        let outs = run_trials(cfg, &params, wait, unsafe_run, records)?;
        if cfg.suites.contains(&Suite::Implications) {
            let merged = merge_reports(outs.iter().map(|o| o.reports.clone()));
            status = status.and(report_implications(dir, &merged)?);
        }
        if want_latency && cfg.protocol == Protocol::Prism {
            let (eligible, within, unresolved) =
                outs.iter().fold((0, 0, 0), |a, o| (a.0 + o.latency.0, a.1 + o.latency.1, a.2 + o.latency.2));
            let (lo, hi) = wilson(within, eligible, Z99);
            let vacuous = wait.is_none() || eligible == 0;
            let s = LatencySummary {
                epsilon: cfg.latency.epsilon,
                wait,
                eligible,
                within_wait: within,
                unresolved,
                fraction: if eligible == 0 { 0.0 } else { within as f64 / eligible as f64 },
                wilson_lo: lo,
                wilson_hi: hi,
                vacuous,
                flagged: !vacuous && hi < 1.0 - cfg.latency.epsilon,
            };
            println!(
                "latency: {within}/{eligible} txs settled within tx_wait = {} ({})",
                wait.map_or("n/a".to_string(), |w| w.to_string()),
                if s.flagged { "FLAGGED" } else if vacuous { "vacuous" } else { "ok" }
            );
            if s.flagged {
                status = Status::Violations;
            }
            write_csv(&dir.join("latency.csv"), std::slice::from_ref(&s))?;
            write_json(&dir.join("latency.json"), LATENCY_SCHEMA, &s)?;
        }
    }
    Ok(status)
}

fn report_implications(dir: &Path, merged: &[ImplicationReport]) -> Result<Status> {
    let mut status = Status::Clean;
    for r in merged {
        println!("{:<28} scanned {:>9}  held {:>9}  violations {}", r.theorem, r.scanned, r.held, r.violations);
        if r.violations > 0 {
            status = Status::Violations;
            for c in &r.counterexamples {
                println!("  counterexample: {}", serde_json::to_string(c)?);
            }
        }
    }
    let rows: Vec<ImplicationRow<'_>> = merged
        .iter()
        .map(|r| ImplicationRow { theorem: &r.theorem, scanned: r.scanned, held: r.held, violations: r.violations })
        .collect();
    write_csv(&dir.join("implications.csv"), &rows)?;
    write_json(&dir.join("implications.json"), IMPLICATIONS_SCHEMA, &merged)?;
    Ok(status)
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Status> {
    pipeline(cfg, cfg.outputs.records)
}

/// Closed-form spot checks that need no simulation.
fn bound_oracles(cfg: &ExperimentConfig, d: &DerivedParams) -> Status {
    let mut status = Status::Clean;
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            status = Status::Violations;
        }
    };
    let eta = Rates::new(1.0, 1.0 / 6.0).eta();
    check("eta(xi=1, q=1/6) = 1/1080", ((eta - 1.0 / 1080.0) * 1080.0).abs() < 1e-12);
    check("eta' < 1/4000", d.rates().eta_prime(d.delay) < 1.0 / 4000.0);
    let rows = bound_table(cfg, d);
    let eps: Vec<f64> = rows.iter().filter(|r| r.formula_id == "epsilon_k").map(|r| r.value).collect();
    check("epsilon_k non-increasing in k", eps.windows(2).all(|w| w[1] <= w[0]));
    status
}

pub fn verify(cfg: &ExperimentConfig) -> Result<Status> {
    let params = cfg.protocol_params()?;
    let (d, _) = check_admissible(cfg.model, &params, cfg.unsafe_override)?;
    let mut status = Status::Clean;
    if cfg.suites.contains(&Suite::Bounds) {
        status = bound_oracles(cfg, &d);
    }
    let status = status.and(pipeline(cfg, false)?);
    println!("verify: {}", if status == Status::Clean { "clean" } else { "VIOLATIONS" });
    Ok(status)
}

/// Runs the sync suite on the planted fixture and prints a fingerprint per
/// detected violation.
pub fn verify_planted(out: Option<&Path>) -> Result<Status> {
    let reps = planted_fixture_reports();
    if reps.iter().any(|r| r.violations == 0) {
        bail!("planted fixture: a planted violation went undetected");
    }
    for r in &reps {
        let c = &r.counterexamples[0];
        println!("VIOLATION {} seed={} trial={} s={} r={}: {}", r.theorem, c.seed, c.trial, c.s, c.r, c.detail);
    }
    if let Some(dir) = out {
        write_json(&dir.join("implications.json"), IMPLICATIONS_SCHEMA, &reps)?;
    }
    Ok(Status::Violations)
}
