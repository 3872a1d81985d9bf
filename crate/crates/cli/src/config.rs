//! Experiment configuration. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chainlab::adversary::AdversarySpec;
use chainlab::metrics::ScanPlan;
use chainlab::params::{derive_unchecked, p_for_q, DerivedParams, ProtocolParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Bitcoin,
    Prism,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetModel {
    Sync,
    Bounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Bounds,
    Events,
    Implications,
    Latency,
}

/// `[params]`: exactly one of `p` and `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub n: u32,
    pub t: u32,
    #[serde(default)]
    pub p: Option<f64>,
    /// Target honest success rate; converted to `p`.
    #[serde(default)]
    pub q: Option<f64>,
    #[serde(rename = "T", default = "one")]
    pub delay: u32,
    #[serde(default = "one")]
    pub m: u32,
    pub horizon: u32,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    /// Write one JSON record per trial under `dir/records`.
    #[serde(default)]
    pub records: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for Outputs {
    fn default() -> Self {
        Self { dir: default_out(), records: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsGrid {
    #[serde(default = "default_spans")]
    pub spans: Vec<f64>,
    #[serde(default = "default_depths")]
    pub depths: Vec<u64>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
}

fn default_spans() -> Vec<f64> {
    vec![1e3, 1e4, 1e5, 1e6, 1e7]
}

fn default_depths() -> Vec<u64> {
    (1..=100).collect()
}

fn default_epsilons() -> Vec<f64> {
    vec![0.1, 0.05, 0.025, 0.0125]
}

impl Default for BoundsGrid {
    fn default() -> Self {
        Self { spans: default_spans(), depths: default_depths(), epsilons: default_epsilons() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventsConfig {
    #[serde(default = "default_event_spans")]
    pub spans: Vec<u32>,
    #[serde(default = "default_event_trials")]
    pub trials: u64,
}

fn default_event_spans() -> Vec<u32> {
    vec![100, 1000]
}

fn default_event_trials() -> u64 {
    1000
}

impl Default for EventsConfig {
    fn default() -> Self {
        Self { spans: default_event_spans(), trials: default_event_trials() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyConfig {
    #[serde(default = "default_latency_step")]
    pub step: u32,
    #[serde(default = "default_latency_eps")]
    pub epsilon: f64,
}

fn default_latency_step() -> u32 {
    50
}

fn default_latency_eps() -> f64 {
    0.1
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self { step: default_latency_step(), epsilon: default_latency_eps() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub model: NetModel,
    pub params: ParamsConfig,
    #[serde(default = "null_adversary")]
    pub adversary: AdversarySpec,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub outputs: Outputs,
    #[serde(default = "default_suites")]
    pub suites: Vec<Suite>,
    /// Run even when the parameters are outside the admissible region.
    #[serde(default)]
    pub unsafe_override: bool,
    #[serde(default)]
    pub scan: ScanPlan,
    #[serde(default)]
    pub bounds: BoundsGrid,
    #[serde(default)]
    pub events: EventsConfig,
    #[serde(default)]
    pub latency: LatencyConfig,
}

fn null_adversary() -> AdversarySpec {
    AdversarySpec::Null
}

fn default_trials() -> u64 {
    1
}

fn default_suites() -> Vec<Suite> {
    vec![Suite::Implications]
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(cfg)
    }

    /// Protocol parameters with `p` resolved and the model's delay rules applied.
    pub fn protocol_params(&self) -> Result<ProtocolParams> {
        let c = &self.params;
        let p = match (c.p, c.q) {
            (Some(p), None) => p,
            (None, Some(q)) => {
                if !(q > 0.0 && q < 1.0) || c.t >= c.n {
                    bail!("q = {q} needs 0 < q < 1 and t < n");
                }
                p_for_q(c.n, c.t, q)
            }
            _ => bail!("[params] needs exactly one of p and q"),
        };
        match self.model {
            NetModel::Sync if c.delay != 1 => bail!("model = \"sync\" requires T = 1, got T = {}", c.delay),
            NetModel::Bounded if c.delay < 1 => bail!("model = \"bounded\" requires T >= 1"),
            _ => {}
        }
        Ok(ProtocolParams { n: c.n, t: c.t, p, delay: c.delay, m: c.m, horizon: c.horizon, seed: c.seed })
    }
}

/// Why the parameters fall outside the model's admissible region, if they do.
pub fn admissibility_problem(model: NetModel, d: &DerivedParams) -> Option<String> {
    if 2 * u64::from(d.t) >= u64::from(d.n) {
        return Some(format!("beta = {:.4} is not below 1/2", d.beta));
    }
    match model {
        NetModel::Sync if !d.sync_admissible => {
            Some(format!("q = {:.6} exceeds xi/6 = {:.6}", d.q, d.xi / 6.0))
        }
        NetModel::Bounded if !d.bounded_admissible => Some(format!(
            "q = {:.6} exceeds xi/(20T) = {:.6}",
            d.q,
            d.xi / (20.0 * f64::from(d.delay))
        )),
        _ => None,
    }
}

/// Derives constants and enforces admissibility unless overridden. Returns the
/// derived parameters and whether the run must bypass the simulator's checks.
pub fn check_admissible(model: NetModel, params: &ProtocolParams, overridden: bool) -> Result<(DerivedParams, bool)> {
    let d = derive_unchecked(params)?;
    match admissibility_problem(model, &d) {
        None => Ok((d, false)),
        Some(why) if overridden => {
            eprintln!("warning: parameters are not admissible ({why}); continuing under --unsafe-override");
            Ok((d, true))
        }
        Some(why) => bail!("parameters are not admissible: {why} (pass --unsafe-override to run anyway)"),
    }
}
