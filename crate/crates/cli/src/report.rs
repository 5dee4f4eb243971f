use serde::Serialize;
use wlqmc::checks::CheckOutcome;
use wlqmc::{BoundsReport, Estimate, McmcParams};

/// Wall-clock seconds per phase. Always serialized last so reports can be
/// compared after dropping this one field.
#[derive(Debug, Default, Serialize)]
pub struct Timings(pub Vec<Phase>);

#[derive(Debug, Serialize)]
pub struct Phase {
    pub phase: String,
    pub seconds: f64,
}

impl Timings {
    pub fn record<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = std::time::Instant::now();
        let out = f();
        self.0.push(Phase { phase: phase.to_string(), seconds: start.elapsed().as_secs_f64() });
        out
    }
}

#[derive(Debug, Serialize)]
pub struct EstimateEntry {
    pub observable_id: String,
    pub method: &'static str,
    #[serde(flatten)]
    pub estimate: Estimate,
    pub seed: u64,
    pub params: serde_json::Value,
}

impl EstimateEntry {
    pub fn chain(id: String, estimate: Estimate, params: &McmcParams) -> Self {
        Self { observable_id: id, method: "chain", estimate, seed: params.seed, params: serde_json::to_value(params).expect("params serialize") }
    }

    pub fn importance(id: String, estimate: Estimate, n_samples: usize, seed: u64) -> Self {
        Self { observable_id: id, method: "importance", estimate, seed, params: serde_json::json!({ "n_samples": n_samples }) }
    }
}

#[derive(Debug, Serialize)]
pub struct ExactValue {
    pub observable_id: String,
    pub value: f64,
}

#[derive(Debug, Serialize)]
pub struct DecayBoundEntry {
    pub observable_id: String,
    pub distance: Option<u64>,
    pub bound: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct BoundsOutput {
    #[serde(flatten)]
    pub report: BoundsReport,
    pub decay_bounds: Vec<DecayBoundEntry>,
    pub timings: Timings,
}

#[derive(Debug, Serialize)]
pub struct ExactOutput {
    pub spec_hash: String,
    pub n_sites: usize,
    pub beta: f64,
    pub eigen_residual: f64,
    pub means: Vec<ExactValue>,
    pub correlations: Vec<ExactValue>,
    pub timings: Timings,
}

#[derive(Debug, Serialize)]
pub struct MoveSummary {
    pub kind: &'static str,
    pub proposed: u64,
    pub accepted: u64,
}

#[derive(Debug, Serialize)]
pub struct ExperimentReport {
    pub command: &'static str,
    pub spec_hash: String,
    pub seed: u64,
    pub params: McmcParams,
    pub estimates: Vec<EstimateEntry>,
    pub exact: Option<Vec<ExactValue>>,
    pub bounds: BoundsReport,
    pub checks: Vec<CheckOutcome>,
    pub moves: Vec<MoveSummary>,
    pub timings: Timings,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub spec_hash: String,
    pub seed: u64,
    pub trials: usize,
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
    pub timings: Timings,
}
