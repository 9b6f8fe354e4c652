//! Deterministic discrete-event simulation of a constant-QPS client against
//! a single FIFO run-to-completion server, for studying the flat / rising /
//! timeout latency stages and the max-QPS ~ 1/TTFT scaling law.

use serde::{Deserialize, Serialize};

use crate::analytic::flops_profile;
use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Model reference inside a cost-model file: a preset name or a full config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Config(ModelConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelSpec::Preset(name) => ModelConfig::preset(name),
            ModelSpec::Config(cfg) => {
                cfg.validate()?;
                Ok(cfg.clone())
            }
        }
    }
}

/// Where prefill time comes from: analytic FLOPS over a hardware throughput,
/// or a fixed constant (handy for controlled experiments).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillCost {
    Analytic {
        model: ModelSpec,
        /// Aggregate hardware throughput in FLOP/s.
        throughput_flops: f64,
    },
    Fixed { seconds: f64 },
}

/// Serving cost of one (homogeneous) query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub prefill: PrefillCost,
    pub prompt_len: usize,
    /// Multiplier on TTFT, for what-if scaling experiments.
    #[serde(default = "one")]
    pub ttft_scale: f64,
    pub per_decode_token_seconds: f64,
    pub decode_tokens_per_query: usize,
    /// Extra grace added to the client timeout during simulation.
    #[serde(default)]
    pub timeout_slack_seconds: f64,
}

fn one() -> f64 {
    1.0
}

/// Total GPU TFLOPS of the reference serving node.
pub const DEFAULT_THROUGHPUT_FLOPS: f64 = 428.2e12;

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            prefill: PrefillCost::Analytic {
                model: ModelSpec::Preset("llama8b".into()),
                throughput_flops: DEFAULT_THROUGHPUT_FLOPS,
            },
            prompt_len: 2048,
            ttft_scale: 1.0,
            per_decode_token_seconds: 2e-3,
            decode_tokens_per_query: 128,
            timeout_slack_seconds: 0.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::Config("prompt_len must be >= 1".into()));
        }
        if !(self.ttft_scale.is_finite() && self.ttft_scale > 0.0) {
            return Err(Error::Config("ttft_scale must be positive".into()));
        }
        if !(self.per_decode_token_seconds.is_finite() && self.per_decode_token_seconds >= 0.0) {
            return Err(Error::Config(
                "per_decode_token_seconds must be non-negative".into(),
            ));
        }
        if !(self.timeout_slack_seconds.is_finite() && self.timeout_slack_seconds >= 0.0) {
            return Err(Error::Config("timeout_slack_seconds must be non-negative".into()));
        }
        let ttft = self.ttft_seconds(self.prompt_len)?;
        if !(ttft.is_finite() && ttft > 0.0) {
            return Err(Error::Config(format!("ttft {ttft} must be positive")));
        }
        Ok(())
    }

    /// Prefill wall time for a prompt of `prompt_len` tokens. Monotone
    /// nondecreasing in the prompt length.
    pub fn ttft_seconds(&self, prompt_len: usize) -> Result<f64> {
        let raw = match &self.prefill {
            PrefillCost::Analytic {
                model,
                throughput_flops,
            } => {
                if !(throughput_flops.is_finite() && *throughput_flops > 0.0) {
                    return Err(Error::Config("throughput_flops must be positive".into()));
                }
                let cfg = model.resolve()?;
                flops_profile(&cfg, 1, prompt_len as u64)?.total_f64() / throughput_flops
            }
            PrefillCost::Fixed { seconds } => {
                if !(seconds.is_finite() && *seconds > 0.0) {
                    return Err(Error::Config("fixed ttft must be positive".into()));
                }
                *seconds
            }
        };
        Ok(raw * self.ttft_scale)
    }

    pub fn decode_seconds(&self) -> f64 {
        self.per_decode_token_seconds * self.decode_tokens_per_query as f64
    }

    /// Full service time of one query: prefill plus all decode steps.
    pub fn service_time(&self) -> Result<f64> {
        Ok(self.ttft_seconds(self.prompt_len)? + self.decode_seconds())
    }

    pub fn with_ttft_scale(mut self, scale: f64) -> Self {
        self.ttft_scale = scale;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryRecord {
    pub arrival: f64,
    pub service_start: f64,
    pub finish: f64,
    pub completed: bool,
}

/// Trace of one simulation run plus summary statistics. Timed-out queries
/// are excluded from the mean latency; the completion fraction reports them.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub queries: Vec<QueryRecord>,
    pub mean_latency: Option<f64>,
    pub completion_fraction: f64,
    pub seed: u64,
}

/// Simulate `num_queries` arrivals at exact 1/qps spacing against a single
/// FIFO server. A query whose completion would exceed `arrival + timeout`
/// (plus the cost model's slack) is marked timed out at that instant and its
/// remaining work is discarded. Deterministic given its inputs; `seed` is
/// recorded in the trace.
pub fn simulate(
    qps: f64,
    num_queries: usize,
    cost: &CostModel,
    timeout: f64,
    seed: u64,
) -> Result<SimTrace> {
    if !(qps.is_finite() && qps > 0.0) {
        return Err(Error::InvalidArgument(format!("qps {qps} must be positive")));
    }
    if num_queries == 0 {
        return Err(Error::InvalidArgument("num_queries must be >= 1".into()));
    }
    if !(timeout.is_finite() && timeout > 0.0) {
        return Err(Error::InvalidArgument(format!("timeout {timeout} must be positive")));
    }
    cost.validate()?;
    let service = cost.service_time()?;
    let slack = cost.timeout_slack_seconds;
    let interval = 1.0 / qps;

    let mut queries = Vec::with_capacity(num_queries);
    let mut server_free = 0.0f64;
    let mut completed = 0usize;
    let mut latency_sum = 0.0f64;
    for i in 0..num_queries {
        let arrival = i as f64 * interval;
        let deadline = arrival + timeout + slack;
        let start = server_free.max(arrival);
        if start + service <= deadline {
            let finish = start + service;
            server_free = finish;
            completed += 1;
            latency_sum += finish - arrival;
            queries.push(QueryRecord {
                arrival,
                service_start: start,
                finish,
                completed: true,
            });
        } else {
            // Aborted at the timeout instant; partial work is discarded but
            // the server was still occupied until then.
            if start < deadline {
                server_free = deadline;
            }
            queries.push(QueryRecord {
                arrival,
                service_start: start.min(deadline),
                finish: deadline,
                completed: false,
            });
        }
    }
    Ok(SimTrace {
        queries,
        mean_latency: (completed > 0).then(|| latency_sum / completed as f64),
        completion_fraction: completed as f64 / num_queries as f64,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Flat,
    Rising,
    Timeout,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Flat => "flat",
            Stage::Rising => "rising",
            Stage::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub qps: f64,
    pub mean_latency: Option<f64>,
    pub completion_fraction: f64,
    pub stage: Stage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageBoundaries {
    /// Largest grid qps still within epsilon of the flat latency floor.
    pub last_flat_qps: f64,
    /// Smallest grid qps whose completion fraction dropped below one.
    pub first_timeout_qps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpsSweep {
    pub points: Vec<SweepPoint>,
    pub boundaries: Option<StageBoundaries>,
    /// The no-queueing latency floor (one query's service time).
    pub flat_floor: f64,
}

const FLAT_EPSILON_REL: f64 = 1e-9;

/// Mean latency and stage per grid point. Boundaries are claimed only when
/// the grid has at least two points and exhibits both a flat and a timeout
/// point.
pub fn sweep_qps(
    qps_grid: &[f64],
    cost: &CostModel,
    timeout: f64,
    num_queries: usize,
) -> Result<QpsSweep> {
    if qps_grid.is_empty() {
        return Err(Error::InvalidArgument("qps grid must be non-empty".into()));
    }
    if qps_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("qps grid must be strictly ascending".into()));
    }
    let floor = cost.service_time()?;
    let mut points = Vec::with_capacity(qps_grid.len());
    for &qps in qps_grid {
        let trace = simulate(qps, num_queries, cost, timeout, 0)?;
        let stage = if trace.completion_fraction < 1.0 {
            Stage::Timeout
        } else {
            match trace.mean_latency {
                Some(m) if m <= floor * (1.0 + FLAT_EPSILON_REL) => Stage::Flat,
                _ => Stage::Rising,
            }
        };
        points.push(SweepPoint {
            qps,
            mean_latency: trace.mean_latency,
            completion_fraction: trace.completion_fraction,
            stage,
        });
    }
    let boundaries = if points.len() >= 2 {
        let last_flat = points.iter().rev().find(|p| p.stage == Stage::Flat);
        let first_timeout = points.iter().find(|p| p.stage == Stage::Timeout);
        match (last_flat, first_timeout) {
            (Some(f), Some(t)) => Some(StageBoundaries {
                last_flat_qps: f.qps,
                first_timeout_qps: t.qps,
            }),
            _ => None,
        }
    } else {
        None
    };
    Ok(QpsSweep {
        points,
        boundaries,
        flat_floor: floor,
    })
}

/// Largest qps whose completion fraction is 1 over a fixed horizon of
/// `num_queries`, found by bisection to the given relative tolerance.
/// Degenerate cost (service time beyond the timeout) reports zero capacity;
/// a horizon too short to ever exhaust the timeout reports infinity.
pub fn max_qps(cost: &CostModel, timeout: f64, tolerance: f64, num_queries: usize) -> Result<f64> {
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    cost.validate()?;
    let service = cost.service_time()?;
    if service > timeout + cost.timeout_slack_seconds {
        return Ok(0.0);
    }
    let all_complete = |qps: f64| -> Result<bool> {
        Ok(simulate(qps, num_queries, cost, timeout, 0)?.completion_fraction == 1.0)
    };

    let mut lo = 1.0 / service;
    if !all_complete(lo)? {
        // Saturation sits below one query per service time; search downward.
        let mut probe = lo / 2.0;
        let mut iters = 0;
        while !all_complete(probe)? {
            probe /= 2.0;
            iters += 1;
            if iters > 200 {
                return Ok(0.0);
            }
        }
        lo = probe;
    }
    let mut hi = lo * 2.0;
    let mut iters = 0;
    while all_complete(hi)? {
        lo = hi;
        hi *= 2.0;
        iters += 1;
        if iters > 100 {
            return Ok(f64::INFINITY);
        }
    }
    while hi - lo > tolerance * lo {
        let mid = 0.5 * (lo + hi);
        if all_complete(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed_cost(ttft: f64, per_tok: f64, tokens: usize) -> CostModel {
        CostModel {
            prefill: PrefillCost::Fixed { seconds: ttft },
            prompt_len: 1,
            ttft_scale: 1.0,
            per_decode_token_seconds: per_tok,
            decode_tokens_per_query: tokens,
            timeout_slack_seconds: 0.0,
        }
    }

    #[test]
    fn unloaded_server_gives_exact_service_latency() {
        let cost = fixed_cost(0.2, 0.01, 30); // service 0.5
        let trace = simulate(1.0, 50, &cost, 5.0, 7).unwrap();
        assert_eq!(trace.completion_fraction, 1.0);
        for q in &trace.queries {
            assert_eq!(q.service_start, q.arrival);
            assert!((q.finish - q.arrival - 0.5).abs() < 1e-12);
        }
        assert!((trace.mean_latency.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn overload_drops_completions_and_grows_the_queue() {
        let cost = fixed_cost(0.5, 0.0, 0);
        // Well above 1/TTFT: the backlog grows without bound and later
        // queries all hit the timeout.
        let trace = simulate(10.0, 200, &cost, 2.0, 0).unwrap();
        assert!(trace.completion_fraction < 1.0);
        let waits: Vec<f64> = trace
            .queries
            .iter()
            .map(|q| q.service_start - q.arrival)
            .collect();
        assert!(waits.last().unwrap() > waits.first().unwrap());
        assert!(!trace.queries.last().unwrap().completed);
    }

    #[test]
    fn same_inputs_same_trace() {
        let cost = fixed_cost(0.1, 0.002, 64);
        let a = simulate(3.0, 100, &cost, 1.0, 42).unwrap();
        let b = simulate(3.0, 100, &cost, 1.0, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conservation_of_queries() {
        let cost = fixed_cost(0.3, 0.0, 0);
        for qps in [0.5, 2.0, 3.0, 4.0, 9.0] {
            let trace = simulate(qps, 77, &cost, 1.0, 0).unwrap();
            let completed = trace.queries.iter().filter(|q| q.completed).count();
            let timed_out = trace.queries.iter().filter(|q| !q.completed).count();
            assert_eq!(completed + timed_out, 77);
            for q in &trace.queries {
                assert!(q.service_start >= q.arrival);
                assert!(q.finish >= q.service_start);
            }
        }
    }

    #[test]
    fn latency_monotone_while_everything_completes() {
        let cost = fixed_cost(0.05, 0.01, 95); // service 1.0
        let grid: Vec<f64> = (1..=30).map(|i| 0.8 + i as f64 * 0.01).collect();
        let sweep = sweep_qps(&grid, &cost, 3.0, 60).unwrap();
        let mut prev = 0.0;
        for p in sweep.points.iter().filter(|p| p.completion_fraction == 1.0) {
            let m = p.mean_latency.unwrap();
            assert!(m >= prev - 1e-12, "qps {} latency {m} < {prev}", p.qps);
            prev = m;
        }
    }

    #[test]
    fn default_cost_model_shows_three_stages() {
        let cost = CostModel::default();
        let service = cost.service_time().unwrap();
        let timeout = 2.5 * service;
        let grid: Vec<f64> = [0.3, 0.7, 0.95, 1.001, 1.003, 1.006, 1.01, 1.05, 1.2, 1.5]
            .iter()
            .map(|rho| rho / service)
            .collect();
        let sweep = sweep_qps(&grid, &cost, timeout, 120).unwrap();
        let stages: Vec<Stage> = sweep.points.iter().map(|p| p.stage).collect();
        assert!(stages.contains(&Stage::Flat));
        assert!(stages.contains(&Stage::Rising));
        assert!(stages.contains(&Stage::Timeout));
        let b = sweep.boundaries.unwrap();
        assert!(b.last_flat_qps < b.first_timeout_qps);
    }

    #[test]
    fn single_point_grid_claims_no_boundaries() {
        let cost = fixed_cost(0.5, 0.0, 0);
        let sweep = sweep_qps(&[1.0], &cost, 2.0, 20).unwrap();
        assert_eq!(sweep.points.len(), 1);
        assert!(sweep.boundaries.is_none());
    }

    #[test]
    fn halved_ttft_moves_timeout_onset_nearly_twice_as_far() {
        let base = fixed_cost(1.0, 0.0, 0);
        let fast = base.clone().with_ttft_scale(0.5);
        let grid: Vec<f64> = (0..120).map(|i| 0.9 * 1.012f64.powi(i)).collect();
        let onset = |cost: &CostModel| -> f64 {
            sweep_qps(&grid, cost, 1.5, 100)
                .unwrap()
                .points
                .iter()
                .find(|p| p.stage == Stage::Timeout)
                .map(|p| p.qps)
                .expect("grid reaches the timeout stage")
        };
        let ratio = onset(&fast) / onset(&base);
        assert!(ratio >= 1.9, "onset ratio {ratio}");
    }

    #[test]
    fn zero_decode_cost_collapses_the_rising_stage() {
        // Timeouts follow the paper's per-task budgets: prefill plus three
        // times the decode budget. With decode cost present the budget leaves
        // queueing slack and all three stages appear; at zero decode cost the
        // slack vanishes and the sweep jumps from flat straight to timeout.
        let rhos = [0.5, 0.8, 0.95, 1.01, 1.02, 1.03, 1.2, 1.5];
        let run = |cost: &CostModel| {
            let service = cost.service_time().unwrap();
            let timeout = cost.ttft_seconds(cost.prompt_len).unwrap() + 3.0 * cost.decode_seconds();
            let grid: Vec<f64> = rhos.iter().map(|rho| rho / service).collect();
            sweep_qps(&grid, cost, timeout, 40).unwrap()
        };

        let with_decode = run(&fixed_cost(0.1, 0.01, 100));
        let stages: Vec<Stage> = with_decode.points.iter().map(|p| p.stage).collect();
        assert!(stages.contains(&Stage::Flat));
        assert!(stages.contains(&Stage::Rising));
        assert!(stages.contains(&Stage::Timeout));

        let no_decode = run(&fixed_cost(0.1, 0.0, 100));
        let stages: Vec<Stage> = no_decode.points.iter().map(|p| p.stage).collect();
        assert!(stages.contains(&Stage::Flat));
        assert!(stages.contains(&Stage::Timeout));
        assert!(!stages.contains(&Stage::Rising), "stages {stages:?}");
        // Flat points butt directly against timeout points.
        let last_flat = stages.iter().rposition(|s| *s == Stage::Flat).unwrap();
        assert_eq!(stages[last_flat + 1], Stage::Timeout);
    }

    #[test]
    fn timeout_below_service_time_means_zero_capacity() {
        let cost = fixed_cost(1.0, 0.01, 100); // service 2.0
        assert_eq!(max_qps(&cost, 1.5, 1e-3, 100).unwrap(), 0.0);
    }

    #[test]
    fn doubling_timeout_never_decreases_max_qps() {
        let cost = fixed_cost(0.5, 0.001, 100);
        let a = max_qps(&cost, 1.0, 1e-3, 200).unwrap();
        let b = max_qps(&cost, 2.0, 1e-3, 200).unwrap();
        assert!(b >= a, "{b} < {a}");
    }

    #[test]
    fn max_qps_scales_with_inverse_ttft() {
        let base = fixed_cost(1.0, 0.0, 0);
        let q1 = max_qps(&base, 1.5, 1e-3, 400).unwrap();
        for k in [2.0, 4.0, 8.0] {
            let scaled = base.clone().with_ttft_scale(1.0 / k);
            let qk = max_qps(&scaled, 1.5, 1e-3, 400).unwrap();
            let ratio = qk / q1;
            assert!(
                (ratio / k - 1.0).abs() <= 0.05,
                "k={k}: ratio {ratio} not within 5% of {k}"
            );
        }
    }

    #[test]
    fn max_qps_ratio_tracks_the_analytic_speedup() {
        // Serving capacity scaled by TTFT x (r + alpha) should match the
        // analytic speedup bound 1/(r + alpha) within 10% when decode cost
        // is negligible.
        let (ratio, alpha) = (0.0296, 0.1);
        let base = fixed_cost(1.0, 0.0, 0);
        let accelerated = base.clone().with_ttft_scale(ratio + alpha);
        let q_base = max_qps(&base, 1.5, 1e-3, 400).unwrap();
        let q_fast = max_qps(&accelerated, 1.5, 1e-3, 400).unwrap();
        let measured = q_fast / q_base;
        let predicted = crate::analytic::speedup_upper_bound(ratio, alpha).unwrap();
        assert!(
            (measured / predicted - 1.0).abs() <= 0.10,
            "measured {measured} vs predicted {predicted}"
        );
    }

    #[test]
    fn default_cost_model_round_trips_through_json() {
        let cost = CostModel::default();
        let text = serde_json::to_string_pretty(&cost).unwrap();
        let back: CostModel = serde_json::from_str(&text).unwrap();
        assert_eq!(cost, back);
        assert!(cost.service_time().unwrap() > 0.0);
    }
}
