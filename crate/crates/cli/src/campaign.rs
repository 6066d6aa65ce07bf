//! Campaign orchestration: run generated scenario sets, apply each checking
//! method, and aggregate rates. Scenarios run in parallel; per-method rows
//! are timed end to end (simulation included) so runtimes are comparable.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use hotcheck_core::monitor::{
    check_safety, classify_false_positive, is_hot, time_bound_check, StateHash,
};
use hotcheck_core::replica::ReplicaEvent;
use hotcheck_core::scenario::generate;
use hotcheck_core::sim::TraceEntry;
use hotcheck_core::{
    BlockDigest, Execution, ExecutionResult, GeneratorConfig, ProcessId, ProtocolConfig, Scenario,
    SimTime, StateTransitionGraph, TemperatureState,
};

pub const DEFAULT_TT: u32 = 5;

/// Method-independent digest of one execution.
#[derive(Clone, PartialEq, Debug)]
pub struct ExecAnalysis {
    /// Snapshot hashes: the initial state followed by one per round.
    pub hashes: Vec<StateHash>,
    /// Hot bit per round boundary.
    pub hot_bits: Vec<bool>,
    pub safety: Option<(u8, u8)>,
    /// Whether the correct replicas' final locks conflict (a flagged
    /// execution without a lock conflict is a false positive).
    pub lock_conflict: bool,
    pub exec_times: Vec<SimTime>,
    pub duration: SimTime,
    pub window: SimTime,
    pub trace_len: usize,
}

pub fn analyze(result: &ExecutionResult, credit_faulty: bool) -> Result<ExecAnalysis> {
    let cfg = result.scenario.config;
    let mut hashes = vec![result.initial.hash()];
    let mut hot_bits = Vec::with_capacity(result.boundaries.len());
    let mut prev = &result.initial;
    for b in &result.boundaries {
        hot_bits.push(is_hot(&b.snapshot, prev, &result.store, &cfg, credit_faulty)?);
        hashes.push(b.snapshot.hash());
        prev = &b.snapshot;
    }
    Ok(ExecAnalysis {
        hashes,
        hot_bits,
        safety: check_safety(&result.final_state, &result.store)?,
        lock_conflict: !classify_false_positive(&result.final_state, &result.store)?,
        exec_times: result.exec_times.clone(),
        duration: result.duration,
        window: hotcheck_core::sim::view_window(cfg.kind),
        trace_len: result.trace.len(),
    })
}

/// Folds hot bits through the temperature counter; returns the 1-based round
/// of the first violation.
pub fn temperature_fire_round(hot_bits: &[bool], tt: u32) -> Option<u32> {
    let mut t = TemperatureState::new(tt);
    for (i, hot) in hot_bits.iter().enumerate() {
        if t.observe(*hot) {
            return Some(i as u32 + 1);
        }
    }
    None
}

/// Trace-local lasso: the round at which the execution first revisits a
/// state hash over an all-hot span, closing a hot cycle.
pub fn lasso_close_round(hashes: &[StateHash], hot_bits: &[bool]) -> Option<u32> {
    for j in 1..hashes.len() {
        for i in 0..j {
            if hashes[i] == hashes[j] && (i..j).all(|k| hot_bits[k]) {
                return Some(j as u32);
            }
        }
    }
    None
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Method {
    Temperature(u32),
    Lasso,
    TimeBound(SimTime),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Temperature(_) => "temperature",
            Method::Lasso => "lasso",
            Method::TimeBound(_) => "time-bound",
        }
    }

    pub fn threshold(&self) -> u64 {
        match self {
            Method::Temperature(tt) => *tt as u64,
            Method::Lasso => 0,
            Method::TimeBound(bound) => *bound,
        }
    }

    /// Flag decision plus the 1-based round the method fired in.
    pub fn evaluate(&self, a: &ExecAnalysis) -> Option<u32> {
        match self {
            Method::Temperature(tt) => temperature_fire_round(&a.hot_bits, *tt),
            Method::Lasso => lasso_close_round(&a.hashes, &a.hot_bits),
            Method::TimeBound(bound) => time_bound_check(&a.exec_times, a.duration, *bound)
                .map(|t| ((t / a.window) as u32 + 1).min(a.hot_bits.len() as u32)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReportRow {
    pub method: String,
    pub threshold: u64,
    pub runtime_ms: u64,
    pub trace_len: u64,
    pub pct_safety: f64,
    pub pct_liveness: f64,
    pub pct_false_pos: f64,
}

#[derive(Clone, Debug)]
pub struct FlaggedExec {
    pub scenario: Scenario,
    pub method: &'static str,
    pub threshold: u64,
    pub round: u32,
    pub safety: bool,
    pub false_positive: bool,
}

#[derive(Clone, Debug)]
pub struct CampaignConfig {
    pub generator: GeneratorConfig,
    pub tt_values: Vec<u32>,
    pub credit_faulty: bool,
    /// Time bounds to check; calibrated from a failure-free run when absent.
    pub time_bounds: Option<[SimTime; 3]>,
}

pub struct CampaignReport {
    pub rows: Vec<ReportRow>,
    pub flagged: Vec<FlaggedExec>,
    pub graph: StateTransitionGraph,
    pub bounds: [SimTime; 3],
    pub safety_count: usize,
    pub total: u32,
}

pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignReport> {
    if cfg.generator.count == 0 {
        bail!("campaign needs at least one scenario");
    }
    let scenarios = generate(&cfg.generator);
    let bounds = match cfg.time_bounds {
        Some(b) => b,
        None => calibrate(cfg.generator.protocol, 10)?,
    };

    let mut methods: Vec<Method> = cfg.tt_values.iter().map(|tt| Method::Temperature(*tt)).collect();
    methods.push(Method::Lasso);
    methods.extend(bounds.iter().map(|b| Method::TimeBound(*b)));

    let mut rows = Vec::new();
    let mut flagged = Vec::new();
    let mut graph = StateTransitionGraph::new();
    let mut safety_count = 0usize;

    for method in methods {
        let shared_graph = match method {
            Method::Lasso => Some(Mutex::new(StateTransitionGraph::new())),
            _ => None,
        };
        let started = Instant::now();
        let outcomes: Vec<(ExecAnalysis, Option<u32>)> = scenarios
            .par_iter()
            .map(|s| -> Result<(ExecAnalysis, Option<u32>)> {
                let result = Execution::new(s.clone())?.run_to_completion()?;
                let analysis = analyze(&result, cfg.credit_faulty)?;
                if let Some(m) = &shared_graph {
                    let mut g = m.lock().unwrap();
                    let mut prev = &result.initial;
                    for b in &result.boundaries {
                        g.update(prev, &b.snapshot, &result.store, &s.config, cfg.credit_faulty)?;
                        prev = &b.snapshot;
                    }
                }
                let fired = method.evaluate(&analysis);
                Ok((analysis, fired))
            })
            .collect::<Result<Vec<_>>>()?;
        let runtime_ms = started.elapsed().as_millis() as u64;

        let total = outcomes.len();
        safety_count = outcomes.iter().filter(|(a, _)| a.safety.is_some()).count();
        let trace_sum: usize = outcomes.iter().map(|(a, _)| a.trace_len).sum();
        let hits: Vec<(usize, &ExecAnalysis, u32)> = outcomes
            .iter()
            .enumerate()
            .filter_map(|(i, (a, fired))| fired.map(|r| (i, a, r)))
            .collect();
        let fp = hits.iter().filter(|(_, a, _)| !a.lock_conflict).count();

        rows.push(ReportRow {
            method: method.name().to_string(),
            threshold: method.threshold(),
            runtime_ms,
            trace_len: (trace_sum / total) as u64,
            pct_safety: 100.0 * safety_count as f64 / total as f64,
            pct_liveness: 100.0 * hits.len() as f64 / total as f64,
            pct_false_pos: if hits.is_empty() {
                0.0
            } else {
                100.0 * fp as f64 / hits.len() as f64
            },
        });
        for (i, a, round) in hits {
            flagged.push(FlaggedExec {
                scenario: scenarios[i].clone(),
                method: method.name(),
                threshold: method.threshold(),
                round,
                safety: a.safety.is_some(),
                false_positive: !a.lock_conflict,
            });
        }
        if let Some(m) = shared_graph {
            graph = m.into_inner().unwrap();
        }
    }

    Ok(CampaignReport {
        rows,
        flagged,
        graph,
        bounds,
        safety_count,
        total: cfg.generator.count,
    })
}

/// A twin-free, partition-free, delay-free schedule used as the calibration
/// baseline and as a sanity run.
pub fn failure_free(protocol: ProtocolConfig, rounds: u32) -> Scenario {
    let all: BTreeSet<ProcessId> = (1..=protocol.n).map(ProcessId::single).collect();
    Scenario {
        config: protocol,
        rounds,
        leaders: (0..rounds).map(|r| 1 + (r % protocol.n as u32) as u8).collect(),
        partitions: (0..rounds).map(|_| vec![all.clone()]).collect(),
        twin: None,
        delays: vec![],
        seed: 0,
    }
}

/// Derives the three time bounds from one failure-free run: the mean gap
/// between block completions, the mean plus one standard deviation, and the
/// mean plus two.
pub fn calibrate(protocol: ProtocolConfig, rounds: u32) -> Result<[SimTime; 3]> {
    let result = Execution::new(failure_free(protocol, rounds))?.run_to_completion()?;
    let mut first: BTreeMap<BlockDigest, SimTime> = BTreeMap::new();
    for e in &result.trace {
        if let TraceEntry::Replica { time, event: ReplicaEvent::Executed(d), .. } = e {
            first.entry(*d).or_insert(*time);
        }
    }
    let mut times: Vec<SimTime> = first.into_values().collect();
    times.sort_unstable();
    if times.is_empty() {
        bail!("calibration run made no progress");
    }
    let mut gaps: Vec<f64> = vec![times[0] as f64];
    gaps.extend(times.windows(2).map(|w| (w[1] - w[0]) as f64));
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / gaps.len() as f64;
    let std = var.sqrt();
    Ok([
        mean.round() as SimTime,
        (mean + std).round() as SimTime,
        (mean + 2.0 * std).round() as SimTime,
    ])
}

/// Everything the replay command reports for a single scenario.
pub struct ReplayReport {
    pub result: ExecutionResult,
    pub analysis: ExecAnalysis,
    pub temperature_round: Option<u32>,
    pub lasso_round: Option<u32>,
    pub graph: StateTransitionGraph,
    pub graph_lasso_count: usize,
    pub bounds: [SimTime; 3],
    pub bound_hits: [Option<SimTime>; 3],
}

impl ReplayReport {
    pub fn any_violation(&self) -> bool {
        self.analysis.safety.is_some()
            || self.temperature_round.is_some()
            || self.lasso_round.is_some()
            || self.bound_hits.iter().any(|h| h.is_some())
    }
}

pub fn replay(scenario: Scenario, tt: u32, credit_faulty: bool) -> Result<ReplayReport> {
    let config = scenario.config;
    let result = Execution::new(scenario)?.run_to_completion()?;
    let analysis = analyze(&result, credit_faulty)?;

    let mut graph = StateTransitionGraph::new();
    let mut prev = &result.initial;
    for b in &result.boundaries {
        graph.update(prev, &b.snapshot, &result.store, &config, credit_faulty)?;
        prev = &b.snapshot;
    }
    let graph_lasso_count = graph.find_hot_lassos().len();

    let bounds = calibrate(config, 10).context("calibrating time bounds")?;
    let bound_hits = [
        time_bound_check(&analysis.exec_times, analysis.duration, bounds[0]),
        time_bound_check(&analysis.exec_times, analysis.duration, bounds[1]),
        time_bound_check(&analysis.exec_times, analysis.duration, bounds[2]),
    ];

    Ok(ReplayReport {
        temperature_round: temperature_fire_round(&analysis.hot_bits, tt),
        lasso_round: lasso_close_round(&analysis.hashes, &analysis.hot_bits),
        result,
        analysis,
        graph,
        graph_lasso_count,
        bounds,
        bound_hits,
    })
}
