//! Candidate decisions for the func being scheduled, and the pruning rules
//! that discard implausible states before they are costed.

use std::fmt;

use crate::featurize::lane_stats;
use crate::loopnest::{Decision, Location, LoopNestState, ScheduleError};
use crate::machine::{validate_limits, MachineParams};
use crate::pipeline::{FuncId, PipelineGraph};

/// Extent choices offered at each tiling level.
#[derive(Debug, Clone, PartialEq)]
pub struct TilingOptions {
    pub serial: Vec<u64>,
    /// Odd serial extents, offered only when they leave a warp-multiple
    /// thread extent.
    pub serial_odd: Vec<u64>,
    pub thread_innermost: Vec<u64>,
    pub thread_other: Vec<u64>,
    /// Serial vectors with a larger product are not emitted.
    pub unroll_budget: u64,
    /// Clamp options to the dimension extent (then deduplicate).
    pub cap_at_extent: bool,
}

impl Default for TilingOptions {
    fn default() -> Self {
        TilingOptions {
            serial: vec![1, 2, 4, 8],
            serial_odd: vec![3, 5, 7],
            thread_innermost: vec![16, 32, 64],
            thread_other: vec![1, 2, 4, 8, 16],
            unroll_budget: 64,
            cap_at_extent: true,
        }
    }
}

impl TilingOptions {
    /// The same `choices` at every level and dim, uncapped, with no odd
    /// extras and no unroll budget.
    pub fn uniform(choices: &[u64]) -> Self {
        TilingOptions {
            serial: choices.to_vec(),
            serial_odd: Vec::new(),
            thread_innermost: choices.to_vec(),
            thread_other: choices.to_vec(),
            unroll_budget: u64::MAX,
            cap_at_extent: false,
        }
    }
}

/// Candidate tilings for one func.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilingOptionSet {
    pub serial_options: Vec<Vec<u64>>,
    pub thread_options: Vec<Vec<u64>>,
}

/// Configurable pruning thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneThresholds {
    /// Loop points may exceed the func's domain size by at most this factor.
    pub max_recompute: f64,
    /// Root kernels need at least this many blocks per SM.
    pub min_blocks_per_sm: f64,
    pub min_warp_utilization: f64,
    pub unroll_budget: u64,
    pub max_thread_alloc_bytes: u64,
    /// Inlining is offered only to funcs with at most this many ops per point.
    pub inline_op_budget: u32,
}

impl Default for PruneThresholds {
    fn default() -> Self {
        PruneThresholds {
            max_recompute: 8.0,
            min_blocks_per_sm: 2.0,
            min_warp_utilization: 0.25,
            unroll_budget: 64,
            max_thread_alloc_bytes: 256,
            inline_op_budget: 8,
        }
    }
}

impl PruneThresholds {
    /// Parses `key=value` lines; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut t = PruneThresholds::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || format!("line {}: bad value `{v}` for `{k}`", i + 1);
            match k {
                "max_recompute" => t.max_recompute = v.parse().map_err(|_| bad())?,
                "min_blocks_per_sm" => t.min_blocks_per_sm = v.parse().map_err(|_| bad())?,
                "min_warp_utilization" => t.min_warp_utilization = v.parse().map_err(|_| bad())?,
                "unroll_budget" => t.unroll_budget = v.parse().map_err(|_| bad())?,
                "max_thread_alloc_bytes" => t.max_thread_alloc_bytes = v.parse().map_err(|_| bad())?,
                "inline_op_budget" => t.inline_op_budget = v.parse().map_err(|_| bad())?,
                _ => return Err(format!("line {}: unknown threshold `{k}`", i + 1)),
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PruneReason {
    ExcessiveRecompute,
    IdleSms,
    PoorWarpUtilization,
    SerialTooLarge,
    ThreadAllocDynamicOrLarge,
    HardwareLimit,
}

impl PruneReason {
    pub fn name(self) -> &'static str {
        match self {
            PruneReason::ExcessiveRecompute => "excessive_recompute",
            PruneReason::IdleSms => "idle_sms",
            PruneReason::PoorWarpUtilization => "poor_warp_utilization",
            PruneReason::SerialTooLarge => "serial_too_large",
            PruneReason::ThreadAllocDynamicOrLarge => "thread_alloc_dynamic_or_large",
            PruneReason::HardwareLimit => "hardware_limit",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub reason: PruneReason,
    pub detail: String,
}

impl fmt::Display for PruneReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.reason.name(), self.detail)
    }
}

/// Thread dimension that gets the warp-sized extents: the first with
/// extent at least 16, else dim 0.
pub fn innermost_dim(extents: &[u64]) -> usize {
    extents.iter().position(|&e| e >= 16).unwrap_or(0)
}

fn cross(per_dim: &[Vec<u64>]) -> Vec<Vec<u64>> {
    let mut out: Vec<Vec<u64>> = vec![Vec::new()];
    for opts in per_dim {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                opts.iter().map(move |&o| {
                    let mut v = prefix.clone();
                    v.push(o);
                    v
                })
            })
            .collect();
    }
    out
}

fn dim_options(base: &[u64], extent: u64, cap: bool) -> Vec<u64> {
    let mut v: Vec<u64> = base.iter().map(|&o| if cap { o.min(extent) } else { o }).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Serial tile vectors for a func with the given extents.
pub fn enumerate_serial_tilings(extents: &[u64], warp_size: u64, opts: &TilingOptions) -> Vec<Vec<u64>> {
    let per_dim: Vec<Vec<u64>> = extents
        .iter()
        .map(|&e| {
            let mut base = opts.serial.clone();
            base.extend(opts.serial_odd.iter().copied().filter(|&o| e % o == 0 && (e / o) % warp_size == 0));
            dim_options(&base, e, opts.cap_at_extent)
        })
        .collect();
    cross(&per_dim).into_iter().filter(|v| v.iter().product::<u64>() <= opts.unroll_budget).collect()
}

/// Thread tile vectors over post-serial extents.
pub fn enumerate_thread_tilings(extents: &[u64], opts: &TilingOptions) -> Vec<Vec<u64>> {
    let inner = innermost_dim(extents);
    let per_dim: Vec<Vec<u64>> = extents
        .iter()
        .enumerate()
        .map(|(d, &e)| {
            let base = if d == inner { &opts.thread_innermost } else { &opts.thread_other };
            dim_options(base, e, opts.cap_at_extent)
        })
        .collect();
    cross(&per_dim)
}

/// Extents left after serial tiling.
pub fn post_serial_extents(extents: &[u64], serial: &[u64]) -> Vec<u64> {
    extents.iter().zip(serial).map(|(&e, &s)| e.div_ceil(s)).collect()
}

/// Every serial tiling together with every thread tiling of the remaining
/// extents.
pub fn enumerate_tilings(extents: &[u64], warp_size: u64, opts: &TilingOptions) -> TilingOptionSet {
    let serial_options = enumerate_serial_tilings(extents, warp_size, opts);
    let mut thread_options: Vec<Vec<u64>> =
        serial_options.iter().flat_map(|s| enumerate_thread_tilings(&post_serial_extents(extents, s), opts)).collect();
    thread_options.sort();
    thread_options.dedup();
    TilingOptionSet { serial_options, thread_options }
}

/// Number of (serial, thread) pairs a root func is offered.
pub fn count_tiling_pairs(extents: &[u64], warp_size: u64, opts: &TilingOptions) -> usize {
    enumerate_serial_tilings(extents, warp_size, opts)
        .iter()
        .map(|s| enumerate_thread_tilings(&post_serial_extents(extents, s), opts).len())
        .sum()
}

/// True if every read of `func` by other funcs is the identity map.
pub fn is_pointwise_called(graph: &PipelineGraph, func: FuncId) -> bool {
    let uses = graph.uses_of(func);
    !uses.is_empty()
        && uses.iter().all(|u| {
            let a = graph.access(*u);
            let consumer_rank = graph.func(u.consumer).rank();
            a.dims.len() == consumer_rank
                && a.dims.iter().enumerate().all(|(d, da)| da.consumer_dim == Some(d) && da.stride == 1 && da.lo == 0 && da.hi == 0)
        })
}

/// Placement decisions for `func`, which must be the next func in
/// scheduling order (all of its consumers placed).
pub fn enumerate_compute_locations(
    state: &LoopNestState,
    func: FuncId,
    graph: &PipelineGraph,
    thresholds: &PruneThresholds,
) -> Result<Vec<Decision>, ScheduleError> {
    let node = graph.func(func);
    if state.schedule(func).is_some() {
        return Err(ScheduleError::AlreadyScheduled(node.name.clone()));
    }
    if state.frozen().contains(&func) {
        return Err(ScheduleError::Frozen(node.name.clone()));
    }
    if graph.is_output(func) {
        return Ok(vec![Decision::ComputeRoot]);
    }
    let single_stage = node.stages.len() == 1;
    let cheap = single_stage && node.stages[0].ops.total() <= thresholds.inline_op_budget;
    if single_stage && is_pointwise_called(graph, func) {
        return Ok(vec![Decision::Inline]);
    }
    let mut out = vec![Decision::ComputeRoot];
    if let Some(consumers) = state.effective_consumers(graph, func) {
        if let [c] = consumers[..] {
            for d in [Decision::FuseAtBlock(c), Decision::FuseAtThread(c)] {
                if state.apply(graph, func, d.clone()).is_ok() {
                    out.push(d);
                }
            }
        }
    }
    if cheap {
        out.push(Decision::Inline);
    }
    Ok(out)
}

/// Checks the pruning rules in a fixed order and reports the first failure.
pub fn prune(
    state: &LoopNestState,
    graph: &PipelineGraph,
    params: &MachineParams,
    thresholds: &PruneThresholds,
) -> Result<(), PruneReport> {
    let geo = state.geometry(graph);
    let fail = |reason, detail: String| Err(PruneReport { reason, detail });

    for f in graph.scheduled_funcs() {
        if state.schedule(f.id).is_none() {
            continue;
        }
        let ratio = geo.loop_points(f.id) / f.domain_size() as f64;
        if ratio > thresholds.max_recompute {
            return fail(
                PruneReason::ExcessiveRecompute,
                format!("`{}` computes {ratio:.2}x its domain", f.name),
            );
        }
    }

    let min_blocks = thresholds.min_blocks_per_sm * params.num_sms as f64;
    for k in &geo.kernels {
        let root = graph.func(k.root);
        let tiled = state.schedule(k.root).is_some_and(|s| s.thread.is_some());
        // Funcs too small to give every SM a warp of work are exempt.
        let could_fill = root.domain_size() as f64 >= min_blocks * params.warp_size as f64;
        if tiled && could_fill && (k.num_blocks as f64) < min_blocks {
            return fail(
                PruneReason::IdleSms,
                format!("`{}` launches {} blocks on {} SMs", root.name, k.num_blocks, params.num_sms),
            );
        }
    }

    for (fi, g) in geo.funcs.iter().enumerate() {
        let Some(g) = g else { continue };
        let k = &geo.kernels[g.kernel];
        let lanes = lane_stats(&k.block_shape, &g.threads, params.warp_size);
        if lanes.warp_lane_utilization < thresholds.min_warp_utilization {
            return fail(
                PruneReason::PoorWarpUtilization,
                format!("`{}` uses {:.3} of its warp lanes", graph.funcs[fi].name, lanes.warp_lane_utilization),
            );
        }
    }

    for f in graph.scheduled_funcs() {
        if let Some(s) = state.schedule(f.id).and_then(|s| s.serial.as_ref()) {
            let p: u64 = s.iter().product();
            if p > thresholds.unroll_budget {
                return fail(PruneReason::SerialTooLarge, format!("`{}` has {p} serial points per thread", f.name));
            }
        }
    }

    for (fi, g) in geo.funcs.iter().enumerate() {
        let Some(g) = g else { continue };
        if let Location::AtThread(c) = g.location {
            let c_tiled = state.schedule(c).is_some_and(|s| s.serial.is_some() && (s.thread.is_some() || !matches!(s.placement.location, Location::Root)));
            if !c_tiled {
                return fail(
                    PruneReason::ThreadAllocDynamicOrLarge,
                    format!("`{}` depends on the untiled loops of `{}`", graph.funcs[fi].name, graph.func(c).name),
                );
            }
            let bytes = g.points_per_thread() * graph.funcs[fi].elem_bytes as u64;
            if bytes > thresholds.max_thread_alloc_bytes {
                return fail(
                    PruneReason::ThreadAllocDynamicOrLarge,
                    format!("`{}` needs {bytes} bytes per thread", graph.funcs[fi].name),
                );
            }
        }
    }

    let violations = validate_limits(state, graph, params);
    if let Some(v) = violations.first() {
        return fail(PruneReason::HardwareLimit, v.to_string());
    }
    Ok(())
}
