//! Target GPU description, hardware-limit validation and the runtime oracle
//! that stands in for compiling and benchmarking a schedule.
//!
//! The oracle is a roofline-style model per kernel: the larger of an issue
//! bound and a memory bound, scaled up when a thread's working set overflows
//! its register budget, plus a fixed launch overhead.

use std::fmt;

use thiserror::Error;

use crate::featurize::{featurize, StageFeatures};
use crate::loopnest::{LoopNestState, ScheduleError};
use crate::pipeline::PipelineGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct MachineParams {
    pub warp_size: u64,
    pub num_sms: u64,
    pub max_threads_per_block: u64,
    pub max_active_warps_per_sm: u64,
    pub max_active_blocks_per_sm: u64,
    pub shared_mem_per_block_limit: u64,
    pub shared_mem_per_sm: u64,
    pub registers_per_thread_budget: u64,
    pub global_transaction_bytes: u64,
    pub shared_banks: u64,
    pub bank_width_bytes: u64,
    /// SM clock used by the oracle, in Hz.
    pub clock_hz: f64,
    /// Peak global memory bandwidth used by the oracle, in bytes per second.
    pub global_bandwidth: f64,
    /// Fixed cost of launching one kernel, in seconds.
    pub launch_overhead: f64,
}

impl Default for MachineParams {
    fn default() -> Self {
        MachineParams {
            warp_size: 32,
            num_sms: 80,
            max_threads_per_block: 1024,
            max_active_warps_per_sm: 64,
            max_active_blocks_per_sm: 32,
            shared_mem_per_block_limit: 48 * 1024,
            shared_mem_per_sm: 96 * 1024,
            registers_per_thread_budget: 255,
            global_transaction_bytes: 32,
            shared_banks: 32,
            bank_width_bytes: 4,
            clock_hz: 1.5e9,
            global_bandwidth: 900e9,
            launch_overhead: 3e-6,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MachineError {
    #[error("machine params line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid machine params: {0}")]
    Invalid(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("schedule exceeds hardware limits: {0}")]
    Limits(String),
}

impl MachineParams {
    /// Bytes a thread can keep in registers before spilling.
    pub fn register_bytes(&self) -> u64 {
        self.registers_per_thread_budget * 4
    }

    pub fn validate(&self) -> Result<(), MachineError> {
        let ints = [
            ("warp_size", self.warp_size),
            ("num_sms", self.num_sms),
            ("max_threads_per_block", self.max_threads_per_block),
            ("max_active_warps_per_sm", self.max_active_warps_per_sm),
            ("max_active_blocks_per_sm", self.max_active_blocks_per_sm),
            ("shared_mem_per_block_limit", self.shared_mem_per_block_limit),
            ("shared_mem_per_sm", self.shared_mem_per_sm),
            ("registers_per_thread_budget", self.registers_per_thread_budget),
            ("global_transaction_bytes", self.global_transaction_bytes),
            ("shared_banks", self.shared_banks),
            ("bank_width_bytes", self.bank_width_bytes),
        ];
        if let Some((k, _)) = ints.iter().find(|(_, v)| *v == 0) {
            return Err(MachineError::Invalid(format!("{k} must be positive")));
        }
        if self.max_threads_per_block % self.warp_size != 0 {
            return Err(MachineError::Invalid("warp_size must divide max_threads_per_block".into()));
        }
        for (k, v) in [("clock_hz", self.clock_hz), ("global_bandwidth", self.global_bandwidth)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(MachineError::Invalid(format!("{k} must be positive")));
            }
        }
        if !(self.launch_overhead.is_finite() && self.launch_overhead >= 0.0) {
            return Err(MachineError::Invalid("launch_overhead must be non-negative".into()));
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, MachineError> {
        let mut p = MachineParams::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MachineError::Parse { line: i + 1, msg: "expected key=value".into() })?;
            p.set(k.trim(), v.trim()).map_err(|msg| MachineError::Parse { line: i + 1, msg })?;
        }
        p.validate()?;
        Ok(p)
    }

    /// Overrides one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let int = || value.parse::<u64>().map_err(|_| format!("bad integer `{value}` for `{key}`"));
        let real = || value.parse::<f64>().map_err(|_| format!("bad number `{value}` for `{key}`"));
        match key {
            "warp_size" => self.warp_size = int()?,
            "num_sms" => self.num_sms = int()?,
            "max_threads_per_block" => self.max_threads_per_block = int()?,
            "max_active_warps_per_sm" => self.max_active_warps_per_sm = int()?,
            "max_active_blocks_per_sm" => self.max_active_blocks_per_sm = int()?,
            "shared_mem_per_block_limit" => self.shared_mem_per_block_limit = int()?,
            "shared_mem_per_sm" => self.shared_mem_per_sm = int()?,
            "registers_per_thread_budget" => self.registers_per_thread_budget = int()?,
            "global_transaction_bytes" => self.global_transaction_bytes = int()?,
            "shared_banks" => self.shared_banks = int()?,
            "bank_width_bytes" => self.bank_width_bytes = int()?,
            "clock_hz" => self.clock_hz = real()?,
            "global_bandwidth" => self.global_bandwidth = real()?,
            "launch_overhead" => self.launch_overhead = real()?,
            _ => return Err(format!("unknown machine parameter `{key}`")),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "warp_size={}\nnum_sms={}\nmax_threads_per_block={}\nmax_active_warps_per_sm={}\n\
             max_active_blocks_per_sm={}\nshared_mem_per_block_limit={}\nshared_mem_per_sm={}\n\
             registers_per_thread_budget={}\nglobal_transaction_bytes={}\nshared_banks={}\n\
             bank_width_bytes={}\nclock_hz={}\nglobal_bandwidth={}\nlaunch_overhead={}\n",
            self.warp_size,
            self.num_sms,
            self.max_threads_per_block,
            self.max_active_warps_per_sm,
            self.max_active_blocks_per_sm,
            self.shared_mem_per_block_limit,
            self.shared_mem_per_sm,
            self.registers_per_thread_budget,
            self.global_transaction_bytes,
            self.shared_banks,
            self.bank_width_bytes,
            self.clock_hz,
            self.global_bandwidth,
            self.launch_overhead
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    TooManyThreads { kernel: String, threads: u64, limit: u64 },
    TooMuchSharedMemory { kernel: String, bytes: u64, limit: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooManyThreads { kernel, threads, limit } => {
                write!(f, "too many threads: kernel `{kernel}` uses {threads} per block (limit {limit})")
            }
            Violation::TooMuchSharedMemory { kernel, bytes, limit } => {
                write!(f, "too much shared memory: kernel `{kernel}` allocates {bytes} bytes (limit {limit})")
            }
        }
    }
}

/// Every hardware-limit violation of the state's kernels.
pub fn validate_limits(state: &LoopNestState, graph: &PipelineGraph, params: &MachineParams) -> Vec<Violation> {
    let geo = state.geometry(graph);
    let mut out = Vec::new();
    for k in &geo.kernels {
        let name = graph.func(k.root).name.clone();
        let threads = k.threads_per_block();
        if threads > params.max_threads_per_block {
            out.push(Violation::TooManyThreads { kernel: name.clone(), threads, limit: params.max_threads_per_block });
        }
        if k.shared_bytes > params.shared_mem_per_block_limit {
            out.push(Violation::TooMuchSharedMemory {
                kernel: name,
                bytes: k.shared_bytes,
                limit: params.shared_mem_per_block_limit,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleResult {
    /// Seconds.
    pub runtime: f64,
    pub spilled_registers: bool,
    pub spill_bytes: u64,
}

/// Warp instructions an SM scheduler can issue per cycle.
const ISSUE_PER_CYCLE: f64 = 4.0;
/// Warp load instructions the load/store units of an SM accept per cycle.
const LSU_PER_CYCLE: f64 = 1.0;
/// Resident warps per SM needed to hide arithmetic latency.
const LATENCY_HIDING_WARPS: f64 = 16.0;
/// Resident warps per SM needed to saturate its share of memory bandwidth.
const BANDWIDTH_WARPS: f64 = 32.0;
/// Shared memory transactions an SM retires per cycle.
const SHARED_PER_CYCLE: f64 = 1.0;

/// Deterministic runtime estimate of a fully scheduled state.
pub fn simulate_runtime(
    state: &LoopNestState,
    graph: &PipelineGraph,
    params: &MachineParams,
) -> Result<OracleResult, MachineError> {
    let lowered = state.lower(graph)?;
    let violations = validate_limits(&lowered, graph, params);
    if !violations.is_empty() {
        let text: Vec<String> = violations.iter().map(Violation::to_string).collect();
        return Err(MachineError::Limits(text.join("; ")));
    }
    let features = featurize(&lowered, graph, params)?;
    Ok(runtime_from_features(&features, lowered.geometry(graph).kernels.len(), params))
}

/// Oracle evaluation from precomputed features.
pub fn runtime_from_features(features: &[StageFeatures], num_kernels: usize, params: &MachineParams) -> OracleResult {
    let mut per_kernel = vec![KernelTotals::default(); num_kernels];
    for sf in features {
        let s = &sf.schedule;
        let k = &mut per_kernel[sf.kernel];
        let warps = s.num_blocks * s.num_active_warps_per_block;
        k.warp_instructions += warps * (s.points_computed_per_thread * (sf.algorithm.ops_total() + 1.0) + sf.load_instructions_per_thread);
        k.load_instructions += warps * sf.load_instructions_per_thread;
        k.global_bytes += sf.global_traffic_bytes;
        k.shared_transactions += s.num_blocks * (s.num_shared_mem_loads_per_block + s.num_shared_mem_stores_per_block);
        k.num_blocks = k.num_blocks.max(s.num_blocks);
        k.max_warp_occupancy = if k.seen { k.max_warp_occupancy.min(s.max_warp_occupancy) } else { s.max_warp_occupancy };
        k.seen = true;
        let excess = s.working_set_at_thread - params.register_bytes() as f64;
        if excess > 0.0 {
            k.spill_excess = k.spill_excess.max(excess);
        }
    }
    let mut runtime = 0.0;
    let mut spill_bytes = 0u64;
    for k in per_kernel.iter().filter(|k| k.seen) {
        let resident_warps = k.max_warp_occupancy * params.max_active_warps_per_sm as f64;
        let busy_sms = k.num_blocks.min(params.num_sms as f64).max(1.0);
        let hide = (resident_warps / LATENCY_HIDING_WARPS).clamp(0.05, 1.0);
        let issue = k.warp_instructions / ISSUE_PER_CYCLE;
        let lsu = k.load_instructions / LSU_PER_CYCLE;
        let compute = issue.max(lsu) / (busy_sms * hide) / params.clock_hz;
        let bw_share = (resident_warps / BANDWIDTH_WARPS).clamp(0.05, 1.0) * busy_sms / params.num_sms as f64;
        let memory = k.global_bytes / (params.global_bandwidth * bw_share)
            + k.shared_transactions / (busy_sms * SHARED_PER_CYCLE) / params.clock_hz;
        let mut t = compute.max(memory);
        if k.spill_excess > 0.0 {
            t *= 1.5 + k.spill_excess / params.register_bytes() as f64;
            spill_bytes += k.spill_excess.ceil() as u64;
        }
        runtime += t + params.launch_overhead;
    }
    OracleResult { runtime, spilled_registers: spill_bytes > 0, spill_bytes }
}

/// Spill predicate alone, without timing.
pub fn spill_check(state: &LoopNestState, graph: &PipelineGraph, params: &MachineParams) -> Result<(bool, u64), MachineError> {
    let r = simulate_runtime(state, graph, params)?;
    Ok((r.spilled_registers, r.spill_bytes))
}

#[derive(Debug, Clone, Copy, Default)]
struct KernelTotals {
    seen: bool,
    warp_instructions: f64,
    load_instructions: f64,
    global_bytes: f64,
    shared_transactions: f64,
    num_blocks: f64,
    max_warp_occupancy: f64,
    spill_excess: f64,
}
