//! Per-stage features of a lowered schedule: memory traffic by tier,
//! coalescing and bank conflicts, occupancy, and the inherited scalar
//! features the cost formula consumes.
//!
//! Every per-block quantity is measured on block 0 of the stage's kernel.
//! Loads are modeled as warp instructions: each lane covers a footprint box
//! of its producer (over all serial points when the serial loop is unrolled,
//! otherwise over one point, repeated once per point) and the warp issues one
//! instruction per offset in that box.

use std::collections::{BTreeMap, HashMap};

use crate::loopnest::{Geometry, Location, LoopNestState, MemoryTier, ScheduleError};
use crate::machine::MachineParams;
use crate::pipeline::{region_points, region_union, required_region, AccessPattern, ExprTree, FuncId, Interval, PipelineGraph, Region};

macro_rules! feature_struct {
    ($(#[$meta:meta])* $name:ident, $count:literal, [$($field:ident),* $(,)?]) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Default)]
        pub struct $name {
            $(pub $field: f64,)*
        }

        impl $name {
            pub const LEN: usize = $count;
            pub const NAMES: [&'static str; $count] = [$(stringify!($field)),*];

            pub fn to_vec(&self) -> Vec<f64> {
                vec![$(self.$field),*]
            }

            pub fn from_slice(v: &[f64]) -> Option<Self> {
                if v.len() != $count {
                    return None;
                }
                let mut it = v.iter().copied();
                Some($name { $($field: it.next().unwrap(),)* })
            }
        }
    };
}

feature_struct!(
    /// Schedule-dependent features of one stage, in the fixed order the cost
    /// model reads them.
    ScheduleFeatures,
    56,
    [
        num_scalars,
        points_computed_per_thread,
        unique_global_bytes_read_per_realization,
        unique_shared_bytes_read_per_realization,
        unique_register_bytes_read_per_realization,
        unique_global_lines_read_per_realization,
        unique_shared_lines_read_per_realization,
        unique_register_lines_read_per_realization,
        unique_global_bytes_read_per_thread,
        unique_shared_bytes_read_per_thread,
        unique_register_bytes_read_per_thread,
        unique_global_lines_read_per_thread,
        unique_shared_lines_read_per_thread,
        unique_register_lines_read_per_thread,
        global_allocation_bytes_read_per_realization,
        shared_allocation_bytes_read_per_realization,
        register_allocation_bytes_read_per_realization,
        global_bytes_at_task,
        shared_bytes_at_task,
        register_bytes_at_task,
        global_innermost_bytes_at_task,
        shared_innermost_bytes_at_task,
        register_innermost_bytes_at_task,
        num_blocks,
        num_warps_per_block,
        num_active_warps_per_block,
        num_threads_per_block,
        expr_branching,
        block_occupancy,
        warp_lane_utilization,
        idle_lane_wastage,
        num_shared_mem_loads_per_block,
        num_shared_mem_stores_per_block,
        num_global_mem_loads_per_block,
        num_global_mem_stores_per_block,
        shared_mem_store_efficiency,
        shared_mem_load_efficiency,
        global_mem_store_efficiency,
        global_mem_load_efficiency,
        working_set_at_thread,
        shared_mem_occupancy,
        shared_mem_block_limit_factor,
        max_warp_occupancy,
        max_block_occupancy,
        num_realizations,
        num_productions,
        num_tasks,
        inner_parallelism,
        tasks_per_core,
        num_cores,
        inlined_calls,
        unique_bytes_read_per_point,
        unique_lines_read_per_point,
        unique_bytes_read_per_task,
        unique_lines_read_per_task,
        working_set,
    ]
);

feature_struct!(
    /// Schedule-independent features of one stage.
    AlgorithmFeatures,
    10,
    [op_add, op_mul, op_div, op_minmax, op_transcendental, op_cast, op_compare, num_accesses, num_taps, elem_bytes]
);

impl AlgorithmFeatures {
    pub fn ops_total(&self) -> f64 {
        self.op_add + self.op_mul + self.op_div + self.op_minmax + self.op_transcendental + self.op_cast + self.op_compare
    }
}

/// Feature vectors of one stage plus bookkeeping used by the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFeatures {
    pub func: FuncId,
    pub stage: usize,
    /// Index of the kernel that evaluates the stage.
    pub kernel: usize,
    pub schedule: ScheduleFeatures,
    pub algorithm: AlgorithmFeatures,
    /// Global memory bytes moved by the stage across all blocks, with
    /// per-block reuse and wasted transaction bytes accounted for.
    pub global_traffic_bytes: f64,
    /// Load instructions one thread issues for this stage: one per distinct
    /// staged value when the serial loop is unrolled, one per tap per point
    /// otherwise. Reads of register buffers are free.
    pub load_instructions_per_thread: f64,
}

/// Strahler number: leaves are 1, a node takes its largest child's number,
/// plus one if that maximum is shared by two or more children.
pub fn strahler(tree: &ExprTree) -> u32 {
    let mut nums: Vec<u32> = tree.children.iter().map(strahler).collect();
    if nums.is_empty() {
        return 1;
    }
    nums.sort_unstable_by(|a, b| b.cmp(a));
    if nums.len() >= 2 && nums[0] == nums[1] {
        nums[0] + 1
    } else {
        nums[0]
    }
}

/// Strahler number of a stage; stages without a declared tree are treated
/// as a left-leaning chain over their ops.
pub fn expr_branching(tree: Option<&ExprTree>, op_total: u32) -> u32 {
    match tree {
        Some(t) => strahler(t),
        None if op_total >= 1 => 2,
        None => 1,
    }
}

/// Lane occupancy of a func's threads inside its kernel's block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneStats {
    pub threads_per_block: u64,
    pub num_warps: u64,
    pub active_lanes: u64,
    pub active_warps: u64,
    pub warp_lane_utilization: f64,
}

/// Calls `visit(lin, tid)` for every active thread in increasing linear lane
/// order (dim 0 fastest). A thread is active if it lies inside `threads`.
fn for_each_active_lane(block_shape: &[u64], threads: &[u64], mut visit: impl FnMut(u64, &[u64])) {
    let rank = threads.len().min(block_shape.len());
    let box_ext: Vec<u64> = (0..rank).map(|d| threads[d].min(block_shape[d])).collect();
    if box_ext.iter().any(|&e| e == 0) {
        return;
    }
    let mut strides = Vec::with_capacity(rank);
    let mut acc = 1;
    for &b in &block_shape[..rank] {
        strides.push(acc);
        acc *= b;
    }
    let mut tid = vec![0u64; rank];
    loop {
        let lin = tid.iter().zip(&strides).map(|(t, s)| t * s).sum();
        visit(lin, &tid);
        let mut d = 0;
        loop {
            if d == rank {
                return;
            }
            tid[d] += 1;
            if tid[d] < box_ext[d] {
                break;
            }
            tid[d] = 0;
            d += 1;
        }
    }
}

/// Linearized lane index (dim 0 fastest) of every active thread, in order.
pub fn active_lanes(block_shape: &[u64], threads: &[u64]) -> Vec<(u64, Vec<u64>)> {
    let mut out = Vec::new();
    for_each_active_lane(block_shape, threads, |lin, tid| out.push((lin, tid.to_vec())));
    out
}

pub fn lane_stats(block_shape: &[u64], threads: &[u64], warp_size: u64) -> LaneStats {
    let threads_per_block: u64 = block_shape.iter().product();
    let (mut lanes, mut active_warps, mut last_warp) = (0u64, 0u64, None);
    // Active lanes come in rows of consecutive lane indices along dim 0.
    let run = threads.first().map_or(1, |&t| t.min(block_shape.first().copied().unwrap_or(1)));
    let outer_threads = threads.get(1..).unwrap_or(&[]);
    let outer_shape = block_shape.get(1..).unwrap_or(&[]);
    let row_stride = block_shape.first().copied().unwrap_or(1);
    if run > 0 {
        for_each_active_lane(outer_shape, outer_threads, |row, _| {
            let first = row * row_stride;
            let (w0, w1) = (first / warp_size, (first + run - 1) / warp_size);
            let fresh = if last_warp == Some(w0) { w1 - w0 } else { w1 - w0 + 1 };
            active_warps += fresh;
            last_warp = Some(w1);
            lanes += run;
        });
    }
    LaneStats {
        threads_per_block,
        num_warps: threads_per_block.div_ceil(warp_size),
        active_lanes: lanes,
        active_warps,
        warp_lane_utilization: if active_warps == 0 {
            0.0
        } else {
            lanes as f64 / (active_warps * warp_size) as f64
        },
    }
}

/// Transactions needed by one warp access. `addresses` holds the starting
/// byte address of each lane's element.
pub fn count_memory_transactions(addresses: &[i64], elem_bytes: u64, tier: MemoryTier, params: &MachineParams) -> u64 {
    count_transactions_with(addresses, elem_bytes, tier, params, &mut Vec::new())
}

/// [`count_memory_transactions`] with a caller-owned scratch buffer.
fn count_transactions_with(
    addresses: &[i64],
    elem_bytes: u64,
    tier: MemoryTier,
    params: &MachineParams,
    scratch: &mut Vec<i64>,
) -> u64 {
    let e = elem_bytes as i64;
    let unit = match tier {
        MemoryTier::Global => params.global_transaction_bytes as i64,
        MemoryTier::Shared => params.bank_width_bytes as i64,
        MemoryTier::Register | MemoryTier::None => return 0,
    };
    scratch.clear();
    scratch.extend(addresses.iter().flat_map(|&a| a.div_euclid(unit)..=(a + e - 1).div_euclid(unit)));
    scratch.sort_unstable();
    scratch.dedup();
    if tier == MemoryTier::Global {
        return scratch.len() as u64;
    }
    let banks = params.shared_banks as i64;
    let mut per_bank = vec![0u64; params.shared_banks as usize];
    for wd in scratch.iter() {
        per_bank[wd.rem_euclid(banks) as usize] += 1;
    }
    per_bank.into_iter().max().unwrap_or(0)
}

/// Bytes moved by one transaction of a tier.
pub fn transaction_bytes(tier: MemoryTier, params: &MachineParams) -> u64 {
    match tier {
        MemoryTier::Global => params.global_transaction_bytes,
        MemoryTier::Shared => params.shared_banks * params.bank_width_bytes,
        _ => 0,
    }
}

/// Row-major (dim 0 fastest) storage layout of a buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub origin: Vec<i64>,
    pub strides: Vec<i64>,
    pub elem_bytes: u64,
}

impl Layout {
    pub fn new(region: &[Interval], elem_bytes: u64) -> Self {
        let mut strides = Vec::with_capacity(region.len());
        let mut acc = 1i64;
        for r in region {
            strides.push(acc);
            acc *= r.extent().max(1) as i64;
        }
        Layout { origin: region.iter().map(|r| r.lo).collect(), strides, elem_bytes }
    }

    pub fn address(&self, coord: &[i64]) -> i64 {
        coord.iter().zip(&self.origin).zip(&self.strides).map(|((c, o), s)| (c - o) * s).sum::<i64>()
            * self.elem_bytes as i64
    }
}

/// Tier and layout of a func's buffer as seen by the stages of one kernel.
pub fn storage_of(state: &LoopNestState, geo: &Geometry, graph: &PipelineGraph, p: FuncId) -> (MemoryTier, Layout) {
    let node = graph.func(p);
    let elem = node.elem_bytes as u64;
    match state.location(p) {
        Some(Location::AtBlock(_)) => (MemoryTier::Shared, Layout::new(&geo.func(p).unwrap().realization, elem)),
        Some(Location::AtThread(_)) => (MemoryTier::Register, Layout::new(&geo.func(p).unwrap().realization, elem)),
        _ => (MemoryTier::Global, Layout::new(&node.domain(), elem)),
    }
}

/// Bounding boxes read from each producer by `accesses` over `points`.
pub fn reads_over(accesses: &[AccessPattern], points: &[Interval]) -> BTreeMap<FuncId, Region> {
    let mut out: BTreeMap<FuncId, Region> = BTreeMap::new();
    for a in accesses {
        let r = required_region(points, a);
        out.entry(a.producer).and_modify(|o| *o = region_union(o, &r)).or_insert(r);
    }
    out
}

/// Bounding box read by `accesses`, which must share one producer.
fn read_box(accesses: &[AccessPattern], points: &[Interval]) -> Region {
    let mut out = required_region(points, &accesses[0]);
    for a in &accesses[1..] {
        for (o, d) in out.iter_mut().zip(&a.dims) {
            *o = o.union(&d.apply(points));
        }
    }
    out
}

fn lines(region: &[Interval]) -> u64 {
    if region.iter().any(Interval::is_empty) {
        return 0;
    }
    region.iter().skip(1).map(Interval::extent).product()
}

fn first_point(b: &[Interval]) -> Region {
    b.iter().map(|i| Interval::with_extent(i.lo, 1)).collect()
}

/// Memory-tier totals accumulated over producers.
#[derive(Debug, Default, Clone, Copy)]
struct TierTotals {
    bytes: [f64; 3],
    lines: [f64; 3],
}

fn tier_index(t: MemoryTier) -> Option<usize> {
    match t {
        MemoryTier::Global => Some(0),
        MemoryTier::Shared => Some(1),
        MemoryTier::Register => Some(2),
        MemoryTier::None => None,
    }
}

/// Load or store traffic of one block.
#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct BlockTraffic {
    pub transactions: f64,
    pub used_bytes: f64,
}

/// Transactions issued by block 0 when every active lane touches the box
/// `lane_box(tid)` of a buffer, one warp instruction per box offset,
/// repeated `repeat` times.
pub fn block_traffic(
    lanes: &[(u64, Vec<u64>)],
    boxes: &[Region],
    layout: &Layout,
    tier: MemoryTier,
    repeat: f64,
    params: &MachineParams,
) -> BlockTraffic {
    let mut out = BlockTraffic::default();
    if lanes.is_empty() || tier_index(tier).is_none_or(|i| i == 2) {
        return out;
    }
    let extents: Vec<u64> = boxes[0].iter().map(Interval::extent).collect();
    if extents.iter().any(|&e| e == 0) {
        return out;
    }
    let offsets = crate::loopnest::grid(&extents);
    let offset_addr: Vec<i64> = offsets
        .iter()
        .map(|r| layout.address(&r.iter().zip(&layout.origin).map(|(&x, &o)| x as i64 + o).collect::<Vec<_>>()))
        .collect();
    let bases: Vec<i64> = boxes.iter().map(|b| layout.address(&b.iter().map(|i| i.lo).collect::<Vec<_>>())).collect();

    // A warp's transaction count at one offset depends only on its lanes'
    // addresses relative to lane 0 and on lane 0's address modulo the
    // least common multiple of the transaction sizes. The distinct addresses
    // it touches do not depend on the offset at all.
    let (a, b) = (transaction_bytes(MemoryTier::Shared, params) as i64, params.global_transaction_bytes as i64);
    let gcd = |mut x: i64, mut y: i64| {
        while y != 0 {
            (x, y) = (y, x % y);
        }
        x
    };
    let align = a / gcd(a, b).max(1) * b;
    let mut shapes: HashMap<Vec<i64>, usize> = HashMap::new();
    let mut memo: HashMap<(usize, i64), u64> = HashMap::new();
    let mut addrs = Vec::new();
    let mut scratch = Vec::new();
    let mut start = 0;
    while start < lanes.len() {
        let warp = lanes[start].0 / params.warp_size;
        let mut end = start;
        while end < lanes.len() && lanes[end].0 / params.warp_size == warp {
            end += 1;
        }
        let b0 = bases[start];
        let deltas: Vec<i64> = bases[start..end].iter().map(|b| b - b0).collect();
        let mut distinct = deltas.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let next_id = shapes.len();
        let id = *shapes.entry(deltas).or_insert(next_id);
        let mut tx = 0;
        for off in &offset_addr {
            let phase = (b0 + off).rem_euclid(align);
            tx += *memo.entry((id, phase)).or_insert_with(|| {
                addrs.clear();
                addrs.extend(bases[start..end].iter().map(|b| b - b0 + phase));
                count_transactions_with(&addrs, layout.elem_bytes, tier, params, &mut scratch)
            });
        }
        out.transactions += tx as f64 * repeat;
        out.used_bytes += (distinct.len() as u64 * layout.elem_bytes * offset_addr.len() as u64) as f64 * repeat;
        start = end;
    }
    out
}

fn efficiency(t: &BlockTraffic, tier: MemoryTier, params: &MachineParams) -> f64 {
    if t.transactions == 0.0 {
        1.0
    } else {
        (t.used_bytes / (t.transactions * transaction_bytes(tier, params) as f64)).min(1.0)
    }
}

/// Occupancy figures of a kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occupancy {
    pub active_blocks_per_sm: u64,
    pub max_warp_occupancy: f64,
    pub max_block_occupancy: f64,
    pub shared_mem_occupancy: f64,
    pub shared_mem_block_limit_factor: f64,
}

pub fn occupancy(threads_per_block: u64, shared_bytes: u64, params: &MachineParams) -> Occupancy {
    let warps = threads_per_block.div_ceil(params.warp_size).max(1);
    let by_warps = params.max_active_warps_per_sm / warps;
    let by_shared = if shared_bytes == 0 { u64::MAX } else { params.shared_mem_per_sm / shared_bytes };
    let active = by_warps.min(by_shared).min(params.max_active_blocks_per_sm);
    Occupancy {
        active_blocks_per_sm: active,
        max_warp_occupancy: (active * warps) as f64 / params.max_active_warps_per_sm as f64,
        max_block_occupancy: active as f64 / params.max_active_blocks_per_sm as f64,
        shared_mem_occupancy: shared_bytes as f64 / params.shared_mem_per_block_limit as f64,
        shared_mem_block_limit_factor: if shared_bytes == 0 {
            1.0
        } else {
            (by_shared as f64 / params.max_active_blocks_per_sm as f64).min(1.0)
        },
    }
}

fn algorithm_features(graph: &PipelineGraph, f: FuncId, stage: usize) -> AlgorithmFeatures {
    let node = graph.func(f);
    let s = &node.stages[stage];
    let h = &s.ops.0;
    AlgorithmFeatures {
        op_add: h[0] as f64,
        op_mul: h[1] as f64,
        op_div: h[2] as f64,
        op_minmax: h[3] as f64,
        op_transcendental: h[4] as f64,
        op_cast: h[5] as f64,
        op_compare: h[6] as f64,
        num_accesses: s.accesses.len() as f64,
        num_taps: s.accesses.iter().map(|a| a.taps() as f64).sum(),
        elem_bytes: node.elem_bytes as f64,
    }
}

/// Features of every stage of every scheduled func.
pub fn featurize(state: &LoopNestState, graph: &PipelineGraph, params: &MachineParams) -> Result<Vec<StageFeatures>, ScheduleError> {
    if !state.is_lowered() {
        return Err(ScheduleError::NotLowered);
    }
    let geo = state.geometry(graph);
    let mut out = Vec::new();
    for node in graph.scheduled_funcs() {
        let f = node.id;
        let Some(loc) = state.location(f) else { continue };
        for stage in 0..node.stages.len() {
            let sf = if loc == Location::Inlined {
                inlined_features(state, &geo, graph, params, f, stage)
            } else {
                stage_features(state, &geo, graph, params, f, stage)
            };
            out.push(sf);
        }
    }
    Ok(out)
}

fn kernel_common(geo: &Geometry, kernel: usize, params: &MachineParams, s: &mut ScheduleFeatures) {
    let k = &geo.kernels[kernel];
    let occ = occupancy(k.threads_per_block(), k.shared_bytes, params);
    s.num_blocks = k.num_blocks as f64;
    s.num_warps_per_block = k.threads_per_block().div_ceil(params.warp_size) as f64;
    s.num_tasks = k.num_blocks as f64;
    s.num_cores = params.num_sms as f64;
    s.tasks_per_core = k.num_blocks as f64 / params.num_sms as f64;
    s.max_warp_occupancy = occ.max_warp_occupancy;
    s.max_block_occupancy = occ.max_block_occupancy;
    s.shared_mem_occupancy = occ.shared_mem_occupancy;
    s.shared_mem_block_limit_factor = occ.shared_mem_block_limit_factor;
    s.shared_mem_load_efficiency = 1.0;
    s.shared_mem_store_efficiency = 1.0;
    s.global_mem_load_efficiency = 1.0;
    s.global_mem_store_efficiency = 1.0;
}

fn inlined_features(
    state: &LoopNestState,
    geo: &Geometry,
    graph: &PipelineGraph,
    params: &MachineParams,
    f: FuncId,
    stage: usize,
) -> StageFeatures {
    let node = graph.func(f);
    let kernel = geo.inline_host[f.0].unwrap_or(0);
    let mut s = ScheduleFeatures::default();
    kernel_common(geo, kernel, params, &mut s);
    // The host is the first non-inlined func that evaluates this one.
    let host = state
        .effective_consumers(graph, f)
        .and_then(|c| c.first().copied())
        .and_then(|h| geo.func(h).map(|g| (h, g)));
    let lanes = match host {
        Some((_, g)) => lane_stats(&geo.kernels[g.kernel].block_shape, &g.threads, params.warp_size),
        None => lane_stats(&[1], &[1], params.warp_size),
    };
    s.num_scalars = geo.inline_evaluations[f.0];
    s.inlined_calls = s.num_scalars;
    s.num_threads_per_block = lanes.active_lanes as f64;
    s.num_active_warps_per_block = lanes.active_warps as f64;
    s.points_computed_per_thread = s.num_scalars / (s.num_blocks * s.num_threads_per_block).max(1.0);
    s.block_occupancy = lanes.active_lanes as f64 / params.max_threads_per_block as f64;
    s.warp_lane_utilization = lanes.warp_lane_utilization;
    s.idle_lane_wastage = (lanes.active_warps * params.warp_size - lanes.active_lanes) as f64 / params.max_threads_per_block as f64;
    s.inner_parallelism = 1.0;
    let st = &node.stages[stage];
    s.expr_branching = expr_branching(st.expr_tree.as_ref(), st.ops.total()) as f64;
    StageFeatures {
        func: f,
        stage,
        kernel,
        schedule: s,
        algorithm: algorithm_features(graph, f, stage),
        global_traffic_bytes: 0.0,
        load_instructions_per_thread: 0.0,
    }
}

fn stage_features(
    state: &LoopNestState,
    geo: &Geometry,
    graph: &PipelineGraph,
    params: &MachineParams,
    f: FuncId,
    stage: usize,
) -> StageFeatures {
    let node = graph.func(f);
    let g = geo.func(f).expect("non-inlined func has geometry");
    let k = &geo.kernels[g.kernel];
    let elem = node.elem_bytes as u64;
    let st = &node.stages[stage];
    let accesses = &g.effective[stage];
    let mut s = ScheduleFeatures::default();
    kernel_common(geo, g.kernel, params, &mut s);

    let lanes = active_lanes(&k.block_shape, &g.threads);
    let ls = lane_stats(&k.block_shape, &g.threads, params.warp_size);
    let ppt = g.points_per_thread();
    let unrolled = g.unrolled;

    s.points_computed_per_thread = ppt as f64;
    s.num_threads_per_block = ls.active_lanes as f64;
    s.num_active_warps_per_block = ls.active_warps as f64;
    s.num_scalars = k.num_blocks as f64 * ls.active_lanes as f64 * ppt as f64;
    s.block_occupancy = ls.active_lanes as f64 / params.max_threads_per_block as f64;
    s.warp_lane_utilization = ls.warp_lane_utilization;
    s.idle_lane_wastage = (ls.active_warps * params.warp_size - ls.active_lanes) as f64 / params.max_threads_per_block as f64;
    s.expr_branching = expr_branching(st.expr_tree.as_ref(), st.ops.total()) as f64;

    let (realizations, inner_par) = match g.location {
        Location::Root => (1.0, ls.active_lanes as f64),
        Location::AtBlock(_) => (k.num_blocks as f64, ls.active_lanes as f64),
        _ => (k.num_blocks as f64 * ls.active_lanes as f64, 1.0),
    };
    s.num_realizations = realizations;
    s.num_productions = realizations;
    s.inner_parallelism = inner_par;

    // Boxes of this func's points at each granularity.
    let thread_box = |tid: &[u64]| geo.thread_points(graph, f, tid);
    let tid0 = vec![0u64; g.threads.len()];
    let thread0 = thread_box(&tid0);
    let realization: Region = match g.location {
        Location::Root => (0..node.rank())
            .map(|d| Interval::with_extent(0, k.block_counts[d] * g.serial[d] * g.threads[d]))
            .collect(),
        _ => g.realization.clone(),
    };
    let task: Region = match g.location {
        Location::AtThread(_) => {
            let owner = geo.func(g.owner).unwrap();
            crate::loopnest::region_read(&owner.effective, f, &owner.realization, node.rank())
        }
        _ => g.realization.clone(),
    };
    let point = first_point(&thread0);

    let storage: BTreeMap<FuncId, (MemoryTier, Layout)> = accesses
        .iter()
        .map(|a| a.producer)
        .chain(std::iter::once(f))
        .map(|p| (p, storage_of(state, geo, graph, p)))
        .collect();
    let tier_of = |p: &FuncId| storage[p].0;
    let elem_of = |p: &FuncId| graph.func(*p).elem_bytes as f64;

    let totals = |points: &[Interval]| -> TierTotals {
        let mut t = TierTotals::default();
        for (p, r) in reads_over(accesses, points) {
            if let Some(i) = tier_index(tier_of(&p)) {
                t.bytes[i] += region_points(&r) as f64 * elem_of(&p);
                t.lines[i] += lines(&r) as f64;
            }
        }
        t
    };
    let per_real = totals(&realization);
    let per_thread = totals(&thread0);
    let per_point = totals(&point);
    let per_task = totals(&task);
    s.unique_global_bytes_read_per_realization = per_real.bytes[0];
    s.unique_shared_bytes_read_per_realization = per_real.bytes[1];
    s.unique_register_bytes_read_per_realization = per_real.bytes[2];
    s.unique_global_lines_read_per_realization = per_real.lines[0];
    s.unique_shared_lines_read_per_realization = per_real.lines[1];
    s.unique_register_lines_read_per_realization = per_real.lines[2];
    s.unique_global_bytes_read_per_thread = per_thread.bytes[0];
    s.unique_shared_bytes_read_per_thread = per_thread.bytes[1];
    s.unique_register_bytes_read_per_thread = per_thread.bytes[2];
    s.unique_global_lines_read_per_thread = per_thread.lines[0];
    s.unique_shared_lines_read_per_thread = per_thread.lines[1];
    s.unique_register_lines_read_per_thread = per_thread.lines[2];
    s.unique_bytes_read_per_point = per_point.bytes.iter().sum();
    s.unique_lines_read_per_point = per_point.lines.iter().sum();
    s.unique_bytes_read_per_task = per_task.bytes.iter().sum();
    s.unique_lines_read_per_task = per_task.lines.iter().sum();

    let mut alloc = [0.0f64; 3];
    let mut seen = std::collections::BTreeSet::new();
    for a in accesses {
        if seen.insert(a.producer) {
            let (tier, _) = storage[&a.producer];
            if let Some(i) = tier_index(tier) {
                alloc[i] += allocation_bytes(state, geo, graph, a.producer) as f64;
            }
        }
    }
    s.global_allocation_bytes_read_per_realization = alloc[0];
    s.shared_allocation_bytes_read_per_realization = alloc[1];
    s.register_allocation_bytes_read_per_realization = alloc[2];

    // Bytes this stage writes per block, in its own tier.
    let own_tier = g.location.tier();
    let (written, row) = match g.location {
        Location::AtThread(_) => (
            ls.active_lanes as f64 * region_points(&g.realization) as f64 * elem as f64,
            g.realization[0].extent() as f64 * elem as f64,
        ),
        _ => (region_points(&g.realization) as f64 * elem as f64, g.realization[0].extent() as f64 * elem as f64),
    };
    match own_tier {
        MemoryTier::Global => {
            s.global_bytes_at_task = written;
            s.global_innermost_bytes_at_task = row;
        }
        MemoryTier::Shared => {
            s.shared_bytes_at_task = written;
            s.shared_innermost_bytes_at_task = row;
        }
        _ => {
            s.register_bytes_at_task = written;
            s.register_innermost_bytes_at_task = row;
        }
    }
    s.working_set = allocation_bytes(state, geo, graph, f) as f64;

    // Warp-level load and store transactions.
    let group_box = |tid: &[u64]| -> Region {
        let b = thread_box(tid);
        if unrolled {
            b
        } else {
            first_point(&b)
        }
    };
    let repeat = if unrolled { 1.0 } else { ppt as f64 };
    let groups: Vec<Region> = lanes.iter().map(|(_, tid)| group_box(tid)).collect();
    let mut loads = [BlockTraffic::default(); 2];
    let mut producers: Vec<FuncId> = accesses.iter().map(|a| a.producer).collect();
    producers.sort();
    producers.dedup();
    for p in &producers {
        let (tier, layout) = &storage[p];
        let Some(i) = tier_index(*tier).filter(|&i| i < 2) else { continue };
        let of_p: Vec<AccessPattern> = accesses.iter().filter(|a| a.producer == *p).cloned().collect();
        let footprints: Vec<Region> = groups.iter().map(|gb| read_box(&of_p, gb)).collect();
        let t = block_traffic(&lanes, &footprints, layout, *tier, repeat, params);
        loads[i].transactions += t.transactions;
        loads[i].used_bytes += t.used_bytes;
    }
    let (store_tier, store_layout) = &storage[&f];
    let stores = block_traffic(&lanes, &groups, store_layout, *store_tier, repeat, params);
    s.num_global_mem_loads_per_block = loads[0].transactions;
    s.num_shared_mem_loads_per_block = loads[1].transactions;
    s.global_mem_load_efficiency = efficiency(&loads[0], MemoryTier::Global, params);
    s.shared_mem_load_efficiency = efficiency(&loads[1], MemoryTier::Shared, params);
    match store_tier {
        MemoryTier::Global => {
            s.num_global_mem_stores_per_block = stores.transactions;
            s.global_mem_store_efficiency = efficiency(&stores, MemoryTier::Global, params);
        }
        MemoryTier::Shared => {
            s.num_shared_mem_stores_per_block = stores.transactions;
            s.shared_mem_store_efficiency = efficiency(&stores, MemoryTier::Shared, params);
        }
        _ => {}
    }

    // Register pressure: the unrolled outputs, buffers fused at this
    // thread level and the producer footprints staged for one group. A
    // broadcast dim is a reduction walked one step at a time, so only one
    // slice along it is live.
    let group0 = group_box(&tid0);
    let streamed: Vec<AccessPattern> = accesses
        .iter()
        .map(|a| {
            let mut a = a.clone();
            for d in a.dims.iter_mut().filter(|d| d.consumer_dim.is_none()) {
                d.hi = d.lo;
            }
            a
        })
        .collect();
    let own = if unrolled { ppt } else { 1 } as f64 * elem as f64;
    let fused: f64 = match g.location {
        Location::AtThread(_) => 0.0,
        _ => k
            .thread_members
            .iter()
            .filter(|q| geo.func(**q).unwrap().location == Location::AtThread(f))
            .map(|q| region_points(&geo.func(*q).unwrap().realization) as f64 * graph.func(*q).elem_bytes as f64)
            .sum(),
    };
    let staged: f64 = reads_over(&streamed, &group0)
        .iter()
        .filter(|(p, _)| **p != f && tier_of(p) != MemoryTier::Register)
        .map(|(p, r)| region_points(r) as f64 * elem_of(p))
        .sum();
    s.working_set_at_thread = own + fused + staged;

    let load_instructions_per_thread: f64 = if unrolled {
        reads_over(accesses, &group0)
            .iter()
            .filter(|(p, _)| tier_of(p) != MemoryTier::Register)
            .map(|(_, r)| region_points(r) as f64)
            .sum()
    } else {
        ppt as f64
            * accesses.iter().filter(|a| tier_of(&a.producer) != MemoryTier::Register).map(|a| a.taps() as f64).sum::<f64>()
    };

    let global_reads: f64 = reads_over(accesses, &task)
        .iter()
        .filter(|(p, _)| tier_of(p) == MemoryTier::Global)
        .map(|(p, r)| region_points(r) as f64 * elem_of(p))
        .sum();
    let global_traffic_bytes = k.num_blocks as f64
        * (global_reads / s.global_mem_load_efficiency + s.global_bytes_at_task / s.global_mem_store_efficiency);

    StageFeatures {
        func: f,
        stage,
        kernel: g.kernel,
        schedule: s,
        algorithm: algorithm_features(graph, f, stage),
        global_traffic_bytes,
        load_instructions_per_thread,
    }
}

/// Bytes of the buffer holding `p` in its tier.
pub fn allocation_bytes(state: &LoopNestState, geo: &Geometry, graph: &PipelineGraph, p: FuncId) -> u64 {
    let node = graph.func(p);
    match state.location(p) {
        Some(Location::AtBlock(_)) | Some(Location::AtThread(_)) => {
            region_points(&geo.func(p).unwrap().realization) * node.elem_bytes as u64
        }
        Some(Location::Inlined) => 0,
        _ => node.domain_size() * node.elem_bytes as u64,
    }
}
