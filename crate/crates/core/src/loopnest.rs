//! Schedule state: per-func placement and tiling, plus the loop-nest tree
//! derived from them.
//!
//! A [`LoopNestState`] is an immutable value. [`LoopNestState::apply`]
//! returns a new state; the input is never touched, which is what lets the
//! beam search branch freely.
//!
//! Tree shape, by depth below a kernel root:
//!
//! ```text
//! 0  block loops of a root func (one kernel)
//! 1  thread loops of every func computed at that block level
//! 2  serial loops: the func's own, plus funcs fused at its thread level
//! ```
//!
//! Inlined funcs have no loops; they are recorded on the serial node of the
//! func that evaluates them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::enumerate::innermost_dim;
use crate::pipeline::{
    region_points, region_union, required_region, AccessPattern, FuncId, Interval, PipelineGraph, Region,
};

/// Number of distinct structural-hash depths; deeper requests see depth 2.
pub const HASH_DEPTHS: usize = 3;

/// Serial loops with a smaller total extent are unrolled when lowering.
pub const UNROLL_LIMIT: u64 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("illegal placement of `{func}`: {reason}")]
    IllegalPlacement { func: String, reason: String },
    #[error("illegal tiling of `{func}`: {reason}")]
    IllegalTiling { func: String, reason: String },
    #[error("`{0}` is already placed")]
    AlreadyScheduled(String),
    #[error("`{0}` is frozen and the decision differs from its frozen one")]
    Frozen(String),
    #[error("unscheduled funcs remain: {}", .0.join(", "))]
    Unscheduled(Vec<String>),
    #[error("state must be lowered first")]
    NotLowered,
    #[error("schedule dump line {line}: {msg}")]
    Dump { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Block,
    Thread,
    Serial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Location {
    Root,
    AtBlock(FuncId),
    AtThread(FuncId),
    Inlined,
}

impl Location {
    pub fn tier(self) -> MemoryTier {
        match self {
            Location::Root => MemoryTier::Global,
            Location::AtBlock(_) => MemoryTier::Shared,
            Location::AtThread(_) => MemoryTier::Register,
            Location::Inlined => MemoryTier::None,
        }
    }

    pub fn kind(self) -> PlacementKind {
        match self {
            Location::Root => PlacementKind::Root,
            Location::AtBlock(_) => PlacementKind::AtBlock,
            Location::AtThread(_) => PlacementKind::AtThread,
            Location::Inlined => PlacementKind::Inlined,
        }
    }

    pub fn consumer(self) -> Option<FuncId> {
        match self {
            Location::AtBlock(c) | Location::AtThread(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlacementKind {
    Root,
    AtBlock,
    AtThread,
    Inlined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MemoryTier {
    Global,
    Shared,
    Register,
    None,
}

impl MemoryTier {
    pub fn name(self) -> &'static str {
        match self {
            MemoryTier::Global => "global",
            MemoryTier::Shared => "shared",
            MemoryTier::Register => "register",
            MemoryTier::None => "none",
        }
    }
}

/// Compute location and the memory tier it implies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Placement {
    pub location: Location,
    pub memory_tier: MemoryTier,
}

impl Placement {
    pub fn new(location: Location) -> Self {
        Placement { location, memory_tier: location.tier() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Decision {
    ComputeRoot,
    FuseAtBlock(FuncId),
    FuseAtThread(FuncId),
    Inline,
    TileSerial(Vec<u64>),
    TileThread(Vec<u64>),
}

impl Decision {
    pub fn is_placement(&self) -> bool {
        !matches!(self, Decision::TileSerial(_) | Decision::TileThread(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FuncSchedule {
    pub placement: Placement,
    pub serial: Option<Vec<u64>>,
    pub thread: Option<Vec<u64>>,
}

impl FuncSchedule {
    /// True once every tiling this placement needs has been chosen.
    pub fn is_complete(&self) -> bool {
        match self.placement.location {
            Location::Root => self.serial.is_some() && self.thread.is_some(),
            Location::AtBlock(_) => self.serial.is_some(),
            Location::AtThread(_) | Location::Inlined => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LoopNode {
    pub func: FuncId,
    pub level: Level,
    pub kind: PlacementKind,
    pub extents: Vec<u64>,
    pub unrolled: bool,
    pub children: Vec<LoopNode>,
    pub staged_producers: Vec<FuncId>,
    /// Inlined funcs evaluated in this node's body (serial nodes only).
    pub inlined: Vec<FuncId>,
}

impl LoopNode {
    fn leaf(func: FuncId, level: Level, kind: PlacementKind, extents: Vec<u64>) -> Self {
        LoopNode {
            func,
            level,
            kind,
            extents,
            unrolled: false,
            children: Vec::new(),
            staged_producers: Vec::new(),
            inlined: Vec::new(),
        }
    }

    fn hash_at(&self, remaining: usize) -> u64 {
        let mut h = mix(0x9e37_79b9_7f4a_7c15, self.func.0 as u64);
        h = mix(h, self.level as u64 + 1);
        h = mix(h, self.kind as u64 + 11);
        let mut inl: Vec<u64> = self.inlined.iter().map(|f| f.0 as u64).collect();
        inl.sort_unstable();
        for f in inl {
            h = mix(h, f ^ 0x5555);
        }
        if remaining > 0 {
            let mut kids: Vec<u64> = self.children.iter().map(|c| c.hash_at(remaining - 1)).collect();
            kids.sort_unstable();
            h = mix(h, kids.len() as u64);
            for k in kids {
                h = mix(h, k);
            }
        }
        h
    }

    /// Depth-first walk over this node and its descendants.
    pub fn walk<'a>(&'a self, out: &mut Vec<&'a LoopNode>) {
        out.push(self);
        for c in &self.children {
            c.walk(out);
        }
    }
}

/// Structural hash of a state truncated at a nesting depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StructuralHash {
    pub value: u64,
    pub depth: usize,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn mix(h: u64, v: u64) -> u64 {
    splitmix(h ^ splitmix(v))
}

/// Tiling used to evaluate a root func before its own tiling phase.
pub fn provisional_tiling(extents: &[u64]) -> (Vec<u64>, Vec<u64>) {
    let inner = innermost_dim(extents);
    let mut thread = vec![1u64; extents.len()];
    thread[inner] = extents[inner].min(32);
    if let Some(other) = (0..extents.len()).find(|&d| d != inner) {
        thread[other] = extents[other].min(8);
    }
    (vec![1; extents.len()], thread)
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Geometry of one non-inlined scheduled func in the representative block
/// (block index 0 of its kernel).
#[derive(Debug, Clone, PartialEq)]
pub struct FuncGeometry {
    pub kernel: usize,
    pub location: Location,
    /// Func whose threads execute this one (itself unless fused at thread).
    pub owner: FuncId,
    /// Thread extents of the owner.
    pub threads: Vec<u64>,
    /// Points computed by one thread, per dim of this func. For funcs fused
    /// at thread level this is the region of thread 0.
    pub serial: Vec<u64>,
    /// Box computed per realization in block 0.
    pub realization: Region,
    /// Accesses per stage, with inlined producers substituted.
    pub effective: Vec<Vec<AccessPattern>>,
    /// Inlined funcs evaluated inside this func's loops.
    pub inlined_producers: Vec<FuncId>,
    pub unrolled: bool,
}

impl FuncGeometry {
    pub fn points_per_thread(&self) -> u64 {
        self.serial.iter().product()
    }

    pub fn threads_per_block(&self) -> u64 {
        self.threads.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelGeometry {
    pub root: FuncId,
    pub block_counts: Vec<u64>,
    pub num_blocks: u64,
    /// Per-dim maximum of the thread extents of all block-level funcs.
    pub block_shape: Vec<u64>,
    /// Funcs computed at the block level: the root and everything fused at block.
    pub members: Vec<FuncId>,
    /// Funcs fused at the thread level of some member.
    pub thread_members: Vec<FuncId>,
    pub shared_bytes: u64,
}

impl KernelGeometry {
    pub fn threads_per_block(&self) -> u64 {
        self.block_shape.iter().product()
    }
}

/// Derived geometry of a (possibly partial) schedule.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Geometry {
    pub funcs: Vec<Option<FuncGeometry>>,
    pub kernels: Vec<KernelGeometry>,
    /// Evaluations of each inlined func; zero for everything else.
    pub inline_evaluations: Vec<f64>,
    /// Kernel hosting each inlined func (via its first effective consumer).
    pub inline_host: Vec<Option<usize>>,
}

impl Geometry {
    pub fn func(&self, f: FuncId) -> Option<&FuncGeometry> {
        self.funcs[f.0].as_ref()
    }

    pub fn kernel_of(&self, f: FuncId) -> Option<&KernelGeometry> {
        self.funcs[f.0].as_ref().map(|g| &self.kernels[g.kernel])
    }

    /// Total loop iterations of one stage of `f` over the whole pipeline.
    pub fn loop_points(&self, f: FuncId) -> f64 {
        match &self.funcs[f.0] {
            Some(g) => {
                self.kernels[g.kernel].num_blocks as f64 * g.threads_per_block() as f64 * g.points_per_thread() as f64
            }
            None => self.inline_evaluations[f.0],
        }
    }

    /// Points computed by the thread with coordinates `tid` (in its owner's
    /// thread space) of block 0.
    pub fn thread_points(&self, graph: &PipelineGraph, f: FuncId, tid: &[u64]) -> Region {
        let g = self.funcs[f.0].as_ref().expect("thread_points on a func without loops");
        match g.location {
            Location::AtThread(c) => {
                let cbox = self.thread_points(graph, c, tid);
                let cg = self.funcs[c.0].as_ref().expect("consumer geometry");
                region_read(&cg.effective, f, &cbox, graph.func(f).rank())
            }
            _ => g
                .realization
                .iter()
                .zip(&g.serial)
                .enumerate()
                .map(|(d, (r, &s))| Interval::with_extent(r.lo + tid.get(d).copied().unwrap_or(0) as i64 * s as i64, s))
                .collect(),
        }
    }
}

/// Bounding box of `producer` read by all `effective` accesses over `points`.
pub fn region_read(effective: &[Vec<AccessPattern>], producer: FuncId, points: &[Interval], rank: usize) -> Region {
    let mut out: Option<Region> = None;
    for stage in effective {
        for a in stage.iter().filter(|a| a.producer == producer) {
            let r = required_region(points, a);
            out = Some(match out {
                Some(o) => region_union(&o, &r),
                None => r,
            });
        }
    }
    out.unwrap_or_else(|| vec![Interval::new(0, -1); rank])
}

/// Partially or fully scheduled loop nest.
#[derive(Debug, Clone)]
pub struct LoopNestState {
    schedules: Vec<Option<FuncSchedule>>,
    roots: Vec<LoopNode>,
    frozen: BTreeSet<FuncId>,
    frozen_decisions: BTreeMap<FuncId, Vec<Decision>>,
    decisions: Vec<(FuncId, Decision)>,
    cost: Option<f64>,
    lowered: bool,
    hashes: [u64; HASH_DEPTHS],
    /// Geometry of block 0, kept in step with `schedules` and `lowered`.
    geo: Arc<Geometry>,
}

impl PartialEq for LoopNestState {
    fn eq(&self, other: &Self) -> bool {
        self.schedules == other.schedules && self.frozen == other.frozen && self.lowered == other.lowered
    }
}

impl LoopNestState {
    pub fn new(graph: &PipelineGraph) -> Self {
        let mut s = LoopNestState {
            schedules: vec![None; graph.funcs.len()],
            roots: Vec::new(),
            frozen: BTreeSet::new(),
            frozen_decisions: BTreeMap::new(),
            decisions: Vec::new(),
            cost: None,
            lowered: false,
            hashes: [0; HASH_DEPTHS],
            geo: Arc::new(Geometry::default()),
        };
        s.rebuild(graph);
        s
    }

    pub fn schedule(&self, f: FuncId) -> Option<&FuncSchedule> {
        self.schedules[f.0].as_ref()
    }

    pub fn placement(&self, f: FuncId) -> Option<Placement> {
        self.schedules[f.0].as_ref().map(|s| s.placement)
    }

    pub fn location(&self, f: FuncId) -> Option<Location> {
        self.placement(f).map(|p| p.location)
    }

    pub fn is_inlined(&self, f: FuncId) -> bool {
        self.location(f) == Some(Location::Inlined)
    }

    pub fn roots(&self) -> &[LoopNode] {
        &self.roots
    }

    pub fn decisions(&self) -> &[(FuncId, Decision)] {
        &self.decisions
    }

    pub fn decisions_for(&self, f: FuncId) -> Vec<Decision> {
        self.decisions.iter().filter(|(g, _)| *g == f).map(|(_, d)| d.clone()).collect()
    }

    pub fn frozen(&self) -> &BTreeSet<FuncId> {
        &self.frozen
    }

    pub fn frozen_decisions(&self, f: FuncId) -> Option<&[Decision]> {
        self.frozen_decisions.get(&f).map(Vec::as_slice)
    }

    pub fn cost(&self) -> Option<f64> {
        self.cost
    }

    pub fn with_cost(mut self, cost: f64) -> Self {
        self.cost = Some(cost);
        self
    }

    pub fn is_lowered(&self) -> bool {
        self.lowered
    }

    /// Marks funcs as frozen to the given decision sequences. Funcs already
    /// placed must have matching decisions.
    pub fn with_frozen(mut self, frozen: BTreeMap<FuncId, Vec<Decision>>) -> Self {
        for (f, ds) in frozen {
            self.frozen.insert(f);
            self.frozen_decisions.insert(f, ds);
        }
        self
    }

    pub fn is_fully_scheduled(&self, graph: &PipelineGraph) -> bool {
        graph
            .scheduled_funcs()
            .all(|f| self.schedules[f.id.0].as_ref().is_some_and(FuncSchedule::is_complete))
    }

    pub fn unscheduled(&self, graph: &PipelineGraph) -> Vec<FuncId> {
        graph
            .scheduled_funcs()
            .filter(|f| !self.schedules[f.id.0].as_ref().is_some_and(FuncSchedule::is_complete))
            .map(|f| f.id)
            .collect()
    }

    /// Non-inlined funcs that consume `f`, looking through inlined consumers.
    /// `None` if some consumer has not been placed yet.
    pub fn effective_consumers(&self, graph: &PipelineGraph, f: FuncId) -> Option<Vec<FuncId>> {
        let mut out = Vec::new();
        for c in graph.consumers(f) {
            match self.location(c)? {
                Location::Inlined => out.extend(self.effective_consumers(graph, c)?),
                _ => out.push(c),
            }
        }
        out.sort();
        out.dedup();
        Some(out)
    }

    /// Serial and thread tiling in effect for `f`, provisional for a root
    /// func that has not been tiled yet.
    pub fn effective_tiling(&self, graph: &PipelineGraph, f: FuncId) -> Option<(Vec<u64>, Vec<u64>)> {
        let s = self.schedules[f.0].as_ref()?;
        match s.placement.location {
            Location::Root => match (&s.serial, &s.thread) {
                (Some(se), Some(th)) => Some((se.clone(), th.clone())),
                (Some(se), None) => {
                    let post: Vec<u64> =
                        graph.func(f).extents().iter().zip(se).map(|(&e, &s)| ceil_div(e, s)).collect();
                    Some((se.clone(), provisional_tiling(&post).1))
                }
                _ => Some(provisional_tiling(&graph.func(f).extents())),
            },
            Location::AtBlock(_) => Some((s.serial.clone().unwrap_or_else(|| vec![1; graph.func(f).rank()]), Vec::new())),
            _ => None,
        }
    }

    /// Applies one scheduling decision, returning the new state.
    pub fn apply(&self, graph: &PipelineGraph, func: FuncId, decision: Decision) -> Result<LoopNestState, ScheduleError> {
        let name = || graph.func(func).name.clone();
        let node = graph.func(func);
        if node.is_external_input {
            return Err(ScheduleError::IllegalPlacement { func: name(), reason: "external inputs are not scheduled".into() });
        }
        if let Some(expected) = self.frozen_decisions.get(&func) {
            let applied = self.decisions.iter().filter(|(f, _)| *f == func).count();
            if expected.get(applied) != Some(&decision) {
                return Err(ScheduleError::Frozen(name()));
            }
        }
        let mut next = self.clone();
        match &decision {
            Decision::ComputeRoot | Decision::FuseAtBlock(_) | Decision::FuseAtThread(_) | Decision::Inline => {
                if self.schedules[func.0].is_some() {
                    return Err(ScheduleError::AlreadyScheduled(name()));
                }
                let location = self.check_placement(graph, func, &decision)?;
                next.schedules[func.0] = Some(FuncSchedule { placement: Placement::new(location), serial: None, thread: None });
            }
            Decision::TileSerial(ext) | Decision::TileThread(ext) => {
                let bad = |reason: &str| ScheduleError::IllegalTiling { func: name(), reason: reason.into() };
                let sched = next.schedules[func.0].as_mut().ok_or_else(|| bad("func is not placed yet"))?;
                if ext.len() != node.rank() {
                    return Err(bad("tile rank differs from func rank"));
                }
                if ext.iter().any(|&e| e == 0) {
                    return Err(bad("tile extents must be positive"));
                }
                let is_serial = matches!(decision, Decision::TileSerial(_));
                match (sched.placement.location, is_serial) {
                    (Location::Inlined, _) => return Err(bad("inlined funcs have no loops to tile")),
                    (Location::AtThread(_), _) => return Err(bad("funcs fused at thread level are not tiled")),
                    (Location::AtBlock(_), false) => {
                        return Err(bad("funcs fused at block level only take a serial tiling"))
                    }
                    (_, true) if sched.serial.is_some() => return Err(bad("serial tiling already chosen")),
                    (Location::Root, false) if sched.serial.is_none() => {
                        return Err(bad("serial tiling must be chosen before thread tiling"))
                    }
                    (Location::Root, false) if sched.thread.is_some() => {
                        return Err(bad("thread tiling already chosen"))
                    }
                    _ => {}
                }
                if is_serial {
                    sched.serial = Some(ext.clone());
                } else {
                    sched.thread = Some(ext.clone());
                }
            }
        }
        next.decisions.push((func, decision));
        next.cost = None;
        next.lowered = false;
        next.rebuild(graph);
        Ok(next)
    }

    fn check_placement(&self, graph: &PipelineGraph, func: FuncId, decision: &Decision) -> Result<Location, ScheduleError> {
        let illegal = |reason: String| ScheduleError::IllegalPlacement { func: graph.func(func).name.clone(), reason };
        match decision {
            Decision::ComputeRoot => Ok(Location::Root),
            Decision::Inline => {
                if graph.is_output(func) {
                    return Err(illegal("outputs cannot be inlined".into()));
                }
                if graph.func(func).stages.len() != 1 {
                    return Err(illegal("only single-stage funcs can be inlined".into()));
                }
                if self.effective_consumers(graph, func).is_none() {
                    return Err(illegal("all consumers must be placed before inlining".into()));
                }
                Ok(Location::Inlined)
            }
            Decision::FuseAtBlock(c) | Decision::FuseAtThread(c) => {
                let at_block = matches!(decision, Decision::FuseAtBlock(_));
                if graph.is_output(func) {
                    return Err(illegal("outputs must be computed at root".into()));
                }
                let consumers = self
                    .effective_consumers(graph, func)
                    .ok_or_else(|| illegal("all consumers must be placed before fusing".into()))?;
                if consumers != [*c] {
                    return Err(illegal(format!(
                        "`{}` is not the only consumer",
                        graph.funcs.get(c.0).map_or("?", |f| f.name.as_str())
                    )));
                }
                let cs = self.schedules[c.0].as_ref().expect("consumer placed");
                match cs.placement.location {
                    Location::Root => {}
                    Location::AtBlock(_) if cs.serial.is_some() => {}
                    _ => return Err(illegal("consumer has no block or thread loops to fuse into".into())),
                }
                if at_block && !(cs.serial.is_some() && (cs.thread.is_some() || cs.placement.location != Location::Root)) {
                    return Err(illegal("consumer must be tiled before fusing at its block level".into()));
                }
                Ok(if at_block { Location::AtBlock(*c) } else { Location::AtThread(*c) })
            }
            _ => unreachable!("tiling decisions are not placements"),
        }
    }

    /// Geometry of every placed func in the representative block.
    pub fn geometry(&self, _graph: &PipelineGraph) -> Arc<Geometry> {
        Arc::clone(&self.geo)
    }

    /// Geometry for an arbitrary block index per kernel root (`None` = block 0).
    pub(crate) fn geometry_with_origin(&self, graph: &PipelineGraph, block: Option<&BTreeMap<FuncId, Vec<u64>>>) -> Geometry {
        let n = graph.funcs.len();
        let mut funcs: Vec<Option<FuncGeometry>> = vec![None; n];
        let mut kernels: Vec<KernelGeometry> = Vec::new();
        let mut kernel_index: BTreeMap<FuncId, usize> = BTreeMap::new();

        let effective_of = |f: FuncId| -> (Vec<Vec<AccessPattern>>, Vec<FuncId>) {
            let mut inlined = BTreeSet::new();
            let eff = graph
                .func(f)
                .stages
                .iter()
                .map(|s| {
                    let mut out = Vec::new();
                    for a in &s.accesses {
                        self.substitute_inlined(graph, a, &mut out, &mut inlined);
                    }
                    out
                })
                .collect();
            (eff, inlined.into_iter().collect())
        };

        // Consumers have larger ids, so a descending walk sees each consumer first.
        for id in (0..n).rev() {
            let f = FuncId(id);
            let Some(sched) = self.schedules[id].as_ref() else { continue };
            let node = graph.func(f);
            let (effective, inlined_producers) = effective_of(f);
            let geom = match sched.placement.location {
                Location::Inlined => continue,
                Location::Root => {
                    let (serial, thread) = self.effective_tiling(graph, f).expect("root tiling");
                    let counts: Vec<u64> = node
                        .extents()
                        .iter()
                        .zip(serial.iter().zip(&thread))
                        .map(|(&e, (&s, &t))| ceil_div(e, s * t))
                        .collect();
                    let origin = block.and_then(|b| b.get(&f)).cloned().unwrap_or_else(|| vec![0; node.rank()]);
                    let realization = (0..node.rank())
                        .map(|d| {
                            let tile = serial[d] * thread[d];
                            Interval::with_extent((origin[d] * tile) as i64, tile)
                        })
                        .collect();
                    kernel_index.insert(f, kernels.len());
                    kernels.push(KernelGeometry {
                        root: f,
                        num_blocks: counts.iter().product(),
                        block_counts: counts,
                        block_shape: Vec::new(),
                        members: vec![f],
                        thread_members: Vec::new(),
                        shared_bytes: 0,
                    });
                    FuncGeometry {
                        kernel: kernels.len() - 1,
                        location: Location::Root,
                        owner: f,
                        threads: thread,
                        serial,
                        realization,
                        effective,
                        inlined_producers,
                        unrolled: false,
                    }
                }
                Location::AtBlock(c) => {
                    let cg = funcs[c.0].as_ref().expect("consumer geometry precedes producer");
                    let region = region_read(&cg.effective, f, &cg.realization, node.rank());
                    let serial = self.effective_tiling(graph, f).expect("block tiling").0;
                    let thread: Vec<u64> = region.iter().zip(&serial).map(|(r, &s)| ceil_div(r.extent().max(1), s)).collect();
                    let realization =
                        region.iter().zip(serial.iter().zip(&thread)).map(|(r, (&s, &t))| Interval::with_extent(r.lo, s * t)).collect();
                    let kernel = cg.kernel;
                    kernels[kernel].members.push(f);
                    FuncGeometry {
                        kernel,
                        location: Location::AtBlock(c),
                        owner: f,
                        threads: thread,
                        serial,
                        realization,
                        effective,
                        inlined_producers,
                        unrolled: false,
                    }
                }
                Location::AtThread(c) => {
                    let cg = funcs[c.0].as_ref().expect("consumer geometry precedes producer");
                    let tid0 = vec![0u64; cg.threads.len()];
                    let cbox: Region = cg
                        .realization
                        .iter()
                        .zip(&cg.serial)
                        .enumerate()
                        .map(|(d, (r, &s))| Interval::with_extent(r.lo + tid0.get(d).copied().unwrap_or(0) as i64, s))
                        .collect();
                    let region = region_read(&cg.effective, f, &cbox, node.rank());
                    let kernel = cg.kernel;
                    kernels[kernel].thread_members.push(f);
                    FuncGeometry {
                        kernel,
                        location: Location::AtThread(c),
                        owner: cg.owner,
                        threads: cg.threads.clone(),
                        serial: region.iter().map(Interval::extent).collect(),
                        realization: region,
                        effective,
                        inlined_producers,
                        unrolled: false,
                    }
                }
            };
            funcs[id] = Some(geom);
        }

        for (fi, g) in funcs.iter_mut().enumerate() {
            if let Some(g) = g {
                g.unrolled = self.lowered && g.points_per_thread() < UNROLL_LIMIT;
                if let Location::AtBlock(_) = g.location {
                    let bytes = region_points(&g.realization) * graph.funcs[fi].elem_bytes as u64;
                    kernels[g.kernel].shared_bytes += bytes;
                }
            }
        }
        for k in &mut kernels {
            let rank = k.members.iter().map(|m| graph.func(*m).rank()).max().unwrap_or(1);
            let mut shape = vec![1u64; rank];
            for m in &k.members {
                for (d, &t) in funcs[m.0].as_ref().unwrap().threads.iter().enumerate() {
                    shape[d] = shape[d].max(t);
                }
            }
            k.block_shape = shape;
            k.members.sort();
            k.thread_members.sort();
        }

        // Inlined evaluation counts, consumers first.
        let mut inline_evaluations = vec![0.0; n];
        let mut inline_host = vec![None; n];
        for id in (0..n).rev() {
            if !self.is_inlined(FuncId(id)) {
                continue;
            }
            let mut evals = 0.0;
            for u in graph.uses_of(FuncId(id)) {
                let taps = graph.access(*u).taps() as f64;
                let per = match &funcs[u.consumer.0] {
                    Some(cg) => {
                        inline_host[id] = inline_host[id].or(Some(cg.kernel));
                        kernels[cg.kernel].num_blocks as f64 * cg.threads_per_block() as f64 * cg.points_per_thread() as f64
                    }
                    None => {
                        inline_host[id] = inline_host[id].or(inline_host[u.consumer.0]);
                        inline_evaluations[u.consumer.0]
                    }
                };
                evals += per * taps;
            }
            inline_evaluations[id] = evals;
        }

        Geometry { funcs, kernels, inline_evaluations, inline_host }
    }

    fn substitute_inlined(
        &self,
        graph: &PipelineGraph,
        access: &AccessPattern,
        out: &mut Vec<AccessPattern>,
        inlined: &mut BTreeSet<FuncId>,
    ) {
        if self.is_inlined(access.producer) {
            inlined.insert(access.producer);
            for inner in &graph.func(access.producer).stages[0].accesses {
                self.substitute_inlined(graph, &access.compose(inner), out, inlined);
            }
        } else {
            out.push(access.clone());
        }
    }

    fn rebuild(&mut self, graph: &PipelineGraph) {
        self.geo = Arc::new(self.geometry_with_origin(graph, None));
        let geo = Arc::clone(&self.geo);
        let mut roots = Vec::new();
        let mut by_kernel: Vec<&KernelGeometry> = geo.kernels.iter().collect();
        by_kernel.sort_by_key(|k| k.root);
        for k in by_kernel {
            let mut block = LoopNode::leaf(k.root, Level::Block, PlacementKind::Root, k.block_counts.clone());
            for &m in &k.members {
                let mg = geo.func(m).unwrap();
                let mut thread = LoopNode::leaf(m, Level::Thread, mg.location.kind(), mg.threads.clone());
                for &q in &k.thread_members {
                    let qg = geo.func(q).unwrap();
                    if qg.location == Location::AtThread(m) {
                        let mut s = LoopNode::leaf(q, Level::Serial, PlacementKind::AtThread, qg.serial.clone());
                        s.inlined = qg.inlined_producers.clone();
                        s.unrolled = qg.unrolled;
                        thread.children.push(s);
                    }
                }
                let mut own = LoopNode::leaf(m, Level::Serial, mg.location.kind(), mg.serial.clone());
                own.inlined = mg.inlined_producers.clone();
                own.unrolled = mg.unrolled;
                thread.children.push(own);
                if self.lowered {
                    let mut staged = BTreeSet::new();
                    for f in std::iter::once(m).chain(k.thread_members.iter().copied().filter(|q| geo.func(*q).unwrap().location == Location::AtThread(m))) {
                        for s in &graph.func(f).stages {
                            for a in &s.accesses {
                                if a.producer != f && self.location(a.producer).map(|l| l.tier()) != Some(MemoryTier::Register) {
                                    staged.insert(a.producer);
                                }
                            }
                        }
                    }
                    thread.staged_producers = staged.into_iter().collect();
                }
                block.children.push(thread);
            }
            roots.push(block);
        }
        self.roots = roots;
        let mut hashes = [0u64; HASH_DEPTHS];
        for (d, h) in hashes.iter_mut().enumerate() {
            let mut per_root: Vec<u64> = self.roots.iter().map(|r| r.hash_at(d)).collect();
            per_root.sort_unstable();
            let mut acc = mix(0x1234_5678, per_root.len() as u64);
            for r in per_root {
                acc = mix(acc, r);
            }
            *h = acc;
        }
        self.hashes = hashes;
    }

    /// Hash of the loop-nest structure down to `depth` levels below the
    /// kernel roots. Tile extents never contribute.
    pub fn structural_hash(&self, depth: usize) -> u64 {
        self.hashes[depth.min(HASH_DEPTHS - 1)]
    }

    /// Marks small serial loops unrolled and records register staging of
    /// producers at thread level. Requires a complete schedule.
    pub fn lower(&self, graph: &PipelineGraph) -> Result<LoopNestState, ScheduleError> {
        let missing = self.unscheduled(graph);
        if !missing.is_empty() {
            return Err(ScheduleError::Unscheduled(missing.iter().map(|f| graph.func(*f).name.clone()).collect()));
        }
        Ok(self.lower_partial(graph))
    }

    /// Like [`lower`](Self::lower) but accepts partial schedules; untiled root
    /// funcs use their provisional tiling.
    pub fn lower_partial(&self, graph: &PipelineGraph) -> LoopNestState {
        if self.lowered {
            return self.clone();
        }
        let mut next = self.clone();
        next.lowered = true;
        next.rebuild(graph);
        next
    }

    /// Ordered decision list, one `func decision [args]` per line.
    pub fn dump(&self, graph: &PipelineGraph) -> String {
        let mut out = String::new();
        for (f, d) in &self.decisions {
            let name = &graph.func(*f).name;
            let list = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
            let _ = match d {
                Decision::ComputeRoot => writeln!(out, "{name} compute_root"),
                Decision::Inline => writeln!(out, "{name} inline"),
                Decision::FuseAtBlock(c) => writeln!(out, "{name} fuse_at_block {}", graph.func(*c).name),
                Decision::FuseAtThread(c) => writeln!(out, "{name} fuse_at_thread {}", graph.func(*c).name),
                Decision::TileSerial(v) => writeln!(out, "{name} tile_serial {}", list(v)),
                Decision::TileThread(v) => writeln!(out, "{name} tile_thread {}", list(v)),
            };
        }
        out
    }

    /// Replays a decision list produced by [`dump`](Self::dump).
    pub fn replay(graph: &PipelineGraph, text: &str) -> Result<LoopNestState, ScheduleError> {
        let mut state = LoopNestState::new(graph);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| ScheduleError::Dump { line: i + 1, msg };
            let words: Vec<&str> = line.split_whitespace().collect();
            let func = graph.func_by_name(words[0]).ok_or_else(|| bad(format!("unknown func `{}`", words[0])))?;
            let arg = || words.get(2).copied().ok_or_else(|| bad("missing argument".into()));
            let list = |s: &str| -> Result<Vec<u64>, ScheduleError> {
                s.split(',').map(|v| v.parse().map_err(|_| bad(format!("bad extent `{v}`")))).collect()
            };
            let consumer = |s: &str| graph.func_by_name(s).ok_or_else(|| bad(format!("unknown func `{s}`")));
            let decision = match words.get(1).copied() {
                Some("compute_root") => Decision::ComputeRoot,
                Some("inline") => Decision::Inline,
                Some("fuse_at_block") => Decision::FuseAtBlock(consumer(arg()?)?),
                Some("fuse_at_thread") => Decision::FuseAtThread(consumer(arg()?)?),
                Some("tile_serial") => Decision::TileSerial(list(arg()?)?),
                Some("tile_thread") => Decision::TileThread(list(arg()?)?),
                other => return Err(bad(format!("unknown decision `{}`", other.unwrap_or("")))),
            };
            state = state.apply(graph, func, decision)?;
        }
        Ok(state)
    }

    /// Human-readable loop nest in `for x, y in ... @blocks` style.
    pub fn pretty(&self, graph: &PipelineGraph) -> String {
        let mut out = String::new();
        for root in &self.roots {
            let names = |f: FuncId| graph.func(f).dims.iter().map(|d| d.name.clone()).collect::<Vec<_>>().join(", ");
            let ext = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(", ");
            let _ = writeln!(out, "allocate {}", graph.func(root.func).name);
            let _ = writeln!(out, "for {} in {} @blocks", names(root.func), ext(&root.extents));
            for thread in &root.children {
                if thread.kind == PlacementKind::AtBlock {
                    let _ = writeln!(out, " allocate {} @shared_mem", graph.func(thread.func).name);
                }
                let _ = writeln!(out, " for {} in {} @threads", names(thread.func), ext(&thread.extents));
                for s in &thread.staged_producers {
                    let _ = writeln!(out, "  stage {} @registers", graph.func(*s).name);
                }
                for serial in &thread.children {
                    if serial.kind == PlacementKind::AtThread {
                        let _ = writeln!(out, "  allocate {} @registers", graph.func(serial.func).name);
                    }
                    let unroll = if serial.unrolled { ", unrolled" } else { "" };
                    let _ = writeln!(out, "  for {} in {} @serial{unroll}", names(serial.func), ext(&serial.extents));
                    for i in &serial.inlined {
                        let _ = writeln!(out, "   inline {}", graph.func(*i).name);
                    }
                    let _ = writeln!(out, "   compute {}", graph.func(serial.func).name);
                }
            }
        }
        out
    }

    /// In-domain points computed for `f` summed over every realization in
    /// every block, counting points recomputed by overlapping realizations
    /// once per realization. Walks all blocks, so meant for small pipelines.
    pub fn points_computed(&self, graph: &PipelineGraph, f: FuncId) -> u64 {
        let geo = self.geometry(graph);
        let Some(fg) = geo.func(f) else { return 0 };
        let kernel = &geo.kernels[fg.kernel];
        let domain = graph.func(f).domain();
        let clip = |r: &Region| -> u64 { r.iter().zip(&domain).map(|(a, b)| a.intersect(b).extent()).product() };
        if fg.location == Location::Root {
            let whole: Region = (0..domain.len())
                .map(|d| Interval::with_extent(0, kernel.block_counts[d] * fg.serial[d] * fg.threads[d]))
                .collect();
            return clip(&whole);
        }
        let mut total = 0;
        for block in grid(&kernel.block_counts) {
            let mut origin = BTreeMap::new();
            origin.insert(kernel.root, block);
            let bg = self.geometry_with_origin(graph, Some(&origin));
            let g = bg.func(f).unwrap();
            match g.location {
                Location::AtThread(_) => {
                    let owner = bg.func(g.owner).unwrap();
                    for tid in grid(&owner.threads) {
                        total += clip(&bg.thread_points(graph, f, &tid));
                    }
                }
                _ => total += clip(&g.realization),
            }
        }
        total
    }
}

/// All index vectors of a grid with the given per-dim counts, dim 0 fastest.
pub fn grid(counts: &[u64]) -> Vec<Vec<u64>> {
    let total: u64 = counts.iter().product();
    let mut out = Vec::with_capacity(total as usize);
    for mut lin in 0..total {
        let mut v = Vec::with_capacity(counts.len());
        for &c in counts {
            v.push(lin % c);
            lin /= c;
        }
        out.push(v);
    }
    out
}
