//! Algorithm representation: a DAG of funcs with affine stencil accesses.
//!
//! Every access maps each producer dimension to one consumer dimension with a
//! stride and an inclusive offset range, so the set of producer points read by
//! a box of consumer points is again a box. All bounds analysis here is plain
//! interval arithmetic on inclusive integer intervals.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

/// Index of a func inside a [`PipelineGraph`]. Funcs are stored in
/// topological order, so a producer always has a smaller id than its
/// consumers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FuncId(pub usize);

impl fmt::Display for FuncId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PipelineError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: func `{func}` reads unknown producer `{producer}`")]
    UnknownProducer { line: usize, func: String, producer: String },
    #[error("line {line}: func `{func}` dimension `{dim}` has non-positive extent {extent}")]
    NonPositiveExtent { line: usize, func: String, dim: String, extent: i64 },
    #[error("cycle detected through funcs: {}", funcs.join(" -> "))]
    Cycle { funcs: Vec<String> },
    #[error("{0}")]
    Invalid(String),
}

/// Inclusive integer interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Interval {
    pub lo: i64,
    pub hi: i64,
}

impl Interval {
    pub fn new(lo: i64, hi: i64) -> Self {
        Self { lo, hi }
    }

    /// Interval `[start, start + extent - 1]`.
    pub fn with_extent(start: i64, extent: u64) -> Self {
        Self { lo: start, hi: start + extent as i64 - 1 }
    }

    pub fn extent(&self) -> u64 {
        if self.hi < self.lo {
            0
        } else {
            (self.hi - self.lo + 1) as u64
        }
    }

    pub fn is_empty(&self) -> bool {
        self.hi < self.lo
    }

    pub fn union(&self, other: &Interval) -> Interval {
        Interval { lo: self.lo.min(other.lo), hi: self.hi.max(other.hi) }
    }

    pub fn intersect(&self, other: &Interval) -> Interval {
        Interval { lo: self.lo.max(other.lo), hi: self.hi.min(other.hi) }
    }

    pub fn contains(&self, other: &Interval) -> bool {
        other.is_empty() || (self.lo <= other.lo && other.hi <= self.hi)
    }
}

/// Axis-aligned box of integer points, one interval per dimension.
pub type Region = Vec<Interval>;

/// Number of points in a region.
pub fn region_points(region: &[Interval]) -> u64 {
    region.iter().map(Interval::extent).product()
}

/// Bounding-box union of two regions of equal rank.
pub fn region_union(a: &[Interval], b: &[Interval]) -> Region {
    a.iter().zip(b).map(|(x, y)| x.union(y)).collect()
}

/// Arithmetic op classes counted per point in a stage's op histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpClass {
    Add,
    Mul,
    Div,
    MinMax,
    Transcendental,
    Cast,
    Compare,
}

impl OpClass {
    pub const ALL: [OpClass; 7] = [
        OpClass::Add,
        OpClass::Mul,
        OpClass::Div,
        OpClass::MinMax,
        OpClass::Transcendental,
        OpClass::Cast,
        OpClass::Compare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpClass::Add => "add",
            OpClass::Mul => "mul",
            OpClass::Div => "div",
            OpClass::MinMax => "minmax",
            OpClass::Transcendental => "transcendental",
            OpClass::Cast => "cast",
            OpClass::Compare => "compare",
        }
    }

    pub fn from_name(name: &str) -> Option<OpClass> {
        OpClass::ALL.into_iter().find(|op| op.name() == name).or(match name {
            "min" | "max" => Some(OpClass::MinMax),
            "sub" => Some(OpClass::Add),
            "exp" | "log" | "trans" => Some(OpClass::Transcendental),
            "cmp" => Some(OpClass::Compare),
            _ => None,
        })
    }
}

/// Per-point operation counts of one stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct OpHistogram(pub [u32; 7]);

impl OpHistogram {
    pub fn get(&self, op: OpClass) -> u32 {
        self.0[op as usize]
    }

    pub fn set(&mut self, op: OpClass, count: u32) {
        self.0[op as usize] = count;
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }
}

/// Expression-tree shape of a stage, used only for its Strahler number.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExprTree {
    pub children: Vec<ExprTree>,
}

impl ExprTree {
    pub fn leaf() -> Self {
        ExprTree { children: Vec::new() }
    }

    pub fn node(children: Vec<ExprTree>) -> Self {
        ExprTree { children }
    }

    /// Parses `x` (leaf) or `(a b ...)` (node). `()` is also a leaf.
    pub fn parse(text: &str) -> Result<ExprTree, String> {
        let tokens: Vec<char> = text.chars().collect();
        let mut pos = 0;
        let tree = Self::parse_at(&tokens, &mut pos)?;
        Self::skip_space(&tokens, &mut pos);
        if pos != tokens.len() {
            return Err(format!("trailing characters in expression tree `{text}`"));
        }
        Ok(tree)
    }

    fn skip_space(tokens: &[char], pos: &mut usize) {
        while tokens.get(*pos).is_some_and(|c| c.is_whitespace()) {
            *pos += 1;
        }
    }

    fn parse_at(tokens: &[char], pos: &mut usize) -> Result<ExprTree, String> {
        Self::skip_space(tokens, pos);
        match tokens.get(*pos) {
            Some('(') => {
                *pos += 1;
                let mut children = Vec::new();
                loop {
                    Self::skip_space(tokens, pos);
                    if tokens.get(*pos) == Some(&')') {
                        break;
                    }
                    if *pos >= tokens.len() {
                        return Err("unbalanced parentheses in expression tree".into());
                    }
                    children.push(Self::parse_at(tokens, pos)?);
                }
                *pos += 1;
                Ok(ExprTree { children })
            }
            Some(c) if c.is_alphanumeric() || *c == '_' => {
                while tokens.get(*pos).is_some_and(|c| c.is_alphanumeric() || *c == '_') {
                    *pos += 1;
                }
                Ok(ExprTree::leaf())
            }
            Some(c) => Err(format!("unexpected `{c}` in expression tree")),
            None => Err("empty expression tree".into()),
        }
    }
}

/// How one producer dimension is indexed by the consumer.
///
/// Producer coordinate = `stride * x[consumer_dim] + [lo, hi]`. With no
/// consumer dim (a broadcast) the coordinate range is just `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DimAccess {
    pub consumer_dim: Option<usize>,
    pub stride: i64,
    pub lo: i64,
    pub hi: i64,
}

impl DimAccess {
    pub fn apply(&self, consumer_box: &[Interval]) -> Interval {
        match self.consumer_dim {
            None => Interval::new(self.lo, self.hi),
            Some(d) => {
                let b = consumer_box[d];
                let (a, z) = if self.stride >= 0 {
                    (b.lo * self.stride, b.hi * self.stride)
                } else {
                    (b.hi * self.stride, b.lo * self.stride)
                };
                Interval::new(a + self.lo, z + self.hi)
            }
        }
    }

    pub fn taps(&self) -> u64 {
        (self.hi - self.lo + 1) as u64
    }

    /// Composes `self` (consumer -> mid) after `inner` (mid -> producer).
    fn then(&self, inner: &DimAccess) -> DimAccess {
        // inner maps a mid coordinate m to stride_i * m + [lo_i, hi_i], and m
        // itself ranges over stride_o * x + [lo_o, hi_o].
        let (mlo, mhi) = if inner.stride >= 0 {
            (self.lo * inner.stride, self.hi * inner.stride)
        } else {
            (self.hi * inner.stride, self.lo * inner.stride)
        };
        match inner.consumer_dim {
            None => *inner,
            Some(_) => DimAccess {
                consumer_dim: self.consumer_dim,
                stride: if self.consumer_dim.is_some() { self.stride * inner.stride } else { 0 },
                lo: mlo + inner.lo,
                hi: mhi + inner.hi,
            },
        }
    }
}

/// One read of a producer by a stage.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AccessPattern {
    pub producer: FuncId,
    /// One entry per producer dimension.
    pub dims: Vec<DimAccess>,
}

impl AccessPattern {
    /// Number of producer points read per consumer point.
    pub fn taps(&self) -> u64 {
        self.dims.iter().map(DimAccess::taps).product()
    }

    /// The access reached by reading `inner`'s producer through the func
    /// this access targets, i.e. what a consumer reads once that func is
    /// inlined.
    pub fn compose(&self, inner: &AccessPattern) -> AccessPattern {
        let dims = inner
            .dims
            .iter()
            .map(|i| match i.consumer_dim {
                None => *i,
                Some(mid) => self.dims[mid].then(i),
            })
            .collect();
        AccessPattern { producer: inner.producer, dims }
    }
}

/// Producer box read by `consumer_box` through `access`.
pub fn required_region(consumer_box: &[Interval], access: &AccessPattern) -> Region {
    access.dims.iter().map(|d| d.apply(consumer_box)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StageDef {
    pub accesses: Vec<AccessPattern>,
    pub ops: OpHistogram,
    pub expr_tree: Option<ExprTree>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Dim {
    pub name: String,
    pub extent: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FuncNode {
    pub id: FuncId,
    pub name: String,
    /// `dims[0]` is the innermost storage dimension.
    pub dims: Vec<Dim>,
    pub stages: Vec<StageDef>,
    pub elem_bytes: u32,
    pub is_external_input: bool,
}

impl FuncNode {
    pub fn extents(&self) -> Vec<u64> {
        self.dims.iter().map(|d| d.extent).collect()
    }

    pub fn domain(&self) -> Region {
        self.dims.iter().map(|d| Interval::with_extent(0, d.extent)).collect()
    }

    pub fn domain_size(&self) -> u64 {
        self.dims.iter().map(|d| d.extent).product()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }
}

/// A reference from a consumer stage to a producer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Use {
    pub consumer: FuncId,
    pub stage: usize,
    pub access: usize,
}

/// Validated, topologically ordered pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineGraph {
    pub name: String,
    pub funcs: Vec<FuncNode>,
    pub outputs: Vec<FuncId>,
    uses: Vec<Vec<Use>>,
}

impl PipelineGraph {
    /// Builds and validates a graph from funcs that may be in any order.
    pub fn new(name: &str, funcs: Vec<FuncNode>, outputs: Vec<FuncId>) -> Result<Self, PipelineError> {
        let n = funcs.len();
        for f in &funcs {
            if f.dims.is_empty() {
                return Err(PipelineError::Invalid(format!("func `{}` has no dimensions", f.name)));
            }
            if !matches!(f.elem_bytes, 1 | 2 | 4 | 8) {
                return Err(PipelineError::Invalid(format!(
                    "func `{}` has element size {} (expected 1, 2, 4 or 8)",
                    f.name, f.elem_bytes
                )));
            }
            for d in &f.dims {
                if d.extent == 0 {
                    return Err(PipelineError::NonPositiveExtent {
                        line: 0,
                        func: f.name.clone(),
                        dim: d.name.clone(),
                        extent: 0,
                    });
                }
            }
            if !f.is_external_input && f.stages.is_empty() {
                return Err(PipelineError::Invalid(format!("func `{}` has no stages", f.name)));
            }
            for (si, s) in f.stages.iter().enumerate() {
                for a in &s.accesses {
                    if a.producer.0 >= n {
                        return Err(PipelineError::Invalid(format!("func `{}` reads unknown func", f.name)));
                    }
                    if a.producer == f.id && si == 0 {
                        return Err(PipelineError::Cycle { funcs: vec![f.name.clone(), f.name.clone()] });
                    }
                    let p = &funcs[a.producer.0];
                    if a.dims.len() != p.dims.len() {
                        return Err(PipelineError::Invalid(format!(
                            "func `{}` reads `{}` with {} dims, producer has {}",
                            f.name,
                            p.name,
                            a.dims.len(),
                            p.dims.len()
                        )));
                    }
                    for d in &a.dims {
                        if d.lo > d.hi {
                            return Err(PipelineError::Invalid(format!(
                                "func `{}` reads `{}` with empty offset range {}..{}",
                                f.name, p.name, d.lo, d.hi
                            )));
                        }
                        if d.consumer_dim.is_some_and(|c| c >= f.dims.len()) {
                            return Err(PipelineError::Invalid(format!("func `{}` indexes a missing dim", f.name)));
                        }
                    }
                }
            }
        }
        if outputs.is_empty() {
            return Err(PipelineError::Invalid("pipeline declares no output".into()));
        }
        for o in &outputs {
            if funcs[o.0].is_external_input {
                return Err(PipelineError::Invalid(format!("output `{}` is an external input", funcs[o.0].name)));
            }
        }

        // Kahn's algorithm, preferring declaration order among ready funcs.
        let mut indegree = vec![0usize; n];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        for f in &funcs {
            let mut producers: Vec<usize> = f
                .stages
                .iter()
                .flat_map(|s| s.accesses.iter().map(|a| a.producer.0))
                .filter(|&p| p != f.id.0)
                .collect();
            producers.sort_unstable();
            producers.dedup();
            for p in producers {
                indegree[f.id.0] += 1;
                succ[p].push(f.id.0);
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &s in &succ[i] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() != n {
            let stuck: Vec<usize> = (0..n).filter(|&i| indegree[i] > 0).collect();
            let funcs_in_cycle = find_cycle(&stuck, &succ).into_iter().map(|i| funcs[i].name.clone()).collect();
            return Err(PipelineError::Cycle { funcs: funcs_in_cycle });
        }

        let mut remap = vec![0usize; n];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let mut sorted: Vec<FuncNode> = order.iter().map(|&old| funcs[old].clone()).collect();
        for (new, f) in sorted.iter_mut().enumerate() {
            f.id = FuncId(new);
            for s in &mut f.stages {
                for a in &mut s.accesses {
                    a.producer = FuncId(remap[a.producer.0]);
                }
            }
        }
        let mut outputs: Vec<FuncId> = outputs.into_iter().map(|o| FuncId(remap[o.0])).collect();
        outputs.sort();
        outputs.dedup();

        let mut uses = vec![Vec::new(); n];
        for f in &sorted {
            for (si, s) in f.stages.iter().enumerate() {
                for (ai, a) in s.accesses.iter().enumerate() {
                    if a.producer != f.id {
                        uses[a.producer.0].push(Use { consumer: f.id, stage: si, access: ai });
                    }
                }
            }
        }
        Ok(PipelineGraph { name: name.to_string(), funcs: sorted, outputs, uses })
    }

    pub fn func(&self, id: FuncId) -> &FuncNode {
        &self.funcs[id.0]
    }

    pub fn func_by_name(&self, name: &str) -> Option<FuncId> {
        self.funcs.iter().find(|f| f.name == name).map(|f| f.id)
    }

    pub fn is_output(&self, id: FuncId) -> bool {
        self.outputs.contains(&id)
    }

    /// Reads of `producer` by other funcs (self-reads of update stages excluded).
    pub fn uses_of(&self, producer: FuncId) -> &[Use] {
        &self.uses[producer.0]
    }

    /// Distinct consumers of `producer`, ascending.
    pub fn consumers(&self, producer: FuncId) -> Vec<FuncId> {
        let mut c: Vec<FuncId> = self.uses[producer.0].iter().map(|u| u.consumer).collect();
        c.sort();
        c.dedup();
        c
    }

    pub fn access(&self, u: Use) -> &AccessPattern {
        &self.funcs[u.consumer.0].stages[u.stage].accesses[u.access]
    }

    /// Non-input funcs from the outputs backwards: the scheduling order.
    pub fn schedule_order(&self) -> Vec<FuncId> {
        self.funcs.iter().rev().filter(|f| !f.is_external_input).map(|f| f.id).collect()
    }

    /// Funcs that need a schedule.
    pub fn scheduled_funcs(&self) -> impl Iterator<Item = &FuncNode> {
        self.funcs.iter().filter(|f| !f.is_external_input)
    }

    /// Copy of the graph with every extent multiplied by `factor`.
    pub fn with_scaled_extents(&self, factor: u64) -> PipelineGraph {
        let mut g = self.clone();
        for f in &mut g.funcs {
            for d in &mut f.dims {
                d.extent *= factor;
            }
        }
        g
    }
}

fn find_cycle(stuck: &[usize], succ: &[Vec<usize>]) -> Vec<usize> {
    // Walk successors inside the stuck set until a node repeats.
    let in_stuck = |i: usize| stuck.contains(&i);
    let Some(&start) = stuck.first() else { return Vec::new() };
    let mut path = vec![start];
    let mut cur = start;
    loop {
        let Some(&next) = succ[cur].iter().find(|&&s| in_stuck(s)) else { return path };
        if let Some(pos) = path.iter().position(|&p| p == next) {
            let mut cycle = path[pos..].to_vec();
            cycle.push(next);
            return cycle;
        }
        path.push(next);
        cur = next;
    }
}

/// Producer regions needed to compute one `tile` of `consumer`, starting at
/// the origin, for every func upstream of it (the consumer included).
pub fn footprint_at(graph: &PipelineGraph, consumer: FuncId, tile: &[u64]) -> BTreeMap<FuncId, Region> {
    let mut regions: BTreeMap<FuncId, Region> = BTreeMap::new();
    regions.insert(consumer, tile.iter().map(|&e| Interval::with_extent(0, e)).collect());
    // Consumers have larger ids, so walking downwards visits every consumer
    // of a func before the func itself.
    for id in (0..=consumer.0).rev() {
        let Some(region) = regions.get(&FuncId(id)).cloned() else { continue };
        for stage in &graph.funcs[id].stages {
            for a in &stage.accesses {
                if a.producer.0 == id {
                    continue;
                }
                let need = required_region(&region, a);
                regions
                    .entry(a.producer)
                    .and_modify(|r| *r = region_union(r, &need))
                    .or_insert(need);
            }
        }
    }
    regions
}

/// Parses the line-oriented pipeline description format.
///
/// ```text
/// pipeline blur
/// input in dims (x=64,y=64) bytes 4
/// func blur dims (x=64,y=64) bytes 4
/// stage blur ops add=2
/// read blur from in dim x stride 1 lo -1 hi 1 dim y stride 1 lo 0 hi 0
/// output blur
/// ```
pub fn parse_pipeline(text: &str) -> Result<PipelineGraph, PipelineError> {
    struct PendingRead {
        line: usize,
        consumer: usize,
        stage: usize,
        producer: String,
        dims: Vec<(String, i64, i64, i64)>,
    }

    let mut name = String::from("pipeline");
    let mut funcs: Vec<FuncNode> = Vec::new();
    let mut by_name: HashMap<String, usize> = HashMap::new();
    let mut reads: Vec<PendingRead> = Vec::new();
    let mut outputs: Vec<(usize, String)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |msg: String| PipelineError::Syntax { line: line_no, msg };
        let words: Vec<&str> = line.split_whitespace().collect();
        match words[0] {
            "pipeline" => {
                name = words.get(1).ok_or_else(|| syntax("missing pipeline name".into()))?.to_string();
            }
            "func" | "input" => {
                let fname = words.get(1).ok_or_else(|| syntax("missing func name".into()))?.to_string();
                if by_name.contains_key(&fname) {
                    return Err(syntax(format!("func `{fname}` declared twice")));
                }
                let open = line.find('(').ok_or_else(|| syntax("expected `dims (...)`".into()))?;
                let close = line.find(')').ok_or_else(|| syntax("unclosed dims list".into()))?;
                if !line[..open].trim_end().ends_with("dims") {
                    return Err(syntax("expected `dims` before `(`".into()));
                }
                let mut dims = Vec::new();
                for item in line[open + 1..close].split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let (dn, de) = item.split_once('=').ok_or_else(|| syntax(format!("bad dim `{item}`")))?;
                    let extent: i64 =
                        de.trim().parse().map_err(|_| syntax(format!("bad extent `{}`", de.trim())))?;
                    if extent <= 0 {
                        return Err(PipelineError::NonPositiveExtent {
                            line: line_no,
                            func: fname.clone(),
                            dim: dn.trim().to_string(),
                            extent,
                        });
                    }
                    dims.push(Dim { name: dn.trim().to_string(), extent: extent as u64 });
                }
                if dims.is_empty() {
                    return Err(syntax(format!("func `{fname}` has no dims")));
                }
                let rest: Vec<&str> = line[close + 1..].split_whitespace().collect();
                let mut elem_bytes = 4;
                let mut i = 0;
                while i < rest.len() {
                    match rest[i] {
                        "bytes" => {
                            elem_bytes = rest
                                .get(i + 1)
                                .and_then(|b| b.parse().ok())
                                .ok_or_else(|| syntax("bad `bytes` value".into()))?;
                            i += 2;
                        }
                        other => return Err(syntax(format!("unexpected `{other}`"))),
                    }
                }
                by_name.insert(fname.clone(), funcs.len());
                funcs.push(FuncNode {
                    id: FuncId(funcs.len()),
                    name: fname,
                    dims,
                    stages: Vec::new(),
                    elem_bytes,
                    is_external_input: words[0] == "input",
                });
            }
            "stage" => {
                let fname = words.get(1).ok_or_else(|| syntax("missing func name".into()))?;
                let &fi = by_name.get(*fname).ok_or_else(|| syntax(format!("stage for undeclared func `{fname}`")))?;
                if funcs[fi].is_external_input {
                    return Err(syntax(format!("external input `{fname}` cannot have stages")));
                }
                let mut ops = OpHistogram::default();
                let mut expr_tree = None;
                let mut i = 2;
                while i < words.len() {
                    match words[i] {
                        "ops" => {
                            let list = words.get(i + 1).ok_or_else(|| syntax("missing op list".into()))?;
                            for item in list.split(',').filter(|s| !s.is_empty()) {
                                let (op, count) =
                                    item.split_once('=').ok_or_else(|| syntax(format!("bad op count `{item}`")))?;
                                let class =
                                    OpClass::from_name(op).ok_or_else(|| syntax(format!("unknown op class `{op}`")))?;
                                let count: u32 = count.parse().map_err(|_| syntax(format!("bad op count `{item}`")))?;
                                ops.set(class, ops.get(class) + count);
                            }
                            i += 2;
                        }
                        "tree" => {
                            let tree_text = words[i + 1..].join(" ");
                            expr_tree = Some(ExprTree::parse(&tree_text).map_err(syntax)?);
                            i = words.len();
                        }
                        other => return Err(syntax(format!("unexpected `{other}`"))),
                    }
                }
                funcs[fi].stages.push(StageDef { accesses: Vec::new(), ops, expr_tree });
            }
            "read" => {
                let fname = words.get(1).ok_or_else(|| syntax("missing consumer name".into()))?;
                let &fi = by_name.get(*fname).ok_or_else(|| syntax(format!("read by undeclared func `{fname}`")))?;
                if words.get(2) != Some(&"from") {
                    return Err(syntax("expected `from`".into()));
                }
                let producer = words.get(3).ok_or_else(|| syntax("missing producer name".into()))?.to_string();
                let mut dims = Vec::new();
                let mut i = 4;
                while i < words.len() {
                    if words[i] != "dim" {
                        return Err(syntax(format!("expected `dim`, found `{}`", words[i])));
                    }
                    let dn = words.get(i + 1).ok_or_else(|| syntax("missing dim name".into()))?.to_string();
                    let (mut stride, mut lo, mut hi) = (1i64, 0i64, 0i64);
                    i += 2;
                    while i < words.len() && words[i] != "dim" {
                        let v: i64 = words
                            .get(i + 1)
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| syntax(format!("bad value for `{}`", words[i])))?;
                        match words[i] {
                            "stride" => stride = v,
                            "lo" => lo = v,
                            "hi" => hi = v,
                            other => return Err(syntax(format!("unexpected `{other}`"))),
                        }
                        i += 2;
                    }
                    if lo > hi {
                        return Err(syntax(format!("offset range {lo}..{hi} is empty")));
                    }
                    dims.push((dn, stride, lo, hi));
                }
                if funcs[fi].stages.is_empty() {
                    funcs[fi].stages.push(StageDef { accesses: Vec::new(), ops: OpHistogram::default(), expr_tree: None });
                }
                let stage = funcs[fi].stages.len() - 1;
                reads.push(PendingRead { line: line_no, consumer: fi, stage, producer, dims });
            }
            "output" => {
                let fname = words.get(1).ok_or_else(|| syntax("missing output name".into()))?;
                outputs.push((line_no, fname.to_string()));
            }
            other => return Err(syntax(format!("unknown directive `{other}`"))),
        }
    }

    for r in reads {
        let consumer_name = funcs[r.consumer].name.clone();
        let &pi = by_name.get(&r.producer).ok_or_else(|| PipelineError::UnknownProducer {
            line: r.line,
            func: consumer_name.clone(),
            producer: r.producer.clone(),
        })?;
        if pi == r.consumer && r.stage == 0 {
            return Err(PipelineError::Cycle { funcs: vec![consumer_name.clone(), consumer_name] });
        }
        if r.dims.len() != funcs[pi].dims.len() {
            return Err(PipelineError::Syntax {
                line: r.line,
                msg: format!(
                    "read of `{}` lists {} dims, producer has {}",
                    r.producer,
                    r.dims.len(),
                    funcs[pi].dims.len()
                ),
            });
        }
        let mut dims = Vec::new();
        for (dn, stride, lo, hi) in r.dims {
            let consumer_dim = if dn == "_" || stride == 0 {
                None
            } else {
                Some(funcs[r.consumer].dims.iter().position(|d| d.name == dn).ok_or_else(|| {
                    PipelineError::Syntax { line: r.line, msg: format!("`{consumer_name}` has no dim `{dn}`") }
                })?)
            };
            dims.push(DimAccess { consumer_dim, stride: if consumer_dim.is_some() { stride } else { 0 }, lo, hi });
        }
        funcs[r.consumer].stages[r.stage].accesses.push(AccessPattern { producer: FuncId(pi), dims });
    }

    for f in &mut funcs {
        if !f.is_external_input && f.stages.is_empty() {
            f.stages.push(StageDef { accesses: Vec::new(), ops: OpHistogram::default(), expr_tree: None });
        }
    }
    let mut out_ids = Vec::new();
    for (line, o) in outputs {
        let &id = by_name
            .get(&o)
            .ok_or_else(|| PipelineError::Syntax { line, msg: format!("output `{o}` is not declared") })?;
        out_ids.push(FuncId(id));
    }
    PipelineGraph::new(&name, funcs, out_ids)
}
