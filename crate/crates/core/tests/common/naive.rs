//! A deliberately naive featurizer for small schedules.
//!
//! It shares nothing with the library's footprint analysis: every producer
//! coordinate is enumerated point by point (substituting inlined funcs by
//! walking their own accesses), bounding boxes are taken over the visited
//! coordinates, and every lane of every warp is simulated one offset at a
//! time. Only the schedule geometry (tile boxes, thread extents, block
//! shape) is taken from the library, because that is the input being
//! featurized rather than the analysis under test.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use gpusched::loopnest::{Geometry, Location, LoopNestState};
use gpusched::machine::MachineParams;
use gpusched::pipeline::{AccessPattern, FuncId, Interval, PipelineGraph};

type Boxi = Vec<(i64, i64)>;

pub struct Naive<'a> {
    graph: &'a PipelineGraph,
    state: &'a LoopNestState,
    geo: Arc<Geometry>,
    params: &'a MachineParams,
}

fn to_box(r: &[Interval]) -> Boxi {
    r.iter().map(|i| (i.lo, i.hi)).collect()
}

fn count(b: &Boxi) -> u64 {
    b.iter().map(|&(lo, hi)| if hi < lo { 0 } else { (hi - lo + 1) as u64 }).product()
}

fn line_count(b: &Boxi) -> u64 {
    if b.iter().any(|&(lo, hi)| hi < lo) {
        return 0;
    }
    b.iter().skip(1).map(|&(lo, hi)| (hi - lo + 1) as u64).product()
}

/// Every integer point of `b`, dim 0 fastest.
fn points(b: &Boxi) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for &(lo, hi) in b {
        out = out.into_iter().flat_map(|p| (lo..=hi).map(move |v| [p.clone(), vec![v]].concat())).collect();
    }
    // Reorder so dim 0 varies fastest.
    out.sort_by(|a, b| a.iter().rev().cmp(b.iter().rev()));
    out
}

fn grow(bb: &mut BTreeMap<FuncId, Boxi>, p: FuncId, c: &[i64]) {
    let e = bb.entry(p).or_insert_with(|| c.iter().map(|&v| (v, v)).collect());
    for (iv, &v) in e.iter_mut().zip(c) {
        iv.0 = iv.0.min(v);
        iv.1 = iv.1.max(v);
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Traffic {
    tx: u64,
    used: u64,
}

impl<'a> Naive<'a> {
    pub fn new(graph: &'a PipelineGraph, state: &'a LoopNestState, params: &'a MachineParams) -> Self {
        Naive { graph, state, geo: state.geometry(graph), params }
    }

    fn tier(&self, p: FuncId) -> usize {
        match self.state.location(p) {
            Some(Location::AtBlock(_)) => 1,
            Some(Location::AtThread(_)) => 2,
            _ => 0,
        }
    }

    fn elem(&self, p: FuncId) -> u64 {
        self.graph.func(p).elem_bytes as u64
    }

    /// Buffer box of `p` in its tier: origin and extents of its storage.
    fn storage_box(&self, p: FuncId) -> Boxi {
        match self.state.location(p) {
            Some(Location::AtBlock(_)) | Some(Location::AtThread(_)) => to_box(&self.geo.func(p).unwrap().realization),
            _ => self.graph.func(p).extents().iter().map(|&e| (0, e as i64 - 1)).collect(),
        }
    }

    fn address(&self, p: FuncId, coord: &[i64]) -> i64 {
        let b = self.storage_box(p);
        let mut addr = 0;
        let mut stride = 1;
        for (&c, &(lo, hi)) in coord.iter().zip(&b) {
            addr += (c - lo) * stride;
            stride *= (hi - lo + 1).max(1);
        }
        addr * self.elem(p) as i64
    }

    /// Calls `sink` with every stored producer coordinate read at `point`.
    fn visit(&self, accesses: &[AccessPattern], point: &[i64], sink: &mut dyn FnMut(FuncId, &[i64])) {
        for a in accesses {
            let mut coords: Vec<Vec<i64>> = vec![Vec::new()];
            for d in &a.dims {
                let vals: Vec<i64> = (d.lo..=d.hi)
                    .map(|o| match d.consumer_dim {
                        Some(c) => d.stride * point[c] + o,
                        None => o,
                    })
                    .collect();
                coords = coords.into_iter().flat_map(|p| vals.iter().map(move |&v| [p.clone(), vec![v]].concat())).collect();
            }
            for c in coords {
                if self.state.is_inlined(a.producer) {
                    self.visit(&self.graph.func(a.producer).stages[0].accesses, &c, sink);
                } else {
                    sink(a.producer, &c);
                }
            }
        }
    }

    /// Bounding box per producer read by the given stages of `f` over `region`.
    fn footprint(&self, f: FuncId, stages: &[usize], region: &Boxi) -> BTreeMap<FuncId, Boxi> {
        let mut bb = BTreeMap::new();
        for p in points(region) {
            for &s in stages {
                self.visit(&self.graph.func(f).stages[s].accesses, &p, &mut |q, c| grow(&mut bb, q, c));
            }
        }
        bb
    }

    fn all_stages(&self, f: FuncId) -> Vec<usize> {
        (0..self.graph.func(f).stages.len()).collect()
    }

    fn thread_box(&self, f: FuncId, tid: &[u64]) -> Boxi {
        let g = self.geo.func(f).unwrap();
        match g.location {
            Location::AtThread(c) => {
                let cb = self.thread_box(c, tid);
                self.footprint(c, &self.all_stages(c), &cb).remove(&f).unwrap_or_default()
            }
            _ => g
                .realization
                .iter()
                .zip(&g.serial)
                .enumerate()
                .map(|(d, (r, &s))| {
                    let lo = r.lo + tid[d] as i64 * s as i64;
                    (lo, lo + s as i64 - 1)
                })
                .collect(),
        }
    }

    fn transactions(&self, p: FuncId, lanes: &[(u64, Boxi)], repeat: u64) -> Traffic {
        let tier = self.tier(p);
        if tier == 2 || lanes.is_empty() {
            return Traffic::default();
        }
        let e = self.elem(p) as i64;
        let offsets = points(&lanes[0].1.iter().map(|&(lo, hi)| (0, hi - lo)).collect());
        let mut t = Traffic::default();
        let mut warps: BTreeMap<u64, Vec<&Boxi>> = BTreeMap::new();
        for (lin, b) in lanes {
            warps.entry(lin / self.params.warp_size).or_default().push(b);
        }
        for boxes in warps.values() {
            let mut distinct = BTreeSet::new();
            for b in boxes {
                distinct.insert(self.address(p, &b.iter().map(|iv| iv.0).collect::<Vec<_>>()));
            }
            t.used += distinct.len() as u64 * e as u64 * offsets.len() as u64 * repeat;
            for off in &offsets {
                let addrs: Vec<i64> = boxes
                    .iter()
                    .map(|b| self.address(p, &b.iter().zip(off).map(|(iv, o)| iv.0 + o).collect::<Vec<_>>()))
                    .collect();
                let n = if tier == 0 {
                    let seg = self.params.global_transaction_bytes as i64;
                    addrs.iter().flat_map(|&a| a.div_euclid(seg)..=(a + e - 1).div_euclid(seg)).collect::<BTreeSet<_>>().len() as u64
                } else {
                    let w = self.params.bank_width_bytes as i64;
                    let words: BTreeSet<i64> = addrs.iter().flat_map(|&a| a.div_euclid(w)..=(a + e - 1).div_euclid(w)).collect();
                    let mut per_bank = vec![0u64; self.params.shared_banks as usize];
                    for wd in words {
                        per_bank[wd.rem_euclid(self.params.shared_banks as i64) as usize] += 1;
                    }
                    per_bank.into_iter().max().unwrap_or(0)
                };
                t.tx += n * repeat;
            }
        }
        t
    }

    fn efficiency(&self, t: Traffic, tier: usize) -> f64 {
        let size = if tier == 0 {
            self.params.global_transaction_bytes
        } else {
            self.params.shared_banks * self.params.bank_width_bytes
        };
        if t.tx == 0 {
            1.0
        } else {
            (t.used as f64 / (t.tx * size) as f64).min(1.0)
        }
    }

    /// Named memory features of one stage of a non-inlined func.
    pub fn stage(&self, f: FuncId, stage: usize) -> BTreeMap<&'static str, f64> {
        const TIERS: [&str; 3] = ["global", "shared", "register"];
        let g = self.geo.func(f).expect("non-inlined func");
        let k = &self.geo.kernels[g.kernel];
        let node = self.graph.func(f);
        let rank = node.rank();
        let mut out: BTreeMap<&'static str, f64> = BTreeMap::new();
        let name = |s: String| -> &'static str { Box::leak(s.into_boxed_str()) };

        let realization: Boxi = match g.location {
            Location::Root => (0..rank).map(|d| (0, (k.block_counts[d] * g.serial[d] * g.threads[d]) as i64 - 1)).collect(),
            _ => to_box(&g.realization),
        };
        let tid0 = vec![0u64; g.threads.len()];
        let thread0 = self.thread_box(f, &tid0);
        let point: Boxi = thread0.iter().map(|&(lo, _)| (lo, lo)).collect();
        let task: Boxi = match g.location {
            Location::AtThread(_) => {
                let owner = g.owner;
                let ob = to_box(&self.geo.func(owner).unwrap().realization);
                self.footprint(owner, &self.all_stages(owner), &ob).remove(&f).unwrap_or_default()
            }
            _ => to_box(&g.realization),
        };

        let totals = |b: &Boxi| {
            let mut bytes = [0.0; 3];
            let mut lines = [0.0; 3];
            for (p, bb) in self.footprint(f, &[stage], b) {
                let t = self.tier(p);
                bytes[t] += (count(&bb) * self.elem(p)) as f64;
                lines[t] += line_count(&bb) as f64;
            }
            (bytes, lines)
        };
        for (label, b) in [("realization", &realization), ("thread", &thread0)] {
            let (bytes, lines) = totals(b);
            for t in 0..3 {
                out.insert(name(format!("unique_{}_bytes_read_per_{label}", TIERS[t])), bytes[t]);
                out.insert(name(format!("unique_{}_lines_read_per_{label}", TIERS[t])), lines[t]);
            }
        }
        for (label, b) in [("point", &point), ("task", &task)] {
            let (bytes, lines) = totals(b);
            out.insert(name(format!("unique_bytes_read_per_{label}")), bytes.iter().sum());
            out.insert(name(format!("unique_lines_read_per_{label}")), lines.iter().sum());
        }

        let mut alloc = [0.0; 3];
        for p in self.footprint(f, &[stage], &realization).keys() {
            let bytes = match self.state.location(*p) {
                Some(Location::AtBlock(_)) | Some(Location::AtThread(_)) => count(&self.storage_box(*p)) * self.elem(*p),
                _ => node_size(self.graph, *p) * self.elem(*p),
            };
            alloc[self.tier(*p)] += bytes as f64;
        }
        for t in 0..3 {
            out.insert(name(format!("{}_allocation_bytes_read_per_realization", TIERS[t])), alloc[t]);
        }

        // Active lanes: every thread of the block shape inside this func's
        // thread extents, linearized dim 0 fastest.
        let shape_box: Boxi = k.block_shape.iter().map(|&s| (0, s as i64 - 1)).collect();
        let mut lanes: Vec<(u64, Vec<u64>)> = Vec::new();
        for tid in points(&shape_box) {
            let tid: Vec<u64> = tid.iter().map(|&v| v as u64).collect();
            if tid.iter().zip(&g.threads).all(|(t, n)| t < n) {
                let mut lin = 0;
                let mut stride = 1;
                for (t, s) in tid.iter().zip(&k.block_shape) {
                    lin += t * stride;
                    stride *= s;
                }
                lanes.push((lin, tid));
            }
        }
        out.insert("num_threads_per_block", lanes.len() as f64);
        let ppt: u64 = g.serial.iter().product();
        out.insert("points_computed_per_thread", ppt as f64);

        let own = self.tier(f);
        let elem = self.elem(f) as f64;
        let real_points = count(&to_box(&g.realization)) as f64;
        let written = if matches!(g.location, Location::AtThread(_)) { lanes.len() as f64 * real_points * elem } else { real_points * elem };
        for t in 0..3 {
            let on = t == own;
            out.insert(name(format!("{}_bytes_at_task", TIERS[t])), if on { written } else { 0.0 });
            let row = g.realization[0].extent() as f64 * elem;
            out.insert(name(format!("{}_innermost_bytes_at_task", TIERS[t])), if on { row } else { 0.0 });
        }

        let unrolled = g.unrolled;
        let repeat = if unrolled { 1 } else { ppt };
        let groups: Vec<(u64, Boxi)> = lanes
            .iter()
            .map(|(lin, tid)| {
                let b = self.thread_box(f, tid);
                (*lin, if unrolled { b } else { b.iter().map(|&(lo, _)| (lo, lo)).collect() })
            })
            .collect();
        let per_lane: Vec<BTreeMap<FuncId, Boxi>> = groups.iter().map(|(_, b)| self.footprint(f, &[stage], b)).collect();
        let mut loads = [Traffic::default(); 2];
        let producers: BTreeSet<FuncId> = per_lane.iter().flat_map(|m| m.keys().copied()).collect();
        for p in producers {
            let t = self.tier(p);
            if t == 2 {
                continue;
            }
            let lanes_p: Vec<(u64, Boxi)> = groups.iter().zip(&per_lane).map(|((lin, _), m)| (*lin, m[&p].clone())).collect();
            let tr = self.transactions(p, &lanes_p, repeat);
            loads[t].tx += tr.tx;
            loads[t].used += tr.used;
        }
        let stores = self.transactions(f, &groups, repeat);
        out.insert("num_global_mem_loads_per_block", loads[0].tx as f64);
        out.insert("num_shared_mem_loads_per_block", loads[1].tx as f64);
        out.insert("global_mem_load_efficiency", self.efficiency(loads[0], 0));
        out.insert("shared_mem_load_efficiency", self.efficiency(loads[1], 1));
        let none = Traffic::default();
        let (gs, ss) = match own {
            0 => (stores, none),
            1 => (none, stores),
            _ => (none, none),
        };
        out.insert("num_global_mem_stores_per_block", gs.tx as f64);
        out.insert("num_shared_mem_stores_per_block", ss.tx as f64);
        out.insert("global_mem_store_efficiency", self.efficiency(gs, 0));
        out.insert("shared_mem_store_efficiency", self.efficiency(ss, 1));
        out
    }
}

fn node_size(graph: &PipelineGraph, p: FuncId) -> u64 {
    graph.func(p).extents().iter().product()
}

/// What a randomized comparison run exercised.
#[derive(Debug, Default, Clone)]
pub struct Coverage {
    pub schedules: usize,
    pub stages: usize,
    pub fields_compared: usize,
    pub shared_loads: usize,
    pub register_reads: usize,
    pub inlined: usize,
    pub rolled: usize,
    pub multi_warp: usize,
    pub mismatches: Vec<String>,
}

/// Compares the library featurizer with [`Naive`] on `count` random lowered
/// schedules of random pipelines with extents at most 16 and rank at most 2.
pub fn compare_random(count: usize, seed: u64, params: &MachineParams) -> Coverage {
    use rand::SeedableRng;

    use super::gen::{random_pipeline, random_schedule, Shape};
    use gpusched::enumerate::TilingOptions;
    use gpusched::featurize::{featurize, ScheduleFeatures};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape { max_funcs: 4, max_extent: 16, max_rank: 2, exotic: true, extent_step: 1 };
    let mut opts = TilingOptions::uniform(&[1, 2, 3, 4, 8]);
    opts.cap_at_extent = true;
    let mut cov = Coverage::default();
    let mut attempts = 0;
    while cov.schedules < count {
        attempts += 1;
        assert!(attempts < count * 50, "could not generate enough schedules");
        let graph = random_pipeline(&mut rng, shape);
        let Some(state) = random_schedule(&graph, params.warp_size, &opts, &mut rng) else { continue };
        cov.schedules += 1;
        let naive = Naive::new(&graph, &state, params);
        let geo = state.geometry(&graph);
        let feats = featurize(&state, &graph, params).expect("lowered state featurizes");
        for sf in &feats {
            if state.is_inlined(sf.func) {
                cov.inlined += 1;
                continue;
            }
            cov.stages += 1;
            let g = geo.func(sf.func).unwrap();
            if !g.unrolled {
                cov.rolled += 1;
            }
            if geo.kernels[g.kernel].threads_per_block() > params.warp_size {
                cov.multi_warp += 1;
            }
            if sf.schedule.num_shared_mem_loads_per_block > 0.0 {
                cov.shared_loads += 1;
            }
            if sf.schedule.unique_register_bytes_read_per_realization > 0.0 {
                cov.register_reads += 1;
            }
            let lib = sf.schedule.to_vec();
            for (name, want) in naive.stage(sf.func, sf.stage) {
                let i = ScheduleFeatures::NAMES.iter().position(|n| *n == name).expect("known feature");
                cov.fields_compared += 1;
                let got = lib[i];
                let ok = if name.ends_with("efficiency") { (got - want).abs() <= 1e-12 * want.abs() } else { got == want };
                if !ok && cov.mismatches.len() < 20 {
                    cov.mismatches.push(format!(
                        "{} stage {} `{name}`: featurize {got}, naive {want}\n{}\n{}",
                        graph.func(sf.func).name,
                        sf.stage,
                        state.dump(&graph),
                        pipeline_summary(&graph)
                    ));
                }
            }
        }
    }
    cov
}

fn pipeline_summary(graph: &PipelineGraph) -> String {
    graph
        .funcs
        .iter()
        .map(|f| {
            let reads: Vec<String> = f
                .stages
                .iter()
                .flat_map(|s| s.accesses.iter())
                .map(|a| format!("{}{:?}", graph.func(a.producer).name, a.dims.iter().map(|d| (d.consumer_dim, d.stride, d.lo, d.hi)).collect::<Vec<_>>()))
                .collect();
            format!("{} {:?} b{} <- {}", f.name, f.extents(), f.elem_bytes, reads.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}
