//! Depth-first enumeration of every schedule the search can reach.
//!
//! Candidates are generated by the same enumerators and filtered by the same
//! pruning rules at the same points as the beam search, but nothing is
//! bucketed, sampled, ranked or cut: the minimum over all complete states is
//! the exact optimum of the search space.

use gpusched::costmodel::CostModel;
use gpusched::enumerate::{
    enumerate_compute_locations, enumerate_serial_tilings, enumerate_thread_tilings, post_serial_extents, prune,
    PruneThresholds, TilingOptions,
};
use gpusched::featurize::featurize;
use gpusched::loopnest::{Decision, Location, LoopNestState};
use gpusched::machine::MachineParams;
use gpusched::pipeline::{FuncId, PipelineGraph};

pub struct Exhaustive<'a> {
    pub graph: &'a PipelineGraph,
    pub params: &'a MachineParams,
    pub thresholds: &'a PruneThresholds,
    pub tiling: &'a TilingOptions,
    pub model: &'a dyn CostModel,
}

/// Optimum and size of the space.
#[derive(Debug, Clone)]
pub struct Optimum {
    pub best: Option<(f64, LoopNestState)>,
    pub complete: usize,
    /// Surviving candidates per (func, phase) step, summed over branches;
    /// the beam must be at least this wide to never cut.
    pub widest_step: usize,
}

impl Exhaustive<'_> {
    pub fn run(&self) -> Optimum {
        let order = self.graph.schedule_order();
        let mut widths = vec![0usize; order.len() * 2];
        let mut out = Optimum { best: None, complete: 0, widest_step: 0 };
        self.dfs(LoopNestState::new(self.graph), &order, 0, &mut widths, &mut out);
        out.widest_step = widths.into_iter().max().unwrap_or(0);
        out
    }

    fn phase1(&self, st: &LoopNestState, f: FuncId) -> Vec<LoopNestState> {
        let mut out = Vec::new();
        for d in enumerate_compute_locations(st, f, self.graph, self.thresholds).unwrap() {
            let placed = st.apply(self.graph, f, d.clone()).unwrap();
            if let Decision::FuseAtBlock(_) = d {
                let ext: Vec<u64> = placed.geometry(self.graph).func(f).unwrap().realization.iter().map(|r| r.extent()).collect();
                for s in enumerate_serial_tilings(&ext, self.params.warp_size, self.tiling) {
                    out.push(placed.apply(self.graph, f, Decision::TileSerial(s)).unwrap());
                }
            } else {
                out.push(placed);
            }
        }
        out
    }

    fn phase2(&self, st: &LoopNestState, f: FuncId) -> Vec<LoopNestState> {
        if st.location(f) != Some(Location::Root) || st.schedule(f).unwrap().serial.is_some() {
            return vec![st.clone()];
        }
        let ext = self.graph.func(f).extents();
        let mut out = Vec::new();
        for s in enumerate_serial_tilings(&ext, self.params.warp_size, self.tiling) {
            let with_s = st.apply(self.graph, f, Decision::TileSerial(s.clone())).unwrap();
            for t in enumerate_thread_tilings(&post_serial_extents(&ext, &s), self.tiling) {
                out.push(with_s.apply(self.graph, f, Decision::TileThread(t)).unwrap());
            }
        }
        out
    }

    fn dfs(&self, st: LoopNestState, order: &[FuncId], step: usize, widths: &mut [usize], out: &mut Optimum) {
        if step == order.len() * 2 {
            out.complete += 1;
            let cost = match featurize(&st.lower_partial(self.graph), self.graph, self.params) {
                Ok(f) => self.model.total_cost(&f),
                Err(_) => f64::INFINITY,
            };
            if out.best.as_ref().is_none_or(|(c, _)| cost < *c) {
                out.best = Some((cost, st));
            }
            return;
        }
        let f = order[step / 2];
        let next = if step % 2 == 0 { self.phase1(&st, f) } else { self.phase2(&st, f) };
        for cand in next {
            if prune(&cand, self.graph, self.params, self.thresholds).is_ok() {
                widths[step] += 1;
                self.dfs(cand, order, step + 1, widths, out);
            }
        }
    }
}

/// Outcome of comparing beam search with exhaustive enumeration.
#[derive(Debug, Default, Clone)]
pub struct Agreement {
    pub pipelines: usize,
    pub largest_space: usize,
    /// Pipelines where every schedule was pruned (both sides agree).
    pub unschedulable: usize,
    pub disagreements: Vec<String>,
}

/// Small machine on which tiny pipelines are not pruned wholesale.
pub fn small_machine() -> MachineParams {
    MachineParams { warp_size: 4, num_sms: 2, ..MachineParams::default() }
}

/// Runs `count` random pipelines (at most 3 funcs, extents at most 8) through
/// an unsampled beam search wide enough to never cut, with `passes` passes,
/// and checks its best cost equals the exhaustive optimum.
pub fn compare_random(count: usize, seed: u64, passes: usize) -> Agreement {
    use gpusched::costmodel::{CostModelWeights, NetShape};
    use gpusched::search::{schedule_pipeline, SearchConfig};
    use rand::SeedableRng;

    use super::gen::{random_pipeline, Shape};

    let params = small_machine();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape { max_funcs: 3, max_extent: 8, max_rank: 2, exotic: true, extent_step: 1 };
    let mut out = Agreement::default();
    for i in 0..count {
        let graph = random_pipeline(&mut rng, shape);
        let model = CostModelWeights::random(NetShape::default(), seed.wrapping_add(i as u64));
        let config = SearchConfig { num_passes: passes, no_sampling: true, seed: i as u64, ..SearchConfig::beam() };
        let ex = Exhaustive {
            graph: &graph,
            params: &params,
            thresholds: &config.thresholds,
            tiling: &config.tiling,
            model: &model,
        }
        .run();
        out.pipelines += 1;
        out.largest_space = out.largest_space.max(ex.complete);
        let config = SearchConfig { beam_size: ex.widest_step.max(1), ..config };
        let found = schedule_pipeline(&graph, &params, &config, &model);
        let verdict = match (&ex.best, &found) {
            (None, Err(_)) => {
                out.unschedulable += 1;
                None
            }
            (Some((want, _)), Ok(r)) => {
                let got = r.best().cost().unwrap();
                (got != *want).then(|| format!("search {got}, exhaustive {want}"))
            }
            (Some(_), Err(e)) => Some(format!("search failed: {e}")),
            (None, Ok(_)) => Some("search found a schedule outside the space".into()),
        };
        if let Some(v) = verdict {
            out.disagreements.push(format!("pipeline {i}: {v} ({} schedules)", ex.complete));
        }
    }
    out
}
