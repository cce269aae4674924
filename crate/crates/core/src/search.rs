//! Multi-pass beam search over scheduling decisions.
//!
//! Funcs are scheduled from the outputs backwards. Each func goes through two
//! phases: first its placement (plus the serial tiling of block-fused funcs),
//! then the serial and thread tiling of funcs placed at root. After every
//! phase the candidates are pruned, bucketed by structural hash at a depth
//! equal to the pass index, sampled, costed, and cut down to the beam.
//!
//! Hashes whose representatives ranked in the bottom half of a phase, and
//! never in the top half, are remembered; in later passes states with such a
//! hash have their cost multiplied by the penalty factor before the cut.

use std::collections::{BTreeMap, HashMap, HashSet};

use thiserror::Error;

use crate::costmodel::CostModel;
use crate::enumerate::{
    enumerate_compute_locations, enumerate_serial_tilings, enumerate_thread_tilings, post_serial_extents, prune,
    PruneReport, PruneThresholds, TilingOptions,
};
use crate::featurize::featurize;
use crate::loopnest::{mix, Decision, Location, LoopNestState, ScheduleError};
use crate::machine::MachineParams;
use crate::pipeline::{FuncId, PipelineGraph};
use crate::sampling::{bucket_candidates, sample_representatives, take_all};

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub beam_size: usize,
    pub num_passes: usize,
    pub penalty_factor: f64,
    pub freeze_enabled: bool,
    pub seed: u64,
    /// Cost every candidate instead of sampling representatives.
    pub no_sampling: bool,
    /// Only offer root and inline placements.
    pub root_or_inline_only: bool,
    pub tiling: TilingOptions,
    pub thresholds: PruneThresholds,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig::beam()
    }
}

impl SearchConfig {
    /// Beam of 32 over 5 passes.
    pub fn beam() -> Self {
        SearchConfig {
            beam_size: 32,
            num_passes: 5,
            penalty_factor: 2.0,
            freeze_enabled: false,
            seed: 0,
            no_sampling: false,
            root_or_inline_only: false,
            tiling: TilingOptions::default(),
            thresholds: PruneThresholds::default(),
        }
    }

    /// Beam of 1 over a single pass.
    pub fn greedy() -> Self {
        SearchConfig { beam_size: 1, num_passes: 1, ..SearchConfig::beam() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.beam_size == 0 || self.num_passes == 0 || !(self.penalty_factor > 1.0) {
            return Err(SearchError::Config(
                "beam_size and num_passes must be at least 1 and penalty_factor above 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("every candidate for `{func}` (phase {phase}) was pruned; last reasons: {}", format_reports(.reports))]
    EmptyBeam { func: String, phase: u8, reports: Vec<PruneReport> },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

fn format_reports(r: &[PruneReport]) -> String {
    r.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Counts for one func and phase of one pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseLog {
    pub pass: usize,
    pub func: FuncId,
    pub phase: u8,
    pub enumerated: usize,
    pub pruned: usize,
    pub buckets: usize,
    pub evaluated: usize,
    pub kept: usize,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    /// Distinct complete states, cheapest first. Costs are unpenalized.
    pub states: Vec<LoopNestState>,
    pub log: Vec<PhaseLog>,
}

impl SearchResult {
    pub fn best(&self) -> &LoopNestState {
        &self.states[0]
    }
}

/// What has been learned about one structural hash.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HashVerdict {
    /// Earliest pass in which the hash ranked in the bottom half.
    pub bad_since: Option<usize>,
    /// Ranked in the top half at least once.
    pub good: bool,
}

/// Verdicts keyed by `(depth, hash)`, kept for a whole search.
#[derive(Debug, Clone, Default)]
pub struct BadHashMemo {
    entries: HashMap<(usize, u64), HashVerdict>,
}

impl BadHashMemo {
    pub fn get(&self, depth: usize, hash: u64) -> Option<HashVerdict> {
        self.entries.get(&(depth, hash)).copied()
    }

    /// True if the hash was found unpromising in a pass before `pass`.
    pub fn is_bad(&self, depth: usize, hash: u64, pass: usize) -> bool {
        self.get(depth, hash).is_some_and(|v| !v.good && v.bad_since.is_some_and(|p| p < pass))
    }

    /// Records a phase's costed representatives, given cheapest first.
    pub fn record(&mut self, ranked: &[&LoopNestState], pass: usize, depths: usize) {
        let n = ranked.len();
        for (rank, s) in ranked.iter().enumerate() {
            let top = 2 * rank < n;
            let bottom = 2 * rank >= n && n > 1;
            for depth in 1..=depths {
                let e = self.entries.entry((depth, s.structural_hash(depth))).or_default();
                if top {
                    e.good = true;
                }
                if bottom && e.bad_since.is_none() {
                    e.bad_since = Some(pass);
                }
            }
        }
    }
}

/// Multiplies the cost of a state by `penalty_factor` if its hash at depth
/// `pass` was flagged in an earlier pass.
pub fn apply_pass_penalty(cost: f64, state: &LoopNestState, pass: usize, memo: &BadHashMemo, penalty_factor: f64) -> f64 {
    if memo.is_bad(pass, state.structural_hash(pass), pass) {
        cost * penalty_factor
    } else {
        cost
    }
}

type StateKey = Vec<(FuncId, Decision)>;

struct Searcher<'a> {
    graph: &'a PipelineGraph,
    params: &'a MachineParams,
    config: &'a SearchConfig,
    model: &'a dyn CostModel,
    memo: BadHashMemo,
    costs: HashMap<StateKey, f64>,
    log: Vec<PhaseLog>,
}

/// Beam search for the cheapest complete schedules of `graph`.
pub fn schedule_pipeline(
    graph: &PipelineGraph,
    params: &MachineParams,
    config: &SearchConfig,
    model: &dyn CostModel,
) -> Result<SearchResult, SearchError> {
    config.validate()?;
    let initial = if config.freeze_enabled {
        let freeze = freeze_prepass(graph, params, config, model)?;
        LoopNestState::new(graph).with_frozen(freeze.frozen)
    } else {
        LoopNestState::new(graph)
    };
    search_from(graph, params, config, model, initial)
}

/// Beam search starting from `initial`, whose frozen funcs replay their
/// frozen decisions.
pub fn search_from(
    graph: &PipelineGraph,
    params: &MachineParams,
    config: &SearchConfig,
    model: &dyn CostModel,
    initial: LoopNestState,
) -> Result<SearchResult, SearchError> {
    config.validate()?;
    let mut s = Searcher { graph, params, config, model, memo: BadHashMemo::default(), costs: HashMap::new(), log: Vec::new() };
    let mut finals: Vec<LoopNestState> = Vec::new();
    for pass in 1..=config.num_passes {
        let mut beam = vec![initial.clone()];
        for f in graph.schedule_order() {
            for phase in [1u8, 2] {
                let mut candidates = Vec::new();
                for st in &beam {
                    candidates.extend(s.expand(st, f, phase)?);
                }
                beam = s.select(candidates, pass, f, phase)?;
            }
        }
        finals.extend(beam);
    }
    finals.sort_by(|a, b| a.cost().unwrap_or(f64::INFINITY).total_cmp(&b.cost().unwrap_or(f64::INFINITY)));
    let mut seen = HashSet::new();
    finals.retain(|st| seen.insert(st.decisions().to_vec()));
    Ok(SearchResult { states: finals, log: s.log })
}

impl Searcher<'_> {
    /// Children of `st` for one phase of `f`. States that need nothing in
    /// this phase pass through unchanged.
    fn expand(&self, st: &LoopNestState, f: FuncId, phase: u8) -> Result<Vec<LoopNestState>, SearchError> {
        let g = self.graph;
        if let Some(frozen) = st.frozen_decisions(f) {
            let done = st.decisions_for(f).len();
            let take = match phase {
                1 => frozen.iter().take_while(|d| d.is_placement()).count()
                    + usize::from(matches!(frozen.first(), Some(Decision::FuseAtBlock(_)))),
                _ => frozen.len(),
            };
            let mut next = st.clone();
            for d in frozen.iter().take(take.min(frozen.len())).skip(done) {
                next = next.apply(g, f, d.clone())?;
            }
            return Ok(vec![next]);
        }
        let opts = &self.config.tiling;
        let warp = self.params.warp_size;
        match phase {
            1 => {
                let mut out = Vec::new();
                for d in enumerate_compute_locations(st, f, g, &self.config.thresholds)? {
                    if self.config.root_or_inline_only && !matches!(d, Decision::ComputeRoot | Decision::Inline) {
                        continue;
                    }
                    let placed = st.apply(g, f, d.clone())?;
                    if let Decision::FuseAtBlock(_) = d {
                        let region = placed.geometry(g).func(f).map(|fg| fg.realization.iter().map(|r| r.extent()).collect::<Vec<_>>());
                        let extents = region.unwrap_or_else(|| g.func(f).extents());
                        for s in enumerate_serial_tilings(&extents, warp, opts) {
                            out.push(placed.apply(g, f, Decision::TileSerial(s))?);
                        }
                    } else {
                        out.push(placed);
                    }
                }
                Ok(out)
            }
            _ => {
                let needs_tiling = st.location(f) == Some(Location::Root) && st.schedule(f).is_some_and(|s| s.serial.is_none());
                if !needs_tiling {
                    return Ok(vec![st.clone()]);
                }
                let extents = g.func(f).extents();
                let mut out = Vec::new();
                for s in enumerate_serial_tilings(&extents, warp, opts) {
                    let with_serial = st.apply(g, f, Decision::TileSerial(s.clone()))?;
                    for t in enumerate_thread_tilings(&post_serial_extents(&extents, &s), opts) {
                        out.push(with_serial.apply(g, f, Decision::TileThread(t))?);
                    }
                }
                Ok(out)
            }
        }
    }

    fn cost_of(&mut self, st: &LoopNestState) -> f64 {
        if let Some(c) = st.cost() {
            return c;
        }
        let key = st.decisions().to_vec();
        if let Some(&c) = self.costs.get(&key) {
            return c;
        }
        let lowered = st.lower_partial(self.graph);
        let c = match featurize(&lowered, self.graph, self.params) {
            Ok(f) => self.model.total_cost(&f),
            Err(_) => f64::INFINITY,
        };
        self.costs.insert(key, c);
        c
    }

    fn select(&mut self, candidates: Vec<LoopNestState>, pass: usize, f: FuncId, phase: u8) -> Result<Vec<LoopNestState>, SearchError> {
        let enumerated = candidates.len();
        let mut seen = HashSet::new();
        let mut reports = Vec::new();
        let mut alive = Vec::new();
        for c in candidates {
            if !seen.insert(c.decisions().to_vec()) {
                continue;
            }
            match prune(&c, self.graph, self.params, &self.config.thresholds) {
                Ok(()) => alive.push(c),
                Err(r) => {
                    if reports.len() >= 8 {
                        reports.remove(0);
                    }
                    reports.push(r);
                }
            }
        }
        let pruned = seen.len() - alive.len();
        if alive.is_empty() {
            return Err(SearchError::EmptyBeam { func: self.graph.func(f).name.clone(), phase, reports });
        }
        let salt = mix(mix(self.config.seed, pass as u64), mix(f.0 as u64, phase as u64));
        let buckets = bucket_candidates(alive, pass, salt);
        let n_buckets = buckets.buckets.len();
        let chosen = if self.config.no_sampling { take_all(&buckets) } else { sample_representatives(&buckets) };
        let mut scored: Vec<(f64, LoopNestState)> = chosen
            .into_iter()
            .map(|s| {
                let c = self.cost_of(&s.item);
                (c, s.item.with_cost(c))
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        let evaluated = scored.len();

        let mut ranked: Vec<(f64, LoopNestState)> = scored
            .iter()
            .map(|(c, st)| (apply_pass_penalty(*c, st, pass, &self.memo, self.config.penalty_factor), st.clone()))
            .collect();
        let refs: Vec<&LoopNestState> = scored.iter().map(|(_, s)| s).collect();
        self.memo.record(&refs, pass, self.config.num_passes.max(1));
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
        ranked.truncate(self.config.beam_size);
        self.log.push(PhaseLog { pass, func: f, phase, enumerated, pruned, buckets: n_buckets, evaluated, kept: ranked.len() });
        Ok(ranked.into_iter().map(|(_, s)| s).collect())
    }
}

/// Outcome of the freezing pre-pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeResult {
    pub frozen: BTreeMap<FuncId, Vec<Decision>>,
    /// Funcs left for the main search, most expensive first.
    pub free: Vec<FuncId>,
    /// Predicted cost of each func in the pre-pass schedule.
    pub func_costs: BTreeMap<FuncId, f64>,
}

/// Number of funcs left free out of `n`: `max(1, floor(log2 n))`.
pub fn num_free(n: usize) -> usize {
    if n == 0 {
        0
    } else {
        (n.ilog2() as usize).max(1)
    }
}

/// Schedules with root and inline placements only, then freezes all but
/// the most expensive funcs to their pre-pass decisions.
pub fn freeze_prepass(
    graph: &PipelineGraph,
    params: &MachineParams,
    config: &SearchConfig,
    model: &dyn CostModel,
) -> Result<FreezeResult, SearchError> {
    let pre = SearchConfig { root_or_inline_only: true, freeze_enabled: false, ..config.clone() };
    let result = search_from(graph, params, &pre, model, LoopNestState::new(graph))?;
    let best = result.best();
    freeze_from(graph, params, model, best)
}

/// Freezing decisions derived from a complete schedule.
pub fn freeze_from(
    graph: &PipelineGraph,
    params: &MachineParams,
    model: &dyn CostModel,
    best: &LoopNestState,
) -> Result<FreezeResult, SearchError> {
    let lowered = best.lower(graph)?;
    let feats = featurize(&lowered, graph, params)?;
    let costs = model.stage_costs(&feats);
    let mut func_costs: BTreeMap<FuncId, f64> = graph.scheduled_funcs().map(|f| (f.id, 0.0)).collect();
    for (sf, c) in feats.iter().zip(costs) {
        *func_costs.entry(sf.func).or_default() += c;
    }
    let mut order: Vec<FuncId> = func_costs.keys().copied().collect();
    order.sort_by(|a, b| func_costs[b].total_cmp(&func_costs[a]).then(a.cmp(b)));
    let keep = num_free(order.len());
    let free = order[..keep].to_vec();
    let frozen = order[keep..].iter().map(|&f| (f, best.decisions_for(f))).collect();
    Ok(FreezeResult { frozen, free, func_costs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::FixedCoefficients;
    use crate::pipeline::parse_pipeline;

    fn chain() -> PipelineGraph {
        parse_pipeline(
            "input in dims (x=256,y=256) bytes 4
             func intermed dims (x=256,y=256) bytes 4
             stage intermed ops add=2
             read intermed from in dim x stride 1 lo -1 hi 1 dim y stride 1 lo 0 hi 0
             func output dims (x=256,y=256) bytes 4
             stage output ops add=2
             read output from intermed dim x stride 1 lo 0 hi 0 dim y stride 1 lo -1 hi 1
             output output",
        )
        .unwrap()
    }

    fn small_machine() -> MachineParams {
        MachineParams { num_sms: 4, ..MachineParams::default() }
    }

    #[test]
    fn beam_results_are_complete_sorted_and_bounded() {
        let g = chain();
        let cfg = SearchConfig { beam_size: 4, num_passes: 2, ..SearchConfig::beam() };
        let r = schedule_pipeline(&g, &small_machine(), &cfg, &FixedCoefficients::unit()).unwrap();
        assert!(!r.states.is_empty());
        assert!(r.states.len() <= 4 * 2);
        for w in r.states.windows(2) {
            assert!(w[0].cost().unwrap() <= w[1].cost().unwrap());
        }
        for s in &r.states {
            assert!(s.is_fully_scheduled(&g));
        }
        assert!(r.log.iter().all(|l| l.kept <= 4));
    }

    #[test]
    fn greedy_keeps_one_state_per_phase() {
        let g = chain();
        let r = schedule_pipeline(&g, &small_machine(), &SearchConfig::greedy(), &FixedCoefficients::unit()).unwrap();
        assert_eq!(r.states.len(), 1);
        assert!(r.log.iter().all(|l| l.kept == 1));
        assert_eq!(r.log.len(), 4);
    }

    #[test]
    fn same_seed_same_result() {
        let g = chain();
        let cfg = SearchConfig { beam_size: 3, num_passes: 2, seed: 11, ..SearchConfig::beam() };
        let a = schedule_pipeline(&g, &small_machine(), &cfg, &FixedCoefficients::unit()).unwrap();
        let b = schedule_pipeline(&g, &small_machine(), &cfg, &FixedCoefficients::unit()).unwrap();
        assert_eq!(a.best().dump(&g), b.best().dump(&g));
    }

    #[test]
    fn penalty_only_for_hashes_flagged_earlier() {
        let g = chain();
        let s = LoopNestState::new(&g);
        let mut memo = BadHashMemo::default();
        assert_eq!(apply_pass_penalty(10.0, &s, 2, &memo, 2.0), 10.0);
        let other = s.apply(&g, g.func_by_name("output").unwrap(), Decision::ComputeRoot).unwrap();
        memo.record(&[&other, &s], 1, 3);
        assert_eq!(apply_pass_penalty(10.0, &s, 1, &memo, 2.0), 10.0);
        assert_eq!(apply_pass_penalty(10.0, &s, 2, &memo, 2.0), 20.0);
        assert_eq!(apply_pass_penalty(10.0, &other, 2, &memo, 2.0), 10.0);
        // A later top-half showing clears the flag.
        memo.record(&[&s, &other], 2, 3);
        assert_eq!(apply_pass_penalty(10.0, &s, 3, &memo, 2.0), 10.0);
    }

    #[test]
    fn free_counts() {
        assert_eq!(num_free(16), 4);
        assert_eq!(num_free(2), 1);
        assert_eq!(num_free(1), 1);
        assert_eq!(num_free(9), 3);
    }

    #[test]
    fn bad_config_is_rejected() {
        let g = chain();
        let cfg = SearchConfig { penalty_factor: 1.0, ..SearchConfig::greedy() };
        assert!(matches!(
            schedule_pipeline(&g, &small_machine(), &cfg, &FixedCoefficients::unit()),
            Err(SearchError::Config(_))
        ));
    }
}
