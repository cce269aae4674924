//! Invariants over random pipelines and schedules.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::gen::{random_pipeline, random_schedule, Shape};
use gpusched::costmodel::{pipeline_cost, CostModelWeights, NetShape};
use gpusched::enumerate::{
    enumerate_compute_locations, enumerate_serial_tilings, enumerate_thread_tilings, post_serial_extents, prune,
    PruneThresholds, TilingOptions,
};
use gpusched::featurize::featurize;
use gpusched::loopnest::{LoopNestState, HASH_DEPTHS};
use gpusched::machine::{simulate_runtime, validate_limits, MachineParams};
use gpusched::pipeline::PipelineGraph;

const SMALL: Shape = Shape { max_funcs: 3, max_extent: 8, max_rank: 2, exotic: true, extent_step: 1 };
const MEDIUM: Shape = Shape { max_funcs: 4, max_extent: 48, max_rank: 2, exotic: true, extent_step: 1 };

fn opts() -> TilingOptions {
    let mut o = TilingOptions::uniform(&[1, 2, 4, 8, 16]);
    o.cap_at_extent = true;
    o
}

fn schedules(graph: &PipelineGraph, params: &MachineParams, n: usize, rng: &mut ChaCha8Rng) -> Vec<LoopNestState> {
    (0..n * 4).filter_map(|_| random_schedule(graph, params.warp_size, &opts(), rng)).take(n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn equal_deep_hash_implies_equal_shallow_hash(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = random_pipeline(&mut rng, SMALL);
        let states = schedules(&graph, &MachineParams::default(), 10, &mut rng);
        for a in &states {
            for b in &states {
                for d in 0..HASH_DEPTHS - 1 {
                    if a.structural_hash(d + 1) == b.structural_hash(d + 1) {
                        prop_assert_eq!(a.structural_hash(d), b.structural_hash(d));
                    }
                }
            }
        }
    }

    #[test]
    fn apply_leaves_the_original_state_untouched(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = random_pipeline(&mut rng, SMALL);
        let mut st = LoopNestState::new(&graph);
        for f in graph.schedule_order() {
            let before = (st.decisions().to_vec(), st.dump(&graph), [0, 1, 2].map(|d| st.structural_hash(d)));
            let locs = enumerate_compute_locations(&st, f, &graph, &PruneThresholds::default()).unwrap();
            let mut next = None;
            for d in locs {
                let child = st.apply(&graph, f, d).unwrap();
                prop_assert_eq!(child.decisions().len(), before.0.len() + 1);
                next = Some(child);
            }
            let after = (st.decisions().to_vec(), st.dump(&graph), [0, 1, 2].map(|d| st.structural_hash(d)));
            prop_assert_eq!(&before, &after);
            st = next.unwrap();
        }
    }

    #[test]
    fn tiling_options_respect_caps(extents in prop::collection::vec(1u64..=96, 1..=3), warp in prop::sample::select(vec![4u64, 8, 32])) {
        let o = TilingOptions::default();
        let serial = enumerate_serial_tilings(&extents, warp, &o);
        prop_assert!(!serial.is_empty());
        let mut dedup = serial.clone();
        dedup.sort();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), serial.len());
        for s in &serial {
            prop_assert!(s.iter().product::<u64>() <= o.unroll_budget);
            prop_assert!(s.iter().zip(&extents).all(|(t, e)| t <= e));
            let post = post_serial_extents(&extents, s);
            let threads = enumerate_thread_tilings(&post, &o);
            prop_assert!(!threads.is_empty());
            for t in threads {
                prop_assert!(t.iter().zip(&post).all(|(t, e)| *t >= 1 && t <= e));
            }
        }
    }

    #[test]
    fn pruning_rejects_every_limit_violation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = random_pipeline(&mut rng, MEDIUM);
        let params = MachineParams { shared_mem_per_block_limit: 4096, max_threads_per_block: 128, ..MachineParams::default() };
        for st in schedules(&graph, &params, 6, &mut rng) {
            let violations = validate_limits(&st, &graph, &params);
            let pruned = prune(&st, &graph, &params, &PruneThresholds::default());
            if !violations.is_empty() {
                prop_assert!(pruned.is_err(), "{:?} survived pruning", violations);
            }
            if pruned.is_ok() {
                prop_assert!(simulate_runtime(&st, &graph, &params).is_ok());
            }
        }
    }

    #[test]
    fn features_stay_in_declared_ranges(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = random_pipeline(&mut rng, MEDIUM);
        let params = MachineParams::default();
        let weights = CostModelWeights::random(NetShape::default(), seed);
        for st in schedules(&graph, &params, 6, &mut rng) {
            if prune(&st, &graph, &params, &PruneThresholds::default()).is_err() {
                continue;
            }
            let feats = featurize(&st, &graph, &params).unwrap();
            for sf in &feats {
                let s = &sf.schedule;
                for (name, v) in gpusched::featurize::ScheduleFeatures::NAMES.iter().zip(s.to_vec()) {
                    prop_assert!(v.is_finite() && v >= 0.0, "{} = {}", name, v);
                }
                for v in [
                    s.global_mem_load_efficiency, s.global_mem_store_efficiency,
                    s.shared_mem_load_efficiency, s.shared_mem_store_efficiency,
                    s.block_occupancy, s.warp_lane_utilization,
                    s.shared_mem_block_limit_factor, s.max_warp_occupancy, s.max_block_occupancy,
                ] {
                    prop_assert!(v > 0.0 && v <= 1.0, "{:?}", s);
                }
                prop_assert!(s.shared_mem_occupancy >= 0.0 && s.shared_mem_occupancy <= 1.0);
                prop_assert!(s.idle_lane_wastage >= 0.0 && s.idle_lane_wastage < 1.0);
                prop_assert!(s.num_active_warps_per_block <= s.num_warps_per_block);
                prop_assert!(s.num_threads_per_block <= params.max_threads_per_block as f64);
            }
            let cost = pipeline_cost(&feats, &weights);
            prop_assert!(cost.total > 0.0 && cost.total.is_finite());
            for sf in &feats {
                let c = weights.predict_coefficients(&sf.algorithm, &sf.schedule);
                prop_assert!(c.iter().all(|&x| x > 0.0));
            }
        }
    }

    #[test]
    fn algorithm_features_ignore_the_schedule(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = random_pipeline(&mut rng, SMALL);
        let params = MachineParams::default();
        let algo = |st: &LoopNestState| {
            featurize(st, &graph, &params).unwrap().into_iter().map(|s| ((s.func, s.stage), s.algorithm)).collect::<std::collections::BTreeMap<_, _>>()
        };
        let states = schedules(&graph, &params, 4, &mut rng);
        for st in &states[1..] {
            prop_assert_eq!(algo(&states[0]), algo(st));
        }
    }

    // Rows are whole transaction segments, so doubling the extents cannot
    // improve the coalescing of block 0.
    #[test]
    fn oracle_is_deterministic_and_scale_monotone(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = random_pipeline(&mut rng, Shape { extent_step: 32, max_extent: 96, ..MEDIUM });
        let params = MachineParams::default();
        let scaled = graph.with_scaled_extents(2);
        for st in schedules(&graph, &params, 4, &mut rng) {
            let Ok(r1) = simulate_runtime(&st, &graph, &params) else { continue };
            let r2 = simulate_runtime(&st, &graph, &params).unwrap();
            prop_assert_eq!(r1, r2);
            let big = LoopNestState::replay(&scaled, &st.dump(&graph)).unwrap();
            if let Ok(rb) = simulate_runtime(&big, &scaled, &params) {
                prop_assert!(rb.runtime >= r1.runtime * (1.0 - 1e-12), "{} < {}\n{}", rb.runtime, r1.runtime, st.dump(&graph));
            }
        }
    }
}
