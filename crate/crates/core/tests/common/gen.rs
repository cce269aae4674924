//! Random small pipelines and random legal schedules.

use rand::seq::SliceRandom;
use rand::Rng;

use gpusched::enumerate::{
    enumerate_compute_locations, enumerate_serial_tilings, enumerate_thread_tilings, post_serial_extents, PruneThresholds,
    TilingOptions,
};
use gpusched::loopnest::{Decision, LoopNestState};
use gpusched::pipeline::{parse_pipeline, PipelineGraph};

/// Shape limits for [`random_pipeline_text`].
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub max_funcs: usize,
    pub max_extent: u64,
    pub max_rank: usize,
    /// Allow strided and broadcast reads and update stages.
    pub exotic: bool,
    /// Every extent is a multiple of this.
    pub extent_step: u64,
}

const DIM_NAMES: [&str; 2] = ["x", "y"];

/// A random pipeline: one input and up to `max_funcs` funcs, each reading
/// its predecessor and sometimes an earlier func. The last func is the
/// output.
pub fn random_pipeline_text(rng: &mut impl Rng, shape: Shape) -> String {
    let rank = rng.gen_range(1..=shape.max_rank);
    let step = shape.extent_step.max(1);
    let extents: Vec<u64> = (0..rank).map(|_| step * rng.gen_range(1..=(shape.max_extent / step).max(1))).collect();
    let dims = |ext: &[u64]| {
        ext.iter().zip(DIM_NAMES).map(|(e, n)| format!("{n}={e}")).collect::<Vec<_>>().join(",")
    };
    let n = rng.gen_range(1..=shape.max_funcs);
    let elem = |rng: &mut dyn rand::RngCore| *[1u32, 2, 4, 8].choose(rng).unwrap();
    let mut text = format!("pipeline random\ninput in dims ({}) bytes {}\n", dims(&extents), elem(rng));
    let names: Vec<String> = std::iter::once("in".to_string()).chain((0..n).map(|i| format!("f{i}"))).collect();
    for i in 1..=n {
        let name = &names[i];
        text += &format!("func {name} dims ({}) bytes {}\n", dims(&extents), elem(rng));
        text += &format!("stage {name} ops add={},mul={}\n", rng.gen_range(0..=10), rng.gen_range(0..=2));
        let mut producers = vec![i - 1];
        if i >= 2 && rng.gen_bool(0.35) {
            producers.push(rng.gen_range(0..i - 1));
        }
        for p in producers {
            text += &read_line(rng, name, &names[p], rank, shape.exotic);
        }
        if shape.exotic && rng.gen_bool(0.15) {
            text += &format!("stage {name} ops add=1\n");
            text += &read_line(rng, name, name, rank, false);
            text += &read_line(rng, name, &names[0], rank, false);
        }
    }
    text += &format!("output {}\n", names[n]);
    text
}

fn read_line(rng: &mut impl Rng, consumer: &str, producer: &str, rank: usize, exotic: bool) -> String {
    let mut line = format!("read {consumer} from {producer}");
    for d in 0..rank {
        let roll = if exotic { rng.gen_range(0..10) } else { 0 };
        let (cdim, stride, lo, hi) = match roll {
            8 => ("_".to_string(), 1, 0, rng.gen_range(0..=2)),
            9 => (DIM_NAMES[d].to_string(), 2, 0, 1),
            _ => (DIM_NAMES[d].to_string(), 1, rng.gen_range(-1..=0), rng.gen_range(0..=1)),
        };
        line += &format!(" dim {cdim} stride {stride} lo {lo} hi {hi}");
    }
    line + "\n"
}

pub fn random_pipeline(rng: &mut impl Rng, shape: Shape) -> PipelineGraph {
    let text = random_pipeline_text(rng, shape);
    parse_pipeline(&text).unwrap_or_else(|e| panic!("generated pipeline does not parse: {e}\n{text}"))
}

/// Applies uniformly random legal decisions to every func in scheduling
/// order and lowers the result. Returns `None` if a choice is rejected.
pub fn random_schedule(graph: &PipelineGraph, warp: u64, opts: &TilingOptions, rng: &mut impl Rng) -> Option<LoopNestState> {
    let mut st = LoopNestState::new(graph);
    let thresholds = PruneThresholds::default();
    for f in graph.schedule_order() {
        let locs = enumerate_compute_locations(&st, f, graph, &thresholds).ok()?;
        let d = locs.choose(rng)?.clone();
        st = st.apply(graph, f, d.clone()).ok()?;
        match d {
            Decision::FuseAtBlock(_) => {
                let extents: Vec<u64> = st.geometry(graph).func(f)?.realization.iter().map(|r| r.extent()).collect();
                let s = enumerate_serial_tilings(&extents, warp, opts).choose(rng)?.clone();
                st = st.apply(graph, f, Decision::TileSerial(s)).ok()?;
            }
            Decision::ComputeRoot => {
                let extents = graph.func(f).extents();
                let s = enumerate_serial_tilings(&extents, warp, opts).choose(rng)?.clone();
                let t = enumerate_thread_tilings(&post_serial_extents(&extents, &s), opts).choose(rng)?.clone();
                st = st.apply(graph, f, Decision::TileSerial(s)).ok()?;
                st = st.apply(graph, f, Decision::TileThread(t)).ok()?;
            }
            _ => {}
        }
    }
    st.lower(graph).ok()
}
