//! Learned cost model: a two-tower network maps each stage's features to 30
//! positive coefficients, which weight the terms of a closed-form per-stage
//! cost. Stage costs sum to the pipeline cost.
//!
//! Costs are in picoseconds so that they can be compared directly with
//! oracle runtimes after scaling.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::featurize::{AlgorithmFeatures, ScheduleFeatures, StageFeatures};

pub const NUM_COEFFS: usize = 30;

/// Picoseconds per second: cost units per unit of oracle runtime.
pub const COST_UNITS_PER_SECOND: f64 = 1e12;

const WEIGHTS_MAGIC: &str = "gpusched-weights";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CostModelError {
    #[error("coefficient c{index} is not positive ({value})")]
    NonPositiveCoefficient { index: usize, value: f64 },
    #[error("feature vector has {got} entries, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("weights file: {0}")]
    Format(String),
    #[error("training loss is not finite at sample {sample} ({id})")]
    NonFiniteLoss { sample: usize, id: String },
    #[error("training needs at least one sample")]
    EmptyDataset,
}

/// Per-stage cost broken into its components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageCost {
    pub compute: f64,
    pub load: f64,
    pub store: f64,
    pub malloc: f64,
    pub parallelism: f64,
    pub working_set: f64,
    pub total: f64,
}

fn select(cond: bool, t: f64, f: f64) -> f64 {
    if cond {
        t
    } else {
        f
    }
}

/// Evaluates the per-stage cost formula for one stage.
pub fn stage_cost(s: &ScheduleFeatures, c: &[f64; NUM_COEFFS]) -> Result<StageCost, CostModelError> {
    if let Some((index, &value)) = c.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(CostModelError::NonPositiveCoefficient { index, value });
    }
    Ok(stage_cost_unchecked(s, c))
}

fn stage_cost_unchecked(s: &ScheduleFeatures, c: &[f64; NUM_COEFFS]) -> StageCost {
    let not_inlined = s.inlined_calls == 0.0;

    let mut compute_cost = select(not_inlined, s.num_scalars * c[1], s.num_scalars * c[3]);
    let num_threads = s.num_blocks * s.num_threads_per_block;
    let points_computed = num_threads * s.points_computed_per_thread;
    compute_cost += select(not_inlined, points_computed * c[19], points_computed * c[4]);
    let idle_core_wastage = (s.num_tasks / s.num_cores).ceil() / s.tasks_per_core.max(1.0);
    compute_cost *= idle_core_wastage;
    compute_cost /= select(not_inlined, 1.0 - s.idle_lane_wastage, 1.0);

    let mut load_cost = s.num_realizations
        * (c[5] * s.unique_global_lines_read_per_realization
            + c[16] * s.unique_shared_lines_read_per_realization
            + c[8] * s.unique_register_lines_read_per_realization
            + c[6] * s.unique_global_bytes_read_per_realization
            + c[20] * s.unique_shared_bytes_read_per_realization
            + c[7] * s.unique_register_bytes_read_per_realization
            + c[18] * s.unique_global_lines_read_per_thread
            + c[17] * s.unique_shared_lines_read_per_thread
            + c[2] * s.unique_register_lines_read_per_thread
            + c[13] * s.unique_global_bytes_read_per_thread
            + c[11] * s.unique_shared_bytes_read_per_thread
            + c[0] * s.unique_register_bytes_read_per_thread)
        + c[10] * s.num_scalars * s.unique_bytes_read_per_point
        + c[12] * s.num_scalars * s.unique_lines_read_per_point
        + c[14] * s.num_tasks * s.unique_bytes_read_per_task
        + c[15] * s.num_tasks * s.unique_lines_read_per_task;

    let mut global_mem_load_cost = s.num_blocks * s.num_global_mem_loads_per_block;
    global_mem_load_cost *= select(not_inlined, 1.0 / s.global_mem_load_efficiency, 1.0);
    let mut shared_mem_load_cost = s.num_blocks * s.num_shared_mem_loads_per_block;
    shared_mem_load_cost *= select(not_inlined, 1.0 / s.shared_mem_load_efficiency, 1.0);
    load_cost += global_mem_load_cost + shared_mem_load_cost;

    let shared_mem_store_cost = c[29] * s.num_blocks * s.num_shared_mem_stores_per_block;
    let mut global_mem_store_cost = c[21] * s.num_blocks * s.num_global_mem_stores_per_block;
    global_mem_store_cost *= select(not_inlined, 1.0 / s.global_mem_store_efficiency, 1.0);
    let mut store_cost = shared_mem_store_cost + global_mem_store_cost;
    let cost_of_false_sharing = select(
        s.inner_parallelism > 1.0,
        c[22] * s.num_scalars / s.global_innermost_bytes_at_task.max(1.0),
        0.0,
    );
    store_cost += cost_of_false_sharing;

    let cost_of_malloc = c[24] * s.num_realizations;
    let cost_of_parallel_launches = s.num_productions * select(s.inner_parallelism > 1.0, c[25], 0.0);
    let cost_of_parallel_tasks = s.num_productions * (s.inner_parallelism - 1.0) * c[26];
    let cost_of_parallelism = cost_of_parallel_tasks + cost_of_parallel_launches;
    let cost_of_working_set = s.working_set * c[9];

    let total = compute_cost + store_cost + load_cost + cost_of_malloc + cost_of_parallelism + cost_of_working_set;
    StageCost {
        compute: compute_cost,
        load: load_cost,
        store: store_cost,
        malloc: cost_of_malloc,
        parallelism: cost_of_parallelism,
        working_set: cost_of_working_set,
        total,
    }
}

/// The stage cost is affine in the coefficients: returns `(g, k)` with
/// `total = g . c + k`.
pub fn stage_cost_linear(s: &ScheduleFeatures) -> ([f64; NUM_COEFFS], f64) {
    let zero = [0.0; NUM_COEFFS];
    let k = stage_cost_unchecked(s, &zero).total;
    let mut g = [0.0; NUM_COEFFS];
    for (i, gi) in g.iter_mut().enumerate() {
        let mut e = zero;
        e[i] = 1.0;
        *gi = stage_cost_unchecked(s, &e).total - k;
    }
    (g, k)
}

/// Layer widths of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub algo_hidden: usize,
    pub sched_hidden: usize,
    pub head_hidden: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        NetShape { algo_hidden: 32, sched_hidden: 32, head_hidden: 64 }
    }
}

const ALGO_IN: usize = AlgorithmFeatures::LEN;
const SCHED_IN: usize = ScheduleFeatures::LEN;

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    algo_w: usize,
    algo_b: usize,
    sched_w: usize,
    sched_b: usize,
    head_w: usize,
    head_b: usize,
    out_w: usize,
    out_b: usize,
    len: usize,
}

impl NetShape {
    fn layout(&self) -> Layout {
        let (a, s, h) = (self.algo_hidden, self.sched_hidden, self.head_hidden);
        let algo_w = 0;
        let algo_b = algo_w + a * ALGO_IN;
        let sched_w = algo_b + a;
        let sched_b = sched_w + s * SCHED_IN;
        let head_w = sched_b + s;
        let head_b = head_w + h * (a + s);
        let out_w = head_b + h;
        let out_b = out_w + NUM_COEFFS * h;
        Layout { algo_w, algo_b, sched_w, sched_b, head_w, head_b, out_w, out_b, len: out_b + NUM_COEFFS }
    }

    /// `(name, rows, cols, offset)` of every tensor.
    fn tensors(&self) -> [(&'static str, usize, usize, usize); 8] {
        let l = self.layout();
        let (a, s, h) = (self.algo_hidden, self.sched_hidden, self.head_hidden);
        [
            ("algo_w", a, ALGO_IN, l.algo_w),
            ("algo_b", a, 1, l.algo_b),
            ("sched_w", s, SCHED_IN, l.sched_w),
            ("sched_b", s, 1, l.sched_b),
            ("head_w", h, a + s, l.head_w),
            ("head_b", h, 1, l.head_b),
            ("out_w", NUM_COEFFS, h, l.out_w),
            ("out_b", NUM_COEFFS, 1, l.out_b),
        ]
    }
}

/// Network weights as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModelWeights {
    pub shape: NetShape,
    pub params: Vec<f64>,
    /// Loss at the end of the last training run, if any.
    pub final_loss: Option<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], b: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out.push(b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone, Default)]
struct Activations {
    xa: Vec<f64>,
    xs: Vec<f64>,
    emb: Vec<f64>,
    z: Vec<f64>,
    o: Vec<f64>,
}

impl CostModelWeights {
    /// Uniformly initialized weights (Glorot range); the output bias starts
    /// at zero.
    pub fn random(shape: NetShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; shape.layout().len];
        for (name, rows, cols, off) in shape.tensors() {
            if name.ends_with("_b") {
                continue;
            }
            let a = (6.0 / (rows + cols) as f64).sqrt();
            for p in &mut params[off..off + rows * cols] {
                *p = rng.gen_range(-a..a);
            }
        }
        CostModelWeights { shape, params, final_loss: None }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn forward(&self, algo: &[f64], sched: &[f64], act: &mut Activations) {
        let sh = self.shape;
        let l = sh.layout();
        let p = &self.params;
        act.xa.clear();
        act.xa.extend(algo.iter().map(|v| v.max(0.0).ln_1p()));
        act.xs.clear();
        act.xs.extend(sched.iter().map(|v| v.max(0.0).ln_1p()));
        let mut ha = Vec::new();
        matvec(&p[l.algo_w..], sh.algo_hidden, ALGO_IN, &act.xa, &p[l.algo_b..], &mut ha);
        let mut hs = Vec::new();
        matvec(&p[l.sched_w..], sh.sched_hidden, SCHED_IN, &act.xs, &p[l.sched_b..], &mut hs);
        act.emb.clear();
        act.emb.extend(ha.iter().chain(&hs).map(|v| v.tanh()));
        let mut z = Vec::new();
        matvec(&p[l.head_w..], sh.head_hidden, sh.algo_hidden + sh.sched_hidden, &act.emb, &p[l.head_b..], &mut z);
        act.z.clear();
        act.z.extend(z.iter().map(|v| v.tanh()));
        matvec(&p[l.out_w..], NUM_COEFFS, sh.head_hidden, &act.z, &p[l.out_b..], &mut act.o);
    }

    fn coeffs_from(o: &[f64]) -> [f64; NUM_COEFFS] {
        let mut c = [0.0; NUM_COEFFS];
        for (ci, &oi) in c.iter_mut().zip(o) {
            *ci = softplus(oi) + 1e-10;
        }
        c
    }

    /// Positive coefficients for one stage.
    pub fn predict_coefficients(
        &self,
        algo: &AlgorithmFeatures,
        sched: &ScheduleFeatures,
    ) -> [f64; NUM_COEFFS] {
        let mut act = Activations::default();
        self.forward(&algo.to_vec(), &sched.to_vec(), &mut act);
        Self::coeffs_from(&act.o)
    }

    /// Accumulates the gradient of `dloss/dc . c(params)` into `grad`.
    fn backward(&self, act: &Activations, dc: &[f64; NUM_COEFFS], grad: &mut [f64]) {
        let sh = self.shape;
        let l = sh.layout();
        let p = &self.params;
        let emb_len = sh.algo_hidden + sh.sched_hidden;
        let d_o: Vec<f64> = dc.iter().zip(&act.o).map(|(d, o)| d * sigmoid(*o)).collect();
        let mut dz = vec![0.0; sh.head_hidden];
        for (r, &g) in d_o.iter().enumerate() {
            grad[l.out_b + r] += g;
            let row = l.out_w + r * sh.head_hidden;
            for j in 0..sh.head_hidden {
                grad[row + j] += g * act.z[j];
                dz[j] += g * p[row + j];
            }
        }
        let mut demb = vec![0.0; emb_len];
        for j in 0..sh.head_hidden {
            let du = dz[j] * (1.0 - act.z[j] * act.z[j]);
            grad[l.head_b + j] += du;
            let row = l.head_w + j * emb_len;
            for k in 0..emb_len {
                grad[row + k] += du * act.emb[k];
                demb[k] += du * p[row + k];
            }
        }
        for k in 0..sh.algo_hidden {
            let du = demb[k] * (1.0 - act.emb[k] * act.emb[k]);
            grad[l.algo_b + k] += du;
            let row = l.algo_w + k * ALGO_IN;
            for (i, x) in act.xa.iter().enumerate() {
                grad[row + i] += du * x;
            }
        }
        for k in 0..sh.sched_hidden {
            let e = act.emb[sh.algo_hidden + k];
            let du = demb[sh.algo_hidden + k] * (1.0 - e * e);
            grad[l.sched_b + k] += du;
            let row = l.sched_w + k * SCHED_IN;
            for (i, x) in act.xs.iter().enumerate() {
                grad[row + i] += du * x;
            }
        }
    }

    /// Text form: a header, the layer widths, then each named tensor with its
    /// shape followed by its row-major values.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{WEIGHTS_MAGIC} {WEIGHTS_VERSION}\nshape {} {} {}\n",
            self.shape.algo_hidden, self.shape.sched_hidden, self.shape.head_hidden
        );
        if let Some(l) = self.final_loss {
            let _ = writeln!(out, "final_loss {l:e}");
        }
        for (name, rows, cols, off) in self.shape.tensors() {
            let _ = writeln!(out, "tensor {name} {rows} {cols}");
            for r in 0..rows {
                let row: Vec<String> = self.params[off + r * cols..off + (r + 1) * cols].iter().map(|v| format!("{v:e}")).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CostModelError> {
        let bad = |m: &str| CostModelError::Format(m.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file"))?.split_whitespace().collect();
        if header.first() != Some(&WEIGHTS_MAGIC) {
            return Err(bad("missing header"));
        }
        if header.get(1) != Some(&WEIGHTS_VERSION.to_string().as_str()) {
            return Err(bad("unsupported version"));
        }
        let shape_line: Vec<&str> = lines.next().ok_or_else(|| bad("missing shape"))?.split_whitespace().collect();
        if shape_line.len() != 4 || shape_line[0] != "shape" {
            return Err(bad("malformed shape line"));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|_| bad("bad layer width"));
        let shape = NetShape { algo_hidden: dim(shape_line[1])?, sched_hidden: dim(shape_line[2])?, head_hidden: dim(shape_line[3])? };
        let mut params = vec![0.0; shape.layout().len];
        let mut final_loss = None;
        let tensors = shape.tensors();
        let mut next_tensor = 0;
        while let Some(line) = lines.next() {
            let words: Vec<&str> = line.split_whitespace().collect();
            match words[0] {
                "final_loss" => {
                    final_loss = Some(words.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad final_loss"))?)
                }
                "tensor" => {
                    let (name, rows, cols, off) = *tensors.get(next_tensor).ok_or_else(|| bad("too many tensors"))?;
                    if words.len() != 4 || words[1] != name || dim(words[2])? != rows || dim(words[3])? != cols {
                        return Err(CostModelError::Format(format!("expected tensor {name} {rows} {cols}")));
                    }
                    for r in 0..rows {
                        let row = lines.next().ok_or_else(|| bad("truncated tensor"))?;
                        let vals: Vec<f64> = row
                            .split_whitespace()
                            .map(|v| v.parse::<f64>().map_err(|_| bad("bad value")))
                            .collect::<Result<_, _>>()?;
                        if vals.len() != cols || vals.iter().any(|v| !v.is_finite()) {
                            return Err(CostModelError::Format(format!("bad row {r} in tensor {name}")));
                        }
                        params[off + r * cols..off + (r + 1) * cols].copy_from_slice(&vals);
                    }
                    next_tensor += 1;
                }
                other => return Err(CostModelError::Format(format!("unexpected `{other}`"))),
            }
        }
        if next_tensor != tensors.len() {
            return Err(bad("missing tensors"));
        }
        Ok(CostModelWeights { shape, params, final_loss })
    }
}

/// Predicted cost of a whole pipeline and of each stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineCost {
    pub total: f64,
    pub per_stage: Vec<StageCost>,
}

/// Sum of per-stage costs under the network's coefficients.
pub fn pipeline_cost(stages: &[StageFeatures], weights: &CostModelWeights) -> PipelineCost {
    let per_stage: Vec<StageCost> = stages
        .iter()
        .map(|s| stage_cost_unchecked(&s.schedule, &weights.predict_coefficients(&s.algorithm, &s.schedule)))
        .collect();
    PipelineCost { total: per_stage.iter().map(|c| c.total).sum(), per_stage }
}

/// Anything that assigns a cost to each featurized stage.
pub trait CostModel: Sync {
    fn stage_costs(&self, stages: &[StageFeatures]) -> Vec<f64>;

    fn total_cost(&self, stages: &[StageFeatures]) -> f64 {
        self.stage_costs(stages).iter().sum()
    }
}

impl CostModel for CostModelWeights {
    fn stage_costs(&self, stages: &[StageFeatures]) -> Vec<f64> {
        pipeline_cost(stages, self).per_stage.iter().map(|c| c.total).collect()
    }
}

/// The cost formula with the same coefficients for every stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedCoefficients(pub [f64; NUM_COEFFS]);

impl FixedCoefficients {
    pub fn unit() -> Self {
        FixedCoefficients([1.0; NUM_COEFFS])
    }
}

impl CostModel for FixedCoefficients {
    fn stage_costs(&self, stages: &[StageFeatures]) -> Vec<f64> {
        stages.iter().map(|s| stage_cost_unchecked(&s.schedule, &self.0).total).collect()
    }
}

/// One benchmarked schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub stages: Vec<(AlgorithmFeatures, ScheduleFeatures)>,
    /// Seconds.
    pub runtime: f64,
    pub pipeline: String,
    pub schedule_id: String,
}

impl TrainingSample {
    pub fn from_features(stages: &[StageFeatures], runtime: f64, pipeline: &str, schedule_id: &str) -> Self {
        TrainingSample {
            stages: stages.iter().map(|s| (s.algorithm, s.schedule)).collect(),
            runtime,
            pipeline: pipeline.to_string(),
            schedule_id: schedule_id.to_string(),
        }
    }
}

/// A sample with its cost decomposition precomputed.
struct Prepared {
    stages: Vec<(Vec<f64>, Vec<f64>, [f64; NUM_COEFFS], f64)>,
    target: f64,
}

fn prepare(samples: &[TrainingSample]) -> Vec<Prepared> {
    samples
        .iter()
        .map(|s| Prepared {
            stages: s
                .stages
                .iter()
                .map(|(a, f)| {
                    let (g, k) = stage_cost_linear(f);
                    (a.to_vec(), f.to_vec(), g, k)
                })
                .collect(),
            target: (s.runtime * COST_UNITS_PER_SECOND).ln(),
        })
        .collect()
}

/// Squared log error of one sample; accumulates its gradient if asked.
fn sample_loss(w: &CostModelWeights, s: &Prepared, grad: Option<&mut [f64]>) -> f64 {
    let mut acts = Vec::with_capacity(s.stages.len());
    let mut cost = 0.0;
    for (a, f, g, k) in &s.stages {
        let mut act = Activations::default();
        w.forward(a, f, &mut act);
        let c = CostModelWeights::coeffs_from(&act.o);
        cost += g.iter().zip(&c).map(|(g, c)| g * c).sum::<f64>() + k;
        acts.push(act);
    }
    let err = cost.ln() - s.target;
    if let Some(grad) = grad {
        let scale = 2.0 * err / cost;
        for ((_, _, g, _), act) in s.stages.iter().zip(&acts) {
            let mut dc = [0.0; NUM_COEFFS];
            for (d, gi) in dc.iter_mut().zip(g) {
                *d = scale * gi;
            }
            w.backward(act, &dc, grad);
        }
    }
    err * err
}

/// Mean loss and its gradient with respect to every parameter.
pub fn loss_and_gradient(w: &CostModelWeights, samples: &[TrainingSample]) -> (f64, Vec<f64>) {
    let prepared = prepare(samples);
    let mut grad = vec![0.0; w.num_params()];
    let mut loss = 0.0;
    for s in &prepared {
        loss += sample_loss(w, s, Some(&mut grad));
    }
    let n = prepared.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Mean loss over `samples`.
pub fn loss(w: &CostModelWeights, samples: &[TrainingSample]) -> f64 {
    let prepared = prepare(samples);
    prepared.iter().map(|s| sample_loss(w, s, None)).sum::<f64>() / prepared.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Gradients with a larger norm are scaled down to this norm.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 1e-3, momentum: 0.9, epochs: 100, batch_size: 16, clip_norm: 10.0, seed: 0 }
    }
}

/// Stochastic gradient descent with momentum, starting from `init`.
pub fn train(
    samples: &[TrainingSample],
    init: &CostModelWeights,
    cfg: &TrainConfig,
) -> Result<CostModelWeights, CostModelError> {
    if samples.is_empty() {
        return Err(CostModelError::EmptyDataset);
    }
    let prepared = prepare(samples);
    let mut w = init.clone();
    let mut velocity = vec![0.0; w.num_params()];
    let mut grad = vec![0.0; w.num_params()];
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let l = sample_loss(&w, &prepared[i], Some(&mut grad));
                if !l.is_finite() {
                    return Err(CostModelError::NonFiniteLoss { sample: i, id: samples[i].schedule_id.clone() });
                }
            }
            let n = chunk.len() as f64;
            let norm = grad.iter().map(|g| (g / n) * (g / n)).sum::<f64>().sqrt();
            let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 } / n;
            for ((p, v), g) in w.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g * scale;
                *p += *v;
            }
        }
    }
    let final_loss = prepared.iter().map(|s| sample_loss(&w, s, None)).sum::<f64>() / prepared.len() as f64;
    if !final_loss.is_finite() {
        return Err(CostModelError::NonFiniteLoss { sample: 0, id: samples[0].schedule_id.clone() });
    }
    w.final_loss = Some(final_loss);
    Ok(w)
}
