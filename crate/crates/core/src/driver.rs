//! Operating modes: One Shot, Top-k and Autotune.
//!
//! A batch is made of one or more beam-search samples and a number of greedy
//! samples that differ only by seed. Every sample's winner is featurized and
//! costed by the model; the spill predicate of the oracle stands in for
//! compilation and removes spilling samples before any pick is made.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::costmodel::{train, CostModel, CostModelError, CostModelWeights, NetShape, TrainConfig, TrainingSample};
use crate::featurize::{featurize, AlgorithmFeatures, ScheduleFeatures, StageFeatures};
use crate::loopnest::{mix, LoopNestState, ScheduleError};
use crate::machine::{simulate_runtime, MachineError, MachineParams, OracleResult};
use crate::pipeline::{FuncId, PipelineGraph};
use crate::search::{schedule_pipeline, SearchConfig, SearchError};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("no sample could be scheduled; first failure: {0}")]
    NoSamples(SearchError),
    #[error("no sample survived benchmarking")]
    NothingBenchmarked,
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    CostModel(#[from] CostModelError),
    #[error("sample file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    OneShot,
    TopK(usize),
    Autotune { iterations: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub beam_samples: usize,
    pub greedy_samples: usize,
    pub seed: u64,
    pub beam: SearchConfig,
    pub greedy: SearchConfig,
    /// Used by autotune between iterations.
    pub train: TrainConfig,
    /// Shape of the randomly initialized network in autotune.
    pub net_shape: NetShape,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::OneShot,
            beam_samples: 1,
            greedy_samples: 79,
            seed: 0,
            beam: SearchConfig::beam(),
            greedy: SearchConfig::greedy(),
            train: TrainConfig::default(),
            net_shape: NetShape::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn samples_per_batch(&self) -> usize {
        self.beam_samples + self.greedy_samples
    }

    /// Autotune with one beam sample per batch and the rest greedy.
    pub fn autotune(iterations: usize, batch_size: usize) -> Self {
        RunConfig {
            mode: Mode::Autotune { iterations },
            beam_samples: batch_size.min(1),
            greedy_samples: batch_size.saturating_sub(1),
            ..RunConfig::default()
        }
    }

    /// Applies `f` to both search configs.
    pub fn with_search(mut self, f: impl Fn(&mut SearchConfig)) -> Self {
        f(&mut self.beam);
        f(&mut self.greedy);
        self
    }

    pub fn validate(&self) -> Result<(), DriverError> {
        if self.samples_per_batch() == 0 {
            return Err(DriverError::Config("a batch needs at least one sample".into()));
        }
        match self.mode {
            Mode::TopK(0) => Err(DriverError::Config("k must be at least 1".into())),
            Mode::Autotune { iterations: 0 } => Err(DriverError::Config("autotune needs at least one iteration".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Beam,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpillInfo {
    pub spilled: bool,
    pub bytes: u64,
}

/// One generated schedule and everything known about it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub pipeline: String,
    pub batch: usize,
    pub index: usize,
    pub seed: u64,
    pub kind: SampleKind,
    /// Decision list in the format read by [`LoopNestState::replay`].
    pub schedule: String,
    pub features: Vec<StageFeatures>,
    pub predicted_cost: f64,
    pub spill: Option<SpillInfo>,
    pub oracle: Option<OracleResult>,
}

impl SampleRecord {
    pub fn runtime(&self) -> Option<f64> {
        self.oracle.map(|o| o.runtime)
    }

    pub fn state(&self, graph: &PipelineGraph) -> Result<LoopNestState, ScheduleError> {
        LoopNestState::replay(graph, &self.schedule)
    }

    pub fn training_sample(&self) -> Option<TrainingSample> {
        let id = format!("{}/{}", self.batch, self.index);
        self.runtime().map(|r| TrainingSample::from_features(&self.features, r, &self.pipeline, &id))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("gpusched-sample 1\n");
        let kind = match self.kind {
            SampleKind::Beam => "beam",
            SampleKind::Greedy => "greedy",
        };
        let _ = writeln!(out, "pipeline {}", self.pipeline);
        let _ = writeln!(out, "batch {}\nindex {}\nseed {}\nkind {kind}", self.batch, self.index, self.seed);
        let _ = writeln!(out, "predicted_cost {}", self.predicted_cost);
        if let Some(s) = self.spill {
            let _ = writeln!(out, "spill {} {}", s.spilled, s.bytes);
        }
        if let Some(o) = self.oracle {
            let _ = writeln!(out, "oracle {} {} {}", o.runtime, o.spilled_registers, o.spill_bytes);
        }
        out.push_str("schedule\n");
        out.push_str(&self.schedule);
        out.push_str("end\n");
        let _ = writeln!(out, "features {}", self.features.len());
        let join = |v: Vec<f64>| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        for f in &self.features {
            let _ = writeln!(
                out,
                "stage {} {} {} {} {}",
                f.func.0, f.stage, f.kernel, f.global_traffic_bytes, f.load_instructions_per_thread
            );
            let _ = writeln!(out, "algorithm {}", join(f.algorithm.to_vec()));
            let _ = writeln!(out, "schedule {}", join(f.schedule.to_vec()));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DriverError> {
        let lines: Vec<&str> = text.lines().collect();
        let bad = |line: usize, msg: &str| DriverError::Format { line: line + 1, msg: msg.to_string() };
        if lines.first().map(|l| l.trim()) != Some("gpusched-sample 1") {
            return Err(bad(0, "missing `gpusched-sample 1` header"));
        }
        let mut rec = SampleRecord {
            pipeline: String::new(),
            batch: 0,
            index: 0,
            seed: 0,
            kind: SampleKind::Greedy,
            schedule: String::new(),
            features: Vec::new(),
            predicted_cost: f64::NAN,
            spill: None,
            oracle: None,
        };
        let num = |i: usize, s: Option<&str>| -> Result<f64, DriverError> {
            s.and_then(|v| v.parse().ok()).ok_or_else(|| bad(i, "expected a number"))
        };
        let int = |i: usize, s: Option<&str>| -> Result<u64, DriverError> {
            s.and_then(|v| v.parse().ok()).ok_or_else(|| bad(i, "expected an integer"))
        };
        let flag = |i: usize, s: Option<&str>| -> Result<bool, DriverError> {
            s.and_then(|v| v.parse().ok()).ok_or_else(|| bad(i, "expected true or false"))
        };
        let mut i = 1;
        while i < lines.len() {
            let mut w = lines[i].split_whitespace();
            match w.next() {
                None => {}
                Some("pipeline") => rec.pipeline = w.collect::<Vec<_>>().join(" "),
                Some("batch") => rec.batch = int(i, w.next())? as usize,
                Some("index") => rec.index = int(i, w.next())? as usize,
                Some("seed") => rec.seed = int(i, w.next())?,
                Some("kind") => {
                    rec.kind = match w.next() {
                        Some("beam") => SampleKind::Beam,
                        Some("greedy") => SampleKind::Greedy,
                        _ => return Err(bad(i, "kind must be beam or greedy")),
                    }
                }
                Some("predicted_cost") => rec.predicted_cost = num(i, w.next())?,
                Some("spill") => rec.spill = Some(SpillInfo { spilled: flag(i, w.next())?, bytes: int(i, w.next())? }),
                Some("oracle") => {
                    rec.oracle = Some(OracleResult {
                        runtime: num(i, w.next())?,
                        spilled_registers: flag(i, w.next())?,
                        spill_bytes: int(i, w.next())?,
                    })
                }
                Some("schedule") => {
                    i += 1;
                    while i < lines.len() && lines[i].trim() != "end" {
                        rec.schedule.push_str(lines[i].trim());
                        rec.schedule.push('\n');
                        i += 1;
                    }
                    if i == lines.len() {
                        return Err(bad(i - 1, "schedule block has no `end`"));
                    }
                }
                Some("features") => {
                    let n = int(i, w.next())? as usize;
                    for _ in 0..n {
                        let head = i + 1;
                        let get = |j: usize, tag: &str| -> Result<Vec<&str>, DriverError> {
                            let l = lines.get(j).ok_or_else(|| bad(j, "truncated features"))?;
                            let mut ws = l.split_whitespace();
                            if ws.next() != Some(tag) {
                                return Err(bad(j, &format!("expected `{tag}`")));
                            }
                            Ok(ws.collect())
                        };
                        let h = get(head, "stage")?;
                        let vals = |j: usize, tag: &str| -> Result<Vec<f64>, DriverError> {
                            get(j, tag)?.iter().map(|v| v.parse().map_err(|_| bad(j, "expected a number"))).collect()
                        };
                        let algorithm = AlgorithmFeatures::from_slice(&vals(head + 1, "algorithm")?)
                            .ok_or_else(|| bad(head + 1, "wrong algorithm feature count"))?;
                        let schedule = ScheduleFeatures::from_slice(&vals(head + 2, "schedule")?)
                            .ok_or_else(|| bad(head + 2, "wrong schedule feature count"))?;
                        rec.features.push(StageFeatures {
                            func: FuncId(int(head, h.first().copied())? as usize),
                            stage: int(head, h.get(1).copied())? as usize,
                            kernel: int(head, h.get(2).copied())? as usize,
                            schedule,
                            algorithm,
                            global_traffic_bytes: num(head, h.get(3).copied())?,
                            load_instructions_per_thread: num(head, h.get(4).copied())?,
                        });
                        i += 3;
                    }
                }
                Some(other) => return Err(bad(i, &format!("unknown key `{other}`"))),
            }
            i += 1;
        }
        if rec.predicted_cost.is_nan() {
            return Err(bad(0, "missing predicted_cost"));
        }
        Ok(rec)
    }
}

/// Indices of the records that survive compilation: all non-spilling ones,
/// or, if every record spills, those spilling at most 1.5 times the least.
pub fn surviving_indices(spills: &[SpillInfo]) -> Vec<usize> {
    let clean: Vec<usize> = (0..spills.len()).filter(|&i| !spills[i].spilled).collect();
    if !clean.is_empty() || spills.is_empty() {
        return clean;
    }
    let least = spills.iter().map(|s| s.bytes).min().unwrap_or(0);
    (0..spills.len()).filter(|&i| 2 * spills[i].bytes <= 3 * least).collect()
}

/// Drops spilling records. Records without spill information count as clean.
pub fn post_compile_filter(records: Vec<SampleRecord>) -> Vec<SampleRecord> {
    let spills: Vec<SpillInfo> = records.iter().map(|r| r.spill.unwrap_or(SpillInfo { spilled: false, bytes: 0 })).collect();
    let keep = surviving_indices(&spills);
    let mut keep = keep.into_iter().peekable();
    records
        .into_iter()
        .enumerate()
        .filter_map(|(i, r)| if keep.peek() == Some(&i) { keep.next().map(|_| r) } else { None })
        .collect()
}

/// Seed of sample `index` in batch `batch`.
pub fn sample_seed(base: u64, batch: usize, index: usize) -> u64 {
    mix(mix(base, batch as u64), index as u64)
}

/// Runs every search of one batch, concurrently, and costs the winners.
/// Samples whose search fails are left out; the batch fails only if all do.
pub fn generate_batch(
    graph: &PipelineGraph,
    params: &MachineParams,
    cfg: &RunConfig,
    model: &dyn CostModel,
    batch: usize,
) -> Result<Vec<SampleRecord>, DriverError> {
    cfg.validate()?;
    let results: Vec<Result<SampleRecord, DriverError>> = (0..cfg.samples_per_batch())
        .into_par_iter()
        .map(|index| {
            let (kind, base) = if index < cfg.beam_samples {
                (SampleKind::Beam, &cfg.beam)
            } else {
                (SampleKind::Greedy, &cfg.greedy)
            };
            let seed = sample_seed(cfg.seed, batch, index);
            let search = SearchConfig { seed, ..base.clone() };
            let result = schedule_pipeline(graph, params, &search, model)?;
            let best = result.best();
            let features = featurize(&best.lower(graph)?, graph, params)?;
            let predicted_cost = model.total_cost(&features);
            Ok(SampleRecord {
                pipeline: graph.name.clone(),
                batch,
                index,
                seed,
                kind,
                schedule: best.dump(graph),
                features,
                predicted_cost,
                spill: None,
                oracle: None,
            })
        })
        .collect();
    let mut records = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(DriverError::Search(e)) if first_err.is_none() => first_err = Some(e),
            Err(DriverError::Search(_)) => {}
            Err(e) => return Err(e),
        }
    }
    match (records.is_empty(), first_err) {
        (true, Some(e)) => Err(DriverError::NoSamples(e)),
        _ => Ok(records),
    }
}

/// Fills in spill information without keeping the timing.
pub fn compile_check(graph: &PipelineGraph, params: &MachineParams, records: &mut [SampleRecord]) {
    records.par_iter_mut().for_each(|r| {
        r.spill = r
            .state(graph)
            .ok()
            .and_then(|s| simulate_runtime(&s, graph, params).ok())
            .map(|o| SpillInfo { spilled: o.spilled_registers, bytes: o.spill_bytes });
    });
}

/// Runs the oracle on a record. Returns false if the oracle rejects it.
pub fn benchmark(graph: &PipelineGraph, params: &MachineParams, record: &mut SampleRecord) -> bool {
    let result = record.state(graph).map_err(MachineError::from).and_then(|s| simulate_runtime(&s, graph, params));
    match result {
        Ok(o) => {
            record.oracle = Some(o);
            record.spill = Some(SpillInfo { spilled: o.spilled_registers, bytes: o.spill_bytes });
            true
        }
        Err(_) => false,
    }
}

/// Per-iteration summary of an autotuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub samples: usize,
    pub benchmarked: usize,
    pub oracle_failures: usize,
    pub batch_best: Option<f64>,
    pub best_so_far: Option<f64>,
    /// Training loss after retraining on all samples so far.
    pub train_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best: SampleRecord,
    pub records: Vec<SampleRecord>,
    /// Timed oracle invocations.
    pub benchmarks: usize,
    pub iterations: Vec<IterationLog>,
    /// Final weights of an autotuning run.
    pub weights: Option<CostModelWeights>,
}

fn cheapest(records: &[SampleRecord], key: impl Fn(&SampleRecord) -> Option<f64>) -> Option<&SampleRecord> {
    records
        .iter()
        .filter_map(|r| key(r).map(|k| (k, r)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.batch.cmp(&b.1.batch)).then(a.1.index.cmp(&b.1.index)))
        .map(|(_, r)| r)
}

/// Generates one batch and keeps the sample the model ranks best.
pub fn run_one_shot(
    graph: &PipelineGraph,
    params: &MachineParams,
    cfg: &RunConfig,
    model: &dyn CostModel,
) -> Result<RunOutcome, DriverError> {
    let mut records = generate_batch(graph, params, cfg, model, 0)?;
    compile_check(graph, params, &mut records);
    let survivors = post_compile_filter(records.clone());
    let best = cheapest(&survivors, |r| Some(r.predicted_cost)).cloned().ok_or(DriverError::NothingBenchmarked)?;
    let out = RunOutcome { best, records, benchmarks: 0, iterations: Vec::new(), weights: None };
    persist(cfg, &out)?;
    Ok(out)
}

/// Benchmarks the `k` samples the model ranks best and keeps the fastest.
pub fn run_top_k(
    graph: &PipelineGraph,
    params: &MachineParams,
    cfg: &RunConfig,
    model: &dyn CostModel,
    k: usize,
) -> Result<RunOutcome, DriverError> {
    let mut records = generate_batch(graph, params, cfg, model, 0)?;
    compile_check(graph, params, &mut records);
    let mut survivors = post_compile_filter(records.clone());
    survivors.sort_by(|a, b| a.predicted_cost.total_cmp(&b.predicted_cost).then(a.index.cmp(&b.index)));
    survivors.truncate(k);
    let mut benchmarks = 0;
    for r in &mut survivors {
        benchmarks += 1;
        benchmark(graph, params, r);
    }
    for s in &survivors {
        if let Some(r) = records.iter_mut().find(|r| r.index == s.index) {
            r.oracle = s.oracle;
        }
    }
    let best = cheapest(&survivors, SampleRecord::runtime).cloned().ok_or(DriverError::NothingBenchmarked)?;
    let out = RunOutcome { best, records, benchmarks, iterations: Vec::new(), weights: None };
    persist(cfg, &out)?;
    Ok(out)
}

/// Starts from random weights and alternates batch generation, benchmarking
/// of every sample, and retraining on everything benchmarked so far.
pub fn run_autotune(graph: &PipelineGraph, params: &MachineParams, cfg: &RunConfig) -> Result<RunOutcome, DriverError> {
    cfg.validate()?;
    let iterations = match cfg.mode {
        Mode::Autotune { iterations } => iterations,
        _ => return Err(DriverError::Config("run_autotune needs autotune mode".into())),
    };
    let mut weights = CostModelWeights::random(cfg.net_shape, cfg.seed);
    let mut all: Vec<SampleRecord> = Vec::new();
    let mut dataset: Vec<TrainingSample> = Vec::new();
    let mut log = Vec::new();
    let mut benchmarks = 0;
    for it in 0..iterations {
        let mut batch = generate_batch(graph, params, cfg, &weights, it)?;
        benchmarks += batch.len();
        let ok: Vec<bool> = batch.par_iter_mut().map(|r| benchmark(graph, params, r)).collect();
        let failures = ok.iter().filter(|b| !**b).count();
        dataset.extend(batch.iter().filter_map(SampleRecord::training_sample));
        let batch_best = best_benchmarked(&batch).and_then(SampleRecord::runtime);
        all.extend(batch);
        let mut train_loss = None;
        if !dataset.is_empty() {
            let tc = TrainConfig { seed: mix(cfg.train.seed, it as u64), ..cfg.train.clone() };
            weights = train(&dataset, &weights, &tc)?;
            train_loss = weights.final_loss;
        }
        log.push(IterationLog {
            iteration: it,
            samples: all.len() - log.iter().map(|l: &IterationLog| l.samples).sum::<usize>(),
            benchmarked: ok.len() - failures,
            oracle_failures: failures,
            batch_best,
            best_so_far: best_benchmarked(&all).and_then(SampleRecord::runtime),
            train_loss,
        });
    }
    let best = best_benchmarked(&all).cloned().ok_or(DriverError::NothingBenchmarked)?;
    let out = RunOutcome { best, records: all, benchmarks, iterations: log, weights: Some(weights) };
    persist(cfg, &out)?;
    Ok(out)
}

/// Fastest benchmarked record. Spilling records compete on their measured
/// runtime; only the modes that do not benchmark everything filter them.
pub fn best_benchmarked(records: &[SampleRecord]) -> Option<&SampleRecord> {
    cheapest(records, SampleRecord::runtime)
}

/// Dispatches on `cfg.mode`. The model is ignored in autotune mode.
pub fn run(graph: &PipelineGraph, params: &MachineParams, cfg: &RunConfig, model: &dyn CostModel) -> Result<RunOutcome, DriverError> {
    match cfg.mode {
        Mode::OneShot => run_one_shot(graph, params, cfg, model),
        Mode::TopK(k) => run_top_k(graph, params, cfg, model, k),
        Mode::Autotune { .. } => run_autotune(graph, params, cfg),
    }
}

fn write(path: &Path, text: &str) -> Result<(), DriverError> {
    fs::write(path, text).map_err(|source| DriverError::Io { path: path.to_path_buf(), source })
}

pub fn sample_path(dir: &Path, r: &SampleRecord) -> PathBuf {
    dir.join(format!("batch_{:03}", r.batch)).join(format!("sample_{:03}.txt", r.index))
}

/// Writes one file per record, a `best.manifest` naming the winner and, for
/// autotune, the final weights.
fn persist(cfg: &RunConfig, out: &RunOutcome) -> Result<(), DriverError> {
    let Some(dir) = &cfg.output_dir else { return Ok(()) };
    for r in &out.records {
        let path = sample_path(dir, r);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| DriverError::Io { path: parent.to_path_buf(), source })?;
        }
        write(&path, &r.to_text())?;
    }
    let best = &out.best;
    let mut manifest = format!(
        "sample {}\nbatch {}\nindex {}\npredicted_cost {}\n",
        sample_path(dir, best).display(),
        best.batch,
        best.index,
        best.predicted_cost
    );
    if let Some(rt) = best.runtime() {
        let _ = writeln!(manifest, "runtime {rt}");
    }
    for l in &out.iterations {
        let _ = writeln!(
            manifest,
            "iteration {} benchmarked {} failures {} batch_best {} best_so_far {}",
            l.iteration,
            l.benchmarked,
            l.oracle_failures,
            l.batch_best.map_or("none".into(), |v| v.to_string()),
            l.best_so_far.map_or("none".into(), |v| v.to_string()),
        );
    }
    write(&dir.join("best.manifest"), &manifest)?;
    write(&dir.join("best.schedule"), &best.schedule)?;
    if let Some(w) = &out.weights {
        write(&dir.join("weights.txt"), &w.to_text())?;
    }
    Ok(())
}
