//! `gpusched` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gpusched::costmodel::{
    loss, pipeline_cost, train, CostModel, CostModelWeights, FixedCoefficients, NetShape, TrainConfig, TrainingSample,
};
use gpusched::driver::{run, Mode, RunConfig, SampleRecord};
use gpusched::enumerate::PruneThresholds;
use gpusched::featurize::{featurize, ScheduleFeatures};
use gpusched::loopnest::LoopNestState;
use gpusched::machine::{simulate_runtime, MachineParams};
use gpusched::pipeline::{parse_pipeline, PipelineGraph};
use gpusched::search::{schedule_pipeline, SearchConfig};

#[derive(Parser)]
#[command(name = "gpusched", version, about = "GPU autoscheduler for array pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a schedule (one shot or top-k).
    Schedule(ScheduleArgs),
    /// Print the features of a schedule.
    Featurize(ScheduleFileArgs),
    /// Predict the cost of a schedule and run the oracle on it.
    Predict(PredictArgs),
    /// Train cost model weights on benchmarked sample files.
    Train(TrainArgs),
    /// Iteratively sample, benchmark and retrain from random weights.
    Autotune(AutotuneArgs),
}

#[derive(Args)]
struct MachineArgs {
    /// Machine parameter file (`key=value` lines).
    #[arg(long)]
    machine: Option<PathBuf>,
    /// Override one machine parameter, e.g. `--set num_sms=40`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl MachineArgs {
    fn load(&self) -> Result<MachineParams> {
        let mut p = match &self.machine {
            Some(path) => MachineParams::parse(&read(path)?).with_context(|| format!("machine params {}", path.display()))?,
            None => MachineParams::default(),
        };
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{o}`"))?;
            p.set(k.trim(), v.trim()).map_err(|e| anyhow!("machine params: {e}"))?;
        }
        p.validate().context("machine params")?;
        Ok(p)
    }
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, default_value_t = 32)]
    beam_size: usize,
    #[arg(long, default_value_t = 5)]
    passes: usize,
    #[arg(long, default_value_t = 2.0)]
    penalty_factor: f64,
    /// Freeze all but the most expensive funcs after a root/inline pre-pass.
    #[arg(long)]
    freeze: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cost every candidate instead of sampling bucket representatives.
    #[arg(long)]
    no_sampling: bool,
    /// Override one pruning threshold, e.g. `--prune max_recompute=4`.
    #[arg(long = "prune", value_name = "KEY=VALUE")]
    prune: Vec<String>,
    /// Beam-search samples per batch.
    #[arg(long, default_value_t = 1)]
    beam_samples: usize,
    /// Greedy samples per batch.
    #[arg(long, default_value_t = 79)]
    greedy_samples: usize,
    /// Directory for per-sample files and the best-sample manifest.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl SearchArgs {
    fn run_config(&self, mode: Mode) -> Result<RunConfig> {
        let thresholds = PruneThresholds::parse(&self.prune.join("\n")).map_err(|e| anyhow!("--prune: {e}"))?;
        let mut beam = SearchConfig::beam();
        beam.beam_size = self.beam_size;
        beam.num_passes = self.passes;
        let cfg = RunConfig {
            mode,
            beam_samples: self.beam_samples,
            greedy_samples: self.greedy_samples,
            seed: self.seed,
            beam,
            output_dir: self.output_dir.clone(),
            ..RunConfig::default()
        }
        .with_search(|c| {
            c.penalty_factor = self.penalty_factor;
            c.freeze_enabled = self.freeze;
            c.no_sampling = self.no_sampling;
            c.thresholds = thresholds.clone();
            c.tiling.unroll_budget = thresholds.unroll_budget;
        });
        cfg.beam.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    OneShot,
    TopK,
}

#[derive(Args)]
struct ScheduleArgs {
    pipeline: PathBuf,
    #[arg(long, value_enum, default_value = "one-shot")]
    mode: ModeArg,
    /// Samples benchmarked in top-k mode.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Cost model weights; the formula with unit coefficients is used if absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Run a single beam search and print its per-phase option counts.
    #[arg(long)]
    dump_options: bool,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    machine: MachineArgs,
}

#[derive(Args)]
struct ScheduleFileArgs {
    pipeline: PathBuf,
    /// Decision list as printed by `schedule`.
    schedule: PathBuf,
    #[command(flatten)]
    machine: MachineArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    target: ScheduleFileArgs,
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Sample files with oracle results.
    #[arg(required = true)]
    samples: Vec<PathBuf>,
    /// Where to write the trained weights.
    #[arg(long, short)]
    out: PathBuf,
    /// Starting weights; random if absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AutotuneArgs {
    pipeline: PathBuf,
    #[arg(long, default_value_t = 20)]
    iterations: usize,
    #[arg(long, default_value_t = 80)]
    batch_size: usize,
    /// Training epochs after each batch.
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    machine: MachineArgs,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_pipeline(path: &Path) -> Result<PipelineGraph> {
    parse_pipeline(&read(path)?).with_context(|| format!("pipeline {}", path.display()))
}

fn load_weights(path: &Path) -> Result<CostModelWeights> {
    CostModelWeights::from_text(&read(path)?).with_context(|| format!("weights {}", path.display()))
}

fn load_schedule(graph: &PipelineGraph, path: &Path) -> Result<LoopNestState> {
    let state = LoopNestState::replay(graph, &read(path)?).with_context(|| format!("schedule {}", path.display()))?;
    if !state.is_fully_scheduled(graph) {
        bail!("schedule {} leaves funcs unscheduled", path.display());
    }
    Ok(state)
}

fn print_record(graph: &PipelineGraph, r: &SampleRecord) {
    println!("# sample batch {} index {} seed {}", r.batch, r.index, r.seed);
    println!("# predicted_cost {:.6e}", r.predicted_cost);
    if let Some(o) = r.oracle {
        println!("# oracle_runtime_s {:.6e} spilled {}", o.runtime, o.spilled_registers);
    }
    print!("{}", r.schedule);
    if let Ok(s) = r.state(graph).and_then(|s| s.lower(graph)) {
        for line in s.pretty(graph).lines() {
            println!("# {line}");
        }
    }
}

fn cmd_schedule(a: ScheduleArgs) -> Result<()> {
    let graph = load_pipeline(&a.pipeline)?;
    let params = a.machine.load()?;
    let mode = match a.mode {
        ModeArg::OneShot => Mode::OneShot,
        ModeArg::TopK => Mode::TopK(a.k),
    };
    let cfg = a.search.run_config(mode)?;
    let model: Box<dyn CostModel> = match &a.weights {
        Some(p) => Box::new(load_weights(p)?),
        None => Box::new(FixedCoefficients::unit()),
    };
    if a.dump_options {
        let search = SearchConfig { seed: cfg.seed, ..cfg.beam.clone() };
        let result = schedule_pipeline(&graph, &params, &search, model.as_ref())?;
        println!("pass\tfunc\tphase\tenumerated\tpruned\tbuckets\tevaluated\tkept");
        for l in &result.log {
            println!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                l.pass,
                graph.func(l.func).name,
                l.phase,
                l.enumerated,
                l.pruned,
                l.buckets,
                l.evaluated,
                l.kept
            );
        }
        return Ok(());
    }
    let out = run(&graph, &params, &cfg, model.as_ref())?;
    print_record(&graph, &out.best);
    Ok(())
}

fn cmd_featurize(a: ScheduleFileArgs) -> Result<()> {
    let graph = load_pipeline(&a.pipeline)?;
    let params = a.machine.load()?;
    let state = load_schedule(&graph, &a.schedule)?.lower(&graph)?;
    for sf in featurize(&state, &graph, &params)? {
        println!("stage {} {} kernel {}", graph.func(sf.func).name, sf.stage, sf.kernel);
        for (name, v) in ScheduleFeatures::NAMES.iter().zip(sf.schedule.to_vec()) {
            println!("  {name} {v}");
        }
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let t = &a.target;
    let graph = load_pipeline(&t.pipeline)?;
    let params = t.machine.load()?;
    let state = load_schedule(&graph, &t.schedule)?.lower(&graph)?;
    let feats = featurize(&state, &graph, &params)?;
    match &a.weights {
        Some(p) => {
            let w = load_weights(p)?;
            let cost = pipeline_cost(&feats, &w);
            for (sf, c) in feats.iter().zip(&cost.per_stage) {
                println!("stage {} {} cost {:.6e}", graph.func(sf.func).name, sf.stage, c.total);
            }
            println!("predicted_cost {:.6e}", cost.total);
        }
        None => println!("predicted_cost {:.6e}", FixedCoefficients::unit().total_cost(&feats)),
    }
    let o = simulate_runtime(&state, &graph, &params)?;
    println!("oracle_runtime_s {:.6e}", o.runtime);
    println!("spilled {} spill_bytes {}", o.spilled_registers, o.spill_bytes);
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut data: Vec<TrainingSample> = Vec::new();
    for p in &a.samples {
        let rec = SampleRecord::from_text(&read(p)?).with_context(|| format!("sample {}", p.display()))?;
        match rec.training_sample() {
            Some(s) => data.push(s),
            None => eprintln!("skipping {}: not benchmarked", p.display()),
        }
    }
    let init = match &a.init {
        Some(p) => load_weights(p)?,
        None => CostModelWeights::random(NetShape::default(), a.seed),
    };
    let cfg = TrainConfig { epochs: a.epochs, learning_rate: a.learning_rate, seed: a.seed, ..TrainConfig::default() };
    let before = loss(&init, &data);
    let w = train(&data, &init, &cfg)?;
    fs::write(&a.out, w.to_text()).with_context(|| format!("writing {}", a.out.display()))?;
    println!("samples {}", data.len());
    println!("loss_before {before:.6e}");
    println!("loss_after {:.6e}", loss(&w, &data));
    Ok(())
}

fn cmd_autotune(a: AutotuneArgs) -> Result<()> {
    let graph = load_pipeline(&a.pipeline)?;
    let params = a.machine.load()?;
    let mut cfg = a.search.run_config(Mode::Autotune { iterations: a.iterations })?;
    cfg.beam_samples = a.search.beam_samples.min(a.batch_size);
    cfg.greedy_samples = a.batch_size - cfg.beam_samples;
    cfg.train.epochs = a.epochs;
    cfg.train.seed = a.search.seed;
    let out = run(&graph, &params, &cfg, &FixedCoefficients::unit())?;
    for l in &out.iterations {
        println!(
            "# iteration {} benchmarked {} failures {} batch_best {} best {}",
            l.iteration,
            l.benchmarked,
            l.oracle_failures,
            l.batch_best.map_or("none".into(), |v| format!("{v:.6e}")),
            l.best_so_far.map_or("none".into(), |v| format!("{v:.6e}")),
        );
    }
    print_record(&graph, &out.best);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Schedule(a) => cmd_schedule(a),
        Command::Featurize(a) => cmd_featurize(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Train(a) => cmd_train(a),
        Command::Autotune(a) => cmd_autotune(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
