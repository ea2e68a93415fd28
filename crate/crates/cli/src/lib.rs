//! Command implementations behind the `adaptinfer` binary.
//!
//! Every command is a pure function of its arguments (and input files), so
//! repeated runs with the same seed write byte-identical outputs.

use std::fs;
use std::path::{Path, PathBuf};

use adaptinfer::analytics::{miou_matrix, shift_histogram};
use adaptinfer::config::{DataConfig, RunConfig};
use adaptinfer::cost::{cost_table_csv, run_cost, CostParams, CostRow};
use adaptinfer::prune::{
    baseline_layers, retained_csv, solve_schedule, BaselineKind, KeepPolicy, PruneHook, Retention,
    ScheduleFile,
};
use adaptinfer::trace::{list_traces, read_corpus, read_trace, write_trace};
use adaptinfer::{
    generate_sample, LayerAttention, Matrix, Model, PruneSchedule, RetainedSet, SeededRng,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

pub mod error;

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "adaptinfer",
    version,
    about = "Text-guided vision-token pruning experiments"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "ADAPTINFER_OUT")]
    pub out: Option<PathBuf>,
    /// Seed for the model and the synthetic corpus.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Average retained vision tokens per layer.
    #[arg(long, global = true)]
    pub budget: Option<f64>,
    /// Explicit schedule file (TOML); overrides any budget.
    #[arg(long, global = true)]
    pub schedule: Option<PathBuf>,
    #[arg(long, global = true)]
    pub fraction_text: Option<f64>,
    #[arg(long, global = true)]
    pub fraction_vision: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the toy model over seeded samples and write attention traces.
    Simulate(SimulateArgs),
    /// Prefill with pruning; write retained sets and FLOPs.
    Prune(PruneArgs),
    /// Histogram of attention shift points over a trace corpus.
    Shifts(CorpusArgs),
    /// Layer-pair mIoU of key text tokens over a trace corpus.
    Miou(CorpusArgs),
    /// FLOPs table for given model dimensions.
    Cost(CostArgs),
    /// Per-stage keep counts for a budget.
    ScheduleSolve(SolveArgs),
    /// Merge the JSON outputs in the output directory into one summary.
    Report,
}

#[derive(Debug, Clone, Args, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub samples: Option<usize>,
    /// Number of layers.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub ffn: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub vision: Option<usize>,
    #[arg(long)]
    pub text: Option<usize>,
    #[arg(long)]
    pub planted_fraction: Option<f64>,
    #[arg(long)]
    pub signal: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Placement {
    /// Use `--stage-layers` (default 1,10,20).
    Layers,
    Uniform,
    Single,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RetentionArg {
    TextPrior,
    UniformPrior,
    Random,
}

#[derive(Debug, Clone, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Stage layers for `--placement layers`, or explicit draws to replay for `random`.
    #[arg(long, value_delimiter = ',')]
    pub stage_layers: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "layers")]
    pub placement: Placement,
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    #[arg(long, default_value_t = 9)]
    pub stride: usize,
    /// Layer for `--placement single`.
    #[arg(long, default_value_t = 1)]
    pub layer: usize,
    /// Number of layers to draw for `--placement random`.
    #[arg(long, default_value_t = 3)]
    pub draws: usize,
    #[arg(long, value_enum, default_value = "text-prior")]
    pub retention: RetentionArg,
    /// Replay pruning over existing unpruned traces instead of running the
    /// model. Only the first stage reproduces a live run exactly; later
    /// stages see dense attention rather than the pruned residual stream.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub decode_steps: u64,
    /// Subdirectory of the output directory.
    #[arg(long, default_value = "prune")]
    pub name: String,
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Trace corpus directory; defaults to `<out>/traces`.
    #[arg(long)]
    pub traces: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CostArgs {
    #[arg(long, default_value_t = 4096)]
    pub d: u64,
    #[arg(long, default_value_t = 11008)]
    pub m: u64,
    /// Number of layers.
    #[arg(long, default_value_t = 32)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub text: u64,
    #[arg(long, default_value_t = 576)]
    pub vision: u64,
    /// Only the unpruned row.
    #[arg(long)]
    pub dense: bool,
    #[arg(long, value_delimiter = ',', default_value = "1,10,20")]
    pub stage_layers: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub decode_steps: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[arg(long, default_value_t = 576)]
    pub vision: usize,
    /// Stage layers.
    #[arg(long, value_delimiter = ',', default_value = "1,10,20")]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub total_layers: usize,
    #[arg(long)]
    pub final_keep: Option<usize>,
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Also write the schedule file here.
    #[arg(long)]
    pub write: Option<PathBuf>,
}

/// Effective configuration after layering file, then flags.
fn resolve_config(global: &GlobalArgs, model: Option<&ModelArgs>) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.model.seed = seed;
        cfg.data.seed = seed;
    }
    if let Some(path) = &global.schedule {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        cfg.schedule = Some(ScheduleFile::from_toml(&text)?);
        cfg.budget = None;
    }
    if let Some(b) = global.budget {
        cfg.budget = Some(b);
        cfg.schedule = None;
    }
    if let Some(f) = global.fraction_text {
        cfg.fraction_text = f;
    }
    if let Some(f) = global.fraction_vision {
        cfg.fraction_vision = f;
    }
    if let Some(m) = model {
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut cfg.data.samples, m.samples);
        set(&mut cfg.model.num_layers, m.layers);
        set(&mut cfg.model.hidden_dim, m.hidden);
        set(&mut cfg.model.ffn_dim, m.ffn);
        set(&mut cfg.model.num_heads, m.heads);
        set(&mut cfg.data.vision_count, m.vision);
        set(&mut cfg.data.text_count, m.text);
        if let Some(f) = m.planted_fraction {
            cfg.data.planted_fraction = f;
        }
        if let Some(s) = m.signal {
            cfg.data.signal_strength = s;
        }
    }
    if cfg.output_dir.is_none() {
        cfg.output_dir = global.out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(global: &GlobalArgs, cfg: Option<&RunConfig>) -> PathBuf {
    global
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::Json)?;
    write(path, &format!("{text}\n"))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(CliError::Json)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => simulate(&cli.global, &args),
        Command::Prune(args) => prune(&cli.global, &args),
        Command::Shifts(args) => shifts(&cli.global, &args),
        Command::Miou(args) => miou(&cli.global, &args),
        Command::Cost(args) => cost(&cli.global, &args),
        Command::ScheduleSolve(args) => schedule_solve(&cli.global, &args),
        Command::Report => report(&cli.global),
    }
}

fn simulate(global: &GlobalArgs, args: &SimulateArgs) -> Result<()> {
    let cfg = resolve_config(global, Some(&args.model))?;
    let out = out_dir(global, Some(&cfg));
    let model = Model::init(cfg.model)?;
    let mut planted = Vec::with_capacity(cfg.data.samples);
    for i in 0..cfg.data.samples {
        let id = DataConfig::sample_id(i);
        let sample = generate_sample(&cfg.data.sample_spec(i), cfg.model.hidden_dim)?;
        let (_, maps) = model.prefill(&id, sample.sequence, &mut adaptinfer::KeepAll)?;
        write_trace(&maps, &out.join("traces").join(&id))?;
        planted.push(json!({ "sample_id": id, "planted": sample.planted }));
    }
    write_json(
        &out.join("simulate.json"),
        &json!({
            "model": cfg.model,
            "data": cfg.data,
            "samples": planted,
        }),
    )?;
    println!(
        "wrote {} traces to {}",
        cfg.data.samples,
        out.join("traces").display()
    );
    Ok(())
}

/// Resolves the stage layers, any random draws, and the schedule.
fn prune_schedule(
    cfg: &RunConfig,
    args: &PruneArgs,
    initial_vision: usize,
) -> Result<(String, Option<Vec<usize>>, PruneSchedule)> {
    let total = cfg.model.num_layers;
    if let Some(file) = &cfg.schedule {
        return Ok((file.policy.clone(), None, file.to_schedule()?));
    }
    let budget = cfg.budget.expect("validated: budget or schedule");
    let (name, layers, drawn) = match (args.placement, &args.stage_layers) {
        (Placement::Layers, explicit) => (
            "adaptinfer",
            explicit.clone().unwrap_or_else(|| cfg.stage_layers.clone()),
            None,
        ),
        (Placement::Random, Some(replay)) => ("random", replay.clone(), Some(replay.clone())),
        (Placement::Uniform, Some(layers)) => ("uniform", layers.clone(), None),
        (placement, _) => {
            let kind = match placement {
                Placement::Uniform => BaselineKind::Uniform {
                    start: args.start,
                    stride: args.stride,
                },
                Placement::Single => BaselineKind::Single { layer: args.layer },
                Placement::Random => BaselineKind::Random {
                    count: args.draws,
                    seed: cfg.model.seed,
                },
                Placement::Layers => unreachable!(),
            };
            let layers = baseline_layers(&kind, total)?;
            let drawn = matches!(placement, Placement::Random).then(|| layers.clone());
            let name = match placement {
                Placement::Uniform => "uniform",
                Placement::Single => "single",
                _ => "random",
            };
            (name, layers, drawn)
        }
    };
    if let Some(d) = &drawn {
        log::info!("random placement layers: {d:?}");
    }
    let schedule = solve_schedule(budget, initial_vision, total, &layers, &cfg.policy)?;
    Ok((name.to_owned(), drawn, schedule))
}

fn retention(arg: RetentionArg, seed: u64, sample: usize) -> Retention {
    match arg {
        RetentionArg::TextPrior => Retention::TextPrior,
        RetentionArg::UniformPrior => Retention::UniformPrior,
        RetentionArg::Random => Retention::Random(SeededRng::new(seed.wrapping_add(sample as u64))),
    }
}

/// Restricts a recorded layer to the currently alive vision tokens.
fn restrict(layer: &LayerAttention, alive: &[usize]) -> Result<LayerAttention> {
    let cols = alive
        .iter()
        .map(|id| {
            layer.vision_ids.binary_search(id).map_err(|_| {
                CliError::Usage(format!(
                    "trace layer {} lacks vision token {id}; replay needs unpruned traces",
                    layer.layer_index
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let t = layer.t2v.rows();
    let mut data = Vec::with_capacity(t * cols.len());
    for r in 0..t {
        data.extend(cols.iter().map(|&c| layer.t2v[(r, c)]));
    }
    Ok(LayerAttention {
        layer_index: layer.layer_index,
        t2t: layer.t2t.clone(),
        t2v: Matrix::from_vec(t, cols.len(), data)?,
        vision_ids: alive.to_vec(),
    })
}

fn prune(global: &GlobalArgs, args: &PruneArgs) -> Result<()> {
    let cfg = resolve_config(global, Some(&args.model))?;
    let out = out_dir(global, Some(&cfg)).join(&args.name);
    let mut rows: Vec<(String, RetainedSet)> = Vec::new();

    let (dims, name, drawn, schedule) = if let Some(root) = &args.traces {
        let dirs = list_traces(root)?;
        let first = dirs
            .first()
            .ok_or_else(|| CliError::Usage(format!("no traces under {}", root.display())))?;
        let probe = read_trace(first)?.maps;
        let mut cfg = cfg.clone();
        cfg.model.num_layers = probe.num_layers();
        let v0 = probe.initial_vision_ids().len();
        let (name, drawn, schedule) = prune_schedule(&cfg, args, v0)?;
        for (i, dir) in dirs.iter().enumerate() {
            let maps = read_trace(dir)?.maps;
            let mut hook = PruneHook::new(
                schedule.clone(),
                retention(args.retention, cfg.model.seed, i),
            );
            let mut alive = maps.initial_vision_ids().to_vec();
            for layer in &maps.per_layer {
                let view = restrict(layer, &alive)?;
                if let Some(keep) = hook.select(&view)? {
                    alive = keep.iter().map(|&j| alive[j]).collect();
                }
            }
            rows.extend(
                hook.into_retained()
                    .into_iter()
                    .map(|r| (maps.sample_id.clone(), r)),
            );
        }
        let dims = (
            cfg.model.hidden_dim,
            cfg.model.ffn_dim,
            probe.text_count(),
            v0,
            cfg.model.num_layers,
        );
        (dims, name, drawn, schedule)
    } else {
        let model = Model::init(cfg.model)?;
        let (name, drawn, schedule) = prune_schedule(&cfg, args, cfg.data.vision_count)?;
        for i in 0..cfg.data.samples {
            let id = DataConfig::sample_id(i);
            let sample = generate_sample(&cfg.data.sample_spec(i), cfg.model.hidden_dim)?;
            let mut hook = PruneHook::new(
                schedule.clone(),
                retention(args.retention, cfg.model.seed, i),
            );
            model.prefill(&id, sample.sequence, &mut hook)?;
            rows.extend(hook.into_retained().into_iter().map(|r| (id.clone(), r)));
        }
        let dims = (
            cfg.model.hidden_dim,
            cfg.model.ffn_dim,
            cfg.data.text_count,
            cfg.data.vision_count,
            cfg.model.num_layers,
        );
        (dims, name, drawn, schedule)
    };

    let (d, m, t, v0, layers) = dims;
    let params = CostParams {
        hidden_dim: d as u64,
        ffn_dim: m as u64,
        num_layers: layers,
        text_len: t as u64,
        initial_vision: v0 as u64,
        schedule: schedule.clone(),
        decode_steps: args.decode_steps,
    };
    let report = run_cost(&params)?;
    let dense = run_cost(&params.dense())?;
    let average = schedule.average_tokens(v0)?;
    let table = [
        CostRow {
            method: "vanilla".into(),
            tokens: v0 as f64,
            report: dense,
        },
        CostRow {
            method: name.clone(),
            tokens: average,
            report: report.clone(),
        },
    ];

    let file =
        ScheduleFile::from_schedule(&schedule, &name, drawn.as_ref().map(|_| cfg.model.seed));
    write(&out.join("schedule.toml"), &file.to_toml())?;
    write(
        &out.join("retained.csv"),
        &retained_csv(rows.iter().map(|(s, r)| (s.as_str(), r))),
    )?;
    write(&out.join("cost.csv"), &cost_table_csv(&table))?;
    write_json(&out.join("cost.json"), &report)?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "placement": name,
            "retention": args.retention.to_possible_value().map(|v| v.get_name().to_owned()),
            "stage_layers": schedule.stage_layers(),
            "keep_counts": schedule.keep_counts(),
            "random_draws": drawn,
            "average_tokens": average,
            "samples": rows.iter().map(|(s, _)| s.as_str()).collect::<std::collections::BTreeSet<_>>().len(),
            "retained_rows": rows.len(),
            "prefill_flops": report.prefill_total,
            "prefill_ratio_vs_dense": report.prefill_ratio_vs_dense,
        }),
    )?;
    println!(
        "{name}: layers {:?} keep {:?} avg {average:.3} prefill ratio {:.4}",
        schedule.stage_layers(),
        schedule.keep_counts(),
        report.prefill_ratio_vs_dense
    );
    Ok(())
}

fn corpus_root(global: &GlobalArgs, args: &CorpusArgs, cfg: &RunConfig) -> PathBuf {
    args.traces
        .clone()
        .unwrap_or_else(|| out_dir(global, Some(cfg)).join("traces"))
}

fn shifts(global: &GlobalArgs, args: &CorpusArgs) -> Result<()> {
    let cfg = resolve_config(global, None)?;
    let corpus = read_corpus(&corpus_root(global, args, &cfg))?;
    let hist = shift_histogram(&corpus, cfg.fraction_vision)?;
    let out = out_dir(global, Some(&cfg));
    write(&out.join("shifts.csv"), &hist.to_csv())?;
    write_json(
        &out.join("shifts.json"),
        &json!({
            "fraction_vision": cfg.fraction_vision,
            "samples": hist.samples,
            "num_layers": hist.num_layers(),
            "tokens": hist.tokens,
            "counts": hist.counts,
            "mode": hist.mode(),
        }),
    )?;
    print!("{}", hist.to_csv());
    Ok(())
}

fn miou(global: &GlobalArgs, args: &CorpusArgs) -> Result<()> {
    let cfg = resolve_config(global, None)?;
    let corpus = read_corpus(&corpus_root(global, args, &cfg))?;
    let m = miou_matrix(&corpus, cfg.fraction_text)?;
    let out = out_dir(global, Some(&cfg));
    write(&out.join("miou.csv"), &m.to_csv())?;
    write_json(
        &out.join("miou.json"),
        &json!({
            "fraction_text": cfg.fraction_text,
            "samples": m.samples,
            "num_layers": m.num_layers,
            "values": m.values(),
        }),
    )?;
    print!("{}", m.to_csv());
    Ok(())
}

fn cost(global: &GlobalArgs, args: &CostArgs) -> Result<()> {
    let base = CostParams {
        hidden_dim: args.d,
        ffn_dim: args.m,
        num_layers: args.layers,
        text_len: args.text,
        initial_vision: args.vision,
        schedule: PruneSchedule::empty(args.layers),
        decode_steps: args.decode_steps,
    };
    let mut rows = vec![CostRow {
        method: "vanilla".into(),
        tokens: args.vision as f64,
        report: run_cost(&base)?,
    }];
    if !args.dense {
        let schedule = match &global.schedule {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                ScheduleFile::from_toml(&text)?.to_schedule()?
            }
            None => {
                let budget = global.budget.unwrap_or(64.0);
                solve_schedule(
                    budget,
                    args.vision as usize,
                    args.layers,
                    &args.stage_layers,
                    &KeepPolicy::default(),
                )?
            }
        };
        let tokens = schedule.average_tokens(args.vision as usize)?;
        rows.push(CostRow {
            method: "adaptinfer".into(),
            tokens,
            report: run_cost(&CostParams {
                schedule,
                ..base.clone()
            })?,
        });
    }
    let out = out_dir(global, None);
    let csv = cost_table_csv(&rows);
    write(&out.join("cost.csv"), &csv)?;
    write_json(&out.join("cost.json"), &rows)?;
    print!("{csv}");
    Ok(())
}

fn schedule_solve(global: &GlobalArgs, args: &SolveArgs) -> Result<()> {
    let budget = global
        .budget
        .ok_or_else(|| CliError::Usage("schedule-solve needs --budget".into()))?;
    let mut policy = KeepPolicy::default();
    if let Some(k) = args.final_keep {
        policy.final_keep = k;
    }
    if let Some(r) = args.ratio {
        policy.ratio = r;
    }
    let schedule = solve_schedule(
        budget,
        args.vision,
        args.total_layers,
        &args.layers,
        &policy,
    )?;
    let keeps: Vec<String> = schedule
        .keep_counts()
        .iter()
        .map(usize::to_string)
        .collect();
    let layers: Vec<String> = schedule
        .stage_layers()
        .iter()
        .map(usize::to_string)
        .collect();
    println!(
        "layers={} keep={} average={:.3}",
        layers.join(","),
        keeps.join(","),
        schedule.average_tokens(args.vision)?
    );
    if let Some(path) = &args.write {
        write(
            path,
            &ScheduleFile::from_schedule(&schedule, "adaptinfer", None).to_toml(),
        )?;
    }
    Ok(())
}

/// Embeds the component outputs verbatim.
fn report(global: &GlobalArgs) -> Result<()> {
    let cfg = global
        .config
        .as_ref()
        .map(|p| RunConfig::load(p))
        .transpose()?;
    let out = out_dir(global, cfg.as_ref());
    let mut merged = serde_json::Map::new();
    for (key, rel) in [
        ("simulate", "simulate.json"),
        ("prune_summary", "prune/summary.json"),
        ("prune_cost", "prune/cost.json"),
        ("shifts", "shifts.json"),
        ("miou", "miou.json"),
        ("cost", "cost.json"),
    ] {
        let path = out.join(rel);
        if path.is_file() {
            merged.insert(key.to_owned(), read_json(&path)?);
        }
    }
    if merged.is_empty() {
        return Err(CliError::Usage(format!(
            "no component outputs found in {}",
            out.display()
        )));
    }
    let keys: Vec<&String> = merged.keys().collect();
    println!("merged {keys:?} into {}", out.join("report.json").display());
    write_json(&out.join("report.json"), &Value::Object(merged))
}
