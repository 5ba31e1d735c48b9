//! `hgens` command-line runner.
//!
//! Every command prints a JSON report on stdout and a readable table on
//! stderr. Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hgens::gradients::{finite_diff_check, tiny_problem, vanishing_scenario, FiniteDiffConfig};
use hgens::hetgraph::{load_dataset, validate_graph, HeterogeneousGraph, Split};
use hgens::scaling::scaling;
use hgens::synth::{self, SynthConfig};
use hgens::training::{
    evaluate_params, load_checkpoint, mean, run_ablation, set_field, train, variance, AblationMode, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "hgens", version, about = "Heterogeneous graph ensemble learning")]
struct Cli {
    /// Cap on worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and validate a dataset directory.
    Ingest {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a planted-partition dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Synthetic config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Scale the default graph to about this many edges.
        #[arg(long)]
        edges: Option<usize>,
    },
    /// Train one model and write its run directory.
    Train {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained run directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Train the base configuration and one variant over several seeds.
    Ablate {
        #[command(flatten)]
        common: TrainArgs,
        /// softmax, minmax_noreg, naive_weighting, single_group:<name> or
        /// single_batchsize:<b>.
        #[arg(long)]
        mode: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Compare analytic gradients with central differences on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Draw fresh dropout masks for every loss evaluation.
        #[arg(long)]
        unfrozen_dropout: bool,
    },
    /// Gradient norms with and without the attention residual.
    Gradflow {
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 1e6)]
        spread: f64,
        #[arg(long, default_value_t = 4)]
        dim: usize,
    },
    /// Epoch time against synthetic graph size.
    Scaling {
        #[command(flatten)]
        common: ConfigArgs,
        /// Edge counts of the synthetic graphs.
        #[arg(long, value_delimiter = ',', default_value = "10000,30000,100000")]
        sizes: Vec<usize>,
        /// Timed epochs per size.
        #[arg(long, default_value_t = 5)]
        epochs: usize,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Training config JSON; `--key=value` overrides any key.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Allow hyperparameters outside the search grid.
    #[arg(long)]
    unsafe_hparams: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<hgens::Error> for Failure {
    fn from(e: hgens::Error) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// Splits `--key=value` pairs that are not clap flags off the argument list.
fn split_overrides(args: Vec<String>, known: &[String]) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some((k, v)) = a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            if !known.iter().any(|n| n == k) {
                overrides.push((k.replace('-', "_"), v.to_string()));
                continue;
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn known_flags() -> Vec<String> {
    fn walk(cmd: &clap::Command, out: &mut Vec<String>) {
        out.extend(cmd.get_arguments().filter_map(|a| a.get_long().map(String::from)));
        for sub in cmd.get_subcommands() {
            walk(sub, out);
        }
    }
    let mut out = Vec::new();
    walk(&<Cli as clap::CommandFactory>::command(), &mut out);
    out
}

fn emit<T: Serialize>(report: &T, table: &[(String, String)]) -> CmdResult {
    println!("{}", serde_json::to_string_pretty(report)?);
    let width = table.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in table {
        eprintln!("{k:<width$}  {v}");
    }
    Ok(())
}

fn row(k: impl Into<String>, v: impl Display) -> (String, String) {
    (k.into(), v.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn build_config(args: &ConfigArgs, overrides: &[(String, String)]) -> Result<TrainConfig, Failure> {
    let mut c: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if args.unsafe_hparams {
        c.unsafe_hparams = true;
    }
    for (k, v) in overrides {
        c.set(k, v)?;
    }
    c.validate()?;
    Ok(c)
}

fn load(data: &Path) -> Result<HeterogeneousGraph, Failure> {
    let g = load_dataset(data)?;
    let diags = validate_graph(&g);
    if !diags.is_empty() {
        let lines: Vec<String> = diags.iter().map(ToString::to_string).collect();
        return Err(Failure::Invalid(lines.join("\n")));
    }
    Ok(g)
}

#[derive(Serialize)]
struct IngestReport {
    node_types: Vec<(String, usize, usize)>,
    edge_types: Vec<(String, usize)>,
    target_type: String,
    num_classes: usize,
    split_sizes: [usize; 3],
    relation_groups: Vec<hgens::hetgraph::GroupSpec>,
}

fn cmd_ingest(data: &Path) -> CmdResult {
    let g = load(data)?;
    let report = IngestReport {
        node_types: g.node_types.iter().map(|t| (t.name.clone(), t.count, t.features.cols())).collect(),
        edge_types: g.edge_types.iter().map(|e| (e.name.clone(), e.edges.len())).collect(),
        target_type: g.node_type(g.target_type).name.clone(),
        num_classes: g.num_classes,
        split_sizes: [Split::Train, Split::Val, Split::Test].map(|s| g.split_indices(s).len()),
        relation_groups: g.relation_groups.clone(),
    };
    let mut table = vec![row("nodes", g.num_nodes()), row("edges", g.num_edges())];
    table.extend(report.node_types.iter().map(|(n, c, f)| row(format!("type {n}"), format!("{c} nodes, {f} features"))));
    table.push(row("classes", g.num_classes));
    table.push(row("train/val/test", format!("{:?}", report.split_sizes)));
    emit(&report, &table)
}

fn cmd_synth(out: &Path, config: Option<&Path>, seed: Option<u64>, edges: Option<usize>, ov: &[(String, String)]) -> CmdResult {
    let mut c: SynthConfig = match config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(e) = edges {
        c = SynthConfig::with_edges(e, c.seed);
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    for (k, v) in ov {
        set_field(&mut c, k, v)?;
    }
    let g = synth::write(&c, out)?;
    emit(
        &serde_json::json!({ "config": c, "dir": out, "nodes": g.num_nodes(), "edges": g.num_edges() }),
        &[row("dir", out.display()), row("nodes", g.num_nodes()), row("edges", g.num_edges())],
    )
}

fn cmd_train(args: &TrainArgs, out: &Path, ov: &[(String, String)]) -> CmdResult {
    let c = build_config(&args.config, ov)?;
    let g = load(&args.data)?;
    let run = train(&c, &g)?;
    run.write_dir(out).map_err(|e| Failure::Runtime(e.to_string()))?;
    let r = run.report();
    emit(
        &r,
        &[
            row("groups", r.groups.join(",")),
            row("epochs", r.epochs_run),
            row("best epoch", r.best_epoch),
            row("train acc", format!("{:.4}", r.train_acc)),
            row("val acc", format!("{:.4}", r.val_acc)),
            row("test acc", format!("{:.4}", r.test_acc)),
            row("epoch seconds", format!("{:.3}", r.mean_epoch_seconds)),
            row("run dir", out.display()),
        ],
    )
}

fn cmd_eval(data: &Path, run: &Path) -> CmdResult {
    let c: TrainConfig = read_json(&run.join("config.json"))?;
    let g = load(data)?;
    let params = load_checkpoint(run.join("best_model.bin"), &c, &g)?;
    let mut report = serde_json::Map::new();
    let mut table = Vec::new();
    for s in [Split::Train, Split::Val, Split::Test] {
        let acc = evaluate_params(&c, &params, &g, s)?;
        report.insert(format!("{s}_acc"), acc.into());
        table.push(row(format!("{s} acc"), format!("{acc:.4}")));
    }
    emit(&report, &table)
}

fn cmd_ablate(args: &TrainArgs, mode: &str, seeds: &[u64], ov: &[(String, String)]) -> CmdResult {
    let c = build_config(&args.config, ov)?;
    let mode: AblationMode = mode.parse()?;
    let g = load(&args.data)?;
    let r = run_ablation(&mode, &c, &g, seeds)?;
    let json = serde_json::json!({
        "report": r,
        "baseline_mean": r.baseline_mean(),
        "variant_mean": r.variant_mean(),
        "baseline_variance": variance(&r.baseline),
        "variant_variance": variance(&r.variant),
    });
    emit(
        &json,
        &[
            row("seeds", format!("{seeds:?}")),
            row("baseline mean", format!("{:.4}", mean(&r.baseline))),
            row("variant mean", format!("{:.4}", mean(&r.variant))),
        ],
    )
}

fn cmd_gradcheck(seed: u64, eps: f64, tol: f64, unfrozen: bool) -> CmdResult {
    if !(eps > 0.0 && tol > 0.0) {
        return Err(Failure::Invalid("eps and tol must be positive".into()));
    }
    let problem = tiny_problem(seed)?;
    let r = finite_diff_check(
        &problem,
        FiniteDiffConfig {
            eps,
            tol,
            freeze_dropout: !unfrozen,
        },
    )?;
    let mut table: Vec<_> = r
        .params
        .iter()
        .map(|p| row(&p.name, format!("{:.3e}  ({} scalars)", p.max_rel_err, p.count)))
        .collect();
    table.push(row("max_rel_err", format!("{:.3e}", r.max_rel_err)));
    table.push(row("passed", r.passed));
    emit(&r, &table)?;
    if r.passed {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("max relative error {:.3e} exceeds {tol:e}", r.max_rel_err)))
    }
}

fn cmd_gradflow(k: usize, spread: f64, dim: usize) -> CmdResult {
    let r = vanishing_scenario(k, spread, dim)?;
    let mut table = vec![row("k", r.k), row("spread", r.spread), row("min source", r.min_source)];
    for (i, s) in r.sources.iter().enumerate() {
        table.push(row(
            format!("source {i}"),
            format!(
                "score {:.4}  with {:.6e}  without {:.6e}",
                s.normalized_score, s.norm_with_residual, s.norm_without_residual
            ),
        ));
    }
    table.push(row("residual identity error", format!("{:.3e}", r.residual_identity_error)));
    emit(&r, &table)
}

fn cmd_scaling(args: &ConfigArgs, sizes: &[usize], epochs: usize, ov: &[(String, String)]) -> CmdResult {
    let c = build_config(args, ov)?;
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Failure::Invalid("sizes must be strictly increasing".into()));
    }
    let r = scaling(sizes, epochs, &c, c.seed)?;
    let mut table: Vec<_> = r
        .points
        .iter()
        .map(|p| row(format!("|V|+|E| = {}", p.size), format!("{:.4} s/epoch", p.mean_epoch_seconds)))
        .collect();
    table.push(row("log-log slope", format!("{:.3}", r.slope)));
    emit(&r, &table)
}

fn run(cli: Cli, ov: &[(String, String)]) -> CmdResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let takes_overrides = matches!(
        cli.command,
        Command::Synth { .. } | Command::Train { .. } | Command::Ablate { .. } | Command::Scaling { .. }
    );
    if !takes_overrides && !ov.is_empty() {
        return Err(Failure::Invalid(format!("unexpected option --{}", ov[0].0)));
    }
    match &cli.command {
        Command::Ingest { data } => cmd_ingest(data),
        Command::Synth {
            out,
            config,
            seed,
            edges,
        } => cmd_synth(out, config.as_deref(), *seed, *edges, ov),
        Command::Train { common, out } => cmd_train(common, out, ov),
        Command::Eval { data, run } => cmd_eval(data, run),
        Command::Ablate { common, mode, seeds } => cmd_ablate(common, mode, seeds, ov),
        Command::Gradcheck {
            seed,
            eps,
            tol,
            unfrozen_dropout,
        } => cmd_gradcheck(*seed, *eps, *tol, *unfrozen_dropout),
        Command::Gradflow { k, spread, dim } => cmd_gradflow(*k, *spread, *dim),
        Command::Scaling { common, sizes, epochs } => cmd_scaling(common, sizes, *epochs, ov),
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect(), &known_flags());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
