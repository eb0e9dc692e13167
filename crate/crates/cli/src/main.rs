use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qmet_core::experiment::{aggregate, aggregate_dir, load_results, run_experiment, ExperimentConfig, ExperimentKind};
use qmet_core::graphs::{all_pairs_distances, build_dataset, generate_graph, save_graph, write_pairs_csv};
use qmet_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "qmet", version, about = "Quasimetric embedding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate graphs, distance oracles and pair splits.
    GenGraph(Common),
    /// Train heads on random-graph distance regression.
    Train(Common),
    /// Sample the axioms of every head family.
    Audit(Common),
    /// Offline goal-conditioned Q-learning in the grid world.
    Rl(Common),
    /// Sweep (k, l) at a fixed latent size.
    AblateKl(Common),
    /// Distance along a scaled latent direction.
    Profile(Common),
    /// Rebuild aggregate tables from existing run directories.
    Aggregate {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the seed list (repeatable).
    #[arg(long)]
    seed: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Print the full default config for this subcommand and exit.
    #[arg(long)]
    print_defaults: bool,
}

fn load(kind: ExperimentKind, c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Config { .. } => e,
            other => Error::Config { path: path.display().to_string(), message: other.to_string() },
        })?,
        None => ExperimentConfig::defaults(kind),
    };
    if cfg.kind != kind {
        return Err(Error::Config {
            path: "kind".into(),
            message: format!("config is `{}` but the subcommand runs `{}`", cfg.kind.tag(), kind.tag()),
        });
    }
    if !c.seed.is_empty() {
        cfg.seeds = c.seed.clone();
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    if let Some(jobs) = c.jobs {
        cfg.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_graphs(cfg: &ExperimentConfig) -> Result<(), Error> {
    let g = &cfg.graph;
    for &seed in &cfg.seeds {
        let gseed = g.graph_seed.unwrap_or(seed);
        let graph = generate_graph(g.kind, g.nodes, gseed)?;
        let oracle = all_pairs_distances(&graph);
        let data = build_dataset(&oracle, g.feature_dim, g.train_fraction, cfg.train.gamma, gseed)?;
        let dir = cfg.out.join(format!("{}-n{}-s{gseed}", g.kind.tag(), g.nodes));
        std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
        save_graph(&dir.join("graph.qgr"), &graph, &oracle)?;
        write_pairs_csv(&dir.join("train.csv"), &data.train)?;
        write_pairs_csv(&dir.join("val.csv"), &data.val)?;
        println!(
            "{}: {} edges, largest scc {}, {} train / {} val pairs",
            dir.display(),
            graph.edge_count(),
            oracle.largest_scc(),
            data.train.len(),
            data.val.len()
        );
    }
    Ok(())
}

fn print_table(out: &Path) -> Result<(), Error> {
    let results = load_results(out)?;
    for row in aggregate(&results) {
        let stats: Vec<String> =
            row.stats.iter().map(|(k, &(m, s))| format!("{k}={}", qmet_core::experiment::format_cell(m, s))).collect();
        println!("{:<48} {}/{} ok  {}", row.label, row.ok, row.runs, stats.join("  "));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let (kind, common) = match &cli.command {
        Command::Aggregate { out } => {
            let path = aggregate_dir(out)?;
            print_table(out)?;
            println!("wrote {}", path.display());
            return Ok(ExitCode::SUCCESS);
        }
        Command::GenGraph(c) | Command::Train(c) => (ExperimentKind::Graph, c),
        Command::Audit(c) => (ExperimentKind::Audit, c),
        Command::Rl(c) => (ExperimentKind::Gridworld, c),
        Command::AblateKl(c) => (ExperimentKind::AblateKl, c),
        Command::Profile(c) => (ExperimentKind::Profile, c),
    };
    if common.print_defaults {
        print!("{}", ExperimentConfig::defaults(kind).to_toml()?);
        return Ok(ExitCode::SUCCESS);
    }
    let cfg = load(kind, common)?;
    if matches!(cli.command, Command::GenGraph(_)) {
        gen_graphs(&cfg)?;
        return Ok(ExitCode::SUCCESS);
    }
    let summary = run_experiment(&cfg)?;
    for r in summary.results.iter().filter(|r| r.error.is_some()) {
        eprintln!("{} seed {}: {}", r.label, r.seed, r.error.as_deref().unwrap_or_default());
    }
    print_table(&cfg.out)?;
    println!("wrote {}", summary.aggregate.display());
    if summary.all_diverged() {
        eprintln!("every run diverged");
        return Ok(ExitCode::from(EXIT_DIVERGED));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e @ (Error::Config { .. } | Error::Spec(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
