use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use svgfed::config::RunConfig;
use svgfed::fed::Paradigm;
use svgfed::pipeline;
use svgfed::Error;

#[derive(Parser)]
#[command(name = "svgfed", version, about = "Supervoxel-graph tumor localization with centralized, federated and isolated training")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration to start from when no file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the worker thread count (0 = automatic).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Benchmark,
    Smoke,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParadigmArg {
    Centralized,
    Federated,
    Isolated,
}

impl From<ParadigmArg> for Paradigm {
    fn from(p: ParadigmArg) -> Self {
        match p {
            ParadigmArg::Centralized => Paradigm::Centralized,
            ParadigmArg::Federated => Paradigm::Federated,
            ParadigmArg::Isolated => Paradigm::Isolated,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration.
    Config {
        /// Print the full default set for the chosen preset, ignoring --config.
        #[arg(long)]
        dump_defaults: bool,
    },
    /// Generate synthetic volumes.
    Synth,
    /// Build supervoxel graphs from the volumes.
    Preprocess,
    /// Train under one paradigm.
    Train {
        #[arg(long, value_enum)]
        paradigm: ParadigmArg,
    },
    /// Measure modality attention of a checkpoint on the held-out cases.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Tabulate finished runs.
    Report {
        /// Where to write table.csv and curves.csv.
        #[arg(long)]
        out: PathBuf,
        /// Run directories (each holding summary.json and rounds.csv).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run every step: synth, preprocess, all three paradigms, explain on
    /// the federated checkpoint, report.
    All,
}

fn resolve(cli: &Cli) -> svgfed::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => match cli.preset {
            Preset::Default => RunConfig::default(),
            Preset::Benchmark => RunConfig::benchmark(),
            Preset::Smoke => RunConfig::smoke(),
        },
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Records the config hash, seed and the hash of every artifact under
/// `dirs`. Timing logs and earlier manifests are left out because they
/// differ from run to run.
fn write_manifest(command: &str, cfg: &RunConfig, root: &Path, dirs: &[PathBuf]) -> svgfed::Result<()> {
    let mut files = Vec::new();
    for d in dirs {
        collect_files(d, &mut files)?;
    }
    files.retain(|p| {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        name != "timing.csv" && !name.starts_with("manifest")
    });
    files.sort();
    let mut artifacts = Vec::new();
    for f in &files {
        let rel = f.strip_prefix(root).unwrap_or(f);
        artifacts.push(json!({ "path": rel.to_string_lossy(), "sha256": sha256_hex(&fs::read(f)?) }));
    }
    let manifest = json!({
        "command": command,
        "seed": cfg.seed,
        "config_sha256": sha256_hex(cfg.to_toml().as_bytes()),
        "artifacts": artifacts,
    });
    fs::create_dir_all(root)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(root.join(format!("manifest_{command}.json")), text)?;
    Ok(())
}

fn train_one(cfg: &RunConfig, paradigm: Paradigm) -> svgfed::Result<()> {
    let s = pipeline::train(cfg, paradigm)?;
    println!(
        "{}: {} parameters, {} per client per round",
        paradigm.as_str(),
        s.param_count,
        s.megabytes_per_round
    );
    for r in &s.runs {
        let who = r.client.map_or_else(|| "global".to_string(), |c| format!("client {}", c + 1));
        println!(
            "  {who}: best round {} stopped {}{} dice {:.4} precision {:.4} recall {:.4} f1 {:.4}",
            r.best_round,
            r.stopped_round,
            if r.early_stopped { " (early)" } else { "" },
            r.final_metrics.dice,
            r.final_metrics.precision,
            r.final_metrics.recall,
            r.final_metrics.f1
        );
    }
    write_manifest(
        &format!("train_{}", paradigm.as_str()),
        cfg,
        &cfg.out_dir,
        &[pipeline::run_dir(cfg, paradigm)],
    )
}

fn explain_one(cfg: &RunConfig, checkpoint: &Path) -> svgfed::Result<()> {
    let (cases, rep) = pipeline::explain(cfg, checkpoint)?;
    println!("{} held-out cases", cases.len());
    for l in &rep.layers {
        let m = l.modality_means;
        print!(
            "  layer {}: T1 {:.5} T1ce {:.5} T2 {:.5} FLAIR {:.5}",
            l.layer, m[0], m[1], m[2], m[3]
        );
        if let Some(a) = l.anova {
            print!("  ANOVA F {:.3} p {:.3e}", a.f, a.p);
        }
        println!();
    }
    match (&rep.trend, &rep.trend_error) {
        (Some(t), _) => println!(
            "  trend: mean diff {:.3e} t {:.3} p {:.3e} d {:.3}",
            t.test.mean_diff, t.test.t, t.test.p, t.cohens_d
        ),
        (None, Some(e)) => println!("  trend: {e}"),
        _ => {}
    }
    write_manifest("explain", cfg, &cfg.out_dir, &[cfg.out_dir.join("explain")])
}

fn report_one(cfg: &RunConfig, out: &Path, runs: &[PathBuf]) -> svgfed::Result<()> {
    let rows = pipeline::report(runs, out)?;
    print!("{}", pipeline::table_csv(&rows));
    write_manifest("report", cfg, out, &[out.to_path_buf()])
}

fn run(cli: &Cli) -> svgfed::Result<()> {
    if let Command::Config { dump_defaults: true } = cli.command {
        let cfg = match cli.preset {
            Preset::Default => RunConfig::default(),
            Preset::Benchmark => RunConfig::benchmark(),
            Preset::Smoke => RunConfig::smoke(),
        };
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let cfg = resolve(cli)?;
    if cfg.threads > 0 {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    match &cli.command {
        Command::Config { .. } => print!("{}", cfg.to_toml()),
        Command::Synth => {
            let paths = pipeline::synth(&cfg)?;
            println!("wrote {} volumes", paths.len());
            write_manifest("synth", &cfg, &cfg.out_dir, &[cfg.out_dir.join("volumes")])?;
        }
        Command::Preprocess => {
            for s in pipeline::preprocess(&cfg)? {
                println!(
                    "{}: {} nodes, {} edges, {} positive, prune threshold {:.4}",
                    s.case_id, s.n_nodes, s.n_edges, s.positives, s.prune_threshold
                );
            }
            write_manifest("preprocess", &cfg, &cfg.out_dir, &[cfg.out_dir.join("graphs")])?;
        }
        Command::Train { paradigm } => train_one(&cfg, (*paradigm).into())?,
        Command::Explain { checkpoint } => explain_one(&cfg, checkpoint)?,
        Command::Report { out, runs } => report_one(&cfg, out, runs)?,
        Command::All => {
            let n = pipeline::synth(&cfg)?.len();
            println!("wrote {n} volumes");
            write_manifest("synth", &cfg, &cfg.out_dir, &[cfg.out_dir.join("volumes")])?;
            let graphs = pipeline::preprocess(&cfg)?;
            println!("built {} graphs", graphs.len());
            write_manifest("preprocess", &cfg, &cfg.out_dir, &[cfg.out_dir.join("graphs")])?;
            let paradigms = [Paradigm::Centralized, Paradigm::Federated, Paradigm::Isolated];
            for p in paradigms {
                train_one(&cfg, p)?;
            }
            let fed = pipeline::run_dir(&cfg, Paradigm::Federated).join("best.ckpt");
            explain_one(&cfg, &fed)?;
            let runs: Vec<PathBuf> = paradigms.iter().map(|&p| pipeline::run_dir(&cfg, p)).collect();
            report_one(&cfg, &cfg.out_dir.join("report"), &runs)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Validation { .. } | Error::Config(_) => (2, "config"),
        Error::Missing(_) => (3, "missing"),
        Error::Format(_) | Error::Shape(_) => (4, "format"),
        Error::NonFinite(_) => (5, "non_finite"),
        Error::Degenerate(_) => (6, "degenerate"),
        Error::Io(_) => (7, "io"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={kind} message={msg}");
            ExitCode::from(code)
        }
    }
}
