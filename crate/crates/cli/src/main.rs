use std::path::PathBuf;
use std::process::ExitCode;

use advmesh::attack::Phase;
use advmesh::pipeline::{self, EvalAttack, RunConfig};
use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

/// Universal adversarial mesh attack on a cascaded camera/LiDAR detector.
#[derive(Parser, Debug)]
#[command(name = "advmesh", version)]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides `threads` in the config.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PhaseArg {
    Shape,
    Texture,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenScenes,
    /// Train the victim detector and report its gates.
    TrainVictim,
    /// Optimize the mesh shape or texture.
    Attack {
        #[arg(long, value_enum)]
        phase: PhaseArg,
    },
    /// Render one scene before and after the attack.
    Render {
        #[arg(long)]
        scene: String,
    },
    /// Evaluate AP with the mesh in none, pc, img, pc+img, all or benign.
    Eval {
        #[arg(long, default_value = "all")]
        attack: String,
    },
    /// Write the mesh stored in a checkpoint as PLY.
    ExportMesh { checkpoint: PathBuf, out: PathBuf },
    /// Print the effective configuration.
    ShowConfig,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg.resolved()?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::GenScenes => {
            let n = pipeline::gen_scenes(&cfg)?;
            println!("{n} scenes under {}", cfg.data_root().display());
        }
        Command::TrainVictim => {
            let r = pipeline::train_victim_cmd(&cfg)?;
            println!(
                "segmentation accuracy {:.4}, clean BEV AP {:.4} (easy {:.4}, hard {:.4}), proposal recall {:.4}",
                r.seg_accuracy, r.clean_ap, r.ap_easy, r.ap_hard, r.proposal_recall
            );
            if !r.passed {
                anyhow::bail!("victim gates not met; attacks will refuse to run");
            }
        }
        Command::Attack { phase } => {
            let phase = match phase {
                PhaseArg::Shape => Phase::Shape,
                PhaseArg::Texture => Phase::Texture,
            };
            let trail = pipeline::attack_cmd(&cfg, phase)?;
            if let (Some(first), Some(last)) = (trail.first(), trail.last()) {
                let pick = |r: &advmesh::attack::LossReport| match phase {
                    Phase::Shape => r.total,
                    Phase::Texture => r.image_loss,
                };
                println!("{} steps, loss {:.4} -> {:.4}", trail.len(), pick(first), pick(last));
            }
        }
        Command::Render { scene } => {
            for p in pipeline::render_cmd(&cfg, &scene)? {
                println!("{}", p.display());
            }
        }
        Command::Eval { attack } => {
            let which: EvalAttack = attack.parse()?;
            let summary = pipeline::eval_cmd(&cfg, which)?;
            print!("{}", summary.table.to_text());
            for r in &summary.recall {
                println!("{:<24} 2D recall {:.4}", r.row, r.recall);
            }
        }
        Command::ExportMesh { checkpoint, out } => {
            pipeline::export_mesh(&checkpoint, &out)?;
            println!("{}", out.display());
        }
        Command::ShowConfig => println!("{}", serde_json::to_string_pretty(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
