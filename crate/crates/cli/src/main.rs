use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvs_core::eval::format_table;
use mvs_core::pipeline::{
    counter_stage, depth_stage, eval_stage, export_stage, filter_stage, fuse_stage, label_stage, load_scene,
    read_report, refine_stage, run_pipeline, write_synthetic_workspace, MapSet, PipelineConfig, PipelineError, Report, StageOutcome,
    Variant, Workspace,
};

/// Multi-view stereo: PatchMatch depth maps, confidence filtering, planar
/// refinement, fusion and evaluation.
#[derive(Parser)]
#[command(name = "mvs", version)]
struct Cli {
    /// Workspace directory
    #[arg(long, short, global = true, env = "MVS_WORKSPACE", default_value = ".")]
    workspace: PathBuf,

    #[command(flatten)]
    options: Options,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Fast,
    Refined,
}

#[derive(Args)]
struct Options {
    /// Pipeline variant
    #[arg(long, global = true, value_enum, default_value = "fast")]
    variant: VariantArg,

    /// Confidence threshold of the filter stage [default: 0.5 fast, 0.05 refined]
    #[arg(long, global = true)]
    tau: Option<f64>,

    /// Minimum number of views supporting a fused point
    #[arg(long, global = true)]
    min_support: Option<usize>,

    /// Random seed of the depth estimation
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Image resampling factor applied on load
    #[arg(long, global = true)]
    downsample: Option<f64>,

    /// Evaluation tolerances in scene units, comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    tolerance: Option<Vec<f64>>,

    /// Recompute stages even when their cache is up to date
    #[arg(long, global = true)]
    force: bool,

    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log progress (repeat for more detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate depth and normal maps
    Depth,
    /// Build counter maps (raw maps, or refined maps with --variant refined)
    Counter,
    /// Build label maps against gt/depth/
    Label,
    /// Export images, normals, counters and labels for confidence training
    ExportTrain {
        /// Output directory [default: <workspace>/train]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter depth maps by confidence and support
    Filter,
    /// Refine depth maps
    Refine,
    /// Fuse filtered depth maps into cloud.ply
    Fuse,
    /// Evaluate cloud.ply against gt/cloud.ply and write report.json
    Eval,
    /// Run every stage of the selected variant
    Run,
    /// Write a two-view synthetic workspace with ground truth
    Synth {
        #[arg(long, default_value_t = 320)]
        width: usize,
        #[arg(long, default_value_t = 240)]
        height: usize,
        /// Texture seed
        #[arg(long = "texture-seed", default_value_t = 7)]
        texture_seed: u64,
    },
}

fn build_config(o: &Options) -> Result<PipelineConfig, PipelineError> {
    let variant = match o.variant {
        VariantArg::Fast => Variant::Fast,
        VariantArg::Refined => Variant::Refined,
    };
    let mut config = PipelineConfig::for_variant(variant);
    if let Some(tau) = o.tau {
        config.tau = tau;
    }
    if let Some(k) = o.min_support {
        config.fusion.min_support = k;
    }
    if let Some(seed) = o.seed {
        config.seed = seed;
    }
    if let Some(f) = o.downsample {
        config.downsample = f;
    }
    if let Some(t) = &o.tolerance {
        config.tolerances = t.clone();
    }
    config.validate()?;
    Ok(config)
}

fn print_stage(s: &StageOutcome) {
    println!("{:<16} {}", s.stage, if s.recomputed { "computed" } else { "up to date" });
}

fn print_report(report: &Report) {
    println!("fused points: {}", report.points);
    if let Some(eval) = &report.eval {
        print!("{}", format_table(eval));
    }
    for c in &report.confidence {
        let auc = c.auc.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
        println!("{}: auc {auc}, balanced l2 {:.4}", c.view, c.balanced_l2);
    }
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let ws = Workspace::new(&cli.workspace);
    let o = &cli.options;
    let config = build_config(o)?;
    if let Some(n) = o.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Config(format!("--threads {n}: {e}")))?;
    }
    if let Command::Synth {
        width,
        height,
        texture_seed,
    } = cli.command
    {
        write_synthetic_workspace(ws.root(), width, height, texture_seed, config.downsample)?;
        println!("wrote synthetic workspace to {}", ws.root().display());
        return Ok(());
    }

    let bundle = load_scene(&ws, config.downsample)?;
    let set = MapSet::from(config.variant);
    let outcome = match &cli.command {
        Command::Depth => depth_stage(&ws, &bundle, &config, o.force)?,
        Command::Counter => counter_stage(&ws, &bundle, &config, set, o.force)?,
        Command::Label => label_stage(&ws, &bundle, &config, o.force)?,
        Command::ExportTrain { out } => {
            let out = out.clone().unwrap_or_else(|| ws.train_dir());
            export_stage(&ws, &bundle, &out, o.force)?
        }
        Command::Filter => filter_stage(&ws, &bundle, &config, set, o.force)?,
        Command::Refine => refine_stage(&ws, &bundle, &config, o.force)?,
        Command::Fuse => fuse_stage(&ws, &bundle, &config, set, o.force)?,
        Command::Eval => {
            let s = eval_stage(&ws, &bundle, &config, o.force)?;
            print_stage(&s);
            print_report(&read_report(&ws)?);
            return Ok(());
        }
        Command::Run => {
            let summary = run_pipeline(&ws, &bundle, &config, o.force)?;
            summary.stages.iter().for_each(print_stage);
            print_report(&summary.report);
            return Ok(());
        }
        Command::Synth { .. } => unreachable!("handled above"),
    };
    print_stage(&outcome);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.options.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
