use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use roomdepth::data::{generate_synthetic_scene, load_sequence, read_depth_png, read_rgb_png, write_depth_png, write_sequence};
use roomdepth::evaluation::{
    depth_metrics, depth_to_rgb, render_report, valid_gt_mask, Align, DepthMetrics, DepthPanel, MetricRow, ReportOptions,
};
use roomdepth::kv;
use roomdepth::training::{ablate, ablation_table, load_checkpoint, train, TrainConfig, ABLATION_GRID};
use roomdepth::{Error, Result};

/// Self-supervised monocular depth for indoor scenes.
#[derive(Debug, Parser)]
#[command(name = "roomdepth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic sequence to disk.
    Synth(ConfigArgs),
    /// Train depth and pose networks.
    Train(ConfigArgs),
    /// Score depth predictions against ground truth.
    Eval(EvalArgs),
    /// Predict depth for a single image.
    Infer(InferArgs),
    /// Train every factorization/residual-pose combination and tabulate.
    Ablate(ConfigArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "pred_depth", conflicts_with = "pred_depth")]
    checkpoint: Option<PathBuf>,
    /// Directory of precomputed depth PNGs named like the ground truth.
    #[arg(long, value_name = "DIR")]
    pred_depth: Option<PathBuf>,
    /// Sequence directory with ground-truth depth.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "none", value_parser = ["none", "median"])]
    align: String,
    /// Depths above this are excluded from scoring.
    #[arg(long, default_value_t = 10.0)]
    d_max: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        cfg.apply(&kv::read(path)?)?;
    }
    let overrides = args.overrides.iter().map(|s| kv::parse_override(s)).collect::<Result<Vec<_>>>()?;
    cfg.apply(&overrides)?;
    cfg.validate()?;
    println!("# resolved configuration");
    print!("{cfg}");
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth(args: &ConfigArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let seq = generate_synthetic_scene(&cfg.scene)?;
    write_sequence(&args.out, &seq)?;
    println!("wrote {} frames to {}", seq.frames.len(), args.out.display());
    Ok(())
}

fn run_train(args: &ConfigArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("config.txt"), &cfg.to_string())?;
    let outcome = train(cfg, &args.out)?;
    let last = outcome.log.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
    println!(
        "trained {} steps, final loss {last:.6}, checkpoint {}",
        outcome.log.len(),
        outcome.checkpoint.display()
    );
    if let Some(m) = outcome.manifest.metrics {
        println!(
            "held-out AbsRel {:.4} RMS {:.4} d1 {:.4} d2 {:.4} d3 {:.4}",
            m.abs_rel, m.rms, m.delta1, m.delta2, m.delta3
        );
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let align: Align = args.align.parse()?;
    let seq = load_sequence(&args.data)?;
    let model = match &args.checkpoint {
        Some(c) => Some(load_checkpoint(c)?.0),
        None => None,
    };
    let mut rows = Vec::new();
    let mut panels = Vec::new();
    for frame in &seq.frames {
        let Some(gt) = &frame.depth else { continue };
        let pred = match (&model, &args.pred_depth) {
            (Some(m), _) => m.predict(&frame.image)?.metric,
            (None, Some(dir)) => read_depth_png(&dir.join(format!("{:06}.png", frame.index)))?,
            (None, None) => unreachable!("clap requires one prediction source"),
        };
        rows.push(depth_metrics(&pred, gt, align, &valid_gt_mask(gt, args.d_max))?);
        if panels.is_empty() {
            panels.push(DepthPanel {
                name: format!("frame_{:06}", frame.index),
                input: frame.image.clone(),
                pred,
                gt: Some(gt.clone()),
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{} has no ground-truth depth", args.data.display())));
    }
    let name = if model.is_some() { "checkpoint" } else { "prediction" };
    let table = [MetricRow {
        name: format!("{name} (align={align})"),
        metrics: DepthMetrics::mean(&rows)?,
    }];
    let options = ReportOptions {
        depth_range: (0.0, args.d_max),
        ..Default::default()
    };
    let files = render_report(&table, &panels, &args.out, &options)?;
    print!("{}", std::fs::read_to_string(&files.table).unwrap_or_default());
    println!("{} frames scored, report in {}", rows.len(), args.out.display());
    Ok(())
}

fn infer(args: &InferArgs) -> Result<()> {
    let (model, cfg, _) = load_checkpoint(&args.checkpoint)?;
    let image = read_rgb_png(&args.image)?;
    let depth = model.predict(&image)?;
    create_dir(&args.out)?;
    write_depth_png(&args.out.join("relative_depth.png"), &depth.relative)?;
    write_depth_png(&args.out.join("metric_depth.png"), &depth.metric)?;
    let preview = depth_to_rgb(&depth.metric, (0.0, cfg.bins.d_max));
    roomdepth::data::write_rgb_png(&args.out.join("metric_depth_color.png"), &preview)?;
    write_text(&args.out.join("scale.txt"), &format!("{}\n", depth.scale))?;
    println!("scale {:.6} m, output in {}", depth.scale, args.out.display());
    Ok(())
}

fn run_ablate(args: &ConfigArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    create_dir(&args.out)?;
    let rows = ablate(&cfg, &ABLATION_GRID, Some(&args.out))?;
    let table = ablation_table(&rows, false);
    let median = ablation_table(&rows, true);
    write_text(&args.out.join("ablation.txt"), &table)?;
    write_text(&args.out.join("ablation_median.txt"), &median)?;
    print!("{table}\nmedian-aligned:\n{median}");
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error: kind=usage msg={}", one_line(&e.kind().to_string()));
            eprint!("{}", e.render());
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Ablate(a) => run_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(2)
        }
    }
}
