use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowdistill::dataset::{generate_dataset, DatasetConfig};
use flowdistill::eval::{ce_rr, linear_probe, probe_split, robustness_scores, ProbeConfig, SEVERITIES};
use flowdistill::gradcheck::{run_all, TOLERANCE};
use flowdistill::io::{
    load_checkpoint, probe_report_csv, read_dataset, save_checkpoint, write_atomic, write_dataset,
    write_metrics_csv,
};
use flowdistill::losses::LossWeights;
use flowdistill::trainer::{Model, ModelConfig, TrainConfig, Trainer};
use flowdistill::Result;

#[derive(Parser)]
#[command(name = "flowdistill", version, about = "Image-to-LiDAR contrastive pretraining on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Pretrain the point encoder and write a checkpoint plus metrics CSV.
    Pretrain(PretrainArgs),
    /// Linear-probe a frozen encoder and write the IoU report.
    Probe(ProbeArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Corruption error and resilience rate under beam dropping.
    EvalRobust(EvalRobustArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    scenes: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u16).range(2..))]
    classes: u16,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    cameras: u64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    beams: u64,
    /// LiDAR rate in Hz.
    #[arg(long, default_value_t = 20.0)]
    hz: f64,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    keyframes: u64,
    /// Sweeps stored before each keyframe.
    #[arg(long, default_value_t = 3)]
    stored_sweeps: usize,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Schedule length.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..), required_unless_present = "resume")]
    steps: Option<u64>,
    /// Stop and checkpoint after this many steps of the schedule.
    #[arg(long)]
    stop_after: Option<u64>,
    #[arg(long, default_value_t = 0.5)]
    dt: f64,
    #[arg(long, default_value_t = 2)]
    sweeps: usize,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_vc: bool,
    #[arg(long)]
    no_d2s: bool,
    #[arg(long)]
    no_fcl: bool,
    /// Keep the image head fixed at its initialization.
    #[arg(long)]
    freeze_image_head: bool,
    #[arg(long, default_value_t = 1.0)]
    w_sc: f64,
    #[arg(long, default_value_t = 1.0)]
    w_tc: f64,
    #[arg(long, default_value_t = 1.0)]
    w_d2s: f64,
    /// Metrics CSV path; defaults to the checkpoint path with `.csv` appended.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from this checkpoint with its stored configuration; the
    /// remaining steps match an uninterrupted run.
    #[arg(long, conflicts_with = "steps")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, required_unless_present = "random")]
    ckpt: Option<PathBuf>,
    /// Probe a randomly initialized encoder instead of a checkpoint.
    #[arg(long, conflicts_with = "ckpt")]
    random: bool,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Initialization seed for `--random`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    instances: u64,
}

#[derive(Args)]
struct EvalRobustArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Baseline checkpoint; defaults to the model's own random
    /// initialization.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the beam selection.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = DatasetConfig {
        seed: a.seed,
        scenes: a.scenes as usize,
        num_classes: a.classes as usize,
        cameras: a.cameras as usize,
        beams: a.beams as usize,
        hz: a.hz,
        keyframes_per_scene: a.keyframes as usize,
        stored_sweeps: a.stored_sweeps,
        ..DatasetConfig::default()
    };
    let d = generate_dataset(&cfg)?;
    write_dataset(&d, &a.out)?;
    println!("wrote {} scenes to {}", d.scenes.len(), a.out.display());
    Ok(())
}

fn default_metrics_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".csv");
    PathBuf::from(s)
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let dataset = read_dataset(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(load_checkpoint(path)?, &dataset)?,
        None => {
            let cfg = TrainConfig {
                seed: a.seed,
                steps: a.steps.expect("clap requires --steps without --resume") as usize,
                dt: a.dt,
                num_sweeps: a.sweeps,
                tau: a.tau,
                base_lr: a.lr,
                weights: LossWeights {
                    sc: a.w_sc,
                    tc: a.w_tc,
                    d2s: a.w_d2s,
                },
                enable_vc: !a.no_vc,
                enable_d2s: !a.no_d2s,
                enable_fcl: !a.no_fcl,
                train_image_head: !a.freeze_image_head,
                ..TrainConfig::default()
            };
            Trainer::new(cfg, &dataset)?
        }
    };
    let steps = trainer.config().steps;
    let until = a.stop_after.map_or(steps, |k| (k as usize).min(steps));
    while trainer.step_index() < until {
        let row = trainer.step()?;
        if row.step % 100 == 0 || row.step + 1 == steps {
            log::info!(
                "step {} lr {:.3e} sc {:.4} tc {:.4} d2s {:.4} total {:.4}",
                row.step,
                row.lr,
                row.sc,
                row.tc,
                row.d2s,
                row.total
            );
        }
    }
    let ckpt = trainer.checkpoint();
    save_checkpoint(&a.out, &ckpt)?;
    let metrics = a.metrics.clone().unwrap_or_else(|| default_metrics_path(&a.out));
    write_metrics_csv(&metrics, &ckpt.history)?;
    let first = ckpt.history.first().map_or(0.0, |h| h.total);
    let last = ckpt.history.last().map_or(0.0, |h| h.total);
    println!(
        "trained {} steps, total loss {first:.4} -> {last:.4}; checkpoint {}, metrics {}",
        ckpt.step,
        a.out.display(),
        metrics.display()
    );
    Ok(())
}

fn probe(a: &ProbeArgs) -> Result<()> {
    let dataset = read_dataset(&a.data)?;
    let encoder = match &a.ckpt {
        Some(path) => load_checkpoint(path)?.model.encoder,
        None => Model::init(&ModelConfig::default(), dataset.channels(), a.seed).encoder,
    };
    let (train, eval) = probe_split(&dataset)?;
    let r = linear_probe(&encoder, &train, &eval, dataset.num_classes(), &ProbeConfig::default())?;
    let report = probe_report_csv(&dataset.class_names, &r);
    write_atomic(&a.out, report.as_bytes())?;
    print!("{report}");
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let reports = run_all(a.seed, a.instances as usize);
    for r in &reports {
        println!(
            "{:<22} instances {:>3}  max rel error {:.3e}  {}",
            r.name,
            r.instances,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let ok = reports.iter().all(|r| r.passed());
    println!("tolerance {TOLERANCE:e}: {}", if ok { "all passed" } else { "failures" });
    Ok(ok)
}

fn eval_robust(a: &EvalRobustArgs) -> Result<()> {
    let dataset = read_dataset(&a.data)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let baseline = match &a.baseline {
        Some(p) => load_checkpoint(p)?.model.encoder,
        None => Model::init(&ckpt.config.model, ckpt.channels, ckpt.config.seed).encoder,
    };
    let (train, eval) = probe_split(&dataset)?;
    let (lidar, k, cfg) = (&dataset.rig.lidar, dataset.num_classes(), ProbeConfig::default());
    let model = robustness_scores(&ckpt.model.encoder, &train, &eval, lidar, k, &cfg, a.seed)?;
    let base = robustness_scores(&baseline, &train, &eval, lidar, k, &cfg, a.seed)?;
    let scores = ce_rr(model.corrupted, base.corrupted, model.clean);
    let mut out = String::from("severity,drop_fraction,model_miou,baseline_miou\n");
    out.push_str(&format!("clean,0,{},{}\n", model.clean, base.clean));
    for (s, f) in SEVERITIES.iter().enumerate() {
        out.push_str(&format!("{},{f},{},{}\n", s + 1, model.corrupted[s], base.corrupted[s]));
    }
    let show = |v: Option<f64>| v.map_or("undefined".to_string(), |x| x.to_string());
    out.push_str(&format!("CE,{}\nRR,{}\n", show(scores.ce), show(scores.rr)));
    if let Some(path) = &a.out {
        write_atomic(path, out.as_bytes())?;
    }
    print!("{out}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Pretrain(a) => pretrain(a).map(|_| true),
        Command::Probe(a) => probe(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::EvalRobust(a) => eval_robust(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
