use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ladet_core::config::PipelineConfig;
use ladet_core::par;
use ladet_core::pipeline::{self, Stage};

#[derive(Parser, Debug)]
#[command(name = "ladet", version, about = "Latent diffusion anomaly detection on 3D volumes")]
struct Cli {
    /// sectioned key = value file; built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// overrides [global] seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads (0 = all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// overrides [paths] out
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Codec,
    Denoiser,
    Classifier,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write phantom cases, truth masks and manifest.csv to the data dir
    GenData {
        /// defaults to [data] cases
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Train one model and write its checkpoint and loss CSV
    Train {
        #[arg(value_enum)]
        stage: StageArg,
        /// continue from the existing checkpoint
        #[arg(long)]
        resume: bool,
    },
    /// Anomaly maps, candidate masks and montages for manifest cases
    Detect {
        /// case ids; all manifest cases when empty
        cases: Vec<String>,
    },
    /// Lesion-level report of a prediction dir against a reference dir
    Eval {
        /// defaults to <out>/candidates
        #[arg(long)]
        pred: Option<PathBuf>,
        /// defaults to <data>/truth
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// predictions are boxes/points, not segmentations: DSC becomes N/A
        #[arg(long)]
        detection_only: bool,
    },
    /// Grid search over noise level and guidance scale
    Sweep,
    /// Print the effective configuration
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    par::with_workers(cfg.workers, || match &cli.cmd {
        Cmd::GenData { cases } => {
            let n = cases.unwrap_or(cfg.data.cases);
            let recs = pipeline::gen_data(&cfg, n).context("gen-data")?;
            let sick = recs.iter().filter(|c| c.lesions > 0).count();
            println!("wrote {} cases ({sick} with lesions) to {}", recs.len(), cfg.paths.data.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train { stage, resume } => {
            let stage = match stage {
                StageArg::Codec => Stage::Codec,
                StageArg::Denoiser => Stage::Denoiser,
                StageArg::Classifier => Stage::Classifier,
            };
            let s = pipeline::train_stage(&cfg, stage, *resume).with_context(|| format!("train {}", stage.as_str()))?;
            let loss = s.final_loss.map_or("n/a".into(), |l| format!("{l:.5}"));
            println!("{}: {} steps, last loss {loss} -> {}", stage.as_str(), s.steps, s.checkpoint.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Detect { cases } => {
            let ids = (!cases.is_empty()).then_some(cases.as_slice());
            let s = pipeline::detect(&cfg, ids).context("detect")?;
            println!("processed {} cases into {}", s.processed.len(), cfg.paths.out.display());
            for (id, e) in &s.failures {
                eprintln!("failed {id}: {e}");
            }
            Ok(if s.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Eval { pred, reference, detection_only } => {
            let mut cfg = cfg.clone();
            if *detection_only {
                cfg.eval.segmentation = false;
            }
            let pred = pred.clone().unwrap_or_else(|| cfg.paths.out.join("candidates"));
            let reference = reference.clone().unwrap_or_else(|| cfg.paths.data.join("truth"));
            let o = pipeline::run_eval(&cfg, &pred, &reference).context("eval")?;
            if !o.missing_predictions.is_empty() {
                eprintln!("no prediction (scored as empty): {}", o.missing_predictions.join(", "));
            }
            let s = &o.report.summary;
            let show = |m: Option<ladet_core::evalkit::MeanSd>| m.map_or("N/A".into(), |m| format!("{:.3} ± {:.3}", m.mean, m.sd));
            println!("cases {}  DSC {}  precision {}  recall {}  F1 {}", s.n, show(s.dsc), show(s.precision), show(s.recall), show(s.f1));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep => {
            let (res, _) = pipeline::sweep(&cfg).context("sweep")?;
            for r in &res.rows {
                println!("L={:<5} s={:<8} DSC {:.4} ± {:.4}", r.cell.level, r.cell.scale, r.dsc.mean, r.dsc.sd);
            }
            println!("best L={} s={} -> {}", res.best.level, res.best.scale, cfg.paths.out.join("best.cfg").display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::ShowConfig => {
            print!("{}", cfg.to_text());
            Ok(ExitCode::SUCCESS)
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
