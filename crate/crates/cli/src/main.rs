use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use maskdcpt_core::degrade::{build_corpus, load_corpus, CleanSource, ParamRanges};
use maskdcpt_core::eval::ablation::{full_scale, ABLATION_TABLE};
use maskdcpt_core::eval::{
    emit_report, evaluate, line_chart, parse_report, run_ablation, AblationAxis, EvalReport, ReportFormat,
};
use maskdcpt_core::model::{Checkpoint, RestorationModel};
use maskdcpt_core::pipeline::log::parse_probe_log;
use maskdcpt_core::pipeline::{
    finetune_run, holdout_split, load_restoration, parse_factors, pretrain_run_with, ExperimentConfig, FinetuneInit,
    LossLog,
};
use maskdcpt_core::probe::{mask_ratio_sweep, write_sweep};

#[derive(Parser)]
#[command(name = "maskdcpt", version, about = "Masked degradation-classification pre-training on synthetic corpora")]
struct Cli {
    /// Experiment config (TOML); built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a paired degradation corpus.
    Synth {
        /// Directory of clean PNGs; procedural textures when absent.
        #[arg(long)]
        clean_dir: Option<PathBuf>,
        /// Per-family counts, e.g. `HAZE=16,RS=8` or `16H,8RS`.
        #[arg(long)]
        counts: Option<String>,
    },
    /// Masked pre-training.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Continue from a checkpoint written to the same output directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Restoration fine-tuning, from scratch or from a pre-trained encoder.
    Finetune {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// kNN degradation-classification probe over encoder features.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        mask_ratios: Vec<f64>,
        #[arg(long)]
        k: Option<usize>,
        /// Also draw accuracy against mask ratio.
        #[arg(long)]
        chart: bool,
    },
    /// Evaluate a fine-tuned checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Score every sample instead of the held-out split.
        #[arg(long)]
        all: bool,
    },
    /// Pre-train and fine-tune once per value of one ablation axis.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        /// MASK_RATIO, PATCH_SIZE or MASK_METHOD.
        #[arg(long)]
        axis: String,
        /// Arm values; the axis defaults when absent.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Full-size training budgets.
        #[arg(long)]
        full_scale: bool,
    },
    /// Render tables and charts from existing run outputs.
    Report {
        /// `eval.json` files to tabulate.
        #[arg(long)]
        eval: Vec<PathBuf>,
        /// Loss logs to chart.
        #[arg(long)]
        loss_log: Vec<PathBuf>,
        /// Probe logs to chart.
        #[arg(long)]
        probe_log: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.corpus.seed = s;
        cfg.pretrain.seed = s;
        cfg.finetune.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn series_name(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn probe_model(checkpoint: Option<&Path>, cfg: &ExperimentConfig) -> Result<RestorationModel> {
    match checkpoint {
        None => Ok(RestorationModel::new(cfg.pretrain.encoder.clone(), cfg.pretrain.seed)?),
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let mut m = RestorationModel::new(ckpt.encoder.clone(), ckpt.meta.seed)?;
            ckpt.load_into(&mut m.store, |p| p.name.starts_with("encoder."))?;
            Ok(m)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = &cli.out;
    match &cli.cmd {
        Cmd::Synth { clean_dir, counts } => {
            let counts = match counts {
                Some(c) => parse_factors(c)?,
                None => cfg.corpus.counts.clone(),
            };
            let clean = match clean_dir.clone().or(cfg.corpus.clean_dir.clone().map(PathBuf::from)) {
                Some(d) => CleanSource::Dir(d),
                None => CleanSource::Procedural {
                    count: cfg.corpus.procedural_count,
                    height: cfg.corpus.procedural_size,
                    width: cfg.corpus.procedural_size,
                },
            };
            let ranges = cfg.corpus.ranges.clone().unwrap_or_else(ParamRanges::default);
            let m = build_corpus(&clean, out, &counts, &ranges, cfg.corpus.seed)?;
            println!("wrote {} samples to {}", m.len(), out.display());
        }
        Cmd::Pretrain { corpus, resume } => {
            let samples = load_corpus(corpus)?;
            let r = pretrain_run_with(&cfg.pretrain, &samples, out, resume.as_deref())?;
            if let Some(last) = r.loss_log.rows.last() {
                println!("iteration {}: total loss {:.5}", last.iter, last.total);
            }
            for (it, acc) in &r.probe_log {
                println!("probe @ {it}: {acc:.4}");
            }
            println!("checkpoint {}", r.checkpoint.display());
        }
        Cmd::Finetune { corpus, init } => {
            let samples = load_corpus(corpus)?;
            let init = init.clone().map_or(FinetuneInit::Random, FinetuneInit::Checkpoint);
            let r = finetune_run(&cfg.finetune, &samples, &init, out)?;
            print!("{}", r.report.table());
        }
        Cmd::Probe {
            checkpoint,
            corpus,
            mask_ratios,
            k,
            chart,
        } => {
            let samples = load_corpus(corpus)?;
            let model = probe_model(checkpoint.as_deref(), &cfg)?;
            let mut pc = cfg.pretrain.probe.clone();
            if let Some(k) = k {
                pc.k = *k;
            }
            let rows = mask_ratio_sweep(&model.encoder, &model.store, &samples, mask_ratios, &pc, cfg.pretrain.seed)?;
            std::fs::create_dir_all(out)?;
            write_sweep(&rows, &out.join("probe_sweep.tsv"))?;
            if *chart {
                line_chart(&out.join("probe_sweep.svg"), "kNN probe", "mask ratio", "accuracy", &[("accuracy".into(), rows.clone())])?;
            }
            for (r, a) in rows {
                println!("{r}\t{a:.4}");
            }
        }
        Cmd::Eval { checkpoint, corpus, all } => {
            let samples = load_corpus(corpus)?;
            let model = load_restoration(checkpoint)?;
            let chosen: Vec<_> = if *all {
                samples.iter().collect()
            } else {
                holdout_split(&samples, cfg.finetune.holdout_fraction).1.into_iter().map(|i| &samples[i]).collect()
            };
            let report = EvalReport::new(evaluate(&model, &chosen)?, cfg.finetune.digest(), model.store.digest());
            emit_report(&report, out, "eval", &[ReportFormat::Json, ReportFormat::Text])?;
            print!("{}", report.table());
        }
        Cmd::Ablate {
            corpus,
            axis,
            values,
            full_scale: full,
        } => {
            let axis: AblationAxis = axis.parse()?;
            let values = if values.is_empty() { axis.default_values() } else { values.clone() };
            let mut cfg = cfg.clone();
            if *full {
                full_scale(&mut cfg);
            }
            let samples = load_corpus(corpus)?;
            run_ablation(axis, &values, &cfg, &samples, out)?;
            print!("{}", std::fs::read_to_string(out.join(ABLATION_TABLE))?);
        }
        Cmd::Report {
            eval,
            loss_log,
            probe_log,
        } => {
            if eval.is_empty() && loss_log.is_empty() && probe_log.is_empty() {
                bail!("nothing to report: pass --eval, --loss-log or --probe-log");
            }
            std::fs::create_dir_all(out)?;
            let mut text = String::new();
            for p in eval {
                let r = parse_report(p)?;
                text.push_str(&format!("# {}\n{}\n", p.display(), r.table()));
            }
            if !text.is_empty() {
                std::fs::write(out.join("report.txt"), &text)?;
                print!("{text}");
            }
            if !loss_log.is_empty() {
                let series = loss_log
                    .iter()
                    .map(|p| Ok((series_name(p), LossLog::read(p)?.totals())))
                    .collect::<Result<Vec<_>>>()?;
                line_chart(&out.join("loss.svg"), "training loss", "iteration", "total loss", &series)?;
            }
            if !probe_log.is_empty() {
                let series = probe_log
                    .iter()
                    .map(|p| {
                        let rows = parse_probe_log(&std::fs::read_to_string(p)?)?;
                        Ok((series_name(p), rows.into_iter().map(|(i, a)| (i as f64, a)).collect()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                line_chart(&out.join("probe.svg"), "probe accuracy", "iteration", "accuracy", &series)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
