//! Command-line driver: dataset generation, backbone pretraining, full
//! experiments, the ablation matrix, metric recomputation and report
//! emission.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 data
//! format error, 4 numeric error.

use asp_core::checkpoint::Container;
use asp_core::data::{generate, load_aspd, save_aspd, split_fscil, write_sidecar, Dataset, TaskStream};
use asp_core::metrics::{emit, MetricsReport, TaskMetrics};
use asp_core::runner::{
    evaluate, pretrain_backbone, resume_experiment, run_experiment, run_experiment_with_backbone,
    Checkpoint, PlainFeatureCache, RunConfig,
};
use asp_core::CoreError;
use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "asp", version, about = "Prompt-tuned FSCIL experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (ASPD v1) plus its split sidecar.
    Gen {
        /// JSON run configuration; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output .aspd path; the sidecar lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the backbone on the pretraining split and save it frozen.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the full experiment: pretrain, base task, incremental tasks.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Load the dataset from an ASPD file instead of generating it.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Skip per-task checkpoint files.
        #[arg(long)]
        no_checkpoints: bool,
    },
    /// Run the ablation-flag matrix over one or more seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Recompute metrics from a checkpoint by re-evaluating every task.
    Metrics {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; regenerated from the checkpoint config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Validate a report.json and re-emit it (JSON + CSV + table).
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Config(_) | CoreError::Contract(_) => 2,
        CoreError::Format { .. } => 3,
        CoreError::Numeric { .. } | CoreError::Dim { .. } => 4,
        CoreError::Io(_) => 1,
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CoreError> {
    let mut cfg = match path {
        Some(p) => {
            let raw = std::fs::read_to_string(p)?;
            serde_json::from_str(&raw)
                .map_err(|e| CoreError::config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_for(cfg: &RunConfig, data_path: Option<&Path>) -> Result<Dataset, CoreError> {
    match data_path {
        Some(p) => {
            let d = load_aspd(p)?;
            if d.height != cfg.data.image_size
                || d.width != cfg.data.image_size
                || d.channels != cfg.data.channels
                || d.num_classes as usize != cfg.data.num_classes
            {
                return Err(CoreError::config(format!(
                    "dataset {} does not match the configured geometry",
                    p.display()
                )));
            }
            Ok(d)
        }
        None => generate(&cfg.data, cfg.seed),
    }
}

fn split_for(cfg: &RunConfig, data: &Dataset) -> Result<TaskStream, CoreError> {
    split_fscil(data, &cfg.data, &cfg.split, cfg.seed)
}

fn dispatch(cmd: Cmd) -> Result<(), CoreError> {
    match cmd {
        Cmd::Gen { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let data = generate(&cfg.data, cfg.seed)?;
            save_aspd(&data, &out)?;
            let stream = split_for(&cfg, &data)?;
            let sidecar = out.with_extension("split.json");
            write_sidecar(&sidecar, cfg.seed, &cfg.split, &stream)?;
            println!(
                "wrote {} ({} samples, {} classes) and {}",
                out.display(),
                data.len(),
                data.num_classes,
                sidecar.display()
            );
            Ok(())
        }
        Cmd::Pretrain {
            config,
            seed,
            out_dir,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let data = generate(&cfg.data, cfg.seed)?;
            let stream = split_for(&cfg, &data)?;
            let (backbone, losses) = pretrain_backbone(&cfg, &data, &stream)?;
            std::fs::create_dir_all(&out_dir)?;
            let mut c = Container::new();
            c.put_str("config", serde_json::to_string(&cfg).expect("config serializes"));
            for p in backbone.params() {
                c.put_tensor(format!("model/{}", p.name), p.value.clone());
            }
            c.put_u32s(
                "model/vit_frozen",
                backbone.params().iter().map(|p| p.frozen as u32).collect(),
            );
            let path = out_dir.join("pretrain.aspc");
            c.save(&path)?;
            println!(
                "pretrained {} epochs (loss {:.4} -> {:.4}), saved {}",
                losses.len(),
                losses.first().unwrap_or(&f64::NAN),
                losses.last().unwrap_or(&f64::NAN),
                path.display()
            );
            Ok(())
        }
        Cmd::Run {
            config,
            seed,
            out_dir,
            data,
            resume,
            no_checkpoints,
        } => {
            let report = match resume {
                Some(ckpt_path) => {
                    let ckpt = Checkpoint::load(&ckpt_path)?;
                    let cfg = ckpt.config.clone();
                    let dataset = dataset_for(&cfg, data.as_deref())?;
                    let stream = split_for(&cfg, &dataset)?;
                    std::fs::create_dir_all(&out_dir)?;
                    let ckpt_dir = (!no_checkpoints).then_some(out_dir.as_path());
                    let (report, _) = resume_experiment(ckpt, &dataset, &stream, ckpt_dir)?;
                    report
                }
                None => {
                    let cfg = load_config(config.as_deref(), Some(seed))?;
                    let dataset = dataset_for(&cfg, data.as_deref())?;
                    let stream = split_for(&cfg, &dataset)?;
                    std::fs::create_dir_all(&out_dir)?;
                    write_sidecar(&out_dir.join("split.json"), cfg.seed, &cfg.split, &stream)?;
                    let ckpt_dir = (!no_checkpoints).then_some(out_dir.as_path());
                    run_experiment(&cfg, &dataset, &stream, ckpt_dir)?.report
                }
            };
            let (json_path, csv_path) = emit(&report, &out_dir)?;
            print!("{}", report.render_table());
            println!("wrote {} and {}", json_path.display(), csv_path.display());
            Ok(())
        }
        Cmd::Ablate {
            config,
            seeds,
            out_dir,
        } => {
            let base_cfg = load_config(config.as_deref(), None)?;
            std::fs::create_dir_all(&out_dir)?;
            let variants: Vec<(&str, fn(&mut RunConfig))> = vec![
                ("full", |_| {}),
                ("no_tip", |c| c.ablation.no_tip = true),
                ("no_tsp", |c| c.ablation.no_tsp = true),
                ("no_anchor", |c| c.ablation.no_anchor = true),
                ("diff_tip", |c| c.ablation.diff_tip = true),
            ];
            let mut table: BTreeMap<String, BTreeMap<u64, MetricsReport>> = BTreeMap::new();
            for &seed in &seeds {
                let mut cfg = base_cfg.clone();
                cfg.seed = seed;
                let dataset = generate(&cfg.data, cfg.seed)?;
                let stream = split_for(&cfg, &dataset)?;
                let (backbone, losses) = pretrain_backbone(&cfg, &dataset, &stream)?;
                for (name, apply) in &variants {
                    let mut vcfg = cfg.clone();
                    apply(&mut vcfg);
                    let outcome = run_experiment_with_backbone(
                        &vcfg,
                        &dataset,
                        &stream,
                        backbone.clone(),
                        losses.clone(),
                        None,
                    )?;
                    println!(
                        "seed {seed} {name}: A_avg {:.1} HAcc {}",
                        outcome.report.a_avg * 100.0,
                        outcome
                            .report
                            .hacc
                            .map_or("-".into(), |h| format!("{:.1}", h * 100.0))
                    );
                    table
                        .entry(name.to_string())
                        .or_default()
                        .insert(seed, outcome.report);
                }
            }
            let summary: BTreeMap<String, serde_json::Value> = table
                .iter()
                .map(|(name, by_seed)| {
                    let a: Vec<f64> = by_seed.values().map(|r| r.a_avg).collect();
                    let h: Vec<f64> = by_seed.values().filter_map(|r| r.hacc).collect();
                    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
                    (
                        name.clone(),
                        serde_json::json!({
                            "seeds": by_seed.keys().collect::<Vec<_>>(),
                            "a_avg": a,
                            "hacc": h,
                            "mean_a_avg": mean(&a),
                            "mean_hacc": mean(&h),
                            "reports": by_seed.values().collect::<Vec<_>>(),
                        }),
                    )
                })
                .collect();
            let path = out_dir.join("ablation.json");
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&summary).expect("summary serializes"),
            )?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Cmd::Metrics {
            checkpoint,
            data,
            out_dir,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = ckpt.config.clone();
            let dataset = dataset_for(&cfg, data.as_deref())?;
            let stream = split_for(&cfg, &dataset)?;
            let mut cache = PlainFeatureCache::new(dataset.len());
            let mut per_task = Vec::new();
            for t in 0..=ckpt.task_index {
                let out = evaluate(&ckpt.model, &cfg, &dataset, &stream.test_through(t), &mut cache)?;
                per_task.push(task_metrics_public(t, &out, &stream)?);
            }
            let report =
                MetricsReport::from_task_metrics(cfg.seed, cfg.config_hash(), per_task)?;
            let (json_path, csv_path) = emit(&report, &out_dir)?;
            print!("{}", report.render_table());
            println!("wrote {} and {}", json_path.display(), csv_path.display());
            Ok(())
        }
        Cmd::Report { report, out_dir } => {
            let raw = std::fs::read_to_string(&report)?;
            let parsed: MetricsReport = serde_json::from_str(&raw)
                .map_err(|e| CoreError::format(0, format!("{}: {e}", report.display())))?;
            let (json_path, csv_path) = emit(&parsed, &out_dir)?;
            print!("{}", parsed.render_table());
            println!("wrote {} and {}", json_path.display(), csv_path.display());
            Ok(())
        }
    }
}

/// A_t plus base/new per-class means for one evaluation, mirroring how the
/// runner labels tasks.
fn task_metrics_public(
    t: usize,
    out: &asp_core::runner::EvalOutcome,
    ts: &TaskStream,
) -> Result<TaskMetrics, CoreError> {
    let base_acc = out
        .class_mean_acc(&ts.base_classes)
        .ok_or_else(|| CoreError::contract("no base-class samples in evaluation"))?;
    let new_classes: Vec<u32> = ts
        .tasks
        .iter()
        .take(t)
        .flat_map(|task| task.classes.iter().copied())
        .collect();
    let new_acc = if t == 0 {
        None
    } else {
        out.class_mean_acc(&new_classes)
    };
    Ok(TaskMetrics {
        task: t,
        acc: out.acc,
        base_acc,
        new_acc,
    })
}
