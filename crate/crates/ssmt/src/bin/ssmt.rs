//! Command-line driver: synthetic data generation, meta-pretraining,
//! few-shot fine-tuning, evaluation, gradient checking, the ablation grid,
//! hyperparameter sweeps, and graph inspection.

use clap::{Args, Parser, Subcommand};
use ssmt::config::TrainConfig;
use ssmt::data::{load_csv, synth_city, write_csv, SynthProfile};
use ssmt::error::{Result, SsmtError};
use ssmt::eval::{evaluate, gradcheck, run_ablation, sweep_csv, sweep_memory, sweep_tasks};
use ssmt::model::params_for_city;
use ssmt::trainer::{few_shot_split, finetune, load_checkpoint, pretrain, save_checkpoint};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "ssmt", about = "Meta-transfer traffic forecasting", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; omitted fields fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed; required so every run is reproducible.
    #[arg(long)]
    seed: u64,
    /// Output directory for reports, curves, logs, and checkpoints.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic city CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        nodes: usize,
        #[arg(long, default_value_t = 60)]
        days: usize,
        /// Samples per hour.
        #[arg(long, default_value_t = 12)]
        sph: usize,
        #[arg(long)]
        seed: u64,
        /// Waveform family: "source" or "target".
        #[arg(long, default_value = "source")]
        profile: String,
    },
    /// Meta-train on a source city and write a checkpoint.
    Pretrain {
        /// Source city CSV.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Fine-tune a checkpoint on a target city's few-shot head and
    /// evaluate on the remaining tail.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        /// Target city CSV (head is used for training, tail for testing).
        #[arg(long)]
        data: PathBuf,
        /// Ignore the checkpoint and fine-tune from random initialization.
        #[arg(long)]
        scratch: bool,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Evaluate a checkpoint on a held-out CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Finite-difference check of the full training gradient.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the memory × learned-encoding ablation grid end to end.
    Ablate {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Sweep the memory-bank size.
    SweepMemory {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Comma-separated bank sizes.
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,40")]
        sizes: Vec<usize>,
        /// Comma-separated seeds to aggregate over.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Sweep the number of periodicity tasks.
    SweepTasks {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        counts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Write a checkpoint's edge probabilities and one hard graph sample.
    DumpGraph {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    let cfg = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    let cfg: TrainConfig = cfg;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn run() -> Result<i32> {
    match Cli::parse().cmd {
        Cmd::Synth { out, nodes, days, sph, seed, profile } => {
            let profile = match profile.as_str() {
                "source" => SynthProfile::source(),
                "target" => SynthProfile::target(),
                other => {
                    return Err(SsmtError::Config(format!(
                        "unknown profile `{other}` (expected source|target)"
                    )))
                }
            };
            let series = synth_city(nodes, days * 24 * sph, sph, seed, &profile);
            if let Some(dir) = out.parent() {
                if !dir.as_os_str().is_empty() {
                    fs::create_dir_all(dir)?;
                }
            }
            write_csv(&series, &out)?;
            println!("wrote {} nodes × {} samples to {}", nodes, series.len(), out.display());
        }
        Cmd::Pretrain { data, common } => {
            let cfg = load_config(&common.config)?;
            let series = load_csv(&data, cfg.samples_per_hour)?;
            fs::create_dir_all(&common.out)?;
            let result = pretrain(&series, &cfg, common.seed)?;
            save_checkpoint(
                &common.out.join("model.ckpt"),
                &result.params,
                &cfg,
                &result.normalizer,
            )?;
            let mut curve = String::from("epoch,mean_query_mae\n");
            for e in &result.epochs {
                curve.push_str(&format!("{},{}\n", e.epoch, e.mean_query_mae));
            }
            fs::write(common.out.join("curve.csv"), curve)?;
            write_jsonl(&common.out.join("log.jsonl"), &result.epochs)?;
            write_json(
                &common.out.join("report.json"),
                &serde_json::json!({
                    "command": "pretrain",
                    "seed": common.seed,
                    "config_hash": cfg.hash(),
                    "epochs": result.epochs.len(),
                    "final_query_mae": result.epochs.last().map(|e| e.mean_query_mae),
                }),
            )?;
            println!(
                "pretrained {} epochs, final query MAE {:.4}",
                result.epochs.len(),
                result.epochs.last().map(|e| e.mean_query_mae).unwrap_or(f64::NAN)
            );
        }
        Cmd::Finetune { ckpt, data, scratch, common } => {
            fs::create_dir_all(&common.out)?;
            let loaded = load_checkpoint(&ckpt)?;
            // use the checkpoint's config unless one is given explicitly
            let cfg = match &common.config {
                Some(_) => load_config(&common.config)?,
                None => loaded.config.clone(),
            };
            let target = load_csv(&data, cfg.samples_per_hour)?;
            let (head, tail) = few_shot_split(&target, cfg.few_shot_days)?;
            let start = if scratch {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(common.seed ^ 0x736372);
                ssmt::model::init_params(
                    ssmt::model::Dims {
                        n_nodes: target.n_nodes(),
                        ..loaded.params.dims
                    },
                    &mut rng,
                )
            } else {
                use rand::SeedableRng;
                let mut rng =
                    rand_chacha::ChaCha8Rng::seed_from_u64(common.seed ^ 0x7472616e73666572);
                params_for_city(&loaded.params, target.n_nodes(), &mut rng)
            };
            let ft = finetune(start, &head, &cfg, common.seed)?;
            let report = evaluate(&ft.params, &tail, &ft.normalizer, &cfg, common.seed + 1)?;
            save_checkpoint(&common.out.join("model.ckpt"), &ft.params, &cfg, &ft.normalizer)?;
            let mut curve = String::from("epoch,total,mae,sep,comp\n");
            for e in &ft.epochs {
                curve.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.total, e.mae, e.sep, e.comp));
            }
            fs::write(common.out.join("curve.csv"), curve)?;
            write_jsonl(&common.out.join("log.jsonl"), &ft.epochs)?;
            write_json(&common.out.join("report.json"), &report)?;
            println!(
                "fine-tuned {} epochs; test MAE {:.4}, RMSE {:.4}",
                ft.epochs.len(),
                report.overall_mae,
                report.overall_rmse
            );
        }
        Cmd::Eval { ckpt, data, common } => {
            fs::create_dir_all(&common.out)?;
            let loaded = load_checkpoint(&ckpt)?;
            let cfg = match &common.config {
                Some(_) => load_config(&common.config)?,
                None => loaded.config.clone(),
            };
            let series = load_csv(&data, cfg.samples_per_hour)?;
            let report = evaluate(&loaded.params, &series, &loaded.normalizer, &cfg, common.seed)?;
            write_json(&common.out.join("report.json"), &report)?;
            for h in &report.per_horizon {
                println!("horizon {}: MAE {:.4}, RMSE {:.4}", h.horizon, h.mae, h.rmse);
            }
            println!("overall: MAE {:.4}, RMSE {:.4}", report.overall_mae, report.overall_rmse);
        }
        Cmd::Gradcheck { seed, out } => {
            let report = gradcheck(seed, None)?;
            for t in &report.tensors {
                println!("{:<16} worst rel err {:.3e}", t.name, t.worst_rel_err);
            }
            println!(
                "max {:.3e} (tolerance {:.0e}): {}",
                report.max_rel_err,
                report.tolerance,
                if report.pass { "PASS" } else { "FAIL" }
            );
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
            if !report.pass {
                return Ok(2);
            }
        }
        Cmd::Ablate { source, target, common } => {
            let cfg = load_config(&common.config)?;
            let src = load_csv(&source, cfg.samples_per_hour)?;
            let tgt = load_csv(&target, cfg.samples_per_hour)?;
            fs::create_dir_all(&common.out)?;
            let report = run_ablation(&src, &tgt, &cfg, common.seed)?;
            write_json(&common.out.join("report.json"), &report)?;
            for c in &report.cells {
                println!(
                    "memory={} mpe={}: MAE {:.4}, RMSE {:.4}",
                    c.memory, c.mpe, c.mae, c.rmse
                );
            }
        }
        Cmd::SweepMemory { source, target, sizes, seeds, common } => {
            let cfg = load_config(&common.config)?;
            let src = load_csv(&source, cfg.samples_per_hour)?;
            let tgt = load_csv(&target, cfg.samples_per_hour)?;
            fs::create_dir_all(&common.out)?;
            let rows = sweep_memory(&src, &tgt, &cfg, &sizes, &seeds)?;
            fs::write(common.out.join("sweep_memory.csv"), sweep_csv("b", &rows))?;
            for r in &rows {
                println!("b={}: MAE {:.4} ± {:.4}", r.value, r.mae_mean, r.mae_std);
            }
        }
        Cmd::SweepTasks { source, target, counts, seeds, common } => {
            let cfg = load_config(&common.config)?;
            let src = load_csv(&source, cfg.samples_per_hour)?;
            let tgt = load_csv(&target, cfg.samples_per_hour)?;
            fs::create_dir_all(&common.out)?;
            let rows = sweep_tasks(&src, &tgt, &cfg, &counts, &seeds)?;
            fs::write(common.out.join("sweep_tasks.csv"), sweep_csv("k", &rows))?;
            for r in &rows {
                println!("k={}: MAE {:.4} ± {:.4}", r.value, r.mae_mean, r.mae_std);
            }
        }
        Cmd::DumpGraph { ckpt, common } => {
            use rand::SeedableRng;
            let loaded = load_checkpoint(&ckpt)?;
            fs::create_dir_all(&common.out)?;
            let params = &loaded.params;
            let n = params.dims.n_nodes;
            let mut tape = ssmt::tape::Tape::new();
            let pv = ssmt::model::stage_params(&mut tape, params, false);
            let e = pv.var("node_embedding");
            let m = pv.var("memory");
            let xi = ssmt::graph::node_similarity(&mut tape, e, m)?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(common.seed);
            let noise = ssmt::graph::sample_gumbel_diff(n, &mut rng);
            let noise_var = tape.constant(noise);
            let adj = ssmt::graph::gumbel_adjacency(
                &mut tape,
                xi,
                loaded.config.tau,
                noise_var,
                ssmt::graph::SampleMode::Hard,
            )?;
            let dump = |t: &ssmt::tensor::Tensor| {
                let mut s = String::new();
                for i in 0..t.rows() {
                    let row: Vec<String> = (0..t.cols()).map(|j| t.at(i, j).to_string()).collect();
                    s.push_str(&row.join(","));
                    s.push('\n');
                }
                s
            };
            fs::write(common.out.join("xi.csv"), dump(tape.value(xi)))?;
            fs::write(common.out.join("adjacency.csv"), dump(tape.value(adj)))?;
            println!("wrote xi.csv and adjacency.csv ({n}×{n}) to {}", common.out.display());
        }
    }
    Ok(0)
}

fn main() {
    match run() {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
