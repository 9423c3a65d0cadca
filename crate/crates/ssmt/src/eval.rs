//! Held-out evaluation, the memory/η ablation grid, capacity and
//! task-count sweeps, and an end-to-end finite-difference gradient check.

use crate::config::{hex_prefix, TrainConfig};
use crate::data::{make_windows, Normalizer, TrafficSeries};
use crate::error::{Result, SsmtError};
use crate::graph::{sample_gumbel_diff, SampleMode};
use crate::model::{
    forward, init_params, params_for_city, stage_params, ForwardFlags, ModelParams, PARAM_NAMES,
};
use crate::tape::Tape;
use crate::tasks::PeriodSpec;
use crate::tensor::Tensor;
use crate::trainer::{
    batch_objective, dims_for, few_shot_split, finetune, normalized, pretrain,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// De-normalized error metrics at one forecast step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonMetric {
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
}

/// Test-range evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_horizon: Vec<HorizonMetric>,
    pub overall_mae: f64,
    pub overall_rmse: f64,
    pub sample_count: usize,
    pub config_hash: String,
    pub seed: u64,
}

/// Evaluate on a raw held-out series: hard (binarized) graph samples drawn
/// from the given seed, predictions and targets compared in original units.
pub fn evaluate(
    params: &ModelParams,
    series: &TrafficSeries,
    normalizer: &Normalizer,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<EvalReport> {
    if params.dims.n_nodes != series.n_nodes() {
        return Err(SsmtError::ShapeMismatch {
            op: "evaluate",
            lhs: (params.dims.n_nodes, 0),
            rhs: (series.n_nodes(), 0),
        });
    }
    let z = normalized(series, normalizer);
    let windows = make_windows(&z, cfg.t_in, cfg.t_out, cfg.eval_stride)?;
    let spec = PeriodSpec::new(1, series.samples_per_hour);
    let dims = params.dims;
    let flags = ForwardFlags {
        use_memory: !cfg.no_memory,
        mode: SampleMode::Hard,
        tau: cfg.tau,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let t_out = cfg.t_out;
    let mut abs_sum = vec![0.0; t_out];
    let mut sq_sum = vec![0.0; t_out];
    let n = dims.n_nodes as f64;
    for w in &windows {
        let noise = sample_gumbel_diff(dims.n_nodes, &mut rng);
        let mut tape = Tape::new();
        let pv = stage_params(&mut tape, params, false);
        let mut x = tape.constant(w.x.clone());
        if cfg.tasks.enable_pe {
            let pe = crate::tasks::periodic_encoding(w.t_start, cfg.t_in, &spec);
            let pe_var = tape.constant(pe);
            x = tape.add_broadcast_row(x, pe_var)?;
        }
        if cfg.tasks.enable_mpe {
            let basis = pv.var("pe_basis");
            let scale = pv.var("pe_scale");
            let eta = tape.mul_broadcast_row(basis, scale)?;
            x = tape.add(x, eta)?;
        }
        let trace = forward(&mut tape, &pv, x, &dims, &flags, &noise)?;
        let pred = normalizer.invert(tape.value(trace.pred));
        let target = normalizer.invert(&w.y);
        for k in 0..t_out {
            for i in 0..dims.n_nodes {
                let e = pred.at(i, k) - target.at(i, k);
                abs_sum[k] += e.abs();
                sq_sum[k] += e * e;
            }
        }
    }
    let count = windows.len();
    let denom = count as f64 * n;
    let per_horizon = cfg
        .horizons
        .iter()
        .map(|&h| HorizonMetric {
            horizon: h,
            mae: abs_sum[h - 1] / denom,
            rmse: (sq_sum[h - 1] / denom).sqrt(),
        })
        .collect();
    let overall_mae = abs_sum.iter().sum::<f64>() / (denom * t_out as f64);
    let overall_rmse = (sq_sum.iter().sum::<f64>() / (denom * t_out as f64)).sqrt();
    Ok(EvalReport {
        per_horizon,
        overall_mae,
        overall_rmse,
        sample_count: count,
        config_hash: cfg.hash(),
        seed,
    })
}

/// Result of the full source→target pipeline on one seed.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub params: ModelParams,
    pub report: EvalReport,
    pub pretrain_curve: Vec<crate::trainer::PretrainEpoch>,
    pub finetune_curve: Vec<crate::trainer::FinetuneEpoch>,
}

/// Pretrain on the source city, transfer shared tensors to the target,
/// fine-tune on the target's few-shot head, evaluate on its tail.
pub fn transfer_pipeline(
    source: &TrafficSeries,
    target: &TrafficSeries,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PipelineResult> {
    let pre = pretrain(source, cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472616e73666572); // "transfer"
    let target_params = params_for_city(&pre.params, target.n_nodes(), &mut rng);
    let (head, tail) = few_shot_split(target, cfg.few_shot_days)?;
    let ft = finetune(target_params, &head, cfg, seed.wrapping_add(1))?;
    let report = evaluate(&ft.params, &tail, &ft.normalizer, cfg, seed.wrapping_add(2))?;
    Ok(PipelineResult {
        params: ft.params,
        report,
        pretrain_curve: pre.epochs,
        finetune_curve: ft.epochs,
    })
}

/// Baseline without transfer: random initialization fine-tuned on the same
/// few-shot head, evaluated on the same tail with the same seeds.
pub fn scratch_pipeline(
    target: &TrafficSeries,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PipelineResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472616e73666572);
    let params = init_params(dims_for(cfg, target.n_nodes()), &mut rng);
    let (head, tail) = few_shot_split(target, cfg.few_shot_days)?;
    let ft = finetune(params, &head, cfg, seed.wrapping_add(1))?;
    let report = evaluate(&ft.params, &tail, &ft.normalizer, cfg, seed.wrapping_add(2))?;
    Ok(PipelineResult {
        params: ft.params,
        report,
        pretrain_curve: Vec::new(),
        finetune_curve: ft.epochs,
    })
}

/// One cell of the 2×2 component grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub memory: bool,
    pub mpe: bool,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub seed: u64,
    /// Identifies the few-shot split the cells share.
    pub split_hash: String,
}

/// Run the full pipeline for every memory × η combination with shared
/// seeds and an identical split.
pub fn run_ablation(
    source: &TrafficSeries,
    target: &TrafficSeries,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<AblationReport> {
    let mut cells = Vec::new();
    for (memory, mpe) in [(false, false), (false, true), (true, false), (true, true)] {
        let mut c = cfg.clone();
        c.no_memory = !memory;
        c.tasks.enable_mpe = mpe;
        let out = transfer_pipeline(source, target, &c, seed)?;
        cells.push(AblationCell {
            memory,
            mpe,
            mae: out.report.overall_mae,
            rmse: out.report.overall_rmse,
        });
    }
    let cut = cfg.few_shot_days * 24 * target.samples_per_hour;
    let digest = Sha256::digest(
        format!("{}:{}:{}", target.n_nodes(), target.len(), cut).as_bytes(),
    );
    Ok(AblationReport {
        cells,
        seed,
        split_hash: hex_prefix(&digest, 16),
    })
}

/// Rows of a sweep over one hyperparameter, aggregated over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Sweep the memory-bank size over the full pipeline.
pub fn sweep_memory(
    source: &TrafficSeries,
    target: &TrafficSeries,
    cfg: &TrainConfig,
    sizes: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if sizes.is_empty() || seeds.is_empty() {
        return Err(SsmtError::Config("sweep needs sizes and seeds".into()));
    }
    let mut rows = Vec::new();
    for &b in sizes {
        let mut maes = Vec::new();
        for &seed in seeds {
            let c = TrainConfig { mem_items: b, ..cfg.clone() };
            maes.push(transfer_pipeline(source, target, &c, seed)?.report.overall_mae);
        }
        let (mae_mean, mae_std) = mean_std(&maes);
        rows.push(SweepRow { value: b, mae_mean, mae_std });
    }
    Ok(rows)
}

/// Sweep the number of periodicity tasks (1 → daily; 2 → +weekly;
/// 3 → +monthly), shrinking the batch to stay divisible.
pub fn sweep_tasks(
    source: &TrafficSeries,
    target: &TrafficSeries,
    cfg: &TrainConfig,
    counts: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if counts.is_empty() || seeds.is_empty() {
        return Err(SsmtError::Config("sweep needs task counts and seeds".into()));
    }
    let all = [1usize, 7, 30];
    let mut rows = Vec::new();
    for &k in counts {
        if k == 0 || k > 3 {
            return Err(SsmtError::Config(format!("task count {k} outside [1, 3]")));
        }
        let mut maes = Vec::new();
        for &seed in seeds {
            let mut c = cfg.clone();
            c.tasks.periods = all[..k].to_vec();
            let div = 2 * k;
            c.batch_size = (cfg.batch_size / div).max(1) * div;
            maes.push(transfer_pipeline(source, target, &c, seed)?.report.overall_mae);
        }
        let (mae_mean, mae_std) = mean_std(&maes);
        rows.push(SweepRow { value: k, mae_mean, mae_std });
    }
    Ok(rows)
}

/// Write sweep rows as `value,mae_mean,mae_std` CSV with a header.
pub fn sweep_csv(header_value: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{header_value},mae_mean,mae_std\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.value, r.mae_mean, r.mae_std));
    }
    out
}

// ---------------------------------------------------------------------------
// End-to-end gradient check of the fine-tuning objective.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckTensor {
    pub name: String,
    pub worst_rel_err: f64,
    pub worst_coord: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tensors: Vec<GradcheckTensor>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_H: f64 = 1e-5;

fn gradcheck_cfg() -> TrainConfig {
    TrainConfig {
        t_in: 6,
        t_out: 2,
        hidden: 3,
        mem_items: 4,
        embed_dim: 5,
        samples_per_hour: 12,
        ..Default::default()
    }
}

fn gradcheck_loss(params: &ModelParams, cfg: &TrainConfig, noise_seed: u64) -> Result<f64> {
    let dims = params.dims;
    let spec = PeriodSpec::new(1, cfg.samples_per_hour);
    let mut data_rng = ChaCha8Rng::seed_from_u64(noise_seed.wrapping_add(77));
    let windows: Vec<crate::data::WindowSample> = (0..2)
        .map(|i| crate::data::WindowSample {
            x: Tensor::randn(dims.n_nodes, dims.t_in, 1.0, &mut data_rng),
            y: Tensor::randn(dims.n_nodes, dims.t_out, 1.0, &mut data_rng),
            t_start: 5 + 17 * i,
        })
        .collect();
    let mut tape = Tape::new();
    let pv = stage_params(&mut tape, params, false);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let (loss, _) = batch_objective(&mut tape, &pv, &windows, &spec, &dims, cfg, &mut rng)?;
    Ok(tape.value(loss).scalar_value())
}

/// Compare the analytic gradient of the full training objective (forecast
/// term plus both memory regularizers, η in the input) against central
/// finite differences on a small fixed instance. `corrupt` perturbs one
/// tensor's analytic gradient first, as a negative control.
pub fn gradcheck(seed: u64, corrupt: Option<&str>) -> Result<GradcheckReport> {
    let cfg = gradcheck_cfg();
    let dims = dims_for(&cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(dims, &mut rng);
    let noise_seed = seed.wrapping_add(1000);

    // analytic pass
    let spec = PeriodSpec::new(1, cfg.samples_per_hour);
    let mut data_rng = ChaCha8Rng::seed_from_u64(noise_seed.wrapping_add(77));
    let windows: Vec<crate::data::WindowSample> = (0..2)
        .map(|i| crate::data::WindowSample {
            x: Tensor::randn(dims.n_nodes, dims.t_in, 1.0, &mut data_rng),
            y: Tensor::randn(dims.n_nodes, dims.t_out, 1.0, &mut data_rng),
            t_start: 5 + 17 * i,
        })
        .collect();
    let mut tape = Tape::new();
    let pv = stage_params(&mut tape, &params, true);
    let mut obj_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let (loss, _) = batch_objective(&mut tape, &pv, &windows, &spec, &dims, &cfg, &mut obj_rng)?;
    let grads = tape.backward(loss)?;

    let mut tensors = Vec::new();
    let mut max_rel = 0.0f64;
    for (name, _) in PARAM_NAMES {
        let analytic = grads
            .get(pv.var(name))
            .cloned()
            .ok_or_else(|| SsmtError::Config(format!("no gradient for {name}")))?;
        let base = params.tensor(name).unwrap().clone();
        let mut worst = 0.0f64;
        let mut worst_coord = (0, 0);
        for r in 0..base.rows() {
            for c in 0..base.cols() {
                let mut probe = params.clone();
                let mut t = base.clone();
                t.set(r, c, base.at(r, c) + GRADCHECK_H);
                probe.assign(&[(name.to_string(), t.clone())])?;
                let up = gradcheck_loss(&probe, &cfg, noise_seed)?;
                t.set(r, c, base.at(r, c) - GRADCHECK_H);
                probe.assign(&[(name.to_string(), t)])?;
                let down = gradcheck_loss(&probe, &cfg, noise_seed)?;
                let fd = (up - down) / (2.0 * GRADCHECK_H);
                let mut a = analytic.at(r, c);
                if corrupt == Some(name) {
                    a += 1e-2;
                }
                let rel = (a - fd).abs() / f64::max(1e-3, f64::max(a.abs(), fd.abs()));
                if rel > worst {
                    worst = rel;
                    worst_coord = (r, c);
                }
            }
        }
        max_rel = max_rel.max(worst);
        tensors.push(GradcheckTensor {
            name: name.to_string(),
            worst_rel_err: worst,
            worst_coord,
        });
    }
    Ok(GradcheckReport {
        tensors,
        max_rel_err: max_rel,
        tolerance: GRADCHECK_TOL,
        pass: max_rel < GRADCHECK_TOL,
    })
}
