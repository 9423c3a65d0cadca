//! Meta-pretraining (first-order, SGD inner/outer loops), few-shot
//! fine-tuning with Adam, and binary checkpoint I/O.
//!
//! Encoding happens on the tape here rather than in the data path, so the
//! learnable η = pe_scale ⊙ pe_basis receives gradients. η stays static
//! during inner adaptation and is updated only by the outer (query-loss)
//! step; fine-tuning trains everything jointly.

use crate::config::TrainConfig;
use crate::data::{epoch_batches, make_windows, Normalizer, TrafficSeries, WindowSample};
use crate::error::{Result, SsmtError};
use crate::graph::{sample_gumbel_diff, SampleMode};
use crate::losses::{
    compact_loss_on_tape, mae_on_tape, separate_loss_on_tape, LossWeights,
};
use crate::model::{
    init_params, stage_params, Dims, ForwardFlags, ModelParams, ParamVars, PARAM_NAMES,
};
use crate::optim::{sgd_step, GradMap, OptimizerState};
use crate::tape::{Tape, Var};
use crate::tasks::{build_tasks, periodic_encoding, PeriodSpec, Task};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

/// One pretraining epoch's log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub mean_query_mae: f64,
    pub wall_ms: u64,
}

/// One fine-tuning epoch's log record: the weighted objective and its parts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub total: f64,
    pub mae: f64,
    pub sep: f64,
    pub comp: f64,
}

/// Value-level view of one objective evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub mae: f64,
    pub sep: f64,
    pub comp: f64,
}

fn forward_flags(cfg: &TrainConfig) -> ForwardFlags {
    ForwardFlags {
        use_memory: !cfg.no_memory,
        mode: if cfg.hard_graph { SampleMode::Hard } else { SampleMode::Soft },
        tau: cfg.tau,
    }
}

/// Stage one window's input on the tape: raw values, plus the task's fixed
/// sinusoidal encoding (broadcast over nodes) and, when enabled, η read
/// from the staged parameters.
fn encode_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    w: &WindowSample,
    spec: &PeriodSpec,
    enable_pe: bool,
    enable_mpe: bool,
) -> Result<Var> {
    let mut x = tape.constant(w.x.clone());
    if enable_pe {
        let pe = periodic_encoding(w.t_start, w.x.cols(), spec);
        let pe_var = tape.constant(pe);
        x = tape.add_broadcast_row(x, pe_var)?;
    }
    if enable_mpe {
        let basis = pv.var("pe_basis");
        let scale = pv.var("pe_scale");
        let eta = tape.mul_broadcast_row(basis, scale)?;
        x = tape.add(x, eta)?;
    }
    Ok(x)
}

/// Mean forecast MAE over a set of windows, one graph sample per window.
pub(crate) fn batch_mae<R: Rng>(
    tape: &mut Tape,
    pv: &ParamVars,
    windows: &[WindowSample],
    spec: &PeriodSpec,
    dims: &Dims,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Var> {
    if windows.is_empty() {
        return Err(SsmtError::Config("empty window set".into()));
    }
    let flags = forward_flags(cfg);
    let mut acc: Option<Var> = None;
    for w in windows {
        let noise = sample_gumbel_diff(dims.n_nodes, rng);
        let x = encode_on_tape(tape, pv, w, spec, cfg.tasks.enable_pe, cfg.tasks.enable_mpe)?;
        let trace = crate::model::forward(tape, pv, x, dims, &flags, &noise)?;
        let y = tape.constant(w.y.clone());
        let l = mae_on_tape(tape, trace.pred, y)?;
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / windows.len() as f64))
}

/// Weighted fine-tuning objective over a batch: C1·mae + C2·sep + C3·comp,
/// with the memory terms batch-averaged. Without the memory bank only the
/// forecast term remains.
pub(crate) fn batch_objective<R: Rng>(
    tape: &mut Tape,
    pv: &ParamVars,
    windows: &[WindowSample],
    spec: &PeriodSpec,
    dims: &Dims,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Var, LossBreakdown)> {
    if windows.is_empty() {
        return Err(SsmtError::Config("empty window set".into()));
    }
    let flags = forward_flags(cfg);
    let w_loss: &LossWeights = &cfg.loss;
    let mut mae_acc: Option<Var> = None;
    let mut sep_acc: Option<Var> = None;
    let mut comp_acc: Option<Var> = None;
    let add_into = |tape: &mut Tape, acc: Option<Var>, v: Var| -> Result<Option<Var>> {
        Ok(Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        }))
    };
    for w in windows {
        let noise = sample_gumbel_diff(dims.n_nodes, rng);
        let x = encode_on_tape(tape, pv, w, spec, cfg.tasks.enable_pe, cfg.tasks.enable_mpe)?;
        let trace = crate::model::forward(tape, pv, x, dims, &flags, &noise)?;
        let y = tape.constant(w.y.clone());
        let l = mae_on_tape(tape, trace.pred, y)?;
        mae_acc = add_into(tape, mae_acc, l)?;
        if let Some(top2) = &trace.top2 {
            let memory = pv.var("memory");
            let s = separate_loss_on_tape(tape, trace.gcn_out, memory, top2, w_loss.lambda)?;
            let c = compact_loss_on_tape(tape, trace.gcn_out, memory, top2)?;
            sep_acc = add_into(tape, sep_acc, s)?;
            comp_acc = add_into(tape, comp_acc, c)?;
        }
    }
    let inv = 1.0 / windows.len() as f64;
    let mae_mean = tape.scale(mae_acc.unwrap(), inv);
    let mut total = tape.scale(mae_mean, w_loss.c1);
    let mut bd = LossBreakdown {
        mae: tape.value(mae_mean).scalar_value(),
        ..Default::default()
    };
    if let Some(s) = sep_acc {
        // per-node mean keeps the memory terms on the same scale as the
        // forecast term regardless of city size
        let inv_mem = inv / dims.n_nodes as f64;
        let s_mean = tape.scale(s, inv_mem);
        let c_mean = tape.scale(comp_acc.unwrap(), inv_mem);
        bd.sep = tape.value(s_mean).scalar_value();
        bd.comp = tape.value(c_mean).scalar_value();
        let s_w = tape.scale(s_mean, w_loss.c2);
        let c_w = tape.scale(c_mean, w_loss.c3);
        total = tape.add(total, s_w)?;
        total = tape.add(total, c_w)?;
    }
    bd.total = tape.value(total).scalar_value();
    Ok((total, bd))
}

fn grads_by_name(
    pv: &ParamVars,
    grads: &crate::tape::Gradients,
    skip: &[&str],
) -> GradMap {
    let mut out = GradMap::new();
    for (name, var) in pv.iter() {
        if skip.contains(&name) {
            continue;
        }
        if let Some(g) = grads.get(var) {
            out.insert(name.to_string(), g.clone());
        }
    }
    out
}

fn accumulate(acc: &mut GradMap, add: &GradMap) -> Result<()> {
    for (name, g) in add {
        match acc.get_mut(name) {
            Some(a) => {
                a.check_same_shape(g, "grad accumulate")?;
                *a = a.zip(g, |x, y| x + y);
            }
            None => {
                acc.insert(name.clone(), g.clone());
            }
        }
    }
    Ok(())
}

/// Names frozen during inner-loop adaptation: η is meta-learned, so it is
/// updated only by the outer step.
const INNER_FROZEN: [&str; 2] = ["pe_scale", "pe_basis"];

/// Task adaptation: `inner_steps` SGD steps on the support loss, starting
/// from a copy of `params`.
pub fn inner_adapt<R: Rng>(
    params: &ModelParams,
    task: &Task,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ModelParams> {
    let mut adapted = params.clone();
    let dims = adapted.dims;
    for _ in 0..cfg.inner_steps {
        let mut tape = Tape::new();
        let pv = stage_params(&mut tape, &adapted, true);
        let loss = batch_mae(&mut tape, &pv, &task.support, &task.period, &dims, cfg, rng)?;
        let grads = tape.backward(loss)?;
        let gm = grads_by_name(&pv, &grads, &INNER_FROZEN);
        let mut pairs: Vec<(String, Tensor)> = adapted
            .named()
            .into_iter()
            .filter(|(n, _)| !INNER_FROZEN.contains(&n.as_str()))
            .collect();
        sgd_step(&mut pairs, &gm, cfg.inner_lr)?;
        adapted.assign(&pairs)?;
    }
    Ok(adapted)
}

/// One meta-update: adapt per task, take each task's query-loss gradient at
/// the adapted parameters (first-order approximation), sum across tasks,
/// and apply one SGD step to the meta-parameters. Returns the mean query
/// MAE before the update.
pub fn meta_step<R: Rng>(
    params: &mut ModelParams,
    tasks: &[Task],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(SsmtError::Config("meta step needs at least one task".into()));
    }
    let dims = params.dims;
    let mut acc = GradMap::new();
    let mut query_sum = 0.0;
    for task in tasks {
        let adapted = inner_adapt(params, task, cfg, rng)?;
        let mut tape = Tape::new();
        let pv = stage_params(&mut tape, &adapted, true);
        let loss = batch_mae(&mut tape, &pv, &task.query, &task.period, &dims, cfg, rng)?;
        query_sum += tape.value(loss).scalar_value();
        let grads = tape.backward(loss)?;
        let gm = grads_by_name(&pv, &grads, &[]);
        accumulate(&mut acc, &gm)?;
    }
    let mut pairs = params.named();
    sgd_step(&mut pairs, &acc, cfg.outer_lr)?;
    params.assign(&pairs)?;
    Ok(query_sum / tasks.len() as f64)
}

/// Pretraining output: meta-parameters plus the source normalizer that any
/// later fine-tuning and evaluation must reuse consistently.
#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub params: ModelParams,
    pub normalizer: Normalizer,
    pub epochs: Vec<PretrainEpoch>,
}

pub(crate) fn dims_for(cfg: &TrainConfig, n_nodes: usize) -> Dims {
    Dims {
        n_nodes,
        t_in: cfg.t_in,
        t_out: cfg.t_out,
        hidden: cfg.hidden,
        mem_items: cfg.mem_items,
        embed_dim: cfg.embed_dim,
    }
}

pub(crate) fn period_specs(cfg: &TrainConfig, samples_per_hour: usize) -> Vec<PeriodSpec> {
    cfg.tasks
        .periods
        .iter()
        .map(|&p| PeriodSpec::new(p, samples_per_hour))
        .collect()
}

pub(crate) fn normalized(series: &TrafficSeries, norm: &Normalizer) -> TrafficSeries {
    TrafficSeries {
        values: norm.apply(&series.values),
        node_ids: series.node_ids.clone(),
        samples_per_hour: series.samples_per_hour,
        origin_index: series.origin_index,
    }
}

/// Meta-train on one source city from random initialization.
pub fn pretrain(series: &TrafficSeries, cfg: &TrainConfig, seed: u64) -> Result<PretrainResult> {
    cfg.validate()?;
    let normalizer = crate::data::fit_normalizer(series, 0, series.len())?;
    let z = normalized(series, &normalizer);
    let windows = make_windows(&z, cfg.t_in, cfg.t_out, cfg.window_stride)?;
    if windows.len() < cfg.batch_size {
        return Err(SsmtError::Config(format!(
            "only {} windows for batch size {}",
            windows.len(),
            cfg.batch_size
        )));
    }
    let specs = period_specs(cfg, series.samples_per_hour);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(dims_for(cfg, series.n_nodes()), &mut rng);
    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    for epoch in 0..cfg.max_epochs {
        let t0 = Instant::now();
        let batches = epoch_batches(&windows, cfg.batch_size, &mut rng);
        let mut sum = 0.0;
        for batch in &batches {
            let tasks = build_tasks(batch, &specs)?;
            sum += meta_step(&mut params, &tasks, cfg, &mut rng)?;
        }
        epochs.push(PretrainEpoch {
            epoch,
            mean_query_mae: sum / batches.len() as f64,
            wall_ms: t0.elapsed().as_millis() as u64,
        });
    }
    Ok(PretrainResult { params, normalizer, epochs })
}

/// Fine-tuning output on a target range.
#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub params: ModelParams,
    pub normalizer: Normalizer,
    pub epochs: Vec<FinetuneEpoch>,
}

/// Split a target series into a leading few-shot fine-tune range of
/// `days` days and the remaining test range.
pub fn few_shot_split(series: &TrafficSeries, days: usize) -> Result<(TrafficSeries, TrafficSeries)> {
    let cut = days * 24 * series.samples_per_hour;
    if cut == 0 || cut >= series.len() {
        return Err(SsmtError::Config(format!(
            "few-shot split of {days} days ({cut} samples) does not fit series of length {}",
            series.len()
        )));
    }
    Ok((series.slice_time(0, cut), series.slice_time(cut, series.len())))
}

/// Supervised fine-tuning with Adam on the weighted objective. `params` is
/// the starting point for the target city (transferred or fresh); only the
/// daily encoding is used.
pub fn finetune(
    params: ModelParams,
    series: &TrafficSeries,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    if params.dims.n_nodes != series.n_nodes() {
        return Err(SsmtError::ShapeMismatch {
            op: "finetune",
            lhs: (params.dims.n_nodes, 0),
            rhs: (series.n_nodes(), 0),
        });
    }
    let normalizer = crate::data::fit_normalizer(series, 0, series.len())?;
    let z = normalized(series, &normalizer);
    let windows = make_windows(&z, cfg.t_in, cfg.t_out, cfg.window_stride)?;
    let batch_size = cfg.batch_size.min(windows.len());
    let spec = PeriodSpec::new(1, series.samples_per_hour);
    let dims = params.dims;
    let mut params = params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = OptimizerState::new(cfg.finetune_lr);
    let mut epochs = Vec::with_capacity(cfg.finetune_epochs);
    for epoch in 0..cfg.finetune_epochs {
        let batches = epoch_batches(&windows, batch_size, &mut rng);
        let mut sums = LossBreakdown::default();
        for batch in &batches {
            let mut tape = Tape::new();
            let pv = stage_params(&mut tape, &params, true);
            let (loss, bd) = batch_objective(&mut tape, &pv, batch, &spec, &dims, cfg, &mut rng)?;
            let grads = tape.backward(loss)?;
            let gm = grads_by_name(&pv, &grads, &[]);
            let mut pairs = params.named();
            adam.adam_step(&mut pairs, &gm)?;
            params.assign(&pairs)?;
            sums.total += bd.total;
            sums.mae += bd.mae;
            sums.sep += bd.sep;
            sums.comp += bd.comp;
        }
        let inv = 1.0 / batches.len().max(1) as f64;
        epochs.push(FinetuneEpoch {
            epoch,
            total: sums.total * inv,
            mae: sums.mae * inv,
            sep: sums.sep * inv,
            comp: sums.comp * inv,
        });
    }
    Ok(FinetuneResult { params, normalizer, epochs })
}

// ---------------------------------------------------------------------------
// Checkpoint format: 8 magic bytes, u32 LE format version, u32 LE manifest
// length, JSON manifest, then one raw little-endian f64 payload addressed by
// the manifest's per-tensor byte offsets.

pub const CKPT_MAGIC: [u8; 8] = *b"SSMTCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset into the payload.
    offset: usize,
    class: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dims: Dims,
    config: TrainConfig,
    normalizer: Normalizer,
    tensors: Vec<TensorEntry>,
}

/// A saved training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub normalizer: Normalizer,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    cfg: &TrainConfig,
    normalizer: &Normalizer,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, class) in PARAM_NAMES {
        let t = params.tensor(name).unwrap();
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
            offset: payload.len(),
            class: match class {
                crate::model::TransferClass::Shared => "shared".into(),
                crate::model::TransferClass::CityPrivate => "city-private".into(),
            },
        });
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        dims: params.dims,
        config: cfg.clone(),
        normalizer: *normalizer,
        tensors,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&CKPT_MAGIC)?;
    f.write_all(&CKPT_VERSION.to_le_bytes())?;
    f.write_all(&(manifest_json.len() as u32).to_le_bytes())?;
    f.write_all(&manifest_json)?;
    f.write_all(&payload)?;
    Ok(())
}

fn ckpt_err(detail: impl Into<String>) -> SsmtError {
    SsmtError::Checkpoint(detail.into())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(ckpt_err("file too short for header"));
    }
    if bytes[..8] != CKPT_MAGIC {
        return Err(ckpt_err("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(ckpt_err(format!(
            "unsupported format version {version} (expected {CKPT_VERSION})"
        )));
    }
    let mlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(ckpt_err("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])?;
    let payload = &bytes[16 + mlen..];

    let mut loaded: Vec<(String, Tensor)> = Vec::new();
    for entry in &manifest.tensors {
        let n_bytes = entry.rows * entry.cols * 8;
        let end = entry.offset.checked_add(n_bytes).ok_or_else(|| {
            ckpt_err(format!("offset overflow for tensor `{}`", entry.name))
        })?;
        if end > payload.len() {
            return Err(ckpt_err(format!(
                "truncated payload reading tensor `{}`: need {} bytes, have {}",
                entry.name,
                end,
                payload.len()
            )));
        }
        let data: Vec<f64> = payload[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.push((entry.name.clone(), Tensor::new(entry.rows, entry.cols, data)));
    }
    for (name, _) in PARAM_NAMES {
        if !loaded.iter().any(|(n, _)| n == name) {
            return Err(ckpt_err(format!("manifest missing tensor `{name}`")));
        }
    }
    // Build with correct shapes via a throwaway init, then overwrite all.
    let mut params = init_params(manifest.dims, &mut ChaCha8Rng::seed_from_u64(0));
    params.assign(&loaded).map_err(|e| ckpt_err(format!("shape mismatch: {e}")))?;
    Ok(Checkpoint {
        params,
        config: manifest.config,
        normalizer: manifest.normalizer,
    })
}
