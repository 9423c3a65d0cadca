//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail line (visible with `--nocapture`). Heavy end-to-end runs are
//! computed once and shared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmt::config::TrainConfig;
use ssmt::data::{synth_city, SynthProfile, TrafficSeries, WindowSample};
use ssmt::eval::{gradcheck, scratch_pipeline, transfer_pipeline};
use ssmt::graph::{gumbel_adjacency, memory_address, sample_gumbel_diff, SampleMode};
use ssmt::model::{params_for_city, ModelParams, PARAM_NAMES};
use ssmt::tape::Tape;
use ssmt::tasks::{build_tasks, periodic_encoding, PeriodSpec};
use ssmt::tensor::Tensor;
use ssmt::trainer::{
    few_shot_split, finetune, load_checkpoint, pretrain, save_checkpoint,
};
use std::sync::OnceLock;
use std::time::Instant;

fn report(criterion: &str, ok: bool) {
    println!("criterion {criterion}: {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion} failed");
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// Shared desk-scale setup: 20-node source (30 days at 6 samples/hour),
// 12-node target (7 fine-tune days + 7 test days), seeds 1–5.

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn desk_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 24,
        max_epochs: 20,
        mem_items: 8,
        embed_dim: 16,
        t_in: 8,
        t_out: 4,
        hidden: 8,
        samples_per_hour: 6,
        window_stride: 6,
        finetune_epochs: 5,
        few_shot_days: 7,
        horizons: vec![1, 2, 4],
        eval_stride: 6,
        // At 12 nodes the forecast term is small enough that the default
        // memory-regularizer weights drown it out during fine-tuning, so the
        // desk runs use lighter ones. The exact-decomposition check below
        // still uses the defaults.
        loss: ssmt::losses::LossWeights { c2: 0.02, c3: 0.02, ..Default::default() },
        ..Default::default()
    }
}

// Node phases span a full day and daily amplitudes vary by ±90% so cities
// are heterogeneous enough that a 2-item memory bank visibly underfits.
fn desk_profile(base: SynthProfile) -> SynthProfile {
    SynthProfile { phase_spread: 144.0, amp_spread: 0.9, ..base }
}

fn desk_source() -> TrafficSeries {
    synth_city(20, 30 * 144, 6, 100, &desk_profile(SynthProfile::source()))
}

fn desk_target() -> TrafficSeries {
    synth_city(12, 14 * 144, 6, 200, &desk_profile(SynthProfile::target()))
}

/// Per-seed MAE for the 2×2 component grid plus the no-transfer baseline.
struct Grid {
    /// indexed by (memory as usize) * 2 + (mpe as usize)
    cells: [Vec<f64>; 4],
    scratch: Vec<f64>,
    build_secs: f64,
}

fn grid() -> &'static Grid {
    static GRID: OnceLock<Grid> = OnceLock::new();
    GRID.get_or_init(|| {
        let cfg = desk_cfg();
        let source = desk_source();
        let target = desk_target();
        let t0 = Instant::now();
        let mut cells: [Vec<f64>; 4] = Default::default();
        let mut scratch = Vec::new();
        for &seed in &SEEDS {
            for (memory, mpe) in [(false, false), (false, true), (true, false), (true, true)] {
                let mut c = cfg.clone();
                c.no_memory = !memory;
                c.tasks.enable_mpe = mpe;
                let mae = transfer_pipeline(&source, &target, &c, seed)
                    .unwrap()
                    .report
                    .overall_mae;
                cells[(memory as usize) * 2 + (mpe as usize)].push(mae);
            }
            scratch.push(
                scratch_pipeline(&target, &cfg, seed).unwrap().report.overall_mae,
            );
        }
        Grid { cells, scratch, build_secs: t0.elapsed().as_secs_f64() }
    })
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_gradient_correctness() {
    let t0 = Instant::now();
    let r = gradcheck(42, None).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let control = gradcheck(42, Some("theta_z")).unwrap();
    report(
        "01 (end-to-end gradient vs finite differences)",
        r.pass && r.max_rel_err < 1e-4 && elapsed < 30.0 && !control.pass,
    );
}

#[test]
fn criterion_02_hard_graph_bernoulli_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ok = true;
    for p in [0.1, 0.5, 0.7, 0.9] {
        let mut ones = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            let mut tape = Tape::new();
            let xi = tape.constant(Tensor::new(1, 1, vec![p]));
            let noise = sample_gumbel_diff(1, &mut rng);
            let noise = tape.constant(noise);
            let a = gumbel_adjacency(&mut tape, xi, 0.5, noise, SampleMode::Hard).unwrap();
            if tape.value(a).at(0, 0) == 1.0 {
                ones += 1;
            }
        }
        let freq = ones as f64 / draws as f64;
        ok &= (freq - p).abs() <= 0.02;
    }
    report("02 (hard graph samples are exactly Bernoulli(xi))", ok);
}

#[test]
fn criterion_03_memory_addressing_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, b, d) = (5, 6, 7);
    let mut ok = true;
    for _ in 0..1000 {
        let o = Tensor::randn(n, d, 1.0, &mut rng);
        let m = Tensor::randn(b, d, 1.0, &mut rng);
        let mut tape = Tape::new();
        let ov = tape.constant(o.clone());
        let mv = tape.constant(m.clone());
        let (w, p, _) = memory_address(&mut tape, ov, mv).unwrap();
        let w_val = tape.value(w).clone();
        // rows are distributions → P rows are convex combinations of M rows
        for r in 0..n {
            let mut sum = 0.0;
            for c in 0..b {
                let v = w_val.at(r, c);
                ok &= v >= 0.0;
                sum += v;
            }
            ok &= (sum - 1.0).abs() < 1e-12;
        }
        // P really is w·M
        let expected = w_val.matmul(&m).unwrap();
        let p_val = tape.value(p);
        for i in 0..p_val.len() {
            ok &= (p_val.data()[i] - expected.data()[i]).abs() < 1e-12;
        }
        // per-row positive rescaling of the query leaves the weights alone
        let mut scaled = o.clone();
        let factors: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.gen_range(-3.0..3.0))).collect();
        for r in 0..n {
            for c in 0..d {
                scaled.set(r, c, o.at(r, c) * factors[r]);
            }
        }
        let mut tape2 = Tape::new();
        let ov2 = tape2.constant(scaled);
        let mv2 = tape2.constant(m);
        let (w2, _, _) = memory_address(&mut tape2, ov2, mv2).unwrap();
        let w2_val = tape2.value(w2);
        for i in 0..w2_val.len() {
            ok &= (w2_val.data()[i] - w_val.data()[i]).abs() < 1e-9;
        }
    }
    report("03 (addressing: distributions, convexity, scale invariance)", ok);
}

#[test]
fn criterion_04_periodic_encoding_periodicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut ok = true;
    for v in [1usize, 7, 30] {
        for sph in [6usize, 12] {
            let spec = PeriodSpec::new(v, sph);
            let period = 24 * sph * v;
            for _ in 0..1000 {
                let pos = rng.gen_range(0..1_000_000usize);
                let a = periodic_encoding(pos, 8, &spec);
                let b = periodic_encoding(pos + period, 8, &spec);
                for c in 0..8 {
                    ok &= (a.at(0, c) - b.at(0, c)).abs() < 1e-9;
                }
            }
        }
    }
    report("04 (encodings repeat at their daily/weekly/monthly period)", ok);
}

#[test]
fn criterion_05_task_partition_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let specs = [PeriodSpec::new(1, 6), PeriodSpec::new(7, 6), PeriodSpec::new(30, 6)];
    let mut ok = true;
    for _ in 0..200 {
        // random batch with unique, sorted start indices
        let mut starts: Vec<usize> = (0..1000).collect();
        use rand::seq::SliceRandom;
        starts.shuffle(&mut rng);
        let mut starts: Vec<usize> = starts[..24].to_vec();
        starts.sort_unstable();
        let batch: Vec<WindowSample> = starts
            .iter()
            .map(|&t| WindowSample {
                x: Tensor::zeros(3, 8),
                y: Tensor::zeros(3, 4),
                t_start: t,
            })
            .collect();
        let tasks = build_tasks(&batch, &specs).unwrap();
        ok &= tasks.len() == 3;
        let mut seen: Vec<usize> = Vec::new();
        for task in &tasks {
            ok &= task.support.len() == 4 && task.query.len() == 4;
            for w in task.support.iter().chain(task.query.iter()) {
                ok &= !seen.contains(&w.t_start); // disjoint
                seen.push(w.t_start);
            }
        }
        seen.sort_unstable();
        ok &= seen == starts; // union is the batch
    }
    report("05 (tasks partition each batch into equal disjoint halves)", ok);
}

#[test]
fn criterion_06_transfer_contract() {
    let cfg = TrainConfig { max_epochs: 2, ..desk_cfg() };
    let source = desk_source();
    let target = desk_target();
    let pre = pretrain(&source, &cfg, 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let moved = params_for_city(&pre.params, 12, &mut rng);

    let mut ok = moved.dims.n_nodes == 12 && pre.params.dims.n_nodes == 20;
    for name in ModelParams::shared_names() {
        ok &= moved.tensor(name).unwrap().data() == pre.params.tensor(name).unwrap().data();
    }
    for name in ModelParams::private_names() {
        let t = moved.tensor(name).unwrap();
        ok &= t.rows() == 12;
        // fresh draws, not copies of the source city's first 12 rows
        let src = pre.params.tensor(name).unwrap();
        let copied = (0..12).all(|r| (0..t.cols()).all(|c| t.at(r, c) == src.at(r, c)));
        ok &= !copied;
    }

    let (head, tail) = few_shot_split(&target, cfg.few_shot_days).unwrap();
    let ft = finetune(moved, &head, &cfg, 33).unwrap();
    let rep = ssmt::eval::evaluate(&ft.params, &tail, &ft.normalizer, &cfg, 34).unwrap();
    ok &= rep.overall_mae.is_finite() && rep.sample_count > 0;
    report("06 (shared tensors move bit-exactly across node counts)", ok);
}

#[test]
fn criterion_07_transfer_beats_scratch() {
    let g = grid();
    let transferred = &g.cells[3]; // memory on, learned encoding on
    let m_t = mean(transferred);
    let m_s = mean(&g.scratch);
    let paired_improvement = mean(
        &transferred
            .iter()
            .zip(&g.scratch)
            .map(|(t, s)| (s - t) / s)
            .collect::<Vec<_>>(),
    );
    println!(
        "  transferred {m_t:.4} vs scratch {m_s:.4}, paired improvement {:.1}% ({:.0}s)",
        100.0 * paired_improvement,
        g.build_secs
    );
    report(
        "07 (meta-transfer beats identical train-from-scratch by >= 5%)",
        m_t < m_s && paired_improvement >= 0.05 && g.build_secs < 480.0,
    );
}

#[test]
fn criterion_08_ablation_ordering() {
    let g = grid();
    let m00 = mean(&g.cells[0]);
    let m01 = mean(&g.cells[1]); // encoding only
    let m10 = mean(&g.cells[2]); // memory only
    let m11 = mean(&g.cells[3]);
    println!("  off/off {m00:.4}  mpe {m01:.4}  mem {m10:.4}  both {m11:.4}");
    let ok = m11 < m00 && m11 < m01 && m11 < m10 && m10 < m00 && m01 < m00;
    report("08 (full cell best; each single feature beats neither)", ok);
}

#[test]
fn criterion_09_sweep_shapes() {
    // Longer fine-tuning than the grid runs: large banks need a few extra
    // epochs for the fresh target embeddings to settle on good prototypes,
    // after which bank size saturates while b = 2 stays capacity-limited.
    let cfg = TrainConfig { finetune_epochs: 15, ..desk_cfg() };
    let source = desk_source();
    let target = desk_target();
    let mem = ssmt::eval::sweep_memory(&source, &target, &cfg, &[2, 8, 32, 64], &SEEDS).unwrap();
    let tasks = ssmt::eval::sweep_tasks(&source, &target, &cfg, &[1, 3], &SEEDS).unwrap();
    let m = |v: usize| mem.iter().find(|r| r.value == v).unwrap().mae_mean;
    let k = |v: usize| tasks.iter().find(|r| r.value == v).unwrap().mae_mean;
    println!(
        "  memory: b2 {:.4} b8 {:.4} b32 {:.4} b64 {:.4}; tasks: k1 {:.4} k3 {:.4}",
        m(2), m(8), m(32), m(64), k(1), k(3)
    );
    let ok = m(2) >= m(32)
        && (m(32) - m(64)).abs() < (m(2) - m(32)).abs()
        && k(3) <= k(1);
    report("09 (capacity saturates; more periodicity tasks help)", ok);
}

#[test]
fn criterion_10_loss_regimes() {
    // (a) fine-tuning objective decomposes exactly with the configured weights
    let cfg = TrainConfig {
        max_epochs: 2,
        finetune_epochs: 3,
        loss: Default::default(),
        ..desk_cfg()
    };
    let target = desk_target();
    let (head, _) = few_shot_split(&target, cfg.few_shot_days).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let params = ssmt::model::init_params(
        ssmt::model::Dims {
            n_nodes: 12,
            t_in: cfg.t_in,
            t_out: cfg.t_out,
            hidden: cfg.hidden,
            mem_items: cfg.mem_items,
            embed_dim: cfg.embed_dim,
        },
        &mut rng,
    );
    let ft = finetune(params.clone(), &head, &cfg, 42).unwrap();
    let mut ok = !ft.epochs.is_empty();
    for e in &ft.epochs {
        let w = &cfg.loss;
        ok &= (e.total - (w.c1 * e.mae + w.c2 * e.sep + w.c3 * e.comp)).abs() < 1e-12;
        ok &= e.sep > 0.0 && e.comp > 0.0;
    }

    // (b) pretraining objective is MAE alone: scaling the memory-term weights
    // changes nothing about the run
    let source = desk_source();
    let mut heavy = cfg.clone();
    heavy.loss.c2 = 7.0;
    heavy.loss.c3 = 9.0;
    let a = pretrain(&source, &cfg, 43).unwrap();
    let b = pretrain(&source, &heavy, 43).unwrap();
    for (ea, eb) in a.epochs.iter().zip(&b.epochs) {
        ok &= ea.mean_query_mae == eb.mean_query_mae;
    }
    for (name, _) in PARAM_NAMES {
        ok &= a.params.tensor(name).unwrap().data() == b.params.tensor(name).unwrap().data();
    }
    report("10 (pretrain objective is pure MAE; fine-tune splits exactly)", ok);
}

#[test]
fn criterion_11_determinism_and_serialization() {
    let cfg = TrainConfig { max_epochs: 2, ..desk_cfg() };
    let source = desk_source();
    let a = pretrain(&source, &cfg, 51).unwrap();
    let b = pretrain(&source, &cfg, 51).unwrap();
    let mut ok = true;
    for (name, _) in PARAM_NAMES {
        ok &= a.params.tensor(name).unwrap().data() == b.params.tensor(name).unwrap().data();
    }
    for (ea, eb) in a.epochs.iter().zip(&b.epochs) {
        ok &= ea.mean_query_mae == eb.mean_query_mae;
    }

    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&p1, &a.params, &cfg, &a.normalizer).unwrap();
    save_checkpoint(&p2, &b.params, &cfg, &b.normalizer).unwrap();
    ok &= std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();

    let loaded = load_checkpoint(&p1).unwrap();
    for (name, _) in PARAM_NAMES {
        ok &= loaded.params.tensor(name).unwrap().data() == a.params.tensor(name).unwrap().data();
    }
    ok &= loaded.normalizer == a.normalizer;
    report("11 (same seed, same bytes; checkpoints round-trip bit-exactly)", ok);
}
