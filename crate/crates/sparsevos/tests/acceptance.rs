//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use sparsevos::bench::{dense_oracle, run_scene};
use sparsevos::cli::{consistency_trace, execute, Cli};
use sparsevos::config::pipeline_config_text;
use sparsevos::corpus_io::{write_corpus, Scene};
use sparsevos::format::save_weights;
use sparsevos_core::corpus::{generate, SceneSpec, Video};
use sparsevos_core::distill::{collect_samples, gradient_check, train_shortcut, Tail, TrainConfig};
use sparsevos_core::encoder::{encode, EncoderConfig};
use sparsevos_core::memory::{memory_attention_dense, AssembledBank, MemoryAttentionWeights, MemoryBank, MemoryConfig, MemoryFrame};
use sparsevos_core::nn::{count_params, full_block_param_count, Attention, AttentionMacs, Block};
use sparsevos_core::numerics::topk_indices;
use sparsevos_core::pipeline::{init_stream, mask_iou, step, Mode, ModelWeights, PipelineConfig};
use sparsevos_core::smr::{
    assemble_sparse_bank, keep_count, memory_attention_sparse, recognize_pattern, FramePatterns, SaliencyPatternQueue,
};
use sparsevos_core::swr::{param_count, select_by_cumulative, RoutingDecision, ShortcutWeights};
use sparsevos_core::{CostLedger, CostModule, RngState, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        num += (x as f64 - y as f64).powi(2);
        den += (y as f64).powi(2);
    }
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

fn scene(video: Video, name: &str) -> Scene {
    Scene { name: name.into(), frames: video.0, masks: video.1 }
}

fn dense_equivalence_smr(cfg: &PipelineConfig, w: &ModelWeights) -> Outcome {
    let video = generate(&SceneSpec::default()).map_err(fail)?;
    let s = scene(video, "stream");
    let dense = run_scene(&s, &cfg.clone().with_mode(Mode::Dense), w).map_err(fail)?;
    let mut c = cfg.clone().with_mode(Mode::Smr);
    c.smr.sparsity = 0.0;
    let sparse = run_scene(&s, &c, w).map_err(fail)?;
    let mut worst = 0.0f64;
    let mut mask_mismatch = 0;
    for (a, b) in sparse.outputs.iter().zip(&dense.outputs) {
        worst = worst.max(rel_diff(&a.f_m, &b.f_m));
        mask_mismatch += usize::from(a.prediction.masks != b.prediction.masks);
    }
    check(
        worst <= 1e-6 && mask_mismatch == 0,
        format!("{} frames, max relative F_M difference {worst:.2e}, {mask_mismatch} mask mismatches", s.frames.len()),
    )
}

fn dense_equivalence_swr(cfg: &PipelineConfig, w: &ModelWeights) -> Outcome {
    let (frames, _) = generate(&SceneSpec::default()).map_err(fail)?;
    let plan = RoutingDecision::dense(0, cfg.encoder.stage2_windows());
    let mut differing = 0;
    for f in &frames {
        let a = encode(f, &cfg.encoder, &w.encoder, None, &mut CostLedger::new()).map_err(fail)?;
        let b = encode(f, &cfg.encoder, &w.encoder, Some(&plan), &mut CostLedger::new()).map_err(fail)?;
        differing += usize::from(a != b);
    }
    check(differing == 0, format!("{} frames, {differing} not bit-identical", frames.len()))
}

/// Bank and pattern queue at steady state: prompt plus `m` frames of `k` tokens.
fn steady_bank(m: usize, k: usize, d: usize, s: f64, rng: &mut RngState) -> (MemoryBank, SaliencyPatternQueue) {
    let mut bank = MemoryBank::new(m, 1).unwrap();
    let tokens = |rng: &mut RngState| rng.normal_tensor(&[k, d], 1.0);
    bank.set_prompt(MemoryFrame { t: 0, tokens: tokens(rng), is_prompt: true }).unwrap();
    let mut q = SaliencyPatternQueue::new();
    for t in 1..=3 * m {
        let demoted = bank.latest().map(|f| {
            let scores: Vec<f32> = (0..k).map(|_| rng.uniform() as f32).collect();
            FramePatterns { frame: f.t, layers: vec![recognize_pattern(&scores, s, f.t, 0)] }
        });
        bank.push(MemoryFrame { t, tokens: tokens(rng), is_prompt: false }, t).unwrap();
        q.advance(demoted, &bank).unwrap();
    }
    (bank, q)
}

fn complexity_contract() -> Outcome {
    let (n, k, d, m, s) = (16, 100, 4, 6, 0.95);
    let mut rng = RngState::new(3);
    let mcfg = MemoryConfig { d, heads: 1, layers: 1, capacity: m, ..MemoryConfig::default() };
    let w = MemoryAttentionWeights::random(&mcfg, 0.3, &mut rng);
    let (bank, q) = steady_bank(m, k, d, s, &mut rng);
    let x: Tensor = rng.normal_tensor(&[n, d], 1.0);
    let mut dense = CostLedger::new();
    memory_attention_dense(&x, &bank, &w, &mut dense).map_err(fail)?;
    let mut sparse = CostLedger::new();
    memory_attention_sparse(&x, &bank, &q, &w, &mut sparse).map_err(fail)?;
    let (dm, sm) = (dense.get(CostModule::MemoryCrossAttention), sparse.get(CostModule::MemoryCrossAttention));
    check(
        dm == 44_800 && sm == 14_400,
        format!("dense {dm}, sparse {sm} MACs per frame per layer, ratio {:.4}", dm as f64 / sm as f64),
    )
}

fn overall_memory_sparsity() -> Outcome {
    let (k, m, s) = (100, 6, 0.95);
    if (keep_count(s, k) as f64 - (1.0 - s) * k as f64).abs() > 1e-9 {
        return Err(format!("(1-s)K = {} is not integral", (1.0 - s) * k as f64));
    }
    let (bank, q) = steady_bank(m, k, 4, s, &mut RngState::new(4));
    let sparse = assemble_sparse_bank(&bank, &q, 0).map_err(fail)?.len();
    let dense = AssembledBank::dense(&bank).len();
    let excluded = 1.0 - sparse as f64 / dense as f64;
    let target = 5.0 * s / 7.0;
    check(
        ((excluded - target) / target).abs() <= 0.01,
        format!("{sparse} of {dense} tokens kept, excluded {excluded:.6} vs 5s/7 = {target:.6}"),
    )
}

fn parameter_counts() -> Outcome {
    let mut rng = RngState::new(5);
    let mut lines = Vec::new();
    let mut ok = true;
    for d in [8, 16, 32] {
        let sc = count_params(&ShortcutWeights::<f32>::init(d, &mut rng));
        let blk = count_params(&Block::<f32>::random(d, 2, 0.02, &mut rng));
        ok &= sc == d * d + 2 * d && sc == param_count(d);
        ok &= blk == 12 * d * d + 13 * d && blk == full_block_param_count(d);
        lines.push(format!("d={d}: shortcut {sc}, block {blk}"));
    }
    check(ok, lines.join("; "))
}

fn gather_mask_equivalence() -> Outcome {
    let mut rng = RngState::new(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = 8;
        let big_k = 1 + rng.below(64);
        let small_k = 1 + rng.below(big_k);
        let attn: Attention = Attention::random(d, d, d, 2, 0.5, &mut rng);
        let nq = 1 + rng.below(16);
        let xq: Tensor = rng.normal_tensor(&[nq, d], 1.0);
        let xkv: Tensor = rng.normal_tensor(&[big_k, d], 1.0);
        let mut idx: Vec<usize> = (0..big_k).collect();
        for i in (1..big_k).rev() {
            idx.swap(i, rng.below(i + 1));
        }
        idx.truncate(small_k);
        idx.sort_unstable();
        let keep: Vec<bool> = (0..big_k).map(|i| idx.binary_search(&i).is_ok()).collect();
        let g = attn.forward(&xq, &xkv.gather_rows(&idx), &mut AttentionMacs::default()).map_err(fail)?.out;
        let m = attn.forward_key_masked(&xq, &xkv, &keep, &mut AttentionMacs::default()).map_err(fail)?;
        for (a, b) in g.data().iter().zip(m.data()) {
            worst = worst.max(((a - b).abs() / b.abs().max(1.0)) as f64);
        }
    }
    check(worst <= 1e-6, format!("100 cases, max relative difference {worst:.2e}"))
}

/// Rank of `i` under (value desc, index asc).
fn rank(v: &[f64], i: usize) -> usize {
    (0..v.len()).filter(|&j| v[j] > v[i] || (v[j] == v[i] && j < i)).count()
}

fn selection_oracles() -> Outcome {
    let mut rng = RngState::new(7);
    let mut topk_bad = 0;
    for _ in 0..1000 {
        let n = 1 + rng.below(48);
        // coarse values force ties
        let v: Vec<f64> = (0..n).map(|_| rng.below(9) as f64).collect();
        let k = rng.below(n + 1);
        let want: Vec<usize> = (0..n).filter(|&i| rank(&v, i) < k).collect();
        topk_bad += usize::from(topk_indices(&v, k).map_err(fail)? != want);
    }
    let mut tau_bad = 0;
    for _ in 0..1000 {
        let n = 1 + rng.below(16);
        let raw = rng.uniform_vec(n, 0.0, 1.0);
        let total: f64 = raw.iter().sum();
        let alpha: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let tau = rng.uniform();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| rank(&alpha, i));
        // every prefix of the ranking, longest admissible one wins
        let best_len = (0..=n)
            .filter(|&len| order[..len].iter().map(|&i| alpha[i]).fold(0.0, |a, b| a + b) <= tau)
            .max()
            .unwrap_or(0);
        let mut best = order[..best_len].to_vec();
        best.sort_unstable();
        tau_bad += usize::from(select_by_cumulative(&alpha, tau) != best);
    }
    check(
        topk_bad == 0 && tau_bad == 0,
        format!("top-k {topk_bad}/1000 mismatches, cumulative-tau {tau_bad}/1000 mismatches"),
    )
}

fn fifo_invariants(cfg: &PipelineConfig, w: &ModelWeights) -> Outcome {
    let spec = SceneSpec { frames: 100, occluded: Some((40, 45)), ..SceneSpec::default() };
    let (frames, masks) = generate(&spec).map_err(fail)?;
    let cfg = cfg.clone().with_mode(Mode::Both);
    let m = cfg.memory.capacity;
    let (mut state, _) = init_stream(&frames[0], Some(&masks[0]), &cfg, w).map_err(fail)?;
    let mut violations = 0;
    let (mut max_bank, mut max_queue) = (0, 0);
    for f in &frames[1..] {
        step(&mut state, f, &cfg, w).map_err(fail)?;
        max_bank = max_bank.max(state.bank.len());
        max_queue = max_queue.max(state.patterns.len());
        violations += usize::from(state.bank.len() > 1 + m);
        violations += usize::from(state.patterns.len() > m - 1);
        violations += usize::from(state.patterns.check(&state.bank).is_err());
    }
    check(
        violations == 0,
        format!("100 frames, max bank {max_bank}, max pattern queue {max_queue}, {violations} violations"),
    )
}

/// A reduced pipeline whose tail is small enough for a full finite-difference sweep.
fn gradient_check_small() -> Result<f64, String> {
    let mut cfg = PipelineConfig::default();
    cfg.encoder = EncoderConfig { input: (64, 64), channels: [8, 8, 8], ..EncoderConfig::default() };
    cfg.memory.d = 8;
    cfg.memory.pool = 4;
    cfg.decoder.d = 8;
    cfg.decoder.c0 = 8;
    cfg.decoder.c1 = 8;
    cfg.validate().map_err(fail)?;
    let mut w = ModelWeights::init(&cfg, 21).map_err(fail)?;
    let mut rng = RngState::new(22);
    for sc in &mut w.encoder.shortcuts {
        sc.up = rng.normal_tensor(&[8, 4], 0.3);
    }
    let spec = SceneSpec { height: 64, width: 64, frames: 7, radius: 4.0, start: (10.0, 12.0), ..SceneSpec::default() };
    let video = generate(&spec).map_err(fail)?;
    let samples: Vec<_> = collect_samples(&video, &cfg, &w, 1, 3).map_err(fail)?.iter().map(|s| s.cast::<f64>()).collect();
    // a check where every window is object would never touch the shortcut
    if !samples.iter().any(|s| s.object.iter().any(|&o| !o)) {
        return Err("gradient check has no background windows".into());
    }
    let tail = Tail::from_weights(&w, &cfg).cast::<f64>();
    let shortcuts: Vec<ShortcutWeights<f64>> = w.encoder.shortcuts.iter().map(|s| s.cast()).collect();
    let worst = gradient_check(&tail, &shortcuts, &samples, 1e-4)
        .map_err(fail)?
        .into_iter()
        .map(|(_, r)| r)
        .fold(0.0, f64::max);
    Ok(worst)
}

fn shortcut_training(cfg: &PipelineConfig, w: &ModelWeights, trained: &mut Option<Vec<ShortcutWeights>>) -> Outcome {
    let train: Vec<Video> = (0..30).map(|i| generate(&SceneSpec::random(i, 1000, 160))).collect::<Result<_, _>>().map_err(fail)?;
    let held: Vec<Video> = (0..5).map(|i| generate(&SceneSpec::random(i, 1001, 60))).collect::<Result<_, _>>().map_err(fail)?;
    let (shortcuts, rec) = train_shortcut(&train, &held, cfg, w, &TrainConfig::default()).map_err(fail)?;
    let reduction = rec.reduction().unwrap_or(0.0);
    *trained = Some(shortcuts);
    let grad = gradient_check_small()?;
    check(
        reduction >= 0.5 && grad <= 1e-4,
        format!(
            "{} steps, held-out loss {:.4e} -> {:.4e} ({:.2}% reduction), max gradient relative error {grad:.2e}",
            rec.steps.len(),
            rec.initial_held_out,
            rec.final_held_out.unwrap_or(f64::NAN),
            100.0 * reduction
        ),
    )
}

fn accuracy_retention(cfg: &PipelineConfig, w: &ModelWeights) -> Outcome {
    let scenes: Vec<Scene> = (0..10)
        .map(|i| Ok(scene(generate(&SceneSpec::random(i, 77, 30)).map_err(fail)?, &format!("scene_{i}"))))
        .collect::<Result<_, String>>()?;
    let dense = dense_oracle(&scenes, cfg, w).map_err(fail)?;
    let both_cfg = cfg.clone().with_mode(Mode::Both);
    let (mut vs_dense, mut gt_both, mut gt_dense, mut n) = (0.0, 0.0, 0.0, 0.0);
    for (s, d) in scenes.iter().zip(&dense) {
        let run = run_scene(s, &both_cfg, w).map_err(fail)?;
        for ((o, od), gt) in run.outputs.iter().zip(&d.outputs).zip(&s.masks) {
            let (p, pd) = (o.prediction.choose_output(), od.prediction.choose_output());
            vs_dense += mask_iou(p, pd).map_err(fail)?;
            gt_both += mask_iou(p, gt).map_err(fail)?;
            gt_dense += mask_iou(pd, gt).map_err(fail)?;
            n += 1.0;
        }
    }
    let (vs_dense, gt_both, gt_dense) = (vs_dense / n, gt_both / n, gt_dense / n);
    let drop = 100.0 * (gt_dense - gt_both);
    check(
        vs_dense >= 0.90 && drop <= 5.0,
        format!("IoU vs dense {vs_dense:.4}; vs ground truth {gt_both:.4} (dense {gt_dense:.4}, drop {drop:.2} points)"),
    )
}

fn column(csv: &str, name: &str) -> Result<Vec<f64>, String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or("empty csv")?.split(',').collect();
    let i = header.iter().position(|h| *h == name).ok_or(format!("no column {name}"))?;
    lines.map(|l| l.split(',').nth(i).and_then(|v| v.parse().ok()).ok_or(format!("bad row {l}"))).collect()
}

fn monotonicity_sweeps(cfg: &PipelineConfig, w: &ModelWeights) -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let root = dir.path();
    write_corpus(
        &root.join("corpus"),
        &sparsevos::config::CorpusSpec::Random { scenes: 4, frames: 20, seed: 5 },
    )
    .map_err(fail)?;
    std::fs::write(root.join("model.cfg"), pipeline_config_text(cfg)).map_err(fail)?;
    save_weights(w, &root.join("weights.esmw")).map_err(fail)?;
    let p = |x: &str| root.join(x).to_string_lossy().into_owned();
    let cli = Cli::try_parse_from([
        "sparsevos", "bench", "--weights", &p("weights.esmw"), "--config", &p("model.cfg"), "--corpus",
        &p("corpus"), "--out", &p("bench"), "--taus", "0.3,0.5,0.7,0.9", "--sparsities", "0,0.5,0.95",
    ])
    .map_err(fail)?;
    execute(cli).map_err(fail)?;
    let read = |f: &str| std::fs::read_to_string(Path::new(&p("bench")).join(f)).map_err(fail);
    let tau = read("tau_sweep.csv")?;
    let s = read("s_sweep.csv")?;
    let sparsity = column(&tau, "mean_window_sparsity")?;
    let savings = column(&s, "measured_memory_savings")?;
    let tau_ok = sparsity.len() == 4 && sparsity.windows(2).all(|p| p[1] <= p[0]);
    let s_ok = savings.len() == 3 && savings.windows(2).all(|p| p[1] >= p[0]);
    check(
        tau_ok && s_ok,
        format!("window sparsity over tau {sparsity:.4?}; memory savings over s {savings:.4?}"),
    )
}

fn temporal_consistency_static(cfg: &PipelineConfig, w: &ModelWeights) -> Outcome {
    let spec = SceneSpec { velocity: (0.0, 0.0), frames: 20, ..SceneSpec::default() };
    let s = scene(generate(&spec).map_err(fail)?, "static");
    let run = run_scene(&s, &cfg.clone().with_mode(Mode::Dense), w).map_err(fail)?;
    let trace = consistency_trace(&run, cfg.memory.layers);
    if trace.is_empty() {
        return Err("no memory frame was recalled twice".into());
    }
    let min = trace.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let mean = trace.iter().map(|r| r.2).sum::<f64>() / trace.len() as f64;
    check(min >= 0.8, format!("{} (frame, layer) pairs, cosine min {min:.6}, mean {mean:.6}", trace.len()))
}

fn main() -> ExitCode {
    let cfg = PipelineConfig::default();
    let teacher = ModelWeights::init(&cfg, cfg.seed).expect("default weights");
    let mut trained = None;
    let mut failures = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let out = f();
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match out {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {n:>2} {name}: {detail} [{secs:.1} s]");
    };
    report(1, "dense equivalence, memory sparsity 0", &mut || dense_equivalence_smr(&cfg, &teacher));
    report(2, "dense equivalence, all-object routing", &mut || dense_equivalence_swr(&cfg, &teacher));
    report(3, "cross-attention MAC ledger", &mut complexity_contract);
    report(4, "overall memory sparsity 5s/7", &mut overall_memory_sparsity);
    report(5, "parameter counts", &mut parameter_counts);
    report(6, "gather vs additive mask", &mut gather_mask_equivalence);
    report(7, "top-k and cumulative-tau oracles", &mut selection_oracles);
    report(8, "bank and pattern FIFO invariants", &mut || fifo_invariants(&cfg, &teacher));
    report(9, "shortcut distillation", &mut || shortcut_training(&cfg, &teacher, &mut trained));
    let mut student = teacher.clone();
    if let Some(sc) = trained.take() {
        student.encoder.shortcuts = sc;
    }
    report(10, "accuracy retention with both accelerators", &mut || accuracy_retention(&cfg, &student));
    report(11, "tau and s sweep monotonicity", &mut || monotonicity_sweeps(&cfg, &student));
    report(12, "temporal consistency on a static scene", &mut || temporal_consistency_static(&cfg, &student));
    if failures == 0 {
        println!("all 12 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
