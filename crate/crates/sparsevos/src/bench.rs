//! Benchmark harness: per-frame accuracy and cost rows for each mode, MAC
//! speedups against the dense run, wall-clock per stage, and the τ / s sweeps.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use sparsevos_core::pipeline::{
    init_stream_profiled, mask_iou, step_profiled, FrameOutput, Mode, ModelWeights, PipelineConfig, Profiler, Stage,
};
use sparsevos_core::smr::steady_state_tokens;
use sparsevos_core::{CostLedger, CostModule};

use crate::corpus_io::Scene;
use crate::error::Result;

/// Frames per scene excluded from wall-clock totals.
pub const WARMUP_FRAMES: usize = 2;

/// Accumulates wall-clock time per stage while `active`.
#[derive(Debug, Default)]
pub struct StageTimer {
    pub active: bool,
    started: [Option<Instant>; Stage::ALL.len()],
    pub totals: [Duration; Stage::ALL.len()],
}

fn stage_index(s: Stage) -> usize {
    Stage::ALL.iter().position(|&x| x == s).unwrap()
}

impl Profiler for StageTimer {
    fn enter(&mut self, stage: Stage) {
        if self.active {
            self.started[stage_index(stage)] = Some(Instant::now());
        }
    }

    fn exit(&mut self, stage: Stage) {
        if let Some(t0) = self.started[stage_index(stage)].take() {
            self.totals[stage_index(stage)] += t0.elapsed();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRow {
    pub scene: String,
    pub t: usize,
    pub iou_gt: f64,
    pub iou_dense: f64,
    pub window_sparsity: f64,
    pub salient_windows: usize,
    /// Memory tokens attended by layer 0 (0 on frame 0).
    pub memory_tokens: usize,
    pub s_obj: f32,
    pub ledger: CostLedger,
}

impl FrameRow {
    pub fn csv_header() -> String {
        let mut s = String::from("mode,scene,frame,iou_gt,iou_dense,window_sparsity,salient_windows,memory_tokens,s_obj,macs_total");
        for m in CostModule::ALL {
            let _ = write!(s, ",macs_{}", m.name());
        }
        s
    }

    pub fn csv(&self, mode: Mode) -> String {
        let mut s = format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{},{:.6},{}",
            mode.name(),
            self.scene,
            self.t,
            self.iou_gt,
            self.iou_dense,
            self.window_sparsity,
            self.salient_windows,
            self.memory_tokens,
            self.s_obj,
            self.ledger.total()
        );
        for m in CostModule::ALL {
            let _ = write!(s, ",{}", self.ledger.get(m));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub frames: usize,
    pub mean_iou_gt: f64,
    pub mean_iou_dense: f64,
    pub mean_window_sparsity: f64,
    pub mean_memory_tokens: f64,
    /// Stage-2 window attention (shortcut included on the accelerated side).
    pub speedup_stage2_attention: f64,
    pub speedup_memory_cross_attention: f64,
    pub speedup_encoder: f64,
    pub speedup_memory_attention: f64,
    pub speedup_end_to_end: f64,
    /// Milliseconds per stage, warmup frames excluded.
    pub wall_ms: Vec<(Stage, f64)>,
}

impl Summary {
    pub fn csv_header() -> String {
        let mut s = String::from(
            "mode,frames,mean_iou_gt,mean_iou_dense,mean_window_sparsity,mean_memory_tokens,\
             speedup_stage2_attention,speedup_memory_cross_attention,speedup_encoder,speedup_memory_attention,\
             speedup_end_to_end",
        );
        for st in Stage::ALL {
            let _ = write!(s, ",wall_ms_{}", st.name());
        }
        s
    }

    pub fn csv(&self, mode: Mode) -> String {
        let mut s = format!(
            "{},{},{:.6},{:.6},{:.6},{:.3},{:.6},{:.6},{:.6},{:.6},{:.6}",
            mode.name(),
            self.frames,
            self.mean_iou_gt,
            self.mean_iou_dense,
            self.mean_window_sparsity,
            self.mean_memory_tokens,
            self.speedup_stage2_attention,
            self.speedup_memory_cross_attention,
            self.speedup_encoder,
            self.speedup_memory_attention,
            self.speedup_end_to_end
        );
        for (_, ms) in &self.wall_ms {
            let _ = write!(s, ",{ms:.3}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub mode: Mode,
    pub rows: Vec<FrameRow>,
    pub summary: Summary,
}

/// Outputs of one scene in one mode, plus stage timings.
pub struct SceneRun {
    pub outputs: Vec<FrameOutput>,
    pub timer: StageTimer,
}

pub fn run_scene(scene: &Scene, cfg: &PipelineConfig, weights: &ModelWeights) -> Result<SceneRun> {
    let mut timer = StageTimer::default();
    let mut outputs = Vec::with_capacity(scene.frames.len());
    let (mut state, out0) = init_stream_profiled(&scene.frames[0], Some(&scene.masks[0]), cfg, weights, &mut timer)?;
    outputs.push(out0);
    for (t, f) in scene.frames.iter().enumerate().skip(1) {
        timer.active = t >= WARMUP_FRAMES;
        outputs.push(step_profiled(&mut state, f, cfg, weights, &mut timer)?);
    }
    Ok(SceneRun { outputs, timer })
}

fn ratio(dense: u64, accel: u64) -> f64 {
    if dense == accel {
        1.0
    } else if accel == 0 {
        f64::INFINITY
    } else {
        dense as f64 / accel as f64
    }
}

fn stage2(l: &CostLedger) -> u64 {
    l.get(CostModule::EncoderStage2Attention) + l.get(CostModule::EncoderShortcut)
}

/// Runs every mode over every scene. The dense pipeline always runs first and
/// serves as the oracle for `iou_dense` and the speedup denominators.
pub fn run_benchmark(
    scenes: &[Scene],
    cfg: &PipelineConfig,
    weights: &ModelWeights,
    modes: &[Mode],
) -> Result<Vec<BenchReport>> {
    let dense = dense_oracle(scenes, cfg, weights)?;
    run_modes(scenes, &dense, cfg, weights, modes)
}

pub fn dense_oracle(scenes: &[Scene], cfg: &PipelineConfig, weights: &ModelWeights) -> Result<Vec<SceneRun>> {
    scenes
        .iter()
        .map(|s| run_scene(s, &cfg.clone().with_mode(Mode::Dense), weights))
        .collect()
}

/// [`run_benchmark`] against precomputed dense runs of the same scenes.
pub fn run_modes(
    scenes: &[Scene],
    dense_runs: &[SceneRun],
    cfg: &PipelineConfig,
    weights: &ModelWeights,
    modes: &[Mode],
) -> Result<Vec<BenchReport>> {
    let mut reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        if mode == Mode::Dense {
            reports.push(build_report(mode, scenes, dense_runs, dense_runs)?);
        } else {
            let mcfg = cfg.clone().with_mode(mode);
            let runs = scenes.iter().map(|s| run_scene(s, &mcfg, weights)).collect::<Result<Vec<_>>>()?;
            reports.push(build_report(mode, scenes, dense_runs, &runs)?);
        }
    }
    Ok(reports)
}

/// Rows and summary for runs already computed in `mode`.
pub fn build_report(mode: Mode, scenes: &[Scene], dense_runs: &[SceneRun], runs: &[SceneRun]) -> Result<BenchReport> {
    let mut rows = Vec::new();
    let mut dense_total = CostLedger::new();
    let mut accel_total = CostLedger::new();
    let mut wall = [Duration::ZERO; Stage::ALL.len()];
    for ((scene, dense), run) in scenes.iter().zip(dense_runs).zip(runs) {
        for (w, d) in wall.iter_mut().zip(run.timer.totals) {
            *w += d;
        }
        for ((o, d), gt) in run.outputs.iter().zip(&dense.outputs).zip(&scene.masks) {
            let pred = o.prediction.choose_output();
            rows.push(FrameRow {
                scene: scene.name.clone(),
                t: o.t,
                iou_gt: mask_iou(pred, gt)?,
                iou_dense: mask_iou(pred, d.prediction.choose_output())?,
                window_sparsity: o.plan.window_sparsity(),
                salient_windows: o.plan.salient.len(),
                memory_tokens: o.memory_tokens.first().copied().unwrap_or(0),
                s_obj: o.prediction.s_obj,
                ledger: o.ledger.clone(),
            });
            dense_total += d.ledger.clone();
            accel_total += o.ledger.clone();
        }
    }
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&FrameRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let summary = Summary {
        frames: rows.len(),
        mean_iou_gt: mean(&|r| r.iou_gt),
        mean_iou_dense: mean(&|r| r.iou_dense),
        mean_window_sparsity: mean(&|r| r.window_sparsity),
        mean_memory_tokens: mean(&|r| r.memory_tokens as f64),
        speedup_stage2_attention: ratio(stage2(&dense_total), stage2(&accel_total)),
        speedup_memory_cross_attention: ratio(
            dense_total.get(CostModule::MemoryCrossAttention),
            accel_total.get(CostModule::MemoryCrossAttention),
        ),
        speedup_encoder: ratio(dense_total.encoder(), accel_total.encoder()),
        speedup_memory_attention: ratio(dense_total.memory_attention(), accel_total.memory_attention()),
        speedup_end_to_end: ratio(dense_total.total(), accel_total.total()),
        wall_ms: Stage::ALL.iter().zip(wall).map(|(&s, d)| (s, d.as_secs_f64() * 1e3)).collect(),
    };
    Ok(BenchReport { mode, rows, summary })
}

pub fn report_csv(reports: &[BenchReport]) -> String {
    let mut s = FrameRow::csv_header() + "\n";
    for r in reports {
        for row in &r.rows {
            s += &row.csv(r.mode);
            s.push('\n');
        }
    }
    s
}

pub fn summary_csv(reports: &[BenchReport]) -> String {
    let mut s = Summary::csv_header() + "\n";
    for r in reports {
        s += &r.summary.csv(r.mode);
        s.push('\n');
    }
    s
}

/// MACs of one full block over a window of `p` tokens at width `d`.
pub fn block_window_macs(p: u64, d: u64) -> u64 {
    12 * p * d * d + 2 * p * p * d
}

/// MACs of the shortcut branch over `p` tokens at width `d`.
pub fn shortcut_window_macs(p: u64, d: u64) -> u64 {
    p * d * d
}

/// Closed-form stage-2 attention speedup at mean window sparsity `sigma`.
pub fn predicted_stage2_speedup(sigma: f64, p: u64, d: u64) -> f64 {
    let r = shortcut_window_macs(p, d) as f64 / block_window_macs(p, d) as f64;
    1.0 / ((1.0 - sigma) + sigma * r)
}

/// Fraction of memory tokens excluded at steady state, exact for keep counts.
pub fn steady_state_memory_sparsity(k: usize, m: usize, s: f64) -> f64 {
    1.0 - steady_state_tokens(k, m, s) as f64 / ((m + 1) * k) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauRow {
    pub tau: f64,
    pub mean_window_sparsity: f64,
    pub mean_salient: f64,
    pub mean_iou_dense: f64,
}

/// SWR-only runs at each τ.
pub fn tau_sweep(
    scenes: &[Scene],
    dense: &[SceneRun],
    cfg: &PipelineConfig,
    w: &ModelWeights,
    taus: &[f64],
) -> Result<Vec<TauRow>> {
    let mut out = Vec::new();
    for &tau in taus {
        let mut c = cfg.clone();
        c.router.tau = tau;
        let rep = run_modes(scenes, dense, &c, w, &[Mode::Swr])?.remove(0);
        let salient: usize = rep.rows.iter().map(|r| r.salient_windows).sum();
        out.push(TauRow {
            tau,
            mean_window_sparsity: rep.summary.mean_window_sparsity,
            mean_salient: salient as f64 / rep.rows.len().max(1) as f64,
            mean_iou_dense: rep.summary.mean_iou_dense,
        });
    }
    Ok(out)
}

pub fn tau_csv(rows: &[TauRow]) -> String {
    let mut s = String::from("tau,mean_window_sparsity,mean_salient_windows,mean_iou_dense\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.tau, r.mean_window_sparsity, r.mean_salient, r.mean_iou_dense);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityRow {
    pub s: f64,
    /// `1 − Σ sparse tokens / Σ dense tokens` over all non-prompt frames.
    pub measured_savings: f64,
    pub steady_state_savings: f64,
    /// `(m−1)s/(m+1)`, the large-`K` limit.
    pub analytic_savings: f64,
    pub mean_iou_dense: f64,
}

/// SMR-only runs at each sparsity `s`.
pub fn s_sweep(
    scenes: &[Scene],
    dense: &[SceneRun],
    cfg: &PipelineConfig,
    w: &ModelWeights,
    ss: &[f64],
) -> Result<Vec<SparsityRow>> {
    let m = cfg.memory.capacity;
    let k = cfg.tokens_per_frame();
    let dense_tokens: usize = dense
        .iter()
        .flat_map(|r| &r.outputs)
        .map(|o| o.memory_tokens.first().copied().unwrap_or(0))
        .sum();
    let mut out = Vec::new();
    for &s in ss {
        let mut c = cfg.clone();
        c.smr.sparsity = s;
        let rep = run_modes(scenes, dense, &c, w, &[Mode::Smr])?.remove(0);
        let sparse: usize = rep.rows.iter().map(|r| r.memory_tokens).sum();
        out.push(SparsityRow {
            s,
            measured_savings: 1.0 - sparse as f64 / dense_tokens.max(1) as f64,
            steady_state_savings: steady_state_memory_sparsity(k, m, s),
            analytic_savings: (m as f64 - 1.0) * s / (m as f64 + 1.0),
            mean_iou_dense: rep.summary.mean_iou_dense,
        });
    }
    Ok(out)
}

pub fn s_csv(rows: &[SparsityRow]) -> String {
    let mut s = String::from("s,measured_memory_savings,steady_state_savings,analytic_memory_sparsity,mean_iou_dense\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.s, r.measured_savings, r.steady_state_savings, r.analytic_savings, r.mean_iou_dense
        );
    }
    s
}
