//! Per-stream state machine: route, encode, attend to memory, decode, then
//! update the saliency-pattern queue and the memory bank.

use alloc::string::String;
use alloc::vec::Vec;

use crate::decoder::{decode, DecoderConfig, DecoderWeights, MaskPrediction, Prompt};
use crate::encoder::{encode_stage2, encode_stem, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::ledger::CostLedger;
use crate::mask::{iou, BinaryMask};
use crate::memory::{
    encode_memory, memory_attention_dense, AssembledBank, AttnRecord, MemoryAttentionWeights, MemoryBank, MemoryConfig,
    MemoryEncoderWeights,
};
use crate::nn::{join, VisitTensors};
use crate::numerics::{RngState, Tensor};
use crate::smr::{memory_attention_sparse, FramePatterns, SaliencyPatternQueue, SmrConfig};
use crate::swr::{route, RouteCue, RouterConfig, RoutingDecision, WindowLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub memory: MemoryConfig,
    pub decoder: DecoderConfig,
    pub router: RouterConfig,
    pub smr: SmrConfig,
    pub swr_enabled: bool,
    pub smr_enabled: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            memory: MemoryConfig::default(),
            decoder: DecoderConfig::default(),
            router: RouterConfig::default(),
            smr: SmrConfig::default(),
            swr_enabled: false,
            smr_enabled: false,
            seed: 0,
        }
    }
}

/// Which accelerators a run enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Dense,
    Swr,
    Smr,
    Both,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Dense, Mode::Swr, Mode::Smr, Mode::Both];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Dense => "dense",
            Mode::Swr => "swr",
            Mode::Smr => "smr",
            Mode::Both => "both",
        }
    }

    pub fn flags(self) -> (bool, bool) {
        match self {
            Mode::Dense => (false, false),
            Mode::Swr => (true, false),
            Mode::Smr => (false, true),
            Mode::Both => (true, true),
        }
    }
}

impl PipelineConfig {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        (self.swr_enabled, self.smr_enabled) = mode.flags();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.memory.validate()?;
        self.decoder.validate()?;
        self.router.validate()?;
        self.smr.validate()?;
        let d = self.encoder.stage2_dim();
        if self.swr_enabled && d % 2 != 0 {
            return Err(Error::Config(alloc::format!("SWR needs an even stage-2 width, got {d}")));
        }
        if self.memory.d != d || self.decoder.d != d {
            return Err(Error::Config(alloc::format!(
                "memory width {} and decoder width {} must equal the stage-2 width {d}",
                self.memory.d,
                self.decoder.d
            )));
        }
        if self.decoder.c0 != self.encoder.channels[0] || self.decoder.c1 != self.encoder.channels[1] {
            return Err(Error::Config("decoder skip widths must match encoder stages 0 and 1".into()));
        }
        let (h0, w0) = self.encoder.extents(0);
        if h0 % self.memory.pool != 0 || w0 % self.memory.pool != 0 {
            return Err(Error::Config(alloc::format!(
                "stage-0 map {h0}x{w0} is not divisible by the memory pool factor {}",
                self.memory.pool
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> WindowLayout {
        WindowLayout::new(self.encoder.extents(2), self.encoder.window)
    }

    /// Memory tokens per frame `K`.
    pub fn tokens_per_frame(&self) -> usize {
        self.memory.tokens_per_frame(self.encoder.extents(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub encoder: EncoderWeights,
    pub memory_encoder: MemoryEncoderWeights,
    pub memory_attention: MemoryAttentionWeights,
    pub decoder: DecoderWeights,
}

impl ModelWeights {
    pub fn init(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = RngState::new(seed);
        Ok(Self {
            encoder: EncoderWeights::init(&cfg.encoder, &mut root.fork(1)),
            memory_encoder: MemoryEncoderWeights::init(cfg.encoder.channels[0], cfg.memory.d, &mut root.fork(2)),
            memory_attention: MemoryAttentionWeights::random(&cfg.memory, 0.02, &mut root.fork(3)),
            decoder: DecoderWeights::init(&cfg.decoder, &mut root.fork(4)),
        })
    }

    /// Every tensor by name, in visiting order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.clone().visit_mut("", &mut |name, t| out.push((name.into(), t.clone())));
        out
    }

    /// Overwrites tensors by name. Every tensor of `self` must be supplied
    /// with its current shape; unknown names are rejected.
    pub fn assign(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let mut err = None;
        let mut used = alloc::vec![false; tensors.len()];
        self.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match tensors.iter().position(|(n, _)| n == name) {
                Some(i) if tensors[i].1.shape() == t.shape() => {
                    *t = tensors[i].1.clone();
                    used[i] = true;
                }
                Some(i) => {
                    err = Some(Error::Weights(alloc::format!(
                        "tensor {name}: shape {:?}, model expects {:?}",
                        tensors[i].1.shape(),
                        t.shape()
                    )))
                }
                None => err = Some(Error::Weights(alloc::format!("tensor {name} missing"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(i) = used.iter().position(|&u| !u) {
            return Err(Error::Weights(alloc::format!("unknown tensor {}", tensors[i].0)));
        }
        Ok(())
    }
}

impl VisitTensors for ModelWeights {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.memory_encoder.visit_mut(&join(prefix, "memory_encoder"), f);
        self.memory_attention.visit_mut(&join(prefix, "memory_attention"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// Pipeline stages reported to a [`Profiler`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Route,
    Encoder,
    MemoryAttention,
    Decoder,
    Patterns,
    MemoryEncoder,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Route,
        Stage::Encoder,
        Stage::MemoryAttention,
        Stage::Decoder,
        Stage::Patterns,
        Stage::MemoryEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Route => "route",
            Stage::Encoder => "encoder",
            Stage::MemoryAttention => "memory_attention",
            Stage::Decoder => "decoder",
            Stage::Patterns => "patterns",
            Stage::MemoryEncoder => "memory_encoder",
        }
    }
}

/// Hook for wall-clock measurement around pipeline stages.
pub trait Profiler {
    fn enter(&mut self, stage: Stage);
    fn exit(&mut self, stage: Stage);
}

/// Profiler that records nothing.
pub struct NoProfiler;

impl Profiler for NoProfiler {
    fn enter(&mut self, _: Stage) {}
    fn exit(&mut self, _: Stage) {}
}

fn timed<R>(p: &mut dyn Profiler, stage: Stage, f: impl FnOnce() -> R) -> R {
    p.enter(stage);
    let r = f();
    p.exit(stage);
    r
}

/// All mutable state of one stream.
#[derive(Debug, Clone)]
pub struct StreamState {
    /// Index of the next frame to process.
    pub t: usize,
    pub bank: MemoryBank,
    pub patterns: SaliencyPatternQueue,
    pub prev: MaskPrediction,
    /// Cumulative cost of the stream so far.
    pub ledger: CostLedger,
}

/// Everything a frame produced, for reporting and diagnostics.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub t: usize,
    pub prediction: MaskPrediction,
    pub plan: RoutingDecision,
    /// Memory-conditioned features `N × d`; the stage-2 embedding on frame 0.
    pub f_m: Tensor,
    /// Cross-attention probabilities per layer (empty on frame 0).
    pub record: AttnRecord,
    /// Memory tokens attended per layer.
    pub memory_tokens: Vec<usize>,
    /// Cost of this frame alone.
    pub ledger: CostLedger,
}

/// Intermediate tensors of a step, kept for shortcut distillation.
#[derive(Debug, Clone)]
pub struct StepTrace {
    /// Stage-2 input map `H2×W2×d`.
    pub x2: Tensor,
    /// Bank tokens attended by each memory-attention layer.
    pub banks: Vec<Tensor>,
}

/// Processes frame 0 densely with its ground-truth mask as the prompt.
pub fn init_stream(
    frame: &Tensor,
    gt: Option<&BinaryMask>,
    cfg: &PipelineConfig,
    weights: &ModelWeights,
) -> Result<(StreamState, FrameOutput)> {
    init_stream_profiled(frame, gt, cfg, weights, &mut NoProfiler)
}

pub fn init_stream_profiled(
    frame: &Tensor,
    gt: Option<&BinaryMask>,
    cfg: &PipelineConfig,
    weights: &ModelWeights,
    prof: &mut dyn Profiler,
) -> Result<(StreamState, FrameOutput)> {
    cfg.validate()?;
    let gt = gt.ok_or_else(|| Error::Protocol("frame 0 needs a ground-truth mask prompt".into()))?;
    let extents = (frame.dim(0), frame.dim(1));
    if gt.extents() != extents {
        return Err(Error::dim(
            "init_stream",
            alloc::format!("mask {:?} vs frame {:?}", gt.extents(), extents),
        ));
    }
    let mut ledger = CostLedger::new();
    let (s0, s1, s2) = timed(prof, Stage::Encoder, || -> Result<_> {
        let (s0, s1, x2) = encode_stem(frame, &cfg.encoder, &weights.encoder, &mut ledger)?;
        let s2 = encode_stage2(x2, &cfg.encoder, &weights.encoder, None, &mut ledger)?;
        Ok((s0, s1, s2))
    })?;
    let prediction = timed(prof, Stage::Decoder, || {
        decode(&s2, &s0, &s1, Prompt::Mask(gt), &weights.decoder, &mut ledger)
    })?;
    let mut bank = MemoryBank::new(cfg.memory.capacity, cfg.memory.interval)?;
    let prompt = timed(prof, Stage::MemoryEncoder, || {
        encode_memory(&s0, gt, 0, true, &cfg.memory, &weights.memory_encoder, &mut ledger)
    })?;
    bank.set_prompt(prompt)?;
    let n = cfg.layout().n_windows();
    let out = FrameOutput {
        t: 0,
        prediction: prediction.clone(),
        plan: RoutingDecision::dense(0, n),
        f_m: s2.as_matrix(),
        record: AttnRecord::default(),
        memory_tokens: Vec::new(),
        ledger: ledger.clone(),
    };
    let state = StreamState {
        t: 1,
        bank,
        patterns: SaliencyPatternQueue::new(),
        prev: prediction,
        ledger,
    };
    Ok((state, out))
}

/// Processes the next frame of the stream.
pub fn step(state: &mut StreamState, frame: &Tensor, cfg: &PipelineConfig, weights: &ModelWeights) -> Result<FrameOutput> {
    step_full(state, frame, cfg, weights, None, &mut NoProfiler, None)
}

/// [`step`] with an externally supplied routing plan (used when SWR is on).
pub fn step_with_plan(
    state: &mut StreamState,
    frame: &Tensor,
    cfg: &PipelineConfig,
    weights: &ModelWeights,
    plan: RoutingDecision,
) -> Result<FrameOutput> {
    step_full(state, frame, cfg, weights, Some(plan), &mut NoProfiler, None)
}

pub fn step_profiled(
    state: &mut StreamState,
    frame: &Tensor,
    cfg: &PipelineConfig,
    weights: &ModelWeights,
    prof: &mut dyn Profiler,
) -> Result<FrameOutput> {
    step_full(state, frame, cfg, weights, None, prof, None)
}

/// [`step`] that also returns the tensors a distillation sample needs.
pub fn step_traced(
    state: &mut StreamState,
    frame: &Tensor,
    cfg: &PipelineConfig,
    weights: &ModelWeights,
) -> Result<(FrameOutput, StepTrace)> {
    let mut trace = StepTrace { x2: Tensor::zeros(&[0]), banks: Vec::new() };
    let out = step_full(state, frame, cfg, weights, None, &mut NoProfiler, Some(&mut trace))?;
    Ok((out, trace))
}

fn step_full(
    state: &mut StreamState,
    frame: &Tensor,
    cfg: &PipelineConfig,
    weights: &ModelWeights,
    forced: Option<RoutingDecision>,
    prof: &mut dyn Profiler,
    trace: Option<&mut StepTrace>,
) -> Result<FrameOutput> {
    let t = state.t;
    if t == 0 {
        return Err(Error::Protocol("stream not initialised".into()));
    }
    let layout = cfg.layout();
    let mut ledger = CostLedger::new();

    let plan = match forced {
        Some(p) => p,
        None if cfg.swr_enabled => timed(prof, Stage::Route, || {
            let prev = &state.prev;
            let cue = RouteCue::Prediction { masks: &prev.masks, attention: &prev.attention, s_obj: prev.s_obj };
            route(t, cue, &layout, &cfg.router)
        })?,
        None => RoutingDecision::dense(t, layout.n_windows()),
    };
    let routed = cfg.swr_enabled || plan.object.len() < plan.n_windows;

    let (s0, s1, x2, s2) = timed(prof, Stage::Encoder, || -> Result<_> {
        let (s0, s1, x2) = encode_stem(frame, &cfg.encoder, &weights.encoder, &mut ledger)?;
        let s2 = encode_stage2(x2.clone(), &cfg.encoder, &weights.encoder, routed.then_some(&plan), &mut ledger)?;
        Ok((s0, s1, x2, s2))
    })?;
    let f_t = s2.as_matrix();

    let (f_m, record) = timed(prof, Stage::MemoryAttention, || {
        if cfg.smr_enabled {
            memory_attention_sparse(&f_t, &state.bank, &state.patterns, &weights.memory_attention, &mut ledger)
        } else {
            memory_attention_dense(&f_t, &state.bank, &weights.memory_attention, &mut ledger)
        }
    })?;
    let memory_tokens: Vec<usize> = record.layers.iter().map(|l| l.probs.last_dim()).collect();
    if let Some(tr) = trace {
        tr.x2 = x2;
        tr.banks = if cfg.smr_enabled {
            (0..weights.memory_attention.layers.len())
                .map(|l| crate::smr::assemble_sparse_bank(&state.bank, &state.patterns, l).map(|b| b.tokens))
                .collect::<Result<_>>()?
        } else {
            alloc::vec![AssembledBank::dense(&state.bank).tokens; weights.memory_attention.layers.len()]
        };
    }

    let prediction = timed(prof, Stage::Decoder, || {
        let (h2, w2) = cfg.encoder.extents(2);
        let fm = f_m.clone().reshape(&[h2, w2, cfg.memory.d])?;
        decode(&fm, &s0, &s1, Prompt::None, &weights.decoder, &mut ledger)
    })?;

    // first recollection of the latest bank frame: recognize its patterns now
    let demoted = timed(prof, Stage::Patterns, || {
        state
            .bank
            .latest()
            .map(|f| FramePatterns::recognize(&record, f.t, cfg.smr.sparsity))
            .transpose()
    })?;

    let mem = timed(prof, Stage::MemoryEncoder, || {
        encode_memory(&s0, prediction.choose_output(), t, false, &cfg.memory, &weights.memory_encoder, &mut ledger)
    })?;
    state.bank.push(mem, t)?;
    state.patterns.advance(demoted, &state.bank)?;

    state.ledger += ledger.clone();
    state.prev = prediction.clone();
    state.t += 1;
    Ok(FrameOutput { t, prediction, plan, f_m, record, memory_tokens, ledger })
}

/// IoU of a predicted mask against a ground-truth mask, evaluated at the
/// ground-truth resolution.
pub fn mask_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let up = if pred.extents() == gt.extents() { pred.clone() } else { pred.resize_nearest(gt.height(), gt.width()) };
    iou(&up, gt)
}

/// Runs a whole stream, returning one output per frame.
pub fn run_stream(
    frames: &[Tensor],
    gt0: &BinaryMask,
    cfg: &PipelineConfig,
    weights: &ModelWeights,
) -> Result<Vec<FrameOutput>> {
    let (first, rest) = frames
        .split_first()
        .ok_or_else(|| Error::Argument("stream has no frames".into()))?;
    let (mut state, out0) = init_stream(first, Some(gt0), cfg, weights)?;
    let mut outs = Vec::with_capacity(frames.len());
    outs.push(out0);
    for f in rest {
        outs.push(step(&mut state, f, cfg, weights)?);
    }
    Ok(outs)
}
