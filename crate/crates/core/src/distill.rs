//! Shortcut distillation: the shortcut branch is trained so that features
//! after memory attention match the dense teacher when background windows
//! bypass window attention.
//!
//! Samples are teacher-forced. The dense teacher streams every sampled frame
//! and records the stage-2 input, the bank it attended and its output
//! `F_M`. The student re-runs only the tail (stage-2 blocks with ground-truth
//! routing, then memory attention over the teacher bank), so the whole
//! gradient is an analytic backward pass through that tail.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::Video;
use crate::encoder::{window_partition, window_unpartition};
use crate::error::{Error, Result};
use crate::ledger::CostLedger;
use crate::mask::BinaryMask;
use crate::memory::{memory_attention_backward, memory_attention_cached, MemoryAttentionWeights, MemoryLayerCache};
use crate::nn::{Block, BlockCache, VisitTensors};
use crate::numerics::{Scalar, Tensor};
use crate::pipeline::{init_stream, step_traced, ModelWeights, PipelineConfig};
use crate::swr::{windows_from_masks, ShortcutCache, ShortcutWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Memory sampling interval per epoch; the last entry repeats.
    pub memory_strides: Vec<usize>,
    /// Every `sampling_stride`-th raw frame enters the teacher stream.
    pub sampling_stride: usize,
    /// One optimizer update per this many raw frames.
    pub update_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            memory_strides: vec![1, 3, 5],
            sampling_stride: 3,
            update_stride: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(alloc::format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.memory_strides.is_empty() || self.memory_strides.contains(&0) {
            return Err(Error::Config("memory strides must be >= 1".into()));
        }
        if self.sampling_stride == 0 || self.update_stride == 0 {
            return Err(Error::Config("sampling and update strides must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn memory_stride(&self, epoch: usize) -> usize {
        self.memory_strides[epoch.min(self.memory_strides.len() - 1)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub steps: Vec<StepLoss>,
    pub initial_held_out: f64,
    /// `None` when no update ran.
    pub final_held_out: Option<f64>,
}

impl TrainRecord {
    /// Relative held-out loss reduction, `1 − final/initial`.
    pub fn reduction(&self) -> Option<f64> {
        let f = self.final_held_out?;
        (self.initial_held_out > 0.0).then(|| 1.0 - f / self.initial_held_out)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("step,epoch,loss\n");
        for r in &self.steps {
            s += &alloc::format!("{},{},{:.9e}\n", r.step, r.epoch, r.loss);
        }
        s
    }
}

/// Mean squared error over all elements.
pub fn reconstruction_loss<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::dim(
            "reconstruction_loss",
            alloc::format!("{:?} vs {:?}", student.shape(), teacher.shape()),
        ));
    }
    if student.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&a, &b)| {
            let e = (a - b).to_f64();
            e * e
        })
        .sum();
    Ok(sum / student.len() as f64)
}

/// One teacher-forced training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T: Scalar = f32> {
    /// Raw frame index in the source video.
    pub raw: usize,
    /// Stage-2 input `H2×W2×d`.
    pub x2: Tensor<T>,
    /// Teacher bank per memory-attention layer.
    pub banks: Vec<Tensor<T>>,
    /// Per-window flag: covered by the ground-truth object.
    pub object: Vec<bool>,
    /// Teacher `F_M`, `N×d`.
    pub target: Tensor<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample {
            raw: self.raw,
            x2: self.x2.cast(),
            banks: self.banks.iter().map(Tensor::cast).collect(),
            object: self.object.clone(),
            target: self.target.cast(),
        }
    }
}

/// Stage-2 windows touched by a ground-truth mask.
pub fn gt_window_flags(mask: &BinaryMask, cfg: &PipelineConfig) -> Result<Vec<bool>> {
    let layout = cfg.layout();
    let f = mask.height() / layout.extents.0;
    let pooled = mask.or_pool(f)?;
    let object = windows_from_masks(&[pooled], &layout, 0, 0)?;
    let mut flags = vec![false; layout.n_windows()];
    for k in object {
        flags[k] = true;
    }
    Ok(flags)
}

/// Runs the dense teacher over every `sampling_stride`-th frame of `video`
/// with memory interval `dt` and returns one sample per non-prompt frame.
pub fn collect_samples(
    video: &Video,
    cfg: &PipelineConfig,
    teacher: &ModelWeights,
    dt: usize,
    sampling_stride: usize,
) -> Result<Vec<Sample>> {
    let (frames, masks) = video;
    let mut cfg = cfg.clone();
    cfg.swr_enabled = false;
    cfg.smr_enabled = false;
    cfg.memory.interval = dt;
    let raws: Vec<usize> = (0..frames.len()).step_by(sampling_stride).collect();
    let Some((&r0, rest)) = raws.split_first() else {
        return Ok(Vec::new());
    };
    let (mut state, _) = init_stream(&frames[r0], Some(&masks[r0]), &cfg, teacher)?;
    let mut out = Vec::with_capacity(rest.len());
    for &raw in rest {
        let (o, trace) = step_traced(&mut state, &frames[raw], &cfg, teacher)?;
        out.push(Sample {
            raw,
            x2: trace.x2,
            banks: trace.banks,
            object: gt_window_flags(&masks[raw], &cfg)?,
            target: o.f_m,
        });
    }
    Ok(out)
}

/// Frozen teacher pieces the student tail runs through.
#[derive(Debug, Clone)]
pub struct Tail<T: Scalar = f32> {
    /// All stage-2 blocks; the first `shortcuts.len()` are routed window layers.
    pub blocks: Vec<Block<T>>,
    pub window: (usize, usize),
    pub memory: MemoryAttentionWeights<T>,
}

impl Tail {
    pub fn from_weights(w: &ModelWeights, cfg: &PipelineConfig) -> Self {
        Self {
            blocks: w.encoder.stages[2].clone(),
            window: cfg.encoder.window,
            memory: w.memory_attention.clone(),
        }
    }
}

impl<T: Scalar> Tail<T> {
    pub fn cast<U: Scalar>(&self) -> Tail<U> {
        Tail {
            blocks: self.blocks.iter().map(Block::cast).collect(),
            window: self.window,
            memory: self.memory.cast(),
        }
    }
}

enum WindowCache<T: Scalar> {
    Block(BlockCache<T>),
    Shortcut(ShortcutCache<T>),
}

enum LayerCache<T: Scalar> {
    Routed(Vec<WindowCache<T>>),
    Global(BlockCache<T>),
}

pub struct TailCache<T: Scalar> {
    layers: Vec<LayerCache<T>>,
    memory: Vec<MemoryLayerCache<T>>,
    extents: (usize, usize),
    d: usize,
}

fn zero_rows<T: Scalar>(x: &mut Tensor<T>, pads: &[bool]) {
    for (r, &p) in pads.iter().enumerate() {
        if p {
            x.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Student forward: routed stage-2 layers, remaining (global) blocks, memory attention.
pub fn tail_forward<T: Scalar>(
    tail: &Tail<T>,
    shortcuts: &[ShortcutWeights<T>],
    sample: &Sample<T>,
) -> Result<(Tensor<T>, TailCache<T>)> {
    let (hh, ww, d) = (sample.x2.dim(0), sample.x2.dim(1), sample.x2.dim(2));
    let mut macs = 0u64;
    let mut x = sample.x2.clone();
    let mut layers = Vec::with_capacity(tail.blocks.len());
    for (i, block) in tail.blocks.iter().enumerate() {
        if let Some(sc) = shortcuts.get(i) {
            let mut grid = window_partition(&x, tail.window.0, tail.window.1);
            if grid.n_windows() != sample.object.len() {
                return Err(Error::Routing(alloc::format!(
                    "{} window flags for {} windows",
                    sample.object.len(),
                    grid.n_windows()
                )));
            }
            let mut caches = Vec::with_capacity(grid.n_windows());
            for k in 0..grid.n_windows() {
                let tokens = grid.window_tokens(k);
                let pads = grid.pads(k);
                let any_pad = pads.iter().any(|&p| p);
                let (y, c) = if sample.object[k] {
                    let (y, c) = block.forward_cached(&tokens, any_pad.then_some(pads.as_slice()), &mut macs)?;
                    (y, WindowCache::Block(c))
                } else {
                    let (mut y, c) = sc.forward_cached(&tokens, &mut macs)?;
                    zero_rows(&mut y, &pads);
                    (y, WindowCache::Shortcut(c))
                };
                grid.set_window_tokens(k, &y);
                caches.push(c);
            }
            x = window_unpartition(&grid, hh, ww)?;
            layers.push(LayerCache::Routed(caches));
        } else {
            let (y, c) = block.forward_cached(&x.as_matrix(), None, &mut macs)?;
            x = y.reshape(&[hh, ww, d])?;
            layers.push(LayerCache::Global(c));
        }
    }
    let banks: Vec<&Tensor<T>> = sample.banks.iter().collect();
    let (f_m, _, memory) = memory_attention_cached(&x.as_matrix(), &banks, &tail.memory, &mut CostLedger::new())?;
    Ok((f_m, TailCache { layers, memory, extents: (hh, ww), d }))
}

/// Shortcut parameter gradients for an upstream gradient `dy` on `F_M`.
pub fn tail_backward<T: Scalar>(
    tail: &Tail<T>,
    shortcuts: &[ShortcutWeights<T>],
    cache: &TailCache<T>,
    dy: &Tensor<T>,
) -> Result<Vec<ShortcutWeights<T>>> {
    let (hh, ww) = cache.extents;
    let d = cache.d;
    let mut grads = zero_grads(shortcuts);
    let mut dx = memory_attention_backward(&tail.memory, &cache.memory, dy)?.reshape(&[hh, ww, d])?;
    for (i, lc) in cache.layers.iter().enumerate().rev() {
        let block = &tail.blocks[i];
        match lc {
            LayerCache::Global(c) => {
                dx = block.backward_input(c, &dx.as_matrix())?.reshape(&[hh, ww, d])?;
            }
            LayerCache::Routed(caches) => {
                // the input gradient of the first layer feeds nothing trainable
                let need_input = i > 0;
                let mut grid = window_partition(&dx, tail.window.0, tail.window.1);
                for (k, wc) in caches.iter().enumerate() {
                    let mut dyw = grid.window_tokens(k);
                    let pads = grid.pads(k);
                    match wc {
                        WindowCache::Block(c) if need_input => {
                            grid.set_window_tokens(k, &block.backward_input(c, &dyw)?);
                        }
                        WindowCache::Block(_) => {}
                        WindowCache::Shortcut(c) => {
                            zero_rows(&mut dyw, &pads);
                            let (dxw, g) = shortcuts[i].backward(c, &dyw)?;
                            accumulate(&mut grads[i], &g);
                            grid.set_window_tokens(k, &dxw);
                        }
                    }
                }
                if !need_input {
                    break;
                }
                dx = window_unpartition(&grid, hh, ww)?;
            }
        }
    }
    Ok(grads)
}

fn tensors<T: Scalar>(w: &mut ShortcutWeights<T>) -> Vec<&mut Tensor<T>> {
    let ShortcutWeights { ln, down, up } = w;
    vec![&mut ln.gamma, &mut ln.beta, down, up]
}

/// All-zero gradient buffer shaped like `w` (unlike `ShortcutWeights::zeros`, gamma is 0 too).
fn zero_grads<T: Scalar>(w: &[ShortcutWeights<T>]) -> Vec<ShortcutWeights<T>> {
    w.iter()
        .map(|s| {
            let mut g = s.clone();
            tensors(&mut g).into_iter().for_each(|t| t.scale(T::zero()));
            g
        })
        .collect()
}

fn accumulate<T: Scalar>(acc: &mut ShortcutWeights<T>, g: &ShortcutWeights<T>) {
    let mut g = g.clone();
    for (a, b) in tensors(acc).into_iter().zip(tensors(&mut g)) {
        a.add_assign(b).expect("gradient shapes match");
    }
}

/// Loss of one sample and its shortcut gradients.
pub fn sample_loss_and_grad<T: Scalar>(
    tail: &Tail<T>,
    shortcuts: &[ShortcutWeights<T>],
    sample: &Sample<T>,
) -> Result<(f64, Vec<ShortcutWeights<T>>)> {
    let (f_m, cache) = tail_forward(tail, shortcuts, sample)?;
    let loss = reconstruction_loss(&f_m, &sample.target)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(alloc::format!("reconstruction loss at raw frame {}", sample.raw)));
    }
    let scale = T::of(2.0 / f_m.len() as f64);
    let mut dy = f_m;
    for (g, &t) in dy.data_mut().iter_mut().zip(sample.target.data()) {
        *g = (*g - t) * scale;
    }
    Ok((loss, tail_backward(tail, shortcuts, &cache, &dy)?))
}

/// Mean reconstruction loss of `shortcuts` over `samples`.
pub fn mean_loss(tail: &Tail, shortcuts: &[ShortcutWeights], samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("no samples to evaluate".into()));
    }
    let mut sum = 0.0;
    for s in samples {
        let (f_m, _) = tail_forward(tail, shortcuts, s)?;
        sum += reconstruction_loss(&f_m, &s.target)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Adam without weight decay over a list of shortcut branches.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: TrainConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &mut [ShortcutWeights]) -> Self {
        let sizes: Vec<usize> = params.iter_mut().flat_map(|p| tensors(p).into_iter().map(|t| t.len())).collect();
        Self {
            cfg: cfg.clone(),
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [ShortcutWeights], grads: &mut [ShortcutWeights]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - libm::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.t as f64);
        let ps = params.iter_mut().flat_map(tensors);
        let gs = grads.iter_mut().flat_map(tensors);
        for (slot, (p, g)) in ps.zip(gs).enumerate() {
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi as f64;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let step = c.lr * (m[i] / bc1) / (libm::sqrt(v[i] / bc2) + c.eps);
                *w = (*w as f64 - step) as f32;
            }
        }
    }
}

/// Trains the shortcut branches of `teacher` and returns them; `teacher`
/// itself is never modified.
///
/// Each epoch streams every training video through the dense teacher at that
/// epoch's memory stride. Gradients accumulate over the samples of each
/// `update_stride`-frame chunk and are applied with one Adam update.
pub fn train_shortcut(
    train: &[Video],
    held_out: &[Video],
    cfg: &PipelineConfig,
    teacher: &ModelWeights,
    tcfg: &TrainConfig,
) -> Result<(Vec<ShortcutWeights>, TrainRecord)> {
    train_shortcut_with(train, held_out, cfg, teacher, tcfg, &mut |_| {})
}

/// [`train_shortcut`] reporting every optimizer step to `on_step`.
pub fn train_shortcut_with(
    train: &[Video],
    held_out: &[Video],
    cfg: &PipelineConfig,
    teacher: &ModelWeights,
    tcfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLoss),
) -> Result<(Vec<ShortcutWeights>, TrainRecord)> {
    cfg.validate()?;
    tcfg.validate()?;
    let tail = Tail::from_weights(teacher, cfg);
    let mut shortcuts = teacher.encoder.shortcuts.clone();
    if shortcuts.len() != cfg.encoder.routed_layers() {
        return Err(Error::Weights(alloc::format!(
            "{} shortcut(s) for {} routed layers",
            shortcuts.len(),
            cfg.encoder.routed_layers()
        )));
    }
    let mut held = Vec::new();
    for v in held_out {
        held.extend(collect_samples(v, cfg, teacher, 1, tcfg.sampling_stride)?);
    }
    let initial_held_out = mean_loss(&tail, &shortcuts, &held)?;
    log::info!("initial held-out loss {initial_held_out:.6e}");

    let mut adam = Adam::new(tcfg, &mut shortcuts);
    let mut steps = Vec::new();
    for epoch in 0..tcfg.epochs {
        let dt = tcfg.memory_stride(epoch);
        for video in train {
            let samples = collect_samples(video, cfg, teacher, dt, tcfg.sampling_stride)?;
            let mut i = 0;
            while i < samples.len() {
                let chunk = samples[i].raw / tcfg.update_stride;
                let end = samples[i..]
                    .iter()
                    .position(|s| s.raw / tcfg.update_stride != chunk)
                    .map_or(samples.len(), |p| i + p);
                let mut acc = zero_grads(&shortcuts);
                let mut loss = 0.0;
                for s in &samples[i..end] {
                    let (l, g) = sample_loss_and_grad(&tail, &shortcuts, s)?;
                    loss += l;
                    for (a, g) in acc.iter_mut().zip(&g) {
                        accumulate(a, g);
                    }
                }
                let n = (end - i) as f32;
                for a in &mut acc {
                    for t in tensors(a) {
                        t.scale(1.0 / n);
                    }
                }
                adam.update(&mut shortcuts, &mut acc);
                let rec = StepLoss { step: steps.len(), epoch, loss: loss / n as f64 };
                on_step(&rec);
                steps.push(rec);
                i = end;
            }
        }
        log::info!("epoch {epoch} (memory stride {dt}) done after {} steps", steps.len());
    }
    let final_held_out = if steps.is_empty() { None } else { Some(mean_loss(&tail, &shortcuts, &held)?) };
    Ok((shortcuts, TrainRecord { steps, initial_held_out, final_held_out }))
}

/// Relative error `‖g_analytic − g_fd‖ / ‖g_fd‖` per shortcut tensor, using
/// central differences with step `h` on the mean loss over `samples`.
pub fn gradient_check(
    tail: &Tail<f64>,
    shortcuts: &[ShortcutWeights<f64>],
    samples: &[Sample<f64>],
    h: f64,
) -> Result<Vec<(String, f64)>> {
    let n = samples.len() as f64;
    let mut analytic = zero_grads(shortcuts);
    for s in samples {
        let (_, g) = sample_loss_and_grad(tail, shortcuts, s)?;
        for (a, g) in analytic.iter_mut().zip(&g) {
            accumulate(a, g);
        }
    }
    let loss = |sc: &[ShortcutWeights<f64>]| -> Result<f64> {
        let mut sum = 0.0;
        for s in samples {
            sum += reconstruction_loss(&tail_forward(tail, sc, s)?.0, &s.target)?;
        }
        Ok(sum / n)
    };
    let mut out = Vec::new();
    let mut probe = shortcuts.to_vec();
    for li in 0..shortcuts.len() {
        let mut names = Vec::new();
        probe[li].visit_mut(&alloc::format!("shortcut{li}"), &mut |name, _| names.push(String::from(name)));
        for (slot, name) in names.into_iter().enumerate() {
            let len = tensors(&mut probe[li])[slot].len();
            let mut fd = vec![0.0; len];
            for (j, g) in fd.iter_mut().enumerate() {
                let orig = tensors(&mut probe[li])[slot].data()[j];
                tensors(&mut probe[li])[slot].data_mut()[j] = orig + h;
                let up = loss(&probe)?;
                tensors(&mut probe[li])[slot].data_mut()[j] = orig - h;
                let down = loss(&probe)?;
                tensors(&mut probe[li])[slot].data_mut()[j] = orig;
                *g = (up - down) / (2.0 * h);
            }
            let a = tensors(&mut analytic[li])[slot].data().to_vec();
            let (mut num, mut den) = (0.0, 0.0);
            for (x, y) in a.iter().zip(&fd) {
                let ax = x / n;
                num += (ax - y) * (ax - y);
                den += y * y;
            }
            let rel = if den > 0.0 { libm::sqrt(num / den) } else { libm::sqrt(num) };
            out.push((name, rel));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MemoryConfig;
    use crate::numerics::RngState;

    #[test]
    fn loss_examples() {
        let a: Tensor<f64> = RngState::new(1).normal_tensor(&[4, 3], 1.0);
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 1.0);
        assert!((reconstruction_loss(&b, &a).unwrap() - 1.0).abs() < 1e-12);
        let c: Tensor<f64> = Tensor::zeros(&[3, 4]);
        assert!(reconstruction_loss(&a, &c).is_err());
    }

    #[test]
    fn loss_matches_elementwise_loop() {
        let mut rng = RngState::new(2);
        for _ in 0..20 {
            let a: Tensor<f64> = rng.normal_tensor(&[5, 7], 1.0);
            let b: Tensor<f64> = rng.normal_tensor(&[5, 7], 1.0);
            let mut acc = 0.0;
            for i in 0..5 {
                for j in 0..7 {
                    let e = a.row(i)[j] - b.row(i)[j];
                    acc += e * e;
                }
            }
            assert!((reconstruction_loss(&a, &b).unwrap() - acc / 35.0).abs() < 1e-12);
        }
    }

    /// A small random tail: 4×4 map of width 8, 2×2 windows, one routed
    /// layer, one global layer, two memory layers.
    pub(crate) fn toy(seed: u64) -> (Tail<f64>, Vec<ShortcutWeights<f64>>, Vec<Sample<f64>>) {
        let mut rng = RngState::new(seed);
        let d = 8;
        let blocks = vec![Block::random(d, 2, 0.3, &mut rng), Block::random(d, 2, 0.3, &mut rng)];
        let mcfg = MemoryConfig { d, heads: 2, ..MemoryConfig::default() };
        let memory = MemoryAttentionWeights::random(&mcfg, 0.3, &mut rng);
        let tail = Tail { blocks, window: (2, 2), memory }.cast::<f64>();
        let mut sc = ShortcutWeights::<f64>::init(d, &mut rng);
        sc.up = rng.normal_tensor(&[d, d / 2], 0.3);
        sc.ln.gamma = rng.uniform_tensor(&[d], 0.5, 1.5);
        sc.ln.beta = rng.normal_tensor(&[d], 0.1);
        let samples = (0..2)
            .map(|i| Sample {
                raw: i,
                x2: rng.normal_tensor(&[4, 3, d], 1.0),
                banks: vec![rng.normal_tensor(&[6, d], 1.0), rng.normal_tensor(&[6, d], 1.0)],
                object: vec![i == 0, false, true, false],
                target: rng.normal_tensor(&[12, d], 1.0),
            })
            .collect();
        (tail, vec![sc], samples)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (tail, sc, samples) = toy(3);
        for (name, rel) in gradient_check(&tail, &sc, &samples, 1e-3).unwrap() {
            assert!(rel < 1e-4, "{name}: relative error {rel:e}");
        }
    }

    #[test]
    fn all_object_routing_has_zero_gradient() {
        let (tail, sc, mut samples) = toy(4);
        samples.iter_mut().for_each(|s| s.object = vec![true; 4]);
        let (_, g) = sample_loss_and_grad(&tail, &sc, &samples[0]).unwrap();
        let mut g = g[0].clone();
        assert!(tensors(&mut g).iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut p = vec![ShortcutWeights::<f32>::zeros(4).unwrap()];
        let mut g = vec![ShortcutWeights::<f32>::zeros(4).unwrap()];
        g[0].up.data_mut()[0] = 3.0;
        g[0].down.data_mut()[1] = -0.01;
        let mut adam = Adam::new(&cfg, &mut p);
        adam.update(&mut p, &mut g);
        assert!((p[0].up.data()[0] + 1e-4).abs() < 1e-9);
        assert!((p[0].down.data()[1] - 1e-4).abs() < 1e-9);
        assert_eq!(p[0].up.data()[1], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { memory_strides: vec![], ..TrainConfig::default() }.validate().is_err());
        assert_eq!(TrainConfig::default().memory_stride(7), 5);
    }
}
