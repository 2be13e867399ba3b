//! Memory encoder, the prompt + FIFO memory bank, and memory attention.
//!
//! Memory attention always runs over an [`AssembledBank`]: the dense path
//! concatenates every bank token, the sparse path (see `smr`) gathers a
//! subset. Both go through [`memory_attention_assembled`].

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ledger::{CostLedger, CostModule};
use crate::mask::BinaryMask;
use crate::encoder::avg_pool;
use crate::nn::{join, Attention, AttentionCache, AttentionMacs, LayerNorm, Linear, Mlp, MlpCache, VisitTensors};
use crate::numerics::{LayerNormCache, RngState, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryConfig {
    /// Token width of image and memory tokens (equal to the stage-2 channels).
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    /// Queue capacity `m`.
    pub capacity: usize,
    /// Sampling interval `Δt` of the strided queue.
    pub interval: usize,
    /// Pooling factor from the stage-0 map to the memory token grid.
    pub pool: usize,
    pub ffn_ratio: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 2,
            layers: 2,
            capacity: 6,
            interval: 1,
            pool: 8,
            ffn_ratio: 4,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("memory attention needs at least one layer".into()));
        }
        if self.capacity == 0 || self.interval == 0 || self.pool == 0 {
            return Err(Error::Config("memory.m, memory.dt and the pool factor must be >= 1".into()));
        }
        if self.d % 2 != 0 || self.heads == 0 || (self.d / 2) % self.heads != 0 || self.d % self.heads != 0 {
            return Err(Error::Config(alloc::format!(
                "memory width {} must be even and d/2 divisible by {} heads",
                self.d,
                self.heads
            )));
        }
        Ok(())
    }

    /// Memory tokens per frame for a stage-0 map of `extents`.
    pub fn tokens_per_frame(&self, extents: (usize, usize)) -> usize {
        (extents.0 / self.pool) * (extents.1 / self.pool)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryFrame {
    pub t: usize,
    /// `K × d`.
    pub tokens: Tensor,
    pub is_prompt: bool,
}

impl MemoryFrame {
    pub fn k(&self) -> usize {
        self.tokens.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEncoderWeights {
    /// Added to stage-0 features where the mask is set.
    pub mask_embed: Tensor,
    pub mask_bias: Tensor,
    pub proj: Linear,
}

impl MemoryEncoderWeights {
    pub fn init(c0: usize, d: usize, rng: &mut RngState) -> Self {
        let mut mask_embed: Tensor = rng.normal_tensor(&[c0], 0.02);
        mask_embed.data_mut()[0] = 1.0;
        let mut proj = Linear::random(d, c0, 0.3 / libm::sqrt(c0 as f64), true, rng);
        proj.weight.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
        proj.weight.row_mut(0)[0] = 1.0;
        Self {
            mask_embed,
            mask_bias: Tensor::zeros(&[c0]),
            proj,
        }
    }
}

impl VisitTensors for MemoryEncoderWeights {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "mask_embed"), &mut self.mask_embed);
        f(&join(prefix, "mask_bias"), &mut self.mask_bias);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Fuses the chosen mask into stage-0 features, pools to the memory grid and
/// projects to `d`-wide tokens.
pub fn encode_memory(
    f_s0: &Tensor,
    mask: &BinaryMask,
    t: usize,
    is_prompt: bool,
    cfg: &MemoryConfig,
    weights: &MemoryEncoderWeights,
    ledger: &mut CostLedger,
) -> Result<MemoryFrame> {
    let (h, w, c) = (f_s0.dim(0), f_s0.dim(1), f_s0.dim(2));
    let mask = if mask.extents() == (h, w) {
        mask.clone()
    } else {
        mask.resize_nearest(h, w)
    };
    if h % cfg.pool != 0 || w % cfg.pool != 0 {
        return Err(Error::dim(
            "encode_memory",
            alloc::format!("stage-0 map {h}x{w} not divisible by pool {}", cfg.pool),
        ));
    }
    let mut fused = f_s0.clone();
    let (emb, bias) = (weights.mask_embed.data(), weights.mask_bias.data());
    for (i, &on) in mask.bits().iter().enumerate() {
        let row = fused.row_mut(i);
        for j in 0..c {
            if on {
                row[j] += emb[j];
            }
            row[j] += bias[j];
        }
    }
    let pooled = avg_pool(&fused, cfg.pool);
    let tokens = weights
        .proj
        .forward(&pooled.as_matrix(), ledger.counter(CostModule::MemoryEncoder))?;
    Ok(MemoryFrame { t, tokens, is_prompt })
}

/// Prompt memory plus a FIFO queue with sampling interval `Δt`.
///
/// After a push of frame `t` the queue holds `M_t` and the `m − 1` most recent
/// pushed frames that are multiples of `Δt` and older than `t`, oldest first.
/// With `Δt = 1` that is the plain window `{M_{t−m+1}, …, M_t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    prompt: Option<MemoryFrame>,
    queue: VecDeque<MemoryFrame>,
    capacity: usize,
    interval: usize,
    last_t: Option<usize>,
}

impl MemoryBank {
    pub fn new(capacity: usize, interval: usize) -> Result<Self> {
        if capacity == 0 || interval == 0 {
            return Err(Error::Config("memory.m and memory.dt must be >= 1".into()));
        }
        Ok(Self {
            prompt: None,
            queue: VecDeque::new(),
            capacity,
            interval,
            last_t: None,
        })
    }

    pub fn set_prompt(&mut self, frame: MemoryFrame) -> Result<()> {
        if self.prompt.is_some() {
            return Err(Error::Protocol("prompt memory is already set".into()));
        }
        self.prompt = Some(MemoryFrame { is_prompt: true, ..frame });
        Ok(())
    }

    pub fn prompt(&self) -> Option<&MemoryFrame> {
        self.prompt.as_ref()
    }

    pub fn queue(&self) -> impl ExactSizeIterator<Item = &MemoryFrame> + DoubleEndedIterator {
        self.queue.iter()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Prompt plus queue size.
    pub fn len(&self) -> usize {
        usize::from(self.prompt.is_some()) + self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latest(&self) -> Option<&MemoryFrame> {
        self.queue.back()
    }

    /// Frame indices of queue entries older than the latest, oldest first.
    pub fn non_latest_frames(&self) -> Vec<usize> {
        let n = self.queue.len().saturating_sub(1);
        self.queue.iter().take(n).map(|f| f.t).collect()
    }

    pub fn queue_frames(&self) -> Vec<usize> {
        self.queue.iter().map(|f| f.t).collect()
    }

    /// Prompt first, then the queue oldest to newest.
    pub fn frames(&self) -> impl Iterator<Item = &MemoryFrame> {
        self.prompt.iter().chain(self.queue.iter())
    }

    pub fn frame(&self, t: usize) -> Option<&MemoryFrame> {
        self.frames().find(|f| f.t == t && !f.is_prompt)
    }

    /// Enqueues `frame` (which must be `M_t`); returns the indices of evicted frames.
    pub fn push(&mut self, frame: MemoryFrame, t: usize) -> Result<Vec<usize>> {
        if frame.t != t {
            return Err(Error::Ordering { last: frame.t, got: t });
        }
        if let Some(last) = self.last_t {
            if t <= last {
                return Err(Error::Ordering { last, got: t });
            }
        }
        self.last_t = Some(t);
        let mut evicted = Vec::new();
        // the previous latest stays only if it is on the sampling grid
        if let Some(prev) = self.queue.back() {
            if prev.t % self.interval != 0 {
                evicted.push(self.queue.pop_back().unwrap().t);
            }
        }
        self.queue.push_back(MemoryFrame { is_prompt: false, ..frame });
        while self.queue.len() > self.capacity {
            evicted.push(self.queue.pop_front().unwrap().t);
        }
        Ok(evicted)
    }
}

/// One contiguous run of bank tokens inside an assembled key/value set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub frame: usize,
    pub is_prompt: bool,
    /// Token indices within the frame, ascending.
    pub indices: Vec<usize>,
    /// Column offset of the run in the assembled token list.
    pub offset: usize,
    /// Token count of the source frame.
    pub k: usize,
}

impl Segment {
    pub fn is_complete(&self) -> bool {
        self.indices.len() == self.k
    }
}

/// Memory tokens assembled for one attention layer, with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledBank {
    pub tokens: Tensor,
    pub segments: Vec<Segment>,
}

impl AssembledBank {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gathers the listed tokens of each frame, in the given order.
    pub fn gather<'a>(parts: impl IntoIterator<Item = (&'a MemoryFrame, Option<&'a [usize]>)>) -> Self {
        let mut rows: Vec<Tensor> = Vec::new();
        let mut segments = Vec::new();
        let mut offset = 0;
        for (frame, idx) in parts {
            let k = frame.k();
            let indices: Vec<usize> = match idx {
                Some(i) => i.to_vec(),
                None => (0..k).collect(),
            };
            rows.push(if indices.len() == k { frame.tokens.clone() } else { frame.tokens.gather_rows(&indices) });
            segments.push(Segment {
                frame: frame.t,
                is_prompt: frame.is_prompt,
                offset,
                k,
                indices,
            });
            offset += segments.last().unwrap().indices.len();
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        let tokens = Tensor::concat_rows(&refs).expect("memory tokens share width");
        Self { tokens, segments }
    }

    /// Every token of every bank frame: prompt, then queue oldest to newest.
    pub fn dense(bank: &MemoryBank) -> Self {
        Self::gather(bank.frames().map(|f| (f, None)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLayerWeights<T = f32> {
    pub ln_self: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub ln_cross: LayerNorm<T>,
    /// Internal width `d/2`.
    pub cross_attn: Attention<T>,
    pub ln_ffn: LayerNorm<T>,
    pub ffn: Mlp<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryAttentionWeights<T = f32> {
    pub layers: Vec<MemoryLayerWeights<T>>,
}

impl MemoryAttentionWeights {
    pub fn random(cfg: &MemoryConfig, std: f64, rng: &mut RngState) -> Self {
        let d = cfg.d;
        let layers = (0..cfg.layers)
            .map(|_| MemoryLayerWeights {
                ln_self: LayerNorm::new(d),
                self_attn: Attention::random(d, d, d, cfg.heads, std, rng),
                ln_cross: LayerNorm::new(d),
                cross_attn: Attention::random(d, d, d / 2, cfg.heads, std, rng),
                ln_ffn: LayerNorm::new(d),
                ffn: Mlp::random(d, cfg.ffn_ratio * d, std, rng),
            })
            .collect();
        Self { layers }
    }
}

impl<T: Scalar> MemoryAttentionWeights<T> {
    pub fn cast<U: Scalar>(&self) -> MemoryAttentionWeights<U> {
        MemoryAttentionWeights {
            layers: self
                .layers
                .iter()
                .map(|l| MemoryLayerWeights {
                    ln_self: l.ln_self.cast(),
                    self_attn: l.self_attn.cast(),
                    ln_cross: l.ln_cross.cast(),
                    cross_attn: l.cross_attn.cast(),
                    ln_ffn: l.ln_ffn.cast(),
                    ffn: l.ffn.cast(),
                })
                .collect(),
        }
    }
}

impl VisitTensors for MemoryAttentionWeights {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &alloc::format!("layer{i}"));
            l.ln_self.visit_mut(&join(&p, "ln_self"), f);
            l.self_attn.visit_mut(&join(&p, "self_attn"), f);
            l.ln_cross.visit_mut(&join(&p, "ln_cross"), f);
            l.cross_attn.visit_mut(&join(&p, "cross_attn"), f);
            l.ln_ffn.visit_mut(&join(&p, "ln_ffn"), f);
            l.ffn.visit_mut(&join(&p, "ffn"), f);
        }
    }
}

/// Cross-attention probabilities of one layer, head-averaged, with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    /// `N × T` over the assembled memory tokens.
    pub probs: Tensor,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttnRecord {
    pub layers: Vec<LayerRecord>,
}

impl AttnRecord {
    fn segment(&self, layer: usize, frame: usize) -> Option<(&LayerRecord, &Segment)> {
        let rec = self.layers.get(layer)?;
        let seg = rec.segments.iter().find(|s| s.frame == frame && !s.is_prompt)?;
        Some((rec, seg))
    }

    /// The `N × |S|` attention block of a queue frame.
    pub fn frame_block(&self, layer: usize, frame: usize) -> Result<Tensor> {
        let (rec, seg) = self.segment(layer, frame).ok_or_else(|| {
            Error::Lookup(alloc::format!("frame {frame} absent from layer {layer} record"))
        })?;
        let n = rec.probs.rows();
        let w = seg.indices.len();
        let mut out = Tensor::zeros(&[n, w]);
        for r in 0..n {
            out.row_mut(r)
                .copy_from_slice(&rec.probs.row(r)[seg.offset..seg.offset + w]);
        }
        Ok(out)
    }

    /// Mean attention on each of a complete frame's `K` tokens over all queries.
    pub fn frame_average(&self, layer: usize, frame: usize) -> Result<Vec<f32>> {
        let (_, seg) = self.segment(layer, frame).ok_or_else(|| {
            Error::Lookup(alloc::format!("frame {frame} absent from layer {layer} record"))
        })?;
        if !seg.is_complete() {
            return Err(Error::Lookup(alloc::format!(
                "frame {frame} is sparse in layer {layer}; its average needs all tokens"
            )));
        }
        let block = self.frame_block(layer, frame)?;
        let n = block.rows();
        let mut avg = vec![0.0f64; seg.k];
        for r in 0..n {
            for (a, &v) in avg.iter_mut().zip(block.row(r)) {
                *a += v as f64;
            }
        }
        Ok(avg.into_iter().map(|a| (a / n as f64) as f32).collect())
    }
}

fn head_average<T: Scalar>(probs: &[Tensor<T>]) -> Tensor<T> {
    let mut avg = probs[0].clone();
    for p in &probs[1..] {
        avg.add_assign(p).expect("heads share shape");
    }
    avg.scale(T::one() / T::of(probs.len() as f64));
    avg
}

/// Saved activations of one memory-attention layer.
#[derive(Debug, Clone)]
pub struct MemoryLayerCache<T = f32> {
    ln_self: LayerNormCache<T>,
    self_attn: AttentionCache<T>,
    ln_cross: LayerNormCache<T>,
    cross_attn: AttentionCache<T>,
    ln_ffn: LayerNormCache<T>,
    ffn: MlpCache<T>,
}

/// Memory attention over per-layer assembled banks (`banks.len()` equals the layer count).
pub fn memory_attention_assembled(
    f_t: &Tensor,
    banks: &[AssembledBank],
    weights: &MemoryAttentionWeights,
    ledger: &mut CostLedger,
) -> Result<(Tensor, AttnRecord)> {
    let tokens: Vec<&Tensor> = banks.iter().map(|b| &b.tokens).collect();
    let (out, probs, _) = memory_attention_cached(f_t, &tokens, weights, ledger)?;
    let record = AttnRecord {
        layers: probs
            .into_iter()
            .zip(banks)
            .map(|(probs, b)| LayerRecord { probs, segments: b.segments.clone() })
            .collect(),
    };
    Ok((out, record))
}

/// Generic forward over raw per-layer memory tokens, returning head-averaged
/// cross-attention probabilities and backward caches.
pub fn memory_attention_cached<T: Scalar>(
    f_t: &Tensor<T>,
    banks: &[&Tensor<T>],
    weights: &MemoryAttentionWeights<T>,
    ledger: &mut CostLedger,
) -> Result<(Tensor<T>, Vec<Tensor<T>>, Vec<MemoryLayerCache<T>>)> {
    if banks.len() != weights.layers.len() {
        return Err(Error::dim(
            "memory_attention",
            alloc::format!("{} banks for {} layers", banks.len(), weights.layers.len()),
        ));
    }
    if banks.iter().any(|b| b.rows() == 0) {
        return Err(Error::Protocol("memory attention needs a non-empty bank".into()));
    }
    let mut x = f_t.clone();
    let mut probs = Vec::with_capacity(banks.len());
    let mut caches = Vec::with_capacity(banks.len());
    for (layer, &bank) in weights.layers.iter().zip(banks) {
        let (h, ln_self) = layer.ln_self.forward_cached(&x);
        let mut sm = AttentionMacs::default();
        let (a, self_attn) = layer.self_attn.forward_cached(&h, &h, &mut sm)?;
        ledger.record(CostModule::MemorySelfAttention, sm.projection + sm.core);
        x.add_assign(&a)?;

        let (h, ln_cross) = layer.ln_cross.forward_cached(&x);
        let mut cm = AttentionMacs::default();
        let (a, cross_attn) = layer.cross_attn.forward_cached(&h, bank, &mut cm)?;
        ledger.record(CostModule::MemoryCrossAttention, cm.core);
        ledger.record(CostModule::MemoryProjection, cm.projection);
        x.add_assign(&a)?;
        probs.push(head_average(cross_attn.probs()));

        let (h, ln_ffn) = layer.ln_ffn.forward_cached(&x);
        let (m, ffn) = layer.ffn.forward_cached(&h, ledger.counter(CostModule::MemoryProjection))?;
        x.add_assign(&m)?;
        caches.push(MemoryLayerCache { ln_self, self_attn, ln_cross, cross_attn, ln_ffn, ffn });
    }
    Ok((x, probs, caches))
}

/// Gradient of the memory-attention output with respect to its image-token input.
pub fn memory_attention_backward<T: Scalar>(
    weights: &MemoryAttentionWeights<T>,
    caches: &[MemoryLayerCache<T>],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = dy.clone();
    for (layer, c) in weights.layers.iter().zip(caches).rev() {
        let dh = layer.ffn.backward_input(&c.ffn, &dx)?;
        dx.add_assign(&layer.ln_ffn.backward(&c.ln_ffn, &dh, None))?;
        let (dq, _) = layer.cross_attn.backward(&c.cross_attn, &dx)?;
        dx.add_assign(&layer.ln_cross.backward(&c.ln_cross, &dq, None))?;
        let (dq, dkv) = layer.self_attn.backward(&c.self_attn, &dx)?;
        let mut dh = dq;
        dh.add_assign(&dkv)?;
        dx.add_assign(&layer.ln_self.backward(&c.ln_self, &dh, None))?;
    }
    Ok(dx)
}

/// Dense memory attention: every layer attends to every bank token.
pub fn memory_attention_dense(
    f_t: &Tensor,
    bank: &MemoryBank,
    weights: &MemoryAttentionWeights,
    ledger: &mut CostLedger,
) -> Result<(Tensor, AttnRecord)> {
    let dense = AssembledBank::dense(bank);
    let banks = vec![dense; weights.layers.len()];
    memory_attention_assembled(f_t, &banks, weights, ledger)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(t: usize, k: usize, d: usize, rng: &mut RngState) -> MemoryFrame {
        MemoryFrame { t, tokens: rng.normal_tensor(&[k, d], 1.0), is_prompt: false }
    }

    fn push_all(bank: &mut MemoryBank, frames: impl IntoIterator<Item = usize>) {
        let mut rng = RngState::new(0);
        for t in frames {
            bank.push(frame(t, 2, 2, &mut rng), t).unwrap();
        }
    }

    #[test]
    fn fifo_keeps_last_m() {
        let mut bank = MemoryBank::new(6, 1).unwrap();
        bank.set_prompt(frame(0, 2, 2, &mut RngState::new(1))).unwrap();
        push_all(&mut bank, 0..8);
        assert_eq!(bank.queue_frames(), [2, 3, 4, 5, 6, 7]);
        assert!(bank.prompt().unwrap().is_prompt);
    }

    #[test]
    fn prompt_only_after_init() {
        let mut bank = MemoryBank::new(6, 1).unwrap();
        bank.set_prompt(frame(0, 2, 2, &mut RngState::new(1))).unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.queue_len(), 0);
    }

    #[test]
    fn non_monotone_push_rejected() {
        let mut bank = MemoryBank::new(3, 1).unwrap();
        push_all(&mut bank, [1, 2]);
        let f = frame(2, 2, 2, &mut RngState::new(3));
        assert!(matches!(bank.push(f, 2), Err(Error::Ordering { .. })));
    }

    /// Re-derives the strided queue from scratch: the latest frame plus the
    /// `m − 1` most recent older frames on the sampling grid.
    fn strided_oracle(pushed: &[usize], m: usize, dt: usize) -> Vec<usize> {
        let latest = *pushed.last().unwrap();
        let mut grid: Vec<usize> = pushed.iter().copied().filter(|&f| f < latest && f % dt == 0).collect();
        let keep = grid.len().saturating_sub(m - 1);
        grid.drain(..keep);
        grid.push(latest);
        grid
    }

    #[test]
    fn strided_schedule_example() {
        // query frame 12 sees the bank after pushing frame 11
        let mut bank = MemoryBank::new(2, 5).unwrap();
        push_all(&mut bank, 1..12);
        assert_eq!(bank.queue_frames(), [10, 11]);
    }

    #[test]
    fn strided_schedule_matches_oracle() {
        for m in 1..=6 {
            for dt in 1..=6 {
                let mut bank = MemoryBank::new(m, dt).unwrap();
                let mut rng = RngState::new(5);
                let mut pushed = Vec::new();
                for t in 1..40 {
                    bank.push(frame(t, 1, 2, &mut rng), t).unwrap();
                    pushed.push(t);
                    assert_eq!(bank.queue_frames(), strided_oracle(&pushed, m, dt), "m={m} dt={dt} t={t}");
                }
            }
        }
    }

    fn small_cfg(d: usize, heads: usize, layers: usize) -> MemoryConfig {
        MemoryConfig { d, heads, layers, ..MemoryConfig::default() }
    }

    #[test]
    fn prompt_only_ledger() {
        let (n, k, d) = (16, 10, 8);
        let cfg = small_cfg(d, 1, 2);
        let mut rng = RngState::new(2);
        let w = MemoryAttentionWeights::random(&cfg, 0.3, &mut rng);
        let mut bank = MemoryBank::new(6, 1).unwrap();
        bank.set_prompt(frame(0, k, d, &mut rng)).unwrap();
        let x: Tensor = rng.normal_tensor(&[n, d], 1.0);
        let mut ledger = CostLedger::new();
        let (_, rec) = memory_attention_dense(&x, &bank, &w, &mut ledger).unwrap();
        // QKᵀ and PV at internal width d/2 per layer
        assert_eq!(ledger.get(CostModule::MemoryCrossAttention), (2 * k * n * d) as u64);
        for l in &rec.layers {
            for r in 0..n {
                let s: f32 = l.probs.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_cross_values_leave_cross_path_silent() {
        let cfg = small_cfg(8, 2, 2);
        let mut rng = RngState::new(4);
        let mut w = MemoryAttentionWeights::random(&cfg, 0.3, &mut rng);
        for l in &mut w.layers {
            l.cross_attn.v = Linear::zeros(4, 8, true);
        }
        let mut bank_a = MemoryBank::new(6, 1).unwrap();
        bank_a.set_prompt(frame(0, 5, 8, &mut rng)).unwrap();
        let mut bank_b = MemoryBank::new(6, 1).unwrap();
        bank_b.set_prompt(frame(0, 5, 8, &mut rng)).unwrap();
        let x: Tensor = rng.normal_tensor(&[6, 8], 1.0);
        let (a, _) = memory_attention_dense(&x, &bank_a, &w, &mut CostLedger::new()).unwrap();
        let (b, _) = memory_attention_dense(&x, &bank_b, &w, &mut CostLedger::new()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frame_order_does_not_matter() {
        let cfg = small_cfg(8, 2, 2);
        let mut rng = RngState::new(6);
        let w = MemoryAttentionWeights::random(&cfg, 0.5, &mut rng);
        let frames: Vec<MemoryFrame> = (0..4).map(|t| frame(t, 5, 8, &mut rng)).collect();
        let x: Tensor = rng.normal_tensor(&[6, 8], 1.0);
        let fwd = AssembledBank::gather(frames.iter().map(|f| (f, None)));
        let rev = AssembledBank::gather(frames.iter().rev().map(|f| (f, None)));
        let (a, _) = memory_attention_assembled(&x, &[fwd.clone(), fwd.clone()], &w, &mut CostLedger::new()).unwrap();
        let (b, _) = memory_attention_assembled(&x, &[rev.clone(), rev.clone()], &w, &mut CostLedger::new()).unwrap();
        let diff: f64 = a.data().iter().zip(b.data()).map(|(p, q)| ((p - q) as f64).powi(2)).sum();
        let norm: f64 = a.data().iter().map(|&p| (p as f64).powi(2)).sum();
        assert!((diff / norm).sqrt() <= 1e-6, "relative {}", (diff / norm).sqrt());
        // the same comparison in f64 isolates the arithmetic from f32 rounding
        let w64 = w.cast::<f64>();
        let x64 = x.cast::<f64>();
        let (a, _, _) = memory_attention_cached(&x64, &[&fwd.tokens.cast(), &fwd.tokens.cast()], &w64, &mut CostLedger::new()).unwrap();
        let (b, _, _) = memory_attention_cached(&x64, &[&rev.tokens.cast(), &rev.tokens.cast()], &w64, &mut CostLedger::new()).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }

    #[test]
    fn encode_memory_zero_and_shape() {
        let cfg = MemoryConfig { d: 8, pool: 2, ..MemoryConfig::default() };
        let mut w = MemoryEncoderWeights::init(4, 8, &mut RngState::new(1));
        w.mask_embed = Tensor::zeros(&[4]);
        w.proj.bias = Some(Tensor::zeros(&[8]));
        let f: Tensor = Tensor::zeros(&[4, 4, 4]);
        let m = encode_memory(&f, &BinaryMask::empty(4, 4), 3, false, &cfg, &w, &mut CostLedger::new()).unwrap();
        assert!(m.tokens.data().iter().all(|&v| v == 0.0));
        let mut rng = RngState::new(2);
        let f: Tensor = rng.normal_tensor(&[4, 4, 4], 1.0);
        let mask = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let a = encode_memory(&f, &mask, 3, false, &cfg, &w, &mut CostLedger::new()).unwrap();
        let b = encode_memory(&f, &mask, 3, false, &cfg, &w, &mut CostLedger::new()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.shape(), [4, 8]);
        assert_eq!(cfg.tokens_per_frame((4, 4)), 4);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = small_cfg(4, 1, 2);
        let mut rng = RngState::new(8);
        let w = MemoryAttentionWeights::random(&cfg, 0.5, &mut rng);
        let bank = AssembledBank::gather([(&frame(0, 3, 4, &mut rng), None)]);
        let banks = [bank.clone(), bank];
        let x: Tensor = rng.normal_tensor(&[5, 4], 1.0);
        let g: Tensor = rng.normal_tensor(&[5, 4], 1.0);
        let toks = [&banks[0].tokens, &banks[1].tokens];
        let (_, _, caches) = memory_attention_cached(&x, &toks, &w, &mut CostLedger::new()).unwrap();
        let dx = memory_attention_backward(&w, &caches, &g).unwrap();
        let loss = |x: &Tensor| -> f64 {
            let (y, _) = memory_attention_assembled(x, &banks, &w, &mut CostLedger::new()).unwrap();
            y.data().iter().zip(g.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        let h = 1e-2f32;
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            assert!((fd - dx.data()[j] as f64).abs() < 2e-2 * fd.abs().max(1.0), "entry {j}: {fd} vs {}", dx.data()[j]);
        }
    }
}
