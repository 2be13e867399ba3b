//! Sparse memory retrieval: each memory frame's most-attended tokens are
//! recognized once, while the frame is the latest (dense) bank entry, and
//! only those tokens are attended afterwards.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ledger::CostLedger;
use crate::memory::{memory_attention_assembled, AssembledBank, AttnRecord, MemoryAttentionWeights, MemoryBank};
use crate::numerics::{cosine_similarity, topk_indices, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmrConfig {
    /// Fraction of a non-latest frame's tokens dropped.
    pub sparsity: f64,
}

impl Default for SmrConfig {
    fn default() -> Self {
        Self { sparsity: 0.95 }
    }
}

impl SmrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::Config(alloc::format!("smr.s must lie in [0, 1], got {}", self.sparsity)));
        }
        Ok(())
    }

    /// Retained tokens per sparse frame: `max(1, ⌊(1−s)·K⌋)`.
    pub fn keep(&self, k: usize) -> usize {
        keep_count(self.sparsity, k)
    }
}

static CLAMP_WARNED: core::sync::atomic::AtomicBool = core::sync::atomic::AtomicBool::new(false);

pub fn keep_count(s: f64, k: usize) -> usize {
    let raw = libm::floor((1.0 - s) * k as f64) as usize;
    if raw == 0 && k > 0 && !CLAMP_WARNED.swap(true, core::sync::atomic::Ordering::Relaxed) {
        log::warn!("sparsity {s} keeps no token of {k}; keeping 1 (reported once)");
    }
    raw.clamp(1.min(k), k)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyPattern {
    pub frame: usize,
    pub layer: usize,
    /// Retained token indices, ascending.
    pub indices: Vec<usize>,
}

pub fn recognize_pattern(attn_avg: &[f32], s: f64, frame: usize, layer: usize) -> SaliencyPattern {
    let k = keep_count(s, attn_avg.len());
    let indices = topk_indices(attn_avg, k).expect("k never exceeds K");
    SaliencyPattern { frame, layer, indices }
}

/// Patterns of one frame, one per memory-attention layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePatterns {
    pub frame: usize,
    pub layers: Vec<SaliencyPattern>,
}

impl FramePatterns {
    /// Recognizes the patterns of `frame` from the attention it received.
    pub fn recognize(record: &AttnRecord, frame: usize, s: f64) -> Result<Self> {
        let layers = (0..record.layers.len())
            .map(|l| Ok(recognize_pattern(&record.frame_average(l, frame)?, s, frame, l)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { frame, layers })
    }
}

/// Patterns of the non-latest queue frames, oldest first, kept in lockstep
/// with the memory bank.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SaliencyPatternQueue {
    entries: VecDeque<FramePatterns>,
}

impl SaliencyPatternQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &FramePatterns> {
        self.entries.iter()
    }

    pub fn get(&self, frame: usize, layer: usize) -> Option<&SaliencyPattern> {
        self.entries.iter().find(|e| e.frame == frame)?.layers.get(layer)
    }

    /// Brings the queue in line with `bank` after a push: the pattern of the
    /// frame that just stopped being latest enters, patterns of evicted frames
    /// leave. Stored patterns are never recomputed.
    pub fn advance(&mut self, demoted: Option<FramePatterns>, bank: &MemoryBank) -> Result<()> {
        let wanted = bank.non_latest_frames();
        if let Some(p) = demoted {
            if self.entries.back().is_some_and(|b| b.frame >= p.frame) {
                return Err(Error::Alignment(alloc::format!(
                    "pattern for frame {} arrives after frame {}",
                    p.frame,
                    self.entries.back().unwrap().frame
                )));
            }
            if wanted.contains(&p.frame) {
                self.entries.push_back(p);
            }
        }
        self.entries.retain(|e| wanted.contains(&e.frame));
        self.check(bank)
    }

    /// Pattern frames must equal the bank's non-latest queue frames.
    pub fn check(&self, bank: &MemoryBank) -> Result<()> {
        let have = self.frames();
        let wanted = bank.non_latest_frames();
        if have != wanted {
            return Err(Error::Alignment(alloc::format!(
                "pattern frames {have:?} vs non-latest bank frames {wanted:?}"
            )));
        }
        Ok(())
    }
}

/// Bank tokens for layer `l`: prompt and latest frame complete, every other
/// frame reduced to its pattern. Order matches the dense concatenation.
pub fn assemble_sparse_bank(bank: &MemoryBank, queue: &SaliencyPatternQueue, layer: usize) -> Result<AssembledBank> {
    let latest = bank.latest().map(|f| f.t);
    let mut parts = Vec::with_capacity(bank.len());
    if let Some(p) = bank.prompt() {
        parts.push((p, None));
    }
    for f in bank.queue() {
        if Some(f.t) == latest {
            parts.push((f, None));
        } else {
            let p = queue.get(f.t, layer).ok_or_else(|| {
                Error::Alignment(alloc::format!("no layer-{layer} pattern for bank frame {}", f.t))
            })?;
            parts.push((f, Some(p.indices.as_slice())));
        }
    }
    Ok(AssembledBank::gather(parts))
}

pub fn memory_attention_sparse(
    f_t: &Tensor,
    bank: &MemoryBank,
    queue: &SaliencyPatternQueue,
    weights: &MemoryAttentionWeights,
    ledger: &mut CostLedger,
) -> Result<(Tensor, AttnRecord)> {
    let banks = (0..weights.layers.len())
        .map(|l| assemble_sparse_bank(bank, queue, l))
        .collect::<Result<Vec<_>>>()?;
    memory_attention_assembled(f_t, &banks, weights, ledger)
}

/// Cosine similarity between the attention a memory frame received in two records.
pub fn temporal_consistency(first: &AttnRecord, later: &AttnRecord, frame: usize, layer: usize) -> Result<f64> {
    let a = first.frame_block(layer, frame)?;
    let b = later.frame_block(layer, frame)?;
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "temporal_consistency",
            alloc::format!("blocks {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(cosine_similarity(a.data(), b.data()))
}

/// Retained memory tokens per layer at steady state: `2K + (m−1)·k`.
pub fn steady_state_tokens(k: usize, m: usize, s: f64) -> usize {
    2 * k + m.saturating_sub(1) * keep_count(s, k)
}
