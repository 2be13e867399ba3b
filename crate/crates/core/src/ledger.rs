//! Multiply-accumulate accounting per pipeline module.
//!
//! Only matrix products are counted: an `M×P · P×Q` product costs `M·P·Q` MACs.
//! Additions, softmax, normalization and pooling are free.

use core::fmt;
use core::ops::{Add, AddAssign};

/// Pipeline modules tracked by the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CostModule {
    /// Patch embedding, stages 0-1, downsampling and the stage-2 global block.
    EncoderDense,
    /// Full transformer blocks executed for object windows in routed stage-2 layers.
    EncoderStage2Attention,
    /// Shortcut branch executed for background windows.
    EncoderShortcut,
    /// Self-attention sublayer of memory attention (projections included).
    MemorySelfAttention,
    /// Query-key and attention-value products against memory tokens.
    MemoryCrossAttention,
    /// Cross-attention projections and FFN of memory attention.
    MemoryProjection,
    /// Memory encoder.
    MemoryEncoder,
    /// Mask decoder.
    Decoder,
    Other,
}

impl CostModule {
    pub const ALL: [CostModule; 9] = [
        CostModule::EncoderDense,
        CostModule::EncoderStage2Attention,
        CostModule::EncoderShortcut,
        CostModule::MemorySelfAttention,
        CostModule::MemoryCrossAttention,
        CostModule::MemoryProjection,
        CostModule::MemoryEncoder,
        CostModule::Decoder,
        CostModule::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostModule::EncoderDense => "encoder_dense",
            CostModule::EncoderStage2Attention => "encoder_stage2_attention",
            CostModule::EncoderShortcut => "encoder_shortcut",
            CostModule::MemorySelfAttention => "memory_self_attention",
            CostModule::MemoryCrossAttention => "memory_cross_attention",
            CostModule::MemoryProjection => "memory_projection",
            CostModule::MemoryEncoder => "memory_encoder",
            CostModule::Decoder => "decoder",
            CostModule::Other => "other",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for CostModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// MAC counters keyed by [`CostModule`]. Counters only ever grow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostLedger {
    counts: [u64; 9],
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, module: CostModule, macs: u64) {
        self.counts[module.slot()] += macs;
    }

    /// Mutable counter for one module, handed to metered kernels.
    pub fn counter(&mut self, module: CostModule) -> &mut u64 {
        &mut self.counts[module.slot()]
    }

    pub fn get(&self, module: CostModule) -> u64 {
        self.counts[module.slot()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Encoder MACs (dense parts, routed blocks and shortcut).
    pub fn encoder(&self) -> u64 {
        self.get(CostModule::EncoderDense)
            + self.get(CostModule::EncoderStage2Attention)
            + self.get(CostModule::EncoderShortcut)
    }

    /// Memory attention MACs (self, cross and projections).
    pub fn memory_attention(&self) -> u64 {
        self.get(CostModule::MemorySelfAttention)
            + self.get(CostModule::MemoryCrossAttention)
            + self.get(CostModule::MemoryProjection)
    }

    pub fn iter(&self) -> impl Iterator<Item = (CostModule, u64)> + '_ {
        CostModule::ALL.iter().map(move |&m| (m, self.get(m)))
    }

    /// Counter-wise difference `self - earlier`; `earlier` must be a previous snapshot.
    pub fn since(&self, earlier: &CostLedger) -> CostLedger {
        let mut out = CostLedger::default();
        for (i, c) in out.counts.iter_mut().enumerate() {
            *c = self.counts[i] - earlier.counts[i];
        }
        out
    }
}

impl Add for CostLedger {
    type Output = CostLedger;
    fn add(mut self, rhs: CostLedger) -> CostLedger {
        self += rhs;
        self
    }
}

impl AddAssign for CostLedger {
    fn add_assign(&mut self, rhs: CostLedger) {
        for (a, b) in self.counts.iter_mut().zip(rhs.counts.iter()) {
            *a += b;
        }
    }
}
