//! Prompt-conditioned mask decoder: three candidate masks, their predicted
//! IoU, an object-presence score and the token-to-image attention map that
//! drives window routing on the next frame.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ledger::{CostLedger, CostModule};
use crate::mask::BinaryMask;
use crate::nn::{join, Attention, AttentionMacs, LayerNorm, Linear, Mlp, VisitTensors};
use crate::numerics::{RngState, Tensor};

/// Output tokens: three mask tokens, the IoU token and the object token.
pub const MASK_TOKENS: usize = 3;
const IOU_TOKEN: usize = 3;
const OBJ_TOKEN: usize = 4;
const OUTPUT_TOKENS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    /// Channels of the stage-0 and stage-1 skip features.
    pub c0: usize,
    pub c1: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 2,
            blocks: 2,
            mlp_ratio: 4,
            c0: 16,
            c1: 32,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("decoder needs at least one two-way block".into()));
        }
        if self.heads == 0 || self.d % 2 != 0 || (self.d / 2) % self.heads != 0 {
            return Err(Error::Config(alloc::format!(
                "decoder width {} must be even with d/2 divisible by {} heads",
                self.d,
                self.heads
            )));
        }
        Ok(())
    }
}

/// Two-way block: tokens attend to themselves and to the image, then the image
/// attends back to the tokens. Pre-norm with residuals throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoWayBlock {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_t2i_tokens: LayerNorm,
    pub ln_t2i_image: LayerNorm,
    pub t2i: Attention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
    pub ln_i2t_image: LayerNorm,
    pub ln_i2t_tokens: LayerNorm,
    pub i2t: Attention,
}

impl TwoWayBlock {
    fn random(cfg: &DecoderConfig, std: f64, rng: &mut RngState) -> Self {
        let d = cfg.d;
        Self {
            ln_self: LayerNorm::new(d),
            self_attn: Attention::random(d, d, d, cfg.heads, std, rng),
            ln_t2i_tokens: LayerNorm::new(d),
            ln_t2i_image: LayerNorm::new(d),
            t2i: Attention::random(d, d, d / 2, cfg.heads, std, rng),
            ln_mlp: LayerNorm::new(d),
            mlp: Mlp::random(d, cfg.mlp_ratio * d, std, rng),
            ln_i2t_image: LayerNorm::new(d),
            ln_i2t_tokens: LayerNorm::new(d),
            i2t: Attention::random(d, d, d / 2, cfg.heads, std, rng),
        }
    }
}

impl VisitTensors for TwoWayBlock {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln_self.visit_mut(&join(prefix, "ln_self"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.ln_t2i_tokens.visit_mut(&join(prefix, "ln_t2i_tokens"), f);
        self.ln_t2i_image.visit_mut(&join(prefix, "ln_t2i_image"), f);
        self.t2i.visit_mut(&join(prefix, "t2i"), f);
        self.ln_mlp.visit_mut(&join(prefix, "ln_mlp"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        self.ln_i2t_image.visit_mut(&join(prefix, "ln_i2t_image"), f);
        self.ln_i2t_tokens.visit_mut(&join(prefix, "ln_i2t_tokens"), f);
        self.i2t.visit_mut(&join(prefix, "i2t"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    /// `5 × d`: mask tokens, IoU token, object token.
    pub output_tokens: Tensor,
    /// Dense prompt embeddings added to image tokens.
    pub prompt_fg: Tensor,
    pub prompt_bg: Tensor,
    pub prompt_none: Tensor,
    pub blocks: Vec<TwoWayBlock>,
    /// Coarse `d` to `c1` before the first 2× upsampling.
    pub up1: Linear,
    pub skip1: Linear,
    pub up2: Linear,
    pub skip2: Linear,
    /// One hypernetwork per mask token, `d` to `c0`.
    pub hyper: Vec<Linear>,
    pub mask_offset: Tensor,
    pub iou_head: Linear,
    pub obj_head: Linear,
}

/// Attention-score boost toward the objectness channel in token-to-image attention.
const FOCUS: f32 = 4.0;
const MASK_GAIN: f32 = 4.0;
/// Objectness level each candidate mask cuts at: tight, nominal, loose.
const MASK_CUTS: [f32; MASK_TOKENS] = [0.6, 0.0, -0.6];

impl DecoderWeights {
    pub fn zeros(cfg: &DecoderConfig) -> Self {
        let mut w = Self::init(cfg, &mut RngState::new(0));
        w.visit_mut("", &mut |name, t| {
            if !name.ends_with("gamma") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        });
        w
    }

    /// Random weights plus hand-set heads reading the objectness channel 0.
    ///
    /// Token-to-image attention in head 0 favours image tokens with high
    /// objectness and copies that channel into the tokens, so the object head
    /// reads presence (positive) or absence (negative). The mask hypernetworks
    /// cut the upsampled objectness channel at three levels.
    pub fn init(cfg: &DecoderConfig, rng: &mut RngState) -> Self {
        let (d, c0, c1) = (cfg.d, cfg.c0, cfg.c1);
        let std = 0.02;
        let mut blocks: Vec<TwoWayBlock> = (0..cfg.blocks).map(|_| TwoWayBlock::random(cfg, std, rng)).collect();
        for b in &mut blocks {
            b.t2i.q.bias.as_mut().unwrap().data_mut()[0] = FOCUS;
            b.t2i.k.weight.row_mut(0)[0] = 1.0;
            b.t2i.v.weight.row_mut(0)[0] = 1.0;
            b.t2i.out.weight.row_mut(0)[0] = 1.0;
        }
        let proj = |out: usize, inp: usize, gain: f32, rng: &mut RngState| {
            let mut l = Linear::random(out, inp, 0.1 / libm::sqrt(inp as f64), true, rng);
            l.weight.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
            l.weight.row_mut(0)[0] = gain;
            l
        };
        let up1 = proj(c1, d, 0.25, rng);
        let skip1 = proj(c1, c1, 0.25, rng);
        let up2 = proj(c0, c1, 1.0, rng);
        let skip2 = proj(c0, c0, 0.5, rng);
        let hyper = (0..MASK_TOKENS)
            .map(|_| {
                let mut h = Linear::random(c0, d, std, true, rng);
                for r in 0..c0 {
                    h.weight.row_mut(r)[0] = 0.0;
                }
                h.weight.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
                h.bias.as_mut().unwrap().data_mut()[0] = MASK_GAIN;
                h
            })
            .collect();
        let mask_offset = Tensor::new(&[MASK_TOKENS], MASK_CUTS.iter().map(|c| -MASK_GAIN * c).collect()).unwrap();
        let mut iou_head = Linear::random(MASK_TOKENS, d, std, true, rng);
        iou_head.bias.as_mut().unwrap().data_mut()[1] = 0.5;
        let mut obj_head = Linear::zeros(1, d, true);
        obj_head.weight.row_mut(0)[0] = 0.5;
        Self {
            output_tokens: rng.normal_tensor(&[OUTPUT_TOKENS, d], std),
            prompt_fg: rng.normal_tensor(&[d], std),
            prompt_bg: rng.normal_tensor(&[d], std),
            prompt_none: rng.normal_tensor(&[d], std),
            blocks,
            up1,
            skip1,
            up2,
            skip2,
            hyper,
            mask_offset,
            iou_head,
            obj_head,
        }
    }
}

impl VisitTensors for DecoderWeights {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "output_tokens"), &mut self.output_tokens);
        f(&join(prefix, "prompt_fg"), &mut self.prompt_fg);
        f(&join(prefix, "prompt_bg"), &mut self.prompt_bg);
        f(&join(prefix, "prompt_none"), &mut self.prompt_none);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &alloc::format!("block{i}")), f);
        }
        self.up1.visit_mut(&join(prefix, "up1"), f);
        self.skip1.visit_mut(&join(prefix, "skip1"), f);
        self.up2.visit_mut(&join(prefix, "up2"), f);
        self.skip2.visit_mut(&join(prefix, "skip2"), f);
        for (i, h) in self.hyper.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &alloc::format!("hyper{i}")), f);
        }
        f(&join(prefix, "mask_offset"), &mut self.mask_offset);
        self.iou_head.visit_mut(&join(prefix, "iou_head"), f);
        self.obj_head.visit_mut(&join(prefix, "obj_head"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Prompt<'a> {
    /// Ground-truth mask of the prompt frame, at any resolution.
    Mask(&'a BinaryMask),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction {
    /// Three candidate masks at stage-0 resolution.
    pub masks: Vec<BinaryMask>,
    pub iou: [f32; MASK_TOKENS],
    pub s_obj: f32,
    /// Token-to-image attention at stage-2 resolution, summing to 1.
    pub attention: Tensor,
}

impl MaskPrediction {
    /// Index of the highest predicted IoU; ties go to the lowest index.
    pub fn chosen(&self) -> usize {
        let mut best = 0;
        for j in 1..MASK_TOKENS {
            if self.iou[j] > self.iou[best] {
                best = j;
            }
        }
        best
    }

    pub fn choose_output(&self) -> &BinaryMask {
        &self.masks[self.chosen()]
    }

    /// Presence predicate: `s_obj > 0`.
    pub fn object_present(&self) -> bool {
        self.s_obj > 0.0
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}

/// Nearest 2× upsampling of an `H×W×C` map.
fn upsample2(x: &Tensor) -> Tensor {
    let (h, w, c) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Tensor::zeros(&[2 * h, 2 * w, c]);
    for y in 0..2 * h {
        for xx in 0..2 * w {
            out.row_mut(y * 2 * w + xx).copy_from_slice(x.row((y / 2) * w + xx / 2));
        }
    }
    out
}

fn head_token_average(probs: &[Tensor]) -> Vec<f64> {
    let nk = probs[0].last_dim();
    let mut acc = vec![0.0f64; nk];
    let mut count = 0usize;
    for p in probs {
        for r in 0..p.rows() {
            for (a, &v) in acc.iter_mut().zip(p.row(r)) {
                *a += v as f64;
            }
            count += 1;
        }
    }
    let total: f64 = acc.iter().sum();
    let norm = if total > 0.0 { total } else { count as f64 };
    acc.iter_mut().for_each(|a| *a /= norm);
    acc
}

/// Decodes one frame from memory-conditioned features `f_m: H2×W2×d` (or `N×d`)
/// and the skip levels.
pub fn decode(
    f_m: &Tensor,
    f_s0: &Tensor,
    f_s1: &Tensor,
    prompt: Prompt<'_>,
    weights: &DecoderWeights,
    ledger: &mut CostLedger,
) -> Result<MaskPrediction> {
    let (h1, w1) = (f_s1.dim(0), f_s1.dim(1));
    let (h2, w2) = (h1 / 2, w1 / 2);
    let (h0, w0) = (f_s0.dim(0), f_s0.dim(1));
    if h0 != 2 * h1 || w0 != 2 * w1 || f_m.len() != h2 * w2 * weights.output_tokens.last_dim() {
        return Err(Error::dim(
            "decode",
            alloc::format!(
                "pyramid {:?} / {:?} / {:?} is inconsistent",
                f_s0.shape(),
                f_s1.shape(),
                f_m.shape()
            ),
        ));
    }
    let d = weights.output_tokens.last_dim();
    let macs = ledger.counter(CostModule::Decoder);
    let mut image = f_m.clone().reshape(&[h2 * w2, d])?;
    match prompt {
        Prompt::Mask(m) => {
            let m = if m.height() % h2 == 0 && m.width() % w2 == 0 && m.height() / h2 == m.width() / w2 {
                m.clone()
            } else {
                m.resize_nearest(h2 * 4, w2 * 4)
            };
            let frac = m.area_fractions(m.height() / h2);
            let (fg, bg) = (weights.prompt_fg.data(), weights.prompt_bg.data());
            for (r, &a) in frac.iter().enumerate() {
                for (c, v) in image.row_mut(r).iter_mut().enumerate() {
                    *v += a * fg[c] + (1.0 - a) * bg[c];
                }
            }
        }
        Prompt::None => image.add_row_broadcast(weights.prompt_none.data()),
    }

    let mut tokens = weights.output_tokens.clone();
    let mut last_probs = Vec::new();
    for b in &weights.blocks {
        let mut am = AttentionMacs::default();
        let h = b.ln_self.forward(&tokens);
        let a = b.self_attn.forward(&h, &h, &mut am)?;
        tokens.add_assign(&a.out)?;

        let q = b.ln_t2i_tokens.forward(&tokens);
        let kv = b.ln_t2i_image.forward(&image);
        let a = b.t2i.forward(&q, &kv, &mut am)?;
        tokens.add_assign(&a.out)?;
        last_probs = a.probs;

        let h = b.ln_mlp.forward(&tokens);
        tokens.add_assign(&b.mlp.forward(&h, &mut am.projection)?)?;

        let q = b.ln_i2t_image.forward(&image);
        let kv = b.ln_i2t_tokens.forward(&tokens);
        let a = b.i2t.forward(&q, &kv, &mut am)?;
        image.add_assign(&a.out)?;
        *macs += am.projection + am.core;
    }
    let attention = Tensor::new(
        &[h2, w2],
        head_token_average(&last_probs).into_iter().map(|v| v as f32).collect(),
    )?;

    // upsampling path with skips: stage 2 -> stage 1 -> stage 0
    let coarse = weights.up1.forward(&image, macs)?.reshape(&[h2, w2, weights.up1.out_dim()])?;
    let mut u1 = upsample2(&coarse);
    u1.add_assign(&weights.skip1.forward(&f_s1.as_matrix(), macs)?.reshape(u1.shape())?)?;
    let mid = weights.up2.forward(&u1.as_matrix(), macs)?.reshape(&[h1, w1, weights.up2.out_dim()])?;
    let mut u2 = upsample2(&mid);
    u2.add_assign(&weights.skip2.forward(&f_s0.as_matrix(), macs)?.reshape(u2.shape())?)?;
    let u2 = u2.as_matrix();

    let mut masks = Vec::with_capacity(MASK_TOKENS);
    for (j, hyper) in weights.hyper.iter().enumerate() {
        let tok = Tensor::new(&[1, d], tokens.row(j).to_vec())?;
        let kernel = hyper.forward(&tok, macs)?;
        let logits = crate::numerics::matmul_nt(&u2, &kernel, macs)?;
        let off = weights.mask_offset.data()[j];
        let bits = logits.data().iter().map(|&l| l + off > 0.0).collect();
        masks.push(BinaryMask::from_bits(h0, w0, bits)?);
    }
    let iou_tok = Tensor::new(&[1, d], tokens.row(IOU_TOKEN).to_vec())?;
    let iou_logits = weights.iou_head.forward(&iou_tok, macs)?;
    let mut iou = [0.0f32; MASK_TOKENS];
    for (s, &l) in iou.iter_mut().zip(iou_logits.data()) {
        *s = sigmoid(l);
    }
    let obj_tok = Tensor::new(&[1, d], tokens.row(OBJ_TOKEN).to_vec())?;
    let s_obj = weights.obj_head.forward(&obj_tok, macs)?.data()[0];
    if !s_obj.is_finite() || iou.iter().any(|v| !v.is_finite()) || !attention.is_finite() {
        return Err(Error::NonFinite("decoder scores".into()));
    }
    Ok(MaskPrediction { masks, iou, s_obj, attention })
}
