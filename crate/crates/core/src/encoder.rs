//! Hierarchical window-attention image encoder producing a three-level
//! feature pyramid. Stage-2 window layers can be routed per window through
//! the full block or the shortcut branch.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ledger::{CostLedger, CostModule};
use crate::nn::{join, Block, Linear, VisitTensors};
use crate::numerics::{RngState, Scalar, Tensor};
use crate::swr::{RoutingDecision, ShortcutWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Input frame height and width in pixels.
    pub input: (usize, usize),
    pub patch: usize,
    /// Channel width of stages 0, 1 and 2.
    pub channels: [usize; 3],
    /// Block count per stage.
    pub layers: [usize; 3],
    /// Window size of stage 2, the routed stage.
    pub window: (usize, usize),
    /// Window size of stages 0 and 1.
    pub shallow_window: (usize, usize),
    pub heads: usize,
    /// Make the last stage-2 block a global-attention block.
    pub global_final: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input: (64, 64),
            patch: 2,
            channels: [16, 32, 64],
            layers: [1, 1, 2],
            window: (2, 2),
            shallow_window: (4, 4),
            heads: 2,
            global_final: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Config(alloc::format!(
                "input {h}x{w} is not divisible by patch {}",
                self.patch
            )));
        }
        let (h0, w0) = (h / self.patch, w / self.patch);
        if h0 % 4 != 0 || w0 % 4 != 0 {
            return Err(Error::Config(alloc::format!(
                "stage-0 extent {h0}x{w0} must be divisible by 4 for two 2x2 downsamplings"
            )));
        }
        for (win, name) in [(self.window, "window"), (self.shallow_window, "shallow window")] {
            if win.0 == 0 || win.1 == 0 {
                return Err(Error::Config(alloc::format!("{name} extents must be >= 1")));
            }
        }
        if self.heads == 0 || self.channels.iter().any(|c| c % self.heads != 0) {
            return Err(Error::Config(alloc::format!(
                "channels {:?} must be divisible by head count {}",
                self.channels,
                self.heads
            )));
        }
        if self.layers[2] == 0 {
            return Err(Error::Config("stage 2 needs at least one block".into()));
        }
        Ok(())
    }

    /// Spatial extents `(H, W)` of each pyramid level.
    pub fn extents(&self, stage: usize) -> (usize, usize) {
        let s = self.patch << stage;
        (self.input.0 / s, self.input.1 / s)
    }

    pub fn stage2_dim(&self) -> usize {
        self.channels[2]
    }

    /// Number of stage-2 window blocks subject to routing.
    pub fn routed_layers(&self) -> usize {
        self.layers[2] - usize::from(self.global_final)
    }

    pub fn stage2_windows(&self) -> usize {
        let (h, w) = self.extents(2);
        h.div_ceil(self.window.0) * w.div_ceil(self.window.1)
    }
}

/// Multi-scale features of one frame; `s2` is the image embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub s0: Tensor,
    pub s1: Tensor,
    pub s2: Tensor,
}

/// Windows of a padded `H×W×C` map, row-major over the window grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGrid<T = f32> {
    pub window: (usize, usize),
    /// Window counts along height and width.
    pub grid: (usize, usize),
    pub padded: (usize, usize),
    pub extents: (usize, usize),
    /// `N_W × h × w × C`.
    pub blocks: Tensor<T>,
}

impl<T: Scalar> WindowGrid<T> {
    pub fn n_windows(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn channels(&self) -> usize {
        self.blocks.last_dim()
    }

    /// Tokens of window `k` as a `(h·w) × C` matrix.
    pub fn window_tokens(&self, k: usize) -> Tensor<T> {
        let p = self.window.0 * self.window.1;
        let c = self.channels();
        Tensor::new(&[p, c], self.blocks.data()[k * p * c..(k + 1) * p * c].to_vec())
            .expect("window slice")
    }

    pub fn set_window_tokens(&mut self, k: usize, tokens: &Tensor<T>) {
        let p = self.window.0 * self.window.1;
        let c = self.channels();
        self.blocks.data_mut()[k * p * c..(k + 1) * p * c].copy_from_slice(tokens.data());
    }

    /// Padding flags of the tokens in window `k`.
    pub fn pads(&self, k: usize) -> Vec<bool> {
        window_pads(self.extents, self.window, self.grid, k)
    }
}

fn window_pads(
    extents: (usize, usize),
    window: (usize, usize),
    grid: (usize, usize),
    k: usize,
) -> Vec<bool> {
    let (wy, wx) = (k / grid.1, k % grid.1);
    let mut pads = Vec::with_capacity(window.0 * window.1);
    for dy in 0..window.0 {
        for dx in 0..window.1 {
            let y = wy * window.0 + dy;
            let x = wx * window.1 + dx;
            pads.push(y >= extents.0 || x >= extents.1);
        }
    }
    pads
}

/// Zero-pads `x: H×W×C` on the bottom/right to multiples of `(h, w)` and cuts it
/// into non-overlapping windows.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> WindowGrid<T> {
    assert!(h >= 1 && w >= 1, "window extents must be positive");
    let (hh, ww, c) = (x.dim(0), x.dim(1), x.dim(2));
    let (gh, gw) = (hh.div_ceil(h), ww.div_ceil(w));
    let (hp, wp) = (gh * h, gw * w);
    let mut blocks = Tensor::zeros(&[gh * gw, h, w, c]);
    let src = x.data();
    let dst = blocks.data_mut();
    for wy in 0..gh {
        for wx in 0..gw {
            let k = wy * gw + wx;
            for dy in 0..h {
                let y = wy * h + dy;
                if y >= hh {
                    continue;
                }
                for dx in 0..w {
                    let xx = wx * w + dx;
                    if xx >= ww {
                        continue;
                    }
                    let s = (y * ww + xx) * c;
                    let d = ((k * h + dy) * w + dx) * c;
                    dst[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    WindowGrid {
        window: (h, w),
        grid: (gh, gw),
        padded: (hp, wp),
        extents: (hh, ww),
        blocks,
    }
}

/// Inverse of [`window_partition`]; padding is discarded.
pub fn window_unpartition<T: Scalar>(g: &WindowGrid<T>, hh: usize, ww: usize) -> Result<Tensor<T>> {
    let (h, w) = g.window;
    if hh.div_ceil(h) != g.grid.0 || ww.div_ceil(w) != g.grid.1 {
        return Err(Error::dim(
            "window_unpartition",
            alloc::format!(
                "grid {:?} of {:?} windows does not cover {}x{}",
                g.grid,
                g.window,
                hh,
                ww
            ),
        ));
    }
    let c = g.channels();
    let mut out = Tensor::zeros(&[hh, ww, c]);
    let src = g.blocks.data();
    let dst = out.data_mut();
    for y in 0..hh {
        for x in 0..ww {
            let k = (y / h) * g.grid.1 + x / w;
            let s = ((k * h + y % h) * w + x % w) * c;
            let d = (y * ww + x) * c;
            dst[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Ok(out)
}

/// Window index containing stage-2 position `(y, x)`.
pub fn window_of(y: usize, x: usize, window: (usize, usize), grid_w: usize) -> usize {
    (y / window.0) * grid_w + x / window.1
}

/// One window-attention layer over an `H×W×C` map.
///
/// With `route = Some((is_object, shortcut))`, windows whose flag is false run
/// the shortcut instead of the block. Block MACs go to `block_macs`, shortcut
/// MACs to `shortcut_macs`.
pub fn window_layer_forward<T: Scalar>(
    x: &Tensor<T>,
    block: &Block<T>,
    window: (usize, usize),
    route: Option<(&[bool], &ShortcutWeights<T>)>,
    block_macs: &mut u64,
    shortcut_macs: &mut u64,
) -> Result<Tensor<T>> {
    let (hh, ww) = (x.dim(0), x.dim(1));
    let mut grid = window_partition(x, window.0, window.1);
    for k in 0..grid.n_windows() {
        let tokens = grid.window_tokens(k);
        let pads = grid.pads(k);
        let any_pad = pads.iter().any(|&p| p);
        let out = match route {
            Some((flags, shortcut)) if !flags[k] => {
                let mut y = shortcut.forward(&tokens, shortcut_macs)?;
                for (r, &p) in pads.iter().enumerate() {
                    if p {
                        y.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                y
            }
            _ => block.forward(&tokens, any_pad.then_some(pads.as_slice()), block_macs)?,
        };
        grid.set_window_tokens(k, &out);
    }
    window_unpartition(&grid, hh, ww)
}

/// Global-attention layer: one attention group over all tokens.
pub fn global_layer_forward<T: Scalar>(x: &Tensor<T>, block: &Block<T>, macs: &mut u64) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    block.forward(&x.as_matrix(), None, macs)?.reshape(&shape)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub patch_embed: Linear,
    /// Learned per-position embedding added after patchify, `H0×W0×C0`.
    pub pos_embed: Tensor,
    pub stages: [Vec<Block>; 3],
    /// Linear projections after 2×2 average pooling (stage 0→1, 1→2).
    pub downsample: [Linear; 2],
    /// One shortcut per routed stage-2 layer.
    pub shortcuts: Vec<ShortcutWeights>,
}

/// Object colour the desk-scale backbone is wired to respond to (see [`EncoderWeights::init`]).
pub const OBJECT_COLOR: [f32; 3] = [0.9, 0.2, 0.15];

/// Scale of the objectness channel produced by the patch embedding.
const OBJECTNESS_GAIN: f64 = 5.0;
/// Objectness (`r - (g+b)/2`) separating object from background.
const OBJECTNESS_SPLIT: f64 = 0.36;

impl EncoderWeights {
    /// Random weights with a hand-set colour-objectness pathway.
    ///
    /// Channel 0 of the patch embedding measures `r - (g+b)/2` against a fixed
    /// split, and every downsampling projection carries channel 0 through
    /// unchanged, so the residual stream keeps a signed object/background
    /// signal at every pyramid level. Everything else is small Gaussian noise.
    pub fn init(cfg: &EncoderConfig, rng: &mut RngState) -> Self {
        let [c0, c1, c2] = cfg.channels;
        let p = cfg.patch;
        let fan = p * p * 3;
        let mut patch_embed = Linear::random(c0, fan, 0.3 / libm::sqrt(fan as f64), true, rng);
        {
            let pix = (p * p) as f64;
            let row = patch_embed.weight.row_mut(0);
            for px in 0..p * p {
                row[px * 3] = (OBJECTNESS_GAIN / pix) as f32;
                row[px * 3 + 1] = (-0.5 * OBJECTNESS_GAIN / pix) as f32;
                row[px * 3 + 2] = (-0.5 * OBJECTNESS_GAIN / pix) as f32;
            }
            patch_embed.bias.as_mut().unwrap().data_mut()[0] =
                (-OBJECTNESS_GAIN * OBJECTNESS_SPLIT) as f32;
        }
        let (h0, w0) = cfg.extents(0);
        let mut pos_embed: Tensor = rng.normal_tensor(&[h0, w0, c0], 0.02);
        for r in 0..h0 * w0 {
            pos_embed.row_mut(r)[0] = 0.0;
        }
        let std = 0.02;
        let stages = [
            (0..cfg.layers[0]).map(|_| Block::random(c0, cfg.heads, std, rng)).collect(),
            (0..cfg.layers[1]).map(|_| Block::random(c1, cfg.heads, std, rng)).collect(),
            (0..cfg.layers[2]).map(|_| Block::random(c2, cfg.heads, std, rng)).collect(),
        ];
        let carry = |out: usize, inp: usize, rng: &mut RngState| {
            let mut l = Linear::random(out, inp, std, true, rng);
            for i in 0..inp.min(out) {
                l.weight.row_mut(i)[i] += 1.0;
            }
            l
        };
        let downsample = [carry(c1, c0, rng), carry(c2, c1, rng)];
        let shortcuts = (0..cfg.routed_layers())
            .map(|_| ShortcutWeights::init(c2, rng))
            .collect();
        Self {
            patch_embed,
            pos_embed,
            stages,
            downsample,
            shortcuts,
        }
    }
}

impl VisitTensors for EncoderWeights {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            for (i, b) in blocks.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &alloc::format!("stage{s}.block{i}")), f);
            }
        }
        for (i, d) in self.downsample.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &alloc::format!("downsample{i}")), f);
        }
        for (i, s) in self.shortcuts.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &alloc::format!("stage2.shortcut{i}")), f);
        }
    }
}

/// Cuts `image: H×W×3` into `p×p` patches flattened as `(dy, dx, rgb)`.
fn patchify(image: &Tensor, p: usize) -> Tensor {
    let (hh, ww) = (image.dim(0), image.dim(1));
    let (h0, w0) = (hh / p, ww / p);
    let mut out = Tensor::zeros(&[h0 * w0, p * p * 3]);
    for y in 0..h0 {
        for x in 0..w0 {
            let row = out.row_mut(y * w0 + x);
            for dy in 0..p {
                for dx in 0..p {
                    let s = ((y * p + dy) * ww + x * p + dx) * 3;
                    let d = (dy * p + dx) * 3;
                    row[d..d + 3].copy_from_slice(&image.data()[s..s + 3]);
                }
            }
        }
    }
    out
}

/// 2×2 average pooling of an `H×W×C` map.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    avg_pool(x, 2)
}

/// `f×f` average pooling of an `H×W×C` map (extents divisible by `f`).
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (hh, ww, c) = (x.dim(0), x.dim(1), x.dim(2));
    let (ho, wo) = (hh / f, ww / f);
    let mut out = Tensor::zeros(&[ho, wo, c]);
    let inv = T::one() / T::of((f * f) as f64);
    for y in 0..ho {
        for xx in 0..wo {
            let dst = out.row_mut(y * wo + xx);
            for dy in 0..f {
                for dx in 0..f {
                    let src = x.row((y * f + dy) * ww + xx * f + dx);
                    for i in 0..c {
                        dst[i] += src[i];
                    }
                }
            }
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
    }
    out
}

/// Features up to the stage-2 input: `(F_s0, F_s1, stage-2 input map)`.
pub fn encode_stem(
    image: &Tensor,
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    ledger: &mut CostLedger,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, w) = cfg.input;
    if image.shape() != [h, w, 3] {
        return Err(Error::dim(
            "encode",
            alloc::format!("image shape {:?}, expected [{h}, {w}, 3]", image.shape()),
        ));
    }
    let macs = ledger.counter(CostModule::EncoderDense);
    let (h0, w0) = cfg.extents(0);
    let mut x = weights.patch_embed.forward(&patchify(image, cfg.patch), macs)?;
    x.add_assign(&weights.pos_embed.as_matrix())?;
    let mut x = x.reshape(&[h0, w0, cfg.channels[0]])?;
    let mut sink = 0u64;
    for b in &weights.stages[0] {
        x = window_layer_forward(&x, b, cfg.shallow_window, None, macs, &mut sink)?;
    }
    let s0 = x;
    let mut x = downsample(&s0, &weights.downsample[0], macs)?;
    for b in &weights.stages[1] {
        x = window_layer_forward(&x, b, cfg.shallow_window, None, macs, &mut sink)?;
    }
    let s1 = x;
    let x2 = downsample(&s1, &weights.downsample[1], macs)?;
    Ok((s0, s1, x2))
}

fn downsample(x: &Tensor, proj: &Linear, macs: &mut u64) -> Result<Tensor> {
    let pooled = avg_pool2(x);
    let (h, w) = (pooled.dim(0), pooled.dim(1));
    proj.forward(&pooled.as_matrix(), macs)?
        .reshape(&[h, w, proj.out_dim()])
}

/// Per-window object flags for a routing plan, validated against the stage-2 grid.
pub fn routing_flags(plan: &RoutingDecision, n_windows: usize) -> Result<Vec<bool>> {
    if plan.n_windows != n_windows {
        return Err(Error::Routing(alloc::format!(
            "plan covers {} windows, stage-2 grid has {}",
            plan.n_windows,
            n_windows
        )));
    }
    let mut flags = vec![false; n_windows];
    for &k in &plan.object {
        if k >= n_windows {
            return Err(Error::Routing(alloc::format!("window index {k} out of range")));
        }
        flags[k] = true;
    }
    Ok(flags)
}

/// Stage-2 blocks on `x2`, routing the window blocks when a plan is given.
pub fn encode_stage2(
    x2: Tensor,
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    plan: Option<&RoutingDecision>,
    ledger: &mut CostLedger,
) -> Result<Tensor> {
    let flags = plan
        .map(|p| routing_flags(p, cfg.stage2_windows()))
        .transpose()?;
    let routed = cfg.routed_layers();
    if flags.is_some() && weights.shortcuts.len() < routed {
        return Err(Error::Weights(alloc::format!(
            "{} routed layers but {} shortcut(s)",
            routed,
            weights.shortcuts.len()
        )));
    }
    let mut x = x2;
    for (i, b) in weights.stages[2].iter().enumerate() {
        if i < routed {
            let route = flags.as_deref().map(|f| (f, &weights.shortcuts[i]));
            let mut block_macs = 0;
            let mut sc_macs = 0;
            x = window_layer_forward(&x, b, cfg.window, route, &mut block_macs, &mut sc_macs)?;
            ledger.record(CostModule::EncoderStage2Attention, block_macs);
            ledger.record(CostModule::EncoderShortcut, sc_macs);
        } else {
            x = global_layer_forward(&x, b, ledger.counter(CostModule::EncoderDense))?;
        }
    }
    Ok(x)
}

/// Full encoder pass. Without a plan every stage-2 window takes the dense block.
pub fn encode(
    image: &Tensor,
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    plan: Option<&RoutingDecision>,
    ledger: &mut CostLedger,
) -> Result<FeaturePyramid> {
    let (s0, s1, x2) = encode_stem(image, cfg, weights, ledger)?;
    let s2 = encode_stage2(x2, cfg, weights, plan, ledger)?;
    Ok(FeaturePyramid { s0, s1, s2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_counts() {
        let x: Tensor = Tensor::zeros(&[8, 8, 2]);
        assert_eq!(window_partition(&x, 4, 4).n_windows(), 4);
        let x: Tensor = Tensor::zeros(&[10, 10, 2]);
        let g = window_partition(&x, 4, 4);
        assert_eq!(g.padded, (12, 12));
        assert_eq!(g.n_windows(), 9);
    }

    #[test]
    fn single_window_block_equals_input() {
        let x: Tensor = RngState::new(1).normal_tensor(&[3, 5, 2], 1.0);
        let g = window_partition(&x, 3, 5);
        assert_eq!(g.n_windows(), 1);
        assert_eq!(g.blocks.data(), x.data());
    }

    #[test]
    fn round_trip_examples() {
        for shape in [[10, 10, 3], [8, 8, 2]] {
            let x: Tensor = RngState::new(2).normal_tensor(&shape, 1.0);
            let g = window_partition(&x, 4, 4);
            assert_eq!(window_unpartition(&g, shape[0], shape[1]).unwrap(), x);
        }
        let g = window_partition(&Tensor::<f32>::zeros(&[6, 6, 1]), 4, 4);
        assert!(window_unpartition(&g, 6, 6).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unpartition_rejects_wrong_extents() {
        let g = window_partition(&Tensor::<f32>::zeros(&[8, 8, 1]), 4, 4);
        assert!(matches!(
            window_unpartition(&g, 12, 8),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn exhaustive_small_round_trip() {
        let mut rng = RngState::new(3);
        for hh in 1..=16 {
            for ww in 1..=16 {
                let x: Tensor = rng.normal_tensor(&[hh, ww, 2], 1.0);
                for h in 1..=5 {
                    for w in 1..=5 {
                        let g = window_partition(&x, h, w);
                        assert_eq!(g.padded.0 % h, 0);
                        assert!(g.padded.0 >= hh && g.padded.0 < hh + h);
                        assert_eq!(window_unpartition(&g, hh, ww).unwrap(), x);
                    }
                }
            }
        }
    }

    #[test]
    fn windows_are_independent() {
        let mut rng = RngState::new(4);
        let block: Block = Block::random(4, 2, 0.5, &mut rng);
        let x: Tensor = rng.normal_tensor(&[6, 6, 4], 1.0);
        let y = window_layer_forward(&x, &block, (3, 3), None, &mut 0, &mut 0).unwrap();
        let mut x2 = x.clone();
        // zero window 0 (rows 0..3, cols 0..3)
        for r in 0..3 {
            for c in 0..3 {
                x2.row_mut(r * 6 + c).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let y2 = window_layer_forward(&x2, &block, (3, 3), None, &mut 0, &mut 0).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                let same = y.row(r * 6 + c) == y2.row(r * 6 + c);
                assert_eq!(same, !(r < 3 && c < 3), "position ({r}, {c})");
            }
        }
    }

    #[test]
    fn window_order_permutation_permutes_outputs() {
        let mut rng = RngState::new(5);
        let block: Block = Block::random(4, 2, 0.5, &mut rng);
        let x: Tensor = rng.normal_tensor(&[4, 4, 4], 1.0);
        let g = window_partition(&x, 2, 2);
        let perm = [2usize, 0, 3, 1];
        let outs: Vec<Tensor> = (0..4)
            .map(|k| block.forward(&g.window_tokens(k), None, &mut 0).unwrap())
            .collect();
        for (i, &k) in perm.iter().enumerate() {
            let permuted = block.forward(&g.window_tokens(k), None, &mut 0).unwrap();
            assert_eq!(permuted, outs[perm[i]]);
        }
    }

    #[test]
    fn default_config_has_sixteen_stage2_windows() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.extents(0), (32, 32));
        assert_eq!(cfg.extents(2), (8, 8));
        assert_eq!(cfg.stage2_windows(), 16);
        assert_eq!(cfg.routed_layers(), 1);
    }

    /// Block cost for `p` tokens at width `d`: qkv + out projections (4pd²),
    /// the 4× MLP (8pd²) and the two token products (2p²d).
    fn block(p: usize, d: usize) -> u64 {
        (12 * p * d * d + 2 * p * p * d) as u64
    }

    fn windowed(extents: (usize, usize), win: (usize, usize), d: usize) -> u64 {
        let n = extents.0.div_ceil(win.0) * extents.1.div_ceil(win.1);
        n as u64 * block(win.0 * win.1, d)
    }

    fn default_weights() -> (EncoderConfig, EncoderWeights) {
        let cfg = EncoderConfig::default();
        let w = EncoderWeights::init(&cfg, &mut RngState::new(11));
        (cfg, w)
    }

    fn test_image(cfg: &EncoderConfig) -> Tensor {
        let (h, w) = cfg.input;
        RngState::new(5).uniform_tensor(&[h, w, 3], 0.0, 1.0)
    }

    #[test]
    fn dense_macs_match_closed_form() {
        let (cfg, w) = default_weights();
        let (h, ww) = cfg.input;
        let mut ledger = CostLedger::new();
        let pyr = encode(&Tensor::zeros(&[h, ww, 3]), &cfg, &w, None, &mut ledger).unwrap();
        assert!(pyr.s0.is_finite() && pyr.s1.is_finite() && pyr.s2.is_finite());

        let [c0, c1, c2] = cfg.channels;
        let (e0, e1, e2) = (cfg.extents(0), cfg.extents(1), cfg.extents(2));
        let tokens = |e: (usize, usize)| (e.0 * e.1) as u64;
        let stem = tokens(e0) * (cfg.patch * cfg.patch * 3 * c0) as u64
            + windowed(e0, cfg.shallow_window, c0)
            + tokens(e1) * (c0 * c1) as u64
            + windowed(e1, cfg.shallow_window, c1)
            + tokens(e2) * (c1 * c2) as u64;
        let global = block(e2.0 * e2.1, c2);
        assert_eq!(ledger.get(CostModule::EncoderDense), stem + global);
        assert_eq!(ledger.get(CostModule::EncoderStage2Attention), windowed(e2, cfg.window, c2));
        assert_eq!(ledger.get(CostModule::EncoderShortcut), 0);
        assert_eq!(ledger.get(CostModule::EncoderDense), 11_206_656);
    }

    #[test]
    fn all_object_plan_is_bit_identical_to_dense() {
        let (cfg, w) = default_weights();
        let img = test_image(&cfg);
        let plan = RoutingDecision::dense(1, cfg.stage2_windows());
        let dense = encode(&img, &cfg, &w, None, &mut CostLedger::new()).unwrap();
        let routed = encode(&img, &cfg, &w, Some(&plan), &mut CostLedger::new()).unwrap();
        assert_eq!(dense.s2.data(), routed.s2.data());
    }

    #[test]
    fn no_object_plan_spends_nothing_on_window_attention() {
        let (cfg, w) = default_weights();
        let img = test_image(&cfg);
        let plan = RoutingDecision::from_object(1, cfg.stage2_windows(), []);
        let mut ledger = CostLedger::new();
        let out = encode(&img, &cfg, &w, Some(&plan), &mut ledger).unwrap();
        assert!(out.s2.is_finite());
        assert_eq!(ledger.get(CostModule::EncoderStage2Attention), 0);
        let d = cfg.channels[2] as u64;
        let n2 = (cfg.extents(2).0 * cfg.extents(2).1) as u64;
        // down and up projections of the d/2 bottleneck on every token
        assert_eq!(ledger.get(CostModule::EncoderShortcut), n2 * d * d);
    }

    #[test]
    fn plan_for_wrong_grid_is_rejected() {
        let (cfg, w) = default_weights();
        let plan = RoutingDecision::dense(1, 3);
        let err = encode(&test_image(&cfg), &cfg, &w, Some(&plan), &mut CostLedger::new());
        assert!(matches!(err, Err(Error::Routing(_))));
    }
}
