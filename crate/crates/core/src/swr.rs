//! Sparse window routing: picks the stage-2 windows that keep full attention
//! from the previous frame's decoder output, and the bottleneck shortcut that
//! replaces attention for all other windows.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nn::{join, LayerNorm, VisitTensors};
use crate::numerics::{matmul_metered, matmul_nt, matmul_tn, relu, LayerNormCache, RngState, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouterConfig {
    pub theta_obj: f32,
    pub tau: f64,
    /// Square dilation radius in stage-2 cells.
    pub dilation_radius: usize,
    pub dilation_iterations: usize,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            theta_obj: 5.0,
            tau: 0.7,
            dilation_radius: 1,
            dilation_iterations: 1,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(alloc::format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !self.theta_obj.is_finite() {
            return Err(Error::Config("theta_obj must be finite".into()));
        }
        Ok(())
    }
}

/// Window layout of the stage-2 feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub extents: (usize, usize),
    pub window: (usize, usize),
}

impl WindowLayout {
    pub fn new(extents: (usize, usize), window: (usize, usize)) -> Self {
        Self { extents, window }
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.extents.0.div_ceil(self.window.0),
            self.extents.1.div_ceil(self.window.1),
        )
    }

    pub fn n_windows(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    pub fn window_of(&self, y: usize, x: usize) -> usize {
        (y / self.window.0) * self.grid().1 + x / self.window.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub t: usize,
    pub n_windows: usize,
    /// Windows that run the full block, ascending.
    pub object: Vec<usize>,
    pub pred: Vec<usize>,
    pub salient: Vec<usize>,
}

impl RoutingDecision {
    /// Every window object: the cold-start plan, equivalent to dense.
    pub fn dense(t: usize, n_windows: usize) -> Self {
        let all: Vec<usize> = (0..n_windows).collect();
        Self {
            t,
            n_windows,
            object: all.clone(),
            pred: all,
            salient: Vec::new(),
        }
    }

    /// Plan from explicit object windows (used to force a routing).
    pub fn from_object(t: usize, n_windows: usize, object: impl IntoIterator<Item = usize>) -> Self {
        let object: Vec<usize> = object.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        Self {
            t,
            n_windows,
            pred: object.clone(),
            object,
            salient: Vec::new(),
        }
    }

    pub fn window_sparsity(&self) -> f64 {
        if self.n_windows == 0 {
            return 0.0;
        }
        1.0 - self.object.len() as f64 / self.n_windows as f64
    }

    pub fn is_object(&self, k: usize) -> bool {
        self.object.binary_search(&k).is_ok()
    }

    pub const CSV_HEADER: &'static str = "frame,n_windows,pred,salient,object,sparsity";

    pub fn csv_row(&self) -> String {
        alloc::format!(
            "{},{},{},{},{},{:.6}",
            self.t,
            self.n_windows,
            self.pred.len(),
            self.salient.len(),
            self.object.len(),
            self.window_sparsity()
        )
    }
}

/// Windows touched by the union of `masks` after dilation. Masks must have the
/// stage-2 extents.
pub fn windows_from_masks(
    masks: &[BinaryMask],
    layout: &WindowLayout,
    radius: usize,
    iterations: usize,
) -> Result<Vec<usize>> {
    let (h, w) = layout.extents;
    let mut union = BinaryMask::empty(h, w);
    for m in masks {
        if m.extents() != layout.extents {
            return Err(Error::dim(
                "windows_from_masks",
                alloc::format!("mask {:?} vs stage-2 {:?}", m.extents(), layout.extents),
            ));
        }
        union = union.union(m)?;
    }
    let dilated = union.dilate(radius, iterations);
    let mut set = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            if dilated.get(y, x) {
                set.insert(layout.window_of(y, x));
            }
        }
    }
    Ok(set.into_iter().collect())
}

/// Per-window attention mass of `a: H×W`, renormalized to sum 1 when it drifts.
pub fn window_scores(a: &Tensor, layout: &WindowLayout) -> Result<Vec<f64>> {
    let (h, w) = layout.extents;
    if a.len() != h * w {
        return Err(Error::dim(
            "window_scores",
            alloc::format!("attention map of {} cells, layout {h}x{w}", a.len()),
        ));
    }
    let total: f64 = a.data().iter().map(|&v| v as f64).sum();
    let norm = if total > 0.0 && (total - 1.0).abs() > 1e-6 { total } else { 1.0 };
    let mut alpha = alloc::vec![0.0f64; layout.n_windows()];
    for y in 0..h {
        for x in 0..w {
            alpha[layout.window_of(y, x)] += a.data()[y * w + x] as f64 / norm;
        }
    }
    Ok(alpha)
}

/// Windows whose cumulative score, counting every window ranked at or above
/// them by `(α desc, index asc)`, stays within `tau`.
pub fn select_by_cumulative(alpha: &[f64], tau: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    order.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
    let mut acc = 0.0;
    let mut out = Vec::new();
    for k in order {
        acc += alpha[k];
        if acc > tau {
            break;
        }
        out.push(k);
    }
    out.sort_unstable();
    out
}

pub fn salient_windows(
    a_prev: &Tensor,
    s_obj: f32,
    layout: &WindowLayout,
    cfg: &RouterConfig,
) -> Result<Vec<usize>> {
    if s_obj >= cfg.theta_obj {
        return Ok(Vec::new());
    }
    Ok(select_by_cumulative(&window_scores(a_prev, layout)?, cfg.tau))
}

/// What the router knows about the previous frame.
#[derive(Debug, Clone, Copy)]
pub enum RouteCue<'a> {
    /// No previous decoder output: route every window as object.
    Cold,
    /// An attention map but no prediction: saliency path with maximal uncertainty.
    AttentionOnly(&'a Tensor),
    Prediction {
        /// The three candidate masks, at any multiple of the stage-2 extents.
        masks: &'a [BinaryMask],
        attention: &'a Tensor,
        s_obj: f32,
    },
}

pub fn route(t: usize, cue: RouteCue<'_>, layout: &WindowLayout, cfg: &RouterConfig) -> Result<RoutingDecision> {
    let n = layout.n_windows();
    let (pred, salient) = match cue {
        RouteCue::Cold => return Ok(RoutingDecision::dense(t, n)),
        RouteCue::AttentionOnly(a) => (Vec::new(), salient_windows(a, f32::NEG_INFINITY, layout, cfg)?),
        RouteCue::Prediction { masks, attention, s_obj } => {
            let pooled = masks
                .iter()
                .map(|m| {
                    if m.height() % layout.extents.0 != 0 {
                        return Err(Error::dim(
                            "route",
                            alloc::format!("mask {:?} vs stage-2 {:?}", m.extents(), layout.extents),
                        ));
                    }
                    m.or_pool(m.height() / layout.extents.0)
                })
                .collect::<Result<Vec<_>>>()?;
            let pred = windows_from_masks(&pooled, layout, cfg.dilation_radius, cfg.dilation_iterations)?;
            (pred, salient_windows(attention, s_obj, layout, cfg)?)
        }
    };
    let object: Vec<usize> = pred.iter().chain(&salient).copied().collect::<BTreeSet<_>>().into_iter().collect();
    Ok(RoutingDecision { t, n_windows: n, object, pred, salient })
}

/// Residual bottleneck `X + W_up·ReLU(W_down·LN(X))` with `d_r = d/2` and no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortcutWeights<T = f32> {
    pub ln: LayerNorm<T>,
    /// `d_r × d`.
    pub down: Tensor<T>,
    /// `d × d_r`.
    pub up: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ShortcutCache<T = f32> {
    ln: LayerNormCache<T>,
    normed: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

pub fn param_count(d: usize) -> usize {
    d * d + 2 * d
}

impl<T: Scalar> ShortcutWeights<T> {
    pub fn zeros(d: usize) -> Result<Self> {
        if d == 0 || d % 2 != 0 {
            return Err(Error::Config(alloc::format!("shortcut width {d} must be even")));
        }
        Ok(Self {
            ln: LayerNorm::new(d),
            down: Tensor::zeros(&[d / 2, d]),
            up: Tensor::zeros(&[d, d / 2]),
        })
    }

    /// `W_up = 0` so the fresh branch is the identity.
    pub fn init(d: usize, rng: &mut RngState) -> Self {
        let mut w = Self::zeros(d).expect("even shortcut width");
        w.down = rng.normal_tensor(&[d / 2, d], 1.0 / libm::sqrt(d as f64));
        w
    }

    pub fn dim(&self) -> usize {
        self.up.dim(0)
    }

    pub fn forward(&self, x: &Tensor<T>, macs: &mut u64) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x, macs)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor<T>, macs: &mut u64) -> Result<(Tensor<T>, ShortcutCache<T>)> {
        let d = self.dim();
        if x.last_dim() != d {
            return Err(Error::dim(
                "shortcut_forward",
                alloc::format!("token width {} vs shortcut width {d}", x.last_dim()),
            ));
        }
        let shape = x.shape().to_vec();
        let xm = x.as_matrix();
        let (normed, ln) = self.ln.forward_cached(&xm);
        let pre = matmul_nt(&normed, &self.down, macs)?;
        let act = pre.map(relu);
        let mut y = matmul_nt(&act, &self.up, macs)?;
        y.add_assign(&xm)?;
        Ok((y.reshape(&shape)?, ShortcutCache { ln, normed, pre, act }))
    }

    /// Input gradient and parameter gradients (returned in weight layout).
    pub fn backward(&self, cache: &ShortcutCache<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, ShortcutWeights<T>)> {
        let dym = dy.as_matrix();
        let mut sink = 0;
        let dup = matmul_tn(&dym, &cache.act, &mut sink)?;
        let mut dh = matmul_metered(&dym, &self.up, &mut sink)?;
        for (g, &p) in dh.data_mut().iter_mut().zip(cache.pre.data()) {
            if p <= T::zero() {
                *g = T::zero();
            }
        }
        let ddown = matmul_tn(&dh, &cache.normed, &mut sink)?;
        let dn = matmul_metered(&dh, &self.down, &mut sink)?;
        let d = self.dim();
        let mut dgamma = Tensor::zeros(&[d]);
        let mut dbeta = Tensor::zeros(&[d]);
        let mut dx = self
            .ln
            .backward(&cache.ln, &dn, Some((dgamma.data_mut(), dbeta.data_mut())));
        dx.add_assign(&dym)?;
        let grads = ShortcutWeights {
            ln: LayerNorm { gamma: dgamma, beta: dbeta },
            down: ddown,
            up: dup,
        };
        Ok((dx.reshape(dy.shape())?, grads))
    }

    pub fn cast<U: Scalar>(&self) -> ShortcutWeights<U> {
        ShortcutWeights {
            ln: self.ln.cast(),
            down: self.down.cast(),
            up: self.up.cast(),
        }
    }
}

impl<T: Scalar> VisitTensors<T> for ShortcutWeights<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.ln.visit_mut(&join(prefix, "ln"), f);
        f(&join(prefix, "down"), &mut self.down);
        f(&join(prefix, "up"), &mut self.up);
    }
}
