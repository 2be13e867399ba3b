//! Transformer building blocks shared by the encoder, memory attention and
//! decoder: linear layers, layer norm, multi-head attention and MLPs, each
//! with an optional cached forward and an input-gradient backward.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{
    gelu, gelu_grad, layernorm_cached, matmul, matmul_metered, matmul_nt, matmul_tn,
    softmax_in_place, LayerNormCache, RngState, Scalar, Tensor, LAYERNORM_EPS,
};

/// Visits every weight tensor under a dotted name (`stage2.block0.attn.q.weight`).
pub trait VisitTensors<T: Scalar = f32> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// Total number of scalar parameters reachable through [`VisitTensors`].
pub fn count_params<T: Scalar, V: VisitTensors<T> + Clone>(v: &V) -> usize {
    let mut n = 0;
    v.clone().visit_mut("", &mut |_, t| n += t.len());
    n
}

/// `y = x Wᵀ + b` with `W: out×in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(out_dim: usize, in_dim: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn random(out_dim: usize, in_dim: usize, std: f64, bias: bool, rng: &mut RngState) -> Self {
        Self {
            weight: rng.normal_tensor(&[out_dim, in_dim], std),
            bias: bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, x: &Tensor<T>, macs: &mut u64) -> Result<Tensor<T>> {
        let mut y = matmul_nt(x, &self.weight, macs)?;
        if let Some(b) = &self.bias {
            y.add_row_broadcast(b.data());
        }
        Ok(y)
    }

    /// Gradient with respect to the input only.
    pub fn backward_input(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        matmul(dy, &self.weight)
    }

    /// Gradients `(dx, dW, db)`.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let dx = matmul(dy, &self.weight)?;
        let dw = matmul_tn(dy, x, &mut 0)?;
        let out = self.out_dim();
        let mut db = Tensor::zeros(&[out]);
        for row in dy.data().chunks(out) {
            for (g, &v) in db.data_mut().iter_mut().zip(row) {
                *g += v;
            }
        }
        Ok((dx, dw, db))
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(|b| b.cast()),
        }
    }
}

impl<T: Scalar> VisitTensors<T> for Linear<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Affine parameters of a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::full(&[d], T::one()),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> (Tensor<T>, LayerNormCache<T>) {
        layernorm_cached(x, self.gamma.data(), self.beta.data(), T::of(LAYERNORM_EPS))
    }

    /// Input gradient, plus `(dgamma, dbeta)` accumulated into `param_grads` when given.
    pub fn backward(
        &self,
        cache: &LayerNormCache<T>,
        dy: &Tensor<T>,
        param_grads: Option<(&mut [T], &mut [T])>,
    ) -> Tensor<T> {
        let d = dy.last_dim();
        let dn = T::of(d as f64);
        let gamma = self.gamma.data();
        let mut dx = dy.clone();
        let mut pg = param_grads;
        for (r, (dxrow, (dyrow, xh))) in dx
            .data_mut()
            .chunks_mut(d)
            .zip(dy.data().chunks(d).zip(cache.xhat.data().chunks(d)))
            .enumerate()
        {
            if let Some((dg, db)) = pg.as_mut() {
                for i in 0..d {
                    dg[i] += dyrow[i] * xh[i];
                    db[i] += dyrow[i];
                }
            }
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for i in 0..d {
                let g = dyrow[i] * gamma[i];
                mean_g += g;
                mean_gx += g * xh[i];
            }
            mean_g = mean_g / dn;
            mean_gx = mean_gx / dn;
            let rstd = cache.rstd[r];
            for i in 0..d {
                let g = dyrow[i] * gamma[i];
                dxrow[i] = rstd * (g - mean_g - xh[i] * mean_gx);
            }
        }
        dx
    }

    pub fn cast<U: Scalar>(&self) -> LayerNorm<U> {
        LayerNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
        }
    }
}

impl<T: Scalar> VisitTensors<T> for LayerNorm<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// MACs of one attention call, split into projections and the two
/// token-token products (`QKᵀ` and `PV`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttentionMacs {
    pub projection: u64,
    pub core: u64,
}

/// Multi-head attention with an internal width `q.out_dim()` that may be
/// narrower than the model width (downsampled cross-attention).
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T = f32> {
    pub heads: usize,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
}

/// Saved activations for [`Attention::backward`].
#[derive(Debug, Clone)]
pub struct AttentionCache<T = f32> {
    q: Vec<Tensor<T>>,
    k: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    probs: Vec<Tensor<T>>,
}

impl<T: Scalar> AttentionCache<T> {
    /// Per-head attention probabilities, each `nq × nk`.
    pub fn probs(&self) -> &[Tensor<T>] {
        &self.probs
    }
}

pub struct AttentionOutput<T = f32> {
    pub out: Tensor<T>,
    /// Per-head attention probabilities, each `nq × nk`.
    pub probs: Vec<Tensor<T>>,
}

fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Vec<Tensor<T>> {
    let (n, di) = (x.rows(), x.last_dim());
    let dh = di / heads;
    (0..heads)
        .map(|h| {
            let mut data = Vec::with_capacity(n * dh);
            for r in 0..n {
                data.extend_from_slice(&x.row(r)[h * dh..(h + 1) * dh]);
            }
            Tensor::new(&[n, dh], data).expect("head split")
        })
        .collect()
}

fn merge_heads<T: Scalar>(parts: &[Tensor<T>]) -> Tensor<T> {
    let n = parts[0].rows();
    let dh = parts[0].last_dim();
    let di = dh * parts.len();
    let mut out = Tensor::zeros(&[n, di]);
    for (h, p) in parts.iter().enumerate() {
        for r in 0..n {
            out.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(p.row(r));
        }
    }
    out
}

impl<T: Scalar> Attention<T> {
    /// Attention with model width `d`, key/value input width `d_kv` and internal width `d_inner`.
    pub fn random(
        d: usize,
        d_kv: usize,
        d_inner: usize,
        heads: usize,
        std: f64,
        rng: &mut RngState,
    ) -> Self {
        Self {
            heads,
            q: Linear::random(d_inner, d, std, true, rng),
            k: Linear::random(d_inner, d_kv, std, true, rng),
            v: Linear::random(d_inner, d_kv, std, true, rng),
            out: Linear::random(d, d_inner, std, true, rng),
        }
    }

    pub fn zeros(d: usize, d_kv: usize, d_inner: usize, heads: usize) -> Self {
        Self {
            heads,
            q: Linear::zeros(d_inner, d, true),
            k: Linear::zeros(d_inner, d_kv, true),
            v: Linear::zeros(d_inner, d_kv, true),
            out: Linear::zeros(d, d_inner, true),
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.q.out_dim()
    }

    fn scale(&self) -> T {
        let dh = self.inner_dim() / self.heads;
        T::one() / T::of(dh as f64).sqrt()
    }

    /// Queries from `xq`, keys and values from `xkv` (pass the same tensor for self-attention).
    pub fn forward(
        &self,
        xq: &Tensor<T>,
        xkv: &Tensor<T>,
        macs: &mut AttentionMacs,
    ) -> Result<AttentionOutput<T>> {
        let (o, cache) = self.forward_cached(xq, xkv, macs)?;
        Ok(AttentionOutput {
            out: o,
            probs: cache.probs,
        })
    }

    /// Attention with keys and values already projected (`k`, `v`: `nk × d_inner`).
    pub fn forward_projected_kv(
        &self,
        xq: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        macs: &mut AttentionMacs,
    ) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let q = self.q.forward(xq, &mut macs.projection)?;
        let qh = split_heads(&q, self.heads);
        let kh = split_heads(k, self.heads);
        let vh = split_heads(v, self.heads);
        let scale = self.scale();
        let mut probs = Vec::with_capacity(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut s = matmul_nt(&qh[h], &kh[h], &mut macs.core)?;
            s.scale(scale);
            let nk = s.last_dim();
            for row in s.data_mut().chunks_mut(nk) {
                softmax_in_place(row);
            }
            outs.push(matmul_metered(&s, &vh[h], &mut macs.core)?);
            probs.push(s);
        }
        let concat = merge_heads(&outs);
        let out = self.out.forward(&concat, &mut macs.projection)?;
        Ok((
            out,
            AttentionCache {
                q: qh,
                k: kh,
                v: vh,
                probs,
            },
        ))
    }

    /// Attention over all of `xkv` with `−∞` added to the scores of keys whose
    /// `keep` flag is false. Costs the full key set; gathering the kept rows
    /// and calling [`Attention::forward`] gives the same output for less.
    pub fn forward_key_masked(
        &self,
        xq: &Tensor<T>,
        xkv: &Tensor<T>,
        keep: &[bool],
        macs: &mut AttentionMacs,
    ) -> Result<Tensor<T>> {
        if keep.len() != xkv.rows() {
            return Err(Error::dim(
                "forward_key_masked",
                alloc::format!("{} flags for {} keys", keep.len(), xkv.rows()),
            ));
        }
        let (k, v) = self.project_kv(xkv, &mut macs.projection)?;
        let q = self.q.forward(xq, &mut macs.projection)?;
        let (qh, kh, vh) = (split_heads(&q, self.heads), split_heads(&k, self.heads), split_heads(&v, self.heads));
        let scale = self.scale();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut s = matmul_nt(&qh[h], &kh[h], &mut macs.core)?;
            s.scale(scale);
            let nk = s.last_dim();
            for row in s.data_mut().chunks_mut(nk) {
                for (x, &on) in row.iter_mut().zip(keep) {
                    if !on {
                        *x = T::neg_infinity();
                    }
                }
                softmax_in_place(row);
            }
            outs.push(matmul_metered(&s, &vh[h], &mut macs.core)?);
        }
        self.out.forward(&merge_heads(&outs), &mut macs.projection)
    }

    pub fn project_kv(&self, xkv: &Tensor<T>, macs: &mut u64) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((self.k.forward(xkv, macs)?, self.v.forward(xkv, macs)?))
    }

    pub fn forward_cached(
        &self,
        xq: &Tensor<T>,
        xkv: &Tensor<T>,
        macs: &mut AttentionMacs,
    ) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let (k, v) = self.project_kv(xkv, &mut macs.projection)?;
        self.forward_projected_kv(xq, &k, &v, macs)
    }

    /// Input gradients `(dxq, dxkv)`.
    pub fn backward(&self, cache: &AttentionCache<T>, dout: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let dconcat = self.out.backward_input(dout)?;
        let dheads = split_heads(&dconcat, self.heads);
        let scale = self.scale();
        let mut dq = Vec::with_capacity(self.heads);
        let mut dk = Vec::with_capacity(self.heads);
        let mut dv = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let p = &cache.probs[h];
            let dp = matmul_nt(&dheads[h], &cache.v[h], &mut 0)?;
            dv.push(matmul_tn(p, &dheads[h], &mut 0)?);
            let nk = p.last_dim();
            let mut ds = dp;
            for (dsrow, prow) in ds.data_mut().chunks_mut(nk).zip(p.data().chunks(nk)) {
                let dot: T = dsrow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (g, &pv) in dsrow.iter_mut().zip(prow) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            dq.push(matmul(&ds, &cache.k[h])?);
            dk.push(matmul_tn(&ds, &cache.q[h], &mut 0)?);
        }
        let dxq = self.q.backward_input(&merge_heads(&dq))?;
        let mut dxkv = self.k.backward_input(&merge_heads(&dk))?;
        dxkv.add_assign(&self.v.backward_input(&merge_heads(&dv))?)?;
        Ok((dxq, dxkv))
    }

    pub fn cast<U: Scalar>(&self) -> Attention<U> {
        Attention {
            heads: self.heads,
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            out: self.out.cast(),
        }
    }
}

impl<T: Scalar> VisitTensors<T> for Attention<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T = f32> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T = f32> {
    pre: Tensor<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn random(d: usize, hidden: usize, std: f64, rng: &mut RngState) -> Self {
        Self {
            fc1: Linear::random(hidden, d, std, true, rng),
            fc2: Linear::random(d, hidden, std, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, macs: &mut u64) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x, macs)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor<T>, macs: &mut u64) -> Result<(Tensor<T>, MlpCache<T>)> {
        let pre = self.fc1.forward(x, macs)?;
        let h = pre.map(gelu);
        let y = self.fc2.forward(&h, macs)?;
        Ok((y, MlpCache { pre }))
    }

    pub fn backward_input(&self, cache: &MlpCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut dh = self.fc2.backward_input(dy)?;
        for (g, &p) in dh.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= gelu_grad(p);
        }
        self.fc1.backward_input(&dh)
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }
}

impl<T: Scalar> VisitTensors<T> for Mlp<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Pre-norm transformer block:
/// `x ← x + Attn(LN₁ x)`, then `x ← x + MLP(LN₂ x)`.
///
/// With all linear layers biased and an MLP ratio of 4 the parameter count is
/// `12d² + 13d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T = f32> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T = f32> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    mlp: MlpCache<T>,
    pads: Vec<bool>,
}

impl<T: Scalar> Block<T> {
    pub fn random(d: usize, heads: usize, std: f64, rng: &mut RngState) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            attn: Attention::random(d, d, d, heads, std, rng),
            ln2: LayerNorm::new(d),
            mlp: Mlp::random(d, 4 * d, std, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.ln1.gamma.len()
    }

    /// Runs the block over one attention group of `p` tokens (`x: p×d`).
    ///
    /// Rows flagged in `pads` are padding: they enter attention as zero
    /// vectors, skip the MLP and come back as zeros.
    pub fn forward(&self, x: &Tensor<T>, pads: Option<&[bool]>, macs: &mut u64) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x, pads, macs)?.0)
    }

    pub fn forward_cached(
        &self,
        x: &Tensor<T>,
        pads: Option<&[bool]>,
        macs: &mut u64,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let p = x.rows();
        let pads: Vec<bool> = pads.map(|s| s.to_vec()).unwrap_or_else(|| vec![false; p]);
        let (mut h, ln1) = self.ln1.forward_cached(x);
        for (r, &is_pad) in pads.iter().enumerate() {
            if is_pad {
                h.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let mut am = AttentionMacs::default();
        let (a, attn) = self.attn.forward_cached(&h, &h, &mut am)?;
        *macs += am.projection + am.core;
        let mut x1 = x.clone();
        x1.add_assign(&a)?;
        let real: Vec<usize> = (0..p).filter(|&r| !pads[r]).collect();
        let x1r = if real.len() == p { x1.clone() } else { x1.gather_rows(&real) };
        let (h2, ln2) = self.ln2.forward_cached(&x1r);
        let (m, mlp) = self.mlp.forward_cached(&h2, macs)?;
        let mut y = Tensor::zeros(x.shape());
        for (i, &r) in real.iter().enumerate() {
            let (dst, a, b) = (y.row_mut(r), x1r.row(i), m.row(i));
            for c in 0..dst.len() {
                dst[c] = a[c] + b[c];
            }
        }
        Ok((y, BlockCache { ln1, attn, ln2, mlp, pads }))
    }

    /// Gradient of the block output with respect to its input (weights frozen).
    pub fn backward_input(&self, cache: &BlockCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let p = dy.rows();
        let real: Vec<usize> = (0..p).filter(|&r| !cache.pads[r]).collect();
        let dyr = if real.len() == p { dy.clone() } else { dy.gather_rows(&real) };
        let dh2 = self.mlp.backward_input(&cache.mlp, &dyr)?;
        let dx1r_ln = self.ln2.backward(&cache.ln2, &dh2, None);
        // dx1 = dy (residual) + LN2 path, scattered back to real rows
        let mut dx1 = Tensor::zeros(dy.shape());
        for (i, &r) in real.iter().enumerate() {
            let (dst, a, b) = (dx1.row_mut(r), dyr.row(i), dx1r_ln.row(i));
            for c in 0..dst.len() {
                dst[c] = a[c] + b[c];
            }
        }
        let (dhq, dhkv) = self.attn.backward(&cache.attn, &dx1)?;
        let mut dh = dhq;
        dh.add_assign(&dhkv)?;
        for (r, &is_pad) in cache.pads.iter().enumerate() {
            if is_pad {
                dh.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let mut dx = self.ln1.backward(&cache.ln1, &dh, None);
        dx.add_assign(&dx1)?;
        for (r, &is_pad) in cache.pads.iter().enumerate() {
            if is_pad {
                dx.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
            }
        }
        Ok(dx)
    }

    pub fn cast<U: Scalar>(&self) -> Block<U> {
        Block {
            ln1: self.ln1.cast(),
            attn: self.attn.cast(),
            ln2: self.ln2.cast(),
            mlp: self.mlp.cast(),
        }
    }
}

impl<T: Scalar> VisitTensors<T> for Block<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Parameter count of a full transformer block at width `d`: `12d² + 13d`.
pub fn full_block_param_count(d: usize) -> usize {
    12 * d * d + 13 * d
}
