//! Transformer building blocks with explicit forward caches and hand-written
//! backward passes.
//!
//! Every block exposes `forward` returning a cache of the intermediates needed
//! by `backward`. Backward routines return the gradient with respect to the
//! block input and, when a gradient accumulator is supplied, add parameter
//! gradients into it. The accumulator is simply a zeroed clone of the block
//! itself, so parameter enumeration (`visit`) is shared between values,
//! gradients, and optimizer state.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;

/// Borrowed view over a named parameter tensor.
pub enum ParamRef<'a> {
    A1(&'a Array1<f64>),
    A2(&'a Array2<f64>),
}

/// Mutable view over a named parameter tensor.
pub enum ParamMut<'a> {
    A1(&'a mut Array1<f64>),
    A2(&'a mut Array2<f64>),
}

impl ParamMut<'_> {
    pub fn fill(&mut self, v: f64) {
        match self {
            ParamMut::A1(a) => a.fill(v),
            ParamMut::A2(a) => a.fill(v),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ParamMut::A1(a) => a.len(),
            ParamMut::A2(a) => a.len(),
        }
    }
}

/// Anything that can enumerate its parameter tensors in a stable order.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamRef<'a>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamMut<'a>)>);

    fn zeroed_clone(&self) -> Self
    where
        Self: Clone,
    {
        let mut c = self.clone();
        let mut slots = Vec::new();
        c.visit_mut("", &mut slots);
        for (_, mut p) in slots {
            p.fill(0.0);
        }
        c
    }

    fn param_count(&self) -> usize
    where
        Self: Clone,
    {
        let mut n = 0;
        let mut slots = Vec::new();
        let s: &Self = self;
        s.visit("", &mut slots);
        for (_, p) in slots {
            n += match p {
                ParamRef::A1(a) => a.len(),
                ParamRef::A2(a) => a.len(),
            };
        }
        n
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Affine map `y = x W + b` with `W: (in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, dim_in: usize, dim_out: usize, std: f64) -> Self {
        Self {
            weight: randn2(rng, dim_in, dim_out, std),
            bias: Array1::zeros(dim_out),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Returns d_x; accumulates dW, db into `grads` when present.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        d_y: &Array2<f64>,
        grads: Option<&mut Linear>,
    ) -> Array2<f64> {
        if let Some(g) = grads {
            g.weight += &x.t().dot(d_y);
            g.bias += &d_y.sum_axis(Axis(0));
        }
        d_y.dot(&self.weight.t())
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamRef<'a>)>) {
        out.push((format!("{prefix}.weight"), ParamRef::A2(&self.weight)));
        out.push((format!("{prefix}.bias"), ParamRef::A1(&self.bias)));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamMut<'a>)>) {
        out.push((format!("{prefix}.weight"), ParamMut::A2(&mut self.weight)));
        out.push((format!("{prefix}.bias"), ParamMut::A1(&mut self.bias)));
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).unwrap();
        let mut xhat = x.clone();
        for (mut row, &m) in xhat.rows_mut().into_iter().zip(mean.iter()) {
            row.mapv_inplace(|v| v - m);
        }
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        for (mut row, &r) in xhat.rows_mut().into_iter().zip(rstd.iter()) {
            row.mapv_inplace(|v| v * r);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        d_y: &Array2<f64>,
        grads: Option<&mut LayerNorm>,
    ) -> Array2<f64> {
        if let Some(g) = grads {
            g.gamma += &(d_y * &cache.xhat).sum_axis(Axis(0));
            g.beta += &d_y.sum_axis(Axis(0));
        }
        let d_xhat = d_y * &self.gamma;
        let mean_dxhat = d_xhat.mean_axis(Axis(1)).unwrap();
        let mean_dxhat_xhat = (&d_xhat * &cache.xhat).mean_axis(Axis(1)).unwrap();
        let mut d_x = d_xhat;
        for ((mut row, xh_row), ((&m1, &m2), &r)) in d_x
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(mean_dxhat.iter().zip(mean_dxhat_xhat.iter()).zip(cache.rstd.iter()))
        {
            for (v, &xh) in row.iter_mut().zip(xh_row.iter()) {
                *v = (*v - m1 - xh * m2) * r;
            }
        }
        d_x
    }
}

impl Params for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamRef<'a>)>) {
        out.push((format!("{prefix}.gamma"), ParamRef::A1(&self.gamma)));
        out.push((format!("{prefix}.beta"), ParamRef::A1(&self.beta)));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamMut<'a>)>) {
        out.push((format!("{prefix}.gamma"), ParamMut::A1(&mut self.gamma)));
        out.push((format!("{prefix}.beta"), ParamMut::A1(&mut self.beta)));
    }
}

// ---------------------------------------------------------------------------
// GELU (tanh form)
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

pub struct AttentionCache {
    pub input: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Softmax probabilities, one (T, T) matrix per head.
    pub probs: Vec<Array2<f64>>,
    pub ctx: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut ChaCha8Rng, width: usize, heads: usize) -> Self {
        assert!(width % heads == 0, "width must be divisible by heads");
        let std = (width as f64).powf(-0.5);
        Self {
            heads,
            wq: Linear::new(rng, width, width, std),
            wk: Linear::new(rng, width, width, std),
            wv: Linear::new(rng, width, width, std),
            wo: Linear::new(rng, width, width, std),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, causal: bool) -> (Array2<f64>, AttentionCache) {
        let (t, width) = (x.nrows(), x.ncols());
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let mut ctx = Array2::zeros((t, width));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            if causal {
                for i in 0..t {
                    for j in (i + 1)..t {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
            }
            let p = softmax_rows(&scores);
            let ctx_h = p.dot(&vh);
            ctx.slice_mut(ndarray::s![.., cols]).assign(&ctx_h);
            probs.push(p);
        }
        let out = self.wo.forward(&ctx);
        (
            out,
            AttentionCache {
                input: x.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        d_out: &Array2<f64>,
        grads: Option<&mut MultiHeadAttention>,
    ) -> Array2<f64> {
        let width = cache.input.ncols();
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (g_wo, g_rest) = match grads {
            Some(g) => (Some(&mut g.wo), Some((&mut g.wq, &mut g.wk, &mut g.wv))),
            None => (None, None),
        };
        let d_ctx = self.wo.backward(&cache.ctx, d_out, g_wo);
        let mut d_q = Array2::zeros(cache.q.raw_dim());
        let mut d_k = Array2::zeros(cache.k.raw_dim());
        let mut d_v = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &cache.probs[h];
            let qh = cache.q.slice(ndarray::s![.., cols.clone()]);
            let kh = cache.k.slice(ndarray::s![.., cols.clone()]);
            let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
            let d_ctx_h = d_ctx.slice(ndarray::s![.., cols.clone()]);
            let d_p = d_ctx_h.dot(&vh.t());
            d_v.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&p.t().dot(&d_ctx_h));
            // softmax backward row-wise: ds = p * (dp - sum(dp * p))
            let mut d_s = Array2::zeros(p.raw_dim());
            for i in 0..p.nrows() {
                let dot: f64 = d_p
                    .row(i)
                    .iter()
                    .zip(p.row(i).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                for j in 0..p.ncols() {
                    d_s[[i, j]] = p[[i, j]] * (d_p[[i, j]] - dot);
                }
            }
            d_s.mapv_inplace(|v| v * scale);
            d_q.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&d_s.dot(&kh));
            d_k.slice_mut(ndarray::s![.., cols])
                .assign(&d_s.t().dot(&qh));
        }
        let mut d_x;
        match g_rest {
            Some((g_wq, g_wk, g_wv)) => {
                d_x = self.wq.backward(&cache.input, &d_q, Some(g_wq));
                d_x += &self.wk.backward(&cache.input, &d_k, Some(g_wk));
                d_x += &self.wv.backward(&cache.input, &d_v, Some(g_wv));
            }
            None => {
                d_x = self.wq.backward(&cache.input, &d_q, None);
                d_x += &self.wk.backward(&cache.input, &d_k, None);
                d_x += &self.wv.backward(&cache.input, &d_v, None);
            }
        }
        d_x
    }
}

impl Params for MultiHeadAttention {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamRef<'a>)>) {
        self.wq.visit(&format!("{prefix}.wq"), out);
        self.wk.visit(&format!("{prefix}.wk"), out);
        self.wv.visit(&format!("{prefix}.wv"), out);
        self.wo.visit(&format!("{prefix}.wo"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamMut<'a>)>) {
        self.wq.visit_mut(&format!("{prefix}.wq"), out);
        self.wk.visit_mut(&format!("{prefix}.wk"), out);
        self.wv.visit_mut(&format!("{prefix}.wv"), out);
        self.wo.visit_mut(&format!("{prefix}.wo"), out);
    }
}

// ---------------------------------------------------------------------------
// Transformer block (pre-LN)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache {
    pub ln1: LayerNormCache,
    pub attn: AttentionCache,
    pub x_mid: Array2<f64>,
    pub ln2: LayerNormCache,
    pub ln2_out: Array2<f64>,
    pub h_pre: Array2<f64>,
    pub h_act: Array2<f64>,
}

impl Block {
    pub fn new(rng: &mut ChaCha8Rng, width: usize, heads: usize, mlp_dim: usize) -> Self {
        Self {
            ln1: LayerNorm::new(width),
            attn: MultiHeadAttention::new(rng, width, heads),
            ln2: LayerNorm::new(width),
            fc1: Linear::new(rng, width, mlp_dim, (width as f64).powf(-0.5)),
            fc2: Linear::new(rng, mlp_dim, width, (mlp_dim as f64).powf(-0.5)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, causal: bool) -> (Array2<f64>, BlockCache) {
        let (a, ln1_cache) = self.ln1.forward(x);
        let (attn_out, attn_cache) = self.attn.forward(&a, causal);
        let x_mid = x + &attn_out;
        let (b, ln2_cache) = self.ln2.forward(&x_mid);
        let h_pre = self.fc1.forward(&b);
        let h_act = h_pre.mapv(gelu);
        let h_out = self.fc2.forward(&h_act);
        let y = &x_mid + &h_out;
        (
            y,
            BlockCache {
                ln1: ln1_cache,
                attn: attn_cache,
                x_mid,
                ln2: ln2_cache,
                ln2_out: b,
                h_pre,
                h_act,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &BlockCache,
        d_y: &Array2<f64>,
        grads: Option<&mut Block>,
    ) -> Array2<f64> {
        let (g_ln1, g_attn, g_ln2, g_fc1, g_fc2) = match grads {
            Some(g) => (
                Some(&mut g.ln1),
                Some(&mut g.attn),
                Some(&mut g.ln2),
                Some(&mut g.fc1),
                Some(&mut g.fc2),
            ),
            None => (None, None, None, None, None),
        };
        let d_h_act = self.fc2.backward(&cache.h_act, d_y, g_fc2);
        let d_h_pre = &d_h_act * &cache.h_pre.mapv(gelu_grad);
        let d_b = self.fc1.backward(&cache.ln2_out, &d_h_pre, g_fc1);
        let mut d_x_mid = self.ln2.backward(&cache.ln2, &d_b, g_ln2);
        d_x_mid += d_y;
        let d_a = self.attn.backward(&cache.attn, &d_x_mid, g_attn);
        let mut d_x = self.ln1.backward(&cache.ln1, &d_a, g_ln1);
        d_x += &d_x_mid;
        d_x
    }
}

impl Params for Block {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamRef<'a>)>) {
        self.ln1.visit(&format!("{prefix}.ln1"), out);
        self.attn.visit(&format!("{prefix}.attn"), out);
        self.ln2.visit(&format!("{prefix}.ln2"), out);
        self.fc1.visit(&format!("{prefix}.fc1"), out);
        self.fc2.visit(&format!("{prefix}.fc2"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamMut<'a>)>) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), out);
        self.attn.visit_mut(&format!("{prefix}.attn"), out);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), out);
        self.fc1.visit_mut(&format!("{prefix}.fc1"), out);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), out);
    }
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

/// Row-wise numerically stable softmax.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn randn2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std * standard_normal(rng))
}

pub fn randn1(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| std * standard_normal(rng))
}

/// Box-Muller standard normal draw.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fd_check<F>(mut f: F, x0: &mut Array2<f64>, d_x: &Array2<f64>, coords: &[(usize, usize)])
    where
        F: FnMut(&Array2<f64>) -> f64,
    {
        let h = 1e-6;
        for &(i, j) in coords {
            let orig = x0[[i, j]];
            x0[[i, j]] = orig + h;
            let fp = f(x0);
            x0[[i, j]] = orig - h;
            let fm = f(x0);
            x0[[i, j]] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = d_x[[i, j]];
            let denom = fd.abs().max(an.abs()).max(1e-10);
            assert!(
                ((fd - an) / denom).abs() < 1e-6,
                "fd {fd} vs analytic {an} at ({i},{j})"
            );
        }
    }

    #[test]
    fn layernorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ln = LayerNorm {
            gamma: randn1(&mut rng, 6, 1.0).mapv(|v| 1.0 + 0.1 * v),
            beta: randn1(&mut rng, 6, 0.1),
        };
        let mut x = randn2(&mut rng, 4, 6, 1.0);
        let w = randn2(&mut rng, 4, 6, 1.0);
        let loss = |x: &Array2<f64>| {
            let (y, _) = ln.forward(x);
            (&y * &w).sum()
        };
        let (_, cache) = ln.forward(&x);
        let d_x = ln.backward(&cache, &w, None);
        let coords: Vec<_> = (0..4).flat_map(|i| (0..6).map(move |j| (i, j))).collect();
        fd_check(loss, &mut x, &d_x, &coords);
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let attn = MultiHeadAttention::new(&mut rng, 8, 2);
        let mut x = randn2(&mut rng, 5, 8, 1.0);
        let w = randn2(&mut rng, 5, 8, 1.0);
        for causal in [false, true] {
            let loss = |x: &Array2<f64>| {
                let (y, _) = attn.forward(x, causal);
                (&y * &w).sum()
            };
            let (_, cache) = attn.forward(&x, causal);
            let d_x = attn.backward(&cache, &w, None);
            let coords: Vec<_> = (0..5).flat_map(|i| (0..8).map(move |j| (i, j))).collect();
            fd_check(loss, &mut x, &d_x, &coords);
        }
    }

    #[test]
    fn block_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let block = Block::new(&mut rng, 8, 2, 16);
        let mut x = randn2(&mut rng, 4, 8, 1.0);
        let w = randn2(&mut rng, 4, 8, 1.0);
        let loss = |x: &Array2<f64>| {
            let (y, _) = block.forward(x, false);
            (&y * &w).sum()
        };
        let (_, cache) = block.forward(&x, false);
        let d_x = block.backward(&cache, &w, None);
        let coords: Vec<_> = (0..4).flat_map(|i| (0..8).map(move |j| (i, j))).collect();
        fd_check(loss, &mut x, &d_x, &coords);
    }

    #[test]
    fn block_param_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut block = Block::new(&mut rng, 8, 2, 16);
        let x = randn2(&mut rng, 4, 8, 1.0);
        let w = randn2(&mut rng, 4, 8, 1.0);
        let (_, cache) = block.forward(&x, false);
        let mut grads = block.zeroed_clone();
        block.backward(&cache, &w, Some(&mut grads));

        // Check one coordinate from every parameter tensor.
        let h = 1e-6;
        let names: Vec<String> = {
            let mut slots = Vec::new();
            block.visit("block", &mut slots);
            slots.into_iter().map(|(n, _)| n).collect()
        };
        for name in names {
            let analytic = {
                let mut slots = Vec::new();
                grads.visit("block", &mut slots);
                match slots.into_iter().find(|(n, _)| *n == name).unwrap().1 {
                    ParamRef::A1(a) => a[0],
                    ParamRef::A2(a) => a[[0, 0]],
                }
            };
            let mut eval_at = |delta: f64| {
                {
                    let mut slots = Vec::new();
                    block.visit_mut("block", &mut slots);
                    for (n, p) in slots {
                        if n == name {
                            match p {
                                ParamMut::A1(a) => a[0] += delta,
                                ParamMut::A2(a) => a[[0, 0]] += delta,
                            }
                        }
                    }
                }
                let (y, _) = block.forward(&x, false);
                (&y * &w).sum()
            };
            let fp = eval_at(h);
            let fm = eval_at(-2.0 * h);
            eval_at(h); // restore
            let fd = (fp - fm) / (2.0 * h);
            // The key bias has a true zero gradient (a shared key offset shifts
            // every score in a row equally, which softmax ignores), so give the
            // relative check an absolute floor above the FD noise level.
            let denom = fd.abs().max(analytic.abs()).max(1e-6);
            assert!(
                ((fd - analytic) / denom).abs() < 1e-5,
                "{name}: fd {fd} vs analytic {analytic}"
            );
        }
    }
}
