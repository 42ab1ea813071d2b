//! Transformer building blocks with hand-written backward passes.
//!
//! Every `forward` returns the activations its `backward` needs; `backward`
//! accumulates parameter gradients and returns the gradient w.r.t. its input.

use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::params::{normal, xavier_uniform, Gradients, ParamId, ParameterStore};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.register(format!("{name}.weight"), xavier_uniform(rng, fan_in, fan_out), true);
        let b = store.register(format!("{name}.bias"), Array2::zeros((1, fan_out)), false);
        Linear { w, b }
    }

    pub fn forward(&self, p: &ParameterStore, x: &Array2<f64>) -> Array2<f64> {
        x.dot(p.get(self.w)) + p.get(self.b)
    }

    pub fn backward(&self, p: &ParameterStore, g: &mut Gradients, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        *g.get_mut(self.w) += &x.t().dot(dy);
        *g.get_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&p.get(self.w).t())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.register(format!("{name}.weight"), Array2::ones((1, dim)), false),
            beta: store.register(format!("{name}.bias"), Array2::zeros((1, dim)), false),
        }
    }

    pub fn forward(&self, p: &ParameterStore, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let y = &xhat * p.get(self.gamma) + p.get(self.beta);
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &ParameterStore, g: &mut Gradients, cache: &LnCache, dy: &Array2<f64>) -> Array2<f64> {
        *g.get_mut(self.gamma) += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        *g.get_mut(self.beta) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * p.get(self.gamma);
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.dim());
        for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
            let dh = dxhat.row(r);
            let xh = cache.xhat.row(r);
            let mean_dh = dh.sum() / d;
            let mean_dh_xh = dh.dot(&xh) / d;
            let is = cache.inv_std[r];
            for c in 0..out.len() {
                out[c] = is * (dh[c] - mean_dh - xh[c] * mean_dh_xh);
            }
        }
        dx
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

pub struct AttnCache {
    x: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Attention {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, p: &ParameterStore, x: &Array2<f64>) -> (Array2<f64>, AttnCache) {
        let (t, d) = x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(p, x);
        let mut ctx = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut a = q.dot(&k.t()) * scale;
            for mut row in a.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
                row.mapv_inplace(|v| (v - m).exp());
                let z = row.sum();
                row.mapv_inplace(|v| v / z);
            }
            ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&a.dot(&v));
            probs.push(a);
        }
        let y = self.proj.forward(p, &ctx);
        (
            y,
            AttnCache {
                x: x.clone(),
                qkv,
                probs,
                ctx,
            },
        )
    }

    pub fn backward(&self, p: &ParameterStore, g: &mut Gradients, cache: &AttnCache, dy: &Array2<f64>) -> Array2<f64> {
        let (t, d) = cache.x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dctx = self.proj.backward(p, g, &cache.ctx, dy);
        let mut dqkv = Array2::zeros((t, 3 * d));
        for h in 0..self.heads {
            let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = cache.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let a = &cache.probs[h];
            let dout = dctx.slice(s![.., h * dh..(h + 1) * dh]);
            let da = dout.dot(&v.t());
            let dv = a.t().dot(&dout);
            let mut ds = Array2::zeros((t, t));
            for r in 0..t {
                let dot: f64 = da.row(r).dot(&a.row(r));
                for c in 0..t {
                    ds[[r, c]] = a[[r, c]] * (da[[r, c]] - dot) * scale;
                }
            }
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh])
                .assign(&ds.t().dot(&q));
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
        }
        self.qkv.backward(p, g, &cache.x, &dqkv)
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `+ mlp(ln2(.))`.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let ln1 = LayerNorm::new(store, &format!("{name}.norm1"), dim);
        let attn = Attention::new(store, &format!("{name}.attn"), dim, heads, rng);
        let ln2 = LayerNorm::new(store, &format!("{name}.norm2"), dim);
        let fc1 = Linear::new(store, &format!("{name}.mlp.fc1"), dim, dim * mlp_ratio, rng);
        let fc2 = Linear::new(store, &format!("{name}.mlp.fc2"), dim * mlp_ratio, dim, rng);
        Block {
            ln1,
            attn,
            ln2,
            fc1,
            fc2,
        }
    }

    pub fn forward(&self, p: &ParameterStore, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (h1, ln1) = self.ln1.forward(p, x);
        let (a, attn) = self.attn.forward(p, &h1);
        let x2 = x + &a;
        let (h2, ln2) = self.ln2.forward(p, &x2);
        let pre_act = self.fc1.forward(p, &h2);
        let act = pre_act.mapv(gelu);
        let out = &x2 + &self.fc2.forward(p, &act);
        (
            out,
            BlockCache {
                ln1,
                attn,
                ln2,
                h2,
                pre_act,
                act,
            },
        )
    }

    pub fn backward(&self, p: &ParameterStore, g: &mut Gradients, cache: &BlockCache, dy: &Array2<f64>) -> Array2<f64> {
        let dact = self.fc2.backward(p, g, &cache.act, dy);
        let dpre = dact * &cache.pre_act.mapv(gelu_grad);
        let dh2 = self.fc1.backward(p, g, &cache.h2, &dpre);
        let dx2 = dy + &self.ln2.backward(p, g, &cache.ln2, &dh2);
        let dh1 = self.attn.backward(p, g, &cache.attn, &dx2);
        &dx2 + &self.ln1.backward(p, g, &cache.ln1, &dh1)
    }
}

/// A learnable vector initialized from N(0, 0.02^2).
pub fn token<R: Rng + ?Sized>(store: &mut ParameterStore, name: &str, rows: usize, dim: usize, rng: &mut R) -> ParamId {
    store.register(name, normal(rng, rows, dim, 0.02), false)
}
