//! Token-sequence denoiser: pre-norm self-attention blocks conditioned on
//! timestep and context through adaptive layer-norm modulation, with a
//! hand-written backward pass in f64.

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const NODE_DIM: usize = 5;
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ctx_dim: usize,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ctx_dim == 0 {
            return Err(Error::InvalidParameter(
                "denoiser dimensions must all be positive".into(),
            ));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::InvalidParameter(
                "model_dim must be even for sinusoidal embeddings".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub adaln_w: Array2<f64>,
    pub adaln_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub mlp_w1: Array2<f64>,
    pub mlp_b1: Array1<f64>,
    pub mlp_w2: Array2<f64>,
    pub mlp_b2: Array1<f64>,
}

/// Full parameter set. Also reused as the container for gradients and Adam
/// moment estimates, which share every shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: Arch,
    pub token_w: Array2<f64>,
    pub token_b: Array1<f64>,
    pub time_w1: Array2<f64>,
    pub time_b1: Array1<f64>,
    pub time_w2: Array2<f64>,
    pub time_b2: Array1<f64>,
    pub ctx_w: Array2<f64>,
    pub ctx_b: Array1<f64>,
    pub blocks: Vec<BlockParams>,
    pub final_mod_w: Array2<f64>,
    pub final_mod_b: Array1<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl DenoiserParams {
    /// Production initialization: attention and MLP weights are random, all
    /// modulation outputs and the output head start at zero so the network
    /// predicts zero noise before training (residual branches are gated off).
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        let mut p = Self::init_dense(arch, seed)?;
        p.final_mod_w.fill(0.0);
        p.final_mod_b.fill(0.0);
        p.head_w.fill(0.0);
        p.head_b.fill(0.0);
        for b in &mut p.blocks {
            b.adaln_w.fill(0.0);
            b.adaln_b.fill(0.0);
        }
        Ok(p)
    }

    /// Every weight random. The gated production init zeroes most gradient
    /// paths at step 0, so tests that exercise the complete backward pass
    /// use this denser variant.
    pub fn init_dense(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let d = arch.model_dim;
        let mut rng = stream_rng(seed, Stream::Generic, 100);
        let mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let scale = (2.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
        };
        let blocks = (0..arch.n_layers)
            .map(|_| BlockParams {
                adaln_w: mat(d, 6 * d, &mut rng) * 0.1,
                adaln_b: Array1::zeros(6 * d),
                wq: mat(d, d, &mut rng),
                bq: Array1::zeros(d),
                wk: mat(d, d, &mut rng),
                bk: Array1::zeros(d),
                wv: mat(d, d, &mut rng),
                bv: Array1::zeros(d),
                wo: mat(d, d, &mut rng),
                bo: Array1::zeros(d),
                mlp_w1: mat(d, 4 * d, &mut rng),
                mlp_b1: Array1::zeros(4 * d),
                mlp_w2: mat(4 * d, d, &mut rng),
                mlp_b2: Array1::zeros(d),
            })
            .collect();
        Ok(Self {
            arch,
            token_w: mat(NODE_DIM, d, &mut rng),
            token_b: Array1::zeros(d),
            time_w1: mat(d, d, &mut rng),
            time_b1: Array1::zeros(d),
            time_w2: mat(d, d, &mut rng),
            time_b2: Array1::zeros(d),
            ctx_w: mat(arch.ctx_dim, d, &mut rng),
            ctx_b: Array1::zeros(d),
            blocks,
            final_mod_w: mat(d, 2 * d, &mut rng) * 0.1,
            final_mod_b: Array1::zeros(2 * d),
            head_w: mat(d, NODE_DIM, &mut rng) * 0.1,
            head_b: Array1::zeros(NODE_DIM),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Parameter tensors in the fixed serialization order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> = vec![
            ("token_w".into(), self.token_w.view().into_dyn()),
            ("token_b".into(), self.token_b.view().into_dyn()),
            ("time_w1".into(), self.time_w1.view().into_dyn()),
            ("time_b1".into(), self.time_b1.view().into_dyn()),
            ("time_w2".into(), self.time_w2.view().into_dyn()),
            ("time_b2".into(), self.time_b2.view().into_dyn()),
            ("ctx_w".into(), self.ctx_w.view().into_dyn()),
            ("ctx_b".into(), self.ctx_b.view().into_dyn()),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}.adaln_w"), b.adaln_w.view().into_dyn()));
            out.push((format!("block{l}.adaln_b"), b.adaln_b.view().into_dyn()));
            out.push((format!("block{l}.wq"), b.wq.view().into_dyn()));
            out.push((format!("block{l}.bq"), b.bq.view().into_dyn()));
            out.push((format!("block{l}.wk"), b.wk.view().into_dyn()));
            out.push((format!("block{l}.bk"), b.bk.view().into_dyn()));
            out.push((format!("block{l}.wv"), b.wv.view().into_dyn()));
            out.push((format!("block{l}.bv"), b.bv.view().into_dyn()));
            out.push((format!("block{l}.wo"), b.wo.view().into_dyn()));
            out.push((format!("block{l}.bo"), b.bo.view().into_dyn()));
            out.push((format!("block{l}.mlp_w1"), b.mlp_w1.view().into_dyn()));
            out.push((format!("block{l}.mlp_b1"), b.mlp_b1.view().into_dyn()));
            out.push((format!("block{l}.mlp_w2"), b.mlp_w2.view().into_dyn()));
            out.push((format!("block{l}.mlp_b2"), b.mlp_b2.view().into_dyn()));
        }
        out.push(("final_mod_w".into(), self.final_mod_w.view().into_dyn()));
        out.push(("final_mod_b".into(), self.final_mod_b.view().into_dyn()));
        out.push(("head_w".into(), self.head_w.view().into_dyn()));
        out.push(("head_b".into(), self.head_b.view().into_dyn()));
        out
    }

    /// Mutable variant of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, f64>)> = vec![
            ("token_w".into(), self.token_w.view_mut().into_dyn()),
            ("token_b".into(), self.token_b.view_mut().into_dyn()),
            ("time_w1".into(), self.time_w1.view_mut().into_dyn()),
            ("time_b1".into(), self.time_b1.view_mut().into_dyn()),
            ("time_w2".into(), self.time_w2.view_mut().into_dyn()),
            ("time_b2".into(), self.time_b2.view_mut().into_dyn()),
            ("ctx_w".into(), self.ctx_w.view_mut().into_dyn()),
            ("ctx_b".into(), self.ctx_b.view_mut().into_dyn()),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{l}.adaln_w"), b.adaln_w.view_mut().into_dyn()));
            out.push((format!("block{l}.adaln_b"), b.adaln_b.view_mut().into_dyn()));
            out.push((format!("block{l}.wq"), b.wq.view_mut().into_dyn()));
            out.push((format!("block{l}.bq"), b.bq.view_mut().into_dyn()));
            out.push((format!("block{l}.wk"), b.wk.view_mut().into_dyn()));
            out.push((format!("block{l}.bk"), b.bk.view_mut().into_dyn()));
            out.push((format!("block{l}.wv"), b.wv.view_mut().into_dyn()));
            out.push((format!("block{l}.bv"), b.bv.view_mut().into_dyn()));
            out.push((format!("block{l}.wo"), b.wo.view_mut().into_dyn()));
            out.push((format!("block{l}.bo"), b.bo.view_mut().into_dyn()));
            out.push((format!("block{l}.mlp_w1"), b.mlp_w1.view_mut().into_dyn()));
            out.push((format!("block{l}.mlp_b1"), b.mlp_b1.view_mut().into_dyn()));
            out.push((format!("block{l}.mlp_w2"), b.mlp_w2.view_mut().into_dyn()));
            out.push((format!("block{l}.mlp_b2"), b.mlp_b2.view_mut().into_dyn()));
        }
        out.push(("final_mod_w".into(), self.final_mod_w.view_mut().into_dyn()));
        out.push(("final_mod_b".into(), self.final_mod_b.view_mut().into_dyn()));
        out.push(("head_w".into(), self.head_w.view_mut().into_dyn()));
        out.push(("head_b".into(), self.head_b.view_mut().into_dyn()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Sinusoidal embedding of a scalar position into `dim` features.
pub fn sinusoidal(value: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out[i] = (value * freq).sin();
        out[half + i] = (value * freq).cos();
    }
    out
}

/// Standard positional embedding table for `h` tokens.
pub fn positional_embedding(h: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((h, dim));
    for j in 0..h {
        out.row_mut(j).assign(&sinusoidal(j as f64, dim));
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Row-wise layer norm without an affine transform. The normalized output
/// is the cache's `xhat`.
fn layer_norm(x: &Array2<f64>) -> LnCache {
    let d = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).unwrap();
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, mut row) in xhat.axis_iter_mut(Axis(0)).enumerate() {
        row.mapv_inplace(|v| v - mean[i]);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        row.mapv_inplace(|v| v * is);
    }
    LnCache { xhat, inv_std }
}

fn layer_norm_backward(dy: &Array2<f64>, cache: &LnCache) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let mean_dy = dyr.sum() / d;
        let mean_dyxh = dyr.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        let is = cache.inv_std[i];
        for j in 0..dy.ncols() {
            dx[(i, j)] = is * (dyr[j] - mean_dy - xh[j] * mean_dyxh);
        }
    }
    dx
}

struct BlockCache {
    ln1: LnCache,
    m1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    att_concat: Array2<f64>,
    att_out: Array2<f64>,
    ln2: LnCache,
    m2: Array2<f64>,
    mlp_pre: Array2<f64>,
    mlp_act: Array2<f64>,
    mlp_out: Array2<f64>,
    mods: Array1<f64>,
}

pub struct Cache {
    x_raw: Array2<f64>,
    t_sin: Array1<f64>,
    t_pre: Array1<f64>,
    t_act: Array1<f64>,
    ctx_vec: Array1<f64>,
    cond: Array1<f64>,
    silu_cond: Array1<f64>,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    h_final: Array2<f64>,
    final_mods: Array1<f64>,
}

/// Modulate: y = x · (1 + scale) + shift, broadcasting over rows.
fn modulate(x: &Array2<f64>, shift: &Array1<f64>, scale: &Array1<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.axis_iter_mut(Axis(0)) {
        for j in 0..row.len() {
            row[j] = row[j] * (1.0 + scale[j]) + shift[j];
        }
    }
    y
}

/// Full forward pass for one trajectory. `pos` lets callers substitute the
/// positional table; production code passes `positional_embedding(h, d)`.
pub fn forward_with_pos(
    p: &DenoiserParams,
    x: &Array2<f64>,
    pos: &Array2<f64>,
    t: usize,
    ctx: &Array1<f64>,
) -> Result<(Array2<f64>, Cache)> {
    let d = p.arch.model_dim;
    let heads = p.arch.n_heads;
    let hd = d / heads;
    let h = x.nrows();
    assert_eq!(x.ncols(), NODE_DIM, "expected H x 5 input");
    assert_eq!(ctx.len(), p.arch.ctx_dim, "context length mismatch");
    assert_eq!(pos.dim(), (h, d), "positional table shape mismatch");

    let x_tok = x.dot(&p.token_w) + &p.token_b + pos;

    let t_sin = sinusoidal(t as f64, d);
    let t_pre = t_sin.dot(&p.time_w1) + &p.time_b1;
    let t_act = t_pre.mapv(silu);
    let t_emb = t_act.dot(&p.time_w2) + &p.time_b2;
    let ctx_emb = ctx.dot(&p.ctx_w) + &p.ctx_b;
    let cond = &t_emb + &ctx_emb;
    let silu_cond = cond.mapv(silu);

    let mut cur = x_tok;
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for (l, bp) in p.blocks.iter().enumerate() {
        let mods = silu_cond.dot(&bp.adaln_w) + &bp.adaln_b;
        let chunk = |i: usize| mods.slice(s![i * d..(i + 1) * d]).to_owned();
        let (sh1, sc1, g1) = (chunk(0), chunk(1), chunk(2));
        let (sh2, sc2, g2) = (chunk(3), chunk(4), chunk(5));

        let x_in = cur.clone();
        let ln1 = layer_norm(&x_in);
        let m1 = modulate(&ln1.xhat, &sh1, &sc1);

        let q = m1.dot(&bp.wq) + &bp.bq;
        let k = m1.dot(&bp.wk) + &bp.bk;
        let v = m1.dot(&bp.wv) + &bp.bv;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut att_concat = Array2::zeros((h, d));
        let mut probs = Vec::with_capacity(heads);
        for hh in 0..heads {
            let cols = s![.., hh * hd..(hh + 1) * hd];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|v| v * scale);
            // Row softmax.
            for mut row in scores.axis_iter_mut(Axis(0)) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - m).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            att_concat.slice_mut(cols).assign(&scores.dot(&vh));
            probs.push(scores);
        }
        let att_out = att_concat.dot(&bp.wo) + &bp.bo;
        let mut x_mid = x_in.clone();
        for (mut row, arow) in x_mid.axis_iter_mut(Axis(0)).zip(att_out.axis_iter(Axis(0))) {
            for j in 0..d {
                row[j] += g1[j] * arow[j];
            }
        }

        let ln2 = layer_norm(&x_mid);
        let m2 = modulate(&ln2.xhat, &sh2, &sc2);
        let mlp_pre = m2.dot(&bp.mlp_w1) + &bp.mlp_b1;
        let mlp_act = mlp_pre.mapv(gelu);
        let mlp_out = mlp_act.dot(&bp.mlp_w2) + &bp.mlp_b2;
        let mut x_out = x_mid.clone();
        for (mut row, mrow) in x_out.axis_iter_mut(Axis(0)).zip(mlp_out.axis_iter(Axis(0))) {
            for j in 0..d {
                row[j] += g2[j] * mrow[j];
            }
        }
        if x_out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: l + 1 });
        }

        blocks.push(BlockCache {
            ln1,
            m1,
            q,
            k,
            v,
            probs,
            att_concat,
            att_out,
            ln2,
            m2,
            mlp_pre,
            mlp_act,
            mlp_out,
            mods,
        });
        cur = x_out;
    }

    let final_mods = silu_cond.dot(&p.final_mod_w) + &p.final_mod_b;
    let fd = p.arch.model_dim;
    let sh_f = final_mods.slice(s![0..fd]).to_owned();
    let sc_f = final_mods.slice(s![fd..2 * fd]).to_owned();
    let ln_f = layer_norm(&cur);
    let h_final = modulate(&ln_f.xhat, &sh_f, &sc_f);
    let out = h_final.dot(&p.head_w) + &p.head_b;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation {
            layer: p.blocks.len() + 1,
        });
    }

    Ok((
        out,
        Cache {
            x_raw: x.clone(),
            t_sin,
            t_pre,
            t_act,
            ctx_vec: ctx.clone(),
            cond,
            silu_cond,
            blocks,
            ln_f,
            h_final,
            final_mods,
        },
    ))
}

pub fn forward(
    p: &DenoiserParams,
    x: &Array2<f64>,
    t: usize,
    ctx: &Array1<f64>,
) -> Result<(Array2<f64>, Cache)> {
    let pos = positional_embedding(x.nrows(), p.arch.model_dim);
    forward_with_pos(p, x, &pos, t, ctx)
}

/// Backpropagates `dout` through the cached forward pass, accumulating
/// parameter gradients into `grads`. Returns the gradient at the input.
pub fn backward(
    p: &DenoiserParams,
    cache: &Cache,
    dout: &Array2<f64>,
    grads: &mut DenoiserParams,
) -> Array2<f64> {
    let d = p.arch.model_dim;
    let heads = p.arch.n_heads;
    let hd = d / heads;
    let h = dout.nrows();

    let mut d_silu_cond = Array1::<f64>::zeros(d);

    // Output head.
    grads.head_w += &cache.h_final.t().dot(dout);
    grads.head_b += &dout.sum_axis(Axis(0));
    let dh_final = dout.dot(&p.head_w.t());

    // Final modulation (shift gradients need no cached shift values).
    let sc_f = cache.final_mods.slice(s![d..2 * d]).to_owned();
    let lnf_out = &cache.ln_f.xhat;
    let mut d_lnf = Array2::zeros((h, d));
    let mut d_final_mods = Array1::<f64>::zeros(2 * d);
    for i in 0..h {
        for j in 0..d {
            let g = dh_final[(i, j)];
            d_lnf[(i, j)] = g * (1.0 + sc_f[j]);
            d_final_mods[j] += g;
            d_final_mods[d + j] += g * lnf_out[(i, j)];
        }
    }
    grads.final_mod_w += &outer(&cache.silu_cond, &d_final_mods);
    grads.final_mod_b += &d_final_mods;
    d_silu_cond += &p.final_mod_w.dot(&d_final_mods);
    let mut dx = layer_norm_backward(&d_lnf, &cache.ln_f);

    for (l, bp) in p.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[l];
        let gb = &mut grads.blocks[l];
        let chunk = |v: &Array1<f64>, i: usize| v.slice(s![i * d..(i + 1) * d]).to_owned();
        let (sc1, g1) = (chunk(&bc.mods, 1), chunk(&bc.mods, 2));
        let (sc2, g2) = (chunk(&bc.mods, 4), chunk(&bc.mods, 5));
        let mut d_mods = Array1::<f64>::zeros(6 * d);

        // x_out = x_mid + g2 .* mlp_out
        let mut d_mlp_out = Array2::zeros((h, d));
        for i in 0..h {
            for j in 0..d {
                d_mlp_out[(i, j)] = dx[(i, j)] * g2[j];
                d_mods[5 * d + j] += dx[(i, j)] * bc.mlp_out[(i, j)];
            }
        }
        // MLP.
        gb.mlp_w2 += &bc.mlp_act.t().dot(&d_mlp_out);
        gb.mlp_b2 += &d_mlp_out.sum_axis(Axis(0));
        let mut d_act = d_mlp_out.dot(&bp.mlp_w2.t());
        for (da, pre) in d_act.iter_mut().zip(bc.mlp_pre.iter()) {
            *da *= gelu_grad(*pre);
        }
        gb.mlp_w1 += &bc.m2.t().dot(&d_act);
        gb.mlp_b1 += &d_act.sum_axis(Axis(0));
        let d_m2 = d_act.dot(&bp.mlp_w1.t());

        // m2 = ln2_out * (1 + sc2) + sh2
        let ln2_out = &bc.ln2.xhat;
        let mut d_ln2 = Array2::zeros((h, d));
        for i in 0..h {
            for j in 0..d {
                let g = d_m2[(i, j)];
                d_ln2[(i, j)] = g * (1.0 + sc2[j]);
                d_mods[3 * d + j] += g;
                d_mods[4 * d + j] += g * ln2_out[(i, j)];
            }
        }
        let mut d_x_mid = layer_norm_backward(&d_ln2, &bc.ln2);
        d_x_mid += &dx;

        // x_mid = x_in + g1 .* att_out
        let mut d_att_out = Array2::zeros((h, d));
        for i in 0..h {
            for j in 0..d {
                d_att_out[(i, j)] = d_x_mid[(i, j)] * g1[j];
                d_mods[2 * d + j] += d_x_mid[(i, j)] * bc.att_out[(i, j)];
            }
        }

        // Attention projection.
        gb.wo += &bc.att_concat.t().dot(&d_att_out);
        gb.bo += &d_att_out.sum_axis(Axis(0));
        let d_att_concat = d_att_out.dot(&bp.wo.t());

        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Array2::zeros((h, d));
        let mut dk = Array2::zeros((h, d));
        let mut dv = Array2::zeros((h, d));
        for hh in 0..heads {
            let cols = s![.., hh * hd..(hh + 1) * hd];
            let probs = &bc.probs[hh];
            let d_oh = d_att_concat.slice(cols);
            let vh = bc.v.slice(cols);
            let qh = bc.q.slice(cols);
            let kh = bc.k.slice(cols);
            let d_probs = d_oh.dot(&vh.t());
            dv.slice_mut(cols).assign(&probs.t().dot(&d_oh));
            // Softmax backward per row.
            let mut d_scores = Array2::zeros((h, h));
            for i in 0..h {
                let pr = probs.row(i);
                let dp = d_probs.row(i);
                let dot = pr.iter().zip(dp.iter()).map(|(a, b)| a * b).sum::<f64>();
                for j in 0..h {
                    d_scores[(i, j)] = pr[j] * (dp[j] - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&d_scores.dot(&kh));
            dk.slice_mut(cols).assign(&d_scores.t().dot(&qh));
        }
        gb.wq += &bc.m1.t().dot(&dq);
        gb.bq += &dq.sum_axis(Axis(0));
        gb.wk += &bc.m1.t().dot(&dk);
        gb.bk += &dk.sum_axis(Axis(0));
        gb.wv += &bc.m1.t().dot(&dv);
        gb.bv += &dv.sum_axis(Axis(0));
        let d_m1 = dq.dot(&bp.wq.t()) + dk.dot(&bp.wk.t()) + dv.dot(&bp.wv.t());

        // m1 = ln1_out * (1 + sc1) + sh1
        let ln1_out = &bc.ln1.xhat;
        let mut d_ln1 = Array2::zeros((h, d));
        for i in 0..h {
            for j in 0..d {
                let g = d_m1[(i, j)];
                d_ln1[(i, j)] = g * (1.0 + sc1[j]);
                d_mods[j] += g;
                d_mods[d + j] += g * ln1_out[(i, j)];
            }
        }
        let d_x_in = layer_norm_backward(&d_ln1, &bc.ln1);
        dx = d_x_mid + d_x_in;

        gb.adaln_w += &outer(&cache.silu_cond, &d_mods);
        gb.adaln_b += &d_mods;
        d_silu_cond += &bp.adaln_w.dot(&d_mods);
    }

    // Token embedding: x_tok = x . token_w + token_b + pos.
    grads.token_w += &cache.x_raw.t().dot(&dx);
    grads.token_b += &dx.sum_axis(Axis(0));
    let d_input = dx.dot(&p.token_w.t());

    // Conditioning vector.
    let mut d_cond = Array1::<f64>::zeros(d);
    for j in 0..d {
        d_cond[j] = d_silu_cond[j] * silu_grad(cache.cond[j]);
    }
    // cond = t_emb + ctx_emb.
    grads.ctx_w += &outer(&cache.ctx_vec, &d_cond);
    grads.ctx_b += &d_cond;
    grads.time_w2 += &outer(&cache.t_act, &d_cond);
    grads.time_b2 += &d_cond;
    let mut d_t_act = p.time_w2.dot(&d_cond);
    for j in 0..d {
        d_t_act[j] *= silu_grad(cache.t_pre[j]);
    }
    grads.time_w1 += &outer(&cache.t_sin, &d_t_act);
    grads.time_b1 += &d_t_act;

    d_input
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[(i, j)] = a[i] * b[j];
        }
    }
    out
}
