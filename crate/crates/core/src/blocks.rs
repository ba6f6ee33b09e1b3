//! Standard Transformer building blocks: scaled dot-product attention,
//! multi-head attention, the attention block, the feed-forward block and the
//! single-stream encoder stack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mat::Mat;
use crate::params::ParamStore;

/// Layer-norm epsilon used throughout.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

/// Projections of one multi-head attention. Per-head `d × d_a` matrices are
/// stored side by side, so `wq` is `d × d` and head `h` owns columns
/// `h·d_a .. (h+1)·d_a`.
#[derive(Clone, Copy, Debug)]
pub struct MhaParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FfbParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub norm: NormParams,
    pub activation: Activation,
}

/// One standard layer: attention block followed by feed-forward block.
#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub attn: MhaParams,
    pub attn_norm: NormParams,
    pub ffb: FfbParams,
}

/// Head width, rejecting widths the heads do not divide.
pub fn head_dim(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::HeadDivisibility { d, heads });
    }
    Ok(d / heads)
}

impl MhaParams {
    /// Loads `{prefix}.{q,k,v,o}.w` and the `q`, `v`, `o` biases. The key
    /// projection has no bias.
    pub fn load(g: &mut Graph, prefix: &str, heads: usize) -> Result<Self> {
        let p = MhaParams {
            wq: g.param(&format!("{prefix}.q.w"))?,
            bq: g.param(&format!("{prefix}.q.b"))?,
            wk: g.param(&format!("{prefix}.k.w"))?,
            wv: g.param(&format!("{prefix}.v.w"))?,
            bv: g.param(&format!("{prefix}.v.b"))?,
            wo: g.param(&format!("{prefix}.o.w"))?,
            bo: g.param(&format!("{prefix}.o.b"))?,
            heads,
        };
        let (d, d2) = g.shape(p.wq);
        if d != d2 {
            return Err(Error::ShapeMismatch(format!("{prefix}.q.w is {d}x{d2}")));
        }
        head_dim(d, heads)?;
        Ok(p)
    }
}

impl NormParams {
    pub fn load(g: &mut Graph, prefix: &str) -> Result<Self> {
        Ok(NormParams {
            gain: g.param(&format!("{prefix}.gain"))?,
            bias: g.param(&format!("{prefix}.bias"))?,
        })
    }
}

impl FfbParams {
    /// Loads `{prefix}.ffn.{w1,b1,w2,b2}` and `{prefix}.ffn_ln`.
    pub fn load(g: &mut Graph, prefix: &str, activation: Activation) -> Result<Self> {
        Ok(FfbParams {
            w1: g.param(&format!("{prefix}.ffn.w1"))?,
            b1: g.param(&format!("{prefix}.ffn.b1"))?,
            w2: g.param(&format!("{prefix}.ffn.w2"))?,
            b2: g.param(&format!("{prefix}.ffn.b2"))?,
            norm: NormParams::load(g, &format!("{prefix}.ffn_ln"))?,
            activation,
        })
    }
}

impl LayerParams {
    /// Loads a full layer stored under a stream prefix such as `sub0.l`.
    pub fn load(g: &mut Graph, prefix: &str, heads: usize, activation: Activation) -> Result<Self> {
        Ok(LayerParams {
            attn: MhaParams::load(g, prefix, heads)?,
            attn_norm: NormParams::load(g, &format!("{prefix}.attn_ln"))?,
            ffb: FfbParams::load(g, prefix, activation)?,
        })
    }
}

/// `ω(S) V` for precomputed scores `S`, with `ω` scaled by `sqrt(d_q)`.
pub fn att_from_scores(g: &mut Graph, s: Var, v: Var, d_q: usize) -> Result<Var> {
    if g.shape(s).1 != g.shape(v).0 {
        return Err(Error::ShapeMismatch(format!(
            "{} keys but {} values",
            g.shape(s).1,
            g.shape(v).0
        )));
    }
    let p = g.softmax(s, 1.0 / (d_q as f64).sqrt())?;
    g.matmul(p, v)
}

/// Scaled dot-product attention `ω(Q Kᵀ) V`.
pub fn att(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let d_q = g.shape(q).1;
    if g.shape(k).1 != d_q {
        return Err(Error::ShapeMismatch(format!(
            "query width {d_q} vs key width {}",
            g.shape(k).1
        )));
    }
    if g.shape(k).0 != g.shape(v).0 {
        return Err(Error::ShapeMismatch(format!(
            "{} keys but {} values",
            g.shape(k).0,
            g.shape(v).0
        )));
    }
    let s = g.matmul_t(q, k)?;
    att_from_scores(g, s, v, d_q)
}

/// Splits the columns of `x` into `heads` equal blocks.
pub fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Vec<Var>> {
    let d = g.shape(x).1;
    let da = head_dim(d, heads)?;
    (0..heads).map(|h| g.slice_cols(x, h * da, da)).collect()
}

/// Multi-head attention: per-head `Att(Q W_Q, K W_K, V W_V)`, concatenated and
/// projected by `W_O`.
pub fn mha(g: &mut Graph, q: Var, k: Var, v: Var, p: &MhaParams) -> Result<Var> {
    let qp = g.affine(q, p.wq, p.bq)?;
    let kp = g.matmul(k, p.wk)?;
    let vp = g.affine(v, p.wv, p.bv)?;
    let qh = split_heads(g, qp, p.heads)?;
    let kh = split_heads(g, kp, p.heads)?;
    let vh = split_heads(g, vp, p.heads)?;
    let outs = (0..p.heads)
        .map(|h| att(g, qh[h], kh[h], vh[h]))
        .collect::<Result<Vec<_>>>()?;
    let cat = g.concat_cols(&outs)?;
    g.affine(cat, p.wo, p.bo)
}

/// `LN(X + MHA(X, Y, Y))`.
pub fn mab(g: &mut Graph, x: Var, y: Var, p: &MhaParams, norm: &NormParams) -> Result<Var> {
    let m = mha(g, x, y, y, p)?;
    let r = g.add(x, m)?;
    g.layer_norm(r, norm.gain, norm.bias, LN_EPS)
}

/// Residual + layer norm around an already computed branch output.
pub fn add_norm(g: &mut Graph, x: Var, branch: Var, norm: &NormParams) -> Result<Var> {
    let r = g.add(x, branch)?;
    g.layer_norm(r, norm.gain, norm.bias, LN_EPS)
}

/// The feed-forward branch `act(M W_1 + b_1) W_2 + b_2` without residual.
pub fn ffb_branch(g: &mut Graph, m: Var, p: &FfbParams) -> Result<Var> {
    let h = g.affine(m, p.w1, p.b1)?;
    let h = match p.activation {
        Activation::Relu => g.relu(h),
        Activation::Gelu => g.gelu(h),
    };
    g.affine(h, p.w2, p.b2)
}

/// `LN(M + act(M W_1) W_2)`.
pub fn ffb(g: &mut Graph, m: Var, p: &FfbParams) -> Result<Var> {
    let b = ffb_branch(g, m, p)?;
    add_norm(g, m, b, &p.norm)
}

/// One self-attention layer `FFB(MAB(X, X))`.
pub fn transformer_layer(g: &mut Graph, x: Var, p: &LayerParams) -> Result<Var> {
    let m = mab(g, x, x, &p.attn, &p.attn_norm)?;
    ffb(g, m, &p.ffb)
}

/// `f_L ∘ … ∘ f_1 (X)`.
pub fn encode_stack(g: &mut Graph, x: Var, layers: &[LayerParams]) -> Result<Var> {
    layers
        .iter()
        .try_fold(x, |h, layer| transformer_layer(g, h, layer))
}

/// [`att`] on plain matrices.
pub fn att_mat(q: &Mat, k: &Mat, v: &Mat) -> Result<Mat> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (q, k, v) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let out = att(&mut g, q, k, v)?;
    Ok(g.value(out).clone())
}
