//! The gated bimodal layer.
//!
//! A sublayer carries two streams, language (`L`) and vision (`V`). Four
//! binary gates decide which blocks of the joint score matrix
//!
//! ```text
//!     | S_LL  S_LV |
//! S = |            |
//!     | S_VL  S_VV |
//! ```
//!
//! take part in the row softmax (`1` = blocked), and tie flags decide which
//! parameter groups the two streams share. Open gates with full tying give
//! the single-stream layer over `[X_L ∥ X_V]`; blocking the diagonal gives the
//! dual-stream inter-modal layer; blocking the anti-diagonal gives the
//! intra-modal layer.

use serde::{Deserialize, Serialize};

use crate::blocks::{add_norm, att_from_scores, ffb_branch, head_dim, Activation, FfbParams, MhaParams, NormParams};
use crate::config::ArchSpec;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mat::Mat;
use crate::params::{Init, ParamDecl, ParamGroup};
use crate::rng::Rng;

/// Interaction gates; `true` blocks the corresponding score block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GateSet {
    pub ll: bool,
    pub lv: bool,
    pub vl: bool,
    pub vv: bool,
}

impl GateSet {
    /// Every interaction permitted (single-stream attention).
    pub const OPEN: GateSet = GateSet {
        ll: false,
        lv: false,
        vl: false,
        vv: false,
    };
    /// Only cross-modal interactions (inter-modal layer).
    pub const INTER: GateSet = GateSet {
        ll: true,
        lv: false,
        vl: false,
        vv: true,
    };
    /// Only within-modality interactions (intra-modal layer).
    pub const INTRA: GateSet = GateSet {
        ll: false,
        lv: true,
        vl: true,
        vv: false,
    };

    pub fn from_bits(bits: [u8; 4]) -> Self {
        GateSet {
            ll: bits[0] != 0,
            lv: bits[1] != 0,
            vl: bits[2] != 0,
            vv: bits[3] != 0,
        }
    }

    pub fn bits(&self) -> [u8; 4] {
        [self.ll, self.lv, self.vl, self.vv].map(u8::from)
    }

    /// All sixteen gate combinations.
    pub fn all() -> impl Iterator<Item = GateSet> {
        (0u8..16).map(|m| GateSet::from_bits([m & 1, (m >> 1) & 1, (m >> 2) & 1, (m >> 3) & 1]))
    }

    /// Rejects configurations that leave a row block with nothing to attend to.
    pub fn validate(&self, sublayer: Option<usize>) -> Result<()> {
        if self.ll && self.lv {
            return Err(Error::InvalidGateConfig {
                sublayer,
                reason: "language rows are fully masked (gamma_LL = gamma_LV = 1)".into(),
            });
        }
        if self.vl && self.vv {
            return Err(Error::InvalidGateConfig {
                sublayer,
                reason: "vision rows are fully masked (gamma_VL = gamma_VV = 1)".into(),
            });
        }
        Ok(())
    }
}

/// Parameter-sharing flags; `true` makes the vision stream reuse the language
/// stream's tensors for that group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TieSet {
    pub q: bool,
    pub k: bool,
    pub v: bool,
    pub o: bool,
    pub ff: bool,
    pub ln: bool,
}

impl TieSet {
    pub const NONE: TieSet = TieSet {
        q: false,
        k: false,
        v: false,
        o: false,
        ff: false,
        ln: false,
    };
    pub const ALL: TieSet = TieSet {
        q: true,
        k: true,
        v: true,
        o: true,
        ff: true,
        ln: true,
    };
    /// Shared attention projections only.
    pub const ATTENTION: TieSet = TieSet {
        q: true,
        k: true,
        v: true,
        o: true,
        ff: false,
        ln: false,
    };

    pub fn from_bits(bits: [u8; 6]) -> Self {
        TieSet {
            q: bits[0] != 0,
            k: bits[1] != 0,
            v: bits[2] != 0,
            o: bits[3] != 0,
            ff: bits[4] != 0,
            ln: bits[5] != 0,
        }
    }

    pub fn bits(&self) -> [u8; 6] {
        [self.q, self.k, self.v, self.o, self.ff, self.ln].map(u8::from)
    }
}

/// Which streams a sublayer updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Active {
    #[default]
    #[serde(rename = "both")]
    Both,
    #[serde(rename = "l")]
    Language,
    #[serde(rename = "v")]
    Vision,
}

impl Active {
    pub fn language(self) -> bool {
        matches!(self, Active::Both | Active::Language)
    }

    pub fn vision(self) -> bool {
        matches!(self, Active::Both | Active::Vision)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SublayerSpec {
    pub gates: GateSet,
    pub ties: TieSet,
    pub ffb: bool,
    pub active: Active,
}

impl SublayerSpec {
    /// Open gates, full tying, feed-forward block: one single-stream layer.
    pub const SINGLE: SublayerSpec = SublayerSpec {
        gates: GateSet::OPEN,
        ties: TieSet::ALL,
        ffb: true,
        active: Active::Both,
    };

    pub fn validate(&self, index: usize) -> Result<()> {
        self.gates.validate(Some(index))?;
        match self.active {
            Active::Language if !self.gates.lv => Err(Error::InvalidGateConfig {
                sublayer: Some(index),
                reason: "a language-only sublayer must block language-to-vision attention".into(),
            }),
            Active::Vision if !self.gates.vl => Err(Error::InvalidGateConfig {
                sublayer: Some(index),
                reason: "a vision-only sublayer must block vision-to-language attention".into(),
            }),
            _ => Ok(()),
        }
    }

    /// Parameter-name prefix of one stream, e.g. `sub3.v`.
    pub fn prefix(index: usize, stream: char) -> String {
        format!("sub{index}.{stream}")
    }

    fn streams(&self) -> Vec<char> {
        let mut s = Vec::with_capacity(2);
        if self.active.language() {
            s.push('l');
        }
        if self.active.vision() {
            s.push('v');
        }
        s
    }

    /// Tensors of sublayer `index` before aliasing.
    pub fn param_decls(&self, index: usize, d: usize, d_ff: usize) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        for s in self.streams() {
            let pre = Self::prefix(index, s);
            let att = ParamGroup::Attention;
            for t in ["q", "k", "v", "o"] {
                out.push(ParamDecl::new(format!("{pre}.{t}.w"), d, d, Init::Normal, att));
                if t != "k" {
                    out.push(ParamDecl::new(format!("{pre}.{t}.b"), 1, d, Init::Zeros, att));
                }
            }
            out.push(ParamDecl::new(format!("{pre}.attn_ln.gain"), 1, d, Init::Ones, att));
            out.push(ParamDecl::new(format!("{pre}.attn_ln.bias"), 1, d, Init::Zeros, att));
            if self.ffb {
                let ff = ParamGroup::Ffb;
                out.push(ParamDecl::new(format!("{pre}.ffn.w1"), d, d_ff, Init::Normal, ff));
                out.push(ParamDecl::new(format!("{pre}.ffn.b1"), 1, d_ff, Init::Zeros, ff));
                out.push(ParamDecl::new(format!("{pre}.ffn.w2"), d_ff, d, Init::Normal, ff));
                out.push(ParamDecl::new(format!("{pre}.ffn.b2"), 1, d, Init::Zeros, ff));
                out.push(ParamDecl::new(format!("{pre}.ffn_ln.gain"), 1, d, Init::Ones, ff));
                out.push(ParamDecl::new(format!("{pre}.ffn_ln.bias"), 1, d, Init::Zeros, ff));
            }
        }
        out
    }

    /// `(alias, canonical)` pairs: tied vision tensors point at language ones.
    pub fn param_aliases(&self, index: usize) -> Vec<(String, String)> {
        if self.active != Active::Both {
            return Vec::new();
        }
        let l = Self::prefix(index, 'l');
        let v = Self::prefix(index, 'v');
        let t = self.ties;
        let mut suffixes: Vec<&str> = Vec::new();
        for (flag, names) in [(t.q, &["q.w", "q.b"][..]), (t.k, &["k.w"]), (t.v, &["v.w", "v.b"]), (t.o, &["o.w", "o.b"])] {
            if flag {
                suffixes.extend(names);
            }
        }
        if t.ln {
            suffixes.extend(["attn_ln.gain", "attn_ln.bias"]);
            if self.ffb {
                suffixes.extend(["ffn_ln.gain", "ffn_ln.bias"]);
            }
        }
        if t.ff && self.ffb {
            suffixes.extend(["ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"]);
        }
        suffixes
            .into_iter()
            .map(|s| (format!("{v}.{s}"), format!("{l}.{s}")))
            .collect()
    }
}

/// How blocked score blocks are excluded from the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskMode {
    /// Build the joint score matrix and overwrite blocked blocks with the
    /// sentinel score.
    Additive,
    /// Never compute blocked blocks; each row block attends over the
    /// concatenation of its permitted key blocks.
    #[default]
    Skip,
}

/// Inverted dropout with its own random stream.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    rng: Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: Rng) -> Self {
        Dropout { rate, rng }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let (r, c) = g.shape(x);
        let keep = 1.0 / (1.0 - self.rate);
        let mask = Mat::from_fn(r, c, |_, _| if self.rng.bernoulli(self.rate) { 0.0 } else { keep });
        g.mul_const(x, mask)
    }
}

/// Per-forward options.
#[derive(Clone, Debug, Default)]
pub struct ForwardCtx {
    pub mask_mode: MaskMode,
    pub dropout: Option<Dropout>,
}

impl ForwardCtx {
    pub fn new(mask_mode: MaskMode) -> Self {
        ForwardCtx {
            mask_mode,
            dropout: None,
        }
    }

    fn drop(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match &mut self.dropout {
            Some(d) => d.apply(g, x),
            None => Ok(x),
        }
    }
}

/// One stream's tensors in one sublayer.
#[derive(Clone, Copy, Debug)]
pub struct StreamParams {
    pub attn: MhaParams,
    pub attn_norm: NormParams,
    pub ffb: Option<FfbParams>,
}

/// Both streams' tensors; `None` for a stream the sublayer leaves untouched.
/// Tied tensors load as the same graph node.
#[derive(Clone, Copy, Debug)]
pub struct BimodalParams {
    pub l: Option<StreamParams>,
    pub v: Option<StreamParams>,
}

impl BimodalParams {
    pub fn load(g: &mut Graph, index: usize, spec: &SublayerSpec, heads: usize, activation: Activation) -> Result<Self> {
        let mut load = |s: char| -> Result<StreamParams> {
            let pre = SublayerSpec::prefix(index, s);
            Ok(StreamParams {
                attn: MhaParams::load(g, &pre, heads)?,
                attn_norm: NormParams::load(g, &format!("{pre}.attn_ln"))?,
                ffb: if spec.ffb {
                    Some(FfbParams::load(g, &pre, activation)?)
                } else {
                    None
                },
            })
        };
        let l = if spec.active.language() { Some(load('l')?) } else { None };
        let v = if spec.active.vision() { Some(load('v')?) } else { None };
        Ok(BimodalParams { l, v })
    }
}

/// Joint score matrix `S_γ` of one head: rows are `[Q_L; Q_V]`, columns are
/// `[K_L; K_V]`, blocks whose gate is set hold the sentinel score.
pub fn gated_scores(g: &mut Graph, q_l: Var, q_v: Var, k_l: Var, k_v: Var, gates: GateSet) -> Result<Var> {
    gates.validate(None)?;
    let q = g.concat_rows(&[q_l, q_v])?;
    let k = g.concat_rows(&[k_l, k_v])?;
    let s = g.matmul_t(q, k)?;
    if gates == GateSet::OPEN {
        return Ok(s);
    }
    let n = g.shape(q_l).0 + g.shape(q_v).0;
    let (n_l, m_l) = (g.shape(q_l).0, g.shape(k_l).0);
    let cols = m_l + g.shape(k_v).0;
    let mut mask = Vec::with_capacity(n * cols);
    for i in 0..n {
        let (block_l, block_v) = if i < n_l { (gates.ll, gates.lv) } else { (gates.vl, gates.vv) };
        mask.extend((0..cols).map(|j| if j < m_l { block_l } else { block_v }));
    }
    g.mask_fill(s, mask)
}

struct Projected {
    q: Vec<Var>,
    k: Vec<Var>,
    v: Vec<Var>,
}

fn project(g: &mut Graph, x: Var, p: &MhaParams, need_q: bool, need_kv: bool) -> Result<Projected> {
    let split = |g: &mut Graph, y: Var| crate::blocks::split_heads(g, y, p.heads);
    let q = if need_q {
        let y = g.affine(x, p.wq, p.bq)?;
        split(g, y)?
    } else {
        Vec::new()
    };
    let (k, v) = if need_kv {
        let ky = g.matmul(x, p.wk)?;
        let vy = g.affine(x, p.wv, p.bv)?;
        (split(g, ky)?, split(g, vy)?)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(Projected { q, k, v })
}

/// Gated bimodal multi-head attention. Returns the per-stream outputs after
/// their output projections; a stream the sublayer does not update yields
/// `None`.
pub fn bimodal_mha(
    g: &mut Graph,
    x_l: Var,
    x_v: Var,
    params: &BimodalParams,
    gates: GateSet,
    mode: MaskMode,
) -> Result<(Option<Var>, Option<Var>)> {
    gates.validate(None)?;
    let (pl, pv) = (params.l, params.v);
    let any = pl.or(pv).ok_or_else(|| Error::InvalidConfig("sublayer updates no stream".into()))?;
    let heads = any.attn.heads;
    let d = g.shape(x_l).1;
    if g.shape(x_v).1 != d {
        return Err(Error::ShapeMismatch(format!("stream widths {d} vs {}", g.shape(x_v).1)));
    }
    let da = head_dim(d, heads)?;

    let l_rows = pl.is_some();
    let v_rows = pv.is_some();
    // Key/value blocks some query block attends to.
    let need_l_kv = (l_rows && !gates.ll) || (v_rows && !gates.vl);
    let need_v_kv = (l_rows && !gates.lv) || (v_rows && !gates.vv);
    if (need_l_kv && pl.is_none()) || (need_v_kv && pv.is_none()) {
        return Err(Error::InvalidGateConfig {
            sublayer: None,
            reason: "an inactive stream cannot provide keys".into(),
        });
    }
    // The additive path scores every key block of every updated stream.
    let additive = mode == MaskMode::Additive;
    let lp = match pl {
        Some(p) => Some(project(g, x_l, &p.attn, true, need_l_kv || additive)?),
        None => None,
    };
    let vp = match pv {
        Some(p) => Some(project(g, x_v, &p.attn, true, need_v_kv || additive)?),
        None => None,
    };

    let mut out_l = Vec::with_capacity(heads);
    let mut out_v = Vec::with_capacity(heads);
    for h in 0..heads {
        match mode {
            MaskMode::Skip => {
                let attend = |g: &mut Graph, q: Var, use_l: bool, use_v: bool| -> Result<Var> {
                    let mut ks = Vec::new();
                    let mut vs = Vec::new();
                    if use_l {
                        let p = lp.as_ref().expect("checked above");
                        ks.push(p.k[h]);
                        vs.push(p.v[h]);
                    }
                    if use_v {
                        let p = vp.as_ref().expect("checked above");
                        ks.push(p.k[h]);
                        vs.push(p.v[h]);
                    }
                    let k = g.concat_rows(&ks)?;
                    let v = g.concat_rows(&vs)?;
                    let s = g.matmul_t(q, k)?;
                    att_from_scores(g, s, v, da)
                };
                if let Some(p) = &lp {
                    out_l.push(attend(g, p.q[h], !gates.ll, !gates.lv)?);
                }
                if let Some(p) = &vp {
                    out_v.push(attend(g, p.q[h], !gates.vl, !gates.vv)?);
                }
            }
            MaskMode::Additive => {
                // Joint score matrix over the active query rows and every
                // key block that exists, blocked entries overwritten.
                let mut qs = Vec::new();
                let mut row_blocks = Vec::new();
                if let Some(p) = &lp {
                    qs.push(p.q[h]);
                    row_blocks.push((g.shape(p.q[h]).0, gates.ll, gates.lv));
                }
                if let Some(p) = &vp {
                    qs.push(p.q[h]);
                    row_blocks.push((g.shape(p.q[h]).0, gates.vl, gates.vv));
                }
                let mut ks = Vec::new();
                let mut vs = Vec::new();
                let mut m_l = 0;
                if let Some(p) = &lp {
                    ks.push(p.k[h]);
                    vs.push(p.v[h]);
                    m_l = g.shape(p.k[h]).0;
                }
                if let Some(p) = &vp {
                    ks.push(p.k[h]);
                    vs.push(p.v[h]);
                }
                let q = g.concat_rows(&qs)?;
                let k = g.concat_rows(&ks)?;
                let v = g.concat_rows(&vs)?;
                let s = g.matmul_t(q, k)?;
                let cols = g.shape(k).0;
                let mut mask = Vec::with_capacity(g.shape(q).0 * cols);
                for (rows, block_l, block_v) in row_blocks {
                    for _ in 0..rows {
                        for j in 0..cols {
                            mask.push(if j < m_l { block_l } else { block_v });
                        }
                    }
                }
                let s = if mask.iter().any(|&m| m) { g.mask_fill(s, mask)? } else { s };
                let o = att_from_scores(g, s, v, da)?;
                let n_l = lp.as_ref().map_or(0, |p| g.shape(p.q[h]).0);
                if lp.is_some() {
                    out_l.push(g.slice_rows(o, 0, n_l)?);
                }
                if let Some(p) = &vp {
                    let n_v = g.shape(p.q[h]).0;
                    out_v.push(g.slice_rows(o, n_l, n_v)?);
                }
            }
        }
    }

    let finish = |g: &mut Graph, outs: Vec<Var>, p: Option<StreamParams>| -> Result<Option<Var>> {
        match p {
            Some(p) => {
                let cat = g.concat_cols(&outs)?;
                Ok(Some(g.affine(cat, p.attn.wo, p.attn.bo)?))
            }
            None => Ok(None),
        }
    };
    let o_l = finish(g, out_l, pl)?;
    let o_v = finish(g, out_v, pv)?;
    Ok((o_l, o_v))
}

/// Residual + norm around [`bimodal_mha`], then the optional per-stream
/// feed-forward block. Streams the sublayer does not update pass through.
pub fn gated_sublayer(
    g: &mut Graph,
    x_l: Var,
    x_v: Var,
    spec: &SublayerSpec,
    params: &BimodalParams,
    ctx: &mut ForwardCtx,
) -> Result<(Var, Var)> {
    let (o_l, o_v) = bimodal_mha(g, x_l, x_v, params, spec.gates, ctx.mask_mode)?;
    let mut finish = |g: &mut Graph, x: Var, o: Option<Var>, p: Option<StreamParams>| -> Result<Var> {
        let (Some(o), Some(p)) = (o, p) else {
            return Ok(x);
        };
        let o = ctx.drop(g, o)?;
        let m = add_norm(g, x, o, &p.attn_norm)?;
        match &p.ffb {
            Some(f) => {
                let b = ffb_branch(g, m, f)?;
                let b = ctx.drop(g, b)?;
                add_norm(g, m, b, &f.norm)
            }
            None => Ok(m),
        }
    };
    let y_l = finish(g, x_l, o_l, params.l)?;
    let y_v = finish(g, x_v, o_v, params.v)?;
    Ok((y_l, y_v))
}

/// Applies every sublayer of `spec` in order.
pub fn encode_bimodal(g: &mut Graph, x_l: Var, x_v: Var, spec: &ArchSpec, ctx: &mut ForwardCtx) -> Result<(Var, Var)> {
    let mut h = (x_l, x_v);
    for (i, sub) in spec.sublayers.iter().enumerate() {
        let p = BimodalParams::load(g, i, sub, spec.heads, spec.activation)?;
        h = gated_sublayer(g, h.0, h.1, sub, &p, ctx)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_validity() {
        let valid: Vec<GateSet> = GateSet::all().filter(|g| g.validate(None).is_ok()).collect();
        assert_eq!(valid.len(), 9);
        assert!(GateSet::from_bits([1, 1, 0, 0]).validate(Some(2)).is_err());
        assert!(matches!(
            GateSet::from_bits([0, 0, 1, 1]).validate(Some(4)),
            Err(Error::InvalidGateConfig { sublayer: Some(4), .. })
        ));
    }

    #[test]
    fn single_stream_sublayer_unimodal_checks() {
        let mut s = SublayerSpec {
            active: Active::Language,
            ..SublayerSpec::SINGLE
        };
        assert!(s.validate(0).is_err());
        s.gates = GateSet::INTRA;
        assert!(s.validate(0).is_ok());
        assert!(s.param_aliases(0).is_empty());
        assert!(s.param_decls(0, 4, 8).iter().all(|d| d.name.starts_with("sub0.l.")));
    }

    #[test]
    fn attention_ties_alias_table() {
        let s = SublayerSpec {
            gates: GateSet::INTER,
            ties: TieSet::ATTENTION,
            ffb: false,
            active: Active::Both,
        };
        let aliases = s.param_aliases(1);
        let names: Vec<&str> = aliases.iter().map(|(a, _)| a.as_str()).collect();
        assert_eq!(
            names,
            ["sub1.v.q.w", "sub1.v.q.b", "sub1.v.k.w", "sub1.v.v.w", "sub1.v.v.b", "sub1.v.o.w", "sub1.v.o.b"]
        );
        assert!(s.param_decls(1, 4, 8).iter().all(|d| !d.name.contains("ffn")));
    }

    #[test]
    fn bits_round_trip() {
        for g in GateSet::all() {
            assert_eq!(GateSet::from_bits(g.bits()), g);
        }
        let t = TieSet::from_bits([1, 0, 1, 0, 1, 0]);
        assert_eq!(t.bits(), [1, 0, 1, 0, 1, 0]);
    }
}
