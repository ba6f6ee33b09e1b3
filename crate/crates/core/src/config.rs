//! Architecture specifications: the JSON document format, validation,
//! presets for the five studied models, and parameter counting.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::blocks::Activation;
use crate::embed::{EmbedVariant, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::gated::{Active, GateSet, SublayerSpec, TieSet};
use crate::objectives::LossWeights;
use crate::params::{Init, ParamDecl, ParamGroup};

pub const PRESETS: [&str; 5] = ["uniter", "visualbert", "vl-bert", "vilbert", "lxmert"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Toy,
    /// Base-size widths and depths. Only meant for parameter audits.
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Multiplicative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub scale: Scale,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    /// Detector classes.
    pub classes: usize,
    pub d_feat: usize,
    pub max_pos: usize,
    pub d_pool: usize,
    pub activation: Activation,
    pub embed_variant: EmbedVariant,
    pub sublayers: Vec<SublayerSpec>,
    pub pooling: Pooling,
    pub weights: LossWeights,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec::base(Scale::Toy)
    }
}

impl ArchSpec {
    /// Default dims for `scale` with a stack of single-stream sublayers.
    pub fn base(scale: Scale) -> Self {
        let (d, heads, d_ff, vocab, classes, d_feat, max_pos, depth) = match scale {
            Scale::Toy => (64, 4, 256, 1000, 16, 32, 64, 4),
            Scale::Full => (768, 12, 3072, 30522, 1601, 2048, 512, 12),
        };
        ArchSpec {
            name: "custom".into(),
            scale,
            d,
            heads,
            d_ff,
            vocab,
            classes,
            d_feat,
            max_pos,
            d_pool: d,
            activation: Activation::Relu,
            embed_variant: EmbedVariant::Box5,
            sublayers: vec![SublayerSpec::SINGLE; depth],
            pooling: Pooling::Multiplicative,
            weights: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d == 0 || self.heads == 0 {
            return bad("d and h must be positive".into());
        }
        if self.d % self.heads != 0 {
            return Err(Error::HeadDivisibility {
                d: self.d,
                heads: self.heads,
            });
        }
        if self.d_ff < self.d {
            return bad(format!("ff ({}) must be at least d ({})", self.d_ff, self.d));
        }
        if self.vocab <= NUM_SPECIAL {
            return bad(format!("vocab must exceed the {NUM_SPECIAL} special tokens"));
        }
        if self.classes == 0 || self.d_feat == 0 || self.d_pool == 0 {
            return bad("classes, feat and pool must be positive".into());
        }
        if self.max_pos < 2 {
            return bad("max_pos must be at least 2".into());
        }
        for (i, s) in self.sublayers.iter().enumerate() {
            s.validate(i)?;
        }
        let w = &self.weights;
        if [w.mlm, w.mrc_kl, w.itm].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("objective weights must be finite and non-negative".into());
        }
        if w.itm > 0.0 && !self.sublayers.iter().any(|s| s.active == Active::Both) {
            return bad("the matching objective needs at least one sublayer with active = both".into());
        }
        Ok(())
    }

    /// `(alias, canonical)` pairs for every tied tensor.
    pub fn param_aliases(&self) -> Vec<(String, String)> {
        self.sublayers
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.param_aliases(i))
            .collect()
    }

    /// Every distinct tensor (aliases excluded) in declaration order.
    pub fn param_decls(&self) -> Vec<ParamDecl> {
        let (d, emb, heads) = (self.d, ParamGroup::Embeddings, ParamGroup::Heads);
        let mut out = vec![
            ParamDecl::new("embed.tok.w", self.vocab, d, Init::Normal, emb),
            ParamDecl::new("embed.pos.w", self.max_pos, d, Init::Normal, emb),
            ParamDecl::new("embed.seg.w", 2, d, Init::Normal, emb),
            ParamDecl::new("embed.text_ln.gain", 1, d, Init::Ones, emb),
            ParamDecl::new("embed.text_ln.bias", 1, d, Init::Zeros, emb),
        ];
        if self.embed_variant == EmbedVariant::Box5Global {
            out.push(ParamDecl::new("embed.global.w", self.d_feat, d, Init::Normal, emb));
            out.push(ParamDecl::new("embed.global.b", 1, d, Init::Zeros, emb));
        }
        out.push(ParamDecl::new("embed.feat.w", self.d_feat, d, Init::Normal, emb));
        out.push(ParamDecl::new("embed.feat.b", 1, d, Init::Zeros, emb));
        if self.embed_variant != EmbedVariant::None {
            out.push(ParamDecl::new("embed.box.w", 5, d, Init::Normal, emb));
            out.push(ParamDecl::new("embed.box.b", 1, d, Init::Zeros, emb));
        }
        out.push(ParamDecl::new("embed.vis_ln.gain", 1, d, Init::Ones, emb));
        out.push(ParamDecl::new("embed.vis_ln.bias", 1, d, Init::Zeros, emb));

        let aliased: BTreeSet<String> = self.param_aliases().into_iter().map(|(a, _)| a).collect();
        for (i, s) in self.sublayers.iter().enumerate() {
            out.extend(
                s.param_decls(i, d, self.d_ff)
                    .into_iter()
                    .filter(|p| !aliased.contains(&p.name)),
            );
        }

        let p = self.d_pool;
        out.extend([
            ParamDecl::new("head.mlm.w", self.vocab, d, Init::Normal, heads),
            ParamDecl::new("head.mlm.b", 1, self.vocab, Init::Zeros, heads),
            ParamDecl::new("head.mrc.w", self.classes, d, Init::Normal, heads),
            ParamDecl::new("head.mrc.b", 1, self.classes, Init::Zeros, heads),
            ParamDecl::new("head.pool.l.w", d, p, Init::Normal, heads),
            ParamDecl::new("head.pool.l.b", 1, p, Init::Zeros, heads),
            ParamDecl::new("head.pool.v.w", d, p, Init::Normal, heads),
            ParamDecl::new("head.pool.v.b", 1, p, Init::Zeros, heads),
            ParamDecl::new("head.itm.w", p, 1, Init::Normal, heads),
            ParamDecl::new("head.itm.b", 1, 1, Init::Zeros, heads),
        ]);
        out
    }

    /// Explicit document form; every default is spelled out.
    pub fn to_document(&self) -> ArchDocument {
        ArchDocument {
            name: Some(self.name.clone()),
            preset: None,
            scale: Some(self.scale),
            dims: Some(DimsDoc {
                d: Some(self.d),
                h: Some(self.heads),
                ff: Some(self.d_ff),
                vocab: Some(self.vocab),
                classes: Some(self.classes),
                feat: Some(self.d_feat),
                max_pos: Some(self.max_pos),
                pool: Some(self.d_pool),
            }),
            embed_variant: Some(self.embed_variant),
            activation: Some(self.activation),
            sublayers: Some(
                self.sublayers
                    .iter()
                    .map(|s| SublayerDoc {
                        gates: Some(s.gates.bits().to_vec()),
                        ties: Some(s.ties.bits().to_vec()),
                        ffb: Some(s.ffb),
                        active: Some(s.active),
                    })
                    .collect(),
            ),
            pooling: Some(self.pooling),
            objectives: Some(ObjectivesDoc {
                weights: Some(WeightsDoc {
                    mlm: Some(self.weights.mlm),
                    mrc_kl: Some(self.weights.mrc_kl),
                    itm: Some(self.weights.itm),
                }),
            }),
        }
    }

    /// Pretty JSON that [`parse_arch_config`] reads back to an equal spec.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("document serializes")
    }

    /// Attention plus feed-forward scalars.
    pub fn encoder_param_count(&self) -> usize {
        let c = count_params(self);
        c.by_group.get(&ParamGroup::Attention).copied().unwrap_or(0)
            + c.by_group.get(&ParamGroup::Ffb).copied().unwrap_or(0)
    }
}

/// On-disk config. Every key is optional; missing keys take the preset (or
/// scale) defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDocument {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<Scale>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dims: Option<DimsDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_variant: Option<EmbedVariant>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sublayers: Option<Vec<SublayerDoc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooling: Option<Pooling>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objectives: Option<ObjectivesDoc>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ff: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feat: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_pos: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SublayerDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gates: Option<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ties: Option<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffb: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub active: Option<Active>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectivesDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightsDoc>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mrc_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub itm: Option<f64>,
}

fn bits<const N: usize>(v: &[u8], key: &str, index: usize) -> Result<[u8; N]> {
    if v.len() != N || v.iter().any(|&b| b > 1) {
        return Err(Error::InvalidConfig(format!(
            "sublayers[{index}].{key} must be {N} values of 0 or 1"
        )));
    }
    let mut out = [0u8; N];
    out.copy_from_slice(v);
    Ok(out)
}

impl ArchDocument {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ParseError {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    /// Applies the document on top of `base`. A `preset` or `scale` key
    /// replaces the base first.
    pub fn apply(&self, base: &ArchSpec) -> Result<ArchSpec> {
        let mut s = match (&self.preset, self.scale) {
            (Some(p), scale) => preset_at(p, scale.unwrap_or(base.scale))?,
            (None, Some(scale)) if scale != base.scale => ArchSpec::base(scale),
            _ => base.clone(),
        };
        if let Some(n) = &self.name {
            s.name = n.clone();
        }
        if let Some(dm) = &self.dims {
            let set = |dst: &mut usize, v: Option<usize>| {
                if let Some(v) = v {
                    *dst = v;
                }
            };
            let pool_follows_d = s.d_pool == s.d && dm.pool.is_none();
            set(&mut s.d, dm.d);
            set(&mut s.heads, dm.h);
            set(&mut s.d_ff, dm.ff);
            set(&mut s.vocab, dm.vocab);
            set(&mut s.classes, dm.classes);
            set(&mut s.d_feat, dm.feat);
            set(&mut s.max_pos, dm.max_pos);
            set(&mut s.d_pool, dm.pool);
            if pool_follows_d {
                s.d_pool = s.d;
            }
        }
        if let Some(v) = self.embed_variant {
            s.embed_variant = v;
        }
        if let Some(a) = self.activation {
            s.activation = a;
        }
        if let Some(p) = self.pooling {
            s.pooling = p;
        }
        if let Some(subs) = &self.sublayers {
            s.sublayers = subs
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let mut sub = SublayerSpec::SINGLE;
                    if let Some(g) = &d.gates {
                        sub.gates = GateSet::from_bits(bits::<4>(g, "gates", i)?);
                    }
                    if let Some(t) = &d.ties {
                        sub.ties = TieSet::from_bits(bits::<6>(t, "ties", i)?);
                    }
                    if let Some(f) = d.ffb {
                        sub.ffb = f;
                    }
                    if let Some(a) = d.active {
                        sub.active = a;
                    }
                    Ok(sub)
                })
                .collect::<Result<_>>()?;
        }
        if let Some(w) = self.objectives.as_ref().and_then(|o| o.weights.as_ref()) {
            s.weights.mlm = w.mlm.unwrap_or(s.weights.mlm);
            s.weights.mrc_kl = w.mrc_kl.unwrap_or(s.weights.mrc_kl);
            s.weights.itm = w.itm.unwrap_or(s.weights.itm);
        }
        s.validate()?;
        Ok(s)
    }
}

/// Parses a config document over the toy defaults.
pub fn parse_arch_config(text: &str) -> Result<ArchSpec> {
    ArchDocument::parse(text)?.apply(&ArchSpec::default())
}

/// Toy-scale preset.
pub fn preset(name: &str) -> Result<ArchSpec> {
    preset_at(name, Scale::Toy)
}

pub fn preset_at(name: &str, scale: Scale) -> Result<ArchSpec> {
    let full = scale == Scale::Full;
    let mut s = ArchSpec::base(scale);
    s.name = name.to_string();
    let depth = if full { 12 } else { 4 };
    match name {
        "uniter" => s.embed_variant = EmbedVariant::Box5,
        "visualbert" => s.embed_variant = EmbedVariant::None,
        "vl-bert" => s.embed_variant = EmbedVariant::Box5Global,
        "vilbert" => {
            let inter = SublayerSpec {
                gates: GateSet::INTER,
                ties: TieSet::NONE,
                ffb: true,
                active: Active::Both,
            };
            let intra = SublayerSpec {
                gates: GateSet::INTRA,
                ..inter
            };
            s.sublayers = (0..depth).flat_map(|_| [inter, intra]).collect();
        }
        "lxmert" => {
            let (n_l, n_v, n_x) = if full { (9, 5, 5) } else { (2, 2, 2) };
            let uni = |active| SublayerSpec {
                gates: GateSet::INTRA,
                ties: TieSet::NONE,
                ffb: true,
                active,
            };
            let cross = SublayerSpec {
                gates: GateSet::INTER,
                ties: TieSet::ATTENTION,
                ffb: true,
                active: Active::Both,
            };
            let self_att = SublayerSpec {
                gates: GateSet::INTRA,
                ties: TieSet::NONE,
                ffb: false,
                active: Active::Both,
            };
            s.sublayers = std::iter::repeat_n(uni(Active::Language), n_l)
                .chain(std::iter::repeat_n(uni(Active::Vision), n_v))
                .chain((0..n_x).flat_map(|_| [cross, self_att]))
                .collect();
        }
        _ => return Err(Error::UnknownPreset(name.to_string())),
    }
    if !matches!(name, "vilbert" | "lxmert") {
        s.sublayers = vec![SublayerSpec::SINGLE; depth];
    }
    Ok(s)
}

/// Distinct scalars after aliasing, in total and per group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub by_group: BTreeMap<ParamGroup, usize>,
}

pub fn count_params(spec: &ArchSpec) -> ParamCount {
    let mut by_group = BTreeMap::new();
    for g in [ParamGroup::Embeddings, ParamGroup::Attention, ParamGroup::Ffb, ParamGroup::Heads] {
        by_group.insert(g, 0);
    }
    for p in spec.param_decls() {
        *by_group.entry(p.group).or_insert(0) += p.numel();
    }
    ParamCount {
        total: by_group.values().sum(),
        by_group,
    }
}
