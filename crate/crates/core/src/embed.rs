//! Text and region embeddings, the whole-image `[IMG]` region and the
//! whitespace vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::blocks::LN_EPS;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mat::Mat;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
/// Ids below this are special tokens.
pub const NUM_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// How region geometry (and the global image) enters the input embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedVariant {
    /// Region feature plus normalized 5-d box.
    #[default]
    Box5,
    /// Region feature only; no geometry.
    None,
    /// `Box5`, and every text token also receives a projection of the
    /// whole-image feature.
    Box5Global,
}

/// Fixed word list with whitespace tokenization. Ids `0..NUM_SPECIAL` are the
/// special tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// `words` must not repeat the special tokens; they are prepended.
    pub fn new(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let mut index = HashMap::with_capacity(all.len());
        for (i, w) in all.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocab { words: all, index })
    }

    /// Parses one word per line, special tokens included at the top.
    pub fn from_lines(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_SPECIAL || lines[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err(Error::CorruptData("vocabulary must start with the special tokens".into()));
        }
        Vocab::new(lines[NUM_SPECIAL..].iter().map(|s| s.to_string()))
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// `[CLS] w1 … wn [SEP]`.
    pub fn encode(&self, caption: &str) -> TextBatch {
        let mut ids = vec![CLS];
        ids.extend(caption.split_whitespace().map(|w| self.id(w)));
        ids.push(SEP);
        TextBatch::new(ids).expect("framed by CLS and SEP")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextBatch {
    pub token_ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segment_ids: Vec<usize>,
}

impl TextBatch {
    /// Positions `0..n`, segment 0 everywhere.
    pub fn new(token_ids: Vec<usize>) -> Result<Self> {
        if token_ids.len() < 2 || token_ids[0] != CLS || *token_ids.last().unwrap() != SEP {
            return Err(Error::InvalidConfig("text must start with [CLS] and end with [SEP]".into()));
        }
        let n = token_ids.len();
        Ok(TextBatch {
            token_ids,
            positions: (0..n).collect(),
            segment_ids: vec![0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Axis-aligned box in pixels plus the image size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub width: f64,
    pub height: f64,
}

impl RegionBox {
    pub fn full_image(width: f64, height: f64) -> Self {
        RegionBox {
            x1: 0.0,
            y1: 0.0,
            x2: width,
            y2: height,
            width,
            height,
        }
    }

    pub fn validate(&self, region: usize) -> Result<()> {
        let err = |reason: &str| Err(Error::InvalidBox { region, reason: reason.into() });
        let all = [self.x1, self.y1, self.x2, self.y2, self.width, self.height];
        if all.iter().any(|v| !v.is_finite()) {
            return err("non-finite coordinate");
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return err("image size must be positive");
        }
        if !(0.0 <= self.x1 && self.x1 < self.x2 && self.x2 <= self.width) {
            return err("need 0 <= x1 < x2 <= W");
        }
        if !(0.0 <= self.y1 && self.y1 < self.y2 && self.y2 <= self.height) {
            return err("need 0 <= y1 < y2 <= H");
        }
        Ok(())
    }

    /// `(x1/W, y1/H, x2/W, y2/H, area/(W·H))`.
    pub fn box5(&self) -> [f64; 5] {
        let area = (self.x2 - self.x1) * (self.y2 - self.y1);
        [
            self.x1 / self.width,
            self.y1 / self.height,
            self.x2 / self.width,
            self.y2 / self.height,
            area / (self.width * self.height),
        ]
    }
}

/// Detected regions of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionBatch {
    /// `K × d_feat`.
    pub features: Mat,
    pub boxes: Vec<RegionBox>,
    /// `K × C`, rows are probability distributions.
    pub detector_dists: Mat,
}

impl VisionBatch {
    pub fn num_regions(&self) -> usize {
        self.features.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.features.rows();
        if self.boxes.len() != k || self.detector_dists.rows() != k {
            return Err(Error::ShapeMismatch(format!(
                "{k} feature rows, {} boxes, {} detector rows",
                self.boxes.len(),
                self.detector_dists.rows()
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.validate(i)?;
        }
        for i in 0..k {
            let row = self.detector_dists.row(i);
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidDistribution(format!(
                    "detector row {i} sums to {s}"
                )));
            }
        }
        if !self.features.all_finite() {
            return Err(Error::CorruptData("non-finite region feature".into()));
        }
        Ok(())
    }
}

/// Whole-image region: column mean of the region features and the full-image
/// box. Column sums are accumulated in sorted order so the result does not
/// depend on region order.
pub fn make_img_token(b: &VisionBatch) -> Result<(Vec<f64>, RegionBox)> {
    let k = b.num_regions();
    if k == 0 {
        return Err(Error::EmptyRegions);
    }
    let mut mean = Vec::with_capacity(b.features.cols());
    let mut col = Vec::with_capacity(k);
    for j in 0..b.features.cols() {
        col.clear();
        col.extend((0..k).map(|i| b.features.get(i, j)));
        col.sort_by(f64::total_cmp);
        mean.push(col.iter().sum::<f64>() / k as f64);
    }
    let first = b.boxes.first().ok_or(Error::EmptyRegions)?;
    Ok((mean, RegionBox::full_image(first.width, first.height)))
}

/// Text embeddings `LN(tok + pos + seg [+ global])`.
pub fn embed_text(g: &mut Graph, b: &TextBatch, variant: EmbedVariant, global_img: Option<&[f64]>) -> Result<Var> {
    if b.positions.len() != b.len() || b.segment_ids.len() != b.len() {
        return Err(Error::ShapeMismatch("positions/segments must match token count".into()));
    }
    let tok_t = g.param("embed.tok.w")?;
    let pos_t = g.param("embed.pos.w")?;
    let seg_t = g.param("embed.seg.w")?;
    let tok = g.gather_rows(tok_t, &b.token_ids)?;
    let pos = g.gather_rows(pos_t, &b.positions)?;
    let seg = g.gather_rows(seg_t, &b.segment_ids)?;
    let mut x = g.add(tok, pos)?;
    x = g.add(x, seg)?;
    match (variant, global_img) {
        (EmbedVariant::Box5Global, Some(feat)) => {
            let f = g.input(Mat::row_vector(feat));
            let w = g.param("embed.global.w")?;
            let bias = g.param("embed.global.b")?;
            let proj = g.affine(f, w, bias)?;
            x = g.add_row(x, proj)?;
        }
        (EmbedVariant::Box5Global, None) => {
            return Err(Error::InvalidConfig("this embedding variant needs the global image feature".into()));
        }
        (_, Some(_)) => {
            return Err(Error::InvalidConfig("global image feature given to a variant that does not use it".into()));
        }
        (_, None) => {}
    }
    let gain = g.param("embed.text_ln.gain")?;
    let bias = g.param("embed.text_ln.bias")?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Region embeddings with `[IMG]` prepended: `(K+1) × d`. Row `k` is
/// `LN(feat_k W_f + b_f + box5_k W_b + b_b)`; the box term is absent for
/// [`EmbedVariant::None`].
pub fn embed_vision(g: &mut Graph, b: &VisionBatch, variant: EmbedVariant) -> Result<Var> {
    b.validate()?;
    let (img_feat, img_box) = make_img_token(b)?;
    let mut feats = Mat::row_vector(&img_feat);
    feats = Mat::concat_rows(&[&feats, &b.features])?;
    let f = g.input(feats);
    let wf = g.param("embed.feat.w")?;
    let bf = g.param("embed.feat.b")?;
    let mut x = g.affine(f, wf, bf)?;
    if variant != EmbedVariant::None {
        let boxes: Vec<[f64; 5]> = std::iter::once(img_box.box5())
            .chain(b.boxes.iter().map(RegionBox::box5))
            .collect();
        let bx = g.input(Mat::from_rows(&boxes)?);
        let wb = g.param("embed.box.w")?;
        let bb = g.param("embed.box.b")?;
        let geo = g.affine(bx, wb, bb)?;
        x = g.add(x, geo)?;
    }
    let gain = g.param("embed.vis_ln.gain")?;
    let bias = g.param("embed.vis_ln.bias")?;
    g.layer_norm(x, gain, bias, LN_EPS)
}
