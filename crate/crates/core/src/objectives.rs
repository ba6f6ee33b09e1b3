//! Masking and the three pretraining losses: masked language modeling,
//! masked region classification scored with KL divergence, and image-text
//! matching over a multiplicatively pooled pair representation.

use serde::{Deserialize, Serialize};

use crate::embed::{TextBatch, VisionBatch, CLS, MASK, NUM_SPECIAL, SEP};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mat::Mat;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mlm: f64,
    pub mrc_kl: f64,
    pub itm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mlm: 1.0,
            mrc_kl: 1.0,
            itm: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub text_mask_prob: f64,
    /// Probabilities of `[MASK]`, a random token, and keeping the original.
    pub split: [f64; 3],
    pub region_mask_prob: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            text_mask_prob: 0.15,
            split: [0.8, 0.1, 0.1],
            region_mask_prob: 0.15,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !unit(self.text_mask_prob) || !unit(self.region_mask_prob) || !self.split.iter().all(|&p| unit(p)) {
            return Err(Error::InvalidConfig("masking probabilities must lie in [0, 1]".into()));
        }
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("mask/random/keep split must sum to 1".into()));
        }
        Ok(())
    }
}

/// What happened to a selected text position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextLabels {
    pub positions: Vec<usize>,
    /// Original token ids.
    pub targets: Vec<usize>,
    pub kinds: Vec<MaskKind>,
}

impl TextLabels {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionLabels {
    /// Rows of the vision hidden states, so region `k` is row `k + 1`.
    pub rows: Vec<usize>,
    /// Detector distributions of the masked regions, one row each.
    pub targets: Mat,
}

impl RegionLabels {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Masked {
    pub text: TextBatch,
    pub vision: VisionBatch,
    pub text_labels: TextLabels,
    pub region_labels: RegionLabels,
}

impl Masked {
    /// No positions or regions selected.
    pub fn unmasked(text: TextBatch, vision: VisionBatch) -> Self {
        let c = vision.detector_dists.cols();
        Masked {
            text,
            vision,
            text_labels: TextLabels::default(),
            region_labels: RegionLabels {
                rows: Vec::new(),
                targets: Mat::zeros(0, c),
            },
        }
    }
}

/// Selects text positions and regions to corrupt. `[CLS]`, `[SEP]` and the
/// whole-image region are never selected. Masked regions keep their box and
/// have their feature row zeroed. Random replacements are ordinary words.
pub fn apply_masking(text: &TextBatch, vision: &VisionBatch, policy: &MaskingPolicy, vocab: usize, rng: &mut Rng) -> Result<Masked> {
    policy.validate()?;
    if vocab <= NUM_SPECIAL {
        return Err(Error::InvalidConfig("vocabulary has no ordinary words".into()));
    }
    let mut out_text = text.clone();
    let mut labels = TextLabels::default();
    for (pos, &id) in text.token_ids.iter().enumerate() {
        if id == CLS || id == SEP || !rng.bernoulli(policy.text_mask_prob) {
            continue;
        }
        let u = rng.uniform();
        let kind = if u < policy.split[0] {
            MaskKind::Mask
        } else if u < policy.split[0] + policy.split[1] {
            MaskKind::Random
        } else {
            MaskKind::Keep
        };
        out_text.token_ids[pos] = match kind {
            MaskKind::Mask => MASK,
            MaskKind::Random => NUM_SPECIAL + rng.below(vocab - NUM_SPECIAL),
            MaskKind::Keep => id,
        };
        labels.positions.push(pos);
        labels.targets.push(id);
        labels.kinds.push(kind);
    }

    let mut out_vision = vision.clone();
    let mut rows = Vec::new();
    let mut targets: Vec<&[f64]> = Vec::new();
    for k in 0..vision.num_regions() {
        if rng.bernoulli(policy.region_mask_prob) {
            out_vision.features.row_mut(k).iter_mut().for_each(|x| *x = 0.0);
            rows.push(k + 1);
            targets.push(vision.detector_dists.row(k));
        }
    }
    let targets = if targets.is_empty() {
        Mat::zeros(0, vision.detector_dists.cols())
    } else {
        Mat::from_rows(&targets)?
    };
    Ok(Masked {
        text: out_text,
        vision: out_vision,
        text_labels: labels,
        region_labels: RegionLabels { rows, targets },
    })
}

fn zero(g: &mut Graph) -> Var {
    g.input(Mat::zeros(1, 1))
}

/// Mean cross-entropy of the vocabulary head over masked positions.
pub fn mlm_loss(g: &mut Graph, hidden_l: Var, labels: &TextLabels) -> Result<Var> {
    if labels.is_empty() {
        return Ok(zero(g));
    }
    let w = g.param("head.mlm.w")?;
    let b = g.param("head.mlm.b")?;
    let vocab = g.shape(w).0;
    let rows = g.gather_rows(hidden_l, &labels.positions)?;
    let scores = g.matmul_t(rows, w)?;
    let logits = g.add_row(scores, b)?;
    let mut targets = Mat::zeros(labels.positions.len(), vocab);
    for (i, &t) in labels.targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::IdOutOfRange { id: t, vocab });
        }
        targets.set(i, t, 1.0);
    }
    let sum = g.soft_target_xent(logits, targets, false)?;
    Ok(g.scale(sum, 1.0 / labels.positions.len() as f64))
}

/// Mean `KL(target ∥ softmax(h W_clsᵀ + b))` over masked regions.
pub fn mrc_kl_loss(g: &mut Graph, hidden_v: Var, labels: &RegionLabels) -> Result<Var> {
    if labels.is_empty() {
        return Ok(zero(g));
    }
    for i in 0..labels.targets.rows() {
        let row = labels.targets.row(i);
        let s: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDistribution(format!("target row {i} sums to {s}")));
        }
    }
    let w = g.param("head.mrc.w")?;
    let b = g.param("head.mrc.b")?;
    let rows = g.gather_rows(hidden_v, &labels.rows)?;
    let scores = g.matmul_t(rows, w)?;
    let logits = g.add_row(scores, b)?;
    let sum = g.soft_target_xent(logits, labels.targets.clone(), true)?;
    Ok(g.scale(sum, 1.0 / labels.rows.len() as f64))
}

/// `(h_cls W_L + b_L) ⊙ (h_img W_V + b_V)`.
pub fn multiplicative_pool(g: &mut Graph, h_cls: Var, h_img: Var) -> Result<Var> {
    let (wl, bl) = (g.param("head.pool.l.w")?, g.param("head.pool.l.b")?);
    let (wv, bv) = (g.param("head.pool.v.w")?, g.param("head.pool.v.b")?);
    let l = g.affine(h_cls, wl, bl)?;
    let v = g.affine(h_img, wv, bv)?;
    g.mul(l, v)
}

/// Matching logit of a pooled vector.
pub fn itm_logit(g: &mut Graph, pooled: Var) -> Result<Var> {
    let w = g.param("head.itm.w")?;
    let b = g.param("head.itm.b")?;
    g.affine(pooled, w, b)
}

/// Binary cross-entropy of `sigmoid(logit)` against the match label.
pub fn itm_loss(g: &mut Graph, pooled: Var, matched: bool) -> Result<Var> {
    let z = itm_logit(g, pooled)?;
    g.bce_with_logits(z, if matched { 1.0 } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mlm: f64,
    pub mrc_kl: f64,
    pub itm: f64,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(mlm: f64, mrc_kl: f64, itm: f64, weights: LossWeights) -> Self {
        LossBreakdown {
            mlm,
            mrc_kl,
            itm,
            weights,
            total: weights.mlm * mlm + weights.mrc_kl * mrc_kl + weights.itm * itm,
        }
    }
}

/// Graph nodes of the individual losses; `None` where an objective is not
/// computed for this example.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub mlm: Option<Var>,
    pub mrc_kl: Option<Var>,
    pub itm: Option<Var>,
}

/// Weighted sum node and its breakdown. Zero-weight terms are left out of
/// the graph entirely.
pub fn total_loss(g: &mut Graph, parts: LossParts, weights: LossWeights) -> Result<(Var, LossBreakdown)> {
    let val = |g: &Graph, v: Option<Var>| v.map(|v| g.scalar(v)).unwrap_or(0.0);
    let breakdown = LossBreakdown::new(val(g, parts.mlm), val(g, parts.mrc_kl), val(g, parts.itm), weights);
    let mut total: Option<Var> = None;
    for (part, w) in [(parts.mlm, weights.mlm), (parts.mrc_kl, weights.mrc_kl), (parts.itm, weights.itm)] {
        if let Some(p) = part {
            if w != 0.0 {
                let term = g.scale(p, w);
                total = Some(match total {
                    Some(t) => g.add(t, term)?,
                    None => term,
                });
            }
        }
    }
    let total = match total {
        Some(t) => t,
        None => zero(g),
    };
    Ok((total, breakdown))
}
