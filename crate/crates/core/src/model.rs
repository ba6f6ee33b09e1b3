//! The full per-pair forward pass: embeddings, gated encoder, heads, losses.

use crate::config::ArchSpec;
use crate::embed::{embed_text, embed_vision, make_img_token, EmbedVariant, TextBatch, VisionBatch};
use crate::equivalence::scrambled_params;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheck};
use crate::gated::{encode_bimodal, ForwardCtx};
use crate::graph::{Graph, Var};
use crate::objectives::{apply_masking, itm_logit, itm_loss, mlm_loss, mrc_kl_loss, multiplicative_pool, total_loss, LossBreakdown, LossParts, Masked, MaskingPolicy};
use crate::params::{Gradients, ParamStore};
use crate::rng::Rng;
use crate::synth::{gen_synth, SynthSpec};

/// Final hidden states `(H_L, H_V)`; row 0 of each is `[CLS]` / `[IMG]`.
pub fn encode_pair(g: &mut Graph, spec: &ArchSpec, text: &TextBatch, vision: &VisionBatch, ctx: &mut ForwardCtx) -> Result<(Var, Var)> {
    let global = match spec.embed_variant {
        EmbedVariant::Box5Global => Some(make_img_token(vision)?.0),
        _ => None,
    };
    let x_l = embed_text(g, text, spec.embed_variant, global.as_deref())?;
    let x_v = embed_vision(g, vision, spec.embed_variant)?;
    encode_bimodal(g, x_l, x_v, spec, ctx)
}

fn pooled(g: &mut Graph, h_l: Var, h_v: Var) -> Result<Var> {
    let cls = g.slice_rows(h_l, 0, 1)?;
    let img = g.slice_rows(h_v, 0, 1)?;
    multiplicative_pool(g, cls, img)
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Weighted pretraining loss of one pair. The masked objectives are only
/// computed for matched pairs.
pub fn forward_loss(g: &mut Graph, spec: &ArchSpec, m: &Masked, matched: bool, ctx: &mut ForwardCtx) -> Result<ForwardOut> {
    let (h_l, h_v) = encode_pair(g, spec, &m.text, &m.vision, ctx)?;
    let w = spec.weights;
    let mut parts = LossParts::default();
    if matched && w.mlm != 0.0 {
        parts.mlm = Some(mlm_loss(g, h_l, &m.text_labels)?);
    }
    if matched && w.mrc_kl != 0.0 {
        parts.mrc_kl = Some(mrc_kl_loss(g, h_v, &m.region_labels)?);
    }
    if w.itm != 0.0 {
        let p = pooled(g, h_l, h_v)?;
        parts.itm = Some(itm_loss(g, p, matched)?);
    }
    let (total, breakdown) = total_loss(g, parts, w)?;
    Ok(ForwardOut { total, breakdown })
}

/// Loss breakdown and parameter gradients (keyed by canonical name) of one
/// pair.
pub fn pair_gradients(store: &ParamStore, spec: &ArchSpec, m: &Masked, matched: bool, ctx: &mut ForwardCtx) -> Result<(LossBreakdown, Gradients)> {
    let mut g = Graph::new(store);
    let out = forward_loss(&mut g, spec, m, matched, ctx)?;
    let back = g.backward(out.total)?;
    Ok((out.breakdown, back.into_params()))
}

/// Matching logit of an unmasked pair.
pub fn match_logit(store: &ParamStore, spec: &ArchSpec, text: &TextBatch, vision: &VisionBatch) -> Result<f64> {
    let mut g = Graph::new(store);
    let mut ctx = ForwardCtx::default();
    let (h_l, h_v) = encode_pair(&mut g, spec, text, vision, &mut ctx)?;
    let p = pooled(&mut g, h_l, h_v)?;
    let z = itm_logit(&mut g, p)?;
    Ok(g.scalar(z))
}

/// Audit pair for [`grad_audit`]: one matched synthetic pair with heavier
/// masking than training uses, so every objective contributes.
pub fn audit_pair(spec: &ArchSpec, seed: u64) -> Result<Masked> {
    let ds = gen_synth(&SynthSpec {
        n_pairs: 2,
        heldout: 0,
        vocab: spec.vocab,
        classes: spec.classes,
        d_feat: spec.d_feat,
        seed,
        ..SynthSpec::default()
    })?;
    let policy = MaskingPolicy {
        text_mask_prob: 0.4,
        region_mask_prob: 0.4,
        ..MaskingPolicy::default()
    };
    let mut rng = Rng::new(seed).substream("audit/mask");
    apply_masking(&ds.text(0), ds.vision(0), &policy, spec.vocab, &mut rng)
}

/// Central-difference check of the full weighted loss at scrambled
/// parameters (see [`scrambled_params`]).
pub fn grad_audit(spec: &ArchSpec, seed: u64, n_probes: usize, h: f64) -> Result<GradCheck> {
    let store = scrambled_params(spec, seed);
    let m = audit_pair(spec, seed)?;
    let mut rng = Rng::new(seed).substream("audit/probes");
    finite_diff_check(
        |g| Ok(forward_loss(g, spec, &m, true, &mut ForwardCtx::default())?.total),
        &store,
        h,
        n_probes,
        &mut rng,
    )
}
