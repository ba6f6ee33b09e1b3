//! Toy pretraining and image-text matching evaluation.
//!
//! A step draws a batch of training images, pairs each with its own caption
//! or (with probability `1 − match_prob`) another image's caption, masks both
//! kinds of pair the same way, and averages the per-pair gradients. The
//! optimizer is AdamW with a linear warmup to `lr` followed by linear decay.
//!
//! Every random draw comes from a substream named after the epoch, step and
//! batch slot, so results do not depend on how pairs are scheduled across
//! threads.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ArchSpec;
use crate::error::{Error, Result};
use crate::gated::{Dropout, ForwardCtx};
use crate::mat::Mat;
use crate::model::{match_logit, pair_gradients};
use crate::objectives::{apply_masking, LossBreakdown, LossWeights, Masked, MaskingPolicy};
use crate::params::{check_store, init_params, Gradients, ParamStore};
use crate::rng::Rng;
use crate::synth::{sample_negative, Dataset};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the steps spent warming up.
    pub warmup: f64,
    pub weight_decay: f64,
    /// Replaces the architecture's loss weights when set.
    pub weights: Option<LossWeights>,
    pub seed: u64,
    /// Stops early once this many steps have run.
    pub max_steps: Option<usize>,
    pub clip_norm: f64,
    /// Probability that a training pair keeps its own caption.
    pub match_prob: f64,
    pub dropout: f64,
    pub masking: MaskingPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            warmup: 0.1,
            weight_decay: 0.01,
            weights: None,
            seed: 0,
            max_steps: None,
            clip_norm: 1.0,
            match_prob: 0.5,
            dropout: 0.0,
            masking: MaskingPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.max_steps == Some(0) {
            return bad("epochs, batch_size and max_steps must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("lr and weight_decay must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup) || !(0.0..=1.0).contains(&self.match_prob) {
            return bad("warmup and match_prob must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if let Some(w) = self.weights {
            if ![w.mlm, w.mrc_kl, w.itm].iter().all(|x| x.is_finite() && *x >= 0.0) {
                return bad("loss weights must be finite and non-negative");
            }
        }
        self.masking.validate()
    }

    /// The architecture with this config's loss weights applied.
    pub fn effective_arch(&self, spec: &ArchSpec) -> Result<ArchSpec> {
        let mut s = spec.clone();
        if let Some(w) = self.weights {
            s.weights = w;
        }
        s.validate()?;
        Ok(s)
    }
}

/// Learning rate of step `s` (0-based) out of `total`, `warmup` of them
/// ramping up.
pub fn scheduled_lr(lr: f64, s: usize, total: usize, warmup: usize) -> f64 {
    if s < warmup {
        lr * (s + 1) as f64 / warmup as f64
    } else {
        lr * (total - s) as f64 / (total - warmup) as f64
    }
}

/// Tensors whose last name component starts with `w` (projection and
/// embedding matrices) are decayed; biases and norm parameters are not.
pub fn is_decayed(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|last| last.starts_with('w'))
}

#[derive(Clone, Debug)]
struct Moments {
    m: Mat,
    v: Mat,
    t: u32,
}

/// AdamW over canonical tensors. A tensor whose gradient is entirely zero in
/// a step keeps its moments and only receives weight decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    moments: std::collections::BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
        for (name, t) in store.iter_mut() {
            if weight_decay > 0.0 && is_decayed(name) {
                let f = 1.0 - lr * weight_decay;
                t.value.data_mut().iter_mut().for_each(|x| *x *= f);
            }
            let Some(g) = grads.get(name) else { continue };
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            if g.shape() != t.value.shape() {
                return Err(Error::ShapeMismatch(format!("gradient of `{name}`")));
            }
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Mat::zeros(g.rows(), g.cols()),
                v: Mat::zeros(g.rows(), g.cols()),
                t: 0,
            });
            mo.t += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(mo.t as i32);
            let c2 = 1.0 - ADAM_BETA2.powi(mo.t as i32);
            let it = t
                .value
                .data_mut()
                .iter_mut()
                .zip(mo.m.data_mut().iter_mut())
                .zip(mo.v.data_mut().iter_mut())
                .zip(g.data());
            for (((p, m), v), &gi) in it {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// One line of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Batch means; `mlm` and `mrc_kl` average over matched pairs only and
    /// `total` is the objective the step descended.
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub fn write_history<W: Write>(mut w: W, history: &[StepRecord]) -> Result<()> {
    for r in history {
        let line = serde_json::to_string(r).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_history(text: &str) -> Result<Vec<StepRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::ParseError {
                line: n + 1,
                column: e.column(),
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub store: ParamStore,
    pub history: Vec<StepRecord>,
}

/// Steps `cfg` runs on `n_train` training pairs.
pub fn total_steps(cfg: &TrainConfig, n_train: usize) -> usize {
    let per_epoch = n_train.div_ceil(cfg.batch_size);
    let all = cfg.epochs * per_epoch;
    cfg.max_steps.map_or(all, |m| m.min(all))
}

fn pair_for(ds: &Dataset, i: usize, pool: &[usize], cfg: &TrainConfig, vocab: usize, mut rng: Rng) -> Result<(Masked, bool, Rng)> {
    let matched = rng.bernoulli(cfg.match_prob);
    let t = if matched {
        i
    } else {
        sample_negative(ds, i, pool, &mut rng)
            .ok_or_else(|| Error::InsufficientData("every training caption is identical".into()))?
    };
    let m = apply_masking(&ds.text(t), ds.vision(i), &cfg.masking, vocab, &mut rng)?;
    Ok((m, matched, rng))
}

/// Pretrains a freshly initialized model on the training split.
pub fn train(spec: &ArchSpec, ds: &Dataset, cfg: &TrainConfig, on_step: impl FnMut(&StepRecord)) -> Result<TrainOutput> {
    let store = init_params(spec, cfg.seed);
    train_from(spec, store, ds, cfg, |_| true, on_step)
}

/// Continues training `store`, updating only tensors for which `trainable`
/// holds.
pub fn train_from(
    spec: &ArchSpec,
    mut store: ParamStore,
    ds: &Dataset,
    cfg: &TrainConfig,
    trainable: impl Fn(&str) -> bool,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let spec = cfg.effective_arch(spec)?;
    check_store(&spec, &store)?;
    if ds.vocab.len() > spec.vocab {
        return Err(Error::ShapeMismatch(format!(
            "dataset vocabulary of {} exceeds the model's {}",
            ds.vocab.len(),
            spec.vocab
        )));
    }
    let pool: Vec<usize> = ds.train_indices().collect();
    if pool.len() < 2 {
        return Err(Error::InsufficientData("need at least 2 training pairs".into()));
    }
    let total = total_steps(cfg, pool.len());
    let warmup = (cfg.warmup * total as f64).round() as usize;
    let root = Rng::new(cfg.seed).substream("train");
    let mut opt = AdamW::default();
    let mut history = Vec::with_capacity(total);
    let mut order = pool.clone();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.copy_from_slice(&pool);
        root.substream(&format!("epoch/{epoch}")).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            if step == total {
                break 'epochs;
            }
            let results: Vec<Result<(LossBreakdown, bool, Gradients)>> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let rng = root.substream(&format!("step/{step}/slot/{slot}"));
                    let (m, matched, rng) = pair_for(ds, i, &pool, cfg, spec.vocab, rng)?;
                    let mut ctx = ForwardCtx::default();
                    if cfg.dropout > 0.0 {
                        ctx.dropout = Some(Dropout::new(cfg.dropout, rng.substream("dropout")));
                    }
                    let (b, g) = pair_gradients(&store, &spec, &m, matched, &mut ctx)?;
                    Ok((b, matched, g))
                })
                .collect();
            let mut grads: Gradients = Gradients::new();
            let (mut mlm, mut mrc, mut itm, mut tot, mut n_matched) = (0.0, 0.0, 0.0, 0.0, 0usize);
            for r in results {
                let (b, matched, g) = r?;
                if matched {
                    mlm += b.mlm;
                    mrc += b.mrc_kl;
                    n_matched += 1;
                }
                itm += b.itm;
                tot += b.total;
                for (name, m) in g {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.add_assign(&m)?,
                        None => {
                            grads.insert(name, m);
                        }
                    }
                }
            }
            let n = batch.len() as f64;
            let total_loss = tot / n;
            if !total_loss.is_finite() {
                return Err(Error::DivergedLoss { step, loss: total_loss });
            }
            grads.retain(|name, _| trainable(name));
            let mut sq = 0.0;
            for g in grads.values_mut() {
                *g = g.scale(1.0 / n);
                sq += g.frobenius_sq();
            }
            let grad_norm = sq.sqrt();
            if !grad_norm.is_finite() {
                return Err(Error::DivergedLoss { step, loss: total_loss });
            }
            if grad_norm > cfg.clip_norm {
                let f = cfg.clip_norm / grad_norm;
                grads.values_mut().for_each(|g| *g = g.scale(f));
            }
            let lr = scheduled_lr(cfg.lr, step, total, warmup);
            frozen_step(&mut opt, &mut store, &grads, lr, cfg.weight_decay, &trainable)?;
            let per_matched = |x: f64| if n_matched == 0 { 0.0 } else { x / n_matched as f64 };
            let rec = StepRecord {
                step,
                lr,
                grad_norm,
                loss: LossBreakdown {
                    mlm: per_matched(mlm),
                    mrc_kl: per_matched(mrc),
                    itm: itm / n,
                    weights: spec.weights,
                    total: total_loss,
                },
            };
            on_step(&rec);
            history.push(rec);
            step += 1;
        }
    }
    Ok(TrainOutput { store, history })
}

/// An optimizer step that leaves non-trainable tensors alone entirely.
fn frozen_step(
    opt: &mut AdamW,
    store: &mut ParamStore,
    grads: &Gradients,
    lr: f64,
    weight_decay: f64,
    trainable: &impl Fn(&str) -> bool,
) -> Result<()> {
    let frozen: Vec<(String, Mat)> = store
        .iter()
        .filter(|(n, _)| !trainable(n))
        .map(|(n, t)| (n.clone(), t.value.clone()))
        .collect();
    opt.step(store, grads, lr, weight_decay)?;
    for (n, v) in frozen {
        *store.value_mut(&n)? = v;
    }
    Ok(())
}

/// Whether a tensor belongs to the matching head or the pooler.
pub fn is_itm_head(name: &str) -> bool {
    name.starts_with("head.pool.") || name.starts_with("head.itm.")
}

/// Re-initializes the pooler and matching head from `seed`, then trains only
/// those tensors on unmasked pairs with the matching loss alone.
pub fn finetune_itm(spec: &ArchSpec, pretrained: &ParamStore, ds: &Dataset, cfg: &TrainConfig, on_step: impl FnMut(&StepRecord)) -> Result<TrainOutput> {
    let fresh = init_params(spec, cfg.seed);
    let mut store = pretrained.clone();
    for (name, t) in fresh.iter() {
        if is_itm_head(name) {
            *store.value_mut(name)? = t.value.clone();
        }
    }
    let cfg = TrainConfig {
        weights: Some(LossWeights {
            mlm: 0.0,
            mrc_kl: 0.0,
            itm: 1.0,
        }),
        masking: MaskingPolicy {
            text_mask_prob: 0.0,
            region_mask_prob: 0.0,
            ..cfg.masking
        },
        ..cfg.clone()
    };
    train_from(spec, store, ds, &cfg, is_itm_head, on_step)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub pairs: usize,
    pub matched_correct: usize,
    pub mismatched_correct: usize,
}

/// Matching accuracy on the held-out split: every held-out image is scored
/// with its own caption and with one other held-out caption that differs
/// from it, and a pair counts as matched when `sigmoid(logit) > 0.5`.
pub fn evaluate_itm(spec: &ArchSpec, store: &ParamStore, ds: &Dataset, seed: u64) -> Result<EvalReport> {
    check_store(spec, store)?;
    let pool: Vec<usize> = ds.heldout_indices().collect();
    let root = Rng::new(seed).substream("eval");
    let scored: Vec<Result<(bool, bool)>> = pool
        .par_iter()
        .map(|&i| {
            let mut rng = root.substream(&format!("image/{i}"));
            let j = sample_negative(ds, i, &pool, &mut rng)
                .ok_or_else(|| Error::InsufficientData("held-out captions are all identical".into()))?;
            let pos = match_logit(store, spec, &ds.text(i), ds.vision(i))?;
            let neg = match_logit(store, spec, &ds.text(j), ds.vision(i))?;
            Ok((pos > 0.0, neg <= 0.0))
        })
        .collect();
    let (mut mc, mut nc) = (0, 0);
    for r in scored {
        let (p, n) = r?;
        mc += usize::from(p);
        nc += usize::from(n);
    }
    let pairs = 2 * pool.len();
    if pairs == 0 {
        return Err(Error::InsufficientData("held-out split is empty".into()));
    }
    Ok(EvalReport {
        accuracy: (mc + nc) as f64 / pairs as f64,
        pairs,
        matched_correct: mc,
        mismatched_correct: nc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::synth::{gen_synth, SynthSpec};

    fn small_data() -> Dataset {
        gen_synth(&SynthSpec {
            n_pairs: 120,
            heldout: 40,
            seed: 5,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    fn bits(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
        store
            .iter()
            .map(|(n, t)| (n.clone(), t.value.data().iter().map(|x| x.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        assert_eq!(scheduled_lr(1.0, 0, 10, 0), 1.0);
        assert!((scheduled_lr(1.0, 0, 100, 10) - 0.1).abs() < 1e-15);
        assert!((scheduled_lr(1.0, 9, 100, 10) - 1.0).abs() < 1e-15);
        assert!((scheduled_lr(1.0, 55, 100, 10) - 0.5).abs() < 1e-15);
        let lrs: Vec<f64> = (0..100).map(|s| scheduled_lr(2e-3, s, 100, 10)).collect();
        assert!(lrs[9..].windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&x| x > 0.0 && x <= 2e-3));
    }

    #[test]
    fn decay_applies_to_weight_matrices_only() {
        assert!(is_decayed("sub0.l.q.w"));
        assert!(is_decayed("head.mlm.w"));
        assert!(is_decayed("sub2.v.ffn.w1"));
        assert!(!is_decayed("sub0.l.q.b"));
        assert!(!is_decayed("sub0.l.attn_ln.gain"));
        assert!(!is_decayed("sub2.v.ffn.b2"));
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let spec = preset("uniter").unwrap();
        let ds = small_data();
        let cfg = TrainConfig {
            lr: 0.0,
            max_steps: Some(4),
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(&spec, &ds, &cfg, |_| {}).unwrap();
        assert_eq!(out.history.len(), 4);
        assert_eq!(bits(&out.store), bits(&init_params(&spec, cfg.seed)));
    }

    #[test]
    fn same_seed_same_history_and_weights() {
        let spec = preset("lxmert").unwrap();
        let ds = small_data();
        let cfg = TrainConfig {
            max_steps: Some(3),
            batch_size: 4,
            dropout: 0.1,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(&spec, &ds, &cfg, |_| {}).unwrap();
        let b = train(&spec, &ds, &cfg, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(bits(&a.store), bits(&b.store));
        let c = train(&spec, &ds, &TrainConfig { seed: 10, ..cfg }, |_| {}).unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn steps_touch_only_tensors_with_gradient_or_decay() {
        let spec = preset("uniter").unwrap();
        let ds = small_data();
        let cfg = TrainConfig {
            max_steps: Some(1),
            batch_size: 4,
            weights: Some(LossWeights {
                mlm: 0.0,
                mrc_kl: 0.0,
                itm: 1.0,
            }),
            ..TrainConfig::default()
        };
        let before = init_params(&spec, cfg.seed);
        let out = train(&spec, &ds, &cfg, |_| {}).unwrap();
        let after = out.store;
        let f = 1.0 - out.history[0].lr * cfg.weight_decay;
        // The unused heads receive no gradient: their biases stay, their
        // weight matrices only shrink.
        for head in ["head.mlm", "head.mrc"] {
            let b = format!("{head}.b");
            assert_eq!(before.value(&b).unwrap(), after.value(&b).unwrap());
            let w0 = before.value(&format!("{head}.w")).unwrap();
            let w1 = after.value(&format!("{head}.w")).unwrap();
            assert!(w0.data().iter().zip(w1.data()).all(|(x0, x1)| *x1 == x0 * f));
        }
        assert_ne!(before.value("head.itm.b").unwrap(), after.value("head.itm.b").unwrap());
    }

    #[test]
    fn loss_falls_over_two_hundred_steps() {
        let spec = preset("uniter").unwrap();
        let ds = small_data();
        let cfg = TrainConfig {
            max_steps: Some(200),
            epochs: 100,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let h = train(&spec, &ds, &cfg, |_| {}).unwrap().history;
        assert_eq!(h.len(), 200);
        let mean = |r: &[StepRecord]| r.iter().map(|s| s.loss.total).sum::<f64>() / r.len() as f64;
        let (first, last) = (mean(&h[..20]), mean(&h[180..]));
        assert!(last < first, "smoothed loss {first} -> {last}");
    }

    #[test]
    fn non_finite_loss_aborts_with_the_step() {
        let spec = preset("uniter").unwrap();
        let ds = small_data();
        let mut store = init_params(&spec, 0);
        store.value_mut("head.itm.b").unwrap().data_mut()[0] = f64::NAN;
        let cfg = TrainConfig {
            max_steps: Some(2),
            batch_size: 2,
            ..TrainConfig::default()
        };
        let err = train_from(&spec, store, &ds, &cfg, |_| true, |_| {}).unwrap_err();
        assert!(matches!(err, Error::DivergedLoss { step: 0, .. }), "{err:?}");
    }

    #[test]
    fn untrained_model_scores_at_chance() {
        let spec = preset("vilbert").unwrap();
        let ds = gen_synth(&SynthSpec::default()).unwrap();
        let r = evaluate_itm(&spec, &init_params(&spec, 0), &ds, 0).unwrap();
        assert_eq!(r.pairs, 400);
        assert!((r.accuracy - 0.5).abs() <= 0.1, "{r:?}");
    }

    #[test]
    fn evaluation_rejects_foreign_checkpoints() {
        let ds = small_data();
        let store = init_params(&preset("vilbert").unwrap(), 0);
        let err = evaluate_itm(&preset("uniter").unwrap(), &store, &ds, 0).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn finetuning_moves_only_the_matching_head() {
        let spec = preset("vl-bert").unwrap();
        let ds = small_data();
        let pretrained = init_params(&spec, 1);
        let cfg = TrainConfig {
            max_steps: Some(2),
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = finetune_itm(&spec, &pretrained, &ds, &cfg, |_| {}).unwrap();
        for (name, t) in out.store.iter() {
            let same = t.value == *pretrained.value(name).unwrap();
            assert_eq!(same, !is_itm_head(name), "{name}");
        }
        assert!(out.history.iter().all(|r| r.loss.mlm == 0.0 && r.loss.total == r.loss.itm));
    }

    #[test]
    fn history_round_trips_through_json_lines() {
        let spec = preset("uniter").unwrap();
        let ds = small_data();
        let cfg = TrainConfig {
            max_steps: Some(2),
            batch_size: 2,
            ..TrainConfig::default()
        };
        let h = train(&spec, &ds, &cfg, |_| {}).unwrap().history;
        let mut buf = Vec::new();
        write_history(&mut buf, &h).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().next().unwrap().contains("\"mrc_kl\""));
        assert_eq!(read_history(&text).unwrap(), h);
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = [
            TrainConfig { lr: -1.0, ..TrainConfig::default() },
            TrainConfig { warmup: 1.5, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))), "{c:?}");
        }
        let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"lr": 0.01, "bogus": 1}"#);
        assert!(parsed.is_err());
    }
}
