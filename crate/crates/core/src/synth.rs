//! Synthetic paired image-caption data.
//!
//! Every class has a random prototype feature vector; a region of class `c`
//! is its prototype plus noise, and its detector distribution puts most mass
//! on `c`. Two tasks:
//!
//! * `class_match`: region classes are uniform, and the caption carries one
//!   class word per region plus two filler words, shuffled.
//! * `spatial_relation`: every region of an image lies in its left or its
//!   right half, one of them of class 0, and the caption is `obj00 left` or
//!   `obj00 right`. Nothing but the boxes tells the two apart.
//!
//! `correlation` is the probability that a caption follows its image; the
//! rest are drawn independently of it (`class_match` draws fresh classes,
//! `spatial_relation` a fresh side).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{RegionBox, TextBatch, Vocab, VisionBatch, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::Rng;
use crate::vfr::{read_vfr, write_vfr, ImageRecord};

pub const FEATURES_FILE: &str = "features.vfr";
pub const CAPTIONS_FILE: &str = "captions.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SPEC_FILE: &str = "synth.json";

const IMAGE_W: u32 = 640;
const IMAGE_H: u32 = 480;
const FILLERS_PER_CAPTION: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    #[default]
    ClassMatch,
    SpatialRelation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub task: SynthTask,
    pub n_pairs: usize,
    /// The last `heldout` pairs are reserved for evaluation.
    pub heldout: usize,
    pub vocab: usize,
    pub regions: usize,
    pub d_feat: usize,
    pub classes: usize,
    pub correlation: f64,
    /// Standard deviation of the per-region feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            task: SynthTask::ClassMatch,
            n_pairs: 1000,
            heldout: 200,
            vocab: 1000,
            regions: 8,
            d_feat: 32,
            classes: 16,
            correlation: 1.0,
            noise: 0.5,
            seed: 0,
        }
    }
}

pub fn class_word(c: usize) -> String {
    format!("obj{c:02}")
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_pairs < 2 {
            return bad("n_pairs must be at least 2");
        }
        if self.heldout >= self.n_pairs || self.n_pairs - self.heldout < 2 {
            return bad("need at least 2 training pairs after the held-out split");
        }
        if self.heldout == 1 {
            return bad("held-out split needs at least 2 pairs");
        }
        if self.classes < 2 || self.regions < 2 || self.d_feat == 0 {
            return bad("need at least 2 classes, 2 regions and a positive feature width");
        }
        if self.vocab < NUM_SPECIAL + self.classes + 3 {
            return bad("vocab too small for the class, relation and filler words");
        }
        if !(0.0..=1.0).contains(&self.correlation) || !(self.noise >= 0.0) {
            return bad("correlation must lie in [0, 1] and noise must be non-negative");
        }
        Ok(())
    }

    /// Special tokens, class words, `left`, `right`, then fillers up to
    /// `vocab` entries.
    pub fn vocabulary(&self) -> Result<Vocab> {
        let mut words: Vec<String> = (0..self.classes).map(class_word).collect();
        words.push("left".into());
        words.push("right".into());
        let fillers = self.vocab - NUM_SPECIAL - words.len();
        words.extend((0..fillers).map(|i| format!("w{i:03}")));
        Vocab::new(words)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub vocab: Vocab,
    pub images: Vec<ImageRecord>,
    /// Caption of `images[i]`.
    pub captions: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.len() - self.spec.heldout
    }

    pub fn heldout_indices(&self) -> std::ops::Range<usize> {
        self.len() - self.spec.heldout..self.len()
    }

    pub fn text(&self, i: usize) -> TextBatch {
        self.vocab.encode(&self.captions[i])
    }

    pub fn vision(&self, i: usize) -> &VisionBatch {
        &self.images[i].vision
    }

    /// Writes the four dataset files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut vfr = Vec::new();
        write_vfr(&mut vfr, &self.images)?;
        fs::write(dir.join(FEATURES_FILE), vfr)?;
        let mut tsv = String::new();
        for (r, c) in self.images.iter().zip(&self.captions) {
            tsv.push_str(&format!("{}\t{}\n", r.id, c));
        }
        fs::write(dir.join(CAPTIONS_FILE), tsv)?;
        fs::write(dir.join(VOCAB_FILE), self.vocab.to_lines())?;
        let spec = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        fs::write(dir.join(SPEC_FILE), spec + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let spec_text = fs::read_to_string(dir.join(SPEC_FILE))?;
        let spec: SynthSpec = serde_json::from_str(&spec_text).map_err(|e| Error::ParseError {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        let vocab = Vocab::from_lines(&fs::read_to_string(dir.join(VOCAB_FILE))?)?;
        let (_, images) = read_vfr(fs::File::open(dir.join(FEATURES_FILE)).map(std::io::BufReader::new)?)?;
        let tsv = fs::read_to_string(dir.join(CAPTIONS_FILE))?;
        let mut captions = Vec::with_capacity(images.len());
        for (n, line) in tsv.lines().enumerate() {
            let (id, cap) = line
                .split_once('\t')
                .ok_or_else(|| Error::CorruptData(format!("caption line {} has no tab", n + 1)))?;
            let id: u64 = id
                .parse()
                .map_err(|_| Error::CorruptData(format!("caption line {} has a bad image id", n + 1)))?;
            match images.get(n) {
                Some(r) if r.id == id => captions.push(cap.to_string()),
                _ => return Err(Error::CorruptData(format!("caption line {} does not match image order", n + 1))),
            }
        }
        if captions.len() != images.len() || images.len() != spec.n_pairs {
            return Err(Error::CorruptData(format!(
                "{} images, {} captions, spec says {}",
                images.len(),
                captions.len(),
                spec.n_pairs
            )));
        }
        Ok(Dataset {
            spec,
            vocab,
            images,
            captions,
        })
    }
}

fn detector_row(rng: &mut Rng, classes: usize, true_class: usize) -> Vec<f64> {
    let p_true = 0.5 + 0.4 * rng.uniform();
    let mut rest: Vec<f64> = (0..classes).map(|_| 0.05 + rng.uniform()).collect();
    rest[true_class] = 0.0;
    let s: f64 = rest.iter().sum();
    rest.iter_mut().for_each(|x| *x *= (1.0 - p_true) / s);
    rest[true_class] = p_true;
    rest
}

/// Integer pixel box; `x_range` bounds the left edge.
fn random_box(rng: &mut Rng, x_lo: u32, x_hi: u32) -> RegionBox {
    let w = 32 + rng.below(96) as u32;
    let h = 32 + rng.below(96) as u32;
    let x1 = x_lo + rng.below((x_hi - x_lo - w) as usize + 1) as u32;
    let y1 = rng.below((IMAGE_H - h) as usize + 1) as u32;
    RegionBox {
        x1: x1 as f64,
        y1: y1 as f64,
        x2: (x1 + w) as f64,
        y2: (y1 + h) as f64,
        width: IMAGE_W as f64,
        height: IMAGE_H as f64,
    }
}

/// Deterministic in `spec` (including its seed).
pub fn gen_synth(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let vocab = spec.vocabulary()?;
    let root = Rng::new(spec.seed);
    let mut proto_rng = root.substream("prototypes");
    let protos = Mat::from_fn(spec.classes, spec.d_feat, |_, _| proto_rng.normal());
    let n_fillers = spec.vocab - NUM_SPECIAL - spec.classes - 2;
    let k = spec.regions;

    let mut images = Vec::with_capacity(spec.n_pairs);
    let mut captions = Vec::with_capacity(spec.n_pairs);
    for i in 0..spec.n_pairs {
        let mut rng = root.substream(&format!("image/{i}"));
        let follow = rng.bernoulli(spec.correlation);
        let mut layout: Vec<(usize, RegionBox)> = Vec::with_capacity(k);
        let caption = match spec.task {
            SynthTask::ClassMatch => {
                for _ in 0..k {
                    let c = rng.below(spec.classes);
                    layout.push((c, random_box(&mut rng, 0, IMAGE_W)));
                }
                let named: Vec<usize> = if follow {
                    layout.iter().map(|(c, _)| *c).collect()
                } else {
                    (0..k).map(|_| rng.below(spec.classes)).collect()
                };
                let mut words: Vec<String> = named.into_iter().map(class_word).collect();
                words.extend((0..FILLERS_PER_CAPTION).map(|_| format!("w{:03}", rng.below(n_fillers))));
                rng.shuffle(&mut words);
                words.join(" ")
            }
            SynthTask::SpatialRelation => {
                let left = rng.bernoulli(0.5);
                let half = IMAGE_W / 2;
                let (lo, hi) = if left { (0, half) } else { (half, IMAGE_W) };
                layout.push((0, random_box(&mut rng, lo, hi)));
                for _ in 1..k {
                    let c = 1 + rng.below(spec.classes - 1);
                    layout.push((c, random_box(&mut rng, lo, hi)));
                }
                let said_left = if follow { left } else { rng.bernoulli(0.5) };
                format!("{} {}", class_word(0), if said_left { "left" } else { "right" })
            }
        };
        rng.shuffle(&mut layout);
        let mut features = Mat::zeros(k, spec.d_feat);
        let mut dists = Mat::zeros(k, spec.classes);
        for (r, (c, _)) in layout.iter().enumerate() {
            for (j, x) in features.row_mut(r).iter_mut().enumerate() {
                // Round through f32 so the in-memory data equals what the
                // feature file stores.
                *x = f64::from((protos.get(*c, j) + spec.noise * rng.normal()) as f32);
            }
            let row = detector_row(&mut rng, spec.classes, *c);
            for (dst, p) in dists.row_mut(r).iter_mut().zip(&row) {
                *dst = f64::from(*p as f32);
            }
        }
        images.push(ImageRecord {
            id: i as u64,
            vision: VisionBatch {
                features,
                boxes: layout.into_iter().map(|(_, b)| b).collect(),
                detector_dists: dists,
            },
        });
        captions.push(caption);
    }
    Ok(Dataset {
        spec: spec.clone(),
        vocab,
        images,
        captions,
    })
}

/// An index from `pool` other than `i` whose caption text differs from
/// caption `i`, uniformly among those.
pub fn sample_negative(ds: &Dataset, i: usize, pool: &[usize], rng: &mut Rng) -> Option<usize> {
    let eligible: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&j| j != i && ds.captions[j] != ds.captions[i])
        .collect();
    if eligible.is_empty() {
        None
    } else {
        Some(eligible[rng.below(eligible.len())])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: SynthTask, correlation: f64) -> SynthSpec {
        SynthSpec {
            task,
            n_pairs: 40,
            heldout: 10,
            vocab: 60,
            correlation,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_and_byte_identical() {
        let spec = small(SynthTask::ClassMatch, 1.0);
        let a = gen_synth(&spec).unwrap();
        let b = gen_synth(&spec).unwrap();
        assert_eq!(a, b);
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        a.write(da.path()).unwrap();
        b.write(db.path()).unwrap();
        for f in [FEATURES_FILE, CAPTIONS_FILE, VOCAB_FILE, SPEC_FILE] {
            assert_eq!(fs::read(da.path().join(f)).unwrap(), fs::read(db.path().join(f)).unwrap(), "{f}");
        }
        assert_eq!(Dataset::read(da.path()).unwrap(), a);
    }

    #[test]
    fn record_arithmetic() {
        let spec = SynthSpec {
            n_pairs: 100,
            heldout: 20,
            ..SynthSpec::default()
        };
        let ds = gen_synth(&spec).unwrap();
        assert_eq!(ds.len(), 100);
        assert!(ds.images.iter().all(|r| r.vision.num_regions() == 8));
        let mut bytes = Vec::new();
        write_vfr(&mut bytes, &ds.images).unwrap();
        assert_eq!(bytes.len(), 20 + 100 * (8 + 8 * (32 + 6 + 16) * 4));
        for r in &ds.images {
            r.vision.validate().unwrap();
        }
    }

    #[test]
    fn captions_follow_images_when_correlated() {
        let ds = gen_synth(&small(SynthTask::ClassMatch, 1.0)).unwrap();
        for i in 0..ds.len() {
            let v = ds.vision(i);
            let mut named: Vec<usize> = ds.captions[i]
                .split_whitespace()
                .filter_map(|w| w.strip_prefix("obj").map(|n| n.parse().unwrap()))
                .collect();
            let mut seen: Vec<usize> = (0..v.num_regions())
                .map(|r| {
                    let row = v.detector_dists.row(r);
                    (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
                })
                .collect();
            named.sort_unstable();
            seen.sort_unstable();
            assert_eq!(named, seen, "caption {i}");
            assert_eq!(ds.captions[i].split_whitespace().count(), v.num_regions() + 2);
        }
    }

    #[test]
    fn uncorrelated_captions_rarely_match() {
        let ds = gen_synth(&small(SynthTask::ClassMatch, 0.0)).unwrap();
        let exact = (0..ds.len())
            .filter(|&i| {
                let mut named: Vec<&str> = ds.captions[i].split_whitespace().filter(|w| w.starts_with("obj")).collect();
                named.sort_unstable();
                let mut seen: Vec<String> = (0..8)
                    .map(|r| {
                        let row = ds.vision(i).detector_dists.row(r);
                        class_word((0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap())
                    })
                    .collect();
                seen.sort_unstable();
                named == seen.iter().map(String::as_str).collect::<Vec<_>>()
            })
            .count();
        assert_eq!(exact, 0);
    }

    #[test]
    fn spatial_captions_state_the_side() {
        let ds = gen_synth(&small(SynthTask::SpatialRelation, 1.0)).unwrap();
        for i in 0..ds.len() {
            let v = ds.vision(i);
            let target = (0..v.num_regions())
                .find(|&r| {
                    let row = v.detector_dists.row(r);
                    row.iter().cloned().fold(f64::MIN, f64::max) == row[0]
                })
                .unwrap();
            let b = v.boxes[target];
            let left = b.x2 <= b.width / 2.0;
            assert!(v.boxes.iter().all(|o| (o.x2 <= o.width / 2.0) == left && (o.x1 >= o.width / 2.0) != left));
            let side = if left { "left" } else { "right" };
            assert_eq!(ds.captions[i], format!("obj00 {side}"));
        }
    }

    #[test]
    fn negatives_never_share_text() {
        let ds = gen_synth(&small(SynthTask::SpatialRelation, 1.0)).unwrap();
        let pool: Vec<usize> = ds.train_indices().collect();
        let mut rng = Rng::new(0);
        for i in pool.clone() {
            let j = sample_negative(&ds, i, &pool, &mut rng).unwrap();
            assert_ne!(j, i);
            assert_ne!(ds.captions[j], ds.captions[i]);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(gen_synth(&SynthSpec { n_pairs: 1, heldout: 0, ..SynthSpec::default() }).is_err());
        assert!(gen_synth(&SynthSpec { vocab: 10, ..SynthSpec::default() }).is_err());
        assert!(gen_synth(&SynthSpec { correlation: 1.5, ..SynthSpec::default() }).is_err());
    }
}
