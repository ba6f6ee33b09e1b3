//! One-way ANOVA and exact permutation tests over multi-run score tables.

use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Largest `|a| + |b|` enumerated exactly.
pub const EXACT_CAP: usize = 26;

// ---------------------------------------------------------------------------
// Special functions

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, nine terms).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction of `I_x(a, b)` by the modified Lentz method.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`. The continued fraction is
/// evaluated directly when `x < (a + 1) / (a + b + 2)`, where it converges
/// fastest, and through `1 − I_{1−x}(b, a)` otherwise.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Upper tail `P(F > f)` of the F distribution with `(d1, d2)` degrees of
/// freedom.
pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    reg_inc_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
}

// ---------------------------------------------------------------------------
// Tests

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Anova {
    pub f: f64,
    pub p: f64,
    pub df_between: usize,
    pub df_within: usize,
    /// Within-group variance is exactly zero; `f` is infinite (or zero when
    /// the groups also share one mean) and `p` is 0 (or 1).
    pub degenerate: bool,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidConfig("scores must be finite".into()))
    }
}

pub fn one_way_anova(groups: &[&[f64]]) -> Result<Anova> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::InsufficientData("ANOVA needs at least 2 groups of at least 2 observations".into()));
    }
    for g in groups {
        check_finite(g)?;
    }
    let n: usize = groups.iter().map(|g| g.len()).sum();
    let k = groups.len();
    let grand = groups.iter().flat_map(|g| g.iter()).sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in groups {
        let m = mean(g);
        ssb += g.len() as f64 * (m - grand) * (m - grand);
        ssw += g.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    }
    let (d1, d2) = (k - 1, n - k);
    if ssw == 0.0 {
        let separated = ssb > 0.0;
        return Ok(Anova {
            f: if separated { f64::INFINITY } else { 0.0 },
            p: if separated { 0.0 } else { 1.0 },
            df_between: d1,
            df_within: d2,
            degenerate: true,
        });
    }
    let f = (ssb / d1 as f64) / (ssw / d2 as f64);
    Ok(Anova {
        f,
        p: f_sf(f, d1 as f64, d2 as f64),
        df_between: d1,
        df_within: d2,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PermTest {
    pub p: f64,
    /// False for the Monte Carlo estimate.
    pub exact: bool,
    /// Relabelings enumerated or sampled.
    pub relabelings: u64,
}

/// `|mean(a) − mean(b)|` expressed through the sum of the `a` side: the
/// statistic of a relabeling is `|s − c| · (1/n_a + 1/n_b)` with
/// `c = total · n_a / n`, so comparing `|s − c|` is enough.
struct Stat {
    c: f64,
    threshold: f64,
}

impl Stat {
    fn new(a: &[f64], b: &[f64]) -> Self {
        let total: f64 = a.iter().chain(b).sum();
        let n = (a.len() + b.len()) as f64;
        let c = total * a.len() as f64 / n;
        let obs = (a.iter().sum::<f64>() - c).abs();
        let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs())) * n;
        // Relabelings whose statistic equals the observed one up to rounding
        // count as ties.
        Stat {
            c,
            threshold: obs - 1e-12 * scale.max(f64::MIN_POSITIVE),
        }
    }

    fn extreme(&self, s: f64) -> bool {
        (s - self.c).abs() >= self.threshold
    }
}

fn count_extreme(x: &[f64], start: usize, left: usize, sum: f64, stat: &Stat) -> u64 {
    if left == 0 {
        return u64::from(stat.extreme(sum));
    }
    let mut hits = 0;
    for i in start..=x.len() - left {
        hits += count_extreme(x, i + 1, left - 1, sum + x[i], stat);
    }
    hits
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

/// Two-sided exact test on the difference of means: the fraction of all
/// `C(n_a + n_b, n_a)` relabelings at least as extreme as the observed one.
pub fn exact_perm_test(a: &[f64], b: &[f64]) -> Result<PermTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("both groups need observations".into()));
    }
    check_finite(a)?;
    check_finite(b)?;
    let n = a.len() + b.len();
    if n > EXACT_CAP {
        return Err(Error::TooLargeForExact { n, cap: EXACT_CAP });
    }
    let stat = Stat::new(a, b);
    let x: Vec<f64> = a.iter().chain(b).copied().collect();
    let hits = count_extreme(&x, 0, a.len(), 0.0, &stat);
    let total = binomial(n, a.len());
    Ok(PermTest {
        p: hits as f64 / total as f64,
        exact: true,
        relabelings: total,
    })
}

/// Monte Carlo version: `(hits + 1) / (draws + 1)` over random relabelings.
pub fn monte_carlo_perm_test(a: &[f64], b: &[f64], draws: u64, rng: &mut Rng) -> Result<PermTest> {
    if a.is_empty() || b.is_empty() || draws == 0 {
        return Err(Error::InsufficientData("both groups and the draw count must be non-empty".into()));
    }
    check_finite(a)?;
    check_finite(b)?;
    let stat = Stat::new(a, b);
    let mut x: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut hits = 0u64;
    for _ in 0..draws {
        rng.shuffle(&mut x);
        hits += u64::from(stat.extreme(x[..a.len()].iter().sum()));
    }
    Ok(PermTest {
        p: (hits + 1) as f64 / (draws + 1) as f64,
        exact: false,
        relabelings: draws,
    })
}

// ---------------------------------------------------------------------------
// Score tables

/// Per-model run scores, models in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub models: Vec<(String, Vec<f64>)>,
}

#[derive(serde::Deserialize)]
struct Row {
    model: String,
    run: String,
    score: f64,
}

impl ScoreTable {
    pub fn push(&mut self, model: &str, score: f64) {
        match self.models.iter_mut().find(|(m, _)| m == model) {
            Some((_, v)) => v.push(score),
            None => self.models.push((model.to_string(), vec![score])),
        }
    }

    /// Reads CSV with header `model,run,score`. A `(model, run)` pair may
    /// appear once.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["model", "run", "score"] {
            return Err(Error::ParseError {
                line: 1,
                column: 1,
                message: "header must be `model,run,score`".into(),
            });
        }
        let mut table = ScoreTable::default();
        let mut seen = std::collections::BTreeSet::new();
        for rec in rdr.deserialize::<Row>() {
            let row = rec.map_err(csv_err)?;
            if !row.score.is_finite() {
                return Err(Error::InvalidConfig(format!("score of {} run {} is not finite", row.model, row.run)));
            }
            if !seen.insert((row.model.clone(), row.run.clone())) {
                return Err(Error::InvalidConfig(format!("{} run {} appears twice", row.model, row.run)));
            }
            table.push(&row.model, row.score);
        }
        Ok(table)
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::ParseError {
        line,
        column: 0,
        message: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSummary {
    pub model: String,
    pub runs: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub sd: Option<f64>,
}

pub fn summarize(table: &ScoreTable) -> Vec<ModelSummary> {
    table
        .models
        .iter()
        .map(|(m, v)| {
            let mu = mean(v);
            let sd = (v.len() > 1).then(|| (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (v.len() - 1) as f64).sqrt());
            ModelSummary {
                model: m.clone(),
                runs: v.len(),
                min: v.iter().cloned().fold(f64::INFINITY, f64::min),
                max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                mean: mu,
                sd,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub models: Vec<String>,
    pub alpha: f64,
    /// Unordered pairs actually tested.
    pub pairs_tested: usize,
    /// `alpha / pairs_tested`.
    pub threshold: f64,
    /// Raw p-values; `None` on the diagonal and for untested pairs.
    pub p_values: Vec<Vec<Option<f64>>>,
    pub significant: Vec<Vec<bool>>,
    /// Models left out of every test for having fewer than 2 runs.
    pub skipped: Vec<String>,
    /// False when some pair fell back to Monte Carlo.
    pub exact: bool,
    pub anova: Option<Anova>,
}

/// Pairwise exact tests with Bonferroni correction, plus the overall ANOVA
/// over the testable models. With `mc_draws` set, pairs above the
/// enumeration cap use the Monte Carlo test instead of failing.
pub fn compare_models(table: &ScoreTable, alpha: f64, mc_draws: Option<u64>, seed: u64) -> Result<Comparison> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig("alpha must lie in (0, 1)".into()));
    }
    let m = table.models.len();
    let models: Vec<String> = table.models.iter().map(|(n, _)| n.clone()).collect();
    let testable: Vec<bool> = table.models.iter().map(|(_, v)| v.len() >= 2).collect();
    let skipped = models.iter().zip(&testable).filter(|(_, &t)| !t).map(|(n, _)| n.clone()).collect();
    let mut p_values = vec![vec![None; m]; m];
    let mut exact = true;
    let root = Rng::new(seed).substream("perm");
    for i in 0..m {
        for j in i + 1..m {
            if !(testable[i] && testable[j]) {
                continue;
            }
            let (a, b) = (&table.models[i].1, &table.models[j].1);
            let t = match exact_perm_test(a, b) {
                Err(Error::TooLargeForExact { .. }) if mc_draws.is_some() => {
                    let mut rng = root.substream(&format!("{i}/{j}"));
                    monte_carlo_perm_test(a, b, mc_draws.unwrap_or_default(), &mut rng)?
                }
                r => r?,
            };
            exact &= t.exact;
            p_values[i][j] = Some(t.p);
            p_values[j][i] = Some(t.p);
        }
    }
    let pairs_tested = p_values.iter().flatten().filter(|p| p.is_some()).count() / 2;
    let threshold = if pairs_tested > 0 { alpha / pairs_tested as f64 } else { alpha };
    let significant = p_values
        .iter()
        .map(|row| row.iter().map(|p| p.is_some_and(|p| p < threshold)).collect())
        .collect();
    let groups: Vec<&[f64]> = table
        .models
        .iter()
        .zip(&testable)
        .filter(|(_, &t)| t)
        .map(|((_, v), _)| v.as_slice())
        .collect();
    let anova = if groups.len() >= 2 { Some(one_way_anova(&groups)?) } else { None };
    Ok(Comparison {
        models,
        alpha,
        pairs_tested,
        threshold,
        p_values,
        significant,
        skipped,
        exact,
        anova,
    })
}

/// Significance matrix as CSV: a header of model names, then one row per
/// model with `1` for significant pairs.
pub fn write_matrix_csv<W: Write>(w: W, c: &Comparison) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut header = vec!["model".to_string()];
    header.extend(c.models.iter().cloned());
    wtr.write_record(&header).map_err(io)?;
    for (name, row) in c.models.iter().zip(&c.significant) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|&s| if s { "1" } else { "0" }.to_string()));
        wtr.write_record(&rec).map_err(io)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(w: W, rows: &[ModelSummary]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.to_string());
    wtr.write_record(["model", "runs", "min", "max", "mean", "sd"]).map_err(io)?;
    for r in rows {
        wtr.write_record([
            r.model.clone(),
            r.runs.to_string(),
            r.min.to_string(),
            r.max.to_string(),
            r.mean.to_string(),
            r.sd.map_or(String::new(), |s| s.to_string()),
        ])
        .map_err(io)?;
    }
    wtr.flush()?;
    Ok(())
}
