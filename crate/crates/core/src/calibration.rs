//! Calibration error measures, temperature-based recalibration and
//! reliability tables grouped by relation frequency.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid_scalar;
use crate::error::{io_err, json_err, Error, Result};
use crate::model::DocumentScores;

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_TOP_GROUP: usize = 7;
/// Temperature search interval.
pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;
pub const ALPHA_MAX: f64 = 5.0;

/// One binary calibration instance: a (pair, class) coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Instance {
    pub class: usize,
    pub logit: f64,
    pub confidence: f64,
    pub correct: bool,
}

/// Which coordinates count as instances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Population {
    /// Every (pair, class) coordinate, NA included.
    #[default]
    All,
    /// Only coordinates predicted positive (`p > θ`).
    Predicted,
}

pub fn instances(scores: &[DocumentScores], population: Population, threshold: f64) -> Vec<Instance> {
    let mut out = Vec::new();
    for s in scores {
        for (i, (&p, &y)) in s.probs.iter().zip(&s.targets).enumerate() {
            if population == Population::Predicted && p <= threshold {
                continue;
            }
            out.push(Instance {
                class: i % s.classes,
                logit: s.logits[i],
                confidence: p,
                correct: y == 1.0,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub confidence: f64,
    pub accuracy: f64,
}

/// Non-empty fixed-width bins over [0, 1].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BinnedTable {
    pub bins: Vec<Bin>,
}

impl BinnedTable {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// Bin `b` covers `[b/B, (b+1)/B)`; the last bin also holds 1.
fn bin_index(c: f64, bins: usize) -> usize {
    let mut b = ((c * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    let lo = |b: usize| b as f64 / bins as f64;
    if c < lo(b) && b > 0 {
        b -= 1;
    } else if b + 1 < bins && c >= lo(b + 1) {
        b += 1;
    }
    b
}

fn check_confidence(c: f64) -> Result<()> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(Error::Calibration(format!("confidence {c} outside [0, 1]")))
    }
}

pub fn binned_table(inst: &[Instance], bins: usize) -> Result<BinnedTable> {
    if bins == 0 {
        return Err(Error::Calibration("bin count must be positive".into()));
    }
    let mut acc = vec![(0usize, 0.0f64, 0usize); bins];
    for i in inst {
        check_confidence(i.confidence)?;
        let a = &mut acc[bin_index(i.confidence, bins)];
        a.0 += 1;
        a.1 += i.confidence;
        a.2 += i.correct as usize;
    }
    Ok(BinnedTable {
        bins: acc
            .iter()
            .enumerate()
            .filter(|(_, a)| a.0 > 0)
            .map(|(b, &(n, conf, correct))| Bin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                count: n,
                confidence: conf / n as f64,
                accuracy: correct as f64 / n as f64,
            })
            .collect(),
    })
}

/// `Σ_b (n_b / N) |acc(b) − conf(b)|` over fixed-width bins.
pub fn ece(inst: &[Instance], bins: usize) -> Result<f64> {
    if inst.is_empty() {
        return Err(Error::Calibration("no calibration instances".into()));
    }
    let t = binned_table(inst, bins)?;
    let n = inst.len() as f64;
    Ok(t.bins
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

/// Per class, instances sorted by confidence are split into `min(R, n)`
/// equal-population ranges (earlier ranges take the remainder); the result is
/// the mean `|acc − conf|` over every range of every class.
pub fn ace(inst: &[Instance], ranges: usize) -> Result<f64> {
    if inst.is_empty() {
        return Err(Error::Calibration("no calibration instances".into()));
    }
    if ranges == 0 {
        return Err(Error::Calibration("range count must be positive".into()));
    }
    let classes = inst.iter().map(|i| i.class).max().unwrap_or(0) + 1;
    let mut by_class: Vec<Vec<(f64, bool)>> = vec![Vec::new(); classes];
    for i in inst {
        check_confidence(i.confidence)?;
        by_class[i.class].push((i.confidence, i.correct));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for mut v in by_class.into_iter().filter(|v| !v.is_empty()) {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        let r = ranges.min(v.len());
        let (base, extra) = (v.len() / r, v.len() % r);
        let mut start = 0;
        for k in 0..r {
            let len = base + (k < extra) as usize;
            let part = &v[start..start + len];
            let conf = part.iter().map(|x| x.0).sum::<f64>() / len as f64;
            let acc = part.iter().filter(|x| x.1).count() as f64 / len as f64;
            total += (acc - conf).abs();
            count += 1;
            start += len;
        }
    }
    Ok(total / count as f64)
}

/// `−[y log σ(z) + (1−y) log(1−σ(z))]` computed as `softplus(z) − y z`.
fn bce_logit(z: f64, y: f64) -> f64 {
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - y * z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TemperatureModel {
    Identity,
    Scalar { temperature: f64 },
    ClassAware { temperature: f64, alpha: f64, temperatures: Vec<f64> },
}

impl TemperatureModel {
    /// Per-class temperatures `T (1 + α log(f_max / f_k))`, frequencies floored at 1.
    pub fn class_aware(temperature: f64, alpha: f64, frequencies: &[usize]) -> Self {
        let f: Vec<f64> = frequencies.iter().map(|&x| x.max(1) as f64).collect();
        let fmax = f.iter().cloned().fold(1.0, f64::max);
        Self::ClassAware {
            temperature,
            alpha,
            temperatures: f.iter().map(|fk| temperature * (1.0 + alpha * (fmax / fk).ln())).collect(),
        }
    }

    pub fn temperature(&self, class: usize) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Scalar { temperature } => *temperature,
            Self::ClassAware { temperatures, .. } => temperatures[class],
        }
    }

    pub fn scaled_logit(&self, logit: f64, class: usize) -> f64 {
        match self {
            Self::Identity => logit,
            _ => logit / self.temperature(class),
        }
    }

    pub fn probability(&self, logit: f64, class: usize) -> f64 {
        sigmoid_scalar(self.scaled_logit(logit, class))
    }

    /// Recomputes probabilities (and logits) of every coordinate. The identity
    /// model returns the scores unchanged.
    pub fn apply(&self, scores: &[DocumentScores]) -> Vec<DocumentScores> {
        if *self == Self::Identity {
            return scores.to_vec();
        }
        scores
            .iter()
            .map(|s| {
                let mut s = s.clone();
                for (i, (l, p)) in s.logits.iter_mut().zip(s.probs.iter_mut()).enumerate() {
                    *l = self.scaled_logit(*l, i % s.classes);
                    *p = sigmoid_scalar(*l);
                }
                s
            })
            .collect()
    }

    pub fn mean_bce(&self, inst: &[Instance]) -> f64 {
        inst.iter()
            .map(|i| bce_logit(self.scaled_logit(i.logit, i.class), i.correct as u8 as f64))
            .sum::<f64>()
            / inst.len() as f64
    }
}

/// Minimizer of `f` on `[a, b]` by golden-section search, also comparing the
/// end points and any `extra` candidates; ties keep the earlier candidate.
fn golden_min(f: impl Fn(f64) -> f64, a: f64, b: f64, extra: &[f64]) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (a, b);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if hi - lo < 1e-12 * (1.0 + lo.abs()) {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let mut best = (0.5 * (lo + hi), f(0.5 * (lo + hi)));
    for &c in extra.iter().chain(&[a, b]) {
        let v = f(c);
        if v < best.1 {
            best = (c, v);
        }
    }
    best.0
}

fn check_fit_data(inst: &[Instance]) -> Result<()> {
    let pos = inst.iter().filter(|i| i.correct).count();
    if pos == 0 || pos == inst.len() {
        return Err(Error::Calibration(
            "temperature fitting needs both positive and negative instances".into(),
        ));
    }
    if let Some(i) = inst.iter().find(|i| !i.logit.is_finite()) {
        return Err(Error::Calibration(format!("non-finite logit {}", i.logit)));
    }
    Ok(())
}

/// Single temperature minimizing mean BCE of `σ(z / T)`, `T ∈ [T_MIN, T_MAX]`.
/// The search runs over `1/T`, in which the objective is convex.
pub fn fit_temperature(inst: &[Instance]) -> Result<TemperatureModel> {
    check_fit_data(inst)?;
    let loss = |beta: f64| {
        inst.iter()
            .map(|i| bce_logit(beta * i.logit, i.correct as u8 as f64))
            .sum::<f64>()
    };
    let beta = golden_min(loss, 1.0 / T_MAX, 1.0 / T_MIN, &[1.0]);
    Ok(TemperatureModel::Scalar { temperature: 1.0 / beta })
}

/// Class-aware temperatures with shared `T` and `α ∈ [0, ALPHA_MAX]`, fit by
/// coordinate descent from the single-temperature solution. Only moves that
/// lower the dev loss are taken, so the fit never ends worse than `fit_temperature`.
pub fn fit_cda_temperature(inst: &[Instance], frequencies: &[usize]) -> Result<TemperatureModel> {
    check_fit_data(inst)?;
    if let Some(i) = inst.iter().find(|i| i.class >= frequencies.len()) {
        return Err(Error::Calibration(format!("no frequency for class {}", i.class)));
    }
    let t0 = fit_temperature(inst)?.temperature(0);
    let loss = |t: f64, a: f64| TemperatureModel::class_aware(t, a, frequencies).mean_bce(inst);
    let (mut t, mut a) = (t0, 0.0);
    let mut best = loss(t, a);
    for _ in 0..50 {
        let start = best;
        let na = golden_min(|x| loss(t, x), 0.0, ALPHA_MAX, &[a]);
        let v = loss(t, na);
        if v < best {
            a = na;
            best = v;
        }
        let beta = golden_min(|x| loss(1.0 / x, a), 1.0 / T_MAX, 1.0 / T_MIN, &[1.0 / t]);
        let v = loss(1.0 / beta, a);
        if v < best {
            t = 1.0 / beta;
            best = v;
        }
        if start - best <= 1e-12 * start.abs().max(1.0) {
            break;
        }
    }
    Ok(TemperatureModel::class_aware(t, a, frequencies))
}

/// NA, the most frequent non-NA relations, and everything else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrouping {
    /// `(group name, class indices)`.
    pub groups: Vec<(String, Vec<usize>)>,
}

impl FrequencyGrouping {
    /// `frequencies` holds one count per class with NA (if scored) last.
    /// Ties in frequency are broken by class index.
    pub fn new(frequencies: &[usize], na_scored: bool, top: usize) -> Self {
        let positive = if na_scored { frequencies.len() - 1 } else { frequencies.len() };
        let mut order: Vec<usize> = (0..positive).collect();
        order.sort_by(|&a, &b| frequencies[b].cmp(&frequencies[a]).then(a.cmp(&b)));
        let k = top.min(positive);
        let mut head = order[..k].to_vec();
        let mut tail = order[k..].to_vec();
        head.sort_unstable();
        tail.sort_unstable();
        let mut groups = Vec::new();
        if na_scored {
            groups.push(("na".to_string(), vec![positive]));
        }
        groups.push((format!("top{k}"), head));
        groups.push(("rest".to_string(), tail));
        Self { groups }
    }

    pub fn group_of(&self, class: usize) -> Option<usize> {
        self.groups.iter().position(|(_, c)| c.contains(&class))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTable {
    pub group: String,
    pub classes: Vec<usize>,
    pub table: BinnedTable,
}

pub fn reliability_table(inst: &[Instance], grouping: &FrequencyGrouping, bins: usize) -> Result<Vec<GroupTable>> {
    grouping
        .groups
        .iter()
        .map(|(name, classes)| {
            let members: Vec<Instance> = inst.iter().filter(|i| classes.contains(&i.class)).copied().collect();
            Ok(GroupTable {
                group: name.clone(),
                classes: classes.clone(),
                table: binned_table(&members, bins)?,
            })
        })
        .collect()
}

pub fn write_reliability_csv(path: impl AsRef<Path>, tables: &[GroupTable]) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "group,bin_lo,bin_hi,count,confidence,accuracy")?;
        for g in tables {
            for b in &g.table.bins {
                writeln!(out, "{},{},{},{},{},{}", g.group, b.lo, b.hi, b.count, b.confidence, b.accuracy)?;
            }
        }
        out.flush()
    };
    write().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    None,
    Ts,
    CdaTs,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "ts" => Ok(Self::Ts),
            "cda-ts" => Ok(Self::CdaTs),
            _ => Err(Error::Config(format!("unknown calibration method {s:?} (none, ts, cda-ts)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Ts => "ts",
            Self::CdaTs => "cda-ts",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: Method,
    pub bins: usize,
    pub population: Population,
    pub model: TemperatureModel,
    pub ece: f64,
    pub ace: f64,
    pub dev_bce_before: f64,
    pub dev_bce_after: f64,
    pub groups: Vec<GroupTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSettings {
    pub method: Method,
    pub bins: usize,
    pub population: Population,
    /// Decision threshold, used by the predicted-positive population.
    pub threshold: f64,
    pub top_group: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            method: Method::None,
            bins: DEFAULT_BINS,
            population: Population::All,
            threshold: 0.5,
            top_group: DEFAULT_TOP_GROUP,
        }
    }
}

/// Fits the calibrator on `dev` (every coordinate), then measures `eval`
/// after applying it. `frequencies` has one train count per scored class.
pub fn calibrate(
    dev: &[DocumentScores],
    eval: &[DocumentScores],
    frequencies: &[usize],
    na_scored: bool,
    settings: &CalibrationSettings,
) -> Result<(CalibrationReport, Vec<DocumentScores>)> {
    let fit = instances(dev, Population::All, settings.threshold);
    let model = match settings.method {
        Method::None => TemperatureModel::Identity,
        Method::Ts => fit_temperature(&fit)?,
        Method::CdaTs => fit_cda_temperature(&fit, frequencies)?,
    };
    let calibrated = model.apply(eval);
    let inst = instances(&calibrated, settings.population, settings.threshold);
    let grouping = FrequencyGrouping::new(frequencies, na_scored, settings.top_group);
    let report = CalibrationReport {
        method: settings.method,
        bins: settings.bins,
        population: settings.population,
        ece: ece(&inst, settings.bins)?,
        ace: ace(&inst, settings.bins)?,
        dev_bce_before: TemperatureModel::Identity.mean_bce(&fit),
        dev_bce_after: model.mean_bce(&fit),
        groups: reliability_table(&inst, &grouping, settings.bins)?,
        model,
    };
    Ok((report, calibrated))
}

pub fn save_report(path: impl AsRef<Path>, report: &CalibrationReport) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_vec_pretty(report).map_err(json_err(path))?;
    std::fs::write(path, json).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn inst(class: usize, confidence: f64, correct: bool) -> Instance {
        let c = confidence.clamp(1e-12, 1.0 - 1e-12);
        Instance {
            class,
            logit: (c / (1.0 - c)).ln(),
            confidence,
            correct,
        }
    }

    fn naive_ece(v: &[Instance], bins: usize) -> f64 {
        let mut total = 0.0;
        for b in 0..bins {
            let lo = b as f64 / bins as f64;
            let hi = (b + 1) as f64 / bins as f64;
            let members: Vec<&Instance> = v
                .iter()
                .filter(|i| lo <= i.confidence && (i.confidence < hi || (b == bins - 1 && i.confidence <= 1.0)))
                .collect();
            if members.is_empty() {
                continue;
            }
            let n = members.len() as f64;
            let conf = members.iter().map(|i| i.confidence).sum::<f64>() / n;
            let acc = members.iter().filter(|i| i.correct).count() as f64 / n;
            total += n / v.len() as f64 * (acc - conf).abs();
        }
        total
    }

    fn naive_ace(v: &[Instance], r: usize) -> f64 {
        let classes: std::collections::BTreeSet<usize> = v.iter().map(|i| i.class).collect();
        let mut gaps = Vec::new();
        for k in classes {
            let mut c: Vec<&Instance> = v.iter().filter(|i| i.class == k).collect();
            c.sort_by(|a, b| a.confidence.partial_cmp(&b.confidence).unwrap());
            let parts = r.min(c.len());
            let mut sizes = vec![0; parts];
            for i in 0..c.len() {
                sizes[i % parts] += 1;
            }
            let mut rest = &c[..];
            for s in sizes {
                let (part, tail) = rest.split_at(s);
                rest = tail;
                let conf: f64 = part.iter().map(|i| i.confidence).sum::<f64>() / s as f64;
                let acc = part.iter().filter(|i| i.correct).count() as f64 / s as f64;
                gaps.push((acc - conf).abs());
            }
        }
        gaps.iter().sum::<f64>() / gaps.len() as f64
    }

    /// Labels drawn from the stated probabilities, so the logits are calibrated.
    fn calibrated(n: usize, classes: usize, seed: u64) -> Vec<Instance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(-1.0, 2.0).unwrap();
        (0..n)
            .map(|i| {
                let z: f64 = dist.sample(&mut rng);
                let p = sigmoid_scalar(z);
                Instance {
                    class: i % classes,
                    logit: z,
                    confidence: p,
                    correct: rng.random::<f64>() < p,
                }
            })
            .collect()
    }

    #[test]
    fn ece_hand_cases() {
        let v: Vec<Instance> = (0..10).map(|i| inst(0, 0.8, i < 6)).collect();
        assert!((ece(&v, 10).unwrap() - 0.2).abs() < 1e-12);
        let exact = vec![inst(0, 0.5, true), inst(0, 0.5, false), inst(1, 0.0, false), inst(1, 1.0, true)];
        assert_eq!(ece(&exact, 10).unwrap(), 0.0);
        assert!(ece(&[], 10).is_err());
        assert!(ece(&[inst(0, 1.5, true)], 10).is_err());
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 1);
        assert_eq!(bin_index(0.3, 10), 3);
        assert_eq!(bin_index(0.7, 10), 7);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.999_999, 10), 9);
    }

    #[test]
    fn ace_hand_cases() {
        let v = vec![inst(0, 0.1, false), inst(0, 0.2, false), inst(0, 0.9, true), inst(0, 1.0, true)];
        assert!((ace(&v, 2).unwrap() - 0.1).abs() < 1e-12);
        let perfect = vec![inst(0, 0.5, true), inst(0, 0.5, false), inst(0, 0.5, true), inst(0, 0.5, false)];
        assert_eq!(ace(&perfect, 2).unwrap(), 0.0);
        // Fewer instances than ranges: one range per instance.
        let few = vec![inst(3, 0.25, true)];
        assert!((ace(&few, 10).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn temperature_identity_and_recovery() {
        let v = calibrated(40_000, 3, 1);
        let t = fit_temperature(&v).unwrap().temperature(0);
        assert!((t - 1.0).abs() < 0.05, "fitted {t}");
        let doubled: Vec<Instance> = v.iter().map(|i| Instance { logit: 2.0 * i.logit, ..*i }).collect();
        let t2 = fit_temperature(&doubled).unwrap().temperature(0);
        assert!((t2 / t - 2.0).abs() < 1e-6, "{t2} vs {t}");
        let one = TemperatureModel::Scalar { temperature: 1.0 };
        for i in &v[..100] {
            assert_eq!(one.probability(i.logit, i.class), sigmoid_scalar(i.logit));
        }
    }

    #[test]
    fn temperature_requires_both_outcomes() {
        let v = vec![inst(0, 0.3, true), inst(0, 0.8, true)];
        assert!(fit_temperature(&v).is_err());
        assert!(fit_cda_temperature(&v, &[3]).is_err());
    }

    #[test]
    fn temperature_fit_beats_grid() {
        let v: Vec<Instance> = calibrated(5_000, 2, 2).iter().map(|i| Instance { logit: 0.4 * i.logit, ..*i }).collect();
        let m = fit_temperature(&v).unwrap();
        let best = m.mean_bce(&v);
        for k in 1..400 {
            let t = T_MIN + (T_MAX - T_MIN) * k as f64 / 400.0;
            assert!(best <= TemperatureModel::Scalar { temperature: t }.mean_bce(&v) + 1e-12);
        }
    }

    #[test]
    fn class_aware_reductions() {
        let ts = TemperatureModel::Scalar { temperature: 1.7 };
        let cda = TemperatureModel::class_aware(1.7, 0.0, &[500, 20, 0]);
        for c in 0..3 {
            assert_eq!(ts.probability(0.8, c), cda.probability(0.8, c));
        }
        if let TemperatureModel::ClassAware { temperatures, .. } = TemperatureModel::class_aware(2.0, 1.3, &[9, 9, 9]) {
            assert!(temperatures.iter().all(|&t| t == 2.0));
        } else {
            unreachable!()
        }
        // Zero frequency is floored at one.
        assert_eq!(
            TemperatureModel::class_aware(1.0, 1.0, &[10, 0]).temperature(1),
            TemperatureModel::class_aware(1.0, 1.0, &[10, 1]).temperature(1)
        );
    }

    #[test]
    fn class_aware_fit_never_worse_than_single_temperature() {
        let freqs = [5000, 800, 120, 30, 4];
        let mut v = calibrated(20_000, freqs.len(), 3);
        // Rare classes overconfident, frequent ones calibrated.
        for i in v.iter_mut() {
            i.logit *= 1.0 + 0.8 * (freqs[0] as f64 / freqs[i.class] as f64).ln() / 7.0;
        }
        let ts = fit_temperature(&v).unwrap();
        let cda = fit_cda_temperature(&v, &freqs).unwrap();
        assert!(cda.mean_bce(&v) <= ts.mean_bce(&v) + 1e-9);
        assert!(cda.mean_bce(&v) < ts.mean_bce(&v) - 1e-4);
    }

    #[test]
    fn grouping_partitions_classes() {
        let freqs = [50, 3, 90, 7, 7, 1, 12, 40, 8, 2, 1000];
        let g = FrequencyGrouping::new(&freqs, true, 7);
        assert_eq!(g.groups[0], ("na".to_string(), vec![10]));
        assert_eq!(g.groups[1].1, vec![0, 2, 3, 4, 6, 7, 8]);
        assert_eq!(g.groups[2].1, vec![1, 5, 9]);
        for c in 0..freqs.len() {
            assert_eq!(g.groups.iter().filter(|(_, m)| m.contains(&c)).count(), 1);
        }
        let small = FrequencyGrouping::new(&[4, 2, 9], true, 7);
        assert!(small.groups[2].1.is_empty());
    }

    #[test]
    fn reliability_counts_and_calibrated_bins() {
        let v = calibrated(60_000, 11, 4);
        let g = FrequencyGrouping::new(&[50, 3, 90, 7, 7, 1, 12, 40, 8, 2, 1000], true, 7);
        let tables = reliability_table(&v, &g, 10).unwrap();
        assert_eq!(tables.iter().map(|t| t.table.total()).sum::<usize>(), v.len());
        for t in &tables {
            for b in &t.table.bins {
                assert!(b.lo <= b.confidence && b.confidence <= b.hi);
                if b.count > 1000 {
                    assert!((b.accuracy - b.confidence).abs() < 0.05, "{b:?}");
                }
            }
        }
        let empty = FrequencyGrouping {
            groups: vec![("none".into(), vec![99])],
        };
        assert!(reliability_table(&v, &empty, 10).unwrap()[0].table.bins.is_empty());
    }

    fn scores(seed: u64) -> Vec<DocumentScores> {
        let v = calibrated(300, 3, seed);
        v.chunks(30)
            .enumerate()
            .map(|(d, c)| DocumentScores {
                title: format!("d{d}"),
                pairs: (0..10).map(|i| (i, i + 1)).collect(),
                classes: 3,
                logits: c.iter().map(|i| i.logit).collect(),
                probs: c.iter().map(|i| i.confidence).collect(),
                targets: c.iter().map(|i| i.correct as u8 as f64).collect(),
            })
            .collect()
    }

    #[test]
    fn scaling_preserves_order() {
        let s = scores(5);
        let m = TemperatureModel::Scalar { temperature: 2.5 };
        let out = m.apply(&s);
        let before: Vec<f64> = s.iter().flat_map(|d| d.probs.clone()).collect();
        let after: Vec<f64> = out.iter().flat_map(|d| d.probs.clone()).collect();
        for i in 0..before.len() {
            for j in 0..before.len() {
                if before[i] < before[j] {
                    assert!(after[i] < after[j]);
                }
            }
        }
    }

    #[test]
    fn report_is_reproducible() {
        let s = scores(6);
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for k in 0..2 {
            let settings = CalibrationSettings {
                method: Method::CdaTs,
                ..CalibrationSettings::default()
            };
            let (r, _) = calibrate(&s, &s, &[40, 10, 900], true, &settings).unwrap();
            let p = dir.path().join(format!("r{k}.json"));
            save_report(&p, &r).unwrap();
            let c = dir.path().join(format!("r{k}.csv"));
            write_reliability_csv(&c, &r.groups).unwrap();
            bytes.push((std::fs::read(&p).unwrap(), std::fs::read(&c).unwrap()));
        }
        assert_eq!(bytes[0], bytes[1]);
        let csv = String::from_utf8(bytes[0].1.clone()).unwrap();
        assert!(csv.starts_with("group,bin_lo,bin_hi,count,confidence,accuracy\n"));
    }

    #[test]
    fn method_parsing() {
        assert_eq!("cda-ts".parse::<Method>().unwrap(), Method::CdaTs);
        assert!("platt".parse::<Method>().is_err());
    }

    fn instances_strategy() -> impl Strategy<Value = Vec<Instance>> {
        prop::collection::vec((0usize..4, 0.0f64..=1.0, any::<bool>()), 1..100)
            .prop_map(|v| v.into_iter().map(|(k, c, y)| inst(k, c, y)).collect())
    }

    proptest! {
        #[test]
        fn ece_matches_naive_binning(v in instances_strategy(), bins in 1usize..20) {
            prop_assert!((ece(&v, bins).unwrap() - naive_ece(&v, bins)).abs() < 1e-12);
        }

        #[test]
        fn ece_on_grid_confidences(v in prop::collection::vec((0u32..=20, any::<bool>()), 1..100)) {
            let v: Vec<Instance> = v.into_iter().map(|(k, y)| inst(0, k as f64 / 20.0, y)).collect();
            prop_assert!((ece(&v, 10).unwrap() - naive_ece(&v, 10)).abs() < 1e-12);
        }

        #[test]
        fn ace_matches_naive_ranges(v in instances_strategy(), r in 1usize..15) {
            prop_assert!((ace(&v, r).unwrap() - naive_ace(&v, r)).abs() < 1e-12);
        }

        #[test]
        fn ece_zero_iff_bins_match(v in instances_strategy()) {
            let t = binned_table(&v, 10).unwrap();
            let matched = t.bins.iter().all(|b| b.accuracy == b.confidence);
            prop_assert_eq!(ece(&v, 10).unwrap() == 0.0, matched);
        }
    }
}
