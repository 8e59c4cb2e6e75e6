//! Temporal-overlap metrics, oracle summaries, splits and the length study.

use crate::data::{pad_to_pow2, AnnotationSet, FeatureSequence, Video};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::rl::{frame_vectors, TrainVideo};
use crate::shots::{budget_capacity, build_summary, KtsParams, SummaryMask};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::{self, Write as _};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Max,
}

impl Reduction {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" | "avg" => Some(Reduction::Mean),
            "max" => Some(Reduction::Max),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Reduction::Mean => "mean",
            Reduction::Max => "max",
        }
    }

    pub fn apply(self, values: &[f64]) -> f64 {
        match self {
            Reduction::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Reduction::Max => values.iter().copied().fold(0.0, f64::max),
        }
    }
}

/// Overlap precision and recall. Empty predictions give P = 0 and empty
/// references give R = 0.
pub fn precision_recall(pred: &[bool], reference: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != reference.len() {
        return Err(Error::shape(
            "frames",
            format!("prediction has {} frames, reference {}", pred.len(), reference.len()),
        ));
    }
    let overlap = pred.iter().zip(reference).filter(|(a, b)| **a && **b).count() as f64;
    let np = pred.iter().filter(|&&a| a).count() as f64;
    let nr = reference.iter().filter(|&&a| a).count() as f64;
    let p = if np == 0.0 { 0.0 } else { overlap / np };
    let r = if nr == 0.0 { 0.0 } else { overlap / nr };
    Ok((p, r))
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub reduction: Reduction,
    pub reduced: f64,
    pub budget_used: f64,
}

pub fn f1_multi_user(pred: &[bool], users: &[Vec<bool>], reduction: Reduction) -> Result<EvalResult> {
    if users.is_empty() {
        return Err(Error::Contract("at least one user summary is required".into()));
    }
    let mut out = EvalResult {
        precision: Vec::with_capacity(users.len()),
        recall: Vec::with_capacity(users.len()),
        f1: Vec::with_capacity(users.len()),
        reduction,
        reduced: 0.0,
        budget_used: pred.iter().filter(|&&a| a).count() as f64 / pred.len().max(1) as f64,
    };
    for u in users {
        let (p, r) = precision_recall(pred, u)?;
        out.precision.push(p);
        out.recall.push(r);
        out.f1.push(f1(p, r));
    }
    out.reduced = reduction.apply(&out.f1);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSummary {
    pub mask: Vec<bool>,
    /// Mean user importance per frame.
    pub p_star: Vec<f64>,
    /// Mean F1 after each greedy addition.
    pub trace: Vec<f64>,
}

/// Greedy frame-by-frame agreement summary. Each step adds the keyframe with
/// the largest mean-F1 gain (lowest index on ties) and stops when nothing
/// improves or the budget is full.
pub fn oracle_summary(users: &[Vec<bool>], budget: f64) -> Result<OracleSummary> {
    let l = users.first().map(Vec::len).ok_or_else(|| Error::Contract("oracle needs users".into()))?;
    if users.iter().any(|u| u.len() != l) {
        return Err(Error::shape("frames", "user masks differ in length"));
    }
    let nu = users.len() as f64;
    let sizes: Vec<f64> = users.iter().map(|u| u.iter().filter(|&&b| b).count() as f64).collect();
    let cap = budget_capacity(l, budget);
    let mut mask = vec![false; l];
    let mut inter = vec![0.0; users.len()];
    let mut chosen = 0.0;
    let mean_f1 = |inter: &[f64], chosen: f64| {
        inter
            .iter()
            .zip(&sizes)
            .map(|(&i, &a)| if chosen + a == 0.0 { 0.0 } else { 2.0 * i / (chosen + a) })
            .sum::<f64>()
            / nu
    };
    let mut current = 0.0;
    let mut trace = Vec::new();
    while (chosen as usize) < cap {
        let mut best: Option<(usize, f64)> = None;
        for t in 0..l {
            if mask[t] || !users.iter().any(|u| u[t]) {
                continue;
            }
            let next: Vec<f64> = inter
                .iter()
                .zip(users)
                .map(|(&i, u)| i + f64::from(u8::from(u[t])))
                .collect();
            let v = mean_f1(&next, chosen + 1.0);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((t, v));
            }
        }
        match best {
            Some((t, v)) if v > current => {
                mask[t] = true;
                for (i, u) in inter.iter_mut().zip(users) {
                    *i += f64::from(u8::from(u[t]));
                }
                chosen += 1.0;
                current = v;
                trace.push(v);
            }
            _ => break,
        }
    }
    let p_star = (0..l)
        .map(|t| users.iter().filter(|u| u[t]).count() as f64 / nu)
        .collect();
    Ok(OracleSummary { mask, p_star, trace })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Rotating test blocks over one seeded permutation.
pub fn split_dataset(ids: &[String], n_splits: usize, train_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    let n = ids.len();
    if n < 2 {
        return Err(Error::Contract(format!("splitting needs at least 2 videos, got {n}")));
    }
    if n_splits == 0 || !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config("n_splits must be >= 1 and train_fraction in (0, 1)".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (((1.0 - train_fraction) * n as f64).round() as usize).clamp(1, n - 1);
    Ok((0..n_splits)
        .map(|s| {
            let start = s * n / n_splits;
            let test_idx: Vec<usize> = (0..n_test).map(|j| perm[(start + j) % n]).collect();
            let pick = |keep: bool| {
                perm.iter()
                    .filter(|i| test_idx.contains(i) != keep)
                    .map(|&i| ids[i].clone())
                    .collect()
            };
            Split {
                train: pick(true),
                test: pick(false),
            }
        })
        .collect())
}

/// A summary length: a fixed fraction or the per-video important proportion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Fraction(f64),
    Proportion,
}

impl Budget {
    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("p") {
            return Ok(Budget::Proportion);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::Config(format!("budget `{s}` is neither a number nor P")))?;
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::Config(format!("budget {v} must lie in (0, 1]")));
        }
        Ok(Budget::Fraction(v))
    }

    pub fn resolve(self, annotations: Option<&AnnotationSet>) -> Result<f64> {
        match self {
            Budget::Fraction(v) => Ok(v),
            Budget::Proportion => annotations
                .map(AnnotationSet::important_fraction)
                .ok_or_else(|| Error::Validation("budget P needs annotations".into())),
        }
    }

    pub fn default_study() -> Vec<Budget> {
        vec![
            Budget::Fraction(0.15),
            Budget::Fraction(0.20),
            Budget::Fraction(0.25),
            Budget::Proportion,
        ]
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Fraction(v) => write!(f, "{v}"),
            Budget::Proportion => f.write_str("P"),
        }
    }
}

/// Frame scores for the original frames of `seq`.
pub fn score_frames(seq: &FeatureSequence, params: &ModelParams) -> Result<Vec<f64>> {
    let padded = pad_to_pow2(seq, params.config.levels);
    if padded.seq.n != params.config.expansion {
        return Err(Error::Config(format!(
            "{}: features have n={} but the model expects expansion={}",
            seq.id, padded.seq.n, params.config.expansion
        )));
    }
    let mut p = model::forward(&padded.seq.tensor, params)?.p;
    p.truncate(padded.original_frames());
    Ok(p)
}

pub fn to_train_video(video: &Video, levels: usize) -> Result<TrainVideo> {
    let f = &video.features;
    Ok(TrainVideo {
        id: f.id.clone(),
        features: pad_to_pow2(f, levels).seq.tensor,
        frames: frame_vectors(&f.tensor, f.n)?,
        p_star: video.annotations.as_ref().map(AnnotationSet::importance),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct VideoEval {
    pub video: String,
    pub budget: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1_mean: f64,
    pub f1_max: f64,
    pub summary_frames: usize,
}

/// Summarizes `scores` at `budget` and compares against every user.
pub fn evaluate_scores(
    video: &Video,
    scores: &[f64],
    budget: Budget,
    kts: &KtsParams,
) -> Result<(VideoEval, SummaryMask)> {
    let ann = video
        .annotations
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("{}: evaluation needs annotations", video.features.id)))?;
    let l = budget.resolve(Some(ann))?;
    let frames = frame_vectors(&video.features.tensor, video.features.n)?;
    let summary = build_summary(scores, &frames, l, kts)?;
    let users = ann.user_masks(l, Some(&frames), kts)?;
    let mean = f1_multi_user(&summary.mask, &users, Reduction::Mean)?;
    let max = Reduction::Max.apply(&mean.f1);
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((
        VideoEval {
            video: video.features.id.clone(),
            budget: l,
            precision: avg(&mean.precision),
            recall: avg(&mean.recall),
            f1_mean: mean.reduced,
            f1_max: max,
            summary_frames: summary.used,
        },
        summary,
    ))
}

pub fn evaluate_model(
    params: &ModelParams,
    videos: &[&Video],
    budget: Budget,
    kts: &KtsParams,
) -> Result<Vec<VideoEval>> {
    videos
        .par_iter()
        .map(|v| {
            let p = score_frames(&v.features, params)?;
            evaluate_scores(v, &p, budget, kts).map(|(e, _)| e)
        })
        .collect()
}

pub fn reduced_f1(evals: &[VideoEval], reduction: Reduction) -> f64 {
    if evals.is_empty() {
        return 0.0;
    }
    evals
        .iter()
        .map(|e| match reduction {
            Reduction::Mean => e.f1_mean,
            Reduction::Max => e.f1_max,
        })
        .sum::<f64>()
        / evals.len() as f64
}

#[derive(Clone, Debug)]
pub struct StudyRow {
    pub budget: Budget,
    pub f1: f64,
    pub videos: Vec<VideoEval>,
}

/// Reduced F1 per budget, one row each.
pub fn length_study(
    params: &ModelParams,
    videos: &[&Video],
    budgets: &[Budget],
    reduction: Reduction,
    kts: &KtsParams,
) -> Result<Vec<StudyRow>> {
    budgets
        .iter()
        .map(|&b| {
            let evals = evaluate_model(params, videos, b, kts)?;
            Ok(StudyRow {
                budget: b,
                f1: reduced_f1(&evals, reduction),
                videos: evals,
            })
        })
        .collect()
}

pub const RESULTS_HEADER: &str = "video\tsplit\tbudget\tprecision\trecall\tf1_mean\tf1_max";

pub fn format_results_row(split: usize, label: &Budget, e: &VideoEval) -> String {
    format!(
        "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
        e.video, split, label, e.precision, e.recall, e.f1_mean, e.f1_max
    )
}

/// `(budget, mean F1)` pairs for a length-study chart.
pub fn format_plot_data(points: &[(Budget, f64)]) -> String {
    let mut out = String::from("budget\tf1\n");
    for (b, v) in points {
        let _ = writeln!(out, "{b}\t{v:.6}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn pr_examples() {
        assert_eq!(precision_recall(&m("0110"), &m("0110")).unwrap(), (1.0, 1.0));
        assert_eq!(precision_recall(&m("1100"), &m("0011")).unwrap(), (0.0, 0.0));
        assert_eq!(precision_recall(&m("0110"), &m("1111")).unwrap(), (1.0, 0.5));
        assert_eq!(precision_recall(&m("0000"), &m("1111")).unwrap(), (0.0, 0.0));
        assert!(precision_recall(&m("01"), &m("011")).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(1.0, 1.0), 1.0);
        assert_eq!(f1(1.0, 0.0), 0.0);
        assert_eq!(f1(0.5, 0.5), 0.5);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn reductions() {
        assert_eq!(Reduction::Mean.apply(&[0.2, 0.8]), 0.5);
        assert_eq!(Reduction::Max.apply(&[0.2, 0.8]), 0.8);
        let r = f1_multi_user(&m("0110"), &[m("0100")], Reduction::Mean).unwrap();
        assert_eq!(r.reduced, r.f1[0]);
    }

    #[test]
    fn oracle_single_and_identical_users() {
        let u = m("0011100100");
        assert_eq!(oracle_summary(std::slice::from_ref(&u), 1.0).unwrap().mask, u);
        assert_eq!(oracle_summary(&[u.clone(), u.clone()], 1.0).unwrap().mask, u);
        let capped = oracle_summary(std::slice::from_ref(&u), 0.2).unwrap().mask;
        assert_eq!(capped.iter().filter(|&&b| b).count(), 2);
    }

    #[test]
    fn splits_of_ten() {
        let ids: Vec<String> = (0..10).map(|i| format!("v{i}")).collect();
        let s = split_dataset(&ids, 5, 0.8, 7).unwrap();
        assert_eq!(s.len(), 5);
        for sp in &s {
            assert_eq!((sp.train.len(), sp.test.len()), (8, 2));
        }
        assert_eq!(s, split_dataset(&ids, 5, 0.8, 7).unwrap());
        assert!(split_dataset(&ids[..1], 5, 0.8, 7).is_err());
    }

    #[test]
    fn budget_parsing() {
        assert_eq!(Budget::parse("P").unwrap(), Budget::Proportion);
        assert_eq!(Budget::parse("0.15").unwrap(), Budget::Fraction(0.15));
        assert!(Budget::parse("1.5").is_err());
        assert_eq!(Budget::default_study().len(), 4);
    }
}
