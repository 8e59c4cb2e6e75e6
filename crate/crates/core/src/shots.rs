//! Frame scores to key shots: kernel temporal segmentation, candidate
//! marking, and 0/1 knapsack under a duration budget.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Ordered change points `0 = b_0 < b_1 < ... < b_m = L`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShotSegmentation {
    boundaries: Vec<usize>,
}

impl ShotSegmentation {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.len() < 2 || boundaries[0] != 0 {
            return Err(Error::Validation(
                "boundaries must start at 0 and contain at least one shot".into(),
            ));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("boundaries must be strictly increasing".into()));
        }
        Ok(ShotSegmentation { boundaries })
    }

    /// One shot covering `[0, len)`.
    pub fn single(len: usize) -> Self {
        ShotSegmentation {
            boundaries: vec![0, len],
        }
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn frames(&self) -> usize {
        *self.boundaries.last().expect("non-empty")
    }

    pub fn shots(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.boundaries.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn len(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KtsParams {
    /// Upper bound on the number of shots as a fraction of the frame count.
    pub max_segments_ratio: f64,
    pub penalty: f64,
}

impl Default for KtsParams {
    fn default() -> Self {
        KtsParams {
            max_segments_ratio: 0.1,
            penalty: 1.0,
        }
    }
}

impl KtsParams {
    pub fn max_segments(&self, frames: usize) -> usize {
        ((frames as f64 * self.max_segments_ratio).floor() as usize).max(1)
    }
}

/// Within-segment scatter `g(i, j)` of a linear kernel on unit-normalized
/// features, from prefix sums.
pub struct Scatter {
    prefix: Vec<Vec<f64>>,
    sq: Vec<f64>,
}

impl Scatter {
    pub fn new(features: &[Vec<f64>]) -> Self {
        let d = features.first().map_or(0, Vec::len);
        let mut prefix = vec![vec![0.0; d]];
        let mut sq = vec![0.0];
        for x in features {
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let u: Vec<f64> = if n > 0.0 {
                x.iter().map(|v| v / n).collect()
            } else {
                vec![0.0; d]
            };
            let last = prefix.last().expect("seeded");
            let next: Vec<f64> = last.iter().zip(&u).map(|(a, b)| a + b).collect();
            sq.push(sq.last().expect("seeded") + u.iter().map(|v| v * v).sum::<f64>());
            prefix.push(next);
        }
        Scatter { prefix, sq }
    }

    /// `sum_{t in [i,j)} K_tt - (1/(j-i)) sum_{t,u in [i,j)} K_tu`.
    pub fn cost(&self, i: usize, j: usize) -> f64 {
        let s: f64 = self.prefix[j]
            .iter()
            .zip(&self.prefix[i])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (self.sq[j] - self.sq[i] - s / (j - i) as f64).max(0.0)
    }
}

pub fn kts_penalty(frames: usize, m: usize, penalty: f64) -> f64 {
    let (l, m) = (frames as f64, m as f64);
    penalty * m * ((l / m).ln() + 1.0)
}

/// Minimizes total scatter plus `penalty * m * (ln(L/m) + 1)` over at most
/// `max_segments` segments by exact dynamic programming.
pub fn kts_segment(features: &[Vec<f64>], max_segments: usize, penalty: f64) -> Result<ShotSegmentation> {
    let l = features.len();
    if l == 0 {
        return Err(Error::Degenerate("cannot segment an empty sequence".into()));
    }
    if max_segments == 0 {
        return Err(Error::Contract("max_segments must be >= 1".into()));
    }
    let m_max = max_segments.min(l);
    let sc = Scatter::new(features);
    let cost: Vec<Vec<f64>> = (0..l)
        .map(|i| (0..=l).map(|j| if j > i { sc.cost(i, j) } else { f64::INFINITY }).collect())
        .collect();

    // dp[m][j]: best cost of splitting [0, j) into m segments
    let mut dp = vec![vec![f64::INFINITY; l + 1]; m_max + 1];
    let mut back = vec![vec![0usize; l + 1]; m_max + 1];
    dp[0][0] = 0.0;
    for m in 1..=m_max {
        for j in m..=l {
            let mut best = f64::INFINITY;
            let mut arg = m - 1;
            for i in (m - 1)..j {
                let v = dp[m - 1][i] + cost[i][j];
                if v < best {
                    best = v;
                    arg = i;
                }
            }
            dp[m][j] = best;
            back[m][j] = arg;
        }
    }
    let mut best_m = 1;
    let mut best_obj = f64::INFINITY;
    for (m, row) in dp.iter().enumerate().skip(1) {
        let obj = row[l] + kts_penalty(l, m, penalty);
        if obj < best_obj {
            best_obj = obj;
            best_m = m;
        }
    }
    let mut bounds = vec![l];
    let mut j = l;
    for m in (1..=best_m).rev() {
        j = back[m][j];
        bounds.push(j);
    }
    bounds.reverse();
    ShotSegmentation::new(bounds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyframeMode {
    Threshold,
    Sample,
}

pub fn keyframes_from_policy(p: &[f64], mode: KeyframeMode, seed: u64) -> Vec<usize> {
    match mode {
        KeyframeMode::Threshold => (0..p.len()).filter(|&t| p[t] >= 0.5).collect(),
        KeyframeMode::Sample => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..p.len())
                .filter(|&t| rng.random::<f64>() < p[t])
                .collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShotItem {
    pub start: usize,
    pub end: usize,
    /// Frame count.
    pub weight: usize,
    /// Mean frame score over the shot.
    pub value: f64,
    pub has_keyframe: bool,
}

/// Exact 0/1 knapsack over `(weight, value)` pairs. Among optimal sets the
/// one with fewer frames wins, then the lexicographically earliest indices.
pub fn knapsack_select(items: &[(usize, f64)], capacity: usize) -> Vec<usize> {
    let n = items.len();
    // best[i][c] = (value, weight) of the best subset of items[i..] within c
    let mut best = vec![vec![(0.0f64, 0usize); capacity + 1]; n + 1];
    let mut take = vec![vec![false; capacity + 1]; n + 1];
    for i in (0..n).rev() {
        let (w, v) = items[i];
        for c in 0..=capacity {
            let skip = best[i + 1][c];
            let mut choice = skip;
            if w <= c {
                let rest = best[i + 1][c - w];
                let with = (rest.0 + v, rest.1 + w);
                if with.0 > skip.0 || (with.0 == skip.0 && with.1 <= skip.1) {
                    choice = with;
                    take[i][c] = true;
                }
            }
            best[i][c] = choice;
        }
    }
    let mut out = Vec::new();
    let mut c = capacity;
    for i in 0..n {
        if take[i][c] {
            out.push(i);
            c -= items[i].0;
        }
    }
    out
}

pub fn budget_capacity(frames: usize, fraction: f64) -> usize {
    // the small slack absorbs representation error such as 0.29 * 100
    ((fraction * frames as f64) + 1e-9).floor() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SummaryStatus {
    Ok,
    /// No candidate shot fits the budget.
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryMask {
    pub mask: Vec<bool>,
    pub budget: f64,
    pub used: usize,
    pub status: SummaryStatus,
    pub shots: Vec<ShotItem>,
    pub selected: Vec<bool>,
}

pub fn shot_items(p: &[f64], seg: &ShotSegmentation, keyframes: &[usize]) -> Vec<ShotItem> {
    let mut is_key = vec![false; p.len()];
    for &k in keyframes {
        is_key[k] = true;
    }
    seg.shots()
        .map(|(a, b)| ShotItem {
            start: a,
            end: b,
            weight: b - a,
            value: p[a..b].iter().sum::<f64>() / (b - a) as f64,
            has_keyframe: is_key[a..b].iter().any(|&k| k),
        })
        .collect()
}

/// Knapsack over the candidate shots of a fixed segmentation.
pub fn select_shots(p: &[f64], seg: &ShotSegmentation, budget: f64) -> Result<SummaryMask> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::Contract(format!("budget fraction {budget} outside (0, 1]")));
    }
    if seg.frames() != p.len() {
        return Err(Error::shape(
            "frames",
            format!("segmentation covers {} frames, scores have {}", seg.frames(), p.len()),
        ));
    }
    let keys = keyframes_from_policy(p, KeyframeMode::Threshold, 0);
    let shots = shot_items(p, seg, &keys);
    let candidates: Vec<usize> = (0..shots.len()).filter(|&i| shots[i].has_keyframe).collect();
    let items: Vec<(usize, f64)> = candidates.iter().map(|&i| (shots[i].weight, shots[i].value)).collect();
    let capacity = budget_capacity(p.len(), budget);
    let chosen = knapsack_select(&items, capacity);
    let mut selected = vec![false; shots.len()];
    let mut mask = vec![false; p.len()];
    for &c in &chosen {
        let s = &shots[candidates[c]];
        selected[candidates[c]] = true;
        mask[s.start..s.end].iter_mut().for_each(|m| *m = true);
    }
    let used = mask.iter().filter(|&&m| m).count();
    Ok(SummaryMask {
        mask,
        budget,
        used,
        status: if chosen.is_empty() {
            SummaryStatus::Empty
        } else {
            SummaryStatus::Ok
        },
        shots,
        selected,
    })
}

/// KTS, threshold keyframes, candidate shots, knapsack at `floor(l * L)`.
pub fn build_summary(p: &[f64], features: &[Vec<f64>], budget: f64, kts: &KtsParams) -> Result<SummaryMask> {
    if p.len() != features.len() {
        return Err(Error::shape(
            "frames",
            format!("{} scores vs {} feature frames", p.len(), features.len()),
        ));
    }
    let seg = kts_segment(features, kts.max_segments(p.len()), kts.penalty)?;
    select_shots(p, &seg, budget)
}

pub const SUMMARY_HEADER: &str = "vsumm-summary v1";

pub fn format_summary(video: &str, s: &SummaryMask) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{SUMMARY_HEADER}");
    let _ = writeln!(out, "video {video}");
    let _ = writeln!(out, "frames {}", s.mask.len());
    let _ = writeln!(out, "budget {}", s.budget);
    let status = match s.status {
        SummaryStatus::Ok => "ok",
        SummaryStatus::Empty => "empty",
    };
    let _ = writeln!(out, "status {status}");
    let _ = writeln!(out, "shots {}", s.shots.len());
    for (shot, sel) in s.shots.iter().zip(&s.selected) {
        let _ = writeln!(out, "{} {} {} {}", shot.start, shot.end, shot.value, u8::from(*sel));
    }
    let bits: String = s.mask.iter().map(|&m| if m { '1' } else { '0' }).collect();
    let _ = writeln!(out, "mask {bits}");
    out
}

/// Reads back the mask and shot records written by [`format_summary`].
pub fn parse_summary(text: &str) -> Result<(String, SummaryMask)> {
    let err = |line: usize, d: &str| Error::Parse {
        path: "<summary>".into(),
        location: format!("line {line}"),
        detail: d.to_string(),
    };
    let mut lines = text.lines().enumerate();
    let mut next = |key: &str| -> Result<(usize, String)> {
        let (i, l) = lines.next().ok_or_else(|| err(0, "unexpected end of file"))?;
        if key.is_empty() {
            return Ok((i + 1, l.to_string()));
        }
        let rest = l
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| err(i + 1, &format!("expected `{key}`")))?;
        Ok((i + 1, rest.to_string()))
    };
    let (_, head) = next("")?;
    if head != SUMMARY_HEADER {
        return Err(err(1, "not a summary file"));
    }
    let (_, video) = next("video")?;
    let num = |(i, s): (usize, String)| s.parse::<usize>().map_err(|e| err(i, &e.to_string()));
    let frames = num(next("frames")?)?;
    let (bi, b) = next("budget")?;
    let budget: f64 = b.parse().map_err(|_| err(bi, "bad budget"))?;
    let (si, st) = next("status")?;
    let status = match st.as_str() {
        "ok" => SummaryStatus::Ok,
        "empty" => SummaryStatus::Empty,
        _ => return Err(err(si, "bad status")),
    };
    let count = num(next("shots")?)?;
    let mut shots = Vec::with_capacity(count);
    let mut selected = Vec::with_capacity(count);
    for _ in 0..count {
        let (i, l) = next("")?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 4 {
            return Err(err(i, "shot record needs 4 fields"));
        }
        let p = |s: &str| s.parse::<usize>().map_err(|_| err(i, "bad integer"));
        let (start, end) = (p(f[0])?, p(f[1])?);
        shots.push(ShotItem {
            start,
            end,
            weight: end.saturating_sub(start),
            value: f[2].parse().map_err(|_| err(i, "bad score"))?,
            has_keyframe: false,
        });
        selected.push(f[3] == "1");
    }
    let (mi, bits) = next("mask")?;
    if bits.len() != frames {
        return Err(err(mi, "mask length differs from frame count"));
    }
    let mask: Vec<bool> = bits.chars().map(|c| c == '1').collect();
    let used = mask.iter().filter(|&&m| m).count();
    Ok((
        video,
        SummaryMask {
            mask,
            budget,
            used,
            status,
            shots,
            selected,
        },
    ))
}
