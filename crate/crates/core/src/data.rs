//! File formats and the synthetic dataset generator.
//!
//! # Feature container
//!
//! ```text
//! offset 0   8 bytes   magic "FSEQ0001"
//! offset 8   5 x u32   T, C, W, H, n          (little endian)
//! offset 28  f32 x T*C*W*H                    (little endian, row major)
//! ```
//!
//! # Annotation text
//!
//! ```text
//! video=<id>
//! frames=<L>
//! users=<U>
//! kind=keyframe_mask | frame_scores | shot_scores
//! range=<lo> <hi>                 optional, default "0 1"
//! boundaries=<b0> <b1> ... <bm>   required for shot_scores
//! <one line per user>
//! ```
//!
//! User lines hold `L` values, or one value per shot for `shot_scores`.
//!
//! # Manifest
//!
//! First line `vsumm-manifest v1`, then `key=value` dataset defaults
//! (`budget`, `reduction`, `shot_rate`, `provenance`), then one
//! tab-separated record per video: `id  features  annotations`, where
//! `annotations` may be `-`. Relative paths resolve against the manifest's
//! directory.

use crate::error::{Error, Result};
use crate::eval::Reduction;
use crate::shots::{knapsack_select, budget_capacity, kts_segment, KtsParams, ShotSegmentation};
use crate::tensor::{dims4, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const FSEQ_MAGIC: &[u8; 8] = b"FSEQ0001";
const HEADER_BYTES: usize = 8 + 5 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    St3d,
    I3d,
    #[serde(rename = "2d")]
    TwoD,
    Synthetic,
}

impl Provenance {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "st3d" => Some(Provenance::St3d),
            "i3d" => Some(Provenance::I3d),
            "2d" => Some(Provenance::TwoD),
            "synthetic" => Some(Provenance::Synthetic),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::St3d => "st3d",
            Provenance::I3d => "i3d",
            Provenance::TwoD => "2d",
            Provenance::Synthetic => "synthetic",
        }
    }
}

/// A `[T, C, W, H]` feature tensor where each step stands for `n` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub tensor: Tensor,
    pub n: usize,
    pub provenance: Provenance,
}

impl FeatureSequence {
    pub fn steps(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.steps() * self.n
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.tensor.shape()[2], self.tensor.shape()[3])
    }
}

pub fn encode_features(tensor: &Tensor, n: usize) -> Result<Vec<u8>> {
    let [t, c, w, h] = dims4(tensor, "features")?;
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * tensor.len());
    out.extend_from_slice(FSEQ_MAGIC);
    for v in [t, c, w, h, n] {
        let v = u32::try_from(v).map_err(|_| Error::Validation(format!("dimension {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses a feature container; errors name the byte offset.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<(Tensor, usize)> {
    let err = |off: usize, d: String| Error::Parse {
        path: path.to_path_buf(),
        location: format!("byte {off}"),
        detail: d,
    };
    if bytes.len() < 8 || &bytes[..8] != FSEQ_MAGIC {
        return Err(err(0, "bad magic, expected FSEQ0001".into()));
    }
    if bytes.len() < HEADER_BYTES {
        return Err(err(bytes.len(), "truncated header".into()));
    }
    let mut dims = [0usize; 5];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 8 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
        if *d == 0 {
            return Err(err(off, "dimension must be >= 1".into()));
        }
    }
    let [t, c, w, h, n] = dims;
    let count = t
        .checked_mul(c)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(h))
        .ok_or_else(|| err(8, "dimensions overflow".into()))?;
    let need = HEADER_BYTES + 4 * count;
    if bytes.len() < need {
        return Err(err(bytes.len(), format!("truncated payload, expected {need} bytes")));
    }
    if bytes.len() > need {
        return Err(err(need, "trailing bytes after payload".into()));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = HEADER_BYTES + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(err(off, format!("non-finite value {v}")));
        }
        data.push(v as f64);
    }
    Ok((Tensor::new(&[t, c, w, h], data)?, n))
}

pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let bytes = encode_features(&seq.tensor, seq.n)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tensor, n) = decode_features(&bytes, path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FeatureSequence {
        id,
        tensor,
        n,
        provenance: Provenance::Synthetic,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationKind {
    KeyframeMask,
    FrameScores,
    ShotScores,
}

impl AnnotationKind {
    fn as_str(self) -> &'static str {
        match self {
            AnnotationKind::KeyframeMask => "keyframe_mask",
            AnnotationKind::FrameScores => "frame_scores",
            AnnotationKind::ShotScores => "shot_scores",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub video: String,
    pub frames: usize,
    pub kind: AnnotationKind,
    pub range: (f64, f64),
    pub boundaries: Option<ShotSegmentation>,
    pub users: Vec<Vec<f64>>,
}

impl AnnotationSet {
    pub fn from_masks(video: &str, masks: &[Vec<bool>]) -> Result<Self> {
        let frames = masks.first().map_or(0, Vec::len);
        let a = AnnotationSet {
            video: video.to_string(),
            frames,
            kind: AnnotationKind::KeyframeMask,
            range: (0.0, 1.0),
            boundaries: None,
            users: masks
                .iter()
                .map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
                .collect(),
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.users.is_empty() {
            return Err(Error::Validation(format!("{}: no users", self.video)));
        }
        if self.frames == 0 {
            return Err(Error::Validation(format!("{}: zero frames", self.video)));
        }
        let (lo, hi) = self.range;
        if !(lo < hi) {
            return Err(Error::Validation(format!("{}: empty range {lo}..{hi}", self.video)));
        }
        let expected = match self.kind {
            AnnotationKind::ShotScores => {
                let seg = self.boundaries.as_ref().ok_or_else(|| {
                    Error::Validation(format!("{}: shot_scores needs a boundaries line", self.video))
                })?;
                seg.len()
            }
            _ => self.frames,
        };
        if let Some(seg) = &self.boundaries {
            if seg.frames() != self.frames {
                return Err(Error::Validation(format!(
                    "{}: boundaries end at {} but frames={}",
                    self.video,
                    seg.frames(),
                    self.frames
                )));
            }
        }
        for (u, vals) in self.users.iter().enumerate() {
            if vals.len() != expected {
                return Err(Error::Validation(format!(
                    "{}: user {u} has {} values, expected {expected}",
                    self.video,
                    vals.len()
                )));
            }
            if let Some(v) = vals.iter().find(|&&v| !(v >= lo && v <= hi)) {
                return Err(Error::Validation(format!(
                    "{}: user {u} value {v} outside [{lo}, {hi}]",
                    self.video
                )));
            }
            if self.kind == AnnotationKind::KeyframeMask && vals.iter().any(|&v| v != lo && v != hi) {
                return Err(Error::Validation(format!(
                    "{}: keyframe masks hold only {lo} or {hi}",
                    self.video
                )));
            }
        }
        Ok(())
    }

    /// Per-user frame scores scaled into [0, 1].
    pub fn frame_scores(&self) -> Vec<Vec<f64>> {
        let (lo, hi) = self.range;
        let scale = |v: f64| (v - lo) / (hi - lo);
        self.users
            .iter()
            .map(|vals| match (self.kind, &self.boundaries) {
                (AnnotationKind::ShotScores, Some(seg)) => {
                    let mut out = vec![0.0; self.frames];
                    for ((a, b), &v) in seg.shots().zip(vals) {
                        out[a..b].iter_mut().for_each(|o| *o = scale(v));
                    }
                    out
                }
                _ => vals.iter().map(|&v| scale(v)).collect(),
            })
            .collect()
    }

    /// Mean user importance per frame, the supervised target.
    pub fn importance(&self) -> Vec<f64> {
        let scores = self.frame_scores();
        let u = scores.len() as f64;
        (0..self.frames)
            .map(|t| scores.iter().map(|s| s[t]).sum::<f64>() / u)
            .collect()
    }

    /// Per-user reference summaries. Masks are used as they are; scores are
    /// turned into key shots by knapsack at `budget` over the annotated
    /// boundaries, or over a KTS segmentation of `features` when none are
    /// given.
    pub fn user_masks(&self, budget: f64, features: Option<&[Vec<f64>]>, kts: &KtsParams) -> Result<Vec<Vec<bool>>> {
        if self.kind == AnnotationKind::KeyframeMask {
            let mid = 0.5 * (self.range.0 + self.range.1);
            return Ok(self
                .users
                .iter()
                .map(|v| v.iter().map(|&x| x > mid).collect())
                .collect());
        }
        let seg = match (&self.boundaries, features) {
            (Some(s), _) => s.clone(),
            (None, Some(f)) => kts_segment(f, kts.max_segments(f.len()), kts.penalty)?,
            (None, None) => {
                return Err(Error::Validation(format!(
                    "{}: frame scores need boundaries or features to form shots",
                    self.video
                )))
            }
        };
        let cap = budget_capacity(self.frames, budget);
        Ok(self
            .frame_scores()
            .iter()
            .map(|s| {
                let items: Vec<(usize, f64)> = seg
                    .shots()
                    .map(|(a, b)| (b - a, s[a..b].iter().sum::<f64>() / (b - a) as f64))
                    .collect();
                let mut mask = vec![false; self.frames];
                let shots: Vec<(usize, usize)> = seg.shots().collect();
                for i in knapsack_select(&items, cap) {
                    mask[shots[i].0..shots[i].1].iter_mut().for_each(|m| *m = true);
                }
                mask
            })
            .collect())
    }

    /// Mean fraction of frames marked important across users.
    pub fn important_fraction(&self) -> f64 {
        let scores = self.frame_scores();
        scores
            .iter()
            .map(|s| s.iter().filter(|&&v| v >= 0.5).count() as f64 / self.frames as f64)
            .sum::<f64>()
            / scores.len() as f64
    }
}

pub fn format_annotations(a: &AnnotationSet) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "video={}", a.video);
    let _ = writeln!(out, "frames={}", a.frames);
    let _ = writeln!(out, "users={}", a.users.len());
    let _ = writeln!(out, "kind={}", a.kind.as_str());
    let _ = writeln!(out, "range={} {}", a.range.0, a.range.1);
    if let Some(seg) = &a.boundaries {
        let b: Vec<String> = seg.boundaries().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "boundaries={}", b.join(" "));
    }
    for u in &a.users {
        let vals: Vec<String> = u.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", vals.join(" "));
    }
    out
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<AnnotationSet> {
    let err = |line: usize, d: String| Error::Parse {
        path: path.to_path_buf(),
        location: format!("line {line}"),
        detail: d,
    };
    let mut video = None;
    let mut frames = None;
    let mut users_n = None;
    let mut kind = None;
    let mut range = (0.0, 1.0);
    let mut boundaries = None;
    let mut users: Vec<Vec<f64>> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            if !users.is_empty() {
                return Err(err(ln, "header key after user lines".into()));
            }
            let v = v.trim();
            let int = |s: &str| s.parse::<usize>().map_err(|e| err(ln, format!("{k}: {e}")));
            match k.trim() {
                "video" => video = Some(v.to_string()),
                "frames" => frames = Some(int(v)?),
                "users" => users_n = Some(int(v)?),
                "kind" => {
                    kind = Some(match v {
                        "keyframe_mask" => AnnotationKind::KeyframeMask,
                        "frame_scores" => AnnotationKind::FrameScores,
                        "shot_scores" => AnnotationKind::ShotScores,
                        other => return Err(err(ln, format!("unknown kind `{other}`"))),
                    })
                }
                "range" => {
                    let r: Vec<f64> = v
                        .split_whitespace()
                        .map(|s| s.parse::<f64>().map_err(|e| err(ln, format!("range: {e}"))))
                        .collect::<Result<_>>()?;
                    if r.len() != 2 {
                        return Err(err(ln, "range needs two values".into()));
                    }
                    range = (r[0], r[1]);
                }
                "boundaries" => {
                    let b: Vec<usize> = v.split_whitespace().map(int).collect::<Result<_>>()?;
                    boundaries = Some(ShotSegmentation::new(b).map_err(|e| err(ln, e.to_string()))?);
                }
                other => return Err(err(ln, format!("unknown header key `{other}`"))),
            }
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| err(ln, format!("value `{s}`: {e}"))))
            .collect::<Result<_>>()?;
        let kind = kind.ok_or_else(|| err(ln, "user line before kind".into()))?;
        let frames = frames.ok_or_else(|| err(ln, "user line before frames".into()))?;
        let expected = if kind == AnnotationKind::ShotScores {
            boundaries
                .as_ref()
                .map(|b: &ShotSegmentation| b.len())
                .ok_or_else(|| err(ln, "shot_scores requires a boundaries line".into()))?
        } else {
            frames
        };
        if vals.len() != expected {
            return Err(err(ln, format!("expected {expected} values, found {}", vals.len())));
        }
        users.push(vals);
    }
    let missing = |k: &str| err(0, format!("missing header `{k}`"));
    let a = AnnotationSet {
        video: video.ok_or_else(|| missing("video"))?,
        frames: frames.ok_or_else(|| missing("frames"))?,
        kind: kind.ok_or_else(|| missing("kind"))?,
        range,
        boundaries,
        users,
    };
    if a.kind == AnnotationKind::ShotScores && a.boundaries.is_none() {
        return Err(missing("boundaries"));
    }
    let declared = users_n.ok_or_else(|| missing("users"))?;
    if declared != a.users.len() {
        return Err(err(0, format!("users={declared} but {} user lines", a.users.len())));
    }
    a.validate()?;
    Ok(a)
}

pub fn write_annotations(path: &Path, a: &AnnotationSet) -> Result<()> {
    fs::write(path, format_annotations(a)).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

/// A sequence padded along time, remembering its original step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub seq: FeatureSequence,
    pub original_steps: usize,
}

impl Padded {
    pub fn original_frames(&self) -> usize {
        self.original_steps * self.seq.n
    }
}

/// Right-pads by repeating the last step until `T` is a multiple of
/// `2^levels`.
pub fn pad_to_pow2(seq: &FeatureSequence, levels: usize) -> Padded {
    let m = 1usize << levels;
    let t = seq.steps();
    let target = t.div_ceil(m) * m;
    let step = seq.tensor.len() / t;
    let mut data = seq.tensor.data().to_vec();
    let last = data[(t - 1) * step..].to_vec();
    for _ in t..target {
        data.extend_from_slice(&last);
    }
    let mut shape = seq.tensor.shape().to_vec();
    shape[0] = target;
    Padded {
        seq: FeatureSequence {
            tensor: Tensor::new(&shape, data).expect("padded shape"),
            ..seq.clone()
        },
        original_steps: t,
    }
}

pub fn truncate_scores(mut scores: Vec<f64>, frames: usize) -> Vec<f64> {
    scores.truncate(frames);
    scores
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub videos: usize,
    pub clusters: usize,
    pub frames: usize,
    pub dim: usize,
    pub sigma: f64,
    pub keyframe_fraction: f64,
    pub users: usize,
    pub expansion: usize,
    /// Noise scale of planted keyframes, relative to `sigma`.
    pub core_noise: f64,
    /// Scale of the per-video offset shared by all non-key frames.
    pub flank_shift: f64,
    /// Scale of the offset shared within each non-key piece.
    pub piece_noise: f64,
    /// Per-frame noise on non-key frames.
    pub flank_noise: f64,
    /// Max shots per frame written into the manifest.
    pub shot_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            videos: 20,
            clusters: 4,
            frames: 128,
            dim: 16,
            sigma: 0.1,
            keyframe_fraction: 0.2,
            users: 3,
            expansion: 1,
            core_noise: 0.25,
            flank_shift: 5.0,
            piece_noise: 6.0,
            flank_noise: 0.25,
            shot_rate: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clusters < 2 {
            return bad(format!("clusters must be >= 2, got {}", self.clusters));
        }
        if self.videos == 0 || self.users == 0 || self.dim == 0 || self.expansion == 0 {
            return bad("videos, users, dim and expansion must be >= 1".into());
        }
        if !self.frames.is_multiple_of(self.expansion) {
            return bad(format!("frames {} not divisible by expansion {}", self.frames, self.expansion));
        }
        if self.frames / self.expansion < 2 * self.clusters {
            return bad("too few feature steps for the cluster count".into());
        }
        if !(self.keyframe_fraction > 0.0 && self.keyframe_fraction < 1.0) {
            return bad("keyframe_fraction must be in (0, 1)".into());
        }
        if !(self.sigma >= 0.0) {
            return bad("sigma must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub features: FeatureSequence,
    pub annotations: AnnotationSet,
    /// Planted keyframes at frame resolution.
    pub base_mask: Vec<bool>,
    /// Segment boundaries at frame resolution.
    pub segments: ShotSegmentation,
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < mask.len() {
        if mask[t] {
            let s = t;
            while t < mask.len() && mask[t] {
                t += 1;
            }
            out.push((s, t));
        } else {
            t += 1;
        }
    }
    out
}

/// One synthetic video: `k` contiguous segments around unit-norm centers.
/// Each segment plants a quiet run of keyframes (noise `core_noise * sigma`)
/// at a random position; the other frames carry a video-wide offset, an
/// offset shared within pieces as long as the keyframe run, and per-frame
/// noise. Users mark the planted runs with jittered edges.
pub fn synth_video(spec: &SynthSpec, id: &str, rng: &mut ChaCha8Rng) -> SynthVideo {
    let t_steps = spec.frames / spec.expansion;
    let k = spec.clusters;
    let base = t_steps / k;
    let mut lens = vec![base; k];
    for l in lens.iter_mut().take(t_steps - base * k) {
        *l += 1;
    }
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let v = normal_vec(rng, spec.dim, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let shift = normal_vec(rng, spec.dim, spec.sigma * spec.flank_shift);
    let mut feats = vec![vec![0.0; spec.dim]; t_steps];
    let mut core = vec![false; t_steps];
    let mut bounds = vec![0];
    let mut start = 0;
    for (s, &len) in lens.iter().enumerate() {
        let cs = ((spec.keyframe_fraction * len as f64).floor() as usize).max(1).min(len);
        let cpos = start + rng.random_range(0..=len - cs);
        let mut offset: Option<Vec<f64>> = None;
        let mut count = 0;
        for t in start..start + len {
            if (cpos..cpos + cs).contains(&t) {
                let noise = normal_vec(rng, spec.dim, spec.sigma * spec.core_noise);
                feats[t] = centers[s].iter().zip(&noise).map(|(c, e)| c + e).collect();
                core[t] = true;
                offset = None;
                count = 0;
            } else {
                if offset.is_none() || count >= cs {
                    offset = Some(normal_vec(rng, spec.dim, spec.sigma * spec.piece_noise));
                    count = 0;
                }
                count += 1;
                let jitter = normal_vec(rng, spec.dim, spec.sigma * spec.flank_noise);
                let off = offset.as_ref().expect("set above");
                feats[t] = (0..spec.dim)
                    .map(|d| centers[s][d] + shift[d] + off[d] + jitter[d])
                    .collect();
            }
        }
        start += len;
        bounds.push(start * spec.expansion);
    }
    let n = spec.expansion;
    let base_mask: Vec<bool> = core.iter().flat_map(|&c| std::iter::repeat_n(c, n)).collect();
    let l = base_mask.len();
    let blocks = runs(&base_mask);
    let mut masks = Vec::with_capacity(spec.users);
    for _ in 0..spec.users {
        let mut chosen = None;
        for _ in 0..20 {
            let mut m = vec![false; l];
            for &(a, b) in &blocks {
                let j = ((b - a) / 4).max(1) as i64;
                let mut a2 = (a as i64 + rng.random_range(-j..=j)).clamp(0, l as i64) as usize;
                let mut b2 = (b as i64 + rng.random_range(-j..=j)).clamp(0, l as i64) as usize;
                if b2 <= a2 {
                    (a2, b2) = (a, b);
                }
                m[a2..b2].iter_mut().for_each(|v| *v = true);
            }
            if jaccard(&m, &base_mask) >= 0.5 {
                chosen = Some(m);
                break;
            }
        }
        masks.push(chosen.unwrap_or_else(|| base_mask.clone()));
    }
    let mut data = Vec::with_capacity(t_steps * spec.dim);
    for f in &feats {
        data.extend_from_slice(f);
    }
    let tensor = Tensor::new(&[t_steps, spec.dim, 1, 1], data).expect("synthetic shape");
    SynthVideo {
        features: FeatureSequence {
            id: id.to_string(),
            tensor,
            n,
            provenance: Provenance::Synthetic,
        },
        annotations: AnnotationSet::from_masks(id, &masks).expect("synthetic masks are valid"),
        base_mask,
        segments: ShotSegmentation::new(bounds).expect("increasing bounds"),
    }
}

pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<SynthVideo>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..spec.videos)
        .map(|i| synth_video(spec, &format!("video_{i:03}"), &mut rng))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestDefaults {
    pub budget: Option<f64>,
    pub reduction: Option<Reduction>,
    pub shot_rate: Option<f64>,
    pub provenance: Provenance,
}

impl Default for ManifestDefaults {
    fn default() -> Self {
        ManifestDefaults {
            budget: None,
            reduction: None,
            shot_rate: None,
            provenance: Provenance::Synthetic,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub features: PathBuf,
    pub annotations: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub defaults: ManifestDefaults,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_HEADER: &str = "vsumm-manifest v1";

pub fn format_manifest(m: &Manifest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MANIFEST_HEADER}");
    if let Some(b) = m.defaults.budget {
        let _ = writeln!(out, "budget={b}");
    }
    if let Some(r) = m.defaults.reduction {
        let _ = writeln!(out, "reduction={}", r.as_str());
    }
    if let Some(s) = m.defaults.shot_rate {
        let _ = writeln!(out, "shot_rate={s}");
    }
    let _ = writeln!(out, "provenance={}", m.defaults.provenance.as_str());
    for e in &m.entries {
        let ann = e
            .annotations
            .as_ref()
            .map_or("-".to_string(), |p| p.display().to_string());
        let _ = writeln!(out, "{}\t{}\t{}", e.id, e.features.display(), ann);
    }
    out
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let err = |line: usize, d: String| Error::Parse {
        path: path.to_path_buf(),
        location: format!("line {line}"),
        detail: d,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == MANIFEST_HEADER => {}
        _ => return Err(err(1, format!("expected `{MANIFEST_HEADER}`"))),
    }
    let mut defaults = ManifestDefaults::default();
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (i, raw) in lines {
        let ln = i + 1;
        let line = raw.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !line.contains('\t') {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(ln, "expected key=value or a tab-separated record".into()))?;
            let num = |v: &str| v.trim().parse::<f64>().map_err(|e| err(ln, format!("{k}: {e}")));
            match k.trim() {
                "budget" => defaults.budget = Some(num(v)?),
                "shot_rate" => defaults.shot_rate = Some(num(v)?),
                "reduction" => {
                    defaults.reduction = Some(
                        Reduction::parse(v.trim()).ok_or_else(|| err(ln, format!("unknown reduction `{v}`")))?,
                    )
                }
                "provenance" => {
                    defaults.provenance = Provenance::parse(v.trim())
                        .ok_or_else(|| err(ln, format!("unknown provenance `{v}`")))?
                }
                other => return Err(err(ln, format!("unknown manifest key `{other}`"))),
            }
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(err(ln, format!("record needs 3 tab-separated fields, found {}", f.len())));
        }
        if entries.iter().any(|e| e.id == f[0]) {
            return Err(err(ln, format!("duplicate video id `{}`", f[0])));
        }
        entries.push(ManifestEntry {
            id: f[0].to_string(),
            features: PathBuf::from(f[1]),
            annotations: (f[2] != "-").then(|| PathBuf::from(f[2])),
        });
    }
    Ok(Manifest { defaults, entries })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

#[derive(Clone, Debug)]
pub struct Video {
    pub features: FeatureSequence,
    pub annotations: Option<AnnotationSet>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub defaults: ManifestDefaults,
    pub videos: Vec<Video>,
}

/// Loads every record, resolving relative paths against the manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let m = read_manifest(manifest_path)?;
    load_entries(&m, manifest_path.parent().unwrap_or(Path::new(".")))
}

/// Concatenates several manifests; ids must stay unique.
pub fn load_datasets(paths: &[PathBuf]) -> Result<Dataset> {
    let mut all: Option<Dataset> = None;
    for p in paths {
        let d = load_dataset(p)?;
        match &mut all {
            None => all = Some(d),
            Some(a) => {
                for v in d.videos {
                    if a.videos.iter().any(|x| x.features.id == v.features.id) {
                        return Err(Error::Validation(format!(
                            "video id `{}` appears in more than one manifest",
                            v.features.id
                        )));
                    }
                    a.videos.push(v);
                }
            }
        }
    }
    all.ok_or_else(|| Error::Config("no manifest given".into()))
}

fn load_entries(m: &Manifest, base: &Path) -> Result<Dataset> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let mut videos = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        let mut features = read_features(&resolve(&e.features))?;
        features.id = e.id.clone();
        features.provenance = m.defaults.provenance;
        let annotations = match &e.annotations {
            Some(p) => {
                let a = read_annotations(&resolve(p))?;
                if a.frames != features.frames() {
                    return Err(Error::Validation(format!(
                        "{}: annotations cover {} frames, features {}",
                        e.id,
                        a.frames,
                        features.frames()
                    )));
                }
                Some(a)
            }
            None => None,
        };
        videos.push(Video {
            features,
            annotations,
        });
    }
    Ok(Dataset {
        defaults: m.defaults.clone(),
        videos,
    })
}

/// Writes features, annotations and a manifest under `dir`; returns the
/// manifest path.
pub fn write_synth_dataset(dir: &Path, spec: &SynthSpec, videos: &[SynthVideo]) -> Result<PathBuf> {
    for sub in ["features", "annotations"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(videos.len());
    for v in videos {
        let id = &v.features.id;
        let fp = PathBuf::from("features").join(format!("{id}.fseq"));
        let ap = PathBuf::from("annotations").join(format!("{id}.ann"));
        write_features(&dir.join(&fp), &v.features)?;
        write_annotations(&dir.join(&ap), &v.annotations)?;
        entries.push(ManifestEntry {
            id: id.clone(),
            features: fp,
            annotations: Some(ap),
        });
    }
    let manifest = Manifest {
        defaults: ManifestDefaults {
            budget: Some(spec.keyframe_fraction),
            reduction: Some(Reduction::Mean),
            shot_rate: Some(spec.shot_rate),
            provenance: Provenance::Synthetic,
        },
        entries,
    };
    let path = dir.join("manifest.tsv");
    fs::write(&path, format_manifest(&manifest)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: usize, c: usize, n: usize) -> FeatureSequence {
        let data = (0..t * c).map(|i| i as f64 * 0.25).collect();
        FeatureSequence {
            id: "v".into(),
            tensor: Tensor::new(&[t, c, 1, 1], data).unwrap(),
            n,
            provenance: Provenance::Synthetic,
        }
    }

    #[test]
    fn header_gives_frame_count() {
        let bytes = encode_features(&seq(4, 2, 2).tensor, 2).unwrap();
        let (t, n) = decode_features(&bytes, Path::new("x")).unwrap();
        assert_eq!(t.shape()[0] * n, 8);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let bytes = encode_features(&seq(4, 2, 1).tensor, 1).unwrap();
        let e = decode_features(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_features(&bad, Path::new("x")).is_err());
        assert!(decode_features(&bytes[..10], Path::new("x")).is_err());
    }

    #[test]
    fn non_finite_payload_names_offset() {
        let mut bytes = encode_features(&seq(2, 1, 1).tensor, 1).unwrap();
        bytes[HEADER_BYTES + 4..HEADER_BYTES + 8].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_features(&bytes, Path::new("x")).unwrap_err() {
            Error::Parse { location, .. } => assert_eq!(location, format!("byte {}", HEADER_BYTES + 4)),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn pad_cases() {
        let p = pad_to_pow2(&seq(8, 2, 1), 2);
        assert_eq!(p.seq, seq(8, 2, 1));
        let s = seq(5, 2, 1);
        let p = pad_to_pow2(&s, 2);
        assert_eq!(p.seq.steps(), 8);
        let d = p.seq.tensor.data();
        for t in 5..8 {
            assert_eq!(&d[t * 2..t * 2 + 2], &d[8..10]);
        }
        let scores: Vec<f64> = (0..8).map(f64::from).collect();
        assert_eq!(truncate_scores(scores, p.original_frames()).len(), 5);
    }

    #[test]
    fn shot_scores_need_boundaries() {
        let text = "video=a\nframes=4\nusers=1\nkind=shot_scores\n1 2\n";
        assert!(parse_annotations(text, Path::new("a")).is_err());
        let ok = "video=a\nframes=4\nusers=1\nkind=shot_scores\nrange=1 5\nboundaries=0 2 4\n1 5\n";
        let a = parse_annotations(ok, Path::new("a")).unwrap();
        assert_eq!(a.frame_scores()[0], vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn value_count_error_names_line() {
        let text = "video=a\nframes=3\nusers=2\nkind=keyframe_mask\n1 0 1\n1 0\n";
        match parse_annotations(text, Path::new("a")).unwrap_err() {
            Error::Parse { location, .. } => assert_eq!(location, "line 6"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn out_of_range_is_rejected() {
        let text = "video=a\nframes=2\nusers=1\nkind=frame_scores\n0.5 1.5\n";
        assert!(matches!(
            parse_annotations(text, Path::new("a")),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn synth_zero_noise_segments_are_constant() {
        let spec = SynthSpec {
            sigma: 0.0,
            videos: 1,
            ..Default::default()
        };
        let v = &synth_dataset(&spec, 3).unwrap()[0];
        let d = v.features.tensor.data();
        for (a, b) in v.segments.shots() {
            for t in a + 1..b {
                assert_eq!(&d[t * 16..t * 16 + 16], &d[a * 16..a * 16 + 16]);
            }
        }
    }

    #[test]
    fn synth_rejects_one_cluster() {
        let spec = SynthSpec {
            clusters: 1,
            ..Default::default()
        };
        assert!(matches!(synth_dataset(&spec, 0), Err(Error::Config(_))));
    }
}
