//! Brute-force oracles shared by the integration tests and the acceptance
//! suite. They share no code with the library.

#![allow(dead_code)]

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn rep_oracle(x: &[Vec<f64>], s: &[usize]) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for xt in x {
        let mut best = f64::INFINITY;
        for &i in s {
            best = best.min(dist(xt, &x[i]));
        }
        total += best;
    }
    (-total / x.len() as f64).exp()
}

pub fn div_oracle(x: &[Vec<f64>], s: &[usize]) -> f64 {
    if s.len() < 2 {
        return 0.0;
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut total = 0.0;
    for &t in s {
        for &i in s {
            if i != t {
                let dot: f64 = x[t].iter().zip(&x[i]).map(|(a, b)| a * b).sum();
                total += 1.0 - dot / (norm(&x[t]) * norm(&x[i]));
            }
        }
    }
    total / (s.len() * (s.len() - 1)) as f64
}

/// Best total value over every subset that fits.
pub fn knapsack_oracle(items: &[(usize, f64)], cap: usize) -> f64 {
    let n = items.len();
    let mut best = 0.0f64;
    for mask in 0u64..(1 << n) {
        let (mut w, mut v) = (0usize, 0.0);
        for (i, it) in items.iter().enumerate() {
            if mask >> i & 1 == 1 {
                w += it.0;
                v += it.1;
            }
        }
        if w <= cap && v > best {
            best = v;
        }
    }
    best
}

/// Scatter from the explicit Gram matrix of unit-normalized features.
pub fn scatter_oracle(x: &[Vec<f64>], i: usize, j: usize) -> f64 {
    let unit: Vec<Vec<f64>> = x
        .iter()
        .map(|v| {
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter().map(|a| if n > 0.0 { a / n } else { 0.0 }).collect()
        })
        .collect();
    let k = |a: usize, b: usize| unit[a].iter().zip(&unit[b]).map(|(p, q)| p * q).sum::<f64>();
    let diag: f64 = (i..j).map(|t| k(t, t)).sum();
    let mut all = 0.0;
    for t in i..j {
        for u in i..j {
            all += k(t, u);
        }
    }
    diag - all / (j - i) as f64
}

pub fn kts_objective(x: &[Vec<f64>], bounds: &[usize], penalty: f64) -> f64 {
    let l = x.len() as f64;
    let m = (bounds.len() - 1) as f64;
    let scatter: f64 = bounds.windows(2).map(|w| scatter_oracle(x, w[0], w[1])).sum();
    scatter + penalty * m * ((l / m).ln() + 1.0)
}

/// Minimum objective over every placement of at most `max_segments`
/// segments, with the segment sums memoized per interval.
pub fn kts_oracle(x: &[Vec<f64>], max_segments: usize, penalty: f64) -> f64 {
    let l = x.len();
    let g: Vec<Vec<f64>> = (0..=l)
        .map(|i| (0..=l).map(|j| if j > i { scatter_oracle(x, i, j) } else { 0.0 }).collect())
        .collect();
    let mut best = f64::INFINITY;
    let mut cuts = Vec::new();
    fn rec(
        g: &[Vec<f64>],
        l: usize,
        start: usize,
        left: usize,
        cuts: &mut Vec<usize>,
        penalty: f64,
        best: &mut f64,
    ) {
        // close the current segment at l
        let mut bounds = vec![0];
        bounds.extend(cuts.iter().copied());
        bounds.push(l);
        let m = (bounds.len() - 1) as f64;
        let s: f64 = bounds.windows(2).map(|w| g[w[0]][w[1]]).sum();
        let obj = s + penalty * m * ((l as f64 / m).ln() + 1.0);
        if obj < *best {
            *best = obj;
        }
        if left == 0 {
            return;
        }
        for c in start + 1..l {
            cuts.push(c);
            rec(g, l, c, left - 1, cuts, penalty, best);
            cuts.pop();
        }
    }
    rec(&g, l, 0, max_segments.min(l) - 1, &mut cuts, penalty, &mut best);
    best
}

/// Deterministic pseudo-random values in [-1, 1).
pub fn noise(seed: u64, n: usize) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsumm::data::{AnnotationKind, AnnotationSet, FeatureSequence, Provenance};
use vsumm::shots::ShotSegmentation;
use vsumm::Tensor;

/// A random feature file of up to 6 steps with f32-representable values.
pub fn random_features(seed: u64) -> FeatureSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [
        rng.random_range(1..7),
        rng.random_range(1..5),
        rng.random_range(1..3),
        rng.random_range(1..3),
    ];
    let data = (0..shape.iter().product())
        .map(|_| f64::from(rng.random_range(-1e3f32..1e3)))
        .collect();
    FeatureSequence {
        id: format!("f{seed}"),
        tensor: Tensor::new(&shape, data).unwrap(),
        n: rng.random_range(1..4),
        provenance: Provenance::Synthetic,
    }
}

/// A random annotation set of any kind, values drawn inside the range.
pub fn random_annotations(seed: u64) -> AnnotationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = rng.random_range(1..30);
    let users = rng.random_range(1..5);
    let kind = [
        AnnotationKind::KeyframeMask,
        AnnotationKind::FrameScores,
        AnnotationKind::ShotScores,
    ][rng.random_range(0..3)];
    let range = match kind {
        AnnotationKind::KeyframeMask => (0.0, 1.0),
        _ => (rng.random_range(-5.0..0.0), rng.random_range(1.0..10.0)),
    };
    let boundaries = (kind == AnnotationKind::ShotScores || rng.random_bool(0.3)).then(|| {
        let mut b: Vec<usize> = (1..frames).filter(|_| rng.random_bool(0.3)).collect();
        b.insert(0, 0);
        b.push(frames);
        ShotSegmentation::new(b).unwrap()
    });
    let width = match (&boundaries, kind) {
        (Some(s), AnnotationKind::ShotScores) => s.len(),
        _ => frames,
    };
    let users = (0..users)
        .map(|_| {
            (0..width)
                .map(|_| match kind {
                    AnnotationKind::KeyframeMask => f64::from(u8::from(rng.random_bool(0.4))),
                    _ => rng.random_range(range.0..=range.1),
                })
                .collect()
        })
        .collect();
    AnnotationSet {
        video: format!("a{seed}"),
        frames,
        kind,
        range,
        boundaries,
        users,
    }
}

use vsumm::rl::ActionTrace;

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `E[(R - c) d log pi(a) / dz]` by enumerating all `2^L` traces.
pub fn exact_gradient(z: &[f64], reward: &dyn Fn(&ActionTrace) -> f64, c: f64) -> Vec<f64> {
    let l = z.len();
    let mut g = vec![0.0; l];
    for bits in 0u32..1 << l {
        let a: Vec<bool> = (0..l).map(|i| bits >> i & 1 == 1).collect();
        let prob: f64 = z
            .iter()
            .zip(&a)
            .map(|(&z, &s)| if s { logistic(z) } else { 1.0 - logistic(z) })
            .product();
        let w = prob * (reward(&ActionTrace::new(a.clone())) - c);
        for i in 0..l {
            g[i] += w * (f64::from(u8::from(a[i])) - logistic(z[i]));
        }
    }
    g
}
