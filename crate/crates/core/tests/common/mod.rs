//! Reference implementations written independently of the library, plus
//! random instance builders shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokalign::alignment::{AnomalyMap, Resolution};
use tokalign::data::{LabeledSample, Mask, TokenGrid};
use tokalign::grad::{evaluate, Assignments, LossTerm};
use tokalign::matrix::Matrix;
use tokalign::model::{init_model_with_noise, SubspaceModel};
use tokalign::TrainConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_cost(rng: &mut ChaCha8Rng, n: usize, q: usize, lo: f64, hi: f64) -> Matrix<f64> {
    Matrix::from_fn(n, q, |_, _| rng.random_range(lo..hi))
}

/// Plain multiplicative Sinkhorn with uniform marginals, fine for moderate λ.
pub fn scaling_sinkhorn(cost: &Matrix<f64>, lambda: f64, iters: usize) -> Vec<Vec<f64>> {
    let (n, q) = cost.shape();
    let k: Vec<Vec<f64>> = (0..n).map(|i| (0..q).map(|j| (-cost.row(i)[j] / lambda).exp()).collect()).collect();
    let (mu, nu) = (1.0 / n as f64, 1.0 / q as f64);
    let mut a = vec![1.0; n];
    let mut b = vec![1.0; q];
    for _ in 0..iters {
        for i in 0..n {
            let s: f64 = (0..q).map(|j| k[i][j] * b[j]).sum();
            a[i] = mu / s;
        }
        for j in 0..q {
            let s: f64 = (0..n).map(|i| k[i][j] * a[i]).sum();
            b[j] = nu / s;
        }
    }
    (0..n).map(|i| (0..q).map(|j| a[i] * k[i][j] * b[j]).collect()).collect()
}

/// Optimal cost of a 3×3 uniform-marginal transport problem. The transport
/// polytope is (1/3)× the Birkhoff polytope, so a permutation is optimal.
pub fn permutation_ot_3x3(cost: &Matrix<f64>) -> f64 {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    PERMS.iter().map(|p| (0..3).map(|i| cost.row(i)[p[i]]).sum::<f64>() / 3.0).fold(f64::INFINITY, f64::min)
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            twice_wins += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    twice_wins as f64 / (2 * pairs) as f64
}

/// Σ over distinct thresholds of precision × recall increment.
pub fn threshold_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in ts {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| l && s >= t).count() as f64;
        let all = scores.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / p;
        ap += (recall - prev_recall) * tp / all;
        prev_recall = recall;
    }
    ap
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// 4-connected regions by union-find; returns, per pixel, a region id or `None`.
pub fn union_find_regions(mask: &Mask) -> (Vec<Option<usize>>, usize) {
    let (h, w) = (mask.h, mask.w);
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            if !mask.pixels[p] {
                continue;
            }
            for q in [(c + 1 < w).then(|| p + 1), (r + 1 < h).then(|| p + w)].into_iter().flatten() {
                if mask.pixels[q] {
                    let (a, b) = (find(&mut parent, p), find(&mut parent, q));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut ids = std::collections::HashMap::new();
    let regions = (0..h * w)
        .map(|p| {
            mask.pixels[p].then(|| {
                let root = find(&mut parent, p);
                let next = ids.len();
                *ids.entry(root).or_insert(next)
            })
        })
        .collect();
    (regions, ids.len())
}

/// AUPRO from `n_thresholds` evenly spaced thresholds over the pooled score
/// range, the curve anchored at the origin, trapezoid-integrated up to
/// `fpr_limit` and divided by it.
pub fn dense_aupro(maps: &[AnomalyMap<f64>], masks: &[Mask], fpr_limit: f64, n_thresholds: usize) -> f64 {
    let mut pixels: Vec<(f64, Option<usize>)> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        let (regions, count) = union_find_regions(mask);
        let offset = sizes.len();
        sizes.resize(offset + count, 0);
        for (&s, r) in map.scores.iter().zip(regions) {
            let r = r.map(|r| r + offset);
            if let Some(r) = r {
                sizes[r] += 1;
            }
            pixels.push((s, r));
        }
    }
    let n_normal = pixels.iter().filter(|p| p.1.is_none()).count() as f64;
    let hi = pixels.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let lo = pixels.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let mut curve = vec![(0.0, 0.0)];
    for k in 0..n_thresholds {
        let t = if k + 1 == n_thresholds { lo } else { hi - (hi - lo) * k as f64 / (n_thresholds - 1) as f64 };
        let mut hits = vec![0usize; sizes.len()];
        let mut fp = 0usize;
        for &(s, r) in &pixels {
            if s >= t {
                match r {
                    Some(r) => hits[r] += 1,
                    None => fp += 1,
                }
            }
        }
        let pro = hits.iter().zip(&sizes).map(|(&a, &b)| a as f64 / b as f64).sum::<f64>() / sizes.len() as f64;
        curve.push((fp as f64 / n_normal, pro));
    }
    let mut area = 0.0;
    for win in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (win[0], win[1]);
        if x1 >= fpr_limit {
            let y = if x1 > x0 { y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0) } else { y1 };
            area += 0.5 * (y0 + y) * (fpr_limit - x0);
            return area / fpr_limit;
        }
        area += 0.5 * (y0 + y1) * (x1 - x0);
    }
    unreachable!("lowest threshold admits every pixel")
}

/// Random rectangles on an `h×w` mask; `None` for an all-normal mask.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, rects: usize) -> Mask {
    let mut pixels = vec![false; h * w];
    for _ in 0..rects {
        let (rh, rw) = (rng.random_range(1..=h / 2), rng.random_range(1..=w / 2));
        let (r0, c0) = (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw));
        for r in r0..r0 + rh {
            for c in c0..c0 + rw {
                pixels[r * w + c] = true;
            }
        }
    }
    Mask::new(h, w, pixels).unwrap()
}

/// Map correlated with the mask, quantized to `levels` values when given.
pub fn random_map(rng: &mut ChaCha8Rng, mask: &Mask, levels: Option<usize>) -> AnomalyMap<f64> {
    let scores = mask
        .pixels
        .iter()
        .map(|&m| {
            let s: f64 = (rng.random_range(0.0..1.0) + if m { 0.4 } else { 0.0 }) / 1.4;
            match levels {
                Some(l) => (s * (l - 1) as f64).round() / (l - 1) as f64,
                None => s,
            }
        })
        .collect();
    AnomalyMap::new(scores, mask.h, mask.w, Resolution::Pixel).unwrap()
}

/// Model drawn from the training initialization, then jittered so offsets
/// and exact-identity structure do not make any gradient trivially zero.
pub fn random_model(rng: &mut ChaCha8Rng, d: usize, q: usize) -> SubspaceModel<f64> {
    let mut model = init_model_with_noise::<f64>(d, q, rng.random(), 0.1).unwrap();
    for group in model.groups_mut() {
        for x in group.iter_mut() {
            *x += rng.random_range(-0.05..0.05);
        }
    }
    model
}

/// `h×w` grid, mask at resolution factor `s`, one planted rectangle when anomalous.
pub fn random_sample(
    rng: &mut ChaCha8Rng,
    d: usize,
    h: usize,
    w: usize,
    s: usize,
    anomalous: bool,
) -> LabeledSample<f64> {
    let tokens = Matrix::from_fn(h * w, d, |_, _| rng.random_range(-1.0..1.0));
    let global = Some((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
    let grid = TokenGrid::new(tokens, h, w, global).unwrap();
    let mut pixels = vec![false; h * s * w * s];
    if anomalous {
        let (r0, c0) = (rng.random_range(0..h - 1), rng.random_range(0..w - 1));
        for r in r0 * s..(r0 + 2) * s {
            for c in c0 * s..(c0 + 2) * s {
                pixels[r * w * s + c] = true;
            }
        }
    }
    LabeledSample::new(grid, Mask::new(h * s, w * s, pixels).unwrap()).unwrap()
}

/// Central differences for every loss term, assignments held fixed. The
/// total's numeric derivative is the weighted sum of the per-term differences,
/// which avoids rounding the large weighted sum before differencing. Returns,
/// per term in `LossTerm::ALL` order, `max |analytic − numeric| / max(|numeric|, 1e-8)`.
pub fn central_difference_errors(
    model: &SubspaceModel<f64>,
    sample: &LabeledSample<f64>,
    cfg: &TrainConfig,
    fixed: &Assignments<f64>,
    h: f64,
) -> [f64; 6] {
    let weights = [1.0, 1.0, 1.0, cfg.eta, cfg.xi];
    let analytic: Vec<Vec<f64>> = LossTerm::ALL
        .iter()
        .map(|&t| {
            let g = evaluate(model, sample, cfg, Some(fixed), Some(t)).unwrap().grads.unwrap();
            g.params.groups().into_iter().flat_map(|(_, v)| v.to_vec()).collect()
        })
        .collect();
    let terms = |m: &SubspaceModel<f64>| evaluate(m, sample, cfg, Some(fixed), None).unwrap().breakdown.terms();
    let mut work = model.clone();
    let mut worst = [0.0f64; 6];
    let mut idx = 0;
    for gi in 0..model.groups().len() {
        for e in 0..model.groups()[gi].1.len() {
            let orig = work.groups_mut()[gi][e];
            work.groups_mut()[gi][e] = orig + h;
            let plus = terms(&work);
            work.groups_mut()[gi][e] = orig - h;
            let minus = terms(&work);
            work.groups_mut()[gi][e] = orig;
            let mut numeric = [0.0f64; 6];
            for t in 0..5 {
                numeric[t] = (plus[t] - minus[t]) / (2.0 * h);
                numeric[5] += weights[t] * numeric[t];
            }
            for t in 0..6 {
                let err = (analytic[t][idx] - numeric[t]).abs() / numeric[t].abs().max(1e-8);
                worst[t] = worst[t].max(err);
            }
            idx += 1;
        }
    }
    worst
}
