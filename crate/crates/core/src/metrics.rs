//! Detection and localization metrics.

use std::cmp::Ordering;

use crate::alignment::AnomalyMap;
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Scores with binary ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet<T> {
    pub scores: Vec<T>,
    pub labels: Vec<bool>,
}

impl<T: Scalar> ScoredSet<T> {
    pub fn new(scores: Vec<T>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("metric scores".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (p, n) = (self.positives(), self.negatives());
        if p == 0 || n == 0 {
            return Err(Error::Metric("both classes must be present"));
        }
        Ok((p, n))
    }

    /// `(positives, negatives)` per distinct score, ascending.
    fn tie_groups(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| cmp(self.scores[a], self.scores[b]));
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut last: Option<T> = None;
        for i in idx {
            if last != Some(self.scores[i]) {
                groups.push((0, 0));
                last = Some(self.scores[i]);
            }
            let g = groups.last_mut().expect("group pushed");
            if self.labels[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }
}

fn cmp<T: Scalar>(a: T, b: T) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Mann-Whitney AUROC with ties counted as one half.
pub fn auroc<T: Scalar>(s: &ScoredSet<T>) -> Result<T> {
    let (p, n) = s.require_both()?;
    // twice the U statistic, kept integral so the result is exact
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    for (gp, gn) in s.tie_groups() {
        twice_u += gp as u128 * (2 * neg_below + gn as u128);
        neg_below += gn as u128;
    }
    Ok(ratio(twice_u, 2 * p as u128 * n as u128))
}

/// Pairwise AUROC: `(wins + ½ ties) / (P·N)`.
pub fn auroc_bruteforce<T: Scalar>(s: &ScoredSet<T>) -> Result<T> {
    let (p, n) = s.require_both()?;
    let mut twice_u: u128 = 0;
    let pos = s.scores.iter().zip(&s.labels).filter(|p| *p.1).map(|p| *p.0);
    for si in pos {
        for sj in s.scores.iter().zip(&s.labels).filter(|p| !*p.1).map(|p| *p.0) {
            twice_u += match cmp(si, sj) {
                Ordering::Greater => 2,
                Ordering::Equal => 1,
                Ordering::Less => 0,
            };
        }
    }
    Ok(ratio(twice_u, 2 * p as u128 * n as u128))
}

fn ratio<T: Scalar>(num: u128, den: u128) -> T {
    T::lit(num as f64 / den as f64)
}

/// Average precision over the descending sweep, tied scores entering together.
pub fn average_precision<T: Scalar>(s: &ScoredSet<T>) -> Result<T> {
    let total_pos = s.positives();
    if total_pos == 0 {
        return Err(Error::Metric("average precision needs at least one positive"));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0f64;
    for (gp, gn) in s.tie_groups().into_iter().rev() {
        tp += gp;
        fp += gn;
        if gp > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * gp as f64;
        }
    }
    Ok(T::lit(ap / total_pos as f64))
}

/// 4-connected labeling in row-major discovery order: `labels[p]` is 0 for
/// background and `1..=count` otherwise.
pub fn connected_components(mask: &Mask) -> (Vec<usize>, usize) {
    let (h, w) = (mask.h, mask.w);
    let mut labels = vec![0usize; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.pixels[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.pixels[q] && labels[q] == 0 {
                    labels[q] = count;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
    }
    (labels, count)
}

fn check_pairs<T: Scalar>(maps: &[AnomalyMap<T>], masks: &[Mask]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::Shape(format!("{} maps vs {} masks", maps.len(), masks.len())));
    }
    for (m, k) in maps.iter().zip(masks) {
        if (m.h, m.w) != (k.h, k.w) {
            return Err(Error::Shape(format!("map {}x{} vs mask {}x{}", m.h, m.w, k.h, k.w)));
        }
        if m.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("anomaly map".into()));
        }
    }
    Ok(())
}

/// AUROC over every pixel of every map.
pub fn pixel_auroc<T: Scalar>(maps: &[AnomalyMap<T>], masks: &[Mask]) -> Result<T> {
    check_pairs(maps, masks)?;
    let scores = maps.iter().flat_map(|m| m.scores.iter().copied()).collect();
    let labels = masks.iter().flat_map(|m| m.pixels.iter().copied()).collect();
    auroc(&ScoredSet::new(scores, labels)?)
}

/// Area under the per-region-overlap curve up to `fpr_limit`, divided by
/// `fpr_limit`. Every distinct pooled score is a threshold (`score ≥ t`).
pub fn aupro<T: Scalar>(maps: &[AnomalyMap<T>], masks: &[Mask], fpr_limit: T) -> Result<T> {
    check_pairs(maps, masks)?;
    if !(fpr_limit > T::zero() && fpr_limit <= T::one()) {
        return Err(Error::InvalidArgument("fpr_limit must lie in (0, 1]".into()));
    }
    // (score, region or None for a normal pixel)
    let mut pixels: Vec<(T, Option<usize>)> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        let (labels, count) = connected_components(mask);
        let offset = region_sizes.len();
        region_sizes.resize(offset + count, 0);
        for (&s, &l) in map.scores.iter().zip(&labels) {
            let region = (l > 0).then(|| offset + l - 1);
            if let Some(r) = region {
                region_sizes[r] += 1;
            }
            pixels.push((s, region));
        }
    }
    let n_regions = region_sizes.len();
    if n_regions == 0 {
        return Err(Error::Metric("no anomalous regions"));
    }
    let n_normal = pixels.iter().filter(|p| p.1.is_none()).count();
    if n_normal == 0 {
        return Err(Error::Metric("no normal pixels"));
    }
    pixels.sort_by(|a, b| cmp(b.0, a.0));

    let limit = fpr_limit.as_f64();
    let mut fp = 0usize;
    let mut pro_sum = 0.0f64;
    let (mut x0, mut y0) = (0.0f64, 0.0f64);
    let mut area = 0.0f64;
    let mut i = 0;
    while i < pixels.len() {
        let t = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == t {
            match pixels[i].1 {
                Some(r) => pro_sum += 1.0 / region_sizes[r] as f64,
                None => fp += 1,
            }
            i += 1;
        }
        let x1 = fp as f64 / n_normal as f64;
        let y1 = pro_sum / n_regions as f64;
        if x1 >= limit {
            let y_at = if x1 > x0 { y0 + (y1 - y0) * (limit - x0) / (x1 - x0) } else { y1 };
            area += 0.5 * (y0 + y_at) * (limit - x0);
            return Ok(T::lit(area / limit));
        }
        area += 0.5 * (y0 + y1) * (x1 - x0);
        x0 = x1;
        y0 = y1;
    }
    // the final threshold always reaches fpr = 1 ≥ limit
    unreachable!("sweep ended below the fpr limit")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::Resolution;

    fn set(scores: &[f64], labels: &[u8]) -> ScoredSet<f64> {
        ScoredSet::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&set(&[0.9, 0.8, 0.1], &[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(auroc(&set(&[0.1, 0.9], &[1, 0])).unwrap(), 0.0);
        assert_eq!(auroc(&set(&[0.3; 6], &[1, 0, 1, 0, 0, 1])).unwrap(), 0.5);
        assert_eq!(auroc_bruteforce(&set(&[0.9, 0.8, 0.1], &[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(auroc_bruteforce(&set(&[0.3; 4], &[1, 0, 1, 0])).unwrap(), 0.5);
        assert!(matches!(auroc(&set(&[0.1, 0.2], &[1, 1])), Err(Error::Metric(_))));
        assert!(auroc_bruteforce(&set(&[0.1, 0.2], &[0, 0])).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&set(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(average_precision(&set(&[0.2, 0.9], &[1, 0])).unwrap(), 0.5);
        assert_eq!(average_precision(&set(&[0.2, 0.5, 0.1], &[1, 1, 1])).unwrap(), 1.0);
        assert_eq!(average_precision(&set(&[0.5, 0.5], &[1, 0])).unwrap(), 0.5);
        assert!(average_precision(&set(&[0.5], &[0])).is_err());
    }

    #[test]
    fn components_are_four_connected() {
        let m = Mask::new(3, 3, vec![true, false, true, false, true, false, true, true, false]).unwrap();
        let (labels, count) = connected_components(&m);
        assert_eq!(count, 3);
        assert_eq!(labels, vec![1, 0, 2, 0, 3, 0, 3, 3, 0]);
    }

    fn map_of(mask: &Mask, f: impl Fn(bool) -> f64) -> AnomalyMap<f64> {
        AnomalyMap::new(mask.pixels.iter().map(|&p| f(p)).collect(), mask.h, mask.w, Resolution::Pixel).unwrap()
    }

    #[test]
    fn aupro_perfect_and_inverted() {
        let mut px = vec![false; 64];
        for p in [9, 10, 17, 18, 45, 46, 47] {
            px[p] = true;
        }
        let mask = Mask::new(8, 8, px).unwrap();
        let good = aupro(&[map_of(&mask, |p| if p { 1.0 } else { 0.0 })], std::slice::from_ref(&mask), 0.3).unwrap();
        let bad = aupro(&[map_of(&mask, |p| if p { 0.0 } else { 1.0 })], std::slice::from_ref(&mask), 0.3).unwrap();
        assert!((good - 1.0).abs() < 1e-6, "{good}");
        assert!(bad.abs() < 1e-6, "{bad}");
        assert!(aupro(&[map_of(&mask, |_| 0.0)], &[Mask::empty(8, 8)], 0.3).is_err());
        assert!(aupro(&[map_of(&mask, |_| 0.0)], std::slice::from_ref(&mask), 0.0).is_err());
    }

    #[test]
    fn aupro_constant_map_is_half() {
        let mut px = vec![false; 16];
        px[5] = true;
        let mask = Mask::new(4, 4, px).unwrap();
        // single threshold jumps straight to (1, 1): the chord gives pro = fpr
        let v = aupro(&[map_of(&mask, |_| 0.5)], &[mask], 0.3).unwrap();
        assert!((v - 0.15).abs() < 1e-12, "{v}");
    }

    #[test]
    fn pixel_auroc_pools_maps() {
        let mask = Mask::new(1, 2, vec![true, false]).unwrap();
        let maps = [map_of(&mask, |p| if p { 0.9 } else { 0.1 }), map_of(&mask, |p| if p { 0.2 } else { 0.3 })];
        assert_eq!(pixel_auroc(&maps, &[mask.clone(), mask]).unwrap(), 0.75);
    }
}
