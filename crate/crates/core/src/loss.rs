//! Training losses and their pixel-level derivatives.
//!
//! Patch-level maps are upsampled with align-corners bilinear interpolation
//! before any pixel-level loss. Each loss has a `*_grad` companion returning
//! the derivative with respect to its map arguments.

use crate::alignment::two_class_softmax;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::scalar::{dot, norm, Scalar};

const P_FLOOR: f64 = 1e-12;

/// Precomputed align-corners bilinear taps from an `h × w` grid to `th × tw`.
#[derive(Clone, Debug)]
pub struct Upsampler<T> {
    pub src: (usize, usize),
    pub dst: (usize, usize),
    taps: Vec<[(usize, T); 4]>,
}

impl<T: Scalar> Upsampler<T> {
    pub fn new(h: usize, w: usize, th: usize, tw: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty source map".into()));
        }
        if th < h || tw < w {
            return Err(Error::InvalidArgument(format!("cannot upsample {h}x{w} to smaller {th}x{tw}")));
        }
        let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, T) {
            if n_out == 1 || n_in == 1 {
                return (0, 0, T::zero());
            }
            let pos = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, T::lit(pos - lo as f64))
        };
        let mut taps = Vec::with_capacity(th * tw);
        for y in 0..th {
            let (y0, y1, fy) = coord(y, th, h);
            for x in 0..tw {
                let (x0, x1, fx) = coord(x, tw, w);
                let one = T::one();
                taps.push([
                    (y0 * w + x0, (one - fy) * (one - fx)),
                    (y0 * w + x1, (one - fy) * fx),
                    (y1 * w + x0, fy * (one - fx)),
                    (y1 * w + x1, fy * fx),
                ]);
            }
        }
        Ok(Self { src: (h, w), dst: (th, tw), taps })
    }

    pub fn apply(&self, map: &[T]) -> Vec<T> {
        assert_eq!(map.len(), self.src.0 * self.src.1, "upsampler input size");
        self.taps.iter().map(|t| t.iter().fold(T::zero(), |acc, &(i, wt)| acc + wt * map[i])).collect()
    }

    /// Adjoint of [`Upsampler::apply`]: scatters pixel gradients back onto the grid.
    pub fn apply_transpose(&self, grad: &[T]) -> Vec<T> {
        assert_eq!(grad.len(), self.taps.len(), "upsampler gradient size");
        let mut out = vec![T::zero(); self.src.0 * self.src.1];
        for (t, &g) in self.taps.iter().zip(grad) {
            for &(i, wt) in t {
                out[i] = out[i] + wt * g;
            }
        }
        out
    }
}

pub fn bilinear_upsample<T: Scalar>(map: &[T], h: usize, w: usize, th: usize, tw: usize) -> Result<Vec<T>> {
    if map.len() != h * w {
        return Err(Error::Shape(format!("{} values for a {h}x{w} map", map.len())));
    }
    Ok(Upsampler::new(h, w, th, tw)?.apply(map))
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// Mean of `-(1 - p_t)^γ log p_t`, `p_t = S_a` on anomalous pixels and `S_n` on normal ones.
pub fn focal_loss<T: Scalar>(s_n: &[T], s_a: &[T], mask: &[T], gamma: T) -> Result<T> {
    Ok(focal_grad(s_n, s_a, mask, gamma)?.0)
}

/// Focal loss with its derivatives `(∂/∂S_n, ∂/∂S_a)`.
pub fn focal_grad<T: Scalar>(s_n: &[T], s_a: &[T], mask: &[T], gamma: T) -> Result<(T, Vec<T>, Vec<T>)> {
    check_len(s_n.len(), mask.len(), "focal S_n vs mask")?;
    check_len(s_a.len(), mask.len(), "focal S_a vs mask")?;
    if mask.is_empty() {
        return Err(Error::Shape("focal loss over an empty mask".into()));
    }
    let n = T::count(mask.len());
    let floor = T::lit(P_FLOOR);
    let mut total = T::zero();
    let mut g_n = vec![T::zero(); mask.len()];
    let mut g_a = vec![T::zero(); mask.len()];
    for i in 0..mask.len() {
        let anomalous = mask[i] > T::lit(0.5);
        let raw = if anomalous { s_a[i] } else { s_n[i] };
        let p = raw.max(floor);
        let q = T::one() - p;
        let weight = if gamma == T::zero() { T::one() } else { q.max(T::zero()).powf(gamma) };
        total = total - weight * p.ln();
        let d = if raw < floor {
            T::zero()
        } else {
            let focusing = if gamma == T::zero() || q <= T::zero() {
                T::zero()
            } else {
                gamma * q.powf(gamma - T::one()) * p.ln()
            };
            (focusing - weight / p) / n
        };
        if anomalous {
            g_a[i] = d;
        } else {
            g_n[i] = d;
        }
    }
    Ok((total / n, g_n, g_a))
}

/// `1 - (2 Σ S·t + smooth) / (Σ S + Σ t + smooth)`.
pub fn dice_loss<T: Scalar>(s: &[T], target: &[T], smooth: T) -> Result<T> {
    Ok(dice_grad(s, target, smooth)?.0)
}

pub fn dice_grad<T: Scalar>(s: &[T], target: &[T], smooth: T) -> Result<(T, Vec<T>)> {
    check_len(s.len(), target.len(), "dice map vs target")?;
    let inter = dot(s, target);
    let union: T = s.iter().copied().sum::<T>() + target.iter().copied().sum::<T>();
    let num = T::lit(2.0) * inter + smooth;
    let den = union + smooth;
    let grad = target.iter().map(|&t| -(T::lit(2.0) * t * den - num) / (den * den)).collect();
    Ok((T::one() - num / den, grad))
}

/// Focal + anomaly-dice + normal-dice on upsampled maps.
///
/// Returns the loss and its derivatives with respect to the patch-level
/// `(S_n, S_a)` inputs.
pub fn local_loss_grad<T: Scalar>(
    up: &Upsampler<T>,
    s_n: &[T],
    s_a: &[T],
    mask: &[T],
    gamma: T,
    smooth: T,
) -> Result<(T, Vec<T>, Vec<T>)> {
    let px_n = up.apply(s_n);
    let px_a = up.apply(s_a);
    let (pix_loss, gp_n, gp_a) = pixel_local_loss_grad(&px_n, &px_a, mask, gamma, smooth)?;
    let g_n = up.apply_transpose(&gp_n);
    let g_a = up.apply_transpose(&gp_a);
    Ok((pix_loss, g_n, g_a))
}

fn pixel_local_loss_grad<T: Scalar>(
    px_n: &[T],
    px_a: &[T],
    mask: &[T],
    gamma: T,
    smooth: T,
) -> Result<(T, Vec<T>, Vec<T>)> {
    let inverse: Vec<T> = mask.iter().map(|&m| T::one() - m).collect();
    let (focal, mut g_n, mut g_a) = focal_grad(px_n, px_a, mask, gamma)?;
    let (dice_a, gd_a) = dice_grad(px_a, mask, smooth)?;
    let (dice_n, gd_n) = dice_grad(px_n, &inverse, smooth)?;
    g_a.iter_mut().zip(&gd_a).for_each(|(g, &d)| *g = *g + d);
    g_n.iter_mut().zip(&gd_n).for_each(|(g, &d)| *g = *g + d);
    Ok((focal + dice_a + dice_n, g_n, g_a))
}

/// Local loss on patch-level `(S_n, S_a)` maps against a pixel mask.
pub fn base_local_loss<T: Scalar>(
    s_n: &[T],
    s_a: &[T],
    patch: (usize, usize),
    mask: &crate::data::Mask,
    cfg: &TrainConfig,
) -> Result<T> {
    let up = Upsampler::new(patch.0, patch.1, mask.h, mask.w)?;
    let m = mask.as_scalars();
    Ok(local_loss_grad(&up, s_n, s_a, &m, T::lit(cfg.gamma_focal), T::lit(cfg.dice_smooth))?.0)
}

/// Same structure as [`base_local_loss`], applied to the dynamic-alignment maps.
pub fn da_local_loss<T: Scalar>(
    s_n_da: &[T],
    s_a_da: &[T],
    patch: (usize, usize),
    mask: &crate::data::Mask,
    cfg: &TrainConfig,
) -> Result<T> {
    base_local_loss(s_n_da, s_a_da, patch, mask, cfg)
}

/// Binary cross-entropy of the two-class temperature softmax over `cos(ḡ_c, f)`.
pub fn global_loss<T: Scalar>(g_bar_n: &[T], g_bar_a: &[T], f: &[T], label: u8, tau: T) -> Result<T> {
    let (nn, na, nf) = (norm(g_bar_n), norm(g_bar_a), norm(f));
    if nn == T::zero() || na == T::zero() || nf == T::zero() {
        return Err(Error::ZeroNormRow { what: "global embedding", row: 0 });
    }
    let s_n = dot(g_bar_n, f) / (nn * nf);
    let s_a = dot(g_bar_a, f) / (na * nf);
    Ok(binary_ce_from_logits(s_n, s_a, label, tau).0)
}

/// `(-log P_y, P_a)` in overflow-free form.
pub(crate) fn binary_ce_from_logits<T: Scalar>(s_n: T, s_a: T, label: u8, tau: T) -> (T, T) {
    let margin = (s_a - s_n) / tau;
    let signed = if label == 1 { -margin } else { margin };
    // softplus(x) = max(x, 0) + ln(1 + e^{-|x|})
    let loss = signed.max(T::zero()) + (-signed.abs()).exp().ln_1p();
    (loss, two_class_softmax(s_n, s_a, tau).1)
}

/// Margin loss on pixel-level dynamic-alignment maps.
///
/// Default form: normal pixels pay `max(S_a − δ−, 0)`; literal form:
/// `max(S_n − δ−, 0)`. Anomalous pixels pay `max(δ+ − S_a, 0)` in both.
/// Each term is a mean over its pixel set; an empty set contributes 0.
pub fn hinge_loss<T: Scalar>(
    px_n: &[T],
    px_a: &[T],
    mask: &[T],
    delta_minus: T,
    delta_plus: T,
    literal: bool,
) -> Result<T> {
    Ok(hinge_grad(px_n, px_a, mask, delta_minus, delta_plus, literal)?.0)
}

pub fn hinge_grad<T: Scalar>(
    px_n: &[T],
    px_a: &[T],
    mask: &[T],
    delta_minus: T,
    delta_plus: T,
    literal: bool,
) -> Result<(T, Vec<T>, Vec<T>)> {
    check_len(px_n.len(), mask.len(), "hinge S_n vs mask")?;
    check_len(px_a.len(), mask.len(), "hinge S_a vs mask")?;
    let n_anom = mask.iter().filter(|&&m| m > T::lit(0.5)).count();
    let n_norm = mask.len() - n_anom;
    let inv = |c: usize| if c == 0 { T::zero() } else { T::one() / T::count(c) };
    let (w_norm, w_anom) = (inv(n_norm), inv(n_anom));
    let mut loss = T::zero();
    let mut g_n = vec![T::zero(); mask.len()];
    let mut g_a = vec![T::zero(); mask.len()];
    for i in 0..mask.len() {
        if mask[i] > T::lit(0.5) {
            let gap = delta_plus - px_a[i];
            if gap > T::zero() {
                loss = loss + w_anom * gap;
                g_a[i] = -w_anom;
            }
        } else if literal {
            let gap = px_n[i] - delta_minus;
            if gap > T::zero() {
                loss = loss + w_norm * gap;
                g_n[i] = w_norm;
            }
        } else {
            let gap = px_a[i] - delta_minus;
            if gap > T::zero() {
                loss = loss + w_norm * gap;
                g_a[i] = w_norm;
            }
        }
    }
    Ok((loss, g_n, g_a))
}

/// Per-term losses and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown<T> {
    pub l_global: T,
    pub l_base: T,
    pub l_da: T,
    pub l_hinge: T,
    pub l_reg: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn zero() -> Self {
        Self {
            l_global: T::zero(),
            l_base: T::zero(),
            l_da: T::zero(),
            l_hinge: T::zero(),
            l_reg: T::zero(),
            total: T::zero(),
        }
    }

    pub fn terms(&self) -> [T; 5] {
        [self.l_global, self.l_base, self.l_da, self.l_hinge, self.l_reg]
    }

    /// Component-wise mean, with the total recomputed from the means.
    pub fn mean(items: &[Self], cfg: &TrainConfig) -> Self {
        if items.is_empty() {
            return Self::zero();
        }
        let n = T::count(items.len());
        let avg = |f: fn(&Self) -> T| items.iter().map(f).sum::<T>() / n;
        total_loss(avg(|b| b.l_global), avg(|b| b.l_base), avg(|b| b.l_da), avg(|b| b.l_hinge), avg(|b| b.l_reg), cfg)
    }
}

/// `L_base + L_da + L_global + η L_hinge + ξ L_reg`.
pub fn total_loss<T: Scalar>(
    l_global: T,
    l_base: T,
    l_da: T,
    l_hinge: T,
    l_reg: T,
    cfg: &TrainConfig,
) -> LossBreakdown<T> {
    let total = l_base + l_da + l_global + T::lit(cfg.eta) * l_hinge + T::lit(cfg.xi) * l_reg;
    LossBreakdown { l_global, l_base, l_da, l_hinge, l_reg, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Mask;

    #[test]
    fn upsample_examples() {
        let c = bilinear_upsample(&[0.3; 6], 2, 3, 7, 9).unwrap();
        assert!(c.iter().all(|&x| (x - 0.3f64).abs() < 1e-15));
        let m = bilinear_upsample(&[0.0, 1.0, 0.0, 1.0], 2, 2, 2, 3).unwrap();
        assert_eq!(m, vec![0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
        let src = [0.1, 0.7, -0.2, 0.4, 0.9, 0.3];
        assert_eq!(bilinear_upsample(&src, 2, 3, 2, 3).unwrap(), src.to_vec());
        assert!(bilinear_upsample(&src, 2, 3, 1, 3).is_err());
    }

    #[test]
    fn upsample_transpose_is_adjoint() {
        let up = Upsampler::<f64>::new(3, 2, 7, 5).unwrap();
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..35).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs = dot(&up.apply(&x), &y);
        let rhs = dot(&x, &up.apply_transpose(&y));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn focal_examples() {
        let mask = [1.0, 0.0];
        assert_eq!(focal_loss(&[0.0, 1.0], &[1.0, 0.0], &mask, 2.0).unwrap(), 0.0);
        let v = focal_loss(&[0.5], &[0.5], &[1.0], 2.0).unwrap();
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((v - 0.17329).abs() < 1e-5);
        let ce = focal_loss(&[0.8, 0.3], &[0.2, 0.7], &[0.0, 1.0], 0.0).unwrap();
        assert!((ce - (-(0.8f64.ln()) - 0.7f64.ln()) / 2.0).abs() < 1e-15);
        // exact zero probability is clamped rather than producing infinity
        assert!(focal_loss::<f64>(&[1.0], &[0.0], &[1.0], 2.0).unwrap().is_finite());
    }

    #[test]
    fn dice_examples() {
        let t = [1.0, 1.0, 0.0, 1.0];
        assert_eq!(dice_loss(&t, &t, 1.0).unwrap(), 0.0);
        let v: f64 = dice_loss(&[0.0; 5], &[1.0; 5], 1.0).unwrap();
        assert!((v - (1.0 - 1.0 / 6.0)).abs() < 1e-15);
        assert_eq!(dice_loss(&[0.0; 3], &[0.0; 3], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn local_loss_examples() {
        let cfg = TrainConfig::default();
        // perfect binary maps at full resolution
        let mask = Mask::new(4, 4, (0..16).map(|i| i % 4 < 2).collect()).unwrap();
        let s_a: Vec<f64> = mask.as_scalars();
        let s_n: Vec<f64> = s_a.iter().map(|x| 1.0 - x).collect();
        let perfect = base_local_loss(&s_n, &s_a, (4, 4), &mask, &cfg).unwrap();
        assert!(perfect.abs() < 1e-12);

        // chance prediction on a balanced mask: the focal term is 0.25 ln 2, dice terms equal
        let half = vec![0.5; 16];
        let chance = base_local_loss(&half, &half, (4, 4), &mask, &cfg).unwrap();
        let m: Vec<f64> = mask.as_scalars();
        let inv: Vec<f64> = m.iter().map(|x| 1.0 - x).collect();
        let dice_a = dice_loss(&half, &m, 1.0).unwrap();
        let dice_n = dice_loss(&half, &inv, 1.0).unwrap();
        assert_eq!(dice_a, dice_n);
        assert!((chance - (0.25 * 2f64.ln() + dice_a + dice_n)).abs() < 1e-12);

        let inverted = base_local_loss(&s_a, &s_n, (4, 4), &mask, &cfg).unwrap();
        assert!(inverted > chance);
        assert_eq!(da_local_loss(&half, &half, (4, 4), &mask, &cfg).unwrap(), chance);
    }

    #[test]
    fn global_examples() {
        let f = [1.0, 0.5, -0.2];
        let g = [0.3, 0.2, 0.9];
        assert!((global_loss(&g, &g, &f, 1, 0.07).unwrap() - 2f64.ln()).abs() < 1e-12);
        let sat = global_loss(&[-1.0, -0.5, 0.2], &f, &f, 1, 0.01).unwrap();
        assert!(sat < 1e-12);
        let other = [0.9, -0.4, 0.1];
        let sum = global_loss(&other, &g, &f, 1, 0.07).unwrap() + global_loss(&other, &g, &f, 0, 0.07).unwrap();
        assert!(sum >= 2.0 * 2f64.ln() - 1e-12);
        assert!(global_loss(&[0.0; 3], &g, &f, 0, 0.07).is_err());
    }

    #[test]
    fn hinge_examples() {
        let mask = [0.0, 0.0, 1.0];
        let s_a = [0.0, 0.0, 1.0];
        let s_n: Vec<f64> = s_a.iter().map(|x| 1.0 - x).collect();
        assert_eq!(hinge_loss(&s_n, &s_a, &mask, 0.5, 0.5, false).unwrap(), 0.0);
        let v: f64 = hinge_loss(&[0.3], &[0.7], &[0.0], 0.5, 0.5, false).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
        let all_normal: f64 = hinge_loss(&[0.9, 0.2], &[0.1, 0.8], &[0.0, 0.0], 0.5, 0.5, false).unwrap();
        assert!((all_normal - 0.15).abs() < 1e-15);
        // literal form penalizes the normal-class score on normal pixels
        let lit: f64 = hinge_loss(&[0.9, 0.2], &[0.1, 0.8], &[0.0, 0.0], 0.5, 0.5, true).unwrap();
        assert!((lit - 0.2).abs() < 1e-15);
    }

    #[test]
    fn total_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.0, &cfg).total, 0.0);
        assert_eq!(total_loss(1.0, 1.0, 1.0, 1.0, 1.0, &cfg).total, 108.0);
        let plain = TrainConfig { eta: 0.0, xi: 0.0, ..cfg };
        assert_eq!(total_loss(0.5, 0.25, 2.0, 9.0, 9.0, &plain).total, 2.75);
    }
}
