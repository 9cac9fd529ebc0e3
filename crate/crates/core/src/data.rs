//! Token grids, masks, and the seeded planted-anomaly generator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{norm, Scalar};

/// `N × d` patch tokens on an `h × w` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    pub tokens: Matrix<T>,
    pub h: usize,
    pub w: usize,
    pub global_embedding: Option<Vec<T>>,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn new(tokens: Matrix<T>, h: usize, w: usize, global_embedding: Option<Vec<T>>) -> Result<Self> {
        if h * w != tokens.rows() {
            return Err(Error::Shape(format!("{}x{} layout for {} tokens", h, w, tokens.rows())));
        }
        if tokens.rows() == 0 || tokens.cols() == 0 {
            return Err(Error::Shape("empty token grid".into()));
        }
        if !tokens.is_finite() {
            return Err(Error::NonFinite("token embeddings".into()));
        }
        if let Some(row) = (0..tokens.rows()).find(|&i| norm(tokens.row(i)) == T::zero()) {
            return Err(Error::ZeroNormRow { what: "token", row });
        }
        if let Some(g) = &global_embedding {
            if g.len() != tokens.cols() {
                return Err(Error::Shape("global embedding width differs from tokens".into()));
            }
            if g.iter().any(|x| !x.is_finite()) || norm(g) == T::zero() {
                return Err(Error::NonFinite("global embedding".into()));
            }
        }
        Ok(Self { tokens, h, w, global_embedding })
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// The image-level embedding `f`: the stored global embedding, or the mean patch token.
    pub fn pooled_embedding(&self) -> Vec<T> {
        if let Some(g) = &self.global_embedding {
            return g.clone();
        }
        let n = T::count(self.n_tokens());
        self.tokens.col_sums().into_iter().map(|s| s / n).collect()
    }
}

/// Binary pixel mask, row-major; `true` marks anomalous pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<bool>,
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self { h, w, pixels: vec![false; h * w] }
    }

    pub fn new(h: usize, w: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != h * w {
            return Err(Error::Shape(format!("{} pixels for a {h}x{w} mask", pixels.len())));
        }
        Ok(Self { h, w, pixels })
    }

    pub fn any(&self) -> bool {
        self.pixels.iter().any(|&p| p)
    }

    pub fn positives(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn as_scalars<T: Scalar>(&self) -> Vec<T> {
        self.pixels.iter().map(|&p| if p { T::one() } else { T::zero() }).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample<T> {
    pub grid: TokenGrid<T>,
    pub mask: Mask,
    /// 1 anomalous, 0 normal.
    pub label: u8,
}

impl<T: Scalar> LabeledSample<T> {
    /// Label is derived from the mask so the two can never disagree.
    pub fn new(grid: TokenGrid<T>, mask: Mask) -> Result<Self> {
        if mask.h < grid.h || mask.w < grid.w || !mask.h.is_multiple_of(grid.h) || !mask.w.is_multiple_of(grid.w) {
            return Err(Error::Shape(format!(
                "mask {}x{} is not an integer multiple of grid {}x{}",
                mask.h, mask.w, grid.h, grid.w
            )));
        }
        let label = u8::from(mask.any());
        Ok(Self { grid, mask, label })
    }
}

/// Parameters of the planted-anomaly benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    /// Mask pixels per patch side.
    pub s: usize,
    pub anomaly_rate: f64,
    pub rect_min: usize,
    pub rect_max: usize,
    pub shift_magnitude: f64,
    pub noise_scale: f64,
    pub n_normal_clusters: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 50,
            h: 16,
            w: 16,
            d: 32,
            s: 4,
            anomaly_rate: 0.5,
            rect_min: 2,
            rect_max: 5,
            shift_magnitude: 1.0,
            noise_scale: 0.1,
            n_normal_clusters: 2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if [self.n_train, self.n_test, self.h, self.w, self.d, self.s, self.n_normal_clusters].contains(&0) {
            return bad("all counts and dimensions must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return bad("anomaly_rate must lie in [0, 1]");
        }
        if !(self.shift_magnitude > 0.0) {
            return bad("shift_magnitude must be > 0");
        }
        if !(self.noise_scale >= 0.0) {
            return bad("noise_scale must be >= 0");
        }
        if self.rect_min == 0 || self.rect_min > self.rect_max {
            return bad("need 1 <= rect_min <= rect_max");
        }
        if self.rect_max > self.h || self.rect_max > self.w {
            return Err(Error::InvalidArgument(format!(
                "rect_max {} exceeds the {}x{} grid",
                self.rect_max, self.h, self.w
            )));
        }
        Ok(())
    }

    /// Number of anomalous images in a split of `n` images.
    pub fn anomalous_count(&self, n: usize) -> usize {
        (self.anomaly_rate * n as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<LabeledSample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_anomalous(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Builds `(train, test)` splits.
///
/// Each image draws one normal prototype; every token is that prototype plus
/// isotropic noise. Anomalous images shift an axis-aligned rectangle of tokens
/// along a fixed unit anomaly direction, orthogonal to the prototypes when the
/// width allows it. Tokens are rounded to single precision so the token file
/// format stores them exactly.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<(Dataset<T>, Dataset<T>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.n_normal_clusters).map(|_| unit_gaussian(&mut rng, spec.d)).collect();
    let mut direction = unit_gaussian(&mut rng, spec.d);
    if spec.d > spec.n_normal_clusters {
        // Gram-Schmidt against the prototype span
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for p in &prototypes {
            let mut b = p.clone();
            for e in &basis {
                let c = crate::scalar::dot(&b, e);
                b.iter_mut().zip(e).for_each(|(x, y)| *x -= c * y);
            }
            let n = norm(&b);
            if n > 1e-9 {
                basis.push(b.into_iter().map(|x| x / n).collect());
            }
        }
        for e in &basis {
            let c = crate::scalar::dot(&direction, e);
            direction.iter_mut().zip(e).for_each(|(x, y)| *x -= c * y);
        }
        let n = norm(&direction);
        direction.iter_mut().for_each(|x| *x /= n);
    }
    let train = generate_split(spec, spec.n_train, &prototypes, &direction, &mut rng)?;
    let test = generate_split(spec, spec.n_test, &prototypes, &direction, &mut rng)?;
    Ok((train, test))
}

fn generate_split<T: Scalar>(
    spec: &SyntheticSpec,
    n: usize,
    prototypes: &[Vec<f64>],
    direction: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Dataset<T>> {
    let n_anomalous = spec.anomalous_count(n);
    let mut anomalous = vec![false; n];
    anomalous.iter_mut().take(n_anomalous).for_each(|a| *a = true);
    anomalous.shuffle(rng);

    let (h, w, d, s) = (spec.h, spec.w, spec.d, spec.s);
    let mut samples = Vec::with_capacity(n);
    for &is_anomalous in &anomalous {
        let proto = &prototypes[rng.random_range(0..prototypes.len())];
        let mut tokens = Matrix::<f64>::from_fn(h * w, d, |_, j| {
            let noise: f64 = StandardNormal.sample(rng);
            proto[j] + spec.noise_scale * noise
        });
        let mut mask = Mask::empty(h * s, w * s);
        if is_anomalous {
            let rh = rng.random_range(spec.rect_min..=spec.rect_max);
            let rw = rng.random_range(spec.rect_min..=spec.rect_max);
            let top = rng.random_range(0..=h - rh);
            let left = rng.random_range(0..=w - rw);
            for r in top..top + rh {
                for c in left..left + rw {
                    for (x, &u) in tokens.row_mut(r * w + c).iter_mut().zip(direction) {
                        *x += spec.shift_magnitude * u;
                    }
                }
            }
            for y in top * s..(top + rh) * s {
                for x in left * s..(left + rw) * s {
                    mask.pixels[y * w * s + x] = true;
                }
            }
        }
        let tokens = tokens.map(|x| x as f32 as f64).cast::<T>();
        samples.push(LabeledSample::new(TokenGrid::new(tokens, h, w, None)?, mask)?);
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec { n_train: 10, n_test: 50, h: 6, w: 5, d: 8, s: 2, ..Default::default() }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_synthetic::<f64>(&small()).unwrap();
        let b = generate_synthetic::<f64>(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic::<f64>(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn zero_rate_gives_only_normal_images() {
        let (train, test) = generate_synthetic::<f64>(&SyntheticSpec { anomaly_rate: 0.0, ..small() }).unwrap();
        for s in train.samples.iter().chain(&test.samples) {
            assert_eq!(s.label, 0);
            assert!(!s.mask.any());
        }
    }

    #[test]
    fn half_rate_plants_half_and_masks_agree() {
        let (_, test) = generate_synthetic::<f64>(&small()).unwrap();
        assert_eq!(test.len(), 50);
        assert_eq!(test.n_anomalous(), 25);
        for s in &test.samples {
            assert_eq!(s.label == 1, s.mask.any());
            assert_eq!((s.mask.h, s.mask.w), (12, 10));
            // rectangles cover whole patches
            assert_eq!(s.mask.positives() % 4, 0);
        }
    }

    #[test]
    fn oversized_rectangles_are_rejected() {
        assert!(generate_synthetic::<f64>(&SyntheticSpec { rect_max: 7, ..small() }).is_err());
        assert!(generate_synthetic::<f64>(&SyntheticSpec { rect_min: 3, rect_max: 2, ..small() }).is_err());
    }

    #[test]
    fn grid_validation() {
        let t = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(matches!(TokenGrid::new(t, 1, 2, None), Err(Error::ZeroNormRow { row: 1, .. })));
        let t = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0]]);
        assert!(TokenGrid::new(t.clone(), 1, 3, None).is_err());
        let g = TokenGrid::new(t, 2, 1, None).unwrap();
        assert_eq!(g.pooled_embedding(), vec![2.0, 1.0]);
    }
}
