//! Token-to-subspace assignment and anomaly scoring.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ot::TransportPlan;
use crate::scalar::{dot, norm, Scalar};

/// Sparse, row-normalized soft selection of subspaces per token.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix<T> {
    pub weights: Matrix<T>,
    pub k: usize,
    pub epsilon: T,
}

impl<T: Scalar> AssignmentMatrix<T> {
    pub fn n_tokens(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_subspaces(&self) -> usize {
        self.weights.cols()
    }

    /// Number of nonzero entries in row `i`.
    pub fn support_len(&self, i: usize) -> usize {
        self.weights.row(i).iter().filter(|&&x| x != T::zero()).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Patch,
    Pixel,
}

/// Per-location scores laid out on an `h × w` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap<T> {
    pub scores: Vec<T>,
    pub h: usize,
    pub w: usize,
    pub resolution: Resolution,
}

impl<T: Scalar> AnomalyMap<T> {
    pub fn new(scores: Vec<T>, h: usize, w: usize, resolution: Resolution) -> Result<Self> {
        if scores.len() != h * w {
            return Err(Error::Shape(format!("{} scores for a {h}x{w} map", scores.len())));
        }
        Ok(Self { scores, h, w, resolution })
    }

    pub fn max(&self) -> Option<T> {
        self.scores.iter().copied().reduce(T::max)
    }

    pub fn complement(&self) -> Self {
        Self { scores: self.scores.iter().map(|&s| T::one() - s).collect(), ..*self }
    }
}

/// Row-normalizes the plan, keeps each row's top-`k` entries that exceed
/// `epsilon`, and renormalizes the survivors. Ties keep the lowest index.
pub fn sparsify_topk<T: Scalar>(plan: &TransportPlan<T>, k: usize, epsilon: T) -> AssignmentMatrix<T> {
    sparsify_rows(&plan.plan, k, epsilon)
}

pub fn sparsify_rows<T: Scalar>(plan: &Matrix<T>, k: usize, epsilon: T) -> AssignmentMatrix<T> {
    let (n, q) = plan.shape();
    let mut weights = Matrix::zeros(n, q);
    let mut order: Vec<usize> = Vec::with_capacity(q);
    for i in 0..n {
        let row = plan.row(i);
        let total: T = row.iter().copied().sum();
        if !(total > T::zero()) {
            continue;
        }
        order.clear();
        order.extend(0..q);
        // stable sort keeps lower indices first among equal values
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        let out = weights.row_mut(i);
        let mut kept = T::zero();
        for &j in order.iter().take(k) {
            let x = row[j] / total;
            if x > epsilon {
                out[j] = x;
                kept = kept + x;
            }
        }
        if kept > T::zero() {
            for x in out.iter_mut() {
                *x = *x / kept;
            }
        }
    }
    AssignmentMatrix { weights, k, epsilon }
}

/// `z_c(i) = Σ_j A_c(i,j) · sim_c(i,j)` for both classes.
pub fn dynamic_logits<T: Scalar>(
    assign_n: &AssignmentMatrix<T>,
    assign_a: &AssignmentMatrix<T>,
    sim_n: &Matrix<T>,
    sim_a: &Matrix<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    Ok((weighted_logits(assign_n, sim_n)?, weighted_logits(assign_a, sim_a)?))
}

pub(crate) fn weighted_logits<T: Scalar>(assign: &AssignmentMatrix<T>, sim: &Matrix<T>) -> Result<Vec<T>> {
    if assign.weights.shape() != sim.shape() {
        return Err(Error::Shape(format!("assignment {:?} vs similarity {:?}", assign.weights.shape(), sim.shape())));
    }
    Ok((0..sim.rows()).map(|i| dot(assign.weights.row(i), sim.row(i))).collect())
}

/// Two-class temperature softmax `(P_n, P_a)` in overflow-free form.
#[inline]
pub fn two_class_softmax<T: Scalar>(z_n: T, z_a: T, tau: T) -> (T, T) {
    let d = (z_a - z_n) / tau;
    if d >= T::zero() {
        let e = (-d).exp();
        let p_a = T::one() / (T::one() + e);
        (e * p_a, p_a)
    } else {
        let e = d.exp();
        let p_n = T::one() / (T::one() + e);
        (p_n, e * p_n)
    }
}

/// Per-token `(S_n, S_a)` maps from class logits.
pub fn score_map_from_logits<T: Scalar>(
    z_n: &[T],
    z_a: &[T],
    tau: T,
    layout: (usize, usize),
) -> Result<(AnomalyMap<T>, AnomalyMap<T>)> {
    if !(tau > T::zero()) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    if z_n.len() != z_a.len() {
        return Err(Error::Shape("logit vectors differ in length".into()));
    }
    let (s_n, s_a): (Vec<T>, Vec<T>) = z_n.iter().zip(z_a).map(|(&n, &a)| two_class_softmax(n, a, tau)).unzip();
    Ok((
        AnomalyMap::new(s_n, layout.0, layout.1, Resolution::Patch)?,
        AnomalyMap::new(s_a, layout.0, layout.1, Resolution::Patch)?,
    ))
}

/// Indiscriminate alignment: every token scored against the same `(l_n, l_a)` pair.
pub fn base_score_map<T: Scalar>(
    tokens: &crate::data::TokenGrid<T>,
    l_n: &[T],
    l_a: &[T],
    tau: T,
) -> Result<(AnomalyMap<T>, AnomalyMap<T>)> {
    let (z_n, z_a) = base_logits(&tokens.tokens, l_n, l_a)?;
    score_map_from_logits(&z_n, &z_a, tau, (tokens.h, tokens.w))
}

pub(crate) fn base_logits<T: Scalar>(tokens: &Matrix<T>, l_n: &[T], l_a: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let text = Matrix::from_rows(&[l_n.to_vec(), l_a.to_vec()]);
    if norm(l_n) == T::zero() || norm(l_a) == T::zero() {
        return Err(Error::ZeroNormRow { what: "base embedding", row: usize::from(norm(l_n) != T::zero()) });
    }
    let sim = crate::ot::cosine_similarity(tokens, &text)?;
    Ok((sim.column(0).collect(), sim.column(1).collect()))
}

/// Argmax selection (lowest index on ties); the assignment used by the Van variant.
pub fn van_assignment<T: Scalar>(sim: &Matrix<T>) -> AssignmentMatrix<T> {
    let (n, q) = sim.shape();
    let mut weights = Matrix::zeros(n, q);
    for i in 0..n {
        let row = sim.row(i);
        let mut best = 0;
        for j in 1..q {
            if row[j] > row[best] {
                best = j;
            }
        }
        if q > 0 {
            weights[(i, best)] = T::one();
        }
    }
    AssignmentMatrix { weights, k: 1, epsilon: T::zero() }
}

/// Pixel-level fusion `½ (S_da + S_base)`.
pub fn fuse_pixel_scores<T: Scalar>(dynamic: &AnomalyMap<T>, base: &AnomalyMap<T>) -> Result<AnomalyMap<T>> {
    if (dynamic.h, dynamic.w) != (base.h, base.w) || dynamic.resolution != base.resolution {
        return Err(Error::Shape(format!("cannot fuse {}x{} with {}x{}", dynamic.h, dynamic.w, base.h, base.w)));
    }
    let half = T::lit(0.5);
    let scores = dynamic.scores.iter().zip(&base.scores).map(|(&a, &b)| half * (a + b)).collect();
    Ok(AnomalyMap { scores, ..*base })
}

/// Which image-level fusion formula to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ImageScoreFormula {
    /// `½ (P_a + ½ max A_S)`, capped at 0.75.
    #[default]
    Paper,
    /// `½ (P_a + max A_S)`.
    Balanced,
}

impl std::str::FromStr for ImageScoreFormula {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "balanced" => Ok(Self::Balanced),
            other => Err(Error::InvalidArgument(format!("unknown image score formula {other:?}"))),
        }
    }
}

impl std::fmt::Display for ImageScoreFormula {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Balanced => "balanced",
        })
    }
}

pub fn image_score<T: Scalar>(p_a_global: T, map: &AnomalyMap<T>, formula: ImageScoreFormula) -> Result<T> {
    let peak = map.max().ok_or(Error::Metric("image score of an empty map"))?;
    let half = T::lit(0.5);
    Ok(match formula {
        ImageScoreFormula::Paper => half * (p_a_global + half * peak),
        ImageScoreFormula::Balanced => half * (p_a_global + peak),
    })
}

/// Subspace selection statistics over one or more assignment matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceUsage<T> {
    /// Fraction of rows whose support contains subspace `j`.
    pub support_frequency: Vec<T>,
    /// Fraction of non-empty rows whose largest weight sits on subspace `j`.
    pub argmax_frequency: Vec<T>,
    /// Entropy of `argmax_frequency` divided by `ln Q` (0 when `Q = 1`).
    pub normalized_entropy: T,
}

impl<T: Scalar> SubspaceUsage<T> {
    pub fn most_used_frequency(&self) -> T {
        self.argmax_frequency.iter().copied().fold(T::zero(), T::max)
    }
}

/// Accumulates subspace usage across many images.
#[derive(Clone, Debug, Default)]
pub struct UsageCounter {
    support: Vec<usize>,
    argmax: Vec<usize>,
    rows: usize,
    nonempty_rows: usize,
}

impl UsageCounter {
    pub fn new(q: usize) -> Self {
        Self { support: vec![0; q], argmax: vec![0; q], rows: 0, nonempty_rows: 0 }
    }

    pub fn add<T: Scalar>(&mut self, a: &AssignmentMatrix<T>) {
        assert_eq!(a.n_subspaces(), self.support.len(), "subspace count changed");
        for i in 0..a.n_tokens() {
            let row = a.weights.row(i);
            self.rows += 1;
            let mut best: Option<usize> = None;
            for (j, &x) in row.iter().enumerate() {
                if x != T::zero() {
                    self.support[j] += 1;
                    if best.is_none_or(|b| x > row[b]) {
                        best = Some(j);
                    }
                }
            }
            if let Some(b) = best {
                self.argmax[b] += 1;
                self.nonempty_rows += 1;
            }
        }
    }

    pub fn finish<T: Scalar>(&self) -> SubspaceUsage<T> {
        let frac = |c: usize, total: usize| if total == 0 { T::zero() } else { T::count(c) / T::count(total) };
        let support_frequency = self.support.iter().map(|&c| frac(c, self.rows)).collect();
        let argmax_frequency: Vec<T> = self.argmax.iter().map(|&c| frac(c, self.nonempty_rows)).collect();
        let q = argmax_frequency.len();
        let normalized_entropy = if q <= 1 {
            T::zero()
        } else {
            let h: T = argmax_frequency.iter().filter(|&&p| p > T::zero()).map(|&p| -p * p.ln()).sum();
            h / T::count(q).ln()
        };
        SubspaceUsage { support_frequency, argmax_frequency, normalized_entropy }
    }
}

pub fn subspace_usage_histogram<T: Scalar>(a: &AssignmentMatrix<T>) -> SubspaceUsage<T> {
    let mut counter = UsageCounter::new(a.n_subspaces());
    counter.add(a);
    counter.finish()
}
