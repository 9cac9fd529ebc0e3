//! Entropic optimal transport between patch tokens and textual subspaces.
//!
//! Costs are cosine distances. The solver iterates the Sinkhorn scaling
//! updates on dual potentials in log space, so `exp(-C/λ)` is never formed
//! explicitly and small `λ` cannot underflow the kernel.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{dot, log_sum_exp, norm, Scalar};

/// Cosine-distance cost matrix, `N` tokens by `Q` subspaces.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix<T> {
    pub entries: Matrix<T>,
}

impl<T: Scalar> CostMatrix<T> {
    pub fn new(entries: Matrix<T>) -> Result<Self> {
        if !entries.is_finite() {
            return Err(Error::NonFinite("cost matrix".into()));
        }
        Ok(Self { entries })
    }

    pub fn n_tokens(&self) -> usize {
        self.entries.rows()
    }

    pub fn n_subspaces(&self) -> usize {
        self.entries.cols()
    }
}

/// Source (token) and target (subspace) weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Marginals<T> {
    pub fn uniform(n: usize, q: usize) -> Self {
        Self { u: vec![T::one() / T::count(n); n], v: vec![T::one() / T::count(q); q] }
    }

    pub fn new(u: Vec<T>, v: Vec<T>) -> Result<Self> {
        let tol = T::lit(1e-12).max(T::epsilon() * T::lit(16.0));
        for (name, w) in [("u", &u), ("v", &v)] {
            if w.is_empty() || w.iter().any(|&x| !(x > T::zero()) || !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("marginal {name} must be positive")));
            }
            let s: T = w.iter().copied().sum();
            if (s - T::one()).abs() > tol {
                return Err(Error::InvalidArgument(format!("marginal {name} sums to {s}, not 1")));
            }
        }
        Ok(Self { u, v })
    }
}

/// How the column scaling vector is updated in each iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ColumnUpdate {
    /// Closed-form Sinkhorn-Knopp scaling `v = ν / (Kᵀ u)`.
    Scaling,
    /// Closed-form scaling followed by a damped Newton step on the column
    /// potentials, with the row scaling re-solved exactly afterwards. The step
    /// is skipped when no step length makes progress. Same fixed point as
    /// [`ColumnUpdate::Scaling`], quadratic local convergence.
    #[default]
    Newton,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig<T> {
    /// Entropic coefficient.
    pub lambda: T,
    pub max_iters: usize,
    /// Stop once both max-norm marginal residuals fall below this.
    pub tol: T,
    pub column_update: ColumnUpdate,
}

impl<T: Scalar> Default for SinkhornConfig<T> {
    fn default() -> Self {
        Self { lambda: T::lit(0.01), max_iters: 100, tol: T::lit(1e-9), column_update: ColumnUpdate::default() }
    }
}

impl<T: Scalar> SinkhornConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > T::zero()) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        if !(self.tol > T::zero()) {
            return Err(Error::InvalidArgument(format!("tol must be > 0, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan<T> {
    pub plan: Matrix<T>,
    pub iters_used: usize,
    pub row_residual: T,
    pub col_residual: T,
}

/// `C_ij = 1 - cos(token_i, subspace_j)`.
pub fn build_cost_matrix<T: Scalar>(tokens: &Matrix<T>, subspaces: &Matrix<T>) -> Result<CostMatrix<T>> {
    let sim = cosine_similarity(tokens, subspaces)?;
    CostMatrix::new(sim.map(|s| T::one() - s))
}

/// Pairwise cosine similarity between the rows of `a` and the rows of `b`.
pub fn cosine_similarity<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows() == 0 || b.rows() == 0 || a.cols() == 0 {
        return Err(Error::Shape("empty token or subspace set".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("embedding widths {} and {} differ", a.cols(), b.cols())));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite("embeddings".into()));
    }
    let a_hat = normalize_rows(a, "token")?;
    let b_hat = normalize_rows(b, "subspace")?;
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| crate::scalar::dot(a_hat.row(i), b_hat.row(j))))
}

pub(crate) fn normalize_rows<T: Scalar>(m: &Matrix<T>, what: &'static str) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n == T::zero() {
            return Err(Error::ZeroNormRow { what, row: i });
        }
        for x in out.row_mut(i) {
            *x = *x / n;
        }
    }
    Ok(out)
}

/// Solves `min <T,C> + λ Σ T log T` over plans with the given marginals.
pub fn sinkhorn<T: Scalar>(
    cost: &CostMatrix<T>,
    marginals: &Marginals<T>,
    cfg: &SinkhornConfig<T>,
) -> Result<TransportPlan<T>> {
    cfg.validate()?;
    let (n, q) = cost.entries.shape();
    if marginals.u.len() != n || marginals.v.len() != q {
        return Err(Error::Shape(format!(
            "marginals ({}, {}) do not match cost {n}x{q}",
            marginals.u.len(),
            marginals.v.len()
        )));
    }
    if !cost.entries.is_finite() {
        return Err(Error::NonFinite("cost matrix".into()));
    }

    let log_kernel = cost.entries.map(|c| -c / cfg.lambda);
    let log_u: Vec<T> = marginals.u.iter().map(|x| x.ln()).collect();
    let log_v: Vec<T> = marginals.v.iter().map(|x| x.ln()).collect();
    let mut f = vec![T::zero(); n];
    // v^0 = 1
    let mut g = vec![T::zero(); q];

    let mut iters_used = 0;
    let mut row_residual = T::infinity();
    let mut col_residual = T::infinity();
    let mut plan = Matrix::zeros(n, q);
    for _ in 0..cfg.max_iters {
        iters_used += 1;
        row_potentials(&log_kernel, &log_u, &g, &mut f);
        column_potentials(&log_kernel, &log_v, &f, &mut g);
        if cfg.column_update == ColumnUpdate::Newton {
            newton_column_step(&log_kernel, marginals, &mut g);
            // rows stay exact after the Newton move
            row_potentials(&log_kernel, &log_u, &g, &mut f);
        }
        fill_plan(&log_kernel, &f, &g, &mut plan);
        (row_residual, col_residual) = residuals(&plan, marginals);
        if row_residual < cfg.tol && col_residual < cfg.tol {
            break;
        }
    }
    if !plan.is_finite() {
        return Err(Error::NonFinite("transport plan".into()));
    }
    Ok(TransportPlan { plan, iters_used, row_residual, col_residual })
}

fn row_potentials<T: Scalar>(log_kernel: &Matrix<T>, log_u: &[T], g: &[T], f: &mut [T]) {
    for (i, fi) in f.iter_mut().enumerate() {
        let row = log_kernel.row(i);
        *fi = log_u[i] - log_sum_exp(row.iter().zip(g).map(|(&k, &gj)| k + gj));
    }
}

fn column_potentials<T: Scalar>(log_kernel: &Matrix<T>, log_v: &[T], f: &[T], g: &mut [T]) {
    for (j, gj) in g.iter_mut().enumerate() {
        *gj = log_v[j] - log_sum_exp(log_kernel.column(j).zip(f).map(|(k, &fi)| k + fi));
    }
}

fn fill_plan<T: Scalar>(log_kernel: &Matrix<T>, f: &[T], g: &[T], plan: &mut Matrix<T>) {
    for (i, &fi) in f.iter().enumerate() {
        for (j, &gj) in g.iter().enumerate() {
            plan[(i, j)] = (fi + gj + log_kernel[(i, j)]).exp();
        }
    }
}

/// Row-conditional weights `π_ij = softmax_j(g_j + K_ij)` and the semi-dual value
/// `Σ_j v_j g_j − Σ_i u_i LSE_j(g_j + K_ij)`, which is concave in `g`.
fn semi_dual<T: Scalar>(log_kernel: &Matrix<T>, m: &Marginals<T>, g: &[T], pi: &mut Matrix<T>) -> T {
    let mut value: T = m.v.iter().zip(g).map(|(&v, &gj)| v * gj).sum();
    for i in 0..log_kernel.rows() {
        let row = log_kernel.row(i);
        let lse = log_sum_exp(row.iter().zip(g).map(|(&k, &gj)| k + gj));
        value = value - m.u[i] * lse;
        for (j, p) in pi.row_mut(i).iter_mut().enumerate() {
            *p = (row[j] + g[j] - lse).exp();
        }
    }
    value
}

fn column_gradient<T: Scalar>(m: &Marginals<T>, pi: &Matrix<T>) -> Vec<T> {
    let mut grad = m.v.clone();
    for i in 0..pi.rows() {
        for (gj, &p) in grad.iter_mut().zip(pi.row(i)) {
            *gj = *gj - m.u[i] * p;
        }
    }
    grad
}

/// One ascent step on the concave semi-dual along the Newton direction, or
/// along the gradient where the curvature has underflowed. A full step is
/// taken when it is acceptable; otherwise the step length comes from a
/// bracketing bisection on the directional derivative. Returns false if no
/// uphill move was found, leaving `g` untouched.
fn newton_column_step<T: Scalar>(log_kernel: &Matrix<T>, m: &Marginals<T>, g: &mut [T]) -> bool {
    let (n, q) = log_kernel.shape();
    if q < 2 {
        // the semi-dual is constant along the only direction
        return true;
    }
    let mut pi = Matrix::zeros(n, q);
    let value = semi_dual(log_kernel, m, g, &mut pi);
    let grad = column_gradient(m, &pi);
    let resid = max_abs(&grad);
    if resid == T::zero() {
        return true;
    }
    let mut step = newton_direction(&pi, m, &grad).unwrap_or_else(|| grad.clone());
    // no useful move exceeds the spread of the log-kernel
    let (lo, hi) =
        log_kernel.as_slice().iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &k| (lo.min(k), hi.max(k)));
    let cap = hi - lo + T::lit(50.0);
    let longest = max_abs(&step);
    if longest > cap {
        step.iter_mut().for_each(|x| *x = *x * cap / longest);
    }
    let slope = dot(&grad, &step);
    if !(slope > T::zero()) {
        return false;
    }
    let mut trial = vec![T::zero(); q];
    let base = g.to_vec();
    let at = |t: T, trial: &mut Vec<T>, pi: &mut Matrix<T>| -> (T, Vec<T>) {
        for j in 0..q {
            trial[j] = base[j] + t * step[j];
        }
        let v = semi_dual(log_kernel, m, trial, pi);
        (v, column_gradient(m, pi))
    };

    let noise = T::lit(64.0) * T::epsilon() * (value.abs() + dual_magnitude(log_kernel, m, g));
    let (full_value, full_grad) = at(T::one(), &mut trial, &mut pi);
    // Armijo plus the curvature condition, so a full step in a locally linear
    // stretch is extended by the search below instead of accepted
    let armijo = full_value >= value + T::lit(1e-4) * slope && dot(&full_grad, &step) <= T::lit(0.9) * slope;
    // below rounding level the value stops being informative; then the residual decides
    let closer = full_value >= value - noise && max_abs(&full_grad) < resid;
    if full_value.is_finite() && (armijo || closer) {
        g.copy_from_slice(&trial);
        return true;
    }

    // φ'(t) = ∇F(g + t·step)·step decreases in t
    let mut deriv = |t: T| {
        let (v, gr) = at(t, &mut trial, &mut pi);
        if v.is_finite() {
            dot(&gr, &step)
        } else {
            T::neg_infinity()
        }
    };
    let (mut lo, mut hi) = (T::zero(), T::one());
    let limit = T::lit(2f64.powi(60));
    while hi < limit && deriv(hi) > T::zero() {
        lo = hi;
        hi = hi * T::lit(2.0);
    }
    for _ in 0..200 {
        let mid = T::lit(0.5) * (lo + hi);
        if !(mid > lo && mid < hi) {
            break;
        }
        if deriv(mid) > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo == T::zero() {
        return false;
    }
    for j in 0..q {
        g[j] = g[j] + lo * step[j];
    }
    true
}

fn max_abs<T: Scalar>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |a, &v| a.max(v.abs()))
}

/// Solves the damped Newton system for the semi-dual, or `None` if the
/// curvature has vanished.
fn newton_direction<T: Scalar>(pi: &Matrix<T>, m: &Marginals<T>, grad: &[T]) -> Option<Vec<T>> {
    let q = pi.cols();
    // negative Hessian: Σ_i u_i (diag π_i − π_i π_iᵀ)
    let mut hess = Matrix::zeros(q, q);
    for i in 0..pi.rows() {
        let p = pi.row(i);
        for a in 0..q {
            hess[(a, a)] = hess[(a, a)] + m.u[i] * p[a];
            for b in 0..q {
                hess[(a, b)] = hess[(a, b)] - m.u[i] * p[a] * p[b];
            }
        }
    }
    let scale = (0..q).fold(T::zero(), |a, j| a.max(hess[(j, j)]));
    if !(scale > T::min_positive_value().sqrt()) {
        return None;
    }
    // the all-ones direction is a null direction; the gradient is orthogonal to it
    for a in 0..q {
        for b in 0..q {
            hess[(a, b)] = hess[(a, b)] + scale / T::count(q);
        }
    }
    // escalate the ridge until the factorization survives rounding
    let mut ridge = scale * T::lit(1e-12);
    while ridge <= scale * T::lit(1e-4) {
        let mut damped = hess.clone();
        for a in 0..q {
            damped[(a, a)] = damped[(a, a)] + ridge;
        }
        if let Some(step) = solve_spd(&damped, grad) {
            return Some(step);
        }
        ridge = ridge * T::lit(100.0);
    }
    None
}

/// Scale of the terms summed in the semi-dual, for rounding estimates.
fn dual_magnitude<T: Scalar>(log_kernel: &Matrix<T>, m: &Marginals<T>, g: &[T]) -> T {
    let lin: T = m.v.iter().zip(g).map(|(&v, &gj)| (v * gj).abs()).sum();
    let rows: T = (0..log_kernel.rows())
        .map(|i| m.u[i] * log_kernel.row(i).iter().zip(g).fold(T::zero(), |a, (&k, &gj)| a.max((k + gj).abs())))
        .sum();
    lin + rows
}

/// Cholesky solve of a small symmetric positive-definite system.
fn solve_spd<T: Scalar>(a: &Matrix<T>, b: &[T]) -> Option<Vec<T>> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(s > T::zero()) {
                    return None;
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let s = (0..i).fold(b[i], |s, k| s - l[(i, k)] * y[k]);
        y[i] = s / l[(i, i)];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let s = (i + 1..n).fold(y[i], |s, k| s - l[(k, i)] * x[k]);
        x[i] = s / l[(i, i)];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// `<T, C> + λ Σ T_ij log T_ij` with `0 log 0 = 0`.
pub fn entropic_objective<T: Scalar>(plan: &Matrix<T>, cost: &CostMatrix<T>, lambda: T) -> Result<T> {
    if plan.shape() != cost.entries.shape() {
        return Err(Error::Shape(format!("plan {:?} vs cost {:?}", plan.shape(), cost.entries.shape())));
    }
    let mut transport = T::zero();
    let mut neg_entropy = T::zero();
    for (&t, &c) in plan.as_slice().iter().zip(cost.entries.as_slice()) {
        transport = transport + t * c;
        if t > T::zero() {
            neg_entropy = neg_entropy + t * t.ln();
        }
    }
    if lambda == T::zero() {
        return Ok(transport);
    }
    Ok(transport + lambda * neg_entropy)
}

/// Plain transport cost `<T, C>`.
pub fn transport_cost<T: Scalar>(plan: &Matrix<T>, cost: &CostMatrix<T>) -> T {
    plan.as_slice().iter().zip(cost.entries.as_slice()).fold(T::zero(), |acc, (&t, &c)| acc + t * c)
}

/// Max-norm deviation of row sums from `u` and column sums from `v`.
pub fn marginal_residuals<T: Scalar>(plan: &TransportPlan<T>, marginals: &Marginals<T>) -> (T, T) {
    residuals(&plan.plan, marginals)
}

fn residuals<T: Scalar>(plan: &Matrix<T>, m: &Marginals<T>) -> (T, T) {
    let max_dev =
        |sums: Vec<T>, target: &[T]| sums.iter().zip(target).fold(T::zero(), |acc, (&s, &t)| acc.max((s - t).abs()));
    (max_dev(plan.row_sums(), &m.u), max_dev(plan.col_sums(), &m.v))
}

/// Max-abs double-centred residual of `log T_ij + C_ij/λ`.
///
/// A Sinkhorn fixed point has the form `f_i + g_j`, which double centring maps to zero.
pub fn fixed_point_residual<T: Scalar>(plan: &Matrix<T>, cost: &CostMatrix<T>, lambda: T) -> T {
    let (n, q) = plan.shape();
    let m = Matrix::from_fn(n, q, |i, j| plan[(i, j)].ln() + cost.entries[(i, j)] / lambda);
    let row_mean: Vec<T> = m.row_sums().into_iter().map(|s| s / T::count(q)).collect();
    let col_mean: Vec<T> = m.col_sums().into_iter().map(|s| s / T::count(n)).collect();
    let grand = m.sum() / T::count(n * q);
    let mut worst = T::zero();
    for i in 0..n {
        for j in 0..q {
            let r = m[(i, j)] - row_mean[i] - col_mean[j] + grand;
            worst = worst.max(r.abs());
        }
    }
    worst
}

/// Brute-force unregularized OT on problems of at most 3x3.
///
/// Enumerates a grid over the `(N-1)(Q-1)` free coordinates of the transportation
/// polytope; coordinate `(i, j)` ranges over `[0, min(u_i, v_j)]` in `grid_steps`
/// equal steps and the last row and column are completed from the marginals.
pub fn exact_ot_oracle<T: Scalar>(
    cost: &CostMatrix<T>,
    marginals: &Marginals<T>,
    grid_steps: usize,
) -> Result<(Matrix<T>, T)> {
    let (n, q) = cost.entries.shape();
    if n > 3 || q > 3 {
        return Err(Error::UnsupportedSize { n, q });
    }
    if marginals.u.len() != n || marginals.v.len() != q {
        return Err(Error::Shape("marginals do not match cost".into()));
    }
    if grid_steps == 0 {
        return Err(Error::InvalidArgument("grid_steps must be >= 1".into()));
    }
    let free: Vec<(usize, usize)> = (0..n - 1).flat_map(|i| (0..q - 1).map(move |j| (i, j))).collect();
    let mut best: Option<(Matrix<T>, T)> = None;
    let mut plan = Matrix::zeros(n, q);
    let mut idx = vec![0usize; free.len()];
    let slack = T::lit(-1e-12);
    loop {
        for (&(i, j), &k) in free.iter().zip(&idx) {
            let hi = marginals.u[i].min(marginals.v[j]);
            plan[(i, j)] = hi * T::count(k) / T::count(grid_steps);
        }
        for i in 0..n - 1 {
            let used: T = (0..q - 1).map(|j| plan[(i, j)]).sum();
            plan[(i, q - 1)] = marginals.u[i] - used;
        }
        for j in 0..q {
            let used: T = (0..n - 1).map(|i| plan[(i, j)]).sum();
            plan[(n - 1, j)] = marginals.v[j] - used;
        }
        if plan.as_slice().iter().all(|&x| x >= slack) {
            let c = transport_cost(&plan, cost);
            if best.as_ref().is_none_or(|(_, b)| c < *b) {
                best = Some((plan.map(|x| x.max(T::zero())), c));
            }
        }
        // odometer over the free coordinates
        let mut pos = 0;
        loop {
            if pos == idx.len() {
                return best.ok_or_else(|| Error::InvalidArgument("no feasible grid plan".into()));
            }
            idx[pos] += 1;
            if idx[pos] <= grid_steps {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cost(rows: &[Vec<f64>]) -> CostMatrix<f64> {
        CostMatrix::new(Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn cosine_cost_extremes() {
        let o: Matrix<f64> = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let v = Matrix::from_rows(&[vec![2.0, 4.0], vec![-2.0, 1.0], vec![-1.0, -2.0]]);
        let c = build_cost_matrix(&v, &o).unwrap();
        assert!(c.entries[(0, 0)].abs() < 1e-15);
        assert!((c.entries[(1, 0)] - 1.0).abs() < 1e-15);
        assert!((c.entries[(2, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_row_is_reported_by_index() {
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let o = Matrix::from_rows(&[vec![1.0, 0.0]]);
        match build_cost_matrix(&v, &o) {
            Err(Error::ZeroNormRow { what: "token", row: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_cost_gives_independent_coupling() {
        let c = cost(&[vec![0.0; 3], vec![0.0; 3]]);
        let p = sinkhorn(&c, &Marginals::uniform(2, 3), &SinkhornConfig::default()).unwrap();
        for &x in p.plan.as_slice() {
            assert!((x - 1.0 / 6.0).abs() < 1e-12);
        }
        assert_eq!(marginal_residuals(&p, &Marginals::uniform(2, 3)), (p.row_residual, p.col_residual));
    }

    #[test]
    fn two_by_two_matches_one_dimensional_grid_search() {
        // The 2x2 polytope with uniform marginals is [[1/2 - t, t], [t, 1/2 - t]].
        let c = cost(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let lambda = 0.01;
        let objective = |t: f64| {
            let p = Matrix::from_rows(&[vec![0.5 - t, t], vec![t, 0.5 - t]]);
            entropic_objective(&p, &c, lambda).unwrap()
        };
        // grid on a log scale since the optimum sits extremely close to t = 0
        let mut best_t = 0.0;
        let mut best = objective(0.0);
        for k in 0..=4000 {
            let t = 0.5 * (10f64).powf(-60.0 + 60.0 * k as f64 / 4000.0);
            let v = objective(t);
            if v < best {
                best = v;
                best_t = t;
            }
        }
        assert!(best_t < 1e-6);
        let cfg = SinkhornConfig { lambda, ..Default::default() };
        let p = sinkhorn(&c, &Marginals::uniform(2, 2), &cfg).unwrap();
        assert!((p.plan[(0, 0)] - (0.5 - best_t)).abs() < 1e-6);
        assert!((p.plan[(1, 1)] - (0.5 - best_t)).abs() < 1e-6);
        assert!(p.plan[(0, 1)] < 1e-6 && p.plan[(1, 0)] < 1e-6);
    }

    #[test]
    fn random_small_instance_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cost(&(0..4).map(|_| (0..3).map(|_| rng.random_range(0.0..2.0)).collect()).collect::<Vec<_>>());
        let m = Marginals::uniform(4, 3);
        let p = sinkhorn(&c, &m, &SinkhornConfig::default()).unwrap();
        let (r, cres) = marginal_residuals(&p, &m);
        assert!(r < 1e-6 && cres < 1e-6, "{r} {cres}");
    }

    #[test]
    fn tiny_lambda_does_not_produce_nan() {
        let c = cost(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        let cfg = SinkhornConfig { lambda: 1e-4, ..Default::default() };
        let p = sinkhorn(&c, &Marginals::uniform(2, 2), &cfg).unwrap();
        assert!(p.plan.is_finite());
        assert!((p.plan.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_config_and_nonfinite_cost() {
        let c = cost(&[vec![0.0, 1.0]]);
        let m = Marginals::uniform(1, 2);
        assert!(sinkhorn(&c, &m, &SinkhornConfig { lambda: 0.0, ..Default::default() }).is_err());
        assert!(sinkhorn(&c, &m, &SinkhornConfig { max_iters: 0, ..Default::default() }).is_err());
        assert!(CostMatrix::new(Matrix::from_rows(&[vec![f64::NAN]])).is_err());
    }

    #[test]
    fn objective_conventions() {
        let c = cost(&[vec![0.0; 3], vec![0.0; 3]]);
        let uniform = Matrix::filled(2, 3, 1.0 / 6.0);
        let v = entropic_objective(&uniform, &c, 0.01).unwrap();
        assert!((v - 0.01 * (1.0f64 / 6.0).ln()).abs() < 1e-15);
        assert!((v + 0.017918).abs() < 1e-6);

        let c2 = cost(&[vec![0.5, 1.0], vec![1.5, 2.0]]);
        let sparse = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]);
        let with_zero = entropic_objective(&sparse, &c2, 0.1).unwrap();
        assert!((with_zero - (1.25 + 0.1 * (0.5f64.ln()))).abs() < 1e-15);
        assert_eq!(entropic_objective(&sparse, &c2, 0.0).unwrap(), 1.25);
        assert!(entropic_objective(&Matrix::zeros(1, 1), &c2, 0.1).is_err());
    }

    #[test]
    fn residuals_by_direct_arithmetic() {
        let m = Marginals::uniform(2, 2);
        let mut plan: TransportPlan<f64> =
            TransportPlan { plan: Matrix::filled(2, 2, 0.25), iters_used: 0, row_residual: 0.0, col_residual: 0.0 };
        assert_eq!(marginal_residuals(&plan, &m), (0.0, 0.0));
        plan.plan[(0, 1)] += 1e-3;
        let (r, c) = marginal_residuals(&plan, &m);
        assert!((r - 1e-3).abs() < 1e-15 && (c - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn oracle_known_cases() {
        let c = cost(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let (plan, value) = exact_ot_oracle(&c, &Marginals::uniform(2, 2), 10).unwrap();
        assert_eq!(value, 0.0);
        assert_eq!(plan.as_slice(), &[0.5, 0.0, 0.0, 0.5]);

        let ones = cost(&[vec![1.0; 3], vec![1.0; 3], vec![1.0; 3]]);
        let (_, value) = exact_ot_oracle(&ones, &Marginals::uniform(3, 3), 6).unwrap();
        assert!((value - 1.0).abs() < 1e-12);

        let big = cost(&[vec![0.0; 4], vec![0.0; 4]]);
        assert!(matches!(
            exact_ot_oracle(&big, &Marginals::uniform(2, 4), 4),
            Err(Error::UnsupportedSize { n: 2, q: 4 })
        ));
    }

    #[test]
    fn oracle_bounds_sinkhorn_on_random_two_by_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let c = cost(&(0..2).map(|_| (0..3).map(|_| rng.random_range(0.0..2.0)).collect()).collect::<Vec<_>>());
            let m = Marginals::uniform(2, 3);
            let (_, exact) = exact_ot_oracle(&c, &m, 24).unwrap();
            let cfg = SinkhornConfig { lambda: 1e-3, max_iters: 1000, tol: 1e-12, ..Default::default() };
            let p = sinkhorn(&c, &m, &cfg).unwrap();
            let entropic = transport_cost(&p.plan, &c);
            assert!(exact <= entropic + 1e-12);
            assert!(
                entropic - exact < 1e-2,
                "{entropic} {exact} {} {} {}",
                p.iters_used,
                p.row_residual,
                p.col_residual
            );
        }
    }
}
