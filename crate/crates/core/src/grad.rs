//! Analytic gradients of the training objective.
//!
//! The transport plan and the sparse assignment are constants of the forward
//! pass: gradients flow through cosine similarities (with the normalization
//! chain rule), the temperature softmaxes, every loss term, the projection
//! heads, and the fusion maps, but never through the Sinkhorn iterations.

use crate::alignment::{sparsify_topk, two_class_softmax, van_assignment, weighted_logits, AssignmentMatrix};
use crate::config::TrainConfig;
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::loss::{binary_ce_from_logits, hinge_grad, local_loss_grad, total_loss, LossBreakdown, Upsampler};
use crate::matrix::Matrix;
use crate::model::{fuse_global_prompt, gram_residual, project_subspaces, Class, SubspaceModel};
use crate::ot::{normalize_rows, sinkhorn, CostMatrix, Marginals, SinkhornConfig};
use crate::scalar::{dot, norm, Scalar};

/// One gradient per model parameter, stored in the model's own layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub params: SubspaceModel<T>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(model: &SubspaceModel<T>) -> Self {
        Self { params: model.zeros_like() }
    }

    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.params.groups_mut().into_iter().zip(other.params.groups()) {
            a.iter_mut().zip(b.1).for_each(|(x, &y)| *x = *x + scale * y);
        }
    }

    pub fn max_abs(&self) -> T {
        self.params.groups().iter().flat_map(|(_, g)| g.iter()).fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    fn check_finite(&self) -> Result<()> {
        for (name, g) in self.params.groups() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        Ok(())
    }
}

/// Which objective a gradient is taken of.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Global,
    Base,
    Dynamic,
    Hinge,
    Reg,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] =
        [LossTerm::Global, LossTerm::Base, LossTerm::Dynamic, LossTerm::Hinge, LossTerm::Reg, LossTerm::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Global => "global",
            LossTerm::Base => "base",
            LossTerm::Dynamic => "dynamic",
            LossTerm::Hinge => "hinge",
            LossTerm::Reg => "reg",
            LossTerm::Total => "total",
        }
    }

    /// Weights on `(global, base, da, hinge, reg)`.
    fn weights<T: Scalar>(self, cfg: &TrainConfig) -> [T; 5] {
        let (o, z) = (T::one(), T::zero());
        match self {
            LossTerm::Global => [o, z, z, z, z],
            LossTerm::Base => [z, o, z, z, z],
            LossTerm::Dynamic => [z, z, o, z, z],
            LossTerm::Hinge => [z, z, z, o, z],
            LossTerm::Reg => [z, z, z, z, o],
            LossTerm::Total => [o, o, o, T::lit(cfg.eta), T::lit(cfg.xi)],
        }
    }

    pub fn value<T: Scalar>(self, b: &LossBreakdown<T>) -> T {
        match self {
            LossTerm::Global => b.l_global,
            LossTerm::Base => b.l_base,
            LossTerm::Dynamic => b.l_da,
            LossTerm::Hinge => b.l_hinge,
            LossTerm::Reg => b.l_reg,
            LossTerm::Total => b.total,
        }
    }
}

/// Per-class sparse assignments of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignments<T> {
    pub normal: AssignmentMatrix<T>,
    pub anomalous: AssignmentMatrix<T>,
}

impl<T: Scalar> Assignments<T> {
    pub fn class(&self, class: Class) -> &AssignmentMatrix<T> {
        match class {
            Class::Normal => &self.normal,
            Class::Anomalous => &self.anomalous,
        }
    }
}

pub(crate) fn sinkhorn_config<T: Scalar>(cfg: &TrainConfig) -> SinkhornConfig<T> {
    SinkhornConfig {
        lambda: T::lit(cfg.lambda),
        max_iters: cfg.sinkhorn_iters,
        tol: T::lit(cfg.sinkhorn_tol),
        column_update: cfg.sinkhorn_update,
    }
}

/// Assignment for one class from its token-subspace cosine similarities.
pub fn assign_from_similarity<T: Scalar>(sim: &Matrix<T>, cfg: &TrainConfig) -> Result<AssignmentMatrix<T>> {
    if cfg.van {
        return Ok(van_assignment(sim));
    }
    let cost = CostMatrix::new(sim.map(|s| T::one() - s))?;
    let plan = sinkhorn(&cost, &Marginals::uniform(sim.rows(), sim.cols()), &sinkhorn_config(cfg))?;
    Ok(sparsify_topk(&plan, cfg.k, T::lit(cfg.epsilon)))
}

/// Forward result for one sample.
#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub breakdown: LossBreakdown<T>,
    pub grads: Option<GradientSet<T>>,
    pub assignments: Option<Assignments<T>>,
}

/// `(g − (g·x̂) x̂) / ‖x‖`: pulls a gradient w.r.t. `x̂ = x/‖x‖` back to `x`.
fn through_normalization<T: Scalar>(g_hat: &[T], x_hat: &[T], x_norm: T) -> Vec<T> {
    let radial = dot(g_hat, x_hat);
    g_hat.iter().zip(x_hat).map(|(&g, &x)| (g - radial * x) / x_norm).collect()
}

fn unit<T: Scalar>(x: &[T], what: &'static str) -> Result<(Vec<T>, T)> {
    let n = norm(x);
    if n == T::zero() {
        return Err(Error::ZeroNormRow { what, row: 0 });
    }
    Ok((x.iter().map(|&v| v / n).collect(), n))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

/// Computes every loss term for one sample and, when `grad_of` is set, the
/// gradient of that objective. `fixed` supplies assignments to hold constant;
/// otherwise they are solved from the current model.
pub fn evaluate<T: Scalar>(
    model: &SubspaceModel<T>,
    sample: &LabeledSample<T>,
    cfg: &TrainConfig,
    fixed: Option<&Assignments<T>>,
    grad_of: Option<LossTerm>,
) -> Result<Evaluation<T>> {
    let tau = T::lit(cfg.tau);
    let gamma = T::lit(cfg.gamma_focal);
    let smooth = T::lit(cfg.dice_smooth);
    let grid = &sample.grid;
    if grid.dim() != model.d() {
        return Err(Error::Shape(format!("token width {} vs model width {}", grid.dim(), model.d())));
    }
    let tokens = normalize_rows(&grid.tokens, "token")?;
    let mask: Vec<T> = sample.mask.as_scalars();
    let up = Upsampler::new(grid.h, grid.w, sample.mask.h, sample.mask.w)?;
    let weights: [T; 5] = grad_of.map_or([T::zero(); 5], |t| t.weights(cfg));
    let [w_global, w_base, w_da, w_hinge, w_reg] = weights;
    let mut grads = grad_of.map(|_| GradientSet::zeros_like(model));
    let n = grid.n_tokens();

    // indiscriminate alignment
    let (ln_hat, ln_norm) = unit(&model.l_n, "l_n")?;
    let (la_hat, la_norm) = unit(&model.l_a, "l_a")?;
    let (mut s_n, mut s_a) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (p_n, p_a) = two_class_softmax(dot(tokens.row(i), &ln_hat), dot(tokens.row(i), &la_hat), tau);
        s_n.push(p_n);
        s_a.push(p_a);
    }
    let (l_base, g_sn, g_sa) = local_loss_grad(&up, &s_n, &s_a, &mask, gamma, smooth)?;
    if let Some(g) = grads.as_mut() {
        let dz_a: Vec<T> = (0..n).map(|i| w_base * s_a[i] * s_n[i] * (g_sa[i] - g_sn[i]) / tau).collect();
        let g_hat_a = tokens.t_matvec(&dz_a);
        let g_hat_n: Vec<T> = g_hat_a.iter().map(|&x| -x).collect();
        add_into(&mut g.params.l_a, &through_normalization(&g_hat_a, &la_hat, la_norm));
        add_into(&mut g.params.l_n, &through_normalization(&g_hat_n, &ln_hat, ln_norm));
    }

    // dynamic alignment
    let (mut l_da, mut l_hinge, mut l_reg) = (T::zero(), T::zero(), T::zero());
    let mut assignments = None;
    if cfg.dynamic_alignment {
        let bank = project_subspaces(model)?;
        let o_norms = |o: &Matrix<T>| (0..o.rows()).map(|j| norm(o.row(j))).collect::<Vec<T>>();
        let (on_norm, oa_norm) = (o_norms(&bank.o_n), o_norms(&bank.o_a));
        let on_hat = normalize_rows(&bank.o_n, "subspace")?;
        let oa_hat = normalize_rows(&bank.o_a, "subspace")?;
        let sim = |o_hat: &Matrix<T>| Matrix::from_fn(n, o_hat.rows(), |i, j| dot(tokens.row(i), o_hat.row(j)));
        let (sim_n, sim_a) = (sim(&on_hat), sim(&oa_hat));
        let assign = match fixed {
            Some(a) => a.clone(),
            None => Assignments {
                normal: assign_from_similarity(&sim_n, cfg)?,
                anomalous: assign_from_similarity(&sim_a, cfg)?,
            },
        };
        let z_n = weighted_logits(&assign.normal, &sim_n)?;
        let z_a = weighted_logits(&assign.anomalous, &sim_a)?;
        let (sd_n, sd_a): (Vec<T>, Vec<T>) =
            z_n.iter().zip(&z_a).map(|(&zn, &za)| two_class_softmax(zn, za, tau)).unzip();
        let (da, gd_n, gd_a) = local_loss_grad(&up, &sd_n, &sd_a, &mask, gamma, smooth)?;
        l_da = da;
        let (px_n, px_a) = (up.apply(&sd_n), up.apply(&sd_a));
        let (hinge, gh_n, gh_a) =
            hinge_grad(&px_n, &px_a, &mask, T::lit(cfg.delta_minus), T::lit(cfg.delta_plus), cfg.hinge_literal)?;
        l_hinge = hinge;
        let (reg_n, resid_n) = gram_residual(&on_hat);
        let (reg_a, resid_a) = gram_residual(&oa_hat);
        l_reg = reg_n + reg_a;

        if let Some(g) = grads.as_mut() {
            let gh_n = up.apply_transpose(&gh_n);
            let gh_a = up.apply_transpose(&gh_a);
            let dz_a: Vec<T> = (0..n)
                .map(|i| {
                    let d_sa = w_da * gd_a[i] + w_hinge * gh_a[i];
                    let d_sn = w_da * gd_n[i] + w_hinge * gh_n[i];
                    sd_a[i] * sd_n[i] * (d_sa - d_sn) / tau
                })
                .collect();
            let dz_n: Vec<T> = dz_a.iter().map(|&x| -x).collect();
            let per_class = [
                (Class::Normal, &dz_n, &on_hat, &on_norm, &resid_n),
                (Class::Anomalous, &dz_a, &oa_hat, &oa_norm, &resid_a),
            ];
            for (class, dz, o_hat, o_norm, resid) in per_class {
                let a = &assign.class(class).weights;
                let q = o_hat.rows();
                let mut g_hat = Matrix::zeros(q, model.d());
                for i in 0..n {
                    let v = tokens.row(i);
                    for j in 0..q {
                        let coef = a[(i, j)] * dz[i];
                        if coef != T::zero() {
                            for (gh, &vk) in g_hat.row_mut(j).iter_mut().zip(v) {
                                *gh = *gh + coef * vk;
                            }
                        }
                    }
                }
                // d‖G − I‖² / dÕ = 4 (G − I) Õ
                let four = T::lit(4.0) * w_reg;
                for j in 0..q {
                    for b in 0..q {
                        let c = four * resid[(j, b)];
                        if c != T::zero() {
                            for (gh, &ob) in g_hat.row_mut(j).iter_mut().zip(o_hat.row(b)) {
                                *gh = *gh + c * ob;
                            }
                        }
                    }
                }
                let l = model.local(class).to_vec();
                let (heads, l_grad) = match class {
                    Class::Normal => (&mut g.params.heads_n, &mut g.params.l_n),
                    Class::Anomalous => (&mut g.params.heads_a, &mut g.params.l_a),
                };
                for j in 0..q {
                    let g_o = through_normalization(g_hat.row(j), o_hat.row(j), o_norm[j]);
                    heads[j].weight.add_outer(T::one(), &g_o, &l);
                    add_into(&mut heads[j].bias, &g_o);
                    add_into(l_grad, &model.heads(class)[j].weight.t_matvec(&g_o));
                }
            }
        }
        assignments = Some(assign);
    }

    // global branch
    let (gbar_n, gbar_a) = fuse_global_prompt(model);
    let (f_hat, _) = unit(&grid.pooled_embedding(), "pooled embedding")?;
    let (gn_hat, gn_norm) = unit(&gbar_n, "fused normal prompt")?;
    let (ga_hat, ga_norm) = unit(&gbar_a, "fused anomalous prompt")?;
    let (l_global, p_a) = binary_ce_from_logits(dot(&gn_hat, &f_hat), dot(&ga_hat, &f_hat), sample.label, tau);
    if let Some(g) = grads.as_mut() {
        let y = if sample.label == 1 { T::one() } else { T::zero() };
        let ds_a = w_global * (p_a - y) / tau;
        let d = model.d();
        let branches = [
            (-ds_a, &gn_hat, gn_norm, &model.g_n, &model.l_n, &model.fuse_n, Class::Normal),
            (ds_a, &ga_hat, ga_norm, &model.g_a, &model.l_a, &model.fuse_a, Class::Anomalous),
        ];
        for (ds, g_hat_dir, g_norm, g_c, l_c, fuse, class) in branches {
            let g_hat: Vec<T> = f_hat.iter().map(|&x| ds * x).collect();
            let g_bar = through_normalization(&g_hat, g_hat_dir, g_norm);
            let input = [g_c.as_slice(), l_c.as_slice()].concat();
            let back = fuse.weight.t_matvec(&g_bar);
            let (fuse_grad, gg, lg) = match class {
                Class::Normal => (&mut g.params.fuse_n, &mut g.params.g_n, &mut g.params.l_n),
                Class::Anomalous => (&mut g.params.fuse_a, &mut g.params.g_a, &mut g.params.l_a),
            };
            fuse_grad.weight.add_outer(T::one(), &g_bar, &input);
            add_into(&mut fuse_grad.bias, &g_bar);
            add_into(gg, &back[..d]);
            add_into(lg, &back[d..]);
        }
    }

    if let Some(g) = &grads {
        g.check_finite()?;
    }
    Ok(Evaluation { breakdown: total_loss(l_global, l_base, l_da, l_hinge, l_reg, cfg), grads, assignments })
}

/// Loss breakdown and gradient of the total loss.
pub fn backward<T: Scalar>(
    model: &SubspaceModel<T>,
    sample: &LabeledSample<T>,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown<T>, GradientSet<T>)> {
    let ev = evaluate(model, sample, cfg, None, Some(LossTerm::Total))?;
    Ok((ev.breakdown, ev.grads.expect("gradient requested")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport<T> {
    pub term: LossTerm,
    /// `max |analytic − numeric| / max(|numeric|, 1e-8)` over all parameters.
    pub max_rel_err: T,
    pub worst_group: String,
    pub worst_analytic: T,
    pub worst_numeric: T,
}

/// Central-difference check of [`evaluate`]'s gradient for `term`, with the
/// assignments held at their values for the unperturbed model.
pub fn finite_diff_check<T: Scalar>(
    model: &SubspaceModel<T>,
    sample: &LabeledSample<T>,
    cfg: &TrainConfig,
    h: T,
    term: LossTerm,
) -> Result<FiniteDiffReport<T>> {
    Ok(finite_diff_terms(model, sample, cfg, h, &[term])?.remove(0))
}

/// [`finite_diff_check`] for several terms, sharing the perturbed evaluations.
pub fn finite_diff_terms<T: Scalar>(
    model: &SubspaceModel<T>,
    sample: &LabeledSample<T>,
    cfg: &TrainConfig,
    h: T,
    terms: &[LossTerm],
) -> Result<Vec<FiniteDiffReport<T>>> {
    if !(h > T::zero()) {
        return Err(Error::InvalidArgument("finite-difference step must be > 0".into()));
    }
    let base = evaluate(model, sample, cfg, None, None)?;
    let fixed = base.assignments.as_ref();
    let analytic: Vec<GradientSet<T>> = terms
        .iter()
        .map(|&t| Ok(evaluate(model, sample, cfg, fixed, Some(t))?.grads.expect("gradient requested")))
        .collect::<Result<_>>()?;
    let names: Vec<String> = model.groups().into_iter().map(|(n, _)| n).collect();
    let mut reports: Vec<FiniteDiffReport<T>> = terms
        .iter()
        .map(|&term| FiniteDiffReport {
            term,
            max_rel_err: T::zero(),
            worst_group: String::new(),
            worst_analytic: T::zero(),
            worst_numeric: T::zero(),
        })
        .collect();
    let floor = T::lit(1e-8);
    let mut work = model.clone();
    for (gi, name) in names.iter().enumerate() {
        let len = model.groups()[gi].1.len();
        for e in 0..len {
            let orig = work.groups_mut()[gi][e];
            work.groups_mut()[gi][e] = orig + h;
            let plus = evaluate(&work, sample, cfg, fixed, None)?.breakdown;
            work.groups_mut()[gi][e] = orig - h;
            let minus = evaluate(&work, sample, cfg, fixed, None)?.breakdown;
            work.groups_mut()[gi][e] = orig;
            for ((report, &term), grad) in reports.iter_mut().zip(terms).zip(&analytic) {
                let numeric = (term.value(&plus) - term.value(&minus)) / (T::lit(2.0) * h);
                let a = grad.params.groups()[gi].1[e];
                let rel = (a - numeric).abs() / numeric.abs().max(floor);
                if rel > report.max_rel_err || !rel.is_finite() {
                    report.max_rel_err = rel;
                    report.worst_group = format!("{name}[{e}]");
                    report.worst_analytic = a;
                    report.worst_numeric = numeric;
                }
            }
        }
    }
    Ok(reports)
}
