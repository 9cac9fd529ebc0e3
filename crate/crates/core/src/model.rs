//! Learnable textual parameters: base embeddings, projection heads, global fusion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ot::normalize_rows;
use crate::scalar::{norm, Scalar};

/// `x ↦ W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { weight: Matrix::zeros(out_dim, in_dim), bias: vec![T::zero(); out_dim] }
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let mut y = self.weight.matvec(x);
        y.iter_mut().zip(&self.bias).for_each(|(a, &b)| *a = *a + b);
        y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    Normal,
    Anomalous,
}

impl Class {
    pub fn name(self) -> &'static str {
        match self {
            Class::Normal => "normal",
            Class::Anomalous => "anomalous",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceModel<T> {
    pub l_n: Vec<T>,
    pub l_a: Vec<T>,
    pub g_n: Vec<T>,
    pub g_a: Vec<T>,
    pub heads_n: Vec<Affine<T>>,
    pub heads_a: Vec<Affine<T>>,
    /// `2d → d` map applied to `[g_c, l_c]`.
    pub fuse_n: Affine<T>,
    pub fuse_a: Affine<T>,
}

impl<T: Scalar> SubspaceModel<T> {
    pub fn d(&self) -> usize {
        self.l_n.len()
    }

    pub fn q(&self) -> usize {
        self.heads_n.len()
    }

    pub fn zeros(d: usize, q: usize) -> Self {
        Self {
            l_n: vec![T::zero(); d],
            l_a: vec![T::zero(); d],
            g_n: vec![T::zero(); d],
            g_a: vec![T::zero(); d],
            heads_n: vec![Affine::zeros(d, d); q],
            heads_a: vec![Affine::zeros(d, d); q],
            fuse_n: Affine::zeros(d, 2 * d),
            fuse_a: Affine::zeros(d, 2 * d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d(), self.q())
    }

    pub fn local(&self, class: Class) -> &[T] {
        match class {
            Class::Normal => &self.l_n,
            Class::Anomalous => &self.l_a,
        }
    }

    pub fn heads(&self, class: Class) -> &[Affine<T>] {
        match class {
            Class::Normal => &self.heads_n,
            Class::Anomalous => &self.heads_a,
        }
    }

    /// Named parameter groups in a fixed order.
    pub fn groups(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = vec![
            ("l_n".into(), &self.l_n),
            ("l_a".into(), &self.l_a),
            ("g_n".into(), &self.g_n),
            ("g_a".into(), &self.g_a),
        ];
        for (tag, heads) in [("heads_n", &self.heads_n), ("heads_a", &self.heads_a)] {
            for (j, h) in heads.iter().enumerate() {
                out.push((format!("{tag}[{j}].weight"), h.weight.as_slice()));
                out.push((format!("{tag}[{j}].bias"), &h.bias));
            }
        }
        for (tag, f) in [("fuse_n", &self.fuse_n), ("fuse_a", &self.fuse_a)] {
            out.push((format!("{tag}.weight"), f.weight.as_slice()));
            out.push((format!("{tag}.bias"), &f.bias));
        }
        out
    }

    /// Mutable counterpart of [`SubspaceModel::groups`], same order.
    pub fn groups_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![&mut self.l_n, &mut self.l_a, &mut self.g_n, &mut self.g_a];
        for heads in [&mut self.heads_n, &mut self.heads_a] {
            for h in heads.iter_mut() {
                out.push(h.weight.as_mut_slice());
                out.push(&mut h.bias);
            }
        }
        for f in [&mut self.fuse_n, &mut self.fuse_a] {
            out.push(f.weight.as_mut_slice());
            out.push(&mut f.bias);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|x| x.is_finite()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if d < 2 || self.q() == 0 || self.heads_a.len() != self.q() {
            return Err(Error::InvalidArgument(format!("need d >= 2 and Q >= 1, got d={d}, Q={}", self.q())));
        }
        let shapes_ok = [&self.l_a, &self.g_n, &self.g_a].iter().all(|v| v.len() == d)
            && self.heads_n.iter().chain(&self.heads_a).all(|h| h.weight.shape() == (d, d) && h.bias.len() == d)
            && [&self.fuse_n, &self.fuse_a].iter().all(|f| f.weight.shape() == (d, 2 * d) && f.bias.len() == d);
        if !shapes_ok {
            return Err(Error::Shape("model parameter shapes are inconsistent".into()));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }
}

/// Projected subspace embeddings, one `Q × d` matrix per class.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceBank<T> {
    pub o_n: Matrix<T>,
    pub o_a: Matrix<T>,
}

impl<T: Scalar> SubspaceBank<T> {
    pub fn class(&self, class: Class) -> &Matrix<T> {
        match class {
            Class::Normal => &self.o_n,
            Class::Anomalous => &self.o_a,
        }
    }
}

pub fn init_model<T: Scalar>(d: usize, q: usize, seed: u64) -> Result<SubspaceModel<T>> {
    init_model_with_noise(d, q, seed, 0.1)
}

/// Unit-normalized Gaussian base embeddings; heads `I + noise·N(0,1)`, fusion
/// `[I | 0] + noise·N(0,1)`, all offsets zero.
pub fn init_model_with_noise<T: Scalar>(d: usize, q: usize, seed: u64, noise: f64) -> Result<SubspaceModel<T>> {
    if d < 2 || q == 0 {
        return Err(Error::InvalidArgument(format!("need d >= 2 and Q >= 1, got d={d}, Q={q}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = move || -> f64 { StandardNormal.sample(&mut rng) };
    let scale = 1.0 / (d as f64).sqrt();
    let mut base = || -> Vec<T> {
        let v: Vec<f64> = (0..d).map(|_| scale * gauss()).collect();
        let n = norm(&v);
        v.into_iter().map(|x| T::lit(x / n)).collect()
    };
    let (l_n, l_a, g_n, g_a) = (base(), base(), base(), base());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut jitter = move || -> T {
        {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(noise * z)
        }
    };
    let mut head = || Affine {
        weight: Matrix::from_fn(d, d, |i, j| if i == j { T::one() } else { T::zero() } + jitter()),
        bias: vec![T::zero(); d],
    };
    let heads_n: Vec<_> = (0..q).map(|_| head()).collect();
    let heads_a: Vec<_> = (0..q).map(|_| head()).collect();
    let mut fuse = || Affine {
        weight: Matrix::from_fn(d, 2 * d, |i, j| if i == j { T::one() } else { T::zero() } + jitter()),
        bias: vec![T::zero(); d],
    };
    let fuse_n = fuse();
    let fuse_a = fuse();
    Ok(SubspaceModel { l_n, l_a, g_n, g_a, heads_n, heads_a, fuse_n, fuse_a })
}

/// `o_c^j = W_c^j l_c + b_c^j`.
pub fn project_subspaces<T: Scalar>(model: &SubspaceModel<T>) -> Result<SubspaceBank<T>> {
    let project = |class: Class| -> Result<Matrix<T>> {
        let l = model.local(class);
        let rows: Vec<Vec<T>> = model.heads(class).iter().map(|h| h.apply(l)).collect();
        if let Some(head) = rows.iter().position(|r| norm(r) == T::zero()) {
            return Err(Error::ZeroSubspace { class: class.name(), head });
        }
        Ok(Matrix::from_rows(&rows))
    };
    Ok(SubspaceBank { o_n: project(Class::Normal)?, o_a: project(Class::Anomalous)? })
}

/// `ḡ_c = Fuse_c([g_c, l_c])` for both classes.
pub fn fuse_global_prompt<T: Scalar>(model: &SubspaceModel<T>) -> (Vec<T>, Vec<T>) {
    let cat = |g: &[T], l: &[T]| [g, l].concat();
    (model.fuse_n.apply(&cat(&model.g_n, &model.l_n)), model.fuse_a.apply(&cat(&model.g_a, &model.l_a)))
}

/// `Σ_c ‖Õ_c Õ_cᵀ − I‖²_F` over row-normalized subspaces.
pub fn orthogonality_reg<T: Scalar>(bank: &SubspaceBank<T>) -> Result<T> {
    let mut total = T::zero();
    for o in [&bank.o_n, &bank.o_a] {
        let o_hat = normalize_rows(o, "subspace")?;
        total = total + gram_residual(&o_hat).0;
    }
    Ok(total)
}

/// `(‖G − I‖², G − I)` for `G = Õ Õᵀ`.
pub(crate) fn gram_residual<T: Scalar>(o_hat: &Matrix<T>) -> (T, Matrix<T>) {
    let q = o_hat.rows();
    let resid = Matrix::from_fn(q, q, |a, b| {
        let g = crate::scalar::dot(o_hat.row(a), o_hat.row(b));
        if a == b {
            g - T::one()
        } else {
            g
        }
    });
    (resid.as_slice().iter().map(|&x| x * x).sum(), resid)
}
