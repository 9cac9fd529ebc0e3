//! Training configuration and the line-based `key = value` config format.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::alignment::ImageScoreFormula;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::ot::ColumnUpdate;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Hinge weight.
    pub eta: f64,
    /// Orthogonality weight.
    pub xi: f64,
    pub gamma_focal: f64,
    pub dice_smooth: f64,
    pub delta_minus: f64,
    pub delta_plus: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub k: usize,
    pub epsilon: f64,
    pub q: usize,
    pub lambda: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub sinkhorn_update: ColumnUpdate,
    pub hinge_literal: bool,
    /// Argmax assignment instead of the transport plan.
    pub van: bool,
    /// When false only the indiscriminate (base) branch is trained and scored.
    pub dynamic_alignment: bool,
    pub image_score_formula: ImageScoreFormula,
    pub aupro_fpr_limit: f64,
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 5.0,
            xi: 100.0,
            gamma_focal: 2.0,
            dice_smooth: 1.0,
            delta_minus: 0.5,
            delta_plus: 0.5,
            tau: 0.07,
            lr: 1e-3,
            batch_size: 8,
            epochs: 30,
            k: 2,
            epsilon: 0.2,
            q: 3,
            lambda: 0.01,
            sinkhorn_iters: 100,
            sinkhorn_tol: 1e-9,
            sinkhorn_update: ColumnUpdate::Newton,
            hinge_literal: false,
            van: false,
            dynamic_alignment: true,
            image_score_formula: ImageScoreFormula::Paper,
            aupro_fpr_limit: 0.3,
            init_noise: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::InvalidArgument(msg.into())) };
        check(self.eta >= 0.0 && self.xi >= 0.0, "eta and xi must be >= 0")?;
        check(self.gamma_focal >= 0.0, "gamma_focal must be >= 0")?;
        check(self.dice_smooth > 0.0, "dice_smooth must be > 0")?;
        check(
            self.delta_minus > 0.0 && self.delta_minus < 1.0 && self.delta_plus > 0.0 && self.delta_plus < 1.0,
            "hinge margins must lie in (0, 1)",
        )?;
        check(self.tau > 0.0, "tau must be > 0")?;
        check(self.lr >= 0.0 && self.lr.is_finite(), "lr must be finite and >= 0")?;
        check(self.batch_size >= 1 && self.epochs >= 1, "batch_size and epochs must be >= 1")?;
        check(self.k >= 1, "k must be >= 1")?;
        check((0.0..1.0).contains(&self.epsilon), "epsilon must lie in [0, 1)")?;
        check(self.q >= 1, "q must be >= 1")?;
        check(self.lambda > 0.0, "lambda must be > 0")?;
        check(self.sinkhorn_iters >= 1 && self.sinkhorn_tol > 0.0, "sinkhorn_iters >= 1 and sinkhorn_tol > 0")?;
        check(self.aupro_fpr_limit > 0.0 && self.aupro_fpr_limit <= 1.0, "aupro_fpr_limit must lie in (0, 1]")?;
        check(self.init_noise >= 0.0, "init_noise must be >= 0")?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for entry in entries(text)? {
            let Entry { line, key, value } = entry;
            match key {
                "eta" => cfg.eta = parse(line, value)?,
                "xi" => cfg.xi = parse(line, value)?,
                "gamma_focal" => cfg.gamma_focal = parse(line, value)?,
                "dice_smooth" => cfg.dice_smooth = parse(line, value)?,
                "delta_minus" => cfg.delta_minus = parse(line, value)?,
                "delta_plus" => cfg.delta_plus = parse(line, value)?,
                "tau" => cfg.tau = parse(line, value)?,
                "lr" => cfg.lr = parse(line, value)?,
                "batch_size" => cfg.batch_size = parse(line, value)?,
                "epochs" => cfg.epochs = parse(line, value)?,
                "k" => cfg.k = parse(line, value)?,
                "epsilon" => cfg.epsilon = parse(line, value)?,
                "q" => cfg.q = parse(line, value)?,
                "lambda" => cfg.lambda = parse(line, value)?,
                "sinkhorn_iters" => cfg.sinkhorn_iters = parse(line, value)?,
                "sinkhorn_tol" => cfg.sinkhorn_tol = parse(line, value)?,
                "sinkhorn_update" => {
                    cfg.sinkhorn_update = match value {
                        "newton" => ColumnUpdate::Newton,
                        "scaling" => ColumnUpdate::Scaling,
                        other => return Err(config_err(line, format!("unknown sinkhorn_update {other:?}"))),
                    }
                }
                "hinge_literal" => cfg.hinge_literal = parse(line, value)?,
                "van" => cfg.van = parse(line, value)?,
                "dynamic_alignment" => cfg.dynamic_alignment = parse(line, value)?,
                "image_score_formula" => {
                    cfg.image_score_formula =
                        ImageScoreFormula::from_str(value).map_err(|e| config_err(line, e.to_string()))?
                }
                "aupro_fpr_limit" => cfg.aupro_fpr_limit = parse(line, value)?,
                "init_noise" => cfg.init_noise = parse(line, value)?,
                "seed" => cfg.seed = parse(line, value)?,
                other => return Err(config_err(line, format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field, one per line, in a form [`TrainConfig::parse`] reads back exactly.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let update = match self.sinkhorn_update {
            ColumnUpdate::Newton => "newton",
            ColumnUpdate::Scaling => "scaling",
        };
        let _ = write!(
            s,
            "eta = {}\nxi = {}\ngamma_focal = {}\ndice_smooth = {}\ndelta_minus = {}\ndelta_plus = {}\n\
             tau = {}\nlr = {}\nbatch_size = {}\nepochs = {}\nk = {}\nepsilon = {}\nq = {}\nlambda = {}\n\
             sinkhorn_iters = {}\nsinkhorn_tol = {}\nsinkhorn_update = {}\nhinge_literal = {}\nvan = {}\n\
             dynamic_alignment = {}\nimage_score_formula = {}\naupro_fpr_limit = {}\ninit_noise = {}\nseed = {}\n",
            self.eta,
            self.xi,
            self.gamma_focal,
            self.dice_smooth,
            self.delta_minus,
            self.delta_plus,
            self.tau,
            self.lr,
            self.batch_size,
            self.epochs,
            self.k,
            self.epsilon,
            self.q,
            self.lambda,
            self.sinkhorn_iters,
            self.sinkhorn_tol,
            update,
            self.hinge_literal,
            self.van,
            self.dynamic_alignment,
            self.image_score_formula,
            self.aupro_fpr_limit,
            self.init_noise,
            self.seed,
        );
        s
    }
}

pub fn parse_synthetic_spec(text: &str) -> Result<SyntheticSpec> {
    let mut spec = SyntheticSpec::default();
    for Entry { line, key, value } in entries(text)? {
        match key {
            "n_train" => spec.n_train = parse(line, value)?,
            "n_test" => spec.n_test = parse(line, value)?,
            "h" => spec.h = parse(line, value)?,
            "w" => spec.w = parse(line, value)?,
            "d" => spec.d = parse(line, value)?,
            "s" => spec.s = parse(line, value)?,
            "anomaly_rate" => spec.anomaly_rate = parse(line, value)?,
            "rect_min" => spec.rect_min = parse(line, value)?,
            "rect_max" => spec.rect_max = parse(line, value)?,
            "shift_magnitude" => spec.shift_magnitude = parse(line, value)?,
            "noise_scale" => spec.noise_scale = parse(line, value)?,
            "n_normal_clusters" => spec.n_normal_clusters = parse(line, value)?,
            "seed" => spec.seed = parse(line, value)?,
            other => return Err(config_err(line, format!("unknown key {other:?}"))),
        }
    }
    spec.validate()?;
    Ok(spec)
}

pub fn synthetic_spec_to_string(spec: &SyntheticSpec) -> String {
    format!(
        "n_train = {}\nn_test = {}\nh = {}\nw = {}\nd = {}\ns = {}\nanomaly_rate = {}\nrect_min = {}\n\
         rect_max = {}\nshift_magnitude = {}\nnoise_scale = {}\nn_normal_clusters = {}\nseed = {}\n",
        spec.n_train,
        spec.n_test,
        spec.h,
        spec.w,
        spec.d,
        spec.s,
        spec.anomaly_rate,
        spec.rect_min,
        spec.rect_max,
        spec.shift_magnitude,
        spec.noise_scale,
        spec.n_normal_clusters,
        spec.seed
    )
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

fn entries(text: &str) -> Result<Vec<Entry<'_>>> {
    let mut out: Vec<Entry<'_>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| config_err(line, format!("expected `key = value`, got {content:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(config_err(line, "empty key or value".into()));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(config_err(line, format!("duplicate key {key:?}")));
        }
        out.push(Entry { line, key, value });
    }
    Ok(out)
}

fn parse<V: FromStr>(line: usize, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e: V::Err| config_err(line, format!("cannot parse {value:?}: {e}")))
}

fn config_err(line: usize, reason: String) -> Error {
    Error::Config { line, reason }
}
