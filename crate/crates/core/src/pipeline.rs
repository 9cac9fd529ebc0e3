//! Inference, evaluation, solver self-checks and the file-level commands.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::alignment::{
    base_score_map, fuse_pixel_scores, image_score, score_map_from_logits, weighted_logits, AnomalyMap, Resolution,
    SubspaceUsage, UsageCounter,
};
use crate::config::{parse_synthetic_spec, TrainConfig};
use crate::data::{generate_synthetic, Dataset, Mask, TokenGrid};
use crate::error::Result;
use crate::grad::{assign_from_similarity, sinkhorn_config, Assignments};
use crate::io;
use crate::loss::{bilinear_upsample, binary_ce_from_logits};
use crate::matrix::Matrix;
use crate::metrics::{aupro, auroc, average_precision, pixel_auroc, ScoredSet};
use crate::model::{fuse_global_prompt, project_subspaces, SubspaceModel};
use crate::ot::{
    exact_ot_oracle, fixed_point_residual, marginal_residuals, sinkhorn, transport_cost, CostMatrix, Marginals,
    SinkhornConfig,
};
use crate::scalar::Scalar;
use crate::train::{history_csv, train};

/// Every score the model produces for one image.
#[derive(Clone, Debug)]
pub struct SampleScores<T> {
    /// Patch-level `S_a` from the base embeddings.
    pub base: AnomalyMap<T>,
    /// Patch-level `S_a` from dynamic alignment, when enabled.
    pub dynamic: Option<AnomalyMap<T>>,
    /// Fused anomaly map at mask resolution.
    pub pixel: AnomalyMap<T>,
    /// Global-branch anomaly probability.
    pub p_global: T,
    pub image: T,
    pub assignments: Option<Assignments<T>>,
}

/// Scores one grid, producing a pixel map of size `out_hw`.
pub fn score_sample<T: Scalar>(
    model: &SubspaceModel<T>,
    grid: &TokenGrid<T>,
    out_hw: (usize, usize),
    cfg: &TrainConfig,
) -> Result<SampleScores<T>> {
    let tau = T::lit(cfg.tau);
    let (h, w) = (grid.h, grid.w);
    let up = |m: &AnomalyMap<T>| -> Result<AnomalyMap<T>> {
        let px = bilinear_upsample(&m.scores, h, w, out_hw.0, out_hw.1)?;
        AnomalyMap::new(px, out_hw.0, out_hw.1, Resolution::Pixel)
    };
    let (_, base) = base_score_map(grid, &model.l_n, &model.l_a, tau)?;
    let base_px = up(&base)?;
    let (dynamic, pixel, assignments) = if cfg.dynamic_alignment {
        let bank = project_subspaces(model)?;
        let sim_n = crate::ot::cosine_similarity(&grid.tokens, &bank.o_n)?;
        let sim_a = crate::ot::cosine_similarity(&grid.tokens, &bank.o_a)?;
        let assign = Assignments {
            normal: assign_from_similarity(&sim_n, cfg)?,
            anomalous: assign_from_similarity(&sim_a, cfg)?,
        };
        let z_n = weighted_logits(&assign.normal, &sim_n)?;
        let z_a = weighted_logits(&assign.anomalous, &sim_a)?;
        let (_, dyn_a) = score_map_from_logits(&z_n, &z_a, tau, (h, w))?;
        let fused = fuse_pixel_scores(&up(&dyn_a)?, &base_px)?;
        (Some(dyn_a), fused, Some(assign))
    } else {
        (None, base_px, None)
    };
    let (g_n, g_a) = fuse_global_prompt(model);
    let f = grid.pooled_embedding();
    let item = Matrix::from_rows(&[f]);
    let prompts = Matrix::from_rows(&[g_n, g_a]);
    let s = crate::ot::cosine_similarity(&item, &prompts)?;
    let (_, p_global) = binary_ce_from_logits(s[(0, 0)], s[(0, 1)], 0, tau);
    let image = image_score(p_global, &pixel, cfg.image_score_formula)?;
    Ok(SampleScores { base, dynamic, pixel, p_global, image, assignments })
}

/// Held-out metrics plus pooled subspace usage.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport<T> {
    pub image_auroc: T,
    pub image_ap: T,
    pub pixel_auroc: T,
    pub pixel_aupro: T,
    /// Usage over both classes and every test image; `None` without dynamic alignment.
    pub usage: Option<SubspaceUsage<T>>,
}

impl<T: Scalar> EvalReport<T> {
    pub fn metrics_csv(&self) -> String {
        format!(
            "metric,value\nimage_auroc,{}\nimage_ap,{}\npixel_auroc,{}\npixel_aupro,{}\n",
            self.image_auroc, self.image_ap, self.pixel_auroc, self.pixel_aupro
        )
    }

    pub fn usage_csv(&self) -> String {
        let mut out = String::from("subspace,support_frequency,argmax_frequency,normalized_entropy\n");
        if let Some(u) = &self.usage {
            for (j, (s, a)) in u.support_frequency.iter().zip(&u.argmax_frequency).enumerate() {
                out.push_str(&format!("{j},{s},{a},{}\n", u.normalized_entropy));
            }
        }
        out
    }
}

pub fn score_dataset<T: Scalar>(
    model: &SubspaceModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<Vec<SampleScores<T>>> {
    data.samples.par_iter().map(|s| score_sample(model, &s.grid, (s.mask.h, s.mask.w), cfg)).collect()
}

pub fn evaluate_dataset<T: Scalar>(
    model: &SubspaceModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<EvalReport<T>> {
    let scores = score_dataset(model, data, cfg)?;
    report_from_scores(&scores, data, cfg)
}

pub fn report_from_scores<T: Scalar>(
    scores: &[SampleScores<T>],
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<EvalReport<T>> {
    let images =
        ScoredSet::new(scores.iter().map(|s| s.image).collect(), data.samples.iter().map(|s| s.label == 1).collect())?;
    let maps: Vec<AnomalyMap<T>> = scores.iter().map(|s| s.pixel.clone()).collect();
    let masks: Vec<Mask> = data.samples.iter().map(|s| s.mask.clone()).collect();
    let usage = if cfg.dynamic_alignment {
        let mut counter = UsageCounter::new(cfg.q);
        for a in scores.iter().filter_map(|s| s.assignments.as_ref()) {
            counter.add(&a.normal);
            counter.add(&a.anomalous);
        }
        Some(counter.finish())
    } else {
        None
    };
    Ok(EvalReport {
        image_auroc: auroc(&images)?,
        image_ap: average_precision(&images)?,
        pixel_auroc: pixel_auroc(&maps, &masks)?,
        pixel_aupro: aupro(&maps, &masks, T::lit(cfg.aupro_fpr_limit))?,
        usage,
    })
}

/// Outcome of one solver property.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_cost(rng: &mut ChaCha8Rng, n: usize, q: usize) -> CostMatrix<f64> {
    CostMatrix::new(Matrix::from_fn(n, q, |_, _| rng.random_range(0.0..2.0))).expect("finite cost")
}

/// Marginal and fixed-point residuals, exact-OT agreement, shift invariance
/// and permutation equivariance on seeded random instances.
pub fn sinkhorn_check(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg: SinkhornConfig<f64> = SinkhornConfig { lambda: 0.01, max_iters: 100, ..Default::default() };

    let (mut worst_marg, mut worst_fp) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (n, q) = (rng.random_range(1..=64), rng.random_range(1..=8));
        let cost = random_cost(&mut rng, n, q);
        let m = Marginals::uniform(n, q);
        let plan = sinkhorn(&cost, &m, &cfg)?;
        let (r, c) = marginal_residuals(&plan, &m);
        worst_marg = worst_marg.max(r).max(c);
        worst_fp = worst_fp.max(fixed_point_residual(&plan.plan, &cost, cfg.lambda));
    }

    let oracle_cfg = SinkhornConfig { lambda: 1e-3, ..cfg };
    let mut worst_gap = 0.0f64;
    for _ in 0..50 {
        let cost = random_cost(&mut rng, 3, 3);
        let m = Marginals::uniform(3, 3);
        let plan = sinkhorn(&cost, &m, &oracle_cfg)?;
        let (_, best) = exact_ot_oracle(&cost, &m, 12)?;
        worst_gap = worst_gap.max((transport_cost(&plan.plan, &cost) - best).abs());
    }

    let (mut worst_shift, mut worst_perm) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (n, q) = (rng.random_range(2..=16), rng.random_range(2..=6));
        let cost = random_cost(&mut rng, n, q);
        let m = Marginals::uniform(n, q);
        let plan = sinkhorn(&cost, &m, &cfg)?;
        let c = rng.random_range(-3.0..3.0);
        let shifted = CostMatrix::new(cost.entries.map(|x| x + c))?;
        worst_shift = worst_shift.max(sinkhorn(&shifted, &m, &cfg)?.plan.max_abs_diff(&plan.plan));
        let mut rows: Vec<usize> = (0..n).collect();
        let mut cols: Vec<usize> = (0..q).collect();
        rand::seq::SliceRandom::shuffle(rows.as_mut_slice(), &mut rng);
        rand::seq::SliceRandom::shuffle(cols.as_mut_slice(), &mut rng);
        let permuted = CostMatrix::new(cost.entries.permute_rows(&rows).permute_cols(&cols))?;
        let p2 = sinkhorn(&permuted, &m, &cfg)?;
        worst_perm = worst_perm.max(p2.plan.max_abs_diff(&plan.plan.permute_rows(&rows).permute_cols(&cols)));
    }

    let check = |name, value: f64, bound: f64| CheckResult {
        name,
        passed: value < bound,
        detail: format!("worst {value:.3e} (bound {bound:.0e})"),
    };
    Ok(vec![
        check("marginal residuals", worst_marg, 1e-6),
        check("fixed-point residual", worst_fp, 1e-5),
        check("exact-OT cost gap", worst_gap, 1e-2),
        check("shift invariance", worst_shift, 1e-9),
        check("permutation equivariance", worst_perm, 1e-9),
    ])
}

/// One ablation cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow<T> {
    pub param: &'static str,
    pub value: f64,
    pub report: EvalReport<T>,
}

pub const ABLATION_Q: [usize; 5] = [1, 2, 3, 4, 5];
pub const ABLATION_K: [usize; 3] = [1, 2, 3];
pub const ABLATION_EPSILON: [f64; 4] = [0.1, 0.2, 0.3, 0.4];

/// Trains and evaluates once per grid value, varying one setting at a time.
pub fn ablate<T: Scalar>(
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow<T>>> {
    let mut cells: Vec<(&'static str, f64, TrainConfig)> = Vec::new();
    cells.extend(ABLATION_Q.iter().map(|&q| ("q", q as f64, TrainConfig { q, ..cfg.clone() })));
    cells.extend(ABLATION_K.iter().map(|&k| ("k", k as f64, TrainConfig { k, ..cfg.clone() })));
    cells.extend(ABLATION_EPSILON.iter().map(|&epsilon| ("epsilon", epsilon, TrainConfig { epsilon, ..cfg.clone() })));
    cells
        .into_iter()
        .map(|(param, value, c)| {
            let model = train(train_set, &c)?.model;
            Ok(AblationRow { param, value, report: evaluate_dataset(&model, test_set, &c)? })
        })
        .collect()
}

pub fn ablation_csv<T: Scalar>(rows: &[AblationRow<T>]) -> String {
    let mut out = String::from("param,value,image_auroc,image_ap,pixel_auroc,pixel_aupro\n");
    for r in rows {
        let m = &r.report;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.param, r.value, m.image_auroc, m.image_ap, m.pixel_auroc, m.pixel_aupro
        ));
    }
    out
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "loss_history.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const USAGE_FILE: &str = "usage.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Generates a dataset from a spec file into `out`.
pub fn gen_command(spec_path: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec = parse_synthetic_spec(&io::load_text(spec_path)?)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (train_set, test_set) = generate_synthetic::<f64>(&spec)?;
    io::save_dataset(out, &spec, &train_set, &test_set)
}

/// Trains on `dataset/train`; writes the checkpoint and loss history into `out`.
pub fn train_command(dataset: &Path, cfg: &TrainConfig, out: &Path) -> Result<PathBuf> {
    let train_set = io::load_split::<f64>(dataset.join("train"))?;
    let outcome = train(&train_set, cfg)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    io::save_checkpoint(&ckpt, &outcome.model, cfg)?;
    io::save_text(out.join(HISTORY_FILE), &history_csv(&outcome.history))?;
    Ok(ckpt)
}

/// Evaluation-time overrides of the stored training config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOverrides {
    pub van: bool,
    pub image_score_formula: Option<crate::alignment::ImageScoreFormula>,
}

impl EvalOverrides {
    fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        cfg.van |= self.van;
        if let Some(f) = self.image_score_formula {
            cfg.image_score_formula = f;
        }
        cfg
    }
}

/// Evaluates a checkpoint on `dataset/test`; writes metric and usage CSVs.
pub fn eval_command(
    dataset: &Path,
    checkpoint: &Path,
    overrides: &EvalOverrides,
    out: &Path,
) -> Result<EvalReport<f64>> {
    let (model, cfg) = io::load_checkpoint::<f64>(checkpoint)?;
    let cfg = overrides.apply(cfg);
    let test_set = io::load_split::<f64>(dataset.join("test"))?;
    let report = evaluate_dataset(&model, &test_set, &cfg)?;
    io::save_text(out.join(METRICS_FILE), &report.metrics_csv())?;
    io::save_text(out.join(USAGE_FILE), &report.usage_csv())?;
    Ok(report)
}

/// Writes one fused anomaly-map PGM per test image into `out`.
pub fn score_command(dataset: &Path, checkpoint: &Path, overrides: &EvalOverrides, out: &Path) -> Result<usize> {
    let (model, cfg) = io::load_checkpoint::<f64>(checkpoint)?;
    let cfg = overrides.apply(cfg);
    let test_set = io::load_split::<f64>(dataset.join("test"))?;
    let scores = score_dataset(&model, &test_set, &cfg)?;
    for (i, s) in scores.iter().enumerate() {
        io::save_score_map(out.join(format!("sample_{i:04}_score.pgm")), &s.pixel)?;
    }
    let mut csv = String::from("sample,label,image_score\n");
    for (i, (s, sample)) in scores.iter().zip(&test_set.samples).enumerate() {
        csv.push_str(&format!("{i},{},{}\n", sample.label, s.image));
    }
    io::save_text(out.join("image_scores.csv"), &csv)?;
    Ok(scores.len())
}

pub fn ablate_command(dataset: &Path, cfg: &TrainConfig, out: &Path) -> Result<Vec<AblationRow<f64>>> {
    let train_set = io::load_split::<f64>(dataset.join("train"))?;
    let test_set = io::load_split::<f64>(dataset.join("test"))?;
    let rows = ablate(&train_set, &test_set, cfg)?;
    io::save_text(out.join(ABLATION_FILE), &ablation_csv(&rows))?;
    Ok(rows)
}

/// Sinkhorn configuration a training config implies.
pub fn solver_config(cfg: &TrainConfig) -> SinkhornConfig<f64> {
    sinkhorn_config(cfg)
}
