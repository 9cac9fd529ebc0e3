//! Mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::{backward, GradientSet};
use crate::loss::LossBreakdown;
use crate::model::{init_model_with_noise, SubspaceModel};
use crate::optim::{adam_step, AdamState};
use crate::scalar::Scalar;

/// Trained model plus one mean loss breakdown per epoch.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: SubspaceModel<T>,
    pub history: Vec<LossBreakdown<T>>,
}

/// Initializes from `cfg.seed` and trains.
pub fn train<T: Scalar>(dataset: &Dataset<T>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let d = dataset.samples.first().map(|s| s.grid.dim()).unwrap_or(0);
    let model = init_model_with_noise(d, cfg.q, cfg.seed, cfg.init_noise)?;
    train_from(model, dataset, cfg)
}

/// Trains an existing model. Batches are drawn from a shuffle seeded by
/// `cfg.seed`; per-sample gradients are computed in parallel and summed in
/// index order, so results do not depend on the thread count.
pub fn train_from<T: Scalar>(
    mut model: SubspaceModel<T>,
    dataset: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if dataset.n_anomalous() == 0 {
        return Err(Error::Dataset("training set has no anomalous samples".into()));
    }
    if dataset.n_anomalous() == dataset.len() {
        return Err(Error::Dataset("training set has no normal samples".into()));
    }
    model.validate()?;
    let lr = T::lit(cfg.lr);
    let mut adam = AdamState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch = vec![LossBreakdown::zero(); dataset.len()];
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(LossBreakdown<T>, GradientSet<T>)> =
                batch.par_iter().map(|&i| backward(&model, &dataset.samples[i], cfg)).collect::<Result<_>>()?;
            let mut sum = GradientSet::zeros_like(&model);
            let scale = T::one() / T::count(batch.len());
            for (&i, (b, g)) in batch.iter().zip(&results) {
                sum.add_scaled(g, scale);
                epoch[i] = *b;
            }
            adam_step(&mut model, &mut adam, &sum, lr);
        }
        history.push(LossBreakdown::mean(&epoch, cfg));
    }
    if !model.is_finite() {
        return Err(Error::NonFinite("model parameters after training".into()));
    }
    Ok(TrainOutcome { model, history })
}

/// Training history as CSV: `epoch,global,base,da,hinge,reg,total`.
pub fn history_csv<T: Scalar>(history: &[LossBreakdown<T>]) -> String {
    let mut out = String::from("epoch,global,base,da,hinge,reg,total\n");
    for (e, b) in history.iter().enumerate() {
        let t = b.terms();
        out.push_str(&format!("{},{},{},{},{},{},{}\n", e + 1, t[0], t[1], t[2], t[3], t[4], b.total));
    }
    out
}
