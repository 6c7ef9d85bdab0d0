use super::{
    hard_loss_with, layer_dims, Dataset, EpochSampler, Gradients, Model, NnError, Result,
    TrainConfig,
};
use crate::exec::Exec;

/// `p <- p - eta * g` for every parameter.
pub fn sgd_step(model: &Model, grads: &Gradients, eta: f64) -> Result<Model> {
    if !grads.matches(model) {
        return Err(NnError::Shape(
            "gradient layout does not match the model".into(),
        ));
    }
    if !eta.is_finite() {
        return Err(NnError::InvalidArgument(format!(
            "learning rate {eta} is not finite"
        )));
    }
    let mut next = model.clone();
    next.apply_update(grads, eta);
    Ok(next)
}

/// Top-`k` accuracy. A sample counts when fewer than `k` classes outrank its
/// label, where class `c` outranks `y` if `z_c > z_y`, or `z_c == z_y` and `c < y`.
pub fn evaluate(model: &Model, data: &Dataset, k: usize) -> Result<f64> {
    evaluate_with(Exec::default(), model, data, k)
}

pub fn evaluate_with(exec: Exec, model: &Model, data: &Dataset, k: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(NnError::InvalidArgument(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    if k == 0 || k > model.classes() {
        return Err(NnError::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            model.classes()
        )));
    }
    model.check_input(data.samples())?;
    let hits = exec.map_indexed(data.len(), |i| {
        let z = model.logits(data.samples().row(i));
        let y = data.labels()[i];
        let ahead = z
            .iter()
            .enumerate()
            .filter(|&(c, &zc)| zc > z[y] || (zc == z[y] && c < y))
            .count();
        usize::from(ahead < k)
    });
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Plain minibatch SGD on hard labels for `epochs` passes over `data`.
pub fn train_hard(
    mut model: Model,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Model> {
    let mut sampler = EpochSampler::new(data.len(), cfg.batch_size, cfg.seed, None)?;
    let steps = epochs as u64 * sampler.batches_per_epoch() as u64;
    for id in 0..steps {
        let batch = sampler.batch(data, id)?;
        let (_, grads) = hard_loss_with(Exec::default(), &model, &batch)?;
        model.apply_update(&grads, cfg.eta);
    }
    Ok(model)
}

/// Trains a teacher of shape `[dim, hidden..., classes]` on hard labels only.
pub fn pretrain_teacher(
    data: &Dataset,
    hidden: &[usize],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Model> {
    cfg.validate()?;
    let model = Model::new_random(&layer_dims(data.dim(), hidden, data.classes()), cfg.seed)?;
    train_hard(model, data, cfg, epochs)
}
