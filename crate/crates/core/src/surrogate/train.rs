use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::Dataset;
use crate::error::{check_len, Error, Result};
use crate::optim::Adam;

use super::bundle::{build_model, ModelBundle};
use super::loss::batch_loss_and_grad;
use super::scaler::ScalerParams;
use super::spec::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    /// Epochs without a validation improvement larger than `min_delta`
    /// before training stops.
    pub patience: usize,
    pub min_delta: f64,
    /// Halve the learning rate after this many epochs without improvement;
    /// 0 disables the schedule.
    pub plateau_patience: usize,
    /// Standardize outputs with one pooled std instead of per feature.
    pub pooled_output_std: bool,
    /// Stop after the epoch in which this many optimizer steps have been
    /// taken; 0 means only `epochs` limits training.
    pub max_steps: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            patience: 20,
            min_delta: 1e-6,
            plateau_patience: 8,
            pooled_output_std: true,
            max_steps: 16_000,
        }
    }
}

/// Training matrices in scaled units. Validation pairs never enter here.
struct TrainSlice {
    x: Array2<f64>,
    y: Array2<f64>,
}

pub fn train(spec: &ModelSpec, data: &Dataset) -> Result<ModelBundle> {
    train_with(spec, data, TrainOptions::default())
}

/// Mini-batch Adam on the training split with early stopping on validation
/// MSE. The returned bundle carries the best weights seen and their
/// validation MSE in spectrum units.
pub fn train_with(spec: &ModelSpec, data: &Dataset, opts: TrainOptions) -> Result<ModelBundle> {
    spec.validate()?;
    check_data(spec, data)?;
    let train_idx = data.train_indices();
    let raw_x = data.geometry_matrix(&train_idx);
    let raw_y = data.spectrum_matrix(&train_idx);
    let mut scaler = ScalerParams::fit(raw_x.view(), raw_y.view())?;
    if opts.pooled_output_std {
        scaler.pool_output_std();
    }
    let mut bundle = build_model(spec)?;
    bundle.set_scaler(scaler);
    fit(bundle, data, opts)
}

/// Continues training `bundle` on `data`, keeping its scaler. Used when a
/// model is carried over to a grown dataset.
pub fn fine_tune(bundle: &ModelBundle, data: &Dataset, opts: TrainOptions) -> Result<ModelBundle> {
    check_data(bundle.spec(), data)?;
    fit(bundle.clone(), data, opts)
}

fn check_data(spec: &ModelSpec, data: &Dataset) -> Result<()> {
    check_len("dataset geometry", spec.input_dim, data.geometry_dim())?;
    check_len("dataset spectrum", spec.output_dim, data.spectrum_len())?;
    let (n_train, n_val) = (data.train_len(), data.validation_len());
    if n_train < 2 || data.is_empty() {
        return Err(Error::InsufficientData(format!(
            "training needs at least 2 training and 1 validation pairs, got {n_train} and {n_val}"
        )));
    }
    Ok(())
}

fn fit(mut bundle: ModelBundle, data: &Dataset, opts: TrainOptions) -> Result<ModelBundle> {
    let spec = bundle.spec().clone();
    let train_idx = data.train_indices();
    let val_idx = data.validation_indices();
    let slice = TrainSlice {
        x: bundle.scaler().scale_inputs(data.geometry_matrix(&train_idx).view())?,
        y: bundle.scaler().scale_outputs(data.spectrum_matrix(&train_idx).view())?,
    };

    let validate = |b: &ModelBundle| b.mse_on(data, &val_idx);
    let mut best = validate(&bundle)?;
    let mut best_weights = bundle.weights().to_vec();
    let mut stale = 0;
    let mut plateau = 0;
    let mut steps = 0;

    let mut adam = Adam::new(bundle.weights().len(), spec.learning_rate);
    let mut grads = vec![0.0; bundle.weights().len()];
    let mut order: Vec<usize> = (0..slice.x.nrows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    rng.set_stream(1);

    for epoch in 1..=spec.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(spec.batch_size) {
            let xb = slice.x.select(Axis(0), batch);
            let yb = slice.y.select(Axis(0), batch);
            grads.iter_mut().for_each(|g| *g = 0.0);
            let net = bundle.network();
            let tape = net.forward(xb.view());
            let (loss, d_out) = batch_loss_and_grad(tape.output.view(), yb.view(), spec.loss);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            net.backward(&tape, &d_out, Some(&mut grads), false);
            adam.step(bundle.weights_mut(), &grads);
            steps += 1;
        }

        let val = validate(&bundle)?;
        if !val.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let improved = best - val > opts.min_delta;
        if val < best {
            best = val;
            best_weights.copy_from_slice(bundle.weights());
        }
        if improved {
            stale = 0;
            plateau = 0;
        } else {
            stale += 1;
            plateau += 1;
        }
        if opts.plateau_patience > 0 && plateau >= opts.plateau_patience {
            adam.learning_rate *= 0.5;
            plateau = 0;
            log::debug!("learning rate lowered to {:.3e}", adam.learning_rate);
        }
        log::debug!(
            "{} epoch {epoch}: val mse {val:.4e} (best {best:.4e})",
            spec.signature()
        );
        if stale >= opts.patience {
            log::debug!("early stop after {epoch} epochs");
            break;
        }
        if opts.max_steps > 0 && steps >= opts.max_steps {
            log::debug!("step budget of {} reached after {epoch} epochs", opts.max_steps);
            break;
        }
    }

    bundle.weights_mut().copy_from_slice(&best_weights);
    bundle.metric = Some(best);
    Ok(bundle)
}
