//! Trainable neural forward model `geometry → spectrum` with analytic
//! reverse-mode gradients for both weights and inputs.

mod bundle;
mod loss;
mod network;
mod scaler;
mod spec;
mod train;

use ndarray::ArrayView2;

pub use bundle::{
    build_model, load_bundle, save_bundle, ModelBundle, Provenance, BUNDLE_FORMAT_VERSION,
    MANIFEST_FILE, SCALER_FILE, WEIGHTS_FILE,
};
pub use loss::{loss, SMOOTH_L1_BETA};
pub use scaler::{apply_scaler, invert_scaler, ScalerParams, STD_FLOOR};
pub use spec::{Activation, Family, LayerInfo, LossKind, ModelSpec};
pub use train::{fine_tune, train, train_with, TrainOptions};

use crate::error::{check_len, Result};

impl ModelBundle {
    /// Training objective on a batch (spec loss, scaled units) and its
    /// gradient with respect to the flat weight vector.
    pub fn loss_and_weight_gradient(
        &self,
        geometries: ArrayView2<f64>,
        spectra: ArrayView2<f64>,
    ) -> Result<(f64, Vec<f64>)> {
        check_len("surrogate input", self.input_dim(), geometries.ncols())?;
        check_len("surrogate output", self.output_dim(), spectra.ncols())?;
        check_len("batch rows", geometries.nrows(), spectra.nrows())?;
        let x = self.scaler().scale_inputs(geometries)?;
        let y = self.scaler().scale_outputs(spectra)?;
        let net = self.network();
        let tape = net.forward(x.view());
        let (value, d_out) = loss::batch_loss_and_grad(tape.output.view(), y.view(), self.spec().loss);
        let mut grads = vec![0.0; self.weights().len()];
        net.backward(&tape, &d_out, Some(&mut grads), false);
        Ok((value, grads))
    }

    /// Copy of this bundle with different weights of the same shape.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        let mut b = ModelBundle::from_parts(self.spec().clone(), weights, self.scaler().clone())?;
        b.metric = self.metric;
        b.provenance = self.provenance.clone();
        Ok(b)
    }

    /// Copy of this bundle with a different scaler.
    pub fn with_scaler(&self, scaler: ScalerParams) -> Result<Self> {
        let mut b = ModelBundle::from_parts(self.spec().clone(), self.weights().to_vec(), scaler)?;
        b.metric = self.metric;
        b.provenance = self.provenance.clone();
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DataPair, Dataset, Geometry, Spectrum};
    use crate::error::Error;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(family: Family) -> ModelSpec {
        let spec = ModelSpec::new(family, 3, 4, 4, 2).with_seed(9);
        if family == Family::SeResidualMlp {
            spec.with_se_reduction(2)
        } else {
            spec
        }
    }

    fn random_scaler(rng: &mut ChaCha8Rng, d: usize, l: usize) -> ScalerParams {
        ScalerParams {
            input_mean: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
            input_std: (0..d).map(|_| rng.random_range(0.5..2.0)).collect(),
            output_mean: (0..l).map(|_| rng.random_range(-0.5..0.5)).collect(),
            output_std: (0..l).map(|_| rng.random_range(0.5..2.0)).collect(),
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = ModelSpec::new(Family::SeResidualMlp, 14, 201, 32, 2).with_se_reduction(4);
        let a = build_model(&spec).unwrap();
        let b = build_model(&spec).unwrap();
        let bits = |m: &ModelBundle| m.weights().iter().map(|w| w.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&build_model(&spec.clone().with_seed(1)).unwrap()));
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let spec = ModelSpec::new(Family::SeResidualMlp, 14, 201, 30, 2).with_se_reduction(4);
        assert!(matches!(build_model(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn zero_weights_predict_output_mean() {
        let spec = tiny(Family::ResidualMlp);
        let scaler = ScalerParams {
            input_mean: vec![0.1, 0.2, 0.3],
            input_std: vec![1.0, 2.0, 3.0],
            output_mean: vec![0.9, 0.8, 0.7, 0.6],
            output_std: vec![0.1, 0.2, 0.3, 0.4],
        };
        let b = ModelBundle::from_parts(spec.clone(), vec![0.0; spec.weight_count()], scaler).unwrap();
        let s = b.predict(&Geometry::new(vec![0.3, -1.0, 5.0])).unwrap();
        assert_eq!(s.values(), &[0.9, 0.8, 0.7, 0.6]);
    }

    /// 2 → 3 plain net, hidden width 2, one block, hand-set weights.
    #[test]
    fn hand_computed_forward_pass() {
        let spec = ModelSpec::new(Family::PlainMlp, 2, 3, 2, 1);
        #[rustfmt::skip]
        let weights = vec![
            // input: W (2x2) then b
            1.0, -1.0,   0.5, 2.0,     0.1, -0.2,
            // fc1
            1.0, 0.0,    -1.0, 1.0,    0.0, 0.3,
            // fc2
            2.0, 1.0,    0.5, -0.5,    -0.1, 0.2,
            // output: W (3x2) then b
            1.0, 0.0,    0.0, 1.0,     1.0, 1.0,    0.01, 0.02, 0.03,
        ];
        let scaler = ScalerParams {
            input_mean: vec![1.0, 0.0],
            input_std: vec![2.0, 1.0],
            output_mean: vec![0.5, 0.5, 0.5],
            output_std: vec![2.0, 1.0, 0.5],
        };
        let b = ModelBundle::from_parts(spec, weights, scaler).unwrap();
        let s = b.predict(&Geometry::new(vec![2.0, 0.25])).unwrap();

        // x = ((2-1)/2, 0.25) = (0.5, 0.25)
        // h0 = relu(0.5 - 0.25 + 0.1, 0.25 + 0.5 - 0.2) = (0.35, 0.55)
        // u  = relu(0.35, -0.35 + 0.55 + 0.3) = (0.35, 0.5)
        // v  = (0.7 + 0.5 - 0.1, 0.175 - 0.25 + 0.2) = (1.1, 0.125)
        // h1 = relu(v) = (1.1, 0.125)
        // y  = (1.11, 0.145, 1.255)
        // s  = y * std + mean = (2.72, 0.645, 1.1275)
        let expected = [2.72, 0.645, 1.1275];
        for (a, e) in s.values().iter().zip(expected) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn predict_is_pure_and_checks_dims() {
        let b = build_model(&tiny(Family::SeResidualMlp)).unwrap();
        let g = Geometry::new(vec![0.2, -0.4, 0.9]);
        assert_eq!(b.predict(&g).unwrap(), b.predict(&g).unwrap());
        assert!(matches!(
            b.predict(&Geometry::new(vec![0.0; 2])),
            Err(Error::Dimension { .. })
        ));
    }

    fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for family in [Family::PlainMlp, Family::ResidualMlp, Family::SeResidualMlp] {
            let mut b = build_model(&tiny(family)).unwrap();
            b = b.with_scaler(random_scaler(&mut rng, 3, 4)).unwrap();
            let g: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target = Spectrum::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
            let analytic = b.input_gradient(&Geometry::new(g.clone()), &target).unwrap();
            let numeric: Vec<f64> = (0..3)
                .map(|d| {
                    central_difference(
                        |t| {
                            let mut p = g.clone();
                            p[d] = t;
                            b.predict(&Geometry::new(p)).unwrap().mse(&target).unwrap()
                        },
                        g[d],
                        1e-4,
                    )
                })
                .collect();
            assert!(rel_err(&analytic, &numeric) < 1e-6, "{family:?}: {analytic:?} vs {numeric:?}");
        }
    }

    #[test]
    fn input_gradient_vanishes_at_own_prediction() {
        let b = build_model(&tiny(Family::SeResidualMlp)).unwrap();
        let g = Geometry::new(vec![0.3, 0.1, -0.7]);
        let target = b.predict(&g).unwrap();
        let grad = b.input_gradient(&g, &target).unwrap();
        assert!(grad.iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for family in [Family::PlainMlp, Family::ResidualMlp, Family::SeResidualMlp] {
            for kind in [LossKind::Mse, LossKind::SmoothL1] {
                let b = build_model(&tiny(family).with_loss(kind)).unwrap();
                let b = b.with_scaler(random_scaler(&mut rng, 3, 4)).unwrap();
                let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
                let y = Array2::from_shape_fn((5, 4), |_| rng.random_range(-3.0..3.0));
                let (_, analytic) = b.loss_and_weight_gradient(x.view(), y.view()).unwrap();
                let w0 = b.weights().to_vec();
                let numeric: Vec<f64> = (0..w0.len())
                    .map(|i| {
                        central_difference(
                            |t| {
                                let mut w = w0.clone();
                                w[i] = t;
                                b.with_weights(w)
                                    .unwrap()
                                    .loss_and_weight_gradient(x.view(), y.view())
                                    .unwrap()
                                    .0
                            },
                            w0[i],
                            1e-4,
                        )
                    })
                    .collect();
                let e = rel_err(&analytic, &numeric);
                assert!(e < 1e-6, "{family:?}/{kind:?}: relative error {e}");
            }
        }
    }

    fn linear_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = [[0.5, -0.3], [0.2, 0.8], [-0.6, 0.1]];
        let b = [0.1, -0.2, 0.3];
        let pairs = (0..n)
            .map(|_| {
                let g = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let s = (0..3).map(|j| a[j][0] * g[0] + a[j][1] * g[1] + b[j]).collect();
                DataPair {
                    geometry: Geometry::new(g.to_vec()),
                    spectrum: Spectrum::new(s),
                }
            })
            .collect();
        Dataset::from_pairs(2, 3, pairs).unwrap()
    }

    #[test]
    fn learns_a_linear_map() {
        let data = linear_dataset(500, 1);
        let spec = ModelSpec::new(Family::PlainMlp, 2, 3, 32, 1).with_training(3e-3, 200, 32);
        let b = train(&spec, &data).unwrap();
        let m = b.metric.unwrap();
        assert!(m <= 1e-4, "validation mse {m}");
        assert!((b.evaluate(&data).unwrap() - m).abs() < 1e-9);
    }

    #[test]
    fn zero_epochs_keeps_initial_weights() {
        let data = linear_dataset(60, 2);
        let spec = ModelSpec::new(Family::ResidualMlp, 2, 3, 8, 1).with_training(1e-3, 0, 16);
        let b = train(&spec, &data).unwrap();
        assert_eq!(b.weights(), build_model(&spec).unwrap().weights());
        assert!((b.evaluate(&data).unwrap() - b.metric.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let data = linear_dataset(120, 3);
        let spec = ModelSpec::new(Family::SeResidualMlp, 2, 3, 8, 1)
            .with_se_reduction(2)
            .with_loss(LossKind::SmoothL1)
            .with_training(1e-3, 15, 16);
        let a = train(&spec, &data).unwrap();
        let b = train(&spec, &data).unwrap();
        assert_eq!(a.metric.unwrap().to_bits(), b.metric.unwrap().to_bits());
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn step_budget_stops_at_epoch_boundary() {
        let data = linear_dataset(120, 4);
        let spec = ModelSpec::new(Family::PlainMlp, 2, 3, 8, 1).with_training(1e-3, 50, 16);
        let steps_per_epoch = data.train_len().div_ceil(16);
        let opts = TrainOptions {
            patience: 1000,
            plateau_patience: 0,
            ..TrainOptions::default()
        };
        let capped = train_with(&spec, &data, TrainOptions { max_steps: 2 * steps_per_epoch - 1, ..opts }).unwrap();
        let two = train_with(&spec.clone().with_training(1e-3, 2, 16), &data, TrainOptions { max_steps: 0, ..opts })
            .unwrap();
        assert_eq!(capped.weights(), two.weights());
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let data = linear_dataset(120, 4);
        let spec = ModelSpec::new(Family::PlainMlp, 2, 3, 8, 1).with_training(1e300, 5, 16);
        assert!(matches!(train(&spec, &data), Err(Error::Divergence { .. })));
    }

    #[test]
    fn evaluate_matches_per_pair_mean() {
        let data = linear_dataset(110, 5);
        let b = build_model(&ModelSpec::new(Family::ResidualMlp, 2, 3, 6, 2)).unwrap();
        let mut total = 0.0;
        let idx = data.validation_indices();
        for &i in &idx {
            let p = &data.pairs()[i];
            total += b.predict(&p.geometry).unwrap().mse(&p.spectrum).unwrap();
        }
        let expected = total / idx.len() as f64;
        assert!((b.evaluate(&data).unwrap() - expected).abs() < 1e-12);
        assert!(b.evaluate(&Dataset::new(2, 3)).is_err());
    }

    #[test]
    fn bundle_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let data = linear_dataset(60, 6);
        let spec = ModelSpec::new(Family::SeResidualMlp, 2, 3, 8, 1)
            .with_se_reduction(4)
            .with_training(1e-3, 3, 16);
        let mut b = train(&spec, &data).unwrap();
        b.provenance = Some(Provenance {
            round: 2,
            dataset_size: 60,
            model_id: Some("model-002".into()),
        });
        let path = dir.path().join("bundle");
        b.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        assert_eq!(back, b);

        // truncated weights
        let w = path.join(WEIGHTS_FILE);
        let bytes = std::fs::read(&w).unwrap();
        std::fs::write(&w, &bytes[..bytes.len() - 8]).unwrap();
        match ModelBundle::load(&path) {
            Err(Error::BundleLoad(msg)) => assert!(msg.contains("weight count mismatch"), "{msg}"),
            other => panic!("expected weight-count error, got {other:?}"),
        }

        // version bump
        b.save(&path).unwrap();
        let m = path.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&m).unwrap();
        std::fs::write(&m, text.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
        match ModelBundle::load(&path) {
            Err(Error::BundleLoad(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected version error, got {other:?}"),
        }

        std::fs::write(&m, "{ not json").unwrap();
        assert!(matches!(ModelBundle::load(&path), Err(Error::BundleLoad(_))));
    }
}
