use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature standardization for inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
}

impl ScalerParams {
    /// Zero mean, unit scale.
    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_mean: vec![0.0; input_dim],
            input_std: vec![1.0; input_dim],
            output_mean: vec![0.0; output_dim],
            output_std: vec![1.0; output_dim],
        }
    }

    /// Fits on training rows only. Standard deviations are population
    /// estimates, floored at [`STD_FLOOR`].
    pub fn fit(inputs: ArrayView2<f64>, outputs: ArrayView2<f64>) -> Result<Self> {
        check_len("scaler rows", inputs.nrows(), outputs.nrows())?;
        if inputs.nrows() < 2 {
            return Err(Error::InsufficientData(format!(
                "scaler needs at least 2 training pairs, got {}",
                inputs.nrows()
            )));
        }
        let (input_mean, input_std) = column_stats(inputs);
        let (output_mean, output_std) = column_stats(outputs);
        Ok(Self {
            input_mean,
            input_std,
            output_mean,
            output_std,
        })
    }

    /// Replaces every output std with the root-mean-square of the
    /// per-feature values, so the scaled training loss weights all spectrum
    /// points equally, as the unscaled MSE does.
    pub fn pool_output_std(&mut self) {
        let n = self.output_std.len().max(1) as f64;
        let pooled = (self.output_std.iter().map(|s| s * s).sum::<f64>() / n)
            .sqrt()
            .max(STD_FLOOR);
        self.output_std.iter_mut().for_each(|s| *s = pooled);
    }

    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.output_mean.len()
    }

    pub fn scale_inputs(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        scale_rows(x, &self.input_mean, &self.input_std)
    }

    pub fn scale_outputs(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        scale_rows(y, &self.output_mean, &self.output_std)
    }

    pub fn unscale_outputs(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("unscale columns", self.output_dim(), y.ncols())?;
        let mut out = y.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.output_mean).zip(&self.output_std) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }

    /// Flat encoding used in the bundle: input mean, input std, output
    /// mean, output std.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * (self.input_dim() + self.output_dim()));
        v.extend_from_slice(&self.input_mean);
        v.extend_from_slice(&self.input_std);
        v.extend_from_slice(&self.output_mean);
        v.extend_from_slice(&self.output_std);
        v
    }

    pub fn from_flat(flat: &[f64], input_dim: usize, output_dim: usize) -> Result<Self> {
        check_len("scaler values", 2 * (input_dim + output_dim), flat.len())?;
        let (im, rest) = flat.split_at(input_dim);
        let (is, rest) = rest.split_at(input_dim);
        let (om, os) = rest.split_at(output_dim);
        Ok(Self {
            input_mean: im.to_vec(),
            input_std: is.to_vec(),
            output_mean: om.to_vec(),
            output_std: os.to_vec(),
        })
    }
}

fn column_stats(m: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let mean = m.mean_axis(Axis(0)).expect("non-empty").to_vec();
    let std = m
        .std_axis(Axis(0), 0.0)
        .iter()
        .map(|s| s.max(STD_FLOOR))
        .collect();
    (mean, std)
}

/// `(x - mean) / std` for a single vector.
pub fn apply_scaler(x: &[f64], mean: &[f64], std: &[f64]) -> Result<Vec<f64>> {
    check_len("scaler mean", x.len(), mean.len())?;
    check_len("scaler std", x.len(), std.len())?;
    Ok(x.iter()
        .zip(mean.iter().zip(std))
        .map(|(v, (m, s))| (v - m) / s)
        .collect())
}

/// Inverse of [`apply_scaler`].
pub fn invert_scaler(z: &[f64], mean: &[f64], std: &[f64]) -> Result<Vec<f64>> {
    check_len("scaler mean", z.len(), mean.len())?;
    check_len("scaler std", z.len(), std.len())?;
    Ok(z.iter()
        .zip(mean.iter().zip(std))
        .map(|(v, (m, s))| v * s + m)
        .collect())
}

fn scale_rows(x: ArrayView2<f64>, mean: &[f64], std: &[f64]) -> Result<Array2<f64>> {
    check_len("scale columns", mean.len(), x.ncols())?;
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}
