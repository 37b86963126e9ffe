use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Geometry, Spectrum};
use crate::error::{check_len, Error, Result};
use crate::fsutil;

use super::network::Network;
use super::scaler::ScalerParams;
use super::spec::{LayerInfo, ModelSpec};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const SCALER_FILE: &str = "scaler.bin";

/// Where a trained bundle came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub round: usize,
    pub dataset_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

/// A surrogate: architecture, flat weights and the data scaler.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    spec: ModelSpec,
    weights: Vec<f64>,
    scaler: ScalerParams,
    /// Best validation MSE in spectrum units; `None` until trained.
    pub metric: Option<f64>,
    pub provenance: Option<Provenance>,
}

/// Untrained bundle with deterministic uniform fan-in initialization and an
/// identity scaler.
pub fn build_model(spec: &ModelSpec) -> Result<ModelBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut weights = Vec::with_capacity(spec.weight_count());
    for layer in spec.layers() {
        let bound = 1.0 / (layer.in_dim as f64).sqrt();
        weights.extend((0..layer.weight_count).map(|_| rng.random_range(-bound..bound)));
    }
    Ok(ModelBundle {
        spec: spec.clone(),
        weights,
        scaler: ScalerParams::identity(spec.input_dim, spec.output_dim),
        metric: None,
        provenance: None,
    })
}

impl ModelBundle {
    /// Assembles a bundle from explicit parts, checking every size.
    pub fn from_parts(spec: ModelSpec, weights: Vec<f64>, scaler: ScalerParams) -> Result<Self> {
        spec.validate()?;
        let expected = spec.weight_count();
        if weights.len() != expected {
            return Err(Error::BundleLoad(format!(
                "weight count mismatch: spec implies {expected}, got {}",
                weights.len()
            )));
        }
        check_len("scaler input dim", spec.input_dim, scaler.input_dim())?;
        check_len("scaler output dim", spec.output_dim, scaler.output_dim())?;
        Ok(Self {
            spec,
            weights,
            scaler,
            metric: None,
            provenance: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Vec<f64> {
        &mut self.weights
    }

    pub fn scaler(&self) -> &ScalerParams {
        &self.scaler
    }

    pub(crate) fn set_scaler(&mut self, scaler: ScalerParams) {
        self.scaler = scaler;
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        self.spec.layers()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn is_trained(&self) -> bool {
        self.metric.is_some()
    }

    pub fn model_id(&self) -> Option<&str> {
        self.provenance.as_ref()?.model_id.as_deref()
    }

    pub(crate) fn network(&self) -> Network<'_> {
        Network::new(&self.spec, &self.weights)
    }

    /// Predictions for row-stacked geometries, in spectrum units.
    pub fn predict_batch(&self, geometries: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("surrogate input", self.spec.input_dim, geometries.ncols())?;
        let x = self.scaler.scale_inputs(geometries)?;
        let y = self.network().predict(x.view());
        self.scaler.unscale_outputs(y.view())
    }

    pub fn predict(&self, g: &Geometry) -> Result<Spectrum> {
        let x = ArrayView2::from_shape((1, g.dim()), g.values())
            .map_err(|e| Error::Domain(e.to_string()))?;
        let y = self.predict_batch(x)?;
        Ok(Spectrum::new(y.into_raw_vec_and_offset().0))
    }

    /// Validation-split MSE in spectrum units.
    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        check_len("dataset geometry", self.spec.input_dim, data.geometry_dim())?;
        check_len("dataset spectrum", self.spec.output_dim, data.spectrum_len())?;
        let idx = data.validation_indices();
        if idx.is_empty() {
            return Err(Error::InsufficientData("validation split is empty".into()));
        }
        self.mse_on(data, &idx)
    }

    /// Mean squared error over the pairs at `indices`.
    pub(crate) fn mse_on(&self, data: &Dataset, indices: &[usize]) -> Result<f64> {
        const CHUNK: usize = 2048;
        let mut total = 0.0;
        for chunk in indices.chunks(CHUNK) {
            let pred = self.predict_batch(data.geometry_matrix(chunk).view())?;
            let truth = data.spectrum_matrix(chunk);
            total += (&pred - &truth).mapv(|e| e * e).sum();
        }
        Ok(total / (indices.len() * self.spec.output_dim) as f64)
    }

    /// Per-row MSE against `target` and its gradient with respect to each
    /// geometry row, through the scaler.
    pub fn input_gradient_batch(
        &self,
        geometries: ArrayView2<f64>,
        target: &[f64],
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        check_len("surrogate input", self.spec.input_dim, geometries.ncols())?;
        check_len("gradient target", self.spec.output_dim, target.len())?;
        let x = self.scaler.scale_inputs(geometries)?;
        let net = self.network();
        let tape = net.forward(x.view());
        let pred = self.scaler.unscale_outputs(tape.output.view())?;
        let l = self.spec.output_dim as f64;
        let mut losses = Vec::with_capacity(pred.nrows());
        let mut d_out = Array2::zeros(pred.raw_dim());
        for (r, row) in pred.rows().into_iter().enumerate() {
            let mut acc = 0.0;
            for (j, (&p, &t)) in row.iter().zip(target).enumerate() {
                let e = p - t;
                acc += e * e;
                // chain through un-scaling: y = y_s * std + mean
                d_out[[r, j]] = 2.0 * e / l * self.scaler.output_std[j];
            }
            losses.push(acc / l);
        }
        let mut dx = net
            .backward(&tape, &d_out, None, true)
            .expect("input gradient requested");
        for mut row in dx.rows_mut() {
            for (v, s) in row.iter_mut().zip(&self.scaler.input_std) {
                *v /= s;
            }
        }
        Ok((losses, dx))
    }

    /// Gradient of `MSE(predict(g), target)` with respect to `g`.
    pub fn input_gradient(&self, g: &Geometry, target: &Spectrum) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, g.dim()), g.values())
            .map_err(|e| Error::Domain(e.to_string()))?;
        let (_, grad) = self.input_gradient_batch(x, target.values())?;
        let grad = grad.into_raw_vec_and_offset().0;
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input gradient".into()));
        }
        Ok(grad)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_bundle(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load_bundle(dir)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLayer {
    name: String,
    in_dim: usize,
    out_dim: usize,
    offset: usize,
    weight_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    endianness: String,
    dtype: String,
    spec: ModelSpec,
    layers: Vec<ManifestLayer>,
    total_weights: usize,
    weights_file: String,
    scaler_file: String,
    scaler_layout: Vec<String>,
    metric: Option<f64>,
    provenance: Option<Provenance>,
}

fn encode_f64(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_f64(bytes: &[u8], what: &str) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::BundleLoad(format!(
            "{what} has {} bytes, not a whole number of 64-bit floats",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Writes the bundle directory: `manifest.json`, `weights.bin` and
/// `scaler.bin`, each replaced atomically.
pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: BUNDLE_FORMAT_VERSION,
        endianness: "little".into(),
        dtype: "f64".into(),
        spec: bundle.spec.clone(),
        layers: bundle
            .layers()
            .into_iter()
            .map(|l| ManifestLayer {
                name: l.name,
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                offset: l.offset,
                weight_count: l.weight_count,
            })
            .collect(),
        total_weights: bundle.weights.len(),
        weights_file: WEIGHTS_FILE.into(),
        scaler_file: SCALER_FILE.into(),
        scaler_layout: ["input_mean", "input_std", "output_mean", "output_std"]
            .map(String::from)
            .to_vec(),
        metric: bundle.metric,
        provenance: bundle.provenance.clone(),
    };
    fsutil::write_atomic(&dir.join(WEIGHTS_FILE), &encode_f64(&bundle.weights))?;
    fsutil::write_atomic(&dir.join(SCALER_FILE), &encode_f64(&bundle.scaler.to_flat()))?;
    fsutil::write_json_atomic(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fsutil::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::BundleLoad(format!("corrupt manifest {}: {e}", manifest_path.display())))?;
    if manifest.format_version != BUNDLE_FORMAT_VERSION {
        return Err(Error::BundleLoad(format!(
            "format version mismatch: file is v{}, this build reads v{BUNDLE_FORMAT_VERSION}",
            manifest.format_version
        )));
    }
    if manifest.endianness != "little" || manifest.dtype != "f64" {
        return Err(Error::BundleLoad(format!(
            "unsupported encoding {} {}; expected little-endian f64",
            manifest.endianness, manifest.dtype
        )));
    }
    manifest
        .spec
        .validate()
        .map_err(|e| Error::BundleLoad(format!("corrupt manifest: {e}")))?;
    let expected = manifest.spec.layers();
    let consistent = expected.len() == manifest.layers.len()
        && expected.iter().zip(&manifest.layers).all(|(a, b)| {
            a.name == b.name
                && a.in_dim == b.in_dim
                && a.out_dim == b.out_dim
                && a.offset == b.offset
                && a.weight_count == b.weight_count
        });
    if !consistent {
        return Err(Error::BundleLoad(
            "corrupt manifest: layer list does not match the architecture".into(),
        ));
    }
    let implied = manifest.spec.weight_count();
    if manifest.total_weights != implied {
        return Err(Error::BundleLoad(format!(
            "corrupt manifest: total_weights {} but architecture implies {implied}",
            manifest.total_weights
        )));
    }

    let weights_path = dir.join(&manifest.weights_file);
    let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    if bytes.len() != implied * 8 {
        return Err(Error::BundleLoad(format!(
            "weight count mismatch: expected {implied} values ({} bytes), found {} bytes",
            implied * 8,
            bytes.len()
        )));
    }
    let weights = decode_f64(&bytes, "weights file")?;

    let scaler_path = dir.join(&manifest.scaler_file);
    let bytes = fs::read(&scaler_path).map_err(|e| Error::io(&scaler_path, e))?;
    let flat = decode_f64(&bytes, "scaler file")?;
    let scaler = ScalerParams::from_flat(&flat, manifest.spec.input_dim, manifest.spec.output_dim)
        .map_err(|e| Error::BundleLoad(format!("scaler file: {e}")))?;

    let mut bundle = ModelBundle::from_parts(manifest.spec, weights, scaler)?;
    bundle.metric = manifest.metric;
    bundle.provenance = manifest.provenance;
    Ok(bundle)
}
