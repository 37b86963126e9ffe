//! Value types shared across the engine: design vectors, spectra, bounds and
//! the append-only dataset with its order-based 10:1 train/validation split.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fsutil;

/// Number of geometric design parameters of the all-dielectric unit cell.
pub const DEFAULT_GEOMETRY_DIM: usize = 14;
/// Desk-scale spectrum resolution.
pub const DEFAULT_SPECTRUM_LEN: usize = 201;
/// Every `VALIDATION_STRIDE`-th appended pair is held out for validation.
pub const VALIDATION_STRIDE: usize = 11;

/// Feasible box for design vectors, in normalized design units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBounds")]
pub struct GeometryBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<RawBounds> for GeometryBounds {
    type Error = Error;

    fn try_from(raw: RawBounds) -> Result<Self> {
        Self::new(raw.lower, raw.upper)
    }
}

impl GeometryBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_len("geometry bounds", lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(Error::Domain("bounds must have at least one dimension".into()));
        }
        for (d, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Domain(format!(
                    "bounds for dimension {d} are not an interval: [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[-1, 1]` in every dimension.
    pub fn symmetric_unit(dim: usize) -> Self {
        assert!(dim > 0, "bounds need at least one dimension");
        Self {
            lower: vec![-1.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn midpoint(&self) -> Geometry {
        Geometry::new(
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(lo, hi)| 0.5 * (lo + hi))
                .collect(),
        )
    }

    /// Projects `values` into the box in place.
    pub fn clamp_in_place(&self, values: &mut [f64]) {
        for ((v, lo), hi) in values.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Maps a unit-interval sample `u[d] ∈ [0, 1)` onto the box.
    pub fn from_unit_cube(&self, u: &[f64]) -> Geometry {
        Geometry::new(
            u.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(t, (lo, hi))| lo + t * (hi - lo))
                .collect(),
        )
    }
}

impl Default for GeometryBounds {
    fn default() -> Self {
        Self::symmetric_unit(DEFAULT_GEOMETRY_DIM)
    }
}

/// A design vector `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Geometry(Vec<f64>);

impl Geometry {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for Geometry {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// A sampled spectral response. Oracle outputs live in `[0, 1]`;
/// surrogate predictions are not clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Mean squared difference against `other`.
    pub fn mse(&self, other: &Spectrum) -> Result<f64> {
        check_len("spectrum comparison", self.len(), other.len())?;
        if self.is_empty() {
            return Ok(0.0);
        }
        let sum: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.len() as f64)
    }

    /// Reads a target spectrum: one value per line, or a single
    /// comma-separated row.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        let mut values = Vec::new();
        for token in text
            .split(|c: char| c == ',' || c == '\n' || c == '\r')
            .map(str::trim)
            .filter(|t| !t.is_empty())
        {
            let v: f64 = token
                .parse()
                .map_err(|_| Error::parse(path, format!("not a number: {token:?}")))?;
            values.push(v);
        }
        if values.is_empty() {
            return Err(Error::parse(path, "empty spectrum file"));
        }
        Ok(Self(values))
    }

    /// Writes one value per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.len() * 24);
        for v in &self.0 {
            out.push_str(&format!("{v:e}\n"));
        }
        fsutil::write_atomic(path, out.as_bytes())
    }
}

impl From<Vec<f64>> for Spectrum {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Per-dimension bounds check.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub out_of_bounds: Vec<bool>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        !self.out_of_bounds.iter().any(|&b| b)
    }

    /// Indices of violated dimensions.
    pub fn violations(&self) -> Vec<usize> {
        self.out_of_bounds
            .iter()
            .enumerate()
            .filter_map(|(d, &b)| b.then_some(d))
            .collect()
    }
}

pub fn validate_geometry(g: &Geometry, bounds: &GeometryBounds) -> Result<FeasibilityReport> {
    check_len("geometry vs bounds", bounds.dim(), g.dim())?;
    let out_of_bounds = g
        .values()
        .iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|(v, (lo, hi))| !(v >= lo && v <= hi))
        .collect();
    Ok(FeasibilityReport { out_of_bounds })
}

/// Affine map of the box onto `[-1, 1]^D`.
pub fn normalize(g: &Geometry, bounds: &GeometryBounds) -> Result<Geometry> {
    let report = validate_geometry(g, bounds)?;
    if !report.is_feasible() {
        return Err(Error::Domain(format!(
            "cannot normalize infeasible geometry (dimensions {:?} out of bounds)",
            report.violations()
        )));
    }
    Ok(Geometry(
        g.values()
            .iter()
            .zip(bounds.lower.iter().zip(&bounds.upper))
            .map(|(v, (lo, hi))| 2.0 * (v - lo) / (hi - lo) - 1.0)
            .collect(),
    ))
}

/// Inverse of [`normalize`].
pub fn denormalize(g: &Geometry, bounds: &GeometryBounds) -> Result<Geometry> {
    check_len("geometry vs bounds", bounds.dim(), g.dim())?;
    Ok(Geometry(
        g.values()
            .iter()
            .zip(bounds.lower.iter().zip(&bounds.upper))
            .map(|(v, (lo, hi))| lo + 0.5 * (v + 1.0) * (hi - lo))
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPair {
    pub geometry: Geometry,
    pub spectrum: Spectrum,
}

/// Which side of the split a pair falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// Ordered, append-only collection of geometry-spectrum pairs.
///
/// The split is a pure function of position: pair `i` is held out iff
/// `(i + 1) % 11 == 0`, which yields exactly `floor(k / 11)` validation
/// pairs for every `k >= 11` and never moves a pair when the set grows.
/// Below eleven pairs the last pair is held out so validation is non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    geometry_dim: usize,
    spectrum_len: usize,
    pairs: Vec<DataPair>,
}

impl Dataset {
    pub fn new(geometry_dim: usize, spectrum_len: usize) -> Self {
        Self {
            geometry_dim,
            spectrum_len,
            pairs: Vec::new(),
        }
    }

    pub fn from_pairs(
        geometry_dim: usize,
        spectrum_len: usize,
        pairs: Vec<DataPair>,
    ) -> Result<Self> {
        let mut ds = Self::new(geometry_dim, spectrum_len);
        for p in pairs {
            ds.push(p)?;
        }
        Ok(ds)
    }

    pub fn geometry_dim(&self) -> usize {
        self.geometry_dim
    }

    pub fn spectrum_len(&self) -> usize {
        self.spectrum_len
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[DataPair] {
        &self.pairs
    }

    pub fn push(&mut self, pair: DataPair) -> Result<()> {
        check_len("dataset geometry", self.geometry_dim, pair.geometry.dim())?;
        check_len("dataset spectrum", self.spectrum_len, pair.spectrum.len())?;
        self.pairs.push(pair);
        Ok(())
    }

    /// First `k` pairs as a new dataset.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k > self.len() {
            return Err(Error::Capacity {
                requested: k,
                available: self.len(),
            });
        }
        Ok(Self {
            geometry_dim: self.geometry_dim,
            spectrum_len: self.spectrum_len,
            pairs: self.pairs[..k].to_vec(),
        })
    }

    pub fn split_of(&self, index: usize) -> Split {
        let k = self.len();
        if k < VALIDATION_STRIDE {
            if index + 1 == k {
                Split::Validation
            } else {
                Split::Train
            }
        } else if (index + 1) % VALIDATION_STRIDE == 0 {
            Split::Validation
        } else {
            Split::Train
        }
    }

    pub fn validation_len(&self) -> usize {
        let k = self.len();
        if k == 0 {
            0
        } else {
            (k / VALIDATION_STRIDE).max(1)
        }
    }

    pub fn train_len(&self) -> usize {
        self.len() - self.validation_len()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.split_of(i) == Split::Train)
            .collect()
    }

    pub fn validation_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.split_of(i) == Split::Validation)
            .collect()
    }

    /// Row-stacked geometries for `indices`.
    pub fn geometry_matrix(&self, indices: &[usize]) -> Array2<f64> {
        let mut m = Array2::zeros((indices.len(), self.geometry_dim));
        for (r, &i) in indices.iter().enumerate() {
            for (c, v) in self.pairs[i].geometry.values().iter().enumerate() {
                m[[r, c]] = *v;
            }
        }
        m
    }

    /// Row-stacked spectra for `indices`.
    pub fn spectrum_matrix(&self, indices: &[usize]) -> Array2<f64> {
        let mut m = Array2::zeros((indices.len(), self.spectrum_len));
        for (r, &i) in indices.iter().enumerate() {
            for (c, v) in self.pairs[i].spectrum.values().iter().enumerate() {
                m[[r, c]] = *v;
            }
        }
        m
    }

    /// Reads the dataset file format: `D` geometry columns then `L` spectrum
    /// columns per row, with an optional single header row.
    pub fn read_csv(path: &Path, geometry_dim: usize, spectrum_len: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::parse(path, e.to_string()))?;
        let width = geometry_dim + spectrum_len;
        let mut ds = Self::new(geometry_dim, spectrum_len);
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
            let parsed: std::result::Result<Vec<f64>, _> =
                record.iter().map(str::parse::<f64>).collect();
            let values = match parsed {
                Ok(v) => v,
                Err(_) if row == 0 => continue,
                Err(e) => {
                    return Err(Error::parse(path, format!("row {}: {e}", row + 1)));
                }
            };
            if values.len() != width {
                return Err(Error::parse(
                    path,
                    format!(
                        "row {} has {} columns, expected {width} ({geometry_dim} geometry + {spectrum_len} spectrum)",
                        row + 1,
                        values.len()
                    ),
                ));
            }
            let (g, s) = values.split_at(geometry_dim);
            ds.pairs.push(DataPair {
                geometry: Geometry(g.to_vec()),
                spectrum: Spectrum(s.to_vec()),
            });
        }
        Ok(ds)
    }

    /// Writes the dataset file format with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = (0..self.geometry_dim)
            .map(|d| format!("g{d}"))
            .chain((0..self.spectrum_len).map(|j| format!("s{j}")))
            .collect();
        let to_err = |e: csv::Error| Error::parse(path, e.to_string());
        w.write_record(&header).map_err(to_err)?;
        for p in &self.pairs {
            let row: Vec<String> = p
                .geometry
                .values()
                .iter()
                .chain(p.spectrum.values())
                .map(|v| format!("{v:?}"))
                .collect();
            w.write_record(&row).map_err(to_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::parse(path, e.to_string()))?;
        fsutil::write_atomic(path, &bytes)
    }

    /// Counts data columns in a dataset file without loading it, skipping a header.
    pub fn count_columns(path: &Path) -> Result<usize> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::parse(path, e.to_string()))?;
        let mut record = csv::StringRecord::new();
        for _ in 0..2 {
            let more = reader
                .read_record(&mut record)
                .map_err(|e| Error::parse(path, e.to_string()))?;
            if !more {
                break;
            }
            if record.iter().all(|t| t.parse::<f64>().is_ok()) {
                return Ok(record.len());
            }
        }
        Err(Error::parse(path, "no numeric rows"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(d: usize, l: usize, tag: f64) -> DataPair {
        DataPair {
            geometry: Geometry::new(vec![tag; d]),
            spectrum: Spectrum::new(vec![tag; l]),
        }
    }

    #[test]
    fn lower_bound_is_feasible() {
        let b = GeometryBounds::default();
        let g = Geometry::new(b.lower().to_vec());
        assert!(validate_geometry(&g, &b).unwrap().is_feasible());
    }

    #[test]
    fn above_upper_is_infeasible_at_that_dimension() {
        let b = GeometryBounds::default();
        let mut v = b.midpoint().into_inner();
        v[5] = b.upper()[5] + 0.1;
        let r = validate_geometry(&Geometry::new(v), &b).unwrap();
        assert!(!r.is_feasible());
        assert_eq!(r.violations(), vec![5]);
    }

    #[test]
    fn deserialized_bounds_are_checked() {
        let ok: GeometryBounds = serde_json::from_str(r#"{"lower":[0.0],"upper":[2.0]}"#).unwrap();
        assert_eq!(ok.upper(), &[2.0]);
        assert!(serde_json::from_str::<GeometryBounds>(r#"{"lower":[1.0],"upper":[0.5]}"#).is_err());
        assert!(serde_json::from_str::<GeometryBounds>(r#"{"lower":[0.0, 1.0],"upper":[1.0]}"#).is_err());
    }

    #[test]
    fn midpoint_is_feasible() {
        let b = GeometryBounds::new(vec![0.0, 10.0], vec![1.0, 30.0]).unwrap();
        assert!(validate_geometry(&b.midpoint(), &b).unwrap().is_feasible());
    }

    #[test]
    fn nan_is_infeasible() {
        let b = GeometryBounds::symmetric_unit(2);
        let r = validate_geometry(&Geometry::new(vec![0.0, f64::NAN]), &b).unwrap();
        assert_eq!(r.violations(), vec![1]);
    }

    #[test]
    fn dimension_mismatch_is_structural() {
        let b = GeometryBounds::default();
        let err = validate_geometry(&Geometry::new(vec![0.0; 3]), &b).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn bounds_reject_empty_or_inverted() {
        assert!(GeometryBounds::new(vec![], vec![]).is_err());
        assert!(GeometryBounds::new(vec![1.0], vec![1.0]).is_err());
        assert!(GeometryBounds::new(vec![0.0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn normalize_endpoints() {
        let b = GeometryBounds::new(vec![2.0, -5.0, 0.0], vec![4.0, 5.0, 0.5]).unwrap();
        let lo = normalize(&Geometry::new(b.lower().to_vec()), &b).unwrap();
        assert!(lo.values().iter().all(|&v| v == -1.0));
        let mid = normalize(&b.midpoint(), &b).unwrap();
        assert!(mid.values().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn normalize_rejects_infeasible() {
        let b = GeometryBounds::symmetric_unit(2);
        let err = normalize(&Geometry::new(vec![0.0, 1.5]), &b).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    proptest! {
        #[test]
        fn normalize_round_trip(
            raw in prop::collection::vec((-50.0f64..50.0, 0.01f64..20.0, 0.0f64..1.0), 1..16)
        ) {
            let lower: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let upper: Vec<f64> = raw.iter().map(|r| r.0 + r.1).collect();
            let b = GeometryBounds::new(lower, upper).unwrap();
            let u: Vec<f64> = raw.iter().map(|r| r.2).collect();
            let g = b.from_unit_cube(&u);
            let back = denormalize(&normalize(&g, &b).unwrap(), &b).unwrap();
            for (x, y) in g.values().iter().zip(back.values()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
            let n = Geometry::new(u.iter().map(|t| 2.0 * t - 1.0).collect());
            let again = normalize(&denormalize(&n, &b).unwrap(), &b).unwrap();
            for (x, y) in n.values().iter().zip(again.values()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn split_sizes_follow_ten_to_one(k in 11usize..3000) {
            let mut ds = Dataset::new(1, 1);
            for i in 0..k {
                ds.push(pair(1, 1, i as f64)).unwrap();
            }
            let val = ds.validation_indices();
            let train = ds.train_indices();
            prop_assert_eq!(val.len(), k / 11);
            prop_assert_eq!(val.len(), ds.validation_len());
            prop_assert_eq!(train.len() + val.len(), k);
            prop_assert!(val.iter().all(|i| !train.contains(i)));
        }
    }

    #[test]
    fn small_datasets_keep_one_validation_pair() {
        let mut ds = Dataset::new(1, 1);
        for i in 0..5 {
            ds.push(pair(1, 1, i as f64)).unwrap();
        }
        assert_eq!(ds.validation_indices(), vec![4]);
        assert_eq!(ds.train_len(), 4);
    }

    #[test]
    fn split_of_550_is_500_50() {
        let mut ds = Dataset::new(2, 3);
        for i in 0..550 {
            ds.push(pair(2, 3, i as f64)).unwrap();
        }
        assert_eq!(ds.train_len(), 500);
        assert_eq!(ds.validation_len(), 50);
    }

    #[test]
    fn push_checks_dimensions() {
        let mut ds = Dataset::new(2, 3);
        assert!(ds.push(pair(3, 3, 0.0)).is_err());
        assert!(ds.push(pair(2, 4, 0.0)).is_err());
    }

    #[test]
    fn csv_round_trip_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::new(2, 3);
        ds.push(DataPair {
            geometry: Geometry::new(vec![0.1, -0.7]),
            spectrum: Spectrum::new(vec![0.25, 1.0 / 3.0, 0.0]),
        })
        .unwrap();
        ds.push(pair(2, 3, 0.5)).unwrap();
        let p = dir.path().join("d.csv");
        ds.write_csv(&p).unwrap();
        assert_eq!(Dataset::read_csv(&p, 2, 3).unwrap(), ds);
        assert_eq!(Dataset::count_columns(&p).unwrap(), 5);

        let bare = dir.path().join("bare.csv");
        std::fs::write(&bare, "0.1,-0.7,0.25,0.5,0\n0.5,0.5,0.5,0.5,0.5\n").unwrap();
        let read = Dataset::read_csv(&bare, 2, 3).unwrap();
        assert_eq!(read.len(), 2);
        assert_eq!(read.pairs()[0].spectrum.values()[1], 0.5);
    }

    #[test]
    fn csv_with_wrong_width_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "1,2,3\n").unwrap();
        assert!(matches!(
            Dataset::read_csv(&p, 2, 3),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn spectrum_file_formats() {
        let dir = tempfile::tempdir().unwrap();
        let lines = dir.path().join("lines.txt");
        std::fs::write(&lines, "0.5\n0.25\n1\n").unwrap();
        let row = dir.path().join("row.csv");
        std::fs::write(&row, "0.5, 0.25, 1\n").unwrap();
        let a = Spectrum::read(&lines).unwrap();
        assert_eq!(a, Spectrum::read(&row).unwrap());
        assert_eq!(a.values(), &[0.5, 0.25, 1.0]);
        let out = dir.path().join("out.txt");
        a.write(&out).unwrap();
        assert_eq!(Spectrum::read(&out).unwrap(), a);
    }
}
