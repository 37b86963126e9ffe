//! Ground-truth spectra for dataset growth and re-simulation.
//!
//! Two backends share one interface. The synthetic backend evaluates four
//! superposed Lorentzian dips whose centres, widths and depths depend on all
//! fourteen unit-cell parameters. The file-backed backend replays rows of a
//! pre-generated dataset in file order.
//!
//! Geometry layout (normalized to `[-1, 1]`):
//!
//! | index  | parameter                     |
//! |--------|-------------------------------|
//! | 0      | height `h`                    |
//! | 1      | periodicity `p`               |
//! | 2..6   | semi-major axes `r_ma,i`      |
//! | 6..10  | semi-minor axes `r_mi,i`      |
//! | 10..14 | rotation angles `theta_i`     |

use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    normalize, DataPair, Dataset, Geometry, GeometryBounds, Spectrum, DEFAULT_GEOMETRY_DIM,
    DEFAULT_SPECTRUM_LEN,
};
use crate::error::{check_len, Error, Result};

pub const RESONATORS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    Synthetic,
    FileBacked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub kind: OracleKind,
    pub geometry_dim: usize,
    pub spectrum_len: usize,
    pub seed: u64,
    pub path: Option<PathBuf>,
    /// Physical design ranges; synthetic spectra are computed after mapping
    /// these onto `[-1, 1]`.
    pub bounds: GeometryBounds,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Synthetic,
            geometry_dim: DEFAULT_GEOMETRY_DIM,
            spectrum_len: DEFAULT_SPECTRUM_LEN,
            seed: 0,
            path: None,
            bounds: GeometryBounds::default(),
        }
    }
}

impl OracleConfig {
    pub fn synthetic(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn file_backed(path: impl Into<PathBuf>, geometry_dim: usize, spectrum_len: usize) -> Self {
        Self {
            kind: OracleKind::FileBacked,
            geometry_dim,
            spectrum_len,
            path: Some(path.into()),
            bounds: GeometryBounds::symmetric_unit(geometry_dim),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spectrum_len < 2 {
            return Err(Error::Domain("spectrum length must be at least 2".into()));
        }
        check_len("oracle bounds", self.geometry_dim, self.bounds.dim())?;
        match self.kind {
            OracleKind::Synthetic => {
                if self.geometry_dim != DEFAULT_GEOMETRY_DIM {
                    return Err(Error::Domain(format!(
                        "the synthetic oracle needs {DEFAULT_GEOMETRY_DIM} parameters \
                         (h, p and four resonators), got {}",
                        self.geometry_dim
                    )));
                }
            }
            OracleKind::FileBacked => {
                if self.path.is_none() {
                    return Err(Error::MissingInput(vec!["oracle.path".into()]));
                }
            }
        }
        Ok(())
    }
}

/// Dimensionless frequency of grid point `j`.
pub fn frequency(j: usize, spectrum_len: usize) -> f64 {
    j as f64 / (spectrum_len - 1) as f64
}

/// Centre, width and depth of one resonance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resonance {
    pub centre: f64,
    pub width: f64,
    pub depth: f64,
}

pub fn resonances(g: &[f64]) -> [Resonance; RESONATORS] {
    let (h, p) = (g[0], g[1]);
    std::array::from_fn(|i| {
        let r_ma = g[2 + i];
        let r_mi = g[6 + i];
        let theta = g[10 + i];
        Resonance {
            centre: 0.5 + 0.35 * (0.6 * r_ma + 0.25 * r_mi + 0.1 * h + 0.05 * p),
            width: 0.015 + 0.025 * (r_mi + 1.0),
            depth: 0.4 + 0.25 * (1.0 + (PI * theta).sin()),
        }
    })
}

/// Synthetic response for a geometry already normalized to `[-1, 1]^14`.
pub fn synthetic_spectrum(g: &Geometry, spectrum_len: usize) -> Result<Spectrum> {
    check_len("synthetic oracle geometry", DEFAULT_GEOMETRY_DIM, g.dim())?;
    if spectrum_len < 2 {
        return Err(Error::Domain("spectrum length must be at least 2".into()));
    }
    if let Some(d) = g.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite geometry value at {d}")));
    }
    let res = resonances(g.values());
    let values = (0..spectrum_len)
        .map(|j| {
            let f = frequency(j, spectrum_len);
            let dip: f64 = res
                .iter()
                .map(|r| {
                    let w2 = r.width * r.width;
                    r.depth * w2 / ((f - r.centre) * (f - r.centre) + w2)
                })
                .sum();
            (1.0 - dip).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Spectrum::new(values))
}

/// Uniform draw in `bounds` for the pair at `index`, independent of how
/// draws are batched: the stream is keyed by `(seed, index)` alone.
pub fn sample_geometry(seed: u64, index: u64, bounds: &GeometryBounds) -> Geometry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let u: Vec<f64> = (0..bounds.dim()).map(|_| rng.random::<f64>()).collect();
    bounds.from_unit_cube(&u)
}

/// A configured source of ground-truth pairs.
#[derive(Debug)]
pub struct Oracle {
    cfg: OracleConfig,
    pool: Option<Dataset>,
    simulations: AtomicUsize,
}

impl Oracle {
    pub fn new(cfg: OracleConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = match cfg.kind {
            OracleKind::Synthetic => None,
            OracleKind::FileBacked => {
                let path = cfg.path.as_ref().expect("validated");
                Some(Dataset::read_csv(path, cfg.geometry_dim, cfg.spectrum_len)?)
            }
        };
        Ok(Self {
            cfg,
            pool,
            simulations: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    pub fn bounds(&self) -> &GeometryBounds {
        &self.cfg.bounds
    }

    /// Rows available in the backing file, if file-backed.
    pub fn pool_size(&self) -> Option<usize> {
        self.pool.as_ref().map(Dataset::len)
    }

    /// Number of synthetic simulations run so far.
    pub fn simulation_count(&self) -> usize {
        self.simulations.load(Ordering::Relaxed)
    }

    /// Simulates a geometry given in the oracle's design units.
    pub fn simulate(&self, g: &Geometry) -> Result<Spectrum> {
        if self.cfg.kind != OracleKind::Synthetic {
            return Err(Error::Domain(
                "the file-backed oracle cannot simulate arbitrary geometries".into(),
            ));
        }
        check_len("oracle geometry", self.cfg.geometry_dim, g.dim())?;
        if let Some(d) = g.values().iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite geometry value at {d}")));
        }
        let unit = normalize(g, &self.cfg.bounds)?;
        self.simulations.fetch_add(1, Ordering::Relaxed);
        synthetic_spectrum(&unit, self.cfg.spectrum_len)
    }

    /// Extends `current` to exactly `k_target` pairs, leaving existing pairs
    /// untouched. Only the missing pairs are produced.
    pub fn grow_dataset(&self, current: &Dataset, k_target: usize) -> Result<Dataset> {
        check_len("dataset geometry", self.cfg.geometry_dim, current.geometry_dim())?;
        check_len("dataset spectrum", self.cfg.spectrum_len, current.spectrum_len())?;
        let k_prev = current.len();
        if k_target < k_prev {
            return Err(Error::Contract(format!(
                "dataset cannot shrink from {k_prev} to {k_target}"
            )));
        }
        let mut grown = current.clone();
        match &self.pool {
            Some(pool) => {
                if pool.len() < k_target {
                    return Err(Error::Capacity {
                        requested: k_target,
                        available: pool.len(),
                    });
                }
                for pair in &pool.pairs()[k_prev..k_target] {
                    grown.push(pair.clone())?;
                }
            }
            None => {
                for index in k_prev..k_target {
                    let geometry = sample_geometry(self.cfg.seed, index as u64, &self.cfg.bounds);
                    let spectrum = self.simulate(&geometry)?;
                    grown.push(DataPair { geometry, spectrum })?;
                }
            }
        }
        Ok(grown)
    }

    /// MSE between the simulated response of `g` and `target`.
    pub fn resimulate_error(&self, g: &Geometry, target: &Spectrum) -> Result<f64> {
        check_len("re-simulation target", self.cfg.spectrum_len, target.len())?;
        self.simulate(g)?.mse(target)
    }

    pub fn empty_dataset(&self) -> Dataset {
        Dataset::new(self.cfg.geometry_dim, self.cfg.spectrum_len)
    }
}
