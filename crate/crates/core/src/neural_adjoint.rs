//! Inverse design by gradient descent on the inputs of a frozen surrogate.

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::domain::{Geometry, GeometryBounds, Spectrum};
use crate::error::{check_len, Error, Result};
use crate::optim::Adam;
use crate::oracle::{sample_geometry, Oracle};
use crate::surrogate::ModelBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NAConfig {
    pub n_candidates: usize,
    pub n_steps: usize,
    pub step_size: f64,
    pub boundary_weight: f64,
    pub seed: u64,
}

impl Default for NAConfig {
    fn default() -> Self {
        Self {
            n_candidates: 128,
            n_steps: 300,
            step_size: 0.01,
            boundary_weight: 0.1,
            seed: 0,
        }
    }
}

impl NAConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_candidates == 0 {
            bad.push("n_candidates must be positive".to_string());
        }
        if !(self.step_size > 0.0) {
            bad.push(format!("step_size must be positive, got {}", self.step_size));
        }
        if !(self.boundary_weight >= 0.0) {
            bad.push(format!(
                "boundary_weight must be non-negative, got {}",
                self.boundary_weight
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(bad))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignResult {
    pub geometry: Geometry,
    pub surrogate_loss: f64,
    pub resim_error: Option<f64>,
    pub rank: usize,
}

/// Hinge penalty on the distance outside the box, with its subgradient.
/// Points on the boundary are inside.
pub fn boundary_loss(g: &[f64], bounds: &GeometryBounds) -> Result<(f64, Vec<f64>)> {
    check_len("boundary loss geometry", bounds.dim(), g.len())?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; g.len()];
    for (d, &v) in g.iter().enumerate() {
        let (lo, hi) = (bounds.lower()[d], bounds.upper()[d]);
        let offset = v - 0.5 * (lo + hi);
        let excess = offset.abs() - 0.5 * (hi - lo);
        if excess > 0.0 {
            loss += excess;
            grad[d] = offset.signum();
        }
    }
    Ok((loss, grad))
}

/// Everything an inverse-design run produced, including diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct NaRun {
    pub results: Vec<DesignResult>,
    /// Mean surrogate-plus-boundary loss over live candidates, per step.
    /// Entry 0 is the initial population, the last entry the final one
    /// (before projection).
    pub loss_trace: Vec<f64>,
    /// Candidate indices dropped for non-finite gradients.
    pub dropped: Vec<usize>,
}

const GRADIENT_CHUNK: usize = 512;

/// Loss and gradient rows for the candidates in `rows` of `g`.
fn objective(
    bundle: &ModelBundle,
    g: &Array2<f64>,
    rows: &[usize],
    target: &[f64],
    bounds: &GeometryBounds,
    boundary_weight: f64,
) -> Result<(Vec<f64>, Array2<f64>)> {
    let mut losses = Vec::with_capacity(rows.len());
    let mut grads = Array2::zeros((rows.len(), g.ncols()));
    for (c, chunk) in rows.chunks(GRADIENT_CHUNK).enumerate() {
        let sub = g.select(Axis(0), chunk);
        let (l, dg) = bundle.input_gradient_batch(sub.view(), target)?;
        for (i, row) in sub.rows().into_iter().enumerate() {
            let r = c * GRADIENT_CHUNK + i;
            let (bl, bg) = boundary_loss(row.as_slice().expect("standard layout"), bounds)?;
            losses.push(l[i] + boundary_weight * bl);
            for d in 0..g.ncols() {
                grads[[r, d]] = dg[[i, d]] + boundary_weight * bg[d];
            }
        }
    }
    Ok((losses, grads))
}

/// Descends a seeded population of candidates and returns them ranked by
/// surrogate loss after projection into the bounds. `plant` optionally
/// replaces the first candidates with given starting geometries.
pub fn run_inverse_design(
    target: &Spectrum,
    bundle: &ModelBundle,
    bounds: &GeometryBounds,
    cfg: &NAConfig,
    plant: &[Geometry],
) -> Result<NaRun> {
    cfg.validate()?;
    check_len("target spectrum", bundle.output_dim(), target.len())?;
    check_len("geometry bounds", bundle.input_dim(), bounds.dim())?;
    let (n, dim) = (cfg.n_candidates, bounds.dim());

    let mut g = Array2::zeros((n, dim));
    for (i, mut row) in g.rows_mut().into_iter().enumerate() {
        let start = match plant.get(i) {
            Some(p) => {
                check_len("planted geometry", dim, p.dim())?;
                p.clone()
            }
            None => sample_geometry(cfg.seed, i as u64, bounds),
        };
        row.assign(&ndarray::ArrayView1::from(start.values()));
    }

    let mut live: Vec<usize> = (0..n).collect();
    let mut dropped = Vec::new();
    let mut adam = Adam::new(n * dim, cfg.step_size);
    let mut flat_grad = vec![0.0; n * dim];
    let mut loss_trace = Vec::with_capacity(cfg.n_steps + 1);

    for step in 0..=cfg.n_steps {
        let (losses, grads) = objective(bundle, &g, &live, target.values(), bounds, cfg.boundary_weight)?;
        let mut keep = Vec::with_capacity(live.len());
        let mut total = 0.0;
        flat_grad.iter_mut().for_each(|v| *v = 0.0);
        for (r, &cand) in live.iter().enumerate() {
            let row = grads.row(r);
            if !losses[r].is_finite() || row.iter().any(|v| !v.is_finite()) {
                log::warn!("inverse design: candidate {cand} dropped at step {step} (non-finite gradient)");
                dropped.push(cand);
                continue;
            }
            total += losses[r];
            flat_grad[cand * dim..(cand + 1) * dim]
                .iter_mut()
                .zip(row)
                .for_each(|(o, v)| *o = *v);
            keep.push(cand);
        }
        live = keep;
        if live.is_empty() {
            return Err(Error::OptimizationCollapse(n));
        }
        loss_trace.push(total / live.len() as f64);
        if step == cfg.n_steps {
            break;
        }
        let buf = g.as_slice_mut().expect("standard layout");
        let saved: Vec<f64> = dropped.iter().flat_map(|&c| buf[c * dim..(c + 1) * dim].to_vec()).collect();
        adam.step(buf, &flat_grad);
        // Dropped rows keep their last position; momentum must not move them.
        for (j, &c) in dropped.iter().enumerate() {
            buf[c * dim..(c + 1) * dim].copy_from_slice(&saved[j * dim..(j + 1) * dim]);
        }
    }

    let mut final_g = g.select(Axis(0), &live);
    for mut row in final_g.rows_mut() {
        bounds.clamp_in_place(row.as_slice_mut().expect("standard layout"));
    }
    let mut results = Vec::with_capacity(live.len());
    for start in (0..live.len()).step_by(GRADIENT_CHUNK) {
        let end = (start + GRADIENT_CHUNK).min(live.len());
        let sub = final_g.slice(ndarray::s![start..end, ..]);
        let pred = bundle.predict_batch(sub)?;
        for (row, p) in sub.rows().into_iter().zip(pred.rows()) {
            let loss = p
                .iter()
                .zip(target.values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / target.len() as f64;
            results.push(DesignResult {
                geometry: Geometry::new(row.to_vec()),
                surrogate_loss: loss,
                resim_error: None,
                rank: 0,
            });
        }
    }
    results.sort_by(|a, b| a.surrogate_loss.total_cmp(&b.surrogate_loss));
    for (rank, r) in results.iter_mut().enumerate() {
        r.rank = rank;
    }
    dropped.sort_unstable();
    Ok(NaRun {
        results,
        loss_trace,
        dropped,
    })
}

/// Ranked candidates for `target`; the bundle is only read.
pub fn inverse_design(
    target: &Spectrum,
    bundle: &ModelBundle,
    bounds: &GeometryBounds,
    cfg: &NAConfig,
) -> Result<Vec<DesignResult>> {
    Ok(run_inverse_design(target, bundle, bounds, cfg, &[])?.results)
}

/// Order statistics of a set of errors. Percentiles interpolate linearly
/// between order statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub count: usize,
    pub best: f64,
    pub median: f64,
    pub p95: f64,
    pub mean: f64,
}

pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl ErrorSummary {
    pub fn of(errors: &[f64]) -> Option<Self> {
        if errors.is_empty() {
            return None;
        }
        let mut v = errors.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            count: v.len(),
            best: v[0],
            median: percentile(&v, 0.5),
            p95: percentile(&v, 0.95),
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub results: Vec<DesignResult>,
    pub top_m: usize,
    /// Re-simulation statistics over the top candidates; `None` when degraded.
    pub resim: Option<ErrorSummary>,
    pub best_surrogate_loss: Option<f64>,
    pub degraded: bool,
    pub error: Option<String>,
}

/// Re-simulates the `top_m` best candidates. If the oracle fails the report
/// keeps the surrogate scores and is flagged degraded.
pub fn design_report(
    mut results: Vec<DesignResult>,
    target: &Spectrum,
    oracle: &Oracle,
    top_m: usize,
) -> DesignReport {
    let top = top_m.min(results.len());
    let mut errors = Vec::with_capacity(top);
    let mut failure = None;
    for r in results.iter_mut().take(top) {
        match oracle.resimulate_error(&r.geometry, target) {
            Ok(e) => {
                r.resim_error = Some(e);
                errors.push(e);
            }
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }
    if failure.is_some() {
        for r in &mut results {
            r.resim_error = None;
        }
        errors.clear();
    }
    DesignReport {
        best_surrogate_loss: results.first().map(|r| r.surrogate_loss),
        results,
        top_m,
        resim: ErrorSummary::of(&errors),
        degraded: failure.is_some(),
        error: failure,
    }
}

/// One row per candidate: rank, geometry columns, surrogate loss and the
/// re-simulation error (empty when not computed).
pub fn write_designs_csv(path: &Path, results: &[DesignResult]) -> Result<()> {
    let dim = results.first().map_or(0, |r| r.geometry.dim());
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec!["rank".to_string()];
        header.extend((0..dim).map(|d| format!("g{d}")));
        header.extend(["surrogate_loss".into(), "resim_error".into()]);
        w.write_record(&header).map_err(|e| Error::parse(path, e.to_string()))?;
        for r in results {
            let mut row = vec![r.rank.to_string()];
            row.extend(r.geometry.values().iter().map(|v| format!("{v:?}")));
            row.push(format!("{:?}", r.surrogate_loss));
            row.push(r.resim_error.map(|e| format!("{e:?}")).unwrap_or_default());
            w.write_record(&row).map_err(|e| Error::parse(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    crate::fsutil::write_atomic(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::OracleConfig;
    use crate::surrogate::{build_model, Family, ModelSpec};
    use proptest::prelude::*;

    fn unit(dim: usize) -> GeometryBounds {
        GeometryBounds::symmetric_unit(dim)
    }

    #[test]
    fn boundary_inside_is_zero() {
        let (l, g) = boundary_loss(&[0.2, -0.9, 0.0], &unit(3)).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, [0.0; 3]);
    }

    #[test]
    fn boundary_hinge_arithmetic() {
        let b = GeometryBounds::new(vec![0.0, -2.0], vec![1.0, 2.0]).unwrap();
        let (l, g) = boundary_loss(&[1.3, 0.5], &b).unwrap();
        assert!((l - 0.3).abs() < 1e-12);
        assert_eq!(g, [1.0, 0.0]);
        let (l, g) = boundary_loss(&[0.5, -2.5], &b).unwrap();
        assert!((l - 0.5).abs() < 1e-12);
        assert_eq!(g, [0.0, -1.0]);
    }

    #[test]
    fn boundary_is_inclusive() {
        let (l, g) = boundary_loss(&[1.0, -1.0], &unit(2)).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, [0.0, 0.0]);
        assert!(boundary_loss(&[0.0], &unit(2)).is_err());
    }

    fn small_bundle() -> ModelBundle {
        let mut b = build_model(&ModelSpec::new(Family::ResidualMlp, 3, 6, 16, 2).with_seed(4)).unwrap();
        b.metric = Some(0.0);
        b
    }

    #[test]
    fn zero_steps_scores_initial_population() {
        let b = small_bundle();
        let cfg = NAConfig {
            n_candidates: 9,
            n_steps: 0,
            seed: 3,
            ..NAConfig::default()
        };
        let target = Spectrum::new(vec![0.1; 6]);
        let res = inverse_design(&target, &b, &unit(3), &cfg).unwrap();
        assert_eq!(res.len(), 9);
        let mut initial: Vec<Vec<f64>> = (0..9)
            .map(|i| sample_geometry(3, i, &unit(3)).into_inner())
            .collect();
        let mut got: Vec<Vec<f64>> = res.iter().map(|r| r.geometry.values().to_vec()).collect();
        initial.sort_by(|a, b| a.partial_cmp(b).unwrap());
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, initial);
        for r in &res {
            let direct = b.predict(&r.geometry).unwrap().mse(&target).unwrap();
            assert!((direct - r.surrogate_loss).abs() < 1e-15);
        }
    }

    #[test]
    fn planted_optimum_stays_optimal() {
        let b = small_bundle();
        let g0 = Geometry::new(vec![0.3, -0.2, 0.7]);
        let target = b.predict(&g0).unwrap();
        let cfg = NAConfig {
            n_candidates: 16,
            n_steps: 50,
            ..NAConfig::default()
        };
        let run = run_inverse_design(&target, &b, &unit(3), &cfg, &[g0]).unwrap();
        assert!(run.results[0].surrogate_loss <= 1e-9, "{}", run.results[0].surrogate_loss);
    }

    #[test]
    fn weights_are_untouched_and_runs_repeat() {
        let b = small_bundle();
        let before = b.weights().to_vec();
        let target = Spectrum::new(vec![0.3, 0.1, -0.2, 0.0, 0.5, 0.2]);
        let cfg = NAConfig {
            n_candidates: 12,
            n_steps: 40,
            seed: 9,
            ..NAConfig::default()
        };
        let a = run_inverse_design(&target, &b, &unit(3), &cfg, &[]).unwrap();
        let c = run_inverse_design(&target, &b, &unit(3), &cfg, &[]).unwrap();
        assert_eq!(a, c);
        let bits = |w: &[f64]| w.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(b.weights()), bits(&before));
        assert!(a.loss_trace.last().unwrap() <= &a.loss_trace[0]);
    }

    #[test]
    fn non_finite_candidates_collapse() {
        let b = small_bundle();
        let poisoned = b.with_weights(vec![f64::NAN; b.weights().len()]).unwrap();
        let cfg = NAConfig {
            n_candidates: 4,
            n_steps: 2,
            ..NAConfig::default()
        };
        let target = Spectrum::new(vec![0.0; 6]);
        assert!(matches!(
            inverse_design(&target, &poisoned, &unit(3), &cfg),
            Err(Error::OptimizationCollapse(4))
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let b = small_bundle();
        let cfg = NAConfig::default();
        assert!(inverse_design(&Spectrum::new(vec![0.0; 5]), &b, &unit(3), &cfg).is_err());
        assert!(inverse_design(&Spectrum::new(vec![0.0; 6]), &b, &unit(4), &cfg).is_err());
    }

    #[test]
    fn report_counts_simulations() {
        let oracle = Oracle::new(OracleConfig::synthetic(1)).unwrap();
        let mk = |loss: f64, rank: usize| DesignResult {
            geometry: Geometry::new(vec![0.0; 14]),
            surrogate_loss: loss,
            resim_error: None,
            rank,
        };
        let target = oracle.simulate(&Geometry::new(vec![0.0; 14])).unwrap();
        let before = oracle.simulation_count();
        let rep = design_report(vec![mk(0.1, 0), mk(0.2, 1)], &target, &oracle, 1);
        assert_eq!(oracle.simulation_count() - before, 1);
        assert_eq!(rep.results[0].resim_error, Some(0.0));
        assert_eq!(rep.results[1].resim_error, None);
        assert!(!rep.degraded);
        assert_eq!(rep.resim.unwrap().count, 1);
    }

    #[test]
    fn report_degrades_when_oracle_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.csv");
        std::fs::write(&path, "0,0,0\n").unwrap();
        let oracle = Oracle::new(OracleConfig::file_backed(&path, 1, 2)).unwrap();
        let res = vec![DesignResult {
            geometry: Geometry::new(vec![0.0]),
            surrogate_loss: 0.5,
            resim_error: None,
            rank: 0,
        }];
        let rep = design_report(res, &Spectrum::new(vec![0.0, 0.0]), &oracle, 1);
        assert!(rep.degraded);
        assert!(rep.resim.is_none());
        assert_eq!(rep.best_surrogate_loss, Some(0.5));
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((percentile(&v, 0.5) - 50.5).abs() < 1e-12);
        assert!((percentile(&v, 0.95) - 95.05).abs() < 1e-12);
        let s = ErrorSummary::of(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((s.best, s.median, s.mean), (1.0, 2.0, 2.0));
    }

    #[test]
    fn designs_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("designs.csv");
        let res = vec![
            DesignResult {
                geometry: Geometry::new(vec![0.5, -0.25]),
                surrogate_loss: 0.001,
                resim_error: Some(0.002),
                rank: 0,
            },
            DesignResult {
                geometry: Geometry::new(vec![0.0, 1.0]),
                surrogate_loss: 0.01,
                resim_error: None,
                rank: 1,
            },
        ];
        write_designs_csv(&p, &res).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "rank,g0,g1,surrogate_loss,resim_error");
        assert_eq!(lines[1], "0,0.5,-0.25,0.001,0.002");
        assert_eq!(lines[2], "1,0.0,1.0,0.01,");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn results_feasible_and_sorted(
            target in prop::collection::vec(-50.0f64..50.0, 6),
            seed in 0u64..1000,
        ) {
            let b = small_bundle();
            let bounds = GeometryBounds::new(vec![-0.5, 0.0, -2.0], vec![0.5, 0.1, 2.0]).unwrap();
            let cfg = NAConfig { n_candidates: 6, n_steps: 30, step_size: 0.2, seed, ..NAConfig::default() };
            let res = inverse_design(&Spectrum::new(target), &b, &bounds, &cfg).unwrap();
            for (i, r) in res.iter().enumerate() {
                prop_assert_eq!(r.rank, i);
                prop_assert!(crate::domain::validate_geometry(&r.geometry, &bounds).unwrap().is_feasible());
            }
            for w in res.windows(2) {
                prop_assert!(w[0].surrogate_loss <= w[1].surrogate_loss);
            }
        }
    }
}
