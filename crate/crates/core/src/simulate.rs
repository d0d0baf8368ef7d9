//! Forward sampling of the full generative model.
//!
//! Produces synthetic datasets with known components for recovery
//! studies and as the CLI's synthetic-data source. Proper blocks are
//! drawn through the sparse factor; rank-deficient temporal blocks are
//! drawn in the orthogonal complement of their null space so the
//! generative model is proper, and the seasonal truth is an exactly
//! periodic pattern whose period sums to zero. Every draw is a pure
//! function of the seed.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cholesky::{factor, Ordering};
use crate::error::{Error, Result};
use crate::mesh::{barycentric_projector, Point2D, TriangulatedMesh};
use crate::model::{Dataset, HyperParams, ModelSpec, Period, SpatialMode, Station, TauBasis};
use crate::sparse::SparseSym;
use crate::spde::{assemble_fem, MaternOperator, MaternParams};
use crate::temporal::{ar2_precision, rw1_precision, CycleSpec, TrendSpec};

/// Where synthetic stations sit.
#[derive(Debug, Clone)]
pub enum StationLayout {
    /// Uniform random placement inside the inner mesh region.
    Count(usize),
    /// Explicit coordinates.
    Points(Vec<Point2D>),
}

/// Everything that fixes a synthetic sample path.
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub spec: ModelSpec,
    pub hyper: HyperParams,
    /// Regression coefficients: intercept first when active, then one
    /// per covariate in declaration order.
    pub beta: Vec<f64>,
    pub stations: StationLayout,
    pub t_len: usize,
    pub start: Period,
    pub missing_rate: f64,
    pub seed: u64,
    pub variable: String,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.hyper.validate_for(&self.spec)?;
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::config(format!(
                "missing rate {} outside [0, 1)",
                self.missing_rate
            )));
        }
        if self.t_len == 0 {
            return Err(Error::config("simulation needs at least one period".to_string()));
        }
        let expected = usize::from(self.spec.intercept) + self.spec.covariates.len();
        if self.beta.len() != expected {
            return Err(Error::dimension(format!(
                "{} regression coefficients supplied, {expected} required",
                self.beta.len()
            )));
        }
        match &self.stations {
            StationLayout::Count(0) => {
                Err(Error::config("simulation needs at least one station".to_string()))
            }
            StationLayout::Points(p) if p.is_empty() => {
                Err(Error::config("simulation needs at least one station".to_string()))
            }
            _ => Ok(()),
        }
    }
}

/// True component paths behind a synthetic dataset.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub trend: Option<Vec<f64>>,
    pub seasonal: Option<Vec<f64>>,
    pub cycle: Option<Vec<f64>>,
    /// Vertex values: one field, or one block per period under
    /// independent replicates.
    pub spatial: Option<Vec<f64>>,
    pub beta: Vec<f64>,
    /// Noise-free mean at every station and period, station-major.
    pub mean: Vec<f64>,
}

/// A synthetic dataset together with its generating truth.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

/// One draw from `N(0, Q^{-1})` through the sparse factor; rejects
/// rank-deficient precisions. Deterministic given the seed.
pub fn sample_gmrf(precision: &SparseSym, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_gmrf_with(precision, &mut rng)
}

/// Same draw fed from a caller-owned generator.
pub fn sample_gmrf_with<R: Rng + ?Sized>(precision: &SparseSym, rng: &mut R) -> Result<Vec<f64>> {
    let f = factor(precision, Ordering::Rcm)?;
    let z: Vec<f64> = (0..precision.n()).map(|_| rng.sample(StandardNormal)).collect();
    Ok(f.correlate(&z))
}

/// Draw from a rank-deficient prior restricted to the orthogonal
/// complement of its null space: eigendirections below the rank
/// tolerance carry no variance.
fn sample_intrinsic<R: Rng + ?Sized>(precision: &SparseSym, rng: &mut R) -> Vec<f64> {
    let n = precision.n();
    let eig = precision.to_dense().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let tol = lmax * 1e-10;
    let mut x = DVector::zeros(n);
    for l in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        let lam = eig.eigenvalues[l];
        if lam > tol {
            x += eig.eigenvectors.column(l) * (z / lam.sqrt());
        }
    }
    x.iter().copied().collect()
}

/// Exactly periodic seasonal truth: one period of iid draws at the
/// component's scale, centered to sum to zero, tiled over the horizon.
fn sample_seasonal_pattern<R: Rng + ?Sized>(
    m: usize,
    t_len: usize,
    precision: f64,
    rng: &mut R,
) -> Vec<f64> {
    let sd = precision.sqrt().recip();
    let mut pattern: Vec<f64> = (0..m).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let mean = pattern.iter().sum::<f64>() / m as f64;
    for v in &mut pattern {
        *v -= mean;
    }
    (0..t_len).map(|t| pattern[t % m]).collect()
}

fn covariate_value(station: &Station, name: &str) -> Result<f64> {
    match name {
        "latitude" => Ok(station.location.y),
        "longitude" => Ok(station.location.x),
        _ => station.covariates.get(name).copied().ok_or_else(|| {
            Error::data(format!("station {} lacks covariate {name}", station.id))
        }),
    }
}

fn place_stations<R: Rng + ?Sized>(
    layout: &StationLayout,
    mesh: Option<&TriangulatedMesh>,
    rng: &mut R,
) -> Result<Vec<Point2D>> {
    match layout {
        StationLayout::Points(pts) => {
            if let Some(mesh) = mesh {
                for (i, &p) in pts.iter().enumerate() {
                    if !mesh.in_inner_region(p) {
                        return Err(Error::data(format!(
                            "station {i} at ({}, {}) lies outside the inner mesh region",
                            p.x, p.y
                        )));
                    }
                }
            }
            Ok(pts.clone())
        }
        StationLayout::Count(k) => {
            let mesh = mesh.ok_or_else(|| {
                Error::config("random station placement needs a mesh".to_string())
            })?;
            let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
            let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in 0..mesh.n_vertices() {
                let p = mesh.vertex(v);
                xmin = xmin.min(p.x);
                xmax = xmax.max(p.x);
                ymin = ymin.min(p.y);
                ymax = ymax.max(p.y);
            }
            let mut out = Vec::with_capacity(*k);
            let mut attempts = 0usize;
            while out.len() < *k {
                attempts += 1;
                if attempts > 10_000 * k {
                    return Err(Error::numerical(
                        "station placement kept falling outside the inner mesh region"
                            .to_string(),
                    ));
                }
                let p = Point2D::new(
                    xmin + (xmax - xmin) * rng.random::<f64>(),
                    ymin + (ymax - ymin) * rng.random::<f64>(),
                );
                if mesh.in_inner_region(p) {
                    out.push(p);
                }
            }
            Ok(out)
        }
    }
}

/// Samples a complete dataset: stations, synthetic covariates, one draw
/// of every active component, Gaussian noise, and uniform masking at
/// the missing rate. Returns the truth alongside the data.
pub fn simulate_dataset(
    config: &SimulationConfig,
    mesh: Option<&TriangulatedMesh>,
    tau_basis: Option<&TauBasis>,
) -> Result<Simulated> {
    config.validate()?;
    let spec = &config.spec;
    let hyper = &config.hyper;
    let t_len = config.t_len;
    if spec.spatial != SpatialMode::Off && mesh.is_none() {
        return Err(Error::config(
            "spatial simulation needs a mesh".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let points = place_stations(&config.stations, mesh, &mut rng)?;
    let width = points.len().to_string().len().max(3);
    let mut stations: Vec<Station> = points
        .iter()
        .enumerate()
        .map(|(i, &p)| Station {
            id: format!("S{i:0width$}"),
            location: p,
            covariates: Default::default(),
        })
        .collect();
    // synthetic covariates are standard normal station attributes
    for name in &spec.covariates {
        if name == "latitude" || name == "longitude" {
            continue;
        }
        for st in &mut stations {
            let v: f64 = rng.sample(StandardNormal);
            st.covariates.insert(name.clone(), v);
        }
    }

    let mut times = Vec::with_capacity(t_len);
    let mut t = config.start;
    for _ in 0..t_len {
        times.push(t);
        t = t.succ();
    }

    let trend = if spec.trend {
        let q = rw1_precision(&TrendSpec::new(t_len, hyper.log_prec_trend.unwrap().exp())?);
        Some(sample_intrinsic(&q, &mut rng))
    } else {
        None
    };
    let seasonal = spec.seasonal.map(|m| {
        sample_seasonal_pattern(m, t_len, hyper.log_prec_seasonal.unwrap().exp(), &mut rng)
    });
    let cycle = if spec.cycle {
        let (p1, p2) = hyper.pacf().unwrap();
        let q = ar2_precision(&CycleSpec::new(
            t_len,
            p1,
            p2,
            hyper.log_prec_cycle.unwrap().exp(),
        )?)?;
        Some(sample_gmrf_with(&q, &mut rng)?)
    } else {
        None
    };

    let (spatial, projector) = if spec.spatial != SpatialMode::Off {
        let mesh = mesh.unwrap();
        let op = MaternOperator::new(&assemble_fem(mesh)?)?;
        let q_s = if spec.n_tau_basis > 0 {
            let basis = tau_basis.ok_or_else(|| {
                Error::config("nonstationary simulation needs a tau basis".to_string())
            })?;
            if basis.n_vertices() != mesh.n_vertices() || basis.n_columns() != spec.n_tau_basis {
                return Err(Error::dimension(format!(
                    "tau basis is {} columns over {} vertices, expected {} over {}",
                    basis.n_columns(),
                    basis.n_vertices(),
                    spec.n_tau_basis,
                    mesh.n_vertices()
                )));
            }
            let field = basis.log_tau_field(hyper.log_tau.unwrap(), &hyper.theta_tau_extra)?;
            op.precision_with_tau_field(hyper.log_kappa.unwrap(), &field)?
        } else {
            let params = MaternParams::new(hyper.log_tau.unwrap(), hyper.log_kappa.unwrap())?;
            op.precision(&params)?
        };
        let reps = match spec.spatial {
            SpatialMode::Constant => 1,
            SpatialMode::IidReplicates => t_len,
            SpatialMode::Off => unreachable!(),
        };
        let mut field = Vec::with_capacity(reps * mesh.n_vertices());
        for _ in 0..reps {
            field.extend(sample_gmrf_with(&q_s, &mut rng)?);
        }
        let proj = barycentric_projector(mesh, &points)?;
        (Some(field), Some(proj))
    } else {
        (None, None)
    };

    let mut effects: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut beta_iter = config.beta.iter();
    if spec.intercept {
        effects.push((*beta_iter.next().unwrap(), vec![1.0; stations.len()]));
    }
    for name in &spec.covariates {
        let col: Result<Vec<f64>> =
            stations.iter().map(|st| covariate_value(st, name)).collect();
        effects.push((*beta_iter.next().unwrap(), col?));
    }

    let nv = mesh.map_or(0, |m| m.n_vertices());
    let noise_sd = (-0.5 * hyper.log_prec_gauss).exp();
    let mut mean = vec![0.0; stations.len() * t_len];
    let mut values: Vec<Option<f64>> = Vec::with_capacity(stations.len() * t_len);
    for s in 0..stations.len() {
        for (ti, _) in times.iter().enumerate() {
            let mut eta = 0.0;
            if let Some(tr) = &trend {
                eta += tr[ti];
            }
            if let Some(se) = &seasonal {
                eta += se[ti];
            }
            if let Some(cy) = &cycle {
                eta += cy[ti];
            }
            if let (Some(field), Some(proj)) = (&spatial, &projector) {
                let block = match spec.spatial {
                    SpatialMode::Constant => &field[..],
                    SpatialMode::IidReplicates => &field[ti * nv..(ti + 1) * nv],
                    SpatialMode::Off => unreachable!(),
                };
                for &(v, w) in proj.row(s) {
                    eta += w * block[v];
                }
            }
            for (b, col) in &effects {
                eta += b * col[s];
            }
            mean[s * t_len + ti] = eta;
            let z: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            values.push(if u < config.missing_rate {
                None
            } else {
                Some(eta + noise_sd * z)
            });
        }
    }

    let dataset = Dataset::new(stations, times, values, &config.variable)?;
    Ok(Simulated {
        dataset,
        truth: GroundTruth {
            trend,
            seasonal,
            cycle,
            spatial,
            beta: config.beta.clone(),
            mean,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::triangulate;
    use crate::sparse::SymTriplets;
    use crate::special::normal_cdf;

    fn identity_precision(n: usize) -> SparseSym {
        let mut t = SymTriplets::new(n);
        for i in 0..n {
            t.add(i, i, 1.0);
        }
        t.build().unwrap()
    }

    fn ks_p_value(draws: &mut [f64]) -> f64 {
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        let mut d = 0.0f64;
        for (i, &x) in draws.iter().enumerate() {
            let f = normal_cdf(x);
            d = d.max((f - i as f64 / n).abs());
            d = d.max(((i as f64 + 1.0) / n - f).abs());
        }
        let sn = n.sqrt();
        let lambda = (sn + 0.12 + 0.11 / sn) * d;
        let mut p = 0.0;
        for k in 1..=100 {
            let sign = if k % 2 == 1 { 2.0 } else { -2.0 };
            p += sign * (-2.0 * (k as f64 * lambda) * (k as f64 * lambda)).exp();
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn identity_precision_draw_is_standard_normal() {
        let q = identity_precision(10_000);
        let mut x = sample_gmrf(&q, 1).unwrap();
        let p = ks_p_value(&mut x);
        assert!(p > 0.01, "Kolmogorov-Smirnov p-value {p}");
    }

    #[test]
    fn diagonal_precision_scales_each_component() {
        let pattern = [0.25, 1.0, 4.0];
        let n = 12_000;
        let mut t = SymTriplets::new(n);
        for i in 0..n {
            t.add(i, i, pattern[i % 3]);
        }
        let q = t.build().unwrap();
        let x = sample_gmrf(&q, 7).unwrap();
        for (k, &d) in pattern.iter().enumerate() {
            let group: Vec<f64> = x.iter().skip(k).step_by(3).copied().collect();
            let m = group.iter().sum::<f64>() / group.len() as f64;
            let var = group.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                / (group.len() - 1) as f64;
            let expect = d.sqrt().recip();
            assert!(
                (var.sqrt() - expect).abs() < 0.03 * expect,
                "component sd {} vs {expect}",
                var.sqrt()
            );
        }
    }

    #[test]
    fn same_seed_reproduces_draw() {
        let q = identity_precision(50);
        let a = sample_gmrf(&q, 99).unwrap();
        let b = sample_gmrf(&q, 99).unwrap();
        assert_eq!(a, b);
        let c = sample_gmrf(&q, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn correlated_draws_match_inverse_covariance() {
        // ring precision with a nontrivial fill-reducing permutation
        let mut t = SymTriplets::new(4);
        for i in 0..4 {
            t.add(i, i, 2.0);
        }
        for (i, j) in [(0, 1), (1, 2), (2, 3), (0, 3)] {
            t.add_sym(i, j, -0.9);
        }
        let q = t.build().unwrap();
        let cov = q.to_dense().try_inverse().unwrap();
        let f = factor(&q, Ordering::Rcm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n_draws = 20_000;
        let mut acc = nalgebra::DMatrix::<f64>::zeros(4, 4);
        for _ in 0..n_draws {
            let z: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let x = f.correlate(&z);
            for i in 0..4 {
                for j in 0..4 {
                    acc[(i, j)] += x[i] * x[j];
                }
            }
        }
        acc /= n_draws as f64;
        for i in 0..4 {
            for j in 0..4 {
                assert!(
                    (acc[(i, j)] - cov[(i, j)]).abs() < 0.06,
                    "covariance ({i},{j}): {} vs {}",
                    acc[(i, j)],
                    cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn rank_deficient_precision_is_rejected() {
        let q = rw1_precision(&TrendSpec::new(6, 1.0).unwrap());
        assert!(sample_gmrf(&q, 3).is_err());
    }

    fn unit_square_mesh() -> TriangulatedMesh {
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                pts.push(Point2D::new(
                    -0.5 + 0.625 * i as f64,
                    -0.5 + 0.625 * j as f64,
                ));
            }
        }
        triangulate(&pts).unwrap()
    }

    fn base_config() -> SimulationConfig {
        SimulationConfig {
            spec: ModelSpec::default(),
            hyper: HyperParams {
                log_prec_gauss: 2.0,
                log_prec_trend: Some(3.0),
                log_prec_seasonal: Some(3.0),
                log_prec_cycle: Some(2.0),
                z_pacf1: Some(0.4),
                z_pacf2: Some(-0.2),
                log_tau: Some(0.0),
                log_kappa: Some(1.0),
                theta_tau_extra: vec![],
            },
            beta: vec![],
            stations: StationLayout::Count(10),
            t_len: 40,
            start: Period::new(2000, 1).unwrap(),
            missing_rate: 0.0,
            seed: 42,
            variable: "temperature".to_string(),
        }
    }

    #[test]
    fn noiseless_limit_equals_covariate_effects() {
        let mesh = unit_square_mesh();
        let tight = (1e8f64).ln();
        let config = SimulationConfig {
            spec: ModelSpec {
                trend: false,
                intercept: true,
                seasonal: Some(4),
                cycle: true,
                spatial: SpatialMode::Off,
                covariates: vec!["altitude".to_string()],
                n_tau_basis: 0,
            },
            hyper: HyperParams {
                log_prec_gauss: tight,
                log_prec_trend: None,
                log_prec_seasonal: Some(tight),
                log_prec_cycle: Some(tight),
                z_pacf1: Some(0.3),
                z_pacf2: Some(-0.2),
                log_tau: None,
                log_kappa: None,
                theta_tau_extra: vec![],
            },
            beta: vec![1.2, 0.8],
            stations: StationLayout::Count(5),
            missing_rate: 0.0,
            ..base_config()
        };
        let sim = simulate_dataset(&config, Some(&mesh), None).unwrap();
        let ds = &sim.dataset;
        for s in 0..ds.n_stations() {
            let alt = ds.covariate(s, "altitude").unwrap();
            let expect = 1.2 + 0.8 * alt;
            for t in 0..ds.n_times() {
                let y = ds.value(s, t).unwrap();
                assert!(
                    (y - expect).abs() < 1e-3,
                    "station {s} period {t}: {y} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn masking_respects_binomial_count() {
        let mesh = unit_square_mesh();
        let config = SimulationConfig {
            stations: StationLayout::Count(50),
            missing_rate: 0.3,
            spec: ModelSpec {
                spatial: SpatialMode::Off,
                ..ModelSpec::default()
            },
            hyper: HyperParams {
                log_tau: None,
                log_kappa: None,
                ..base_config().hyper
            },
            ..base_config()
        };
        let sim = simulate_dataset(&config, Some(&mesh), None).unwrap();
        let total: f64 = 50.0 * 40.0;
        let expect = 0.7 * total;
        let sigma = (total * 0.3 * 0.7).sqrt();
        let got = sim.dataset.n_observed() as f64;
        assert!(
            (got - expect).abs() < 3.0 * sigma,
            "observed {got}, expected {expect} within {}",
            3.0 * sigma
        );
    }

    #[test]
    fn seasonal_truth_sums_to_zero_over_windows() {
        let mesh = unit_square_mesh();
        let config = SimulationConfig {
            t_len: 41,
            ..base_config()
        };
        let sim = simulate_dataset(&config, Some(&mesh), None).unwrap();
        let seasonal = sim.truth.seasonal.unwrap();
        assert_eq!(seasonal.len(), 41);
        for t in 0..seasonal.len() - 3 {
            let window: f64 = seasonal[t..t + 4].iter().sum();
            assert!(window.abs() < 1e-10, "window at {t} sums to {window}");
        }
        assert!(seasonal.iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn trend_truth_is_centered() {
        let mesh = unit_square_mesh();
        let sim = simulate_dataset(&base_config(), Some(&mesh), None).unwrap();
        let trend = sim.truth.trend.unwrap();
        let total: f64 = trend.iter().sum();
        assert!(total.abs() < 1e-8, "trend level {total}");
        assert!(trend.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn replicated_spatial_field_has_block_per_period() {
        let mesh = unit_square_mesh();
        let config = SimulationConfig {
            spec: ModelSpec {
                spatial: SpatialMode::IidReplicates,
                ..ModelSpec::default()
            },
            t_len: 3,
            ..base_config()
        };
        let sim = simulate_dataset(&config, Some(&mesh), None).unwrap();
        let field = sim.truth.spatial.unwrap();
        assert_eq!(field.len(), 3 * mesh.n_vertices());
        let a = &field[..mesh.n_vertices()];
        let b = &field[mesh.n_vertices()..2 * mesh.n_vertices()];
        assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn same_config_reproduces_dataset() {
        let mesh = unit_square_mesh();
        let a = simulate_dataset(&base_config(), Some(&mesh), None).unwrap();
        let b = simulate_dataset(&base_config(), Some(&mesh), None).unwrap();
        assert_eq!(a.dataset.values(), b.dataset.values());
        assert_eq!(a.truth.mean, b.truth.mean);
        let other = SimulationConfig {
            seed: 43,
            ..base_config()
        };
        let c = simulate_dataset(&other, Some(&mesh), None).unwrap();
        assert_ne!(a.dataset.values(), c.dataset.values());
    }

    #[test]
    fn random_stations_live_inside_the_domain() {
        let mesh = unit_square_mesh();
        let sim = simulate_dataset(&base_config(), Some(&mesh), None).unwrap();
        let ds = &sim.dataset;
        assert_eq!(ds.n_stations(), 10);
        for s in 0..ds.n_stations() {
            assert!(mesh.in_inner_region(ds.station(s).location));
        }
        // mean surface matches observations up to the drawn noise scale
        let resid_max = (0..ds.n_stations())
            .flat_map(|s| (0..ds.n_times()).map(move |t| (s, t)))
            .filter_map(|(s, t)| {
                ds.value(s, t)
                    .map(|y| (y - sim.truth.mean[s * ds.n_times() + t]).abs())
            })
            .fold(0.0f64, f64::max);
        assert!(resid_max < 6.0 * (-1.0f64).exp(), "residual {resid_max}");
    }

    #[test]
    fn config_validation_rejects_bad_input() {
        let ok = base_config();
        assert!(ok.validate().is_ok());
        let bad_rate = SimulationConfig {
            missing_rate: 1.0,
            ..base_config()
        };
        assert!(bad_rate.validate().is_err());
        let bad_beta = SimulationConfig {
            beta: vec![1.0],
            ..base_config()
        };
        assert!(bad_beta.validate().is_err());
        let no_stations = SimulationConfig {
            stations: StationLayout::Count(0),
            ..base_config()
        };
        assert!(no_stations.validate().is_err());
        // spatial models cannot be simulated without a mesh
        assert!(simulate_dataset(&base_config(), None, None).is_err());
    }
}
