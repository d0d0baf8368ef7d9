//! Fitted surfaces on dense grids, step-ahead forecasts, and forecast
//! accuracy metrics.
//!
//! Surfaces add the temporal components at the requested period, the
//! regression effects from per-cell rasters, and the projected spatial
//! posterior mean; cells outside the inner mesh region carry no data.
//! Forecasts continue each temporal block with its own recursion under
//! plug-in posterior-mean hyperparameters, with innovation variance
//! accumulated through the moving-average weights of the recursion.
//! Reported standard deviations combine the marginal variances of the
//! pieces without cross-correlations.

use std::collections::BTreeMap;

use crate::batch;
use crate::error::{Error, Result};
use crate::inference::InlaResult;
use crate::mesh::{barycentric_projector, Point2D, TriangulatedMesh};
use crate::model::{Dataset, SpatialMode};
use crate::temporal::ar2_from_pacf;

/// A rectangular evaluation grid with per-cell covariate rasters.
///
/// Cells are vertex-registered: column `j` sits at
/// `xmin + j*(xmax-xmin)/(nx-1)` and row 0 lies on `ymax` (rows run top
/// to bottom). Rasters are row-major in the same ordering.
#[derive(Debug, Clone)]
pub struct GridRequest {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub nx: usize,
    pub ny: usize,
    /// Zero-based index of the sample period to evaluate.
    pub time_index: usize,
    pub rasters: BTreeMap<String, Vec<f64>>,
}

impl GridRequest {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::config(format!(
                "grid resolution {}x{} below the 2x2 minimum",
                self.nx, self.ny
            )));
        }
        let bounds = [self.xmin, self.xmax, self.ymin, self.ymax];
        if bounds.iter().any(|v| !v.is_finite()) || self.xmax <= self.xmin || self.ymax <= self.ymin
        {
            return Err(Error::config(format!(
                "degenerate grid bounds [{}, {}] x [{}, {}]",
                self.xmin, self.xmax, self.ymin, self.ymax
            )));
        }
        for (name, r) in &self.rasters {
            if r.len() != self.nx * self.ny {
                return Err(Error::dimension(format!(
                    "raster {name} holds {} cells for a {}x{} grid",
                    r.len(),
                    self.nx,
                    self.ny
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("raster {name} contains non-finite values")));
            }
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point2D {
        let x = self.xmin + (self.xmax - self.xmin) * col as f64 / (self.nx - 1) as f64;
        let y = self.ymax - (self.ymax - self.ymin) * row as f64 / (self.ny - 1) as f64;
        Point2D::new(x, y)
    }
}

/// Posterior surface on a grid; `None` marks cells outside the inner
/// mesh region.
#[derive(Debug, Clone)]
pub struct GridSurface {
    pub nx: usize,
    pub ny: usize,
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub mean: Vec<Option<f64>>,
    pub sd: Vec<Option<f64>>,
}

impl GridSurface {
    fn render(&self, values: &[Option<f64>]) -> String {
        let mut s = format!(
            "ncols {} nrows {} xmin {} xmax {} ymin {} ymax {}\n",
            self.nx, self.ny, self.xmin, self.xmax, self.ymin, self.ymax
        );
        for row in 0..self.ny {
            let mut line = String::new();
            for col in 0..self.nx {
                if col > 0 {
                    line.push(' ');
                }
                match values[row * self.nx + col] {
                    Some(v) => line.push_str(&format!("{v:.6}")),
                    None => line.push_str("NA"),
                }
            }
            s.push_str(&line);
            s.push('\n');
        }
        s
    }

    /// Text rendering of the means: one header line, then row-major
    /// values with `NA` for no-data cells.
    pub fn mean_text(&self) -> String {
        self.render(&self.mean)
    }

    pub fn sd_text(&self) -> String {
        self.render(&self.sd)
    }
}

fn hyper_user_mean(result: &InlaResult, name: &str) -> Result<f64> {
    result
        .hyper
        .iter()
        .find(|h| h.name == name)
        .map(|h| h.user.mean)
        .ok_or_else(|| Error::config(format!("hyperparameter {name} not present in the fit")))
}

fn hyper_internal_mean(result: &InlaResult, name: &str) -> Result<f64> {
    result
        .hyper
        .iter()
        .find(|h| h.name == name)
        .map(|h| h.internal.mean)
        .ok_or_else(|| Error::config(format!("hyperparameter {name} not present in the fit")))
}

/// Posterior mean and sd surface for one in-sample period.
pub fn fitted_surface(
    result: &InlaResult,
    mesh: &TriangulatedMesh,
    request: &GridRequest,
) -> Result<GridSurface> {
    request.validate()?;
    let layout = &result.layout;
    if result.latent.len() != layout.n {
        return Err(Error::dimension(format!(
            "{} latent summaries for a field of {}",
            result.latent.len(),
            layout.n
        )));
    }
    let t = request.time_index;
    if t >= layout.t_len {
        return Err(Error::config(format!(
            "period index {t} outside the sample of length {}",
            layout.t_len
        )));
    }
    let mut base_mean = 0.0;
    let mut base_var = 0.0;
    for range in [&layout.trend, &layout.seasonal, &layout.cycle].into_iter().flatten() {
        let s = &result.latent[range.start + t];
        base_mean += s.mean;
        base_var += s.sd * s.sd;
    }
    // regression columns: intercept folds into the base, covariates
    // need a raster each
    let mut raster_effects: Vec<(f64, f64, &[f64])> = Vec::new();
    for (j, name) in layout.beta_names.iter().enumerate() {
        let s = &result.latent[layout.betas.start + j];
        if name == "(Intercept)" {
            base_mean += s.mean;
            base_var += s.sd * s.sd;
        } else {
            let raster = request.rasters.get(name).ok_or_else(|| {
                Error::config(format!("missing raster for covariate {name}"))
            })?;
            raster_effects.push((s.mean, s.sd, raster.as_slice()));
        }
    }
    let spatial = layout.spatial_slice(t).map(|r| {
        let means: Vec<f64> = result.latent[r.clone()].iter().map(|s| s.mean).collect();
        let sds: Vec<f64> = result.latent[r].iter().map(|s| s.sd).collect();
        (means, sds)
    });

    let cells: Vec<(Option<f64>, Option<f64>)> = batch::map_indexed(request.n_cells(), |idx| {
        let row = idx / request.nx;
        let col = idx % request.nx;
        let p = request.cell_center(row, col);
        if !mesh.in_inner_region(p) {
            return (None, None);
        }
        let mut mean = base_mean;
        let mut var = base_var;
        if let Some((sp_mean, sp_sd)) = &spatial {
            match mesh.locate_weights(p) {
                Some(weights) => {
                    for &(v, w) in &weights {
                        mean += w * sp_mean[v];
                        var += (w * sp_sd[v]) * (w * sp_sd[v]);
                    }
                }
                None => return (None, None),
            }
        }
        for (b_mean, b_sd, raster) in &raster_effects {
            let x = raster[idx];
            mean += x * b_mean;
            var += (x * b_sd) * (x * b_sd);
        }
        (Some(mean), Some(var.max(0.0).sqrt()))
    });
    Ok(GridSurface {
        nx: request.nx,
        ny: request.ny,
        xmin: request.xmin,
        xmax: request.xmax,
        ymin: request.ymin,
        ymax: request.ymax,
        mean: cells.iter().map(|c| c.0).collect(),
        sd: cells.iter().map(|c| c.1).collect(),
    })
}

/// Dot product of coefficients with covariate means: the level shift
/// the regression terms contribute at those averages.
pub fn covariate_adjustment(beta: &[f64], covariate_means: &[f64]) -> Result<f64> {
    if beta.len() != covariate_means.len() {
        return Err(Error::dimension(format!(
            "{} coefficients against {} covariate means",
            beta.len(),
            covariate_means.len()
        )));
    }
    Ok(beta.iter().zip(covariate_means).map(|(b, m)| b * m).sum())
}

/// Moving-average weights of the linear recursion
/// `x_t = sum_i coeffs[i] * x_{t-1-i} + e_t`: `psi[0] = 1` and
/// `psi[j] = sum_i coeffs[i] * psi[j-1-i]`.
pub fn psi_weights(coeffs: &[f64], h: usize) -> Vec<f64> {
    let mut psi = Vec::with_capacity(h);
    for j in 0..h {
        if j == 0 {
            psi.push(1.0);
            continue;
        }
        let mut acc = 0.0;
        for (i, &c) in coeffs.iter().enumerate() {
            if j >= i + 1 {
                acc += c * psi[j - 1 - i];
            }
        }
        psi.push(acc);
    }
    psi
}

/// Mean continuation of the same recursion from a history whose most
/// recent state sits last.
fn recurse_mean(coeffs: &[f64], history: &[f64], h: usize) -> Vec<f64> {
    let mut path: Vec<f64> = history.to_vec();
    let mut out = Vec::with_capacity(h);
    for _ in 0..h {
        let mut acc = 0.0;
        for (i, &c) in coeffs.iter().enumerate() {
            acc += c * path[path.len() - 1 - i];
        }
        path.push(acc);
        out.push(acc);
    }
    out
}

/// Forecast path of one temporal block.
#[derive(Debug, Clone)]
pub struct ComponentForecast {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Station-level step-ahead forecasts with per-component paths.
#[derive(Debug, Clone)]
pub struct ForecastResult {
    pub horizon: usize,
    /// Level block: random-walk continuation, or the constant intercept
    /// for constant-mean models.
    pub trend: Option<ComponentForecast>,
    pub seasonal: Option<ComponentForecast>,
    pub cycle: Option<ComponentForecast>,
    pub station_ids: Vec<String>,
    /// Predictive means, station-major (`s * horizon + step`).
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Continues every temporal block `h` steps past the sample and
/// combines them per station with regression effects and the spatial
/// posterior mean. Hyperparameters enter as posterior means; under
/// independent spatial replicates a future field is a fresh draw, so
/// its mean is zero and its variance the stationary marginal variance.
pub fn forecast(
    result: &InlaResult,
    dataset: &Dataset,
    mesh: Option<&TriangulatedMesh>,
    h: usize,
) -> Result<ForecastResult> {
    if h < 1 {
        return Err(Error::config("forecast horizon must be at least 1".to_string()));
    }
    let layout = &result.layout;
    if result.latent.len() != layout.n {
        return Err(Error::dimension(format!(
            "{} latent summaries for a field of {}",
            result.latent.len(),
            layout.n
        )));
    }
    if dataset.n_times() != layout.t_len {
        return Err(Error::dimension(format!(
            "dataset spans {} periods, fit spans {}",
            dataset.n_times(),
            layout.t_len
        )));
    }

    let intercept_in_level = layout.trend.is_none()
        && layout.beta_names.first().map(String::as_str) == Some("(Intercept)");

    let trend = if let Some(r) = &layout.trend {
        let last = &result.latent[r.end - 1];
        let prec = hyper_user_mean(result, "Precision RW")?;
        Some(ComponentForecast {
            mean: vec![last.mean; h],
            variance: (1..=h)
                .map(|k| last.sd * last.sd + k as f64 / prec)
                .collect(),
        })
    } else if intercept_in_level {
        let s = &result.latent[layout.betas.start];
        Some(ComponentForecast {
            mean: vec![s.mean; h],
            variance: vec![s.sd * s.sd; h],
        })
    } else {
        None
    };

    let seasonal = if let Some(r) = &layout.seasonal {
        let m = layout.seasonal_period.expect("seasonal block carries its period");
        let coeffs = vec![-1.0; m - 1];
        let history: Vec<f64> = result.latent[r.end - (m - 1)..r.end]
            .iter()
            .map(|s| s.mean)
            .collect();
        let prec = hyper_user_mean(result, "Precision Seasonal")?;
        let psi = psi_weights(&coeffs, h);
        let base = result.latent[r.end - 1].sd.powi(2);
        let mut acc = 0.0;
        let variance: Vec<f64> = psi
            .iter()
            .map(|p| {
                acc += p * p / prec;
                base + acc
            })
            .collect();
        Some(ComponentForecast {
            mean: recurse_mean(&coeffs, &history, h),
            variance,
        })
    } else {
        None
    };

    let cycle = if let Some(r) = &layout.cycle {
        let p1 = hyper_user_mean(result, "PACF1")?;
        let p2 = hyper_user_mean(result, "PACF2")?;
        let (phi1, phi2) = ar2_from_pacf(p1, p2);
        let coeffs = [phi1, phi2];
        let history: Vec<f64> = result.latent[r.end - 2..r.end]
            .iter()
            .map(|s| s.mean)
            .collect();
        let prec = hyper_user_mean(result, "Precision Cycle")?;
        let psi = psi_weights(&coeffs, h);
        let base = result.latent[r.end - 1].sd.powi(2);
        let mut acc = 0.0;
        let variance: Vec<f64> = psi
            .iter()
            .map(|p| {
                acc += p * p / prec;
                base + acc
            })
            .collect();
        Some(ComponentForecast {
            mean: recurse_mean(&coeffs, &history, h),
            variance,
        })
    } else {
        None
    };

    // spatial contribution per station
    let n_s = dataset.n_stations();
    let (spat_mean, spat_var): (Vec<f64>, Vec<f64>) = match layout.spatial_mode {
        SpatialMode::Off => (vec![0.0; n_s], vec![0.0; n_s]),
        SpatialMode::Constant => {
            let mesh = mesh.ok_or_else(|| {
                Error::config("forecasting a spatial model needs the mesh".to_string())
            })?;
            let proj = barycentric_projector(mesh, &dataset.locations())?;
            let r = layout.spatial.clone().expect("constant mode has a spatial block");
            let mut means = vec![0.0; n_s];
            let mut vars = vec![0.0; n_s];
            for s in 0..n_s {
                for &(v, w) in proj.row(s) {
                    let summ = &result.latent[r.start + v];
                    means[s] += w * summ.mean;
                    vars[s] += (w * summ.sd) * (w * summ.sd);
                }
            }
            (means, vars)
        }
        SpatialMode::IidReplicates => {
            let log_tau = hyper_internal_mean(result, "log tau")?;
            let log_kappa = hyper_internal_mean(result, "log kappa")?;
            let sigma2 = (-2.0 * (log_tau + log_kappa)).exp()
                / (4.0 * std::f64::consts::PI);
            (vec![0.0; n_s], vec![sigma2; n_s])
        }
    };

    let mut mean = Vec::with_capacity(n_s * h);
    let mut sd = Vec::with_capacity(n_s * h);
    let mut station_ids = Vec::with_capacity(n_s);
    for s in 0..n_s {
        station_ids.push(dataset.station(s).id.clone());
        let mut effect_mean = 0.0;
        let mut effect_var = 0.0;
        for (j, name) in layout.beta_names.iter().enumerate() {
            if name == "(Intercept)" {
                if intercept_in_level {
                    continue;
                }
                let b = &result.latent[layout.betas.start + j];
                effect_mean += b.mean;
                effect_var += b.sd * b.sd;
            } else {
                let x = dataset.covariate(s, name).ok_or_else(|| {
                    Error::data(format!(
                        "station {} lacks covariate {name}",
                        dataset.station(s).id
                    ))
                })?;
                let b = &result.latent[layout.betas.start + j];
                effect_mean += x * b.mean;
                effect_var += (x * b.sd) * (x * b.sd);
            }
        }
        for k in 0..h {
            let mut m = effect_mean + spat_mean[s];
            let mut v = effect_var + spat_var[s];
            for comp in [&trend, &seasonal, &cycle].into_iter().flatten() {
                m += comp.mean[k];
                v += comp.variance[k];
            }
            mean.push(m);
            sd.push(v.max(0.0).sqrt());
        }
    }

    Ok(ForecastResult {
        horizon: h,
        trend,
        seasonal,
        cycle,
        station_ids,
        mean,
        sd,
    })
}

/// Column roster of the accuracy table, in reporting order.
pub const METRIC_NAMES: [&str; 7] = ["ME", "RMSE", "MAE", "MPE", "MAPE", "ACF1", "TheilsU"];

/// Forecast accuracy measures for one horizon.
#[derive(Debug, Clone, Copy)]
pub struct ForecastMetrics {
    pub me: f64,
    pub rmse: f64,
    pub mae: f64,
    pub mpe: f64,
    pub mape: f64,
    pub acf1: f64,
    pub theils_u: f64,
}

impl ForecastMetrics {
    pub fn values(&self) -> [f64; 7] {
        [
            self.me,
            self.rmse,
            self.mae,
            self.mpe,
            self.mape,
            self.acf1,
            self.theils_u,
        ]
    }

    /// One space-separated line in roster order.
    pub fn line(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn header() -> String {
        METRIC_NAMES.join(" ")
    }
}

/// Accuracy of `predicted` against `observed` with errors
/// `e = observed - predicted`. Percentage measures divide by the
/// observed values and come back as NaN when any observation is zero;
/// the relative-change denominator of Theil's U uses the naive
/// no-change forecast and skips the first pair.
pub fn forecast_metrics(predicted: &[f64], observed: &[f64]) -> Result<ForecastMetrics> {
    if predicted.len() != observed.len() {
        return Err(Error::dimension(format!(
            "{} predictions against {} observations",
            predicted.len(),
            observed.len()
        )));
    }
    let n = predicted.len();
    if n < 2 {
        return Err(Error::dimension(
            "accuracy measures need at least two pairs".to_string(),
        ));
    }
    let nf = n as f64;
    let e: Vec<f64> = observed.iter().zip(predicted).map(|(o, p)| o - p).collect();
    let me = e.iter().sum::<f64>() / nf;
    let rmse = (e.iter().map(|v| v * v).sum::<f64>() / nf).sqrt();
    let mae = e.iter().map(|v| v.abs()).sum::<f64>() / nf;
    let (mpe, mape) = if observed.iter().any(|&o| o == 0.0) {
        (f64::NAN, f64::NAN)
    } else {
        (
            100.0 * e.iter().zip(observed).map(|(e, o)| e / o).sum::<f64>() / nf,
            100.0 * e.iter().zip(observed).map(|(e, o)| (e / o).abs()).sum::<f64>() / nf,
        )
    };
    let e_mean = me;
    let denom: f64 = e.iter().map(|v| (v - e_mean) * (v - e_mean)).sum();
    let acf1 = if denom > 0.0 {
        e.windows(2)
            .map(|w| (w[1] - e_mean) * (w[0] - e_mean))
            .sum::<f64>()
            / denom
    } else {
        f64::NAN
    };
    let num: f64 = e[1..].iter().map(|v| v * v).sum();
    let naive: f64 = observed.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum();
    let theils_u = if naive > 0.0 { (num / naive).sqrt() } else { f64::NAN };
    Ok(ForecastMetrics {
        me,
        rmse,
        mae,
        mpe,
        mape,
        acf1,
        theils_u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{
        default_init, run, Dic, HyperSummary, InferenceEngine, InferenceOptions, InlaResult,
        OptimOutcome, PriorSet, Summary, ThetaGrid,
    };
    use crate::mesh::triangulate;
    use crate::model::{
        build_design, Dataset, HyperParams, LatentLayout, ModelSpec, Period, Station, ThetaLayout,
    };
    use crate::simulate::{simulate_dataset, SimulationConfig, StationLayout};
    use crate::spde::{assemble_fem, MaternOperator};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use std::collections::BTreeMap;

    fn summary(mean: f64, sd: f64) -> Summary {
        Summary {
            mean,
            sd,
            q025: mean - 1.959964 * sd,
            q50: mean,
            q975: mean + 1.959964 * sd,
            mode: mean,
        }
    }

    fn make_result(
        layout: LatentLayout,
        means: Vec<f64>,
        sds: Vec<f64>,
        hyper: Vec<(&str, f64, f64)>,
    ) -> InlaResult {
        let k = hyper.len().max(1);
        let grid = ThetaGrid::new(
            vec![vec![0.0; k]],
            vec![0.0],
            vec![0.0; k],
            0.0,
            DMatrix::identity(k, k),
        )
        .unwrap();
        let latent: Vec<Summary> = means
            .iter()
            .zip(&sds)
            .map(|(&m, &s)| summary(m, s))
            .collect();
        InlaResult {
            layout,
            theta_names: hyper.iter().map(|h| h.0.to_string()).collect(),
            optimization: OptimOutcome {
                mode: vec![0.0; k],
                log_post: 0.0,
                hessian: DMatrix::identity(k, k),
                iterations: 0,
                converged: true,
            },
            grid,
            latent,
            hyper: hyper
                .iter()
                .map(|&(name, user, internal)| HyperSummary {
                    name: name.to_string(),
                    internal: summary(internal, 0.1),
                    user: summary(user, 0.1),
                })
                .collect(),
            log_marginal_likelihood: 0.0,
            dic: Dic {
                dic: 0.0,
                effective_parameters: 0.0,
                mean_deviance: 0.0,
                deviance_at_mean: 0.0,
            },
            n_failed_evaluations: 0,
        }
    }

    fn quarters(len: usize) -> Vec<Period> {
        let mut t = Period::new(2001, 1).unwrap();
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(t);
            t = t.succ();
        }
        out
    }

    #[test]
    fn covariate_adjustment_matches_reference() {
        let beta = [-0.0076, 0.1287, 0.0044];
        let means = [297.37, -8.40, 213.60];
        let got = covariate_adjustment(&beta, &means).unwrap();
        assert!((got - (-2.4012)).abs() < 5e-4, "adjustment {got}");
        assert_eq!(covariate_adjustment(&[0.0, 0.0], &[5.0, 7.0]).unwrap(), 0.0);
        let one_hot = covariate_adjustment(&[0.3, 0.7, -0.2], &[0.0, 1.0, 0.0]).unwrap();
        assert_relative_eq!(one_hot, 0.7, epsilon = 1e-15);
        assert!(covariate_adjustment(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn metric_roster_and_perfect_forecast() {
        assert_eq!(ForecastMetrics::header(), "ME RMSE MAE MPE MAPE ACF1 TheilsU");
        let obs = [3.0, 1.0, 4.0, 1.5];
        let m = forecast_metrics(&obs, &obs).unwrap();
        assert_eq!(m.me, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.mpe, 0.0);
        assert_eq!(m.mape, 0.0);
        assert_eq!(m.theils_u, 0.0);
        assert!(m.acf1.is_nan());
        assert_eq!(m.line().split(' ').count(), 7);
    }

    #[test]
    fn metrics_two_point_oracle() {
        // errors (1, -1) on observations (10, 10)
        let m = forecast_metrics(&[9.0, 11.0], &[10.0, 10.0]).unwrap();
        assert_relative_eq!(m.me, 0.0, epsilon = 1e-15);
        assert_relative_eq!(m.mae, 1.0, epsilon = 1e-15);
        assert_relative_eq!(m.rmse, 1.0, epsilon = 1e-15);
        assert_relative_eq!(m.mape, 10.0, epsilon = 1e-12);
        assert_relative_eq!(m.mpe, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn naive_forecast_scores_unit_theils_u() {
        let obs: Vec<f64> = (0..30)
            .map(|k| (k as f64 * 0.7).sin() * 2.0 + 0.1 * k as f64)
            .collect();
        let naive: Vec<f64> = obs[..obs.len() - 1].to_vec();
        let target: Vec<f64> = obs[1..].to_vec();
        let m = forecast_metrics(&naive, &target).unwrap();
        assert_relative_eq!(m.theils_u, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_observation_poisons_percentages_only() {
        let m = forecast_metrics(&[1.0, 2.0, 3.0], &[2.0, 0.0, 4.0]).unwrap();
        assert!(m.mpe.is_nan());
        assert!(m.mape.is_nan());
        assert!(m.me.is_finite());
        assert!(m.rmse.is_finite());
        assert!(m.mae.is_finite());
        assert!(m.theils_u.is_finite());
    }

    #[test]
    fn acf1_matches_direct_computation() {
        let pred = [1.0, 2.0, 0.5, 3.0, 2.5];
        let obs = [1.4, 1.8, 1.1, 3.5, 2.2];
        let e: Vec<f64> = obs.iter().zip(&pred).map(|(o, p)| o - p).collect();
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let num: f64 = (1..e.len()).map(|t| (e[t] - mean) * (e[t - 1] - mean)).sum();
        let den: f64 = e.iter().map(|v| (v - mean) * (v - mean)).sum();
        let m = forecast_metrics(&pred, &obs).unwrap();
        assert_relative_eq!(m.acf1, num / den, epsilon = 1e-14);
        assert!(forecast_metrics(&[1.0], &[1.0]).is_err());
    }

    fn single_station_dataset(t_len: usize) -> Dataset {
        Dataset::new(
            vec![Station {
                id: "A".to_string(),
                location: Point2D::new(0.3, 0.4),
                covariates: BTreeMap::new(),
            }],
            quarters(t_len),
            (0..t_len).map(|k| Some(k as f64 * 0.1)).collect(),
            "t",
        )
        .unwrap()
    }

    #[test]
    fn random_walk_one_step_forecast() {
        let t_len = 6;
        let ds = single_station_dataset(t_len);
        let spec = ModelSpec {
            trend: true,
            intercept: false,
            seasonal: None,
            cycle: false,
            spatial: SpatialMode::Off,
            covariates: vec![],
            n_tau_basis: 0,
        };
        let gmrf = build_design(&ds, &spec, None).unwrap();
        let means: Vec<f64> = (0..t_len).map(|k| 0.2 * k as f64).collect();
        let sds = vec![0.3; t_len];
        let result = make_result(
            gmrf.layout.clone(),
            means.clone(),
            sds,
            vec![("Precision Gaussian", 1.0, 0.0), ("Precision RW", 4.0, 4.0f64.ln())],
        );
        let fc = forecast(&result, &ds, None, 3).unwrap();
        let trend = fc.trend.as_ref().unwrap();
        let last = means[t_len - 1];
        for k in 0..3 {
            assert_relative_eq!(trend.mean[k], last, epsilon = 1e-12);
            assert_relative_eq!(
                trend.variance[k],
                0.09 + (k + 1) as f64 / 4.0,
                epsilon = 1e-12
            );
        }
        assert!(trend.variance[0] < trend.variance[1] && trend.variance[1] < trend.variance[2]);
        assert_relative_eq!(fc.mean[0], last, epsilon = 1e-12);
        assert!(forecast(&result, &ds, None, 0).is_err());
    }

    #[test]
    fn ar2_one_step_mean_follows_recursion() {
        let t_len = 8;
        let ds = single_station_dataset(t_len);
        let spec = ModelSpec {
            trend: false,
            intercept: true,
            seasonal: None,
            cycle: true,
            spatial: SpatialMode::Off,
            covariates: vec![],
            n_tau_basis: 0,
        };
        let gmrf = build_design(&ds, &spec, None).unwrap();
        // layout: cycle block then intercept
        let mut means = vec![0.0; gmrf.layout.n];
        let r = gmrf.layout.cycle.clone().unwrap();
        for (k, i) in r.clone().enumerate() {
            means[i] = (k as f64 * 0.8).sin();
        }
        means[gmrf.layout.betas.start] = 5.0;
        let sds = vec![0.1; gmrf.layout.n];
        let (p1, p2) = (0.4, -0.2);
        let result = make_result(
            gmrf.layout.clone(),
            means.clone(),
            sds,
            vec![
                ("Precision Gaussian", 1.0, 0.0),
                ("Precision Cycle", 2.0, 2.0f64.ln()),
                ("PACF1", p1, 0.0),
                ("PACF2", p2, 0.0),
            ],
        );
        let fc = forecast(&result, &ds, None, 2).unwrap();
        let (phi1, phi2) = ar2_from_pacf(p1, p2);
        let c_last = means[r.end - 1];
        let c_prev = means[r.end - 2];
        let cyc = fc.cycle.as_ref().unwrap();
        assert_relative_eq!(cyc.mean[0], phi1 * c_last + phi2 * c_prev, epsilon = 1e-12);
        assert_relative_eq!(
            cyc.mean[1],
            phi1 * cyc.mean[0] + phi2 * c_last,
            epsilon = 1e-12
        );
        // psi accumulation: var_2 - var_1 = phi1^2 * innovation variance
        assert_relative_eq!(
            cyc.variance[1] - cyc.variance[0],
            phi1 * phi1 / 2.0,
            epsilon = 1e-12
        );
        // constant-mean level: intercept carried flat
        let level = fc.trend.as_ref().unwrap();
        assert_relative_eq!(level.mean[0], 5.0, epsilon = 1e-12);
        assert_relative_eq!(level.mean[1], 5.0, epsilon = 1e-12);
        assert_relative_eq!(level.variance[0], level.variance[1], epsilon = 1e-15);
        // combined prediction holds intercept and cycle exactly once
        assert_relative_eq!(fc.mean[0], 5.0 + cyc.mean[0], epsilon = 1e-12);
    }

    #[test]
    fn seasonal_forecast_continues_exact_pattern() {
        let t_len = 12;
        let ds = single_station_dataset(t_len);
        let spec = ModelSpec {
            trend: false,
            intercept: true,
            seasonal: Some(4),
            cycle: false,
            spatial: SpatialMode::Off,
            covariates: vec![],
            n_tau_basis: 0,
        };
        let gmrf = build_design(&ds, &spec, None).unwrap();
        let pattern = [2.0, -1.0, -3.0, 2.0];
        let mut means = vec![0.0; gmrf.layout.n];
        let r = gmrf.layout.seasonal.clone().unwrap();
        for (k, i) in r.enumerate() {
            means[i] = pattern[k % 4];
        }
        let result = make_result(
            gmrf.layout.clone(),
            means,
            vec![0.05; gmrf.layout.n],
            vec![
                ("Precision Gaussian", 1.0, 0.0),
                ("Precision Seasonal", 10.0, 10.0f64.ln()),
            ],
        );
        let fc = forecast(&result, &ds, None, 4).unwrap();
        let seas = fc.seasonal.as_ref().unwrap();
        for k in 0..4 {
            assert_relative_eq!(seas.mean[k], pattern[(t_len + k) % 4], epsilon = 1e-10);
        }
        for k in 1..4 {
            assert!(seas.variance[k] >= seas.variance[k - 1]);
        }
    }

    fn grid_mesh() -> TriangulatedMesh {
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                pts.push(Point2D::new(0.25 * i as f64, 0.25 * j as f64));
            }
        }
        triangulate(&pts).unwrap()
    }

    #[test]
    fn zeroed_model_yields_flat_surface() {
        let ds = single_station_dataset(5);
        let spec = ModelSpec {
            trend: true,
            intercept: false,
            seasonal: None,
            cycle: false,
            spatial: SpatialMode::Constant,
            covariates: vec![],
            n_tau_basis: 0,
        };
        let mesh = grid_mesh();
        let proj = barycentric_projector(&mesh, &ds.locations()).unwrap();
        let gmrf = build_design(&ds, &spec, Some(&proj)).unwrap();
        let result = make_result(
            gmrf.layout.clone(),
            vec![0.0; gmrf.layout.n],
            vec![0.0; gmrf.layout.n],
            vec![("Precision Gaussian", 1.0, 0.0)],
        );
        let request = GridRequest {
            xmin: 0.1,
            xmax: 0.9,
            ymin: 0.1,
            ymax: 0.9,
            nx: 5,
            ny: 4,
            time_index: 2,
            rasters: BTreeMap::new(),
        };
        let surf = fitted_surface(&result, &mesh, &request).unwrap();
        assert_eq!(surf.mean.len(), 20);
        for v in &surf.mean {
            assert_eq!(v.unwrap(), 0.0);
        }
        let text = surf.mean_text();
        assert!(text.starts_with("ncols 5 nrows 4 xmin 0.1 xmax 0.9 ymin 0.1 ymax 0.9\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn surface_at_station_matches_fitted_value() {
        let t_len = 6;
        let mesh = grid_mesh();
        let mut st = Station {
            id: "A".to_string(),
            location: Point2D::new(0.5, 0.75),
            covariates: BTreeMap::new(),
        };
        st.covariates.insert("altitude".to_string(), 1.7);
        let ds = Dataset::new(
            vec![st],
            quarters(t_len),
            (0..t_len).map(|k| Some(k as f64)).collect(),
            "t",
        )
        .unwrap();
        let spec = ModelSpec {
            trend: true,
            intercept: false,
            seasonal: Some(4),
            cycle: true,
            spatial: SpatialMode::Constant,
            covariates: vec!["altitude".to_string()],
            n_tau_basis: 0,
        };
        let proj = barycentric_projector(&mesh, &ds.locations()).unwrap();
        let gmrf = build_design(&ds, &spec, Some(&proj)).unwrap();
        // arbitrary but reproducible latent means
        let means: Vec<f64> = (0..gmrf.layout.n).map(|i| ((i * 7 % 13) as f64) * 0.11 - 0.5).collect();
        let result = make_result(
            gmrf.layout.clone(),
            means.clone(),
            vec![0.2; gmrf.layout.n],
            vec![("Precision Gaussian", 1.0, 0.0)],
        );
        let t = 3;
        // station sits on a grid node of this request
        let request = GridRequest {
            xmin: 0.25,
            xmax: 0.75,
            ymin: 0.25,
            ymax: 0.75,
            nx: 3,
            ny: 3,
            time_index: t,
            rasters: BTreeMap::from([(
                "altitude".to_string(),
                vec![1.7; 9],
            )]),
        };
        let surf = fitted_surface(&result, &mesh, &request).unwrap();
        // row 0 is ymax: station (0.5, 0.75) is row 0, col 1
        let cell = surf.mean[1].unwrap();
        // fitted value from the design row of (station 0, period t)
        let row_index = gmrf
            .obs_index
            .iter()
            .position(|&(s, tt)| s == 0 && tt == t)
            .unwrap();
        let fitted: f64 = gmrf
            .design
            .row(row_index)
            .iter()
            .map(|&(i, w)| w * means[i])
            .sum();
        assert_relative_eq!(cell, fitted, epsilon = 1e-10);
    }

    #[test]
    fn missing_raster_names_the_covariate() {
        let ds = single_station_dataset(4);
        let spec = ModelSpec {
            trend: true,
            intercept: false,
            seasonal: None,
            cycle: false,
            spatial: SpatialMode::Off,
            covariates: vec!["latitude".to_string()],
            n_tau_basis: 0,
        };
        let gmrf = build_design(&ds, &spec, None).unwrap();
        let result = make_result(
            gmrf.layout.clone(),
            vec![0.0; gmrf.layout.n],
            vec![0.0; gmrf.layout.n],
            vec![("Precision Gaussian", 1.0, 0.0)],
        );
        let request = GridRequest {
            xmin: 0.0,
            xmax: 1.0,
            ymin: 0.0,
            ymax: 1.0,
            nx: 2,
            ny: 2,
            time_index: 0,
            rasters: BTreeMap::new(),
        };
        let err = fitted_surface(&result, &grid_mesh(), &request).unwrap_err();
        assert!(err.to_string().contains("latitude"), "{err}");
    }

    #[test]
    fn cells_outside_inner_region_are_no_data() {
        let pts: Vec<Point2D> = (0..12)
            .map(|k| {
                let a = k as f64 / 12.0 * std::f64::consts::TAU;
                Point2D::new(0.5 + 0.35 * a.cos(), 0.5 + 0.35 * a.sin())
            })
            .collect();
        let mesh = crate::mesh::build_mesh(&pts, 0.2, 0.4, 0.5).unwrap();
        let ds = single_station_dataset(3);
        let spec = ModelSpec {
            trend: true,
            intercept: false,
            seasonal: None,
            cycle: false,
            spatial: SpatialMode::Off,
            covariates: vec![],
            n_tau_basis: 0,
        };
        let gmrf = build_design(&ds, &spec, None).unwrap();
        let result = make_result(
            gmrf.layout.clone(),
            vec![1.0; gmrf.layout.n],
            vec![0.1; gmrf.layout.n],
            vec![("Precision Gaussian", 1.0, 0.0)],
        );
        let request = GridRequest {
            xmin: -1.5,
            xmax: 2.5,
            ymin: -1.5,
            ymax: 2.5,
            nx: 9,
            ny: 9,
            time_index: 1,
            rasters: BTreeMap::new(),
        };
        let surf = fitted_surface(&result, &mesh, &request).unwrap();
        let inside = surf.mean.iter().filter(|v| v.is_some()).count();
        let outside = surf.mean.len() - inside;
        assert!(inside > 0, "no cell fell inside the domain");
        assert!(outside > 0, "no cell fell outside the domain");
        assert!(surf.mean_text().contains("NA"));
        // far corners cannot be inside
        assert!(surf.mean[0].is_none());
        assert!(surf.mean[80].is_none());
    }

    #[test]
    fn surface_recovers_simulated_truth() {
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                pts.push(Point2D::new(0.25 * i as f64, 0.25 * j as f64));
            }
        }
        let mesh = triangulate(&pts).unwrap();
        let spec = ModelSpec {
            trend: true,
            intercept: false,
            seasonal: Some(4),
            cycle: true,
            spatial: SpatialMode::Constant,
            covariates: vec!["latitude".to_string()],
            n_tau_basis: 0,
        };
        let config = SimulationConfig {
            spec: spec.clone(),
            hyper: HyperParams {
                log_prec_gauss: (25.0f64).ln(),
                log_prec_trend: Some((40.0f64).ln()),
                log_prec_seasonal: Some((50.0f64).ln()),
                log_prec_cycle: Some((30.0f64).ln()),
                z_pacf1: Some(0.6),
                z_pacf2: Some(-0.3),
                log_tau: Some(0.7),
                log_kappa: Some(1.2),
                theta_tau_extra: vec![],
            },
            beta: vec![0.8],
            stations: StationLayout::Count(8),
            t_len: 16,
            start: Period::new(2000, 1).unwrap(),
            missing_rate: 0.1,
            seed: 17,
            variable: "temperature".to_string(),
        };
        let sim = simulate_dataset(&config, Some(&mesh), None).unwrap();
        let ds = &sim.dataset;
        let proj = barycentric_projector(&mesh, &ds.locations()).unwrap();
        let gmrf = build_design(ds, &spec, Some(&proj)).unwrap();
        let fem = assemble_fem(&mesh).unwrap();
        let op = MaternOperator::new(&fem).unwrap();
        let layout = ThetaLayout::for_spec(&spec).unwrap();
        let priors = PriorSet::default_for(&layout).unwrap();
        let engine =
            InferenceEngine::new(&gmrf, Some(&op), None, priors, InferenceOptions::default())
                .unwrap();
        let result = run(&engine, &default_init(&spec).unwrap()).unwrap();

        let t = 7;
        let nx = 6;
        let ny = 6;
        let raster_lat: Vec<f64> = (0..ny * nx)
            .map(|idx| {
                let row = idx / nx;
                1.0 - (1.0 * row as f64 / (ny - 1) as f64)
            })
            .collect();
        let request = GridRequest {
            xmin: 0.0,
            xmax: 1.0,
            ymin: 0.0,
            ymax: 1.0,
            nx,
            ny,
            time_index: t,
            rasters: BTreeMap::from([("latitude".to_string(), raster_lat.clone())]),
        };
        let surf = fitted_surface(&result, &mesh, &request).unwrap();

        // truth surface from the generating components
        let truth = &sim.truth;
        let field = truth.spatial.as_ref().unwrap();
        let mut err_sum = 0.0;
        let mut sd_sum = 0.0;
        let mut count = 0;
        for idx in 0..nx * ny {
            let (row, col) = (idx / nx, idx % nx);
            let p = request.cell_center(row, col);
            let (Some(m), Some(s)) = (surf.mean[idx], surf.sd[idx]) else {
                continue;
            };
            let weights = mesh.locate_weights(p).unwrap();
            let spat: f64 = weights.iter().map(|&(v, w)| w * field[v]).sum();
            let tru = truth.trend.as_ref().unwrap()[t]
                + truth.seasonal.as_ref().unwrap()[t]
                + truth.cycle.as_ref().unwrap()[t]
                + 0.8 * raster_lat[idx]
                + spat;
            err_sum += (m - tru).abs();
            sd_sum += s;
            count += 1;
        }
        assert!(count > 30, "only {count} cells evaluated");
        let mae = err_sum / count as f64;
        let avg_sd = sd_sum / count as f64;
        assert!(
            mae < 2.0 * avg_sd,
            "surface error {mae} vs posterior scale {avg_sd}"
        );
    }

    #[test]
    fn replicate_mode_forecast_uses_fresh_field() {
        let t_len = 6;
        let mesh = grid_mesh();
        let ds = single_station_dataset(t_len);
        let spec = ModelSpec {
            trend: true,
            intercept: false,
            seasonal: None,
            cycle: false,
            spatial: SpatialMode::IidReplicates,
            covariates: vec![],
            n_tau_basis: 0,
        };
        let proj = barycentric_projector(&mesh, &ds.locations()).unwrap();
        let gmrf = build_design(&ds, &spec, Some(&proj)).unwrap();
        let mut means = vec![0.0; gmrf.layout.n];
        for i in gmrf.layout.spatial.clone().unwrap() {
            means[i] = 3.0;
        }
        let (lt, lk) = (0.4, 0.9);
        let result = make_result(
            gmrf.layout.clone(),
            means,
            vec![0.1; gmrf.layout.n],
            vec![
                ("Precision Gaussian", 1.0, 0.0),
                ("Precision RW", 4.0, 4.0f64.ln()),
                ("log tau", lt, lt),
                ("log kappa", lk, lk),
            ],
        );
        let fc = forecast(&result, &ds, Some(&mesh), 2).unwrap();
        // fresh replicate: the in-sample field means do not enter
        let trend_mean = fc.trend.as_ref().unwrap().mean[0];
        assert_relative_eq!(fc.mean[0], trend_mean, epsilon = 1e-12);
        // but its stationary variance does
        let sigma2 = (-2.0f64 * (lt + lk)).exp() / (4.0 * std::f64::consts::PI);
        let expect_var = fc.trend.as_ref().unwrap().variance[0] + sigma2;
        assert_relative_eq!(fc.sd[0] * fc.sd[0], expect_var, epsilon = 1e-12);
    }
}
