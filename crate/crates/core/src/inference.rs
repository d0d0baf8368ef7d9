//! Hyperparameter posterior exploration and latent marginals.
//!
//! The observation model is Gaussian, so the latent field integrates out
//! in closed form: the log posterior of the hyperparameters is available
//! exactly up to its normalizer. It is maximized with a quasi-Newton
//! search using finite-difference gradients, explored on an axis grid in
//! the eigenbasis of the Hessian at the mode, and latent marginals are
//! Gaussian mixtures over the grid points. Model evidence uses a Laplace
//! approximation at the mode; model fit is compared with DIC.

use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::batch;
use crate::cholesky::{Ordering, Symbolic};
use crate::error::{Error, Result};
use crate::model::{
    gaussian_posterior_with, posterior_precision, HyperParams, JointGmrf, LatentLayout, ModelSpec,
    Posterior, SpatialMode, TauBasis, ThetaLayout, ThetaScale,
};
use crate::spde::{params_from_sigma_rho, MaternOperator};
use crate::special::{ln_gamma, normal_cdf, normal_pdf};
use crate::temporal::pacf_from_unconstrained;

fn ln_2pi() -> f64 {
    (2.0 * std::f64::consts::PI).ln()
}

// ---------------------------------------------------------------------------
// priors

/// Prior for one hyperparameter coordinate on its internal scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThetaPrior {
    /// `exp(theta)` is Gamma(shape, rate); the density below includes the
    /// Jacobian of the log transform.
    LogGamma { shape: f64, rate: f64 },
    Gaussian { mean: f64, precision: f64 },
}

impl ThetaPrior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThetaPrior::LogGamma { shape, rate } => {
                if !(shape > 0.0) || !(rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
                    return Err(Error::config(format!(
                        "log-gamma prior needs positive finite shape and rate, got ({shape}, {rate})"
                    )));
                }
            }
            ThetaPrior::Gaussian { mean, precision } => {
                if !mean.is_finite() || !(precision > 0.0) || !precision.is_finite() {
                    return Err(Error::config(format!(
                        "Gaussian prior needs finite mean and positive precision, got ({mean}, {precision})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            ThetaPrior::LogGamma { shape, rate } => {
                shape * rate.ln() - ln_gamma(shape) + shape * x - rate * x.exp()
            }
            ThetaPrior::Gaussian { mean, precision } => {
                0.5 * (precision.ln() - ln_2pi()) - 0.5 * precision * (x - mean) * (x - mean)
            }
        }
    }
}

/// One prior per hyperparameter coordinate, aligned with a
/// [`ThetaLayout`].
#[derive(Debug, Clone)]
pub struct PriorSet {
    entries: Vec<ThetaPrior>,
}

impl PriorSet {
    /// Defaults: gamma(1, 5e-5) on precisions, Gaussian(0, precision
    /// 0.15) on partial autocorrelation transforms and extra tau
    /// coefficients, and log-gamma priors on `log tau` / `log kappa`
    /// whose means sit at the values implied by unit marginal standard
    /// deviation and unit range.
    pub fn default_for(layout: &ThetaLayout) -> Result<PriorSet> {
        let reference = params_from_sigma_rho(1.0, 1.0)?;
        let entries = layout
            .names()
            .iter()
            .enumerate()
            .map(|(j, name)| match layout.scale(j) {
                ThetaScale::LogPrecision => ThetaPrior::LogGamma {
                    shape: 1.0,
                    rate: 5e-5,
                },
                ThetaScale::Pacf => ThetaPrior::Gaussian {
                    mean: 0.0,
                    precision: 0.15,
                },
                ThetaScale::Identity => {
                    if name == "log tau" {
                        ThetaPrior::LogGamma {
                            shape: 1.0,
                            rate: (-reference.log_tau).exp(),
                        }
                    } else if name == "log kappa" {
                        ThetaPrior::LogGamma {
                            shape: 1.0,
                            rate: (-reference.log_kappa).exp(),
                        }
                    } else {
                        ThetaPrior::Gaussian {
                            mean: 0.0,
                            precision: 0.15,
                        }
                    }
                }
            })
            .collect();
        Ok(PriorSet { entries })
    }

    pub fn new(entries: Vec<ThetaPrior>) -> Result<PriorSet> {
        for e in &entries {
            e.validate()?;
        }
        Ok(PriorSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, j: usize) -> ThetaPrior {
        self.entries[j]
    }

    pub fn set(&mut self, j: usize, prior: ThetaPrior) -> Result<()> {
        prior.validate()?;
        if j >= self.entries.len() {
            return Err(Error::dimension(format!(
                "prior index {j} out of range for {} hyperparameters",
                self.entries.len()
            )));
        }
        self.entries[j] = prior;
        Ok(())
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        self.entries
            .iter()
            .zip(theta)
            .map(|(p, &t)| p.log_density(t))
            .sum()
    }
}

/// Starting point for the optimizer: unit precisions, centered partial
/// autocorrelations, and spatial parameters at unit standard deviation
/// and unit range.
pub fn default_init(spec: &ModelSpec) -> Result<HyperParams> {
    spec.validate()?;
    let spatial = spec.spatial != SpatialMode::Off;
    let reference = if spatial {
        Some(params_from_sigma_rho(1.0, 1.0)?)
    } else {
        None
    };
    Ok(HyperParams {
        log_prec_gauss: 0.0,
        log_prec_trend: spec.trend.then_some(0.0),
        log_prec_seasonal: spec.seasonal.map(|_| 0.0),
        log_prec_cycle: spec.cycle.then_some(0.0),
        z_pacf1: spec.cycle.then_some(0.0),
        z_pacf2: spec.cycle.then_some(0.0),
        log_tau: reference.as_ref().map(|r| r.log_tau),
        log_kappa: reference.as_ref().map(|r| r.log_kappa),
        theta_tau_extra: vec![0.0; spec.n_tau_basis],
    })
}

// ---------------------------------------------------------------------------
// engine

/// Tunable constants of the search and integration scheme.
#[derive(Debug, Clone, Copy)]
pub struct InferenceOptions {
    /// Forward-difference step for gradients.
    pub gradient_step: f64,
    /// Convergence threshold on the gradient infinity norm.
    pub gradient_tol: f64,
    pub max_iterations: usize,
    /// Central-difference step for the Hessian at the mode.
    pub hessian_step: f64,
    /// Eigenvalue floor making the negative Hessian positive definite.
    pub hessian_floor: f64,
    /// Grid step in standardized coordinates.
    pub grid_step: f64,
    /// Log-density drop below the mode at which the grid walk stops.
    pub grid_cutoff: f64,
    pub grid_max_steps: usize,
    /// Box half-width on every hyperparameter coordinate.
    pub bound: f64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            gradient_step: 1e-4,
            gradient_tol: 1e-4,
            max_iterations: 200,
            hessian_step: 1e-3,
            hessian_floor: 1e-6,
            grid_step: 1.0,
            grid_cutoff: 2.5,
            grid_max_steps: 12,
            bound: 20.0,
        }
    }
}

/// One evaluation of the hyperparameter posterior.
#[derive(Debug)]
pub struct ThetaEval {
    pub theta: Vec<f64>,
    /// Log density of the data given these hyperparameters.
    pub log_evidence: f64,
    pub log_prior: f64,
    /// `log_evidence + log_prior`, the unnormalized log posterior.
    pub log_post: f64,
    pub posterior: Posterior,
}

/// Evaluation context tying a model to priors and search options.
pub struct InferenceEngine<'a> {
    gmrf: &'a JointGmrf,
    matern: Option<&'a MaternOperator>,
    tau_basis: Option<&'a TauBasis>,
    layout: ThetaLayout,
    priors: PriorSet,
    opts: InferenceOptions,
    symbolic: OnceLock<Symbolic>,
    failed: AtomicUsize,
}

impl<'a> InferenceEngine<'a> {
    pub fn new(
        gmrf: &'a JointGmrf,
        matern: Option<&'a MaternOperator>,
        tau_basis: Option<&'a TauBasis>,
        priors: PriorSet,
        opts: InferenceOptions,
    ) -> Result<Self> {
        let layout = ThetaLayout::for_spec(gmrf.spec())?;
        if priors.len() != layout.len() {
            return Err(Error::dimension(format!(
                "{} priors for {} hyperparameters",
                priors.len(),
                layout.len()
            )));
        }
        if gmrf.spec().spatial != SpatialMode::Off && matern.is_none() {
            return Err(Error::config(
                "spatial component active but no Matern operator supplied".to_string(),
            ));
        }
        Ok(InferenceEngine {
            gmrf,
            matern,
            tau_basis,
            layout,
            priors,
            opts,
            symbolic: OnceLock::new(),
            failed: AtomicUsize::new(0),
        })
    }

    pub fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    pub fn options(&self) -> &InferenceOptions {
        &self.opts
    }

    /// Number of evaluations that failed to factorize and were mapped to
    /// negative infinity.
    pub fn n_failed_evaluations(&self) -> usize {
        self.failed.load(AtomicOrdering::Relaxed)
    }

    /// Full evaluation at one hyperparameter point: latent posterior plus
    /// the exact log evidence from prior, likelihood and posterior
    /// normalizers. Linear restrictions enter through the conditioned
    /// posterior density.
    pub fn evaluate(&self, theta: &[f64]) -> Result<ThetaEval> {
        let hyper = self.layout.unpack(theta)?;
        let prior = self.gmrf.prior(&hyper, self.matern, self.tau_basis)?;
        let lpg = hyper.log_prec_gauss;
        if self.symbolic.get().is_none() {
            let q_post = posterior_precision(self.gmrf, &prior.precision, lpg)?;
            let _ = self
                .symbolic
                .set(Symbolic::analyze(&q_post, Ordering::Rcm));
        }
        let symbolic = self.symbolic.get().unwrap();
        let posterior =
            gaussian_posterior_with(self.gmrf, &prior.precision, &self.gmrf.y, lpg, symbolic)?;

        let n = self.gmrf.layout.n as f64;
        let n_obs = self.gmrf.n_obs() as f64;
        let n_con = self.gmrf.constraints.len() as f64;
        let prec = lpg.exp();
        let quad_prior = prior.precision.quad_form(&posterior.mean);
        let fitted = self.gmrf.design.mul_vec(&posterior.mean);
        let ss: f64 = self
            .gmrf
            .y
            .iter()
            .zip(&fitted)
            .map(|(y, f)| (y - f) * (y - f))
            .sum();
        let log_prior_at = -0.5 * prior.rank as f64 * ln_2pi() + prior.half_log_gdet
            - 0.5 * quad_prior;
        let log_lik_at = 0.5 * n_obs * (lpg - ln_2pi()) - 0.5 * prec * ss;
        let half_log_det_s = posterior
            .constraint
            .as_ref()
            .map_or(0.0, |c| c.half_log_det_s);
        let log_post_at =
            -0.5 * (n - n_con) * ln_2pi() + posterior.half_log_det_post + half_log_det_s;
        let log_evidence = log_prior_at + log_lik_at - log_post_at;
        let log_prior = self.priors.log_density(theta);
        Ok(ThetaEval {
            theta: theta.to_vec(),
            log_evidence,
            log_prior,
            log_post: log_evidence + log_prior,
            posterior,
        })
    }

    /// Unnormalized log posterior of the hyperparameters. Factorization
    /// failures count as negative infinity and are tallied on the
    /// engine rather than treated as errors.
    pub fn log_posterior_theta(&self, theta: &[f64]) -> Result<f64> {
        match self.evaluate(theta) {
            Ok(e) => Ok(e.log_post),
            Err(Error::Numerical(_)) => {
                self.failed.fetch_add(1, AtomicOrdering::Relaxed);
                Ok(f64::NEG_INFINITY)
            }
            Err(e) => Err(e),
        }
    }

    fn clamp(&self, theta: &mut [f64]) {
        for t in theta {
            *t = t.clamp(-self.opts.bound, self.opts.bound);
        }
    }

    /// Forward-difference gradient reusing the value at the base point.
    fn gradient(&self, theta: &[f64], f0: f64) -> Result<Vec<f64>> {
        let h = self.opts.gradient_step;
        let evals: Vec<Result<f64>> = batch::map_indexed(theta.len(), |i| {
            let mut t = theta.to_vec();
            t[i] += h;
            self.log_posterior_theta(&t)
        });
        let mut g = Vec::with_capacity(theta.len());
        for e in evals {
            let v = (e? - f0) / h;
            if !v.is_finite() {
                return Err(Error::numerical(
                    "log posterior not finite near the current point".to_string(),
                ));
            }
            g.push(v);
        }
        Ok(g)
    }

    /// Negative Hessian of the log posterior by central differences,
    /// regularized to positive definite by eigenvalue flooring.
    fn neg_hessian(&self, theta: &[f64], f0: f64) -> Result<DMatrix<f64>> {
        let k = theta.len();
        let h = self.opts.hessian_step;
        let mut probes: Vec<Vec<f64>> = Vec::new();
        for i in 0..k {
            for s in [h, -h] {
                let mut t = theta.to_vec();
                t[i] += s;
                probes.push(t);
            }
        }
        let mut pair_base = Vec::new();
        for i in 0..k {
            for j in (i + 1)..k {
                pair_base.push((i, j));
                for (si, sj) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
                    let mut t = theta.to_vec();
                    t[i] += si;
                    t[j] += sj;
                    probes.push(t);
                }
            }
        }
        let vals: Vec<Result<f64>> =
            batch::map_indexed(probes.len(), |i| self.log_posterior_theta(&probes[i]));
        let mut f = Vec::with_capacity(vals.len());
        for v in vals {
            f.push(v?);
        }
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..k {
            hess[(i, i)] = (f[2 * i] - 2.0 * f0 + f[2 * i + 1]) / (h * h);
        }
        let mut off = 2 * k;
        for &(i, j) in &pair_base {
            let v = (f[off] - f[off + 1] - f[off + 2] + f[off + 3]) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
            off += 4;
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(
                "log posterior not finite while probing the Hessian".to_string(),
            ));
        }
        let neg = -hess;
        let eig = neg.symmetric_eigen();
        let floored = DVector::from_iterator(
            k,
            eig.eigenvalues.iter().map(|&v| v.max(self.opts.hessian_floor)),
        );
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose())
    }

    /// Quasi-Newton ascent of the hyperparameter log posterior with
    /// backtracking line search inside the box. Stops at the gradient
    /// tolerance, at the iteration cap, or when no ascent step exists at
    /// the working precision (counted as converged).
    pub fn optimize(&self, init: &HyperParams) -> Result<OptimOutcome> {
        let mut theta = self.layout.pack(init)?;
        self.clamp(&mut theta);
        let k = theta.len();
        let mut f0 = self.log_posterior_theta(&theta)?;
        if !f0.is_finite() {
            return Err(Error::numerical(
                "log posterior not finite at the starting point".to_string(),
            ));
        }
        let mut g = self.gradient(&theta, f0)?;
        let mut binv = DMatrix::<f64>::identity(k, k);
        let mut iterations = 0usize;
        let converged = loop {
            let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gnorm < self.opts.gradient_tol {
                break true;
            }
            if iterations >= self.opts.max_iterations {
                break false;
            }
            iterations += 1;
            let gv = DVector::from_column_slice(&g);
            let mut d = &binv * &gv;
            if d.dot(&gv) <= 0.0 {
                binv = DMatrix::identity(k, k);
                d = gv.clone();
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let mut trial: Vec<f64> =
                    theta.iter().zip(d.iter()).map(|(t, di)| t + alpha * di).collect();
                self.clamp(&mut trial);
                let step: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
                if step.iter().all(|s| s.abs() < 1e-12) {
                    break;
                }
                let ft = self.log_posterior_theta(&trial)?;
                let armijo: f64 = 1e-4 * g.iter().zip(&step).map(|(a, b)| a * b).sum::<f64>();
                if ft > f0 + armijo {
                    let gt = self.gradient(&trial, ft)?;
                    let s = DVector::from_column_slice(&step);
                    // secant pair in the minimization convention
                    let y = DVector::from_iterator(k, g.iter().zip(&gt).map(|(a, b)| a - b));
                    let sy = s.dot(&y);
                    if sy > 1e-12 * s.norm() * y.norm() {
                        let rho = 1.0 / sy;
                        let by = &binv * &y;
                        let yby = y.dot(&by);
                        binv = &binv - (&by * s.transpose() + &s * by.transpose()) * rho
                            + &s * s.transpose() * (rho * rho * yby + rho);
                    }
                    theta = trial;
                    f0 = ft;
                    g = gt;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                // no improving step at working precision: numerically stationary
                break true;
            }
        };
        let hessian = self.neg_hessian(&theta, f0)?;
        Ok(OptimOutcome {
            mode: theta,
            log_post: f0,
            hessian,
            iterations,
            converged,
        })
    }

    /// Walks the axis grid around an optimized mode.
    pub fn explore_grid(&self, opt: &OptimOutcome) -> Result<ThetaGrid> {
        let opts = GridOptions {
            step: self.opts.grid_step,
            cutoff: self.opts.grid_cutoff,
            max_steps: self.opts.grid_max_steps,
            bound: self.opts.bound,
        };
        explore_grid_with(
            &|t: &[f64]| self.log_posterior_theta(t),
            &opt.mode,
            &opt.hessian,
            &opts,
        )
    }

    /// Marginal posterior of every latent index as a Gaussian mixture
    /// over the grid.
    pub fn latent_marginals(&self, grid: &ThetaGrid) -> Result<Vec<Summary>> {
        let per_point: Vec<Result<(Vec<f64>, Vec<f64>)>> =
            batch::map_indexed(grid.len(), |kk| {
                let eval = self.evaluate(&grid.points[kk])?;
                let pinv = eval.posterior.partial_inverse();
                let var = eval.posterior.marginal_variances(&pinv);
                Ok((eval.posterior.mean, var))
            });
        let mut means = Vec::with_capacity(grid.len());
        let mut vars = Vec::with_capacity(grid.len());
        for p in per_point {
            let (m, v) = p?;
            means.push(m);
            vars.push(v);
        }
        let n = self.gmrf.layout.n;
        Ok(batch::map_indexed(n, |i| {
            let mus: Vec<f64> = means.iter().map(|m| m[i]).collect();
            let sds: Vec<f64> = vars.iter().map(|v| v[i].max(0.0).sqrt()).collect();
            mixture_summary(&grid.weights, &mus, &sds)
        }))
    }

    /// Marginal posterior of each hyperparameter: grid points projected
    /// onto the coordinate and smoothed with a Gaussian kernel whose
    /// bandwidth is the standardized grid step mapped through the
    /// Hessian. A single-point grid degenerates to a point mass.
    pub fn hyper_marginals(&self, grid: &ThetaGrid) -> Result<Vec<HyperSummary>> {
        let k = self.layout.len();
        if grid.dim() != k {
            return Err(Error::dimension(format!(
                "grid dimension {} does not match {} hyperparameters",
                grid.dim(),
                k
            )));
        }
        let mut out = Vec::with_capacity(k);
        if grid.len() == 1 {
            for j in 0..k {
                let v = grid.points[0][j];
                let internal = point_mass(v);
                let user = point_mass(self.layout.scale(j).to_user(v));
                out.push(HyperSummary {
                    name: self.layout.names()[j].clone(),
                    internal,
                    user,
                });
            }
            return Ok(out);
        }
        let chol = grid.hessian.clone().cholesky().ok_or_else(|| {
            Error::numerical("grid Hessian is not positive definite".to_string())
        })?;
        let hinv = chol.inverse();
        for j in 0..k {
            let centers: Vec<f64> = grid.points.iter().map(|p| p[j]).collect();
            let bandwidth = self.opts.grid_step * hinv[(j, j)].max(0.0).sqrt();
            let sds = vec![bandwidth.max(1e-12); centers.len()];
            let internal = mixture_summary(&grid.weights, &centers, &sds);
            let user = user_summary(
                self.layout.scale(j),
                &grid.weights,
                &centers,
                sds[0],
                &internal,
            );
            out.push(HyperSummary {
                name: self.layout.names()[j].clone(),
                internal,
                user,
            });
        }
        Ok(out)
    }

    /// Deviance information criterion over the grid mixture: the
    /// expected deviance uses the full latent covariance through the
    /// factor's partial inverse, and the plug-in deviance is evaluated
    /// at the mixture means.
    pub fn dic(&self, grid: &ThetaGrid) -> Result<Dic> {
        let n_obs = self.gmrf.n_obs() as f64;
        let per_point: Vec<Result<(f64, Vec<f64>)>> = batch::map_indexed(grid.len(), |kk| {
            let theta = &grid.points[kk];
            let eval = self.evaluate(theta)?;
            let lpg = theta[0];
            let prec = lpg.exp();
            let fitted = self.gmrf.design.mul_vec(&eval.posterior.mean);
            let ss: f64 = self
                .gmrf
                .y
                .iter()
                .zip(&fitted)
                .map(|(y, f)| (y - f) * (y - f))
                .sum();
            let pinv = eval.posterior.partial_inverse();
            let mut trace = 0.0;
            for r in 0..self.gmrf.design.nrows() {
                let row = self.gmrf.design.row(r);
                for &(i, vi) in row {
                    for &(j, vj) in row {
                        let cov = eval
                            .posterior
                            .covariance_on_pattern(&pinv, i, j)
                            .expect("posterior pattern contains the normal matrix pattern");
                        trace += vi * vj * cov;
                    }
                }
            }
            let expected_dev = -n_obs * (lpg - ln_2pi()) + prec * (ss + trace);
            Ok((expected_dev, eval.posterior.mean))
        });
        let mut mean_deviance = 0.0;
        let mut mixture_mean = vec![0.0; self.gmrf.layout.n];
        let mut theta_mean = vec![0.0; grid.dim()];
        for (kk, p) in per_point.into_iter().enumerate() {
            let (dev, mean) = p?;
            let w = grid.weights[kk];
            mean_deviance += w * dev;
            for (acc, m) in mixture_mean.iter_mut().zip(&mean) {
                *acc += w * m;
            }
            for (acc, t) in theta_mean.iter_mut().zip(&grid.points[kk]) {
                *acc += w * t;
            }
        }
        let lpg = theta_mean[0];
        let fitted = self.gmrf.design.mul_vec(&mixture_mean);
        let ss: f64 = self
            .gmrf
            .y
            .iter()
            .zip(&fitted)
            .map(|(y, f)| (y - f) * (y - f))
            .sum();
        let deviance_at_mean = -n_obs * (lpg - ln_2pi()) + lpg.exp() * ss;
        let effective_parameters = mean_deviance - deviance_at_mean;
        Ok(Dic {
            dic: mean_deviance + effective_parameters,
            effective_parameters,
            mean_deviance,
            deviance_at_mean,
        })
    }
}

/// Result of the mode search.
#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub mode: Vec<f64>,
    pub log_post: f64,
    /// Negative Hessian of the log posterior at the mode, floored to
    /// positive definite.
    pub hessian: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

// ---------------------------------------------------------------------------
// grid

/// Controls for the axis walk around the mode.
#[derive(Debug, Clone, Copy)]
pub struct GridOptions {
    pub step: f64,
    pub cutoff: f64,
    pub max_steps: usize,
    pub bound: f64,
}

impl Default for GridOptions {
    fn default() -> Self {
        let o = InferenceOptions::default();
        GridOptions {
            step: o.grid_step,
            cutoff: o.grid_cutoff,
            max_steps: o.grid_max_steps,
            bound: o.bound,
        }
    }
}

/// Evaluated integration grid over the hyperparameters.
#[derive(Debug, Clone)]
pub struct ThetaGrid {
    pub points: Vec<Vec<f64>>,
    /// Log posterior of each point relative to the mode value.
    pub log_rel: Vec<f64>,
    /// Normalized mixture weights.
    pub weights: Vec<f64>,
    pub mode: Vec<f64>,
    pub log_post_mode: f64,
    pub hessian: DMatrix<f64>,
}

impl ThetaGrid {
    pub fn new(
        points: Vec<Vec<f64>>,
        log_rel: Vec<f64>,
        mode: Vec<f64>,
        log_post_mode: f64,
        hessian: DMatrix<f64>,
    ) -> Result<ThetaGrid> {
        if points.is_empty() {
            return Err(Error::dimension("grid needs at least one point".to_string()));
        }
        let k = mode.len();
        if points.iter().any(|p| p.len() != k)
            || hessian.nrows() != k
            || hessian.ncols() != k
            || log_rel.len() != points.len()
        {
            return Err(Error::dimension(
                "grid points, mode and Hessian dimensions disagree".to_string(),
            ));
        }
        if log_rel.iter().any(|v| !v.is_finite()) || !log_post_mode.is_finite() {
            return Err(Error::numerical(
                "grid log posterior values must be finite".to_string(),
            ));
        }
        let m = log_rel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = log_rel.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(ThetaGrid {
            points,
            log_rel,
            weights,
            mode,
            log_post_mode,
            hessian,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.mode.len()
    }

    pub fn weighted_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (p, &w) in self.points.iter().zip(&self.weights) {
            for (acc, v) in m.iter_mut().zip(p) {
                *acc += w * v;
            }
        }
        m
    }
}

/// Axis walk in the eigenbasis of the (positive definite) Hessian: from
/// the mode, steps of `step / sqrt(eigenvalue)` along each signed
/// eigendirection until the log posterior falls `cutoff` below the mode.
/// Points in one wave are evaluated in parallel.
pub fn explore_grid_with<F>(
    f: &F,
    mode: &[f64],
    hessian: &DMatrix<f64>,
    opts: &GridOptions,
) -> Result<ThetaGrid>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let k = mode.len();
    if hessian.nrows() != k || hessian.ncols() != k {
        return Err(Error::dimension(format!(
            "Hessian is {}x{} for a {k}-dimensional mode",
            hessian.nrows(),
            hessian.ncols()
        )));
    }
    let eig = hessian.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&v| v <= 0.0) {
        return Err(Error::numerical(
            "grid exploration needs a positive definite Hessian".to_string(),
        ));
    }
    let f_mode = f(mode)?;
    if !f_mode.is_finite() {
        return Err(Error::numerical(
            "log posterior not finite at the mode".to_string(),
        ));
    }
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(2 * k);
    for l in 0..k {
        let scale = 1.0 / eig.eigenvalues[l].sqrt();
        for sign in [1.0, -1.0] {
            dirs.push((0..k).map(|i| sign * scale * eig.eigenvectors[(i, l)]).collect());
        }
    }
    let mut points = vec![mode.to_vec()];
    let mut log_rel = vec![0.0];
    let mut alive: Vec<(Vec<f64>, Vec<f64>)> =
        dirs.into_iter().map(|d| (d, mode.to_vec())).collect();
    for step_idx in 1..=opts.max_steps {
        if alive.is_empty() {
            break;
        }
        let mut candidates = Vec::with_capacity(alive.len());
        let mut keep_dir = Vec::with_capacity(alive.len());
        for (d, last) in &alive {
            let mut p: Vec<f64> = mode
                .iter()
                .zip(d)
                .map(|(m, di)| m + step_idx as f64 * opts.step * di)
                .collect();
            for v in &mut p {
                *v = v.clamp(-opts.bound, opts.bound);
            }
            let moved = p.iter().zip(last).any(|(a, b)| (a - b).abs() > 1e-12);
            if moved {
                keep_dir.push(d.clone());
                candidates.push(p);
            }
        }
        let vals: Vec<Result<f64>> = batch::map_indexed(candidates.len(), |i| f(&candidates[i]));
        let mut next_alive = Vec::new();
        for ((d, p), v) in keep_dir.into_iter().zip(candidates).zip(vals) {
            let lp = v?;
            if lp.is_finite() && lp >= f_mode - opts.cutoff && lp - f_mode < opts.cutoff.max(1.0) {
                log_rel.push(lp - f_mode);
                next_alive.push((d, p.clone()));
                points.push(p);
            }
        }
        alive = next_alive;
    }
    ThetaGrid::new(points, log_rel, mode.to_vec(), f_mode, hessian.clone())
}

/// Log marginal likelihood by the Laplace approximation at the grid's
/// mode, using the stored Hessian.
pub fn marginal_likelihood(grid: &ThetaGrid) -> f64 {
    let k = grid.dim() as f64;
    let eig = grid.hessian.clone().symmetric_eigen();
    let half_log_det: f64 = eig.eigenvalues.iter().map(|&v| 0.5 * v.max(1e-300).ln()).sum();
    grid.log_post_mode + 0.5 * k * ln_2pi() - half_log_det
}

/// Deviance information criterion parts.
#[derive(Debug, Clone, Copy)]
pub struct Dic {
    pub dic: f64,
    pub effective_parameters: f64,
    pub mean_deviance: f64,
    pub deviance_at_mean: f64,
}

// ---------------------------------------------------------------------------
// mixture summaries

/// Posterior summary roster for one scalar quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    pub mode: f64,
}

/// Summary of one hyperparameter on both scales.
#[derive(Debug, Clone)]
pub struct HyperSummary {
    pub name: String,
    pub internal: Summary,
    /// Precisions reported as precisions, partial autocorrelations
    /// back-transformed into (-1, 1).
    pub user: Summary,
}

fn point_mass(v: f64) -> Summary {
    Summary {
        mean: v,
        sd: 0.0,
        q025: v,
        q50: v,
        q975: v,
        mode: v,
    }
}

const SUMMARY_GRID: usize = 400;

/// Summarizes a Gaussian mixture: exact moments, mode from a 400-point
/// scan with parabolic refinement, quantiles by bisection of the exact
/// mixture distribution function bracketed on the same grid span.
pub fn mixture_summary(weights: &[f64], means: &[f64], sds: &[f64]) -> Summary {
    assert_eq!(weights.len(), means.len());
    assert_eq!(weights.len(), sds.len());
    let mean: f64 = weights.iter().zip(means).map(|(w, m)| w * m).sum();
    let second: f64 = weights
        .iter()
        .zip(means)
        .zip(sds)
        .map(|((w, m), s)| w * (s * s + m * m))
        .sum();
    let sd = (second - mean * mean).max(0.0).sqrt();
    if sd < 1e-300 {
        return point_mass(mean);
    }
    let lo = mean - 6.0 * sd;
    let hi = mean + 6.0 * sd;
    let h = (hi - lo) / (SUMMARY_GRID - 1) as f64;
    let xs: Vec<f64> = (0..SUMMARY_GRID).map(|i| lo + i as f64 * h).collect();
    let pdf = |x: f64| -> f64 {
        weights
            .iter()
            .zip(means)
            .zip(sds)
            .map(|((w, m), s)| w * normal_pdf((x - m) / s) / s)
            .sum()
    };
    let cdf = |x: f64| -> f64 {
        weights
            .iter()
            .zip(means)
            .zip(sds)
            .map(|((w, m), s)| w * normal_cdf((x - m) / s))
            .sum()
    };
    let dens: Vec<f64> = xs.iter().map(|&x| pdf(x)).collect();
    let mode = refine_peak(&xs, &dens);
    let quantile = |p: f64| -> f64 {
        let mut a = lo;
        let mut b = hi;
        let mut expand = 0;
        while cdf(a) > p && expand < 10 {
            a -= 6.0 * sd;
            expand += 1;
        }
        let mut expand = 0;
        while cdf(b) < p && expand < 10 {
            b += 6.0 * sd;
            expand += 1;
        }
        for _ in 0..90 {
            let m = 0.5 * (a + b);
            if cdf(m) < p {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    };
    Summary {
        mean,
        sd,
        q025: quantile(0.025),
        q50: quantile(0.5),
        q975: quantile(0.975),
        mode,
    }
}

/// Vertex of the parabola through the peak sample and its neighbors.
fn refine_peak(xs: &[f64], ys: &[f64]) -> f64 {
    let mut best = 0;
    for (i, y) in ys.iter().enumerate() {
        if *y > ys[best] {
            best = i;
        }
    }
    if best == 0 || best + 1 == ys.len() {
        return xs[best];
    }
    let (ym, y0, yp) = (ys[best - 1], ys[best], ys[best + 1]);
    if !ym.is_finite() || !yp.is_finite() {
        return xs[best];
    }
    let denom = ym - 2.0 * y0 + yp;
    if denom.abs() < 1e-300 {
        return xs[best];
    }
    let h = xs[1] - xs[0];
    let shift = 0.5 * h * (ym - yp) / denom;
    xs[best] + shift.clamp(-h, h)
}

/// Summary on the user scale for a kernel-smoothed hyperparameter
/// marginal: quantiles map through the monotone transform, moments and
/// mode are recomputed under the transformed density.
fn user_summary(
    scale: ThetaScale,
    weights: &[f64],
    centers: &[f64],
    bandwidth: f64,
    internal: &Summary,
) -> Summary {
    if scale == ThetaScale::Identity {
        return *internal;
    }
    let transform = |x: f64| scale.to_user(x);
    // derivative of the transform, for the density change of variables
    let dtransform = |x: f64| -> f64 {
        match scale {
            ThetaScale::LogPrecision => x.exp(),
            ThetaScale::Pacf => {
                let p = pacf_from_unconstrained(x);
                0.5 * (1.0 - p * p)
            }
            ThetaScale::Identity => 1.0,
        }
    };
    let lo = internal.mean - 6.0 * internal.sd;
    let hi = internal.mean + 6.0 * internal.sd;
    let h = (hi - lo) / (SUMMARY_GRID - 1) as f64;
    let xs: Vec<f64> = (0..SUMMARY_GRID).map(|i| lo + i as f64 * h).collect();
    let pdf = |x: f64| -> f64 {
        weights
            .iter()
            .zip(centers)
            .map(|(w, c)| w * normal_pdf((x - c) / bandwidth) / bandwidth)
            .sum()
    };
    let dens: Vec<f64> = xs.iter().map(|&x| pdf(x)).collect();
    let mut z = 0.0;
    let mut first = 0.0;
    let mut second = 0.0;
    for i in 0..xs.len() {
        let w = if i == 0 || i + 1 == xs.len() { 0.5 } else { 1.0 };
        let t = transform(xs[i]);
        z += w * dens[i];
        first += w * dens[i] * t;
        second += w * dens[i] * t * t;
    }
    let mean = first / z;
    let var = (second / z - mean * mean).max(0.0);
    // mode of the transformed density: maximize pdf / |T'| before mapping
    let ratio: Vec<f64> = xs
        .iter()
        .zip(&dens)
        .map(|(&x, &d)| {
            let dt = dtransform(x);
            if dt <= 0.0 {
                f64::NEG_INFINITY
            } else {
                d.max(1e-300).ln() - dt.ln()
            }
        })
        .collect();
    let mode = transform(refine_peak(&xs, &ratio));
    Summary {
        mean,
        sd: var.sqrt(),
        q025: transform(internal.q025),
        q50: transform(internal.q50),
        q975: transform(internal.q975),
        mode,
    }
}

// ---------------------------------------------------------------------------
// orchestration

/// Complete inference output: optimization trace, grid, latent and
/// hyperparameter summaries, evidence and DIC.
#[derive(Debug)]
pub struct InlaResult {
    pub layout: LatentLayout,
    pub theta_names: Vec<String>,
    pub optimization: OptimOutcome,
    pub grid: ThetaGrid,
    pub latent: Vec<Summary>,
    pub hyper: Vec<HyperSummary>,
    pub log_marginal_likelihood: f64,
    pub dic: Dic,
    pub n_failed_evaluations: usize,
}

/// Runs the full scheme: mode search, grid walk, marginals, evidence,
/// DIC.
pub fn run(engine: &InferenceEngine, init: &HyperParams) -> Result<InlaResult> {
    let optimization = engine.optimize(init)?;
    let grid = engine.explore_grid(&optimization)?;
    let latent = engine.latent_marginals(&grid)?;
    let hyper = engine.hyper_marginals(&grid)?;
    let log_marginal_likelihood = marginal_likelihood(&grid);
    let dic = engine.dic(&grid)?;
    Ok(InlaResult {
        layout: engine.gmrf.layout.clone(),
        theta_names: engine.layout.names().to_vec(),
        optimization,
        grid,
        latent,
        hyper,
        log_marginal_likelihood,
        dic,
        n_failed_evaluations: engine.n_failed_evaluations(),
    })
}

impl InlaResult {
    /// Text report: hyperparameter table on the user scale, marginal
    /// likelihood, DIC, and search diagnostics.
    pub fn report(&self) -> String {
        let mut s = String::new();
        s.push_str("Model hyperparameters:\n");
        s.push_str(&format!(
            "{:<22} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
            "", "mean", "sd", ".025q", ".5q", ".975q", "mode"
        ));
        for h in &self.hyper {
            let u = &h.user;
            s.push_str(&format!(
                "{:<22} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>12.4}\n",
                h.name, u.mean, u.sd, u.q025, u.q50, u.q975, u.mode
            ));
        }
        s.push('\n');
        s.push_str(&format!(
            "Marginal Lik.  {:.4}\n",
            self.log_marginal_likelihood
        ));
        s.push_str(&format!(
            "DIC  {:.4} (effective parameters {:.4})\n",
            self.dic.dic, self.dic.effective_parameters
        ));
        s.push_str(&format!(
            "Optimizer iterations  {}{}\n",
            self.optimization.iterations,
            if self.optimization.converged {
                ""
            } else {
                " (not converged)"
            }
        ));
        s.push_str(&format!("Grid points  {}\n", self.grid.len()));
        if self.n_failed_evaluations > 0 {
            s.push_str(&format!(
                "Failed evaluations  {}\n",
                self.n_failed_evaluations
            ));
        }
        s
    }
}
