//! Finite element construction of Matern field precision matrices.
//!
//! A Matern field with smoothness `nu = 1` on a planar domain solves the
//! stochastic PDE `(kappa^2 - laplacian) x = tau^{-1} W` (operator power
//! `alpha = 2`). Discretized with piecewise linear elements on a
//! triangulation, the weights get a sparse precision
//!
//! `Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G)`
//!
//! with lumped mass matrix `C` and stiffness matrix `G`. Helpers map
//! between the `(log tau, log kappa)` parameterization and the marginal
//! standard deviation / correlation range scale, evaluate the analytic
//! correlation function, and build precisions whose log tau varies over
//! the domain.

use crate::error::{Error, Result};
use crate::mesh::TriangulatedMesh;
use crate::sparse::{MergedPattern, SparseSym, SymTriplets};
use crate::special::{bessel_k, ln_gamma};

/// Field smoothness; fixed by the supported operator power.
pub const NU: f64 = 1.0;
/// Operator power `nu + d/2`; only 2 is supported.
pub const ALPHA: f64 = 2.0;
/// Spatial dimension.
pub const DIM: f64 = 2.0;

/// Distances below this count as zero when evaluating correlations.
const ZERO_DIST: f64 = 1e-6;

/// Matern precision parameters on log scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternParams {
    pub log_tau: f64,
    pub log_kappa: f64,
}

impl MaternParams {
    pub fn new(log_tau: f64, log_kappa: f64) -> Result<Self> {
        if !log_tau.is_finite() || !log_kappa.is_finite() {
            return Err(Error::config(format!(
                "Matern parameters must be finite, got log_tau = {log_tau}, log_kappa = {log_kappa}"
            )));
        }
        Ok(MaternParams { log_tau, log_kappa })
    }

    /// As [`MaternParams::new`] but checks the requested operator power.
    pub fn with_alpha(log_tau: f64, log_kappa: f64, alpha: f64) -> Result<Self> {
        if alpha != ALPHA {
            return Err(Error::config(format!(
                "only operator power alpha = 2 is supported, got {alpha}"
            )));
        }
        MaternParams::new(log_tau, log_kappa)
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn kappa(&self) -> f64 {
        self.log_kappa.exp()
    }
}

/// Mass and stiffness matrices of a piecewise linear basis.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    /// Consistent mass matrix (area/6 diagonal, area/12 off-diagonal
    /// contributions per triangle).
    pub c: SparseSym,
    /// Lumped mass matrix diagonal (row sums of `c`).
    pub c_lumped: Vec<f64>,
    /// Stiffness matrix; row sums vanish.
    pub g: SparseSym,
}

impl FemMatrices {
    pub fn n(&self) -> usize {
        self.c_lumped.len()
    }

    pub fn total_area(&self) -> f64 {
        self.c_lumped.iter().sum()
    }
}

/// Assembles mass and stiffness matrices over a triangulation.
pub fn assemble_fem(mesh: &TriangulatedMesh) -> Result<FemMatrices> {
    let n = mesh.n_vertices();
    let mut c = SymTriplets::new(n);
    let mut g = SymTriplets::new(n);
    let mut c_lumped = vec![0.0; n];
    for t in 0..mesh.n_triangles() {
        let tri = mesh.triangle(t);
        let p = [
            mesh.vertex(tri[0]),
            mesh.vertex(tri[1]),
            mesh.vertex(tri[2]),
        ];
        let two_area = (p[1].x - p[0].x) * (p[2].y - p[0].y)
            - (p[1].y - p[0].y) * (p[2].x - p[0].x);
        let max_edge2 = (0..3)
            .map(|k| {
                let q = p[(k + 1) % 3];
                (p[k].x - q.x).powi(2) + (p[k].y - q.y).powi(2)
            })
            .fold(0.0f64, f64::max);
        if two_area <= 1e-12 * max_edge2 {
            return Err(Error::numerical(format!(
                "triangle {t} is degenerate (area {:.3e}); cannot assemble elements",
                two_area / 2.0
            )));
        }
        let area = two_area / 2.0;
        // edge vectors opposite each vertex give the basis gradients
        let b = [p[1].y - p[2].y, p[2].y - p[0].y, p[0].y - p[1].y];
        let e = [p[2].x - p[1].x, p[0].x - p[2].x, p[1].x - p[0].x];
        for i in 0..3 {
            c_lumped[tri[i]] += area / 3.0;
            for j in i..3 {
                let mass = if i == j { area / 6.0 } else { area / 12.0 };
                c.add_sym(tri[i], tri[j], mass);
                let stiff = (b[i] * b[j] + e[i] * e[j]) / (4.0 * area);
                g.add_sym(tri[i], tri[j], stiff);
            }
        }
    }
    Ok(FemMatrices {
        c: c.build()?,
        c_lumped,
        g: g.build()?,
    })
}

/// Precomputed matrices for fast precision assembly: stiffness `G` and
/// `G C^{-1} G` on a shared sparsity pattern, plus the lumped mass diagonal.
#[derive(Debug, Clone)]
pub struct MaternOperator {
    c_lumped: Vec<f64>,
    g: SparseSym,
    gg: SparseSym,
    merged: MergedPattern,
}

impl MaternOperator {
    pub fn new(fem: &FemMatrices) -> Result<Self> {
        let n = fem.n();
        let mut inv = SymTriplets::new(n);
        for (i, &m) in fem.c_lumped.iter().enumerate() {
            if !(m > 0.0) {
                return Err(Error::numerical(format!(
                    "lumped mass at vertex {i} is not positive ({m})"
                )));
            }
            inv.add(i, i, 1.0 / m);
        }
        let inv = inv.build()?;
        let gg = fem.g.triple_product(&inv)?;
        let pre = MergedPattern::new(&fem.g, &gg)?;
        let g = pre.combine(&fem.g, 1.0, &gg, 0.0);
        let gg = pre.combine(&fem.g, 0.0, &gg, 1.0);
        let merged = MergedPattern::new(&g, &gg)?;
        Ok(MaternOperator {
            c_lumped: fem.c_lumped.clone(),
            g,
            gg,
            merged,
        })
    }

    pub fn n(&self) -> usize {
        self.c_lumped.len()
    }

    /// Stationary precision `tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G)`.
    pub fn precision(&self, params: &MaternParams) -> Result<SparseSym> {
        let t2 = (2.0 * params.log_tau).exp();
        let k2 = (2.0 * params.log_kappa).exp();
        let mut q = self.merged.combine(&self.g, 2.0 * t2 * k2, &self.gg, t2);
        let diag: Vec<f64> = self.c_lumped.iter().map(|&m| t2 * k2 * k2 * m).collect();
        q.add_diag(&diag)?;
        Ok(q)
    }

    /// Precision with log tau varying by vertex: `T Q_1 T` where `Q_1` is
    /// the unit-tau stationary precision and `T = diag(exp(log_tau_field))`.
    pub fn precision_with_tau_field(
        &self,
        log_kappa: f64,
        log_tau_field: &[f64],
    ) -> Result<SparseSym> {
        if log_tau_field.len() != self.n() {
            return Err(Error::dimension(format!(
                "log tau field length {} does not match {} vertices",
                log_tau_field.len(),
                self.n()
            )));
        }
        let unit = self.precision(&MaternParams::new(0.0, log_kappa)?)?;
        let t: Vec<f64> = log_tau_field.iter().map(|v| v.exp()).collect();
        unit.diag_congruence(&t)
    }
}

/// Analytic Matern correlation at distance `h`:
/// `(kappa h)^nu K_nu(kappa h) / (Gamma(nu) 2^{nu-1})`.
pub fn matern_correlation(h: f64, kappa: f64, nu: f64) -> Result<f64> {
    if !(kappa > 0.0) || !(nu > 0.0) {
        return Err(Error::config(format!(
            "correlation needs kappa > 0 and nu > 0, got kappa = {kappa}, nu = {nu}"
        )));
    }
    if h < 0.0 {
        return Err(Error::config(format!("distance must be nonnegative, got {h}")));
    }
    if h < ZERO_DIST {
        return Ok(1.0);
    }
    let kh = kappa * h;
    let norm = (ln_gamma(nu) + (nu - 1.0) * std::f64::consts::LN_2).exp();
    Ok(kh.powf(nu) * bessel_k(nu, kh)? / norm)
}

/// Marginal standard deviation of the stationary field.
pub fn marginal_sigma(params: &MaternParams) -> f64 {
    let half_log = 0.5 * (ln_gamma(NU) - ln_gamma(ALPHA) - (DIM / 2.0) * (4.0 * std::f64::consts::PI).ln());
    (half_log - NU * params.log_kappa - params.log_tau).exp()
}

/// Correlation range: the distance where correlation drops near 0.13.
pub fn range_rho(params: &MaternParams) -> f64 {
    (8.0 * NU).sqrt() / params.kappa()
}

/// Log-scale parameters that realize marginal deviation `sigma` and
/// correlation range `rho`.
pub fn params_from_sigma_rho(sigma: f64, rho: f64) -> Result<MaternParams> {
    if !(sigma > 0.0) || !sigma.is_finite() || !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::config(format!(
            "sigma and rho must be positive and finite, got sigma = {sigma}, rho = {rho}"
        )));
    }
    let log_kappa = 0.5 * (8.0 * NU).ln() - rho.ln();
    let log_tau = 0.5
        * (ln_gamma(NU) - ln_gamma(ALPHA) - (DIM / 2.0) * (4.0 * std::f64::consts::PI).ln())
        - sigma.ln()
        - NU * log_kappa;
    MaternParams::new(log_tau, log_kappa)
}
