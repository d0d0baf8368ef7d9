//! Joint latent model assembly.
//!
//! Stacks the active components (random walk trend, zero-sum seasonal,
//! AR(2) cycle, Matern spatial field, fixed effects) into one latent
//! vector, builds the sparse observation design honoring missing data,
//! assembles the block diagonal prior precision, and computes the
//! Gaussian update of the latent field for fixed hyperparameters. Linear
//! restrictions (the seasonal sum) are applied by conditioning.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::ops::Range;
use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::cholesky::{LdlFactor, Ordering, PartialInverse, Symbolic};
use crate::error::{Error, Result};
use crate::mesh::{Point2D, Projector};
use crate::sparse::{MergedPattern, SparseRows, SparseSym, SymTriplets};
use crate::spde::{MaternOperator, MaternParams};
use crate::temporal::{
    ar2_precision, pacf_from_unconstrained, rw1_precision, seasonal_precision, CycleSpec,
    SeasonalSpec, TrendSpec,
};

/// Prior precision of every fixed effect coefficient (vague Gaussian).
pub const BETA_PRIOR_PRECISION: f64 = 0.001;

// ---------------------------------------------------------------------------
// dataset

/// Calendar quarter label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Period {
    pub year: i32,
    pub quarter: u8,
}

impl Period {
    pub fn new(year: i32, quarter: u8) -> Result<Self> {
        if !(1..=4).contains(&quarter) {
            return Err(Error::data(format!(
                "quarter must be 1..=4, got {quarter}"
            )));
        }
        Ok(Period { year, quarter })
    }

    /// The following quarter.
    pub fn succ(self) -> Period {
        if self.quarter == 4 {
            Period { year: self.year + 1, quarter: 1 }
        } else {
            Period { year: self.year, quarter: self.quarter + 1 }
        }
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}Q{}", self.year, self.quarter)
    }
}

/// One observation site with its static covariates.
#[derive(Debug, Clone)]
pub struct Station {
    pub id: String,
    pub location: Point2D,
    pub covariates: BTreeMap<String, f64>,
}

/// Station registry, contiguous quarterly time axis, and the observation
/// table with explicit missing entries (station major storage).
#[derive(Debug, Clone)]
pub struct Dataset {
    stations: Vec<Station>,
    times: Vec<Period>,
    values: Vec<Option<f64>>,
    pub variable: String,
}

impl Dataset {
    pub fn new(
        stations: Vec<Station>,
        times: Vec<Period>,
        values: Vec<Option<f64>>,
        variable: impl Into<String>,
    ) -> Result<Self> {
        if stations.is_empty() {
            return Err(Error::data("dataset needs at least one station".to_string()));
        }
        if times.is_empty() {
            return Err(Error::data("dataset needs at least one period".to_string()));
        }
        let mut seen = HashSet::new();
        for st in &stations {
            if st.id.is_empty() {
                return Err(Error::data("station with empty id".to_string()));
            }
            if !seen.insert(st.id.clone()) {
                return Err(Error::data(format!("duplicate station id {}", st.id)));
            }
            if !st.location.x.is_finite() || !st.location.y.is_finite() {
                return Err(Error::data(format!(
                    "station {} has non-finite coordinates",
                    st.id
                )));
            }
            for (name, v) in &st.covariates {
                if !v.is_finite() {
                    return Err(Error::data(format!(
                        "station {} covariate {name} is not finite",
                        st.id
                    )));
                }
            }
        }
        for k in 1..times.len() {
            if times[k] != times[k - 1].succ() {
                return Err(Error::data(format!(
                    "time axis not contiguous: {} follows {}",
                    times[k],
                    times[k - 1]
                )));
            }
        }
        if values.len() != stations.len() * times.len() {
            return Err(Error::dimension(format!(
                "observation table has {} cells, expected {} stations x {} periods = {}",
                values.len(),
                stations.len(),
                times.len(),
                stations.len() * times.len()
            )));
        }
        if let Some(v) = values.iter().flatten().find(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite observation value {v}")));
        }
        Ok(Dataset {
            stations,
            times,
            values,
            variable: variable.into(),
        })
    }

    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn station(&self, s: usize) -> &Station {
        &self.stations[s]
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn times(&self) -> &[Period] {
        &self.times
    }

    pub fn value(&self, station: usize, time: usize) -> Option<f64> {
        self.values[station * self.times.len() + time]
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn locations(&self) -> Vec<Point2D> {
        self.stations.iter().map(|s| s.location).collect()
    }

    /// Static covariate by name; latitude and longitude resolve to the
    /// station coordinates.
    pub fn covariate(&self, station: usize, name: &str) -> Option<f64> {
        let st = &self.stations[station];
        match name {
            "latitude" => Some(st.location.y),
            "longitude" => Some(st.location.x),
            _ => st.covariates.get(name).copied(),
        }
    }

    pub fn n_observed(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    /// Share of stations with a value in period `t`.
    pub fn observed_share_at(&self, t: usize) -> f64 {
        let n = (0..self.n_stations())
            .filter(|&s| self.value(s, t).is_some())
            .count();
        n as f64 / self.n_stations() as f64
    }
}

// ---------------------------------------------------------------------------
// model specification

/// Time structure of the spatial random effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialMode {
    Off,
    /// One field shared by every period.
    Constant,
    /// Independent field replicate per period.
    IidReplicates,
}

/// Which latent components are active.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub trend: bool,
    /// Explicit constant mean; replaces the trend block.
    pub intercept: bool,
    /// Season length when the seasonal block is active.
    pub seasonal: Option<usize>,
    pub cycle: bool,
    pub spatial: SpatialMode,
    pub covariates: Vec<String>,
    /// Extra coefficients for spatially varying log tau (0 = stationary).
    pub n_tau_basis: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            trend: true,
            intercept: false,
            seasonal: Some(4),
            cycle: true,
            spatial: SpatialMode::Constant,
            covariates: Vec::new(),
            n_tau_basis: 0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let any = self.trend
            || self.intercept
            || self.seasonal.is_some()
            || self.cycle
            || self.spatial != SpatialMode::Off
            || !self.covariates.is_empty();
        if !any {
            return Err(Error::config("model has no active components".to_string()));
        }
        if self.trend && self.intercept {
            return Err(Error::config(
                "trend and intercept are mutually exclusive; the random walk level absorbs the mean"
                    .to_string(),
            ));
        }
        if let Some(m) = self.seasonal {
            if m < 2 {
                return Err(Error::config(format!(
                    "seasonal period must be at least 2, got {m}"
                )));
            }
        }
        if self.n_tau_basis > 0 && self.spatial == SpatialMode::Off {
            return Err(Error::config(
                "nonstationary tau basis requires an active spatial component".to_string(),
            ));
        }
        let mut seen = HashSet::new();
        for c in &self.covariates {
            if !seen.insert(c.clone()) {
                return Err(Error::config(format!("duplicate covariate {c}")));
            }
        }
        Ok(())
    }
}

/// Hyperparameter values on the internal (unconstrained) scale. Entries
/// are present exactly for the active components.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub log_prec_gauss: f64,
    pub log_prec_trend: Option<f64>,
    pub log_prec_seasonal: Option<f64>,
    pub log_prec_cycle: Option<f64>,
    pub z_pacf1: Option<f64>,
    pub z_pacf2: Option<f64>,
    pub log_tau: Option<f64>,
    pub log_kappa: Option<f64>,
    pub theta_tau_extra: Vec<f64>,
}

impl HyperParams {
    /// Checks each entry is present exactly when its component is active,
    /// and that every value is finite.
    pub fn validate_for(&self, spec: &ModelSpec) -> Result<()> {
        fn check(name: &str, active: bool, value: Option<f64>) -> Result<()> {
            match (active, value) {
                (true, None) => Err(Error::config(format!(
                    "hyperparameter {name} missing for an active component"
                ))),
                (false, Some(_)) => Err(Error::config(format!(
                    "hyperparameter {name} supplied for an inactive component"
                ))),
                (true, Some(v)) if !v.is_finite() => {
                    Err(Error::config(format!("hyperparameter {name} is not finite")))
                }
                _ => Ok(()),
            }
        }
        if !self.log_prec_gauss.is_finite() {
            return Err(Error::config("log_prec_gauss is not finite".to_string()));
        }
        check("log_prec_trend", spec.trend, self.log_prec_trend)?;
        check("log_prec_seasonal", spec.seasonal.is_some(), self.log_prec_seasonal)?;
        check("log_prec_cycle", spec.cycle, self.log_prec_cycle)?;
        check("z_pacf1", spec.cycle, self.z_pacf1)?;
        check("z_pacf2", spec.cycle, self.z_pacf2)?;
        let spatial = spec.spatial != SpatialMode::Off;
        check("log_tau", spatial, self.log_tau)?;
        check("log_kappa", spatial, self.log_kappa)?;
        if self.theta_tau_extra.len() != spec.n_tau_basis {
            return Err(Error::config(format!(
                "theta_tau_extra has {} entries, spec declares {}",
                self.theta_tau_extra.len(),
                spec.n_tau_basis
            )));
        }
        if let Some(v) = self.theta_tau_extra.iter().find(|v| !v.is_finite()) {
            return Err(Error::config(format!("theta_tau_extra entry {v} is not finite")));
        }
        Ok(())
    }

    /// Cycle partial autocorrelations on the natural scale.
    pub fn pacf(&self) -> Option<(f64, f64)> {
        match (self.z_pacf1, self.z_pacf2) {
            (Some(z1), Some(z2)) => Some((
                pacf_from_unconstrained(z1),
                pacf_from_unconstrained(z2),
            )),
            _ => None,
        }
    }
}

/// Reporting transform for one hyperparameter coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaScale {
    /// Internal log precision; reported as a precision.
    LogPrecision,
    /// Unconstrained partial autocorrelation; reported inside (-1, 1).
    Pacf,
    /// Reported unchanged.
    Identity,
}

impl ThetaScale {
    pub fn to_user(self, v: f64) -> f64 {
        match self {
            ThetaScale::LogPrecision => v.exp(),
            ThetaScale::Pacf => pacf_from_unconstrained(v),
            ThetaScale::Identity => v,
        }
    }
}

/// Fixed ordering of the free hyperparameter vector for a model
/// specification, with display names and reporting scales.
#[derive(Debug, Clone)]
pub struct ThetaLayout {
    spec: ModelSpec,
    names: Vec<String>,
    scales: Vec<ThetaScale>,
}

impl ThetaLayout {
    pub fn for_spec(spec: &ModelSpec) -> Result<ThetaLayout> {
        spec.validate()?;
        let mut names = vec!["Precision Gaussian".to_string()];
        let mut scales = vec![ThetaScale::LogPrecision];
        if spec.trend {
            names.push("Precision RW".to_string());
            scales.push(ThetaScale::LogPrecision);
        }
        if spec.seasonal.is_some() {
            names.push("Precision Seasonal".to_string());
            scales.push(ThetaScale::LogPrecision);
        }
        if spec.cycle {
            names.push("Precision Cycle".to_string());
            scales.push(ThetaScale::LogPrecision);
            names.push("PACF1".to_string());
            scales.push(ThetaScale::Pacf);
            names.push("PACF2".to_string());
            scales.push(ThetaScale::Pacf);
        }
        if spec.spatial != SpatialMode::Off {
            names.push("log tau".to_string());
            scales.push(ThetaScale::Identity);
            names.push("log kappa".to_string());
            scales.push(ThetaScale::Identity);
        }
        for k in 0..spec.n_tau_basis {
            names.push(format!("Theta{} tau", k + 2));
            scales.push(ThetaScale::Identity);
        }
        Ok(ThetaLayout {
            spec: spec.clone(),
            names,
            scales,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn scale(&self, j: usize) -> ThetaScale {
        self.scales[j]
    }

    pub fn pack(&self, h: &HyperParams) -> Result<Vec<f64>> {
        h.validate_for(&self.spec)?;
        let mut v = vec![h.log_prec_gauss];
        if self.spec.trend {
            v.push(h.log_prec_trend.unwrap());
        }
        if self.spec.seasonal.is_some() {
            v.push(h.log_prec_seasonal.unwrap());
        }
        if self.spec.cycle {
            v.push(h.log_prec_cycle.unwrap());
            v.push(h.z_pacf1.unwrap());
            v.push(h.z_pacf2.unwrap());
        }
        if self.spec.spatial != SpatialMode::Off {
            v.push(h.log_tau.unwrap());
            v.push(h.log_kappa.unwrap());
        }
        v.extend_from_slice(&h.theta_tau_extra);
        Ok(v)
    }

    pub fn unpack(&self, v: &[f64]) -> Result<HyperParams> {
        if v.len() != self.len() {
            return Err(Error::dimension(format!(
                "theta vector has {} entries, layout needs {}",
                v.len(),
                self.len()
            )));
        }
        let mut it = v.iter().copied();
        let mut next = || it.next().unwrap();
        let log_prec_gauss = next();
        let log_prec_trend = self.spec.trend.then(&mut next);
        let log_prec_seasonal = self.spec.seasonal.is_some().then(&mut next);
        let (log_prec_cycle, z_pacf1, z_pacf2) = if self.spec.cycle {
            (Some(next()), Some(next()), Some(next()))
        } else {
            (None, None, None)
        };
        let (log_tau, log_kappa) = if self.spec.spatial != SpatialMode::Off {
            (Some(next()), Some(next()))
        } else {
            (None, None)
        };
        let theta_tau_extra: Vec<f64> = (0..self.spec.n_tau_basis).map(|_| next()).collect();
        Ok(HyperParams {
            log_prec_gauss,
            log_prec_trend,
            log_prec_seasonal,
            log_prec_cycle,
            z_pacf1,
            z_pacf2,
            log_tau,
            log_kappa,
            theta_tau_extra,
        })
    }
}

// ---------------------------------------------------------------------------
// latent layout and design

/// Index ranges of each latent block inside the stacked vector.
#[derive(Debug, Clone)]
pub struct LatentLayout {
    pub n: usize,
    pub t_len: usize,
    pub n_vertices: usize,
    pub trend: Option<Range<usize>>,
    pub seasonal: Option<Range<usize>>,
    pub cycle: Option<Range<usize>>,
    pub spatial: Option<Range<usize>>,
    pub betas: Range<usize>,
    pub beta_names: Vec<String>,
    pub spatial_mode: SpatialMode,
    pub seasonal_period: Option<usize>,
}

impl LatentLayout {
    /// Spatial sub-range for period `t` (the whole block in constant mode).
    pub fn spatial_slice(&self, t: usize) -> Option<Range<usize>> {
        let sp = self.spatial.clone()?;
        match self.spatial_mode {
            SpatialMode::Off => None,
            SpatialMode::Constant => Some(sp),
            SpatialMode::IidReplicates => {
                let start = sp.start + t * self.n_vertices;
                Some(start..start + self.n_vertices)
            }
        }
    }
}

/// Sparse linear restriction `sum(coef * x[index]) = value`.
#[derive(Debug, Clone)]
pub struct Constraint {
    pub entries: Vec<(usize, f64)>,
    pub value: f64,
}

/// Per-vertex basis columns for spatially varying log tau.
#[derive(Debug, Clone)]
pub struct TauBasis {
    columns: Vec<Vec<f64>>,
}

impl TauBasis {
    pub fn new(columns: Vec<Vec<f64>>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::config("tau basis needs at least one column".to_string()));
        }
        let n = columns[0].len();
        for (k, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(Error::dimension(format!(
                    "tau basis column {k} has {} entries, expected {n}",
                    col.len()
                )));
            }
            if let Some(v) = col.iter().find(|v| !v.is_finite()) {
                return Err(Error::data(format!(
                    "tau basis column {k} has non-finite entry {v}"
                )));
            }
        }
        Ok(TauBasis { columns })
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.columns[0].len()
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.columns[k]
    }

    /// Per-vertex log tau field `intercept + sum_k coef_k * column_k`.
    pub fn log_tau_field(&self, intercept: f64, coef: &[f64]) -> Result<Vec<f64>> {
        if coef.len() != self.columns.len() {
            return Err(Error::dimension(format!(
                "{} coefficients for {} basis columns",
                coef.len(),
                self.columns.len()
            )));
        }
        let mut field = vec![intercept; self.n_vertices()];
        for (c, col) in coef.iter().zip(&self.columns) {
            for (f, b) in field.iter_mut().zip(col) {
                *f += c * b;
            }
        }
        Ok(field)
    }
}

/// Assembled observation model: latent layout, sparse design over the
/// non-missing observations, their values, and linear restrictions.
#[derive(Debug, Clone)]
pub struct JointGmrf {
    pub layout: LatentLayout,
    pub design: SparseRows,
    /// (station, time) per design row.
    pub obs_index: Vec<(usize, usize)>,
    /// Observed values aligned with the design rows.
    pub y: Vec<f64>,
    pub constraints: Vec<Constraint>,
    spec: ModelSpec,
    ata: SparseSym,
    seasonal_struct_half_logdet: f64,
    merged: OnceLock<MergedPattern>,
}

/// Builds the latent layout and observation design for a dataset. The
/// projector must map stations (rows) onto mesh vertices and is required
/// exactly when the spatial component is active.
pub fn build_design(
    dataset: &Dataset,
    spec: &ModelSpec,
    projector: Option<&Projector>,
) -> Result<JointGmrf> {
    spec.validate()?;
    let t_len = dataset.n_times();
    if spec.trend && t_len < 2 {
        return Err(Error::dimension(format!(
            "trend needs at least 2 periods, got {t_len}"
        )));
    }
    if let Some(m) = spec.seasonal {
        if t_len < m {
            return Err(Error::dimension(format!(
                "seasonal period {m} exceeds {t_len} periods"
            )));
        }
    }
    let proj = match spec.spatial {
        SpatialMode::Off => {
            if projector.is_some() {
                return Err(Error::config(
                    "projector supplied but the spatial component is off".to_string(),
                ));
            }
            None
        }
        _ => {
            let p = projector.ok_or_else(|| {
                Error::config("spatial component active but no projector supplied".to_string())
            })?;
            if p.nrows() != dataset.n_stations() {
                return Err(Error::dimension(format!(
                    "projector has {} rows for {} stations",
                    p.nrows(),
                    dataset.n_stations()
                )));
            }
            Some(p)
        }
    };
    let n_vertices = proj.map_or(0, |p| p.ncols());

    let mut cursor = 0usize;
    let mut range = |len: usize| {
        let r = cursor..cursor + len;
        cursor += len;
        r
    };
    let trend = spec.trend.then(|| range(t_len));
    let seasonal = spec.seasonal.map(|_| range(t_len));
    let cycle = spec.cycle.then(|| range(t_len));
    let spatial = match spec.spatial {
        SpatialMode::Off => None,
        SpatialMode::Constant => Some(range(n_vertices)),
        SpatialMode::IidReplicates => Some(range(n_vertices * t_len)),
    };
    let mut beta_names = Vec::new();
    if spec.intercept {
        beta_names.push("(Intercept)".to_string());
    }
    beta_names.extend(spec.covariates.iter().cloned());
    let betas = range(beta_names.len());
    let layout = LatentLayout {
        n: cursor,
        t_len,
        n_vertices,
        trend,
        seasonal,
        cycle,
        spatial,
        betas,
        beta_names,
        spatial_mode: spec.spatial,
        seasonal_period: spec.seasonal,
    };

    let mut design = SparseRows::new(layout.n);
    let mut obs_index = Vec::new();
    let mut y = Vec::new();
    for s in 0..dataset.n_stations() {
        for t in 0..t_len {
            let Some(v) = dataset.value(s, t) else {
                continue;
            };
            let mut row: Vec<(usize, f64)> = Vec::new();
            if let Some(r) = &layout.trend {
                row.push((r.start + t, 1.0));
            }
            if let Some(r) = &layout.seasonal {
                row.push((r.start + t, 1.0));
            }
            if let Some(r) = &layout.cycle {
                row.push((r.start + t, 1.0));
            }
            if let Some(slice) = layout.spatial_slice(t) {
                let p = proj.unwrap();
                for &(vtx, w) in p.row(s) {
                    row.push((slice.start + vtx, w));
                }
            }
            let mut beta_idx = layout.betas.start;
            if spec.intercept {
                row.push((beta_idx, 1.0));
                beta_idx += 1;
            }
            for name in &spec.covariates {
                let value = dataset.covariate(s, name).ok_or_else(|| {
                    Error::data(format!(
                        "station {} lacks covariate {name}",
                        dataset.station(s).id
                    ))
                })?;
                row.push((beta_idx, value));
                beta_idx += 1;
            }
            design.push_row(row);
            obs_index.push((s, t));
            y.push(v);
        }
    }

    let mut constraints = Vec::new();
    if let Some(r) = &layout.seasonal {
        constraints.push(Constraint {
            entries: r.clone().map(|i| (i, 1.0)).collect(),
            value: 0.0,
        });
    }

    let ata = design.normal_matrix()?;
    let seasonal_struct_half_logdet = match spec.seasonal {
        Some(m) => seasonal_structure_half_logdet(t_len, m)?,
        None => 0.0,
    };
    Ok(JointGmrf {
        layout,
        design,
        obs_index,
        y,
        constraints,
        spec: spec.clone(),
        ata,
        seasonal_struct_half_logdet,
        merged: OnceLock::new(),
    })
}

/// Half log determinant of the full-row-rank window-sum structure: the
/// seasonal penalty matrix is D'D where row t of D sums states t..t+m-1,
/// and its generalized determinant equals det(D D').
fn seasonal_structure_half_logdet(t_len: usize, m: usize) -> Result<f64> {
    let k = t_len - m + 1;
    let mut dd = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let overlap = m as i64 - (i as i64 - j as i64).abs();
            if overlap > 0 {
                dd[(i, j)] = overlap as f64;
            }
        }
    }
    let chol = dd
        .cholesky()
        .ok_or_else(|| Error::numerical("seasonal structure matrix is not positive definite".to_string()))?;
    Ok(chol.l().diagonal().iter().map(|v| v.ln()).sum())
}

/// Prior precision plus the generalized log determinant bookkeeping
/// needed for the hyperparameter posterior.
#[derive(Debug, Clone)]
pub struct PriorModel {
    pub precision: SparseSym,
    /// Half log generalized determinant (product of nonzero eigenvalues).
    pub half_log_gdet: f64,
    /// Rank of the prior precision (latent dimension minus deficiencies).
    pub rank: usize,
}

impl JointGmrf {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n_obs(&self) -> usize {
        self.design.nrows()
    }

    pub fn normal_matrix(&self) -> &SparseSym {
        &self.ata
    }

    /// Block diagonal prior precision with its generalized log
    /// determinant. The Matern operator is required exactly when the
    /// spatial component is active, the tau basis exactly when the
    /// nonstationary coefficients are declared.
    pub fn prior(
        &self,
        hyper: &HyperParams,
        matern: Option<&MaternOperator>,
        tau_basis: Option<&TauBasis>,
    ) -> Result<PriorModel> {
        hyper.validate_for(&self.spec)?;
        let t_len = self.layout.t_len;
        let mut tri = SymTriplets::new(self.layout.n);
        let mut half_log_gdet = 0.0;
        let mut rank = 0usize;

        if let Some(r) = &self.layout.trend {
            let prec = hyper.log_prec_trend.unwrap().exp();
            let q = rw1_precision(&TrendSpec::new(t_len, prec)?);
            insert_block(&mut tri, &q, r.start);
            // nonzero eigenvalues of the path graph structure multiply to T
            half_log_gdet +=
                0.5 * ((t_len as f64 - 1.0) * prec.ln() + (t_len as f64).ln());
            rank += t_len - 1;
        }
        if let Some(r) = &self.layout.seasonal {
            let m = self.layout.seasonal_period.unwrap();
            let prec = hyper.log_prec_seasonal.unwrap().exp();
            let q = seasonal_precision(&SeasonalSpec::new(t_len, m, prec)?);
            insert_block(&mut tri, &q, r.start);
            let k = t_len - m + 1;
            half_log_gdet += 0.5 * (k as f64) * prec.ln() + self.seasonal_struct_half_logdet;
            rank += k;
        }
        if let Some(r) = &self.layout.cycle {
            let prec = hyper.log_prec_cycle.unwrap().exp();
            let (p1, p2) = hyper.pacf().unwrap();
            let q = ar2_precision(&CycleSpec::new(t_len, p1, p2, prec)?)?;
            insert_block(&mut tri, &q, r.start);
            // stationary AR(2) determinant via prediction variances
            half_log_gdet += 0.5
                * ((t_len as f64) * prec.ln()
                    + (1.0 - p1 * p1).ln()
                    + 2.0 * (1.0 - p2 * p2).ln());
            rank += t_len;
        }
        if let Some(r) = &self.layout.spatial {
            let op = matern.ok_or_else(|| {
                Error::config("spatial component active but no Matern operator supplied".to_string())
            })?;
            if op.n() != self.layout.n_vertices {
                return Err(Error::dimension(format!(
                    "Matern operator over {} vertices, projector has {}",
                    op.n(),
                    self.layout.n_vertices
                )));
            }
            let log_tau = hyper.log_tau.unwrap();
            let log_kappa = hyper.log_kappa.unwrap();
            let q_s = if self.spec.n_tau_basis > 0 {
                let basis = tau_basis.ok_or_else(|| {
                    Error::config(
                        "nonstationary coefficients declared but no tau basis supplied".to_string(),
                    )
                })?;
                if basis.n_columns() != self.spec.n_tau_basis {
                    return Err(Error::dimension(format!(
                        "tau basis has {} columns, spec declares {}",
                        basis.n_columns(),
                        self.spec.n_tau_basis
                    )));
                }
                if basis.n_vertices() != self.layout.n_vertices {
                    return Err(Error::dimension(format!(
                        "tau basis over {} vertices, mesh has {}",
                        basis.n_vertices(),
                        self.layout.n_vertices
                    )));
                }
                let field = basis.log_tau_field(log_tau, &hyper.theta_tau_extra)?;
                op.precision_with_tau_field(log_kappa, &field)?
            } else {
                if tau_basis.is_some() {
                    return Err(Error::config(
                        "tau basis supplied but spec declares no nonstationary coefficients"
                            .to_string(),
                    ));
                }
                op.precision(&MaternParams::new(log_tau, log_kappa)?)?
            };
            let factor = crate::cholesky::factor(&q_s, Ordering::Rcm)?;
            let reps = match self.layout.spatial_mode {
                SpatialMode::Constant => 1,
                SpatialMode::IidReplicates => t_len,
                SpatialMode::Off => unreachable!(),
            };
            for rep in 0..reps {
                insert_block(&mut tri, &q_s, r.start + rep * self.layout.n_vertices);
            }
            half_log_gdet += 0.5 * factor.log_det() * reps as f64;
            rank += self.layout.n_vertices * reps;
        }
        for i in self.layout.betas.clone() {
            tri.add(i, i, BETA_PRIOR_PRECISION);
            half_log_gdet += 0.5 * BETA_PRIOR_PRECISION.ln();
            rank += 1;
        }
        Ok(PriorModel {
            precision: tri.build()?,
            half_log_gdet,
            rank,
        })
    }

    /// Prior precision only; see [`JointGmrf::prior`].
    pub fn prior_precision(
        &self,
        hyper: &HyperParams,
        matern: Option<&MaternOperator>,
        tau_basis: Option<&TauBasis>,
    ) -> Result<SparseSym> {
        Ok(self.prior(hyper, matern, tau_basis)?.precision)
    }

    /// Merged sparsity pattern of prior plus normal matrix, cached after
    /// the first posterior evaluation.
    fn merged_pattern(&self, prior: &SparseSym) -> Result<&MergedPattern> {
        if self.merged.get().is_none() {
            let m = MergedPattern::new(prior, &self.ata)?;
            let _ = self.merged.set(m);
        }
        Ok(self.merged.get().unwrap())
    }
}

fn insert_block(tri: &mut SymTriplets, block: &SparseSym, offset: usize) {
    for i in 0..block.n() {
        for (j, v) in block.row(i) {
            tri.add(offset + i, offset + j, v);
        }
    }
}

// ---------------------------------------------------------------------------
// gaussian posterior

/// Conditioning data for the linear restrictions: `w = Q^{-1} A'`, the
/// small dense `S = A Q^{-1} A'`, its inverse, and the residual
/// `g = A mean - e` of the unconstrained mean.
#[derive(Debug, Clone)]
pub struct ConstraintCorrection {
    pub w: Vec<Vec<f64>>,
    pub s_inv: DMatrix<f64>,
    pub g: Vec<f64>,
    pub half_log_det_s: f64,
}

/// Gaussian update of the latent field at fixed hyperparameters.
#[derive(Debug)]
pub struct Posterior {
    /// Mean after applying the linear restrictions.
    pub mean: Vec<f64>,
    pub unconstrained_mean: Vec<f64>,
    pub factor: LdlFactor,
    pub half_log_det_post: f64,
    pub constraint: Option<ConstraintCorrection>,
    pub log_prec_gauss: f64,
}

/// Computes the Gaussian posterior of the latent field. Restrictions
/// recorded on the model are applied to mean and covariance by
/// conditioning on `A x = e`.
pub fn gaussian_posterior(
    gmrf: &JointGmrf,
    prior: &SparseSym,
    y: &[f64],
    log_prec_gauss: f64,
) -> Result<Posterior> {
    posterior_impl(gmrf, prior, y, log_prec_gauss, None)
}

/// As [`gaussian_posterior`] but reusing a symbolic factorization of the
/// posterior pattern across calls.
pub fn gaussian_posterior_with(
    gmrf: &JointGmrf,
    prior: &SparseSym,
    y: &[f64],
    log_prec_gauss: f64,
    symbolic: &Symbolic,
) -> Result<Posterior> {
    posterior_impl(gmrf, prior, y, log_prec_gauss, Some(symbolic))
}

/// Posterior precision matrix `prior + exp(lpg) A'A` on the merged
/// pattern; exposed for symbolic analysis reuse.
pub fn posterior_precision(
    gmrf: &JointGmrf,
    prior: &SparseSym,
    log_prec_gauss: f64,
) -> Result<SparseSym> {
    let merged = gmrf.merged_pattern(prior)?;
    Ok(merged.combine(prior, 1.0, &gmrf.ata, log_prec_gauss.exp()))
}

fn posterior_impl(
    gmrf: &JointGmrf,
    prior: &SparseSym,
    y: &[f64],
    log_prec_gauss: f64,
    symbolic: Option<&Symbolic>,
) -> Result<Posterior> {
    if y.len() != gmrf.design.nrows() {
        return Err(Error::dimension(format!(
            "{} observations for {} design rows",
            y.len(),
            gmrf.design.nrows()
        )));
    }
    if prior.n() != gmrf.layout.n {
        return Err(Error::dimension(format!(
            "prior dimension {} does not match latent dimension {}",
            prior.n(),
            gmrf.layout.n
        )));
    }
    if !log_prec_gauss.is_finite() {
        return Err(Error::config(format!(
            "log_prec_gauss must be finite, got {log_prec_gauss}"
        )));
    }
    let prec = log_prec_gauss.exp();
    let q_post = posterior_precision(gmrf, prior, log_prec_gauss)?;
    let factor = match symbolic {
        Some(s) => s.factor(&q_post)?,
        None => crate::cholesky::factor(&q_post, Ordering::Rcm)?,
    };
    let mut rhs = gmrf.design.t_mul_vec(y);
    for v in &mut rhs {
        *v *= prec;
    }
    let unconstrained_mean = factor.solve(&rhs);
    let half_log_det_post = 0.5 * factor.log_det();

    let (mean, constraint) = if gmrf.constraints.is_empty() {
        (unconstrained_mean.clone(), None)
    } else {
        let c = gmrf.constraints.len();
        let n = gmrf.layout.n;
        let mut w = Vec::with_capacity(c);
        for con in &gmrf.constraints {
            let mut a = vec![0.0; n];
            for &(i, v) in &con.entries {
                a[i] += v;
            }
            w.push(factor.solve(&a));
        }
        let mut s = DMatrix::zeros(c, c);
        for (j, con) in gmrf.constraints.iter().enumerate() {
            for (i, wi) in w.iter().enumerate() {
                s[(i, j)] = con.entries.iter().map(|&(k, v)| v * wi[k]).sum();
            }
        }
        let chol = s.clone().cholesky().ok_or_else(|| {
            Error::numerical(
                "restriction system A Q^{-1} A' is not positive definite; restrictions may be redundant"
                    .to_string(),
            )
        })?;
        let half_log_det_s: f64 = chol.l().diagonal().iter().map(|v: &f64| v.ln()).sum();
        let s_inv = chol.inverse();
        let g: Vec<f64> = gmrf
            .constraints
            .iter()
            .map(|con| {
                con.entries
                    .iter()
                    .map(|&(k, v)| v * unconstrained_mean[k])
                    .sum::<f64>()
                    - con.value
            })
            .collect();
        let mut mean = unconstrained_mean.clone();
        for i in 0..n {
            let mut corr = 0.0;
            for (a, wa) in w.iter().enumerate() {
                for (b, gb) in g.iter().enumerate() {
                    corr += wa[i] * s_inv[(a, b)] * gb;
                }
            }
            mean[i] -= corr;
        }
        (
            mean,
            Some(ConstraintCorrection {
                w,
                s_inv,
                g,
                half_log_det_s,
            }),
        )
    };
    Ok(Posterior {
        mean,
        unconstrained_mean,
        factor,
        half_log_det_post,
        constraint,
        log_prec_gauss,
    })
}

impl Posterior {
    /// Selected inverse of the posterior precision (unrestricted).
    pub fn partial_inverse(&self) -> PartialInverse {
        self.factor.partial_inverse()
    }

    /// Marginal variances after the linear restrictions.
    pub fn marginal_variances(&self, pinv: &PartialInverse) -> Vec<f64> {
        let mut var = pinv.diag();
        if let Some(cc) = &self.constraint {
            let c = cc.w.len();
            for (i, v) in var.iter_mut().enumerate() {
                let mut corr = 0.0;
                for a in 0..c {
                    for b in 0..c {
                        corr += cc.w[a][i] * cc.s_inv[(a, b)] * cc.w[b][i];
                    }
                }
                *v -= corr;
                if *v < 0.0 && *v > -1e-10 {
                    *v = 0.0;
                }
            }
        }
        var
    }

    /// Posterior covariance entry on the factor pattern, with the
    /// restriction correction; `None` when outside the computed pattern.
    pub fn covariance_on_pattern(
        &self,
        pinv: &PartialInverse,
        i: usize,
        j: usize,
    ) -> Option<f64> {
        let base = pinv.get(i, j)?;
        let corr = match &self.constraint {
            None => 0.0,
            Some(cc) => {
                let c = cc.w.len();
                let mut acc = 0.0;
                for a in 0..c {
                    for b in 0..c {
                        acc += cc.w[a][i] * cc.s_inv[(a, b)] * cc.w[b][j];
                    }
                }
                acc
            }
        };
        Some(base - corr)
    }

    /// Mahalanobis part `g' S^{-1} g` of the restricted density at the
    /// restricted mean.
    pub fn constraint_quadratic(&self) -> f64 {
        match &self.constraint {
            None => 0.0,
            Some(cc) => {
                let c = cc.g.len();
                let mut acc = 0.0;
                for a in 0..c {
                    for b in 0..c {
                        acc += cc.g[a] * cc.s_inv[(a, b)] * cc.g[b];
                    }
                }
                acc
            }
        }
    }
}
