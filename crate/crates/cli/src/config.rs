//! Flat `key = value` run configuration: parsing, key validation, typed
//! accessors, and the canonical content hash stamped on outputs.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use stdecomp::error::{Error, Result};
use stdecomp::inference::{InferenceOptions, PriorSet, ThetaPrior};
use stdecomp::model::{ModelSpec, Period, SpatialMode, ThetaLayout};

/// Exact keys a configuration may define. `prior_*` and `raster_*`
/// families are validated separately.
pub const KNOWN_KEYS: &[&str] = &[
    // ingestion
    "input",
    "variable",
    "aggregation",
    "min_months_mean",
    // model
    "trend",
    "intercept",
    "seasonal",
    "cycle",
    "spatial",
    "covariates",
    "tau_basis",
    // mesh
    "mesh_max_edge_inner",
    "mesh_max_edge_outer",
    "mesh_extension",
    // inference
    "gradient_tol",
    "max_iterations",
    "grid_step",
    "grid_cutoff",
    // simulation
    "seed",
    "sim_stations",
    "sim_t_len",
    "sim_missing",
    "sim_start",
    "sim_beta",
    "sim_prec_gauss",
    "sim_prec_trend",
    "sim_prec_seasonal",
    "sim_prec_cycle",
    "sim_pacf1",
    "sim_pacf2",
    "sim_sigma",
    "sim_rho",
    "sim_theta_tau",
    "sim_domain",
    // prediction and forecasting
    "grid_xmin",
    "grid_xmax",
    "grid_ymin",
    "grid_ymax",
    "grid_nx",
    "grid_ny",
    "grid_time",
    "horizon",
];

const KEY_PREFIXES: &[&str] = &["prior_", "raster_"];

/// Parsed configuration plus the sha256 hash of its canonical form.
#[derive(Debug, Clone)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
    pub hash: String,
}

impl RunConfig {
    /// Reads and validates a config file. Lines are `key = value`; blank
    /// lines and `#` comments are skipped; keys must be known and unique.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("config line {lineno} is not `key = value`: {line}"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::config(format!("config line {lineno} has an empty key")));
            }
            if !known_key(key) {
                return Err(Error::config(format!(
                    "unknown config key {key} (line {lineno})"
                )));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::config(format!(
                    "duplicate config key {key} (line {lineno})"
                )));
            }
        }
        let hash = hash_entries(&entries);
        Ok(RunConfig { entries, hash })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::config(format!("config key {key} is required")))
    }

    /// Sorted `key = value` lines, the form the hash is computed over.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn f64_opt(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => {
                let x: f64 = v.parse().map_err(|_| bad_value(key, v, "a number"))?;
                if !x.is_finite() {
                    return Err(bad_value(key, v, "a finite number"));
                }
                Ok(Some(x))
            }
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.f64_opt(key)?.unwrap_or(default))
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        self.f64_opt(key)?
            .ok_or_else(|| Error::config(format!("config key {key} is required")))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad_value(key, v, "a non-negative integer")),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad_value(key, v, "a non-negative integer")),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(bad_value(key, v, "true or false")),
        }
    }

    /// Whitespace-separated list; a missing key is an empty list.
    pub fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .map(|v| v.split_whitespace().map(str::to_string).collect())
            .unwrap_or_default()
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.list(key)
            .iter()
            .map(|v| {
                let x: f64 = v.parse().map_err(|_| bad_value(key, v, "a number"))?;
                if !x.is_finite() {
                    return Err(bad_value(key, v, "a finite number"));
                }
                Ok(x)
            })
            .collect()
    }

    pub fn period_or(&self, key: &str, default: Period) -> Result<Period> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => parse_period(v),
        }
    }

    /// Model structure from the `trend`/`intercept`/`seasonal`/`cycle`/
    /// `spatial`/`covariates`/`tau_basis` keys.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let seasonal = self.usize_or("seasonal", 4)?;
        let spatial = match self.get("spatial").unwrap_or("constant") {
            "off" => SpatialMode::Off,
            "constant" => SpatialMode::Constant,
            "replicates" => SpatialMode::IidReplicates,
            v => return Err(bad_value("spatial", v, "off, constant, or replicates")),
        };
        let spec = ModelSpec {
            trend: self.bool_or("trend", true)?,
            intercept: self.bool_or("intercept", false)?,
            seasonal: (seasonal > 0).then_some(seasonal),
            cycle: self.bool_or("cycle", true)?,
            spatial,
            covariates: self.list("covariates"),
            n_tau_basis: self.usize_or("tau_basis", 0)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Mesh refinement sizes: inner edge bound, outer edge bound, and the
    /// extension margin.
    pub fn mesh_params(&self) -> Result<(f64, f64, f64)> {
        let inner = self.f64_or("mesh_max_edge_inner", 0.5)?;
        let outer = self.f64_or("mesh_max_edge_outer", 2.0 * inner)?;
        let margin = self.f64_or("mesh_extension", outer)?;
        Ok((inner, outer, margin))
    }

    pub fn inference_options(&self) -> Result<InferenceOptions> {
        let mut opts = InferenceOptions::default();
        if let Some(v) = self.f64_opt("gradient_tol")? {
            opts.gradient_tol = v;
        }
        opts.max_iterations = self.usize_or("max_iterations", opts.max_iterations)?;
        if let Some(v) = self.f64_opt("grid_step")? {
            opts.grid_step = v;
        }
        if let Some(v) = self.f64_opt("grid_cutoff")? {
            opts.grid_cutoff = v;
        }
        Ok(opts)
    }

    /// Default priors with `prior_<slug>` overrides applied; every
    /// override must name a hyperparameter of this model.
    pub fn priors(&self, layout: &ThetaLayout) -> Result<PriorSet> {
        let mut priors = PriorSet::default_for(layout)?;
        let slugs: Vec<String> = layout.names().iter().map(|n| slug(n)).collect();
        for key in self.entries.keys() {
            let Some(suffix) = key.strip_prefix("prior_") else {
                continue;
            };
            let j = slugs.iter().position(|s| s == suffix).ok_or_else(|| {
                Error::config(format!(
                    "prior override {key} matches no hyperparameter; expected one of: {}",
                    slugs
                        .iter()
                        .map(|s| format!("prior_{s}"))
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })?;
            priors.set(j, parse_prior(key, &self.entries[key])?)?;
        }
        Ok(priors)
    }
}

fn known_key(key: &str) -> bool {
    KNOWN_KEYS.contains(&key) || KEY_PREFIXES.iter().any(|p| key.len() > p.len() && key.starts_with(p))
}

fn bad_value(key: &str, value: &str, expected: &str) -> Error {
    Error::config(format!("config key {key}: expected {expected}, got {value}"))
}

fn hash_entries(entries: &BTreeMap<String, String>) -> String {
    let mut hasher = Sha256::new();
    for (k, v) in entries {
        hasher.update(k.as_bytes());
        hasher.update(b" = ");
        hasher.update(v.as_bytes());
        hasher.update(b"\n");
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Parses a period label such as `2003Q4`.
pub fn parse_period(label: &str) -> Result<Period> {
    let err = || Error::config(format!("expected a period label like 2003Q4, got {label}"));
    let (year, quarter) = label.split_once('Q').ok_or_else(err)?;
    let year: i32 = year.parse().map_err(|_| err())?;
    let quarter: u8 = quarter.parse().map_err(|_| err())?;
    Period::new(year, quarter)
}

/// Config key suffix for a hyperparameter display name: lowercase with
/// underscores, so `log kappa` becomes `log_kappa`.
pub fn slug(name: &str) -> String {
    name.to_lowercase().replace(' ', "_")
}

fn parse_prior(key: &str, value: &str) -> Result<ThetaPrior> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    let usage = "expected `loggamma <shape> <rate>` or `gaussian <mean> <precision>`";
    if parts.len() != 3 {
        return Err(bad_value(key, value, usage));
    }
    let a: f64 = parts[1].parse().map_err(|_| bad_value(key, value, usage))?;
    let b: f64 = parts[2].parse().map_err(|_| bad_value(key, value, usage))?;
    let prior = match parts[0] {
        "loggamma" => ThetaPrior::LogGamma { shape: a, rate: b },
        "gaussian" => ThetaPrior::Gaussian { mean: a, precision: b },
        _ => return Err(bad_value(key, value, usage)),
    };
    prior.validate()?;
    Ok(prior)
}
