//! Command-line driver: simulation, fitting, gridded prediction,
//! forecasting, forecast scoring, and mesh inspection, wired to a flat
//! `key = value` configuration with deterministic file outputs.

mod config;
mod ingest;
mod runs;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use stdecomp::error::{Error, Result};
use stdecomp::inference::{default_init, run as run_inference, InferenceEngine, InlaResult};
use stdecomp::mesh::{barycentric_projector, build_mesh, Point2D, TriangulatedMesh};
use stdecomp::model::{
    build_design, Dataset, HyperParams, ModelSpec, SpatialMode, TauBasis, ThetaLayout,
};
use stdecomp::predict::{fitted_surface, forecast, forecast_metrics, GridRequest};
use stdecomp::simulate::{simulate_dataset, SimulationConfig, StationLayout};
use stdecomp::spde::{assemble_fem, params_from_sigma_rho, MaternOperator};
use stdecomp::temporal::pacf_to_unconstrained;

use config::RunConfig;
use ingest::Aggregation;
use runs::RunDir;

#[derive(Parser)]
#[command(
    name = "stdecomp",
    version,
    about = "Decomposes station series into trend, seasonal, cycle, and a spatial field"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset and write it with its generating truth
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ingest monthly CSV files and fit the decomposition
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the fitted surface of a completed run on a grid
    PredictGrid {
        #[arg(long)]
        config: PathBuf,
        /// Directory a fit wrote its outputs into
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue the temporal components of a completed run past the sample
    Forecast {
        #[arg(long)]
        config: PathBuf,
        /// Directory a fit wrote its outputs into
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against observations, one line per horizon
    Metrics {
        /// CSV with header `horizon,predicted,observed`
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the mesh for a dataset and report its quality
    MeshInfo {
        #[arg(long)]
        config: PathBuf,
        /// Report file; printed to stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Dimension(_) | Error::Io(_) => 3,
        Error::Numerical(_) => 4,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Simulate { config, out } => cmd_simulate(&config, &out),
        Command::Fit { config, out } => cmd_fit(&config, &out),
        Command::PredictGrid { config, run, out } => cmd_predict_grid(&config, &run, &out),
        Command::Forecast { config, run, out } => cmd_forecast(&config, &run, &out),
        Command::Metrics { input, out } => cmd_metrics(&input, &out),
        Command::MeshInfo { config, out } => cmd_mesh_info(&config, out.as_deref()),
    }
}

// ---------------------------------------------------------------------------
// shared assembly

fn aggregation(cfg: &RunConfig) -> Result<Aggregation> {
    Aggregation::parse(cfg.get("aggregation").unwrap_or("mean"))
}

fn variable(cfg: &RunConfig) -> String {
    cfg.get("variable").unwrap_or("value").to_string()
}

fn ingest_inputs(cfg: &RunConfig) -> Result<ingest::IngestReport> {
    let paths = cfg.list("input");
    if paths.is_empty() {
        return Err(Error::config("config key input must list at least one CSV".to_string()));
    }
    ingest_paths(cfg, &paths.iter().map(PathBuf::from).collect::<Vec<_>>())
}

fn ingest_paths(cfg: &RunConfig, paths: &[PathBuf]) -> Result<ingest::IngestReport> {
    ingest::ingest(
        paths,
        &variable(cfg),
        aggregation(cfg)?,
        cfg.usize_or("min_months_mean", 2)?,
    )
}

fn mesh_for(cfg: &RunConfig, points: &[Point2D]) -> Result<TriangulatedMesh> {
    let (inner, outer, margin) = cfg.mesh_params()?;
    build_mesh(points, inner, outer, margin)
}

/// Standardized vertex-coordinate columns for a spatially varying log
/// tau: longitude first, then latitude.
fn coordinate_tau_basis(mesh: &TriangulatedMesh, n: usize) -> Result<Option<TauBasis>> {
    if n == 0 {
        return Ok(None);
    }
    if n > 2 {
        return Err(Error::config(format!(
            "tau_basis supports at most 2 coordinate columns, got {n}"
        )));
    }
    let nv = mesh.n_vertices();
    let mut columns = Vec::with_capacity(n);
    for axis in 0..n {
        let vals: Vec<f64> = (0..nv)
            .map(|v| {
                let p = mesh.vertex(v);
                if axis == 0 { p.x } else { p.y }
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / nv as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nv as f64).sqrt();
        if !(sd > 0.0) {
            return Err(Error::numerical(
                "vertex coordinates have no spread; cannot standardize the tau basis".to_string(),
            ));
        }
        columns.push(vals.iter().map(|v| (v - mean) / sd).collect());
    }
    Ok(Some(TauBasis::new(columns)?))
}

// ---------------------------------------------------------------------------
// simulate

fn sim_hyper(cfg: &RunConfig, spec: &ModelSpec) -> Result<HyperParams> {
    fn log_of(cfg: &RunConfig, key: &str, default: f64) -> Result<f64> {
        let v = cfg.f64_or(key, default)?;
        if !(v > 0.0) {
            return Err(Error::config(format!("config key {key} must be positive, got {v}")));
        }
        Ok(v.ln())
    }
    fn pacf_of(cfg: &RunConfig, key: &str, default: f64) -> Result<f64> {
        let p = cfg.f64_or(key, default)?;
        if !(-1.0 < p && p < 1.0) {
            return Err(Error::config(format!(
                "config key {key} must lie in (-1, 1), got {p}"
            )));
        }
        Ok(pacf_to_unconstrained(p))
    }

    let (log_tau, log_kappa) = if spec.spatial != SpatialMode::Off {
        let sigma = cfg.f64_or("sim_sigma", 1.0)?;
        let rho = cfg.f64_or("sim_rho", 1.0)?;
        let mp = params_from_sigma_rho(sigma, rho)?;
        (Some(mp.log_tau), Some(mp.log_kappa))
    } else {
        (None, None)
    };
    let theta_tau_extra = if spec.n_tau_basis > 0 {
        let v = cfg.f64_list("sim_theta_tau")?;
        if v.is_empty() {
            vec![0.0; spec.n_tau_basis]
        } else if v.len() == spec.n_tau_basis {
            v
        } else {
            return Err(Error::dimension(format!(
                "sim_theta_tau lists {} values for {} basis columns",
                v.len(),
                spec.n_tau_basis
            )));
        }
    } else {
        Vec::new()
    };
    Ok(HyperParams {
        log_prec_gauss: log_of(cfg, "sim_prec_gauss", 25.0)?,
        log_prec_trend: spec
            .trend
            .then(|| log_of(cfg, "sim_prec_trend", 25.0))
            .transpose()?,
        log_prec_seasonal: spec
            .seasonal
            .map(|_| log_of(cfg, "sim_prec_seasonal", 1.0))
            .transpose()?,
        log_prec_cycle: spec
            .cycle
            .then(|| log_of(cfg, "sim_prec_cycle", 4.0))
            .transpose()?,
        z_pacf1: spec.cycle.then(|| pacf_of(cfg, "sim_pacf1", 0.3)).transpose()?,
        z_pacf2: spec.cycle.then(|| pacf_of(cfg, "sim_pacf2", -0.05)).transpose()?,
        log_tau,
        log_kappa,
        theta_tau_extra,
    })
}

fn cmd_simulate(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let spec = cfg.model_spec()?;
    let agg = aggregation(&cfg)?;

    let domain = {
        let v = cfg.f64_list("sim_domain")?;
        match v.as_slice() {
            [] => [0.0, 0.0, 1.0, 1.0],
            [x0, y0, x1, y1] if x1 > x0 && y1 > y0 => [*x0, *y0, *x1, *y1],
            _ => {
                return Err(Error::config(
                    "sim_domain must be `x0 y0 x1 y1` with positive extents".to_string(),
                ))
            }
        }
    };
    let corners = vec![
        Point2D::new(domain[0], domain[1]),
        Point2D::new(domain[2], domain[1]),
        Point2D::new(domain[2], domain[3]),
        Point2D::new(domain[0], domain[3]),
    ];
    let mesh = mesh_for(&cfg, &corners)?;
    let basis = coordinate_tau_basis(&mesh, spec.n_tau_basis)?;

    let sim_config = SimulationConfig {
        hyper: sim_hyper(&cfg, &spec)?,
        beta: cfg.f64_list("sim_beta")?,
        stations: StationLayout::Count(cfg.usize_or("sim_stations", 25)?),
        t_len: cfg.usize_or("sim_t_len", 40)?,
        start: cfg.period_or("sim_start", stdecomp::model::Period::new(2000, 1)?)?,
        missing_rate: cfg.f64_or("sim_missing", 0.1)?,
        seed: cfg.u64_or("seed", 1)?,
        variable: variable(&cfg),
        spec,
    };
    let sim = simulate_dataset(&sim_config, Some(&mesh), basis.as_ref())?;

    let dir = RunDir::create(out)?;
    let mut dataset_csv = Vec::new();
    ingest::write_dataset_csv(&sim.dataset, agg, &mut dataset_csv)?;
    dir.write("dataset.csv", std::str::from_utf8(&dataset_csv).expect("ascii emission"))?;
    dir.write(
        "truth_components.csv",
        &runs::truth_components_csv(&sim.truth, sim.dataset.times(), &cfg.hash),
    )?;
    if sim.truth.spatial.is_some() {
        dir.write(
            "truth_spatial.csv",
            &runs::truth_spatial_csv(&sim.truth, &mesh, sim.dataset.times(), &cfg.hash),
        )?;
    }
    let mut mesh_text = Vec::new();
    mesh.write_text(&mut mesh_text)?;
    dir.write("mesh.txt", std::str::from_utf8(&mesh_text).expect("ascii mesh"))?;
    dir.write("run.log", &runs::run_log(&cfg, "simulate", None))?;
    println!(
        "simulated {} stations over {} periods into {}",
        sim.dataset.n_stations(),
        sim.dataset.n_times(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

struct FittedModel {
    dataset: Dataset,
    mesh: TriangulatedMesh,
    result: InlaResult,
}

fn fit_model(cfg: &RunConfig, report: ingest::IngestReport) -> Result<FittedModel> {
    let dataset = report.dataset;
    let spec = cfg.model_spec()?;
    let mesh = mesh_for(cfg, &dataset.locations())?;
    let spatial_on = spec.spatial != SpatialMode::Off;

    let projector = if spatial_on {
        Some(barycentric_projector(&mesh, &dataset.locations())?)
    } else {
        None
    };
    let gmrf = build_design(&dataset, &spec, projector.as_ref())?;
    let matern = if spatial_on {
        Some(MaternOperator::new(&assemble_fem(&mesh)?)?)
    } else {
        None
    };
    let basis = coordinate_tau_basis(&mesh, spec.n_tau_basis)?;

    let layout = ThetaLayout::for_spec(&spec)?;
    let priors = cfg.priors(&layout)?;
    let opts = cfg.inference_options()?;
    let engine = InferenceEngine::new(&gmrf, matern.as_ref(), basis.as_ref(), priors, opts)?;
    let init = default_init(&spec)?;
    let result = run_inference(&engine, &init)?;
    Ok(FittedModel { dataset, mesh, result })
}

fn cmd_fit(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let agg = aggregation(&cfg)?;
    let report = ingest_inputs(&cfg)?;
    println!(
        "ingested {} rows from {} files: {} stations, {} periods",
        report.n_rows,
        report.n_files,
        report.dataset.n_stations(),
        report.dataset.n_times()
    );
    let fitted = fit_model(&cfg, report)?;
    let FittedModel { dataset, mesh, result } = &fitted;

    let dir = RunDir::create(out)?;
    let mut dataset_csv = Vec::new();
    ingest::write_dataset_csv(dataset, agg, &mut dataset_csv)?;
    dir.write("dataset.csv", std::str::from_utf8(&dataset_csv).expect("ascii emission"))?;
    dir.write("observation_proportions.csv", &runs::proportions_csv(dataset, &cfg.hash))?;
    let mut mesh_text = Vec::new();
    mesh.write_text(&mut mesh_text)?;
    dir.write("mesh.txt", std::str::from_utf8(&mesh_text).expect("ascii mesh"))?;
    dir.write(
        "hyperparameters.txt",
        &format!("{}{}", runs::hash_line(&cfg.hash), result.report()),
    )?;
    dir.write("components.csv", &runs::components_csv(result, dataset.times(), &cfg.hash))?;
    if result.layout.spatial.is_some() {
        dir.write(
            "spatial_effect.csv",
            &runs::spatial_csv(result, mesh, dataset.times(), &cfg.hash),
        )?;
    }
    dir.write("latent.csv", &runs::latent_csv(result, &cfg.hash))?;
    dir.write("hyper.csv", &runs::hyper_csv(result, &cfg.hash))?;
    dir.write("summary.txt", &runs::summary_txt(result, dataset, &cfg.hash))?;
    dir.write("run.log", &runs::run_log(&cfg, "fit", Some(&cfg.inference_options()?)))?;
    print!("{}", result.report());
    println!("outputs in {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// reload for prediction

struct ReloadedRun {
    dataset: Dataset,
    mesh: TriangulatedMesh,
    result: InlaResult,
}

fn reload_run(cfg: &RunConfig, run: &Path) -> Result<ReloadedRun> {
    let dataset_path = run.join("dataset.csv");
    if !dataset_path.exists() {
        return Err(Error::data(format!(
            "{} does not look like a completed run: dataset.csv missing",
            run.display()
        )));
    }
    let report = ingest_paths(cfg, &[dataset_path])?;
    let dataset = report.dataset;
    let spec = cfg.model_spec()?;
    let mesh = mesh_for(cfg, &dataset.locations())?;
    let projector = if spec.spatial != SpatialMode::Off {
        Some(barycentric_projector(&mesh, &dataset.locations())?)
    } else {
        None
    };
    let gmrf = build_design(&dataset, &spec, projector.as_ref())?;
    let latent = runs::read_latent_csv(&run.join("latent.csv"))?;
    let hyper = runs::read_hyper_csv(&run.join("hyper.csv"))?;
    let result = runs::reconstruct_result(gmrf.layout.clone(), latent, hyper)?;
    Ok(ReloadedRun { dataset, mesh, result })
}

fn cmd_predict_grid(config_path: &Path, run: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let reloaded = reload_run(&cfg, run)?;
    let ReloadedRun { dataset, mesh, result } = &reloaded;

    let label = cfg.require("grid_time")?;
    let wanted = config::parse_period(label)?;
    let time_index = dataset
        .times()
        .iter()
        .position(|p| *p == wanted)
        .ok_or_else(|| {
            Error::config(format!(
                "grid_time {wanted} outside the sample {}..{}",
                dataset.times()[0],
                dataset.times()[dataset.n_times() - 1]
            ))
        })?;

    let mut request = GridRequest {
        xmin: cfg.require_f64("grid_xmin")?,
        xmax: cfg.require_f64("grid_xmax")?,
        ymin: cfg.require_f64("grid_ymin")?,
        ymax: cfg.require_f64("grid_ymax")?,
        nx: cfg.usize_or("grid_nx", 0)?,
        ny: cfg.usize_or("grid_ny", 0)?,
        time_index,
        rasters: BTreeMap::new(),
    };
    request.validate()?;

    for name in &result.layout.beta_names {
        if name == "(Intercept)" {
            continue;
        }
        let raster = match name.as_str() {
            "longitude" | "latitude" => {
                let mut vals = Vec::with_capacity(request.n_cells());
                for row in 0..request.ny {
                    for col in 0..request.nx {
                        let p = request.cell_center(row, col);
                        vals.push(if name == "longitude" { p.x } else { p.y });
                    }
                }
                vals
            }
            _ => {
                let key = format!("raster_{name}");
                let path = cfg.require(&key).map_err(|_| {
                    Error::config(format!(
                        "covariate {name} needs a cell raster: set {key} to a file of {} values",
                        request.n_cells()
                    ))
                })?;
                read_raster(Path::new(path), request.n_cells())?
            }
        };
        request.rasters.insert(name.clone(), raster);
    }

    let surface = fitted_surface(result, mesh, &request)?;
    let dir = RunDir::create(out)?;
    dir.write("surface_mean.txt", &surface.mean_text())?;
    dir.write("surface_sd.txt", &surface.sd_text())?;
    dir.write("run.log", &runs::run_log(&cfg, "predict-grid", None))?;
    println!(
        "evaluated {}x{} cells at {} into {}",
        request.nx,
        request.ny,
        wanted,
        out.display()
    );
    Ok(())
}

fn read_raster(path: &Path, n_cells: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read raster {}: {e}", path.display())))?;
    let vals = text
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::data(format!("{}: not a number: {tok}", path.display())))
        })
        .collect::<Result<Vec<f64>>>()?;
    if vals.len() != n_cells {
        return Err(Error::dimension(format!(
            "{} holds {} values for {} grid cells",
            path.display(),
            vals.len(),
            n_cells
        )));
    }
    Ok(vals)
}

// ---------------------------------------------------------------------------
// forecast and metrics

fn cmd_forecast(config_path: &Path, run: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let reloaded = reload_run(&cfg, run)?;
    let ReloadedRun { dataset, mesh, result } = &reloaded;
    let h = cfg.usize_or("horizon", 4)?;
    let mesh_arg = (result.layout.spatial.is_some()).then_some(mesh);
    let fc = forecast(result, dataset, mesh_arg, h)?;
    let last = dataset.times()[dataset.n_times() - 1];

    let dir = RunDir::create(out)?;
    dir.write("forecast.csv", &runs::forecast_csv(&fc, last, &cfg.hash))?;
    dir.write("run.log", &runs::run_log(&cfg, "forecast", None))?;
    println!(
        "forecast {} steps for {} stations into {}",
        h,
        fc.station_ids.len(),
        out.display()
    );
    Ok(())
}

fn cmd_metrics(input: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", input.display())))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, "horizon,predicted,observed")) => {}
        _ => {
            return Err(Error::data(format!(
                "{}: expected header `horizon,predicted,observed`",
                input.display()
            )))
        }
    }
    let mut groups: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::data(format!(
                "{}:{lineno}: expected 3 fields, got {}",
                input.display(),
                fields.len()
            )));
        }
        let bad = |what: &str| Error::data(format!("{}:{lineno}: {what}", input.display()));
        let h: u32 = fields[0].parse().map_err(|_| bad("horizon is not an integer"))?;
        let p: f64 = fields[1].parse().map_err(|_| bad("predicted is not a number"))?;
        let o: f64 = fields[2].parse().map_err(|_| bad("observed is not a number"))?;
        let entry = groups.entry(h).or_default();
        entry.0.push(p);
        entry.1.push(o);
    }
    if groups.is_empty() {
        return Err(Error::data(format!("{} holds no rows", input.display())));
    }
    let mut text = format!("horizon {}\n", stdecomp::predict::ForecastMetrics::header());
    for (h, (pred, obs)) in &groups {
        let m = forecast_metrics(pred, obs)?;
        text.push_str(&format!("{h} {}\n", m.line()));
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_mesh_info(config_path: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let report = ingest_inputs(&cfg)?;
    let mesh = mesh_for(&cfg, &report.dataset.locations())?;
    let stats = mesh.stats();
    let mut text = runs::hash_line(&cfg.hash);
    text.push_str(&format!("stations {}\n", report.dataset.n_stations()));
    text.push_str(&format!("vertices {}\n", stats.n_vertices));
    text.push_str(&format!("triangles {}\n", stats.n_triangles));
    text.push_str(&format!("min_angle_deg {:.4}\n", stats.min_angle_deg));
    text.push_str(&format!("max_edge {:.6}\n", stats.max_edge));
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, &text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}
