//! Run-directory artifacts: deterministic writers for every output file
//! and the reload path that reconstructs a fitted state for prediction.

use std::path::{Path, PathBuf};

use stdecomp::error::{Error, Result};
use stdecomp::inference::{
    Dic, HyperSummary, InferenceOptions, InlaResult, OptimOutcome, Summary, ThetaGrid,
};
use stdecomp::mesh::TriangulatedMesh;
use stdecomp::model::{Dataset, LatentLayout, Period, SpatialMode};
use stdecomp::predict::ForecastResult;
use stdecomp::simulate::GroundTruth;

use crate::config::RunConfig;
use crate::ingest::observation_shares;

use nalgebra::DMatrix;

/// Output directory handle; creates the directory on first use.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<RunDir> {
        std::fs::create_dir_all(path).map_err(|e| {
            Error::config(format!("cannot create output directory {}: {e}", path.display()))
        })?;
        Ok(RunDir { root: path.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.path(name), text)?;
        Ok(())
    }
}

pub fn hash_line(hash: &str) -> String {
    format!("# config_sha256 {hash}\n")
}

/// `run.log`: command, version, canonical config echo, and the search
/// settings. Deliberately free of timestamps so reruns are identical.
pub fn run_log(cfg: &RunConfig, command: &str, opts: Option<&InferenceOptions>) -> String {
    let mut s = hash_line(&cfg.hash);
    s.push_str(&format!("command {command}\n"));
    s.push_str(&format!("version {}\n", env!("CARGO_PKG_VERSION")));
    s.push_str("config:\n");
    for line in cfg.canonical().lines() {
        s.push_str("  ");
        s.push_str(line);
        s.push('\n');
    }
    if let Some(o) = opts {
        s.push_str("options:\n");
        s.push_str(&format!("  gradient_step {}\n", o.gradient_step));
        s.push_str(&format!("  gradient_tol {}\n", o.gradient_tol));
        s.push_str(&format!("  max_iterations {}\n", o.max_iterations));
        s.push_str(&format!("  hessian_step {}\n", o.hessian_step));
        s.push_str(&format!("  grid_step {}\n", o.grid_step));
        s.push_str(&format!("  grid_cutoff {}\n", o.grid_cutoff));
        s.push_str(&format!("  grid_max_steps {}\n", o.grid_max_steps));
        s.push_str(&format!("  bound {}\n", o.bound));
    }
    s
}

pub fn proportions_csv(dataset: &Dataset, hash: &str) -> String {
    let mut s = hash_line(hash);
    s.push_str("period,share\n");
    for (label, share) in observation_shares(dataset) {
        s.push_str(&format!("{label},{share}\n"));
    }
    s
}

fn summary_row(s: &Summary) -> String {
    format!("{},{},{},{},{},{}", s.mean, s.sd, s.q025, s.q50, s.q975, s.mode)
}

/// `components.csv`: posterior summaries of each temporal block per
/// period.
pub fn components_csv(result: &InlaResult, times: &[Period], hash: &str) -> String {
    let layout = &result.layout;
    let mut s = hash_line(hash);
    s.push_str("component,period,mean,sd,q025,q50,q975,mode\n");
    let blocks = [
        ("trend", &layout.trend),
        ("seasonal", &layout.seasonal),
        ("cycle", &layout.cycle),
    ];
    for (name, range) in blocks {
        let Some(range) = range else { continue };
        for (t, period) in times.iter().enumerate() {
            let row = &result.latent[range.start + t];
            s.push_str(&format!("{name},{period},{}\n", summary_row(row)));
        }
    }
    s
}

/// `spatial_effect.csv`: posterior mean and sd of the field at every
/// vertex, one block per replicate.
pub fn spatial_csv(
    result: &InlaResult,
    mesh: &TriangulatedMesh,
    times: &[Period],
    hash: &str,
) -> String {
    let layout = &result.layout;
    let mut s = hash_line(hash);
    s.push_str("replicate,vertex,x,y,mean,sd\n");
    let Some(range) = layout.spatial.clone() else {
        return s;
    };
    let nv = layout.n_vertices;
    let n_rep = range.len() / nv.max(1);
    for rep in 0..n_rep {
        let label = match layout.spatial_mode {
            SpatialMode::IidReplicates => times[rep].to_string(),
            _ => "constant".to_string(),
        };
        for v in 0..nv {
            let p = mesh.vertex(v);
            let row = &result.latent[range.start + rep * nv + v];
            s.push_str(&format!("{label},{v},{},{},{},{}\n", p.x, p.y, row.mean, row.sd));
        }
    }
    s
}

fn block_name(layout: &LatentLayout, i: usize) -> (&'static str, usize) {
    for (name, range) in [
        ("trend", &layout.trend),
        ("seasonal", &layout.seasonal),
        ("cycle", &layout.cycle),
        ("spatial", &layout.spatial),
    ] {
        if let Some(r) = range {
            if r.contains(&i) {
                return (name, i - r.start);
            }
        }
    }
    ("beta", i - layout.betas.start)
}

/// `latent.csv`: the full latent posterior state at reload precision.
pub fn latent_csv(result: &InlaResult, hash: &str) -> String {
    let mut s = hash_line(hash);
    s.push_str("index,block,offset,mean,sd,q025,q50,q975,mode\n");
    for (i, row) in result.latent.iter().enumerate() {
        let (name, offset) = block_name(&result.layout, i);
        s.push_str(&format!("{i},{name},{offset},{}\n", summary_row(row)));
    }
    s
}

/// `hyper.csv`: hyperparameter posteriors on both scales at reload
/// precision.
pub fn hyper_csv(result: &InlaResult, hash: &str) -> String {
    let mut s = hash_line(hash);
    s.push_str(
        "name,internal_mean,internal_sd,internal_q025,internal_q50,internal_q975,internal_mode,\
         user_mean,user_sd,user_q025,user_q50,user_q975,user_mode\n",
    );
    for h in &result.hyper {
        s.push_str(&format!(
            "{},{},{}\n",
            h.name,
            summary_row(&h.internal),
            summary_row(&h.user)
        ));
    }
    s
}

pub fn summary_txt(result: &InlaResult, dataset: &Dataset, hash: &str) -> String {
    let mut s = hash_line(hash);
    s.push_str(&format!("stations {}\n", dataset.n_stations()));
    s.push_str(&format!("periods {}\n", dataset.n_times()));
    s.push_str(&format!("observations {}\n", dataset.n_observed()));
    s.push_str(&format!("latent_dimension {}\n", result.layout.n));
    s.push_str(&format!("hyperparameters {}\n", result.theta_names.len()));
    s.push_str(&format!("log_marginal_likelihood {:.6}\n", result.log_marginal_likelihood));
    s.push_str(&format!("dic {:.6}\n", result.dic.dic));
    s.push_str(&format!("effective_parameters {:.6}\n", result.dic.effective_parameters));
    s.push_str(&format!("mean_deviance {:.6}\n", result.dic.mean_deviance));
    s.push_str(&format!("iterations {}\n", result.optimization.iterations));
    s.push_str(&format!("converged {}\n", result.optimization.converged));
    s.push_str(&format!("grid_points {}\n", result.grid.len()));
    s.push_str(&format!("failed_evaluations {}\n", result.n_failed_evaluations));
    s
}

pub fn forecast_csv(fc: &ForecastResult, last: Period, hash: &str) -> String {
    let mut labels = Vec::with_capacity(fc.horizon);
    let mut p = last;
    for _ in 0..fc.horizon {
        p = p.succ();
        labels.push(p.to_string());
    }
    let mut s = hash_line(hash);
    s.push_str("station_id,step,period,mean,sd\n");
    for (si, id) in fc.station_ids.iter().enumerate() {
        for k in 0..fc.horizon {
            let idx = si * fc.horizon + k;
            s.push_str(&format!(
                "{id},{},{},{},{}\n",
                k + 1,
                labels[k],
                fc.mean[idx],
                fc.sd[idx]
            ));
        }
    }
    s
}

/// `truth_components.csv`: simulated component paths per period.
pub fn truth_components_csv(truth: &GroundTruth, times: &[Period], hash: &str) -> String {
    let mut s = hash_line(hash);
    s.push_str("component,period,value\n");
    for (name, path) in [
        ("trend", &truth.trend),
        ("seasonal", &truth.seasonal),
        ("cycle", &truth.cycle),
    ] {
        let Some(path) = path else { continue };
        for (t, period) in times.iter().enumerate() {
            s.push_str(&format!("{name},{period},{}\n", path[t]));
        }
    }
    s
}

/// `truth_spatial.csv`: simulated field values per vertex and replicate.
pub fn truth_spatial_csv(
    truth: &GroundTruth,
    mesh: &TriangulatedMesh,
    times: &[Period],
    hash: &str,
) -> String {
    let mut s = hash_line(hash);
    s.push_str("replicate,vertex,x,y,value\n");
    let Some(field) = &truth.spatial else {
        return s;
    };
    let nv = mesh.n_vertices();
    let n_rep = field.len() / nv.max(1);
    for rep in 0..n_rep {
        let label = if n_rep == 1 { "constant".to_string() } else { times[rep].to_string() };
        for v in 0..nv {
            let p = mesh.vertex(v);
            s.push_str(&format!("{label},{v},{},{},{}\n", p.x, p.y, field[rep * nv + v]));
        }
    }
    s
}

// ---------------------------------------------------------------------------
// reload

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_f64(path: &Path, line: usize, raw: &str) -> Result<f64> {
    raw.parse().map_err(|_| {
        Error::data(format!("{}:{line}: not a number: {raw}", path.display()))
    })
}

fn read_summaries(
    path: &Path,
    expected_header: &str,
    n_leading: usize,
) -> Result<Vec<(Vec<String>, Vec<f64>)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    let mut lines = data_lines(&text);
    match lines.next() {
        Some((_, header)) if header == expected_header => {}
        _ => {
            return Err(Error::data(format!(
                "{}: expected header `{expected_header}`",
                path.display()
            )))
        }
    }
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() <= n_leading {
            return Err(Error::data(format!(
                "{}:{lineno}: expected more than {n_leading} fields",
                path.display()
            )));
        }
        let leading = fields[..n_leading].iter().map(|s| s.to_string()).collect();
        let numbers = fields[n_leading..]
            .iter()
            .map(|f| parse_f64(path, lineno, f))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((leading, numbers));
    }
    Ok(rows)
}

fn to_summary(path: &Path, v: &[f64]) -> Result<Summary> {
    if v.len() != 6 {
        return Err(Error::data(format!(
            "{}: expected 6 summary numbers per block, got {}",
            path.display(),
            v.len()
        )));
    }
    Ok(Summary {
        mean: v[0],
        sd: v[1],
        q025: v[2],
        q50: v[3],
        q975: v[4],
        mode: v[5],
    })
}

pub fn read_latent_csv(path: &Path) -> Result<Vec<Summary>> {
    let header = "index,block,offset,mean,sd,q025,q50,q975,mode";
    read_summaries(path, header, 3)?
        .iter()
        .map(|(_, nums)| to_summary(path, nums))
        .collect()
}

pub fn read_hyper_csv(path: &Path) -> Result<Vec<HyperSummary>> {
    let header = "name,internal_mean,internal_sd,internal_q025,internal_q50,internal_q975,\
                  internal_mode,user_mean,user_sd,user_q025,user_q50,user_q975,user_mode";
    read_summaries(path, header, 1)?
        .iter()
        .map(|(leading, nums)| {
            if nums.len() != 12 {
                return Err(Error::data(format!(
                    "{}: expected 12 numbers per hyperparameter, got {}",
                    path.display(),
                    nums.len()
                )));
            }
            Ok(HyperSummary {
                name: leading[0].clone(),
                internal: to_summary(path, &nums[..6])?,
                user: to_summary(path, &nums[6..])?,
            })
        })
        .collect()
}

/// Rebuilds a fitted state from the layout and the stored posterior
/// summaries; search diagnostics are filled with inert placeholders.
pub fn reconstruct_result(
    layout: LatentLayout,
    latent: Vec<Summary>,
    hyper: Vec<HyperSummary>,
) -> Result<InlaResult> {
    if latent.len() != layout.n {
        return Err(Error::dimension(format!(
            "{} stored latent summaries for a field of {}",
            latent.len(),
            layout.n
        )));
    }
    if hyper.is_empty() {
        return Err(Error::data("stored fit holds no hyperparameters".to_string()));
    }
    let k = hyper.len();
    let grid = ThetaGrid::new(
        vec![vec![0.0; k]],
        vec![0.0],
        vec![0.0; k],
        0.0,
        DMatrix::identity(k, k),
    )?;
    Ok(InlaResult {
        layout,
        theta_names: hyper.iter().map(|h| h.name.clone()).collect(),
        optimization: OptimOutcome {
            mode: vec![0.0; k],
            log_post: 0.0,
            hessian: DMatrix::identity(k, k),
            iterations: 0,
            converged: true,
        },
        grid,
        latent,
        hyper,
        log_marginal_likelihood: 0.0,
        dic: Dic {
            dic: 0.0,
            effective_parameters: 0.0,
            mean_deviance: 0.0,
            deviance_at_mean: 0.0,
        },
        n_failed_evaluations: 0,
    })
}
