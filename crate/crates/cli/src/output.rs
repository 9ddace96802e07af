use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;

use semired::evolution::Trajectory;
use semired::model::ModelConfig;

use crate::config::Tolerances;

/// Everything needed to reproduce a run. No timestamps, so reruns with the
/// same inputs write the same bytes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: String,
    pub config: ModelConfig,
    pub out_dir: String,
    pub seed: u64,
    pub tolerances: Tolerances,
    pub forced: bool,
    pub completed_steps: usize,
    pub status: String,
}

fn create(dir: &Path, name: &str) -> std::io::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// `t,x,value` rows for every time level and every point.
fn write_field(path: PathBuf, header: &str, times: &[f64], xs: &[f64], values: &[DVector<f64>]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for (t, v) in times.iter().zip(values) {
        for (x, u) in xs.iter().zip(v.iter()) {
            writeln!(w, "{t:.16e},{x:.16e},{u:.16e}")?;
        }
    }
    w.flush()
}

pub struct RunOutputs<'a> {
    pub nodes: &'a [f64],
    pub midpoints: &'a [f64],
    pub traj: &'a Trajectory,
    pub strains: &'a [DVector<f64>],
}

pub fn write_run(dir: &Path, out: &RunOutputs<'_>, manifest: &RunManifest) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let traj = out.traj;
    write_field(dir.join("states.csv"), "t,x,u", &traj.times, out.nodes, &traj.states)?;
    let n_strain = out.strains.len();
    write_field(dir.join("strain.csv"), "t,x,e", &traj.times[..n_strain], out.midpoints, out.strains)?;

    let mut w = create(dir, "diagnostics.csv")?;
    writeln!(w, "t,mass,Q,step_residual,inner_iters")?;
    for i in 0..traj.times.len() {
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e},{}",
            traj.times[i], traj.mass[i], traj.potential[i], traj.step_residual[i], traj.inner_iterations[i]
        )?;
    }
    w.flush()?;

    let mut w = create(dir, "manifest.json")?;
    serde_json::to_writer_pretty(&mut w, manifest)?;
    writeln!(w)?;
    w.flush()
}
