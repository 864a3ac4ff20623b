//! Output writers: per-step summary CSV, flat per-cell field CSV and legacy
//! VTK structured points.
//!
//! Numbers are written with Rust's shortest round-trip exponent formatting,
//! so identical trajectories produce byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::material::StateField;
use crate::real::Real;
use crate::solver::{StepRecord, Trajectory};

/// Column order of the summary CSV.
pub const SUMMARY_COLUMNS: [&str; 12] = [
    "step",
    "time",
    "energy",
    "external_work",
    "dissipation_increment",
    "cumulative_dissipation",
    "work_integral",
    "upper_estimate_gap",
    "power_integral",
    "balance_residual",
    "outer_iterations",
    "flags",
];

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn num<T: Real>(x: T) -> String {
    format!("{:e}", x.as_f64())
}

/// Writes one summary row per step record.
pub fn write_summary_csv<T: Real, W: Write>(records: &[StepRecord<T>], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", SUMMARY_COLUMNS.join(","))?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            num(r.time),
            num(r.energy),
            num(r.external_work),
            num(r.dissipation),
            num(r.cumulative_dissipation),
            num(r.work_integral),
            num(r.upper_gap),
            num(r.power_integral),
            num(r.balance_residual),
            r.outer_iterations,
            r.flags
        )?;
    }
    Ok(())
}

/// Header of the flat field CSV: cell index, P row-major, cell-averaged y.
pub const FIELD_COLUMNS: [&str; 13] = [
    "cell", "p11", "p12", "p13", "p21", "p22", "p23", "p31", "p32", "p33", "y1", "y2", "y3",
];

/// Writes one row per cell: index, the 9 entries of P (row-major) and the
/// average of y over the cell's nodes.
pub fn write_field_csv<T: Real, W: Write>(grid: &Grid<T>, state: &StateField<T>, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", FIELD_COLUMNS.join(","))?;
    for c in 0..grid.n_cells() {
        let p = &state.p()[c];
        let y = grid.cell_average(state.y(), c);
        let mut row = vec![c.to_string()];
        for i in 0..3 {
            for j in 0..3 {
                row.push(num(p[(i, j)]));
            }
        }
        row.extend(y.iter().map(|v| num(*v)));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes a legacy ASCII VTK structured-points dataset: the deformation and
/// displacement at nodes, and P and |P − I| per cell.
pub fn write_vtk<T: Real, W: Write>(grid: &Grid<T>, state: &StateField<T>, time: T, mut w: W) -> std::io::Result<()> {
    let [nx, ny, nz] = grid.cells();
    let h = grid.spacing();
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "elastoplast state t={}", num(time))?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_POINTS")?;
    writeln!(w, "DIMENSIONS {} {} {}", nx + 1, ny + 1, nz + 1)?;
    writeln!(w, "ORIGIN 0 0 0")?;
    writeln!(w, "SPACING {} {} {}", num(h[0]), num(h[1]), num(h[2]))?;
    writeln!(w, "POINT_DATA {}", grid.n_nodes())?;
    writeln!(w, "VECTORS deformation double")?;
    for y in state.y() {
        writeln!(w, "{} {} {}", num(y[0]), num(y[1]), num(y[2]))?;
    }
    writeln!(w, "VECTORS displacement double")?;
    for (n, y) in state.y().iter().enumerate() {
        let x = grid.node_position(n);
        writeln!(w, "{} {} {}", num(y[0] - x[0]), num(y[1] - x[1]), num(y[2] - x[2]))?;
    }
    writeln!(w, "CELL_DATA {}", grid.n_cells())?;
    writeln!(w, "TENSORS plastic_strain double")?;
    for p in state.p() {
        for i in 0..3 {
            writeln!(w, "{} {} {}", num(p[(i, 0)]), num(p[(i, 1)]), num(p[(i, 2)]))?;
        }
    }
    writeln!(w, "SCALARS plastic_deviation double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for p in state.p() {
        let d = (*p - crate::tensor::Mat3::identity()).norm();
        writeln!(w, "{}", num(d))?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn finish(path: &Path, w: BufWriter<File>) -> Result<()> {
    w.into_inner()
        .map_err(|e| io_err(path, e.into_error()))?
        .sync_all()
        .map_err(|e| io_err(path, e))
}

/// Which files [`write_run`] produces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OutputOptions {
    pub dump_fields: bool,
    pub vtk: bool,
}

/// Writes `summary.csv` and, on request, `fields_NNNN.csv` / `state_NNNN.vtk`
/// for every step into `dir`. Returns the written paths.
pub fn write_run<T: Real>(
    dir: &Path,
    grid: &Grid<T>,
    traj: &Trajectory<T>,
    opts: OutputOptions,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    let path = dir.join("summary.csv");
    let mut w = create(&path)?;
    write_summary_csv(traj.records(), &mut w).map_err(|e| io_err(&path, e))?;
    finish(&path, w)?;
    written.push(path);
    for i in 0..=traj.steps() {
        if opts.dump_fields {
            let path = dir.join(format!("fields_{i:04}.csv"));
            let mut w = create(&path)?;
            write_field_csv(grid, traj.state(i), &mut w).map_err(|e| io_err(&path, e))?;
            finish(&path, w)?;
            written.push(path);
        }
        if opts.vtk {
            let path = dir.join(format!("state_{i:04}.vtk"));
            let mut w = create(&path)?;
            write_vtk(grid, traj.state(i), traj.time(i), &mut w).map_err(|e| io_err(&path, e))?;
            finish(&path, w)?;
            written.push(path);
        }
    }
    Ok(written)
}
