//! CSV and JSON file formats for ensembles, triples, trajectories and
//! reports. All numeric output uses shortest round-trip formatting, so
//! identical data produces identical bytes.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::lift::RandomVector;
use crate::measure::EmpiricalMeasure;
use crate::model::ControlProblem;
use crate::static_kkt::StationaryTriple;

fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Config {
            path: path.display().to_string(),
            detail: "empty csv".into(),
        })?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(header.len());
        for cell in line.split(',') {
            row.push(cell.trim().parse::<f64>().map_err(|e| Error::Config {
                path: path.display().to_string(),
                detail: format!("row {}: {e}", idx + 2),
            })?);
        }
        if row.len() != header.len() {
            return Err(Error::Config {
                path: path.display().to_string(),
                detail: format!("row {} has {} cells, expected {}", idx + 2, row.len(), header.len()),
            });
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn coordinate_header(prefix: &str, dim: usize) -> Vec<String> {
    (0..dim).map(|c| format!("{prefix}{c}")).collect()
}

/// Writes an ensemble as CSV, one particle per row.
pub fn write_ensemble(path: &Path, mu: &EmpiricalMeasure) -> Result<()> {
    let header = coordinate_header("x", mu.dim());
    let rows: Vec<Vec<f64>> = (0..mu.len())
        .map(|i| mu.points().row(i).iter().copied().collect())
        .collect();
    write_csv(path, &header, &rows)
}

pub fn read_ensemble(path: &Path) -> Result<EmpiricalMeasure> {
    let (header, rows) = read_csv(path)?;
    let n = rows.len();
    let k = header.len();
    if n == 0 {
        return Err(Error::Config {
            path: path.display().to_string(),
            detail: "ensemble file has no particles".into(),
        });
    }
    EmpiricalMeasure::new(DMatrix::from_fn(n, k, |i, j| rows[i][j]))
}

/// Writes a stationary triple as CSV with state, costate and control
/// columns per particle.
pub fn write_triple(path: &Path, triple: &StationaryTriple) -> Result<()> {
    let (d, m) = (triple.x.dim(), triple.u.dim());
    let mut header = coordinate_header("x", d);
    header.extend(coordinate_header("psi", d));
    header.extend(coordinate_header("u", m));
    let rows: Vec<Vec<f64>> = (0..triple.x.len())
        .map(|i| {
            let mut row = Vec::with_capacity(2 * d + m);
            row.extend(triple.x.values().row(i).iter().copied());
            row.extend(triple.psi.values().row(i).iter().copied());
            row.extend(triple.u.values().row(i).iter().copied());
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn read_triple(path: &Path, model: &dyn ControlProblem) -> Result<StationaryTriple> {
    let (header, rows) = read_csv(path)?;
    let (d, m) = (model.state_dim(), model.control_dim());
    if header.len() != 2 * d + m {
        return Err(Error::Config {
            path: path.display().to_string(),
            detail: format!("expected {} columns, found {}", 2 * d + m, header.len()),
        });
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let psi = DMatrix::from_fn(n, d, |i, j| rows[i][d + j]);
    let u = DMatrix::from_fn(n, m, |i, j| rows[i][2 * d + j]);
    StationaryTriple::from_parts(
        model,
        RandomVector::new(x),
        RandomVector::new(psi),
        RandomVector::new(u),
    )
}

/// Writes a trajectory as CSV rows `(t, particle, x.., psi.., u..)`.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let d = traj.states[0].ncols();
    let m = traj.controls[0].ncols();
    let n = traj.states[0].nrows();
    let mut header = vec!["t".to_string(), "particle".to_string()];
    header.extend(coordinate_header("x", d));
    header.extend(coordinate_header("psi", d));
    header.extend(coordinate_header("u", m));
    let mut rows = Vec::with_capacity(traj.node_count() * n);
    for (k, &t) in traj.times.iter().enumerate() {
        for i in 0..n {
            let mut row = Vec::with_capacity(2 + 2 * d + m);
            row.push(t);
            row.push(i as f64);
            row.extend(traj.states[k].row(i).iter().copied());
            row.extend(traj.costates[k].row(i).iter().copied());
            row.extend(traj.controls[k].row(i).iter().copied());
            rows.push(row);
        }
    }
    write_csv(path, &header, &rows)
}

pub fn read_trajectory(path: &Path, d: usize, m: usize) -> Result<Trajectory> {
    let (header, rows) = read_csv(path)?;
    if header.len() != 2 + 2 * d + m {
        return Err(Error::Config {
            path: path.display().to_string(),
            detail: format!("expected {} columns, found {}", 2 + 2 * d + m, header.len()),
        });
    }
    let mut times = Vec::new();
    let mut n = 0usize;
    for row in &rows {
        if times.last().map_or(true, |&t: &f64| t != row[0]) {
            times.push(row[0]);
        }
        if times.len() == 1 {
            n += 1;
        }
    }
    let nodes = times.len();
    if n == 0 || rows.len() != nodes * n {
        return Err(Error::Config {
            path: path.display().to_string(),
            detail: "trajectory rows do not tile (node, particle)".into(),
        });
    }
    let mut states = Vec::with_capacity(nodes);
    let mut costates = Vec::with_capacity(nodes);
    let mut controls = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let mut x = DMatrix::zeros(n, d);
        let mut psi = DMatrix::zeros(n, d);
        let mut u = DMatrix::zeros(n, m);
        for i in 0..n {
            let row = &rows[k * n + i];
            for c in 0..d {
                x[(i, c)] = row[2 + c];
                psi[(i, c)] = row[2 + d + c];
            }
            for c in 0..m {
                u[(i, c)] = row[2 + 2 * d + c];
            }
        }
        states.push(x);
        costates.push(psi);
        controls.push(u);
    }
    Ok(Trajectory {
        times,
        states,
        costates,
        controls,
        cost: f64::NAN,
        pmp_residual: f64::NAN,
        sweeps: 0,
    })
}

/// Writes a two-column plot-data file.
pub fn write_series(path: &Path, names: (&str, &str), xs: &[f64], ys: &[f64]) -> Result<()> {
    let header = vec![names.0.to_string(), names.1.to_string()];
    let rows: Vec<Vec<f64>> = xs.iter().zip(ys).map(|(&x, &y)| vec![x, y]).collect();
    write_csv(path, &header, &rows)
}

/// Serializes a report as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
