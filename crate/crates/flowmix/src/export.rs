//! CSV tables and PGM heatmaps.
//!
//! Floats are written in Rust's shortest round-trip form, so re-reading a
//! CSV gives back the exact values.

use std::fs;
use std::path::Path;

use flowmix_core::analysis::{DecompositionCheck, DistortionProfile, SweepResult};
use flowmix_core::dag::StateId;
use flowmix_core::grid::GridSpec;

use crate::error::{AppError, AppResult};

fn num(x: f64) -> String {
    format!("{x:?}")
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| AppError::Format(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| AppError::Format(format!("{}: {e}", path.display())))?;
    fs::write(path, bytes).map_err(AppError::io(path))
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// `row,col,value` per cell in row-major order.
pub fn write_grid_csv(path: &Path, grid: GridSpec, values: &[f64]) -> AppResult<()> {
    let rows = values.iter().enumerate().map(|(i, &v)| {
        let (r, c) = grid.coords(StateId(i));
        vec![r.to_string(), c.to_string(), num(v)]
    });
    write_csv(path, &header(&["row", "col", "value"]), rows)
}

/// Reads a `row,col,value` table back. Every cell must appear exactly once.
pub fn read_grid_csv(path: &Path) -> AppResult<(GridSpec, Vec<f64>)> {
    let bad = |msg: String| AppError::Format(format!("{}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut cells = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", rec.len())));
        }
        let r: usize = rec[0].trim().parse().map_err(|_| bad(format!("bad row `{}`", &rec[0])))?;
        let c: usize = rec[1].trim().parse().map_err(|_| bad(format!("bad col `{}`", &rec[1])))?;
        let v: f64 = rec[2].trim().parse().map_err(|_| bad(format!("bad value `{}`", &rec[2])))?;
        cells.push((r, c, v));
    }
    let h = cells.iter().map(|c| c.0 + 1).max().ok_or_else(|| bad("no cells".into()))?;
    let w = cells.iter().map(|c| c.1 + 1).max().unwrap();
    let grid = GridSpec::new(h, w)?;
    let mut values = vec![f64::NAN; grid.num_cells()];
    let mut seen = vec![false; grid.num_cells()];
    for (r, c, v) in cells {
        let i = grid.cell(r, c).0;
        if seen[i] {
            return Err(bad(format!("cell ({r}, {c}) appears twice")));
        }
        seen[i] = true;
        values[i] = v;
    }
    if let Some(i) = seen.iter().position(|&s| !s) {
        let (r, c) = grid.coords(StateId(i));
        return Err(bad(format!("cell ({r}, {c}) is missing")));
    }
    Ok((grid, values))
}

/// Plain PGM (P2), maxval 255, pixel `round(255 v / max v)`.
/// A field that is zero everywhere renders black.
pub fn pgm(grid: GridSpec, values: &[f64]) -> String {
    let max = values.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P2\n{} {}\n255\n", grid.width, grid.height);
    for row in values.chunks(grid.width) {
        let px: Vec<String> = row
            .iter()
            .map(|&v| {
                let p = if max > 0.0 { (255.0 * v.max(0.0) / max).round() } else { 0.0 };
                (p as u32).min(255).to_string()
            })
            .collect();
        out.push_str(&px.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_pgm(path: &Path, grid: GridSpec, values: &[f64]) -> AppResult<()> {
    fs::write(path, pgm(grid, values)).map_err(AppError::io(path))
}

/// Writes `<stem>.csv` and `<stem>.pgm` into `dir`.
pub fn write_heatmap(dir: &Path, stem: &str, grid: GridSpec, values: &[f64]) -> AppResult<()> {
    write_grid_csv(&dir.join(format!("{stem}.csv")), grid, values)?;
    write_pgm(&dir.join(format!("{stem}.pgm")), grid, values)
}

/// `omega_1..omega_k,l1`; the `l1` field is empty for dead preferences.
pub fn write_sweep_csv(path: &Path, sweep: &SweepResult) -> AppResult<()> {
    let k = sweep.preferences.first().map_or(0, Vec::len);
    let mut head: Vec<String> = (1..=k).map(|i| format!("omega_{i}")).collect();
    head.push("l1".into());
    let rows = sweep.preferences.iter().zip(&sweep.l1).map(|(w, l)| {
        let mut row: Vec<String> = w.iter().map(|&x| num(x)).collect();
        row.push(l.map(num).unwrap_or_default());
        row
    });
    write_csv(path, &head, rows)
}

pub fn write_distortion_csv(path: &Path, grid: GridSpec, profile: &DistortionProfile) -> AppResult<()> {
    let rows = (0..profile.states.len()).map(|i| {
        let (r, c) = grid.coords(profile.states[i]);
        vec![r.to_string(), c.to_string(), num(profile.delta[i]), num(profile.gval[i]), profile.outlier[i].to_string()]
    });
    write_csv(path, &header(&["x_row", "x_col", "delta", "gval", "outlier"]), rows)
}

pub fn write_decomposition_csv(path: &Path, check: &DecompositionCheck) -> AppResult<()> {
    let rows = [vec![num(check.lhs), num(check.rhs), num(check.residual)]];
    write_csv(path, &header(&["lhs", "rhs", "residual"]), rows)
}

pub fn write_loss_csv(path: &Path, trace: &[f64]) -> AppResult<()> {
    let rows = trace.iter().enumerate().map(|(i, &l)| vec![i.to_string(), num(l)]);
    write_csv(path, &header(&["iteration", "loss"]), rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("flowmix-export-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn uniform_pgm_is_white() {
        let g = GridSpec::new(2, 2).unwrap();
        assert_eq!(pgm(g, &[0.25; 4]), "P2\n2 2\n255\n255 255\n255 255\n");
        assert_eq!(pgm(g, &[0.0; 4]), "P2\n2 2\n255\n0 0\n0 0\n");
        let g = GridSpec::new(1, 3).unwrap();
        assert_eq!(pgm(g, &[0.0, 0.5, 1.0]), "P2\n3 1\n255\n0 128 255\n");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let g = GridSpec::new(3, 2).unwrap();
        let vals = [0.1, 1.0 / 3.0, 1e-300, 0.0, 2.5e17, 0.7];
        let p = tmp("rt.csv");
        write_grid_csv(&p, g, &vals).unwrap();
        let (g2, back) = read_grid_csv(&p).unwrap();
        assert_eq!(g2, g);
        assert_eq!(back, vals);
    }

    #[test]
    fn incomplete_csv_is_rejected() {
        let p = tmp("bad.csv");
        fs::write(&p, "row,col,value\n0,0,1\n1,1,2\n").unwrap();
        assert!(read_grid_csv(&p).is_err());
        fs::write(&p, "row,col,value\n0,0,1\n0,0,2\n").unwrap();
        assert!(read_grid_csv(&p).is_err());
        fs::write(&p, "row,col,value\n0,0,x\n").unwrap();
        assert!(read_grid_csv(&p).is_err());
    }
}
