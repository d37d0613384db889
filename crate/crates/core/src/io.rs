//! Plot-ready CSV with 17 significant digits and JSON sidecars.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanfield::MeanFieldSolution;

/// Exact round trip for binary64.
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

pub struct CsvWriter {
    out: BufWriter<fs::File>,
    columns: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[String]) -> Result<Self> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{}", header.join(","))?;
        Ok(Self {
            out,
            columns: header.len(),
        })
    }

    /// Writes one row; `None` becomes an empty cell.
    pub fn row(&mut self, cells: &[Cell]) -> Result<()> {
        if cells.len() != self.columns {
            return Err(Error::Dimension(format!("CSV row has {} cells, header has {}", cells.len(), self.columns)));
        }
        let line: Vec<String> = cells.iter().map(Cell::render).collect();
        writeln!(self.out, "{}", line.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Int(i64),
    Real(f64),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Real(x) => fmt17(*x),
            Cell::Empty => String::new(),
        }
    }
}

/// Column names `prefix0, prefix1, …`.
pub fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Column names for a row-major flattened `rows × cols` matrix.
pub fn matrix_columns(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    (0..rows)
        .flat_map(|i| (0..cols).map(move |j| format!("{prefix}_{i}_{j}")))
        .collect()
}

pub fn real_cells(v: &[f64]) -> impl Iterator<Item = Cell> + '_ {
    v.iter().map(|&x| Cell::Real(x))
}

pub fn matrix_cells(m: &DMatrix<f64>) -> Vec<Cell> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| Cell::Real(m[(i, j)])))
        .collect()
}

/// A parsed CSV: header and rows, empty cells as `None`.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Config(format!("{}: empty file", path.display())))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let row = line
                .split(',')
                .map(|c| {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse::<f64>().map(Some).map_err(|_| {
                            Error::Config(format!("{}: line {}: bad number `{c}`", path.display(), i + 2))
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != header.len() {
                return Err(Error::Config(format!(
                    "{}: line {} has {} cells, header has {}",
                    path.display(),
                    i + 2,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    /// Values of columns `prefix0..prefix{n}` on every row where they are all present.
    pub fn vectors(&self, prefix: &str, n: usize) -> Result<Vec<DVector<f64>>> {
        let idx: Vec<usize> = indexed(prefix, n)
            .iter()
            .map(|name| {
                self.header
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::Config(format!("missing column {name}")))
            })
            .collect::<Result<_>>()?;
        Ok(self
            .rows
            .iter()
            .filter_map(|r| idx.iter().map(|&i| r[i]).collect::<Option<Vec<f64>>>())
            .map(DVector::from_vec)
            .collect())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Sidecar written next to `meanfield.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldMeta {
    pub model: String,
    pub dt: f64,
    pub n_steps: usize,
    pub states: usize,
    pub controls: usize,
    pub obs_channels: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Columns `k, t, S*, A*, P*, U*`; the control cells of the last row are empty.
pub fn write_meanfield(dir: &Path, model: &str, mf: &MeanFieldSolution) -> Result<()> {
    let l = mf.states[0].len();
    let m = mf.controls.first().map_or(0, |a| a.len());
    let c = mf.observations[0].len();
    let header: Vec<String> = ["k", "t"]
        .iter()
        .map(|s| s.to_string())
        .chain(indexed("S", l))
        .chain(indexed("A", m))
        .chain(indexed("P", l))
        .chain(indexed("U", c))
        .collect();
    let mut w = CsvWriter::create(&dir.join("meanfield.csv"), &header)?;
    for k in 0..=mf.n_steps {
        let mut cells = vec![Cell::Int(k as i64), Cell::Real(k as f64 * mf.dt)];
        cells.extend(real_cells(mf.states[k].as_slice()));
        match mf.controls.get(k) {
            Some(a) => cells.extend(real_cells(a.as_slice())),
            None => cells.extend(std::iter::repeat_n(Cell::Empty, m)),
        }
        cells.extend(real_cells(mf.costates[k].as_slice()));
        cells.extend(real_cells(mf.observations[k].as_slice()));
        w.row(&cells)?;
    }
    w.finish()?;
    let meta = MeanFieldMeta {
        model: model.to_string(),
        dt: mf.dt,
        n_steps: mf.n_steps,
        states: l,
        controls: m,
        obs_channels: c,
        cost: mf.cost,
        grad_norm: mf.grad_norm,
        iterations: mf.iterations,
        converged: mf.converged,
    };
    write_json(&dir.join("meanfield.json"), &meta)
}

pub fn read_meanfield(dir: &Path) -> Result<(MeanFieldMeta, MeanFieldSolution)> {
    let meta: MeanFieldMeta = read_json(&dir.join("meanfield.json"))?;
    let table = Table::read(&dir.join("meanfield.csv"))?;
    let states = table.vectors("S", meta.states)?;
    let controls = table.vectors("A", meta.controls)?;
    let costates = table.vectors("P", meta.states)?;
    let observations = table.vectors("U", meta.obs_channels)?;
    let n = meta.n_steps;
    if states.len() != n + 1 || controls.len() != n || costates.len() != n + 1 || observations.len() != n + 1 {
        return Err(Error::Config(format!(
            "meanfield.csv does not match meanfield.json ({} state rows, {} control rows, n_steps {n})",
            states.len(),
            controls.len()
        )));
    }
    let mf = MeanFieldSolution {
        dt: meta.dt,
        n_steps: n,
        states,
        controls,
        costates,
        observations,
        cost: meta.cost,
        grad_norm: meta.grad_norm,
        iterations: meta.iterations,
        converged: meta.converged,
    };
    Ok((meta, mf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-310, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(fmt17(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
        assert_eq!(fmt17(0.1), "1.0000000000000001e-1");
    }

    #[test]
    fn meanfield_files_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let v = |xs: &[f64]| DVector::from_column_slice(xs);
        let mf = MeanFieldSolution {
            dt: 0.1,
            n_steps: 2,
            states: vec![v(&[0.3, 0.7]), v(&[1.0 / 3.0, 2.0 / 3.0]), v(&[0.5, 0.5])],
            controls: vec![v(&[0.1 + 0.2]), v(&[1e-17])],
            costates: vec![v(&[-1.0, 2.0]), v(&[0.0, 0.1]), v(&[0.0, 0.0])],
            observations: vec![v(&[0.0]), v(&[0.07]), v(&[0.14])],
            cost: -12.345678901234567,
            grad_norm: 3e-9,
            iterations: 17,
            converged: true,
        };
        write_meanfield(dir.path(), "test", &mf).unwrap();
        let (meta, back) = read_meanfield(dir.path()).unwrap();
        assert_eq!(meta.model, "test");
        assert_eq!(back, mf);
    }

    #[test]
    fn ragged_row_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "a,b\n1,2\n3\n").unwrap();
        let err = Table::read(&p).err().unwrap().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
