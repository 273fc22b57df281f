//! On-disk formats.
//!
//! Binary files are little-endian. A matrix file holds
//! `u64 rows, u64 cols, u64 n_pivots, n_pivots × u64, rows·cols × f64`
//! with the body in row-major order. A dataset file holds
//! `u64 n_snapshots, u64 n_space, f64 length, f64 sample_dt, f64 start_time`
//! followed by the snapshots row-major. Tables are comma-separated with a
//! header row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ks::{KsConfig, SpatiotemporalDataset};
use crate::linalg::DenseMatrix;

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .map(BufReader::new)
        .and_then(|mut r| r.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_error(self.path, "file is truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| format_error(self.path, format!("count {v} too large")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| format_error(self.path, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_error(self.path, "trailing bytes after body"));
        }
        Ok(())
    }
}

fn write_rows(w: &mut impl Write, m: ArrayView2<'_, f64>) -> std::io::Result<()> {
    let mut line = Vec::with_capacity(8 * m.ncols());
    for row in m.rows() {
        line.clear();
        for &x in row {
            line.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&line)?;
    }
    Ok(())
}

/// Writes a matrix together with a pivot list (may be empty).
pub fn write_matrix_bin(path: &Path, m: ArrayView2<'_, f64>, pivots: &[usize]) -> Result<()> {
    let mut w = create(path)?;
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(&(m.nrows() as u64).to_le_bytes())?;
        w.write_all(&(m.ncols() as u64).to_le_bytes())?;
        w.write_all(&(pivots.len() as u64).to_le_bytes())?;
        for &p in pivots {
            w.write_all(&(p as u64).to_le_bytes())?;
        }
        write_rows(w, m)?;
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

pub fn read_matrix_bin(path: &Path) -> Result<(DenseMatrix, Vec<usize>)> {
    let bytes = read_all(path)?;
    let mut c = Cursor { path, bytes: &bytes, pos: 0 };
    let rows = c.usize()?;
    let cols = c.usize()?;
    let n_pivots = c.usize()?;
    let pivots = (0..n_pivots).map(|_| c.usize()).collect::<Result<Vec<_>>>()?;
    if let Some(&bad) = pivots.iter().find(|&&p| p >= rows) {
        return Err(format_error(path, format!("pivot {bad} out of range")));
    }
    let total = rows
        .checked_mul(cols)
        .ok_or_else(|| format_error(path, "size overflow"))?;
    let body = c.f64s(total)?;
    c.finish()?;
    let m = Array2::from_shape_vec((rows, cols), body).expect("length checked");
    Ok((m, pivots))
}

pub fn write_dataset_bin(path: &Path, data: &SpatiotemporalDataset) -> Result<()> {
    let mut w = create(path)?;
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(&(data.n_snapshots() as u64).to_le_bytes())?;
        w.write_all(&(data.n_space() as u64).to_le_bytes())?;
        w.write_all(&data.length.to_le_bytes())?;
        w.write_all(&data.sample_dt.to_le_bytes())?;
        w.write_all(&data.start_time.to_le_bytes())?;
        write_rows(w, data.snapshots.view())?;
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

pub fn read_dataset_bin(path: &Path) -> Result<SpatiotemporalDataset> {
    let bytes = read_all(path)?;
    let mut c = Cursor { path, bytes: &bytes, pos: 0 };
    let n = c.usize()?;
    let m = c.usize()?;
    let length = c.f64()?;
    let sample_dt = c.f64()?;
    let start_time = c.f64()?;
    let total = n.checked_mul(m).ok_or_else(|| format_error(path, "size overflow"))?;
    let body = c.f64s(total)?;
    c.finish()?;
    Ok(SpatiotemporalDataset {
        snapshots: Array2::from_shape_vec((n, m), body).expect("length checked"),
        length,
        sample_dt,
        start_time,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_all(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Sidecar of a dataset binary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub n_snapshots: usize,
    pub n_space: usize,
    pub length: f64,
    pub sample_dt: f64,
    pub start_time: f64,
    pub ks: KsConfig,
}

/// Sidecar of a factor binary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSidecar {
    pub n: usize,
    pub rank: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub delays: usize,
    pub rel_trace_error: f64,
    pub truncated: bool,
}

/// Sidecar of an eigenvector binary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSidecar {
    pub method: String,
    pub n: usize,
    pub count: usize,
    pub rank: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub delays: usize,
    pub eigenvalues: Vec<f64>,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => format_error(path, format!("{other:?}")),
    }
}

/// Writes a table with the given header. Floats are written in their
/// shortest round-trip form, so regenerated tables compare byte for byte.
pub fn write_table<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a table, checking that its header is exactly `header`.
pub fn read_table(path: &Path, header: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let found = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(format_error(
            path,
            format!("expected columns {header:?}, found {:?}", found.iter().collect::<Vec<_>>()),
        ));
    }
    r.records()
        .map(|rec| {
            rec.map(|rec| rec.iter().map(str::to_owned).collect())
                .map_err(|e| csv_error(path, e))
        })
        .collect()
}

fn parse<T: std::str::FromStr>(path: &Path, column: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| format_error(path, format!("column {column}: cannot parse {s:?}")))
}

pub const EIGENVALUE_COLUMNS: [&str; 2] = ["index", "lambda"];

pub fn write_eigenvalues_csv(path: &Path, eigenvalues: &[f64]) -> Result<()> {
    write_table(
        path,
        &EIGENVALUE_COLUMNS,
        eigenvalues
            .iter()
            .enumerate()
            .map(|(i, l)| [i.to_string(), l.to_string()]),
    )
}

pub fn read_eigenvalues_csv(path: &Path) -> Result<Vec<f64>> {
    let rows = read_table(path, &EIGENVALUE_COLUMNS)?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let index: usize = parse(path, "index", &row[0])?;
            if index != i {
                return Err(format_error(path, format!("row {i} has index {index}")));
            }
            parse(path, "lambda", &row[1])
        })
        .collect()
}

pub const PIVOT_COLUMNS: [&str; 4] = ["order", "state", "time_index", "space_index"];

/// Pivots as product states; `time_index` counts usable snapshots.
pub fn write_pivots_csv(path: &Path, pivots: &[usize], n_space: usize) -> Result<()> {
    write_table(
        path,
        &PIVOT_COLUMNS,
        pivots.iter().enumerate().map(|(k, &p)| {
            [k.to_string(), p.to_string(), (p / n_space).to_string(), (p % n_space).to_string()]
        }),
    )
}

pub fn read_pivots_csv(path: &Path) -> Result<Vec<usize>> {
    read_table(path, &PIVOT_COLUMNS)?
        .iter()
        .map(|row| parse(path, "state", &row[1]))
        .collect()
}

pub const FIELD_COLUMNS: [&str; 3] = ["time", "space", "value"];

/// Long-format space-time grid for heatmaps.
pub fn write_field_csv(path: &Path, data: &SpatiotemporalDataset) -> Result<()> {
    let grid = data.grid();
    let rows = (0..data.n_snapshots()).flat_map(|n| {
        let t = data.time(n);
        let grid = &grid;
        (0..data.n_space()).map(move |m| [t.to_string(), grid[m].to_string(), data.snapshots[[n, m]].to_string()])
    });
    write_table(path, &FIELD_COLUMNS, rows)
}

pub const EIGENFUNCTION_COLUMNS: [&str; 4] = ["index", "time", "space", "value"];

/// Leading eigenvectors reshaped onto the product-state grid, long format.
pub fn write_eigenfunctions_csv(
    path: &Path,
    eigenvectors: ArrayView2<'_, f64>,
    count: usize,
    times: &[f64],
    grid: &[f64],
) -> Result<()> {
    let m = grid.len();
    let count = count.min(eigenvectors.ncols());
    let rows = (0..count).flat_map(|k| {
        (0..eigenvectors.nrows()).map(move |i| {
            [
                k.to_string(),
                times[i / m].to_string(),
                grid[i % m].to_string(),
                eigenvectors[[i, k]].to_string(),
            ]
        })
    });
    write_table(path, &EIGENFUNCTION_COLUMNS, rows)
}

pub const ERROR_COLUMNS: [&str; 4] = ["method", "truncation", "rel_l2_error", "rel_trace_error"];

pub const SUMMARY_COLUMNS: [&str; 6] = ["method", "count", "lambda_0", "below_1e-1", "below_1e-2", "below_1e-3"];

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = array![[1.0, -2.5, 3.0], [f64::MIN_POSITIVE, 0.1, 1e300]];
        write_matrix_bin(&path, m.view(), &[1, 0]).unwrap();
        let (back, pivots) = read_matrix_bin(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(pivots, vec![1, 0]);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 8 * 3 + 8 * 2 + 8 * 6);
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[40..48], &1.0f64.to_le_bytes());
        // column-major input is written in row-major order
        let t = m.t().to_owned().reversed_axes();
        write_matrix_bin(&path, t.view(), &[]).unwrap();
        assert_eq!(read_matrix_bin(&path).unwrap().0, m);
    }

    #[test]
    fn truncated_matrix_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_matrix_bin(&path, array![[1.0, 2.0]].view(), &[]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_matrix_bin(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let d = SpatiotemporalDataset {
            snapshots: array![[0.5, 1.5], [2.5, -3.5], [4.0, 5.0]],
            length: 22.0,
            sample_dt: 1.0,
            start_time: 2500.0,
        };
        write_dataset_bin(&path, &d).unwrap();
        assert_eq!(read_dataset_bin(&path).unwrap(), d);
    }

    #[test]
    fn eigenvalue_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let values = vec![1.0, 0.123456789012345678, 1e-17, 0.0];
        write_eigenvalues_csv(&path, &values).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("index,lambda\n0,1\n1,0.12345678901234568\n"));
        assert_eq!(read_eigenvalues_csv(&path).unwrap(), values);
    }

    #[test]
    fn wrong_header_names_the_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, "idx,lambda\n0,1\n").unwrap();
        let err = read_eigenvalues_csv(&path).unwrap_err();
        assert!(err.to_string().contains("idx"));
    }

    #[test]
    fn pivots_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_pivots_csv(&path, &[130, 5], 64).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "order,state,time_index,space_index\n0,130,2,2\n1,5,0,5\n");
        assert_eq!(read_pivots_csv(&path).unwrap(), vec![130, 5]);
        write_pivots_csv(&path, &[], 64).unwrap();
        assert!(read_pivots_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.json");
        let s = FactorSidecar {
            n: 10,
            rank: 3,
            seed: 4,
            epsilon: 50.0,
            delays: 2,
            rel_trace_error: 0.07,
            truncated: false,
        };
        write_json(&path, &s).unwrap();
        assert_eq!(read_json::<FactorSidecar>(&path).unwrap(), s);
    }
}
