//! CSV persistence for dense and sparse datasets.
//!
//! One row per (condition, point), grouped by condition. Floats are written in
//! shortest round-trip decimal form, so a write/read cycle is lossless.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DenseDataset, FlowCondition, SparseDataset, SurfacePoint};
use crate::error::{Error, Result};

pub const DENSE_HEADER: [&str; 10] = [
    "mach",
    "alpha",
    "x",
    "y",
    "z",
    "nx",
    "ny",
    "nz",
    "area_weight",
    "cp",
];
pub const SPARSE_HEADER: [&str; 11] = [
    "mach",
    "alpha",
    "x",
    "y",
    "z",
    "nx",
    "ny",
    "nz",
    "area_weight",
    "cp",
    "section_id",
];

struct Row {
    condition: FlowCondition,
    point: SurfacePoint,
    cp: f64,
    section: Option<u32>,
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

fn row_fields(c: &FlowCondition, p: &SurfacePoint, cp: f64) -> [String; 10] {
    [
        c.mach.to_string(),
        c.alpha.to_string(),
        p.position[0].to_string(),
        p.position[1].to_string(),
        p.position[2].to_string(),
        p.normal[0].to_string(),
        p.normal[1].to_string(),
        p.normal[2].to_string(),
        p.area_weight.to_string(),
        cp.to_string(),
    ]
}

pub fn write_dense_csv(dataset: &DenseDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dense(dataset, BufWriter::new(file)).map_err(|e| csv_err(path, e))
}

fn write_dense<W: Write>(dataset: &DenseDataset, w: W) -> csv::Result<()> {
    let mut wr = csv_writer(w);
    wr.write_record(DENSE_HEADER)?;
    for s in dataset.samples() {
        wr.write_record(row_fields(&s.condition, &s.point, s.cp))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_sparse_csv(dataset: &SparseDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_sparse(dataset, BufWriter::new(file)).map_err(|e| csv_err(path, e))
}

fn write_sparse<W: Write>(dataset: &SparseDataset, w: W) -> csv::Result<()> {
    let mut wr = csv_writer(w);
    wr.write_record(SPARSE_HEADER)?;
    let m = dataset.num_sensors();
    for (k, s) in dataset.samples().enumerate() {
        let mut rec = row_fields(&s.condition, &s.point, s.cp).to_vec();
        rec.push(dataset.section_ids()[k % m].to_string());
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_rows<R: Read>(reader: R, path: &Path, sparse: bool) -> Result<Vec<Row>> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let bad = |message: String| Error::Csv {
        path: path.to_path_buf(),
        message,
    };
    let headers = rd.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected: &[&str] = if sparse {
        &SPARSE_HEADER
    } else {
        &DENSE_HEADER
    };
    if headers.iter().ne(expected.iter().copied()) {
        return Err(bad(format!(
            "expected header `{}`, found `{}`",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let mut v = [0.0f64; 10];
        for (j, slot) in v.iter_mut().enumerate() {
            *slot = rec[j]
                .trim()
                .parse()
                .map_err(|_| bad(format!("row {}: bad number `{}`", line + 2, &rec[j])))?;
        }
        let section = if sparse {
            Some(
                rec[10]
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("row {}: bad section id `{}`", line + 2, &rec[10])))?,
            )
        } else {
            None
        };
        let condition =
            FlowCondition::new(v[0], v[1]).map_err(|e| bad(format!("row {}: {e}", line + 2)))?;
        let point = SurfacePoint::new([v[2], v[3], v[4]], [v[5], v[6], v[7]], v[8])
            .map_err(|e| bad(format!("row {}: {e}", line + 2)))?;
        rows.push(Row {
            condition,
            point,
            cp: v[9],
            section,
        });
    }
    Ok(rows)
}

/// Splits condition-major rows into (points, section ids, conditions, columns),
/// checking that every condition covers the same points in the same order.
#[allow(clippy::type_complexity)]
fn group(
    rows: Vec<Row>,
    path: &Path,
) -> Result<(
    Vec<SurfacePoint>,
    Vec<Option<u32>>,
    Vec<FlowCondition>,
    Vec<Vec<f64>>,
)> {
    let bad = |message: String| Error::Csv {
        path: path.to_path_buf(),
        message,
    };
    let mut conditions: Vec<FlowCondition> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut points: Vec<SurfacePoint> = Vec::new();
    let mut sections: Vec<Option<u32>> = Vec::new();
    for row in rows {
        if conditions.last() != Some(&row.condition) {
            if conditions.contains(&row.condition) {
                return Err(bad(format!(
                    "rows for condition (mach {}, alpha {}) are not contiguous",
                    row.condition.mach, row.condition.alpha
                )));
            }
            if conditions.len() > 1 && columns.last().map(Vec::len) != Some(points.len()) {
                return Err(bad("conditions cover different numbers of points".into()));
            }
            conditions.push(row.condition);
            columns.push(Vec::new());
        }
        let col = columns.last_mut().expect("column pushed above");
        let i = col.len();
        if conditions.len() == 1 {
            points.push(row.point);
            sections.push(row.section);
        } else if i >= points.len() || points[i] != row.point || sections[i] != row.section {
            return Err(bad(format!(
                "point {i} of condition {} differs from the first condition's grid",
                conditions.len() - 1
            )));
        }
        col.push(row.cp);
    }
    if columns.iter().any(|c| c.len() != points.len()) {
        return Err(bad("conditions cover different numbers of points".into()));
    }
    if conditions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((points, sections, conditions, columns))
}

pub fn read_dense_csv(path: &Path) -> Result<DenseDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let rows = read_rows(BufReader::new(file), path, false)?;
    let (points, _, conditions, columns) = group(rows, path)?;
    DenseDataset::new(points, conditions, columns)
}

pub fn read_sparse_csv(path: &Path) -> Result<SparseDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let rows = read_rows(BufReader::new(file), path, true)?;
    let (points, sections, conditions, columns) = group(rows, path)?;
    let ids = sections.into_iter().map(|s| s.unwrap_or(0)).collect();
    SparseDataset::new(points, ids, conditions, columns)
}
