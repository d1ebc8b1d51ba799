//! CSV readers and writers for traces, masks, routing matrices and link loads.
//!
//! Trace files hold one time slot per row and one OD flow per column. An empty
//! cell (or `NaN`) is a missing measurement. A leading non-numeric row is
//! treated as a header, and a `# nodes = K` comment declares a `K`-node
//! network whose flow count must be `K²`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use super::tensor::{LinkLoads, ObservationMask, RoutingMatrix, TrafficTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CsvLayout {
    /// One time slot per row (the canonical trace layout).
    #[default]
    RowsAreTime,
    /// One flow per row.
    RowsAreFlows,
}

struct RawTable {
    rows: Vec<Vec<Option<f64>>>,
    nodes: Option<usize>,
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_table(path: &Path) -> Result<RawTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;

    let mut nodes = None;
    for (idx, line) in text.lines().enumerate() {
        let Some(comment) = line.trim_start().strip_prefix('#') else {
            continue;
        };
        if let Some((key, value)) = comment.split_once('=') {
            if key.trim() == "nodes" {
                let k = value
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| parse_error(path, idx + 1, format!("bad node count {:?}", value.trim())))?;
                nodes = Some(k);
            }
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_error(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<Option<f64>>, String> = record
            .iter()
            .map(|cell| {
                if cell.is_empty() {
                    return Ok(None);
                }
                match cell.parse::<f64>() {
                    Ok(v) if v.is_nan() => Ok(None),
                    Ok(v) => Ok(Some(v)),
                    Err(_) => Err(cell.to_string()),
                }
            })
            .collect();
        let cells = match parsed {
            Ok(cells) => cells,
            // A non-numeric first data row is a header.
            Err(_) if rows.is_empty() && width.is_none() => {
                width = Some(record.len());
                continue;
            }
            Err(cell) => return Err(parse_error(path, line, format!("cannot parse {cell:?} as a number"))),
        };
        match width {
            Some(w) if w != cells.len() => {
                return Err(parse_error(
                    path,
                    line,
                    format!("ragged row: expected {w} cells, found {}", cells.len()),
                ))
            }
            None => width = Some(cells.len()),
            _ => {}
        }
        rows.push(cells);
    }
    if rows.is_empty() {
        return Err(parse_error(path, 1, "no data rows"));
    }
    Ok(RawTable { rows, nodes })
}

/// Reads a traffic trace. Missing cells become 0 with mask bit 0.
pub fn ingest_csv(path: impl AsRef<Path>, layout: CsvLayout) -> Result<(TrafficTensor, ObservationMask)> {
    let path = path.as_ref();
    let table = read_table(path)?;
    let (r, c) = (table.rows.len(), table.rows[0].len());
    let (flows, times) = match layout {
        CsvLayout::RowsAreTime => (c, r),
        CsvLayout::RowsAreFlows => (r, c),
    };
    let mut values = Array2::zeros((flows, times));
    let mut bits = Array2::zeros((flows, times));
    for (i, row) in table.rows.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let (f, t) = match layout {
                CsvLayout::RowsAreTime => (j, i),
                CsvLayout::RowsAreFlows => (i, j),
            };
            if let Some(v) = cell {
                if *v < 0.0 || !v.is_finite() {
                    return Err(Error::validation(format!(
                        "{}: invalid traffic value {v} at flow {f}, slot {t}",
                        path.display()
                    )));
                }
                values[[f, t]] = *v;
                bits[[f, t]] = 1.0;
            }
        }
    }
    if let Some(k) = table.nodes {
        if k * k != flows {
            return Err(Error::validation(format!(
                "{}: declared {k} nodes but found {flows} flows (expected {})",
                path.display(),
                k * k
            )));
        }
    }
    Ok((TrafficTensor::new(values)?, ObservationMask::new(bits)?))
}

/// Reads a dense matrix with no missing cells, as laid out in the file.
pub fn read_dense_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let table = read_table(path)?;
    let (r, c) = (table.rows.len(), table.rows[0].len());
    let mut out = Array2::zeros((r, c));
    for (i, row) in table.rows.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            out[[i, j]] = cell.ok_or_else(|| {
                Error::validation(format!("{}: missing cell at row {i}, column {j}", path.display()))
            })?;
        }
    }
    Ok(out)
}

/// Mask files are dense flows × time matrices over {0, 1}.
pub fn read_mask_csv(path: impl AsRef<Path>) -> Result<ObservationMask> {
    ObservationMask::new(read_dense_csv(path)?)
}

/// Routing files are dense links × flows matrices.
pub fn read_routing_csv(path: impl AsRef<Path>) -> Result<RoutingMatrix> {
    RoutingMatrix::new(read_dense_csv(path)?)
}

/// Link-load files follow the trace layout: one time slot per row, one link per column.
pub fn read_link_loads_csv(path: impl AsRef<Path>) -> Result<LinkLoads> {
    let values = read_dense_csv(path)?.reversed_axes().as_standard_layout().to_owned();
    Ok(LinkLoads {
        values,
        noise_sigma: 0.0,
    })
}

/// Writes `matrix` row by row. `Display` for f64 round-trips exactly.
pub fn write_dense_csv(path: impl AsRef<Path>, matrix: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for row in matrix.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.write_all(b",").map_err(io)?;
            }
            first = false;
            write!(out, "{v}").map_err(io)?;
        }
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Writes a flows × time matrix in trace layout (time slots as rows).
pub fn write_trace_csv(path: impl AsRef<Path>, flows_by_time: &Array2<f64>) -> Result<()> {
    write_dense_csv(path, &flows_by_time.t().to_owned())
}

pub fn write_mask_csv(path: impl AsRef<Path>, mask: &ObservationMask) -> Result<()> {
    write_dense_csv(path, mask.bits())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn all_zero_trace_has_full_mask() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "z.csv", "0,0,0,0\n0,0,0,0\n0,0,0,0\n");
        let (x, m) = ingest_csv(&p, CsvLayout::RowsAreTime).unwrap();
        assert_eq!(x.shape(), (4, 3));
        assert!(x.values().iter().all(|&v| v == 0.0));
        assert_eq!(m.observed_count(), 12);
    }

    #[test]
    fn empty_cell_is_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "m.csv", "a,b\n1,2\n3,\n");
        let (x, m) = ingest_csv(&p, CsvLayout::RowsAreTime).unwrap();
        assert_eq!(x.values()[[1, 1]], 0.0);
        assert!(!m.is_observed(1, 1));
        assert!(m.is_observed(0, 1));
        assert_eq!(m.observed_count(), 3);
    }

    #[test]
    fn ragged_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "r.csv", "1,2\n3,4\n5\n");
        match ingest_csv(&p, CsvLayout::RowsAreTime) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn negative_value_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "n.csv", "1,-2\n");
        assert!(matches!(ingest_csv(&p, CsvLayout::RowsAreTime), Err(Error::Validation(_))));
    }

    #[test]
    fn node_metadata_checks_flow_count() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(&dir, "ok.csv", "# nodes = 2\n1,2,3,4\n");
        let (x, _) = ingest_csv(&ok, CsvLayout::RowsAreTime).unwrap();
        assert_eq!(x.flow_count(), 4);
        let bad = write(&dir, "bad.csv", "# nodes = 3\n1,2,3,4\n");
        assert!(ingest_csv(&bad, CsvLayout::RowsAreTime).is_err());
    }

    #[test]
    fn twelve_node_trace_has_144_flows() {
        let dir = tempfile::tempdir().unwrap();
        let row = (0..144).map(|i| (i as f64 * 0.5).to_string()).collect::<Vec<_>>().join(",");
        let body = format!("# nodes = 12\n{row}\n{row}\n");
        let p = write(&dir, "abilene.csv", &body);
        let (x, _) = ingest_csv(&p, CsvLayout::RowsAreTime).unwrap();
        assert_eq!(x.flow_count(), 144);
        assert_eq!(x.time_count(), 2);
    }

    #[test]
    fn rows_are_flows_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "f.csv", "1,2,3\n4,5,6\n");
        let (x, _) = ingest_csv(&p, CsvLayout::RowsAreFlows).unwrap();
        assert_eq!(x.shape(), (2, 3));
        assert_eq!(x.values()[[1, 0]], 4.0);
    }

    #[test]
    fn trace_write_read_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let values = Array2::from_shape_fn((3, 5), |(i, j)| (i as f64 + 0.1) / (j as f64 + 3.0));
        let p = dir.path().join("t.csv");
        write_trace_csv(&p, &values).unwrap();
        let (x, m) = ingest_csv(&p, CsvLayout::RowsAreTime).unwrap();
        assert_eq!(x.values(), &values);
        assert_eq!(m.observed_count(), 15);
    }
}
