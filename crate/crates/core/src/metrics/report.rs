use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{ensure_shape, Error, Result};

/// Summary of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// `None` when no entry was evaluated (e.g. a fully observed completion).
    pub nmae: Option<f64>,
    pub nrmse: Option<f64>,
    /// Per-slot TRE; `None` where the true traffic is zero.
    pub tre: Vec<Option<f64>>,
    pub mmd2: Option<f64>,
    pub observed_entries: usize,
    pub evaluated_entries: usize,
}

impl MetricReport {
    /// Mean of the defined TRE values.
    pub fn tre_mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.tre.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        vec![
            ("nmae", opt(self.nmae)),
            ("nrmse", opt(self.nrmse)),
            ("tre_mean", opt(self.tre_mean())),
            ("mmd2", opt(self.mmd2)),
            ("observed_entries", self.observed_entries.to_string()),
            ("evaluated_entries", self.evaluated_entries.to_string()),
            ("time_slots", self.tre.len().to_string()),
        ]
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        self.fields().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn csv_header() -> String {
        "nmae,nrmse,tre_mean,mmd2,observed_entries,evaluated_entries,time_slots".to_string()
    }

    pub fn csv_row(&self) -> String {
        self.fields().into_iter().map(|(_, v)| v).collect::<Vec<_>>().join(",")
    }
}

/// Writes `label,v0,v1,…` rows: every real window, then every synthetic one.
pub fn export_flat_samples(real: &[Array2<f64>], synth: &[Array2<f64>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = real.first().or(synth.first()).map(|x| x.len()).unwrap_or(0);
    for x in real.iter().chain(synth) {
        ensure_shape(x.len() == d, || format!("window with {} entries, expected {d}", x.len()))?;
    }
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let header: Vec<String> = std::iter::once("label".to_string()).chain((0..d).map(|i| format!("v{i}"))).collect();
    writeln!(f, "{}", header.join(",")).map_err(io)?;
    for (label, set) in [("real", real), ("synth", synth)] {
        for x in set {
            let vals: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{label},{}", vals.join(",")).map_err(io)?;
        }
    }
    f.flush().map_err(io)
}

/// Reads back a file written by [`export_flat_samples`].
pub fn read_flat_samples(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<f64>)>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.into(),
            line: 0,
            msg: e.to_string(),
        })?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let parse_err = |msg: String| Error::Parse {
            path: path.into(),
            line: i + 2,
            msg,
        };
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let label = rec.get(0).unwrap_or_default().to_string();
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| parse_err(format!("{v:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        out.push((label, vals));
    }
    Ok(out)
}
