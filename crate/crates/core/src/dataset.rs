//! Paired-sample files: a CSV with columns `x1..xd,y1..ye` and a JSON sidecar.
//!
//! Lines starting with `#` are comments and are skipped on read.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::format_real;
use crate::scalar::Scalar;
use crate::world::PairedSample;

/// Sidecar metadata written next to a dataset CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub n: usize,
    pub tau: f64,
    pub seed: u64,
}

/// Writes `comments` as `# ...` lines, then the header and one row per pair.
pub fn write_sample_csv<T: Scalar, W: Write>(sample: &PairedSample<T>, comments: &[String], mut out: W) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let dx = sample.anchors[0].len();
    let dy = sample.targets[0].len();
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = (1..=dx).map(|k| format!("x{k}")).chain((1..=dy).map(|k| format!("y{k}"))).collect();
    w.write_record(&header)?;
    for (a, t) in sample.anchors.iter().zip(&sample.targets) {
        w.write_record(a.iter().chain(t).map(|v| format_real(v.as_f64())))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sample_csv<T: Scalar, R: Read>(input: R, tau: T) -> Result<PairedSample<T>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(input);
    let header = r.headers()?.clone();
    let mut dx = 0;
    for (k, name) in header.iter().enumerate() {
        let expected_x = format!("x{}", k + 1);
        if name == expected_x {
            dx = k + 1;
        } else if name != format!("y{}", k + 1 - dx) || dx == 0 {
            return Err(Error::Malformed(format!("unexpected column `{name}`; want x1..xd then y1..ye")));
        }
    }
    if dx == header.len() {
        return Err(Error::Malformed("dataset has no target columns".into()));
    }
    let mut anchors = Vec::new();
    let mut targets = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>().map(T::lit))
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|e| Error::Malformed(format!("row {}: {e}", line + 1)))?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed(format!("row {}: non-finite value", line + 1)));
        }
        let (a, t) = vals.split_at(dx);
        anchors.push(a.to_vec());
        targets.push(t.to_vec());
    }
    PairedSample::new(anchors, targets, tau)
}
