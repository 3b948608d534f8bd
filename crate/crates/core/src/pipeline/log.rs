use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const LOSS_LOG_FILE: &str = "loss_log.tsv";
pub const PROBE_LOG_FILE: &str = "probe_log.tsv";
const LOSS_HEADER: &str = "iter\tpix\tcls\ttotal\tlr_enc\tlr_dec";
const PROBE_HEADER: &str = "iter\taccuracy";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub pix: f64,
    pub cls: f64,
    pub total: f64,
    pub lr_enc: f64,
    pub lr_dec: f64,
}

/// Per-iteration loss breakdown, written as tab-separated text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LogRow>,
}

impl LossLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(LOSS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", r.iter, r.pix, r.cls, r.total, r.lr_enc, r.lr_dec);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOSS_HEADER) {
            return Err(Error::InvalidInput("loss log header mismatch".into()));
        }
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                let num = |i: usize| -> Result<f64> {
                    f.get(i)
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::InvalidInput(format!("bad loss log row {l:?}")))
                };
                Ok(LogRow {
                    iter: num(0)? as u64,
                    pix: num(1)?,
                    cls: num(2)?,
                    total: num(3)?,
                    lr_enc: num(4)?,
                    lr_dec: num(5)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn truncate_to(&mut self, iter: u64) {
        self.rows.retain(|r| r.iter <= iter);
    }

    /// `(iter, total)` points, e.g. for charts.
    pub fn totals(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.iter as f64, r.total)).collect()
    }
}

pub fn probe_log_tsv(rows: &[(u64, f64)]) -> String {
    let mut s = String::from(PROBE_HEADER);
    s.push('\n');
    for (i, a) in rows {
        let _ = writeln!(s, "{i}\t{a}");
    }
    s
}

pub fn parse_probe_log(text: &str) -> Result<Vec<(u64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(PROBE_HEADER) {
        return Err(Error::InvalidInput("probe log header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (i, a) = l.split_once('\t').ok_or_else(|| Error::InvalidInput(format!("bad probe row {l:?}")))?;
            match (i.parse(), a.parse()) {
                (Ok(i), Ok(a)) => Ok((i, a)),
                _ => Err(Error::InvalidInput(format!("bad probe row {l:?}"))),
            }
        })
        .collect()
}
