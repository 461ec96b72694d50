use std::path::Path;

use crate::error::{Error, Result};

pub const LOG_HEADER: [&str; 7] = ["step", "t", "total", "dds", "per_bak", "per_for", "grad_norm"];

/// One optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub t: i64,
    pub total: f64,
    pub dds: f64,
    pub per_bak: f64,
    pub per_for: f64,
    pub grad_norm: f64,
}

/// Per-step loss record of one phase; steps count up from 1 without gaps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    rows: Vec<LossRow>,
}

impl LossLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[LossRow] {
        &self.rows
    }

    pub fn last_total(&self) -> Option<f64> {
        self.rows.last().map(|r| r.total)
    }

    pub fn append(&mut self, row: LossRow) -> Result<()> {
        let expected = self.rows.last().map_or(1, |r| r.step + 1);
        if row.step != expected {
            return Err(Error::Logic(format!(
                "loss log expected step {expected}, got {}",
                row.step
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Logic(format!("csv encoding: {e}"));
        w.write_record(LOG_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.t.to_string(),
                sig6(r.total),
                sig6(r.dds),
                sig6(r.per_bak),
                sig6(r.per_for),
                sig6(r.grad_norm),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Logic(format!("csv encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is ascii"))
    }

    /// Writes the whole log atomically; flushing twice gives the same bytes.
    pub fn flush(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = self.to_csv()?;
        super::write_atomic(path.as_ref(), |f| std::io::Write::write_all(f, text.as_bytes()))
    }
}

/// Six significant digits, fixed notation for moderate magnitudes.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..].parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        let (mantissa, e) = sci.split_at(sci.find('e').expect("exponent"));
        format!("{}{e}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}
