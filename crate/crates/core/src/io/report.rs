use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diagnostics::EmbeddingDiagnostics;
use crate::error::{Error, Result};
use crate::representation::Variant;
use crate::similarity::{Index, SimilarityScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::InvalidInput(format!(
                "unknown report format `{other}`"
            ))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

/// One similarity value between two layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub layer_a: u32,
    pub layer_b: u32,
    pub variant: Variant,
    pub index: Index,
    pub sketched: bool,
    pub centering: bool,
    pub value: f64,
}

impl ScoreRow {
    pub fn from_score(
        layer_a: u32,
        layer_b: u32,
        variant: Variant,
        score: &SimilarityScore,
    ) -> Self {
        Self {
            layer_a,
            layer_b,
            variant,
            index: score.index,
            sketched: score.sketched,
            centering: score.centering,
            value: score.value,
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

fn render<T: Serialize>(rows: &[T], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(Vec::new());
            for row in rows {
                w.serialize(row).map_err(csv_error)?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
        }
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(rows)
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
    }
}

/// Rows of similarity scores with a fixed column order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreReport {
    rows: Vec<ScoreRow>,
}

impl ScoreReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: ScoreRow) -> Result<()> {
        if !(0.0..=1.0).contains(&row.value) {
            return Err(Error::ScoreOutOfRange(row.value));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[ScoreRow] {
        &self.rows
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        if self.rows.is_empty() && format == ReportFormat::Csv {
            return Ok("layer_a,layer_b,variant,index,sketched,centering,value\n".into());
        }
        render(&self.rows, format)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut report = Self::new();
        for row in r.deserialize() {
            report.push(row.map_err(csv_error)?)?;
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiagnosticsReport {
    pub rows: Vec<EmbeddingDiagnostics>,
}

impl DiagnosticsReport {
    pub fn render(&self, format: ReportFormat) -> Result<String> {
        render(&self.rows, format)
    }
}

/// One non-negative integer label per line; blank lines are ignored.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| {
                Error::InvalidInput(format!("line {}: `{}` is not a label", i + 1, l.trim()))
            })
        })
        .collect()
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 3);
    for y in labels {
        s.push_str(&y.to_string());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(value: f64) -> ScoreRow {
        ScoreRow {
            layer_a: 1,
            layer_b: 2,
            variant: Variant::Combined,
            index: Index::Cka,
            sketched: true,
            centering: false,
            value,
        }
    }

    #[test]
    fn csv_has_fixed_header_and_round_trips() {
        let mut report = ScoreReport::new();
        report.push(row(0.25)).unwrap();
        report.push(row(1.0)).unwrap();
        let text = report.render(ReportFormat::Csv).unwrap();
        assert_eq!(
            text,
            "layer_a,layer_b,variant,index,sketched,centering,value\n1,2,combined,cka,true,false,0.25\n1,2,combined,cka,true,false,1.0\n"
        );
        assert_eq!(ScoreReport::parse_csv(&text).unwrap(), report);
        assert_eq!(
            ScoreReport::new()
                .render(ReportFormat::Csv)
                .unwrap()
                .lines()
                .count(),
            1
        );
    }

    #[test]
    fn json_mirrors_csv() {
        let mut report = ScoreReport::new();
        report.push(row(0.5)).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&report.render(ReportFormat::Json).unwrap()).unwrap();
        assert_eq!(v[0]["variant"], "combined");
        assert_eq!(v[0]["value"], 0.5);
        assert!(report.push(row(1.5)).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.txt");
        write_labels(&p, &[0, 3, 1]).unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![0, 3, 1]);
        fs::write(&p, "1\nx\n").unwrap();
        assert!(read_labels(&p).is_err());
    }
}
