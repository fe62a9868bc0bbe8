//! CSV ingestion and report serialization.

pub mod tree;

use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::{InvertibilityReport, SelectionReport, SparsityReport};
use crate::error::{Error, Result};
use crate::glm::{Dataset, FamilyKind};
use crate::multistage::StageTrace;
use crate::solver::FitResult;
use tree::{format_float, to_node, Node};

pub const SCHEMA_VERSION: &str = "1";

/// Reads a comma-separated file whose last column is the response.
pub fn ingest_csv(path: impl AsRef<Path>, header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, header).map_err(|e| match e {
        Error::Ingestion(msg) => Error::Ingestion(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses CSV text; rows and columns in messages are 1-based and count the
/// header line.
pub fn parse_csv(text: &str, header: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let offset = if header { 2 } else { 1 };
    let mut width = None;
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + offset;
        let record = record.map_err(|e| Error::Ingestion(format!("row {row}: {e}")))?;
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Ingestion(format!(
                "row {row}: expected {w} columns, found {}",
                record.len()
            )));
        }
        if w < 2 {
            return Err(Error::Ingestion(format!(
                "row {row}: need at least one predictor and a response"
            )));
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Ingestion(format!(
                    "row {row}, column {}: non-numeric value {cell:?}",
                    c + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Ingestion(format!(
                    "row {row}, column {}: non-finite value {cell:?}",
                    c + 1
                )));
            }
            if c + 1 == w {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let Some(w) = width else {
        return Err(Error::Ingestion("file has no data rows".to_string()));
    };
    let n = ys.len();
    let x = DMatrix::from_row_slice(n, w - 1, &xs);
    Dataset::new(x, DVector::from_vec(ys)).map_err(|e| Error::Ingestion(e.to_string()))
}

/// Writes `x` and `y` as CSV with the response last.
pub fn write_dataset_csv(data: &Dataset, path: impl AsRef<Path>, header: bool) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_csv(data, header)).map_err(|e| Error::io(path, e))
}

pub fn dataset_csv(data: &Dataset, header: bool) -> String {
    let mut out = String::new();
    if header {
        let names: Vec<String> = (1..=data.p())
            .map(|j| format!("x{j}"))
            .chain(["y".to_string()])
            .collect();
        out.push_str(&names.join(","));
        out.push('\n');
    }
    for i in 0..data.n() {
        let row: Vec<String> = data
            .x()
            .row(i)
            .iter()
            .chain([data.y()[i]].iter())
            .map(|&v| format_float(v))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::domain(format!(
                "unknown format {other:?}; expected json or csv"
            ))),
        }
    }
}

fn node_of<T: Serialize + ?Sized>(value: &T) -> Result<Node> {
    to_node(value).map_err(|e| Error::Serialization(e.to_string()))
}

/// Anything `emit_report` can write.
pub trait Report {
    /// The JSON document: `schema_version`, `experiment`, `config`,
    /// `records`, `aggregates`.
    fn envelope(&self) -> Result<Node>;
    /// One node per CSV row.
    fn rows(&self) -> Result<Vec<Node>>;
}

pub(crate) fn envelope(
    experiment: &str,
    config: Node,
    records: Vec<Node>,
    aggregates: Node,
) -> Node {
    Node::Map(vec![
        (
            "schema_version".to_string(),
            Node::Str(SCHEMA_VERSION.to_string()),
        ),
        ("experiment".to_string(), Node::Str(experiment.to_string())),
        ("config".to_string(), config),
        ("records".to_string(), Node::Seq(records)),
        ("aggregates".to_string(), aggregates),
    ])
}

macro_rules! single_report {
    ($ty:ty, $label:expr) => {
        impl Report for $ty {
            fn envelope(&self) -> Result<Node> {
                Ok(envelope($label, Node::Null, Vec::new(), node_of(self)?))
            }
            fn rows(&self) -> Result<Vec<Node>> {
                Ok(vec![node_of(self)?])
            }
        }
    };
}

single_report!(InvertibilityReport, "invertibility");
single_report!(SelectionReport, "selection");
single_report!(SparsityReport, "sparsity");

impl Report for StageTrace {
    fn envelope(&self) -> Result<Node> {
        let aggregates = Node::Map(vec![(
            "count".to_string(),
            Node::Int(self.stages.len() as i128),
        )]);
        Ok(envelope("multistage", Node::Null, self.rows()?, aggregates))
    }
    fn rows(&self) -> Result<Vec<Node>> {
        self.stages.iter().map(node_of).collect()
    }
}

/// A single fit on user data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub family: FamilyKind,
    pub lambda: f64,
    pub standardized: bool,
    pub n: usize,
    pub p: usize,
    pub fit: FitResult,
}

impl Report for FitReport {
    fn envelope(&self) -> Result<Node> {
        let config = Node::Map(vec![
            ("family".to_string(), Node::Str(self.family.to_string())),
            ("lambda".to_string(), Node::Float(self.lambda)),
            ("standardized".to_string(), Node::Bool(self.standardized)),
            ("n".to_string(), Node::Int(self.n as i128)),
            ("p".to_string(), Node::Int(self.p as i128)),
        ]);
        Ok(envelope("fit", config, Vec::new(), node_of(&self.fit)?))
    }

    /// One row per coefficient.
    fn rows(&self) -> Result<Vec<Node>> {
        Ok(self
            .fit
            .beta_hat
            .iter()
            .enumerate()
            .map(|(j, &b)| {
                Node::Map(vec![
                    ("index".to_string(), Node::Int(j as i128)),
                    ("coefficient".to_string(), Node::Float(b)),
                    (
                        "negative_gradient".to_string(),
                        Node::Float(self.fit.negative_gradient[j]),
                    ),
                ])
            })
            .collect())
    }
}

/// CSV with the union of flattened columns in first-seen order; missing
/// cells are left empty so every row has the same width.
pub fn rows_to_csv(rows: &[Node]) -> Result<String> {
    let flat: Vec<Vec<(String, String)>> = rows.iter().map(Node::flatten).collect();
    let mut columns: Vec<String> = Vec::new();
    for row in &flat {
        for (k, _) in row {
            if !columns.contains(k) {
                columns.push(k.clone());
            }
        }
    }
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    writer.write_record(&columns).map_err(ser)?;
    for row in &flat {
        let cells: Vec<&str> = columns
            .iter()
            .map(|c| {
                row.iter()
                    .find(|(k, _)| k == c)
                    .map(|(_, v)| v.as_str())
                    .unwrap_or("")
            })
            .collect();
        writer.write_record(&cells).map_err(ser)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
}

pub fn render_report<R: Report + ?Sized>(report: &R, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(report.envelope()?.to_json()),
        ReportFormat::Csv => rows_to_csv(&report.rows()?),
    }
}

pub fn emit_report<R: Report + ?Sized>(
    report: &R,
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let text = render_report(report, format)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed_file() {
        let d = parse_csv("1,2,3\n4,5,6\n7,8,9\n", false).unwrap();
        assert_eq!((d.n(), d.p()), (3, 2));
        assert_eq!(d.y()[2], 9.0);
        assert_eq!(d.x()[(1, 1)], 5.0);
    }

    #[test]
    fn errors_name_the_location() {
        let e = parse_csv("a,b,y\n1,2,3\n4,5\n", true)
            .unwrap_err()
            .to_string();
        assert!(e.contains("row 3"), "{e}");
        let e = parse_csv("1,2,3\n4,x,6\n", false).unwrap_err().to_string();
        assert!(e.contains("row 2, column 2"), "{e}");
        let e = parse_csv("1,inf,3\n", false).unwrap_err().to_string();
        assert!(e.contains("non-finite"), "{e}");
        assert!(parse_csv("", false).is_err());
        assert!(matches!(parse_csv("x,y\n", true), Err(Error::Ingestion(_))));
    }

    #[test]
    fn header_round_trip() {
        let x = DMatrix::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -2.0, 1e-20]);
        let d = Dataset::new(x, DVector::from_vec(vec![0.7, 2.0 / 7.0])).unwrap();
        for header in [true, false] {
            let back = parse_csv(&dataset_csv(&d, header), header).unwrap();
            assert_eq!(back.x(), d.x());
            assert_eq!(back.y(), d.y());
        }
    }

    #[test]
    fn csv_columns_are_constant() {
        let a = Node::Map(vec![
            ("a".into(), Node::Float(1.0)),
            ("b".into(), Node::Seq(vec![Node::Int(1)])),
        ]);
        let b = Node::Map(vec![
            ("a".into(), Node::Null),
            ("b".into(), Node::Seq(vec![Node::Int(1), Node::Int(2)])),
        ]);
        let text = rows_to_csv(&[a, b]).unwrap();
        let widths: Vec<usize> = text.lines().map(|l| l.split(',').count()).collect();
        assert!(widths.iter().all(|&w| w == widths[0]), "{text}");
    }
}
