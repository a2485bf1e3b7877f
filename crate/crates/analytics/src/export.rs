use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, SpecializationReport};

/// Version stamped into every JSON report.
pub const SCHEMA_VERSION: u32 = 1;

/// JSON Schema for exported reports.
pub const SCHEMA: &str = include_str!("../schema/specialization_report.schema.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
}

/// One histogram bin of the long-form CSV export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub class: String,
    pub layer: usize,
    pub expert: usize,
    pub count: u64,
    pub frequency: f64,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn export_report(report: &SpecializationReport, path: &Path, format: ExportFormat) -> Result<()> {
    match format {
        ExportFormat::Json => {
            let text = serde_json::to_string_pretty(report)?;
            std::fs::write(path, text + "\n").map_err(io(path))
        }
        ExportFormat::Csv => {
            let file = std::fs::File::create(path).map_err(io(path))?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            w.write_record(["class", "layer", "expert", "count", "frequency"])?;
            for c in &report.classes {
                for p in &c.layers {
                    let h = &p.histogram;
                    for (expert, (&count, &f)) in h.counts.iter().zip(&h.frequencies).enumerate() {
                        w.serialize(CsvRow {
                            class: c.class.clone(),
                            layer: h.layer,
                            expert,
                            count,
                            frequency: (f * 1e6).round() / 1e6,
                        })?;
                    }
                }
            }
            w.flush().map_err(io(path))
        }
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specialization_report;
    use crate::tests::trace;

    fn report() -> SpecializationReport {
        let a: Vec<_> = [0, 0, 1, 2, 2, 2, 3]
            .iter()
            .flat_map(|&e| [trace(0, e, 4), trace(1, (e + 1) % 4, 4)])
            .collect();
        let b: Vec<_> = [1, 1, 1]
            .iter()
            .flat_map(|&e| [trace(0, e, 4), trace(1, e, 4)])
            .collect();
        specialization_report(&[("reentrancy".into(), a), ("timestamp".into(), b)], &[0, 1]).unwrap()
    }

    /// Validates with the Python `jsonschema` package, an implementation
    /// independent of this crate.
    fn validate(schema: &Path, doc: &Path) -> String {
        let script = "import json,sys,jsonschema\n\
            s=json.load(open(sys.argv[1])); d=json.load(open(sys.argv[2]))\n\
            jsonschema.Draft202012Validator.check_schema(s)\n\
            print('ok' if jsonschema.Draft202012Validator(s).is_valid(d) else 'invalid')";
        let out = std::process::Command::new("python3")
            .args(["-c", script])
            .arg(schema)
            .arg(doc)
            .output()
            .expect("python3 with the jsonschema package is needed for schema tests");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap().trim().to_string()
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let r = report();
        r.export(&path, ExportFormat::Csv).unwrap();
        let rows = read_csv(&path).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 4);
        for row in rows {
            let p = r.profile(&row.class, row.layer).unwrap();
            assert_eq!(row.count, p.histogram.counts[row.expert]);
            assert!((row.frequency - p.histogram.frequencies[row.expert]).abs() < 5e-7);
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let empty = SpecializationReport {
            schema_version: SCHEMA_VERSION,
            experts: 8,
            layers: vec![],
            classes: vec![],
            overlap: vec![],
        };
        empty.export(&path, ExportFormat::Csv).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "class,layer,expert,count,frequency\n"
        );
        assert!(read_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn json_matches_schema_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let r = report();
        r.export(&path, ExportFormat::Json).unwrap();
        let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let schema = dir.path().join("schema.json");
        std::fs::write(&schema, SCHEMA).unwrap();
        assert_eq!(validate(&schema, &path), "ok");
        let back: SpecializationReport = serde_json::from_value(value.clone()).unwrap();
        assert_eq!(back, r);

        let mut bad = value;
        bad["classes"][0]["layers"][0]["entropy"] = serde_json::json!(-1.0);
        let bad_path = dir.path().join("bad.json");
        std::fs::write(&bad_path, bad.to_string()).unwrap();
        assert_eq!(validate(&schema, &bad_path), "invalid");
    }
}
