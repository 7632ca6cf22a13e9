use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::train::Configuration;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

const ANOMALY_COLUMNS: [&str; 2] = ["contrast", "texture"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellMetrics {
    pub image_auroc: f64,
    pub image_ap: f64,
    pub pixel_auroc: f64,
    pub best_dice: f64,
    pub n_normal: usize,
    pub n_anomalous: usize,
}

/// One trained arm. `cells` is keyed by anomaly type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub configuration: String,
    pub arm: Configuration,
    pub frozen_refiner_output: bool,
    pub seed: u64,
    pub config_hash: String,
    pub cells: BTreeMap<String, CellMetrics>,
}

impl ReportRow {
    pub fn for_checkpoint(ckpt: &Checkpoint, cells: BTreeMap<String, CellMetrics>) -> Self {
        let arm = ckpt.pipeline.configuration;
        let frozen = ckpt.run.train.freeze_refiner_output && arm != Configuration::Pdccore;
        let mut name = arm.display_name().to_string();
        if frozen {
            name.push_str(" (frozen)");
        }
        Self {
            configuration: name,
            arm,
            frozen_refiner_output: frozen,
            seed: ckpt.seed(),
            config_hash: ckpt.config_hash(),
            cells,
        }
    }

    fn order_key(&self) -> (Configuration, bool, &str) {
        (self.arm, self.frozen_refiner_output, &self.configuration)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn single(row: ReportRow) -> Self {
        Self { schema_version: REPORT_SCHEMA_VERSION, rows: vec![row] }
    }

    pub fn row(&self, configuration: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.configuration == configuration)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: MetricsReport =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed report: {e}")))?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                found: r.schema_version.to_string(),
                expected: REPORT_SCHEMA_VERSION,
            });
        }
        Ok(r)
    }
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, report.to_json()).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MetricsReport::from_json(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Merges rows by configuration name. Rows for the same configuration must
/// come from the same config hash; repeated cells keep the first value.
pub fn merge_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let mut rows: Vec<ReportRow> = Vec::new();
    for row in reports.iter().flat_map(|r| &r.rows) {
        match rows.iter_mut().find(|r| r.configuration == row.configuration) {
            None => rows.push(row.clone()),
            Some(existing) => {
                if existing.config_hash != row.config_hash {
                    let shared = row.cells.keys().find(|k| existing.cells.contains_key(*k));
                    let cell = match shared {
                        Some(k) => format!("{} / {k}", row.configuration),
                        None => row.configuration.clone(),
                    };
                    return Err(Error::ConflictingMetadata {
                        cell,
                        first: existing.config_hash.clone(),
                        second: row.config_hash.clone(),
                    });
                }
                for (k, v) in &row.cells {
                    existing.cells.entry(k.clone()).or_insert(*v);
                }
            }
        }
    }
    rows.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
    Ok(MetricsReport { schema_version: REPORT_SCHEMA_VERSION, rows })
}

const METRIC_HEADERS: [&str; 4] = ["img_auroc", "img_ap", "pix_auroc", "best_dice"];
const COL: usize = 10;

/// Aligned text table: one row per configuration, four metric columns per
/// anomaly type, then the run metadata.
pub fn render_table(report: &MetricsReport) -> String {
    let name_w = report.rows.iter().map(|r| r.configuration.len()).chain(["configuration".len()]).max().unwrap_or(0);
    let group_w = METRIC_HEADERS.len() * (COL + 1);
    let mut out = String::new();

    let mut line = format!("{:name_w$}", "");
    for a in ANOMALY_COLUMNS {
        write!(line, " | {a:<group_w$}").unwrap();
    }
    out.push_str(line.trim_end());
    out.push('\n');

    let mut line = format!("{:<name_w$}", "configuration");
    for _ in ANOMALY_COLUMNS {
        line.push_str(" |");
        for h in METRIC_HEADERS {
            write!(line, " {h:>COL$}").unwrap();
        }
    }
    out.push_str(&line);
    out.push('\n');
    out.push_str(&"-".repeat(line.len()));
    out.push('\n');

    for row in &report.rows {
        let mut line = format!("{:<name_w$}", row.configuration);
        for a in ANOMALY_COLUMNS {
            line.push_str(" |");
            match row.cells.get(a) {
                Some(c) => {
                    for v in [c.image_auroc, c.image_ap, c.pixel_auroc, c.best_dice] {
                        write!(line, " {v:>COL$.4}").unwrap();
                    }
                }
                None => {
                    for _ in METRIC_HEADERS {
                        write!(line, " {:>COL$}", "-").unwrap();
                    }
                }
            }
        }
        out.push_str(&line);
        out.push('\n');
    }

    out.push('\n');
    for row in &report.rows {
        writeln!(out, "{:<name_w$}  seed {}  config {}", row.configuration, row.seed, row.config_hash).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(v: f64) -> CellMetrics {
        CellMetrics { image_auroc: v, image_ap: v, pixel_auroc: v, best_dice: v, n_normal: 4, n_anomalous: 4 }
    }

    fn row(arm: Configuration, hash: &str, kinds: &[&str]) -> ReportRow {
        ReportRow {
            configuration: arm.display_name().into(),
            arm,
            frozen_refiner_output: false,
            seed: 1,
            config_hash: hash.into(),
            cells: kinds.iter().map(|k| (k.to_string(), cell(0.75))).collect(),
        }
    }

    #[test]
    fn merge_orders_rows_and_joins_cells() {
        let reports = [
            MetricsReport::single(row(Configuration::WidePopusense, "c", &["contrast", "texture"])),
            MetricsReport::single(row(Configuration::Pdccore, "a", &["contrast"])),
            MetricsReport::single(row(Configuration::Pdccore, "a", &["texture"])),
            MetricsReport::single(row(Configuration::NarrowPopusense, "b", &["contrast", "texture"])),
        ];
        let merged = merge_reports(&reports).unwrap();
        let names: Vec<_> = merged.rows.iter().map(|r| r.configuration.as_str()).collect();
        assert_eq!(names, ["PDCCore", "Narrow PopuSense", "Wide PopuSense"]);
        assert_eq!(merged.rows[0].cells.len(), 2);
        let table = render_table(&merged);
        assert_eq!(table.matches("0.7500").count(), 24);
    }

    #[test]
    fn conflicting_hashes_name_both() {
        let reports = [
            MetricsReport::single(row(Configuration::Pdccore, "aaaa", &["contrast"])),
            MetricsReport::single(row(Configuration::Pdccore, "bbbb", &["contrast"])),
        ];
        let err = merge_reports(&reports).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("aaaa") && msg.contains("bbbb") && msg.contains("contrast"), "{msg}");
        assert_ne!(err.exit_code(), 0);
    }

    #[test]
    fn missing_cells_render_as_dashes() {
        let r = MetricsReport::single(row(Configuration::Pdccore, "a", &["contrast"]));
        let table = render_table(&r);
        assert_eq!(table.matches("0.7500").count(), 4);
        assert_eq!(table.lines().nth(3).unwrap().matches(" -").count(), 4);
    }

    #[test]
    fn json_roundtrip() {
        let r = MetricsReport::single(row(Configuration::WidePopusense, "h", &["texture"]));
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
        assert!(MetricsReport::from_json("{\"schema_version\":1,\"rows\":[],\"x\":1}").is_err());
    }
}
