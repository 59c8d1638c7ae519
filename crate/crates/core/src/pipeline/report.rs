use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::Variant;
use super::run::SUMMARY_FILE;
use crate::Result;

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: PathBuf,
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    pub complete: bool,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Human-readable warnings, e.g. the two-way/one-way ordering check.
    pub flags: Vec<String>,
}

const VALUE_KEYS: [&str; 6] = [
    "day_ap",
    "day_ap50",
    "night_ap",
    "night_ap50",
    "final_l_fcl",
    "final_l_ewc",
];

fn read_kv(path: &Path) -> Option<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).ok()?;
    Some(
        text.lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect(),
    )
}

fn read_row(dir: &Path) -> ReportRow {
    let summary = read_kv(&dir.join(SUMMARY_FILE));
    let config = read_kv(&dir.join("config.txt"));
    let get = |k: &str| {
        summary
            .as_ref()
            .and_then(|s| s.get(k))
            .or_else(|| config.as_ref().and_then(|c| c.get(k)))
            .cloned()
    };
    let complete = summary
        .as_ref()
        .is_some_and(|s| s.get("status").map(String::as_str) == Some("complete"))
        && dir.join("metrics_day.csv").is_file()
        && dir.join("metrics_night.csv").is_file();
    let values = VALUE_KEYS
        .iter()
        .filter_map(|k| Some((k.to_string(), summary.as_ref()?.get(*k)?.parse().ok()?)))
        .collect();
    ReportRow {
        run: dir.to_path_buf(),
        variant: get("variant").and_then(|v| v.parse().ok()),
        seed: get("seed").and_then(|v| v.parse().ok()),
        complete,
        values,
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median night AP50 of complete runs of `variant`.
pub fn median_night_ap50(rows: &[ReportRow], variant: Variant) -> Option<f64> {
    median(
        rows.iter()
            .filter(|r| r.complete && r.variant == Some(variant))
            .filter_map(|r| r.values.get("night_ap50").copied())
            .collect(),
    )
}

/// Collects run directories into a table. Incomplete runs are kept and flagged.
pub fn report(run_dirs: &[PathBuf]) -> Result<Report> {
    let rows: Vec<ReportRow> = run_dirs.iter().map(|d| read_row(d)).collect();
    let mut flags = Vec::new();
    for r in rows.iter().filter(|r| !r.complete) {
        flags.push(format!("incomplete run: {}", r.run.display()));
    }
    if let (Some(two), Some(one)) = (
        median_night_ap50(&rows, Variant::FdclEwc2w),
        median_night_ap50(&rows, Variant::FdclEwc),
    ) {
        if two < one {
            flags.push(format!(
                "ordering: fdcl_ewc_2w median night AP50 {two:.4} < fdcl_ewc {one:.4}"
            ));
        } else {
            flags.push(format!(
                "ordering ok: fdcl_ewc_2w median night AP50 {two:.4} >= fdcl_ewc {one:.4}"
            ));
        }
    }
    Ok(Report { rows, flags })
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("run,variant,seed,status,day_ap,day_ap50,night_ap,night_ap50,final_l_fcl,final_l_ewc\n");
        for r in &self.rows {
            let v = |k: &str| r.values.get(k).map_or_else(String::new, |v| format!("{v}"));
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.run.display(),
                r.variant.map_or("unknown", Variant::name),
                r.seed.map_or_else(String::new, |s| s.to_string()),
                if r.complete { "complete" } else { "incomplete" },
                v("day_ap"),
                v("day_ap50"),
                v("night_ap"),
                v("night_ap50"),
                v("final_l_fcl"),
                v("final_l_ewc"),
            )
            .expect("string write");
        }
        for f in &self.flags {
            writeln!(s, "# {f}").expect("string write");
        }
        s
    }
}
