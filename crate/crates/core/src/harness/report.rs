//! Round reports: full JSON plus a flat per-client CSV.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::federation::RoundReport;

pub const SUMMARY_HEADER: &str = "round,client_id,attack,h,P,accepted,acc_before,acc_after";

/// `<prefix><suffix>`, e.g. `results/run` + `_summary.csv`.
pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn summary_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in reports {
        for c in &r.clients {
            let (h, p) = match &c.verdict {
                Some(v) => (v.h.to_string(), v.p.to_string()),
                None => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.round, c.client_id, c.attack, h, p, c.accepted, r.acc_before, r.acc_after
            ));
        }
    }
    out
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::from(e).context(format!("creating {}", dir.display())))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))?;
    f.write_all(contents)?;
    Ok(())
}

/// Writes `<prefix>_rounds.json` and `<prefix>_summary.csv`; returns both paths.
pub fn emit_report(reports: &[RoundReport], prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    if reports.is_empty() {
        return Err(Error::Empty("reports"));
    }
    let json_path = with_suffix(prefix, "_rounds.json");
    let csv_path = with_suffix(prefix, "_summary.csv");
    let mut json = serde_json::to_string_pretty(reports)?;
    json.push('\n');
    write_file(&json_path, json.as_bytes())?;
    write_file(&csv_path, summary_csv(reports).as_bytes())?;
    Ok((json_path, csv_path))
}

pub(crate) fn write_bytes(path: &Path, contents: &[u8]) -> Result<()> {
    write_file(path, contents)
}
