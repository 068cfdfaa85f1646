use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use audit_core::corpus::{load_articles, load_claims_with, load_outlets, DateWindow, Verdict};
use serde::Serialize;

use crate::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct ValidateArgs {
    pub outlets: PathBuf,
    pub articles: PathBuf,
    pub claims: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct FileReport {
    pub path: PathBuf,
    pub records: usize,
    /// Record counts per label (bias label, pool label or verdict).
    pub by_label: BTreeMap<String, usize>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub files: Vec<FileReport>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.files.iter().all(|f| f.errors.is_empty())
    }
}

fn file_report(path: &Path) -> FileReport {
    FileReport {
        path: path.to_path_buf(),
        records: 0,
        by_label: BTreeMap::new(),
        errors: Vec::new(),
    }
}

/// Run every corpus loader and report counts and errors. Returns the report
/// when all files are valid, an exit-1 error otherwise.
pub fn cmd_validate(args: &ValidateArgs, out: &mut dyn Write) -> CliResult<ValidationReport> {
    let mut outlets = file_report(&args.outlets);
    let mut outlet_ids = BTreeSet::new();
    match load_outlets(&args.outlets, None) {
        Ok(rows) => {
            outlets.records = rows.len();
            for o in &rows {
                *outlets.by_label.entry(o.bias_label.to_string()).or_default() += 1;
                outlet_ids.insert(o.outlet_id.clone());
            }
        }
        Err(e) => outlets.errors.push(e.to_string()),
    }

    let mut articles = file_report(&args.articles);
    match load_articles(&args.articles) {
        Ok(rows) => {
            articles.records = rows.len();
            let mut urls = BTreeSet::new();
            for a in &rows {
                *articles.by_label.entry(a.pool_label.to_string()).or_default() += 1;
                if !urls.insert(a.url.as_str()) {
                    articles.errors.push(format!("duplicate url {}", a.url));
                }
                if let Some(id) = &a.outlet_id {
                    if outlets.errors.is_empty() && !outlet_ids.contains(id) {
                        articles
                            .errors
                            .push(format!("{} references unknown outlet {id}", a.url));
                    }
                }
            }
        }
        Err(e) => articles.errors.push(e.to_string()),
    }

    let mut claims = file_report(&args.claims);
    let all_verdicts: BTreeSet<Verdict> = [Verdict::False, Verdict::Misleading, Verdict::Other].into();
    let everything = DateWindow::new(chrono::NaiveDate::MIN, chrono::NaiveDate::MAX).expect("valid window");
    match load_claims_with(&args.claims, everything, &all_verdicts) {
        Ok(rows) => {
            claims.records = rows.len();
            let window = DateWindow::default_claims();
            let misinformation = Verdict::default_misinformation_set();
            for c in &rows {
                *claims
                    .by_label
                    .entry(format!("{:?}", c.verdict).to_lowercase())
                    .or_default() += 1;
                if window.contains(c.checked_at) && misinformation.contains(&c.verdict) {
                    *claims.by_label.entry("in-default-filter".into()).or_default() += 1;
                }
            }
        }
        Err(e) => claims.errors.push(e.to_string()),
    }

    let report = ValidationReport {
        files: vec![outlets, articles, claims],
    };
    for f in &report.files {
        let labels: Vec<String> = f.by_label.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let status = if f.errors.is_empty() { "ok" } else { "INVALID" };
        writeln!(
            out,
            "{status:7} {} records={} {}",
            f.path.display(),
            f.records,
            labels.join(" ")
        )
        .map_err(CliError::runtime)?;
        for e in &f.errors {
            writeln!(out, "  error: {e}").map_err(CliError::runtime)?;
        }
    }
    if report.ok() {
        Ok(report)
    } else {
        let n: usize = report.files.iter().map(|f| f.errors.len()).sum();
        let first = report
            .files
            .iter()
            .flat_map(|f| f.errors.iter())
            .next()
            .cloned()
            .unwrap_or_default();
        Err(CliError::user(anyhow::anyhow!(
            "{n} validation error(s); first: {first}"
        )))
    }
}
