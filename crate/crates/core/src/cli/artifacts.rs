use std::fs;
use std::path::{Path, PathBuf};

use super::{RunError, RunOutput, RunResult};
use crate::eval::{GridRow, SummaryRow};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |e| RunError::Io(format!("{}: {e}", path.display()))
}

fn fmt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub const RESULT_COLUMNS: [&str; 16] = [
    "run_id",
    "seed",
    "variant",
    "hard_masking",
    "reweighting",
    "cscr",
    "local_stage",
    "lambda",
    "n",
    "beta",
    "K",
    "E",
    "E_prime",
    "acc_base",
    "acc_novel",
    "hm",
];

fn header(domains: usize) -> Vec<String> {
    let mut h: Vec<String> = RESULT_COLUMNS.iter().map(|s| s.to_string()).collect();
    h.extend((0..domains).map(|d| format!("domain_{d}")));
    h.push("domain_mean".into());
    h.push("comm_volume".into());
    h.push("error".into());
    h
}

fn record(variant: &str, r: &RunResult, domains: usize) -> Vec<String> {
    let c = &r.config;
    let a = &c.ablation;
    let f = &c.federation;
    let m = &r.metrics;
    let mut row = vec![
        r.run_id.clone(),
        r.seed.to_string(),
        variant.to_string(),
        a.hard_masking.to_string(),
        a.reweighting.to_string(),
        a.cscr.to_string(),
        a.local_stage.to_string(),
        c.encoder.lambda.to_string(),
        f.prototypes.to_string(),
        f.beta.to_string(),
        f.clients.to_string(),
        f.local_epochs.to_string(),
        f.refine_epochs.to_string(),
        fmt(m.acc_base),
        fmt(m.acc_novel),
        fmt(m.hm),
    ];
    row.extend((0..domains).map(|d| fmt(m.per_domain.get(&d).copied())));
    row.push(fmt(m.domain_mean()));
    row.push(m.comm_volume.to_string());
    row.push(String::new());
    row
}

fn write_csv(path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.write_record(&row).map_err(|e| RunError::Io(e.to_string()))?;
    }
    w.flush().map_err(io(path))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| RunError::Io(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io(path))
}

/// Writes `results.csv`, `result.json`, `config.toml`, `dataset.json` and
/// `ledger.json` into `dir`, creating it if needed.
pub fn write_run_artifacts(dir: &Path, out: &RunOutput) -> Result<Vec<PathBuf>, RunError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let r = &out.result;
    let domains = r.config.task.domains.len();
    let paths: Vec<PathBuf> = ["results.csv", "result.json", "config.toml", "dataset.json", "ledger.json"]
        .iter()
        .map(|n| dir.join(n))
        .collect();
    write_csv(&paths[0], [header(domains), record("run", r, domains)])?;
    write_json(&paths[1], r)?;
    fs::write(&paths[2], r.config.to_toml()).map_err(io(&paths[2]))?;
    write_json(&paths[3], &out.snapshot)?;
    let ledgers: Vec<_> = r.rounds.iter().map(|round| (&round.label, &round.ledger)).collect();
    write_json(&paths[4], &ledgers)?;
    Ok(paths)
}

/// Long-format table with one row per (cell, seed); failed cells keep
/// their coordinates and carry the error text.
pub fn write_grid_results(path: &Path, rows: &[GridRow], domains: usize) -> Result<(), RunError> {
    let records = rows.iter().map(|row| match &row.outcome {
        Ok(r) => record(&row.cell.variant, r, domains),
        Err(e) => {
            let mut rec = vec![String::new(); header(domains).len()];
            rec[1] = row.seed.to_string();
            rec[2] = row.cell.variant.clone();
            rec[7] = row.cell.lambda.to_string();
            rec[8] = row.cell.prototypes.to_string();
            *rec.last_mut().expect("error column") = e.clone();
            rec
        }
    });
    write_csv(path, std::iter::once(header(domains)).chain(records))
}

pub fn write_summary(path: &Path, axis: &str, rows: &[SummaryRow]) -> Result<(), RunError> {
    let head = vec![
        axis.to_string(),
        "runs".into(),
        "failures".into(),
        "acc_base".into(),
        "acc_novel".into(),
        "hm".into(),
        "domain_mean".into(),
        "comm_volume".into(),
    ];
    let records = rows.iter().map(|s| {
        vec![
            s.key.clone(),
            s.runs.to_string(),
            s.failures.to_string(),
            fmt(s.acc_base),
            fmt(s.acc_novel),
            fmt(s.hm),
            fmt(s.domain_mean),
            fmt(s.comm_volume),
        ]
    });
    write_csv(path, std::iter::once(head).chain(records))
}
