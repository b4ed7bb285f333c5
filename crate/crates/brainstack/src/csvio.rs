//! CSV writers for training history, evaluation reports, routing weights and
//! ablation tables. Floats use Rust's shortest round-trip formatting, so
//! identical values always print identically.

use std::io::Write;
use std::path::Path;

use brainstack_core::analysis::{AblationTable, RouteReport};
use brainstack_core::metrics::Metrics;
use brainstack_core::train::HistoryRow;

pub const HISTORY_HEADER: [&str; 12] =
    ["epoch", "P", "lambda", "alpha", "beta", "gamma", "L_fused", "L_global", "L_local", "L_distill", "L_total", "val_acc"];

/// Expert columns of the routing CSV, in model order.
pub const ROUTE_EXPERTS: [&str; 8] =
    ["global", "prefrontal", "frontal", "central", "ltemporal", "rtemporal", "parietal", "occipital"];

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("expert `{0}` has no routing column")]
    UnknownExpert(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CsvError + '_ {
    move |source| CsvError::Io { path: path.display().to_string(), source }
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_history<W: Write>(out: W, rows: &[HistoryRow]) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_HEADER)?;
    for r in rows {
        let [l, a, b, g] = r.weights.as_array();
        let v = [r.progress, l, a, b, g, r.losses.fused, r.losses.global, r.losses.local, r.losses.distill, r.total];
        let mut rec = vec![r.epoch.to_string()];
        rec.extend(v.iter().map(|x| num(*x)));
        rec.push(num(r.val_acc));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn history_string(rows: &[HistoryRow]) -> String {
    let mut buf = Vec::new();
    write_history(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

/// `key,value` rows: accuracy, macro_f1, f1_<k>, confusion_<truth>_<pred>.
pub fn write_metrics<W: Write>(out: W, m: &Metrics) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["key", "value"])?;
    w.write_record(["accuracy", &num(m.accuracy)])?;
    w.write_record(["macro_f1", &num(m.macro_f1)])?;
    for (k, f) in m.per_class_f1.iter().enumerate() {
        w.write_record([format!("f1_{k}"), num(*f)])?;
    }
    for (t, row) in m.confusion.iter().enumerate() {
        for (p, c) in row.iter().enumerate() {
            w.write_record([format!("confusion_{t}_{p}"), c.to_string()])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn route_columns(experts: &[String]) -> Result<Vec<usize>, CsvError> {
    experts
        .iter()
        .map(|e| ROUTE_EXPERTS.iter().position(|c| c == e).ok_or_else(|| CsvError::UnknownExpert(e.clone())))
        .collect()
}

/// One row per trial with every expert column; experts missing from the
/// model leave their cell empty.
pub fn write_routes<W: Write>(out: W, report: &RouteReport) -> Result<(), CsvError> {
    let cols = route_columns(&report.experts)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["trial_id".to_string(), "subject".into(), "label".into(), "pred".into()];
    header.extend(ROUTE_EXPERTS.iter().map(|e| format!("alpha_{e}")));
    w.write_record(&header)?;
    for r in &report.rows {
        let mut cells = vec![String::new(); ROUTE_EXPERTS.len()];
        for (j, &c) in cols.iter().enumerate() {
            cells[c] = num(r.alpha[j]);
        }
        let mut rec = vec![r.trial_id.to_string(), r.subject.clone(), r.label.to_string(), r.pred.to_string()];
        rec.extend(cells);
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Per-subject and overall mean weights, subject accuracy and the
/// weight/accuracy correlation per expert (empty when undefined).
pub fn write_route_summary<W: Write>(out: W, report: &RouteReport) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["row".to_string(), "accuracy".into()];
    header.extend(report.experts.iter().map(|e| format!("alpha_{e}")));
    w.write_record(&header)?;
    for s in &report.subjects {
        let mut rec = vec![format!("subject:{}", s.subject), num(s.accuracy)];
        rec.extend(s.mean_alpha.iter().map(|a| num(*a)));
        w.write_record(&rec)?;
    }
    let n = report.rows.len() as f64;
    let acc = report.rows.iter().filter(|r| r.pred == r.label).count() as f64 / n;
    let mut rec = vec!["mean".to_string(), num(acc)];
    rec.extend(report.mean_alpha.iter().map(|a| num(*a)));
    w.write_record(&rec)?;
    let mut rec = vec!["pearson_r".to_string(), String::new()];
    rec.extend(report.correlation.iter().map(|r| r.map(num).unwrap_or_default()));
    w.write_record(&rec)?;
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One `variant,runs,mean,min,max` row per variant.
pub fn write_ablation<W: Write>(out: W, table: &AblationTable) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "runs", "mean", "min", "max"])?;
    for s in &table.summary {
        w.write_record([s.variant.name().to_string(), s.runs.to_string(), num(s.mean), num(s.min), num(s.max)])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_ablation_runs<W: Write>(out: W, table: &AblationTable) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "seed", "best_epoch", "val_acc", "test_acc", "test_macro_f1"])?;
    for r in &table.runs {
        w.write_record([
            r.variant.name().to_string(),
            r.seed.to_string(),
            r.best_epoch.to_string(),
            num(r.val_acc),
            num(r.test.accuracy),
            num(r.test.macro_f1),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Writes with `f` into a freshly created file.
pub fn to_file<F>(path: &Path, f: F) -> Result<(), CsvError>
where
    F: FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<(), CsvError>,
{
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut buf = std::io::BufWriter::new(file);
    f(&mut buf)?;
    buf.flush().map_err(io_err(path))
}
