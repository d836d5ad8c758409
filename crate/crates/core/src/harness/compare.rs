//! Final-RMSE comparison between runs, from their metrics CSVs.

use std::fmt::Write as _;

use serde::Serialize;

use super::HarnessError;

/// Relative improvement of `a` over `b`, in percent. Positive means `a` is
/// better (lower).
pub fn gain_percent(rmse_a: f64, rmse_b: f64) -> f64 {
    (1.0 - rmse_a / rmse_b) * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub epoch: u64,
}

fn col(header: &[&str], name: &str) -> Result<usize, HarnessError> {
    header
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| HarnessError::Dataset(format!("metrics CSV has no `{name}` column")))
}

/// Parses a metrics CSV written by a server shard or an offline run.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| HarnessError::Dataset("empty metrics CSV".into()))?
        .split(',')
        .collect();
    let idx = [
        col(&header, "step")?,
        col(&header, "lr")?,
        col(&header, "train_loss")?,
        col(&header, "train_rmse")?,
        col(&header, "val_rmse")?,
        col(&header, "epoch")?,
    ];
    lines
        .enumerate()
        .map(|(n, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            let get = |i: usize| {
                cells
                    .get(idx[i])
                    .map(|c| c.trim())
                    .ok_or_else(|| HarnessError::Dataset(format!("row {} is short", n + 1)))
            };
            let num = |i: usize| -> Result<f64, HarnessError> {
                get(i)?
                    .parse()
                    .map_err(|_| HarnessError::Dataset(format!("row {}: bad number `{}`", n + 1, cells[idx[i]])))
            };
            let int = |i: usize| -> Result<u64, HarnessError> {
                get(i)?
                    .parse()
                    .map_err(|_| HarnessError::Dataset(format!("row {}: bad integer `{}`", n + 1, cells[idx[i]])))
            };
            Ok(MetricsRow {
                step: int(0)?,
                lr: num(1)?,
                train_loss: num(2)?,
                train_rmse: num(3)?,
                val_rmse: num(4)?,
                epoch: int(5)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub name: String,
    pub rows: Vec<MetricsRow>,
}

impl RunMetrics {
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, HarnessError> {
        Ok(Self {
            name: name.into(),
            rows: parse_metrics(text)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub batches: u64,
    pub final_val_rmse: f64,
    pub best_val_rmse: f64,
    pub final_train_rmse: f64,
    /// Against the first run; `None` for the first run itself.
    pub gain_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub baseline: String,
    pub runs: Vec<RunSummary>,
}

/// Summarizes each run and its gain over the first one.
pub fn compare_runs(runs: &[RunMetrics]) -> Result<CompareReport, HarnessError> {
    if runs.len() < 2 {
        return Err(HarnessError::Dataset("compare needs at least two runs".into()));
    }
    let mut out = Vec::with_capacity(runs.len());
    for r in runs {
        let last = r
            .rows
            .last()
            .ok_or_else(|| HarnessError::Dataset(format!("run `{}` has no metrics rows", r.name)))?;
        out.push(RunSummary {
            name: r.name.clone(),
            batches: last.step,
            final_val_rmse: last.val_rmse,
            best_val_rmse: r.rows.iter().map(|x| x.val_rmse).fold(f64::INFINITY, f64::min),
            final_train_rmse: last.train_rmse,
            gain_pct: None,
        });
    }
    let base = out[0].final_val_rmse;
    for s in out.iter_mut().skip(1) {
        s.gain_pct = Some(gain_percent(s.final_val_rmse, base));
    }
    Ok(CompareReport {
        baseline: runs[0].name.clone(),
        runs: out,
    })
}

impl CompareReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| run | batches | final val RMSE | best val RMSE | gain vs {} (%) |", self.baseline);
        let _ = writeln!(s, "|---|---:|---:|---:|---:|");
        for r in &self.runs {
            let gain = r.gain_pct.map_or_else(|| "-".to_string(), |g| format!("{g:.1}"));
            let _ = writeln!(
                s,
                "| {} | {} | {:.4e} | {:.4e} | {} |",
                r.name, r.batches, r.final_val_rmse, r.best_val_rmse, gain
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,batches,final_val_rmse,best_val_rmse,final_train_rmse,gain_pct\n");
        for r in &self.runs {
            let gain = r.gain_pct.map_or_else(String::new, |g| format!("{g:?}"));
            let _ = writeln!(
                s,
                "{},{},{:?},{:?},{:?},{}",
                r.name, r.batches, r.final_val_rmse, r.best_val_rmse, r.final_train_rmse, gain
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(rows: &[(u64, f64)]) -> String {
        let mut s = String::from("step,lr,train_loss,train_rmse,val_rmse,epoch\n");
        for (step, v) in rows {
            s += &format!("{step},0.001,0.5,1.0,{v},0\n");
        }
        s
    }

    #[test]
    fn gain_matches_reference_rows() {
        assert!((gain_percent(0.766, 2.46) - 68.9).abs() < 0.05);
        assert!((gain_percent(0.0739, 0.0876) - 15.6).abs() < 0.05);
        assert_eq!(gain_percent(1.5, 1.5), 0.0);
        assert!(gain_percent(2.0, 1.0) < 0.0);
    }

    #[test]
    fn report_uses_the_last_row() {
        let off = RunMetrics::parse("offline", &csv(&[(10, 3.0), (20, 2.46)])).unwrap();
        let on = RunMetrics::parse("online", &csv(&[(10, 2.0), (20, 0.766)])).unwrap();
        let r = compare_runs(&[off, on]).unwrap();
        assert_eq!(r.runs[0].gain_pct, None);
        assert!((r.runs[1].gain_pct.unwrap() - 68.9).abs() < 0.05);
        assert!(r.to_markdown().contains("| online | 20 |"));
        assert_eq!(r.to_csv().lines().count(), 3);
    }

    #[test]
    fn missing_column_is_an_error() {
        assert!(parse_metrics("step,lr\n1,0.1\n").is_err());
        let one = RunMetrics::parse("a", &csv(&[(1, 1.0)])).unwrap();
        assert!(compare_runs(&[one]).is_err());
    }
}
