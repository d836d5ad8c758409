//! Per-batch statistics of the normalized model inputs.
//!
//! A biased stream shows up as batch means that wander with whatever
//! simulation happens to be running; a well mixed buffer keeps them steady.

use ndarray::ArrayView2;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStatsRow {
    pub step: u64,
    pub mean: Vec<f64>,
    /// Population standard deviation over the batch rows.
    pub std: Vec<f64>,
}

impl BatchStatsRow {
    pub fn csv_header(features: usize) -> String {
        let mut s = String::from("step");
        for k in 0..features {
            s.push_str(&format!(",mean_{k}"));
        }
        for k in 0..features {
            s.push_str(&format!(",std_{k}"));
        }
        s.push('\n');
        s
    }

    pub fn csv_line(&self) -> String {
        let mut s = self.step.to_string();
        for v in self.mean.iter().chain(&self.std) {
            s.push(',');
            s.push_str(&format!("{v:?}"));
        }
        s.push('\n');
        s
    }
}

/// Column means and standard deviations of `x` (rows are batch entries).
pub fn batch_stats(x: ArrayView2<'_, f64>, step: u64) -> BatchStatsRow {
    let n = x.nrows().max(1) as f64;
    let mut mean = vec![0.0; x.ncols()];
    let mut std = vec![0.0; x.ncols()];
    for (k, col) in x.columns().into_iter().enumerate() {
        let (mut m, mut m2) = (0.0, 0.0);
        for (i, v) in col.iter().enumerate() {
            let d = v - m;
            m += d / (i + 1) as f64;
            m2 += d * (v - m);
        }
        mean[k] = m;
        std[k] = (m2 / n).max(0.0).sqrt();
    }
    BatchStatsRow { step, mean, std }
}

/// Mean and population standard deviation of a series.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// How one input feature behaved over a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureSummary {
    pub feature: usize,
    /// Average of the batch means.
    pub mean_of_means: f64,
    /// Spread of the batch means over training: the bias indicator.
    pub std_of_means: f64,
    pub mean_of_stds: f64,
}

/// Per-feature summary over all rows.
pub fn summarize(rows: &[BatchStatsRow]) -> Vec<FeatureSummary> {
    let width = rows.first().map_or(0, |r| r.mean.len());
    (0..width)
        .map(|k| {
            let means: Vec<f64> = rows.iter().map(|r| r.mean[k]).collect();
            let stds: Vec<f64> = rows.iter().map(|r| r.std[k]).collect();
            let (mean_of_means, std_of_means) = mean_std(&means);
            FeatureSummary {
                feature: k,
                mean_of_means,
                std_of_means,
                mean_of_stds: mean_std(&stds).0,
            }
        })
        .collect()
}

/// Reads back a CSV written with [`BatchStatsRow::csv_header`] and
/// [`BatchStatsRow::csv_line`].
pub fn parse_batch_stats(text: &str) -> Result<Vec<BatchStatsRow>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty batch statistics file")?;
    let cols = header.split(',').count();
    if !header.starts_with("step") || cols % 2 != 1 {
        return Err(format!("unexpected header `{header}`"));
    }
    let width = cols / 2;
    lines
        .enumerate()
        .map(|(n, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != cols {
                return Err(format!("row {} has {} cells, expected {cols}", n + 1, cells.len()));
            }
            let step = cells[0].parse().map_err(|_| format!("row {}: bad step", n + 1))?;
            let vals = cells[1..]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| format!("row {}: bad number `{c}`", n + 1)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(BatchStatsRow {
                step,
                mean: vals[..width].to_vec(),
                std: vals[width..].to_vec(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_rows_have_zero_std() {
        let x = array![[0.5, 1.0], [0.5, 1.0], [0.5, 1.0]];
        let row = batch_stats(x.view(), 3);
        assert_eq!(row.mean, vec![0.5, 1.0]);
        assert_eq!(row.std, vec![0.0, 0.0]);
    }

    #[test]
    fn csv_shape() {
        let row = BatchStatsRow {
            step: 2,
            mean: vec![0.25],
            std: vec![0.5],
        };
        assert_eq!(BatchStatsRow::csv_header(1), "step,mean_0,std_0\n");
        assert_eq!(row.csv_line(), "2,0.25,0.5\n");
    }

    #[test]
    fn csv_round_trip_and_summary() {
        let rows = vec![
            BatchStatsRow {
                step: 1,
                mean: vec![0.2, 1.0],
                std: vec![0.1, 0.0],
            },
            BatchStatsRow {
                step: 2,
                mean: vec![0.6, 1.0],
                std: vec![0.3, 0.0],
            },
        ];
        let mut text = BatchStatsRow::csv_header(2);
        for r in &rows {
            text += &r.csv_line();
        }
        assert_eq!(parse_batch_stats(&text).unwrap(), rows);
        let s = summarize(&rows);
        assert!((s[0].mean_of_means - 0.4).abs() < 1e-15);
        assert!((s[0].std_of_means - 0.2).abs() < 1e-15);
        assert!((s[0].mean_of_stds - 0.2).abs() < 1e-15);
        assert_eq!(s[1].std_of_means, 0.0);
    }
}
