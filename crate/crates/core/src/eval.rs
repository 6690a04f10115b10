//! Average, per-group and worst-group accuracy, and their seed statistics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::model::Mlp;
use crate::tensor::Tensor;
use crate::util::write_atomic;

/// Anything that maps a feature matrix to class labels.
pub trait Predictor {
    fn predict_labels(&self, x: &Tensor) -> Result<Vec<usize>>;
}

impl Predictor for Mlp {
    fn predict_labels(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.predict(x)
    }
}

/// Plurality vote over several models; ties go to the lowest class.
pub struct MajorityVote<'a>(pub &'a [Mlp]);

impl Predictor for MajorityVote<'_> {
    fn predict_labels(&self, x: &Tensor) -> Result<Vec<usize>> {
        majority_vote(self.0, x)
    }
}

pub fn majority_vote(models: &[Mlp], x: &Tensor) -> Result<Vec<usize>> {
    let first = models
        .first()
        .ok_or_else(|| Error::Parameter("majority vote needs at least one model".into()))?;
    let c = first.num_classes();
    if models.iter().any(|m| m.num_classes() != c) {
        return Err(Error::Dimension("voters disagree on the class count".into()));
    }
    let mut votes = vec![0usize; x.rows() * c];
    for m in models {
        for (i, label) in m.predict(x)?.into_iter().enumerate() {
            votes[i * c + label] += 1;
        }
    }
    Ok(votes
        .chunks_exact(c)
        .map(|v| {
            let mut best = 0;
            for j in 1..c {
                if v[j] > v[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub per_group_accuracy: BTreeMap<usize, f64>,
    pub counts: BTreeMap<usize, usize>,
    pub average_accuracy: f64,
    pub wga: f64,
}

impl GroupMetrics {
    /// Builds metrics from per-group correct/total counts.
    pub fn from_counts(correct: &[usize], totals: &[usize]) -> Result<Self> {
        if correct.len() != totals.len() || totals.is_empty() {
            return Err(Error::Metric("correct and total counts disagree".into()));
        }
        if let Some(g) = totals.iter().position(|&n| n == 0) {
            return Err(Error::Metric(format!("group {g} is empty")));
        }
        let per_group_accuracy: BTreeMap<usize, f64> = correct
            .iter()
            .zip(totals)
            .enumerate()
            .map(|(g, (&c, &n))| (g, c as f64 / n as f64))
            .collect();
        let wga = per_group_accuracy.values().copied().fold(f64::INFINITY, f64::min);
        let average_accuracy = correct.iter().sum::<usize>() as f64 / totals.iter().sum::<usize>() as f64;
        Ok(Self {
            per_group_accuracy,
            counts: totals.iter().copied().enumerate().collect(),
            average_accuracy,
            wga,
        })
    }

    pub fn from_predictions(pred: &[usize], ds: &GroupedDataset) -> Result<Self> {
        if pred.len() != ds.len() {
            return Err(Error::Metric(format!("{} predictions for {} samples", pred.len(), ds.len())));
        }
        let groups = ds.num_groups();
        let mut correct = vec![0; groups];
        let mut totals = vec![0; groups];
        for ((&p, &y), &g) in pred.iter().zip(ds.y()).zip(ds.g()) {
            totals[g] += 1;
            if p == y {
                correct[g] += 1;
            }
        }
        Self::from_counts(&correct, &totals)
    }
}

pub fn evaluate(model: &impl Predictor, ds: &GroupedDataset) -> Result<GroupMetrics> {
    let pred = model.predict_labels(ds.x())?;
    GroupMetrics::from_predictions(&pred, ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and `n − 1` standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: usize,
    pub average_accuracy: MeanStd,
    pub wga: MeanStd,
    pub per_group_accuracy: BTreeMap<usize, MeanStd>,
}

pub fn aggregate_seeds(metrics: &[GroupMetrics]) -> Result<SeedSummary> {
    let first = metrics
        .first()
        .ok_or_else(|| Error::Metric("nothing to aggregate".into()))?;
    let groups: Vec<usize> = first.per_group_accuracy.keys().copied().collect();
    for m in metrics {
        if m.per_group_accuracy.keys().copied().ne(groups.iter().copied()) {
            return Err(Error::Metric("runs report different group sets".into()));
        }
    }
    let field = |f: &dyn Fn(&GroupMetrics) -> f64| MeanStd::of(&metrics.iter().map(f).collect::<Vec<_>>());
    Ok(SeedSummary {
        runs: metrics.len(),
        average_accuracy: field(&|m| m.average_accuracy),
        wga: field(&|m| m.wga),
        per_group_accuracy: groups
            .iter()
            .map(|&g| (g, field(&|m| m.per_group_accuracy[&g])))
            .collect(),
    })
}

/// One row of a results table: a method under a teacher-debiasing setting.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub debiased: String,
    pub summary: SeedSummary,
}

/// `method,debiased,runs,avg_mean,avg_std,wga_mean,wga_std,group_<g>_mean,group_<g>_std...`
pub fn write_metrics_table(rows: &[TableRow], path: &Path) -> Result<()> {
    let groups: Vec<usize> = rows
        .first()
        .map(|r| r.summary.per_group_accuracy.keys().copied().collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["method", "debiased", "runs", "avg_mean", "avg_std", "wga_mean", "wga_std"]
        .map(String::from)
        .to_vec();
    for g in &groups {
        header.push(format!("group_{g}_mean"));
        header.push(format!("group_{g}_std"));
    }
    let err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(&header).map_err(err)?;
    let f = |v: f64| format!("{v:.6}");
    for r in rows {
        let s = &r.summary;
        let mut rec = vec![
            r.method.clone(),
            r.debiased.clone(),
            s.runs.to_string(),
            f(s.average_accuracy.mean),
            f(s.average_accuracy.std),
            f(s.wga.mean),
            f(s.wga.std),
        ];
        for g in &groups {
            let ms = s
                .per_group_accuracy
                .get(g)
                .ok_or_else(|| Error::Metric(format!("row `{}` lacks group {g}", r.method)))?;
            rec.push(f(ms.mean));
            rec.push(f(ms.std));
        }
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::Layer;

    #[test]
    fn table7_erm_row() {
        let m = GroupMetrics::from_counts(&[993, 740, 541, 934], &[1000; 4]).unwrap();
        assert!((m.wga - 0.541).abs() < 1e-15);
        assert!(m.wga <= m.average_accuracy);
    }

    #[test]
    fn perfect_and_failed_group() {
        let m = GroupMetrics::from_counts(&[50, 50, 50, 50], &[50; 4]).unwrap();
        assert_eq!((m.wga, m.average_accuracy), (1.0, 1.0));
        let m = GroupMetrics::from_counts(&[500, 0, 500, 500], &[500, 10, 500, 500]).unwrap();
        assert_eq!(m.wga, 0.0);
        assert!(m.average_accuracy > 0.99);
    }

    #[test]
    fn empty_group_is_named() {
        match GroupMetrics::from_counts(&[1, 0, 1, 1], &[1, 0, 1, 1]) {
            Err(Error::Metric(msg)) => assert!(msg.contains("group 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn aggregate_examples() {
        let mk = |wga_hits: usize| GroupMetrics::from_counts(&[10, wga_hits, 10, 10], &[10; 4]).unwrap();
        let s = aggregate_seeds(&[mk(5), mk(7)]).unwrap();
        assert!((s.wga.mean - 0.6).abs() < 1e-15);
        assert!((s.wga.std - 0.02f64.sqrt()).abs() < 1e-15);
        let same = aggregate_seeds(&[mk(5), mk(5), mk(5)]).unwrap();
        assert_eq!(same.wga.std, 0.0);
        assert_eq!(aggregate_seeds(&[mk(3)]).unwrap().wga.std, 0.0);
    }

    #[test]
    fn aggregate_three_runs_by_formula() {
        let wgas = [0.5, 0.8, 0.6];
        let runs: Vec<GroupMetrics> = [5, 8, 6]
            .iter()
            .map(|&h| GroupMetrics::from_counts(&[h, 10, 10, 10], &[10; 4]).unwrap())
            .collect();
        let s = aggregate_seeds(&runs).unwrap();
        let mean = (0.5 + 0.8 + 0.6) / 3.0;
        let var = wgas.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / 2.0;
        assert!((s.wga.mean - mean).abs() < 1e-15);
        assert!((s.wga.std - var.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn aggregate_rejects_mismatched_groups() {
        let a = GroupMetrics::from_counts(&[1, 1, 1, 1], &[1; 4]).unwrap();
        let b = GroupMetrics::from_counts(&[1, 1], &[1; 2]).unwrap();
        assert!(aggregate_seeds(&[a, b]).is_err());
        assert!(aggregate_seeds(&[]).is_err());
    }

    fn constant_model(class: usize) -> Mlp {
        let mut bias = vec![0.0; 2];
        bias[class] = 1.0;
        Mlp::from_layers(vec![Layer {
            weight: Tensor::zeros(&[1, 2]),
            bias: Tensor::vector(bias),
        }])
        .unwrap()
    }

    #[test]
    fn votes() {
        let x = Tensor::zeros(&[2, 1]);
        assert_eq!(majority_vote(&[constant_model(1)], &x).unwrap(), vec![1, 1]);
        let three = [constant_model(0), constant_model(1), constant_model(1)];
        assert_eq!(majority_vote(&three, &x).unwrap(), vec![1, 1]);
        let two = [constant_model(0), constant_model(1)];
        assert_eq!(majority_vote(&two, &x).unwrap(), vec![0, 0]);
    }

    #[test]
    fn evaluate_counts_groups() {
        let x = Tensor::zeros(&[4, 1]);
        let ds = GroupedDataset::new(x, vec![0, 0, 1, 1], vec![0, 1, 0, 1], vec![Split::Test; 4], 2).unwrap();
        let m = evaluate(&constant_model(0), &ds).unwrap();
        assert_eq!(m.per_group_accuracy.values().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.average_accuracy, 0.5);
    }
}
