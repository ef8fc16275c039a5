//! Per-class ROC AUC, aggregate statistics, stratified buckets and parameter
//! accounting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::Model;

pub const HIGH_AUC: f64 = 0.90;
pub const MID_AUC: f64 = 0.80;

/// Mann-Whitney AUC with ties credited one half; `None` when either class is empty.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("auc received NaN scores".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based, tie-averaged) ranks of the positives, kept doubled to stay integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg2 = (i + 1 + j) as u64; // 2 × mean of ranks i+1..=j
        let pos_in_run = order[i..j].iter().filter(|&&k| labels[k] != 0).count() as u64;
        rank_sum2 += avg2 * pos_in_run;
        i = j;
    }
    let np = n_pos as u64;
    let u2 = rank_sum2 - np * (np + 1);
    Ok(Some(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Classes with AUC ≥ 0.90.
    pub high: usize,
    /// Classes with 0.80 ≤ AUC < 0.90.
    pub mid: usize,
    pub valid: usize,
}

pub fn aggregate(per_class: &[Option<f64>]) -> Result<Aggregate> {
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(Error::Data("no class has both positives and negatives in this split".into()));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(Aggregate {
        mean,
        std,
        high: vals.iter().filter(|&&v| v >= HIGH_AUC).count(),
        mid: vals.iter().filter(|&&v| (MID_AUC..HIGH_AUC).contains(&v)).count(),
        valid: vals.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub auc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Per-class AUC from `N×C` scores and labels.
pub fn per_class_auc(scores: &[Vec<f64>], labels: &[Vec<u8>], names: &[String]) -> Result<Vec<ClassMetrics>> {
    if scores.len() != labels.len() {
        return Err(Error::shape("per_class_auc", &[scores.len()], &[labels.len()]));
    }
    let c = names.len();
    (0..c)
        .map(|k| {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let y: Vec<u8> = labels.iter().map(|r| r[k]).collect();
            let n_pos = y.iter().filter(|&&v| v != 0).count();
            Ok(ClassMetrics {
                class: names[k].clone(),
                auc: auc(&s, &y)?,
                n_pos,
                n_neg: y.len() - n_pos,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub component: String,
    pub count: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
}

impl ParamTable {
    pub fn get(&self, component: &str) -> Option<usize> {
        self.rows.iter().find(|r| r.component == component).map(|r| r.count)
    }

    /// Experts plus router.
    pub fn molre_total(&self) -> usize {
        self.get("molre_experts").unwrap_or(0) + self.get("molre_router").unwrap_or(0)
    }

    pub fn trainable_total(&self) -> usize {
        self.rows.iter().filter(|r| r.trainable).map(|r| r.count).sum()
    }

    pub fn frozen_total(&self) -> usize {
        self.rows.iter().filter(|r| !r.trainable).map(|r| r.count).sum()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {:>12}  status", "component", "params");
        for r in &self.rows {
            let status = if r.trainable { "trainable" } else { "frozen" };
            let _ = writeln!(s, "{:<22} {:>12}  {}", r.component, r.count, status);
        }
        let _ = writeln!(s, "{:<22} {:>12}  ({:.2}M)", "molre_total", self.molre_total(), millions_up(self.molre_total()));
        let _ = writeln!(s, "{:<22} {:>12}", "trainable_total", self.trainable_total());
        let _ = writeln!(s, "{:<22} {:>12}", "frozen_total", self.frozen_total());
        s
    }
}

/// Count in millions, rounded up to two decimals (272,134 → 0.28).
pub fn millions_up(count: usize) -> f64 {
    count.div_ceil(10_000) as f64 / 100.0
}

pub fn param_report(model: &Model) -> ParamTable {
    let mut rows = vec![ParamRow {
        component: "backbone".into(),
        count: model.backbone.num_params(),
        trainable: false,
    }];
    let mut row = |name: &str, count: usize, trainable: bool| {
        rows.push(ParamRow {
            component: name.into(),
            count,
            trainable,
        })
    };
    if let Some(l) = &model.lora {
        row("lora", l.num_params(), true);
    }
    if let Some(m) = &model.molre {
        row("molre_base", m.w0.len(), false);
        row("molre_experts", m.bank.num_params(), true);
        row("molre_router", m.router.num_params(), true);
    }
    if let Some(p) = &model.pooler {
        row("pooler_query", p.q.len(), true);
    }
    row("classifier_head", model.head.num_params(), true);
    ParamTable { rows }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub per_class: Vec<ClassMetrics>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub bucket_high: usize,
    pub bucket_mid: usize,
    pub param_table: ParamTable,
}

impl MetricsReport {
    pub fn build(split: &str, per_class: Vec<ClassMetrics>, param_table: ParamTable) -> Result<Self> {
        let aucs: Vec<Option<f64>> = per_class.iter().map(|c| c.auc).collect();
        let agg = aggregate(&aucs)?;
        Ok(Self {
            split: split.into(),
            per_class,
            mean_auc: agg.mean,
            std_auc: agg.std,
            bucket_high: agg.high,
            bucket_mid: agg.mid,
            param_table,
        })
    }

    /// Tab-separated, one record per class; `null` for undefined AUC.
    pub fn per_class_tsv(&self) -> String {
        let mut s = String::from("class\tauc\tn_pos\tn_neg\n");
        for c in &self.per_class {
            let auc = c.auc.map_or("null".to_string(), |a| format!("{a:.12}"));
            let _ = writeln!(s, "{}\t{}\t{}\t{}", c.class, auc, c.n_pos, c.n_neg);
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "split": self.split,
            "mean_auc": self.mean_auc,
            "std_auc": self.std_auc,
            "bucket_high": self.bucket_high,
            "bucket_mid": self.bucket_mid,
            "classes": self.per_class.len(),
            "param_rows": self.param_table.rows,
            "molre_total": self.param_table.molre_total(),
            "trainable_total": self.param_table.trainable_total(),
            "frozen_total": self.param_table.frozen_total(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tsv = dir.join(format!("{}_per_class.tsv", self.split));
        fs::write(&tsv, self.per_class_tsv()).map_err(|e| Error::io(&tsv, e))?;
        let json = dir.join(format!("{}_summary.json", self.split));
        let text = serde_json::to_string_pretty(&self.summary_json()).expect("summary is serializable");
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), Some(1.0));
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), Some(0.75));
        assert_eq!(auc(&[0.1, 0.4], &[1, 1]).unwrap(), None);
        assert!(auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[Some(0.9), Some(0.9)]).unwrap();
        assert_eq!((a.mean, a.std, a.high, a.mid), (0.9, 0.0, 2, 0));
        let a = aggregate(&[Some(0.85), Some(0.95)]).unwrap();
        assert!((a.mean - 0.9).abs() < 1e-12 && (a.std - 0.05).abs() < 1e-12);
        assert_eq!((a.high, a.mid), (1, 1));
        assert_eq!(aggregate(&[Some(0.90)]).unwrap().high, 1);
        assert_eq!(aggregate(&[Some(0.80), None]).unwrap().mid, 1);
        assert!(aggregate(&[None, None]).is_err());
    }

    #[test]
    fn tsv_has_null_rows() {
        let per = vec![
            ClassMetrics {
                class: "a".into(),
                auc: Some(0.75),
                n_pos: 2,
                n_neg: 2,
            },
            ClassMetrics {
                class: "b".into(),
                auc: None,
                n_pos: 0,
                n_neg: 4,
            },
        ];
        let r = MetricsReport::build("test", per, ParamTable { rows: vec![] }).unwrap();
        let tsv = r.per_class_tsv();
        assert_eq!(tsv.lines().count(), 3);
        assert!(tsv.contains("b\tnull\t0\t4"));
        assert_eq!(r.mean_auc, 0.75);
    }
}
