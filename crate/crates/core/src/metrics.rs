//! Voxel-overlap metrics over binary region masks, with per-case and
//! aggregate reporting.

use std::fmt::Write as _;

use crate::tensor::{BinaryMask, LabelGrid};
use crate::{par, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("prediction mask", &gt.shape(), &pred.shape()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    num as f64 / den as f64
}

/// `2TP / (2TP + FP + FN)`; 1 when prediction and truth are both empty.
pub fn dsc(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        ratio(2 * c.tp, den)
    }
}

pub fn acc(c: &ConfusionCounts) -> f64 {
    if c.total() == 0 {
        1.0
    } else {
        ratio(c.tp + c.tn, c.total())
    }
}

/// `TP / (TP + FN)`; 1 when the truth is empty.
pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fn_;
    if den == 0 {
        1.0
    } else {
        ratio(c.tp, den)
    }
}

/// `TN / (TN + FP)`; 1 when the truth covers every voxel.
pub fn specificity(c: &ConfusionCounts) -> f64 {
    let den = c.tn + c.fp;
    if den == 0 {
        1.0
    } else {
        ratio(c.tn, den)
    }
}

/// `TP / (TP + FP)`; for an empty prediction 1 if the truth is empty too,
/// else 0.
pub fn precision(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fp;
    match (den, c.fn_) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => ratio(c.tp, den),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Dsc,
    Acc,
    Se,
    Sp,
    Pre,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Dsc, Metric::Acc, Metric::Se, Metric::Sp, Metric::Pre];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dsc => "dsc",
            Metric::Acc => "acc",
            Metric::Se => "se",
            Metric::Sp => "sp",
            Metric::Pre => "pre",
        }
    }

    pub fn of(self, c: &ConfusionCounts) -> f64 {
        match self {
            Metric::Dsc => dsc(c),
            Metric::Acc => acc(c),
            Metric::Se => sensitivity(c),
            Metric::Sp => specificity(c),
            Metric::Pre => precision(c),
        }
    }
}

/// A named set of labels evaluated as one binary region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub name: String,
    pub labels: Vec<u16>,
}

impl Region {
    pub fn new(name: &str, labels: &[u16]) -> Self {
        Region {
            name: name.to_string(),
            labels: labels.to_vec(),
        }
    }

    pub fn mask(&self, grid: &LabelGrid) -> BinaryMask {
        grid.map(|l| self.labels.contains(&l))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionMetrics {
    pub values: [f64; 5],
}

impl RegionMetrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        RegionMetrics {
            values: Metric::ALL.map(|m| m.of(c)),
        }
    }

    pub fn get(&self, m: Metric) -> f64 {
        self.values[m as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub regions: Vec<(String, RegionMetrics)>,
}

impl CaseMetrics {
    /// Unweighted mean over regions.
    pub fn mean(&self, m: Metric) -> f64 {
        self.regions.iter().map(|(_, r)| r.get(m)).sum::<f64>() / self.regions.len() as f64
    }
}

pub fn evaluate_case(case_id: &str, pred: &LabelGrid, gt: &LabelGrid, regions: &[Region]) -> Result<CaseMetrics> {
    if regions.is_empty() {
        return Err(Error::EmptyRegionList);
    }
    if pred.shape() != gt.shape() {
        return Err(Error::shape("prediction labels", &gt.shape(), &pred.shape()));
    }
    let regions = regions
        .iter()
        .map(|r| {
            let c = confusion(&r.mask(pred), &r.mask(gt))?;
            Ok((r.name.clone(), RegionMetrics::from_counts(&c)))
        })
        .collect::<Result<_>>()?;
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        regions,
    })
}

/// Single-case report.
pub fn evaluate(pred: &LabelGrid, gt: &LabelGrid, regions: &[Region]) -> Result<MetricsReport> {
    Ok(MetricsReport::new(vec![evaluate_case("case", pred, gt, regions)?]))
}

/// Evaluates many `(case_id, pred, gt)` triples in parallel; case order is
/// preserved.
pub fn evaluate_all(cases: &[(String, LabelGrid, LabelGrid)], regions: &[Region]) -> Result<MetricsReport> {
    let per_case = par::map(cases.len(), |i| {
        let (id, p, g) = &cases[i];
        evaluate_case(id, p, g, regions)
    });
    Ok(MetricsReport::new(per_case.into_iter().collect::<Result<_>>()?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
}

impl MetricsReport {
    pub fn new(cases: Vec<CaseMetrics>) -> Self {
        MetricsReport { cases }
    }

    /// Mean and population standard deviation over cases of the per-case
    /// region means.
    pub fn aggregate(&self, m: Metric) -> (f64, f64) {
        let vals: Vec<f64> = self.cases.iter().map(|c| c.mean(m)).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Machine-readable `key = value` lines with six decimals.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for c in &self.cases {
            for (region, r) in &c.regions {
                for m in Metric::ALL {
                    let _ = writeln!(out, "{}.{}.{} = {:.6}", c.case_id, region, m.name(), r.get(m));
                }
            }
            for m in Metric::ALL {
                let _ = writeln!(out, "{}.mean.{} = {:.6}", c.case_id, m.name(), c.mean(m));
            }
        }
        if !self.cases.is_empty() {
            for m in Metric::ALL {
                let (mean, std) = self.aggregate(m);
                let _ = writeln!(out, "aggregate.mean.{} = {:.6}", m.name(), mean);
                let _ = writeln!(out, "aggregate.std.{} = {:.6}", m.name(), std);
            }
        }
        out
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:<10} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "case", "region", "DSC", "ACC", "SE", "SP", "PRE"
        );
        let row = |out: &mut String, case: &str, region: &str, v: [f64; 5]| {
            let _ = writeln!(
                out,
                "{case:<16} {region:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                v[0], v[1], v[2], v[3], v[4]
            );
        };
        for c in &self.cases {
            for (region, r) in &c.regions {
                row(&mut out, &c.case_id, region, r.values);
            }
        }
        if !self.cases.is_empty() {
            row(&mut out, "aggregate", "mean", Metric::ALL.map(|m| self.aggregate(m).0));
            row(&mut out, "aggregate", "std", Metric::ALL.map(|m| self.aggregate(m).1));
        }
        out
    }
}

/// Parses `key = value` report lines back into ordered pairs.
pub fn parse_kv(text: &str) -> Result<Vec<(String, f64)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::ConfigInvalid(format!("report line {}: `{line}`", i + 1));
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            let v: f64 = v.trim().parse().map_err(|_| bad())?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}
