//! Per-group precision, recall and F1 with macro averages over groups.

use std::fmt::Write as _;
use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::text::{AttributeSchema, GroupKind};

/// Binary decisions from logits: argmax inside exclusive groups (first
/// index wins ties), `logit > 0` for binary groups.
pub fn decide<T: Scalar>(logits: &[T], schema: &AttributeSchema) -> Result<Vec<bool>> {
    if logits.len() != schema.class_count() {
        return Err(Error::ModelMismatch(format!(
            "{} logits for a schema with {} classes",
            logits.len(),
            schema.class_count()
        )));
    }
    let mut out = vec![false; logits.len()];
    for (g, group) in schema.groups().iter().enumerate() {
        let range = schema.group_range(g);
        match group.kind {
            GroupKind::Exclusive => {
                let mut best = range.start;
                for i in range.clone() {
                    if logits[i] > logits[best] {
                        best = i;
                    }
                }
                out[best] = true;
            }
            GroupKind::Binary => {
                for i in range {
                    out[i] = logits[i] > T::zero();
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    /// `(precision, recall, f1)`, or `None` when the class occurs in
    /// neither truth nor predictions.
    pub fn scores(&self) -> Option<(f64, f64, f64)> {
        if self.tp + self.fp + self.fn_ == 0 {
            return None;
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Some((p, r, f1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores of one group over tracklets. `preds[i]` and `truths[i]` hold the
/// indicators of tracklet `i` for the classes of the group. The group
/// value is the unweighted mean over classes that occur at all; `None`
/// when no class occurs.
pub fn group_metrics<P: AsRef<[bool]>, Q: AsRef<[bool]>>(preds: &[P], truths: &[Q]) -> Result<Option<GroupScore>> {
    if preds.len() != truths.len() {
        return Err(Error::Usage(format!(
            "{} predictions but {} ground-truth rows",
            preds.len(),
            truths.len()
        )));
    }
    let Some(width) = preds.first().map(|p| p.as_ref().len()) else {
        return Ok(None);
    };
    let mut counts = vec![Confusion::default(); width];
    for (p, t) in preds.iter().zip(truths) {
        let (p, t) = (p.as_ref(), t.as_ref());
        if p.len() != width || t.len() != width {
            return Err(Error::Usage(format!(
                "indicator rows must all have {width} classes, got {} and {}",
                p.len(),
                t.len()
            )));
        }
        for (c, (&pi, &ti)) in counts.iter_mut().zip(p.iter().zip(t)) {
            match (pi, ti) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let scored: Vec<(f64, f64, f64)> = counts.iter().filter_map(Confusion::scores).collect();
    if scored.is_empty() {
        return Ok(None);
    }
    let n = scored.len() as f64;
    Ok(Some(GroupScore {
        precision: scored.iter().map(|s| s.0).sum::<f64>() / n,
        recall: scored.iter().map(|s| s.1).sum::<f64>() / n,
        f1: scored.iter().map(|s| s.2).sum::<f64>() / n,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub group: String,
    /// Absent when no class of the group occurs in truth or predictions.
    pub score: Option<GroupScore>,
    /// Positive ground-truth labels in the group.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub tracklets: usize,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub groups: Vec<GroupRow>,
}

/// Arithmetic means of the scored groups.
pub fn macro_report(groups: Vec<GroupRow>, tracklets: usize) -> Result<MetricReport> {
    if groups.is_empty() {
        return Err(Error::Usage("macro report needs at least one group".into()));
    }
    let scored: Vec<GroupScore> = groups.iter().filter_map(|g| g.score).collect();
    let mean = |f: fn(&GroupScore) -> f64| {
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().map(f).sum::<f64>() / scored.len() as f64
        }
    };
    Ok(MetricReport {
        tracklets,
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        macro_f1: mean(|s| s.f1),
        groups,
    })
}

fn columns<'a>(rows: &'a [Vec<bool>], range: &Range<usize>) -> Vec<&'a [bool]> {
    rows.iter().map(|r| &r[range.clone()]).collect()
}

/// Scores decided predictions against ground truth for every group.
pub fn evaluate(schema: &AttributeSchema, preds: &[Vec<bool>], truths: &[Vec<bool>]) -> Result<MetricReport> {
    if preds.len() != truths.len() {
        return Err(Error::Usage(format!("{} predictions but {} labels", preds.len(), truths.len())));
    }
    if let Some(bad) = preds.iter().chain(truths).find(|r| r.len() != schema.class_count()) {
        return Err(Error::ModelMismatch(format!(
            "indicator row has {} classes, schema has {}",
            bad.len(),
            schema.class_count()
        )));
    }
    let mut rows = Vec::with_capacity(schema.groups().len());
    for (g, group) in schema.groups().iter().enumerate() {
        let range = schema.group_range(g);
        let truth_cols = columns(truths, &range);
        rows.push(GroupRow {
            group: group.name.clone(),
            score: group_metrics(&columns(preds, &range), &truth_cols)?,
            support: truth_cols.iter().map(|r| r.iter().filter(|&&b| b).count()).sum(),
        });
    }
    macro_report(rows, preds.len())
}

impl MetricReport {
    pub const HEADER: &'static str = "group\tprecision\trecall\tf1\tsupport";

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for row in &self.groups {
            match row.score {
                Some(s) => writeln!(out, "{}\t{:.4}\t{:.4}\t{:.4}\t{}", row.group, s.precision, s.recall, s.f1, row.support),
                None => writeln!(out, "{}\t-\t-\t-\t{}", row.group, row.support),
            }
            .expect("writing to a string");
        }
        writeln!(
            out,
            "MACRO\t{:.4}\t{:.4}\t{:.4}\t{}",
            self.macro_precision, self.macro_recall, self.macro_f1, self.tracklets
        )
        .expect("writing to a string");
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}
