//! gIoU, cIoU and Pr@X over binary masks.
//!
//! IoU values are fractions. Pr@X and the rendered tables use percentages.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};

/// Pr@X thresholds in table order.
pub const PR_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Table column headers, left to right.
pub const TABLE_COLUMNS: [&str; 7] = ["Pr@0.5", "Pr@0.6", "Pr@0.7", "Pr@0.8", "Pr@0.9", "cIoU", "gIoU"];

/// Intersection and union pixel counts of one prediction/ground-truth pair.
pub fn overlap(pred: &Mask, gt: &Mask) -> Result<(u64, u64)> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Metric(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if p > 1 || g > 1 {
            return Err(Error::Metric(format!("non-binary mask value {}", p.max(g))));
        }
        inter += u64::from(p & g);
        union += u64::from(p | g);
    }
    Ok((inter, union))
}

/// Both masks empty counts as a perfect match.
fn ratio(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, u) = overlap(pred, gt)?;
    Ok(ratio(i, u))
}

pub fn giou(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Metric("gIoU of an empty list".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

pub fn ciou(pairs: &[(&Mask, &Mask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Metric("cIoU of an empty list".into()));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (p, g) in pairs {
        let (i, u) = overlap(p, g)?;
        inter += i;
        union += u;
    }
    Ok(ratio(inter, union))
}

pub fn precision_at(ious: &[f64], threshold: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Metric("Pr@X of an empty list".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Metric(format!("threshold {threshold} outside (0, 1)")));
    }
    let hits = ious.iter().filter(|&&v| v >= threshold).count();
    Ok(100.0 * hits as f64 / ious.len() as f64)
}

fn threshold_key(t: f64) -> String {
    format!("{t:.1}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub giou: f64,
    pub ciou: f64,
    /// `"0.5"` … `"0.9"` → percentage.
    pub pr: BTreeMap<String, f64>,
    pub per_image_iou: Vec<f64>,
}

impl EvalReport {
    pub fn from_pairs(pairs: &[(&Mask, &Mask)]) -> Result<Self> {
        let mut per_image_iou = Vec::with_capacity(pairs.len());
        let (mut inter, mut union) = (0u64, 0u64);
        for (p, g) in pairs {
            let (i, u) = overlap(p, g)?;
            per_image_iou.push(ratio(i, u));
            inter += i;
            union += u;
        }
        let giou = giou(&per_image_iou)?;
        let pr = PR_THRESHOLDS
            .iter()
            .map(|&t| Ok((threshold_key(t), precision_at(&per_image_iou, t)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            giou,
            ciou: ratio(inter, union),
            pr,
            per_image_iou,
        })
    }

    /// Pr@0.5 … Pr@0.9, cIoU, gIoU, all as percentages.
    pub fn row(&self) -> [f64; 7] {
        let mut row = [0.0; 7];
        for (i, &t) in PR_THRESHOLDS.iter().enumerate() {
            row[i] = self.pr.get(&threshold_key(t)).copied().unwrap_or(f64::NAN);
        }
        row[5] = 100.0 * self.ciou;
        row[6] = 100.0 * self.giou;
        row
    }

    pub fn table(&self) -> String {
        let mut out = header_line(&[]);
        out.push_str(&row_line(&[], &self.row()));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn header_line(lead: &[&str]) -> String {
    let mut s = String::new();
    for l in lead {
        let _ = write!(s, "{l:<10}");
    }
    for c in TABLE_COLUMNS {
        let _ = write!(s, "{c:>9}");
    }
    s.push('\n');
    s
}

fn row_line(lead: &[&str], values: &[f64; 7]) -> String {
    let mut s = String::new();
    for l in lead {
        let _ = write!(s, "{l:<10}");
    }
    for v in values {
        let _ = write!(s, "{v:>9.2}");
    }
    s.push('\n');
    s
}

/// Ablation block: one row per setting, prefixed by the axis id on the first
/// row.
pub fn ablation_table(id: usize, rows: &[(String, EvalReport)]) -> String {
    let mut out = header_line(&["ID", "Setting"]);
    for (i, (label, report)) in rows.iter().enumerate() {
        let id = if i == 0 { id.to_string() } else { String::new() };
        out.push_str(&row_line(&[&id, label], &report.row()));
    }
    out
}

/// Splits a rendered table row into its leading labels and the seven metric
/// values. Used to check emitted tables.
pub fn parse_table_row(line: &str) -> Option<(Vec<String>, Vec<f64>)> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 7 {
        return None;
    }
    let split = fields.len() - 7;
    let values = fields[split..]
        .iter()
        .map(|f| f.parse().ok())
        .collect::<Option<Vec<f64>>>()?;
    Some((fields[..split].iter().map(|s| s.to_string()).collect(), values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::zeros(h, w);
        for &(y, x) in on {
            m.data[y * w + x] = 1;
        }
        m
    }

    #[test]
    fn basic_iou_cases() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(4, 4, &[(0, 1), (0, 2), (1, 1), (1, 2)]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let c = mask(4, 4, &[(3, 3)]);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
        assert_eq!(iou(&Mask::zeros(4, 4), &Mask::zeros(4, 4)).unwrap(), 1.0);
        assert!(iou(&a, &Mask::zeros(3, 4)).is_err());
        let mut bad = a.clone();
        bad.data[5] = 2;
        assert!(iou(&bad, &a).is_err());
    }

    #[test]
    fn aggregate_cases() {
        assert!((giou(&[0.2, 1.0]).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(giou(&[0.37]).unwrap(), 0.37);
        assert!(giou(&[]).is_err());
        let p = precision_at(&[0.4, 0.6, 0.9], 0.5).unwrap();
        assert!((p - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(precision_at(&[0.1, 0.01], 1e-9).unwrap(), 100.0);
        assert!(precision_at(&[0.5], 1.0).is_err());
        assert!(precision_at(&[], 0.5).is_err());
        let z = Mask::zeros(2, 2);
        assert_eq!(ciou(&[(&z, &z), (&z, &z)]).unwrap(), 1.0);
    }

    #[test]
    fn report_round_trip_and_table() {
        let a = mask(2, 2, &[(0, 0)]);
        let r = EvalReport::from_pairs(&[(&a, &a)]).unwrap();
        let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(r, back);
        let t = r.table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0].split_whitespace().collect::<Vec<_>>(), TABLE_COLUMNS);
        let (_, vals) = parse_table_row(lines[1]).unwrap();
        assert_eq!(vals, vec![100.0; 7]);
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        prop::collection::vec(0u8..=1, 36).prop_map(|d| Mask::new(6, 6, d).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_mask(), b in arb_mask()) {
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn precision_non_increasing(ious in prop::collection::vec(0.0f64..=1.0, 1..30)) {
            let prs: Vec<f64> = PR_THRESHOLDS.iter().map(|&t| precision_at(&ious, t).unwrap()).collect();
            prop_assert!(prs.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn giou_between_extremes(ious in prop::collection::vec(0.0f64..=1.0, 1..30)) {
            let g = giou(&ious).unwrap();
            let lo = ious.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ious.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(g >= lo - 1e-12 && g <= hi + 1e-12);
        }
    }
}
