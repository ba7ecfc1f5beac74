//! Confusion-matrix accumulation and per-part IoU reporting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transfer::LabelMap;

/// `C x C` pixel counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_parts: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_parts: usize) -> Self {
        Self {
            num_parts,
            counts: vec![0; num_parts * num_parts],
        }
    }

    pub fn from_counts(num_parts: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_parts * num_parts {
            return Err(Error::Shape(format!(
                "{num_parts} parts need {} counts, got {}",
                num_parts * num_parts,
                counts.len()
            )));
        }
        Ok(Self { num_parts, counts })
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_parts + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if (gt.height, gt.width) != (pred.height, pred.width) {
            return Err(Error::Shape(format!(
                "ground truth is {}x{} but prediction is {}x{}",
                gt.height, gt.width, pred.height, pred.width
            )));
        }
        if gt.names.len() != self.num_parts || pred.names.len() != self.num_parts {
            return Err(Error::Shape(format!(
                "matrix has {} parts, label maps have {} and {}",
                self.num_parts,
                gt.names.len(),
                pred.names.len()
            )));
        }
        for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
            self.counts[g as usize * self.num_parts + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_parts != self.num_parts {
            return Err(Error::Shape(format!(
                "cannot merge {}-part and {}-part matrices",
                self.num_parts, other.num_parts
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartIou {
    pub part: String,
    /// `None` when the part is absent from both ground truth and prediction.
    pub iou: Option<f64>,
    pub excluded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub parts: Vec<PartIou>,
    /// Unweighted mean over parts with a non-zero union.
    pub miou: Option<f64>,
}

pub fn iou_report(cm: &ConfusionMatrix, names: &[String]) -> Result<IouReport> {
    if names.len() != cm.num_parts {
        return Err(Error::Shape(format!(
            "{} names for a {}-part matrix",
            names.len(),
            cm.num_parts
        )));
    }
    let c = cm.num_parts;
    let parts: Vec<PartIou> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let row: u64 = (0..c).map(|p| cm.get(k, p)).sum();
            let col: u64 = (0..c).map(|g| cm.get(g, k)).sum();
            let union = row + col - tp;
            let iou = (union > 0).then(|| tp as f64 / union as f64);
            PartIou {
                part: names[k].clone(),
                iou,
                excluded: iou.is_none(),
            }
        })
        .collect();
    let scored: Vec<f64> = parts.iter().filter_map(|p| p.iou).collect();
    let miou = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(IouReport { parts, miou })
}

fn fmt_iou(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl IouReport {
    /// `part,iou` rows followed by a trailing `mIoU` row. Excluded parts have
    /// an empty value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("part,iou\n");
        for p in &self.parts {
            let _ = writeln!(out, "{},{}", p.part, fmt_iou(p.iou));
        }
        let _ = writeln!(out, "mIoU,{}", fmt_iou(self.miou));
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let width = self
            .parts
            .iter()
            .map(|p| p.part.len())
            .chain(["mIoU".len()])
            .max()
            .unwrap_or(4);
        let mut out = format!("{:<width$}  {:>8}\n", "part", "IoU");
        for p in &self.parts {
            let value = match p.iou {
                Some(v) => format!("{:>8.4}", v),
                None => format!("{:>8}", "n/a"),
            };
            let flag = if p.excluded {
                "  (absent, excluded)"
            } else {
                ""
            };
            let _ = writeln!(out, "{:<width$}  {value}{flag}", p.part);
        }
        let miou = self
            .miou
            .map(|v| format!("{:>8.4}", v))
            .unwrap_or_else(|| format!("{:>8}", "n/a"));
        let _ = writeln!(out, "{:<width$}  {miou}", "mIoU");
        out
    }
}
