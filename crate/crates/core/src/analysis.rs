//! Quality-partition protocol over per-sample records, subset accuracy
//! reports, FROC/CPM detection metrics, and 2-D feature scatter plots.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Per-test-sample evaluation record, the unit of quality analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    pub feature: Vec<f64>,
    pub norm: f64,
    pub label: usize,
    pub prediction: usize,
    pub correct: bool,
    pub prob: f64,
}

/// Records split by feature norm: the bottom fraction ("low") and the rest.
#[derive(Debug, Clone)]
pub struct QualityPartition {
    pub low: Vec<SampleRecord>,
    pub good: Vec<SampleRecord>,
    pub fraction: f64,
}

/// Sorts ascending by (norm, index) and takes the bottom
/// floor(fraction * n) records as the low-quality subset.
pub fn partition_by_norm(records: &[SampleRecord], fraction: f64) -> Result<QualityPartition> {
    if records.is_empty() {
        return Err(Error::Domain("cannot partition an empty record set".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Domain(format!(
            "partition fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut sorted: Vec<&SampleRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.norm
            .partial_cmp(&b.norm)
            .expect("finite norms")
            .then(a.index.cmp(&b.index))
    });
    let n_low = (fraction * records.len() as f64).floor() as usize;
    let low = sorted[..n_low].iter().map(|r| (*r).clone()).collect();
    let good = sorted[n_low..].iter().map(|r| (*r).clone()).collect();
    Ok(QualityPartition {
        low,
        good,
        fraction,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub subset: &'static str,
    pub count: usize,
    pub accuracy: f64,
    pub mean_norm: f64,
}

fn row(subset: &'static str, records: &[&SampleRecord]) -> ReportRow {
    let count = records.len();
    if count == 0 {
        return ReportRow {
            subset,
            count: 0,
            accuracy: 0.0,
            mean_norm: 0.0,
        };
    }
    let correct = records.iter().filter(|r| r.correct).count();
    let norm_sum: f64 = records.iter().map(|r| r.norm).sum();
    ReportRow {
        subset,
        count,
        accuracy: correct as f64 / count as f64,
        mean_norm: norm_sum / count as f64,
    }
}

/// Three rows — good, low, overall — with accuracy and mean feature norm.
pub fn subset_report(partition: &QualityPartition) -> Vec<ReportRow> {
    let good: Vec<&SampleRecord> = partition.good.iter().collect();
    let low: Vec<&SampleRecord> = partition.low.iter().collect();
    let overall: Vec<&SampleRecord> = partition.good.iter().chain(&partition.low).collect();
    vec![
        row("good", &good),
        row("low", &low),
        row("overall", &overall),
    ]
}

#[derive(Debug, Clone)]
pub struct FrocCandidate {
    pub scan_id: usize,
    pub score: f64,
    pub is_true_nodule: bool,
}

#[derive(Debug, Clone)]
pub struct FrocInput {
    pub candidates: Vec<FrocCandidate>,
    pub n_scans: usize,
    pub n_ground_truth: usize,
}

impl FrocInput {
    pub fn new(
        candidates: Vec<FrocCandidate>,
        n_scans: usize,
        n_ground_truth: usize,
    ) -> Result<Self> {
        if n_scans == 0 {
            return Err(Error::Domain("FROC needs at least one scan".into()));
        }
        if n_ground_truth == 0 {
            return Err(Error::Domain(
                "FROC needs at least one ground-truth nodule".into(),
            ));
        }
        if let Some(c) = candidates.iter().find(|c| !c.score.is_finite()) {
            return Err(Error::Numeric(format!(
                "candidate score {} is not finite",
                c.score
            )));
        }
        Ok(FrocInput {
            candidates,
            n_scans,
            n_ground_truth,
        })
    }
}

/// Sweeps thresholds over the distinct candidate scores in descending order;
/// each point is (false positives per scan, detected fraction of ground
/// truth). Both coordinates are non-decreasing as the threshold loosens.
pub fn froc(input: &FrocInput) -> Vec<(f64, f64)> {
    let mut by_score: Vec<&FrocCandidate> = input.candidates.iter().collect();
    by_score.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));

    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < by_score.len() {
        let threshold = by_score[i].score;
        while i < by_score.len() && by_score[i].score == threshold {
            if by_score[i].is_true_nodule {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((
            fp as f64 / input.n_scans as f64,
            tp as f64 / input.n_ground_truth as f64,
        ));
    }
    points
}

/// The seven FPs/scan operating points the detection score averages over.
pub const CPM_OPERATING_POINTS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Mean sensitivity at the seven operating points, read off the FROC curve
/// by linear interpolation in FPs/scan. Queries left of the first point give
/// 0; queries right of the last point carry the rightmost sensitivity. Where
/// several points share one FPs/scan value the highest sensitivity wins.
pub fn cpm(curve: &[(f64, f64)]) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::Domain("CPM needs a non-empty FROC curve".into()));
    }
    let mut sorted = curve.to_vec();
    sorted.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite fps")
            .then(a.1.partial_cmp(&b.1).expect("finite sensitivity"))
    });
    // keep the max sensitivity per distinct fps value
    let mut cleaned: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
    for p in sorted {
        match cleaned.last_mut() {
            Some(last) if last.0 == p.0 => last.1 = p.1,
            _ => cleaned.push(p),
        }
    }

    let value_at = |t: f64| -> f64 {
        if t < cleaned[0].0 {
            return 0.0;
        }
        let last = cleaned[cleaned.len() - 1];
        if t >= last.0 {
            return last.1;
        }
        let hi = cleaned.partition_point(|p| p.0 <= t);
        let (x0, y0) = cleaned[hi - 1];
        let (x1, y1) = cleaned[hi];
        y0 + (y1 - y0) * (t - x0) / (x1 - x0)
    };

    let total: f64 = CPM_OPERATING_POINTS.iter().map(|&t| value_at(t)).sum();
    Ok(total / CPM_OPERATING_POINTS.len() as f64)
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

const SVG_SIZE: f64 = 640.0;

/// Scatter plot of 2-D features, one circle per record, colored by class
/// from a fixed 10-color palette. Axes are auto-scaled with a 5% margin.
pub fn scatter_svg(records: &[SampleRecord], path: &Path) -> Result<()> {
    if let Some(r) = records.iter().find(|r| r.feature.len() != 2) {
        return Err(Error::Dimension {
            context: "scatter_svg",
            left: vec![r.feature.len()],
            right: vec![2],
        });
    }

    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in records {
        x_lo = x_lo.min(r.feature[0]);
        x_hi = x_hi.max(r.feature[0]);
        y_lo = y_lo.min(r.feature[1]);
        y_hi = y_hi.max(r.feature[1]);
    }
    if records.is_empty() {
        (x_lo, x_hi, y_lo, y_hi) = (-1.0, 1.0, -1.0, 1.0);
    }
    if x_hi - x_lo <= 0.0 {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    if y_hi - y_lo <= 0.0 {
        y_lo -= 0.5;
        y_hi += 0.5;
    }

    let margin = 0.05 * SVG_SIZE;
    let span = SVG_SIZE - 2.0 * margin;
    let map_x = |x: f64| margin + (x - x_lo) / (x_hi - x_lo) * span;
    let map_y = |y: f64| SVG_SIZE - margin - (y - y_lo) / (y_hi - y_lo) * span;

    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#)?;
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{s}" height="{s}" viewBox="0 0 {s} {s}">"#,
        s = SVG_SIZE
    )?;
    writeln!(
        out,
        r##"<rect x="0" y="0" width="{s}" height="{s}" fill="#ffffff"/>"##,
        s = SVG_SIZE
    )?;
    for r in records {
        writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}"/>"#,
            map_x(r.feature[0]),
            map_y(r.feature[1]),
            PALETTE[r.label % PALETTE.len()]
        )?;
    }
    writeln!(out, "</svg>")?;
    out.flush()?;
    Ok(())
}

/// Per-sample records CSV: `index,label,pred,correct,prob,norm,f0,f1,...`.
pub fn write_records_csv(records: &[SampleRecord], path: &Path) -> Result<()> {
    let d = records.first().map_or(0, |r| r.feature.len());
    let mut out = BufWriter::new(File::create(path)?);
    let feature_header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    writeln!(
        out,
        "index,label,pred,correct,prob,norm,{}",
        feature_header.join(",")
    )?;
    for r in records {
        let features: Vec<String> = r.feature.iter().map(|v| format!("{v}")).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.index,
            r.label,
            r.prediction,
            u8::from(r.correct),
            r.prob,
            r.norm,
            features.join(",")
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a records CSV produced by [`write_records_csv`].
pub fn read_records_csv(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty records file", path.display())))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 6 || columns[..6] != ["index", "label", "pred", "correct", "prob", "norm"] {
        return Err(Error::Format(format!(
            "{}: unexpected records header `{header}`",
            path.display()
        )));
    }
    let d = columns.len() - 6;
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 + d {
            return Err(Error::Format(format!(
                "{}:{}: expected {} fields, got {}",
                path.display(),
                lineno + 2,
                6 + d,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 2)))
        };
        let parse_u = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 2)))
        };
        let feature: Vec<f64> = fields[6..]
            .iter()
            .map(|s| parse_f(s))
            .collect::<Result<_>>()?;
        records.push(SampleRecord {
            index: parse_u(fields[0])?,
            label: parse_u(fields[1])?,
            prediction: parse_u(fields[2])?,
            correct: fields[3] == "1",
            prob: parse_f(fields[4])?,
            norm: parse_f(fields[5])?,
            feature,
        });
    }
    Ok(records)
}

/// Subset report CSV: `subset,count,accuracy,mean_norm` rows in the fixed
/// good/low/overall order.
pub fn write_report_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "subset,count,accuracy,mean_norm")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.subset, r.count, r.accuracy, r.mean_norm)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
