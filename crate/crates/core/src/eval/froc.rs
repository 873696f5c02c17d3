use std::io::Write;

use serde::{Deserialize, Serialize};

use super::maxima::Finding;
use crate::error::{Error, Result};
use crate::objectives::Box3D;

/// Grid of allowed false positives per volume used for reporting.
pub const DEFAULT_FP_GRID: [f64; 6] = [0.01, 0.05, 0.10, 0.15, 0.20, 0.25];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub fp_per_volume: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// One flag per box.
    pub detected: Vec<bool>,
    /// Findings inside at least one box.
    pub hits: usize,
    pub false_positives: usize,
}

impl MatchResult {
    pub fn detected_count(&self) -> usize {
        self.detected.iter().filter(|&&d| d).count()
    }
}

pub fn match_findings(findings: &[Finding], boxes: &[Box3D]) -> MatchResult {
    let mut r = MatchResult {
        detected: vec![false; boxes.len()],
        ..Default::default()
    };
    for f in findings {
        let mut inside = false;
        for (d, b) in r.detected.iter_mut().zip(boxes) {
            if b.contains(f.pos) {
                *d = true;
                inside = true;
            }
        }
        if inside {
            r.hits += 1;
        } else {
            r.false_positives += 1;
        }
    }
    r
}

/// Operating point at one score threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub fp_per_volume: f64,
    pub tpr: f64,
}

fn check_inputs(findings: &[Vec<Finding>], boxes: &[Vec<Box3D>]) -> Result<usize> {
    if findings.len() != boxes.len() {
        return Err(Error::InvalidSpec(format!(
            "{} finding lists for {} volumes",
            findings.len(),
            boxes.len()
        )));
    }
    if findings.is_empty() {
        return Err(Error::InvalidSpec("no volumes".into()));
    }
    let lesions: usize = boxes.iter().map(Vec::len).sum();
    if lesions == 0 {
        return Err(Error::InvalidSpec("no lesions in the ground truth".into()));
    }
    Ok(lesions)
}

/// All operating points, from the `+inf` threshold (nothing accepted) down to
/// the lowest score. Findings with equal scores enter together.
pub fn froc_sweep(findings: &[Vec<Finding>], boxes: &[Vec<Box3D>]) -> Result<Vec<SweepPoint>> {
    let lesions = check_inputs(findings, boxes)?;
    let volumes = findings.len() as f64;
    // (score, volume, containing boxes)
    let mut all: Vec<(f32, usize, Vec<usize>)> = Vec::new();
    for (v, (fs, bs)) in findings.iter().zip(boxes).enumerate() {
        for f in fs {
            if !f.score.is_finite() {
                return Err(Error::InvalidSpec(format!("non-finite score at {:?}", f.pos)));
            }
            let inside = bs
                .iter()
                .enumerate()
                .filter(|(_, b)| b.contains(f.pos))
                .map(|(i, _)| i)
                .collect();
            all.push((f.score, v, inside));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut detected: Vec<Vec<bool>> = boxes.iter().map(|b| vec![false; b.len()]).collect();
    let mut hit = 0usize;
    let mut fp = 0usize;
    let mut out = vec![SweepPoint {
        threshold: f64::INFINITY,
        fp_per_volume: 0.0,
        tpr: 0.0,
    }];
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            let (_, v, inside) = &all[i];
            if inside.is_empty() {
                fp += 1;
            }
            for &b in inside {
                if !detected[*v][b] {
                    detected[*v][b] = true;
                    hit += 1;
                }
            }
            i += 1;
        }
        out.push(SweepPoint {
            threshold: s as f64,
            fp_per_volume: fp as f64 / volumes,
            tpr: hit as f64 / lesions as f64,
        });
    }
    Ok(out)
}

/// TPR at each allowed FP rate: the best operating point whose FP/volume does
/// not exceed the grid value (step interpolation).
pub fn froc(findings: &[Vec<Finding>], boxes: &[Vec<Box3D>], grid: &[f64]) -> Result<Vec<FrocPoint>> {
    if grid.windows(2).any(|w| w[0] > w[1]) || grid.iter().any(|g| !(*g >= 0.0)) {
        return Err(Error::InvalidSpec(format!("FP grid must be ascending and >= 0: {grid:?}")));
    }
    let sweep = froc_sweep(findings, boxes)?;
    Ok(sample_sweep(&sweep, grid))
}

pub fn sample_sweep(sweep: &[SweepPoint], grid: &[f64]) -> Vec<FrocPoint> {
    grid.iter()
        .map(|&g| FrocPoint {
            fp_per_volume: g,
            tpr: sweep
                .iter()
                .filter(|p| p.fp_per_volume <= g)
                .map(|p| p.tpr)
                .fold(0.0, f64::max),
        })
        .collect()
}

pub fn write_froc_csv<W: Write>(mut w: W, points: &[FrocPoint]) -> Result<()> {
    writeln!(w, "fp_per_volume,tpr")?;
    for p in points {
        writeln!(w, "{},{}", p.fp_per_volume, p.tpr)?;
    }
    Ok(())
}

pub fn write_sweep_csv<W: Write>(mut w: W, points: &[SweepPoint]) -> Result<()> {
    writeln!(w, "threshold,fp_per_volume,tpr")?;
    for p in points {
        writeln!(w, "{},{},{}", p.threshold, p.fp_per_volume, p.tpr)?;
    }
    Ok(())
}

pub fn read_froc_csv(text: &str) -> Result<Vec<FrocPoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("fp_per_volume,tpr") => {}
        other => return Err(Error::Format(format!("unexpected FROC header {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (a, b) = l
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("bad FROC row `{l}`")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad number `{s}`: {e}")))
            };
            Ok(FrocPoint {
                fp_per_volume: parse(a)?,
                tpr: parse(b)?,
            })
        })
        .collect()
}
