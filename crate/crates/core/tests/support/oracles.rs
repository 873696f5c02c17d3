//! Independent reference computations shared by several test targets.

use ahnet::eval::Finding;
use ahnet::nets::ModelGraph;
use ahnet::objectives::Box3D;
use ahnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tries every distinct score as a threshold, keeps findings at or above
/// it, and takes the best TPR among thresholds within each FP budget.
pub fn froc_oracle(findings: &[Vec<Finding>], boxes: &[Vec<Box3D>], grid: &[f64]) -> Vec<f64> {
    let lesions: usize = boxes.iter().map(Vec::len).sum();
    let mut thresholds: Vec<f32> = findings.iter().flatten().map(|f| f.score).collect();
    thresholds.push(f32::INFINITY);
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let mut tp = 0;
            let mut fp = 0;
            for (fs, bs) in findings.iter().zip(boxes) {
                let kept: Vec<&Finding> = fs.iter().filter(|f| f.score >= t).collect();
                tp += bs.iter().filter(|b| kept.iter().any(|f| b.contains(f.pos))).count();
                fp += kept.iter().filter(|f| !bs.iter().any(|b| b.contains(f.pos))).count();
            }
            (fp as f64 / findings.len() as f64, tp as f64 / lesions as f64)
        })
        .collect();
    grid.iter()
        .map(|&g| points.iter().filter(|p| p.0 <= g).map(|p| p.1).fold(0.0, f64::max))
        .collect()
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<Finding>>, Vec<Vec<Box3D>>) {
    let volumes = rng.gen_range(1..5);
    let mut findings = Vec::new();
    let mut boxes = Vec::new();
    for v in 0..volumes {
        let nb = rng.gen_range(usize::from(v == 0)..4);
        let bs: Vec<Box3D> = (0..nb)
            .map(|_| {
                let c = [0, 1, 2].map(|_| rng.gen_range(2.0..10.0f64).round());
                let e = [0, 1, 2].map(|_| rng.gen_range(1.0..5.0f64));
                Box3D::new(c, e).unwrap()
            })
            .collect();
        // Coarse scores force ties.
        let fs = (0..rng.gen_range(0..12))
            .map(|_| Finding {
                pos: [0, 1, 2].map(|_| rng.gen_range(0..12)),
                score: rng.gen_range(0..6) as f32 * 0.5,
            })
            .collect();
        findings.push(fs);
        boxes.push(bs);
    }
    (findings, boxes)
}

pub fn volume(seed: u64, d: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[1, 1, 64, 64, d], -1.0, 1.0, &mut rng)
}

/// Random batchnorm affine parameters and statistics, so the check does not
/// lean on the identity initialization.
pub fn perturb_bn(g: &mut ModelGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = g
        .params
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| n.contains(".bn") && n.starts_with("encoder."))
        .collect();
    for n in names {
        let s = g.params.get(&n).unwrap().shape().to_vec();
        let lo = if n.ends_with("running_var") { 0.5 } else { -0.5 };
        g.params.assign(&n, Tensor::uniform(&s, lo, lo + 1.0, &mut rng)).unwrap();
    }
}
