//! Overlap and surface-distance evaluation for tumor segmentations.
//!
//! Labels decompose into three nested regions: whole tumor (labels 1, 2,
//! 4), tumor core (1, 4), enhancing tumor (4). Dice works on voxel counts;
//! HD95 is the max of the two directed 95th-percentile surface distances,
//! with surfaces extracted under 6-connectivity. A k-d tree answers the
//! nearest-neighbor queries; the brute-force forms stay available as
//! oracles and must agree with the fast paths to the last bit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, VALID_LABELS};

/// Surface distance charged when exactly one mask is empty, in mm. Keeps
/// aggregate means finite while still dominating any real distance at
/// brain-volume scale.
pub const EMPTY_SURFACE_PENALTY_MM: f64 = 373.13;

/// A binary voxel mask over a (D, H, W) grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub set: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], set: Vec<bool>) -> Result<Mask> {
        if set.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "mask: dims {dims:?} need {} voxels, got {}",
                dims.iter().product::<usize>(),
                set.len()
            )));
        }
        Ok(Mask { dims, set })
    }

    pub fn empty(dims: [usize; 3]) -> Mask {
        Mask { dims, set: vec![false; dims.iter().product()] }
    }

    pub fn count(&self) -> u64 {
        self.set.iter().map(|&b| u64::from(b)).sum()
    }

    fn at(&self, d: usize, h: usize, w: usize) -> bool {
        self.set[(d * self.dims[1] + h) * self.dims[2] + w]
    }
}

/// Splits labels into the (WT, TC, ET) region masks.
pub fn regions(vol: &LabelVolume) -> Result<[Mask; 3]> {
    if let Some(bad) = vol.voxels.iter().find(|v| !VALID_LABELS.contains(v)) {
        return Err(Error::data(format!("regions: label {bad} outside {{0, 1, 2, 4}}")));
    }
    let wt = vol.voxels.iter().map(|&v| v == 1 || v == 2 || v == 4).collect();
    let tc = vol.voxels.iter().map(|&v| v == 1 || v == 4).collect();
    let et = vol.voxels.iter().map(|&v| v == 4).collect();
    Ok([
        Mask { dims: vol.dims, set: wt },
        Mask { dims: vol.dims, set: tc },
        Mask { dims: vol.dims, set: et },
    ])
}

/// Rebuilds a label volume from three region probability channels
/// [3, D, H, W] by nested painting: whole tumor becomes edema, then tumor
/// core overrides to necrosis, then enhancing tumor overrides to label 4.
pub fn labels_from_regions(probs: &Tensor, threshold: f32, spacing: [f32; 3]) -> Result<LabelVolume> {
    if probs.rank() != 4 || probs.extent(0) != 3 {
        return Err(Error::shape(format!(
            "labels_from_regions: expected [3, D, H, W], got {:?}",
            probs.shape()
        )));
    }
    let dims = [probs.extent(1), probs.extent(2), probs.extent(3)];
    let n: usize = dims.iter().product();
    let data = probs.data();
    let mut voxels = vec![0u8; n];
    for i in 0..n {
        if data[i] > threshold {
            voxels[i] = 2;
        }
        if data[n + i] > threshold {
            voxels[i] = 1;
        }
        if data[2 * n + i] > threshold {
            voxels[i] = 4;
        }
    }
    LabelVolume::new(dims, voxels, spacing)
}

/// Dice coefficient from voxel counts. Both masks empty scores 1, exactly
/// one empty scores 0.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(Error::shape(format!(
            "dice: mask dims differ, {:?} vs {:?}",
            pred.dims, gt.dims
        )));
    }
    let mut inter = 0u64;
    for (&a, &b) in pred.set.iter().zip(&gt.set) {
        inter += u64::from(a && b);
    }
    let (p, g) = (pred.count(), gt.count());
    match (p, g) {
        (0, 0) => Ok(1.0),
        (0, _) | (_, 0) => Ok(0.0),
        _ => Ok((2 * inter) as f64 / (p + g) as f64),
    }
}

/// Voxel coordinates on the mask's surface: mask voxels with at least one
/// 6-connected neighbor outside the mask. The volume boundary counts as
/// outside. Returned in ascending (d, h, w) scan order.
pub fn surface(mask: &Mask) -> Vec<[usize; 3]> {
    let [dd, hh, ww] = mask.dims;
    let mut out = Vec::new();
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                if !mask.at(d, h, w) {
                    continue;
                }
                let exposed = d == 0
                    || d == dd - 1
                    || h == 0
                    || h == hh - 1
                    || w == 0
                    || w == ww - 1
                    || !mask.at(d - 1, h, w)
                    || !mask.at(d + 1, h, w)
                    || !mask.at(d, h - 1, w)
                    || !mask.at(d, h + 1, w)
                    || !mask.at(d, h, w - 1)
                    || !mask.at(d, h, w + 1);
                if exposed {
                    out.push([d, h, w]);
                }
            }
        }
    }
    out
}

/// Linear-interpolation percentile of unsorted values, q in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::numeric("percentile: empty value set"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::config(format!("percentile: q {q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let rank = q * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        return Ok(v[lo]);
    }
    let frac = rank - lo as f64;
    Ok(v[lo] + (v[hi] - v[lo]) * frac)
}

/// Splits spacing into an overall scale (its largest component) and unit
/// ratios. Distances run in ratio space and the scale multiplies the final
/// percentile once, so scaling every component by the same factor scales
/// the result exactly (the ratios, and so every intermediate, are
/// unchanged).
fn spacing_factor(spacing: [f32; 3]) -> Result<(f64, [f64; 3])> {
    let s = spacing.map(f64::from);
    if s.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::config(format!("spacing must be positive and finite, got {spacing:?}")));
    }
    let g = s[0].max(s[1]).max(s[2]);
    Ok((g, [s[0] / g, s[1] / g, s[2] / g]))
}

fn surface_points(mask: &Mask, ratios: [f64; 3]) -> Vec<[f64; 3]> {
    surface(mask)
        .into_iter()
        .map(|[d, h, w]| {
            [d as f64 * ratios[0], h as f64 * ratios[1], w as f64 * ratios[2]]
        })
        .collect()
}

fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    d0 * d0 + d1 * d1 + d2 * d2
}

/// Median-split k-d tree over fixed points. Nodes are implicit: every
/// subtree owns a contiguous index range with its median at the midpoint,
/// split axis cycling with depth.
struct KdTree<'a> {
    pts: &'a [[f64; 3]],
    idx: Vec<u32>,
}

impl<'a> KdTree<'a> {
    fn build(pts: &'a [[f64; 3]]) -> KdTree<'a> {
        let mut idx: Vec<u32> = (0..pts.len() as u32).collect();
        fn split(pts: &[[f64; 3]], idx: &mut [u32], axis: usize) {
            if idx.len() <= 1 {
                return;
            }
            let mid = idx.len() / 2;
            idx.select_nth_unstable_by(mid, |&a, &b| {
                pts[a as usize][axis]
                    .partial_cmp(&pts[b as usize][axis])
                    .expect("finite coordinates")
            });
            let (lo, rest) = idx.split_at_mut(mid);
            split(pts, lo, (axis + 1) % 3);
            split(pts, &mut rest[1..], (axis + 1) % 3);
        }
        split(pts, &mut idx, 0);
        KdTree { pts, idx }
    }

    /// Squared distance from `q` to the nearest stored point.
    fn nearest_sq(&self, q: [f64; 3]) -> f64 {
        fn descend(tree: &KdTree, range: (usize, usize), axis: usize, q: [f64; 3], best: &mut f64) {
            let (lo, hi) = range;
            if lo >= hi {
                return;
            }
            let mid = lo + (hi - lo) / 2;
            let p = tree.pts[tree.idx[mid] as usize];
            *best = best.min(dist_sq(q, p));
            let diff = q[axis] - p[axis];
            let next = (axis + 1) % 3;
            let (near, far) = if diff < 0.0 {
                ((lo, mid), (mid + 1, hi))
            } else {
                ((mid + 1, hi), (lo, mid))
            };
            descend(tree, near, next, q, best);
            if diff * diff < *best {
                descend(tree, far, next, q, best);
            }
        }
        let mut best = f64::INFINITY;
        descend(self, (0, self.idx.len()), 0, q, &mut best);
        best
    }
}

fn directed_95(from: &[[f64; 3]], to_tree: &KdTree) -> Result<f64> {
    let dists: Vec<f64> = from.iter().map(|&p| to_tree.nearest_sq(p).sqrt()).collect();
    percentile(&dists, 0.95)
}

/// 95th-percentile Hausdorff distance between two masks, in the units of
/// `spacing`. Both masks empty scores 0; exactly one empty scores the
/// penalty constant.
pub fn hd95(pred: &Mask, gt: &Mask, spacing: [f32; 3]) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(Error::shape(format!(
            "hd95: mask dims differ, {:?} vs {:?}",
            pred.dims, gt.dims
        )));
    }
    let (scale, ratios) = spacing_factor(spacing)?;
    let sp = surface_points(pred, ratios);
    let sg = surface_points(gt, ratios);
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => Ok(0.0),
        (true, false) | (false, true) => Ok(EMPTY_SURFACE_PENALTY_MM),
        (false, false) => {
            let tp = KdTree::build(&sp);
            let tg = KdTree::build(&sg);
            Ok(scale * directed_95(&sp, &tg)?.max(directed_95(&sg, &tp)?))
        }
    }
}

/// All-pairs HD95 oracle: identical arithmetic with a linear-scan nearest
/// neighbor, so the fast path must match it bit for bit.
pub fn hd95_brute(pred: &Mask, gt: &Mask, spacing: [f32; 3]) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(Error::shape(format!(
            "hd95: mask dims differ, {:?} vs {:?}",
            pred.dims, gt.dims
        )));
    }
    let (scale, ratios) = spacing_factor(spacing)?;
    let sp = surface_points(pred, ratios);
    let sg = surface_points(gt, ratios);
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => Ok(0.0),
        (true, false) | (false, true) => Ok(EMPTY_SURFACE_PENALTY_MM),
        (false, false) => {
            let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| -> Result<f64> {
                let dists: Vec<f64> = from
                    .iter()
                    .map(|&a| {
                        to.iter()
                            .map(|&b| dist_sq(a, b))
                            .fold(f64::INFINITY, f64::min)
                            .sqrt()
                    })
                    .collect();
                percentile(&dists, 0.95)
            };
            Ok(scale * directed(&sp, &sg)?.max(directed(&sg, &sp)?))
        }
    }
}

/// Scores for one evaluation region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionScores {
    pub dice: f64,
    pub hd95: f64,
}

/// Per-region scores for one case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub wt: RegionScores,
    pub tc: RegionScores,
    pub et: RegionScores,
}

impl EvalReport {
    pub fn mean_dice(&self) -> f64 {
        (self.wt.dice + self.tc.dice + self.et.dice) / 3.0
    }

    pub fn mean_hd95(&self) -> f64 {
        (self.wt.hd95 + self.tc.hd95 + self.et.hd95) / 3.0
    }

    pub fn named(&self) -> [(&'static str, RegionScores); 3] {
        [("WT", self.wt), ("TC", self.tc), ("ET", self.et)]
    }
}

/// Evaluates a predicted label volume against ground truth.
pub fn evaluate_case(pred: &LabelVolume, gt: &LabelVolume) -> Result<EvalReport> {
    if pred.dims != gt.dims {
        return Err(Error::shape(format!(
            "evaluate_case: dims differ, {:?} vs {:?}",
            pred.dims, gt.dims
        )));
    }
    if pred.spacing != gt.spacing {
        return Err(Error::data(format!(
            "evaluate_case: spacing differs, {:?} vs {:?}",
            pred.spacing, gt.spacing
        )));
    }
    let pr = regions(pred)?;
    let gr = regions(gt)?;
    let score = |i: usize| -> Result<RegionScores> {
        Ok(RegionScores {
            dice: dice(&pr[i], &gr[i])?,
            hd95: hd95(&pr[i], &gr[i], gt.spacing)?,
        })
    };
    Ok(EvalReport { wt: score(0)?, tc: score(1)?, et: score(2)? })
}

/// Evaluates many cases in parallel, preserving input order.
pub fn evaluate_cases(pairs: &[(LabelVolume, LabelVolume)]) -> Result<Vec<EvalReport>> {
    pairs
        .par_iter()
        .map(|(pred, gt)| evaluate_case(pred, gt))
        .collect()
}
