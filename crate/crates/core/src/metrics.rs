//! Detection and segmentation metrics.
//!
//! Every metric returns `None` when it is undefined for the input (a class
//! is missing, or a mask has no region); callers report that as null.

use std::cmp::Ordering;
use std::collections::VecDeque;

use serde::Serialize;

/// Above this many points `f1max` evaluates quantile thresholds only.
pub const EXACT_SWEEP_LIMIT: usize = 1_000_000;
pub const QUANTILE_THRESHOLDS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    Exact,
    Quantile,
}

fn desc(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Area under the ROC curve via the rank-sum statistic; ties count half.
pub fn auroc(scores: &[f32], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `(predicted positives, true positives)` at each distinct threshold of a
/// descending sweep, i.e. after each group of tied scores.
fn sweep(scores: &[f32], labels: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let order = desc(scores);
    let (mut cut, mut tp) = (Vec::new(), Vec::new());
    let mut hits = 0;
    for (k, &i) in order.iter().enumerate() {
        hits += labels[i] as usize;
        if k + 1 == order.len() || scores[order[k + 1]] != scores[i] {
            cut.push(k + 1);
            tp.push(hits);
        }
    }
    (cut, tp)
}

/// Maximum F1 over thresholds.
pub fn f1max(scores: &[f32], labels: &[bool]) -> Option<f64> {
    f1max_with_mode(scores, labels).0
}

pub fn f1max_with_mode(scores: &[f32], labels: &[bool]) -> (Option<f64>, SweepMode) {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l).count();
    let mode = if scores.len() > EXACT_SWEEP_LIMIT {
        SweepMode::Quantile
    } else {
        SweepMode::Exact
    };
    if pos == 0 {
        return (None, mode);
    }
    let (cut, tp) = sweep(scores, labels);
    let f1 = |g: usize| 2.0 * tp[g] as f64 / (cut[g] + pos) as f64;
    let best = match mode {
        SweepMode::Exact => (0..cut.len()).map(f1).fold(0.0, f64::max),
        SweepMode::Quantile => {
            let n = scores.len();
            (1..=QUANTILE_THRESHOLDS)
                .map(|q| {
                    // Smallest group whose cut covers the quantile position.
                    let at = (q * n).div_ceil(QUANTILE_THRESHOLDS);
                    f1(cut.partition_point(|&c| c < at))
                })
                .fold(0.0, f64::max)
        }
    };
    (Some(best), mode)
}

/// Average precision: `Σ (R_k − R_{k−1}) P_k` over the descending sweep.
pub fn aupr(scores: &[f32], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let (cut, tp) = sweep(scores, labels);
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (&c, &t) in cut.iter().zip(&tp) {
        ap += (t - prev_tp) as f64 / pos as f64 * (t as f64 / c as f64);
        prev_tp = t;
    }
    Some(ap)
}

/// 8-connected component labels of a binary mask: `0` is background,
/// components are numbered from 1 in raster order of their first pixel.
pub fn components(mask: &[bool], height: usize, width: usize) -> (Vec<u32>, usize) {
    assert_eq!(mask.len(), height * width, "mask size");
    let mut label = vec![0u32; mask.len()];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        count += 1;
        label[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (y, x) = ((i / width) as isize, (i % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if mask[j] && label[j] == 0 {
                        label[j] = count;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    (label, count as usize)
}

/// One image's score map and ground-truth mask, both row-major `[H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct MaskedMap<'a> {
    pub scores: &'a [f32],
    pub mask: &'a [bool],
    pub height: usize,
    pub width: usize,
}

/// Per-region overlap of a single map. See [`pro_multi`].
pub fn pro(scores: &[f32], mask: &[bool], height: usize, width: usize, fpr_limit: f64) -> Option<f64> {
    pro_multi(
        &[MaskedMap {
            scores,
            mask,
            height,
            width,
        }],
        fpr_limit,
    )
}

/// Per-region overlap over a set of images.
///
/// Regions are the 8-connected components of every mask. Thresholds sweep
/// the distinct scores downward; at each one the mean fraction of every
/// region's pixels predicted positive is paired with the false-positive
/// rate over all background pixels. The curve (without an added origin)
/// is integrated by the trapezoid rule up to `fpr_limit`, interpolating at
/// the limit, and divided by `fpr_limit`.
pub fn pro_multi(maps: &[MaskedMap<'_>], fpr_limit: f64) -> Option<f64> {
    assert!(fpr_limit > 0.0 && fpr_limit <= 1.0, "fpr_limit in (0, 1]");
    // Each pixel's region index, or usize::MAX for background.
    let mut scores = Vec::new();
    let mut region = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for m in maps {
        assert_eq!(m.scores.len(), m.height * m.width, "score map size");
        let (labels, count) = components(m.mask, m.height, m.width);
        let base = sizes.len();
        sizes.resize(base + count, 0);
        for (&s, &l) in m.scores.iter().zip(&labels) {
            scores.push(s);
            region.push(if l == 0 {
                usize::MAX
            } else {
                sizes[base + l as usize - 1] += 1;
                base + l as usize - 1
            });
        }
    }
    let negatives = region.iter().filter(|&&r| r == usize::MAX).count();
    if sizes.is_empty() || negatives == 0 {
        return None;
    }
    let order = desc(&scores);
    let k = sizes.len() as f64;
    let (mut fp, mut overlap_sum) = (0usize, 0.0f64);
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for (n, &i) in order.iter().enumerate() {
        match region[i] {
            usize::MAX => fp += 1,
            r => overlap_sum += 1.0 / sizes[r] as f64,
        }
        if n + 1 == order.len() || scores[order[n + 1]] != scores[i] {
            let fpr = fp as f64 / negatives as f64;
            curve.push((fpr, overlap_sum / k));
            if fpr > fpr_limit {
                break;
            }
        }
    }
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= fpr_limit {
            break;
        }
        if x1 > fpr_limit {
            let y = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0);
            area += (fpr_limit - x0) * (y0 + y) / 2.0;
            break;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Some(area / fpr_limit)
}
