//! Two-way softmax scoring of class and patch tokens, and map upsampling.

use crate::error::{Error, Result};
use crate::prompts::TextTokenPair;
use crate::tensor::{dot, Tensor};

/// Per-pixel anomaly probabilities at the query image's original size.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    /// `[H, W]`, values in `[0, 1]`.
    pub scores: Tensor,
    /// Patch grid the map was upsampled from, `(rows, cols)`.
    pub grid: (usize, usize),
}

impl AnomalyMap {
    pub fn height(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.scores.shape()[1]
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `exp(τ a⁻) / (exp(τ a⁺) + exp(τ a⁻))` for cosines `a⁺`, `a⁻`.
pub fn two_way(cos_plus: f32, cos_minus: f32, tau: f32) -> f32 {
    sigmoid(tau * (cos_minus - cos_plus))
}

/// Image-level anomaly probability from the class token.
pub fn score_image(v: &Tensor, pair: &TextTokenPair, tau: f32) -> f32 {
    two_way(dot(v.data(), pair.t_plus.data()), dot(v.data(), pair.t_minus.data()), tau)
}

/// Patch-level anomaly probabilities; rows of `patches` are used as given.
pub fn score_patches(patches: &Tensor, pair: &TextTokenPair, tau: f32) -> Vec<f32> {
    score_rows(patches, pair, tau, false)
}

/// Like [`score_patches`] but L2-normalizes each row first, for tokens that
/// are not unit length (adapter outputs).
pub fn score_patches_normalized(patches: &Tensor, pair: &TextTokenPair, tau: f32) -> Result<Vec<f32>> {
    if let Some(i) = (0..patches.rows()).find(|&i| dot(patches.row(i), patches.row(i)).sqrt() < 1e-12) {
        return Err(Error::ZeroNorm { op: "score_patches_normalized", row: i });
    }
    Ok(score_rows(patches, pair, tau, true))
}

fn score_rows(patches: &Tensor, pair: &TextTokenPair, tau: f32, normalize: bool) -> Vec<f32> {
    let (tp, tm) = (pair.t_plus.data(), pair.t_minus.data());
    (0..patches.rows())
        .map(|i| {
            let p = patches.row(i);
            let n = if normalize { dot(p, p).sqrt() } else { 1.0 };
            two_way(dot(p, tp) / n, dot(p, tm) / n, tau)
        })
        .collect()
}

/// Reshapes patch scores onto the grid, upsamples bilinearly with corner
/// alignment to `out_size`, optionally blurs, and clamps to `[0, 1]`.
pub fn build_map(patch_scores: &[f32], grid: (usize, usize), out_size: (usize, usize), smooth_sigma: f32) -> Result<AnomalyMap> {
    let (gr, gc) = grid;
    let (h, w) = out_size;
    if gr * gc != patch_scores.len() || gr == 0 || gc == 0 {
        return Err(Error::Shape {
            op: "build_map",
            lhs: vec![patch_scores.len()],
            rhs: vec![gr, gc],
        });
    }
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape {
            shape: vec![h, w],
            reason: "map size must be positive".into(),
        });
    }
    let axis = |out: usize, n: usize, i: usize| -> (usize, usize, f32) {
        if out == 1 || n == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n - 1) as f64 / (out - 1) as f64;
        let lo = (pos.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let cols: Vec<_> = (0..w).map(|x| axis(w, gc, x)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = axis(h, gr, y);
        for &(x0, x1, fx) in &cols {
            let s = |r: usize, c: usize| patch_scores[r * gc + c];
            let top = s(y0, x0) + (s(y0, x1) - s(y0, x0)) * fx;
            let bot = s(y1, x0) + (s(y1, x1) - s(y1, x0)) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    if smooth_sigma > 0.0 {
        out = gaussian_blur(&out, h, w, smooth_sigma);
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(AnomalyMap {
        scores: Tensor::matrix(h, w, out)?,
        grid,
    })
}

/// Separable Gaussian blur, kernel truncated at 4σ, borders clamped.
fn gaussian_blur(src: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let pass = |src: &[f32], len: usize, at: &dyn Fn(usize, usize) -> usize, lines: usize| {
        let mut dst = vec![0.0f32; src.len()];
        for line in 0..lines {
            for i in 0..len {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let j = (i as isize + k as isize - radius).clamp(0, len as isize - 1) as usize;
                    acc += wgt * src[at(line, j)];
                }
                dst[at(line, i)] = acc;
            }
        }
        dst
    };
    let horiz = pass(src, w, &|r, c| r * w + c, h);
    pass(&horiz, h, &|c, r| r * w + c, w)
}
