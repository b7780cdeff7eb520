//! Pre-norm transformer blocks shared by both towers, plus the
//! value-to-value attention variant used on the visual side.

use crate::error::{Error, Result};
use crate::tensor::{self, dot, gelu_with, layer_norm, linear, GeluVariant, Tensor};
use crate::weights::WeightStore;

/// Borrowed parameters of one residual attention block.
#[derive(Clone, Copy, Debug)]
pub struct BlockWeights<'a> {
    pub ln1_weight: &'a Tensor,
    pub ln1_bias: &'a Tensor,
    pub qkv_weight: &'a Tensor,
    pub qkv_bias: &'a Tensor,
    pub out_weight: &'a Tensor,
    pub out_bias: &'a Tensor,
    pub ln2_weight: &'a Tensor,
    pub ln2_bias: &'a Tensor,
    pub fc1_weight: &'a Tensor,
    pub fc1_bias: &'a Tensor,
    pub fc2_weight: &'a Tensor,
    pub fc2_bias: &'a Tensor,
}

impl<'a> BlockWeights<'a> {
    pub fn from_store(store: &'a WeightStore, prefix: &str) -> Result<Self> {
        let g = |s: &str| store.get(&format!("{prefix}.{s}"));
        Ok(BlockWeights {
            ln1_weight: g("ln_1.weight")?,
            ln1_bias: g("ln_1.bias")?,
            qkv_weight: g("attn.qkv_weight")?,
            qkv_bias: g("attn.qkv_bias")?,
            out_weight: g("attn.out_weight")?,
            out_bias: g("attn.out_bias")?,
            ln2_weight: g("ln_2.weight")?,
            ln2_bias: g("ln_2.bias")?,
            fc1_weight: g("mlp.fc1_weight")?,
            fc1_bias: g("mlp.fc1_bias")?,
            fc2_weight: g("mlp.fc2_weight")?,
            fc2_bias: g("mlp.fc2_bias")?,
        })
    }

    pub fn width(&self) -> usize {
        self.out_weight.shape()[0]
    }
}

/// Hyperparameters a block needs at run time.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub heads: usize,
    pub eps: f32,
    pub gelu: GeluVariant,
    pub causal: bool,
}

fn check_heads(width: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "width {width} is not divisible by {heads} heads"
        )));
    }
    Ok(width / heads)
}

/// Scaled dot-product attention over `heads` column groups. With `causal`,
/// token `i` attends to tokens `0..=i` only.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, causal: bool) -> Result<Tensor> {
    let (t, width) = (q.rows(), q.cols());
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::Shape {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let hd = check_heads(width, heads)?;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0.0f32; t * width];
    let mut weights = vec![0.0f32; t];
    let mut qh = vec![0.0f32; hd];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..t {
            for (d, x) in qh.iter_mut().enumerate() {
                *x = q.row(i)[h * hd + d] * scale;
            }
            let keys = if causal { i + 1 } else { t };
            for (j, w) in weights[..keys].iter_mut().enumerate() {
                *w = dot(&qh, &k.row(j)[cols.clone()]);
            }
            tensor::softmax_inplace(&mut weights[..keys]);
            let o = &mut out[i * width + h * hd..i * width + (h + 1) * hd];
            for (j, &w) in weights[..keys].iter().enumerate() {
                for (od, vd) in o.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *od += w * vd;
                }
            }
        }
    }
    Tensor::new(q.shape().to_vec(), out)?.ensure_finite("attention")
}

/// Splits the fused projection of `LN(z)` into `(Q, K, V)`.
pub fn qkv_projection(z: &Tensor, w: &BlockWeights, eps: f32) -> Result<(Tensor, Tensor, Tensor)> {
    let width = w.width();
    let x = layer_norm(z, w.ln1_weight, w.ln1_bias, eps)?;
    let qkv = linear(&x, w.qkv_weight, Some(w.qkv_bias))?;
    Ok((
        qkv.slice_cols(0, width)?,
        qkv.slice_cols(width, 2 * width)?,
        qkv.slice_cols(2 * width, 3 * width)?,
    ))
}

/// The value part of [`qkv_projection`] alone.
pub fn value_projection(z: &Tensor, w: &BlockWeights, eps: f32) -> Result<Tensor> {
    let width = w.width();
    let x = layer_norm(z, w.ln1_weight, w.ln1_bias, eps)?;
    let wv = w.qkv_weight.slice_rows(2 * width, 3 * width)?;
    let bv = Tensor::vector(w.qkv_bias.data()[2 * width..3 * width].to_vec())?;
    linear(&x, &wv, Some(&bv))
}

/// One standard block: attention with residual, then MLP with residual.
pub fn qkv_block(z: &Tensor, w: &BlockWeights, p: BlockParams) -> Result<Tensor> {
    let width = z.cols();
    if width != w.width() {
        return Err(Error::Shape {
            op: "qkv_block",
            lhs: z.shape().to_vec(),
            rhs: w.out_weight.shape().to_vec(),
        });
    }
    check_heads(width, p.heads)?;
    let (q, k, v) = qkv_projection(z, w, p.eps)?;
    let attn = multi_head_attention(&q, &k, &v, p.heads, p.causal)?;
    let mut z1 = linear(&attn, w.out_weight, Some(w.out_bias))?;
    tensor::add_inplace(&mut z1, z)?;
    let h = layer_norm(&z1, w.ln2_weight, w.ln2_bias, p.eps)?;
    let h = gelu_with(&linear(&h, w.fc1_weight, Some(w.fc1_bias))?, p.gelu)?;
    let mut out = linear(&h, w.fc2_weight, Some(w.fc2_bias))?;
    tensor::add_inplace(&mut out, &z1)?;
    out.ensure_finite("qkv_block")
}

/// Output projection of attention where the input is its own query, key
/// and value. No residual, no MLP.
pub fn vv_attention(x: &Tensor, w: &BlockWeights, heads: usize) -> Result<Tensor> {
    if x.cols() != w.width() {
        return Err(Error::Shape {
            op: "vv_attention",
            lhs: x.shape().to_vec(),
            rhs: w.out_weight.shape().to_vec(),
        });
    }
    let attn = multi_head_attention(x, x, x, heads, false)?;
    linear(&attn, w.out_weight, Some(w.out_bias))
}

/// `vv_attention(x) + x`.
pub fn vv_block(x: &Tensor, w: &BlockWeights, heads: usize) -> Result<Tensor> {
    let mut y = vv_attention(x, w, heads)?;
    tensor::add_inplace(&mut y, x)?;
    y.ensure_finite("vv_block")
}


#[cfg(test)]
mod tests {
    use super::test_support::OwnedBlock;
    use super::*;
    use crate::rng::XorShift64Star;

    const P: BlockParams = BlockParams {
        heads: 2,
        eps: 1e-5,
        gelu: GeluVariant::Erf,
        causal: false,
    };

    fn random_tokens(t: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = XorShift64Star::new(seed);
        Tensor::matrix(t, w, (0..t * w).map(|_| rng.uniform_pm1()).collect()).unwrap()
    }

    /// Straight-line f64 evaluation of a pre-norm block.
    fn reference_block(z: &Tensor, b: &OwnedBlock, heads: usize, causal: bool) -> Vec<f64> {
        let t = &b.tensors;
        let (n, w) = (z.rows(), z.cols());
        let f = |x: &Tensor| x.data().iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let (ln1w, ln1b, qkvw, qkvb, ow, ob, ln2w, ln2b, f1w, f1b, f2w, f2b) = (
            f(&t[0]), f(&t[1]), f(&t[2]), f(&t[3]), f(&t[4]), f(&t[5]), f(&t[6]), f(&t[7]), f(&t[8]), f(&t[9]),
            f(&t[10]), f(&t[11]),
        );
        let hdim = f1b.len();
        let ln = |x: &[f64], g: &[f64], bb: &[f64]| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
            x.iter().zip(g).zip(bb).map(|((v, g), b)| (v - m) / (var + 1e-5).sqrt() * g + b).collect()
        };
        let zf = f(z);
        let mut q = vec![vec![0.0; w]; n];
        let mut k = vec![vec![0.0; w]; n];
        let mut v = vec![vec![0.0; w]; n];
        for i in 0..n {
            let x = ln(&zf[i * w..(i + 1) * w], &ln1w, &ln1b);
            for o in 0..3 * w {
                let mut s = qkvb[o];
                for c in 0..w {
                    s += qkvw[o * w + c] * x[c];
                }
                match o / w {
                    0 => q[i][o] = s,
                    1 => k[i][o - w] = s,
                    _ => v[i][o - 2 * w] = s,
                }
            }
        }
        let hd = w / heads;
        let mut attn = vec![vec![0.0; w]; n];
        for h in 0..heads {
            for i in 0..n {
                let lim = if causal { i + 1 } else { n };
                let logits: Vec<f64> = (0..lim)
                    .map(|j| (0..hd).map(|d| q[i][h * hd + d] * k[j][h * hd + d]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                for j in 0..lim {
                    for d in 0..hd {
                        attn[i][h * hd + d] += e[j] / s * v[j][h * hd + d];
                    }
                }
            }
        }
        let mut out = Vec::new();
        for i in 0..n {
            let z1: Vec<f64> = (0..w)
                .map(|o| ob[o] + (0..w).map(|c| ow[o * w + c] * attn[i][c]).sum::<f64>() + zf[i * w + o])
                .collect();
            let x = ln(&z1, &ln2w, &ln2b);
            let hid: Vec<f64> = (0..hdim)
                .map(|o| {
                    let a = f1b[o] + (0..w).map(|c| f1w[o * w + c] * x[c]).sum::<f64>();
                    0.5 * a * (1.0 + libm::erf(a / std::f64::consts::SQRT_2))
                })
                .collect();
            for o in 0..w {
                out.push(f2b[o] + (0..hdim).map(|c| f2w[o * hdim + c] * hid[c]).sum::<f64>() + z1[o]);
            }
        }
        out
    }

    #[test]
    fn zero_weights_are_identity() {
        let b = OwnedBlock::zero(8, 4);
        let z = random_tokens(5, 8, 1);
        assert_eq!(qkv_block(&z, &b.weights(), P).unwrap(), z);
        assert_eq!(vv_block(&z, &b.weights(), 2).unwrap(), z);
    }

    #[test]
    fn matches_reference_block() {
        for (seed, causal) in [(3, false), (4, true)] {
            let b = OwnedBlock::random(8, 4, seed, 0.5);
            let z = random_tokens(6, 8, seed + 10);
            let got = qkv_block(&z, &b.weights(), BlockParams { causal, ..P }).unwrap();
            let want = reference_block(&z, &b, 2, causal);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-5 * w.abs().max(1.0), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn single_token_attention_is_value() {
        // One key: softmax weight 1, attention output equals V exactly.
        let b = OwnedBlock::random(8, 4, 9, 0.5);
        let z = random_tokens(1, 8, 2);
        let (q, k, v) = qkv_projection(&z, &b.weights(), 1e-5).unwrap();
        assert_eq!(multi_head_attention(&q, &k, &v, 2, false).unwrap(), v);
    }

    #[test]
    fn vv_single_token_identity_projection_doubles() {
        let mut b = OwnedBlock::zero(4, 1);
        b.tensors[4] = Tensor::identity(4);
        let x = random_tokens(1, 4, 5);
        let y = vv_block(&x, &b.weights(), 2).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn vv_block_is_permutation_equivariant() {
        let b = OwnedBlock::random(8, 1, 11, 0.5);
        let x = random_tokens(5, 8, 12);
        let perm = [3usize, 0, 4, 1, 2];
        let mut px = Vec::new();
        for &p in &perm {
            px.extend_from_slice(x.row(p));
        }
        let px = Tensor::matrix(5, 8, px).unwrap();
        let y = vv_block(&x, &b.weights(), 2).unwrap();
        let py = vv_block(&px, &b.weights(), 2).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, c) in py.row(i).iter().zip(y.row(p)) {
                assert!((a - c).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn head_mismatch_is_config_error() {
        let b = OwnedBlock::zero(8, 1);
        let z = random_tokens(2, 8, 1);
        let p = BlockParams { heads: 3, ..P };
        assert!(matches!(qkv_block(&z, &b.weights(), p), Err(Error::Config(_))));
    }
}
