use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{linear, Dense, Tensor};

/// Channel-attention fusion of a skip branch `x1` with a decoder branch `x2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkFusionParams {
    /// Projects the skip branch onto the decoder's channels.
    pub proj: Dense,
    /// `c → c/r`, followed by ReLU.
    pub squeeze: Dense,
    /// `c/r → 2c`: one logit per branch and channel.
    pub expand: Dense,
}

impl SkFusionParams {
    pub fn channels(&self) -> usize {
        self.proj.cout
    }

    fn check(&self) -> Result<()> {
        let c = self.proj.cout;
        if self.squeeze.cin != c || self.expand.cin != self.squeeze.cout || self.expand.cout != 2 * c {
            return Err(Error::shape("SK fusion layers do not chain"));
        }
        Ok(())
    }
}

/// Per-sample, per-channel branch weights `(a1, a2)`, row-major `b×c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub a1: Vec<f32>,
    pub a2: Vec<f32>,
}

fn global_mean(x: &Tensor) -> Vec<Vec<f64>> {
    let [b, h, w, c] = x.shape();
    (0..b)
        .map(|bi| {
            let sample = &x.data()[bi * h * w * c..(bi + 1) * h * w * c];
            let mut acc = vec![0.0f64; c];
            for px in sample.chunks_exact(c) {
                for (a, &v) in acc.iter_mut().zip(px) {
                    *a += v as f64;
                }
            }
            let n = (h * w) as f64;
            acc.into_iter().map(|s| s / n).collect()
        })
        .collect()
}

/// Branch weights from the squeeze MLP on `GAP(x̂1 + x2)`.
pub fn fusion_weights(x1_proj: &Tensor, x2: &Tensor, p: &SkFusionParams) -> Result<FusionWeights> {
    let c = p.channels();
    let summed = x1_proj.add(x2)?;
    let mut a1 = Vec::new();
    let mut a2 = Vec::new();
    for pooled in global_mean(&summed) {
        let pooled: Vec<f32> = pooled.into_iter().map(|v| v as f32).collect();
        let mut hidden = vec![0.0f32; p.squeeze.cout];
        p.squeeze.apply_token(&pooled, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut logits = vec![0.0f32; 2 * c];
        p.expand.apply_token(&hidden, &mut logits);
        for ch in 0..c {
            let mut pair = [logits[ch], logits[c + ch]];
            crate::tensor::softmax_in_place(&mut pair);
            a1.push(pair[0]);
            a2.push(pair[1]);
        }
    }
    Ok(FusionWeights { a1, a2 })
}

/// `y = a1·f(x1) + a2·x2 + x2`.
pub fn sk_fusion(x1: &Tensor, x2: &Tensor, p: &SkFusionParams) -> Result<Tensor> {
    p.check()?;
    let [b, h, w, c] = x2.shape();
    if (x1.batch(), x1.height(), x1.width()) != (b, h, w) {
        return Err(Error::shape(format!(
            "fusion branches differ spatially: {:?} vs {:?}",
            x1.shape(),
            x2.shape()
        )));
    }
    if c != p.channels() {
        return Err(Error::shape(format!(
            "fusion expects {} decoder channels, got {c}",
            p.channels()
        )));
    }
    let x1p = linear(x1, &p.proj)?;
    let weights = fusion_weights(&x1p, x2, p)?;
    let mut out = x2.clone();
    out.data_mut()
        .par_chunks_mut(h * w * c)
        .zip(x1p.data().par_chunks(h * w * c))
        .enumerate()
        .for_each(|(bi, (o, s))| {
            let a1 = &weights.a1[bi * c..(bi + 1) * c];
            let a2 = &weights.a2[bi * c..(bi + 1) * c];
            for (op, sp) in o.chunks_exact_mut(c).zip(s.chunks_exact(c)) {
                for ch in 0..c {
                    let x2v = op[ch];
                    op[ch] = a1[ch] * sp[ch] + a2[ch] * x2v + x2v;
                }
            }
        });
    Ok(out)
}

/// `J = K ⊙ I + B + I`, with `O = [K | B]` split as one channel plus three.
pub fn soft_reconstruct(o: &Tensor, image: &Tensor) -> Result<Tensor> {
    if o.channels() != 4 {
        return Err(Error::shape(format!("output head has {} channels, expected 4", o.channels())));
    }
    if image.channels() != 3 {
        return Err(Error::shape("soft reconstruction expects a 3-channel image"));
    }
    if (o.batch(), o.height(), o.width()) != (image.batch(), image.height(), image.width()) {
        return Err(Error::shape(format!(
            "head output {:?} does not match image {:?}",
            o.shape(),
            image.shape()
        )));
    }
    let mut out = image.clone();
    out.data_mut()
        .par_chunks_mut(3)
        .zip(o.data().par_chunks(4))
        .for_each(|(px, kb)| {
            for ch in 0..3 {
                px[ch] = kb[0] * px[ch] + kb[1 + ch] + px[ch];
            }
        });
    Ok(out)
}

/// Rearranges `4c` channels into a 2× larger map with `c` channels.
pub fn pixel_shuffle2(x: &Tensor) -> Result<Tensor> {
    let [b, h, w, c4] = x.shape();
    if c4 % 4 != 0 {
        return Err(Error::shape(format!("{c4} channels cannot be shuffled by 2")));
    }
    let c = c4 / 4;
    Ok(Tensor::from_fn([b, 2 * h, 2 * w, c], |[bi, y, xx, ch]| {
        let (i, j) = (y % 2, xx % 2);
        x.get(bi, y / 2, xx / 2, ch * 4 + i * 2 + j)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(c: usize, r: usize) -> SkFusionParams {
        SkFusionParams {
            proj: Dense::identity(c),
            squeeze: Dense::zeros(c, c / r),
            expand: Dense::zeros(c / r, 2 * c),
        }
    }

    #[test]
    fn equal_logits_split_evenly() {
        let x1 = Tensor::from_fn([1, 2, 3, 8], |[_, y, x, c]| (y + x * 2 + c) as f32 * 0.1);
        let x2 = Tensor::from_fn([1, 2, 3, 8], |[_, y, x, c]| (y * 3 + x + c) as f32 * -0.05);
        let y = sk_fusion(&x1, &x2, &params(8, 4)).unwrap();
        let expected = x1.zip_map(&x2, |a, b| 0.5 * a + 1.5 * b).unwrap();
        assert!(y.max_abs_diff(&expected) < 1e-6);
    }

    #[test]
    fn zero_inputs_fuse_to_zero() {
        let z = Tensor::zeros([2, 2, 2, 8]);
        let y = sk_fusion(&z, &z, &params(8, 4)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_mismatch_rejected() {
        let a = Tensor::zeros([1, 2, 2, 8]);
        let b = Tensor::zeros([1, 2, 4, 8]);
        assert!(matches!(sk_fusion(&a, &b, &params(8, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn soft_reconstruction_cases() {
        let image = Tensor::full([1, 2, 2, 3], 0.3);
        let zero = Tensor::zeros([1, 2, 2, 4]);
        assert_eq!(soft_reconstruct(&zero, &image).unwrap(), image);

        let residual = Tensor::from_fn([1, 2, 2, 4], |[_, y, x, c]| if c == 0 { 0.0 } else { (y + x + c) as f32 * 0.01 });
        let j = soft_reconstruct(&residual, &image).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    assert_eq!(j.get(0, y, x, c), image.get(0, y, x, c) + residual.get(0, y, x, c + 1));
                }
            }
        }

        let k_one = Tensor::from_fn([1, 2, 2, 4], |[.., c]| if c == 0 { 1.0 } else { 0.0 });
        let j = soft_reconstruct(&k_one, &image).unwrap();
        assert!(j.data().iter().all(|&v| (v - 0.6).abs() < 1e-7));

        assert!(soft_reconstruct(&Tensor::zeros([1, 2, 2, 3]), &image).is_err());
    }

    #[test]
    fn shuffle_places_channels() {
        let x = Tensor::new([1, 1, 1, 8], (0..8).map(|v| v as f32).collect()).unwrap();
        let y = pixel_shuffle2(&x).unwrap();
        assert_eq!(y.shape(), [1, 2, 2, 2]);
        // channel 0 takes inputs 0..4 in raster order
        assert_eq!(
            [y.get(0, 0, 0, 0), y.get(0, 0, 1, 0), y.get(0, 1, 0, 0), y.get(0, 1, 1, 0)],
            [0.0, 1.0, 2.0, 3.0]
        );
        assert_eq!(y.get(0, 1, 1, 1), 7.0);
    }
}
