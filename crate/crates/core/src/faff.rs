//! Forgery-aware feature fusion.
//!
//! Semantic tokens query self-supervised tokens through multi-head
//! cross-attention whose logits carry an additive bias derived from the
//! self-supervised branch's own attention maps:
//!
//! ```text
//! B   = MLP(log(max(M, 1e-8)))            MLP mixes the head channel at each (q, k)
//! A_h = softmax(Q_h K_h^T / sqrt(d/H) + B_h)   Q = F_C, K = V = F_D, split into H slices
//! F'  = LN(concat_h(A_h V_h) + F_C)
//! F   = LN(FFN(F') + F')
//! ```
//!
//! There are no query/key/value projections; the adapters upstream are the
//! learned projections.

use crate::nn::{impl_parameters, merge_heads, split_heads, LayerNorm, Linear, Mlp};
use crate::rng::SplitMix64;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct FusionParams<T: Scalar> {
    /// Acts on the head axis: `H -> H_hidden -> H`. `None` disables the bias.
    pub bias_mlp: Option<Mlp<T>>,
    pub ffn: Mlp<T>,
    pub norm_attn: LayerNorm<T>,
    pub norm_ffn: LayerNorm<T>,
    heads: usize,
}
impl_parameters!(FusionParams {
    bias_mlp,
    ffn,
    norm_attn,
    norm_ffn
});

impl<T: Scalar> FusionParams<T> {
    /// `bias_hidden` is the bias MLP width (typically `4 * heads`). The bias
    /// MLP's output layer starts at zero, so an untrained block is plain
    /// cross-attention.
    pub fn new(d: usize, heads: usize, bias_hidden: Option<usize>, rng: &mut SplitMix64) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "d must be divisible by heads");
        let bias_mlp = bias_hidden.map(|hidden| {
            let mut mlp = Mlp::new(heads, hidden, heads, true, rng);
            // A per-head output bias shifts whole softmax rows; leave it out.
            mlp.fc2 = Linear::zeros(hidden, heads, true).without_bias();
            mlp
        });
        Self {
            bias_mlp,
            ffn: Mlp::new(d, 4 * d, d, true, rng),
            norm_attn: LayerNorm::new(d, true),
            norm_ffn: LayerNorm::new(d, true),
            heads,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn has_bias(&self) -> bool {
        self.bias_mlp.is_some()
    }

    /// `B = MLP(log_clamped(M))`, with `M: [n, H, L, L]`.
    pub fn compute_bias(&self, maps: &Tensor<T>) -> Result<Tensor<T>> {
        let mlp = self.bias_mlp.as_ref().ok_or_else(|| TensorError::Domain {
            op: "compute_bias",
            detail: "fusion block was built without a bias MLP".into(),
        })?;
        if maps.rank() != 4 || maps.shape()[1] != self.heads {
            return Err(TensorError::Shape {
                op: "compute_bias",
                lhs: maps.shape().to_vec(),
                rhs: vec![self.heads],
            });
        }
        let logs = maps.log_clamped()?;
        let channels_last = logs.permute(&[0, 2, 3, 1])?;
        mlp.forward(&channels_last)?.permute(&[0, 3, 1, 2])
    }

    /// Fused tokens `[n, L, d]`.
    pub fn fuse(&self, clip: &Tensor<T>, dino: &Tensor<T>, maps: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.fuse_with_attention(clip, dino, maps).map(|(f, _)| f)
    }

    /// Like [`FusionParams::fuse`], also returning the attention `[n, H, L, L]`.
    /// `maps` is required when the block has a bias MLP and ignored otherwise.
    pub fn fuse_with_attention(
        &self,
        clip: &Tensor<T>,
        dino: &Tensor<T>,
        maps: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if clip.rank() != 3 || clip.shape() != dino.shape() || !clip.shape()[2].is_multiple_of(self.heads) {
            return Err(TensorError::Shape {
                op: "fuse",
                lhs: clip.shape().to_vec(),
                rhs: dino.shape().to_vec(),
            });
        }
        let dh = clip.shape()[2] / self.heads;
        let q = split_heads(clip, self.heads)?;
        let kv = split_heads(dino, self.heads)?;
        let mut logits = q.matmul(&kv.transpose_last()?)?.scale(T::of(1.0 / (dh as f64).sqrt()));
        if self.has_bias() {
            let maps = maps.ok_or_else(|| TensorError::Domain {
                op: "fuse",
                detail: "attention maps required for the bias path".into(),
            })?;
            logits = logits.add(&self.compute_bias(maps)?)?;
        }
        let attn = logits.softmax_rows()?;
        let mixed = merge_heads(&attn.matmul(&kv)?)?;
        let f1 = self.norm_attn.forward(&mixed.add(clip)?)?;
        let f2 = self.norm_ffn.forward(&self.ffn.forward(&f1)?.add(&f1)?)?;
        Ok((f2, attn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{normal_tensor, Parameters};
    use crate::tensor::grad_check;

    fn rand(shape: Vec<usize>, rng: &mut SplitMix64) -> Tensor<f64> {
        normal_tensor(shape, 1.0, false, rng)
    }

    fn rand_maps(n: usize, h: usize, l: usize, rng: &mut SplitMix64) -> Tensor<f64> {
        rand(vec![n, h, l, l], rng).scale(2.0).softmax_rows().unwrap()
    }

    fn ln_rows(x: &[f64], gain: &[f64], shift: &[f64]) -> Vec<f64> {
        let d = gain.len();
        x.chunks(d)
            .flat_map(|r| {
                let m = r.iter().sum::<f64>() / d as f64;
                let v = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d as f64;
                (0..d).map(move |j| gain[j] * (r[j] - m) / (v + 1e-5).sqrt() + shift[j])
            })
            .collect()
    }

    fn mlp_rows(x: &[f64], mlp: &Mlp<f64>) -> Vec<f64> {
        let gelu = |x: f64| 0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x.powi(3))).tanh());
        let lin = |x: &[f64], l: &Linear<f64>| -> Vec<f64> {
            let (i, o) = (l.input_dim(), l.output_dim());
            x.chunks(i)
                .flat_map(|r| {
                    (0..o).map(move |j| {
                        (0..i).map(|k| r[k] * l.weight.data()[k * o + j]).sum::<f64>()
                            + l.bias.as_ref().map_or(0.0, |b| b.data()[j])
                    })
                })
                .collect()
        };
        let h: Vec<f64> = lin(x, &mlp.fc1).into_iter().map(gelu).collect();
        lin(&h, &mlp.fc2)
    }

    /// Plain multi-head cross-attention (no bias), written with loops.
    fn reference_fuse(p: &FusionParams<f64>, fc: &[f64], fd: &[f64], n: usize, l: usize, d: usize) -> Vec<f64> {
        let h = p.heads();
        let dh = d / h;
        let mut mixed = vec![0.0; n * l * d];
        for b in 0..n {
            for head in 0..h {
                for qi in 0..l {
                    let logits: Vec<f64> = (0..l)
                        .map(|ki| {
                            (0..dh)
                                .map(|j| fc[(b * l + qi) * d + head * dh + j] * fd[(b * l + ki) * d + head * dh + j])
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
                    for ki in 0..l {
                        let a = (logits[ki] - mx).exp() / z;
                        for j in 0..dh {
                            mixed[(b * l + qi) * d + head * dh + j] += a * fd[(b * l + ki) * d + head * dh + j];
                        }
                    }
                }
            }
        }
        let res: Vec<f64> = mixed.iter().zip(fc).map(|(a, b)| a + b).collect();
        let f1 = ln_rows(&res, p.norm_attn.gain.data(), p.norm_attn.shift.data());
        let ff: Vec<f64> = mlp_rows(&f1, &p.ffn).iter().zip(&f1).map(|(a, b)| a + b).collect();
        ln_rows(&ff, p.norm_ffn.gain.data(), p.norm_ffn.shift.data())
    }

    #[test]
    fn zero_output_layer_gives_zero_bias() {
        let mut rng = SplitMix64::new(1);
        let p = FusionParams::<f64>::new(8, 2, Some(8), &mut rng);
        let maps = rand_maps(2, 2, 3, &mut rng);
        let b = p.compute_bias(&maps).unwrap();
        assert_eq!(b.shape(), maps.shape());
        assert!(b.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_entries_in_maps_stay_finite_and_negative_is_rejected() {
        let mut rng = SplitMix64::new(2);
        let mut p = FusionParams::<f64>::new(4, 2, Some(8), &mut rng);
        p.bias_mlp.as_mut().unwrap().fc2 = Linear::new(8, 2, 1.0, true, &mut rng);
        let maps = Tensor::<f64>::new(vec![1, 2, 2, 2], vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0, 0.3, 0.7]).unwrap();
        assert!(p.compute_bias(&maps).unwrap().data().iter().all(|v| v.is_finite()));
        let neg = Tensor::<f64>::new(vec![1, 2, 1, 1], vec![-0.1, 1.0]).unwrap();
        assert!(matches!(p.compute_bias(&neg), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn single_key_attention_reduces_to_residual_sum() {
        let mut rng = SplitMix64::new(3);
        let p = FusionParams::<f64>::new(4, 1, None, &mut rng);
        let fc = rand(vec![1, 1, 4], &mut rng);
        let fd = rand(vec![1, 1, 4], &mut rng);
        let (out, attn) = p.fuse_with_attention(&fc, &fd, None).unwrap();
        assert_eq!(attn.data(), &[1.0]);
        let f1 = p.norm_attn.forward(&fd.add(&fc).unwrap()).unwrap();
        let expected = p
            .norm_ffn
            .forward(&p.ffn.forward(&f1).unwrap().add(&f1).unwrap())
            .unwrap();
        assert_eq!(out.data(), expected.data());
    }

    #[test]
    fn zero_bias_fuse_matches_plain_cross_attention_reference() {
        let mut rng = SplitMix64::new(4);
        let (n, l, d) = (2, 5, 8);
        let p = FusionParams::<f64>::new(d, 2, Some(8), &mut rng);
        let fc = rand(vec![n, l, d], &mut rng);
        let fd = rand(vec![n, l, d], &mut rng);
        let maps = rand_maps(n, 2, l, &mut rng);
        let out = p.fuse(&fc, &fd, Some(&maps)).unwrap();
        let reference = reference_fuse(&p, fc.data(), fd.data(), n, l, d);
        for (a, b) in out.data().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn key_permutation_leaves_output_unchanged() {
        let mut rng = SplitMix64::new(5);
        let (n, l, d, h) = (1, 4, 8, 2);
        let mut p = FusionParams::<f64>::new(d, h, Some(8), &mut rng);
        p.bias_mlp.as_mut().unwrap().fc2 = Linear::new(8, h, 1.0, true, &mut rng);
        let fc = rand(vec![n, l, d], &mut rng);
        let fd = rand(vec![n, l, d], &mut rng);
        let maps = rand_maps(n, h, l, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let mut fd_p = vec![0.0; n * l * d];
        for (new, &old) in perm.iter().enumerate() {
            fd_p[new * d..(new + 1) * d].copy_from_slice(&fd.data()[old * d..(old + 1) * d]);
        }
        let mut maps_p = vec![0.0; h * l * l];
        for hh in 0..h {
            for q in 0..l {
                for (new, &old) in perm.iter().enumerate() {
                    maps_p[(hh * l + q) * l + new] = maps.data()[(hh * l + q) * l + old];
                }
            }
        }
        let a = p.fuse(&fc, &fd, Some(&maps)).unwrap();
        let b = p
            .fuse(
                &fc,
                &Tensor::new(vec![n, l, d], fd_p).unwrap(),
                Some(&Tensor::new(vec![n, h, l, l], maps_p).unwrap()),
            )
            .unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_with_bias() {
        let mut rng = SplitMix64::new(6);
        let mut p = FusionParams::<f64>::new(8, 4, Some(16), &mut rng);
        p.bias_mlp.as_mut().unwrap().fc2 = Linear::new(16, 4, 3.0, true, &mut rng);
        let fc = rand(vec![2, 6, 8], &mut rng);
        let fd = rand(vec![2, 6, 8], &mut rng);
        let maps = rand_maps(2, 4, 6, &mut rng);
        let (out, attn) = p.fuse_with_attention(&fc, &fd, Some(&maps)).unwrap();
        assert_eq!(out.shape(), fc.shape());
        for row in attn.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_token_counts_are_rejected() {
        let mut rng = SplitMix64::new(7);
        let p = FusionParams::<f64>::new(4, 2, None, &mut rng);
        let fc = rand(vec![1, 3, 4], &mut rng);
        let fd = rand(vec![1, 2, 4], &mut rng);
        assert!(matches!(p.fuse(&fc, &fd, None), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn fuse_passes_grad_check() {
        let mut rng = SplitMix64::new(8);
        let (n, l, d, h) = (1, 3, 4, 2);
        let mut p = FusionParams::<f64>::new(d, h, Some(4), &mut rng);
        p.bias_mlp.as_mut().unwrap().fc2 = Linear::new(4, h, 1.0, true, &mut rng).without_bias();
        let fc = rand(vec![n, l, d], &mut rng).detach_with_grad(true);
        let fd = rand(vec![n, l, d], &mut rng).detach_with_grad(true);
        let maps = rand_maps(n, h, l, &mut rng);
        let weights = rand(vec![n, l, d], &mut rng);
        let mut inputs = vec![fc, fd];
        inputs.extend(p.trainable_params());
        let err = grad_check(
            |xs| {
                let mut q = p.clone();
                q.replace_trainable(&xs[2..]);
                Ok(q.fuse(&xs[0], &xs[1], Some(&maps))?.mul(&weights)?.sum())
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
