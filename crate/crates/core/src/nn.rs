//! Small layer library shared by the encoders, fusion block and decoder.

use crate::rng::SplitMix64;
use crate::tensor::{Result, Scalar, Tensor};

/// Named traversal over the tensors a module owns.
pub trait Parameters<T: Scalar> {
    fn for_each_param<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>));
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.for_each_param("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Parameters that receive gradient updates.
    fn trainable_params(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        self.for_each_param("", &mut |_, t| {
            if t.requires_grad() {
                out.push(t.clone());
            }
        });
        out
    }

    /// Replaces trainable tensors, in `trainable_params` order.
    fn replace_trainable(&mut self, replacements: &[Tensor<T>]) {
        let mut it = replacements.iter();
        self.for_each_param_mut("", &mut |name, t| {
            if t.requires_grad() {
                *t = it
                    .next()
                    .unwrap_or_else(|| panic!("missing replacement for {name}"))
                    .clone();
            }
        });
        assert!(it.next().is_none(), "more replacements than trainable params");
    }

    fn zero_grads(&self) {
        self.for_each_param("", &mut |_, t| t.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> Parameters<T> for Tensor<T> {
    fn for_each_param<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f(prefix, self)
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(prefix, self)
    }
}

impl<T: Scalar, M: Parameters<T>> Parameters<T> for Vec<M> {
    fn for_each_param<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.for_each_param(&join(prefix, &i.to_string()), f);
        }
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.for_each_param_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Scalar, M: Parameters<T>> Parameters<T> for Option<M> {
    fn for_each_param<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        if let Some(m) = self {
            m.for_each_param(prefix, f);
        }
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(m) = self {
            m.for_each_param_mut(prefix, f);
        }
    }
}

/// Implements [`Parameters`] for a struct generic over `T` by visiting the
/// listed fields in order.
macro_rules! impl_parameters {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Scalar> $crate::nn::Parameters<T> for $ty<T> {
            fn for_each_param<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &'a $crate::tensor::Tensor<T>),
            ) {
                $( self.$field.for_each_param(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }

            fn for_each_param_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::tensor::Tensor<T>),
            ) {
                $( self.$field.for_each_param_mut(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_parameters;

pub fn normal_tensor<T: Scalar>(shape: Vec<usize>, std: f64, trainable: bool, rng: &mut SplitMix64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(std * rng.normal())).collect();
    if trainable {
        Tensor::param(shape, data).expect("shape matches")
    } else {
        Tensor::new(shape, data).expect("shape matches")
    }
}

pub fn const_tensor<T: Scalar>(shape: Vec<usize>, value: f64, trainable: bool) -> Tensor<T> {
    let t = Tensor::full(shape, T::of(value));
    if trainable {
        t.detach_with_grad(true)
    } else {
        t
    }
}

/// `x @ weight + bias` with `weight: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}
impl_parameters!(Linear { weight, bias });

impl<T: Scalar> Linear<T> {
    /// Normal init with std `gain / sqrt(in)`, zero bias.
    pub fn new(input: usize, output: usize, gain: f64, trainable: bool, rng: &mut SplitMix64) -> Self {
        Self {
            weight: normal_tensor(vec![input, output], gain / (input as f64).sqrt(), trainable, rng),
            bias: Some(const_tensor(vec![output], 0.0, trainable)),
        }
    }

    /// Drops the bias term. Used where a bias is a constant shift inside a
    /// softmax row and so can never receive a nonzero gradient.
    pub fn without_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    pub fn zeros(input: usize, output: usize, trainable: bool) -> Self {
        Self {
            weight: const_tensor(vec![input, output], 0.0, trainable),
            bias: Some(const_tensor(vec![output], 0.0, trainable)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}
impl_parameters!(LayerNorm { gain, shift });

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize, trainable: bool) -> Self {
        Self {
            gain: const_tensor(vec![d], 1.0, trainable),
            shift: const_tensor(vec![d], 0.0, trainable),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gain, &self.shift)
    }
}

/// Two linear layers with GELU between.
#[derive(Debug, Clone)]
pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}
impl_parameters!(Mlp { fc1, fc2 });

impl<T: Scalar> Mlp<T> {
    pub fn new(input: usize, hidden: usize, output: usize, trainable: bool, rng: &mut SplitMix64) -> Self {
        Self {
            fc1: Linear::new(input, hidden, 1.0, trainable, rng),
            fc2: Linear::new(hidden, output, 1.0, trainable, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

/// `[n, t, d] -> [n, h, t, d / h]`
pub fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let (n, t, d) = (s[0], s[1], s[2]);
    x.reshape(vec![n, t, heads, d / heads])?.permute(&[0, 2, 1, 3])
}

/// `[n, h, t, dh] -> [n, t, h * dh]`
pub fn merge_heads<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let (n, h, t, dh) = (s[0], s[1], s[2], s[3]);
    x.permute(&[0, 2, 1, 3])?.reshape(vec![n, t, h * dh])
}

/// Additive causal mask `[t, t]`: 0 on and below the diagonal, a large
/// negative value above it.
pub fn causal_mask<T: Scalar>(t: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); t * t];
    for i in 0..t {
        for j in i + 1..t {
            data[i * t + j] = T::of(-1e9);
        }
    }
    Tensor::new(vec![t, t], data).expect("square")
}

/// Multi-head self-attention with learned projections.
#[derive(Debug, Clone)]
pub struct SelfAttention<T: Scalar> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    heads: usize,
}
impl_parameters!(SelfAttention { query, key, value, out });

impl<T: Scalar> SelfAttention<T> {
    pub fn new(d: usize, heads: usize, qk_gain: f64, trainable: bool, rng: &mut SplitMix64) -> Self {
        assert_eq!(d % heads, 0, "d must be divisible by heads");
        Self {
            query: Linear::new(d, d, qk_gain, trainable, rng),
            key: Linear::new(d, d, qk_gain, trainable, rng).without_bias(),
            value: Linear::new(d, d, 1.0, trainable, rng),
            out: Linear::new(d, d, 1.0, trainable, rng),
            heads,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Returns the attended output `[n, t, d]` and the attention
    /// probabilities `[n, h, t, t]`.
    pub fn forward(&self, x: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<(Tensor<T>, Tensor<T>)> {
        let d = x.shape()[2];
        let dh = d / self.heads;
        let q = split_heads(&self.query.forward(x)?, self.heads)?;
        let k = split_heads(&self.key.forward(x)?, self.heads)?;
        let v = split_heads(&self.value.forward(x)?, self.heads)?;
        let mut scores = q.matmul(&k.transpose_last()?)?.scale(T::of(1.0 / (dh as f64).sqrt()));
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        let probs = scores.softmax_rows()?;
        let attended = merge_heads(&probs.matmul(&v)?)?;
        Ok((self.out.forward(&attended)?, probs))
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub attn: SelfAttention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}
impl_parameters!(Block { ln1, attn, ln2, mlp });

impl<T: Scalar> Block<T> {
    pub fn new(d: usize, heads: usize, qk_gain: f64, trainable: bool, rng: &mut SplitMix64) -> Self {
        Self {
            ln1: LayerNorm::new(d, trainable),
            attn: SelfAttention::new(d, heads, qk_gain, trainable, rng),
            ln2: LayerNorm::new(d, trainable),
            mlp: Mlp::new(d, 4 * d, d, trainable, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (a, probs) = self.attn.forward(&self.ln1.forward(x)?, mask)?;
        let x = x.add(&a)?;
        let x = x.add(&self.mlp.forward(&self.ln2.forward(&x)?)?)?;
        Ok((x, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_params_are_hierarchical_and_ordered() {
        let mut rng = SplitMix64::new(0);
        let block = Block::<f32>::new(8, 2, 1.0, true, &mut rng);
        let names: Vec<String> = block.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "ln1.gain");
        assert!(names.contains(&"attn.query.weight".to_string()));
        assert_eq!(names.last().unwrap(), "mlp.fc2.bias");
    }

    #[test]
    fn replace_trainable_round_trips() {
        let mut rng = SplitMix64::new(0);
        let mut mlp = Mlp::<f32>::new(3, 4, 2, true, &mut rng);
        let ps = mlp.trainable_params();
        let doubled: Vec<_> = ps.iter().map(|p| p.scale(2.0).detach_with_grad(true)).collect();
        mlp.replace_trainable(&doubled);
        assert_eq!(mlp.fc1.weight.data()[0], 2.0 * ps[0].data()[0]);
    }

    #[test]
    fn causal_attention_ignores_future_positions() {
        let mut rng = SplitMix64::new(4);
        let attn = SelfAttention::<f64>::new(4, 2, 1.0, false, &mut rng);
        let x = normal_tensor::<f64>(vec![1, 3, 4], 1.0, false, &mut rng);
        let mask = causal_mask::<f64>(3);
        let (y, probs) = attn.forward(&x, Some(&mask)).unwrap();
        for h in 0..2 {
            assert!(probs.data()[h * 9 + 1] < 1e-12);
        }
        let mut changed = x.data().to_vec();
        changed[8..12].iter_mut().for_each(|v| *v += 5.0);
        let x2 = Tensor::new(vec![1, 3, 4], changed).unwrap();
        let (y2, _) = attn.forward(&x2, Some(&mask)).unwrap();
        assert_eq!(&y.data()[..8], &y2.data()[..8]);
    }
}
