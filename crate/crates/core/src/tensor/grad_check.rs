use super::{no_grad, Result, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Checks at most this many coordinates per input (evenly strided);
    /// `None` checks every coordinate.
    pub max_coords_per_input: Option<usize>,
    /// Combines steps `h` and `h/2` to cancel the `h^2` truncation term,
    /// which allows a larger step and so less roundoff.
    pub richardson: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_input: None,
            richardson: false,
        }
    }
}

/// Compares analytic gradients of scalar `f` at `inputs` against central
/// differences and returns the max relative error, using the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
///
/// Inputs that do not require grad are held fixed and not checked.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    grad_check_with(
        f,
        inputs,
        GradCheckOptions {
            step,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    // Fresh leaves so earlier accumulations cannot leak in.
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach_with_grad(t.requires_grad())).collect();
    let loss = f(&leaves)?;
    loss.backward()?;

    let h = opts.step;
    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        if !leaf.requires_grad() {
            continue;
        }
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let n = leaf.numel();
        let stride = match opts.max_coords_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let eval_at = |delta: f64| -> Result<f64> {
                let mut data = leaf.data().to_vec();
                data[j] += delta;
                let mut args = leaves.clone();
                args[i] = Tensor::new(leaf.shape().to_vec(), data)?;
                no_grad(|| f(&args)).map(|t| t.item())
            };
            let central = |h: f64| -> Result<f64> { Ok((eval_at(h)? - eval_at(-h)?) / (2.0 * h)) };
            let numeric = if opts.richardson {
                (4.0 * central(h / 2.0)? - central(h)?) / 3.0
            } else {
                central(h)?
            };
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
