//! Symmetric uniform quantization with straight-through training support:
//! the eager quantizer, bit-width inference from (d, x_max), and the
//! one-sided quadratic size penalty.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Shipped penalty weights for the mixed-precision size constraints.
pub const LAMBDA_W: f64 = 2.66e-7;
pub const LAMBDA_A: f64 = 1.73e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecisionMode {
    Uniform,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantTarget {
    Weights,
    Activations,
}

/// Per-tensor quantizer state phi = [d, x_max, b].
#[derive(Debug, Clone)]
pub struct QuantizerParams {
    pub step: f64,
    pub x_max: f64,
    pub bits: u32,
    pub mode: PrecisionMode,
    pub target: QuantTarget,
}

impl QuantizerParams {
    /// Uniform precision: fixed bit width, step derived from the threshold
    /// (x_max = d * (2^(b-1) - 1)).
    pub fn uniform(x_max: f64, bits: u32, target: QuantTarget) -> Result<Self> {
        if x_max <= 0.0 {
            return Err(Error::invalid("quantizer", format!("x_max must be positive, got {x_max}")));
        }
        if bits < 2 {
            return Err(Error::invalid("quantizer", format!("bit width must be >= 2, got {bits}")));
        }
        let levels = ((1u64 << (bits - 1)) - 1) as f64;
        Ok(QuantizerParams {
            step: x_max / levels,
            x_max,
            bits,
            mode: PrecisionMode::Uniform,
            target,
        })
    }

    /// Mixed precision: free (d, x_max), bit width inferred.
    pub fn mixed(step: f64, x_max: f64, target: QuantTarget) -> Result<Self> {
        if step <= 0.0 || x_max <= 0.0 {
            return Err(Error::invalid(
                "quantizer",
                format!("step and x_max must be positive, got d={step}, x_max={x_max}"),
            ));
        }
        if step > x_max {
            return Err(Error::invalid(
                "quantizer",
                format!("step {step} must not exceed x_max {x_max}"),
            ));
        }
        let (bits, _) = infer_bitwidth(step, x_max);
        Ok(QuantizerParams {
            step,
            x_max,
            bits,
            mode: PrecisionMode::Mixed,
            target,
        })
    }
}

/// Elementwise symmetric uniform quantization (Eq.-style
/// sign(x) * min(d * floor(|x|/d + 1/2), x_max)).
pub fn quantize(x: &Tensor, phi: &QuantizerParams) -> Result<Tensor> {
    if phi.step <= 0.0 || phi.x_max <= 0.0 {
        return Err(Error::invalid("quantize", "step and x_max must be positive"));
    }
    let mut out = vec![0.0f32; x.len()];
    kernels::quantize_slice(x.data(), phi.step, phi.x_max, &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

/// Integer lattice codes for the fixed-point export: q = code * d, with
/// |code| <= floor(x_max/d) and clipped inputs snapped to +-floor(x_max/d).
pub fn quantize_codes(x: &Tensor, phi: &QuantizerParams) -> Vec<i32> {
    let max_code = (phi.x_max / phi.step).floor() as i64;
    x.data()
        .iter()
        .map(|&v| {
            let code = ((v.abs() as f64) / phi.step + 0.5).floor() as i64;
            (v.signum() as i64 * code.min(max_code)) as i32
        })
        .collect()
}

/// b_cont = 1 + log2(x_max/d + 1); b_int = ceil(b_cont) clamped to >= 2.
pub fn infer_bitwidth(step: f64, x_max: f64) -> (u32, f64) {
    let m = x_max / step + 1.0;
    let b_cont = 1.0 + m.log2();
    // smallest k with 2^k >= m, found exactly rather than through the
    // rounded log
    let mut k = m.log2().ceil();
    while k >= 1.0 && (k - 1.0).exp2() >= m {
        k -= 1.0;
    }
    while k.exp2() < m {
        k += 1.0;
    }
    let b_int = (k + 1.0).max(2.0) as u32;
    (b_int, b_cont)
}

/// Total-size constraint for one target (weights or activations).
#[derive(Debug, Clone, Copy)]
pub struct SizeConstraint {
    /// Target average bit width b-bar.
    pub avg_bits: f64,
    /// Penalty weight lambda.
    pub lambda: f64,
}

impl SizeConstraint {
    pub fn weights(avg_bits: f64) -> Self {
        SizeConstraint { avg_bits, lambda: LAMBDA_W }
    }

    pub fn activations(avg_bits: f64) -> Self {
        SizeConstraint { avg_bits, lambda: LAMBDA_A }
    }

    /// Target size in bits for the given per-layer coefficient counts.
    pub fn target_bits(&self, counts: &[usize]) -> f64 {
        self.avg_bits * counts.iter().sum::<usize>() as f64
    }
}

/// One-sided quadratic size penalty: lambda * max(0, sum N_l b_l - S_o)^2.
/// Returns (excess bits S_x, penalty value).
pub fn size_penalty(layers: &[(usize, f64)], constraint: &SizeConstraint) -> (f64, f64) {
    let total: f64 = layers.iter().map(|&(n, b)| n as f64 * b).sum();
    let target = constraint.avg_bits * layers.iter().map(|&(n, _)| n as f64).sum::<f64>();
    let excess = total - target;
    let penalty = constraint.lambda * excess.max(0.0).powi(2);
    (excess, penalty)
}

/// Size accounting in both bits and decimal megabytes (1 MB = 10^6 bytes).
pub fn bits_to_mb(bits: f64) -> f64 {
    bits / 8.0 / 1e6
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn eq6_hand_cases() {
        let phi = QuantizerParams { step: 0.5, x_max: 3.5, bits: 4, mode: PrecisionMode::Mixed, target: QuantTarget::Weights };
        let t = Tensor::new(vec![3], vec![1.3, -10.0, 0.0]).unwrap();
        let q = quantize(&t, &phi).unwrap();
        assert_eq!(q.data(), &[1.5, -3.5, 0.0]);
    }

    #[test]
    fn quantize_is_odd() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..1000 {
            let d = rng.uniform(0.01, 2.0) as f64;
            let m = d * (1.0 + rng.below(40) as f64);
            let x = rng.uniform(-8.0, 8.0);
            let a = kernels::quantize_value(x, d, m);
            let b = kernels::quantize_value(-x, d, m);
            assert_eq!(a, -b, "x={x} d={d} m={m}");
        }
    }

    #[test]
    fn bitwidth_hand_cases() {
        assert_eq!(infer_bitwidth(1.0, 7.0), (4, 4.0));
        let (bi, bc) = infer_bitwidth(1.0, 6.0);
        assert_eq!(bi, 4);
        assert!((bc - 3.807).abs() < 1e-3);
        let (bi, bc) = infer_bitwidth(2.5, 2.5);
        assert_eq!(bi, 2);
        assert!((bc - 2.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_two_layer_example() {
        let c = SizeConstraint { avg_bits: 4.0, lambda: 1.0 };
        let (excess, penalty) = size_penalty(&[(100, 4.0), (100, 8.0)], &c);
        assert_eq!(excess, 400.0);
        assert_eq!(penalty, 160000.0);

        let (_, p) = size_penalty(&[(100, 4.0), (100, 4.0)], &c);
        assert_eq!(p, 0.0);
        // under budget is free (one-sided)
        let (excess, p) = size_penalty(&[(100, 2.0), (100, 4.0)], &c);
        assert!(excess < 0.0);
        assert_eq!(p, 0.0);
    }

    #[test]
    fn shipped_lambdas() {
        assert_eq!(SizeConstraint::weights(4.0).lambda, 2.66e-7);
        assert_eq!(SizeConstraint::activations(8.0).lambda, 1.73e-6);
    }

    #[test]
    fn codes_round_trip_on_lattice() {
        let phi = QuantizerParams::uniform(3.5, 4, QuantTarget::Weights).unwrap();
        let t = Tensor::new(vec![4], vec![0.2, -1.3, 3.4, -99.0]).unwrap();
        let q = quantize(&t, &phi).unwrap();
        let codes = quantize_codes(&t, &phi);
        for (c, qq) in codes.iter().zip(q.data()) {
            assert!(((*c as f64 * phi.step) as f32 - qq).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(QuantizerParams::uniform(0.0, 4, QuantTarget::Weights).is_err());
        assert!(QuantizerParams::uniform(1.0, 1, QuantTarget::Weights).is_err());
        assert!(QuantizerParams::mixed(-1.0, 1.0, QuantTarget::Weights).is_err());
        assert!(QuantizerParams::mixed(2.0, 1.0, QuantTarget::Weights).is_err());
    }

    #[test]
    fn mse_decreases_with_bits() {
        // Monte-Carlo: expected quantization MSE on uniform inputs is
        // monotone non-increasing in b for fixed x_max
        let mut rng = SplitMix64::new(17);
        let xs: Vec<f32> = (0..100_000).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut last = f64::INFINITY;
        for bits in 2..=8u32 {
            let phi = QuantizerParams::uniform(1.0, bits, QuantTarget::Weights).unwrap();
            let mse: f64 = xs
                .iter()
                .map(|&x| {
                    let q = kernels::quantize_value(x, phi.step, phi.x_max) as f64;
                    (q - x as f64).powi(2)
                })
                .sum::<f64>()
                / xs.len() as f64;
            assert!(mse <= last, "bits {bits}: {mse} > {last}");
            last = mse;
        }
    }
}
