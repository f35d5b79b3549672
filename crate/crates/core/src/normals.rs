//! Surface-normal estimation from a depth map: centered differences with
//! fixed [-1/2, 0, 1/2] kernels (replicate borders), then per-pixel
//! normalization of (dD/dx, dD/dy, -1).

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::kernels::{self, Axis};
use crate::tensor::Tensor;

fn validate(depth: &Tensor) -> Result<()> {
    let (_, c, h, w) = depth.nchw();
    if c != 1 {
        return Err(Error::shape(
            "estimate_normals",
            format!("depth must have 1 channel, got {:?}", depth.shape()),
        ));
    }
    if h < 3 || w < 3 {
        return Err(Error::invalid(
            "estimate_normals",
            format!("depth must be at least 3x3, got {h}x{w}"),
        ));
    }
    Ok(())
}

/// Unit normals (Nx3xHxW) from a depth map (Nx1xHxW). z-component is
/// always negative (camera-facing).
pub fn estimate_normals(depth: &Tensor) -> Result<Tensor> {
    validate(depth)?;
    let gx = kernels::grad_fwd(depth, Axis::X);
    let gy = kernels::grad_fwd(depth, Axis::Y);
    Ok(kernels::normals_fwd(&gx, &gy))
}

/// Differentiable variant on a tape.
pub fn normals_node(tape: &mut Tape, depth: NodeId) -> Result<NodeId> {
    validate(tape.value(depth))?;
    let gx = tape.spatial_grad(depth, Axis::X);
    let gy = tape.spatial_grad(depth, Axis::Y);
    tape.normals(gx, gy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_depth_faces_camera() {
        let d = Tensor::full(&[1, 1, 5, 7], 3.0);
        let n = estimate_normals(&d).unwrap();
        let hw = 35;
        for i in 0..hw {
            assert_eq!(n.data()[i], 0.0);
            assert_eq!(n.data()[hw + i], 0.0);
            assert_eq!(n.data()[2 * hw + i], -1.0);
        }
    }

    #[test]
    fn unit_ramp() {
        let (h, w) = (6, 9);
        let data: Vec<f32> = (0..h * w).map(|i| (i % w) as f32).collect();
        let d = Tensor::new(vec![1, 1, h, w], data).unwrap();
        let n = estimate_normals(&d).unwrap();
        let hw = h * w;
        let e = 1.0 / 2f32.sqrt();
        for y in 0..h {
            for x in 1..w - 1 {
                let i = y * w + x;
                assert!((n.data()[i] - e).abs() < 1e-6);
                assert!((n.data()[hw + i]).abs() < 1e-6);
                assert!((n.data()[2 * hw + i] + e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unit_norm_everywhere() {
        let mut rng = crate::rng::SplitMix64::new(3);
        let data: Vec<f32> = (0..64).map(|_| rng.uniform(-50.0, 50.0)).collect();
        let d = Tensor::new(vec![1, 1, 8, 8], data).unwrap();
        let n = estimate_normals(&d).unwrap();
        for i in 0..64 {
            let (a, b, c) = (n.data()[i], n.data()[64 + i], n.data()[128 + i]);
            assert!((a * a + b * b + c * c - 1.0).abs() < 1e-5);
            assert!(c < 0.0);
        }
    }

    #[test]
    fn rejects_small_or_multichannel() {
        assert!(estimate_normals(&Tensor::zeros(&[1, 1, 2, 8])).is_err());
        assert!(estimate_normals(&Tensor::zeros(&[1, 3, 8, 8])).is_err());
    }

    #[test]
    fn matches_analytic_plane_normals() {
        // tilted plane depth d(x, y) = a x + b y + c; normals from the
        // estimator equal (a, b, -1)/norm away from borders
        let (a, b, c) = (0.3f32, -0.2f32, 5.0f32);
        let (h, w) = (10, 12);
        let data: Vec<f32> = (0..h * w)
            .map(|i| a * (i % w) as f32 + b * (i / w) as f32 + c)
            .collect();
        let d = Tensor::new(vec![1, 1, h, w], data).unwrap();
        let n = estimate_normals(&d).unwrap();
        let s = (a * a + b * b + 1.0).sqrt();
        let hw = h * w;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let i = y * w + x;
                assert!((n.data()[i] - a / s).abs() < 1e-5);
                assert!((n.data()[hw + i] - b / s).abs() < 1e-5);
                assert!((n.data()[2 * hw + i] + 1.0 / s).abs() < 1e-5);
            }
        }
    }
}
