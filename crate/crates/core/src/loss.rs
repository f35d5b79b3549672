//! Training objective (masked l_p depth term plus normals term) and the
//! evaluation metrics RMSE/MAE/MRE/delta_i/MNS.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::normals;
use crate::preproc::D_MAX;
use crate::tensor::Tensor;

/// Default normals-loss weight (best RMSE/MNS trade-off).
pub const LAMBDA_N: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// p in {1, 2} for the depth term.
    pub p: u32,
    pub lambda_n: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { p: 1, lambda_n: LAMBDA_N }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p != 1 && self.p != 2 {
            return Err(Error::invalid("loss", format!("p must be 1 or 2, got {}", self.p)));
        }
        if self.lambda_n < 0.0 {
            return Err(Error::invalid("loss", format!("lambda_n must be >= 0, got {}", self.lambda_n)));
        }
        Ok(())
    }
}

fn check_mask(mask: &Tensor) -> Result<usize> {
    let valid = mask.data().iter().filter(|&&v| v != 0.0).count();
    if valid == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(valid)
}

/// Masked l_p loss: mean over the batch of the per-sample sum over valid
/// pixels of |pred - gt|^p. `gt` and `mask` are Nx1xHxW.
pub fn loss_lp(tape: &mut Tape, pred: NodeId, gt: &Tensor, mask: &Tensor, p: u32) -> Result<NodeId> {
    if p != 1 && p != 2 {
        return Err(Error::invalid("loss_lp", format!("p must be 1 or 2, got {p}")));
    }
    if tape.value(pred).shape() != gt.shape() || gt.shape() != mask.shape() {
        return Err(Error::shape(
            "loss_lp",
            format!(
                "pred {:?}, gt {:?}, mask {:?} must agree",
                tape.value(pred).shape(),
                gt.shape(),
                mask.shape()
            ),
        ));
    }
    check_mask(mask)?;
    let n = gt.nchw().0;
    let gt_node = tape.constant(gt.clone());
    let mask_node = tape.constant(mask.clone());
    let diff = tape.sub(pred, gt_node)?;
    let err = match p {
        1 => tape.abs(diff),
        _ => tape.mul(diff, diff)?,
    };
    let masked = tape.mul(err, mask_node)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, 1.0 / n as f32))
}

/// Negative mean cosine similarity between unit normal maps (Nx3xHxW) over
/// valid pixels. `mask` is Nx1xHxW.
pub fn loss_normals(tape: &mut Tape, nhat: NodeId, ngt: &Tensor, mask: &Tensor) -> Result<NodeId> {
    let (n, c, h, w) = tape.value(nhat).nchw();
    if c != 3 || ngt.shape() != tape.value(nhat).shape() {
        return Err(Error::shape(
            "loss_normals",
            format!("normals must be {n}x3x{h}x{w}, got {:?}", ngt.shape()),
        ));
    }
    if mask.shape() != [n, 1, h, w] {
        return Err(Error::shape(
            "loss_normals",
            format!("mask must be {n}x1x{h}x{w}, got {:?}", mask.shape()),
        ));
    }
    let valid = check_mask(mask)?;
    let mask3 = expand_mask3(mask);
    let ngt_node = tape.constant(ngt.clone());
    let mask_node = tape.constant(mask3);
    let prod = tape.mul(nhat, ngt_node)?;
    let masked = tape.mul(prod, mask_node)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, -1.0 / valid as f32))
}

fn expand_mask3(mask: &Tensor) -> Tensor {
    let (n, _, h, w) = mask.nchw();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * 3 * hw);
    for i in 0..n {
        let s = &mask.data()[i * hw..(i + 1) * hw];
        for _ in 0..3 {
            data.extend_from_slice(s);
        }
    }
    Tensor::new(vec![n, 3, h, w], data).unwrap()
}

/// Loss node handles for one step.
pub struct LossNodes {
    pub total: NodeId,
    pub lp: NodeId,
    /// Absent when lambda_n = 0 (the normals branch is skipped).
    pub ln: Option<NodeId>,
}

/// L = L_lp + lambda_n * L_n, with predicted normals recomputed from the
/// predicted (normalized) depth and GT normals recomputed from `gt` with
/// the same operator, keeping both pipelines consistent.
pub fn loss_total(
    tape: &mut Tape,
    pred: NodeId,
    gt: &Tensor,
    mask: &Tensor,
    config: &LossConfig,
) -> Result<LossNodes> {
    config.validate()?;
    let lp = loss_lp(tape, pred, gt, mask, config.p)?;
    if config.lambda_n == 0.0 {
        return Ok(LossNodes { total: lp, lp, ln: None });
    }
    let ngt = normals::estimate_normals(gt)?;
    let nhat = normals::normals_node(tape, pred)?;
    let ln = loss_normals(tape, nhat, &ngt, mask)?;
    let scaled = tape.scale(ln, config.lambda_n as f32);
    let total = tape.add(lp, scaled)?;
    Ok(LossNodes { total, lp, ln: Some(ln) })
}

/// Depth-completion quality metrics over one batch (metric depth in mm).
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub rmse_mm: f64,
    pub mae_mm: f64,
    pub mre_pct: f64,
    /// delta_i = % of pixels with max(pred/gt, gt/pred) < 1.25^i.
    pub delta: [f64; 3],
    pub mns: f64,
    pub samples: usize,
    pub prep_time_ms: Option<f64>,
}

/// Metrics for pred/gt in millimetres, NxCxHxW with C=1. Pixels with
/// gt <= 0 are excluded everywhere; MNS recomputes normals from both
/// depth maps (normalized by D_max) with the shared estimator.
pub fn metrics(pred_mm: &Tensor, gt_mm: &Tensor) -> Result<MetricsReport> {
    if pred_mm.shape() != gt_mm.shape() {
        return Err(Error::shape(
            "metrics",
            format!("{:?} vs {:?}", pred_mm.shape(), gt_mm.shape()),
        ));
    }
    let (n, c, _, _) = pred_mm.nchw();
    if c != 1 {
        return Err(Error::shape("metrics", format!("expected 1 channel, got {c}")));
    }
    let mut count = 0usize;
    let (mut se, mut ae, mut re) = (0.0f64, 0.0f64, 0.0f64);
    let mut hits = [0usize; 3];
    for (&p, &g) in pred_mm.data().iter().zip(gt_mm.data()) {
        if g <= 0.0 {
            continue;
        }
        count += 1;
        let (p, g) = (p as f64, g as f64);
        let e = p - g;
        se += e * e;
        ae += e.abs();
        re += e.abs() / g;
        let ratio = if p <= 0.0 { f64::INFINITY } else { (p / g).max(g / p) };
        for (i, h) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(i as i32 + 1) {
                *h += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }

    let norm = D_MAX * 1000.0;
    let pred_n = scale_tensor(pred_mm, 1.0 / norm);
    let gt_n = scale_tensor(gt_mm, 1.0 / norm);
    let nh = normals::estimate_normals(&pred_n)?;
    let ng = normals::estimate_normals(&gt_n)?;
    let mut cos_sum = 0.0f64;
    let mut cos_count = 0usize;
    let (_, _, h, w) = pred_mm.nchw();
    let hw = h * w;
    for i in 0..n {
        for px in 0..hw {
            if gt_mm.data()[i * hw + px] <= 0.0 {
                continue;
            }
            let base = i * 3 * hw + px;
            let dot: f64 = (0..3)
                .map(|ch| nh.data()[base + ch * hw] as f64 * ng.data()[base + ch * hw] as f64)
                .sum();
            cos_sum += dot;
            cos_count += 1;
        }
    }

    Ok(MetricsReport {
        rmse_mm: (se / count as f64).sqrt(),
        mae_mm: ae / count as f64,
        mre_pct: re / count as f64 * 100.0,
        delta: [
            hits[0] as f64 / count as f64 * 100.0,
            hits[1] as f64 / count as f64 * 100.0,
            hits[2] as f64 / count as f64 * 100.0,
        ],
        mns: cos_sum / cos_count as f64,
        samples: n,
        prep_time_ms: None,
    })
}

fn scale_tensor(t: &Tensor, k: f32) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * k).collect()).unwrap()
}

impl MetricsReport {
    /// Plain-text table row set (Tables 2/3 column shape).
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>10} {:>10} {:>8} {:>7} {:>7} {:>7} {:>7}",
            "RMSE[mm]", "MAE[mm]", "MRE[%]", "d1[%]", "d2[%]", "d3[%]", "MNS"
        );
        let _ = writeln!(
            s,
            "{:>10.2} {:>10.2} {:>8.2} {:>7.2} {:>7.2} {:>7.2} {:>7.4}",
            self.rmse_mm, self.mae_mm, self.mre_pct, self.delta[0], self.delta[1], self.delta[2], self.mns
        );
        s
    }

    /// Machine-readable key=value block.
    pub fn render_keyvalues(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rmse_mm={}", self.rmse_mm);
        let _ = writeln!(s, "mae_mm={}", self.mae_mm);
        let _ = writeln!(s, "mre_pct={}", self.mre_pct);
        let _ = writeln!(s, "delta1_pct={}", self.delta[0]);
        let _ = writeln!(s, "delta2_pct={}", self.delta[1]);
        let _ = writeln!(s, "delta3_pct={}", self.delta[2]);
        let _ = writeln!(s, "mns={}", self.mns);
        let _ = writeln!(s, "samples={}", self.samples);
        if let Some(t) = self.prep_time_ms {
            let _ = writeln!(s, "prep_time_ms={t}");
        }
        s
    }
}
