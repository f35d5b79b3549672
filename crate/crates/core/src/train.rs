//! Training orchestration: float pretraining, uniform-precision QAT, and
//! mixed-precision QAT with size penalties, plus the optimizers and the
//! cosine learning-rate schedule.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::loss::{self, LossConfig, MetricsReport};
use crate::model::{self, ModelConfig, ModelParams, ParamKind, QuantPlan};
use crate::preproc::{self, PreprocessedInput, SparseDepthMap, D_MAX};
use crate::quant::{PrecisionMode, SizeConstraint};
use crate::rng::SplitMix64;
use crate::scene::Sample;
use crate::tensor::Tensor;

/// Cosine decay rho = rho0 * (1 + cos(pi t / T)) / 2.
pub fn cosine_lr(rho0: f64, t: usize, total: usize) -> Result<f64> {
    if t > total {
        return Err(Error::invalid("cosine_lr", format!("t={t} exceeds T={total}")));
    }
    Ok(rho0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// Optimizer state; one slot per parameter, lazily shaped on first use.
pub enum Optimizer {
    RmsProp { decay: f64, eps: f64, sq: Vec<Vec<f64>> },
    Adam { beta1: f64, beta2: f64, eps: f64, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>> },
}

impl Optimizer {
    pub fn rmsprop() -> Self {
        Optimizer::RmsProp { decay: 0.9, eps: 1e-8, sq: Vec::new() }
    }

    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    fn ensure(slots: &mut Vec<Vec<f64>>, idx: usize, len: usize) -> Result<&mut Vec<f64>> {
        while slots.len() <= idx {
            slots.push(Vec::new());
        }
        let s = &mut slots[idx];
        if s.is_empty() {
            s.resize(len, 0.0);
        } else if s.len() != len {
            return Err(Error::shape(
                "optimizer",
                format!("state slot {idx} has {} entries, gradient has {len}", s.len()),
            ));
        }
        Ok(s)
    }

    /// Advance per-step counters (Adam bias correction); call once per
    /// optimization step before the per-parameter updates.
    pub fn begin_step(&mut self) {
        if let Optimizer::Adam { t, .. } = self {
            *t += 1;
        }
    }

    /// Update one parameter tensor in place.
    pub fn step(&mut self, idx: usize, value: &mut [f32], grad: &[f32], lr: f64) -> Result<()> {
        if value.len() != grad.len() {
            return Err(Error::shape(
                "optimizer",
                format!("param has {} entries, gradient has {}", value.len(), grad.len()),
            ));
        }
        match self {
            Optimizer::RmsProp { decay, eps, sq } => {
                let (decay, eps) = (*decay, *eps);
                let s = Self::ensure(sq, idx, value.len())?;
                for i in 0..value.len() {
                    let g = grad[i] as f64;
                    s[i] = decay * s[i] + (1.0 - decay) * g * g;
                    value[i] -= (lr * g / (s[i].sqrt() + eps)) as f32;
                }
            }
            Optimizer::Adam { beta1, beta2, eps, t, m, v } => {
                let (b1, b2, eps, t) = (*beta1, *beta2, *eps, *t as i32);
                let bc1 = 1.0 - b1.powi(t);
                let bc2 = 1.0 - b2.powi(t);
                let mslot = Self::ensure(m, idx, value.len())? as *mut Vec<f64>;
                let vslot = Self::ensure(v, idx, value.len())?;
                // two disjoint slots; split borrows via raw pointer
                let mslot = unsafe { &mut *mslot };
                for i in 0..value.len() {
                    let g = grad[i] as f64;
                    mslot[i] = b1 * mslot[i] + (1.0 - b1) * g;
                    vslot[i] = b2 * vslot[i] + (1.0 - b2) * g * g;
                    let mhat = mslot[i] / bc1;
                    let vhat = vslot[i] / bc2;
                    value[i] -= (lr * mhat / (vhat.sqrt() + eps)) as f32;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Float,
    UniformPrecision,
    MixedPrecision,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub regime: Regime,
    pub model: ModelConfig,
    /// Initial learning rate rho_0.
    pub rho0: f64,
    /// Override for the regime's default epoch count.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub patch: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// Weight bit width: fixed (UP) or target average (MP). None disables
    /// weight quantization.
    pub weight_bits: Option<f64>,
    /// Activation bit width, same semantics.
    pub act_bits: Option<f64>,
    /// Stop when validation RMSE has not improved for this many epochs.
    pub early_stop_patience: Option<usize>,
}

impl TrainConfig {
    pub fn new(regime: Regime, model: ModelConfig) -> Self {
        let rho0 = 1e-4;
        TrainConfig {
            regime,
            model,
            rho0,
            epochs: None,
            batch_size: 8,
            patch: 160,
            loss: LossConfig::default(),
            seed: 0,
            weight_bits: match regime {
                Regime::Float => None,
                _ => Some(4.0),
            },
            act_bits: None,
            early_stop_patience: None,
        }
    }

    /// (optimizer, epoch count) phases for the regime.
    fn phases(&self) -> Vec<(Optimizer, usize)> {
        match (self.regime, self.epochs) {
            (Regime::Float, e) => vec![(Optimizer::rmsprop(), e.unwrap_or(40))],
            (Regime::UniformPrecision, None) => {
                vec![(Optimizer::rmsprop(), 32), (Optimizer::adam(), 20)]
            }
            (Regime::UniformPrecision, Some(e)) => {
                // keep the 32:20 RMSprop/Adam split proportionally
                let first = e * 32 / 52;
                vec![(Optimizer::rmsprop(), first), (Optimizer::adam(), e - first)]
            }
            (Regime::MixedPrecision, e) => vec![(Optimizer::adam(), e.unwrap_or(60))],
        }
    }
}

/// One training patch: preprocessed input plus normalized GT and mask.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub input: PreprocessedInput,
    /// GT depth / D_max, 1x1xPxP.
    pub gt: Tensor,
    /// 1 where GT is valid.
    pub mask: Tensor,
}

/// Non-overlapping row-major tiling of one sample. Preprocessing (EDT/NNI)
/// is recomputed per patch from the cropped sparse map; patches whose crop
/// contains no valid sparse sample are skipped.
pub fn extract_patches(sample: &Sample, patch: usize) -> Result<Vec<TrainItem>> {
    let (_, _, h, w) = sample.depth_gt.nchw();
    if patch == 0 || patch > h || patch > w {
        return Err(Error::invalid(
            "extract_patches",
            format!("patch {patch} does not fit a {h}x{w} frame"),
        ));
    }
    let sparse = sample.sparse.to_tensor();
    let mut items = Vec::new();
    for by in 0..h / patch {
        for bx in 0..w / patch {
            let (y0, x0) = (by * patch, bx * patch);
            let crop1 = |t: &Tensor| crop(t, y0, x0, patch);
            let sparse_crop = crop1(&sparse);
            let d = SparseDepthMap::from_tensor(&sparse_crop)?;
            if d.valid_count() == 0 {
                continue;
            }
            let color = crop1(&sample.color);
            let input = preproc::preprocess(&d, &color, false)?;
            let gt_m = crop1(&sample.depth_gt);
            let gt = Tensor::new(
                gt_m.shape().to_vec(),
                gt_m.data().iter().map(|&v| v / D_MAX).collect(),
            )?;
            let mask = Tensor::new(
                gt.shape().to_vec(),
                gt.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
            )?;
            items.push(TrainItem { input, gt, mask });
        }
    }
    Ok(items)
}

fn crop(t: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let (n, c, h, w) = t.nchw();
    debug_assert_eq!(n, 1);
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            let base = ch * h * w + (y0 + y) * w + x0;
            data.extend_from_slice(&t.data()[base..base + size]);
        }
    }
    Tensor::new(vec![1, c, size, size], data).unwrap()
}

fn stack_items(items: &[&TrainItem]) -> (Tensor, Tensor, Tensor, Tensor) {
    let (_, _, h, w) = items[0].gt.nchw();
    let n = items.len();
    let mut input = Vec::with_capacity(n * 5 * h * w);
    let mut dnni = Vec::with_capacity(n * h * w);
    let mut gt = Vec::with_capacity(n * h * w);
    let mut mask = Vec::with_capacity(n * h * w);
    for it in items {
        input.extend_from_slice(it.input.stacked().data());
        dnni.extend_from_slice(it.input.depth_nni.data());
        gt.extend_from_slice(it.gt.data());
        mask.extend_from_slice(it.mask.data());
    }
    (
        Tensor::new(vec![n, 5, h, w], input).unwrap(),
        Tensor::new(vec![n, 1, h, w], dnni).unwrap(),
        Tensor::new(vec![n, 1, h, w], gt).unwrap(),
        Tensor::new(vec![n, 1, h, w], mask).unwrap(),
    )
}

/// Per-epoch history record.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_total: f64,
    pub train_lp: f64,
    pub train_ln: f64,
    pub penalty_w: f64,
    pub penalty_a: f64,
    pub val_rmse_mm: f64,
    pub val_mns: f64,
    /// Average integer weight bit width (32 when unquantized).
    pub avg_b_w: f64,
    /// Per-layer integer weight bit widths, forward order (MP trajectory).
    pub layer_bits: Vec<(String, u32)>,
}

pub struct TrainOutput {
    pub model: ModelParams,
    pub history: Vec<EpochStats>,
    pub stopped_early: bool,
}

/// CSV rendering of the history (one row per epoch).
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::new();
    let mut header = String::from(
        "epoch,lr,train_total,train_lp,train_ln,penalty_w,penalty_a,val_rmse_mm,val_mns,avg_b_w",
    );
    if let Some(first) = history.first() {
        for (name, _) in &first.layer_bits {
            let _ = write!(header, ",b_{name}");
        }
    }
    let _ = writeln!(s, "{header}");
    for e in history {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            e.epoch, e.lr, e.train_total, e.train_lp, e.train_ln, e.penalty_w, e.penalty_a,
            e.val_rmse_mm, e.val_mns, e.avg_b_w
        );
        for (_, b) in &e.layer_bits {
            let _ = write!(s, ",{b}");
        }
        let _ = writeln!(s);
    }
    s
}

/// Full-frame evaluation of a model over samples; metrics in mm.
pub fn evaluate(model: &ModelParams, samples: &[&Sample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "no samples"));
    }
    let (_, _, h, w) = samples[0].depth_gt.nchw();
    let n = samples.len();
    let mut pred = Vec::with_capacity(n * h * w);
    let mut gt = Vec::with_capacity(n * h * w);
    for s in samples {
        let input = preproc::preprocess(&s.sparse, &s.color, false)?;
        let p = model.predict(&input)?;
        pred.extend(p.data().iter().map(|&v| v * D_MAX * 1000.0));
        gt.extend(s.depth_gt.data().iter().map(|&v| v * 1000.0));
    }
    loss::metrics(
        &Tensor::new(vec![n, 1, h, w], pred)?,
        &Tensor::new(vec![n, 1, h, w], gt)?,
    )
}

/// Train/validation split: the manifest's `test` samples validate; when no
/// sample is marked, every 10th sample is held out.
pub fn split_samples(samples: &[Sample]) -> (Vec<&Sample>, Vec<&Sample>) {
    let marked = samples.iter().any(|s| s.split == "test");
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let is_val = if marked { s.split == "test" } else { i % 10 == 9 };
        if is_val {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

/// Run one training regime. UP/MP require `init` (a float or previously
/// quantized checkpoint); quantizers are attached here when absent.
pub fn train(config: &TrainConfig, samples: &[Sample], init: Option<ModelParams>) -> Result<TrainOutput> {
    config.loss.validate()?;
    if config.batch_size == 0 {
        return Err(Error::invalid("train", "batch size must be positive"));
    }
    let (train_samples, val_samples) = split_samples(samples);
    if train_samples.is_empty() {
        return Err(Error::invalid("train", "no training samples"));
    }

    let mut items = Vec::new();
    for s in &train_samples {
        items.extend(extract_patches(s, config.patch)?);
    }
    if items.is_empty() {
        return Err(Error::invalid("train", "no usable training patches"));
    }

    let mut model = match (config.regime, init) {
        (Regime::Float, Some(m)) => m,
        (Regime::Float, None) => model::build(config.model, config.seed),
        (_, None) => {
            return Err(Error::invalid(
                "train",
                "UP/MP regimes require a float checkpoint to initialize from",
            ))
        }
        (_, Some(m)) => m,
    };
    if config.regime != Regime::Float {
        let already = model.layers.iter().any(|l| l.wq.is_some() || l.aq.is_some());
        if !already {
            let plan = QuantPlan {
                mode: match config.regime {
                    Regime::UniformPrecision => PrecisionMode::Uniform,
                    _ => PrecisionMode::Mixed,
                },
                weight_bits: config.weight_bits,
                act_bits: config.act_bits,
                only_layers: None,
            };
            model.attach(&plan, Some(&items[0].input))?;
        }
    }

    // size-penalty bookkeeping (MP only): weight coefficient counts and
    // activation element counts at the training patch resolution
    let w_constraint = config.weight_bits.map(SizeConstraint::weights);
    let a_constraint = config.act_bits.map(SizeConstraint::activations);
    let patch_sizes = model.sizes(config.patch, config.patch)?;

    let phases = config.phases();
    let total_epochs: usize = phases.iter().map(|(_, e)| e).sum();
    let mut history: Vec<EpochStats> = Vec::new();
    let mut stopped_early = false;
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;
    let mut epoch = 0usize;

    'phases: for (mut optimizer, phase_epochs) in phases {
        for _ in 0..phase_epochs {
            let lr = cosine_lr(config.rho0, epoch, total_epochs.max(1))?;
            let mut order: Vec<usize> = (0..items.len()).collect();
            shuffle(&mut order, SplitMix64::for_index(config.seed, 0x5eed_0000 + epoch as u64));

            let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64); // total, lp, ln, pw, pa
            let mut batches = 0usize;
            for chunk in order.chunks(config.batch_size) {
                let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
                let (input, dnni, gt, mask) = stack_items(&batch);

                let mut tape = Tape::new();
                let fwd = model.forward_on_tape(&mut tape, &input, &dnni)?;
                let nodes = loss::loss_total(&mut tape, fwd.pred, &gt, &mask, &config.loss)?;

                let mut total = nodes.total;
                let mut pw_val = 0.0f64;
                let mut pa_val = 0.0f64;
                if let Some(c) = &w_constraint {
                    if !fwd.mp_weight_quants.is_empty() {
                        let counts: Vec<usize> = fwd
                            .mp_weight_quants
                            .iter()
                            .map(|&(l, _, _)| model.layers[l].weight.len())
                            .collect();
                        let (p, v) = penalty_node(&mut tape, &fwd.mp_weight_quants, &counts, c)?;
                        pw_val = v;
                        total = tape.add(total, p)?;
                    }
                }
                if let Some(c) = &a_constraint {
                    if !fwd.mp_act_quants.is_empty() {
                        let counts: Vec<usize> = fwd
                            .mp_act_quants
                            .iter()
                            .map(|&(l, _, _)| patch_sizes.layers[l].n_a)
                            .collect();
                        let (p, v) = penalty_node(&mut tape, &fwd.mp_act_quants, &counts, c)?;
                        pa_val = v;
                        total = tape.add(total, p)?;
                    }
                }

                let loss_val = tape.value(total).item() as f64;
                if !loss_val.is_finite() {
                    return Err(Error::NumericFailure {
                        context: format!("epoch {epoch}, batch {batches} (loss {loss_val})"),
                    });
                }
                sums.0 += loss_val;
                sums.1 += tape.value(nodes.lp).item() as f64;
                sums.2 += nodes.ln.map_or(0.0, |n| tape.value(n).item() as f64);
                sums.3 += pw_val;
                sums.4 += pa_val;
                batches += 1;

                let grads = tape.backward(total)?;
                let refs = model.param_refs();
                optimizer.begin_step();
                for (idx, r) in refs.iter().enumerate() {
                    if let Some(g) = grads.param(idx) {
                        let g = g.data().to_vec();
                        optimizer.step(idx, model.tensor_mut(*r).data_mut(), &g, lr)?;
                    }
                }
                clamp_quantizer_params(&mut model);
            }

            let b = batches.max(1) as f64;
            let (val_rmse_mm, val_mns) = if val_samples.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let r = evaluate(&model, &val_samples)?;
                (r.rmse_mm, r.mns)
            };
            let layer_bits: Vec<(String, u32)> = model
                .layers
                .iter()
                .filter_map(|l| l.wq.as_ref().map(|q| (l.name.clone(), q.bitwidths().0)))
                .collect();
            history.push(EpochStats {
                epoch,
                lr,
                train_total: sums.0 / b,
                train_lp: sums.1 / b,
                train_ln: sums.2 / b,
                penalty_w: sums.3 / b,
                penalty_a: sums.4 / b,
                val_rmse_mm,
                val_mns,
                avg_b_w: model.avg_weight_bits().unwrap_or(32.0),
                layer_bits,
            });
            epoch += 1;

            if let Some(patience) = config.early_stop_patience {
                if val_rmse_mm.is_finite() && val_rmse_mm < best_val {
                    best_val = val_rmse_mm;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best > patience {
                        stopped_early = true;
                        break 'phases;
                    }
                }
            }
        }
    }

    Ok(TrainOutput { model, history, stopped_early })
}

/// Differentiable lambda * max(0, sum N_l b_l - S_o)^2 from the quantizer
/// parameter nodes; returns the node and its current value.
fn penalty_node(
    tape: &mut Tape,
    quants: &[(usize, crate::graph::NodeId, crate::graph::NodeId)],
    counts: &[usize],
    constraint: &SizeConstraint,
) -> Result<(crate::graph::NodeId, f64)> {
    let mut acc = None;
    for (&(_, s, t), &n) in quants.iter().zip(counts) {
        let b = tape.bitwidth_cont(s, t)?;
        let term = tape.scale(b, n as f32);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let total = acc.expect("at least one quantizer");
    let target = constraint.target_bits(counts);
    let shifted = tape.add_const(total, -(target as f32));
    let clipped = tape.relu(shifted);
    let sq = tape.mul(clipped, clipped)?;
    let p = tape.scale(sq, constraint.lambda as f32);
    Ok((p, tape.value(p).item() as f64))
}

/// Keep learned quantizer scalars in a sane range: step never above the
/// threshold (b >= 2) and thresholds finite.
fn clamp_quantizer_params(model: &mut ModelParams) {
    for r in model.param_refs() {
        match r.kind {
            ParamKind::WqLogStep | ParamKind::AqLogStep => {
                let (t_kind, s_kind) = if r.kind == ParamKind::WqLogStep {
                    (ParamKind::WqLogThresh, ParamKind::WqLogStep)
                } else {
                    (ParamKind::AqLogThresh, ParamKind::AqLogStep)
                };
                let t = model.tensor(crate::model::ParamRef { layer: r.layer, kind: t_kind }).item();
                let s = model.tensor_mut(crate::model::ParamRef { layer: r.layer, kind: s_kind });
                if s.item() > t {
                    s.data_mut()[0] = t;
                }
            }
            _ => {}
        }
    }
}

fn shuffle(order: &mut [usize], mut rng: SplitMix64) {
    for i in (1..order.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
}
