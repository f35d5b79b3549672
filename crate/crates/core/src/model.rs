//! UNet-like encoder-decoder with a residual head over the NNI guess,
//! including fake-quantizer attachment for QAT, size accounting, and
//! checkpoint I/O.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{NodeId, QuantMode, Tape};
use crate::kernels::Pad;
use crate::preproc::PreprocessedInput;
use crate::quant::{self, PrecisionMode, QuantTarget, QuantizerParams};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Architecture knobs. Channels double per scale: ch(s) = n_f * 2^(s-1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_f: usize,
    pub n_s: usize,
}

impl ModelConfig {
    pub fn new(n_f: usize, n_s: usize) -> Result<Self> {
        if n_f < 1 || n_s < 2 {
            return Err(Error::invalid(
                "model config",
                format!("need n_f >= 1 and n_s >= 2, got n_f={n_f}, n_s={n_s}"),
            ));
        }
        Ok(ModelConfig { n_f, n_s })
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.n_f << (scale - 1)
    }

    /// H and W must be multiples of this for pooling to be exact.
    pub fn required_multiple(&self) -> usize {
        1 << (self.n_s - 1)
    }
}

/// Learnable quantizer attached to one tensor. The log-domain scalars are
/// stored as 1-element tensors so the optimizers treat them uniformly.
#[derive(Debug, Clone)]
pub struct LayerQuant {
    pub mode: PrecisionMode,
    /// Fixed bit width in uniform mode; initial average in mixed mode.
    pub bits: u32,
    /// log2 of the step d (mixed mode only; derived from the threshold in
    /// uniform mode).
    pub log_step: Tensor,
    /// log2 of the clip threshold x_max.
    pub log_thresh: Tensor,
}

impl LayerQuant {
    pub fn step(&self) -> f64 {
        match self.mode {
            PrecisionMode::Uniform => {
                let levels = ((1u64 << (self.bits - 1)) - 1) as f64;
                self.x_max() / levels
            }
            PrecisionMode::Mixed => (self.log_step.item() as f64).exp2(),
        }
    }

    pub fn x_max(&self) -> f64 {
        (self.log_thresh.item() as f64).exp2()
    }

    pub fn bitwidths(&self) -> (u32, f64) {
        match self.mode {
            PrecisionMode::Uniform => (self.bits, self.bits as f64),
            PrecisionMode::Mixed => quant::infer_bitwidth(self.step(), self.x_max()),
        }
    }

    pub fn params(&self, target: QuantTarget) -> Result<QuantizerParams> {
        match self.mode {
            PrecisionMode::Uniform => QuantizerParams::uniform(self.x_max(), self.bits, target),
            PrecisionMode::Mixed => QuantizerParams::mixed(self.step(), self.x_max(), target),
        }
    }

    fn quant_mode(&self) -> QuantMode {
        match self.mode {
            PrecisionMode::Uniform => QuantMode::Uniform { bits: self.bits },
            PrecisionMode::Mixed => QuantMode::Mixed,
        }
    }
}

/// One 3x3 convolution layer with optional weight/activation quantizers.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    /// (c_out, c_in, 3, 3)
    pub weight: Tensor,
    /// (c_out,)
    pub bias: Tensor,
    pub wq: Option<LayerQuant>,
    pub aq: Option<LayerQuant>,
}

/// Full parameter set; layers in forward order, final 1-channel layer last.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layers: Vec<ConvLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    WqLogStep,
    WqLogThresh,
    AqLogStep,
    AqLogThresh,
}

/// Stable handle to one learnable tensor inside [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub layer: usize,
    pub kind: ParamKind,
}

/// Node handles produced by one forward build.
pub struct ForwardNodes {
    /// Normalized prediction D_NNI + residual.
    pub pred: NodeId,
    /// (layer index, log-step node, log-threshold node) for every mixed
    /// weight quantizer; feeds the size penalty.
    pub mp_weight_quants: Vec<(usize, NodeId, NodeId)>,
    /// Same for mixed activation quantizers.
    pub mp_act_quants: Vec<(usize, NodeId, NodeId)>,
}

/// Which quantizers [`ModelParams::attach`] should install.
#[derive(Debug, Clone)]
pub struct QuantPlan {
    pub mode: PrecisionMode,
    /// Weight bit width (fixed in uniform mode, initial average in mixed
    /// mode). `None` leaves weights unquantized.
    pub weight_bits: Option<f64>,
    /// Activation bit width; `None` leaves activations unquantized.
    pub act_bits: Option<f64>,
    /// Restrict to these layers; `None` means every layer but the final.
    pub only_layers: Option<Vec<String>>,
}

fn layer_plan(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    for s in 1..=config.n_s {
        let cin = if s == 1 { 5 } else { config.channels(s - 1) };
        let c = config.channels(s);
        out.push((format!("enc{s}a"), cin, c));
        out.push((format!("enc{s}b"), c, c));
    }
    for s in (1..config.n_s).rev() {
        let c = config.channels(s);
        out.push((format!("dec{s}a"), config.channels(s + 1) + c, c));
        out.push((format!("dec{s}b"), c, c));
    }
    out.push(("final".to_string(), config.channels(1), 1));
    out
}

/// Kaiming-uniform fan-in initialization; the final layer starts at zero so
/// the untrained model reproduces the NNI guess exactly (residual identity).
pub fn build(config: ModelConfig, seed: u64) -> ModelParams {
    let plan = layer_plan(&config);
    let last = plan.len() - 1;
    let layers = plan
        .into_iter()
        .enumerate()
        .map(|(idx, (name, cin, cout))| {
            let n = cout * cin * 9;
            let weight = if idx == last {
                Tensor::zeros(&[cout, cin, 3, 3])
            } else {
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                let mut rng = SplitMix64::for_index(seed, idx as u64);
                let data: Vec<f32> = (0..n)
                    .map(|_| rng.uniform(-bound as f32, bound as f32))
                    .collect();
                Tensor::new(vec![cout, cin, 3, 3], data).unwrap()
            };
            ConvLayer {
                name,
                weight,
                bias: Tensor::zeros(&[cout]),
                wq: None,
                aq: None,
            }
        })
        .collect();
    ModelParams { config, layers }
}

/// Per-layer entry of the size report.
#[derive(Debug, Clone)]
pub struct LayerSize {
    pub name: String,
    /// Weight + bias coefficients.
    pub n_w: usize,
    pub b_w: u32,
    /// Activation elements (conv output) at the reference resolution.
    pub n_a: usize,
    pub b_a: u32,
    pub s_w_bits: f64,
    pub s_a_bits: f64,
}

#[derive(Debug, Clone)]
pub struct SizeReport {
    pub layers: Vec<LayerSize>,
    pub s_w_bits: f64,
    pub s_a_bits: f64,
    pub avg_b_w: f64,
    pub avg_b_a: f64,
    pub mparams: f64,
}

impl SizeReport {
    pub fn s_w_mb(&self) -> f64 {
        quant::bits_to_mb(self.s_w_bits)
    }

    pub fn s_a_mb(&self) -> f64 {
        quant::bits_to_mb(self.s_a_bits)
    }

    /// Plain-text allocation table (per-layer bit widths and sizes).
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:>10} {:>5} {:>12} {:>5} {:>14} {:>14}",
            "layer", "N_W", "b_W", "N_A", "b_A", "S_W[bits]", "S_A[bits]"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<8} {:>10} {:>5} {:>12} {:>5} {:>14.0} {:>14.0}",
                l.name, l.n_w, l.b_w, l.n_a, l.b_a, l.s_w_bits, l.s_a_bits
            );
        }
        let _ = writeln!(
            s,
            "total    S_W = {:.0} bits = {:.3} MB, S_A = {:.0} bits = {:.3} MB",
            self.s_w_bits,
            self.s_w_mb(),
            self.s_a_bits,
            self.s_a_mb()
        );
        let _ = writeln!(
            s,
            "average  b_W = {:.3}, b_A = {:.3}, params = {:.3} MParams",
            self.avg_b_w, self.avg_b_a, self.mparams
        );
        s
    }
}

impl ModelParams {
    /// Deterministic enumeration of every learnable tensor: per layer
    /// weight, bias, then quantizer scalars. Uniform-mode quantizers learn
    /// only the threshold.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut refs = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            refs.push(ParamRef { layer: i, kind: ParamKind::Weight });
            refs.push(ParamRef { layer: i, kind: ParamKind::Bias });
            if let Some(q) = &l.wq {
                if q.mode == PrecisionMode::Mixed {
                    refs.push(ParamRef { layer: i, kind: ParamKind::WqLogStep });
                }
                refs.push(ParamRef { layer: i, kind: ParamKind::WqLogThresh });
            }
            if let Some(q) = &l.aq {
                if q.mode == PrecisionMode::Mixed {
                    refs.push(ParamRef { layer: i, kind: ParamKind::AqLogStep });
                }
                refs.push(ParamRef { layer: i, kind: ParamKind::AqLogThresh });
            }
        }
        refs
    }

    pub fn tensor(&self, r: ParamRef) -> &Tensor {
        let l = &self.layers[r.layer];
        match r.kind {
            ParamKind::Weight => &l.weight,
            ParamKind::Bias => &l.bias,
            ParamKind::WqLogStep => &l.wq.as_ref().unwrap().log_step,
            ParamKind::WqLogThresh => &l.wq.as_ref().unwrap().log_thresh,
            ParamKind::AqLogStep => &l.aq.as_ref().unwrap().log_step,
            ParamKind::AqLogThresh => &l.aq.as_ref().unwrap().log_thresh,
        }
    }

    pub fn tensor_mut(&mut self, r: ParamRef) -> &mut Tensor {
        let l = &mut self.layers[r.layer];
        match r.kind {
            ParamKind::Weight => &mut l.weight,
            ParamKind::Bias => &mut l.bias,
            ParamKind::WqLogStep => &mut l.wq.as_mut().unwrap().log_step,
            ParamKind::WqLogThresh => &mut l.wq.as_mut().unwrap().log_thresh,
            ParamKind::AqLogStep => &mut l.aq.as_mut().unwrap().log_step,
            ParamKind::AqLogThresh => &mut l.aq.as_mut().unwrap().log_thresh,
        }
    }

    pub fn mparams(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum::<usize>() as f64
            / 1e6
    }

    fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let m = self.config.required_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid(
                "forward",
                format!("input {h}x{w} must have height and width divisible by {m} (2^(n_s-1))"),
            ));
        }
        Ok(())
    }

    /// Build the forward graph on `tape`. `input` is Nx5xHxW (stacked
    /// D_NNI, E, C), `dnni` the Nx1xHxW residual base. Parameter ids equal
    /// indices into [`ModelParams::param_refs`].
    pub fn forward_on_tape(&self, tape: &mut Tape, input: &Tensor, dnni: &Tensor) -> Result<ForwardNodes> {
        let (n, c, h, w) = input.nchw();
        if c != 5 {
            return Err(Error::shape("forward", format!("input must have 5 channels, got {c}")));
        }
        let (dn, dc, dh, dw) = dnni.nchw();
        if dn != n || dc != 1 || dh != h || dw != w {
            return Err(Error::shape(
                "forward",
                format!("dnni must be {n}x1x{h}x{w}, got {:?}", dnni.shape()),
            ));
        }
        self.check_resolution(h, w)?;

        let refs = self.param_refs();
        let pid = |layer: usize, kind: ParamKind| {
            refs.iter()
                .position(|r| r.layer == layer && r.kind == kind)
                .expect("param ref")
        };

        let mut mp_weight_quants = Vec::new();
        let mut mp_act_quants = Vec::new();

        let mut apply = |tape: &mut Tape, idx: usize, x: NodeId, relu: bool| -> Result<NodeId> {
            let l = &self.layers[idx];
            let mut wnode = tape.param(l.weight.clone(), pid(idx, ParamKind::Weight));
            if let Some(q) = &l.wq {
                let t = tape.param(q.log_thresh.clone(), pid(idx, ParamKind::WqLogThresh));
                let params = match q.mode {
                    PrecisionMode::Uniform => vec![t],
                    PrecisionMode::Mixed => {
                        let s = tape.param(q.log_step.clone(), pid(idx, ParamKind::WqLogStep));
                        mp_weight_quants.push((idx, s, t));
                        vec![s, t]
                    }
                };
                wnode = tape.fake_quant(wnode, &params, q.quant_mode(), false)?;
            }
            let bnode = tape.param(l.bias.clone(), pid(idx, ParamKind::Bias));
            let mut y = tape.conv2d(x, wnode, bnode, 1, Pad::Same)?;
            if relu {
                y = tape.relu(y);
                if let Some(q) = &l.aq {
                    let t = tape.param(q.log_thresh.clone(), pid(idx, ParamKind::AqLogThresh));
                    let params = match q.mode {
                        PrecisionMode::Uniform => vec![t],
                        PrecisionMode::Mixed => {
                            let s = tape.param(q.log_step.clone(), pid(idx, ParamKind::AqLogStep));
                            mp_act_quants.push((idx, s, t));
                            vec![s, t]
                        }
                    };
                    y = tape.fake_quant(y, &params, q.quant_mode(), false)?;
                }
            }
            Ok(y)
        };

        let input_node = tape.constant(input.clone());
        let dnni_node = tape.constant(dnni.clone());

        let n_s = self.config.n_s;
        let mut skips = Vec::new();
        let mut x = input_node;
        let mut li = 0usize;
        for s in 1..=n_s {
            if s > 1 {
                x = tape.maxpool2(x)?;
            }
            x = apply(tape, li, x, true)?;
            li += 1;
            x = apply(tape, li, x, true)?;
            li += 1;
            if s < n_s {
                skips.push(x);
            }
        }
        for s in (1..n_s).rev() {
            x = tape.upsample2(x)?;
            x = tape.concat_channels(x, skips[s - 1])?;
            x = apply(tape, li, x, true)?;
            li += 1;
            x = apply(tape, li, x, true)?;
            li += 1;
        }
        let residual = apply(tape, li, x, false)?;
        let pred = tape.add(dnni_node, residual)?;
        Ok(ForwardNodes { pred, mp_weight_quants, mp_act_quants })
    }

    /// Convenience inference: normalized prediction for one preprocessed
    /// input.
    pub fn predict(&self, input: &PreprocessedInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, &input.stacked(), &input.depth_nni)?;
        Ok(tape.value(out.pred).clone())
    }

    /// Size accounting at a reference resolution. Unquantized tensors count
    /// at 32 bits; the final layer is always float32.
    pub fn sizes(&self, height: usize, width: usize) -> Result<SizeReport> {
        self.check_resolution(height, width)?;
        let n_s = self.config.n_s;
        // spatial scale per layer in forward order
        let mut scales = Vec::new();
        for s in 1..=n_s {
            scales.push(s);
            scales.push(s);
        }
        for s in (1..n_s).rev() {
            scales.push(s);
            scales.push(s);
        }
        scales.push(1);

        let mut layers = Vec::new();
        let (mut sw, mut sa, mut nw_tot, mut na_tot) = (0.0f64, 0.0f64, 0usize, 0usize);
        for (l, scale) in self.layers.iter().zip(&scales) {
            let (h, w) = (height >> (scale - 1), width >> (scale - 1));
            let cout = l.weight.shape()[0];
            let n_w = l.weight.len() + l.bias.len();
            let n_a = cout * h * w;
            let b_w = l.wq.as_ref().map_or(32, |q| q.bitwidths().0);
            let b_a = l.aq.as_ref().map_or(32, |q| q.bitwidths().0);
            let s_w_bits = n_w as f64 * b_w as f64;
            let s_a_bits = n_a as f64 * b_a as f64;
            sw += s_w_bits;
            sa += s_a_bits;
            nw_tot += n_w;
            na_tot += n_a;
            layers.push(LayerSize {
                name: l.name.clone(),
                n_w,
                b_w,
                n_a,
                b_a,
                s_w_bits,
                s_a_bits,
            });
        }
        Ok(SizeReport {
            layers,
            s_w_bits: sw,
            s_a_bits: sa,
            avg_b_w: sw / nw_tot as f64,
            avg_b_a: sa / na_tot as f64,
            mparams: self.mparams(),
        })
    }

    /// Average integer bit width over quantized weight tensors, weighted by
    /// coefficient count. `None` when nothing is quantized.
    pub fn avg_weight_bits(&self) -> Option<f64> {
        let mut bits = 0.0f64;
        let mut count = 0usize;
        for l in &self.layers {
            if let Some(q) = &l.wq {
                let n = l.weight.len();
                bits += n as f64 * q.bitwidths().0 as f64;
                count += n;
            }
        }
        (count > 0).then(|| bits / count as f64)
    }

    /// Install fake quantizers per `plan`. Weight thresholds calibrate to
    /// the tensor max-abs; activation thresholds to the max-abs observed on
    /// a float forward pass over `calib`.
    pub fn attach(&mut self, plan: &QuantPlan, calib: Option<&PreprocessedInput>) -> Result<()> {
        let final_idx = self.layers.len() - 1;
        if let Some(names) = &plan.only_layers {
            for n in names {
                let idx = self
                    .layers
                    .iter()
                    .position(|l| &l.name == n)
                    .ok_or_else(|| Error::invalid("attach", format!("unknown layer {n}")))?;
                if idx == final_idx {
                    return Err(Error::invalid("attach", "the final layer stays at float32"));
                }
            }
        }
        let in_scope = |name: &str, idx: usize| {
            idx != final_idx
                && plan
                    .only_layers
                    .as_ref()
                    .is_none_or(|ns| ns.iter().any(|n| n == name))
        };

        let act_max = if plan.act_bits.is_some() {
            let calib = calib.ok_or_else(|| {
                Error::invalid("attach", "activation quantization requires a calibration input")
            })?;
            Some(self.activation_maxabs(calib)?)
        } else {
            None
        };

        for idx in 0..self.layers.len() {
            let name = self.layers[idx].name.clone();
            if !in_scope(&name, idx) {
                continue;
            }
            if let Some(bits) = plan.weight_bits {
                let x_max = (self.layers[idx].weight.max_abs() as f64).max(1e-6);
                self.layers[idx].wq = Some(make_quant(plan.mode, bits, x_max)?);
            }
            if let Some(bits) = plan.act_bits {
                let x_max = (act_max.as_ref().unwrap()[idx] as f64).max(1e-6);
                self.layers[idx].aq = Some(make_quant(plan.mode, bits, x_max)?);
            }
        }
        Ok(())
    }

    /// Remove every quantizer; the float forward is restored bit-exactly.
    pub fn detach(&mut self) {
        for l in &mut self.layers {
            l.wq = None;
            l.aq = None;
        }
    }

    /// Max-abs of each layer's post-ReLU output on a float forward pass.
    fn activation_maxabs(&self, calib: &PreprocessedInput) -> Result<Vec<f32>> {
        let mut float_model = self.clone();
        float_model.detach();
        let mut tape = Tape::new();
        let input = calib.stacked();
        // rebuild layer-by-layer to record intermediate activations
        let nodes = float_model.forward_with_activations(&mut tape, &input, &calib.depth_nni)?;
        Ok(nodes.iter().map(|&nid| tape.value(nid).max_abs()).collect())
    }

    /// Forward that returns each layer's post-ReLU node (final layer: the
    /// conv output itself).
    fn forward_with_activations(&self, tape: &mut Tape, input: &Tensor, dnni: &Tensor) -> Result<Vec<NodeId>> {
        let (_, c, h, w) = input.nchw();
        if c != 5 {
            return Err(Error::shape("forward", format!("input must have 5 channels, got {c}")));
        }
        self.check_resolution(h, w)?;
        let mut acts = Vec::new();
        let mut apply = |tape: &mut Tape, idx: usize, x: NodeId, relu: bool| -> Result<NodeId> {
            let l = &self.layers[idx];
            let wnode = tape.constant(l.weight.clone());
            let bnode = tape.constant(l.bias.clone());
            let mut y = tape.conv2d(x, wnode, bnode, 1, Pad::Same)?;
            if relu {
                y = tape.relu(y);
            }
            acts.push(y);
            Ok(y)
        };
        let input_node = tape.constant(input.clone());
        let _dnni_node = tape.constant(dnni.clone());
        let n_s = self.config.n_s;
        let mut skips = Vec::new();
        let mut x = input_node;
        let mut li = 0usize;
        for s in 1..=n_s {
            if s > 1 {
                x = tape.maxpool2(x)?;
            }
            x = apply(tape, li, x, true)?;
            li += 1;
            x = apply(tape, li, x, true)?;
            li += 1;
            if s < n_s {
                skips.push(x);
            }
        }
        for s in (1..n_s).rev() {
            x = tape.upsample2(x)?;
            x = tape.concat_channels(x, skips[s - 1])?;
            x = apply(tape, li, x, true)?;
            li += 1;
            x = apply(tape, li, x, true)?;
            li += 1;
        }
        apply(tape, li, x, false)?;
        Ok(acts)
    }

    /// Write a checkpoint directory: manifest.txt plus one DTB blob per
    /// tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "# depth-completion checkpoint");
        let _ = writeln!(manifest, "config n_f={} n_s={}", self.config.n_f, self.config.n_s);
        for l in &self.layers {
            let sh = l.weight.shape();
            let _ = writeln!(manifest, "layer {} out={} in={}", l.name, sh[0], sh[1]);
            if let Some(q) = &l.wq {
                let _ = writeln!(manifest, "wq {} {}", l.name, quant_line(q));
            }
            if let Some(q) = &l.aq {
                let _ = writeln!(manifest, "aq {} {}", l.name, quant_line(q));
            }
            l.weight.write_dtb(&dir.join(format!("{}.weight.dtb", l.name)))?;
            l.bias.write_dtb(&dir.join(format!("{}.bias.dtb", l.name)))?;
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<ModelParams> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut config = None;
        let mut quants: Vec<(bool, String, LayerQuant)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("config") => {
                    let mut n_f = None;
                    let mut n_s = None;
                    for kv in parts {
                        if let Some(v) = kv.strip_prefix("n_f=") {
                            n_f = v.parse().ok();
                        } else if let Some(v) = kv.strip_prefix("n_s=") {
                            n_s = v.parse().ok();
                        }
                    }
                    let (n_f, n_s) = n_f
                        .zip(n_s)
                        .ok_or_else(|| Error::format(&path, format!("bad config line: {line}")))?;
                    config = Some(ModelConfig::new(n_f, n_s)?);
                }
                Some("layer") => {}
                Some(tag @ ("wq" | "aq")) => {
                    let name = parts
                        .next()
                        .ok_or_else(|| Error::format(&path, format!("bad quant line: {line}")))?
                        .to_string();
                    let q = parse_quant_line(&path, line, parts)?;
                    quants.push((tag == "wq", name, q));
                }
                _ => return Err(Error::format(&path, format!("unknown manifest line: {line}"))),
            }
        }
        let config = config.ok_or_else(|| Error::format(&path, "missing config line".to_string()))?;
        let mut model = build(config, 0);
        for l in &mut model.layers {
            let w = Tensor::read_dtb(&dir.join(format!("{}.weight.dtb", l.name)))?;
            if w.shape() != l.weight.shape() {
                return Err(Error::shape(
                    "checkpoint load",
                    format!("{}: expected {:?}, got {:?}", l.name, l.weight.shape(), w.shape()),
                ));
            }
            let b = Tensor::read_dtb(&dir.join(format!("{}.bias.dtb", l.name)))?;
            if b.shape() != l.bias.shape() {
                return Err(Error::shape(
                    "checkpoint load",
                    format!("{} bias: expected {:?}, got {:?}", l.name, l.bias.shape(), b.shape()),
                ));
            }
            l.weight = w;
            l.bias = b;
        }
        for (is_w, name, q) in quants {
            let l = model
                .layers
                .iter_mut()
                .find(|l| l.name == name)
                .ok_or_else(|| Error::format(&path, format!("quantizer for unknown layer {name}")))?;
            if is_w {
                l.wq = Some(q);
            } else {
                l.aq = Some(q);
            }
        }
        Ok(model)
    }

    /// Fixed-point export: quantized weights stored as integer lattice
    /// codes (i32 DTB blobs) plus their (d, x_max); float tensors stored
    /// as-is.
    pub fn export_fixed_point(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "# fixed-point export");
        let _ = writeln!(manifest, "config n_f={} n_s={}", self.config.n_f, self.config.n_s);
        for l in &self.layers {
            match &l.wq {
                Some(q) => {
                    let phi = q.params(QuantTarget::Weights)?;
                    let codes = quant::quantize_codes(&l.weight, &phi);
                    crate::tensor::write_dtb_i32(
                        &dir.join(format!("{}.weight.codes.dtb", l.name)),
                        l.weight.shape(),
                        &codes,
                    )?;
                    let _ = writeln!(
                        manifest,
                        "codes {} d={} x_max={} bits={}",
                        l.name, phi.step, phi.x_max, phi.bits
                    );
                }
                None => {
                    l.weight.write_dtb(&dir.join(format!("{}.weight.dtb", l.name)))?;
                    let _ = writeln!(manifest, "float {}", l.name);
                }
            }
            l.bias.write_dtb(&dir.join(format!("{}.bias.dtb", l.name)))?;
            if let Some(q) = &l.aq {
                let phi = q.params(QuantTarget::Activations)?;
                let _ = writeln!(
                    manifest,
                    "act {} d={} x_max={} bits={}",
                    l.name, phi.step, phi.x_max, phi.bits
                );
            }
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }
}

fn make_quant(mode: PrecisionMode, bits: f64, x_max: f64) -> Result<LayerQuant> {
    if bits < 2.0 {
        return Err(Error::invalid("attach", format!("bit width must be >= 2, got {bits}")));
    }
    match mode {
        PrecisionMode::Uniform => {
            let b = bits.round() as u32;
            Ok(LayerQuant {
                mode,
                bits: b,
                log_step: Tensor::scalar(0.0),
                log_thresh: Tensor::scalar(x_max.log2() as f32),
            })
        }
        PrecisionMode::Mixed => {
            // start exactly at the average: d = x_max / (2^(b-1) - 1).
            // The log scalars live in f32, whose rounding can push the
            // inferred integer bit width one past the target, so nudge the
            // step upward by ulps until the inferred width matches.
            // a quarter-bit margin inside the budget keeps the integer
            // width at the target even when the learned step drifts a
            // little during QAT; starting exactly on the 2^(b-1)-1 level
            // boundary lets any downward step movement tip the report to
            // b+1
            let levels = (bits - 0.25 - 1.0).exp2() - 1.0;
            let d = x_max / levels.max(1.0);
            let target = bits.ceil() as u32;
            let mut log_step = d.log2() as f32;
            loop {
                let q = LayerQuant {
                    mode,
                    bits: bits.round() as u32,
                    log_step: Tensor::scalar(log_step),
                    log_thresh: Tensor::scalar(x_max.log2() as f32),
                };
                if q.bitwidths().0 <= target {
                    return Ok(q);
                }
                log_step = log_step.next_up();
            }
        }
    }
}

fn quant_line(q: &LayerQuant) -> String {
    let mode = match q.mode {
        PrecisionMode::Uniform => "uniform",
        PrecisionMode::Mixed => "mixed",
    };
    format!(
        "mode={mode} bits={} log_step={} log_thresh={}",
        q.bits,
        q.log_step.item(),
        q.log_thresh.item()
    )
}

fn parse_quant_line<'a>(
    path: &Path,
    line: &str,
    parts: impl Iterator<Item = &'a str>,
) -> Result<LayerQuant> {
    let mut mode = None;
    let mut bits = None;
    let mut log_step = None;
    let mut log_thresh = None;
    for kv in parts {
        if let Some(v) = kv.strip_prefix("mode=") {
            mode = match v {
                "uniform" => Some(PrecisionMode::Uniform),
                "mixed" => Some(PrecisionMode::Mixed),
                _ => None,
            };
        } else if let Some(v) = kv.strip_prefix("bits=") {
            bits = v.parse::<u32>().ok();
        } else if let Some(v) = kv.strip_prefix("log_step=") {
            log_step = v.parse::<f32>().ok();
        } else if let Some(v) = kv.strip_prefix("log_thresh=") {
            log_thresh = v.parse::<f32>().ok();
        }
    }
    match (mode, bits, log_step, log_thresh) {
        (Some(mode), Some(bits), Some(s), Some(t)) => Ok(LayerQuant {
            mode,
            bits,
            log_step: Tensor::scalar(s),
            log_thresh: Tensor::scalar(t),
        }),
        _ => Err(Error::format(path, format!("bad quant line: {line}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preproc::{self, SparseDepthMap};

    fn toy_input(h: usize, w: usize) -> PreprocessedInput {
        let mut depth = vec![0.0f32; h * w];
        depth[h / 2 * w + w / 2] = 5.0;
        depth[h * w - 1] = 7.0;
        let d = SparseDepthMap::new(h, w, depth).unwrap();
        let color = Tensor::full(&[1, 3, h, w], 0.5);
        preproc::preprocess(&d, &color, false).unwrap()
    }

    #[test]
    fn doubling_rule() {
        let c = ModelConfig::new(8, 3).unwrap();
        assert_eq!((c.channels(1), c.channels(2), c.channels(3)), (8, 16, 32));
        assert_eq!(c.required_multiple(), 4);
    }

    #[test]
    fn layer_shapes_and_names() {
        let m = build(ModelConfig::new(8, 3).unwrap(), 1);
        let names: Vec<&str> = m.layers.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(
            names,
            ["enc1a", "enc1b", "enc2a", "enc2b", "enc3a", "enc3b", "dec2a", "dec2b", "dec1a", "dec1b", "final"]
        );
        assert_eq!(m.layers[0].weight.shape(), &[8, 5, 3, 3]);
        assert_eq!(m.layers[6].weight.shape(), &[16, 48, 3, 3]);
        assert_eq!(m.layers[10].weight.shape(), &[1, 8, 3, 3]);
        // final layer zero-initialized
        assert!(m.layers[10].weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_init() {
        let a = build(ModelConfig::new(4, 2).unwrap(), 9);
        let b = build(ModelConfig::new(4, 2).unwrap(), 9);
        for (x, y) in a.layers.iter().zip(&b.layers) {
            assert_eq!(x.weight, y.weight);
        }
        let c = build(ModelConfig::new(4, 2).unwrap(), 10);
        assert_ne!(a.layers[0].weight, c.layers[0].weight);
    }

    #[test]
    fn residual_identity_at_init() {
        let m = build(ModelConfig::new(4, 2).unwrap(), 3);
        let inp = toy_input(8, 8);
        let pred = m.predict(&inp).unwrap();
        // zero final layer means the output equals the NNI guess exactly
        assert_eq!(pred, inp.depth_nni);
    }

    #[test]
    fn rejects_indivisible_resolution() {
        let m = build(ModelConfig::new(4, 3).unwrap(), 3);
        let inp = toy_input(10, 8);
        let err = m.predict(&inp).unwrap_err().to_string();
        assert!(err.contains('4'), "{err}");
    }

    #[test]
    fn sizes_resolution_quadratic() {
        let m = build(ModelConfig::new(4, 2).unwrap(), 3);
        let a = m.sizes(16, 16).unwrap();
        let b = m.sizes(32, 32).unwrap();
        assert!((b.s_a_bits / a.s_a_bits - 4.0).abs() < 1e-12);
        assert_eq!(a.s_w_bits, b.s_w_bits);
        // all-float model: S_W = 32 * total coefficient count
        let n: usize = m.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum();
        assert_eq!(a.s_w_bits, 32.0 * n as f64);
    }

    #[test]
    fn attach_detach_round_trip() {
        let mut m = build(ModelConfig::new(4, 2).unwrap(), 3);
        let inp = toy_input(8, 8);
        let float_pred = m.predict(&inp).unwrap();
        let plan = QuantPlan {
            mode: PrecisionMode::Uniform,
            weight_bits: Some(4.0),
            act_bits: Some(8.0),
            only_layers: None,
        };
        m.attach(&plan, Some(&inp)).unwrap();
        assert!(m.layers[0].wq.is_some() && m.layers[0].aq.is_some());
        assert!(m.layers.last().unwrap().wq.is_none());
        m.detach();
        assert_eq!(m.predict(&inp).unwrap(), float_pred);
    }

    #[test]
    fn attach_32_bits_is_nearly_exact() {
        let mut m = build(ModelConfig::new(4, 2).unwrap(), 7);
        // give the final layer nonzero weights so the residual is active
        {
            let last = m.layers.len() - 1;
            for v in m.layers[last].weight.data_mut() {
                *v = 0.01;
            }
        }
        let inp = toy_input(8, 8);
        let float_pred = m.predict(&inp).unwrap();
        let plan = QuantPlan {
            mode: PrecisionMode::Uniform,
            weight_bits: Some(32.0),
            act_bits: None,
            only_layers: None,
        };
        m.attach(&plan, None).unwrap();
        let q_pred = m.predict(&inp).unwrap();
        for (a, b) in float_pred.data().iter().zip(q_pred.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn attach_rejects_unknown_layer_and_final() {
        let mut m = build(ModelConfig::new(4, 2).unwrap(), 3);
        let bad = QuantPlan {
            mode: PrecisionMode::Uniform,
            weight_bits: Some(4.0),
            act_bits: None,
            only_layers: Some(vec!["nope".into()]),
        };
        assert!(m.attach(&bad, None).is_err());
        let final_plan = QuantPlan {
            mode: PrecisionMode::Uniform,
            weight_bits: Some(4.0),
            act_bits: None,
            only_layers: Some(vec!["final".into()]),
        };
        assert!(m.attach(&final_plan, None).is_err());
    }

    #[test]
    fn mixed_attach_starts_at_average() {
        let mut m = build(ModelConfig::new(4, 2).unwrap(), 3);
        let plan = QuantPlan {
            mode: PrecisionMode::Mixed,
            weight_bits: Some(4.0),
            act_bits: None,
            only_layers: None,
        };
        m.attach(&plan, None).unwrap();
        for l in &m.layers[..m.layers.len() - 1] {
            let q = l.wq.as_ref().unwrap();
            let (bi, bc) = q.bitwidths();
            // integer width meets the budget; the continuous width starts a
            // quarter bit inside it so drift during QAT cannot tip the report
            assert_eq!(bi, 4);
            assert!((bc - 3.75).abs() < 1e-4, "{bc}");
        }
        assert!((m.avg_weight_bits().unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build(ModelConfig::new(4, 2).unwrap(), 11);
        let plan = QuantPlan {
            mode: PrecisionMode::Mixed,
            weight_bits: Some(4.0),
            act_bits: None,
            only_layers: None,
        };
        m.attach(&plan, None).unwrap();
        m.save(dir.path()).unwrap();
        let r = ModelParams::load(dir.path()).unwrap();
        assert_eq!(r.config, m.config);
        for (a, b) in m.layers.iter().zip(&r.layers) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.bias, b.bias);
            assert_eq!(a.wq.is_some(), b.wq.is_some());
            if let (Some(x), Some(y)) = (&a.wq, &b.wq) {
                assert_eq!(x.log_step.item(), y.log_step.item());
                assert_eq!(x.log_thresh.item(), y.log_thresh.item());
            }
        }
        let inp = toy_input(8, 8);
        assert_eq!(m.predict(&inp).unwrap(), r.predict(&inp).unwrap());
    }

    #[test]
    fn fixed_point_export_writes_codes() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build(ModelConfig::new(4, 2).unwrap(), 5);
        let plan = QuantPlan {
            mode: PrecisionMode::Uniform,
            weight_bits: Some(4.0),
            act_bits: None,
            only_layers: None,
        };
        m.attach(&plan, None).unwrap();
        m.export_fixed_point(dir.path()).unwrap();
        let (shape, codes) = crate::tensor::read_dtb_i32(&dir.path().join("enc1a.weight.codes.dtb")).unwrap();
        assert_eq!(shape, vec![4, 5, 3, 3]);
        let q = m.layers[0].wq.as_ref().unwrap();
        let max_code = (q.x_max() / q.step()).floor() as i32;
        assert!(codes.iter().all(|&c| c.abs() <= max_code));
        // codes * d reproduce the fake-quantized weights
        let phi = q.params(QuantTarget::Weights).unwrap();
        let fq = quant::quantize(&m.layers[0].weight, &phi).unwrap();
        for (c, v) in codes.iter().zip(fq.data()) {
            assert!(((*c as f64 * phi.step) as f32 - v).abs() < 1e-6);
        }
    }
}
