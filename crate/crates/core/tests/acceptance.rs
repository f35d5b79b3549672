//! Acceptance gate: one test per criterion, each printing a single
//! pass/fail line (run with `--nocapture` to see them all).

use std::sync::OnceLock;
use std::time::Instant;

use tofdc_core::loss::{self, LossConfig};
use tofdc_core::model::{build, ModelConfig, ModelParams};
use tofdc_core::preproc::{self, SparseDepthMap};
use tofdc_core::quant::{self, QuantTarget, QuantizerParams, SizeConstraint, LAMBDA_A, LAMBDA_W};
use tofdc_core::rng::SplitMix64;
use tofdc_core::scene::{self, DotPattern, Sample};
use tofdc_core::tensor::Tensor;
use tofdc_core::train::{self, Regime, TrainConfig};
use tofdc_core::graph::Tape;
use tofdc_core::kernels;

fn report(criterion: u32, desc: &str, pass: bool) {
    println!("criterion {criterion}: {} - {desc}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed: {desc}");
}

fn random_sparse(rng: &mut SplitMix64, h: usize, w: usize) -> SparseDepthMap {
    loop {
        let density = rng.uniform(0.005, 0.2);
        let depth: Vec<f32> = (0..h * w)
            .map(|_| if rng.next_f32() < density { rng.uniform(0.5, 14.0) } else { 0.0 })
            .collect();
        if depth.iter().any(|&v| v > 0.0) {
            return SparseDepthMap::new(h, w, depth).unwrap();
        }
    }
}

#[test]
fn criterion_01_edt_nni_oracle_and_runtime() {
    // exactness: 200 random masks up to 48x48 against brute force
    let mut rng = SplitMix64::new(0xacce);
    let mut exact = true;
    'outer: for _ in 0..200 {
        let h = 1 + rng.below(48) as usize;
        let w = 1 + rng.below(48) as usize;
        let d = random_sparse(&mut rng, h, w);
        let field = preproc::distance_field(&d).unwrap();
        let (bf_dist, bf_site) = preproc::brute_force_nearest(&d).unwrap();
        for i in 0..h * w {
            if field.dist_sq[i] != bf_dist[i] || field.site[i] != bf_site[i] {
                exact = false;
                break 'outer;
            }
        }
    }

    // runtime: 640x480 with ~1200 sites, single-threaded
    let sc = scene::generate_scene(11, 640, 480).unwrap();
    let pitch = scene::pitch_for_target_count(640, 480, 1239).unwrap();
    let sparse = scene::subsample(&sc, &DotPattern::new(pitch, 0.15), 3);
    let mut best = f64::INFINITY;
    for _ in 0..5 {
        let t0 = Instant::now();
        let field = preproc::distance_field(&sparse).unwrap();
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        assert!(!field.site.is_empty());
        best = best.min(ms);
    }
    report(
        1,
        &format!("EDT/NNI oracle exact on 200 masks; 640x480 best {best:.2} ms (budget 50 ms)"),
        exact && best <= 50.0,
    );
}

#[test]
fn criterion_02_quantizer_lattice_suite() {
    let mut rng = SplitMix64::new(0x20a2);
    let mut violations = 0usize;
    // hand cases first
    if kernels::quantize_value(1.3, 0.5, 3.5) != 1.5 {
        violations += 1;
    }
    if kernels::quantize_value(-10.0, 0.5, 3.5) != -3.5 {
        violations += 1;
    }
    if kernels::quantize_value(0.0, 0.5, 3.5) != 0.0 {
        violations += 1;
    }

    for i in 0..100_000u64 {
        let d = rng.uniform(0.001, 2.0) as f64;
        // half the triples put x_max exactly on the lattice (idempotence is
        // checked there; a clip threshold strictly inside a rounding cell
        // maps outside itself by construction), the rest are arbitrary
        let on_lattice = i % 2 == 0;
        let x_max = if on_lattice {
            d * (1 + rng.below(200)) as f64
        } else {
            (d * rng.uniform(1.0, 200.0) as f64).max(d)
        };
        let x = rng.uniform(-500.0, 500.0);
        let q = kernels::quantize_value(x, d, x_max) as f64;

        // lattice membership or clip value
        let k = (q / d).round();
        let on = ((k * d) as f32 - q as f32).abs() <= 1e-5 * (1.0 + q.abs() as f32);
        let clip = (q.abs() - x_max).abs() <= 1e-6 * x_max;
        if !(on || clip) || q.abs() > x_max * (1.0 + 1e-6) {
            violations += 1;
        }
        // oddness
        if kernels::quantize_value(-x, d, x_max) != -(q as f32) {
            violations += 1;
        }
        // monotonicity against a nearby point
        let x2 = x + rng.uniform(0.0, 1.0);
        if kernels::quantize_value(x2, d, x_max) < q as f32 {
            violations += 1;
        }
        // idempotence on lattice-aligned thresholds
        if on_lattice {
            let qq = kernels::quantize_value(q as f32, d, x_max);
            if qq != q as f32 {
                violations += 1;
            }
        }
        // distinct level count fits the inferred bit width
        let r: f64 = x_max / d;
        let levels = if r.fract() == 0.0 { 2.0 * r + 1.0 } else { 2.0 * r.floor() + 3.0 };
        let (b, _) = quant::infer_bitwidth(d, x_max);
        if levels > (b as f64).exp2() {
            violations += 1;
        }
    }
    report(2, &format!("quantizer lattice suite, {violations} violations over 1e5 triples"), violations == 0);
}

#[test]
fn criterion_03_bitwidth_vs_enumeration() {
    // exhaustive check of b = ceil(1 + log2(x_max/d + 1)) against the
    // minimal b whose representable-level count fits in 2^b
    let mut rng = SplitMix64::new(0xb17);
    let mut mismatches = 0usize;
    for i in 0..10_000u64 {
        let d = rng.uniform(0.001, 3.0) as f64;
        // cover both lattice-aligned and fractional ratios
        let r: f64 = if i % 4 == 0 {
            (1 + rng.below(4000)) as f64
        } else {
            rng.uniform(1.0, 4000.0) as f64
        };
        let x_max = d * r;
        let ratio = x_max / d;
        let levels = if ratio.fract() == 0.0 {
            2.0 * ratio + 1.0
        } else {
            2.0 * ratio.floor() + 3.0
        };
        let mut b_enum = 2u32;
        while (b_enum as f64).exp2() < levels {
            b_enum += 1;
        }
        let (b, _) = quant::infer_bitwidth(d, x_max);
        if b != b_enum {
            mismatches += 1;
        }
    }
    report(3, &format!("bit-width inference vs enumeration, {mismatches} mismatches over 1e4"), mismatches == 0);
}

#[test]
fn criterion_04_gradient_suite() {
    // compact re-run of the finite-difference checks (full suite lives in
    // tests/gradcheck.rs) plus the pointwise STE contract
    let mut rng = SplitMix64::new(0x9ad);
    let h = 1e-3f32;
    let x0 = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
    let w0 = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|_| rng.uniform(-0.5, 0.5)).collect()).unwrap();
    let b0 = Tensor::zeros(&[2]);

    let f = |w: &Tensor| -> f32 {
        let mut tape = Tape::new();
        let xn = tape.constant(x0.clone());
        let wn = tape.param(w.clone(), 0);
        let bn = tape.constant(b0.clone());
        let y = tape.conv2d(xn, wn, bn, 1, kernels::Pad::Same).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let s = tape.sum(sq);
        tape.value(s).item()
    };
    let grad = {
        let mut tape = Tape::new();
        let xn = tape.constant(x0.clone());
        let wn = tape.param(w0.clone(), 0);
        let bn = tape.constant(b0.clone());
        let y = tape.conv2d(xn, wn, bn, 1, kernels::Pad::Same).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        g.param(0).unwrap().clone()
    };
    let mut max_rel = 0.0f64;
    for i in 0..w0.len() {
        let mut p = w0.clone();
        p.data_mut()[i] += h;
        let mut m = w0.clone();
        m.data_mut()[i] -= h;
        let num = (f(&p) as f64 - f(&m) as f64) / (2.0 * h as f64);
        let ana = grad.data()[i] as f64;
        let rel = (ana - num).abs() / num.abs().max(ana.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }

    // STE pointwise: pass-through inside the range, zero outside
    let xs = Tensor::new(vec![3], vec![0.4, -1.5, 3.0]).unwrap();
    let mut tape = Tape::new();
    let xn = tape.param(xs.clone(), 0);
    let t = tape.constant(Tensor::scalar(1.0)); // x_max = 2
    let q = tape
        .fake_quant(xn, &[t], tofdc_core::graph::QuantMode::Uniform { bits: 4 }, false)
        .unwrap();
    let s = tape.sum(q);
    let g = tape.backward(s).unwrap();
    let ste_ok = g.param(0).unwrap().data() == [1.0, 1.0, 0.0];

    report(
        4,
        &format!("gradient suite: conv FD max rel err {max_rel:.2e} (< 1e-3), STE pointwise ok={ste_ok}"),
        max_rel < 1e-3 && ste_ok,
    );
}

#[test]
fn criterion_05_normals_analytics() {
    let flat = Tensor::full(&[1, 1, 6, 6], 4.0);
    let n = tofdc_core::normals::estimate_normals(&flat).unwrap();
    let hw = 36;
    let flat_ok = (0..hw).all(|i| {
        n.data()[i] == 0.0 && n.data()[hw + i] == 0.0 && n.data()[2 * hw + i] == -1.0
    });

    let (hh, ww) = (5, 8);
    let ramp = Tensor::new(vec![1, 1, hh, ww], (0..hh * ww).map(|i| (i % ww) as f32).collect()).unwrap();
    let nr = tofdc_core::normals::estimate_normals(&ramp).unwrap();
    let e = 1.0 / 2f32.sqrt();
    let mut ramp_ok = true;
    for y in 0..hh {
        for x in 1..ww - 1 {
            let i = y * ww + x;
            ramp_ok &= (nr.data()[i] - e).abs() < 1e-6
                && nr.data()[hh * ww + i].abs() < 1e-6
                && (nr.data()[2 * hh * ww + i] + e).abs() < 1e-6;
        }
    }

    let mut rng = SplitMix64::new(5);
    let rd = Tensor::new(vec![1, 1, 7, 7], (0..49).map(|_| rng.uniform(-20.0, 20.0)).collect()).unwrap();
    let nn = tofdc_core::normals::estimate_normals(&rd).unwrap();
    let unit_ok = (0..49).all(|i| {
        let (a, b, c) = (nn.data()[i], nn.data()[49 + i], nn.data()[98 + i]);
        (a * a + b * b + c * c - 1.0).abs() < 1e-5 && c < 0.0
    });

    report(
        5,
        &format!("normals: flat exact={flat_ok}, unit ramp={ramp_ok}, unit norm={unit_ok}"),
        flat_ok && ramp_ok && unit_ok,
    );
}

#[test]
fn criterion_06_loss_constants() {
    let cfg = LossConfig::default();
    let default_ok = cfg.lambda_n == 1e-3;

    let mut rng = SplitMix64::new(6);
    let gt = Tensor::new(vec![1, 1, 6, 6], (0..36).map(|_| rng.uniform(0.2, 0.9)).collect()).unwrap();
    let mask = Tensor::full(&[1, 1, 6, 6], 1.0);
    let mut tape = Tape::new();
    let pred = tape.constant(gt.clone());
    let nodes = loss::loss_total(&mut tape, pred, &gt, &mask, &cfg).unwrap();
    let perfect_ok = (tape.value(nodes.total).item() as f64 + cfg.lambda_n).abs() < 1e-7;

    let ngt = tofdc_core::normals::estimate_normals(&gt).unwrap();
    let mut tape = Tape::new();
    let nh = tape.constant(ngt.clone());
    let ln = loss::loss_normals(&mut tape, nh, &ngt, &mask).unwrap();
    let identical_ok = (tape.value(ln).item() + 1.0).abs() < 1e-6;

    report(
        6,
        &format!("lambda_n default 1e-3={default_ok}, perfect L=-lambda_n={perfect_ok}, identical normals -> -1={identical_ok}"),
        default_ok && perfect_ok && identical_ok,
    );
}

#[test]
fn criterion_07_size_accounting() {
    let c = SizeConstraint { avg_bits: 4.0, lambda: 1.0 };
    let (excess, penalty) = quant::size_penalty(&[(100, 4.0), (100, 8.0)], &c);
    let example_ok = excess == 400.0 && penalty == 160_000.0;
    let (_, under) = quant::size_penalty(&[(100, 2.0), (100, 4.0)], &c);
    let one_sided_ok = under == 0.0;
    let lambdas_ok = LAMBDA_W == 2.66e-7 && LAMBDA_A == 1.73e-6;

    // MB-convention pin: the paper-style float32 reference (198.5 MB of
    // weights) implies 49.625 M parameters under decimal MB, which sits
    // closer to the reported ~50.3 MParams than the 52.04 M a binary MiB
    // reading would imply
    let params_decimal = 198.5e6 / 4.0 / 1e6;
    let params_binary = 198.5 * 1024.0 * 1024.0 / 4.0 / 1e6;
    let pin_ok = (params_decimal - 50.3f64).abs() < (params_binary - 50.3f64).abs();
    let convention_ok = (quant::bits_to_mb(params_decimal * 1e6 * 32.0) - 198.5).abs() < 1e-9;

    report(
        7,
        &format!("size accounting: example={example_ok}, one-sided={one_sided_ok}, lambdas={lambdas_ok}, decimal-MB pin={pin_ok}"),
        example_ok && one_sided_ok && lambdas_ok && pin_ok && convention_ok,
    );
}

/// Shared artifacts for the end-to-end criteria (8, 9, 11): one 64-scene
/// dataset and one float training run.
struct Artifacts {
    samples: Vec<Sample>,
    float_model: ModelParams,
    float_rmse: f64,
    nni_rmse: f64,
    train_minutes: f64,
}

/// Deterministic 64-scene dataset shared by the end-to-end criteria.
fn acceptance_samples() -> &'static Vec<Sample> {
    static CELL: OnceLock<Vec<Sample>> = OnceLock::new();
    CELL.get_or_init(|| {
        let (w, h) = (160usize, 160usize);
        let dots = 256; // K ~ 1.0%, inside the 0.4-1.4% anchor range
        let pitch = scene::pitch_for_target_count(w, h, dots).unwrap();
        let pattern = DotPattern::new(pitch, 0.15);
        (0..64)
            .map(|i| {
                let sc = scene::generate_scene(0xd5 + i as u64, w, h).unwrap();
                let sparse = scene::subsample(&sc, &pattern, 0x17 + i as u64);
                Sample {
                    index: i,
                    split: if i % 10 == 9 { "test".into() } else { "train".into() },
                    depth_gt: sc.depth_gt.clone(),
                    normals_gt: sc.normals_gt.clone(),
                    color: sc.color.clone(),
                    sparse,
                }
            })
            .collect()
    })
}

fn artifacts() -> &'static Artifacts {
    static CELL: OnceLock<Artifacts> = OnceLock::new();
    CELL.get_or_init(|| {
        let samples = acceptance_samples().clone();
        let model_cfg = ModelConfig::new(8, 3).unwrap();

        // the float run is deterministic in (config, seed, dataset), so a
        // checkpoint from a previous invocation of this binary is reusable;
        // cached under target/ so `cargo clean` clears it
        let cache = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_float_v1");
        let (float_model, train_minutes) = if cache.join("minutes.txt").exists() {
            let model = ModelParams::load(&cache.join("checkpoint")).unwrap();
            let minutes: f64 = std::fs::read_to_string(cache.join("minutes.txt"))
                .unwrap()
                .trim()
                .parse()
                .unwrap();
            (model, minutes)
        } else {
            let t0 = Instant::now();
            let mut tc = TrainConfig::new(Regime::Float, model_cfg);
            tc.seed = 1;
            tc.batch_size = 8;
            tc.patch = 160;
            let out = train::train(&tc, &samples, None).unwrap();
            let minutes = t0.elapsed().as_secs_f64() / 60.0;
            std::fs::create_dir_all(&cache).unwrap();
            out.model.save(&cache.join("checkpoint")).unwrap();
            std::fs::write(cache.join("minutes.txt"), format!("{minutes}")).unwrap();
            (out.model, minutes)
        };

        let (_, val) = train::split_samples(&samples);
        let float_rmse = train::evaluate(&float_model, &val).unwrap().rmse_mm;
        // zero-initialized final layer: a fresh build is exactly the NNI
        // baseline
        let nni_rmse = train::evaluate(&build(model_cfg, 99), &val).unwrap().rmse_mm;

        Artifacts {
            samples,
            float_model,
            float_rmse,
            nni_rmse,
            train_minutes,
        }
    })
}

#[test]
fn criterion_08_float_smoke_run() {
    let a = artifacts();
    report(
        8,
        &format!(
            "float 40-epoch run: val RMSE {:.1} mm vs NNI {:.1} mm in {:.1} min (budget 30)",
            a.float_rmse, a.nni_rmse, a.train_minutes
        ),
        a.float_rmse < a.nni_rmse && a.train_minutes <= 30.0,
    );
}

#[test]
fn criterion_09_mp_qat_smoke_run() {
    let a = artifacts();
    let mut tc = TrainConfig::new(Regime::MixedPrecision, ModelConfig::new(8, 3).unwrap());
    tc.seed = 2;
    tc.batch_size = 8;
    tc.patch = 160;
    tc.weight_bits = Some(4.0);
    let out = train::train(&tc, &a.samples, Some(a.float_model.clone())).unwrap();
    let avg_bits = out.model.avg_weight_bits().unwrap();
    let (_, val) = train::split_samples(&a.samples);
    let mp_rmse = train::evaluate(&out.model, &val).unwrap().rmse_mm;
    let degradation = (mp_rmse - a.float_rmse) / a.float_rmse;
    report(
        9,
        &format!(
            "MP QAT 60 epochs: avg b_W {avg_bits:.2} (<= 4.25), RMSE {mp_rmse:.1} mm vs float {:.1} mm ({:+.1}% <= 25%)",
            a.float_rmse,
            degradation * 100.0
        ),
        avg_bits <= 4.25 && degradation <= 0.25,
    );
}

#[test]
fn criterion_10_pattern_density_anchors() {
    let mut ok = true;
    let mut detail = String::new();
    for (w, h, target) in [(304usize, 224usize, 943usize), (640, 480, 1239)] {
        let pitch = scene::pitch_for_target_count(w, h, target).unwrap();
        let coords = scene::pattern_coords(&DotPattern::new(pitch, 0.15), w, h, 77);
        let got = coords.len() as f64;
        let rel = (got - target as f64) / target as f64;
        detail.push_str(&format!("{w}x{h}: {got} vs {target} ({:+.1}%); ", rel * 100.0));
        ok &= rel.abs() <= 0.10;
    }
    report(10, &format!("pattern density {detail}within +-10%"), ok);
}

#[test]
fn criterion_11_residual_identity() {
    let samples = acceptance_samples();
    let (_, val) = train::split_samples(samples);
    // model with zeroed final layer vs the standalone NNI prediction,
    // pushed through the same normalize/denormalize arithmetic evaluate uses
    let model = build(ModelConfig::new(8, 3).unwrap(), 123);
    let model_report = train::evaluate(&model, &val).unwrap();

    let (_, _, h, w) = val[0].depth_gt.nchw();
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for s in &val {
        let input = preproc::preprocess(&s.sparse, &s.color, false).unwrap();
        pred.extend(input.depth_nni.data().iter().map(|&v| v * preproc::D_MAX * 1000.0));
        gt.extend(s.depth_gt.data().iter().map(|&v| v * 1000.0));
    }
    let nni_report = loss::metrics(
        &Tensor::new(vec![val.len(), 1, h, w], pred).unwrap(),
        &Tensor::new(vec![val.len(), 1, h, w], gt).unwrap(),
    )
    .unwrap();

    let ok = model_report.rmse_mm.to_bits() == nni_report.rmse_mm.to_bits()
        && model_report.mae_mm.to_bits() == nni_report.mae_mm.to_bits()
        && model_report.mns.to_bits() == nni_report.mns.to_bits();
    report(
        11,
        &format!(
            "zeroed final layer: model RMSE {:.6} == NNI RMSE {:.6} bit-exactly",
            model_report.rmse_mm, nni_report.rmse_mm
        ),
        ok,
    );
}

#[test]
fn criterion_12_reproducibility() {
    // identical (config, seed, dataset) twice -> bit-identical history and
    // parameters, single-threaded
    let samples: Vec<Sample> = (0..4)
        .map(|i| {
            let sc = scene::generate_scene(0x12e + i as u64, 32, 32).unwrap();
            let pitch = scene::pitch_for_target_count(32, 32, 40).unwrap();
            let sparse = scene::subsample(&sc, &DotPattern::new(pitch, 0.15), i as u64);
            Sample {
                index: i,
                split: "train".into(),
                depth_gt: sc.depth_gt.clone(),
                normals_gt: sc.normals_gt.clone(),
                color: sc.color.clone(),
                sparse,
            }
        })
        .collect();
    let mut tc = TrainConfig::new(Regime::Float, ModelConfig::new(4, 2).unwrap());
    tc.epochs = Some(2);
    tc.batch_size = 2;
    tc.patch = 32;
    tc.seed = 7;
    let a = train::train(&tc, &samples, None).unwrap();
    let b = train::train(&tc, &samples, None).unwrap();
    let mut ok = a.history.len() == b.history.len();
    for (x, y) in a.history.iter().zip(&b.history) {
        ok &= x.train_total.to_bits() == y.train_total.to_bits();
    }
    for (x, y) in a.model.layers.iter().zip(&b.model.layers) {
        ok &= x.weight == y.weight && x.bias == y.bias;
    }
    report(12, "re-running identical (config, seed, dataset) is bit-identical", ok);
}

#[test]
fn quantizer_hand_case_attach_consistency() {
    // supporting check for criterion 2: the public QuantizerParams path
    // agrees with the kernel on the hand cases
    let phi = QuantizerParams::mixed(0.5, 3.5, QuantTarget::Weights).unwrap();
    let t = Tensor::new(vec![2], vec![1.3, -10.0]).unwrap();
    let q = quant::quantize(&t, &phi).unwrap();
    assert_eq!(q.data(), &[1.5, -3.5]);
}
