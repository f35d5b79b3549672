//! `tofdc` — batch front end for the depth completion toolkit.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use tofdc_core::config::Config;
use tofdc_core::error::Error;
use tofdc_core::loss::LossConfig;
use tofdc_core::model::{ModelConfig, ModelParams};
use tofdc_core::preproc;
use tofdc_core::scene::{self, DatasetWriter, DotPattern, Sample};
use tofdc_core::train::{self, Regime, TrainConfig};

#[derive(Parser)]
#[command(name = "tofdc", version, about = "Sparse ToF depth completion toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic sparse-ToF dataset.
    GenData(GenDataArgs),
    /// Train a model (float pretraining or UP/MP QAT).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train one short run per lambda_n value and tabulate the trade-off.
    SweepLambda(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long)]
    scenes: usize,
    /// Frame width in pixels.
    #[arg(long)]
    width: usize,
    /// Frame height in pixels.
    #[arg(long)]
    height: usize,
    /// Target number of sparse dots per frame.
    #[arg(long)]
    dots: usize,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run output directory.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to initialize from (required for UP/MP regimes).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Override a config key (repeatable), e.g. --set epochs=2.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Report output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated lambda_n values, e.g. 1,1e-1,1e-2,1e-3,1e-4.
    #[arg(long)]
    values: String,
    /// Table output file.
    #[arg(long)]
    out: PathBuf,
    /// key=value config file for the short runs.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print a pass/fail summary of the MNS trend over the sweep.
    #[arg(long)]
    check_trend: bool,
}

/// Errors carry the exit code they map to.
struct CliError {
    code: u8,
    message: String,
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError { code: 2, message: msg.into() }
}

fn classify(e: Error) -> CliError {
    let code = match &e {
        Error::InvalidArgument { .. } => 2,
        Error::NumericFailure { .. } => 4,
        _ => 3,
    };
    CliError { code, message: e.to_string() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let result = match &cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::SweepLambda(a) => sweep_lambda(a),
    };
    match result {
        Ok(()) => {
            eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

/// Append one line to the run manifest in `out` (append-only by contract).
fn write_manifest(out: &Path, command: &str, detail: &str, elapsed_ms: u128) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| classify(Error::io(out, e)))?;
    let path = out.join("run_manifest.txt");
    let line = format!(
        "command={command} version={} {detail} elapsed_ms={elapsed_ms}\n",
        env!("CARGO_PKG_VERSION")
    );
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| classify(Error::io(&path, e)))?;
    f.write_all(line.as_bytes()).map_err(|e| classify(Error::io(&path, e)))
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    if a.scenes == 0 || a.dots == 0 || a.width == 0 || a.height == 0 {
        return Err(usage("scenes, width, height and dots must all be positive"));
    }
    let t0 = Instant::now();
    let pitch = scene::pitch_for_target_count(a.width, a.height, a.dots).map_err(classify)?;
    let pattern = DotPattern::new(pitch, 0.15);
    let mut writer = DatasetWriter::create(&a.out).map_err(classify)?;
    let mut k_sum = 0.0f64;
    for i in 0..a.scenes {
        let sc = scene::generate_scene(a.seed.wrapping_add(i as u64), a.width, a.height)
            .map_err(classify)?;
        let sparse = scene::subsample(&sc, &pattern, a.seed.wrapping_add(0x9e37 + i as u64));
        k_sum += preproc::sparsity_level(&sparse);
        let split = if i % 10 == 9 { "test" } else { "train" };
        writer.write_sample(i, &sc, &sparse, split).map_err(classify)?;
    }
    writer.finish().map_err(classify)?;
    let k = k_sum / a.scenes as f64;
    println!("wrote {} scenes at {}x{}, mean K = {:.3}%", a.scenes, a.width, a.height, k);
    write_manifest(
        &a.out,
        "gen-data",
        &format!(
            "seed={} scenes={} width={} height={} dots={} out={}",
            a.seed, a.scenes, a.width, a.height, a.dots, a.out.display()
        ),
        t0.elapsed().as_millis(),
    )
}

fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> CliResult<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p).map_err(classify)?,
        None => Config::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v.trim());
    }
    Ok(cfg)
}

fn train_config_from(cfg: &Config) -> CliResult<TrainConfig> {
    let regime = match cfg.get("regime").unwrap_or("float") {
        "float" => Regime::Float,
        "up" => Regime::UniformPrecision,
        "mp" => Regime::MixedPrecision,
        other => return Err(usage(format!("unknown regime `{other}` (expected float, up or mp)"))),
    };
    let n_f = cfg.get_parsed::<usize>("n_f").map_err(classify)?.unwrap_or(8);
    let n_s = cfg.get_parsed::<usize>("n_s").map_err(classify)?.unwrap_or(3);
    let model = ModelConfig::new(n_f, n_s).map_err(classify)?;
    let mut tc = TrainConfig::new(regime, model);
    if let Some(v) = cfg.get_parsed::<f64>("rho0").map_err(classify)? {
        tc.rho0 = v;
    }
    if let Some(v) = cfg.get_parsed::<usize>("epochs").map_err(classify)? {
        tc.epochs = Some(v);
    }
    if let Some(v) = cfg.get_parsed::<usize>("batch_size").map_err(classify)? {
        tc.batch_size = v;
    }
    if let Some(v) = cfg.get_parsed::<usize>("patch").map_err(classify)? {
        tc.patch = v;
    }
    if let Some(v) = cfg.get_parsed::<u64>("seed").map_err(classify)? {
        tc.seed = v;
    }
    let mut loss = LossConfig::default();
    if let Some(v) = cfg.get_parsed::<u32>("p").map_err(classify)? {
        loss.p = v;
    }
    if let Some(v) = cfg.get_parsed::<f64>("lambda_n").map_err(classify)? {
        loss.lambda_n = v;
    }
    tc.loss = loss;
    if let Some(v) = cfg.get_parsed::<f64>("weight_bits").map_err(classify)? {
        tc.weight_bits = Some(v);
    }
    if let Some(v) = cfg.get_parsed::<f64>("act_bits").map_err(classify)? {
        tc.act_bits = Some(v);
    }
    if let Some(v) = cfg.get_parsed::<usize>("early_stop_patience").map_err(classify)? {
        tc.early_stop_patience = Some(v);
    }
    Ok(tc)
}

fn frame_size(samples: &[Sample]) -> (usize, usize) {
    let (_, _, h, w) = samples[0].depth_gt.nchw();
    (h, w)
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let t0 = Instant::now();
    let cfg = load_config(&a.config, &a.overrides)?;
    let tc = train_config_from(&cfg)?;
    if tc.regime != Regime::Float && a.init.is_none() {
        return Err(usage("UP/MP regimes require --init with a float checkpoint"));
    }
    let samples = scene::load_dataset(&a.data).map_err(classify)?;
    if samples.is_empty() {
        return Err(CliError { code: 3, message: format!("dataset {} is empty", a.data.display()) });
    }
    let init = match &a.init {
        Some(p) => Some(ModelParams::load(p).map_err(classify)?),
        None => None,
    };
    let out = train::train(&tc, &samples, init).map_err(classify)?;

    std::fs::create_dir_all(&a.out).map_err(|e| classify(Error::io(&a.out, e)))?;
    let write = |name: &str, contents: &str| -> CliResult<()> {
        let p = a.out.join(name);
        std::fs::write(&p, contents).map_err(|e| classify(Error::io(&p, e)))
    };
    write("history.csv", &train::history_csv(&out.history))?;
    write("config.txt", &cfg.render())?;
    out.model.save(&a.out.join("checkpoint")).map_err(classify)?;
    let (h, w) = frame_size(&samples);
    let sizes = out.model.sizes(h, w).map_err(classify)?;
    write("allocation.txt", &sizes.render_table())?;
    if out.model.layers.iter().any(|l| l.wq.is_some()) {
        out.model.export_fixed_point(&a.out.join("fixed_point")).map_err(classify)?;
    }
    if let Some(last) = out.history.last() {
        println!(
            "trained {} epochs, final val RMSE {:.1} mm, avg b_W {:.2}{}",
            out.history.len(),
            last.val_rmse_mm,
            last.avg_b_w,
            if out.stopped_early { " (early stop)" } else { "" }
        );
    }
    print!("{}", sizes.render_table());
    write_manifest(
        &a.out,
        "train",
        &format!(
            "config={} seed={} data={} out={} init={}",
            a.config.as_deref().map(|p| p.display().to_string()).unwrap_or_default(),
            tc.seed,
            a.data.display(),
            a.out.display(),
            a.init.as_deref().map(|p| p.display().to_string()).unwrap_or_default()
        ),
        t0.elapsed().as_millis(),
    )
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let t0 = Instant::now();
    let samples = scene::load_dataset(&a.data).map_err(classify)?;
    if samples.is_empty() {
        return Err(CliError { code: 3, message: format!("dataset {} is empty", a.data.display()) });
    }
    let model = ModelParams::load(&a.ckpt).map_err(classify)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let report = train::evaluate(&model, &refs).map_err(|e| {
        // resolution/divisibility mismatches are data errors here
        let mut c = classify(e);
        if c.code == 2 {
            c.code = 3;
        }
        c
    })?;
    let (h, w) = frame_size(&samples);
    let sizes = model.sizes(h, w).map_err(classify)?;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "weights {:.3} MB ({:.0} bits), activations {:.3} MB ({:.0} bits) at {h}x{w}",
        sizes.s_w_mb(),
        sizes.s_w_bits,
        sizes.s_a_mb(),
        sizes.s_a_bits
    );
    text.push_str(&report.render_table());
    text.push_str(&report.render_keyvalues());
    let _ = writeln!(text, "s_w_bits={}", sizes.s_w_bits);
    let _ = writeln!(text, "s_a_bits={}", sizes.s_a_bits);
    std::fs::write(&a.out, &text).map_err(|e| classify(Error::io(&a.out, e)))?;
    print!("{text}");
    if let Some(dir) = a.out.parent() {
        let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
        write_manifest(
            dir,
            "eval",
            &format!("data={} ckpt={} out={}", a.data.display(), a.ckpt.display(), a.out.display()),
            t0.elapsed().as_millis(),
        )?;
    }
    Ok(())
}

fn sweep_lambda(a: &SweepArgs) -> CliResult<()> {
    let t0 = Instant::now();
    let values: Vec<f64> = a
        .values
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|_| usage(format!("bad lambda value `{s}`"))))
        .collect::<CliResult<_>>()?;
    if values.is_empty() {
        return Err(usage("--values must list at least one lambda_n"));
    }
    let cfg = load_config(&a.config, &a.overrides)?;
    let base = train_config_from(&cfg)?;
    let samples = scene::load_dataset(&a.data).map_err(classify)?;

    let mut rows = Vec::new();
    for &lambda in &values {
        let mut tc = base.clone();
        tc.loss.lambda_n = lambda;
        let out = train::train(&tc, &samples, None).map_err(classify)?;
        let (train_split, val) = train::split_samples(&samples);
        // tiny datasets may have no held-out scenes; fall back to train
        let eval_on = if val.is_empty() { &train_split } else { &val };
        let report = train::evaluate(&out.model, eval_on).map_err(classify)?;
        rows.push((lambda, report.rmse_mm, report.mns));
    }

    let mut text = String::new();
    let _ = writeln!(text, "{:>10} {:>12} {:>8}", "lambda_n", "RMSE[mm]", "MNS");
    for (l, r, m) in &rows {
        let _ = writeln!(text, "{l:>10.0e} {r:>12.2} {m:>8.4}");
    }
    if a.check_trend {
        // lambda values sorted descending: MNS should not increase as
        // lambda_n decreases
        let mut sorted = rows.clone();
        sorted.sort_by(|x, y| y.0.total_cmp(&x.0));
        let ok = sorted.windows(2).all(|w| w[1].2 <= w[0].2 + 1e-3);
        let _ = writeln!(text, "trend check: {}", if ok { "pass" } else { "fail" });
    }
    std::fs::write(&a.out, &text).map_err(|e| classify(Error::io(&a.out, e)))?;
    print!("{text}");
    if let Some(dir) = a.out.parent() {
        let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
        write_manifest(
            dir,
            "sweep-lambda",
            &format!("data={} values={} out={}", a.data.display(), a.values, a.out.display()),
            t0.elapsed().as_millis(),
        )?;
    }
    Ok(())
}
