use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use deconver_core::checks::{
    block_case, faulty_case, mixer_case, ndc_update_cases, network_case, primitive_cases, Case,
};
use deconver_core::grad::GradcheckConfig;
use deconver_core::ndc::{solve as run_solver, NdcProblem, TraceMode};
use deconver_core::net::{count_params, estimate_flops_per_voxel, Checkpoint, Deconver, DeconverConfig};
use deconver_core::tensor::io;
use deconver_core::train::{binarize, dice_score, predict_probabilities, train as run_training, MetricsReport};
use deconver_core::{Error, FilterTensor, Precision, Result, Scalar, Tensor};
use log::info;

use crate::config::RunConfig;
use crate::{
    EvalArgs, GradcheckArgs, ParamsArgs, PredictArgs, Scope, SolveArgs, TrainArgs, EXIT_CHECK_FAILED, EXIT_OK,
};

macro_rules! dispatch {
    ($precision:expr, $f:ident($($arg:expr),*)) => {
        match $precision {
            Precision::Single => $f::<f32>($($arg),*),
            Precision::Double => $f::<f64>($($arg),*),
        }
    };
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::write(path, text)?)
}

pub fn solve(args: &SolveArgs, precision: Precision) -> Result<i32> {
    if args.iters == 0 {
        return Err(Error::InvalidArgument("--iters must be at least 1".into()));
    }
    if !(args.epsilon >= 0.0) {
        return Err(Error::InvalidArgument("--epsilon must be nonnegative".into()));
    }
    dispatch!(precision, solve_with(args))
}

fn solve_with<T: Scalar>(args: &SolveArgs) -> Result<i32> {
    let x = io::read(&args.input)?.into_tensor::<T>();
    let v = FilterTensor::new(io::read(&args.filter)?.into_tensor::<T>())?;
    let problem = match &args.init {
        Some(p) => NdcProblem::new(x, v, io::read(p)?.into_tensor::<T>())?,
        None => NdcProblem::with_unit_source(x, v)?,
    };
    let eps = T::from(args.epsilon).expect("finite epsilon");
    let trace = run_solver(&problem, args.iters, eps, TraceMode::FinalOnly)?;
    io::write(&args.out, &trace.final_source)?;
    if let Some(path) = &args.trace {
        let mut csv = String::from("iter,error\n");
        for (i, e) in trace.errors.iter().enumerate() {
            writeln!(csv, "{i},{e}").unwrap();
        }
        write_text(path, &csv)?;
    }
    println!("initial_error {}", trace.initial_error());
    println!("final_error {}", trace.final_error());
    Ok(EXIT_OK)
}

pub fn gradcheck(args: &GradcheckArgs, seed: u64) -> Result<i32> {
    let composite = !matches!(args.scope, Scope::Primitives | Scope::Faulty);
    let mut cfg = GradcheckConfig {
        seed,
        ..GradcheckConfig::default()
    };
    cfg.tolerance = args.tolerance.unwrap_or(if composite { 1e-5 } else { 1e-6 });
    cfg.max_coords = match args.max_coords {
        Some(0) => None,
        Some(n) => Some(n),
        None if composite => Some(50),
        None => None,
    };
    let cases: Vec<Case> = match args.scope {
        Scope::Primitives => {
            let mut c = primitive_cases(seed);
            c.extend(ndc_update_cases(seed));
            c
        }
        Scope::Mixer => vec![mixer_case(seed)?],
        Scope::Block => vec![block_case(seed)?],
        Scope::Network => vec![network_case(seed)?],
        Scope::Faulty => vec![faulty_case()],
    };
    println!("{:<28} {:>12} {:>8} status", "op", "max_rel_err", "coords");
    let mut failures = 0;
    for case in &cases {
        let report = case.run(&cfg)?;
        println!("{report}");
        if !report.passed {
            failures += 1;
        }
    }
    println!("{} of {} checks failed (tolerance {:e})", failures, cases.len(), cfg.tolerance);
    Ok(if failures == 0 { EXIT_OK } else { EXIT_CHECK_FAILED })
}

pub fn train(args: &TrainArgs, seed: Option<u64>, precision: Precision) -> Result<i32> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    dispatch!(precision, train_with(&cfg))
}

fn train_with<T: Scalar>(cfg: &RunConfig) -> Result<i32> {
    let net_cfg = cfg.network()?;
    let data = cfg.dataset::<T>()?;
    let mut net = Deconver::<T>::new(&net_cfg, cfg.init_seed)?;
    info!(
        "training {} parameters on {} samples for {} steps",
        net.param_count(),
        data.len(),
        cfg.train.steps
    );
    let out_dir = &cfg.io.output_dir;
    fs::create_dir_all(out_dir)?;
    let outcome = run_training(&mut net, &data, &cfg.train)?;
    write_text(&out_dir.join(&cfg.io.log), &outcome.log_csv())?;
    let toml = net_cfg.to_toml();
    Checkpoint::from_params(&toml, &net.params).write(out_dir.join(&cfg.io.checkpoint))?;
    Checkpoint::from_params(&toml, &outcome.best).write(out_dir.join(&cfg.io.best_checkpoint))?;

    let mut dsc = 0.0;
    for s in &data {
        let patch = cfg.train.patch.clone().unwrap_or_else(|| s.image.spatial().to_vec());
        let probs = predict_probabilities(&net, &s.image, &patch)?;
        dsc += dice_score(&binarize(&probs), &s.mask)?;
    }
    let last = outcome.log.last().expect("at least one step");
    println!("steps {}", outcome.log.len());
    println!("final_loss {}", last.loss);
    println!("final_dice_loss {}", last.dice_loss);
    println!("best_step {}", outcome.best_step);
    println!("best_loss {}", outcome.best_loss);
    println!("train_dsc {}", dsc / data.len() as f64);
    Ok(EXIT_OK)
}

pub fn predict(args: &PredictArgs, precision: Precision) -> Result<i32> {
    dispatch!(precision, predict_with(args))
}

fn predict_with<T: Scalar>(args: &PredictArgs) -> Result<i32> {
    let ck = Checkpoint::read(&args.checkpoint)?;
    if ck.config.is_empty() {
        return Err(Error::Format {
            format: "DCVW",
            msg: "checkpoint carries no network configuration".into(),
        });
    }
    let net_cfg = DeconverConfig::from_toml(&ck.config)?;
    let net = Deconver::from_params(&net_cfg, &ck.to_params::<T>()?)?;
    let image = io::read(&args.image)?.into_tensor::<T>();
    if image.rank() != net_cfg.spatial_rank + 1 || image.channels() != net_cfg.in_channels {
        return Err(Error::InvalidArgument(format!(
            "image shape {:?} does not fit a network with {} input channels and spatial rank {}",
            image.shape(),
            net_cfg.in_channels,
            net_cfg.spatial_rank
        )));
    }
    let patch = args.patch.clone().unwrap_or_else(|| image.spatial().to_vec());
    let probs = predict_probabilities(&net, &image, &patch)?;
    io::write(&args.out, &probs)?;
    if let Some(path) = &args.mask {
        io::write(path, &binarize(&probs))?;
    }
    if let Some(path) = &args.png {
        write_png(path, &probs)?;
    }
    println!("shape {:?}", probs.shape());
    Ok(EXIT_OK)
}

/// One 8-bit grayscale image per channel; channel `c > 0` of a multi-channel
/// map goes to `<stem>_c<c>.png`.
fn write_png<T: Scalar>(path: &Path, probs: &Tensor<T>) -> Result<()> {
    let &[h, w] = probs.spatial() else {
        return Err(Error::InvalidArgument("PNG export needs a rank-2 image".into()));
    };
    for c in 0..probs.channels() {
        let target = if probs.channels() == 1 {
            path.to_path_buf()
        } else {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("prob");
            path.with_file_name(format!("{stem}_c{c}.png"))
        };
        let plane = &probs.data()[c * h * w..(c + 1) * h * w];
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            let p = plane[y as usize * w + x as usize].to_f64().unwrap_or(0.0);
            image::Luma([(p.clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        img.save(&target).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<i32> {
    let pred = io::read(&args.pred)?.into_tensor::<f64>();
    let gt = io::read(&args.gt)?.into_tensor::<f64>();
    if pred.rank() < 2 {
        return Err(Error::InvalidArgument("masks must be `C × spatial`".into()));
    }
    let spacing = args.spacing.clone().unwrap_or_else(|| vec![1.0; pred.rank() - 1]);
    let mut report = MetricsReport::default();
    report.add(&args.name, &pred, &gt, &spacing)?;
    write_text(&args.out, &report.to_csv())?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
    println!("mean_dsc {}", fmt(report.mean_dice()));
    println!("mean_hd95 {}", fmt(report.mean_hd95()));
    Ok(EXIT_OK)
}

pub fn params(args: &ParamsArgs) -> Result<i32> {
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path)?.network()?,
        None => match args.preset.as_str() {
            "isles" => DeconverConfig::isles(),
            "micro" => DeconverConfig::micro(),
            other => return Err(Error::InvalidArgument(format!("unknown preset \"{other}\""))),
        },
    };
    println!("params {}", count_params(&cfg)?);
    println!("flops_per_voxel {}", estimate_flops_per_voxel(&cfg)?);
    Ok(EXIT_OK)
}
