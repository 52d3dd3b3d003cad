//! Command-line front end. Every command writes its outputs under
//! `--out-dir` (default `out`). Exit codes: 0 success, 2 configuration or
//! input error, 3 numerical failure.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ebdeconv::error::{Error, Result};
use ebdeconv::experiment::{
    degrade, gradcheck, log_grid, run_repro, select_model, sweep, theta_psnr_sweep, write_repro_csv,
    write_sweep_csv, ExperimentConfig, GradcheckOptions, ReproPreset, Scale, SelectionSettings, SweepParameter, Table,
};
use ebdeconv::image::{bsnr, psnr, Decibels, ImageGrid, DEFAULT_PEAK};
use ebdeconv::io::{load_image, save_image};
use ebdeconv::kernels::{BlurModel, KernelFamily, DEFAULT_SUPPORT};
use ebdeconv::map::map_estimate;
use ebdeconv::params::HyperParams;
use ebdeconv::sapg::{
    sapg_calibrate, sapg_calibrate_dual, validate_schedule, Calibration, CalibrationResult, CalibrationSummary,
    ScheduleRegime,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "ebdeconv", version, about = "Empirical Bayes semi-blind TV deconvolution")]
struct Cli {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent runs (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ModelArgs {
    #[arg(long)]
    family: Option<KernelFamily>,
    /// Comma-separated blur parameters.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
}

#[derive(Args, Clone, Default)]
struct SapgArgs {
    /// Start from the full-scale settings instead of the desk preset.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    theta0: Option<f64>,
    #[arg(long)]
    lipschitz_scale: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Blur and add noise at a target BSNR.
    Degrade {
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        crop: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
        /// Target BSNR in dB, or `inf` for a noiseless observation.
        #[arg(long)]
        bsnr: Option<String>,
    },
    /// Estimate (theta, alpha, sigma2) with the closed-form theta gradient.
    Calibrate {
        #[arg(long)]
        observed: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sapg: SapgArgs,
    },
    /// Same, with a second chain on the prior instead of the closed form.
    CalibrateDual {
        #[arg(long)]
        observed: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sapg: SapgArgs,
    },
    /// MAP estimate for given parameters or a calibration summary.
    Deconvolve {
        #[arg(long)]
        observed: PathBuf,
        /// `calibration.json` written by `calibrate`.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        sigma2: Option<f64>,
        /// Ground truth for PSNR reporting.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Calibrate every candidate family and pick the smallest residual.
    SelectModel {
        #[arg(long)]
        observed: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "gaussian,laplace,moffat")]
        families: Vec<KernelFamily>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        sapg: SapgArgs,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Independent calibrations over values of one setting.
    Sweep {
        #[arg(long)]
        observed: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        parameter: SweepParameter,
        /// Values separated by `;`, vector components by `,`.
        #[arg(long)]
        values: String,
        #[command(flatten)]
        sapg: SapgArgs,
    },
    /// Check polynomial step, batch and learning-rate exponents.
    ValidateSchedule {
        #[arg(long)]
        a: f64,
        #[arg(long)]
        b: f64,
        #[arg(long, default_value_t = 0.0)]
        c: f64,
        #[arg(long, default_value = "fixed-batch")]
        regime: String,
    },
    /// MAP PSNR over a theta grid with the true blur and noise level.
    ThetaSweep {
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        crop: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        bsnr: Option<String>,
        #[arg(long, default_value_t = 1e-3)]
        theta_min: f64,
        #[arg(long, default_value_t = 1.0)]
        theta_max: f64,
        #[arg(long, default_value_t = 16)]
        points: usize,
    },
    /// Table experiments with their preset settings.
    Repro {
        table: Table,
        #[arg(long, default_value = "desk")]
        scale: Scale,
        /// Test images; defaults to the configured image.
        #[arg(long, value_delimiter = ',')]
        images: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

fn parse_bsnr(s: &str) -> Result<Decibels> {
    match s.to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "unbounded" => Ok(Decibels::Unbounded),
        v => v
            .parse::<f64>()
            .map(Decibels::Finite)
            .map_err(|_| Error::Config(format!("invalid BSNR {s:?}"))),
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out_dir: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli, family: Option<KernelFamily>) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::new(family.unwrap_or(KernelFamily::Gaussian)),
        };
        if let Some(f) = family {
            if f != cfg.family {
                cfg.family = f;
                cfg.alpha_true = None;
                cfg.domain = None;
                cfg.sapg = None;
            }
        }
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(w) = cli.workers {
            cfg.workers = w;
        }
        if let Some(d) = &cli.out_dir {
            cfg.out_dir = Some(d.clone());
        }
        let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out_dir)?;
        Ok(Self { cfg, out_dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(self.path(name), text + "\n")?;
        Ok(())
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    fn apply_sapg(&mut self, args: &SapgArgs) -> Result<()> {
        let mut s = if args.full {
            ebdeconv::sapg::SapgConfig::full(self.cfg.family)
        } else {
            self.cfg.sapg_config()
        };
        if let Some(n) = args.iterations {
            let ratio = s.burn_in as f64 / s.n_iterations.max(1) as f64;
            s.n_iterations = n;
            s.burn_in = (ratio * n as f64).round() as usize;
        }
        if let Some(b) = args.burn_in {
            s.burn_in = b;
        }
        if let Some(w) = args.warmup {
            s.warmup_steps = w;
        }
        if let Some(t) = args.theta0 {
            s.theta0 = t;
        }
        if let Some(l) = args.lipschitz_scale {
            s.lipschitz_scale = l;
        }
        s.seed = self.cfg.seed;
        self.cfg.sapg = Some(s);
        self.cfg.validate()
    }

    fn apply_model(&mut self, m: &ModelArgs) -> Result<()> {
        if let Some(a) = &m.alpha {
            self.cfg.alpha_true = Some(a.clone());
        }
        self.cfg.validate()
    }
}

fn save_grid(ctx: &Ctx, stem: &str, img: &ImageGrid) -> Result<()> {
    save_image(img, ctx.path(&format!("{stem}.npy")))?;
    save_image(img, ctx.path(&format!("{stem}.png")))
}

fn write_calibration(ctx: &Ctx, result: CalibrationResult) -> Result<Calibration> {
    match result {
        Ok(cal) => {
            cal.trace.write_csv(ctx.create("trace.csv")?)?;
            ctx.write_json("calibration.json", &cal.summary(&ctx.cfg.sapg_config()))?;
            println!(
                "{}: theta {:.5e} alpha {:?} sigma2 {:.5} ({} averaged iterations)",
                cal.family, cal.estimate.theta, cal.estimate.alpha, cal.estimate.sigma2, cal.n_used
            );
            Ok(cal)
        }
        Err(f) => {
            f.trace.write_csv(ctx.create("trace.csv")?)?;
            Err(f.error)
        }
    }
}

#[derive(Serialize)]
struct DegradeSummary<'a> {
    config: &'a ExperimentConfig,
    alpha: Vec<f64>,
    target_bsnr: Decibels,
    sigma2: f64,
    measured_bsnr: Decibels,
    psnr: Decibels,
}

#[derive(Serialize)]
struct DeconvolveSummary {
    family: KernelFamily,
    params: HyperParams,
    iterations: usize,
    converged: bool,
    objective: f64,
    psnr: Option<Decibels>,
}

fn run(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Degrade {
            image,
            crop,
            model,
            bsnr: target,
        } => {
            let mut ctx = Ctx::new(&cli, model.family)?;
            ctx.apply_model(model)?;
            if let Some(p) = image {
                ctx.cfg.image = Some(p.clone());
            }
            if crop.is_some() {
                ctx.cfg.crop = *crop;
            }
            if let Some(b) = target {
                ctx.cfg.bsnr_db = Some(parse_bsnr(b)?);
            }
            let x = ctx.cfg.load_image()?;
            let alpha = ctx.cfg.alpha_true();
            let target = ctx.cfg.bsnr_db.unwrap_or(Decibels::Finite(30.0));
            let d = degrade(&x, ctx.cfg.family, &alpha, target, ctx.cfg.seed)?;
            save_grid(&ctx, "truth", &x)?;
            save_grid(&ctx, "observed", &d.y)?;
            ctx.write_json(
                "degrade.json",
                &DegradeSummary {
                    config: &ctx.cfg,
                    alpha,
                    target_bsnr: target,
                    sigma2: d.sigma2,
                    measured_bsnr: bsnr(&d.y, &d.hx)?,
                    psnr: psnr(&d.y, &x, DEFAULT_PEAK)?,
                },
            )?;
            println!("sigma2 {:.5}", d.sigma2);
        }
        Command::Calibrate { observed, model, sapg } | Command::CalibrateDual { observed, model, sapg } => {
            let mut ctx = Ctx::new(&cli, model.family)?;
            ctx.apply_model(model)?;
            ctx.apply_sapg(sapg)?;
            let y = load_image(observed)?;
            let domain = ctx.cfg.domain_for(ctx.cfg.family, &y)?;
            let cfg = ctx.cfg.sapg_config();
            let result = if matches!(cli.command, Command::Calibrate { .. }) {
                sapg_calibrate(&y, ctx.cfg.family, &domain, &ctx.cfg.prior, &cfg)
            } else {
                sapg_calibrate_dual(&y, ctx.cfg.family, &domain, &ctx.cfg.prior, &cfg)
            };
            write_calibration(&ctx, result)?;
        }
        Command::Deconvolve {
            observed,
            calibration,
            model,
            theta,
            sigma2,
            truth,
        } => {
            let y = load_image(observed)?;
            let (family, params) = match calibration {
                Some(p) => {
                    let s: CalibrationSummary = serde_json::from_str(&std::fs::read_to_string(p)?)?;
                    (s.family, HyperParams::new(s.theta_bar, s.alpha_bar, s.sigma2_bar))
                }
                None => {
                    let family = model
                        .family
                        .ok_or_else(|| Error::Config("--family is required without --calibration".into()))?;
                    let need = |v: Option<f64>, name: &str| {
                        v.ok_or_else(|| Error::Config(format!("--{name} is required without --calibration")))
                    };
                    let alpha = model
                        .alpha
                        .clone()
                        .ok_or_else(|| Error::Config("--alpha is required without --calibration".into()))?;
                    (family, HyperParams::new(need(*theta, "theta")?, alpha, need(*sigma2, "sigma2")?))
                }
            };
            let ctx = Ctx::new(&cli, Some(family))?;
            let blur = BlurModel::new(family, params.alpha.clone(), DEFAULT_SUPPORT, y.dims())?;
            let out = map_estimate(&y, &params, &blur, &ctx.cfg.prior, &ctx.cfg.map)?;
            if out.warning() {
                log::warn!("MAP solver stopped after {} iterations without converging", out.iterations);
            }
            let psnr = match truth {
                Some(t) => Some(psnr(&out.image, &load_image(t)?, DEFAULT_PEAK)?),
                None => None,
            };
            save_grid(&ctx, "map", &out.image)?;
            ctx.write_json(
                "deconvolve.json",
                &DeconvolveSummary {
                    family,
                    objective: out.objective(),
                    iterations: out.iterations,
                    converged: out.converged,
                    params,
                    psnr,
                },
            )?;
            if let Some(p) = psnr {
                println!("PSNR {p}");
            }
        }
        Command::SelectModel {
            observed,
            families,
            truth,
            sapg,
        } => {
            let mut ctx = Ctx::new(&cli, None)?;
            let y = load_image(observed)?;
            let truth = truth.as_ref().map(load_image).transpose()?;
            let mut candidates = Vec::new();
            for &f in families {
                ctx.cfg.family = f;
                ctx.cfg.sapg = None;
                ctx.cfg.alpha_true = None;
                ctx.cfg.domain = None;
                ctx.apply_sapg(sapg)?;
                candidates.push((f, ctx.cfg.sapg_config()));
            }
            let settings = SelectionSettings {
                bsnr_range: ctx.cfg.bsnr_range,
                prior: ctx.cfg.prior.clone(),
                map: ctx.cfg.map.clone(),
                workers: ctx.cfg.workers,
            };
            let report = select_model(&y, &candidates, &settings, truth.as_ref())?;
            ctx.write_json("selection.json", &report)?;
            for c in &report.candidates {
                println!("{:<8} residual {:.6e}", c.family.name(), c.residual);
            }
            for f in &report.failures {
                println!("{:<8} failed: {}", f.family.name(), f.error);
            }
            println!("selected {}", report.selected);
        }
        Command::Gradcheck { model, size } => {
            let mut ctx = Ctx::new(&cli, model.family)?;
            ctx.apply_model(model)?;
            let opts = GradcheckOptions {
                size: *size,
                seed: ctx.cfg.seed,
                ..GradcheckOptions::default()
            };
            let report = gradcheck(ctx.cfg.family, &ctx.cfg.alpha_true(), &opts)?;
            ctx.write_json("gradcheck.json", &report)?;
            for e in &report.entries {
                println!("{:<20} {:.3e}", e.quantity, e.rel_error);
            }
            if !report.pass {
                println!("fail: max relative error {:.3e}", report.max_rel_error);
                return Ok(EXIT_NUMERICAL);
            }
            println!("pass");
        }
        Command::Sweep {
            observed,
            model,
            parameter,
            values,
            sapg,
        } => {
            let mut ctx = Ctx::new(&cli, model.family)?;
            ctx.apply_model(model)?;
            ctx.apply_sapg(sapg)?;
            let values = parse_values(values)?;
            let y = load_image(observed)?;
            let domain = ctx.cfg.domain_for(ctx.cfg.family, &y)?;
            let outcomes = sweep(
                &y,
                ctx.cfg.family,
                &domain,
                &ctx.cfg.prior,
                &ctx.cfg.sapg_config(),
                *parameter,
                &values,
                ctx.cfg.workers,
            )?;
            write_sweep_csv(*parameter, &outcomes, ctx.create("sweep.csv")?)?;
            let summary: Vec<_> = outcomes
                .iter()
                .map(|o| match &o.result {
                    Ok(c) => serde_json::json!({"value": o.value, "estimate": c.estimate}),
                    Err(e) => serde_json::json!({"value": o.value, "error": e}),
                })
                .collect();
            ctx.write_json("sweep.json", &summary)?;
            println!("{} values written to {}", outcomes.len(), ctx.path("sweep.csv").display());
        }
        Command::ValidateSchedule { a, b, c, regime } => {
            let regime: ScheduleRegime = serde_json::from_value(serde_json::Value::String(regime.replace('-', "_")))
                .map_err(|_| Error::Config(format!("unknown regime {regime:?}")))?;
            let report = validate_schedule(*a, *b, *c, regime);
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.valid {
                return Err(Error::Config("schedule violates the convergence conditions".into()));
            }
        }
        Command::ThetaSweep {
            image,
            crop,
            model,
            bsnr: target,
            theta_min,
            theta_max,
            points,
        } => {
            let mut ctx = Ctx::new(&cli, model.family)?;
            ctx.apply_model(model)?;
            if let Some(p) = image {
                ctx.cfg.image = Some(p.clone());
            }
            if crop.is_some() {
                ctx.cfg.crop = *crop;
            }
            let target = match target {
                Some(b) => parse_bsnr(b)?,
                None => ctx.cfg.bsnr_db.unwrap_or(Decibels::Finite(30.0)),
            };
            let x = ctx.cfg.load_image()?;
            let alpha = ctx.cfg.alpha_true();
            let d = degrade(&x, ctx.cfg.family, &alpha, target, ctx.cfg.seed)?;
            let blur = BlurModel::new(ctx.cfg.family, alpha, DEFAULT_SUPPORT, x.dims())?;
            let grid = log_grid(*theta_min, *theta_max, *points);
            let sweep = theta_psnr_sweep(&x, &d.y, &blur, d.sigma2, &grid, &ctx.cfg.prior, &ctx.cfg.map, ctx.cfg.workers)?;
            ctx.write_json("theta_sweep.json", &sweep)?;
            println!("theta* {:.5e} ({})", sweep.theta_star, sweep.best_psnr);
        }
        Command::Repro {
            table,
            scale,
            images,
            seeds,
            iterations,
        } => {
            let ctx = Ctx::new(&cli, Some(table.family()))?;
            let mut preset = ReproPreset::new(*table, *scale);
            if let Some(s) = seeds {
                preset.seeds = s.clone();
            } else if cli.seed.is_some() {
                preset.seeds = vec![ctx.cfg.seed];
            }
            if let Some(n) = iterations {
                let ratio = preset.sapg.burn_in as f64 / preset.sapg.n_iterations as f64;
                preset.sapg.n_iterations = *n;
                preset.sapg.burn_in = (ratio * *n as f64).round() as usize;
            }
            preset.sapg.validate()?;
            let paths: Vec<PathBuf> = if images.is_empty() {
                vec![ctx
                    .cfg
                    .image
                    .clone()
                    .ok_or_else(|| Error::Config("repro needs --images or a configured image".into()))?]
            } else {
                images.clone()
            };
            let loaded = paths
                .iter()
                .map(|p| load_image(p).map(|img| (image_name(p), img)))
                .collect::<Result<Vec<_>>>()?;
            let report = run_repro(&preset, &loaded, ctx.cfg.workers)?;
            write_repro_csv(&report, ctx.create("repro.csv")?)?;
            ctx.write_json("repro.json", &report)?;
            for r in &report.rows {
                println!(
                    "{} {} dB seed {}: alpha {:?} sigma2 {:.4} (true {:.4}) l1 {:.4} MAP {}",
                    r.image, r.bsnr_db, r.seed, r.alpha_bar, r.sigma2_bar, r.sigma2_true, r.kernel_l1, r.map_psnr
                );
            }
            for f in &report.failures {
                println!("{} {} dB seed {}: failed: {}", f.image, f.bsnr_db, f.seed, f.error);
            }
        }
    }
    Ok(0)
}

fn image_name(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn parse_values(s: &str) -> Result<Vec<Vec<f64>>> {
    s.split(';')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.split(',')
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("invalid sweep value {c:?}")))
                })
                .collect()
        })
        .collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_CONFIG })
        }
    }
}
