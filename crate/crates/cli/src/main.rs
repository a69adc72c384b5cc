use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::Datelike;
use clap::{Args, Parser, Subcommand};

use tcgan_core::config::RunConfig;
use tcgan_core::dataset::tcir::read_meta;
use tcgan_core::dataset::time::format_time;
use tcgan_core::dataset::{
    generate_synthetic, load_tcir, split_by_year, write_tcir, Dataset, LoadOptions, M2N_MAX, TEST_YEARS, TRAIN_YEARS,
    VALID_YEARS,
};
use tcgan_core::inference::{blend_angles, read_estimates, smooth_series, write_estimates, Estimator, FrameInput};
use tcgan_core::metrics::EvalReport;
use tcgan_core::plot::{generation_grid_plot, learning_curve_plot, Curve, GridPanel};
use tcgan_core::qc::{write_qc_report, Verdict};
use tcgan_core::training::{
    five_stage_schedule, read_epoch_log, three_stage_schedule, ModelSpecs, NullObserver, StageConfig, Trainer,
    EPOCH_LOG,
};

#[derive(Parser)]
#[command(name = "tcgan", version, about = "Tropical cyclone intensity from IR1 and WV imagery")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct DataArgs {
    /// TCIR-format HDF5 container.
    #[arg(long = "in", requires = "meta")]
    input: Option<PathBuf>,
    /// Metadata CSV matching the container rows.
    #[arg(long, requires = "input")]
    meta: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for the model, logs and checkpoints.
    #[arg(long, required_unless_present = "dry_run")]
    out: Option<PathBuf>,
    /// Print the stage schedule and exit.
    #[arg(long)]
    dry_run: bool,
    /// Comma-separated max epochs per stage.
    #[arg(long, value_delimiter = ',')]
    epochs: Option<Vec<usize>>,
    /// Continue from the training state in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset in TCIR format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        n_frames: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        /// JSON sidecar with the construction and per-frame latents.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// VIS quality control report.
    Qc {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Three-stage training.
    Train3(TrainArgs),
    /// Five-stage training.
    Train5(TrainArgs),
    /// Intensity estimates from IR1 and WV only.
    Estimate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// RMSE report for an estimate CSV.
    Eval {
        #[arg(long)]
        estimates: PathBuf,
        /// Metadata CSV holding best-track intensities.
        #[arg(long)]
        meta: PathBuf,
        /// Year split to score: all, train, valid or test.
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Figures.
    #[command(subcommand)]
    Plot(PlotCmd),
}

#[derive(Subcommand)]
enum PlotCmd {
    /// Validation learning curves from epoch logs, given as LABEL=PATH.
    Curves {
        #[arg(long = "log", required = true, value_parser = parse_labeled)]
        logs: Vec<(String, PathBuf)>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Real against generated VIS and PMW for the first frames of a dataset.
    Grid {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        columns: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_labeled(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((l, p)) if !l.is_empty() && !p.is_empty() => Ok((l.to_string(), PathBuf::from(p))),
        _ => Err(format!("expected LABEL=PATH, got {s:?}")),
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    match cli.cmd {
        Cmd::Synth {
            out,
            meta,
            n_frames,
            image_size,
            truth,
        } => {
            if let Some(n) = n_frames {
                cfg.synthetic.n_frames = n;
            }
            if let Some(s) = image_size {
                cfg.synthetic.image_size = s;
            }
            let syn = generate_synthetic(&cfg.synthetic)?;
            write_tcir(&syn.dataset, &out, &meta)?;
            if let Some(p) = truth {
                fs::write(&p, serde_json::to_string_pretty(&syn.record())?)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            println!("wrote {} frames to {}", syn.dataset.len(), out.display());
        }
        Cmd::Qc { input, meta, out } => {
            let ds = load_tcir(&input, &meta, &LoadOptions::default())?;
            let stats = write_qc_report(&out, &ds, &cfg.train.qc)?;
            let good = stats.iter().filter(|s| s.verdict == Verdict::Good).count();
            println!(
                "{good} of {} frames pass VIS quality control ({:.1}%)",
                stats.len(),
                100.0 * good as f64 / stats.len().max(1) as f64
            );
        }
        Cmd::Train3(args) => {
            cfg.three_stage_epochs = stage_epochs(args.epochs.as_deref(), &cfg.three_stage_epochs)?;
            train(&cfg, three_stage_schedule(cfg.three_stage_epochs), &args)?;
        }
        Cmd::Train5(args) => {
            cfg.five_stage_epochs = stage_epochs(args.epochs.as_deref(), &cfg.five_stage_epochs)?;
            train(&cfg, five_stage_schedule(cfg.five_stage_epochs), &args)?;
        }
        Cmd::Estimate {
            model,
            input,
            meta,
            out,
        } => {
            let ds = load_tcir(&input, &meta, &LoadOptions {
                target_size: cfg.data.image_size,
            })?;
            let mut est = Estimator::<f32>::load(&model)?;
            est.mode = cfg.inference.blend;
            est.angles = blend_angles(cfg.inference.n_angles);
            est.batch_size = cfg.inference.batch_size;
            let mut records = est.estimate_many(&FrameInput::from_dataset(&ds))?;
            smooth_series(&mut records, cfg.inference.smooth_window)?;
            write_estimates(&out, &records)?;
            println!("wrote {} estimates to {}", records.len(), out.display());
        }
        Cmd::Eval {
            estimates,
            meta,
            split,
            out,
        } => {
            let report = evaluate(&estimates, &meta, &split)?;
            fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "{}: n={} rmse raw {:.2} blend {:.2} smooth {}",
                report.split,
                report.n_samples,
                report.rmse_raw,
                report.rmse_blend,
                report.rmse_smooth.map_or("-".into(), |v| format!("{v:.2}"))
            );
        }
        Cmd::Plot(PlotCmd::Curves { logs, epochs, out }) => {
            let mut curves = Vec::with_capacity(logs.len());
            for (label, path) in &logs {
                let path = if path.is_dir() { path.join(EPOCH_LOG) } else { path.clone() };
                let rows = read_epoch_log(&path).with_context(|| format!("reading {}", path.display()))?;
                curves.push(Curve::from_log(label, &rows)?);
            }
            let legend = learning_curve_plot(&curves, epochs, &out)?;
            println!("plotted {} to {}", legend.join(", "), out.display());
        }
        Cmd::Plot(PlotCmd::Grid {
            model,
            input,
            meta,
            frames,
            columns,
            out,
        }) => {
            let ds = load_tcir(&input, &meta, &LoadOptions {
                target_size: cfg.data.image_size,
            })?;
            grid_plot(&model, &ds, frames, columns, &out)?;
        }
    }
    Ok(())
}

fn stage_epochs<const N: usize>(cli: Option<&[usize]>, cfg: &[usize; N]) -> Result<[usize; N]> {
    match cli {
        None => Ok(*cfg),
        Some(v) => v
            .try_into()
            .map_err(|_| anyhow::anyhow!("--epochs needs {N} values, got {}", v.len())),
    }
}

fn load_data(cfg: &RunConfig, args: &DataArgs) -> Result<Dataset> {
    let paths = match (&args.input, &args.meta) {
        (Some(c), Some(m)) => Some((c.clone(), m.clone())),
        _ => cfg.data.container.clone().zip(cfg.data.meta.clone()),
    };
    Ok(match paths {
        Some((c, m)) => load_tcir(&c, &m, &LoadOptions {
            target_size: cfg.data.image_size,
        })
        .with_context(|| format!("loading {}", c.display()))?,
        None => {
            log::info!("no container given; generating {} synthetic frames", cfg.synthetic.n_frames);
            generate_synthetic(&cfg.synthetic)?.dataset
        }
    })
}

fn print_schedule(schedule: &[StageConfig]) {
    println!("stage  label       epochs  data           trains                  regressor vis/pmw   alpha/beta/gamma");
    for s in schedule {
        let trains: Vec<String> = s.trainable.iter().map(|n| n.to_string()).collect();
        let weights: Vec<String> = [s.weights.vis, s.weights.pmw]
            .into_iter()
            .flatten()
            .map(|w| format!("{}/{}/{}", w.alpha, w.beta, w.gamma))
            .collect();
        println!(
            "{:<6} {:<11} {:<7} {:<14} {:<23} {:<19} {}",
            s.stage_id,
            s.label,
            s.max_epochs,
            format!("{:?}", s.data_filter),
            trains.join(","),
            format!("{:?}/{:?}", s.vis_source_for_lregr, s.pmw_source_for_lregr),
            if weights.is_empty() { "-".into() } else { weights.join(" ") }
        );
    }
}

fn train(cfg: &RunConfig, schedule: Vec<StageConfig>, args: &TrainArgs) -> Result<()> {
    if args.dry_run {
        print_schedule(&schedule);
        return Ok(());
    }
    let out = args.out.as_deref().expect("clap requires --out");
    let ds = load_data(cfg, &args.data)?;
    let split = split_by_year(&ds);
    log::info!(
        "{} train / {} valid / {} test frames, {} outside the split years",
        split.train.len(),
        split.valid.len(),
        split.test.len(),
        split.dropped
    );
    let mut tc = cfg.train.clone();
    tc.log_dir = Some(out.join("logs"));
    tc.checkpoint_dir = Some(out.join("checkpoints"));
    let state = out.join("checkpoints").join("state.ckpt");
    let mut trainer = if args.resume {
        Trainer::<f32>::resume(&state, &split.train, &split.valid)
            .with_context(|| format!("resuming from {}", state.display()))?
    } else {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("config.toml"), cfg.to_toml()?)?;
        Trainer::<f32>::new(tc, schedule, &ModelSpecs::full(cfg.train.width_divisor), &split.train, &split.valid)?
    };
    let outcome = trainer.run(&mut NullObserver)?;
    trainer.save_bundle(&out.join("model"), "final")?;
    if let Some(last) = outcome.history.last() {
        println!(
            "finished {} steps; last validation MSE {}",
            outcome.steps,
            last.val_mse.map_or("-".into(), |v| format!("{v:.2}"))
        );
    }
    Ok(())
}

fn evaluate(estimates: &Path, meta: &Path, split: &str) -> Result<EvalReport> {
    let years = match split {
        "all" => None,
        "train" => Some(TRAIN_YEARS),
        "valid" => Some(VALID_YEARS),
        "test" => Some(TEST_YEARS),
        other => bail!("unknown split {other:?}; expected all, train, valid or test"),
    };
    let truth: HashMap<(String, String), f64> = read_meta(meta)?
        .into_iter()
        .map(|m| ((m.tc_id, format_time(&m.utc_time)), m.vmax))
        .collect();
    let mut records = Vec::new();
    let mut target = Vec::new();
    for r in read_estimates(estimates)? {
        if years.as_ref().is_some_and(|y| !y.contains(&r.utc_time.year())) {
            continue;
        }
        let key = (r.tc_id.clone(), format_time(&r.utc_time));
        let Some(&v) = truth.get(&key) else {
            bail!("no best-track intensity for {} {}", key.0, key.1);
        };
        target.push(v);
        records.push(r);
    }
    Ok(EvalReport::new(split, &records, &target)?)
}

fn grid_plot(model: &Path, ds: &Dataset, frames: usize, columns: usize, out: &Path) -> Result<()> {
    let mut est = Estimator::<f32>::load(model)?;
    let chosen: Vec<_> = ds
        .frames()
        .iter()
        .filter(|f| f.vis_present && f.pmw_present)
        .take(frames)
        .collect();
    if chosen.is_empty() {
        bail!("no frame carries both real VIS and PMW to compare against");
    }
    let stats = est.bundle.stats.clone();
    let inputs: Vec<FrameInput<'_>> = chosen
        .iter()
        .map(|f| FrameInput {
            ir1: &f.ir1,
            wv: &f.wv,
            meta: &f.meta,
        })
        .collect();
    // VIS at each frame's own m2n so it is comparable with the real image
    let mut generated = Vec::with_capacity(chosen.len());
    for (f, input) in chosen.iter().zip(&inputs) {
        let m2n = f.m2n().min(M2N_MAX);
        generated.push(est.generate(std::slice::from_ref(input), m2n)?.remove(0));
    }
    let scale = |g: &tcgan_core::dataset::Grid, a: tcgan_core::qc::Affine| {
        g.mapv(|v| (v - a.mean as f32) / a.std as f32)
    };
    let real: Vec<_> = chosen
        .iter()
        .map(|f| (scale(&f.vis, stats.vis).mapv(|v| v.clamp(0.0, 1.0)), scale(&f.pmw, stats.pmw)))
        .collect();
    let panels: Vec<GridPanel<'_>> = chosen
        .iter()
        .zip(&generated)
        .zip(&real)
        .map(|((f, g), (rv, rp))| GridPanel {
            tc_id: &f.meta.tc_id,
            utc_time: f.meta.utc_time,
            real_vis: rv,
            gen_vis: &g.vis,
            real_pmw: rp,
            gen_pmw: &g.pmw,
        })
        .collect();
    let layout = generation_grid_plot(&panels, columns, out)?;
    println!("{} blocks in {}x{} to {}", panels.len(), layout.rows, layout.columns, out.display());
    Ok(())
}
