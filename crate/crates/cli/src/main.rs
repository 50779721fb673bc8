use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use scmn::ablation::{component_arms, headline_arms, mu_arms, run_ablation, shuffle_arms};
use scmn::checkpoint;
use scmn::config::RunConfig;
use scmn::data::{
    append_line, gen_dataset, read_ppm, render_sample, write_pgm, write_ppm, DatasetManifest,
};
use scmn::diagnostics::{op_grad_suite, pipeline_grad_check};
use scmn::eval::{evaluate, metrics_text, EvalItem};
use scmn::localization::extract_box;
use scmn::maps::select_class;
use scmn::params::ModelParams;
use scmn::pipeline::{infer, pair_forward};
use scmn::tensor::{ops, Tape};
use scmn::train::train;

/// Tolerance for `grad-check`.
const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "scmn",
    version,
    about = "Shuffle-and-match localization on a toy vision transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset
    GenData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train from `<data>/train.txt` and write a checkpoint
    Train {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        /// Per-step `step l_cls l_er l_total` lines; defaults to `<out>.log`
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Localization metrics on `<data>/test.txt`
    Eval {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "metrics.txt")]
        out: PathBuf,
        /// Per-image records
        #[arg(long)]
        records: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Classify one PPM image and write its activation map
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "heatmap.pgm")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Shuffle one image, match it against the primal and dump the plan
    MatchDemo {
        /// Model to take features from; freshly initialized when absent
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// PPM image; a synthetic sample is rendered when absent
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        label: usize,
        #[arg(long, default_value = "match-demo")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every op and of the full loss
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate several arms over several seeds
    Ablate {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "components")]
        arms: ArmSet,
        /// Number of seeds, counting up from `--seed`
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value = "ablation.txt")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmSet {
    Components,
    /// Full pipeline and the no-shuffle, no-matching baseline
    Headline,
    Shuffle,
    Mu,
}

/// Saved next to a checkpoint so that later commands rebuild the same model.
fn config_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn load_config(common: &Common, ckpt: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(saved) = ckpt.map(config_path).filter(|p| p.exists()) {
        let text =
            fs::read_to_string(&saved).with_context(|| format!("reading {}", saved.display()))?;
        cfg.apply_text(&text)
            .with_context(|| format!("in {}", saved.display()))?;
    }
    if let Some(path) = &common.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)
            .with_context(|| format!("in {}", path.display()))?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn eval_items(manifest: &DatasetManifest) -> Result<Vec<EvalItem>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let path = manifest.image_path(e);
            Ok(EvalItem {
                id: e.path.display().to_string(),
                image: read_ppm(&path).with_context(|| format!("loading {}", path.display()))?,
                label: e.label,
                boxes: e.boxes.clone(),
            })
        })
        .collect()
}

fn read_manifest(data: &Path, split: &str) -> Result<DatasetManifest> {
    let path = data.join(format!("{split}.txt"));
    DatasetManifest::read(&path)
        .with_context(|| format!("reading {} (run gen-data first?)", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            n_train,
            n_test,
            common,
        } => {
            let cfg = load_config(&common, None)?;
            let (n_train, n_test) = (n_train.unwrap_or(cfg.n_train), n_test.unwrap_or(cfg.n_test));
            let (train, test) = gen_dataset(
                &out,
                n_train,
                n_test,
                cfg.encoder.image_size,
                cfg.train.seed,
            )?;
            println!(
                "wrote {} train and {} test images to {}",
                train.entries.len(),
                test.entries.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            log,
            epochs,
            lr,
            common,
        } => {
            let mut cfg = load_config(&common, None)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            cfg.validate()?;
            let samples = read_manifest(&data, "train")?.load_samples()?;
            let log = log.unwrap_or_else(|| {
                let mut s = out.as_os_str().to_owned();
                s.push(".log");
                PathBuf::from(s)
            });
            if log.exists() {
                fs::remove_file(&log).with_context(|| format!("clearing {}", log.display()))?;
            }
            let mut params = ModelParams::init(&cfg.encoder, cfg.train.seed)?;
            let start = Instant::now();
            let steps_per_epoch = samples.len().div_ceil(cfg.train.batch_size);
            let mut write_err = None;
            let summary = train(&mut params, &samples, &cfg.train, |s| {
                if write_err.is_none() {
                    write_err = append_line(&log, &s.line()).err();
                }
                if (s.step + 1) % steps_per_epoch == 0 {
                    eprintln!(
                        "epoch {:>3}  loss {:.4}  {:.0}s",
                        s.epoch + 1,
                        s.breakdown.l_total,
                        start.elapsed().as_secs_f64()
                    );
                }
            })?;
            if let Some(e) = write_err {
                return Err(e).context("writing the training log");
            }
            checkpoint::save(&out, &params)?;
            fs::write(config_path(&out), cfg.to_text())?;
            println!("steps {}", summary.steps);
            println!("initial_loss {:.6}", summary.initial_loss);
            println!("final_loss {:.6}", summary.final_loss);
            println!("seconds {:.1}", start.elapsed().as_secs_f64());
        }
        Command::Eval {
            data,
            checkpoint: ckpt,
            out,
            records,
            common,
        } => {
            let cfg = load_config(&common, Some(&ckpt))?;
            let params = checkpoint::load(&ckpt, &cfg.encoder)?;
            let items = eval_items(&read_manifest(&data, "test")?)?;
            let (recs, metrics) = evaluate(&params, &items, cfg.train.use_across, cfg.threshold)?;
            let text = metrics_text(&metrics, items.len());
            fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
            if let Some(path) = records {
                let lines: String = recs.iter().map(|r| r.line() + "\n").collect();
                fs::write(&path, lines).with_context(|| format!("writing {}", path.display()))?;
            }
            print!("{text}");
        }
        Command::Infer {
            image,
            checkpoint: ckpt,
            out,
            common,
        } => {
            let cfg = load_config(&common, Some(&ckpt))?;
            let params = checkpoint::load(&ckpt, &cfg.encoder)?;
            let img = read_ppm(&image)?;
            let res = infer(&params, &img, cfg.train.use_across)?;
            let (h, w) = (img.dims()[1], img.dims()[2]);
            let map = select_class(&res.m_hat, res.top1())?;
            let b = extract_box(&map, h, w, cfg.threshold)?;
            write_pgm(&out, &ops::upsample_bilinear(&map, h, w)?)?;
            let ranked: Vec<String> = res.ranked.iter().map(usize::to_string).collect();
            println!("ranked {}", ranked.join(","));
            println!("box {} {} {} {}", b.x0, b.y0, b.x1, b.y1);
        }
        Command::MatchDemo {
            checkpoint: ckpt,
            image,
            label,
            out,
            common,
        } => {
            let cfg = load_config(&common, ckpt.as_deref())?;
            let params = match &ckpt {
                Some(p) => checkpoint::load(p, &cfg.encoder)?,
                None => ModelParams::init(&cfg.encoder, cfg.train.seed)?,
            };
            if label >= cfg.encoder.num_classes {
                bail!(
                    "label {label} out of range for {} classes",
                    cfg.encoder.num_classes
                );
            }
            let primal = match &image {
                Some(p) => read_ppm(p)?,
                None => render_sample(cfg.train.seed, label, cfg.encoder.image_size)?.0,
            };
            let mut tc = cfg.train.clone();
            if !tc.use_local_shuffle && !tc.use_global_shuffle {
                tc.use_local_shuffle = true;
            }
            let shuffled = tc
                .shuffled_view(&primal, cfg.encoder.patch_size, 0, 0)?
                .context("no shuffle configured")?;
            let mut opts = tc.pipeline()?;
            opts.use_matching = true;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let fwd = pair_forward(
                &mut tape,
                &bound,
                &cfg.encoder,
                &opts,
                &primal,
                Some(&shuffled),
                label,
                None,
            )?;
            let plan = fwd.plan.context("matching did not run")?;
            fs::create_dir_all(&out)?;
            write_ppm(&out.join("primal.ppm"), &primal)?;
            write_ppm(&out.join("shuffled.ppm"), &shuffled)?;
            write_pgm(&out.join("plan.pgm"), &plan.flow)?;
            println!("positions {}x{}", plan.flow.dims()[0], plan.flow.dims()[1]);
            println!("iterations {}", plan.iterations);
            println!("converged {}", plan.converged);
            println!("marginal_error {:.3e}", plan.marginal_error);
            println!("objective {:.6}", plan.objective());
        }
        Command::GradCheck { common } => {
            let cfg = load_config(&common, None)?;
            let seed = cfg.train.seed;
            let start = Instant::now();
            let mut checks = op_grad_suite(seed)?;
            for across in [false, true] {
                checks.push(pipeline_grad_check(seed, across, 10)?);
            }
            let mut failed = 0;
            for c in &checks {
                let ok = c.max_rel_error <= GRAD_TOL;
                failed += usize::from(!ok);
                println!(
                    "{:<24} {:.3e} {}",
                    c.name,
                    c.max_rel_error,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            println!("seconds {:.1}", start.elapsed().as_secs_f64());
            if failed > 0 {
                bail!(
                    "{failed} of {} gradient checks exceed {GRAD_TOL:e}",
                    checks.len()
                );
            }
        }
        Command::Ablate {
            data,
            arms,
            seeds,
            out,
            common,
        } => {
            let cfg = load_config(&common, None)?;
            let arms = match arms {
                ArmSet::Components => component_arms(),
                ArmSet::Headline => headline_arms(),
                ArmSet::Shuffle => shuffle_arms(),
                ArmSet::Mu => mu_arms(),
            };
            let seeds: Vec<u64> = (0..seeds).map(|i| cfg.train.seed + i).collect();
            let train_set = read_manifest(&data, "train")?.load_samples()?;
            let test = eval_items(&read_manifest(&data, "test")?)?;
            let report = run_ablation(&cfg, &arms, &seeds, &train_set, &test, |arm, seed, m| {
                eprintln!("{arm} seed {seed}: gt_known {:.4}", m.gt_known);
            })?;
            let text = report.to_text();
            fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
