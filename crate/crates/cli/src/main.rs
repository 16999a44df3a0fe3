mod config;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use formgraph::doc_model::{load_pages, save_pages, write_atomic, ElementKind, FormPage, GroupKind};
use formgraph::evaluator::{evaluate_pages, Metric};
use formgraph::mmpan::Model;
use formgraph::patcher::Step;
use formgraph::synthgen::generate_pages;
use formgraph::trainer::{infer_page, train, Associator};
use rayon::prelude::*;

use config::CliConfig;

/// Form-structure extraction: synthetic data, training, inference,
/// evaluation and overlay rendering.
#[derive(Parser, Debug)]
#[command(name = "formgraph", version)]
struct Cli {
    /// TOML run configuration with [gen], [model] and [train] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for generation and training; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of annotated pages.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pages: Option<usize>,
    },
    /// Train the first- or second-step association model.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        step: u8,
        #[arg(long)]
        data: PathBuf,
        /// Model preset (`desk` or `paper`).
        #[arg(long)]
        preset: Option<String>,
        /// Directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Predict groups for pages of textruns and widgets.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt1: PathBuf,
        #[arg(long)]
        ckpt2: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted pages against tagged pages.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricArg::Strict)]
        metric: MetricArg,
        /// IoU threshold for `--metric iou`.
        #[arg(long, default_value_t = 0.40)]
        threshold: f64,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a page with group outlines as PNG.
    Render {
        #[arg(long)]
        data: PathBuf,
        /// Pages whose annotations are drawn instead of the tagged ones.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        page: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Strict,
    Iou,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn,formgraph=info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    if let Some(p) = &cli.config {
        input_file(p)?;
    }
    let mut cfg = CliConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Synth { out, pages } => {
            output_file(&out)?;
            if let Some(n) = pages {
                cfg.gen.pages = n;
            }
            let pages = generate_pages(&cfg.gen)?;
            save_pages(&pages, &out)?;
            print!("{}", construct_counts(&pages));
        }
        Command::Train {
            step,
            data,
            preset,
            out,
            max_steps,
            lr,
            batch_size,
            eval_every,
        } => {
            input_file(&data)?;
            if out.exists() && !out.is_dir() {
                bail!("output {} exists and is not a directory", out.display());
            }
            let step = Step::from_number(step)?;
            let model_cfg = cfg.model.resolve(preset.as_deref(), step)?;
            let t = &mut cfg.train;
            t.max_steps = max_steps.unwrap_or(t.max_steps);
            t.lr = lr.unwrap_or(t.lr);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.eval_every = eval_every.unwrap_or(t.eval_every);
            t.checkpoint_dir = Some(out.clone());
            t.validate()?;
            let pages = load_pages(&data)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let outcome = train(&pages, &model_cfg, t)?;
            if let Some(s) = outcome.stopped_at {
                println!("thresholds met at step {s}");
            }
            if let Some(last) = outcome.checkpoints.last() {
                println!("checkpoint {}", last.display());
            }
            if let Some(m) = outcome.metrics.last() {
                println!("{}", serde_json::to_string(m)?);
            }
        }
        Command::Infer { data, ckpt1, ckpt2, out } => {
            input_file(&data)?;
            input_file(&ckpt1)?;
            if let Some(p) = &ckpt2 {
                input_file(p)?;
            }
            output_file(&out)?;
            let m1 = load_model(&ckpt1, Step::Step1)?;
            let m2 = ckpt2.as_deref().map(|p| load_model(p, Step::Step2)).transpose()?;
            let pages = load_pages(&data)?;
            let predicted = pages
                .par_iter()
                .map(|p| {
                    let mut page = infer_page(p, &m1, m2.as_ref().map(|m| m as &dyn Associator))?.page;
                    for a in &mut page.annotations {
                        a.predicted = true;
                    }
                    Ok(page)
                })
                .collect::<Result<Vec<FormPage>>>()?;
            save_pages(&predicted, &out)?;
            println!("{} pages", predicted.len());
        }
        Command::Eval {
            pred,
            gold,
            metric,
            threshold,
            out,
        } => {
            input_file(&pred)?;
            input_file(&gold)?;
            if let Some(p) = &out {
                output_file(p)?;
            }
            if !(0.0..=1.0).contains(&threshold) {
                bail!("threshold {threshold} lies outside [0, 1]");
            }
            let metric = match metric {
                MetricArg::Strict => Metric::Strict,
                MetricArg::Iou => Metric::Iou { threshold },
            };
            let report = evaluate_pages(&load_pages(&pred)?, &load_pages(&gold)?, metric)?;
            print!("{report}");
            if let Some(p) = &out {
                write_atomic(p, report.to_json().as_bytes())?;
            }
        }
        Command::Render { data, pred, page, out } => {
            input_file(&data)?;
            if let Some(p) = &pred {
                input_file(p)?;
            }
            output_file(&out)?;
            let pages = load_pages(&data)?;
            let base = find_page(&pages, &page, &data)?;
            let groups = match &pred {
                Some(p) => find_page(&load_pages(p)?, &page, p)?.annotations.clone(),
                None => base.annotations.clone(),
            };
            let img = render::render_page(base, &groups);
            write_atomic(&out, &render::png_bytes(&img)?)?;
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("FORMGRAPH_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("FORMGRAPH_THREADS={v} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn input_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("input {} does not exist or is not a file", path.display());
    }
    Ok(())
}

fn output_file(path: &Path) -> Result<()> {
    if path.is_dir() {
        bail!("output {} is a directory", path.display());
    }
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        bail!("output directory {} does not exist", parent.display());
    }
    Ok(())
}

fn load_model(path: &Path, step: Step) -> Result<Model> {
    let model = Model::load_checkpoint(path).with_context(|| format!("checkpoint {}", path.display()))?;
    if model.config().step != step {
        bail!(
            "checkpoint {} holds a step {} model, expected step {}",
            path.display(),
            model.config().step.number(),
            step.number()
        );
    }
    Ok(model)
}

fn find_page<'a>(pages: &'a [FormPage], id: &str, source: &Path) -> Result<&'a FormPage> {
    pages
        .iter()
        .find(|p| p.page_id == id)
        .with_context(|| format!("page {id} not found in {}", source.display()))
}

fn construct_counts(pages: &[FormPage]) -> String {
    let mut out = format!("{:<12} {:>8}\n{:<12} {:>8}\n", "construct", "count", "pages", pages.len());
    for kind in [ElementKind::TextRun, ElementKind::Widget] {
        let n: usize = pages.iter().map(|p| p.elements_of(kind).count()).sum();
        out += &format!("{:<12} {:>8}\n", kind.as_str(), n);
    }
    for kind in GroupKind::ALL {
        let n: usize = pages.iter().map(|p| p.annotations_of(kind).count()).sum();
        out += &format!("{:<12} {:>8}\n", kind.as_str(), n);
    }
    out
}
