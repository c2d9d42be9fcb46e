use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use a3s::autodiff::{gradcheck, set_corrupted_backward, OpKind};
use a3s::evaluation::{evaluate_end_to_end, LexiconMode, Prediction};
use a3s::inference::{save_visualization, spot, spot_all, visualize};
use a3s::net::DecodeParams;
use a3s::synth::{generate_dataset, load_dataset, Lexicon};
use a3s::training::{load_trained, train_loop, TrainConfig, METRICS_FILE};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

/// Scene-text spotting with an adversarially trained word-embedding head.
#[derive(Parser, Debug)]
#[command(name = "a3s", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset of curved words.
    GenData(GenDataArgs),
    /// Train from a `key = value` config file.
    Train(TrainArgs),
    /// End-to-end F-measure of a checkpoint (or saved predictions) on a dataset.
    Eval(EvalArgs),
    /// Spot text in one image, printing one JSON line per detection.
    Infer(InferArgs),
    /// Finite-difference check of every differentiable op.
    GradCheck(GradCheckArgs),
}

#[derive(clap::Args, Debug)]
struct GenDataArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Word list, one word per line.
    #[arg(long)]
    lexicon: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Image size as HEIGHTxWIDTH.
    #[arg(long, default_value = "96x192", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// Config file; relative paths inside it are taken from its directory.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Raw recognized strings.
    None,
    /// Each string replaced by its nearest lexicon word first.
    Full,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// JSON lines of saved predictions, one array per image in dataset order.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::None)]
    mode: Mode,
    /// Word list for `--mode full`.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Polygon IoU needed for a match.
    #[arg(long, default_value_t = 0.5)]
    iou_match: f64,
    /// Minimum detection score.
    #[arg(long, default_value_t = DecodeParams::default().score_thresh)]
    score_thresh: f64,
}

#[derive(clap::Args, Debug)]
struct InferArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Grayscale or color image; color is converted to luma.
    #[arg(long)]
    image: PathBuf,
    /// Where to write a PNG with regions and labels drawn on.
    #[arg(long)]
    viz_out: Option<PathBuf>,
    /// Minimum detection score.
    #[arg(long, default_value_t = DecodeParams::default().score_thresh)]
    score_thresh: f64,
}

#[derive(clap::Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the backward rule of the named op.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(h)?, n(w)?))
}

fn decode_params(score_thresh: f64) -> Result<DecodeParams> {
    if !(score_thresh > 0.0 && score_thresh < 1.0) {
        bail!("--score-thresh must be in (0,1), got {score_thresh}");
    }
    Ok(DecodeParams {
        score_thresh,
        ..DecodeParams::default()
    })
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let lexicon = Lexicon::load(&a.lexicon)?;
    let m = generate_dataset(&a.out, &lexicon, a.n, a.size, a.seed)?;
    eprintln!(
        "wrote {} images with {} instances to {} ({} placements skipped)",
        m.ids.len(),
        m.n_instances(),
        m.dir.display(),
        m.skipped
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = TrainConfig::load(&a.config)?;
    let out = train_loop(&cfg)?;
    if let Some(last) = out.metrics.last() {
        eprintln!(
            "iteration {}: l_det {:.4} l_rec {:.4} l_adv {:.4} d_acc {:.2}",
            last.iter + 1,
            last.l_det,
            last.l_rec,
            last.l_adv,
            last.d_acc
        );
    }
    if let Some(p) = out.final_checkpoint {
        eprintln!("checkpoint {}", p.display());
    }
    eprintln!("metrics {}", cfg.checkpoint_dir.join(METRICS_FILE).display());
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<Vec<Prediction>>> {
    let f = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, l)| {
            let l = l.with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&l).with_context(|| format!("{}:{}: bad prediction line", path.display(), i + 1))
        })
        .collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let mode = match (a.mode, &a.lexicon) {
        (Mode::None, _) => LexiconMode::None,
        (Mode::Full, Some(p)) => LexiconMode::full(Lexicon::load(p)?)?,
        (Mode::Full, None) => bail!("--mode full needs --lexicon"),
    };
    let samples = load_dataset(&a.data)?;
    let preds = match (&a.checkpoint, &a.predictions) {
        (Some(c), _) => {
            let net = load_trained(c)?;
            spot_all(&net, &samples, &decode_params(a.score_thresh)?)?
        }
        (None, Some(p)) => read_predictions(p)?,
        (None, None) => bail!("one of --checkpoint or --predictions is required"),
    };
    if preds.len() != samples.len() {
        bail!("{} prediction lines for {} images", preds.len(), samples.len());
    }
    let gts: Vec<_> = samples.into_iter().map(|s| s.instances).collect();
    let r = evaluate_end_to_end(&preds, &gts, &mode, a.iou_match)?;
    info!(
        "matched {} of {} predictions, {} ground truths",
        r.n_matched, r.n_pred, r.n_gt
    );
    println!("{}", r.to_json());
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let net = load_trained(&a.checkpoint)?;
    let img = image::open(&a.image)
        .with_context(|| format!("cannot read image {}", a.image.display()))?
        .to_luma8();
    let preds = spot(&net, &img, &decode_params(a.score_thresh)?)?;
    for p in &preds {
        println!("{}", serde_json::to_string(p)?);
    }
    if let Some(out) = &a.viz_out {
        save_visualization(&visualize(&img, &preds), out)?;
        eprintln!("visualization {}", out.display());
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<bool> {
    if let Some(name) = &a.corrupt {
        let kind = OpKind::from_name(name).ok_or_else(|| anyhow!("unknown op {name:?}"))?;
        set_corrupted_backward(Some(kind));
    }
    let mut ok = true;
    for rep in gradcheck::run_suite(a.seed)? {
        let status = if rep.passed() { "ok" } else { "FAIL" };
        println!("{:<28} {:.3e} {status}", rep.op, rep.worst_rel_err);
        if !rep.passed() {
            eprintln!("gradient check failed for {}", rep.op);
            ok = false;
        }
    }
    Ok(ok)
}

/// 2 for errors that mean the program itself is wrong, 1 for everything
/// the user can fix.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<a3s::Error>() {
        Some(a3s::Error::Dimension(_) | a3s::Error::Usage(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    std::panic::set_hook(Box::new(|info| {
        eprintln!("internal error: {info}");
        std::process::exit(2);
    }));
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Infer(a) => infer(a).map(|_| true),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
