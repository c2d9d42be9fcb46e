use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{error, info};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, sgd_step_where, ParameterSet, Tape, Var};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::geometry::{bezier_align, BezierRegion};
use crate::net::{
    backbone_forward, decode_detections, detection_forward, discriminator_logits_frozen, recognition_forward,
    word_embedding_forward, Feed, ModelConfig, NetworkParams,
};
use crate::rng;
use crate::synth::{load_dataset, SceneSample};

use super::config::TrainConfig;
use super::losses::{
    add_noise, adversarial_step_losses, detection_loss, encode_text, match_candidates_to_gt, recognition_loss_batch,
    total_loss,
};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.a3s";

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iter: usize,
    pub l_det: f64,
    pub l_rec: f64,
    pub l_adv: f64,
    pub d_loss: f64,
    pub d_acc: f64,
    pub lr: f64,
}

/// Sidecar written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: usize,
    pub model: ModelConfig,
}

fn state_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".state.json");
    PathBuf::from(s)
}

pub fn read_train_state(ckpt: &Path) -> Result<TrainState> {
    let p = state_path(ckpt);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", p.display())))
}

fn save_checkpoint(net: &NetworkParams, path: &Path, iteration: usize) -> Result<()> {
    net.save_checkpoint(path)?;
    let p = state_path(path);
    let state = TrainState {
        iteration,
        model: net.config.clone(),
    };
    let json = serde_json::to_string(&state).expect("state serializes");
    fs::write(&p, json).map_err(|e| Error::io(&p, e))
}

/// A network restored from a checkpoint written by training, with its
/// architecture taken from the sidecar.
pub fn load_trained(ckpt: &Path) -> Result<NetworkParams> {
    let state = read_train_state(ckpt)?;
    let mut net = NetworkParams::init(state.model, 0)?;
    net.load_checkpoint(ckpt)?;
    Ok(net)
}

/// Dataset indices used at `iteration`: consecutive slots of a per-epoch
/// shuffle that depends only on `(seed, epoch)`.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, iteration: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch_size)
        .map(|b| {
            let slot = iteration * batch_size + b;
            let epoch = slot / n;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng::substream(seed, &format!("epoch{epoch}")));
                cached = Some((epoch, order));
            }
            cached.as_ref().unwrap().1[slot % n]
        })
        .collect()
}

/// Terms contributed by one image.
struct ImageTerms {
    l_det: Var,
    l_rec: Var,
    pred: Option<Var>,
    targets: Vec<f64>,
}

fn image_terms(
    tape: &mut Tape,
    net: &NetworkParams,
    sample: &SceneSample,
    cfg: &TrainConfig,
    table: &EmbeddingTable,
    branch: bool,
) -> Result<ImageTerms> {
    let p = &net.params;
    let mc = &net.config;
    let img = sample.to_tensor();
    let x = tape.constant(img.shape().to_vec(), img.into_data())?;
    let feats = backbone_forward(tape, p, x)?;
    let det = detection_forward(tape, p, feats)?;
    let gts: Vec<BezierRegion> = sample.instances.iter().map(|i| i.region).collect();
    let l_det = detection_loss(tape, &det, &gts)?;

    let dp = cfg.decode_params();
    let dets = decode_detections(tape.value(det.score), tape.value(det.offsets), det.h, det.w, &dp)?;
    let cands: Vec<(BezierRegion, f64)> = dets.iter().map(|d| (d.region, d.confidence)).collect();
    let assign = match_candidates_to_gt(&cands, &gts, cfg.iou_match);

    // every ground truth is a candidate in its own right, followed by the
    // decoded detections with their assignment
    let mut regions: Vec<(BezierRegion, Option<usize>)> = gts.iter().enumerate().map(|(g, r)| (*r, Some(g))).collect();
    regions.extend(dets.iter().zip(&assign).map(|(d, a)| (d.region, *a)));

    if regions.is_empty() {
        let l_rec = tape.constant(vec![1], vec![0.0])?;
        return Ok(ImageTerms {
            l_det,
            l_rec,
            pred: None,
            targets: Vec::new(),
        });
    }
    let c = mc.backbone_channels;
    let fmap = tape.reshape(feats, vec![c, det.h, det.w])?;
    let mut aligned = Vec::with_capacity(regions.len());
    for (r, _) in &regions {
        let a = bezier_align(tape, fmap, r, mc.align_h, mc.align_w, dp.spatial_scale)?;
        aligned.push(tape.reshape(a, vec![1, c, mc.align_h, mc.align_w])?);
    }

    let rec_idx: Vec<usize> = (0..regions.len()).filter(|&k| regions[k].1.is_some()).collect();
    let rec_in: Vec<Var> = rec_idx.iter().map(|&k| aligned[k]).collect();
    let rec_in = tape.concat(&rec_in, 0)?;
    let targets_txt: Vec<Vec<usize>> = rec_idx
        .iter()
        .map(|&k| encode_text(&sample.instances[regions[k].1.unwrap()].text))
        .collect::<Result<_>>()?;
    let out = recognition_forward(tape, p, rec_in, Feed::Teacher(&targets_txt))?;
    let l_rec = recognition_loss_batch(tape, &out.logits, &targets_txt)?;

    let (pred, targets) = if branch {
        let all = tape.concat(&aligned, 0)?;
        let pred = word_embedding_forward(tape, p, all)?;
        let d = mc.emb_dim;
        let mut t = Vec::with_capacity(regions.len() * d);
        for (_, g) in &regions {
            match g {
                Some(g) => t.extend_from_slice(table.embed_text(&sample.instances[*g].text)?.values()),
                None => t.extend(std::iter::repeat_n(0.0, d)),
            }
        }
        (Some(pred), t)
    } else {
        (None, Vec::new())
    };
    Ok(ImageTerms {
        l_det,
        l_rec,
        pred,
        targets,
    })
}

fn mean_of(tape: &mut Tape, vs: &[Var]) -> Result<Var> {
    let s = tape.concat(vs, 0)?;
    Ok(tape.mean(s))
}

fn non_finite(batch: &[&SceneSample], what: &[(&str, f64)]) -> Option<Error> {
    if what.iter().all(|(_, v)| v.is_finite()) {
        return None;
    }
    let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
    let detail: Vec<String> = what.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let detail = detail.join(" ");
    error!("non-finite loss in batch [{}]: {detail}", ids.join(", "));
    for s in batch {
        let texts: Vec<&str> = s.instances.iter().map(|i| i.text.as_str()).collect();
        error!("  {}: {} instances {:?}", s.id, s.instances.len(), texts);
    }
    Some(Error::NonFinite {
        batch: ids.join(","),
        detail,
    })
}

/// Gaussian noise for one step's discriminator inputs. Empty when `std` is
/// zero. Drawn from a per-iteration stream, so a resumed run sees the same
/// values.
pub(crate) fn instance_noise(seed: u64, iteration: usize, len: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return Vec::new();
    }
    let mut r = rng::substream(seed, &format!("noise{iteration}"));
    (0..len)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut r))
        .collect()
}

/// Backpropagates `d_loss` and steps the discriminator alone, leaving every
/// gradient cleared.
pub(crate) fn discriminator_step(
    tape: &mut Tape,
    net: &mut NetworkParams,
    d_loss: Var,
    lr: f64,
    clip: f64,
) -> Result<()> {
    tape.backward(d_loss)?;
    tape.accumulate_param_grads(&mut net.params)?;
    clip_grad_norm(&mut net.params, clip, NetworkParams::is_discriminator);
    sgd_step_where(&mut net.params, lr, NetworkParams::is_discriminator)?;
    net.params.zero_grad();
    tape.zero_grad();
    Ok(())
}

/// `BCE(D(pred + noise), 1)` with the discriminator's current weights held
/// fixed.
pub(crate) fn frozen_generator_loss(tape: &mut Tape, p: &ParameterSet, pred: Var, noise: &[f64]) -> Result<Var> {
    let g_in = add_noise(tape, pred, noise)?;
    let fake = discriminator_logits_frozen(tape, p, g_in)?;
    let n = tape.shape(fake)[0];
    tape.binary_cross_entropy_logits(fake, &vec![1.0; n])
}

/// One alternating update: the discriminator first (on detached
/// predictions), then every other parameter on the weighted total loss with
/// the freshly updated discriminator held fixed. When the semantic branch
/// is off, the word-embedding head and discriminator are left untouched.
pub fn train_step(
    net: &mut NetworkParams,
    batch: &[&SceneSample],
    table: &EmbeddingTable,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<StepMetrics> {
    let lr = cfg.lr_at(iteration);
    let branch = cfg.semantic_branch();
    let generator = |n: &str| !NetworkParams::is_discriminator(n) && (branch || !NetworkParams::is_embedding_head(n));
    let mut tape = Tape::new();
    let names: Vec<String> = net.params.names().filter(|n| generator(n)).map(String::from).collect();
    for n in &names {
        tape.param(&net.params, n)?;
    }

    let mut dets = Vec::new();
    let mut recs = Vec::new();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for s in batch {
        let t = image_terms(&mut tape, net, s, cfg, table, branch)?;
        dets.push(t.l_det);
        recs.push(t.l_rec);
        preds.extend(t.pred);
        targets.extend(t.targets);
    }
    let l_det = mean_of(&mut tape, &dets)?;
    let l_rec = mean_of(&mut tape, &recs)?;

    let mut d_loss_v = 0.0;
    let mut d_acc = 0.0;
    let l_adv = if branch && !preds.is_empty() {
        let pred = tape.concat(&preds, 0)?;
        let n_values = targets.len();
        let noise = instance_noise(cfg.seed, iteration, 2 * n_values, cfg.instance_noise);
        let adv = adversarial_step_losses(&mut tape, &net.params, pred, &targets, cfg.loss_mode, &noise)?;
        if let Some(d_loss) = adv.d_loss {
            d_loss_v = tape.scalar(d_loss);
            d_acc = adv.d_acc;
            if let Some(e) = non_finite(batch, &[("d_loss", d_loss_v)]) {
                return Err(e);
            }
            discriminator_step(&mut tape, net, d_loss, lr, cfg.grad_clip)?;
            frozen_generator_loss(&mut tape, &net.params, pred, &noise[..noise.len() / 2])?
        } else {
            adv.g_loss
        }
    } else {
        tape.constant(vec![1], vec![0.0])?
    };

    let total = total_loss(&mut tape, l_det, l_rec, l_adv, &cfg.weights())?;
    let m = StepMetrics {
        iter: iteration,
        l_det: tape.scalar(l_det),
        l_rec: tape.scalar(l_rec),
        l_adv: tape.scalar(l_adv),
        d_loss: d_loss_v,
        d_acc,
        lr,
    };
    if let Some(e) = non_finite(
        batch,
        &[
            ("l_det", m.l_det),
            ("l_rec", m.l_rec),
            ("l_adv", m.l_adv),
            ("total", tape.scalar(total)),
        ],
    ) {
        return Err(e);
    }
    tape.backward(total)?;
    tape.accumulate_param_grads(&mut net.params)?;
    clip_grad_norm(&mut net.params, cfg.grad_clip, generator);
    sgd_step_where(&mut net.params, lr, generator)?;
    net.params.zero_grad();
    Ok(m)
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: NetworkParams,
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: Option<PathBuf>,
}

fn check_data(data: &[SceneSample], table: &EmbeddingTable, cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut missing: Vec<&str> = Vec::new();
    for s in data {
        for i in &s.instances {
            if i.text.chars().count() >= cfg.max_steps {
                return Err(Error::Config(format!(
                    "{}: {:?} does not fit max_steps = {}",
                    s.id, i.text, cfg.max_steps
                )));
            }
            if table.embed_text(&i.text).is_err() && !missing.contains(&i.text.as_str()) {
                missing.push(&i.text);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "embedding table lacks transcriptions: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

/// Trains in memory from iteration `start` (parameters in `net` already
/// reflect it), calling `on_step` after every step.
pub fn train_on(
    net: &mut NetworkParams,
    data: &[SceneSample],
    table: &EmbeddingTable,
    cfg: &TrainConfig,
    start: usize,
    mut on_step: impl FnMut(&NetworkParams, &StepMetrics) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    check_data(data, table, cfg)?;
    let mut out = Vec::with_capacity(cfg.iterations.saturating_sub(start));
    for it in start..cfg.iterations {
        let idx = batch_indices(data.len(), cfg.batch_size, cfg.seed, it);
        let batch: Vec<&SceneSample> = idx.iter().map(|&i| &data[i]).collect();
        let m = train_step(net, &batch, table, cfg, it)?;
        on_step(net, &m)?;
        out.push(m);
    }
    Ok(out)
}

/// Full run from a config: loads data and table, initializes (or resumes),
/// trains, writes periodic and final checkpoints plus the metrics log.
pub fn train_loop(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data_dir)?;
    let table = EmbeddingTable::load(&cfg.embedding_table)?;
    let mut net = NetworkParams::init_for_table(cfg.model_config(table.dim()), table.dim(), cfg.seed)?;
    let mut start = 0;
    if let Some(r) = &cfg.resume {
        net.load_checkpoint(r)?;
        start = read_train_state(r)?.iteration;
        info!("resuming from {} at iteration {start}", r.display());
    }
    let dir = &cfg.checkpoint_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(dir.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(dir.join("config.txt"), e))?;

    let log_path = dir.join(METRICS_FILE);
    let mut kept = Vec::new();
    if start > 0 && log_path.exists() {
        let f = fs::File::open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&log_path, e))?;
            if let Ok(m) = serde_json::from_str::<StepMetrics>(&line) {
                if m.iter < start {
                    kept.push(line);
                }
            }
        }
    }
    let f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(f);
    for line in kept {
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
    }

    let every = cfg.checkpoint_every;
    let metrics = train_on(&mut net, &data, &table, cfg, start, |net, m| {
        let json = serde_json::to_string(m).expect("metrics serialize");
        writeln!(log, "{json}").map_err(|e| Error::io(&log_path, e))?;
        let done = m.iter + 1;
        if every > 0 && done % every == 0 && done < cfg.iterations {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            save_checkpoint(net, &dir.join(format!("ckpt_{done:06}.a3s")), done)?;
        }
        if done % 50 == 0 {
            info!(
                "iter {done}: l_det {:.4} l_rec {:.4} l_adv {:.4} d_acc {:.2}",
                m.l_det, m.l_rec, m.l_adv, m.d_acc
            );
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let fin = dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&net, &fin, cfg.iterations.max(start))?;
    Ok(TrainOutcome {
        net,
        metrics,
        final_checkpoint: Some(fin),
    })
}
