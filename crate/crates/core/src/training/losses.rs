use std::cmp::Ordering;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{point_in_polygon, BezierRegion, Polygon};
use crate::net::{
    discriminator_logits, encode_region, eos_index, num_classes, region_iou, DetectionOutput, FEATURE_STRIDE,
};
use crate::synth::char_index;

use super::config::{LossMode, LossWeights};

/// Per candidate, the matched ground-truth index or `None` for a false
/// positive.
pub type MatchAssignment = Vec<Option<usize>>;

/// Greedy one-to-one matching. Candidates are visited by descending
/// confidence (ties by index); each takes the unmatched ground truth with
/// the highest IoU at or above `iou_thr` (ties by lower index) among those
/// `accept` allows.
pub fn greedy_match(
    cands: &[Polygon],
    confidences: &[f64],
    gts: &[Polygon],
    iou_thr: f64,
    raster_scale: usize,
    accept: impl Fn(usize, usize) -> bool,
) -> MatchAssignment {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        confidences[b]
            .partial_cmp(&confidences[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; cands.len()];
    for c in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gp) in gts.iter().enumerate() {
            if taken[g] || !accept(c, g) {
                continue;
            }
            let iou = region_iou(&cands[c], gp, raster_scale);
            if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[c] = Some(g);
        }
    }
    out
}

/// [`greedy_match`] on regions with no transcription condition.
pub fn match_candidates_to_gt(cands: &[(BezierRegion, f64)], gts: &[BezierRegion], iou_match: f64) -> MatchAssignment {
    let cp: Vec<Polygon> = cands.iter().map(|(r, _)| r.polygon()).collect();
    let conf: Vec<f64> = cands.iter().map(|(_, c)| *c).collect();
    let gp: Vec<Polygon> = gts.iter().map(BezierRegion::polygon).collect();
    greedy_match(
        &cp,
        &conf,
        &gp,
        iou_match,
        crate::geometry::DEFAULT_RASTER_SCALE,
        |_, _| true,
    )
}

/// Cell labels (1 where the cell center lies in a ground-truth polygon)
/// and, for each positive cell `(i*w + j)`, the first ground truth
/// containing it.
pub fn cell_targets(h: usize, w: usize, gts: &[BezierRegion]) -> (Vec<f64>, Vec<(usize, usize)>) {
    let s = FEATURE_STRIDE as f64;
    let polys: Vec<Polygon> = gts.iter().map(BezierRegion::polygon).collect();
    let mut labels = vec![0.0; h * w];
    let mut pos = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let c = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
            if let Some(g) = polys.iter().position(|p| point_in_polygon(c, p)) {
                labels[i * w + j] = 1.0;
                pos.push((i * w + j, g));
            }
        }
    }
    (labels, pos)
}

/// Cell BCE on the score map plus the mean absolute offset error over
/// positive cells.
pub fn detection_loss(tape: &mut Tape, det: &DetectionOutput, gts: &[BezierRegion]) -> Result<Var> {
    let (h, w) = (det.h, det.w);
    let (labels, pos) = cell_targets(h, w, gts);
    let logits = tape.reshape(det.score, vec![h * w])?;
    let bce = tape.binary_cross_entropy_logits(logits, &labels)?;
    if pos.is_empty() {
        return Ok(bce);
    }
    let mut idx = Vec::with_capacity(16 * pos.len());
    let mut target = Vec::with_capacity(16 * pos.len());
    for &(cell, g) in &pos {
        let enc = encode_region(&gts[g], cell / w, cell % w, FEATURE_STRIDE as f64);
        for (k, v) in enc.iter().enumerate() {
            idx.push(k * h * w + cell);
            target.push(*v);
        }
    }
    let n = idx.len();
    let got = tape.gather(det.offsets, &idx)?;
    let want = tape.constant(vec![n], target)?;
    let diff = tape.sub(got, want)?;
    let abs = tape.abs(diff);
    let mae = tape.mean(abs);
    tape.add(bce, mae)
}

/// Class indices of `text`; characters outside the charset are a
/// validation error.
pub fn encode_text(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            char_index(c).ok_or_else(|| Error::Validation {
                id: text.to_string(),
                msg: format!("character {c:?} outside the charset"),
            })
        })
        .collect()
}

/// Mean cross-entropy over the characters of `target` and the terminal
/// end-of-sequence, read from the first rows of `logits` (`[T, classes]`).
pub fn recognition_loss(tape: &mut Tape, logits: Var, target: &[usize]) -> Result<Var> {
    let (t, k) = match *tape.shape(logits) {
        [t, k] => (t, k),
        ref s => return Err(Error::Dimension(format!("recognition loss expects [T,k], got {s:?}"))),
    };
    if target.len() >= t {
        return Err(Error::Input(format!(
            "target of length {} needs more than {t} steps",
            target.len()
        )));
    }
    let rows = tape.slice(logits, 0, 0, target.len() + 1)?;
    let mut classes = target.to_vec();
    classes.push(k - 1);
    tape.softmax_cross_entropy(rows, &classes)
}

/// [`recognition_loss`] averaged over a batch whose logits come per step
/// as `[n, classes]`.
pub fn recognition_loss_batch(tape: &mut Tape, step_logits: &[Var], targets: &[Vec<usize>]) -> Result<Var> {
    let k = num_classes();
    let n = targets.len();
    if n == 0 {
        return Err(Error::Input("empty recognition batch".into()));
    }
    let all = tape.concat(step_logits, 0)?;
    let mut terms = Vec::with_capacity(n);
    for (i, tgt) in targets.iter().enumerate() {
        if tgt.len() >= step_logits.len() {
            return Err(Error::Input(format!(
                "target of length {} needs more than {} steps",
                tgt.len(),
                step_logits.len()
            )));
        }
        let idx: Vec<usize> = (0..=tgt.len())
            .flat_map(|t| ((t * n + i) * k..(t * n + i + 1) * k).collect::<Vec<_>>())
            .collect();
        let rows = tape.gather(all, &idx)?;
        let rows = tape.reshape(rows, vec![tgt.len() + 1, k])?;
        let mut classes = tgt.clone();
        classes.push(eos_index());
        terms.push(tape.softmax_cross_entropy(rows, &classes)?);
    }
    let stacked = tape.concat(&terms, 0)?;
    Ok(tape.mean(stacked))
}

/// `v + noise`, or `v` itself when `noise` is empty.
pub(crate) fn add_noise(tape: &mut Tape, v: Var, noise: &[f64]) -> Result<Var> {
    if noise.is_empty() {
        return Ok(v);
    }
    let e = tape.constant(tape.shape(v).to_vec(), noise.to_vec())?;
    tape.add(v, e)
}

/// Discriminator and generator objectives for one batch of predictions.
#[derive(Clone, Copy, Debug)]
pub struct AdversarialLosses {
    /// `None` outside adversarial mode.
    pub d_loss: Option<Var>,
    pub g_loss: Var,
    /// Fraction of the `2n` discriminator decisions that are correct.
    pub d_acc: f64,
}

/// `pred` is `[n,d]`; `targets` holds the matching `n*d` semantic targets.
/// In adversarial mode the discriminator sees `pred` detached (label 0) and
/// the targets (label 1), and the generator objective is the
/// non-saturating `BCE(D(pred), 1)`. `noise` is either empty or `2*n*d`
/// values added to the discriminator's fake and then real inputs. In
/// `l1`/`l2` mode the generator
/// objective is the mean absolute / squared elementwise difference.
pub fn adversarial_step_losses(
    tape: &mut Tape,
    p: &crate::autodiff::ParameterSet,
    pred: Var,
    targets: &[f64],
    mode: LossMode,
    noise: &[f64],
) -> Result<AdversarialLosses> {
    let (n, d) = match *tape.shape(pred) {
        [n, d] => (n, d),
        ref s => return Err(Error::Dimension(format!("predictions must be [n,d], got {s:?}"))),
    };
    if targets.len() != n * d {
        return Err(Error::Config(format!(
            "{} target values for {n} predictions of dim {d}",
            targets.len()
        )));
    }
    if !noise.is_empty() && noise.len() != 2 * n * d {
        return Err(Error::Config(format!(
            "{} noise values for {n} predictions of dim {d}",
            noise.len()
        )));
    }
    let t = tape.constant(vec![n, d], targets.to_vec())?;
    match mode {
        LossMode::Adversarial => {
            let (fake_noise, real_noise) = noise.split_at(noise.len() / 2);
            let fake_in = tape.detach(pred);
            let fake_in = add_noise(tape, fake_in, fake_noise)?;
            let real_in = add_noise(tape, t, real_noise)?;
            let fake = discriminator_logits(tape, p, fake_in)?;
            let real = discriminator_logits(tape, p, real_in)?;
            let lf = tape.binary_cross_entropy_logits(fake, &vec![0.0; n])?;
            let lr = tape.binary_cross_entropy_logits(real, &vec![1.0; n])?;
            let d_loss = tape.add(lf, lr)?;
            let correct = tape.value(fake).iter().filter(|&&z| z < 0.0).count()
                + tape.value(real).iter().filter(|&&z| z >= 0.0).count();
            let g_in = add_noise(tape, pred, fake_noise)?;
            let g = discriminator_logits(tape, p, g_in)?;
            let g_loss = tape.binary_cross_entropy_logits(g, &vec![1.0; n])?;
            Ok(AdversarialLosses {
                d_loss: Some(d_loss),
                g_loss,
                d_acc: correct as f64 / (2 * n) as f64,
            })
        }
        LossMode::L1 | LossMode::L2 => {
            let diff = tape.sub(pred, t)?;
            let e = if mode == LossMode::L1 {
                tape.abs(diff)
            } else {
                tape.square(diff)
            };
            Ok(AdversarialLosses {
                d_loss: None,
                g_loss: tape.mean(e),
                d_acc: 0.0,
            })
        }
        LossMode::None => Ok(AdversarialLosses {
            d_loss: None,
            g_loss: tape.constant(vec![1], vec![0.0])?,
            d_acc: 0.0,
        }),
    }
}

/// `alpha*l_det + beta*l_rec + gamma*l_adv`.
pub fn total_loss(tape: &mut Tape, l_det: Var, l_rec: Var, l_adv: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.affine(l_det, w.alpha, 0.0);
    let b = tape.affine(l_rec, w.beta, 0.0);
    let c = tape.affine(l_adv, w.gamma, 0.0);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}
