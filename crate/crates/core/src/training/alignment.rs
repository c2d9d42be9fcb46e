use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{clip_grad_norm, sgd_step_where, Tape, Tensor};
use crate::error::{Error, Result};
use crate::net::{word_embedding_forward, ModelConfig, NetworkParams};

use super::config::LossMode;
use super::losses::adversarial_step_losses;
use super::run::{discriminator_step, frozen_generator_loss, instance_noise};
use crate::rng;

/// The word-embedding head alone, trained adversarially to map fixed
/// random aligned features onto a fixed set of target vectors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub n_inputs: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub emb_hidden: usize,
    pub disc_hidden: [usize; 2],
    pub lr: f64,
    pub grad_clip: f64,
    /// Standard deviation of Gaussian jitter added to each drawn target,
    /// which turns the target points into a continuous distribution.
    pub target_noise: f64,
    pub d_lr: f64,
    /// Gaussian noise added to every discriminator input, real and fake.
    pub instance_noise: f64,
    /// Initial value of the head's output bias.
    pub output_bias: f64,
    /// Discriminator accuracy is averaged over this many final steps.
    pub window: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            seed: 0,
            steps: 5000,
            batch: 16,
            n_inputs: 64,
            channels: 8,
            height: 4,
            width: 8,
            emb_hidden: 32,
            disc_hidden: [32, 16],
            lr: 0.02,
            grad_clip: 5.0,
            target_noise: 0.1,
            d_lr: 0.02,
            instance_noise: 0.3,
            output_bias: 0.5,
            window: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    /// Distance between the mean prediction and the mean target, before
    /// and after training.
    pub initial_distance: f64,
    pub final_distance: f64,
    /// Mean discriminator accuracy over the final window.
    pub d_acc: f64,
}

impl AlignmentReport {
    pub fn reduction(&self) -> f64 {
        1.0 - self.final_distance / self.initial_distance
    }
}

fn head_config(cfg: &AlignmentConfig, dim: usize) -> ModelConfig {
    ModelConfig {
        backbone_channels: cfg.channels,
        det_channels: 1,
        align_h: cfg.height,
        align_w: cfg.width,
        rec_hidden: 1,
        rec_attention: 1,
        rec_char_embedding: 1,
        max_steps: 2,
        emb_channels: cfg.channels,
        emb_hidden: cfg.emb_hidden,
        emb_dim: dim,
        disc_hidden: cfg.disc_hidden,
        score_prior_bias: 0.0,
        emb_output_bias: cfg.output_bias,
    }
}

fn mean_distance(pred: &[f64], targets: &[Vec<f64>], dim: usize) -> f64 {
    let n = pred.len() / dim;
    (0..dim)
        .map(|k| {
            let mp = (0..n).map(|i| pred[i * dim + k]).sum::<f64>() / n as f64;
            let mt = targets.iter().map(|t| t[k]).sum::<f64>() / targets.len() as f64;
            (mp - mt).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

fn predict_all(net: &NetworkParams, inputs: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(inputs.shape().to_vec(), inputs.data().to_vec())?;
    let y = word_embedding_forward(&mut tape, &net.params, x)?;
    Ok(tape.value(y).to_vec())
}

/// Runs the alternating updates used in full training on the head alone.
pub fn adversarial_alignment(targets: &[Vec<f64>], cfg: &AlignmentConfig) -> Result<AlignmentReport> {
    let dim = targets.first().map_or(0, Vec::len);
    if dim == 0 || targets.iter().any(|t| t.len() != dim) {
        return Err(Error::Input(
            "targets must be non-empty vectors of one dimension".into(),
        ));
    }
    let mut net = NetworkParams::init(head_config(cfg, dim), cfg.seed)?;
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let per = c * h * w;
    let mut r = rng::substream(cfg.seed, "alignment");
    let data: Vec<f64> = (0..cfg.n_inputs * per).map(|_| r.gen::<f64>()).collect();
    let inputs = Tensor::new(vec![cfg.n_inputs, c, h, w], data)?;
    let initial_distance = mean_distance(&predict_all(&net, &inputs)?, targets, dim);

    let mut accs = Vec::with_capacity(cfg.window);
    for step in 0..cfg.steps {
        let xi: Vec<usize> = (0..cfg.batch).map(|_| r.gen_range(0..cfg.n_inputs)).collect();
        let ti: Vec<usize> = (0..cfg.batch).map(|_| r.gen_range(0..targets.len())).collect();
        let xb: Vec<f64> = xi
            .iter()
            .flat_map(|&i| inputs.data()[i * per..(i + 1) * per].to_vec())
            .collect();
        let tb: Vec<f64> = ti
            .iter()
            .flat_map(|&i| targets[i].iter())
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut r);
                v + cfg.target_noise * z
            })
            .collect();
        let n = cfg.batch;

        let mut tape = Tape::new();
        let x = tape.constant(vec![n, c, h, w], xb)?;
        let pred = word_embedding_forward(&mut tape, &net.params, x)?;
        let noise = instance_noise(cfg.seed, step, 2 * n * dim, cfg.instance_noise);
        let adv = adversarial_step_losses(&mut tape, &net.params, pred, &tb, LossMode::Adversarial, &noise)?;
        let d_loss = adv.d_loss.expect("adversarial mode has a discriminator loss");
        discriminator_step(&mut tape, &mut net, d_loss, cfg.d_lr, cfg.grad_clip)?;
        let g_loss = frozen_generator_loss(&mut tape, &net.params, pred, &noise[..noise.len() / 2])?;
        tape.backward(g_loss)?;
        tape.accumulate_param_grads(&mut net.params)?;
        clip_grad_norm(&mut net.params, cfg.grad_clip, NetworkParams::is_embedding_head);
        sgd_step_where(&mut net.params, cfg.lr, NetworkParams::is_embedding_head)?;
        net.params.zero_grad();

        if step + cfg.window >= cfg.steps {
            accs.push(adv.d_acc);
        }
    }
    let final_distance = mean_distance(&predict_all(&net, &inputs)?, targets, dim);
    let d_acc = if accs.is_empty() {
        0.0
    } else {
        accs.iter().sum::<f64>() / accs.len() as f64
    };
    Ok(AlignmentReport {
        initial_distance,
        final_distance,
        d_acc,
    })
}
