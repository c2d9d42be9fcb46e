//! Network definitions: backbone, dense Bezier detection head, attention
//! recognizer, word-embedding head and discriminator.
//!
//! Parameters live in one [`ParameterSet`] under the prefixes `backbone.`,
//! `det.`, `rec.`, `emb.` and `disc.`.

mod detect;
mod heads;
mod recognition;

#[cfg(test)]
mod tests;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub use detect::{
    backbone_forward, decode_detections, decode_region, detection_forward, encode_region, region_iou, DecodeParams,
    Detection, DetectionOutput, FEATURE_STRIDE, NMS_RASTER_SCALE,
};
pub use heads::{discriminator_forward, discriminator_logits, discriminator_logits_frozen, word_embedding_forward};
pub use recognition::{greedy_decode, recognition_forward, recognize, Feed, RecognitionOutput};

pub const BACKBONE: &str = "backbone.";
pub const DETECTION: &str = "det.";
pub const RECOGNITION: &str = "rec.";
pub const EMBEDDING_HEAD: &str = "emb.";
pub const DISCRIMINATOR: &str = "disc.";

/// Recognition classes: the charset followed by end-of-sequence.
pub fn num_classes() -> usize {
    crate::synth::charset_size() + 1
}

pub fn eos_index() -> usize {
    crate::synth::charset_size()
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone_channels: usize,
    pub det_channels: usize,
    pub align_h: usize,
    pub align_w: usize,
    pub rec_hidden: usize,
    pub rec_attention: usize,
    pub rec_char_embedding: usize,
    pub max_steps: usize,
    pub emb_channels: usize,
    pub emb_hidden: usize,
    pub emb_dim: usize,
    pub disc_hidden: [usize; 2],
    /// Initial score bias, so early training does not flood the decoder.
    pub score_prior_bias: f64,
    /// Initial bias of the word-embedding head's last layer. Positive, so
    /// the terminal relu starts out passing gradient.
    #[serde(default)]
    pub emb_output_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_channels: 64,
            det_channels: 64,
            align_h: 8,
            align_w: 32,
            rec_hidden: 64,
            rec_attention: 32,
            rec_char_embedding: 16,
            max_steps: 13,
            emb_channels: 128,
            emb_hidden: 256,
            emb_dim: 300,
            disc_hidden: [256, 64],
            score_prior_bias: -2.0,
            emb_output_bias: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("backbone_channels", self.backbone_channels),
            ("det_channels", self.det_channels),
            ("align_h", self.align_h),
            ("align_w", self.align_w),
            ("rec_hidden", self.rec_hidden),
            ("rec_attention", self.rec_attention),
            ("rec_char_embedding", self.rec_char_embedding),
            ("max_steps", self.max_steps),
            ("emb_channels", self.emb_channels),
            ("emb_hidden", self.emb_hidden),
            ("emb_dim", self.emb_dim),
            ("disc_hidden[0]", self.disc_hidden[0]),
            ("disc_hidden[1]", self.disc_hidden[1]),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        for (k, v) in [
            ("score_prior_bias", self.score_prior_bias),
            ("emb_output_bias", self.emb_output_bias),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{k} must be finite")));
            }
        }
        Ok(())
    }
}

/// Every parameter with its shape and initialization.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.backbone_channels;
    let dc = cfg.det_channels;
    let (ec, hd, e, a) = (
        cfg.emb_channels,
        cfg.rec_hidden,
        cfg.rec_char_embedding,
        cfg.rec_attention,
    );
    let k = num_classes();
    let mut v = Vec::new();
    let mut conv = |name: &str, o: usize, i: usize, ks: usize, bias: Init| {
        v.push((format!("{name}.w"), vec![o, i, ks, ks], Init::He(i * ks * ks)));
        v.push((format!("{name}.b"), vec![o], bias));
    };
    conv("backbone.conv1", c, 1, 4, Init::Zero);
    conv("backbone.conv2", c, c, 4, Init::Zero);
    conv("backbone.conv3", c, c, 3, Init::Zero);
    conv("backbone.conv4", c, c, 3, Init::Zero);
    conv("det.score.conv", dc, c, 3, Init::Zero);
    conv("det.score.out", 1, dc, 1, Init::Const(cfg.score_prior_bias));
    conv("det.offset.conv", dc, c, 3, Init::Zero);
    conv("det.offset.out", 16, dc, 1, Init::Zero);
    conv("emb.conv1", ec, c, 3, Init::Zero);
    conv("emb.conv2", ec, ec, 3, Init::Zero);
    let mut fc = |name: &str, o: usize, i: usize, bias: Option<Init>| {
        v.push((format!("{name}.w"), vec![o, i], Init::He(i)));
        if let Some(b) = bias {
            v.push((format!("{name}.b"), vec![o], b));
        }
    };
    fc("emb.fc1", cfg.emb_hidden, ec * cfg.align_w, Some(Init::Zero));
    fc(
        "emb.fc2",
        cfg.emb_dim,
        cfg.emb_hidden,
        Some(Init::Const(cfg.emb_output_bias)),
    );
    fc("disc.fc1", cfg.disc_hidden[0], cfg.emb_dim, Some(Init::Zero));
    fc("disc.fc2", cfg.disc_hidden[1], cfg.disc_hidden[0], Some(Init::Zero));
    fc("disc.fc3", 1, cfg.disc_hidden[1], Some(Init::Zero));
    fc("rec.attn.key", a, c, Some(Init::Zero));
    fc("rec.attn.query", a, hd, None);
    fc("rec.attn.score", 1, a, None);
    for gate in ["z", "r", "h"] {
        fc(&format!("rec.gru.{gate}.x"), hd, c + e, Some(Init::Zero));
        fc(&format!("rec.gru.{gate}.h"), hd, hd, None);
    }
    fc("rec.out", k, hd, Some(Init::Zero));
    v.push(("rec.char_embedding".into(), vec![k + 1, e], Init::Normal(1.0)));
    v.push(("rec.position".into(), vec![cfg.align_w, c], Init::Normal(0.5)));
    v
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zero,
    Const(f64),
    /// Normal with variance `2 / fan_in`.
    He(usize),
    Normal(f64),
}

fn normal(r: &mut rng::Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            sd * z
        })
        .collect()
}

/// Model configuration plus its parameters.
#[derive(Clone, Debug)]
pub struct NetworkParams {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl NetworkParams {
    /// Fresh parameters. Each tensor draws from its own substream of
    /// `(seed, name)`, so configurations that share a parameter name and
    /// shape also share its initial value.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        for (name, shape, init) in layout(&config) {
            let n: usize = shape.iter().product();
            let mut r = rng::substream(seed, &name);
            let data: Vec<f64> = match init {
                Init::Zero => vec![0.0; n],
                Init::Const(c) => vec![c; n],
                Init::He(fan_in) => {
                    let sd = (2.0 / fan_in as f64).sqrt();
                    normal(&mut r, n, sd)
                }
                Init::Normal(sd) => normal(&mut r, n, sd),
            };
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(NetworkParams { config, params })
    }

    /// As [`NetworkParams::init`], checking the embedding width against a
    /// loaded table.
    pub fn init_for_table(config: ModelConfig, table_dim: usize, seed: u64) -> Result<Self> {
        if config.emb_dim != table_dim {
            return Err(Error::Config(format!(
                "word-embedding head produces {} values but the table has dim {table_dim}",
                config.emb_dim
            )));
        }
        Self::init(config, seed)
    }

    /// Replaces parameter values with those in a checkpoint; names and
    /// shapes must match exactly.
    pub fn load_checkpoint(&mut self, path: &std::path::Path) -> Result<()> {
        let loaded = ParameterSet::load(path)?;
        self.params.load_values_from(&loaded)
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn is_discriminator(name: &str) -> bool {
        name.starts_with(DISCRIMINATOR)
    }

    pub fn is_embedding_head(name: &str) -> bool {
        name.starts_with(EMBEDDING_HEAD)
    }
}

/// Registers `prefix.w` / `prefix.b` on the tape.
pub(crate) fn weight_bias(tape: &mut Tape, p: &ParameterSet, prefix: &str) -> Result<(Var, Option<Var>)> {
    let w = tape.param(p, &format!("{prefix}.w"))?;
    let bname = format!("{prefix}.b");
    let b = match p.get(&bname) {
        Some(_) => Some(tape.param(p, &bname)?),
        None => None,
    };
    Ok((w, b))
}

pub(crate) fn conv(tape: &mut Tape, p: &ParameterSet, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let (w, b) = weight_bias(tape, p, prefix)?;
    tape.conv2d(x, w, b, stride, pad)
}

pub(crate) fn fc(tape: &mut Tape, p: &ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let (w, b) = weight_bias(tape, p, prefix)?;
    tape.linear(x, w, b)
}
