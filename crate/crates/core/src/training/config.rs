use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::net::{DecodeParams, ModelConfig, FEATURE_STRIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Adversarial,
    L1,
    L2,
    None,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::None, LossMode::L1, LossMode::L2, LossMode::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Adversarial => "adversarial",
            LossMode::L1 => "l1",
            LossMode::L2 => "l2",
            LossMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown loss_mode {s:?} (expected adversarial, l1, l2 or none)"
            ))
        })
    }
}

/// Weights of the detection, recognition and embedding terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Everything a training run needs. The text form is one `key = value` per
/// line with keys equal to the field names; `#` starts a comment.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr: f64,
    /// `(iteration, lr)` pairs; each takes effect from its iteration on.
    pub lr_schedule: Vec<(usize, f64)>,
    /// Cap on the joint gradient norm of each player per step (0: no cap).
    pub grad_clip: f64,
    /// Standard deviation of Gaussian noise added to discriminator inputs.
    pub instance_noise: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub score_thresh: f64,
    pub iou_match: f64,
    pub iou_nms: f64,
    pub max_det: usize,
    pub data_dir: PathBuf,
    pub embedding_table: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Checkpoint to continue from; its sidecar state names the iteration.
    pub resume: Option<PathBuf>,
    /// Save every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
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
    pub disc_hidden: [usize; 2],
    pub score_prior_bias: f64,
    pub emb_output_bias: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        TrainConfig {
            loss_mode: LossMode::Adversarial,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            lr: 1e-2,
            lr_schedule: Vec::new(),
            grad_clip: 0.0,
            instance_noise: 0.0,
            iterations: 1000,
            batch_size: 1,
            seed: 0,
            score_thresh: 0.5,
            iou_match: 0.5,
            iou_nms: 0.3,
            max_det: 8,
            data_dir: PathBuf::from("data/train"),
            embedding_table: PathBuf::from("embeddings.txt"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            resume: None,
            checkpoint_every: 0,
            backbone_channels: m.backbone_channels,
            det_channels: m.det_channels,
            align_h: m.align_h,
            align_w: m.align_w,
            rec_hidden: m.rec_hidden,
            rec_attention: m.rec_attention,
            rec_char_embedding: m.rec_char_embedding,
            max_steps: m.max_steps,
            emb_channels: m.emb_channels,
            emb_hidden: m.emb_hidden,
            disc_hidden: m.disc_hidden,
            score_prior_bias: m.score_prior_bias,
            emb_output_bias: m.emb_output_bias,
        }
    }
}

pub const CONFIG_KEYS: [&str; 33] = [
    "loss_mode",
    "alpha",
    "beta",
    "gamma",
    "lr",
    "lr_schedule",
    "grad_clip",
    "instance_noise",
    "iterations",
    "batch_size",
    "seed",
    "score_thresh",
    "iou_match",
    "iou_nms",
    "max_det",
    "data_dir",
    "embedding_table",
    "checkpoint_dir",
    "resume",
    "checkpoint_every",
    "backbone_channels",
    "det_channels",
    "align_h",
    "align_w",
    "rec_hidden",
    "rec_attention",
    "rec_char_embedding",
    "max_steps",
    "emb_channels",
    "emb_hidden",
    "disc_hidden",
    "score_prior_bias",
    "emb_output_bias",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_schedule(v: &str) -> Result<Vec<(usize, f64)>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (i, lr) = pair
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("lr_schedule entry {pair:?} is not iteration:lr")))?;
            Ok((num("lr_schedule", i.trim())?, num("lr_schedule", lr.trim())?))
        })
        .collect()
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn model_config(&self, emb_dim: usize) -> ModelConfig {
        ModelConfig {
            backbone_channels: self.backbone_channels,
            det_channels: self.det_channels,
            align_h: self.align_h,
            align_w: self.align_w,
            rec_hidden: self.rec_hidden,
            rec_attention: self.rec_attention,
            rec_char_embedding: self.rec_char_embedding,
            max_steps: self.max_steps,
            emb_channels: self.emb_channels,
            emb_hidden: self.emb_hidden,
            emb_dim,
            disc_hidden: self.disc_hidden,
            score_prior_bias: self.score_prior_bias,
            emb_output_bias: self.emb_output_bias,
        }
    }

    pub fn decode_params(&self) -> DecodeParams {
        DecodeParams {
            score_thresh: self.score_thresh,
            iou_nms: self.iou_nms,
            max_det: self.max_det,
            pre_nms_top: 64,
            spatial_scale: 1.0 / FEATURE_STRIDE as f64,
        }
    }

    /// Whether the word-embedding head and discriminator take part.
    pub fn semantic_branch(&self) -> bool {
        self.loss_mode != LossMode::None && self.gamma > 0.0
    }

    /// Learning rate in effect at `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr_schedule
            .iter()
            .rev()
            .find(|(i, _)| *i <= iteration)
            .map_or(self.lr, |&(_, lr)| lr)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config(
                "lr_schedule iterations must be strictly increasing".into(),
            ));
        }
        if self.lr_schedule.iter().any(|&(_, lr)| !(lr >= 0.0 && lr.is_finite())) {
            return Err(Error::Config("lr_schedule rates must be >= 0".into()));
        }
        for (k, v) in [("grad_clip", self.grad_clip), ("instance_noise", self.instance_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for (k, v) in [
            ("score_thresh", self.score_thresh),
            ("iou_match", self.iou_match),
            ("iou_nms", self.iou_nms),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{k} must be in (0,1), got {v}")));
            }
        }
        if self.max_det == 0 {
            return Err(Error::Config("max_det must be >= 1".into()));
        }
        self.model_config(1).validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "loss_mode" => self.loss_mode = LossMode::parse(v)?,
            "alpha" => self.alpha = num(key, v)?,
            "beta" => self.beta = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_schedule" => self.lr_schedule = parse_schedule(v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "instance_noise" => self.instance_noise = num(key, v)?,
            "iterations" => self.iterations = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "score_thresh" => self.score_thresh = num(key, v)?,
            "iou_match" => self.iou_match = num(key, v)?,
            "iou_nms" => self.iou_nms = num(key, v)?,
            "max_det" => self.max_det = num(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "embedding_table" => self.embedding_table = PathBuf::from(v),
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(v),
            "resume" => self.resume = (!v.is_empty()).then(|| PathBuf::from(v)),
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "backbone_channels" => self.backbone_channels = num(key, v)?,
            "det_channels" => self.det_channels = num(key, v)?,
            "align_h" => self.align_h = num(key, v)?,
            "align_w" => self.align_w = num(key, v)?,
            "rec_hidden" => self.rec_hidden = num(key, v)?,
            "rec_attention" => self.rec_attention = num(key, v)?,
            "rec_char_embedding" => self.rec_char_embedding = num(key, v)?,
            "max_steps" => self.max_steps = num(key, v)?,
            "emb_channels" => self.emb_channels = num(key, v)?,
            "emb_hidden" => self.emb_hidden = num(key, v)?,
            "disc_hidden" => {
                let parts: Vec<usize> = v.split(',').map(|p| num(key, p.trim())).collect::<Result<_>>()?;
                self.disc_hidden = parts
                    .try_into()
                    .map_err(|_| Error::Config("disc_hidden needs two sizes, e.g. 256,64".into()))?;
            }
            "score_prior_bias" => self.score_prior_bias = num(key, v)?,
            "emb_output_bias" => self.emb_output_bias = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Relative paths are
    /// taken relative to `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            c.set(k.trim(), v)?;
        }
        if let Some(base) = base {
            for p in [&mut c.data_dir, &mut c.embedding_table, &mut c.checkpoint_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if let Some(r) = c.resume.as_mut().filter(|r| r.is_relative()) {
                *r = base.join(&*r);
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let sched: Vec<String> = self.lr_schedule.iter().map(|(i, lr)| format!("{i}:{lr}")).collect();
        let resume = self.resume.as_ref().map_or(String::new(), |p| p.display().to_string());
        let rows: [(&str, String); 33] = [
            ("loss_mode", self.loss_mode.name().to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("gamma", self.gamma.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_schedule", sched.join(",")),
            ("grad_clip", self.grad_clip.to_string()),
            ("instance_noise", self.instance_noise.to_string()),
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("score_thresh", self.score_thresh.to_string()),
            ("iou_match", self.iou_match.to_string()),
            ("iou_nms", self.iou_nms.to_string()),
            ("max_det", self.max_det.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("embedding_table", self.embedding_table.display().to_string()),
            ("checkpoint_dir", self.checkpoint_dir.display().to_string()),
            ("resume", resume),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("backbone_channels", self.backbone_channels.to_string()),
            ("det_channels", self.det_channels.to_string()),
            ("align_h", self.align_h.to_string()),
            ("align_w", self.align_w.to_string()),
            ("rec_hidden", self.rec_hidden.to_string()),
            ("rec_attention", self.rec_attention.to_string()),
            ("rec_char_embedding", self.rec_char_embedding.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("emb_channels", self.emb_channels.to_string()),
            ("emb_hidden", self.emb_hidden.to_string()),
            (
                "disc_hidden",
                format!("{},{}", self.disc_hidden[0], self.disc_hidden[1]),
            ),
            ("score_prior_bias", self.score_prior_bias.to_string()),
            ("emb_output_bias", self.emb_output_bias.to_string()),
        ];
        for (k, v) in rows {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}
