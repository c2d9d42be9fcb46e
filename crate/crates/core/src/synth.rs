//! Deterministic synthetic curved scene-text images.
//!
//! Each instance is a lexicon word stamped in the embedded font along a
//! random cubic baseline. Its ground-truth region is the baseline offset
//! upward by the glyph height (top curve) and slightly downward (bottom
//! curve), each refit as a cubic through four offset samples.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use log::warn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::font::{self, ADVANCE, GLYPH_H};
use crate::geometry::{bezier_point, polygon_iou, BezierRegion, Point};
use crate::rng;

pub const CHARSET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";
pub const MAX_WORD_LEN: usize = 12;
pub const MAX_INSTANCES: usize = 4;
pub const MIN_IMAGE_SIDE: usize = 64;
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const IMAGES_DIR: &str = "images";

const PLACEMENT_ATTEMPTS: usize = 100;
const MAX_OVERLAP_IOU: f64 = 0.05;
/// Interior baseline control points move at most this fraction of the word
/// length off the chord.
const MAX_BEND: f64 = 0.2;
const MAX_TILT: f64 = 0.15;
const BACKGROUND_MAX: u8 = 60;
const TEXT_MIN: u8 = 180;

pub fn char_index(ch: char) -> Option<usize> {
    CHARSET.chars().position(|c| c == ch)
}

pub fn charset_size() -> usize {
    CHARSET.len()
}

fn valid_word(w: &str) -> bool {
    (1..=MAX_WORD_LEN).contains(&w.chars().count()) && w.chars().all(|c| char_index(c).is_some())
}

/// Ordered, duplicate-free list of lowercase alphanumeric words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    words: Vec<String>,
}

impl Lexicon {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let id = "lexicon".to_string();
        if words.is_empty() {
            return Err(Error::Validation {
                id,
                msg: "lexicon is empty".into(),
            });
        }
        let mut seen = HashSet::new();
        for w in &words {
            if !valid_word(w) {
                return Err(Error::Validation {
                    id,
                    msg: format!("word {w:?} is not 1-{MAX_WORD_LEN} characters of [a-z0-9]"),
                });
            }
            if !seen.insert(w.as_str()) {
                return Err(Error::Validation {
                    id,
                    msg: format!("duplicate word {w:?}"),
                });
            }
        }
        Ok(Lexicon { words })
    }

    /// One word per line; blank lines are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Self::new(words).map_err(|e| match e {
            Error::Validation { msg, .. } => Error::Validation {
                id: path.display().to_string(),
                msg,
            },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.words.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, w: &str) -> bool {
        self.words.iter().any(|x| x == w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextInstance {
    pub region: BezierRegion,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub image: GrayImage,
    pub instances: Vec<TextInstance>,
}

impl SceneSample {
    /// `[1,1,H,W]` with pixels scaled to `[0,1]`.
    pub fn to_tensor(&self) -> Tensor {
        image_tensor(&self.image)
    }
}

pub fn image_tensor(img: &GrayImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&p| f64::from(p) / 255.0).collect();
    Tensor::new(vec![1, 1, h as usize, w as usize], data).expect("pixel data is finite")
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    id: String,
    instances: Vec<AnnotationInstance>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationInstance {
    control_points: Vec<f64>,
    text: String,
}

/// What [`generate_dataset`] wrote.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub dir: PathBuf,
    pub ids: Vec<String>,
    pub transcriptions: Vec<Vec<String>>,
    pub skipped: usize,
}

impl DatasetManifest {
    pub fn n_instances(&self) -> usize {
        self.transcriptions.iter().map(Vec::len).sum()
    }
}

pub fn image_id(seed: u64, index: usize) -> String {
    format!("s{seed}-{index:05}")
}

/// Renders image `index` of the dataset defined by `seed`. Returns the sample
/// and how many instances could not be placed.
pub fn render_sample(lexicon: &Lexicon, size: (usize, usize), seed: u64, index: usize) -> (SceneSample, usize) {
    let (h, w) = size;
    let mut r = rng::indexed(seed, index as u64);
    let mut img = GrayImage::new(w as u32, h as u32);
    for p in img.pixels_mut() {
        p.0[0] = r.gen_range(0..=BACKGROUND_MAX);
    }
    let id = image_id(seed, index);
    let wanted = r.gen_range(1..=MAX_INSTANCES);
    let mut instances: Vec<TextInstance> = Vec::new();
    let mut polys: Vec<Vec<Point>> = Vec::new();
    let mut skipped = 0;
    for _ in 0..wanted {
        let word = &lexicon.words()[r.gen_range(0..lexicon.len())];
        let intensity: u8 = r.gen_range(TEXT_MIN..=255);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let Some(layout) = WordLayout::sample(&mut r, word, h, w) else {
                break;
            };
            let poly = layout.region.polygon();
            let in_bounds = poly
                .iter()
                .all(|&(x, y)| x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64);
            if !in_bounds {
                continue;
            }
            let clash = polys
                .iter()
                .any(|q| polygon_iou(&poly, q, 2).map_or(true, |v| v > MAX_OVERLAP_IOU));
            if clash {
                continue;
            }
            placed = Some((layout, poly));
            break;
        }
        match placed {
            Some((layout, poly)) => {
                layout.stamp(&mut img, word, intensity);
                instances.push(TextInstance {
                    region: layout.region,
                    text: word.clone(),
                });
                polys.push(poly);
            }
            None => {
                warn!("{id}: could not place {word:?} after {PLACEMENT_ATTEMPTS} attempts, skipping");
                skipped += 1;
            }
        }
    }
    (
        SceneSample {
            id,
            image: img,
            instances,
        },
        skipped,
    )
}

/// Geometry of one word along its baseline.
struct WordLayout {
    baseline: [Point; 4],
    /// cumulative arc length at `ARC_SAMPLES + 1` uniform parameter steps
    arc: Vec<f64>,
    scale: usize,
    pad: f64,
    region: BezierRegion,
}

const ARC_SAMPLES: usize = 128;

fn curve_tangent(c: &[Point; 4], t: f64) -> Point {
    let u = 1.0 - t;
    let dx = 3.0 * u * u * (c[1].0 - c[0].0) + 6.0 * u * t * (c[2].0 - c[1].0) + 3.0 * t * t * (c[3].0 - c[2].0);
    let dy = 3.0 * u * u * (c[1].1 - c[0].1) + 6.0 * u * t * (c[2].1 - c[1].1) + 3.0 * t * t * (c[3].1 - c[2].1);
    let n = (dx * dx + dy * dy).sqrt().max(1e-12);
    (dx / n, dy / n)
}

fn arc_table(c: &[Point; 4]) -> Vec<f64> {
    let mut acc = vec![0.0];
    let mut prev = c[0];
    for i in 1..=ARC_SAMPLES {
        let p = bezier_point(c, i as f64 / ARC_SAMPLES as f64).unwrap();
        let last = *acc.last().unwrap();
        acc.push(last + ((p.0 - prev.0).powi(2) + (p.1 - prev.1).powi(2)).sqrt());
        prev = p;
    }
    acc
}

/// Cubic through `q` at `t = 0, 1/3, 2/3, 1`.
fn fit_cubic(q: [Point; 4]) -> [Point; 4] {
    let r1 = (
        27.0 * q[1].0 - 8.0 * q[0].0 - q[3].0,
        27.0 * q[1].1 - 8.0 * q[0].1 - q[3].1,
    );
    let r2 = (
        27.0 * q[2].0 - q[0].0 - 8.0 * q[3].0,
        27.0 * q[2].1 - q[0].1 - 8.0 * q[3].1,
    );
    let p1 = ((2.0 * r1.0 - r2.0) / 18.0, (2.0 * r1.1 - r2.1) / 18.0);
    let p2 = ((2.0 * r2.0 - r1.0) / 18.0, (2.0 * r2.1 - r1.1) / 18.0);
    [q[0], p1, p2, q[3]]
}

impl WordLayout {
    fn glyph_scale(h: usize) -> usize {
        (h / 48).max(1)
    }

    fn sample(r: &mut rng::Rng, word: &str, h: usize, w: usize) -> Option<Self> {
        let scale = Self::glyph_scale(h);
        let pad = 0.0;
        let gh = (GLYPH_H * scale) as f64;
        let length = (word.chars().count() * ADVANCE * scale) as f64 + 2.0 * pad;
        if length + 2.0 > w as f64 || gh + 2.0 * pad + 2.0 > h as f64 {
            return None;
        }
        let tilt = r.gen_range(-MAX_TILT..=MAX_TILT);
        let bend1 = r.gen_range(-MAX_BEND..=MAX_BEND) * length;
        let bend2 = r.gen_range(-MAX_BEND..=MAX_BEND) * length;
        let x0 = r.gen_range(1.0..=(w as f64 - length - 1.0));
        let y0 = r.gen_range((gh + pad + 1.0)..=(h as f64 - pad - 1.0));
        let (dir, up) = ((tilt.cos(), tilt.sin()), (tilt.sin(), -tilt.cos()));
        let at = |along: f64, off: f64| (x0 + dir.0 * along + up.0 * off, y0 + dir.1 * along + up.1 * off);
        let mut baseline = [
            at(0.0, 0.0),
            at(length / 3.0, bend1),
            at(2.0 * length / 3.0, bend2),
            at(length, 0.0),
        ];
        // shrink the control polygon about its start until the arc length
        // matches the text length
        for _ in 0..4 {
            let total = *arc_table(&baseline).last().unwrap();
            let k = length / total;
            let o = baseline[0];
            baseline = baseline.map(|p| (o.0 + (p.0 - o.0) * k, o.1 + (p.1 - o.1) * k));
        }
        let arc = arc_table(&baseline);
        let offset = |off: f64| {
            let q = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].map(|t| {
                let p = bezier_point(&baseline, t).unwrap();
                let tg = curve_tangent(&baseline, t);
                let n = (tg.1, -tg.0);
                (p.0 + n.0 * off, p.1 + n.1 * off)
            });
            fit_cubic(q)
        };
        let region = BezierRegion {
            top: offset(gh + pad),
            bottom: offset(-pad),
        };
        Some(WordLayout {
            baseline,
            arc,
            scale,
            pad,
            region,
        })
    }

    /// Curve parameter at arc length `a` from the start.
    fn param_at(&self, a: f64) -> f64 {
        let total = *self.arc.last().unwrap();
        let a = a.clamp(0.0, total);
        let i = self.arc.partition_point(|&v| v < a).clamp(1, ARC_SAMPLES);
        let (lo, hi) = (self.arc[i - 1], self.arc[i]);
        let frac = if hi > lo { (a - lo) / (hi - lo) } else { 0.0 };
        ((i - 1) as f64 + frac) / ARC_SAMPLES as f64
    }

    fn stamp(&self, img: &mut GrayImage, word: &str, intensity: u8) {
        let s = self.scale;
        let gh = (GLYPH_H * s) as f64;
        let (w, h) = img.dimensions();
        const SUB: [f64; 3] = [1.0 / 6.0, 0.5, 5.0 / 6.0];
        for (k, ch) in word.chars().enumerate() {
            for row in 0..GLYPH_H {
                for col in 0..ADVANCE {
                    if !font::bold_ink(ch, col, row) {
                        continue;
                    }
                    for d in 0..s * s {
                        let (dx, dy) = ((d % s) as f64, (d / s) as f64);
                        for su in SUB {
                            for sv in SUB {
                                let u = self.pad + (k * ADVANCE * s + col * s) as f64 + dx + su;
                                let above = gh - ((row * s) as f64 + dy + sv);
                                let t = self.param_at(u);
                                let p = bezier_point(&self.baseline, t).unwrap();
                                let tg = curve_tangent(&self.baseline, t);
                                let (px, py) = (p.0 + tg.1 * above, p.1 - tg.0 * above);
                                if px >= 0.0 && py >= 0.0 && (px as u32) < w && (py as u32) < h {
                                    img.put_pixel(px as u32, py as u32, image::Luma([intensity]));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn write_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes `n_images` samples under `out_dir` (`images/<id>.png` plus
/// `annotations.jsonl`). Output bytes depend only on the arguments.
pub fn generate_dataset(
    out_dir: &Path,
    lexicon: &Lexicon,
    n_images: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<DatasetManifest> {
    if n_images == 0 {
        return Err(Error::Input("n_images must be >= 1".into()));
    }
    if size.0 < MIN_IMAGE_SIDE || size.1 < MIN_IMAGE_SIDE {
        return Err(Error::Input(format!(
            "image size {}x{} below {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
            size.0, size.1
        )));
    }
    let images = out_dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let ann_path = out_dir.join(ANNOTATIONS_FILE);
    let ann = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut ann = BufWriter::new(ann);
    let mut manifest = DatasetManifest {
        dir: out_dir.to_path_buf(),
        ids: Vec::with_capacity(n_images),
        transcriptions: Vec::with_capacity(n_images),
        skipped: 0,
    };
    for index in 0..n_images {
        let (sample, skipped) = render_sample(lexicon, size, seed, index);
        if sample.instances.is_empty() {
            return Err(Error::Validation {
                id: sample.id,
                msg: format!("no word fits in a {}x{} image", size.0, size.1),
            });
        }
        write_png(&sample.image, &images.join(format!("{}.png", sample.id)))?;
        let line = AnnotationLine {
            id: sample.id.clone(),
            instances: sample
                .instances
                .iter()
                .map(|i| AnnotationInstance {
                    control_points: i.region.to_control_points().to_vec(),
                    text: i.text.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&line).expect("annotation serializes");
        writeln!(ann, "{json}").map_err(|e| Error::io(&ann_path, e))?;
        manifest.skipped += skipped;
        manifest.ids.push(sample.id);
        manifest
            .transcriptions
            .push(sample.instances.into_iter().map(|i| i.text).collect());
    }
    ann.flush().map_err(|e| Error::io(&ann_path, e))?;
    Ok(manifest)
}

fn validate(sample: &SceneSample) -> Result<()> {
    let bad = |msg: String| Error::Validation {
        id: sample.id.clone(),
        msg,
    };
    if sample.instances.is_empty() || sample.instances.len() > MAX_INSTANCES {
        return Err(bad(format!(
            "{} instances (expected 1-{MAX_INSTANCES})",
            sample.instances.len()
        )));
    }
    let (w, h) = sample.image.dimensions();
    for inst in &sample.instances {
        if !valid_word(&inst.text) {
            return Err(bad(format!("transcription {:?} outside charset", inst.text)));
        }
        let out = inst
            .region
            .polygon()
            .iter()
            .any(|&(x, y)| x < 0.0 || y < 0.0 || x > f64::from(w - 1) || y > f64::from(h - 1));
        if out {
            return Err(bad(format!("region of {:?} leaves the image", inst.text)));
        }
    }
    Ok(())
}

/// Reads a directory written by [`generate_dataset`], in annotation order.
pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let f = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: ann_path.clone(),
            line: i + 1,
            msg,
        };
        let rec: AnnotationLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let instances = rec
            .instances
            .into_iter()
            .map(|a| {
                Ok(TextInstance {
                    region: BezierRegion::from_control_points(&a.control_points)
                        .map_err(|e| parse_err(e.to_string()))?,
                    text: a.text,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let img_path = dir.join(IMAGES_DIR).join(format!("{}.png", rec.id));
        let image = image::open(&img_path)
            .map_err(|source| match source {
                image::ImageError::IoError(e) => Error::io(&img_path, e),
                source => Error::Image {
                    path: img_path.clone(),
                    source,
                },
            })?
            .to_luma8();
        let sample = SceneSample {
            id: rec.id,
            image,
            instances,
        };
        validate(&sample)?;
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{point_in_polygon, polygon_area};

    fn small_lexicon() -> Lexicon {
        Lexicon::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/lexicon.txt")).unwrap()
    }

    #[test]
    fn lexicon_validation() {
        assert!(Lexicon::new(vec![]).is_err());
        assert!(Lexicon::new(vec!["Cat".into()]).is_err());
        assert!(Lexicon::new(vec!["ab".into(), "ab".into()]).is_err());
        assert!(Lexicon::new(vec!["abcdefghijklm".into()]).is_err());
        assert!(Lexicon::new(vec!["ok9".into()]).is_ok());
    }

    #[test]
    fn fit_cubic_interpolates() {
        let c = [(0.0, 0.0), (3.0, 5.0), (7.0, -2.0), (10.0, 1.0)];
        let q = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].map(|t| bezier_point(&c, t).unwrap());
        let f = fit_cubic(q);
        for (a, b) in f.iter().zip(&c) {
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        }
    }

    #[test]
    fn instances_are_in_bounds_with_positive_area() {
        let lex = small_lexicon();
        for i in 0..20 {
            let (s, _) = render_sample(&lex, (96, 192), 3, i);
            assert!(!s.instances.is_empty());
            validate(&s).unwrap();
            for inst in &s.instances {
                assert!(polygon_area(&inst.region.polygon()) > 0.0);
                assert!(lex.contains(&inst.text));
            }
        }
    }

    #[test]
    fn text_is_brighter_than_background() {
        let lex = small_lexicon();
        let mut worst = f64::INFINITY;
        for i in 0..60 {
            let (s, _) = render_sample(&lex, (96, 192), 5, i);
            let (w, h) = s.image.dimensions();
            let polys: Vec<_> = s.instances.iter().map(|t| t.region.polygon()).collect();
            let (mut out_sum, mut out_n) = (0.0, 0usize);
            let mut inside = vec![(0.0, 0usize); polys.len()];
            for y in 0..h {
                for x in 0..w {
                    let p = (f64::from(x) + 0.5, f64::from(y) + 0.5);
                    let v = f64::from(s.image.get_pixel(x, y).0[0]);
                    match polys.iter().position(|q| point_in_polygon(p, q)) {
                        Some(k) => {
                            inside[k].0 += v;
                            inside[k].1 += 1;
                        }
                        None => {
                            out_sum += v;
                            out_n += 1;
                        }
                    }
                }
            }
            let out_mean = out_sum / out_n as f64;
            for (k, (sum, n)) in inside.iter().enumerate() {
                let m = sum / *n as f64;
                worst = worst.min(m - out_mean);
                assert!(m - out_mean >= 80.0, "{} instance {k}: {m} vs {out_mean}", s.id);
            }
        }
        eprintln!("smallest inside/outside gap {worst:.1}");
    }
}
