//! Running a trained network on images and drawing the results.

use image::{GrayImage, Rgb, RgbImage};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::evaluation::Prediction;
use crate::font;
use crate::geometry::{bezier_align, bounding_box, Point};
use crate::net::{backbone_forward, decode_detections, detection_forward, recognize, DecodeParams, NetworkParams};
use crate::synth::{image_tensor, SceneSample};

/// Detects, aligns and reads every text instance in `image`.
pub fn spot(net: &NetworkParams, image: &GrayImage, params: &DecodeParams) -> Result<Vec<Prediction>> {
    let p = &net.params;
    let mc = &net.config;
    let mut tape = Tape::new();
    let img = image_tensor(image);
    let x = tape.constant(img.shape().to_vec(), img.into_data())?;
    let feats = backbone_forward(&mut tape, p, x)?;
    let det = detection_forward(&mut tape, p, feats)?;
    let dets = decode_detections(tape.value(det.score), tape.value(det.offsets), det.h, det.w, params)?;
    if dets.is_empty() {
        return Ok(Vec::new());
    }
    let c = mc.backbone_channels;
    let fmap = tape.reshape(feats, vec![c, det.h, det.w])?;
    let mut aligned = Vec::with_capacity(dets.len());
    for d in &dets {
        let a = bezier_align(&mut tape, fmap, &d.region, mc.align_h, mc.align_w, params.spatial_scale)?;
        aligned.push(tape.reshape(a, vec![1, c, mc.align_h, mc.align_w])?);
    }
    let all = tape.concat(&aligned, 0)?;
    let texts = recognize(&mut tape, p, all, mc.max_steps)?;
    Ok(dets
        .into_iter()
        .zip(texts)
        .map(|(d, text)| Prediction {
            polygon: d.region.polygon(),
            text,
            confidence: d.confidence,
        })
        .collect())
}

/// [`spot`] over a dataset, in order.
pub fn spot_all(net: &NetworkParams, samples: &[SceneSample], params: &DecodeParams) -> Result<Vec<Vec<Prediction>>> {
    samples.iter().map(|s| spot(net, &s.image, params)).collect()
}

pub const POLYGON_COLOR: Rgb<u8> = Rgb([0, 0, 255]);
pub const LABEL_COLOR: Rgb<u8> = Rgb([255, 255, 0]);

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: Point, b: Point, c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        put(img, x.round() as i64, y.round() as i64, c);
    }
}

/// Label drawn next to each region.
pub fn label(p: &Prediction) -> String {
    format!("{}:{:.2}", p.text, p.confidence)
}

/// The image in color with each predicted polygon outlined and its
/// `text:confidence` label written at the polygon's top-left corner.
pub fn visualize(image: &GrayImage, predictions: &[Prediction]) -> RgbImage {
    let mut out = RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let v = image.get_pixel(x, y)[0];
        Rgb([v, v, v])
    });
    for p in predictions {
        let n = p.polygon.len();
        for k in 0..n {
            line(&mut out, p.polygon[k], p.polygon[(k + 1) % n], POLYGON_COLOR);
        }
    }
    for p in predictions {
        let (x0, y0, _, _) = bounding_box(&p.polygon);
        let ty = (y0.floor() as i64 - font::GLYPH_H as i64 - 2).max(0);
        font::draw_text(&label(p), x0.floor() as i64, ty, 1, |x, y| {
            put(&mut out, x, y, LABEL_COLOR)
        });
    }
    out
}

pub fn save_visualization(img: &RgbImage, path: &std::path::Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BezierRegion;
    use crate::net::ModelConfig;

    fn tiny_net() -> NetworkParams {
        let c = ModelConfig {
            backbone_channels: 4,
            det_channels: 4,
            align_h: 2,
            align_w: 4,
            rec_hidden: 4,
            rec_attention: 3,
            rec_char_embedding: 2,
            max_steps: 5,
            emb_channels: 2,
            emb_hidden: 4,
            emb_dim: 3,
            disc_hidden: [4, 3],
            score_prior_bias: -2.0,
            emb_output_bias: 0.5,
        };
        NetworkParams::init(c, 3).unwrap()
    }

    #[test]
    fn blank_image_gives_nothing() {
        let net = tiny_net();
        let img = GrayImage::new(64, 64);
        assert!(spot(&net, &img, &DecodeParams::default()).unwrap().is_empty());
    }

    #[test]
    fn forced_scores_give_read_detections() {
        let mut net = tiny_net();
        net.params.get_mut("det.score.out.b").unwrap().data_mut().fill(5.0);
        let img = GrayImage::from_fn(64, 64, |x, y| image::Luma([((x * 7 + y * 3) % 255) as u8]));
        let preds = spot(&net, &img, &DecodeParams::default()).unwrap();
        assert!(!preds.is_empty() && preds.len() <= 8);
        assert!(preds.iter().all(|p| p.text.chars().count() <= 5 && p.confidence >= 0.5));
        assert!(preds.windows(2).all(|w| w[0].confidence >= w[1].confidence));
    }

    #[test]
    fn visualization_outlines_in_blue() {
        let img = GrayImage::new(64, 32);
        let p = Prediction {
            polygon: BezierRegion::rectangle(10.0, 12.0, 40.0, 24.0).polygon(),
            text: "cat".into(),
            confidence: 0.87,
        };
        assert_eq!(label(&p), "cat:0.87");
        let v = visualize(&img, &[p]);
        assert_eq!(*v.get_pixel(10, 18), POLYGON_COLOR);
        assert_eq!(*v.get_pixel(25, 12), POLYGON_COLOR);
        assert!(v.pixels().any(|&c| c == LABEL_COLOR));
        assert_eq!(*v.get_pixel(60, 30), Rgb([0, 0, 0]));
    }
}
