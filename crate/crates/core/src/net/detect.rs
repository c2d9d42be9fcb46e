use std::cmp::Ordering;

use crate::autodiff::{stable_sigmoid, ParameterSet, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{bounding_box, polygon_iou, BezierRegion, Polygon};

use super::conv;

/// Image pixels per feature cell.
pub const FEATURE_STRIDE: usize = 4;
pub const NMS_RASTER_SCALE: usize = 2;

/// `[1,1,H,W]` image in `[0,1]` to `[1,c,H/4,W/4]` features.
pub fn backbone_forward(tape: &mut Tape, p: &ParameterSet, image: Var) -> Result<Var> {
    match *tape.shape(image) {
        [1, 1, h, w] if h % FEATURE_STRIDE == 0 && w % FEATURE_STRIDE == 0 => {}
        [1, 1, h, w] => {
            return Err(Error::Config(format!(
                "image {h}x{w} is not divisible by {FEATURE_STRIDE}"
            )))
        }
        ref s => return Err(Error::Dimension(format!("backbone expects [1,1,H,W], got {s:?}"))),
    }
    let mut x = image;
    for (name, stride, pad) in [
        ("backbone.conv1", 2, 1),
        ("backbone.conv2", 2, 1),
        ("backbone.conv3", 1, 1),
        ("backbone.conv4", 1, 1),
    ] {
        x = conv(tape, p, name, x, stride, pad)?;
        x = tape.relu(x);
    }
    Ok(x)
}

/// Dense text-ness logits and per-cell region offsets.
#[derive(Clone, Copy, Debug)]
pub struct DetectionOutput {
    /// `[1,1,h,w]` logits
    pub score: Var,
    /// `[1,16,h,w]` control-point offsets in cell units from the cell center
    pub offsets: Var,
    pub h: usize,
    pub w: usize,
}

pub fn detection_forward(tape: &mut Tape, p: &ParameterSet, features: Var) -> Result<DetectionOutput> {
    let (h, w) = match *tape.shape(features) {
        [1, _, h, w] => (h, w),
        ref s => return Err(Error::Dimension(format!("detection expects [1,c,h,w], got {s:?}"))),
    };
    let branch = |tape: &mut Tape, name: &str| -> Result<Var> {
        let x = conv(tape, p, &format!("det.{name}.conv"), features, 1, 1)?;
        let x = tape.relu(x);
        conv(tape, p, &format!("det.{name}.out"), x, 1, 0)
    };
    let score = branch(tape, "score")?;
    let offsets = branch(tape, "offset")?;
    Ok(DetectionOutput { score, offsets, h, w })
}

fn cell_center(i: usize, j: usize, stride: f64) -> (f64, f64) {
    ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride)
}

/// Offsets of `region` from the center of cell `(i, j)`, in cell units.
pub fn encode_region(region: &BezierRegion, i: usize, j: usize, stride: f64) -> [f64; 16] {
    let (cx, cy) = cell_center(i, j, stride);
    let mut out = region.to_control_points();
    for k in 0..8 {
        out[2 * k] = (out[2 * k] - cx) / stride;
        out[2 * k + 1] = (out[2 * k + 1] - cy) / stride;
    }
    out
}

pub fn decode_region(offsets: &[f64; 16], i: usize, j: usize, stride: f64) -> BezierRegion {
    let (cx, cy) = cell_center(i, j, stride);
    let mut v = *offsets;
    for k in 0..8 {
        v[2 * k] = cx + v[2 * k] * stride;
        v[2 * k + 1] = cy + v[2 * k + 1] * stride;
    }
    BezierRegion::from_control_points(&v).expect("16 finite values")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeParams {
    pub score_thresh: f64,
    pub iou_nms: f64,
    pub max_det: usize,
    /// Highest-scoring cells kept before suppression.
    pub pre_nms_top: usize,
    pub spatial_scale: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            score_thresh: 0.5,
            iou_nms: 0.3,
            max_det: 8,
            pre_nms_top: 64,
            spatial_scale: 1.0 / FEATURE_STRIDE as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub region: BezierRegion,
    pub confidence: f64,
    pub cell: (usize, usize),
}

/// Box-prechecked polygon IoU.
pub fn region_iou(a: &Polygon, b: &Polygon, raster_scale: usize) -> f64 {
    let (ax0, ay0, ax1, ay1) = bounding_box(a);
    let (bx0, by0, bx1, by1) = bounding_box(b);
    if ax1 <= bx0 || bx1 <= ax0 || ay1 <= by0 || by1 <= ay0 {
        return 0.0;
    }
    polygon_iou(a, b, raster_scale).unwrap_or(0.0)
}

/// Thresholds cell scores, decodes regions and applies greedy polygon NMS.
/// `score` holds `h*w` logits; `offsets` holds 16 channel planes of `h*w`.
pub fn decode_detections(
    score: &[f64],
    offsets: &[f64],
    h: usize,
    w: usize,
    params: &DecodeParams,
) -> Result<Vec<Detection>> {
    if !(params.score_thresh > 0.0 && params.score_thresh < 1.0) {
        return Err(Error::Input(format!(
            "score_thresh {} must be in (0,1)",
            params.score_thresh
        )));
    }
    if !(params.spatial_scale > 0.0) {
        return Err(Error::Input("spatial_scale must be positive".into()));
    }
    if score.len() != h * w || offsets.len() != 16 * h * w {
        return Err(Error::Dimension(format!(
            "decode expects {} scores and {} offsets, got {} and {}",
            h * w,
            16 * h * w,
            score.len(),
            offsets.len()
        )));
    }
    let stride = 1.0 / params.spatial_scale;
    let mut hot: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let conf = stable_sigmoid(score[i * w + j]);
            if conf >= params.score_thresh {
                hot.push((conf, i, j));
            }
        }
    }
    hot.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });
    hot.truncate(params.pre_nms_top.max(params.max_det));
    let mut kept: Vec<(Detection, Polygon)> = Vec::new();
    for (conf, i, j) in hot {
        if kept.len() >= params.max_det {
            break;
        }
        let mut o = [0.0; 16];
        for (k, v) in o.iter_mut().enumerate() {
            *v = offsets[k * h * w + i * w + j];
        }
        let region = decode_region(&o, i, j, stride);
        let poly = region.polygon();
        if kept
            .iter()
            .any(|(_, q)| region_iou(&poly, q, NMS_RASTER_SCALE) > params.iou_nms)
        {
            continue;
        }
        kept.push((
            Detection {
                region,
                confidence: conf,
                cell: (i, j),
            },
            poly,
        ));
    }
    Ok(kept.into_iter().map(|(d, _)| d).collect())
}
