use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::autodiff::gradcheck::{check, check_params, probe, random_tensor, GRAD_TOLERANCE};
use crate::autodiff::stable_sigmoid;
use crate::geometry::BezierRegion;

fn tiny() -> ModelConfig {
    ModelConfig {
        backbone_channels: 3,
        det_channels: 2,
        align_h: 2,
        align_w: 4,
        rec_hidden: 4,
        rec_attention: 3,
        rec_char_embedding: 2,
        max_steps: 3,
        emb_channels: 2,
        emb_hidden: 5,
        emb_dim: 3,
        disc_hidden: [4, 3],
        score_prior_bias: -2.0,
        emb_output_bias: 0.5,
    }
}

fn image(tape: &mut Tape, h: usize, w: usize, seed: u64) -> Var {
    let mut r = rng::seeded(seed);
    tape.leaf(random_tensor(&mut r, vec![1, 1, h, w], 0.0, 1.0, 0.0))
}

fn zero_where(p: &mut ParameterSet, prefix: &str) {
    for (name, t) in p.iter_mut() {
        if name.starts_with(prefix) {
            t.data_mut().fill(0.0);
        }
    }
}

#[test]
fn backbone_divides_by_four() {
    let net = NetworkParams::init(
        ModelConfig {
            backbone_channels: 4,
            ..tiny()
        },
        1,
    )
    .unwrap();
    let mut t = Tape::new();
    let x = image(&mut t, 64, 128, 2);
    let f = backbone_forward(&mut t, &net.params, x).unwrap();
    assert_eq!(t.shape(f), &[1, 4, 16, 32]);
    let bad = image(&mut t, 66, 128, 2);
    assert!(matches!(
        backbone_forward(&mut t, &net.params, bad),
        Err(Error::Config(_))
    ));
}

#[test]
fn zero_image_gives_zero_features() {
    let net = NetworkParams::init(tiny(), 1).unwrap();
    let mut t = Tape::new();
    let x = t.constant(vec![1, 1, 16, 16], vec![0.0; 256]).unwrap();
    let f = backbone_forward(&mut t, &net.params, x).unwrap();
    assert!(t.value(f).iter().all(|&v| v == 0.0));
}

#[test]
fn backbone_parameter_gradients() {
    let net = NetworkParams::init(tiny(), 3).unwrap();
    let e = check_params(
        &net.params,
        |n| n.starts_with(BACKBONE),
        8,
        1,
        |t, p| {
            let x = image(t, 8, 8, 5);
            let f = backbone_forward(t, p, x)?;
            probe(t, f, 9)
        },
    )
    .unwrap();
    assert!(e < GRAD_TOLERANCE, "{e}");
}

#[test]
fn detection_keeps_spatial_dims_and_zero_weights_give_half() {
    let mut net = NetworkParams::init(tiny(), 1).unwrap();
    let mut t = Tape::new();
    let x = image(&mut t, 16, 24, 2);
    let f = backbone_forward(&mut t, &net.params, x).unwrap();
    let d = detection_forward(&mut t, &net.params, f).unwrap();
    assert_eq!(t.shape(d.score), &[1, 1, 4, 6]);
    assert_eq!(t.shape(d.offsets), &[1, 16, 4, 6]);
    zero_where(&mut net.params, DETECTION);
    let mut t = Tape::new();
    let x = image(&mut t, 16, 24, 2);
    let f = backbone_forward(&mut t, &net.params, x).unwrap();
    let d = detection_forward(&mut t, &net.params, f).unwrap();
    assert!(t.value(d.score).iter().all(|&s| stable_sigmoid(s) == 0.5));
}

#[test]
fn detection_parameter_gradients() {
    let net = NetworkParams::init(tiny(), 4).unwrap();
    let e = check_params(
        &net.params,
        |n| n.starts_with(DETECTION),
        8,
        2,
        |t, p| {
            let x = image(t, 8, 8, 5);
            let f = backbone_forward(t, p, x)?;
            let d = detection_forward(t, p, f)?;
            let a = probe(t, d.score, 3)?;
            let b = probe(t, d.offsets, 4)?;
            t.add(a, b)
        },
    )
    .unwrap();
    assert!(e < GRAD_TOLERANCE, "{e}");
}

fn random_region(r: &mut rng::Rng) -> BezierRegion {
    let v: Vec<f64> = (0..16).map(|_| r.gen_range(0.0..100.0)).collect();
    BezierRegion::from_control_points(&v).unwrap()
}

#[test]
fn encode_decode_round_trip() {
    let mut r = rng::seeded(8);
    for _ in 0..200 {
        let reg = random_region(&mut r);
        let (i, j) = (r.gen_range(0..30), r.gen_range(0..30));
        let back = decode_region(&encode_region(&reg, i, j, 4.0), i, j, 4.0);
        for (a, b) in back.to_control_points().iter().zip(reg.to_control_points()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

/// Score/offset planes for an `h x w` map with the given hot cells, each
/// decoding to `region`.
fn planes(h: usize, w: usize, hot: &[(usize, usize, f64, BezierRegion)]) -> (Vec<f64>, Vec<f64>) {
    let mut score = vec![-10.0; h * w];
    let mut off = vec![0.0; 16 * h * w];
    for &(i, j, logit, reg) in hot {
        score[i * w + j] = logit;
        for (k, v) in encode_region(&reg, i, j, 4.0).iter().enumerate() {
            off[k * h * w + i * w + j] = *v;
        }
    }
    (score, off)
}

#[test]
fn decode_empty_and_single() {
    let p = DecodeParams::default();
    let (s, o) = planes(4, 5, &[]);
    assert!(decode_detections(&s, &o, 4, 5, &p).unwrap().is_empty());
    let reg = BezierRegion::rectangle(3.0, 2.0, 15.0, 9.0);
    let (s, o) = planes(4, 5, &[(1, 2, 3.0, reg)]);
    let d = decode_detections(&s, &o, 4, 5, &p).unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].cell, (1, 2));
    for (a, b) in d[0].region.to_control_points().iter().zip(reg.to_control_points()) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!(decode_detections(&s, &o, 4, 5, &DecodeParams { score_thresh: 1.0, ..p }).is_err());
}

#[test]
fn near_duplicates_are_suppressed() {
    let p = DecodeParams::default();
    let a = BezierRegion::rectangle(3.0, 2.0, 30.0, 12.0);
    let b = a.translated(0.5, 0.25);
    let (s, o) = planes(6, 8, &[(1, 2, 1.0, a), (2, 3, 2.0, b)]);
    let d = decode_detections(&s, &o, 6, 8, &p).unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].cell, (2, 3));
}

/// Independent pairwise NMS: every survivor overlaps no earlier survivor
/// by more than the threshold, and every suppressed cell overlaps some
/// earlier survivor.
fn nms_oracle(cands: &[(f64, usize, usize, BezierRegion)], thr: f64, max_det: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<_> = cands.to_vec();
    order.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut keep: Vec<(usize, usize, BezierRegion)> = Vec::new();
    for (_, i, j, reg) in order {
        if keep.len() == max_det {
            break;
        }
        let ok = keep.iter().all(|(_, _, k)| {
            crate::geometry::polygon_iou(&reg.polygon(), &k.polygon(), NMS_RASTER_SCALE).unwrap() <= thr
        });
        if ok {
            keep.push((i, j, reg));
        }
    }
    keep.into_iter().map(|(i, j, _)| (i, j)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn decode_matches_pairwise_nms(seed in 0u64..1000, max_det in 1usize..6) {
        let mut r = rng::seeded(seed);
        let (h, w) = (5, 7);
        let mut hot = Vec::new();
        for i in 0..h {
            for j in 0..w {
                if r.gen_bool(0.4) {
                    let x = r.gen_range(0.0..20.0);
                    let y = r.gen_range(0.0..12.0);
                    let reg = BezierRegion::rectangle(x, y, x + r.gen_range(4.0..12.0), y + r.gen_range(3.0..8.0));
                    hot.push((i, j, r.gen_range(-1.0..4.0), reg));
                }
            }
        }
        let params = DecodeParams { max_det, pre_nms_top: 64, ..DecodeParams::default() };
        let (s, o) = planes(h, w, &hot);
        let got = decode_detections(&s, &o, h, w, &params).unwrap();
        prop_assert!(got.len() <= max_det);
        prop_assert!(got.windows(2).all(|p| p[0].confidence >= p[1].confidence));
        let cands: Vec<_> = hot
            .iter()
            .filter(|c| stable_sigmoid(c.2) >= params.score_thresh)
            .map(|&(i, j, l, reg)| (stable_sigmoid(l), i, j, reg))
            .collect();
        let want = nms_oracle(&cands, params.iou_nms, max_det);
        let cells: Vec<_> = got.iter().map(|d| d.cell).collect();
        prop_assert_eq!(cells, want);
    }
}

fn aligned(tape: &mut Tape, n: usize, cfg: &ModelConfig, seed: u64) -> Var {
    let mut r = rng::seeded(seed);
    tape.leaf(random_tensor(
        &mut r,
        vec![n, cfg.backbone_channels, cfg.align_h, cfg.align_w],
        -2.0,
        2.0,
        0.0,
    ))
}

#[test]
fn recognition_shapes_and_attention_rows() {
    let cfg = ModelConfig {
        backbone_channels: 4,
        align_h: 3,
        align_w: 6,
        ..tiny()
    };
    let net = NetworkParams::init(cfg.clone(), 2).unwrap();
    let mut t = Tape::new();
    let a = aligned(&mut t, 2, &cfg, 3);
    let out = recognition_forward(&mut t, &net.params, a, Feed::Greedy(5)).unwrap();
    assert_eq!(out.logits.len(), 5);
    assert_eq!(num_classes(), 37);
    let one = t.slice(out.logits[0], 0, 0, 1).unwrap();
    let stacked: Vec<Var> = out.logits.iter().map(|&l| t.slice(l, 0, 0, 1).unwrap()).collect();
    let stacked = t.concat(&stacked, 0).unwrap();
    assert_eq!(t.shape(one), &[1, 37]);
    assert_eq!(t.shape(stacked), &[5, 37]);
    for &al in &out.attention {
        assert_eq!(t.shape(al), &[2, 6]);
        for row in t.value(al).chunks(6) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn recognition_gradients_through_aligned_features() {
    let cfg = tiny();
    let net = NetworkParams::init(cfg.clone(), 5).unwrap();
    let mut r = rng::seeded(6);
    let input = random_tensor(&mut r, vec![2, 3, 2, 4], -2.0, 2.0, 0.0);
    let targets = vec![vec![0, 2], vec![5]];
    let e = check(&[input], |t, v| {
        let out = recognition_forward(t, &net.params, v[0], Feed::Teacher(&targets))?;
        let all = t.concat(&out.logits, 0)?;
        probe(t, all, 7)
    })
    .unwrap();
    assert!(e < GRAD_TOLERANCE, "{e}");
    let e = check_params(
        &net.params,
        |n| n.starts_with(RECOGNITION),
        6,
        3,
        |t, p| {
            let a = aligned(t, 2, &cfg, 8);
            let out = recognition_forward(t, p, a, Feed::Teacher(&targets))?;
            let all = t.concat(&out.logits, 0)?;
            probe(t, all, 7)
        },
    )
    .unwrap();
    assert!(e < GRAD_TOLERANCE, "{e}");
}

#[test]
fn teacher_forcing_runs_one_step_past_longest() {
    let net = NetworkParams::init(tiny(), 5).unwrap();
    let mut t = Tape::new();
    let a = aligned(&mut t, 2, &tiny(), 1);
    let out = recognition_forward(&mut t, &net.params, a, Feed::Teacher(&[vec![1, 2, 3], vec![]])).unwrap();
    assert_eq!(out.logits.len(), 4);
    let bad = recognition_forward(&mut t, &net.params, a, Feed::Teacher(&[vec![36], vec![]]));
    assert!(bad.is_err());
}

fn one_hot_rows(idx: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; idx.len() * 37];
    for (s, &k) in idx.iter().enumerate() {
        v[s * 37 + k] = 5.0;
    }
    v
}

#[test]
fn greedy_decode_examples() {
    let c = |ch: char| crate::synth::char_index(ch).unwrap();
    assert_eq!(
        greedy_decode(&one_hot_rows(&[c('c'), c('a'), c('t'), 36, c('x')]), 37),
        "cat"
    );
    assert_eq!(greedy_decode(&one_hot_rows(&[36, c('a')]), 37), "");
    assert_eq!(greedy_decode(&vec![0.0; 37 * 2], 37), "aa");
}

proptest! {
    #[test]
    fn greedy_decode_matches_argmax_oracle(seed in 0u64..10_000) {
        let mut r = rng::seeded(seed);
        let rows: Vec<f64> = (0..6 * 37).map(|_| r.gen_range(-1.0..1.0)).collect();
        let chars: Vec<char> = crate::synth::CHARSET.chars().collect();
        let mut want = String::new();
        for row in rows.chunks(37) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let k = row.iter().position(|&v| v == mx).unwrap();
            if k == 36 { break; }
            want.push(chars[k]);
        }
        prop_assert_eq!(greedy_decode(&rows, 37), want);
    }
}

#[test]
fn word_embedding_reference_shape() {
    let cfg = ModelConfig {
        backbone_channels: 256,
        emb_channels: 256,
        emb_hidden: 64,
        emb_dim: 300,
        align_h: 8,
        align_w: 32,
        ..tiny()
    };
    let net = NetworkParams::init(cfg.clone(), 1).unwrap();
    let mut t = Tape::new();
    let a = aligned(&mut t, 2, &cfg, 2);
    let out = word_embedding_forward(&mut t, &net.params, a).unwrap();
    assert_eq!(t.shape(out), &[2, 300]);
    assert!(t.value(out).iter().all(|&v| v >= 0.0));
}

#[test]
fn word_embedding_first_conv_gradient() {
    let cfg = tiny();
    let net = NetworkParams::init(cfg.clone(), 11).unwrap();
    let e = check_params(
        &net.params,
        |n| n.starts_with(EMBEDDING_HEAD),
        10,
        4,
        |t, p| {
            let a = aligned(t, 2, &cfg, 3);
            let out = word_embedding_forward(t, p, a)?;
            probe(t, out, 5)
        },
    )
    .unwrap();
    assert!(e < GRAD_TOLERANCE, "{e}");
}

#[test]
fn discriminator_range_and_zero_weights() {
    let mut net = NetworkParams::init(tiny(), 1).unwrap();
    let mut t = Tape::new();
    let mut r = rng::seeded(1);
    let v = t.leaf(random_tensor(&mut r, vec![4, 3], -2.0, 2.0, 0.0));
    let p = discriminator_forward(&mut t, &net.params, v).unwrap();
    assert_eq!(t.shape(p), &[4]);
    assert!(t.value(p).iter().all(|&x| x > 0.0 && x < 1.0));
    zero_where(&mut net.params, DISCRIMINATOR);
    let mut t = Tape::new();
    let v = t.leaf(random_tensor(&mut r, vec![4, 3], -2.0, 2.0, 0.0));
    let p = discriminator_forward(&mut t, &net.params, v).unwrap();
    assert!(t.value(p).iter().all(|&x| x == 0.5));
}

#[test]
fn discriminator_gradients() {
    let net = NetworkParams::init(tiny(), 12).unwrap();
    let e = check_params(&net.params, NetworkParams::is_discriminator, 12, 5, |t, p| {
        let mut r = rng::seeded(2);
        let v = t.leaf(random_tensor(&mut r, vec![3, 3], -2.0, 2.0, 0.0));
        let out = discriminator_forward(t, p, v)?;
        t.binary_cross_entropy(out, &[1.0, 0.0, 1.0])
    })
    .unwrap();
    assert!(e < GRAD_TOLERANCE, "{e}");
}

#[test]
fn parameter_prefixes_partition_the_network() {
    let net = NetworkParams::init(tiny(), 1).unwrap();
    let prefixes = [BACKBONE, DETECTION, RECOGNITION, EMBEDDING_HEAD, DISCRIMINATOR];
    for name in net.params.names() {
        assert_eq!(prefixes.iter().filter(|p| name.starts_with(*p)).count(), 1, "{name}");
    }
    let disc: Vec<_> = net
        .params
        .names()
        .filter(|n| NetworkParams::is_discriminator(n))
        .collect();
    assert_eq!(disc.len(), 6);
}

#[test]
fn init_is_per_name() {
    let a = NetworkParams::init(tiny(), 9).unwrap();
    let b = NetworkParams::init(ModelConfig { emb_dim: 7, ..tiny() }, 9).unwrap();
    let c = NetworkParams::init(tiny(), 9).unwrap();
    assert_eq!(a.params.checksum(), c.params.checksum());
    assert_eq!(
        a.params.get("backbone.conv2.w").unwrap().data(),
        b.params.get("backbone.conv2.w").unwrap().data()
    );
    assert!(matches!(
        NetworkParams::init_for_table(tiny(), 4, 1),
        Err(Error::Config(_))
    ));
    assert!(NetworkParams::init_for_table(tiny(), 3, 1).is_ok());
}
