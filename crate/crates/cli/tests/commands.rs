use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use a3s::evaluation::Prediction;
use a3s::geometry::polygon_iou;
use a3s::synth::load_dataset;
use serde_json::Value;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

fn a3s(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a3s"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(out: &Path, n: usize, seed: u64) {
    let o = a3s(&[
        "gen-data",
        "--out",
        p(out),
        "--lexicon",
        p(&fixture("lexicon.txt")),
        "--n",
        &n.to_string(),
        "--size",
        "96x192",
        "--seed",
        &seed.to_string(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn write_config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let cfg = format!(
        "data_dir = {}\nembedding_table = {}\ncheckpoint_dir = {}\n\
         backbone_channels = 8\ndet_channels = 8\nalign_h = 4\nalign_w = 8\nrec_hidden = 8\n\
         rec_attention = 4\nrec_char_embedding = 4\nmax_steps = 8\nemb_channels = 4\nemb_hidden = 8\n\
         disc_hidden = 8,4\n{extra}",
        data.display(),
        fixture("embeddings16.txt").display(),
        dir.join("ckpt").display(),
    );
    let path = dir.join("train.cfg");
    fs::write(&path, cfg).unwrap();
    path
}

fn metrics(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("ckpt/metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn every_command_documents_its_flags() {
    let cases: [(&str, &[&str]); 5] = [
        ("gen-data", &["--out", "--lexicon", "--n", "--size", "--seed"]),
        ("train", &["--config"]),
        (
            "eval",
            &[
                "--checkpoint",
                "--data",
                "--mode",
                "--lexicon",
                "--predictions",
                "--iou-match",
            ],
        ),
        ("infer", &["--checkpoint", "--image", "--viz-out", "--score-thresh"]),
        ("grad-check", &["--seed"]),
    ];
    for (cmd, flags) in cases {
        let o = a3s(&[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd}");
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}:\n{text}");
        }
    }
    assert_eq!(code(&a3s(&["--help"])), 0);
}

#[test]
fn unknown_flags_are_user_errors() {
    let o = a3s(&["gen-data", "--bogus", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--bogus"));
}

#[test]
fn gen_data_is_deterministic() {
    let t = TempDir::new().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, 4, 7);
    gen(&b, 4, 7);
    let files = |d: &Path| {
        let mut v: Vec<(String, Vec<u8>)> = walk(d)
            .into_iter()
            .map(|f| (f.strip_prefix(d).unwrap().display().to_string(), fs::read(&f).unwrap()))
            .collect();
        v.sort();
        v
    };
    let fa = files(&a);
    assert_eq!(fa.len(), 5);
    assert_eq!(fa, files(&b));
    assert_eq!(load_dataset(&a).unwrap().len(), 4);
}

fn walk(d: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(d).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn gen_data_names_a_missing_lexicon() {
    let t = TempDir::new().unwrap();
    let missing = t.path().join("nowhere.txt");
    let o = a3s(&["gen-data", "--out", p(&t.path().join("d")), "--lexicon", p(&missing)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nowhere.txt"), "{}", stderr(&o));
}

#[test]
fn smoke_training_logs_every_term() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    gen(&data, 4, 1);
    let cfg = write_config(
        t.path(),
        &data,
        "loss_mode = adversarial\ngamma = 0.6\niterations = 10\n",
    );
    let start = Instant::now();
    let o = a3s(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 60);
    let m = metrics(t.path());
    assert_eq!(m.len(), 10);
    assert!(m.iter().all(|l| l["l_adv"].as_f64().unwrap() > 0.0));
    assert!(t.path().join("ckpt/final.a3s").exists());
}

#[test]
fn no_semantic_loss_logs_zero_adversarial_term() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    gen(&data, 3, 2);
    let cfg = write_config(t.path(), &data, "loss_mode = none\niterations = 5\n");
    let o = a3s(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = metrics(t.path());
    assert_eq!(m.len(), 5);
    assert!(m.iter().all(|l| l["l_adv"].as_f64() == Some(0.0)));
}

#[test]
fn bad_config_key_is_named() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("bad.cfg");
    fs::write(&cfg, "iterations = 3\nlearning_speed = 9\n").unwrap();
    let o = a3s(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_speed"), "{}", stderr(&o));
}

fn ground_truth_predictions(data: &Path, out: &Path) {
    let lines: Vec<String> = load_dataset(data)
        .unwrap()
        .iter()
        .map(|s| {
            let preds: Vec<Prediction> = s
                .instances
                .iter()
                .map(|i| Prediction {
                    polygon: i.region.polygon(),
                    text: i.text.clone(),
                    confidence: 1.0,
                })
                .collect();
            serde_json::to_string(&preds).unwrap()
        })
        .collect();
    fs::write(out, lines.join("\n")).unwrap();
}

#[test]
fn ground_truth_as_predictions_scores_one() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    gen(&data, 5, 3);
    let preds = t.path().join("gt.jsonl");
    ground_truth_predictions(&data, &preds);
    for mode in ["none", "full"] {
        let o = a3s(&[
            "eval",
            "--predictions",
            p(&preds),
            "--data",
            p(&data),
            "--mode",
            mode,
            "--lexicon",
            p(&fixture("lexicon.txt")),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let v: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        assert_eq!(v["mode"], mode);
        assert_eq!(v["f_measure"].as_f64(), Some(1.0));
    }
}

#[test]
fn full_mode_needs_a_lexicon() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    gen(&data, 2, 4);
    let preds = t.path().join("gt.jsonl");
    ground_truth_predictions(&data, &preds);
    let o = a3s(&["eval", "--predictions", p(&preds), "--data", p(&data), "--mode", "full"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--lexicon"));
}

/// Trains a small model long enough to localize words, then checks eval
/// and infer against it.
#[test]
fn trained_checkpoint_spots_a_planted_word() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    gen(&data, 24, 5);
    let cfg = write_config(
        t.path(),
        &data,
        "loss_mode = none\niterations = 400\nlr = 0.1\ngrad_clip = 5\nbackbone_channels = 16\ndet_channels = 16\n",
    );
    let o = a3s(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = t.path().join("ckpt/final.a3s");

    let mut f = [0.0; 2];
    for (k, mode) in ["none", "full"].iter().enumerate() {
        let o = a3s(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--data",
            p(&data),
            "--mode",
            mode,
            "--lexicon",
            p(&fixture("lexicon.txt")),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let v: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        assert_eq!(v["mode"], *mode);
        f[k] = v["f_measure"].as_f64().unwrap();
    }
    assert!(f[1] >= f[0], "full {} < none {}", f[1], f[0]);

    let sample = &load_dataset(&data).unwrap()[0];
    let image = data.join("images").join(format!("{}.png", sample.id));
    let viz = t.path().join("viz.png");
    let o = a3s(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--image",
        p(&image),
        "--viz-out",
        p(&viz),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let preds: Vec<Prediction> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let best = preds
        .iter()
        .flat_map(|q| {
            sample
                .instances
                .iter()
                .map(|g| polygon_iou(&q.polygon, &g.region.polygon(), 8).unwrap())
        })
        .fold(0.0, f64::max);
    assert!(best >= 0.5, "best IoU {best} over {} detections", preds.len());
    let png = image::open(&viz).unwrap();
    assert_eq!((png.width(), png.height()), (192, 96));

    let blank = t.path().join("blank.png");
    image::GrayImage::new(192, 96).save(&blank).unwrap();
    let o = a3s(&["infer", "--checkpoint", p(&ckpt), "--image", p(&blank)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 0);
}

#[test]
fn infer_rejects_an_unreadable_image() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    gen(&data, 2, 6);
    let cfg = write_config(t.path(), &data, "loss_mode = none\niterations = 1\n");
    assert_eq!(code(&a3s(&["train", "--config", p(&cfg)])), 0);
    let junk = t.path().join("junk.png");
    fs::write(&junk, b"not a png").unwrap();
    let o = a3s(&[
        "infer",
        "--checkpoint",
        p(&t.path().join("ckpt/final.a3s")),
        "--image",
        p(&junk),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("junk.png"));
}

#[test]
fn grad_check_lists_each_op_once() {
    let o = a3s(&["grad-check"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let names: Vec<String> = stdout(&o)
        .lines()
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect();
    let expected: Vec<&str> = a3s::autodiff::gradcheck::registered_ops()
        .iter()
        .map(|k| k.name())
        .collect();
    assert_eq!(names, expected);
    assert!(stdout(&o).lines().all(|l| l.ends_with(" ok")));
}

#[test]
fn corrupted_conv_fails_grad_check() {
    let o = a3s(&["grad-check", "--corrupt", "conv2d"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("conv2d"), "{}", stderr(&o));
}
