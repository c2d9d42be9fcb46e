use crate::autodiff::{ParameterSet, Tape, Var};
use crate::error::{Error, Result};
use crate::synth::CHARSET;

use super::{fc, num_classes};

/// How the decoder's previous-character input is chosen.
#[derive(Clone, Copy, Debug)]
pub enum Feed<'a> {
    /// Ground-truth class indices per sequence (EOS excluded). Runs one step
    /// more than the longest sequence; past its end a sequence is fed EOS.
    Teacher(&'a [Vec<usize>]),
    /// Feeds back each step's argmax for the given number of steps.
    Greedy(usize),
}

pub struct RecognitionOutput {
    /// per step, `[n, classes]` logits
    pub logits: Vec<Var>,
    /// per step, `[n, w]` attention weights over encoder positions
    pub attention: Vec<Var>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Attention decoder over `[n,c,h,w]` aligned features. The encoder
/// averages over height and adds a learned per-column position vector.
pub fn recognition_forward(tape: &mut Tape, p: &ParameterSet, aligned: Var, feed: Feed) -> Result<RecognitionOutput> {
    let (n, c, len) = match *tape.shape(aligned) {
        [n, c, _, w] => (n, c, w),
        ref s => return Err(Error::Dimension(format!("recognizer expects [n,c,h,w], got {s:?}"))),
    };
    let k = num_classes();
    let bos = k;
    let steps = match feed {
        Feed::Teacher(t) => {
            if t.len() != n {
                return Err(Error::Dimension(format!("{} target sequences for {n} inputs", t.len())));
            }
            if t.iter().flatten().any(|&c| c >= k - 1) {
                return Err(Error::Input("target class outside the charset".into()));
            }
            t.iter().map(Vec::len).max().unwrap_or(0) + 1
        }
        Feed::Greedy(s) => s,
    };
    if steps == 0 {
        return Err(Error::Input("recognizer needs at least one step".into()));
    }

    let pooled = tape.mean_pool_height(aligned)?;
    let mut perm = Vec::with_capacity(n * c * len);
    for i in 0..n {
        for l in 0..len {
            for ch in 0..c {
                perm.push(i * c * len + ch * len + l);
            }
        }
    }
    let enc = tape.gather(pooled, &perm)?;
    let enc = tape.reshape(enc, vec![n, len * c])?;
    let pos = tape.param(p, "rec.position")?;
    let enc = tape.add_row(enc, pos)?;
    let enc = tape.reshape(enc, vec![n * len, c])?;
    let keys = fc(tape, p, "rec.attn.key", enc)?;
    let a = tape.shape(keys)[1];

    let hd = p
        .get("rec.out.w")
        .map(|t| t.shape()[1])
        .ok_or_else(|| Error::Config("missing rec.out.w".into()))?;
    let e = p
        .get("rec.char_embedding")
        .map(|t| t.shape()[1])
        .ok_or_else(|| Error::Config("missing rec.char_embedding".into()))?;
    let char_emb = tape.param(p, "rec.char_embedding")?;

    let rep_query: Vec<usize> = (0..n)
        .flat_map(|i| (0..len).flat_map(move |_| (0..a).map(move |q| i * a + q)))
        .collect();
    let rep_alpha: Vec<usize> = (0..n * len).flat_map(|r| std::iter::repeat_n(r, c)).collect();
    let mut block = vec![0.0; n * n * len];
    for i in 0..n {
        block[i * n * len + i * len..i * n * len + (i + 1) * len].fill(1.0);
    }
    let block = tape.constant(vec![n, n * len], block)?;

    let mut h = tape.constant(vec![n, hd], vec![0.0; n * hd])?;
    let mut prev: Vec<usize> = vec![bos; n];
    let mut out = RecognitionOutput {
        logits: Vec::with_capacity(steps),
        attention: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        let q = fc(tape, p, "rec.attn.query", h)?;
        let q = tape.gather(q, &rep_query)?;
        let q = tape.reshape(q, vec![n * len, a])?;
        let s = tape.add(keys, q)?;
        let s = tape.tanh(s);
        let s = fc(tape, p, "rec.attn.score", s)?;
        let s = tape.reshape(s, vec![n, len])?;
        let alpha = tape.softmax_rows(s);
        let ar = tape.gather(alpha, &rep_alpha)?;
        let ar = tape.reshape(ar, vec![n * len, c])?;
        let weighted = tape.mul(ar, enc)?;
        let context = tape.matmul(block, weighted)?;

        let rows: Vec<usize> = prev.iter().flat_map(|&ch| (0..e).map(move |q| ch * e + q)).collect();
        let emb = tape.gather(char_emb, &rows)?;
        let emb = tape.reshape(emb, vec![n, e])?;
        let x = tape.concat(&[context, emb], 1)?;

        let gate = |tape: &mut Tape, name: &str, hin: Var| -> Result<Var> {
            let gx = fc(tape, p, &format!("rec.gru.{name}.x"), x)?;
            let gh = fc(tape, p, &format!("rec.gru.{name}.h"), hin)?;
            tape.add(gx, gh)
        };
        let z = gate(tape, "z", h)?;
        let z = tape.sigmoid(z);
        let r = gate(tape, "r", h)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let cand = gate(tape, "h", rh)?;
        let cand = tape.tanh(cand);
        let delta = tape.sub(cand, h)?;
        let delta = tape.mul(z, delta)?;
        h = tape.add(h, delta)?;

        let logits = fc(tape, p, "rec.out", h)?;
        prev = match feed {
            Feed::Teacher(targets) => targets.iter().map(|s| s.get(t).copied().unwrap_or(k - 1)).collect(),
            Feed::Greedy(_) => tape.value(logits).chunks(k).map(argmax).collect(),
        };
        out.logits.push(logits);
        out.attention.push(alpha);
    }
    Ok(out)
}

/// Argmax per `classes`-wide row, truncated at the first end-of-sequence
/// (the last class). Ties go to the lowest index.
pub fn greedy_decode(logits: &[f64], classes: usize) -> String {
    let chars: Vec<char> = CHARSET.chars().collect();
    let mut s = String::new();
    for row in logits.chunks(classes) {
        let k = argmax(row);
        if k == classes - 1 {
            break;
        }
        if let Some(&ch) = chars.get(k) {
            s.push(ch);
        }
    }
    s
}

/// Greedy transcriptions of each aligned input.
pub fn recognize(tape: &mut Tape, p: &ParameterSet, aligned: Var, steps: usize) -> Result<Vec<String>> {
    let n = tape.shape(aligned)[0];
    let out = recognition_forward(tape, p, aligned, Feed::Greedy(steps))?;
    let k = num_classes();
    Ok((0..n)
        .map(|i| {
            let seq: Vec<f64> = out
                .logits
                .iter()
                .flat_map(|&l| tape.value(l)[i * k..(i + 1) * k].to_vec())
                .collect();
            greedy_decode(&seq, k)
        })
        .collect())
}
