use crate::autodiff::{ParameterSet, Tape, Var};
use crate::error::{Error, Result};

use super::{conv, fc};

/// `[n,c,h,w]` aligned features to `[n,d]` non-negative semantic vectors:
/// two 3x3 conv+relu, mean over height, flatten, two fc+relu.
pub fn word_embedding_forward(tape: &mut Tape, p: &ParameterSet, aligned: Var) -> Result<Var> {
    let n = match *tape.shape(aligned) {
        [n, _, _, _] => n,
        ref s => {
            return Err(Error::Dimension(format!(
                "word-embedding head expects [n,c,h,w], got {s:?}"
            )))
        }
    };
    let x = conv(tape, p, "emb.conv1", aligned, 1, 1)?;
    let x = tape.relu(x);
    let x = conv(tape, p, "emb.conv2", x, 1, 1)?;
    let x = tape.relu(x);
    let x = tape.mean_pool_height(x)?;
    let flat: usize = tape.shape(x)[1..].iter().product();
    let x = tape.reshape(x, vec![n, flat])?;
    let x = fc(tape, p, "emb.fc1", x)?;
    let x = tape.relu(x);
    let x = fc(tape, p, "emb.fc2", x)?;
    Ok(tape.relu(x))
}

/// `[n,d]` vectors to `[n]` probabilities of coming from the pre-trained
/// table.
pub fn discriminator_forward(tape: &mut Tape, p: &ParameterSet, v: Var) -> Result<Var> {
    let z = discriminator_logits(tape, p, v)?;
    Ok(tape.sigmoid(z))
}

/// The discriminator before its final sigmoid.
pub fn discriminator_logits(tape: &mut Tape, p: &ParameterSet, v: Var) -> Result<Var> {
    discriminator(tape, v, |tape, name, x| fc(tape, p, name, x))
}

/// [`discriminator_logits`] with the current weights copied in as
/// constants, so gradients reach `v` but not the discriminator parameters.
pub fn discriminator_logits_frozen(tape: &mut Tape, p: &ParameterSet, v: Var) -> Result<Var> {
    discriminator(tape, v, |tape, name, x| {
        let get = |tape: &mut Tape, key: String| -> Result<Var> {
            let t = p
                .get(&key)
                .ok_or_else(|| Error::Config(format!("missing parameter {key}")))?;
            tape.constant(t.shape().to_vec(), t.data().to_vec())
        };
        let w = get(tape, format!("{name}.w"))?;
        let b = get(tape, format!("{name}.b"))?;
        tape.linear(x, w, Some(b))
    })
}

fn discriminator(tape: &mut Tape, v: Var, mut layer: impl FnMut(&mut Tape, &str, Var) -> Result<Var>) -> Result<Var> {
    let n = match *tape.shape(v) {
        [n, _] => n,
        ref s => return Err(Error::Dimension(format!("discriminator expects [n,d], got {s:?}"))),
    };
    let x = layer(tape, "disc.fc1", v)?;
    let x = tape.relu(x);
    let x = layer(tape, "disc.fc2", x)?;
    let x = tape.relu(x);
    let x = layer(tape, "disc.fc3", x)?;
    tape.reshape(x, vec![n])
}
