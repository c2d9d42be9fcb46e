//! Central finite-difference verification of tape gradients.

use rand::Rng as _;

use super::params::ParameterSet;
use super::tape::{OpKind, Tape, Var, ALL_KINDS};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are exactly
/// zero compare on an absolute scale instead of dividing by zero.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst relative error between tape gradients and central differences of
/// the scalar returned by `f`, over every element of every input.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.scalar(l))
    };
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i][j], numeric));
        }
    }
    Ok(worst)
}

/// Like [`check`] for a network: differentiates the scalar `f` with respect
/// to the parameters whose name satisfies `select`, comparing up to
/// `per_tensor` randomly chosen entries of each.
pub fn check_params<F>(
    params: &ParameterSet,
    select: impl Fn(&str) -> bool,
    per_tensor: usize,
    seed: u64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    let mut work = params.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    tape.backward(loss)?;
    tape.accumulate_param_grads(&mut work)?;
    let names: Vec<String> = work.names().filter(|n| select(n)).map(String::from).collect();
    let mut r = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    for name in names {
        let n = work.get(&name).unwrap().numel();
        let analytic = work
            .get(&name)
            .unwrap()
            .grad()
            .map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| r.gen_range(0..n)).collect()
        };
        for j in picks {
            let x0 = work.get(&name).unwrap().data()[j];
            let mut eval = |x: f64| -> Result<f64> {
                work.get_mut(&name).unwrap().data_mut()[j] = x;
                let mut t = Tape::new();
                let l = f(&mut t, &work)?;
                Ok(t.scalar(l))
            };
            let up = eval(x0 + FD_STEP)?;
            let down = eval(x0 - FD_STEP)?;
            eval(x0)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}

/// Uniform values in `[lo, hi]`, kept at least `gap` away from zero (used
/// for inputs of ops with a kink at the origin).
pub fn random_tensor(rng: &mut rng::Rng, shape: Vec<usize>, lo: f64, hi: f64, gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..=hi);
            if v.abs() >= gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("finite random data")
}

/// Reduces `v` to a scalar with fixed random weights so that every output
/// element contributes a distinct amount.
pub fn probe(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let mut r = rng::seeded(seed);
    let w = random_tensor(&mut r, shape, -1.0, 1.0, 0.0);
    let wv = tape.leaf(w);
    let m = tape.mul(v, wv)?;
    Ok(tape.sum(m))
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub worst_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < GRAD_TOLERANCE
    }
}

/// Every differentiable op kind, each checked once on random inputs in
/// `[-2, 2]` (or the op's domain where narrower).
pub fn registered_ops() -> Vec<OpKind> {
    ALL_KINDS.iter().copied().filter(|k| *k != OpKind::Leaf).collect()
}

pub fn check_op(kind: OpKind, seed: u64) -> Result<f64> {
    let mut r = rng::substream(seed, kind.name());
    let rt = |r: &mut rng::Rng, shape: Vec<usize>| random_tensor(r, shape, -2.0, 2.0, 0.0);
    let kinked = |r: &mut rng::Rng, shape: Vec<usize>| random_tensor(r, shape, -2.0, 2.0, 1e-3);
    match kind {
        OpKind::Leaf => Ok(0.0),
        OpKind::Conv2d => {
            let ins = [
                rt(&mut r, vec![2, 3, 5, 7]),
                rt(&mut r, vec![4, 3, 3, 3]),
                rt(&mut r, vec![4]),
            ];
            let a = check(&ins, |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                probe(t, y, 1)
            })?;
            let b = check(&ins, |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                probe(t, y, 2)
            })?;
            Ok(a.max(b))
        }
        OpKind::Linear => {
            let ins = [rt(&mut r, vec![3, 5]), rt(&mut r, vec![4, 5]), rt(&mut r, vec![4])];
            check(&ins, |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                probe(t, y, 3)
            })
        }
        OpKind::MatMul => {
            let ins = [rt(&mut r, vec![3, 4]), rt(&mut r, vec![4, 2])];
            check(&ins, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y, 4)
            })
        }
        OpKind::Relu | OpKind::Abs => {
            let ins = [kinked(&mut r, vec![3, 4])];
            check(&ins, |t, v| {
                let y = if kind == OpKind::Relu {
                    t.relu(v[0])
                } else {
                    t.abs(v[0])
                };
                probe(t, y, 5)
            })
        }
        OpKind::Sigmoid
        | OpKind::Tanh
        | OpKind::Square
        | OpKind::Affine
        | OpKind::Sum
        | OpKind::Mean
        | OpKind::SoftmaxRows => {
            let ins = [rt(&mut r, vec![3, 4])];
            check(&ins, |t, v| {
                let y = match kind {
                    OpKind::Sigmoid => t.sigmoid(v[0]),
                    OpKind::Tanh => t.tanh(v[0]),
                    OpKind::Square => t.square(v[0]),
                    OpKind::Affine => t.affine(v[0], -1.7, 0.3),
                    OpKind::Sum => t.sum(v[0]),
                    OpKind::Mean => t.mean(v[0]),
                    _ => t.softmax_rows(v[0]),
                };
                probe(t, y, 6)
            })
        }
        OpKind::MeanPoolHeight => {
            let ins = [rt(&mut r, vec![2, 3, 4, 5])];
            check(&ins, |t, v| {
                let y = t.mean_pool_height(v[0])?;
                probe(t, y, 7)
            })
        }
        OpKind::BilinearSample => {
            let map = rt(&mut r, vec![2, 4, 5]);
            // Keep fractional parts away from the lattice, where the
            // interpolant has kinks.
            let pts: Vec<f64> = (0..12)
                .map(|i| {
                    let hi = if i % 2 == 0 { 5.0 } else { 4.0 };
                    let base = r.gen_range(-1..hi as i32) as f64;
                    base + r.gen_range(0.05..0.95)
                })
                .collect();
            let grid = Tensor::new(vec![6, 2], pts).unwrap();
            check(&[map, grid], |t, v| {
                let y = t.bilinear_sample(v[0], v[1])?;
                probe(t, y, 8)
            })
        }
        OpKind::SoftmaxCrossEntropy => {
            let targets: Vec<usize> = (0..3).map(|_| r.gen_range(0..5)).collect();
            let ins = [rt(&mut r, vec![3, 5])];
            check(&ins, |t, v| t.softmax_cross_entropy(v[0], &targets))
        }
        OpKind::BinaryCrossEntropy => {
            let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
            let ins = [random_tensor(&mut r, vec![6], 0.05, 0.95, 0.0)];
            check(&ins, |t, v| t.binary_cross_entropy(v[0], &labels))
        }
        OpKind::BinaryCrossEntropyLogits => {
            let labels: Vec<f64> = (0..6).map(|i| (i % 3) as f64 / 2.0).collect();
            let ins = [random_tensor(&mut r, vec![6], -4.0, 4.0, 0.0)];
            check(&ins, |t, v| t.binary_cross_entropy_logits(v[0], &labels))
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let ins = [rt(&mut r, vec![2, 3]), rt(&mut r, vec![2, 3])];
            check(&ins, |t, v| {
                let y = match kind {
                    OpKind::Add => t.add(v[0], v[1])?,
                    OpKind::Sub => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                probe(t, y, 9)
            })
        }
        OpKind::AddRow => {
            let ins = [rt(&mut r, vec![3, 4]), rt(&mut r, vec![4])];
            check(&ins, |t, v| {
                let y = t.add_row(v[0], v[1])?;
                probe(t, y, 10)
            })
        }
        OpKind::Reshape => {
            let ins = [rt(&mut r, vec![2, 6])];
            check(&ins, |t, v| {
                let y = t.reshape(v[0], vec![3, 4])?;
                probe(t, y, 11)
            })
        }
        OpKind::Concat => {
            let ins = [rt(&mut r, vec![2, 3, 2]), rt(&mut r, vec![2, 1, 2])];
            check(&ins, |t, v| {
                let y = t.concat(&[v[0], v[1], v[0]], 1)?;
                probe(t, y, 12)
            })
        }
        OpKind::Slice => {
            let ins = [rt(&mut r, vec![3, 5, 2])];
            check(&ins, |t, v| {
                let y = t.slice(v[0], 1, 1, 3)?;
                probe(t, y, 13)
            })
        }
        OpKind::Gather => {
            let ins = [rt(&mut r, vec![8])];
            check(&ins, |t, v| {
                let y = t.gather(v[0], &[0, 3, 3, 7])?;
                probe(t, y, 14)
            })
        }
    }
}

/// The composite graph conv -> relu -> linear -> sigmoid -> BCE, with every
/// parameter differentiated.
pub fn check_composite(seed: u64) -> Result<f64> {
    let mut r = rng::substream(seed, "composite");
    let ins = [
        random_tensor(&mut r, vec![2, 2, 4, 4], -2.0, 2.0, 0.0),
        random_tensor(&mut r, vec![3, 2, 3, 3], -0.5, 0.5, 0.0),
        random_tensor(&mut r, vec![3], -0.5, 0.5, 0.0),
        random_tensor(&mut r, vec![1, 48], -0.3, 0.3, 0.0),
        random_tensor(&mut r, vec![1], -0.1, 0.1, 0.0),
    ];
    check(&ins, |t, v| {
        let c = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let a = t.relu(c);
        let flat = t.reshape(a, vec![2, 48])?;
        let z = t.linear(flat, v[3], Some(v[4]))?;
        let p = t.sigmoid(z);
        t.binary_cross_entropy(p, &[1.0, 0.0])
    })
}

/// Runs every registered op once and reports the worst error per op.
pub fn run_suite(seed: u64) -> Result<Vec<OpReport>> {
    registered_ops()
        .into_iter()
        .map(|k| {
            Ok(OpReport {
                op: k.name(),
                worst_rel_err: check_op(k, seed)?,
            })
        })
        .collect()
}
