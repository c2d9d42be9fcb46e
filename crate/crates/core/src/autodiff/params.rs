use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"A3S1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        self.tensors.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// FNV-1a over names, shapes and the raw bits of every value. Used to
    /// assert that a parameter group was left untouched.
    pub fn checksum(&self) -> u64 {
        self.checksum_where(|_| true)
    }

    pub fn checksum_where(&self, select: impl Fn(&str) -> bool) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in self.iter().filter(|(n, _)| select(n)) {
            bytes.extend_from_slice(name.as_bytes());
            for &d in t.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        crate::rng::fnv1a(&bytes)
    }

    /// Writes the binary checkpoint format: `A3S1`, version, count, then per
    /// parameter its name, rank, dims and little-endian `f64` data.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        fn u32_of<R: Read>(r: &mut R) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|e| Error::Load(format!("truncated checkpoint: {e}")))?;
            Ok(u32::from_le_bytes(b))
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Load(format!("truncated checkpoint: {e}")))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Load(format!("bad magic {magic:?}")));
        }
        let version = u32_of(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Load(format!("unsupported version {version}")));
        }
        let count = u32_of(&mut r)?;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let len = u32_of(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)
                .map_err(|e| Error::Load(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|e| Error::Load(format!("parameter name not UTF-8: {e}")))?;
            let rank = u32_of(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| u32_of(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)
                .map_err(|e| Error::Load(format!("truncated data for {name}: {e}")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Load(format!("{name}: {e}")))?;
            set.insert(name, t).map_err(|e| Error::Load(e.to_string()))?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }

    /// Replaces values with those of `other`, which must carry exactly the
    /// same names and shapes. All mismatches are listed in the error.
    pub fn load_values_from(&mut self, other: &ParameterSet) -> Result<()> {
        let mut problems = Vec::new();
        for (name, t) in &self.tensors {
            match other.get(name) {
                None => problems.push(format!("missing {name}")),
                Some(o) if o.shape() != t.shape() => {
                    problems.push(format!("{name}: shape {:?} vs expected {:?}", o.shape(), t.shape()))
                }
                Some(_) => {}
            }
        }
        for name in other.names() {
            if !self.tensors.contains_key(name) {
                problems.push(format!("unexpected {name}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Load(problems.join("; ")));
        }
        for (name, t) in self.tensors.iter_mut() {
            t.data_mut().copy_from_slice(other.get(name).unwrap().data());
            t.zero_grad();
        }
        Ok(())
    }
}

/// Plain SGD over every parameter: `p <- p - lr * grad`, then grads cleared.
pub fn sgd_step(params: &mut ParameterSet, lr: f64) -> Result<()> {
    sgd_step_where(params, lr, |_| true)
}

/// SGD restricted to parameters whose name passes `select`. Every selected
/// parameter must hold a gradient; unselected ones are left alone, gradient
/// included.
pub fn sgd_step_where(params: &mut ParameterSet, lr: f64, select: impl Fn(&str) -> bool) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(n, t)| select(n) && t.grad().is_none()) {
        return Err(Error::Usage(format!("parameter {name:?} has no gradient")));
    }
    for (name, t) in params.iter_mut() {
        if !select(name) {
            continue;
        }
        let g = t.grad().unwrap().to_vec();
        t.data_mut().iter_mut().zip(&g).for_each(|(p, g)| *p -= lr * g);
        t.zero_grad();
    }
    Ok(())
}

/// Rescales the gradients of the selected parameters so that their joint
/// L2 norm is at most `max_norm`, returning the norm before rescaling.
/// `max_norm <= 0` only measures.
pub fn clip_grad_norm(params: &mut ParameterSet, max_norm: f64, select: impl Fn(&str) -> bool) -> f64 {
    let norm = params
        .iter()
        .filter(|(n, _)| select(n))
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (name, t) in params.iter_mut() {
            if select(name) {
                t.scale_grad(s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert(name, Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        p.insert("b", Tensor::scalar(0.0)).unwrap();
        p.insert("c", Tensor::scalar(0.0)).unwrap();
        p.get_mut("a").unwrap().accumulate_grad(&[3.0, 0.0]).unwrap();
        p.get_mut("b").unwrap().accumulate_grad(&[4.0]).unwrap();
        p.get_mut("c").unwrap().accumulate_grad(&[100.0]).unwrap();
        let sel = |n: &str| n != "c";
        assert_eq!(clip_grad_norm(&mut p, 10.0, sel), 5.0);
        assert_eq!(p.get("b").unwrap().grad().unwrap(), &[4.0]);
        assert_eq!(clip_grad_norm(&mut p, 1.0, sel), 5.0);
        assert!((p.get("a").unwrap().grad().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((p.get("b").unwrap().grad().unwrap()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.get("c").unwrap().grad().unwrap(), &[100.0]);
    }

    #[test]
    fn sgd_basic_update() {
        let mut p = one("w", 1.0);
        p.get_mut("w").unwrap().accumulate_grad(&[2.0]).unwrap();
        sgd_step(&mut p, 0.1).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.8).abs() < 1e-15);
        assert!(p.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut p = one("w", 1.2345);
        p.get_mut("w").unwrap().accumulate_grad(&[7.0]).unwrap();
        sgd_step(&mut p, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0].to_bits(), 1.2345f64.to_bits());
    }

    #[test]
    fn sgd_missing_grad_is_usage_error() {
        let mut p = one("w", 1.0);
        assert!(matches!(sgd_step(&mut p, 0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn sgd_quadratic_converges() {
        // (p-3)^2 with lr 0.1: error shrinks by 0.8 per step, 0.8^100 * 3 ~ 6e-10.
        let mut p = one("p", 0.0);
        for _ in 0..100 {
            let v = p.get("p").unwrap().data()[0];
            p.get_mut("p").unwrap().accumulate_grad(&[2.0 * (v - 3.0)]).unwrap();
            sgd_step(&mut p, 0.1).unwrap();
        }
        assert!((p.get("p").unwrap().data()[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = one("a", 0.0);
        assert!(p.insert("a", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn names_iterate_lexicographically() {
        let mut p = ParameterSet::new();
        for n in ["b.w", "a.w", "a.b", "c"] {
            p.insert(n, Tensor::scalar(0.0)).unwrap();
        }
        assert_eq!(p.names().collect::<Vec<_>>(), ["a.b", "a.w", "b.w", "c"]);
    }

    #[test]
    fn checkpoint_header_layout() {
        let p = one("w", 1.5);
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"A3S1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1);
        assert_eq!(&buf[16..17], b"w");
        // rank 1, dim 1, then the value
        assert_eq!(u32::from_le_bytes(buf[17..21].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[21..25].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(buf[25..33].try_into().unwrap()), 1.5);
        assert_eq!(buf.len(), 33);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        assert!(ParameterSet::read_checkpoint(&b"XXXX\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        one("w", 1.0).write_checkpoint(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(ParameterSet::read_checkpoint(&buf[..]), Err(Error::Load(_))));
    }

    #[test]
    fn load_values_lists_all_mismatches() {
        let mut a = ParameterSet::new();
        a.insert("x", Tensor::zeros(vec![2])).unwrap();
        a.insert("y", Tensor::zeros(vec![1])).unwrap();
        let mut b = ParameterSet::new();
        b.insert("x", Tensor::zeros(vec![3])).unwrap();
        b.insert("z", Tensor::zeros(vec![1])).unwrap();
        let msg = a.load_values_from(&b).unwrap_err().to_string();
        assert!(msg.contains("x: shape"), "{msg}");
        assert!(msg.contains("missing y"), "{msg}");
        assert!(msg.contains("unexpected z"), "{msg}");
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn checkpoint_round_trip_is_bit_exact(
                vals in proptest::collection::vec(-1e6f64..1e6, 1..40),
                split in 1usize..4,
            ) {
                let mut p = ParameterSet::new();
                for (i, chunk) in vals.chunks(split).enumerate() {
                    p.insert(format!("layer{i}.w"), Tensor::new(vec![chunk.len()], chunk.to_vec()).unwrap()).unwrap();
                }
                let mut buf = Vec::new();
                p.write_checkpoint(&mut buf).unwrap();
                let q = ParameterSet::read_checkpoint(&buf[..]).unwrap();
                prop_assert_eq!(p.checksum(), q.checksum());
                let mut again = Vec::new();
                q.write_checkpoint(&mut again).unwrap();
                prop_assert_eq!(buf, again);
            }
        }
    }
}
