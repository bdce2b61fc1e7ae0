//! Learnable parameters and named parameter collections.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// A named learnable tensor with an accumulated gradient slot.
///
/// Cloning is shallow: clones share the same storage, which is how a model
/// hands the same weights to the tape and to the optimizer.
#[derive(Clone)]
pub struct Parameter {
    inner: Rc<ParamInner>,
}

struct ParamInner {
    name: String,
    value: RefCell<Tensor>,
    grad: RefCell<Option<Tensor>>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            inner: Rc::new(ParamInner {
                name: name.into(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.inner.value.borrow()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.inner.value.borrow().numel()
    }

    pub fn set_value(&self, value: Tensor) {
        assert_eq!(
            value.shape(),
            self.inner.value.borrow().shape(),
            "parameter {} shape changed",
            self.name()
        );
        *self.inner.value.borrow_mut() = value;
    }

    /// Current gradient, zeros if backward never reached this parameter.
    pub fn grad(&self) -> Tensor {
        match &*self.inner.grad.borrow() {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.inner.value.borrow().shape()),
        }
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Add `delta` into the gradient slot (fan-out and multi-clip batching
    /// both accumulate additively).
    pub fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match &mut *slot {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => {
                let shape = self.inner.value.borrow().shape().to_vec();
                assert_eq!(delta.len(), shape.iter().product::<usize>());
                *slot = Some(Tensor::from_parts(shape, delta.to_vec()));
            }
        }
    }

    pub fn ptr_eq(&self, other: &Parameter) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl std::fmt::Debug for Parameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Parameter({} {:?})", self.name(), self.shape())
    }
}

/// Ordered collection of parameters with unique names.
#[derive(Default, Clone)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, p: Parameter) -> Parameter {
        assert!(
            self.get(p.name()).is_none(),
            "duplicate parameter name {}",
            p.name()
        );
        self.params.push(p.clone());
        p
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Parameter {
        self.register(Parameter::new(name, value))
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Write all parameters to a checkpoint file (magic "TAFW1", then per
    /// entry: u32 name length, name bytes, u32 rank, u64 extents, f64
    /// little-endian payload).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"TAFW1")?;
        f.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name().as_bytes();
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name)?;
            let v = p.value();
            f.write_all(&(v.rank() as u32).to_le_bytes())?;
            for &e in v.shape() {
                f.write_all(&(e as u64).to_le_bytes())?;
            }
            for &x in v.data() {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Load a checkpoint saved by [`ParamSet::save`] into matching parameters.
    /// Every parameter in the set must be present with an identical shape.
    pub fn load(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 5];
        f.read_exact(&mut magic)?;
        if &magic != b"TAFW1" {
            return Err(Error::Data(format!("{}: not a TAFW1 checkpoint", path.display())));
        }
        let count = read_u32(&mut f)? as usize;
        let mut table: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut f)? as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Data("checkpoint name is not UTF-8".into()))?;
            let rank = read_u32(&mut f)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut f)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                f.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            table.insert(name, Tensor::new(shape, data)?);
        }
        for p in &self.params {
            let t = table.remove(p.name()).ok_or_else(|| {
                Error::Data(format!("checkpoint is missing parameter {}", p.name()))
            })?;
            if t.shape() != p.shape() {
                return Err(Error::Data(format!(
                    "checkpoint shape {:?} for {} does not match model shape {:?}",
                    t.shape(),
                    p.name(),
                    p.shape()
                )));
            }
            p.set_value(t);
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_accumulates_additively() {
        let p = Parameter::new("w", Tensor::zeros(&[2]));
        p.accumulate_grad(&[1.0, 2.0]);
        p.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(p.grad().data(), &[1.5, 2.5]);
        p.zero_grad();
        assert_eq!(p.grad().data(), &[0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut set = ParamSet::new();
        set.add("w", Tensor::zeros(&[1]));
        set.add("w", Tensor::zeros(&[1]));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tafw");
        let mut set = ParamSet::new();
        let a = set.add("a", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap());
        let b = set.add("b", Tensor::from_vec(&[3], vec![9.0, 8.0, 7.0]).unwrap());
        set.save(&path).unwrap();

        a.set_value(Tensor::zeros(&[2, 2]));
        b.set_value(Tensor::zeros(&[3]));
        set.load(&path).unwrap();
        assert_eq!(a.value().data(), &[1.0, -2.0, 3.5, 0.25]);
        assert_eq!(b.value().data(), &[9.0, 8.0, 7.0]);
    }

    #[test]
    fn load_rejects_missing_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tafw");
        let mut saved = ParamSet::new();
        saved.add("only", Tensor::zeros(&[1]));
        saved.save(&path).unwrap();

        let mut other = ParamSet::new();
        other.add("only", Tensor::zeros(&[1]));
        other.add("extra", Tensor::zeros(&[1]));
        assert!(other.load(&path).is_err());
    }
}
