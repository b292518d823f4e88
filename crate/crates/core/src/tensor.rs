//! Dense `f32` tensors and the ordered named-tensor container that every
//! checkpoint, task vector and mask in this crate is stored in.

use std::collections::BTreeMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Row-major dense tensor of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("<unnamed>".into()));
        }
        Ok(Self { shape, data })
    }

    /// 1-d tensor from a slice.
    pub fn vector(data: &[f32]) -> Result<Self> {
        Self::new(vec![data.len()], data.to_vec())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(value.is_finite());
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Crate-internal mutable access; callers must keep values finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Build from raw parts, checking only finiteness of the produced values.
    pub(crate) fn from_computed(shape: &[usize], data: Vec<f32>, what: &str) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        ew(EwOp::Add, self, Rhs::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        ew(EwOp::Sub, self, Rhs::Tensor(other))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        ew(EwOp::Mul, self, Rhs::Tensor(other))
    }

    pub fn scale(&self, factor: f32) -> Result<Tensor> {
        ew(EwOp::Scale, self, Rhs::Scalar(factor))
    }

    pub fn abs(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.abs()).collect(),
        }
    }
}

/// Elementwise operation selector for [`ew`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwOp {
    Add,
    Sub,
    Mul,
    Scale,
    Abs,
    Sign,
    CompareGt,
}

/// Right-hand operand of an elementwise op. Unary ops ignore it.
#[derive(Debug, Clone, Copy)]
pub enum Rhs<'a> {
    Tensor(&'a Tensor),
    Scalar(f32),
}

impl<'a> From<&'a Tensor> for Rhs<'a> {
    fn from(t: &'a Tensor) -> Self {
        Rhs::Tensor(t)
    }
}

impl From<f32> for Rhs<'_> {
    fn from(v: f32) -> Self {
        Rhs::Scalar(v)
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Elementwise kernel. Binary tensor operands must have identical shapes;
/// `CompareGt` yields a 0/1 tensor.
pub fn ew<'a>(op: EwOp, a: &Tensor, b: impl Into<Rhs<'a>>) -> Result<Tensor> {
    let b = b.into();
    let f: fn(f32, f32) -> f32 = match op {
        EwOp::Add => |x, y| x + y,
        EwOp::Sub => |x, y| x - y,
        EwOp::Mul | EwOp::Scale => |x, y| x * y,
        EwOp::Abs => |x, _| x.abs(),
        EwOp::Sign => |x, _| sign(x),
        EwOp::CompareGt => |x, y| if x > y { 1.0 } else { 0.0 },
    };
    let data: Vec<f32> = match (op, b) {
        (EwOp::Abs | EwOp::Sign, _) => a.data.iter().map(|&x| f(x, 0.0)).collect(),
        (_, Rhs::Scalar(s)) => a.data.iter().map(|&x| f(x, s)).collect(),
        (_, Rhs::Tensor(t)) => {
            if a.shape != t.shape {
                return Err(Error::shape(&a.shape, &t.shape, format!("{op:?}")));
            }
            a.data.iter().zip(&t.data).map(|(&x, &y)| f(x, y)).collect()
        }
    };
    Tensor::from_computed(&a.shape, data, &format!("{op:?} result"))
}

/// Insertion-ordered collection of uniquely named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorMap {
    entries: IndexMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl NamedTensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor; names must be non-empty and unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || self.entries.contains_key(&name) {
            return Err(Error::BadName(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Replace an existing tensor in place, keeping its position.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(slot) => {
                if slot.shape != tensor.shape {
                    return Err(Error::shape(&slot.shape, &tensor.shape, name));
                }
                *slot = tensor;
                Ok(())
            }
            None => Err(Error::MissingTensor(name.to_string())),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar positions across all tensors.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.set_meta(key, value);
        self
    }

    /// Same tensors, no metadata.
    pub fn without_metadata(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            metadata: BTreeMap::new(),
        }
    }

    /// Apply `f` to every tensor, preserving names and order.
    pub fn try_map(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        let mut out = Self::new();
        for (name, t) in self.iter() {
            out.insert(name, f(name, t)?)?;
        }
        Ok(out)
    }

    /// Keep only entries whose name satisfies `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&str) -> bool) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    /// Bit-level equality of names, order, shapes and values (metadata ignored).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| {
                    na == nb
                        && a.shape == b.shape
                        && a.data
                            .iter()
                            .zip(&b.data)
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

impl<'a> IntoIterator for &'a NamedTensorMap {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = indexmap::map::Iter<'a, String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::vector(v).unwrap()
    }

    #[test]
    fn mul_and_abs() {
        assert_eq!(t(&[1.0, 2.0]).mul(&t(&[3.0, 4.0])).unwrap().data(), &[3.0, 8.0]);
        assert_eq!(
            ew(EwOp::Abs, &t(&[-1.5, 0.0]), 0.0).unwrap().data(),
            &[1.5, 0.0]
        );
    }

    #[test]
    fn compare_gt_is_binary() {
        let r = ew(EwOp::CompareGt, &t(&[1.0, 0.1]), &t(&[0.12, 0.54])).unwrap();
        assert_eq!(r.data(), &[1.0, 0.0]);
    }

    #[test]
    fn sign_of_zero_is_zero() {
        let r = ew(EwOp::Sign, &t(&[-3.0, 0.0, 2.0]), 0.0).unwrap();
        assert_eq!(r.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = t(&[1.0]).add(&t(&[1.0, 2.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn overflow_is_rejected() {
        let err = t(&[f32::MAX]).scale(4.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn constructor_validates() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f32::NAN]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn map_rejects_duplicates_and_keeps_order() {
        let mut m = NamedTensorMap::new();
        m.insert("b", t(&[1.0])).unwrap();
        m.insert("a", t(&[2.0])).unwrap();
        assert!(m.insert("a", t(&[3.0])).is_err());
        assert!(m.insert("", t(&[3.0])).is_err());
        assert_eq!(m.names().collect::<Vec<_>>(), ["b", "a"]);
    }

    #[test]
    fn inputs_are_untouched() {
        let a = t(&[1.0, 2.0]);
        let b = t(&[0.5, 0.5]);
        let _ = a.sub(&b).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0]);
        assert_eq!(b.data(), &[0.5, 0.5]);
    }
}
