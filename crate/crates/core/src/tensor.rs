//! Dense row-major tensors and the named-tensor checkpoint format.
//!
//! `Tensor<T>` is the universal value type: a shape plus a flat row-major
//! buffer, an optional gradient buffer, and a `requires_grad` flag that the
//! tape consults when the tensor is registered as a leaf. Training runs in
//! f32; gradient-check tests instantiate the same code with f64.

use crate::error::{Error, Result};
use std::fmt::{Debug, Display};
use std::io::{Read, Write};

/// Element type for all numeric code: f32 for training, f64 for
/// finite-difference verification.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lit(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }
    fn to_f64_lit(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense multi-dimensional array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor, validating the shape/data length contract and
    /// rejecting non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim(format!("zero-sized dimension in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} implies {n} elements but data has {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value at tensor boundary".into()));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n], requires_grad: false, grad: None }
    }

    /// Construct without validation; for op outputs whose invariants the
    /// tape maintains itself.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Add `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += *src;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Convert elementwise to another scalar type (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lit(v.to_f64_lit())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Named-tensor checkpoint format
//
// Layout (all integers little-endian u32):
//   magic "PUDN" | version | count
//   per tensor: name_len | name bytes (UTF-8) | rank | dims[rank] | f32 payload
// ---------------------------------------------------------------------------

pub const CKPT_MAGIC: &[u8; 4] = b"PUDN";
pub const CKPT_VERSION: u32 = 1;

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::Format("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_f32_slice<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_f32_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| Error::Format("truncated f32 payload".into()))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("unreasonable string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| Error::Format("truncated string".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 in name".into()))
}

/// Write named f32 tensors to a checkpoint stream. Order is preserved.
pub fn write_named_tensors<W: Write, T: Scalar>(
    w: &mut W,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    w.write_all(CKPT_MAGIC)?;
    write_u32(w, CKPT_VERSION)?;
    write_u32(w, tensors.len() as u32)?;
    for (name, t) in tensors {
        write_string(w, name)?;
        write_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            write_u32(w, d as u32)?;
        }
        let payload: Vec<f32> = t.data().iter().map(|v| v.to_f64_lit() as f32).collect();
        write_f32_slice(w, &payload)?;
    }
    Ok(())
}

/// Read all named tensors from a checkpoint stream, preserving order.
pub fn read_named_tensors<R: Read, T: Scalar>(r: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("file too short for magic".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"PUDN\"")));
    }
    let version = read_u32(r)?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_string(r)?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("unreasonable tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = read_f32_vec(r, n)?;
        let data: Vec<T> = payload.iter().map(|&v| T::from_f64_lit(v as f64)).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_named_tensors<T: Scalar>(
    path: &std::path::Path,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_named_tensors(&mut f, tensors)
}

pub fn load_named_tensors<T: Scalar>(path: &std::path::Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_named_tensors(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::<f32>::new(vec![2], vec![1.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let a = Tensor::<f32>::new(vec![2, 3], vec![1.5, -2.25, 0.0, 3.75, 1e-20, 7.0]).unwrap();
        let b = Tensor::<f32>::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut buf = Vec::new();
        write_named_tensors(&mut buf, &[("a/w".to_string(), &a), ("b".to_string(), &b)]).unwrap();
        let back: Vec<(String, Tensor<f32>)> = read_named_tensors(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a/w");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        // bit-exact
        for (x, y) in back[0].1.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back[1].1.data(), b.data());
    }

    #[test]
    fn truncated_checkpoint_is_format_error() {
        let a = Tensor::<f32>::new(vec![8], vec![1.0; 8]).unwrap();
        let mut buf = Vec::new();
        write_named_tensors(&mut buf, &[("a".to_string(), &a)]).unwrap();
        buf.truncate(buf.len() - 7);
        let r: Result<Vec<(String, Tensor<f32>)>> = read_named_tensors(&mut buf.as_slice());
        assert!(matches!(r, Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let buf = b"XXXX\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        let r: Result<Vec<(String, Tensor<f32>)>> = read_named_tensors(&mut buf.as_slice());
        assert!(matches!(r, Err(Error::Format(_))));
    }
}
