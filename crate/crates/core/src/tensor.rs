//! Dense row-major tensors and their on-disk format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{shape_err, Result, TensorError};
use crate::scalar::Scalar;

/// Leading bytes of every serialized tensor file.
pub const TENSOR_MAGIC: [u8; 8] = *b"SOBATNSR";

/// Dense n-dimensional array in row-major order.
///
/// `grad`, when present, always has the same length as `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err("new", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect()).expect("valid shape")
    }

    /// Marks this tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::Dimension {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    #[allow(clippy::eq_op)]
    pub fn is_finite(&self) -> bool {
        // x − x is zero for finite x and NaN otherwise; eight lanes keep the loop vectorizable.
        let mut acc = [T::zero(); 8];
        let chunks = self.data.chunks_exact(8);
        let tail = chunks.remainder();
        for c in chunks {
            for (a, &x) in acc.iter_mut().zip(c) {
                *a = *a + (x - x);
            }
        }
        acc.iter().all(|a| *a == T::zero()) && tail.iter().all(|x| x.is_finite())
    }

    /// Nearest-neighbour resize of the trailing two axes.
    ///
    /// Output pixel `(i, j)` reads input `(floor(i*H_in/H_out), floor(j*W_in/W_out))`.
    /// Only defined for mask-like tensors that carry no gradient.
    pub fn nearest_resize(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if self.requires_grad {
            return Err(TensorError::Usage(
                "nearest_resize is not differentiable; input must not require grad".into(),
            ));
        }
        if self.rank() < 2 || out_h == 0 || out_w == 0 {
            return Err(shape_err(
                "nearest_resize",
                format!("rank >= 2 and positive output size required, got {:?}", self.shape),
            ));
        }
        let r = self.rank();
        let (in_h, in_w) = (self.shape[r - 2], self.shape[r - 1]);
        let lead: usize = self.shape[..r - 2].iter().product();
        let mut out = Vec::with_capacity(lead * out_h * out_w);
        for l in 0..lead {
            let base = l * in_h * in_w;
            for i in 0..out_h {
                let si = i * in_h / out_h;
                for j in 0..out_w {
                    let sj = j * in_w / out_w;
                    out.push(self.data[base + si * in_w + sj]);
                }
            }
        }
        let mut shape = self.shape[..r - 2].to_vec();
        shape.extend([out_h, out_w]);
        Self::new(shape, out)
    }

    /// Writes the tensor: magic, u32 rank, u32 extents, little-endian f64 payload.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| TensorError::Format("extent exceeds u32".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != TENSOR_MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank == 0 || rank > 16 {
            return Err(TensorError::Format(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 8];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(TensorError::Format("trailing bytes after payload".into()));
        }
        Self::new(shape, data).map_err(|e| TensorError::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, k as isize, 1, b, n as isize, 1, out, n as isize);
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, k as isize, 1, b, 1, k as isize, out, n as isize);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(k, m, n, a, 1, k as isize, b, n as isize, 1, out, n as isize);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn nearest_resize_tiles_each_value() {
        let m = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = m.nearest_resize(4, 4).unwrap();
        assert_eq!(
            r.data(),
            &[
                1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0
            ]
        );
    }

    #[test]
    fn nearest_resize_downsamples_with_floor_rule() {
        let m = Tensor::<f64>::from_fn(&[4, 4], |i| i as f64);
        let r = m.nearest_resize(2, 2).unwrap();
        assert_eq!(r.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn nearest_resize_refuses_grad_tensors() {
        let m = Tensor::<f64>::zeros(&[2, 2]).with_grad();
        assert!(matches!(m.nearest_resize(4, 4), Err(TensorError::Usage(_))));
    }

    #[test]
    fn binary_layout_is_magic_rank_extents_payload() {
        let t = Tensor::<f64>::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"SOBATNSR");
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &2u32.to_le_bytes());
        assert_eq!(&buf[20..28], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 36);
        let back = Tensor::<f64>::read_from(&buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn corrupt_file_is_rejected() {
        let t = Tensor::<f64>::zeros(&[3]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(Tensor::<f64>::read_from(&buf[..]).is_err());
        let mut short = Vec::new();
        t.write_to(&mut short).unwrap();
        short.pop();
        assert!(Tensor::<f64>::read_from(&short[..]).is_err());
    }

    #[test]
    fn f32_tensors_serialize_through_f64_payload() {
        let t = Tensor::<f32>::new(vec![2], vec![0.25, 3.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor::<f64>::read_from(&buf[..]).unwrap();
        assert_eq!(back.data(), &[0.25, 3.0]);
    }
}
