//! Dense row-major tensors and the handful of kernels the network needs.

use std::cell::RefCell;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};
use std::thread::LocalKey;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type usable by the autodiff engine.
///
/// Implemented for `f32` (training) and `f64` (finite-difference checks).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + AddAssign + MulAssign + Send + Sync + 'static
{
    /// `c (+)= op(a) · op(b)` for row-major `a` (m×k) and `b` (k×n).
    ///
    /// With `a_t` set, `a` is stored as k×m; with `b_t` set, `b` is stored as n×k.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    /// Per-thread pool of reusable buffers for [`with_scratch`].
    fn scratch_pool() -> &'static LocalKey<RefCell<Vec<Vec<Self>>>>;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn gemm_strides(m: usize, k: usize, n: usize, a_t: bool, b_t: bool) -> (isize, isize, isize, isize) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    (rsa, csa, rsb, csb)
}

/// Run `f` on a reused buffer of `len` elements with unspecified contents.
pub fn with_scratch<T: Scalar, R>(len: usize, f: impl FnOnce(&mut [T]) -> R) -> R {
    let mut buf = T::scratch_pool().with(|p| p.borrow_mut().pop()).unwrap_or_default();
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
    let out = f(&mut buf[..len]);
    T::scratch_pool().with(|p| p.borrow_mut().push(buf));
    out
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn scratch_pool() -> &'static LocalKey<RefCell<Vec<Vec<Self>>>> {
                thread_local! {
                    static POOL: RefCell<Vec<Vec<$t>>> = const { RefCell::new(Vec::new()) };
                }
                &POOL
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                let (rsa, csa, rsb, csb) = gemm_strides(m, k, n, a_t, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds were checked above and the strides describe
                // exactly the row-major layouts of the three slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Panics if `data.len()` disagrees with the shape.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(len, data.len(), "shape {shape:?} needs {len} values, got {}", data.len());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(len, self.data.len(), "cannot reshape {:?} to {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    /// `[n, c, h, w]`; panics unless the tensor is 4-D.
    pub fn dims4(&self) -> [usize; 4] {
        match self.shape[..] {
            [n, c, h, w] => [n, c, h, w],
            _ => panic!("expected a 4-D tensor, got {:?}", self.shape),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Sub-tensor `index` along the leading axis.
    pub fn index0(&self, index: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Self {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.shape, inner, "stack: shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor { shape, data }
    }
}

/// Geometry of a 2-D sliding window over a `[channels, height, width]` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window2d {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window2d {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Output columns `oj` whose input column `oj·stride + kj − pad` lies
    /// inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let ow = self.out_width();
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        let hi = if self.width + self.pad > kj {
            (self.width + self.pad - kj).div_ceil(self.stride)
        } else {
            0
        };
        (lo.min(ow), hi.min(ow).max(lo.min(ow)))
    }

    /// Unfold `image` into `cols` (`col_rows × col_cols`).
    pub fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let plane = oh * ow;
        let s = self.stride;
        for c in 0..self.channels {
            let src = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(kj);
                    for oi in 0..oh {
                        let y = (oi * s + ki) as isize - self.pad as isize;
                        let line = &mut dst[oi * ow..(oi + 1) * ow];
                        if y < 0 || y >= self.height as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[y as usize * self.width..(y as usize + 1) * self.width];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo < hi {
                            let x0 = lo * s + kj - self.pad;
                            if s == 1 {
                                line[lo..hi].copy_from_slice(&src_row[x0..x0 + hi - lo]);
                            } else {
                                for (i, v) in line[lo..hi].iter_mut().enumerate() {
                                    *v = src_row[x0 + i * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window2d::im2col`]: accumulate `cols` back into `image`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let plane = oh * ow;
        let s = self.stride;
        for c in 0..self.channels {
            let dst = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(kj);
                    if lo >= hi {
                        continue;
                    }
                    let x0 = lo * s + kj - self.pad;
                    for oi in 0..oh {
                        let y = (oi * s + ki) as isize - self.pad as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[y as usize * self.width..(y as usize + 1) * self.width];
                        let line = &src[oi * ow + lo..oi * ow + hi];
                        if s == 1 {
                            for (d, &v) in dst_row[x0..x0 + hi - lo].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (i, &v) in line.iter().enumerate() {
                                dst_row[x0 + i * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product_for_all_transpose_flags() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                expect[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
            }
        }
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        for (lhs, lt) in [(&a, false), (&at, true)] {
            for (rhs, rt) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                f64::gemm(m, k, n, lhs, lt, rhs, rt, &mut c, false);
                for (x, y) in c.iter().zip(&expect) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (height, width, kernel, stride, pad) in [(5, 4, 4, 2, 1), (7, 7, 3, 1, 1), (4, 6, 11, 1, 5), (9, 5, 4, 2, 3), (3, 3, 1, 1, 0)] {
            let w = Window2d { channels: 2, height, width, kernel, stride, pad };
            let x: Vec<f64> = (0..2 * height * width).map(|i| i as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; w.col_rows() * w.col_cols()];
            w.im2col(&x, &mut cols);
            let (oh, ow) = (w.out_height(), w.out_width());
            for c in 0..2 {
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let y = (oi * stride + ki) as isize - pad as isize;
                                let xx = (oj * stride + kj) as isize - pad as isize;
                                let inside = y >= 0 && xx >= 0 && (y as usize) < height && (xx as usize) < width;
                                let expect = if inside { x[(c * height + y as usize) * width + xx as usize] } else { 0.0 };
                                let row = (c * kernel + ki) * kernel + kj;
                                assert_eq!(cols[row * oh * ow + oi * ow + oj], expect);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let w = Window2d {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..w.col_rows() * w.col_cols()).map(|i| (i as f64 * 0.11).sin()).collect();
        let mut cols = vec![0.0; y.len()];
        w.im2col(&x, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        w.col2im(&y, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn same_padding_preserves_size() {
        for k in [3usize, 5, 7, 11] {
            let w = Window2d {
                channels: 1,
                height: 9,
                width: 7,
                kernel: k,
                stride: 1,
                pad: k / 2,
            };
            assert_eq!((w.out_height(), w.out_width()), (9, 7));
        }
    }
}
