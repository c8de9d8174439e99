use serde::{Deserialize, Serialize};

use super::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Zero,
    /// Wrap around the image borders. Makes the operator exactly equivariant
    /// to circular shifts.
    Circular,
}

/// Stride and padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub mode: PaddingMode,
}

impl Conv2dSpec {
    /// Stride 1 with `(k - 1) / 2` padding, so output and input sizes agree.
    pub fn same(kh: usize, kw: usize, mode: PaddingMode) -> Self {
        Conv2dSpec {
            stride: 1,
            pad_h: (kh.saturating_sub(1)) / 2,
            pad_w: (kw.saturating_sub(1)) / 2,
            mode,
        }
    }
}

/// Resolved sizes for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], spec: Conv2dSpec) -> Result<Self> {
        if input.len() != 3 || weight.len() != 4 || input[0] != weight[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: weight.to_vec(),
            });
        }
        let (c_in, h, w) = (input[0], input[1], input[2]);
        let (c_out, kh, kw) = (weight[0], weight[2], weight[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Invalid(format!(
                "conv2d: kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if spec.stride == 0 {
            return Err(TensorError::Invalid("conv2d: stride must be positive".into()));
        }
        let (ph, pw) = (h + 2 * spec.pad_h, w + 2 * spec.pad_w);
        if kh > ph || kw > pw {
            return Err(TensorError::KernelTooLarge { kh, kw, ph, pw });
        }
        if spec.mode == PaddingMode::Circular && (spec.pad_h > h || spec.pad_w > w) {
            return Err(TensorError::Invalid(
                "conv2d: circular padding wider than the input".into(),
            ));
        }
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            out_h: (ph - kh) / spec.stride + 1,
            out_w: (pw - kw) / spec.stride + 1,
            spec,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input offset read by output position `pos` at kernel tap `(ky, kx)`,
    /// or `None` when the tap falls on zero padding.
    #[inline]
    fn source(&self, pos: usize, ky: usize, kx: usize) -> Option<usize> {
        let oy = pos / self.out_w;
        let ox = pos % self.out_w;
        let iy = (oy * self.spec.stride + ky) as isize - self.spec.pad_h as isize;
        let ix = (ox * self.spec.stride + kx) as isize - self.spec.pad_w as isize;
        match self.spec.mode {
            PaddingMode::Zero => {
                if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                    None
                } else {
                    Some(iy as usize * self.w + ix as usize)
                }
            }
            PaddingMode::Circular => {
                let iy = iy.rem_euclid(self.h as isize) as usize;
                let ix = ix.rem_euclid(self.w as isize) as usize;
                Some(iy * self.w + ix)
            }
        }
    }

    /// Unfold `input` into a `[c_in*kh*kw, positions.len()]` matrix.
    pub fn im2col(&self, input: &[f64], positions: &[usize]) -> Vec<f64> {
        let n = positions.len();
        let plane = self.h * self.w;
        let mut cols = vec![0.0; self.patch_len() * n];
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                let src: Vec<Option<usize>> =
                    positions.iter().map(|&p| self.source(p, ky, kx)).collect();
                for c in 0..self.c_in {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let chan = &input[c * plane..(c + 1) * plane];
                    for (d, s) in dst.iter_mut().zip(&src) {
                        if let Some(s) = s {
                            *d = chan[*s];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add columns into `grad_input`.
    pub fn col2im(&self, cols: &[f64], positions: &[usize], grad_input: &mut [f64]) {
        let n = positions.len();
        let plane = self.h * self.w;
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                let src: Vec<Option<usize>> =
                    positions.iter().map(|&p| self.source(p, ky, kx)).collect();
                for c in 0..self.c_in {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let col = &cols[row * n..(row + 1) * n];
                    let chan = &mut grad_input[c * plane..(c + 1) * plane];
                    for (v, s) in col.iter().zip(&src) {
                        if let Some(s) = s {
                            chan[*s] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output positions whose values feed the given `positions` of a stride-1
/// convolution with a `kh x kw` kernel on an `h x w` grid. The result is
/// sorted and deduplicated.
pub fn dilate_positions(
    positions: &[usize],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    mode: PaddingMode,
) -> Vec<usize> {
    let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut mask = vec![false; h * w];
    for &p in positions {
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        for dy in -rh..=rh {
            for dx in -rw..=rw {
                let (ny, nx) = (y + dy, x + dx);
                let idx = match mode {
                    PaddingMode::Zero => {
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        ny as usize * w + nx as usize
                    }
                    PaddingMode::Circular => {
                        ny.rem_euclid(h as isize) as usize * w + nx.rem_euclid(w as isize) as usize
                    }
                };
                mask[idx] = true;
            }
        }
    }
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Row-major matrix operand for [`gemm`]; `transposed` means the buffer holds
/// the transpose of the logical operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn plain(data: &'a [f64]) -> Self {
        MatRef {
            data,
            transposed: false,
        }
    }

    pub fn t(data: &'a [f64]) -> Self {
        MatRef {
            data,
            transposed: true,
        }
    }

    fn strides(&self, rows: usize, cols: usize) -> (isize, isize) {
        if self.transposed {
            (1, rows as isize)
        } else {
            (cols as isize, 1)
        }
    }
}

/// `c = a * b (+ c if accumulate)` with `a: m x k`, `b: k x n`, `c: m x n`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.data.len(), m * k, "gemm: lhs length");
    assert_eq!(b.data.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides(m, k);
    let (rsb, csb) = b.strides(k, n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every index reachable through the
    // given dimensions and strides lies inside the three slices, and `c` is a
    // unique borrow that cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
