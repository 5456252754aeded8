//! Forward and backward numeric kernels on raw row-major buffers.
//!
//! Every kernel visits its inputs in a fixed order, so repeated calls on the
//! same data are bit-identical.

/// `c = a · b + beta · c` for row-major-addressed operands with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    assert!(m * n <= c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every address dgemm touches for the
    // given dimensions and strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), 0.0, &mut out);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for ci in 0..g.cin {
        let plane = &image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for ci in 0..g.cin {
        let plane = &mut image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (k, p) = (g.patch(), g.out_h() * g.out_w());
    let in_stride = g.cin * g.h * g.w;
    let mut out = vec![0.0; g.batch * g.cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for b in 0..g.batch {
        let image = &input[b * in_stride..(b + 1) * in_stride];
        let rhs: &[f64] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        gemm(g.cout, k, p, kernel, (k, 1), rhs, (p, 1), 0.0, &mut out[b * g.cout * p..(b + 1) * g.cout * p]);
    }
    out
}

/// Returns `(grad_input, grad_kernel)`; each is computed only when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (k, p) = (g.patch(), g.out_h() * g.out_w());
    let in_stride = g.cin * g.h * g.w;
    let mut grad_input = want_input.then(|| vec![0.0; input.len()]);
    let mut grad_kernel = want_kernel.then(|| vec![0.0; kernel.len()]);
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { k * p }];
    let mut dcols = vec![0.0; if want_input && !g.is_pointwise() { k * p } else { 0 }];
    for b in 0..g.batch {
        let image = &input[b * in_stride..(b + 1) * in_stride];
        let dout = &grad_out[b * g.cout * p..(b + 1) * g.cout * p];
        if let Some(gk) = grad_kernel.as_mut() {
            let cols_t: &[f64] = if g.is_pointwise() {
                image
            } else {
                im2col(g, image, &mut cols);
                &cols
            };
            // dK[cout, k] += dOut[cout, p] · colsᵀ[p, k]
            gemm(g.cout, p, k, dout, (p, 1), cols_t, (1, p), 1.0, gk);
        }
        if let Some(gi) = grad_input.as_mut() {
            let dst = &mut gi[b * in_stride..(b + 1) * in_stride];
            if g.is_pointwise() {
                gemm(k, g.cout, p, kernel, (1, k), dout, (p, 1), 0.0, dst);
            } else {
                gemm(k, g.cout, p, kernel, (1, k), dout, (p, 1), 0.0, &mut dcols);
                col2im(g, &dcols, dst);
            }
        }
    }
    (grad_input, grad_kernel)
}

/// Sums `data` over `axes` (sorted, distinct). Returns the reduced shape and data.
pub(crate) fn reduce_sum(shape: &[usize], data: &[f64], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> =
        shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
    let map = OutputIndexMap::new(shape, axes);
    let mut out = vec![0.0; out_shape.iter().product()];
    map.for_each(|i, o| out[o] += data[i]);
    (out_shape, out)
}

/// Spreads a reduced gradient back over the input shape, multiplied by `factor`.
pub(crate) fn reduce_broadcast(shape: &[usize], axes: &[usize], grad: &[f64], factor: f64) -> Vec<f64> {
    let map = OutputIndexMap::new(shape, axes);
    let mut out = vec![0.0; shape.iter().product()];
    map.for_each(|i, o| out[i] = grad[o] * factor);
    out
}

/// Maps every flat input index to its flat index in the reduced output.
struct OutputIndexMap {
    shape: Vec<usize>,
    out_strides: Vec<usize>,
}

impl OutputIndexMap {
    fn new(shape: &[usize], axes: &[usize]) -> Self {
        let mut out_strides = vec![0; shape.len()];
        let mut acc = 1;
        for d in (0..shape.len()).rev() {
            if !axes.contains(&d) {
                out_strides[d] = acc;
                acc *= shape[d];
            }
        }
        OutputIndexMap { shape: shape.to_vec(), out_strides }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let numel: usize = self.shape.iter().product();
        let rank = self.shape.len();
        let mut idx = vec![0usize; rank];
        let mut o = 0usize;
        for i in 0..numel {
            f(i, o);
            for d in (0..rank).rev() {
                idx[d] += 1;
                o += self.out_strides[d];
                if idx[d] < self.shape[d] {
                    break;
                }
                o -= self.out_strides[d] * self.shape[d];
                idx[d] = 0;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
