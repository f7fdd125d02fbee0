//! Grouped 2-D convolution kernels.
//!
//! The three functions here are the three "faces" of a single trilinear form
//! `T(x, w, y) = <conv2d(x, w), y>`: [`conv2d`] produces the output from
//! `(x, w)`, [`conv_transpose2d`] produces the input-shaped adjoint from
//! `(y, w)` and [`conv_weight_grad`] produces the weight-shaped adjoint from
//! `(x, y)`. Each one's derivative is expressed through the other two, which
//! is what lets the tape differentiate through gradients.

use crate::tensor::{Shape, Tensor};

/// Square-kernel convolution hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            kernel,
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn depthwise(kernel: usize, channels: usize) -> Self {
        ConvSpec {
            kernel,
            stride: 1,
            padding: 0,
            groups: channels,
        }
    }

    /// Spatial output extent of a forward convolution over `input` pixels.
    pub fn output_extent(&self, input: usize) -> usize {
        assert!(
            input + 2 * self.padding >= self.kernel,
            "kernel {} larger than padded input {}",
            self.kernel,
            input + 2 * self.padding
        );
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Spatial extent a transposed convolution produces from `output` pixels.
    pub fn transposed_extent(&self, output: usize) -> usize {
        (output - 1) * self.stride + self.kernel - 2 * self.padding
    }

    pub fn output_shape(&self, x: Shape, w: Shape) -> Shape {
        [
            x[0],
            w[0],
            self.output_extent(x[2]),
            self.output_extent(x[3]),
        ]
    }
}

/// Geometry shared by the three kernels for one call.
struct Geometry {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn new(x: Shape, w: Shape, y: Shape, spec: ConvSpec) -> Self {
        assert_eq!(x[0], y[0], "batch mismatch between input and output");
        assert_eq!(
            w[0], y[1],
            "weight out-channels {} vs output channels {}",
            w[0], y[1]
        );
        assert_eq!(w[2], spec.kernel);
        assert_eq!(w[3], spec.kernel);
        assert_eq!(x[1] % spec.groups, 0, "in-channels not divisible by groups");
        assert_eq!(
            w[0] % spec.groups,
            0,
            "out-channels not divisible by groups"
        );
        assert_eq!(
            w[1],
            x[1] / spec.groups,
            "weight in-channels per group mismatch"
        );
        assert_eq!(spec.output_extent(x[2]), y[2], "output height mismatch");
        assert_eq!(spec.output_extent(x[3]), y[3], "output width mismatch");
        Geometry {
            batch: x[0],
            in_ch: x[1],
            out_ch: y[1],
            in_h: x[2],
            in_w: x[3],
            out_h: y[2],
            out_w: y[3],
            spec,
        }
    }

    fn in_per_group(&self) -> usize {
        self.in_ch / self.spec.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_ch / self.spec.groups
    }

    fn col_rows(&self) -> usize {
        self.in_per_group() * self.spec.kernel * self.spec.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds the channels of one group of one sample into `cols`
    /// (`col_rows × col_cols`, row-major).
    /// Output columns `lo..hi` whose input column `o * stride + kj - pad`
    /// lies inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.spec.stride, self.spec.padding);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if self.in_w + p > kj {
            ((self.in_w + p - kj - 1) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Writes row `r` of the column matrix at `cols[r * ld..]`.
    fn im2col(&self, image: &[f64], cols: &mut [f64], ld: usize) {
        let k = self.spec.kernel;
        let (s, p) = (self.spec.stride, self.spec.padding);
        let plane = self.in_h * self.in_w;
        let ncols = self.col_cols();
        for ci in 0..self.in_per_group() {
            let chan = &image[ci * plane..(ci + 1) * plane];
            for ki in 0..k {
                for kj in 0..k {
                    let (lo, hi) = self.valid_cols(kj);
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * ld..row * ld + ncols];
                    for oh in 0..self.out_h {
                        let line = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        let ih = (oh * s + ki).wrapping_sub(p);
                        if ih >= self.in_h || lo == hi {
                            line.fill(0.0);
                            continue;
                        }
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let src = &chan[ih * self.in_w..(ih + 1) * self.in_w];
                        let first = lo * s + kj - p;
                        let src = &src[first..first + (hi - lo - 1) * s + 1];
                        for (o, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[o * s];
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64], ld: usize) {
        let k = self.spec.kernel;
        let (s, p) = (self.spec.stride, self.spec.padding);
        let plane = self.in_h * self.in_w;
        let ncols = self.col_cols();
        for ci in 0..self.in_per_group() {
            let chan = &mut image[ci * plane..(ci + 1) * plane];
            for ki in 0..k {
                for kj in 0..k {
                    let (lo, hi) = self.valid_cols(kj);
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * ld..row * ld + ncols];
                    for oh in 0..self.out_h {
                        let ih = (oh * s + ki).wrapping_sub(p);
                        if ih >= self.in_h || lo == hi {
                            continue;
                        }
                        let dst = &mut chan[ih * self.in_w..(ih + 1) * self.in_w];
                        let first = lo * s + kj - p;
                        let line = &src[oh * self.out_w + lo..oh * self.out_w + hi];
                        let dst = &mut dst[first..first + (hi - lo - 1) * s + 1];
                        for (o, &v) in line.iter().enumerate() {
                            dst[o * s] += v;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index the kernel touches given
    // the strides chosen for each layout.
    unsafe {
        matrixmultiply::dgemm(
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

/// Forward grouped convolution: `x [N, Cin, H, W] * w [Cout, Cin/g, k, k]`.
/// Upper bound on the column buffer, in elements; batches are processed in
/// chunks that fit.
const COL_BUDGET: usize = 1 << 15;

fn chunk_len(geo: &Geometry) -> usize {
    (COL_BUDGET / (geo.col_rows() * geo.col_cols()).max(1)).clamp(1, geo.batch.max(1))
}

pub fn conv2d(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Tensor {
    let y_shape = spec.output_shape(x.shape(), w.shape());
    let geo = Geometry::new(x.shape(), w.shape(), y_shape, spec);
    let mut y = Tensor::zeros(y_shape);
    let (rows, ncols) = (geo.col_rows(), geo.col_cols());
    let in_plane = geo.in_h * geo.in_w;
    let (cin_g, cout_g) = (geo.in_per_group(), geo.out_per_group());
    let xs = x.data();
    let ws = w.data();
    let ys = y.data_mut();
    if spec.groups == 1 {
        let chunk = chunk_len(&geo);
        let mut cols = vec![0.0; rows * ncols * chunk];
        let mut out = vec![0.0; geo.out_ch * ncols * chunk];
        for start in (0..geo.batch).step_by(chunk) {
            let nb = chunk.min(geo.batch - start);
            let ld = nb * ncols;
            for i in 0..nb {
                let x_off = (start + i) * geo.in_ch * in_plane;
                geo.im2col(
                    &xs[x_off..x_off + geo.in_ch * in_plane],
                    &mut cols[i * ncols..],
                    ld,
                );
            }
            gemm(geo.out_ch, rows, ld, ws, false, &cols, false, 0.0, &mut out);
            for co in 0..geo.out_ch {
                for i in 0..nb {
                    let y_off = ((start + i) * geo.out_ch + co) * ncols;
                    ys[y_off..y_off + ncols]
                        .copy_from_slice(&out[co * ld + i * ncols..co * ld + (i + 1) * ncols]);
                }
            }
        }
        return y;
    }
    let mut cols = vec![0.0; rows * ncols];
    for n in 0..geo.batch {
        for g in 0..spec.groups {
            let x_off = (n * geo.in_ch + g * cin_g) * in_plane;
            geo.im2col(&xs[x_off..x_off + cin_g * in_plane], &mut cols, ncols);
            let w_g = &ws[g * cout_g * rows..(g + 1) * cout_g * rows];
            let y_off = (n * geo.out_ch + g * cout_g) * ncols;
            gemm(
                cout_g,
                rows,
                ncols,
                w_g,
                false,
                &cols,
                false,
                0.0,
                &mut ys[y_off..y_off + cout_g * ncols],
            );
        }
    }
    y
}

/// Gathers samples `start..start + nb` of `y` into a `[channels, nb * ncols]`
/// matrix.
fn gather_outputs(
    ys: &[f64],
    channels: usize,
    ncols: usize,
    start: usize,
    nb: usize,
    out: &mut [f64],
) {
    let ld = nb * ncols;
    for c in 0..channels {
        for i in 0..nb {
            let off = ((start + i) * channels + c) * ncols;
            out[c * ld + i * ncols..c * ld + (i + 1) * ncols]
                .copy_from_slice(&ys[off..off + ncols]);
        }
    }
}

pub fn conv_transpose2d(y: &Tensor, w: &Tensor, spec: ConvSpec, in_hw: (usize, usize)) -> Tensor {
    let [n_batch, _, _, _] = y.shape();
    let x_shape = [n_batch, w.shape()[1] * spec.groups, in_hw.0, in_hw.1];
    let geo = Geometry::new(x_shape, w.shape(), y.shape(), spec);
    let mut x = Tensor::zeros(x_shape);
    let (rows, ncols) = (geo.col_rows(), geo.col_cols());
    let in_plane = geo.in_h * geo.in_w;
    let (cin_g, cout_g) = (geo.in_per_group(), geo.out_per_group());
    let ys = y.data();
    let ws = w.data();
    let xs = x.data_mut();
    if spec.groups == 1 {
        let chunk = chunk_len(&geo);
        let mut cols = vec![0.0; rows * ncols * chunk];
        let mut gathered = vec![0.0; geo.out_ch * ncols * chunk];
        for start in (0..geo.batch).step_by(chunk) {
            let nb = chunk.min(geo.batch - start);
            let ld = nb * ncols;
            gather_outputs(ys, geo.out_ch, ncols, start, nb, &mut gathered);
            gemm(
                rows, geo.out_ch, ld, ws, true, &gathered, false, 0.0, &mut cols,
            );
            for i in 0..nb {
                let x_off = (start + i) * geo.in_ch * in_plane;
                geo.col2im(
                    &cols[i * ncols..],
                    &mut xs[x_off..x_off + geo.in_ch * in_plane],
                    ld,
                );
            }
        }
        return x;
    }
    let mut cols = vec![0.0; rows * ncols];
    for n in 0..geo.batch {
        for g in 0..spec.groups {
            let w_g = &ws[g * cout_g * rows..(g + 1) * cout_g * rows];
            let y_off = (n * geo.out_ch + g * cout_g) * ncols;
            gemm(
                rows,
                cout_g,
                ncols,
                w_g,
                true,
                &ys[y_off..y_off + cout_g * ncols],
                false,
                0.0,
                &mut cols,
            );
            let x_off = (n * geo.in_ch + g * cin_g) * in_plane;
            geo.col2im(&cols, &mut xs[x_off..x_off + cin_g * in_plane], ncols);
        }
    }
    x
}

pub fn conv_weight_grad(x: &Tensor, y: &Tensor, spec: ConvSpec) -> Tensor {
    let [_, cin, _, _] = x.shape();
    let [_, cout, _, _] = y.shape();
    let w_shape = [cout, cin / spec.groups, spec.kernel, spec.kernel];
    let geo = Geometry::new(x.shape(), w_shape, y.shape(), spec);
    let mut w = Tensor::zeros(w_shape);
    let (rows, ncols) = (geo.col_rows(), geo.col_cols());
    let in_plane = geo.in_h * geo.in_w;
    let (cin_g, cout_g) = (geo.in_per_group(), geo.out_per_group());
    let xs = x.data();
    let ys = y.data();
    let wd = w.data_mut();
    if spec.groups == 1 {
        let chunk = chunk_len(&geo);
        let mut cols = vec![0.0; rows * ncols * chunk];
        let mut gathered = vec![0.0; geo.out_ch * ncols * chunk];
        for start in (0..geo.batch).step_by(chunk) {
            let nb = chunk.min(geo.batch - start);
            let ld = nb * ncols;
            for i in 0..nb {
                let x_off = (start + i) * geo.in_ch * in_plane;
                geo.im2col(
                    &xs[x_off..x_off + geo.in_ch * in_plane],
                    &mut cols[i * ncols..],
                    ld,
                );
            }
            gather_outputs(ys, geo.out_ch, ncols, start, nb, &mut gathered);
            gemm(geo.out_ch, ld, rows, &gathered, false, &cols, true, 1.0, wd);
        }
        return w;
    }
    let mut cols = vec![0.0; rows * ncols];
    for n in 0..geo.batch {
        for g in 0..spec.groups {
            let x_off = (n * geo.in_ch + g * cin_g) * in_plane;
            geo.im2col(&xs[x_off..x_off + cin_g * in_plane], &mut cols, ncols);
            let y_off = (n * geo.out_ch + g * cout_g) * ncols;
            let w_g = &mut wd[g * cout_g * rows..(g + 1) * cout_g * rows];
            gemm(
                cout_g,
                ncols,
                rows,
                &ys[y_off..y_off + cout_g * ncols],
                false,
                &cols,
                true,
                1.0,
                w_g,
            );
        }
    }
    w
}
