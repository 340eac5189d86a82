//! 2-D convolution via im2col + GEMM.
//!
//! Patch matrices are built per sample and rebuilt during the backward pass
//! instead of being saved, trading a second im2col for a much smaller
//! activation footprint.

use ndarray::{Array2, Array4, ArrayD, ArrayView4, Ix4};

use super::{BackwardFn, Scalar, Tape, Tensor};

/// Geometry of one convolution, shared by forward and backward.
#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn resolve(x: &[usize], wshape: &[usize], stride: usize, pad: usize) -> ConvGeom {
        assert_eq!(x.len(), 4, "conv2d input must be (N, C, H, W), got {x:?}");
        assert_eq!(wshape.len(), 4, "conv2d weight must be (O, C, kh, kw), got {wshape:?}");
        let (n, c_in, h, w) = (x[0], x[1], x[2], x[3]);
        let (c_out, wc, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(c_in, wc, "conv2d channel mismatch: input {c_in}, weight {wc}");
        assert!(stride >= 1, "conv2d stride must be >= 1");
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        assert!(
            span_h >= kh && span_w >= kw,
            "conv2d geometry invalid: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
        );
        // Floor semantics: trailing rows/cols that don't fit a full stride
        // step are ignored, as in standard convolution arithmetic.
        let oh = (span_h - kh) / stride + 1;
        let ow = (span_w - kw) / stride + 1;
        ConvGeom { n, c_in, h, w, c_out, kh, kw, stride, pad, oh, ow }
    }
}

/// Unfolds one sample into a `(C·kh·kw, OH·OW)` patch matrix.
fn im2col<S: Scalar>(x: &ArrayView4<'_, S>, sample: usize, g: ConvGeom) -> Array2<S> {
    let mut cols = Array2::<S>::zeros((g.c_in * g.kh * g.kw, g.oh * g.ow));
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let mut out_row = cols.row_mut(row);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        out_row[oy * g.ow + ox] = x[[sample, c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch-matrix gradient back onto one input sample.
fn col2im_into<S: Scalar>(cols: &Array2<S>, dx: &mut Array4<S>, sample: usize, g: ConvGeom) {
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let col_row = cols.row(row);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dx[[sample, c, iy as usize, ix as usize]] += col_row[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

fn conv_forward<S: Scalar>(x: &ArrayD<S>, w: &ArrayD<S>, b: &ArrayD<S>, g: ConvGeom) -> ArrayD<S> {
    let x4 = x.view().into_dimensionality::<Ix4>().expect("conv input dim");
    let wmat = super::reshaped(w, &[g.c_out, g.c_in * g.kh * g.kw])
        .into_dimensionality::<ndarray::Ix2>()
        .expect("weight matrix");
    let mut y = Array4::<S>::zeros((g.n, g.c_out, g.oh, g.ow));
    for sample in 0..g.n {
        let cols = im2col(&x4, sample, g);
        let out = wmat.dot(&cols); // (c_out, oh*ow)
        for co in 0..g.c_out {
            let bias = b[co];
            let src = out.row(co);
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    y[[sample, co, oy, ox]] = src[oy * g.ow + ox] + bias;
                }
            }
        }
    }
    y.into_dyn()
}

impl<S: Scalar> Tape<S> {
    /// 2-D convolution: `x (N,C,H,W)` with `w (O,C,kh,kw)` and bias `b (O)`.
    ///
    /// Output spatial size is `(H + 2·pad − kh)/stride + 1`; the geometry must
    /// divide exactly (the model only uses "same"-style 3×3/1×1 kernels and
    /// strides 1 or 2 on even sizes).
    pub fn conv2d(&mut self, x: Tensor, w: Tensor, b: Tensor, stride: usize, pad: usize) -> Tensor {
        let g = ConvGeom::resolve(self.value(x).shape(), self.value(w).shape(), stride, pad);
        assert_eq!(
            self.value(b).shape(),
            [g.c_out],
            "conv2d bias must be (c_out,)"
        );
        let value = conv_forward(self.value(x), self.value(w), self.value(b), g);
        let need_dx = self.wants_grad(&[x]);
        let bw: BackwardFn<S> = Box::new(move |gy, _y, ps| {
            let x4 = ps[0].view().into_dimensionality::<Ix4>().expect("conv input dim");
            let wmat = super::reshaped(ps[1], &[g.c_out, g.c_in * g.kh * g.kw])
                .into_dimensionality::<ndarray::Ix2>()
                .expect("weight matrix");
            let gy4 = gy.view().into_dimensionality::<Ix4>().expect("conv grad dim");

            let mut dw = Array2::<S>::zeros((g.c_out, g.c_in * g.kh * g.kw));
            let mut db = ndarray::Array1::<S>::zeros(g.c_out);
            let mut dx = need_dx.then(|| Array4::<S>::zeros((g.n, g.c_in, g.h, g.w)));

            for sample in 0..g.n {
                // (c_out, oh*ow) view of this sample's output gradient.
                let mut gmat = Array2::<S>::zeros((g.c_out, g.oh * g.ow));
                for co in 0..g.c_out {
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            let v = gy4[[sample, co, oy, ox]];
                            gmat[[co, oy * g.ow + ox]] = v;
                            db[co] += v;
                        }
                    }
                }
                let cols = im2col(&x4, sample, g);
                dw += &gmat.dot(&cols.t());
                if let Some(dx) = dx.as_mut() {
                    let dcols = wmat.t().dot(&gmat);
                    col2im_into(&dcols, dx, sample, g);
                }
            }

            vec![
                dx.map(|d| d.into_dyn()),
                Some(super::reshaped(&dw.into_dyn(), &[g.c_out, g.c_in, g.kh, g.kw])),
                Some(db.into_dyn()),
            ]
        });
        self.record(value, vec![x, w, b], Some(bw))
    }
}
