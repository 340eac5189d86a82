//! Bilinear 2× upsampling for `(N, C, H, W)` feature maps.
//!
//! Sampling uses half-pixel centers (source coordinate `(o + 0.5)/2 − 0.5`,
//! clamped at the borders), so a constant map stays exactly constant and
//! interior samples interpolate their two nearest neighbors with 1/4–3/4
//! weights. The backward pass scatters with the same weights, making the op
//! an exact linear transpose pair.

use ndarray::{Array4, ArrayD, Ix4};

use super::{BackwardFn, Scalar, Tape, Tensor};

/// Per-output-index source taps: `(i0, w0, i1, w1)` with `w0 + w1 = 1`.
fn taps(out_len: usize, in_len: usize) -> Vec<(usize, f64, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = src - i0 as f64;
            (i0, 1.0 - w1, i1, w1)
        })
        .collect()
}

impl<S: Scalar> Tape<S> {
    /// Doubles both spatial sides of `(N, C, H, W)` by bilinear interpolation.
    pub fn upsample2x_bilinear(&mut self, x: Tensor) -> Tensor {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4, "upsample input must be (N, C, H, W)");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let row_taps = taps(oh, h);
        let col_taps = taps(ow, w);

        let x4 = self.value(x).view().into_dimensionality::<Ix4>().expect("upsample dim");
        let mut y = Array4::<S>::zeros((n, c, oh, ow));
        for s in 0..n {
            for ch in 0..c {
                for (oy, &(y0, wy0, y1, wy1)) in row_taps.iter().enumerate() {
                    for (ox, &(x0, wx0, x1, wx1)) in col_taps.iter().enumerate() {
                        let v = x4[[s, ch, y0, x0]] * S::from_f64(wy0 * wx0)
                            + x4[[s, ch, y0, x1]] * S::from_f64(wy0 * wx1)
                            + x4[[s, ch, y1, x0]] * S::from_f64(wy1 * wx0)
                            + x4[[s, ch, y1, x1]] * S::from_f64(wy1 * wx1);
                        y[[s, ch, oy, ox]] = v;
                    }
                }
            }
        }

        let bw: BackwardFn<S> = Box::new(move |gy, _y, _ps| {
            let g4 = gy.view().into_dimensionality::<Ix4>().expect("upsample grad dim");
            let mut dx = Array4::<S>::zeros((n, c, h, w));
            for s in 0..n {
                for ch in 0..c {
                    for (oy, &(y0, wy0, y1, wy1)) in row_taps.iter().enumerate() {
                        for (ox, &(x0, wx0, x1, wx1)) in col_taps.iter().enumerate() {
                            let g = g4[[s, ch, oy, ox]];
                            dx[[s, ch, y0, x0]] += g * S::from_f64(wy0 * wx0);
                            dx[[s, ch, y0, x1]] += g * S::from_f64(wy0 * wx1);
                            dx[[s, ch, y1, x0]] += g * S::from_f64(wy1 * wx0);
                            dx[[s, ch, y1, x1]] += g * S::from_f64(wy1 * wx1);
                        }
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        });

        let parents = vec![x];
        let value: ArrayD<S> = y.into_dyn();
        self.record(value, parents, Some(bw))
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::Tape;
    use approx::assert_abs_diff_eq;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn doubles_spatial_dimensions() {
        let x = rand_array(80, &[2, 3, 5, 7]);
        let mut t = Tape::<f64>::new();
        let xt = t.leaf(x);
        let y = t.upsample2x_bilinear(xt);
        assert_eq!(t.value(y).shape(), &[2, 3, 10, 14]);
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = ArrayD::from_elem(IxDyn(&[1, 2, 4, 4]), 3.25);
        let mut t = Tape::<f64>::new();
        let xt = t.leaf(x);
        let y = t.upsample2x_bilinear(xt);
        for v in t.value(y).iter() {
            assert_abs_diff_eq!(*v, 3.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn one_dimensional_ramp_matches_hand_oracle() {
        // Input row [a, b] upsampled to 4: [a, 0.75a+0.25b, 0.25a+0.75b, b].
        let (a, b) = (1.0, 5.0);
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![a, b]).unwrap();
        let mut t = Tape::<f64>::new();
        let xt = t.leaf(x);
        let y = t.upsample2x_bilinear(xt);
        let yv = t.value(y);
        assert_eq!(yv.shape(), &[1, 1, 2, 4]);
        let want = [a, 0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b, b];
        for (ox, w) in want.iter().enumerate() {
            // Height 1 clamps both row taps to the same row.
            assert_abs_diff_eq!(yv[[0, 0, 0, ox]], *w, epsilon = 1e-12);
            assert_abs_diff_eq!(yv[[0, 0, 1, ox]], *w, epsilon = 1e-12);
        }
    }

    #[test]
    fn corners_are_preserved() {
        let x = rand_array(81, &[1, 1, 3, 3]);
        let mut t = Tape::<f64>::new();
        let xt = t.leaf(x.clone());
        let y = t.upsample2x_bilinear(xt);
        let yv = t.value(y);
        assert_abs_diff_eq!(yv[[0, 0, 0, 0]], x[[0, 0, 0, 0]], epsilon = 1e-12);
        assert_abs_diff_eq!(yv[[0, 0, 0, 5]], x[[0, 0, 0, 2]], epsilon = 1e-12);
        assert_abs_diff_eq!(yv[[0, 0, 5, 0]], x[[0, 0, 2, 0]], epsilon = 1e-12);
        assert_abs_diff_eq!(yv[[0, 0, 5, 5]], x[[0, 0, 2, 2]], epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = rand_array(82, &[2, 2, 3, 4]);
        check_gradients(&[x], 1e-5, 1e-6, |t, xs| {
            let y = t.upsample2x_bilinear(xs[0]);
            project_to_scalar(t, y, 117)
        });
    }
}
