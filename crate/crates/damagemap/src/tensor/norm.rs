//! Batch normalization (2-D feature maps) and layer normalization (tokens).

use ndarray::{Array1, ArrayD, Axis, Ix2, Ix4};

use super::{BackwardFn, Scalar, Tape, Tensor};

/// Per-channel batch statistics produced by a training-mode batchnorm call,
/// used by the owner of the parameters to update running estimates.
#[derive(Debug, Clone)]
pub struct BnStats<S> {
    pub mean: Array1<S>,
    /// Biased (population) variance over the batch.
    pub var: Array1<S>,
}

/// Normalization statistics source for [`Tape::batchnorm2d`].
pub enum BnMode<'a, S> {
    /// Normalize with statistics computed from the batch itself.
    Train,
    /// Normalize with frozen running statistics (evaluation).
    Eval { mean: &'a Array1<S>, var: &'a Array1<S> },
}

impl<S: Scalar> Tape<S> {
    /// Batch normalization over `(N, C, H, W)` with per-channel affine.
    ///
    /// Returns the output tensor and, in train mode, the batch statistics so
    /// the caller can maintain running estimates (the tape itself never
    /// mutates parameters).
    pub fn batchnorm2d(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mode: BnMode<'_, S>,
        eps: S,
    ) -> (Tensor, Option<BnStats<S>>) {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "batchnorm2d input must be (N, C, H, W)");
        let c = xs[1];
        assert_eq!(self.value(gamma).shape(), [c], "gamma must be (C,)");
        assert_eq!(self.value(beta).shape(), [c], "beta must be (C,)");

        let (mean, var, is_train) = match mode {
            BnMode::Train => {
                let x4 = self.value(x).view().into_dimensionality::<Ix4>().expect("bn dim");
                let m = S::from_f64((xs[0] * xs[2] * xs[3]) as f64);
                let mut mean = Array1::<S>::zeros(c);
                let mut var = Array1::<S>::zeros(c);
                for ch in 0..c {
                    let plane = x4.index_axis(Axis(1), ch);
                    let mu = plane.sum() / m;
                    let v = plane.mapv(|x| (x - mu) * (x - mu)).sum() / m;
                    mean[ch] = mu;
                    var[ch] = v;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                assert_eq!(mean.len(), c, "running mean length");
                assert_eq!(var.len(), c, "running var length");
                (mean.clone(), var.clone(), false)
            }
        };

        let inv_std: Array1<S> = var.mapv(|v| S::one() / (v + eps).sqrt());
        let value = {
            let x4 = self.value(x).view().into_dimensionality::<Ix4>().expect("bn dim");
            let g1 = self.value(gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let b1 = self.value(beta).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut y = x4.to_owned();
            for ch in 0..c {
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], g1[ch], b1[ch]);
                y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - mu) * is * ga + be);
            }
            y.into_dyn()
        };

        let stats = is_train.then(|| BnStats { mean: mean.clone(), var: var.clone() });

        let bw: BackwardFn<S> = Box::new(move |gy, _y, ps| {
            let x4 = ps[0].view().into_dimensionality::<Ix4>().expect("bn dim");
            let g4 = gy.view().into_dimensionality::<Ix4>().expect("bn grad dim");
            let gamma1 = ps[1].view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let m = S::from_f64((x4.shape()[0] * x4.shape()[2] * x4.shape()[3]) as f64);

            let mut dx = x4.to_owned();
            let mut dgamma = Array1::<S>::zeros(c);
            let mut dbeta = Array1::<S>::zeros(c);
            for ch in 0..c {
                let (mu, is, ga) = (mean[ch], inv_std[ch], gamma1[ch]);
                let xp = x4.index_axis(Axis(1), ch);
                let gp = g4.index_axis(Axis(1), ch);
                let xhat = xp.mapv(|v| (v - mu) * is);
                dgamma[ch] = (&gp * &xhat).sum();
                dbeta[ch] = gp.sum();
                let mut dxp = dx.index_axis_mut(Axis(1), ch);
                if is_train {
                    // dx = (γ/σ)(g − mean(g) − x̂·mean(g·x̂)) per channel
                    let mean_g = dbeta[ch] / m;
                    let mean_gx = dgamma[ch] / m;
                    ndarray::Zip::from(&mut dxp).and(&gp).and(&xhat).for_each(|d, &g, &xh| {
                        *d = ga * is * (g - mean_g - xh * mean_gx);
                    });
                } else {
                    // Frozen statistics: the map is element-wise affine.
                    ndarray::Zip::from(&mut dxp).and(&gp).for_each(|d, &g| {
                        *d = ga * is * g;
                    });
                }
            }
            vec![Some(dx.into_dyn()), Some(dgamma.into_dyn()), Some(dbeta.into_dyn())]
        });
        let out = self.record(value, vec![x, gamma, beta], Some(bw));
        (out, stats)
    }

    /// Layer normalization over the last axis with per-feature affine.
    pub fn layernorm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: S) -> Tensor {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().expect("layernorm needs >= 1 axis");
        assert_eq!(self.value(gamma).shape(), [c], "gamma must match last axis");
        assert_eq!(self.value(beta).shape(), [c], "beta must match last axis");
        let rows: usize = shape[..shape.len() - 1].iter().product();

        let norm_rows = move |xa: &ArrayD<S>| -> (ndarray::Array2<S>, Array1<S>, Array1<S>) {
            let x2 = super::reshaped(xa, &[rows, c]).into_dimensionality::<Ix2>().unwrap();
            let m = S::from_f64(c as f64);
            let mut xhat = x2.clone();
            let mut mean = Array1::<S>::zeros(rows);
            let mut inv_std = Array1::<S>::zeros(rows);
            for r in 0..rows {
                let row = x2.row(r);
                let mu = row.sum() / m;
                let var = row.mapv(|v| (v - mu) * (v - mu)).sum() / m;
                let is = S::one() / (var + eps).sqrt();
                mean[r] = mu;
                inv_std[r] = is;
                xhat.row_mut(r).mapv_inplace(|v| (v - mu) * is);
            }
            (xhat, mean, inv_std)
        };

        let (xhat, _mean, _inv_std) = norm_rows(self.value(x));
        let g1 = self.value(gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = self.value(beta).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y2 = xhat.clone();
        for r in 0..rows {
            let mut row = y2.row_mut(r);
            ndarray::Zip::from(&mut row).and(&g1).and(&b1).for_each(|o, &g, &b| {
                *o = *o * g + b;
            });
        }
        let value = super::reshaped(&y2.into_dyn(), &shape);

        let shape_bw = shape.clone();
        let bw: BackwardFn<S> = Box::new(move |gy, _y, ps| {
            let (xhat, _mean, inv_std) = norm_rows(ps[0]);
            let g2 = super::reshaped(gy, &[rows, c]).into_dimensionality::<Ix2>().unwrap();
            let gamma1 = ps[1].view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let m = S::from_f64(c as f64);

            let mut dx = ndarray::Array2::<S>::zeros((rows, c));
            let mut dgamma = Array1::<S>::zeros(c);
            let mut dbeta = Array1::<S>::zeros(c);
            for r in 0..rows {
                let grow = g2.row(r);
                let xrow = xhat.row(r);
                // dxhat = g·γ; dx = (1/σ)(dxhat − mean(dxhat) − x̂·mean(dxhat·x̂))
                let dxhat: Vec<S> = grow.iter().zip(&gamma1).map(|(&g, &ga)| g * ga).collect();
                let mean_d: S = dxhat.iter().copied().sum::<S>() / m;
                let mean_dx: S =
                    dxhat.iter().zip(&xrow).map(|(&d, &xh)| d * xh).sum::<S>() / m;
                let is = inv_std[r];
                let mut drow = dx.row_mut(r);
                for j in 0..c {
                    drow[j] = is * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                    dgamma[j] += grow[j] * xrow[j];
                    dbeta[j] += grow[j];
                }
            }
            vec![
                Some(super::reshaped(&dx.into_dyn(), &shape_bw)),
                Some(dgamma.into_dyn()),
                Some(dbeta.into_dyn()),
            ]
        });
        self.record(value, vec![x, gamma, beta], Some(bw))
    }

    /// Softmax along the channel axis of `(N, C, H, W)`.
    pub fn softmax_channels(&mut self, x: Tensor) -> Tensor {
        let value = softmax_axis1(self.value(x));
        let bw: BackwardFn<S> = Box::new(|gy, y, _ps| {
            // dx = p ⊙ (g − Σ_c g·p), per pixel over the channel axis.
            let gp = gy * y;
            let s = gp.sum_axis(Axis(1)).insert_axis(Axis(1));
            let dx = y * &(gy - &s);
            vec![Some(dx)]
        });
        self.record(value, vec![x], Some(bw))
    }

    /// Log-softmax along the channel axis of `(N, C, H, W)`.
    pub fn log_softmax_channels(&mut self, x: Tensor) -> Tensor {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4, "log_softmax_channels input must be (N, C, H, W)");
        let max = fold_axis1_max(xv);
        let shifted = xv - &max.clone().insert_axis(Axis(1));
        let lse = shifted.mapv(|v| v.exp()).sum_axis(Axis(1)).mapv(|v| v.ln());
        let value = &shifted - &lse.insert_axis(Axis(1));
        let bw: BackwardFn<S> = Box::new(|gy, y, _ps| {
            // dx = g − softmax ⊙ Σ_c g
            let p = y.mapv(|v| v.exp());
            let s = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
            let dx = gy - &(&p * &s);
            vec![Some(dx)]
        });
        self.record(value, vec![x], Some(bw))
    }
}

fn fold_axis1_max<S: Scalar>(x: &ArrayD<S>) -> ArrayD<S> {
    x.fold_axis(Axis(1), S::neg_infinity(), |&acc, &v| if v > acc { v } else { acc })
}

pub(crate) fn softmax_axis1<S: Scalar>(x: &ArrayD<S>) -> ArrayD<S> {
    assert!(x.ndim() >= 2, "softmax needs a channel axis");
    let max = fold_axis1_max(x);
    let mut e = x - &max.insert_axis(Axis(1));
    e.mapv_inplace(|v| v.exp());
    let sum = e.sum_axis(Axis(1)).insert_axis(Axis(1));
    e / &sum
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::{Tape, Tensor};
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;

    #[test]
    fn train_mode_normalizes_each_channel() {
        let x = rand_array(40, &[3, 4, 5, 6]);
        let gamma = ArrayD::from_elem(IxDyn(&[4]), 1.0);
        let beta = ArrayD::zeros(IxDyn(&[4]));
        let mut t = Tape::<f64>::new();
        let (xt, gt, bt) = (t.leaf(x), t.leaf(gamma), t.leaf(beta));
        let (y, stats) = t.batchnorm2d(xt, gt, bt, BnMode::Train, 1e-9);
        let stats = stats.unwrap();
        let y4 = t.value(y).view().into_dimensionality::<Ix4>().unwrap();
        for ch in 0..4 {
            let plane = y4.index_axis(Axis(1), ch);
            let m = plane.len() as f64;
            let mu: f64 = plane.sum() / m;
            let var: f64 = plane.mapv(|v| (v - mu) * (v - mu)).sum() / m;
            assert_abs_diff_eq!(mu, 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
            assert!(stats.var[ch] > 0.0);
        }
    }

    #[test]
    fn train_mode_matches_hand_oracle() {
        // Single channel, values 1..4: mean 2.5, population variance 1.25.
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = ArrayD::from_elem(IxDyn(&[1]), 2.0);
        let beta = ArrayD::from_elem(IxDyn(&[1]), 0.5);
        let mut t = Tape::<f64>::new();
        let (xt, gt, bt) = (t.leaf(x), t.leaf(gamma), t.leaf(beta));
        let (y, stats) = t.batchnorm2d(xt, gt, bt, BnMode::Train, 0.0);
        let stats = stats.unwrap();
        assert_abs_diff_eq!(stats.mean[0], 2.5);
        assert_abs_diff_eq!(stats.var[0], 1.25);
        let sd = 1.25f64.sqrt();
        let want = [1.0f64, 2.0, 3.0, 4.0].map(|v| 2.0 * (v - 2.5) / sd + 0.5);
        for (got, want) in t.value(y).iter().zip(want) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn eval_mode_uses_frozen_statistics() {
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![3.0, 7.0]).unwrap();
        let gamma = ArrayD::from_elem(IxDyn(&[1]), 1.0);
        let beta = ArrayD::zeros(IxDyn(&[1]));
        let mean = Array1::from_vec(vec![5.0]);
        let var = Array1::from_vec(vec![4.0]);
        let mut t = Tape::<f64>::new();
        let (xt, gt, bt) = (t.leaf(x), t.leaf(gamma), t.leaf(beta));
        let (y, stats) = t.batchnorm2d(xt, gt, bt, BnMode::Eval { mean: &mean, var: &var }, 0.0);
        assert!(stats.is_none());
        // (3-5)/2 = -1, (7-5)/2 = 1
        assert_abs_diff_eq!(t.value(y)[[0, 0, 0, 0]], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.value(y)[[0, 0, 0, 1]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let x = rand_array(41, &[2, 3, 3, 2]);
        let gamma = rand_positive(42, &[3]);
        let beta = rand_array(43, &[3]);
        check_gradients(&[x.clone(), gamma.clone(), beta.clone()], 1e-5, 1e-5, |t, xs| {
            let (y, _) = t.batchnorm2d(xs[0], xs[1], xs[2], BnMode::Train, 1e-5);
            project_to_scalar(t, y, 111)
        });
        let mean = Array1::from_vec(vec![0.1, -0.2, 0.3]);
        let var = Array1::from_vec(vec![1.1, 0.9, 1.3]);
        check_gradients(&[x, gamma, beta], 1e-5, 1e-6, move |t: &mut Tape<f64>, xs: &[Tensor]| {
            let (y, _) = t.batchnorm2d(xs[0], xs[1], xs[2], BnMode::Eval { mean: &mean, var: &var }, 1e-5);
            project_to_scalar(t, y, 112)
        });
    }

    #[test]
    fn layernorm_normalizes_each_token() {
        let x = rand_array(44, &[2, 5, 8]);
        let gamma = ArrayD::from_elem(IxDyn(&[8]), 1.0);
        let beta = ArrayD::zeros(IxDyn(&[8]));
        let mut t = Tape::<f64>::new();
        let (xt, gt, bt) = (t.leaf(x), t.leaf(gamma), t.leaf(beta));
        let y = t.layernorm(xt, gt, bt, 1e-9);
        let y3 = t.value(y).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        for b in 0..2 {
            for tok in 0..5 {
                let row = y3.slice(ndarray::s![b, tok, ..]);
                let mu: f64 = row.sum() / 8.0;
                let var: f64 = row.mapv(|v| (v - mu) * (v - mu)).sum() / 8.0;
                assert_abs_diff_eq!(mu, 0.0, epsilon = 1e-10);
                assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let x = rand_array(45, &[2, 3, 6]);
        let gamma = rand_positive(46, &[6]);
        let beta = rand_array(47, &[6]);
        check_gradients(&[x, gamma, beta], 1e-5, 1e-5, |t, xs| {
            let y = t.layernorm(xs[0], xs[1], xs[2], 1e-5);
            project_to_scalar(t, y, 113)
        });
    }

    #[test]
    fn softmax_channels_matches_oracle_and_sums_to_one() {
        let x = rand_array(48, &[2, 5, 3, 4]);
        let mut t = Tape::<f64>::new();
        let xt = t.leaf(x.clone());
        let p = t.softmax_channels(xt);
        let pv = t.value(p);
        for b in 0..2 {
            for r in 0..3 {
                for cc in 0..4 {
                    let mut denom = 0.0;
                    let m = (0..5).map(|c| x[[b, c, r, cc]]).fold(f64::NEG_INFINITY, f64::max);
                    for c in 0..5 {
                        denom += (x[[b, c, r, cc]] - m).exp();
                    }
                    let mut total = 0.0;
                    for c in 0..5 {
                        let want = (x[[b, c, r, cc]] - m).exp() / denom;
                        assert_abs_diff_eq!(pv[[b, c, r, cc]], want, epsilon = 1e-12);
                        total += pv[[b, c, r, cc]];
                    }
                    assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_softmax_is_log_of_softmax() {
        let x = rand_array(49, &[1, 4, 2, 2]);
        let mut t = Tape::<f64>::new();
        let xt = t.leaf(x);
        let p = t.softmax_channels(xt);
        let lp = t.log_softmax_channels(xt);
        for (a, b) in t.value(p).iter().zip(t.value(lp).iter()) {
            assert_abs_diff_eq!(a.ln(), *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let x = rand_array(50, &[2, 4, 2, 3]);
        check_gradients(&[x.clone()], 1e-5, 1e-6, |t, xs| {
            let y = t.softmax_channels(xs[0]);
            project_to_scalar(t, y, 114)
        });
        check_gradients(&[x], 1e-5, 1e-6, |t, xs| {
            let y = t.log_softmax_channels(xs[0]);
            project_to_scalar(t, y, 115)
        });
    }
}
