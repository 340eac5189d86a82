//! Fused scaled-dot-product attention.
//!
//! `attention_core` consumes `(G, T, D)` query/key/value stacks, where `G`
//! folds batch × heads, and returns `softmax(Q·Kᵀ/√D)·V` per slice.
//!
//! In gradient mode the `T×T` probability matrices are saved for the
//! backward pass. On an inference tape the op instead streams over query
//! chunks so the full probability matrix is never materialized — with
//! thousands of tokens (e.g. full-resolution scenes) that matrix would
//! dominate memory.

use ndarray::{Array2, Array3, ArrayD, Ix3};

use super::{BackwardFn, Scalar, Tape, Tensor};

/// Query rows processed per streaming step on inference tapes.
const STREAM_CHUNK: usize = 256;

/// Numerically stable in-place row softmax.
fn softmax_rows<S: Scalar>(m: &mut Array2<S>) {
    for mut row in m.rows_mut() {
        let max = row.fold(S::neg_infinity(), |acc, &v| if v > acc { v } else { acc });
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

fn as3<S: Scalar>(a: &ArrayD<S>) -> ndarray::ArrayView3<'_, S> {
    a.view()
        .into_dimensionality::<Ix3>()
        .unwrap_or_else(|_| panic!("attention expects (G, T, D), got {:?}", a.shape()))
}

impl<S: Scalar> Tape<S> {
    /// Scaled-dot-product attention over token stacks `(G, T, D)`.
    pub fn attention_core(&mut self, q: Tensor, k: Tensor, v: Tensor) -> Tensor {
        let qs = self.value(q).shape().to_vec();
        assert_eq!(qs.len(), 3, "attention expects (G, T, D)");
        assert_eq!(self.value(k).shape(), &qs[..], "q/k shape mismatch");
        assert_eq!(self.value(v).shape(), &qs[..], "q/v shape mismatch");
        let (groups, tokens, dim) = (qs[0], qs[1], qs[2]);
        let scale = S::from_f64(1.0 / (dim as f64).sqrt());

        if !self.wants_grad(&[q, k, v]) {
            // Streaming forward: never hold more than a chunk of scores.
            let qv = as3(self.value(q));
            let kv = as3(self.value(k));
            let vv = as3(self.value(v));
            let mut out = Array3::<S>::zeros((groups, tokens, dim));
            for g in 0..groups {
                let kg = kv.index_axis(ndarray::Axis(0), g);
                let vg = vv.index_axis(ndarray::Axis(0), g);
                let qg = qv.index_axis(ndarray::Axis(0), g);
                let mut start = 0;
                while start < tokens {
                    let end = (start + STREAM_CHUNK).min(tokens);
                    let qc = qg.slice(ndarray::s![start..end, ..]);
                    let mut scores = qc.dot(&kg.t());
                    scores.mapv_inplace(|s| s * scale);
                    softmax_rows(&mut scores);
                    let oc = scores.dot(&vg);
                    out.slice_mut(ndarray::s![g, start..end, ..]).assign(&oc);
                    start = end;
                }
            }
            return self.record(out.into_dyn(), vec![q, k, v], None);
        }

        // Gradient mode: materialize and save per-group probabilities.
        let mut probs = Vec::with_capacity(groups);
        let mut out = Array3::<S>::zeros((groups, tokens, dim));
        {
            let qv = as3(self.value(q));
            let kv = as3(self.value(k));
            let vv = as3(self.value(v));
            for g in 0..groups {
                let qg = qv.index_axis(ndarray::Axis(0), g);
                let kg = kv.index_axis(ndarray::Axis(0), g);
                let vg = vv.index_axis(ndarray::Axis(0), g);
                let mut scores = qg.dot(&kg.t());
                scores.mapv_inplace(|s| s * scale);
                softmax_rows(&mut scores);
                out.index_axis_mut(ndarray::Axis(0), g).assign(&scores.dot(&vg));
                probs.push(scores);
            }
        }

        let bw: BackwardFn<S> = Box::new(move |gy, _y, ps| {
            let qv = as3(ps[0]);
            let kv = as3(ps[1]);
            let vv = as3(ps[2]);
            let g3 = as3(gy);
            let mut dq = Array3::<S>::zeros((groups, tokens, dim));
            let mut dk = Array3::<S>::zeros((groups, tokens, dim));
            let mut dv = Array3::<S>::zeros((groups, tokens, dim));
            for g in 0..groups {
                let p = &probs[g];
                let gg = g3.index_axis(ndarray::Axis(0), g);
                let vg = vv.index_axis(ndarray::Axis(0), g);
                dv.index_axis_mut(ndarray::Axis(0), g).assign(&p.t().dot(&gg));
                let dp = gg.dot(&vg.t()); // (T, T)
                // Softmax backward per row: dS = P ⊙ (dP − rowsum(dP ⊙ P)).
                let mut ds = dp;
                for tok in 0..tokens {
                    let prow = p.row(tok);
                    let mut drow = ds.row_mut(tok);
                    let dot: S = drow.iter().zip(prow.iter()).map(|(&d, &pp)| d * pp).sum();
                    ndarray::Zip::from(&mut drow).and(&prow).for_each(|d, &pp| {
                        *d = pp * (*d - dot);
                    });
                }
                ds.mapv_inplace(|v| v * scale);
                let qg = qv.index_axis(ndarray::Axis(0), g);
                let kg = kv.index_axis(ndarray::Axis(0), g);
                dq.index_axis_mut(ndarray::Axis(0), g).assign(&ds.dot(&kg));
                dk.index_axis_mut(ndarray::Axis(0), g).assign(&ds.t().dot(&qg));
            }
            vec![Some(dq.into_dyn()), Some(dk.into_dyn()), Some(dv.into_dyn())]
        });
        self.record(out.into_dyn(), vec![q, k, v], Some(bw))
    }
}
