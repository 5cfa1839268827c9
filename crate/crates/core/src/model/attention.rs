//! Fused causal multi-head attention over contiguous `[rows, d_model]` buffers.
//!
//! Query row `i` sees key rows `0..=offset + i`; with an external memory of
//! `offset` entries stacked in front of the new keys this is exactly
//! "whole memory plus causal self-attention".

use ndarray::Array2;

pub(crate) struct Heads {
    pub num_heads: usize,
    pub head_dim: usize,
}

impl Heads {
    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Row-packed lower-trapezoid probabilities: row `i` has `offset + i + 1` entries.
pub(crate) struct PackedProbs {
    offset: usize,
    data: Vec<f64>,
}

impl PackedProbs {
    fn row_start(offset: usize, i: usize) -> usize {
        i * (offset + 1) + i * i.saturating_sub(1) / 2
    }

    fn new(offset: usize, rows: usize) -> Self {
        let total = rows * (offset + 1) + rows * rows.saturating_sub(1) / 2;
        Self {
            offset,
            data: vec![0.0; total],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let s = Self::row_start(self.offset, i);
        &self.data[s..s + self.offset + i + 1]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let s = Self::row_start(self.offset, i);
        &mut self.data[s..s + self.offset + i + 1]
    }
}

/// Computes attention output `[T, d]`. Optionally keeps per-head probabilities
/// (for backprop) and accumulates the head-summed map into `map` (`[T, offset + T]`).
pub(crate) fn forward(
    heads: &Heads,
    q: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    offset: usize,
    mut keep: Option<&mut Vec<PackedProbs>>,
    mut map: Option<&mut Array2<f64>>,
) -> Array2<f64> {
    let (t, d) = q.dim();
    let hd = heads.head_dim;
    let scale = heads.scale();
    let qs = q.as_slice().expect("standard layout");
    let ks = keys.as_slice().expect("standard layout");
    let vs = values.as_slice().expect("standard layout");
    let mut out = Array2::<f64>::zeros((t, d));
    let os = out.as_slice_mut().expect("standard layout");
    let mut row_buf = vec![0.0; offset + t];
    for h in 0..heads.num_heads {
        let c0 = h * hd;
        let mut packed = keep.as_ref().map(|_| PackedProbs::new(offset, t));
        for i in 0..t {
            let n = offset + i + 1;
            let qi = &qs[i * d + c0..i * d + c0 + hd];
            let p = &mut row_buf[..n];
            let mut max = f64::NEG_INFINITY;
            for (j, pj) in p.iter_mut().enumerate() {
                let kj = &ks[j * d + c0..j * d + c0 + hd];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                *pj = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for pj in p.iter_mut() {
                *pj = (*pj - max).exp();
                sum += *pj;
            }
            let inv = 1.0 / sum;
            let oi = &mut os[i * d + c0..i * d + c0 + hd];
            for (j, pj) in p.iter_mut().enumerate() {
                *pj *= inv;
                let vj = &vs[j * d + c0..j * d + c0 + hd];
                for (o, v) in oi.iter_mut().zip(vj) {
                    *o += *pj * v;
                }
            }
            if let Some(pk) = packed.as_mut() {
                pk.row_mut(i).copy_from_slice(p);
            }
            if let Some(m) = map.as_deref_mut() {
                let mut row = m.row_mut(i);
                for (j, pj) in p.iter().enumerate() {
                    row[j] += pj;
                }
            }
        }
        if let (Some(list), Some(pk)) = (keep.as_deref_mut(), packed) {
            list.push(pk);
        }
    }
    out
}

/// Gradients `(dq, dk, dv)` given the output gradient `dout` and kept probabilities.
pub(crate) fn backward(
    heads: &Heads,
    q: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    probs: &[PackedProbs],
    dout: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t, d) = q.dim();
    let nk = keys.nrows();
    let hd = heads.head_dim;
    let scale = heads.scale();
    let qs = q.as_slice().expect("standard layout");
    let ks = keys.as_slice().expect("standard layout");
    let vs = values.as_slice().expect("standard layout");
    let gs = dout.as_slice().expect("standard layout");
    let mut dq = Array2::<f64>::zeros((t, d));
    let mut dk = Array2::<f64>::zeros((nk, d));
    let mut dv = Array2::<f64>::zeros((nk, d));
    let (dqs, dks, dvs) = (
        dq.as_slice_mut().expect("standard layout"),
        dk.as_slice_mut().expect("standard layout"),
        dv.as_slice_mut().expect("standard layout"),
    );
    let mut dp = vec![0.0; nk];
    for (h, pk) in probs.iter().enumerate() {
        let c0 = h * hd;
        for i in 0..t {
            let p = pk.row(i);
            let gi = &gs[i * d + c0..i * d + c0 + hd];
            let mut inner = 0.0;
            for (j, &pj) in p.iter().enumerate() {
                let vj = &vs[j * d + c0..j * d + c0 + hd];
                let g = gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                dp[j] = g;
                inner += pj * g;
                let dvj = &mut dvs[j * d + c0..j * d + c0 + hd];
                for (dvv, gg) in dvj.iter_mut().zip(gi) {
                    *dvv += pj * gg;
                }
            }
            let qi = &qs[i * d + c0..i * d + c0 + hd];
            for (j, &pj) in p.iter().enumerate() {
                let ds = pj * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &ks[j * d + c0..j * d + c0 + hd];
                let dqi = &mut dqs[i * d + c0..i * d + c0 + hd];
                for (a, b) in dqi.iter_mut().zip(kj) {
                    *a += ds * b;
                }
                let dkj = &mut dks[j * d + c0..j * d + c0 + hd];
                for (a, b) in dkj.iter_mut().zip(qi) {
                    *a += ds * b;
                }
            }
        }
    }
    (dq, dk, dv)
}
