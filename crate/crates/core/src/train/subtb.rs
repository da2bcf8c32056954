//! Sub-trajectory balance objective over one trajectory.
//!
//! A trajectory `s_0 -> ... -> s_n -> sink` has `n + 2` points. Point `k`
//! carries a log flow `LF_k` and transition `t` (from point `t` to `t + 1`)
//! carries `log p_F` and `log p_B`. The last transition is the terminate edge,
//! whose backward log-probability is zero and whose end point carries the
//! log reward.
//!
//! With `A_k = sum_{t<k} (log p_F(t) - log p_B(t))` and `c_k = A_k - LF_k`, the
//! residual of the sub-trajectory `i..j` is `c_j - c_i`.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryTerms {
    /// One per transition, terminate edge last.
    pub log_pf: Vec<f64>,
    /// One per transition; the terminate edge entry is zero.
    pub log_pb: Vec<f64>,
    /// One per point; the last entry is the log reward.
    pub log_flow: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TermGradients {
    pub log_pf: Vec<f64>,
    pub log_pb: Vec<f64>,
    pub log_flow: Vec<f64>,
}

impl TrajectoryTerms {
    pub fn num_points(&self) -> usize {
        self.log_flow.len()
    }

    fn offsets(&self) -> Vec<f64> {
        debug_assert_eq!(self.log_pf.len() + 1, self.log_flow.len());
        let mut acc = 0.0;
        let mut c = Vec::with_capacity(self.log_flow.len());
        c.push(-self.log_flow[0]);
        for (t, lf) in self.log_flow[1..].iter().enumerate() {
            acc += self.log_pf[t] - self.log_pb[t];
            c.push(acc - lf);
        }
        c
    }
}

/// `w[d]` proportional to `lambda^d` for `d = 0..points`, scaled so the
/// largest entry is one.
fn geometric_weights(points: usize, lambda: f64) -> Vec<f64> {
    let log_l = math::ln(lambda);
    let top = if lambda >= 1.0 { points as f64 - 1.0 } else { 1.0 };
    (0..points).map(|d| math::exp((d as f64 - top) * log_l)).collect()
}

/// Weighted mean of squared sub-trajectory residuals, weight `lambda^(j-i)`.
pub fn subtb_loss(terms: &TrajectoryTerms, lambda: f64) -> f64 {
    let c = terms.offsets();
    let w = geometric_weights(c.len(), lambda);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            let r = c[j] - c[i];
            num += w[j - i] * r * r;
            den += w[j - i];
        }
    }
    num / den
}

/// Loss times `scale` and its gradient with respect to every term.
pub fn subtb_loss_grad(terms: &TrajectoryTerms, lambda: f64, scale: f64) -> (f64, TermGradients) {
    let c = terms.offsets();
    let points = c.len();
    let w = geometric_weights(points, lambda);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut dc = vec![0.0; points];
    for i in 0..points {
        for j in i + 1..points {
            let r = c[j] - c[i];
            num += w[j - i] * r * r;
            den += w[j - i];
            dc[j] += w[j - i] * r;
            dc[i] -= w[j - i] * r;
        }
    }
    let k = 2.0 * scale / den;
    for d in &mut dc {
        *d *= k;
    }
    let log_flow = dc.iter().map(|d| -d).collect();
    // dA_k = dc_k and A_k sums transitions t < k.
    let mut log_pf = vec![0.0; points - 1];
    let mut acc = 0.0;
    for t in (0..points - 1).rev() {
        acc += dc[t + 1];
        log_pf[t] = acc;
    }
    let log_pb = log_pf.iter().map(|g| -g).collect();
    (scale * num / den, TermGradients { log_pf, log_pb, log_flow })
}
