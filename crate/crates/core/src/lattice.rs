//! Full-sum forward-backward over a linear loop/forward chain.
//!
//! For a chain of `S` states and `T` frames the scaled path weight is
//!
//! ```text
//! w(s_1..s_T) = sum_t lpm * log_phi[t][s_t] + sum_{t>=2} tm * log_psi_t(s_{t-1} -> s_t)
//! ```
//!
//! where `log_psi_t` is the loop or forward entry of the transition field at
//! row `t`. Paths start in state 0 at frame 0 and end in state `S - 1` at
//! frame `T - 1`. The log-likelihood is the log-sum-exp over all such paths.
//!
//! The library minimizes `loss = -log_likelihood`.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::logspace::log_add;
use crate::topology::StateChain;
use crate::transition::TransitionField;
use crate::Real;

/// Log-linear exponents on label posteriors and transition probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scales<T> {
    pub lpm: T,
    pub tm: T,
}

impl<T: Real> Scales<T> {
    pub fn new(lpm: T, tm: T) -> Self {
        Self { lpm, tm }
    }
}

impl<T: Real> Default for Scales<T> {
    fn default() -> Self {
        Self { lpm: T::lit(0.3), tm: T::lit(0.3) }
    }
}

/// Posteriors and likelihood produced by a forward-backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeStats<T> {
    /// Scaled sequence log-likelihood (maximized criterion).
    pub log_likelihood: T,
    /// `T x S` state occupancies.
    pub gamma: Array2<T>,
    /// `(T-1) x S` posterior of the loop arc leaving `s` at frame `t`.
    pub xi_loop: Array2<T>,
    /// `(T-1) x S` posterior of the forward arc `s -> s+1` leaving frame `t`;
    /// the last column is always zero.
    pub xi_fwd: Array2<T>,
}

/// Gathers `log_phi[t][s] = log_softmax[t][label(s)]` for a chain.
pub fn gather_log_phi<T: Real>(log_softmax: ArrayView2<'_, T>, chain: &StateChain) -> Array2<T> {
    Array2::from_shape_fn((log_softmax.nrows(), chain.len()), |(t, s)| log_softmax[[t, chain.state(s).label.0]])
}

/// Adds `d_log_phi` back into a `T x K` gradient, summing over repeated labels.
pub fn scatter_log_phi_grad<T: Real>(d_log_phi: ArrayView2<'_, T>, chain: &StateChain, d_log_softmax: &mut Array2<T>) {
    for t in 0..d_log_phi.nrows() {
        for s in 0..d_log_phi.ncols() {
            let k = chain.state(s).label.0;
            d_log_softmax[[t, k]] += d_log_phi[[t, s]];
        }
    }
}

fn validate<T: Real>(log_phi: ArrayView2<'_, T>, field: &TransitionField<T>) -> Result<(usize, usize)> {
    let (frames, states) = log_phi.dim();
    if states == 0 {
        return Err(Error::Shape("lattice needs at least one state".into()));
    }
    if field.log_forward.dim() != (frames, states) || field.log_loop.dim() != (frames, states) {
        return Err(Error::Shape(format!(
            "posteriors {:?} vs transition field {:?}",
            log_phi.dim(),
            field.log_forward.dim()
        )));
    }
    if frames < states {
        return Err(Error::Infeasible { states, frames });
    }
    if log_phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("label posteriors"));
    }
    if field.log_forward.iter().chain(field.log_loop.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("transition field"));
    }
    Ok((frames, states))
}

pub fn forward_backward<T: Real>(
    log_phi: ArrayView2<'_, T>,
    field: &TransitionField<T>,
    scales: Scales<T>,
) -> Result<LatticeStats<T>> {
    let (frames, states) = validate(log_phi, field)?;
    let ninf = T::neg_infinity();
    let lam = scales.lpm;
    let tau = scales.tm;
    let emit = |t: usize, s: usize| lam * log_phi[[t, s]];
    let lp_loop = |t: usize, s: usize| tau * field.log_loop[[t, s]];
    let lp_fwd = |t: usize, s: usize| tau * field.log_forward[[t, s]];

    let mut alpha = Array2::from_elem((frames, states), ninf);
    alpha[[0, 0]] = emit(0, 0);
    for t in 1..frames {
        // state s is reachable at frame t only if s <= t, and can still reach S-1 only if
        // S-1-s <= T-1-t; cells outside that band stay at -inf
        let lo = (states + t).saturating_sub(frames);
        let hi = t.min(states - 1);
        for s in lo..=hi {
            let stay = alpha[[t - 1, s]] + lp_loop(t, s);
            let enter = if s > 0 { alpha[[t - 1, s - 1]] + lp_fwd(t, s - 1) } else { ninf };
            alpha[[t, s]] = log_add(stay, enter) + emit(t, s);
        }
    }

    let mut beta = Array2::from_elem((frames, states), ninf);
    beta[[frames - 1, states - 1]] = T::zero();
    for t in (0..frames - 1).rev() {
        let lo = (states + t).saturating_sub(frames);
        let hi = t.min(states - 1);
        for s in lo..=hi {
            let stay = beta[[t + 1, s]] + emit(t + 1, s) + lp_loop(t + 1, s);
            let advance =
                if s + 1 < states { beta[[t + 1, s + 1]] + emit(t + 1, s + 1) + lp_fwd(t + 1, s) } else { ninf };
            beta[[t, s]] = log_add(stay, advance);
        }
    }

    let log_likelihood = alpha[[frames - 1, states - 1]];
    if !log_likelihood.is_finite() {
        return Err(Error::NonFinite("log-likelihood"));
    }

    let gamma = Array2::from_shape_fn((frames, states), |(t, s)| (alpha[[t, s]] + beta[[t, s]] - log_likelihood).exp());
    let xi_loop = Array2::from_shape_fn((frames - 1, states), |(t, s)| {
        (alpha[[t, s]] + lp_loop(t + 1, s) + emit(t + 1, s) + beta[[t + 1, s]] - log_likelihood).exp()
    });
    let xi_fwd = Array2::from_shape_fn((frames - 1, states), |(t, s)| {
        if s + 1 == states {
            return T::zero();
        }
        (alpha[[t, s]] + lp_fwd(t + 1, s) + emit(t + 1, s + 1) + beta[[t + 1, s + 1]] - log_likelihood).exp()
    });

    Ok(LatticeStats { log_likelihood, gamma, xi_loop, xi_fwd })
}

/// Loss and label-posterior gradient for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrads<T> {
    /// `-log_likelihood`.
    pub loss: T,
    /// `d loss / d log_phi = -lpm * gamma`.
    pub d_log_phi: Array2<T>,
    pub stats: LatticeStats<T>,
}

pub fn loss_and_grads<T: Real>(
    log_phi: ArrayView2<'_, T>,
    field: &TransitionField<T>,
    scales: Scales<T>,
) -> Result<LossAndGrads<T>> {
    let stats = forward_backward(log_phi, field, scales)?;
    let d_log_phi = stats.gamma.mapv(|g| -scales.lpm * g);
    Ok(LossAndGrads { loss: -stats.log_likelihood, d_log_phi, stats })
}

/// Most paths [`brute_force`] will enumerate.
pub const BRUTE_FORCE_MAX_PATHS: u128 = 1_000_000;

pub fn path_count(frames: usize, states: usize) -> u128 {
    if frames < states || states == 0 {
        return 0;
    }
    let n = (frames - 1) as u128;
    let k = (states - 1) as u128;
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Calls `visit` with every monotone state path of `frames` frames over `states` states.
pub fn for_each_path(frames: usize, states: usize, mut visit: impl FnMut(&[usize])) {
    if states == 0 || frames < states {
        return;
    }
    // forward steps happen at transitions c[0] < c[1] < ... among 1..frames
    let k = states - 1;
    let mut c: Vec<usize> = (1..=k).collect();
    let mut path = vec![0usize; frames];
    loop {
        let mut s = 0;
        let mut next = 0;
        for (t, slot) in path.iter_mut().enumerate() {
            if next < k && c[next] == t {
                s += 1;
                next += 1;
            }
            *slot = s;
        }
        visit(&path);
        // next combination of k elements from 1..frames in lexicographic order
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if c[i] < frames - k + i {
                c[i] += 1;
                for j in i + 1..k {
                    c[j] = c[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Scaled log weight of one explicit state path.
pub fn path_log_weight<T: Real>(
    path: &[usize],
    log_phi: ArrayView2<'_, T>,
    field: &TransitionField<T>,
    scales: Scales<T>,
) -> T {
    let mut w = T::zero();
    for (t, &s) in path.iter().enumerate() {
        w += scales.lpm * log_phi[[t, s]];
        if t > 0 {
            let prev = path[t - 1];
            let arc = if s == prev { field.log_loop[[t, prev]] } else { field.log_forward[[t, prev]] };
            w += scales.tm * arc;
        }
    }
    w
}

/// Enumerates every monotone path and computes the same statistics as
/// [`forward_backward`] directly from their posterior expectations.
pub fn brute_force<T: Real>(
    log_phi: ArrayView2<'_, T>,
    field: &TransitionField<T>,
    scales: Scales<T>,
) -> Result<LatticeStats<T>> {
    let (frames, states) = validate(log_phi, field)?;
    let n = path_count(frames, states);
    if n > BRUTE_FORCE_MAX_PATHS {
        return Err(Error::TooLarge(n));
    }

    let mut weights = Vec::with_capacity(n as usize);
    for_each_path(frames, states, |p| weights.push(path_log_weight(p, log_phi, field, scales)));
    let max = weights.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = weights.iter().map(|&w| (w - max).exp()).sum();
    let log_likelihood = max + total.ln();

    let mut gamma = Array2::zeros((frames, states));
    let mut xi_loop = Array2::zeros((frames - 1, states));
    let mut xi_fwd = Array2::zeros((frames - 1, states));
    let mut idx = 0;
    for_each_path(frames, states, |p| {
        let post = (weights[idx] - log_likelihood).exp();
        idx += 1;
        for (t, &s) in p.iter().enumerate() {
            gamma[[t, s]] += post;
            if t + 1 < frames {
                let target = if p[t + 1] == s { &mut xi_loop } else { &mut xi_fwd };
                target[[t, s]] += post;
            }
        }
    });

    Ok(LatticeStats { log_likelihood, gamma, xi_loop, xi_fwd })
}

impl<T: Real> LatticeStats<T> {
    /// Largest deviation from the normalization identities: rows of gamma sum
    /// to one, outgoing and incoming arc posteriors marginalize to gamma, and
    /// gamma is one-hot at both ends.
    pub fn normalization_error(&self) -> T {
        let (frames, states) = self.gamma.dim();
        let mut err = T::zero();
        for row in self.gamma.axis_iter(Axis(0)) {
            err = err.max((row.sum() - T::one()).abs());
        }
        for t in 0..frames - 1 {
            for s in 0..states {
                let out = self.xi_loop[[t, s]] + self.xi_fwd[[t, s]];
                err = err.max((out - self.gamma[[t, s]]).abs());
                let incoming = self.xi_loop[[t, s]] + if s > 0 { self.xi_fwd[[t, s - 1]] } else { T::zero() };
                err = err.max((incoming - self.gamma[[t + 1, s]]).abs());
            }
        }
        for s in 0..states {
            let first = if s == 0 { T::one() } else { T::zero() };
            let last = if s + 1 == states { T::one() } else { T::zero() };
            err = err.max((self.gamma[[0, s]] - first).abs());
            err = err.max((self.gamma[[frames - 1, s]] - last).abs());
        }
        err
    }

    /// Largest absolute difference of gamma and both xi matrices.
    pub fn max_posterior_diff(&self, other: &Self) -> T {
        let diff =
            |a: &Array2<T>, b: &Array2<T>| a.iter().zip(b.iter()).fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()));
        diff(&self.gamma, &other.gamma).max(diff(&self.xi_loop, &other.xi_loop)).max(diff(&self.xi_fwd, &other.xi_fwd))
    }
}
