//! Adam with Nesterov momentum and the one-cycle learning-rate schedule.

use crate::Real;

/// Adam with Nesterov momentum (Dozat), without the momentum decay schedule.
///
/// For gradient `g` at step `t` (1-based):
///
/// ```text
/// m = b1 * m + (1 - b1) * g
/// v = b2 * v + (1 - b2) * g^2
/// m_hat = b1 * m / (1 - b1^(t+1)) + (1 - b1) * g / (1 - b1^t)
/// v_hat = v / (1 - b2^t)
/// theta -= lr * m_hat / (sqrt(v_hat) + eps)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Nadam<T> {
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> Nadam<T> {
    /// Zeroed moments for parameter groups of the given lengths.
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
            first: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` must list groups in the order
    /// given to [`Nadam::new`].
    pub fn update(&mut self, params: Vec<&mut [T]>, grads: &[&[T]], lr: T) {
        assert_eq!(params.len(), self.first.len(), "parameter group count changed");
        assert_eq!(grads.len(), self.first.len(), "gradient group count changed");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let one = T::one();
        let m_corr = one - b1.powi(t + 1);
        let g_corr = one - b1.powi(t);
        let v_corr = one - b2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = b1 * m[i] / m_corr + (one - b1) * gi / g_corr;
                let v_hat = v[i] / v_corr;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Single-cycle triangular schedule: linear warm-up from `lr_min` to `lr_max`
/// over the first half of the cycle, linear decay back over the second half,
/// then constant at `lr_min`. The cycle covers `cycle_fraction` of all steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycle_fraction: f64,
    pub total_steps: u64,
}

impl OneCycle {
    pub const DEFAULT_LR_MIN: f64 = 1.2e-5;
    pub const DEFAULT_LR_MAX: f64 = 3.0e-4;
    pub const DEFAULT_CYCLE_FRACTION: f64 = 0.8;

    pub fn new(total_steps: u64) -> Self {
        Self {
            lr_min: Self::DEFAULT_LR_MIN,
            lr_max: Self::DEFAULT_LR_MAX,
            cycle_fraction: Self::DEFAULT_CYCLE_FRACTION,
            total_steps,
        }
    }

    pub fn cycle_steps(&self) -> f64 {
        (self.cycle_fraction * self.total_steps as f64).max(0.0)
    }

    pub fn lr(&self, step: u64) -> f64 {
        let cycle = self.cycle_steps();
        let half = cycle / 2.0;
        let s = step as f64;
        if half <= 0.0 || s >= cycle {
            return self.lr_min;
        }
        let frac = if s <= half { s / half } else { (cycle - s) / half };
        self.lr_min + (self.lr_max - self.lr_min) * frac
    }
}
