//! Numerical self-checks: the lattice against path enumeration, and every
//! analytic gradient against central finite differences. Used by the test
//! suites and the `check` command.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{TmKindName, TrainConfig};
use crate::datasets::Utterance;
use crate::error::Result;
use crate::lattice::{brute_force, forward_backward, loss_and_grads, Scales};
use crate::topology::{expand_labels, LabelId, LabelInventory, SilenceMode, StateChain};
use crate::trainer::{batch_grads, Model, StepOptions};
use crate::transition::{InitStrategy, TransitionField, TransitionKind, TransitionModel};

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Random log posteriors, per-cell transition probabilities and scales.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    frames: usize,
    states: usize,
) -> (Array2<f64>, TransitionField<f64>, Scales<f64>) {
    let log_phi = Array2::from_shape_fn((frames, states), |_| rng.random_range(0.01f64..1.0).ln());
    let p = Array2::from_shape_fn((frames, states), |_| rng.random_range(0.02f64..0.98));
    let field = TransitionField { log_forward: p.mapv(f64::ln), log_loop: p.mapv(|v| (1.0 - v).ln()) };
    let scales = Scales::new(rng.random_range(0.0..=1.5), rng.random_range(0.0..=1.5));
    (log_phi, field, scales)
}

/// Worst deviations of the lattice from path enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OracleErrors {
    /// Absolute log-likelihood difference.
    pub log_likelihood: f64,
    /// Absolute difference of gamma and both xi matrices.
    pub posteriors: f64,
    /// See [`crate::lattice::LatticeStats::normalization_error`].
    pub normalization: f64,
    pub instances: usize,
}

impl OracleErrors {
    pub fn max(&self) -> f64 {
        self.log_likelihood.max(self.posteriors).max(self.normalization)
    }
}

/// Compares the lattice with path enumeration on random instances with
/// `T <= 8` and `S <= 5`.
pub fn lattice_oracle_error(seed: u64, instances: usize) -> Result<OracleErrors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = OracleErrors { instances, ..OracleErrors::default() };
    for _ in 0..instances {
        let states = rng.random_range(1..=5);
        let frames = rng.random_range(states..=8);
        let (log_phi, field, scales) = random_instance(&mut rng, frames, states);
        let fast = forward_backward(log_phi.view(), &field, scales)?;
        let slow = brute_force(log_phi.view(), &field, scales)?;
        e.log_likelihood = e.log_likelihood.max((fast.log_likelihood - slow.log_likelihood).abs());
        e.posteriors = e.posteriors.max(fast.max_posterior_diff(&slow));
        e.normalization = e.normalization.max(fast.normalization_error());
    }
    Ok(e)
}

/// Largest relative error of `d(-L)/d log phi` over random instances.
pub fn log_phi_grad_error(seed: u64, instances: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let states = rng.random_range(1..=5);
        let frames = rng.random_range(states..=10);
        let (log_phi, field, scales) = random_instance(&mut rng, frames, states);
        let res = loss_and_grads(log_phi.view(), &field, scales)?;
        for ((t, s), &g) in res.d_log_phi.indexed_iter() {
            let numeric = central_difference(
                |x| {
                    let mut lp = log_phi.clone();
                    lp[[t, s]] = x;
                    loss_and_grads(lp.view(), &field, scales).map(|r| r.loss).unwrap_or(f64::NAN)
                },
                log_phi[[t, s]],
            );
            worst = worst.max(relative_error(g, numeric));
        }
    }
    Ok(worst)
}

fn test_inventory() -> LabelInventory {
    LabelInventory::with_substates(&["sil", "A", "B", "C"], "sil", 2, 2).expect("valid inventory")
}

fn random_chain<R: Rng>(rng: &mut R, inv: &LabelInventory) -> StateChain {
    let n = rng.random_range(1..=3);
    let labels: Vec<LabelId> = (0..n).map(|_| LabelId(rng.random_range(1..inv.len()))).collect();
    expand_labels(&labels, inv, SilenceMode::MandatoryEnds).expect("valid labels")
}

fn all_kinds(input_dim: usize) -> [TransitionKind; 5] {
    [
        TransitionKind::Fixed,
        TransitionKind::SpeechSilence,
        TransitionKind::SubstateSilence,
        TransitionKind::Full,
        TransitionKind::FullInput { input_dim },
    ]
}

/// Largest relative error of the transition gradients (logits, head weights
/// and, for input-dependent kinds, the encoder output) for one kind.
pub fn transition_grad_error(kind: TransitionKind, seed: u64, instances: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv = test_inventory();
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut tm = TransitionModel::<f64>::init(kind, &inv, InitStrategy::Random, seed ^ i as u64);
        if let Some(w) = &mut tm.head {
            w.mapv_inplace(|_| 0.5 * rng.sample::<f64, _>(StandardNormal));
        }
        let chain = random_chain(&mut rng, &inv);
        let frames = chain.len() + rng.random_range(0..5);
        let (log_phi, _, scales) = random_instance(&mut rng, frames, chain.len());
        let enc = match kind {
            TransitionKind::FullInput { input_dim } => {
                Some(Array2::from_shape_fn((frames, input_dim), |_| StandardNormal.sample(&mut rng)))
            }
            _ => None,
        };
        let loss = |tm: &TransitionModel<f64>, enc: Option<&Array2<f64>>| -> f64 {
            let field = tm.evaluate(&chain, frames, enc.map(|e| e.view())).expect("shapes");
            forward_backward(log_phi.view(), &field, scales).map(|s| -s.log_likelihood).unwrap_or(f64::NAN)
        };
        let field = tm.evaluate(&chain, frames, enc.as_ref().map(|e| e.view()))?;
        let stats = forward_backward(log_phi.view(), &field, scales)?;
        let g = tm.accumulate_grad(
            &chain,
            stats.xi_loop.view(),
            stats.xi_fwd.view(),
            scales.tm,
            enc.as_ref().map(|e| e.view()),
        )?;

        for k in 0..tm.logits.len() {
            let numeric = central_difference(
                |x| {
                    let mut m = tm.clone();
                    m.logits[k] = x;
                    loss(&m, enc.as_ref())
                },
                tm.logits[k],
            );
            let analytic = if kind.is_trainable() { g.logits[k] } else { 0.0 };
            let numeric = if kind.is_trainable() { numeric } else { 0.0 };
            worst = worst.max(relative_error(analytic, numeric));
        }
        if let (Some(w), Some(gw)) = (&tm.head, &g.head) {
            for (idx, &a) in gw.indexed_iter() {
                let numeric = central_difference(
                    |x| {
                        let mut m = tm.clone();
                        m.head.as_mut().expect("head")[idx] = x;
                        loss(&m, enc.as_ref())
                    },
                    w[idx],
                );
                worst = worst.max(relative_error(a, numeric));
            }
        }
        if let (Some(e), Some(ge)) = (&enc, &g.encoder_out) {
            for (idx, &a) in ge.indexed_iter() {
                let numeric = central_difference(
                    |x| {
                        let mut e2 = e.clone();
                        e2[idx] = x;
                        loss(&tm, Some(&e2))
                    },
                    e[idx],
                );
                worst = worst.max(relative_error(a, numeric));
            }
        }
    }
    Ok(worst)
}

const TINY_INPUT_DIM: usize = 4;
const TINY_FRAMES: usize = 6;

/// A tiny model (`D = 4`, `K = 3`) and a batch of three 6-frame utterances.
pub fn tiny_model(kind: TmKindName, seed: u64) -> Result<(Model<f64>, Vec<Utterance<f64>>)> {
    let inv = LabelInventory::with_substates(&["sil", "A", "B"], "sil", 2, 1)?;
    let config = TrainConfig {
        context: 1,
        hidden: vec![5, 4],
        tm_kind: kind,
        tm_init: InitStrategy::Random,
        dropout: 0.0,
        seed,
        ..TrainConfig::default()
    };
    let mut model = Model::new(config, inv.clone(), TINY_INPUT_DIM)?;
    if let Some(w) = &mut model.tm.head {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        w.mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
    let mut utts = Vec::new();
    for (i, text) in ["A B", "B", "A A"].iter().enumerate() {
        let labels = inv.parse(text)?;
        let chain = expand_labels(&labels, &inv, SilenceMode::MandatoryEnds)?;
        let features = Array2::from_shape_fn((TINY_FRAMES, TINY_INPUT_DIM), |_| StandardNormal.sample(&mut rng));
        utts.push(Utterance { id: format!("t{i}"), labels, chain, features });
    }
    Ok((model, utts))
}

/// Largest relative error of the full training gradient (encoder and
/// transition parameters, including L2) for one transition kind.
pub fn end_to_end_grad_error(kind: TmKindName, seed: u64) -> Result<f64> {
    let (model, utts) = tiny_model(kind, seed)?;
    let batch: Vec<&Utterance<f64>> = utts.iter().collect();
    let grads = batch_grads(&model, &batch, StepOptions { train_mode: false, update_tm: true, prior: None })?;
    let objective = |m: &Model<f64>| m.objective(&batch).unwrap_or(f64::NAN);
    let mut worst = 0.0f64;

    let enc_grads: Vec<Vec<f64>> = grads.encoder.slices().iter().map(|s| s.to_vec()).collect();
    for (group, g) in enc_grads.iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let base = {
                let mut m = model.clone();
                m.encoder.params_mut()[group][j]
            };
            let numeric = central_difference(
                |x| {
                    let mut m = model.clone();
                    m.encoder.params_mut()[group][j] = x;
                    objective(&m)
                },
                base,
            );
            worst = worst.max(relative_error(a, numeric));
        }
    }
    if model.tm.kind().is_trainable() {
        for (k, &a) in grads.tm.logits.iter().enumerate() {
            let numeric = central_difference(
                |x| {
                    let mut m = model.clone();
                    m.tm.logits[k] = x;
                    objective(&m)
                },
                model.tm.logits[k],
            );
            worst = worst.max(relative_error(a, numeric));
        }
    }
    if let (Some(w), Some(gw)) = (&model.tm.head, &grads.tm.head) {
        for (idx, &a) in gw.indexed_iter() {
            let numeric = central_difference(
                |x| {
                    let mut m = model.clone();
                    m.tm.head.as_mut().expect("head")[idx] = x;
                    objective(&m)
                },
                w[idx],
            );
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub oracle: OracleErrors,
    pub log_phi_grad: f64,
    /// Per transition kind name.
    pub transition_grad: Vec<(&'static str, f64)>,
    /// Per transition kind name.
    pub end_to_end_grad: Vec<(&'static str, f64)>,
}

impl CheckReport {
    pub fn worst(&self) -> f64 {
        self.transition_grad
            .iter()
            .chain(&self.end_to_end_grad)
            .map(|(_, e)| *e)
            .fold(self.oracle.max().max(self.log_phi_grad), f64::max)
    }
}

/// Runs every suite; `instances` sets the number of random lattice instances.
pub fn run_checks(seed: u64, instances: usize) -> Result<CheckReport> {
    let kinds = all_kinds(4);
    let names = [
        TmKindName::Fixed,
        TmKindName::SpeechSilence,
        TmKindName::SubstateSilence,
        TmKindName::Full,
        TmKindName::FullInput,
    ];
    Ok(CheckReport {
        oracle: lattice_oracle_error(seed, instances)?,
        log_phi_grad: log_phi_grad_error(seed, instances.clamp(1, 20))?,
        transition_grad: kinds
            .iter()
            .map(|&k| Ok((k.name(), transition_grad_error(k, seed, 4)?)))
            .collect::<Result<_>>()?,
        end_to_end_grad: names
            .iter()
            .map(|&n| Ok((n.as_str(), end_to_end_grad_error(n, seed)?)))
            .collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_checks_pass() {
        let r = run_checks(3, 100).unwrap();
        assert!(r.oracle.max() < 1e-9, "{r:?}");
        assert!(r.worst() < 1e-4, "{r:?}");
    }
}
