//! Joint full-sum training of the label posterior network and the transition model.
//!
//! One step: encoder forward per utterance, gather posteriors along the chain,
//! forward-backward, scatter `-lpm * gamma` back onto the `T x K` output,
//! transition gradients from the arc posteriors, backprop, sum over the batch,
//! add L2 once, then a Nadam update at the scheduled learning rate.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::alignment::{viterbi_align, Alignment};
use crate::config::{TmKindName, TrainConfig};
use crate::datasets::{Corpus, Utterance};
use crate::encoder::{Encoder, EncoderConfig, EncoderGrads};
use crate::error::{Error, Result};
use crate::lattice::{forward_backward, gather_log_phi, loss_and_grads, scatter_log_phi_grad, LatticeStats, Scales};
use crate::optim::{Nadam, OneCycle};
use crate::topology::LabelInventory;
use crate::transition::{InitStrategy, TransitionGrads, TransitionKind, TransitionModel};
use crate::{mix_seed, Real};

/// Floor applied to prior counts before normalization.
pub const PRIOR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub inventory: LabelInventory,
    pub config: TrainConfig,
    pub encoder: Encoder<T>,
    pub tm: TransitionModel<T>,
    /// Label prior, sums to one.
    pub prior: Vec<T>,
    /// Optimizer updates applied so far, across all phases.
    pub step: u64,
}

pub fn transition_kind(name: TmKindName, encoder: &EncoderConfig) -> TransitionKind {
    match name {
        TmKindName::Fixed => TransitionKind::Fixed,
        TmKindName::SpeechSilence => TransitionKind::SpeechSilence,
        TmKindName::SubstateSilence => TransitionKind::SubstateSilence,
        TmKindName::Full => TransitionKind::Full,
        TmKindName::FullInput => TransitionKind::FullInput { input_dim: encoder.encoder_out_dim() },
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: TrainConfig, inventory: LabelInventory, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let enc_cfg = EncoderConfig {
            input_dim,
            context: config.context,
            hidden: config.hidden.clone(),
            activation: config.activation,
            output_dim: inventory.len(),
            dropout: config.dropout,
        };
        let kind = transition_kind(config.tm_kind, &enc_cfg);
        let encoder = Encoder::init(enc_cfg, mix_seed(config.seed, 1))?;
        let tm = TransitionModel::init(kind, &inventory, config.tm_init, mix_seed(config.seed, 2));
        let k = inventory.len();
        Ok(Self { inventory, config, encoder, tm, prior: vec![T::one() / T::lit(k as f64); k], step: 0 })
    }

    pub fn scales(&self) -> Scales<T> {
        Scales::new(T::lit(self.config.lpm_scale), T::lit(self.config.tm_scale))
    }

    pub fn log_prior(&self) -> Array1<T> {
        self.prior.iter().map(|p| p.ln()).collect()
    }

    /// Eval-mode label posteriors and lattice inputs for one utterance.
    pub fn lattice_inputs(
        &self,
        utt: &Utterance<T>,
        prior: Option<(ArrayView1<'_, T>, T)>,
    ) -> Result<(Array2<T>, crate::transition::TransitionField<T>)> {
        let out = self.encoder.forward(utt.features.view(), false, 0)?;
        let frames = utt.features.nrows();
        let mut log_phi = gather_log_phi(out.log_probs.view(), &utt.chain);
        if let Some((lp, scale)) = prior {
            apply_prior(&mut log_phi, &utt.chain, lp, scale);
        }
        let field = self.tm.evaluate(
            &utt.chain,
            frames,
            (!self.tm.kind().is_time_invariant()).then(|| out.encoder_out.view()),
        )?;
        Ok((log_phi, field))
    }

    pub fn lattice_stats(&self, utt: &Utterance<T>) -> Result<LatticeStats<T>> {
        let (log_phi, field) = self.lattice_inputs(utt, None)?;
        forward_backward(log_phi.view(), &field, self.scales())
    }

    /// Viterbi forced alignment with prior correction at `prior_scale`.
    pub fn align(&self, utt: &Utterance<T>, prior_scale: T) -> Result<(Alignment, T)> {
        let (log_phi, field) = self.lattice_inputs(utt, None)?;
        let log_prior = self.log_prior();
        viterbi_align(
            &utt.id,
            &utt.chain,
            self.inventory.tokens(),
            log_phi.view(),
            &field,
            self.scales(),
            Some(log_prior.view()),
            prior_scale,
        )
    }

    /// Total objective of a batch in eval mode: summed `-L` plus the L2 penalty.
    pub fn objective(&self, batch: &[&Utterance<T>]) -> Result<T> {
        let mut total = self.l2_penalty();
        for u in batch {
            let (log_phi, field) = self.lattice_inputs(u, None)?;
            total -= forward_backward(log_phi.view(), &field, self.scales())?.log_likelihood;
        }
        Ok(total)
    }

    pub fn l2_penalty(&self) -> T {
        let l2 = T::lit(self.config.l2);
        let head: T = self.tm.head.as_ref().map_or(T::zero(), |w| w.iter().map(|&x| x * x).sum());
        self.encoder.l2_penalty(l2) + T::lit(0.5) * l2 * head
    }
}

fn apply_prior<T: Real>(
    log_phi: &mut Array2<T>,
    chain: &crate::topology::StateChain,
    log_prior: ArrayView1<'_, T>,
    scale: T,
) {
    for ((_, s), v) in log_phi.indexed_iter_mut() {
        *v -= scale * log_prior[chain.state(s).label.0];
    }
}

/// Per-step switches.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions<'a, T> {
    pub train_mode: bool,
    pub update_tm: bool,
    /// Log prior and its scale subtracted from the lattice posteriors.
    pub prior: Option<(ArrayView1<'a, T>, T)>,
}

/// Summed gradients of a batch.
#[derive(Debug, Clone)]
pub struct BatchGrads<T> {
    pub encoder: EncoderGrads<T>,
    pub tm: TransitionGrads<T>,
    /// Summed `-L` over used utterances (without L2).
    pub loss: T,
    pub frames: usize,
    pub skipped: Vec<String>,
}

struct UttGrads<T> {
    encoder: EncoderGrads<T>,
    tm: TransitionGrads<T>,
    loss: T,
    frames: usize,
}

fn utterance_grads<T: Real>(
    model: &Model<T>,
    utt: &Utterance<T>,
    opts: StepOptions<'_, T>,
    seed: u64,
) -> Result<Option<UttGrads<T>>> {
    let frames = utt.features.nrows();
    if !utt.chain.feasible(frames) {
        return Ok(None);
    }
    let out = model.encoder.forward(utt.features.view(), opts.train_mode, seed)?;
    let mut log_phi = gather_log_phi(out.log_probs.view(), &utt.chain);
    if let Some((lp, scale)) = opts.prior {
        apply_prior(&mut log_phi, &utt.chain, lp, scale);
    }
    let enc_out = (!model.tm.kind().is_time_invariant()).then(|| out.encoder_out.view());
    let field = model.tm.evaluate(&utt.chain, frames, enc_out)?;
    let scales = model.scales();
    let res = loss_and_grads(log_phi.view(), &field, scales).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFiniteLoss(utt.id.clone()),
        other => other,
    })?;
    if !res.loss.is_finite() {
        return Err(Error::NonFiniteLoss(utt.id.clone()));
    }
    let mut d_log_probs = Array2::zeros(out.log_probs.dim());
    scatter_log_phi_grad(res.d_log_phi.view(), &utt.chain, &mut d_log_probs);
    let tm =
        model.tm.accumulate_grad(&utt.chain, res.stats.xi_loop.view(), res.stats.xi_fwd.view(), scales.tm, enc_out)?;
    let d_enc_out = if opts.update_tm { tm.encoder_out.as_ref().map(|g| g.view()) } else { None };
    let encoder = model.encoder.backward(&out.cache, d_log_probs.view(), d_enc_out, T::zero())?;
    Ok(Some(UttGrads { encoder, tm, loss: res.loss, frames }))
}

/// Seed for the dropout masks of one utterance in one step.
fn dropout_seed(master: u64, step: u64, position: usize) -> u64 {
    mix_seed(mix_seed(master, 0x64726f70 ^ step), position as u64)
}

/// Gradients of the batch objective (summed utterance losses plus L2).
/// Utterances run in parallel on the current rayon pool; the reduction is in
/// batch order so results do not depend on the thread count.
pub fn batch_grads<T: Real>(
    model: &Model<T>,
    batch: &[&Utterance<T>],
    opts: StepOptions<'_, T>,
) -> Result<BatchGrads<T>> {
    let per_utt: Vec<Result<Option<UttGrads<T>>>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, u)| utterance_grads(model, u, opts, dropout_seed(model.config.seed, model.step, i)))
        .collect();
    let mut grads = BatchGrads {
        encoder: EncoderGrads::zeros_like(&model.encoder),
        tm: TransitionGrads {
            logits: vec![T::zero(); model.tm.logits.len()],
            head: model.tm.head.as_ref().map(|w| Array2::zeros(w.dim())),
            encoder_out: None,
        },
        loss: T::zero(),
        frames: 0,
        skipped: Vec::new(),
    };
    for (u, r) in batch.iter().zip(per_utt) {
        match r? {
            None => grads.skipped.push(u.id.clone()),
            Some(g) => {
                grads.encoder.add_assign(&g.encoder);
                for (a, b) in grads.tm.logits.iter_mut().zip(&g.tm.logits) {
                    *a += *b;
                }
                if let (Some(a), Some(b)) = (&mut grads.tm.head, &g.tm.head) {
                    *a += b;
                }
                grads.loss += g.loss;
                grads.frames += g.frames;
            }
        }
    }
    let l2 = T::lit(model.config.l2);
    for (g, l) in grads.encoder.layers.iter_mut().zip(&model.encoder.layers) {
        g.weight.scaled_add(l2, &l.weight);
    }
    if let (Some(g), Some(w)) = (&mut grads.tm.head, &model.tm.head) {
        g.scaled_add(l2, w);
    }
    Ok(grads)
}

/// Optimizer state for the encoder and the transition model.
#[derive(Debug, Clone)]
pub struct Optimizers<T> {
    pub encoder: Nadam<T>,
    pub tm: Nadam<T>,
}

impl<T: Real> Optimizers<T> {
    pub fn new(model: &Model<T>) -> Self {
        let enc: Vec<usize> = model.encoder.layers.iter().flat_map(|l| [l.weight.len(), l.bias.len()]).collect();
        let mut tm = vec![model.tm.logits.len()];
        if let Some(w) = &model.tm.head {
            tm.push(w.len());
        }
        Self { encoder: Nadam::new(&enc), tm: Nadam::new(&tm) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Summed `-L` over the utterances used.
    pub loss: f64,
    pub frames: usize,
    pub skipped: Vec<String>,
    pub lr: f64,
}

/// One optimizer update on a batch. A non-finite loss aborts the step before
/// any parameter changes.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    optim: &mut Optimizers<T>,
    batch: &[&Utterance<T>],
    lr: f64,
    opts: StepOptions<'_, T>,
) -> Result<StepReport> {
    let grads = batch_grads(model, batch, opts)?;
    let lr_t = T::lit(lr);
    {
        let enc_grads = grads.encoder.slices();
        optim.encoder.update(model.encoder.params_mut(), &enc_grads, lr_t);
    }
    if opts.update_tm && model.tm.kind().is_trainable() {
        let mut params: Vec<&mut [T]> = vec![&mut model.tm.logits[..]];
        let mut tm_grads: Vec<&[T]> = vec![&grads.tm.logits[..]];
        if let (Some(w), Some(g)) = (&mut model.tm.head, &grads.tm.head) {
            params.push(w.as_slice_mut().expect("standard layout"));
            tm_grads.push(g.as_slice().expect("standard layout"));
        }
        optim.tm.update(params, &tm_grads, lr_t);
    }
    model.step += 1;
    Ok(StepReport { loss: grads.loss.to_f64_lossy(), frames: grads.frames, skipped: grads.skipped, lr })
}

/// Label prior as the occupancy-weighted label frequency over a corpus,
/// floored at [`PRIOR_FLOOR`] and normalized.
pub fn estimate_prior<T: Real>(model: &Model<T>, utterances: &[Utterance<T>]) -> Result<Vec<T>> {
    if utterances.is_empty() {
        return Err(Error::Invalid("cannot estimate a prior from an empty corpus".into()));
    }
    let k = model.inventory.len();
    let per_utt: Vec<Result<Option<Vec<T>>>> = utterances
        .par_iter()
        .map(|u| {
            if !u.chain.feasible(u.features.nrows()) {
                return Ok(None);
            }
            let st = model.lattice_stats(u)?;
            let mut counts = vec![T::zero(); k];
            for ((_, s), &g) in st.gamma.indexed_iter() {
                let l = u.chain.state(s).label.0;
                counts[l] += g;
            }
            Ok(Some(counts))
        })
        .collect();
    let mut counts = vec![T::zero(); k];
    for c in per_utt {
        if let Some(c) = c? {
            for (a, b) in counts.iter_mut().zip(c) {
                *a += b;
            }
        }
    }
    let floor = T::lit(PRIOR_FLOOR);
    counts.iter_mut().for_each(|c| *c = c.max(floor));
    let total: T = counts.iter().copied().sum();
    Ok(counts.into_iter().map(|c| c / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainMode {
    None,
    Plain,
    WithPrior,
}

impl std::str::FromStr for PretrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PretrainMode::None),
            "plain" => Ok(PretrainMode::Plain),
            "prior" | "with_prior" => Ok(PretrainMode::WithPrior),
            other => Err(Error::Config(format!("unknown pretrain mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based within its phase.
    pub epoch: usize,
    pub pretraining: bool,
    /// Mean `-L` per frame over the epoch.
    pub loss_per_frame: f64,
    pub skipped: usize,
    pub forward_probs: Vec<f64>,
}

fn batches<T>(utterances: &[Utterance<T>], batch_size: usize, seed: u64) -> Vec<Vec<&Utterance<T>>> {
    let mut order: Vec<&Utterance<T>> = utterances.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size).map(<[_]>::to_vec).collect()
}

fn steps_per_epoch(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size) as u64
}

#[allow(clippy::too_many_arguments)]
fn run_epochs<T: Real>(
    model: &mut Model<T>,
    utterances: &[Utterance<T>],
    epochs: usize,
    update_tm: bool,
    prior_mode: bool,
    pretraining: bool,
    phase_seed: u64,
    on_epoch: &mut dyn FnMut(&EpochReport, &Model<T>) -> Result<()>,
) -> Result<()> {
    let cfg = model.config.clone();
    let schedule = OneCycle {
        lr_min: cfg.lr_min,
        lr_max: cfg.lr_max,
        cycle_fraction: cfg.cycle_fraction,
        total_steps: epochs as u64 * steps_per_epoch(utterances.len(), cfg.batch_size),
    };
    let mut optim = Optimizers::new(model);
    let mut phase_step = 0u64;
    for epoch in 0..epochs {
        let log_prior = if prior_mode {
            model.prior = estimate_prior(model, utterances)?;
            Some(model.log_prior())
        } else {
            None
        };
        let (mut loss, mut frames, mut skipped) = (0.0, 0usize, 0usize);
        for batch in batches(utterances, cfg.batch_size, mix_seed(phase_seed, epoch as u64)) {
            let opts = StepOptions {
                train_mode: true,
                update_tm,
                prior: log_prior.as_ref().map(|p| (p.view(), T::lit(cfg.prior_scale))),
            };
            let rep = train_step(model, &mut optim, &batch, schedule.lr(phase_step), opts)?;
            phase_step += 1;
            loss += rep.loss;
            frames += rep.frames;
            skipped += rep.skipped.len();
        }
        let report = EpochReport {
            epoch: epoch + 1,
            pretraining,
            loss_per_frame: if frames > 0 { loss / frames as f64 } else { f64::NAN },
            skipped,
            forward_probs: model.tm.forward_probs().iter().map(|p| p.to_f64_lossy()).collect(),
        };
        on_epoch(&report, model)?;
    }
    Ok(())
}

/// Trains with the transition model frozen at guessed values, then restores
/// the transition parameters the model had before.
pub fn pretrain<T: Real>(
    model: &mut Model<T>,
    utterances: &[Utterance<T>],
    epochs: usize,
    mode: PretrainMode,
    on_epoch: &mut dyn FnMut(&EpochReport, &Model<T>) -> Result<()>,
) -> Result<()> {
    if epochs == 0 || mode == PretrainMode::None {
        return Ok(());
    }
    let saved = model.tm.clone();
    let mut guessed = TransitionModel::init(saved.kind(), &model.inventory, InitStrategy::Guessed, 0);
    if let Some(w) = &mut guessed.head {
        w.fill(T::zero());
    }
    model.tm = guessed;
    let seed = mix_seed(model.config.seed, 0x70726574);
    run_epochs(model, utterances, epochs, false, mode == PretrainMode::WithPrior, true, seed, on_epoch)?;
    model.tm = saved;
    Ok(())
}

/// Runs the main training phase for `config.epochs` epochs.
pub fn train<T: Real>(
    model: &mut Model<T>,
    utterances: &[Utterance<T>],
    on_epoch: &mut dyn FnMut(&EpochReport, &Model<T>) -> Result<()>,
) -> Result<()> {
    let epochs = model.config.epochs;
    let seed = mix_seed(model.config.seed, 0x6d61696e);
    let update_tm = model.tm.kind().is_trainable();
    run_epochs(model, utterances, epochs, update_tm, false, false, seed, on_epoch)
}

/// Full recipe: optional pretraining, main training, then prior estimation.
pub fn fit<T: Real>(
    model: &mut Model<T>,
    corpus: &Corpus<T>,
    pretrain_mode: PretrainMode,
    on_epoch: &mut dyn FnMut(&EpochReport, &Model<T>) -> Result<()>,
) -> Result<()> {
    if corpus.utterances.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    let pre_epochs = model.config.pretrain_epochs;
    pretrain(model, &corpus.utterances, pre_epochs, pretrain_mode, on_epoch)?;
    train(model, &corpus.utterances, on_epoch)?;
    model.prior = estimate_prior(model, &corpus.utterances)?;
    Ok(())
}

/// Aligns every feasible utterance; infeasible ones are returned by id.
pub fn align_corpus<T: Real>(
    model: &Model<T>,
    utterances: &[Utterance<T>],
    prior_scale: f64,
) -> Result<(Vec<Alignment>, Vec<String>)> {
    let results: Vec<Result<Option<Alignment>>> = utterances
        .par_iter()
        .map(|u| {
            if !u.chain.feasible(u.features.nrows()) {
                return Ok(None);
            }
            model.align(u, T::lit(prior_scale)).map(|(a, _)| Some(a))
        })
        .collect();
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for (u, r) in utterances.iter().zip(results) {
        match r? {
            Some(a) => out.push(a),
            None => skipped.push(u.id.clone()),
        }
    }
    Ok((out, skipped))
}
