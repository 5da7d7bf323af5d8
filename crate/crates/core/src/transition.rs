//! Learnable loop/forward transition models.
//!
//! Each parameter slot stores a logit `z` with `p_F = sigmoid(z)` and
//! `p_L = 1 - p_F = sigmoid(-z)`. Chain positions are mapped onto slots
//! according to the parametrization kind; the input-dependent kind computes
//! per-frame logits with a linear head over the encoder output.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::logspace::{log_sigmoid, logit, sigmoid};
use crate::topology::{ChainState, LabelInventory, StateChain};
use crate::Real;

/// Initial forward probability for speech states under guessed initialization.
pub const GUESSED_SPEECH_FORWARD: f64 = 1.0 / 3.0;
/// Initial forward probability for silence states under guessed initialization.
pub const GUESSED_SILENCE_FORWARD: f64 = 1.0 / 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionKind {
    /// Speech/silence shape, never updated.
    Fixed,
    SpeechSilence,
    SubstateSilence,
    Full,
    /// Per-frame logits from a linear head over an encoder output of width `input_dim`.
    FullInput {
        input_dim: usize,
    },
}

impl TransitionKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, TransitionKind::Fixed)
    }

    pub fn is_time_invariant(self) -> bool {
        !matches!(self, TransitionKind::FullInput { .. })
    }

    pub fn name(self) -> &'static str {
        match self {
            TransitionKind::Fixed => "fixed",
            TransitionKind::SpeechSilence => "speech_silence",
            TransitionKind::SubstateSilence => "substate_silence",
            TransitionKind::Full => "full",
            TransitionKind::FullInput { .. } => "full_input",
        }
    }
}

impl fmt::Display for TransitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    Guessed,
    Flat,
    Random,
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guessed" | "guess" => Ok(InitStrategy::Guessed),
            "flat" => Ok(InitStrategy::Flat),
            "random" => Ok(InitStrategy::Random),
            other => Err(Error::Config(format!("unknown transition init {other:?}"))),
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitStrategy::Guessed => "guessed",
            InitStrategy::Flat => "flat",
            InitStrategy::Random => "random",
        })
    }
}

/// Mapping from chain states to parameter slots.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotLayout {
    kind: TransitionKind,
    speech_substates: usize,
    silence_substates: usize,
    /// Rank of each label among speech labels, `None` for silence.
    speech_rank: Vec<Option<usize>>,
    names: Vec<String>,
    silence_slot: Vec<bool>,
}

impl SlotLayout {
    pub fn new(kind: TransitionKind, inventory: &LabelInventory) -> Self {
        let speech_substates = inventory.substates_per_speech_label();
        let silence_substates = inventory.substates_for_silence();
        let mut speech_rank = vec![None; inventory.len()];
        for (rank, id) in inventory.speech_labels().enumerate() {
            speech_rank[id.0] = Some(rank);
        }
        let mut names = Vec::new();
        let mut silence_slot = Vec::new();
        match kind {
            TransitionKind::Fixed | TransitionKind::SpeechSilence => {
                names.extend(["speech".to_string(), "silence".to_string()]);
                silence_slot.extend([false, true]);
            }
            TransitionKind::SubstateSilence => {
                for i in 0..speech_substates {
                    names.push(format!("speech.{i}"));
                    silence_slot.push(false);
                }
                names.push("silence".to_string());
                silence_slot.push(true);
            }
            TransitionKind::Full | TransitionKind::FullInput { .. } => {
                for id in inventory.speech_labels() {
                    for i in 0..speech_substates {
                        names.push(format!("{}.{i}", inventory.token(id)));
                        silence_slot.push(false);
                    }
                }
                for i in 0..silence_substates {
                    names.push(format!("{}.{i}", inventory.token(inventory.silence())));
                    silence_slot.push(true);
                }
            }
        }
        Self { kind, speech_substates, silence_substates, speech_rank, names, silence_slot }
    }

    pub fn kind(&self) -> TransitionKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_silence_slot(&self, slot: usize) -> bool {
        self.silence_slot[slot]
    }

    pub fn slot(&self, state: &ChainState) -> usize {
        match self.kind {
            TransitionKind::Fixed | TransitionKind::SpeechSilence => usize::from(state.is_silence),
            TransitionKind::SubstateSilence => {
                if state.is_silence {
                    self.speech_substates
                } else {
                    state.substate
                }
            }
            TransitionKind::Full | TransitionKind::FullInput { .. } => match self.speech_rank[state.label.0] {
                Some(rank) => rank * self.speech_substates + state.substate,
                None => {
                    let n_speech = self.speech_rank.iter().flatten().count();
                    n_speech * self.speech_substates + state.substate.min(self.silence_substates - 1)
                }
            },
        }
    }
}

/// Per-frame log forward / log loop probabilities for every chain position.
///
/// Row `t` holds the probabilities of the transition that arrives at frame `t`;
/// row 0 is populated but never consumed by the lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionField<T> {
    pub log_forward: Array2<T>,
    pub log_loop: Array2<T>,
}

impl<T: Real> TransitionField<T> {
    /// Field with the same forward probability everywhere.
    pub fn constant(frames: usize, states: usize, p_forward: T) -> Self {
        Self {
            log_forward: Array2::from_elem((frames, states), p_forward.ln()),
            log_loop: Array2::from_elem((frames, states), (T::one() - p_forward).ln()),
        }
    }

    /// Field whose loop and forward arcs both carry `log_value`, so every
    /// path has the same transition weight.
    pub fn flat(frames: usize, states: usize, log_value: T) -> Self {
        Self {
            log_forward: Array2::from_elem((frames, states), log_value),
            log_loop: Array2::from_elem((frames, states), log_value),
        }
    }

    pub fn frames(&self) -> usize {
        self.log_forward.nrows()
    }

    pub fn states(&self) -> usize {
        self.log_forward.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel<T> {
    layout: SlotLayout,
    /// Slot logits; the head bias for the input-dependent kind.
    pub logits: Vec<T>,
    /// `input_dim x slots` head weights, input-dependent kind only.
    pub head: Option<Array2<T>>,
}

/// Gradients of the minimized loss with respect to transition parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionGrads<T> {
    pub logits: Vec<T>,
    pub head: Option<Array2<T>>,
    pub encoder_out: Option<Array2<T>>,
}

impl<T: Real> TransitionModel<T> {
    pub fn init(kind: TransitionKind, inventory: &LabelInventory, strategy: InitStrategy, seed: u64) -> Self {
        let layout = SlotLayout::new(kind, inventory);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..layout.len())
            .map(|slot| match strategy {
                InitStrategy::Guessed => {
                    let p = if layout.is_silence_slot(slot) { GUESSED_SILENCE_FORWARD } else { GUESSED_SPEECH_FORWARD };
                    logit(T::lit(p))
                }
                InitStrategy::Flat => T::zero(),
                InitStrategy::Random => {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::lit(z)
                }
            })
            .collect();
        let head = match kind {
            TransitionKind::FullInput { input_dim } => Some(Array2::zeros((input_dim, layout.len()))),
            _ => None,
        };
        Self { layout, logits, head }
    }

    pub fn from_parts(layout: SlotLayout, logits: Vec<T>, head: Option<Array2<T>>) -> Result<Self> {
        if logits.len() != layout.len() {
            return Err(Error::Shape(format!("{} logits for {} slots", logits.len(), layout.len())));
        }
        match (layout.kind(), &head) {
            (TransitionKind::FullInput { input_dim }, Some(w)) if w.dim() == (input_dim, layout.len()) => {}
            (TransitionKind::FullInput { .. }, _) => {
                return Err(Error::Shape("input-dependent head weights missing or misshaped".into()))
            }
            (_, Some(_)) => return Err(Error::Shape("head weights on a time-invariant kind".into())),
            (_, None) => {}
        }
        Ok(Self { layout, logits, head })
    }

    pub fn kind(&self) -> TransitionKind {
        self.layout.kind()
    }

    pub fn layout(&self) -> &SlotLayout {
        &self.layout
    }

    /// Forward probability per slot; for the input-dependent kind these are the
    /// bias-implied values at a zero input.
    pub fn forward_probs(&self) -> Vec<T> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }

    fn head_input_dim(&self) -> Option<usize> {
        match self.kind() {
            TransitionKind::FullInput { input_dim } => Some(input_dim),
            _ => None,
        }
    }

    fn check_encoder_out(&self, frames: usize, encoder_out: Option<ArrayView2<'_, T>>) -> Result<()> {
        match (self.head_input_dim(), encoder_out) {
            (Some(d), Some(e)) if e.dim() == (frames, d) => Ok(()),
            (Some(d), Some(e)) => Err(Error::Shape(format!("encoder output {:?}, expected ({frames}, {d})", e.dim()))),
            (Some(_), None) => Err(Error::Shape("input-dependent transitions need encoder output".into())),
            (None, _) => Ok(()),
        }
    }

    /// Per-frame slot logits, `frames x slots`.
    fn frame_logits(&self, frames: usize, encoder_out: Option<ArrayView2<'_, T>>) -> Array2<T> {
        let slots = self.layout.len();
        let mut z = Array2::from_shape_fn((frames, slots), |(_, k)| self.logits[k]);
        if let (Some(w), Some(e)) = (&self.head, encoder_out) {
            z += &e.dot(w);
        }
        z
    }

    pub fn evaluate(
        &self,
        chain: &StateChain,
        frames: usize,
        encoder_out: Option<ArrayView2<'_, T>>,
    ) -> Result<TransitionField<T>> {
        self.check_encoder_out(frames, encoder_out)?;
        let z = self.frame_logits(frames, encoder_out);
        let slots: Vec<usize> = chain.states().iter().map(|st| self.layout.slot(st)).collect();
        let log_forward = Array2::from_shape_fn((frames, chain.len()), |(t, s)| log_sigmoid(z[[t, slots[s]]]));
        let log_loop = Array2::from_shape_fn((frames, chain.len()), |(t, s)| log_sigmoid(-z[[t, slots[s]]]));
        Ok(TransitionField { log_forward, log_loop })
    }

    /// Gradient of the minimized loss `-L` with respect to the transition
    /// parameters, given pairwise occupancies from the lattice.
    ///
    /// `xi_loop[t][s]` / `xi_fwd[t][s]` are the posteriors of the loop and
    /// forward arcs leaving `s` at frame `t` and arriving at frame `t + 1`.
    /// With `z` the slot logit, `d log p_F / dz = 1 - p_F` and
    /// `d log p_L / dz = -p_F`, so
    /// `d(-L)/dz = -tm_scale * sum (xi_fwd * (1 - p_F) - xi_loop * p_F)`.
    pub fn accumulate_grad(
        &self,
        chain: &StateChain,
        xi_loop: ArrayView2<'_, T>,
        xi_fwd: ArrayView2<'_, T>,
        tm_scale: T,
        encoder_out: Option<ArrayView2<'_, T>>,
    ) -> Result<TransitionGrads<T>> {
        let frames = xi_loop.nrows() + 1;
        if xi_loop.dim() != xi_fwd.dim() || xi_loop.ncols() != chain.len() {
            return Err(Error::Shape(format!(
                "xi shapes {:?}/{:?} for chain of {}",
                xi_loop.dim(),
                xi_fwd.dim(),
                chain.len()
            )));
        }
        self.check_encoder_out(frames, encoder_out)?;
        let n_slots = self.layout.len();
        let mut grads = TransitionGrads {
            logits: vec![T::zero(); n_slots],
            head: self.head.as_ref().map(|w| Array2::zeros(w.dim())),
            encoder_out: encoder_out.map(|e| Array2::zeros(e.dim())),
        };
        if !self.kind().is_trainable() {
            return Ok(grads);
        }
        let z = self.frame_logits(frames, encoder_out);
        let slots: Vec<usize> = chain.states().iter().map(|st| self.layout.slot(st)).collect();
        // d(-L)/dz per frame and slot
        let mut dz = Array2::<T>::zeros((frames, n_slots));
        for t in 0..frames - 1 {
            for (s, &slot) in slots.iter().enumerate() {
                let p = sigmoid(z[[t + 1, slot]]);
                let g = xi_fwd[[t, s]] * (T::one() - p) - xi_loop[[t, s]] * p;
                dz[[t + 1, slot]] -= tm_scale * g;
            }
        }
        for (k, g) in grads.logits.iter_mut().enumerate() {
            *g = dz.column(k).sum();
        }
        if let (Some(w), Some(e)) = (&self.head, encoder_out) {
            grads.head = Some(e.t().dot(&dz));
            grads.encoder_out = Some(dz.dot(&w.t()));
        }
        Ok(grads)
    }
}
