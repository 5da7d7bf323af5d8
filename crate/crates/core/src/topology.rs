//! Linear HMM state chains built from label sequences.
//!
//! Every speech label expands into `substates_per_speech_label` consecutive
//! states and silence into `substates_for_silence` states. The only arcs are
//! loop (`s -> s`) and forward (`s -> s + 1`); they are implicit in the chain
//! order and never stored.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Dense label index `0..K`, usable as a row into posterior matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct LabelInventory {
    tokens: Vec<String>,
    index: HashMap<String, LabelId>,
    silence: LabelId,
    substates_per_speech_label: usize,
    substates_for_silence: usize,
}

impl LabelInventory {
    /// Builds an inventory with the tripartite speech / monostate silence topology.
    pub fn new<S: AsRef<str>>(tokens: &[S], silence: &str) -> Result<Self> {
        Self::with_substates(tokens, silence, 3, 1)
    }

    pub fn with_substates<S: AsRef<str>>(
        tokens: &[S],
        silence: &str,
        substates_per_speech_label: usize,
        substates_for_silence: usize,
    ) -> Result<Self> {
        if substates_per_speech_label == 0 || substates_for_silence == 0 {
            return Err(Error::Invalid("substate counts must be at least 1".into()));
        }
        let mut index = HashMap::new();
        let mut owned = Vec::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            let tok = tok.as_ref().to_string();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Invalid(format!("bad label token {tok:?}")));
            }
            if index.insert(tok.clone(), LabelId(i)).is_some() {
                return Err(Error::Invalid(format!("duplicate label token {tok}")));
            }
            owned.push(tok);
        }
        let silence = *index.get(silence).ok_or_else(|| Error::UnknownLabel(silence.to_string()))?;
        Ok(Self { tokens: owned, index, silence, substates_per_speech_label, substates_for_silence })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: LabelId) -> &str {
        &self.tokens[id.0]
    }

    pub fn id(&self, token: &str) -> Result<LabelId> {
        self.index.get(token).copied().ok_or_else(|| Error::UnknownLabel(token.to_string()))
    }

    pub fn silence(&self) -> LabelId {
        self.silence
    }

    pub fn is_silence(&self, id: LabelId) -> bool {
        id == self.silence
    }

    pub fn substates_per_speech_label(&self) -> usize {
        self.substates_per_speech_label
    }

    pub fn substates_for_silence(&self) -> usize {
        self.substates_for_silence
    }

    pub fn substates_of(&self, id: LabelId) -> usize {
        if self.is_silence(id) {
            self.substates_for_silence
        } else {
            self.substates_per_speech_label
        }
    }

    /// Speech labels in id order.
    pub fn speech_labels(&self) -> impl Iterator<Item = LabelId> + '_ {
        (0..self.tokens.len()).map(LabelId).filter(move |&id| id != self.silence)
    }

    /// Parses a whitespace-separated transcription into label ids.
    pub fn parse(&self, text: &str) -> Result<Vec<LabelId>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SilenceMode {
    /// One silence block before and after the label sequence.
    MandatoryEnds,
    None,
}

/// One state of an expanded chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainState {
    pub label: LabelId,
    pub substate: usize,
    pub is_silence: bool,
    /// Index of the expanded label occurrence this state belongs to.
    pub block: usize,
}

/// Expanded linear state sequence for one utterance. Positions are 0-based
/// internally; file formats print them 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateChain {
    states: Vec<ChainState>,
}

impl StateChain {
    /// Chain consisting of a single silence block, for silence-only utterances.
    pub fn silence_only(inventory: &LabelInventory) -> Self {
        let label = inventory.silence();
        let states = (0..inventory.substates_for_silence())
            .map(|substate| ChainState { label, substate, is_silence: true, block: 0 })
            .collect();
        Self { states }
    }

    pub fn states(&self) -> &[ChainState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, s: usize) -> &ChainState {
        &self.states[s]
    }

    /// A loop/forward-only path from the first to the last state in `frames`
    /// steps exists iff there are at least as many frames as states.
    pub fn feasible(&self, frames: usize) -> bool {
        frames >= self.states.len()
    }

    /// Label sequence recovered by collapsing states per block.
    pub fn collapse(&self) -> Vec<LabelId> {
        let mut out: Vec<LabelId> = Vec::new();
        let mut last_block = None;
        for st in &self.states {
            if last_block != Some(st.block) {
                out.push(st.label);
                last_block = Some(st.block);
            }
        }
        out
    }
}

pub fn expand_labels(labels: &[LabelId], inventory: &LabelInventory, silence_mode: SilenceMode) -> Result<StateChain> {
    if labels.is_empty() {
        return Err(Error::EmptyLabels);
    }
    let mut seq = Vec::with_capacity(labels.len() + 2);
    if silence_mode == SilenceMode::MandatoryEnds {
        seq.push(inventory.silence());
    }
    for &l in labels {
        if l.0 >= inventory.len() {
            return Err(Error::UnknownLabel(format!("#{}", l.0)));
        }
        if inventory.is_silence(l) {
            return Err(Error::SilenceInTranscription(inventory.token(l).to_string()));
        }
        seq.push(l);
    }
    if silence_mode == SilenceMode::MandatoryEnds {
        seq.push(inventory.silence());
    }

    let mut states = Vec::new();
    for (block, &label) in seq.iter().enumerate() {
        let is_silence = inventory.is_silence(label);
        for substate in 0..inventory.substates_of(label) {
            states.push(ChainState { label, substate, is_silence, block });
        }
    }
    Ok(StateChain { states })
}

/// Same as [`chain_feasible`](StateChain::feasible), as a free function.
pub fn chain_feasible(chain: &StateChain, frames: usize) -> bool {
    chain.feasible(frames)
}
