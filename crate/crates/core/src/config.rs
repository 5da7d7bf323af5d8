//! Flat `key = value` configuration files and the training configuration.
//!
//! Lines may carry `#` comments; blank lines are ignored; duplicate and
//! unknown keys are errors.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `encoder.context` | 2 | frames stacked on each side |
//! | `encoder.hidden` | `64 64` | hidden layer widths |
//! | `encoder.activation` | `tanh` | `tanh` or `relu` |
//! | `tm.kind` | `speech_silence` | `fixed`, `speech_silence`, `substate_silence`, `full`, `full_input` |
//! | `tm.init` | `guessed` | `guessed`, `flat`, `random` |
//! | `scales.lpm` | 0.3 | exponent on label posteriors |
//! | `scales.tm` | 0.3 | exponent on transition probabilities |
//! | `lr.min` / `lr.max` | 1.2e-5 / 3e-4 | one-cycle bounds |
//! | `lr.cycle_fraction` | 0.8 | share of steps covered by the cycle |
//! | `l2` | 1e-4 | L2 scale on weight matrices |
//! | `dropout` | 0.1 | dropout on hidden activations |
//! | `epochs` | 10 | main training epochs |
//! | `batch_size` | 8 | utterances per update |
//! | `seed` | 1 | master seed |
//! | `prior.scale` | 0.3 | prior exponent for alignment and prior pretraining |
//! | `pretrain.epochs` | 2 | epochs of frozen-transition pretraining |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::Activation;
use crate::error::{Error, Result};
use crate::optim::OneCycle;
use crate::transition::InitStrategy;

/// Parses flat `key = value` text into an ordered map.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if map.insert(key.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("duplicate key {key}")));
        }
    }
    Ok(map)
}

/// Consumes typed values out of a parsed map, rejecting leftovers.
pub(crate) struct KvReader {
    map: BTreeMap<String, String>,
}

impl KvReader {
    pub(crate) fn new(map: BTreeMap<String, String>) -> Self {
        Self { map }
    }

    pub(crate) fn take<V: FromStr>(&mut self, key: &str, default: V) -> Result<V> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config(format!("bad value for {key}: {v:?}"))),
        }
    }

    pub(crate) fn take_required<V: FromStr>(&mut self, key: &str) -> Result<V> {
        let v = self.map.remove(key).ok_or_else(|| Error::Config(format!("missing key {key}")))?;
        v.parse().map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
    }

    pub(crate) fn take_raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    pub(crate) fn take_list<V: FromStr>(&mut self, key: &str, default: Vec<V>) -> Result<Vec<V>> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => v
                .split_whitespace()
                .map(|x| x.parse().map_err(|_| Error::Config(format!("bad entry in {key}: {x:?}"))))
                .collect(),
        }
    }

    pub(crate) fn remaining_with_prefix(&mut self, prefix: &str) -> Vec<(String, String)> {
        let keys: Vec<String> = self.map.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        keys.into_iter()
            .map(|k| {
                let v = self.map.remove(&k).unwrap_or_default();
                (k, v)
            })
            .collect()
    }

    pub(crate) fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(Error::Config(format!("unknown key {k}"))),
            None => Ok(()),
        }
    }
}

/// Transition parametrization name as used in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmKindName {
    Fixed,
    SpeechSilence,
    SubstateSilence,
    Full,
    FullInput,
}

impl FromStr for TmKindName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fixed" => TmKindName::Fixed,
            "speech_silence" => TmKindName::SpeechSilence,
            "substate_silence" => TmKindName::SubstateSilence,
            "full" => TmKindName::Full,
            "full_input" => TmKindName::FullInput,
            other => return Err(Error::Config(format!("unknown tm.kind {other:?}"))),
        })
    }
}

impl TmKindName {
    pub fn as_str(self) -> &'static str {
        match self {
            TmKindName::Fixed => "fixed",
            TmKindName::SpeechSilence => "speech_silence",
            TmKindName::SubstateSilence => "substate_silence",
            TmKindName::Full => "full",
            TmKindName::FullInput => "full_input",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub context: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub tm_kind: TmKindName,
    pub tm_init: InitStrategy,
    pub lpm_scale: f64,
    pub tm_scale: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycle_fraction: f64,
    pub l2: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub prior_scale: f64,
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            context: 2,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            tm_kind: TmKindName::SpeechSilence,
            tm_init: InitStrategy::Guessed,
            lpm_scale: 0.3,
            tm_scale: 0.3,
            lr_min: OneCycle::DEFAULT_LR_MIN,
            lr_max: OneCycle::DEFAULT_LR_MAX,
            cycle_fraction: OneCycle::DEFAULT_CYCLE_FRACTION,
            l2: 1e-4,
            dropout: 0.1,
            epochs: 10,
            batch_size: 8,
            seed: 1,
            prior_scale: 0.3,
            pretrain_epochs: 2,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let d = Self::default();
        let mut r = KvReader::new(parse_kv(text)?);
        let cfg = Self {
            context: r.take("encoder.context", d.context)?,
            hidden: r.take_list("encoder.hidden", d.hidden)?,
            activation: r.take("encoder.activation", d.activation)?,
            tm_kind: r.take("tm.kind", d.tm_kind)?,
            tm_init: r.take("tm.init", d.tm_init)?,
            lpm_scale: r.take("scales.lpm", d.lpm_scale)?,
            tm_scale: r.take("scales.tm", d.tm_scale)?,
            lr_min: r.take("lr.min", d.lr_min)?,
            lr_max: r.take("lr.max", d.lr_max)?,
            cycle_fraction: r.take("lr.cycle_fraction", d.cycle_fraction)?,
            l2: r.take("l2", d.l2)?,
            dropout: r.take("dropout", d.dropout)?,
            epochs: r.take("epochs", d.epochs)?,
            batch_size: r.take("batch_size", d.batch_size)?,
            seed: r.take("seed", d.seed)?,
            prior_scale: r.take("prior.scale", d.prior_scale)?,
            pretrain_epochs: r.take("pretrain.epochs", d.pretrain_epochs)?,
        };
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.lpm_scale < 0.0 || self.tm_scale < 0.0 || self.prior_scale < 0.0 {
            return bad("scales must be non-negative");
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return bad("need 0 < lr.min <= lr.max");
        }
        if !(0.0..=1.0).contains(&self.cycle_fraction) {
            return bad("lr.cycle_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be at least 1");
        }
        if self.l2 < 0.0 {
            return bad("l2 must be non-negative");
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "encoder.context = {}", self.context);
        let _ = writeln!(s, "encoder.hidden = {}", hidden.join(" "));
        let _ = writeln!(s, "encoder.activation = {}", self.activation);
        let _ = writeln!(s, "tm.kind = {}", self.tm_kind.as_str());
        let _ = writeln!(s, "tm.init = {}", self.tm_init);
        let _ = writeln!(s, "scales.lpm = {:?}", self.lpm_scale);
        let _ = writeln!(s, "scales.tm = {:?}", self.tm_scale);
        let _ = writeln!(s, "lr.min = {:?}", self.lr_min);
        let _ = writeln!(s, "lr.max = {:?}", self.lr_max);
        let _ = writeln!(s, "lr.cycle_fraction = {:?}", self.cycle_fraction);
        let _ = writeln!(s, "l2 = {:?}", self.l2);
        let _ = writeln!(s, "dropout = {:?}", self.dropout);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "prior.scale = {:?}", self.prior_scale);
        let _ = writeln!(s, "pretrain.epochs = {}", self.pretrain_epochs);
        s
    }
}
