//! Viterbi forced alignment, alignment files and the time stamp error.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::lattice::Scales;
use crate::topology::StateChain;
use crate::transition::TransitionField;
use crate::Real;

/// Column header of alignment files.
pub const ALIGNMENT_HEADER: &str = "utt_id\tframe\tstate_pos\tlabel\tsubstate";

/// Nominal frame shift used to report errors in milliseconds.
pub const FRAME_SHIFT_MS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedFrame {
    /// 0-based chain position.
    pub state: usize,
    pub label: String,
    pub substate: usize,
}

/// Contiguous run of frames belonging to one label occurrence; `end` is exclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

/// Frame-synchronous state labeling of one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub utt_id: String,
    pub frames: Vec<AlignedFrame>,
}

impl Alignment {
    /// Builds an alignment from a 0-based state path over `chain`.
    pub fn from_path(utt_id: &str, path: &[usize], chain: &StateChain, tokens: &[String]) -> Self {
        let frames = path
            .iter()
            .map(|&s| {
                let st = chain.state(s);
                AlignedFrame { state: s, label: tokens[st.label.0].clone(), substate: st.substate }
            })
            .collect();
        Self { utt_id: utt_id.to_string(), frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks that chain positions start at 0, never decrease and advance by at most one.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Error::Invalid(format!("alignment {}: {msg}", self.utt_id));
        let first = self.frames.first().ok_or_else(|| bad("no frames"))?;
        if first.state != 0 {
            return Err(bad("does not start in the first state"));
        }
        for w in self.frames.windows(2) {
            if w[1].state < w[0].state || w[1].state > w[0].state + 1 {
                return Err(bad("state positions must advance by 0 or 1"));
            }
        }
        Ok(())
    }

    /// Merges frames into label segments. A new segment starts when the label
    /// changes, or when the chain position advances without the substate index
    /// increasing (a repeated label).
    pub fn segments(&self) -> Vec<Segment> {
        let mut out: Vec<Segment> = Vec::new();
        let mut prev: Option<&AlignedFrame> = None;
        for (t, f) in self.frames.iter().enumerate() {
            let new_block = match prev {
                None => true,
                Some(p) => p.label != f.label || (p.state != f.state && f.substate <= p.substate),
            };
            if new_block {
                out.push(Segment { label: f.label.clone(), start: t, end: t + 1 });
            } else if let Some(last) = out.last_mut() {
                last.end = t + 1;
            }
            prev = Some(f);
        }
        out
    }
}

/// Result of a Viterbi pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiResult<T> {
    /// 0-based chain position per frame.
    pub path: Vec<usize>,
    pub score: T,
}

/// Max-product pass over the same lattice as the full-sum criterion.
///
/// Emission scores are `lpm * log_phi[t][s] - prior_scale * log_prior[label(s)]`
/// when a prior is given. Ties prefer the loop arc.
pub fn viterbi<T: Real>(
    log_phi: ArrayView2<'_, T>,
    field: &TransitionField<T>,
    scales: Scales<T>,
    prior: Option<(ArrayView1<'_, T>, &StateChain)>,
    prior_scale: T,
) -> Result<ViterbiResult<T>> {
    let (frames, states) = log_phi.dim();
    if states == 0 || field.log_forward.dim() != (frames, states) || field.log_loop.dim() != (frames, states) {
        return Err(Error::Shape("viterbi inputs disagree in shape".into()));
    }
    if frames < states {
        return Err(Error::Infeasible { states, frames });
    }
    if log_phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("label posteriors"));
    }
    if prior_scale < T::zero() {
        return Err(Error::Invalid("prior scale must be non-negative".into()));
    }
    let correction: Vec<T> = match prior {
        Some((log_prior, chain)) if prior_scale != T::zero() => {
            if chain.len() != states {
                return Err(Error::Shape("prior chain length differs from lattice".into()));
            }
            chain
                .states()
                .iter()
                .map(|st| {
                    log_prior
                        .get(st.label.0)
                        .map(|&lp| prior_scale * lp)
                        .ok_or_else(|| Error::Shape("prior shorter than label inventory".into()))
                })
                .collect::<Result<_>>()?
        }
        _ => vec![T::zero(); states],
    };
    let emit = |t: usize, s: usize| scales.lpm * log_phi[[t, s]] - correction[s];

    let ninf = T::neg_infinity();
    let mut score = vec![ninf; states];
    let mut next = vec![ninf; states];
    // came_forward[t][s]: best predecessor of (t, s) was s - 1
    let mut came_forward = vec![vec![false; states]; frames];
    score[0] = emit(0, 0);
    for (t, from_prev) in came_forward.iter_mut().enumerate().skip(1) {
        let lo = (states + t).saturating_sub(frames);
        let hi = t.min(states - 1);
        next.iter_mut().for_each(|v| *v = ninf);
        for s in lo..=hi {
            let stay = score[s] + scales.tm * field.log_loop[[t, s]];
            let enter = if s > 0 { score[s - 1] + scales.tm * field.log_forward[[t, s - 1]] } else { ninf };
            let (best, fwd) = if enter > stay { (enter, true) } else { (stay, false) };
            next[s] = best + emit(t, s);
            from_prev[s] = fwd;
        }
        std::mem::swap(&mut score, &mut next);
    }
    let best = score[states - 1];
    if !best.is_finite() {
        return Err(Error::NonFinite("viterbi score"));
    }
    let mut path = vec![0; frames];
    let mut s = states - 1;
    for t in (0..frames).rev() {
        path[t] = s;
        if t > 0 && came_forward[t][s] {
            s -= 1;
        }
    }
    Ok(ViterbiResult { path, score: best })
}

/// Forced alignment of one utterance against its chain.
#[allow(clippy::too_many_arguments)]
pub fn viterbi_align<T: Real>(
    utt_id: &str,
    chain: &StateChain,
    tokens: &[String],
    log_phi: ArrayView2<'_, T>,
    field: &TransitionField<T>,
    scales: Scales<T>,
    log_prior: Option<ArrayView1<'_, T>>,
    prior_scale: T,
) -> Result<(Alignment, T)> {
    let res = viterbi(log_phi, field, scales, log_prior.map(|p| (p, chain)), prior_scale)?;
    Ok((Alignment::from_path(utt_id, &res.path, chain, tokens), res.score))
}

/// Summed boundary displacement of two alignments with identical segment labels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TseAccumulator {
    /// Sum over segments of `(|start diff| + |end diff|) / 2`, in frames.
    pub displacement: f64,
    pub segments: usize,
    pub utterances: usize,
    pub skipped: usize,
}

impl TseAccumulator {
    pub fn add(&mut self, hyp: &Alignment, reference: &Alignment) {
        match tse_sum(hyp, reference) {
            Ok((d, n)) => {
                self.displacement += d;
                self.segments += n;
                self.utterances += 1;
            }
            Err(_) => self.skipped += 1,
        }
    }

    pub fn merge(mut self, other: Self) -> Self {
        self.displacement += other.displacement;
        self.segments += other.segments;
        self.utterances += other.utterances;
        self.skipped += other.skipped;
        self
    }

    /// Mean per-segment displacement in frames; `NaN` when nothing was compared.
    pub fn tse(&self) -> f64 {
        if self.segments == 0 {
            f64::NAN
        } else {
            self.displacement / self.segments as f64
        }
    }
}

fn tse_sum(hyp: &Alignment, reference: &Alignment) -> Result<(f64, usize)> {
    let h = hyp.segments();
    let r = reference.segments();
    if h.len() != r.len() || h.iter().zip(&r).any(|(a, b)| a.label != b.label) {
        return Err(Error::PronunciationMismatch(hyp.utt_id.clone()));
    }
    let d = h.iter().zip(&r).map(|(a, b)| (a.start.abs_diff(b.start) + a.end.abs_diff(b.end)) as f64 / 2.0).sum();
    Ok((d, h.len()))
}

/// Time stamp error of one utterance: mean over segments of the average
/// start/end boundary displacement, in frames.
pub fn tse(hyp: &Alignment, reference: &Alignment) -> Result<f64> {
    let (d, n) = tse_sum(hyp, reference)?;
    Ok(if n == 0 { 0.0 } else { d / n as f64 })
}

/// Corpus-level TSE over utterances present in either set. Utterances missing
/// from one side or with differing segment labels count as skipped.
pub fn corpus_tse(hyps: &[Alignment], refs: &[Alignment]) -> TseAccumulator {
    let by_id: HashMap<&str, &Alignment> = refs.iter().map(|a| (a.utt_id.as_str(), a)).collect();
    let mut acc = TseAccumulator::default();
    let mut matched = 0;
    for h in hyps {
        match by_id.get(h.utt_id.as_str()) {
            Some(r) => {
                matched += 1;
                acc.add(h, r);
            }
            None => acc.skipped += 1,
        }
    }
    acc.skipped += refs.len() - matched.min(refs.len());
    acc
}

pub fn write_alignments<W: Write>(out: W, alignments: &[Alignment]) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{ALIGNMENT_HEADER}")?;
    for a in alignments {
        for (t, f) in a.frames.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}\t{}\t{}", a.utt_id, t, f.state + 1, f.label, f.substate)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_alignments(path: &Path, alignments: &[Alignment]) -> Result<()> {
    write_alignments(std::fs::File::create(path)?, alignments)
}

pub fn read_alignments<R: Read>(input: R, origin: &Path) -> Result<Vec<Alignment>> {
    let reader = BufReader::new(input);
    let mut lines = reader.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim_end) != Some(ALIGNMENT_HEADER) {
        return Err(Error::format(origin, "missing alignment header"));
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, Vec<(usize, AlignedFrame)>> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::format(origin, format!("line {}: {msg}", lineno + 2));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad("expected 5 tab-separated columns"));
        }
        let frame: usize = cols[1].parse().map_err(|_| bad("bad frame"))?;
        let pos: usize = cols[2].parse().map_err(|_| bad("bad state_pos"))?;
        if pos == 0 {
            return Err(bad("state_pos is 1-based"));
        }
        let substate: usize = cols[4].parse().map_err(|_| bad("bad substate"))?;
        let id = cols[0].to_string();
        if !by_id.contains_key(&id) {
            order.push(id.clone());
        }
        by_id
            .entry(id)
            .or_default()
            .push((frame, AlignedFrame { state: pos - 1, label: cols[3].to_string(), substate }));
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = by_id.remove(&id).unwrap_or_default();
        rows.sort_by_key(|(t, _)| *t);
        if rows.iter().enumerate().any(|(i, (t, _))| i != *t) {
            return Err(Error::format(origin, format!("{id}: frames are not 0..T")));
        }
        let a = Alignment { utt_id: id, frames: rows.into_iter().map(|(_, f)| f).collect() };
        a.validate()?;
        out.push(a);
    }
    Ok(out)
}

pub fn load_alignments(path: &Path) -> Result<Vec<Alignment>> {
    read_alignments(std::fs::File::open(path)?, path)
}

/// Renders occupancies as a dense `frame, state_pos, gamma` table.
pub fn dump_soft_alignment<T: Real>(gamma: ArrayView2<'_, T>) -> String {
    let mut out = String::from("frame\tstate_pos\tgamma\n");
    for ((t, s), g) in gamma.indexed_iter() {
        let _ = writeln!(out, "{t}\t{}\t{:.9e}", s + 1, g.to_f64_lossy());
    }
    out
}
