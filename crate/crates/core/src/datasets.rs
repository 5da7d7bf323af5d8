//! Corpus files and the synthetic generative HMM.
//!
//! A corpus directory holds
//!
//! * `inventory.txt`: label inventory (`labels`, `silence`, `substates.*` keys),
//! * `manifest.tsv`: `utt_id<TAB>feature_path<TAB>space separated labels`,
//! * feature files in the `FSF1` binary format,
//! * `reference.tsv`: ground-truth alignments (synthetic corpora only).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::alignment::{save_alignments, Alignment};
use crate::config::{parse_kv, KvReader};
use crate::error::{Error, Result};
use crate::topology::{expand_labels, LabelId, LabelInventory, SilenceMode, StateChain};
use crate::{mix_seed, Real};

pub const FEATURE_MAGIC: &[u8; 4] = b"FSF1";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const INVENTORY_FILE: &str = "inventory.txt";
pub const REFERENCE_FILE: &str = "reference.tsv";

/// Writes a `T x D` matrix: magic, `T` and `D` as little-endian `u32`, then
/// `T * D` little-endian `f32` values in row-major order.
pub fn write_features<W: Write>(mut out: W, features: &Array2<f32>) -> Result<()> {
    let (frames, dim) = features.dim();
    if frames == 0 || dim == 0 {
        return Err(Error::Invalid("feature matrix must have at least one frame and one dimension".into()));
    }
    if features.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("features"));
    }
    let mut buf = Vec::with_capacity(12 + 4 * features.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&u32::try_from(frames).map_err(|_| Error::Invalid("too many frames".into()))?.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(dim).map_err(|_| Error::Invalid("dimension too large".into()))?.to_le_bytes());
    for v in features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_features<R: Read>(mut input: R, origin: &Path) -> Result<Array2<f32>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(origin, "bad feature file magic"));
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[12..];
    if payload.len() != frames * dim * 4 {
        return Err(Error::format(
            origin,
            format!("expected {} payload bytes, found {}", frames * dim * 4, payload.len()),
        ));
    }
    let values: Vec<f32> =
        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::format(origin, "NaN in features"));
    }
    Array2::from_shape_vec((frames, dim), values).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn save_features(path: &Path, features: &Array2<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_features(&mut buf, features)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Array2<f32>> {
    read_features(fs::File::open(path)?, path)
}

pub fn inventory_to_text(inv: &LabelInventory) -> String {
    format!(
        "labels = {}\nsilence = {}\nsubstates.speech = {}\nsubstates.silence = {}\n",
        inv.tokens().join(" "),
        inv.token(inv.silence()),
        inv.substates_per_speech_label(),
        inv.substates_for_silence()
    )
}

pub fn inventory_from_text(text: &str) -> Result<LabelInventory> {
    let mut r = KvReader::new(parse_kv(text)?);
    let labels: Vec<String> = r.take_list("labels", Vec::new())?;
    let silence: String = r.take_required("silence")?;
    let speech = r.take("substates.speech", 3usize)?;
    let sil = r.take("substates.silence", 1usize)?;
    r.finish()?;
    LabelInventory::with_substates(&labels, &silence, speech, sil)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    /// Relative to the corpus directory unless absolute.
    pub feature_path: PathBuf,
    pub labels: Vec<String>,
}

pub fn manifest_to_text(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(s, "{}\t{}\t{}", e.utt_id, e.feature_path.display(), e.labels.join(" "));
    }
    s
}

pub fn manifest_from_text(text: &str, origin: &Path) -> Result<Vec<ManifestEntry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::format(origin, format!("line {}: expected 3 tab-separated columns", i + 1)));
        }
        if !seen.insert(cols[0].to_string()) {
            return Err(Error::format(origin, format!("duplicate utterance id {}", cols[0])));
        }
        out.push(ManifestEntry {
            utt_id: cols[0].to_string(),
            feature_path: PathBuf::from(cols[1]),
            labels: cols[2].split_whitespace().map(str::to_string).collect(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Utterance<T> {
    pub id: String,
    pub labels: Vec<LabelId>,
    pub chain: StateChain,
    /// `T x D`.
    pub features: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct Corpus<T> {
    pub inventory: LabelInventory,
    pub utterances: Vec<Utterance<T>>,
}

impl<T: Real> Corpus<T> {
    pub fn load(dir: &Path) -> Result<Self> {
        let inventory = inventory_from_text(&fs::read_to_string(dir.join(INVENTORY_FILE))?)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let entries = manifest_from_text(&fs::read_to_string(&manifest_path)?, &manifest_path)?;
        let mut utterances = Vec::with_capacity(entries.len());
        for e in entries {
            let path = dir.join(&e.feature_path);
            if !path.exists() {
                return Err(Error::format(
                    &manifest_path,
                    format!("{}: missing feature file {}", e.utt_id, path.display()),
                ));
            }
            let labels = e.labels.iter().map(|t| inventory.id(t)).collect::<Result<Vec<_>>>()?;
            let chain = expand_labels(&labels, &inventory, SilenceMode::MandatoryEnds)?;
            let features = load_features(&path)?.mapv(|v| T::lit(f64::from(v)));
            utterances.push(Utterance { id: e.utt_id, labels, chain, features });
        }
        Ok(Self { inventory, utterances })
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.features.ncols())
    }

    pub fn find(&self, id: &str) -> Option<&Utterance<T>> {
        self.utterances.iter().find(|u| u.id == id)
    }
}

/// Parameters of the synthetic generative HMM.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeSpec {
    pub inventory: LabelInventory,
    /// True forward probability per label id (shared by its substates).
    pub forward: Vec<f64>,
    /// Emission mean per label id and substate.
    pub means: Vec<Vec<Vec<f64>>>,
    pub std: f64,
    /// Relative sampling weight per label id (silence entry unused).
    pub label_weights: Vec<f64>,
    pub min_labels: usize,
    pub max_labels: usize,
    pub max_frames: usize,
    pub seed: u64,
}

impl GenerativeSpec {
    /// Parses the `synth --spec` file format.
    ///
    /// ```text
    /// labels = AA BB CC          # speech labels
    /// silence = sil
    /// substates.speech = 3
    /// substates.silence = 1
    /// forward.speech = 0.3333333333333333
    /// forward.silence = 0.025
    /// forward.AA = 0.5           # optional per-label override
    /// label.weights = 3 1 1      # optional, per speech label
    /// dim = 8
    /// std = 0.5
    /// mean.spread = 3.0          # emission means ~ N(0, spread^2)
    /// utt.min_labels = 3
    /// utt.max_labels = 6
    /// utt.max_frames = 600
    /// seed = 1
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut r = KvReader::new(parse_kv(text)?);
        let speech: Vec<String> = r.take_list("labels", Vec::new())?;
        let silence: String = r.take("silence", "sil".to_string())?;
        let sub_speech = r.take("substates.speech", 3usize)?;
        let sub_sil = r.take("substates.silence", 1usize)?;
        let p_speech = r.take("forward.speech", 1.0 / 3.0)?;
        let p_sil = r.take("forward.silence", 1.0 / 40.0)?;
        let weights_raw = r.take_raw("label.weights");
        let dim = r.take("dim", 8usize)?;
        let std = r.take("std", 0.5f64)?;
        let spread = r.take("mean.spread", 3.0f64)?;
        let min_labels = r.take("utt.min_labels", 3usize)?;
        let max_labels = r.take("utt.max_labels", 6usize)?;
        let max_frames = r.take("utt.max_frames", 600usize)?;
        let seed = r.take("seed", 1u64)?;
        let overrides = r.remaining_with_prefix("forward.");
        r.finish()?;

        if speech.is_empty() {
            return Err(Error::Config("spec needs at least one speech label".into()));
        }
        let mut tokens = vec![silence.clone()];
        tokens.extend(speech.iter().cloned());
        let inventory = LabelInventory::with_substates(&tokens, &silence, sub_speech, sub_sil)?;
        let mut forward: Vec<f64> =
            (0..inventory.len()).map(|k| if inventory.is_silence(LabelId(k)) { p_sil } else { p_speech }).collect();
        for (key, value) in overrides {
            let token = &key["forward.".len()..];
            let id = inventory.id(token).map_err(|_| Error::Config(format!("unknown label in {key}")))?;
            forward[id.0] = value.parse().map_err(|_| Error::Config(format!("bad value for {key}")))?;
        }
        let mut label_weights = vec![1.0; inventory.len()];
        if let Some(raw) = weights_raw {
            let ws: Vec<f64> = raw
                .split_whitespace()
                .map(|w| w.parse().map_err(|_| Error::Config(format!("bad label weight {w:?}"))))
                .collect::<Result<_>>()?;
            if ws.len() != speech.len() {
                return Err(Error::Config("label.weights needs one weight per speech label".into()));
            }
            for (id, w) in inventory.speech_labels().zip(ws).collect::<Vec<_>>() {
                label_weights[id.0] = w;
            }
        }
        if dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6d65616e));
        let means = (0..inventory.len())
            .map(|k| {
                (0..inventory.substates_of(LabelId(k)))
                    .map(|_| (0..dim).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect())
                    .collect()
            })
            .collect();
        let spec = Self { inventory, forward, means, std, label_weights, min_labels, max_labels, max_frames, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        self.means[0][0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let Some(p) = self.forward.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return bad(format!("forward probabilities must lie in (0, 1), got {p}"));
        }
        if self.std.is_nan() || self.std <= 0.0 {
            return bad("std must be positive".into());
        }
        if self.min_labels == 0 || self.min_labels > self.max_labels {
            return bad("need 1 <= utt.min_labels <= utt.max_labels".into());
        }
        let speech_weight: f64 = self.inventory.speech_labels().map(|id| self.label_weights[id.0]).sum();
        if self.label_weights.iter().any(|w| *w < 0.0) || speech_weight.is_nan() || speech_weight <= 0.0 {
            return bad("label weights must be non-negative with a positive sum".into());
        }
        let longest =
            self.max_labels * self.inventory.substates_per_speech_label() + 2 * self.inventory.substates_for_silence();
        if self.max_frames < longest {
            return bad(format!("utt.max_frames must be at least {longest}"));
        }
        Ok(())
    }
}

/// Number of frames spent in a state with forward probability `p_forward`:
/// geometric on `1, 2, ...` with mean `1 / p_forward`.
pub fn sample_duration<R: Rng>(rng: &mut R, p_forward: f64) -> usize {
    let mut n = 1;
    while rng.random::<f64>() >= p_forward {
        n += 1;
    }
    n
}

/// One generated utterance.
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub labels: Vec<LabelId>,
    pub chain: StateChain,
    /// 0-based chain position per frame.
    pub path: Vec<usize>,
    pub features: Array2<f32>,
}

const MAX_RESAMPLES: usize = 10_000;

/// Samples a label sequence, its state path and Gaussian features. Each
/// state's duration is geometric with that label's forward probability;
/// whole paths longer than `max_frames` are rejected and redrawn.
pub fn synth_utterance(spec: &GenerativeSpec, seed: u64) -> Result<SynthUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv = &spec.inventory;
    let speech: Vec<LabelId> = inv.speech_labels().collect();
    let weights: Vec<f64> = speech.iter().map(|id| spec.label_weights[id.0]).collect();
    let total: f64 = weights.iter().sum();
    let n_labels = rng.random_range(spec.min_labels..=spec.max_labels);
    let labels: Vec<LabelId> = (0..n_labels)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            for (id, w) in speech.iter().zip(&weights) {
                if u < *w {
                    return *id;
                }
                u -= w;
            }
            *speech.last().expect("non-empty speech set")
        })
        .collect();
    let chain = expand_labels(&labels, inv, SilenceMode::MandatoryEnds)?;

    let mut path = Vec::new();
    for _ in 0..MAX_RESAMPLES {
        path.clear();
        for (s, st) in chain.states().iter().enumerate() {
            let d = sample_duration(&mut rng, spec.forward[st.label.0]);
            path.extend(std::iter::repeat_n(s, d));
            if path.len() > spec.max_frames {
                break;
            }
        }
        if path.len() <= spec.max_frames {
            break;
        }
    }
    if path.len() > spec.max_frames {
        return Err(Error::Config("utt.max_frames rejects nearly every sampled path".into()));
    }

    let dim = spec.dim();
    let mut features = Array2::<f32>::zeros((path.len(), dim));
    for (t, &s) in path.iter().enumerate() {
        let st = chain.state(s);
        let mean = &spec.means[st.label.0][st.substate];
        for d in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            features[[t, d]] = (mean[d] + spec.std * z) as f32;
        }
    }
    Ok(SynthUtterance { labels, chain, path, features })
}

pub fn utterance_id(i: usize) -> String {
    format!("utt{i:05}")
}

/// Writes `n` synthetic utterances with their reference alignment into `out`.
pub fn synth_corpus(spec: &GenerativeSpec, n: usize, out: &Path) -> Result<Vec<Alignment>> {
    if n == 0 {
        return Err(Error::Invalid("need at least one utterance".into()));
    }
    fs::create_dir_all(out.join("feats"))?;
    let generated: Vec<SynthUtterance> = (0..n)
        .into_par_iter()
        .map(|i| synth_utterance(spec, mix_seed(spec.seed, i as u64 + 1)))
        .collect::<Result<_>>()?;
    let inv = &spec.inventory;
    let mut entries = Vec::with_capacity(n);
    let mut refs = Vec::with_capacity(n);
    for (i, u) in generated.iter().enumerate() {
        let id = utterance_id(i);
        let rel = PathBuf::from("feats").join(format!("{id}.fsf"));
        save_features(&out.join(&rel), &u.features)?;
        entries.push(ManifestEntry {
            utt_id: id.clone(),
            feature_path: rel,
            labels: u.labels.iter().map(|&l| inv.token(l).to_string()).collect(),
        });
        refs.push(Alignment::from_path(&id, &u.path, &u.chain, inv.tokens()));
    }
    fs::write(out.join(INVENTORY_FILE), inventory_to_text(inv))?;
    fs::write(out.join(MANIFEST_FILE), manifest_to_text(&entries))?;
    save_alignments(&out.join(REFERENCE_FILE), &refs)?;
    Ok(refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC: &str = "labels = AA BB CC\ndim = 4\nstd = 0.5\nutt.max_frames = 800\nseed = 5\n";

    #[test]
    fn feature_round_trip_is_exact() {
        let m = Array2::from_shape_fn((3, 2), |(t, d)| (t as f32) * 0.1 - d as f32 * 1e-7);
        let mut buf = Vec::new();
        write_features(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"FSF1");
        assert_eq!(buf.len(), 12 + 3 * 2 * 4);
        assert_eq!(&buf[4..12], &[3, 0, 0, 0, 2, 0, 0, 0]);
        let back = read_features(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn feature_errors() {
        assert!(write_features(Vec::new(), &Array2::<f32>::zeros((0, 2))).is_err());
        let mut nan = Array2::<f32>::zeros((1, 1));
        nan[[0, 0]] = f32::NAN;
        assert!(write_features(Vec::new(), &nan).is_err());
        let mut buf = Vec::new();
        write_features(&mut buf, &Array2::<f32>::zeros((2, 2))).unwrap();
        assert!(read_features(&buf[..buf.len() - 1], Path::new("x")).is_err());
        buf[0] = b'X';
        assert!(read_features(&buf[..], Path::new("x")).is_err());
        let mut raw = b"FSF1".to_vec();
        raw.extend_from_slice(&1u32.to_le_bytes());
        raw.extend_from_slice(&1u32.to_le_bytes());
        raw.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(read_features(&raw[..], Path::new("x")).is_err());
    }

    #[test]
    fn manifest_round_trip_and_duplicates() {
        let entries = vec![
            ManifestEntry {
                utt_id: "a".into(),
                feature_path: "feats/a.fsf".into(),
                labels: vec!["AA".into(), "BB".into()],
            },
            ManifestEntry { utt_id: "b".into(), feature_path: "feats/b.fsf".into(), labels: vec!["CC".into()] },
        ];
        let text = manifest_to_text(&entries);
        assert_eq!(text.lines().next().unwrap(), "a\tfeats/a.fsf\tAA BB");
        assert_eq!(manifest_from_text(&text, Path::new("m")).unwrap(), entries);
        assert!(manifest_from_text("a\tx\tAA\na\ty\tBB\n", Path::new("m")).is_err());
    }

    #[test]
    fn spec_parsing_and_validation() {
        let spec = GenerativeSpec::parse(SPEC).unwrap();
        assert_eq!(spec.inventory.len(), 4);
        assert_eq!(spec.dim(), 4);
        assert_eq!(spec.forward[0], 0.025);
        assert!((spec.forward[1] - 1.0 / 3.0).abs() < 1e-15);
        let spec = GenerativeSpec::parse(&format!("{SPEC}forward.BB = 0.5\n")).unwrap();
        assert_eq!(spec.forward[2], 0.5);
        assert!(GenerativeSpec::parse(&format!("{SPEC}forward.speech = 1.0\n")).is_err());
        assert!(GenerativeSpec::parse("labels = A\nstd = 0\n").is_err());
        assert!(GenerativeSpec::parse("labels = A\nforward.ZZ = 0.5\n").is_err());
    }

    #[test]
    fn synthetic_paths_are_valid_and_seeded() {
        let spec = GenerativeSpec::parse(SPEC).unwrap();
        let a = synth_utterance(&spec, 42).unwrap();
        let b = synth_utterance(&spec, 42).unwrap();
        assert_eq!(a.path, b.path);
        assert_eq!(a.features, b.features);
        let al = Alignment::from_path("x", &a.path, &a.chain, spec.inventory.tokens());
        al.validate().unwrap();
        assert_eq!(*a.path.last().unwrap(), a.chain.len() - 1);
        assert!(a.path.len() <= spec.max_frames);
    }

    #[test]
    fn near_one_forward_gives_unit_durations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mean = (0..n).map(|_| sample_duration(&mut rng, 0.99)).sum::<usize>() as f64 / n as f64;
        // geometric mean 1 / 0.99
        assert!((mean - 1.0 / 0.99).abs() < 0.005, "{mean}");
    }

    #[test]
    fn speech_substate_durations_average_three() {
        let spec = GenerativeSpec::parse(SPEC).unwrap();
        let mut frames = 0usize;
        let mut segments = 0usize;
        let mut seed = 0;
        while segments < 10_000 {
            seed += 1;
            let u = synth_utterance(&spec, seed).unwrap();
            for (s, st) in u.chain.states().iter().enumerate() {
                if !st.is_silence {
                    frames += u.path.iter().filter(|&&p| p == s).count();
                    segments += 1;
                }
            }
        }
        let mean = frames as f64 / segments as f64;
        assert!((mean - 3.0).abs() < 0.05 * 3.0, "{mean}");
    }

    #[test]
    fn transition_frequencies_converge() {
        let spec = GenerativeSpec::parse(SPEC).unwrap();
        let (mut fwd, mut total) = (0usize, 0usize);
        let mut seed = 1000;
        while total < 100_000 {
            seed += 1;
            let u = synth_utterance(&spec, seed).unwrap();
            for w in u.path.windows(2) {
                if !u.chain.state(w[0]).is_silence {
                    total += 1;
                    fwd += usize::from(w[1] != w[0]);
                }
            }
        }
        let freq = fwd as f64 / total as f64;
        assert!((freq - 1.0 / 3.0).abs() < 0.02 / 3.0, "{freq}");
    }

    #[test]
    fn corpus_is_byte_identical_on_rerun() {
        let spec = GenerativeSpec::parse(SPEC).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_corpus(&spec, 5, a.path()).unwrap();
        synth_corpus(&spec, 5, b.path()).unwrap();
        for f in [MANIFEST_FILE, INVENTORY_FILE, REFERENCE_FILE, "feats/utt00004.fsf"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let corpus = Corpus::<f64>::load(a.path()).unwrap();
        assert_eq!(corpus.utterances.len(), 5);
        assert_eq!(corpus.feature_dim(), Some(4));
        for u in &corpus.utterances {
            assert!(u.chain.feasible(u.features.nrows()));
        }
    }
}
