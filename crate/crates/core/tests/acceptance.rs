//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; exits nonzero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neural_hmm::alignment::{corpus_tse, tse, viterbi, write_alignments, AlignedFrame, Alignment};
use neural_hmm::checkpoint::write_checkpoint;
use neural_hmm::config::TmKindName;
use neural_hmm::datasets::{synth_corpus, GenerativeSpec};
use neural_hmm::lattice::{for_each_path, forward_backward, loss_and_grads, path_log_weight};
use neural_hmm::trainer::{align_corpus, fit, train, Model};
use neural_hmm::transition::{InitStrategy, TransitionField, TransitionKind};
use neural_hmm::verify::{
    end_to_end_grad_error, lattice_oracle_error, log_phi_grad_error, random_instance, transition_grad_error,
};
use neural_hmm::{Corpus, Error, PretrainMode, TrainConfig};

const ORACLE_INSTANCES: usize = 1000;
const ORACLE_LL_TOL: f64 = 1e-10;
const ORACLE_POSTERIOR_TOL: f64 = 1e-9;
const ORACLE_BUDGET: Duration = Duration::from_secs(30);

const GRAD_LOG_PHI_TOL: f64 = 1e-5;
const GRAD_TM_TOL: f64 = 1e-5;
const GRAD_ENCODER_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);

const NORMALIZATION_TOL: f64 = 1e-8;
const FLAT_FIELD_TOL: f64 = 1e-10;
const FLAT_FIELD_INSTANCES: usize = 500;

const TRUE_P_SPEECH: f64 = 1.0 / 3.0;
const P_SPEECH_TOL: f64 = 0.10;
const P_SILENCE_MAX: f64 = 0.10;
const TRANSITION_EPOCHS: usize = 20;
const TRANSITION_BUDGET: Duration = Duration::from_secs(600);

const VITERBI_INSTANCES: usize = 500;

const SYNTH_UTTERANCES: usize = 200;

/// Well separated emissions; true forward probabilities 1/3 (speech), 1/40 (silence).
const SEPARABLE_SPEC: &str = "
labels = AA BB CC DD EE FF
silence = sil
substates.speech = 3
substates.silence = 1
forward.speech = 0.3333333333333333
forward.silence = 0.025
dim = 8
std = 0.5
mean.spread = 3.0
utt.min_labels = 3
utt.max_labels = 6
utt.max_frames = 400
seed = 7
";

/// Emission clouds overlap heavily.
const OVERLAP_SPEC: &str = "
labels = AA BB CC DD EE FF
silence = sil
forward.speech = 0.3333333333333333
forward.silence = 0.025
dim = 8
std = 1.5
mean.spread = 1.0
utt.min_labels = 3
utt.max_labels = 6
utt.max_frames = 400
seed = 11
";

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn() -> Result<Outcome, Error>;

fn outcome(pass: bool, detail: String) -> Result<Outcome, Error> {
    Ok(Outcome { pass, detail })
}

fn synth(spec: &str, n: usize, dir: &Path) -> Result<Corpus, Error> {
    let spec = GenerativeSpec::parse(spec)?;
    synth_corpus(&spec, n, dir)?;
    Corpus::load(dir)
}

fn desk_config(kind: TmKindName, epochs: usize) -> TrainConfig {
    TrainConfig {
        tm_kind: kind,
        tm_init: InitStrategy::Flat,
        // the one-cycle peak is raised so a few hundred updates suffice
        lr_min: 1e-4,
        lr_max: 0.02,
        batch_size: 4,
        epochs,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn oracle() -> Result<Outcome, Error> {
    let start = Instant::now();
    let e = lattice_oracle_error(101, ORACLE_INSTANCES)?;
    let elapsed = start.elapsed();
    outcome(
        e.log_likelihood <= ORACLE_LL_TOL && e.posteriors <= ORACLE_POSTERIOR_TOL && elapsed < ORACLE_BUDGET,
        format!(
            "{} instances, max |dLL|={:.2e}, max |d gamma/xi|={:.2e}, {:.2}s",
            e.instances,
            e.log_likelihood,
            e.posteriors,
            elapsed.as_secs_f64()
        ),
    )
}

fn gradients() -> Result<Outcome, Error> {
    let start = Instant::now();
    let log_phi = log_phi_grad_error(202, 50)?;
    let mut tm_worst = 0.0f64;
    for kind in [
        TransitionKind::SpeechSilence,
        TransitionKind::SubstateSilence,
        TransitionKind::Full,
        TransitionKind::FullInput { input_dim: 4 },
    ] {
        tm_worst = tm_worst.max(transition_grad_error(kind, 203, 10)?);
    }
    let mut enc_worst = 0.0f64;
    for kind in [TmKindName::SpeechSilence, TmKindName::SubstateSilence, TmKindName::Full, TmKindName::FullInput] {
        enc_worst = enc_worst.max(end_to_end_grad_error(kind, 204)?);
    }
    let elapsed = start.elapsed();
    outcome(
        log_phi <= GRAD_LOG_PHI_TOL
            && tm_worst <= GRAD_TM_TOL
            && enc_worst <= GRAD_ENCODER_TOL
            && elapsed < GRAD_BUDGET,
        format!(
            "rel err log_phi={log_phi:.2e} transition={tm_worst:.2e} encoder+tm={enc_worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn normalization() -> Result<Outcome, Error> {
    let e = lattice_oracle_error(101, ORACLE_INSTANCES)?;
    outcome(
        e.normalization <= NORMALIZATION_TOL,
        format!("{} instances, max identity violation {:.2e}", e.instances, e.normalization),
    )
}

fn flat_field() -> Result<Outcome, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut posterior, mut shift) = (0.0f64, 0.0f64);
    for _ in 0..FLAT_FIELD_INSTANCES {
        let states = rng.random_range(1..=6);
        let frames = rng.random_range(states..=12);
        let (log_phi, _, scales) = random_instance(&mut rng, frames, states);
        let c1: f64 = rng.random_range(0.01f64..1.0).ln();
        let c2: f64 = rng.random_range(0.01f64..1.0).ln();
        let a = loss_and_grads(log_phi.view(), &TransitionField::flat(frames, states, c1), scales)?;
        let b = loss_and_grads(log_phi.view(), &TransitionField::flat(frames, states, c2), scales)?;
        for (x, y) in a.stats.gamma.iter().zip(&b.stats.gamma).chain(a.d_log_phi.iter().zip(&b.d_log_phi)) {
            posterior = posterior.max((x - y).abs());
        }
        let expected = scales.tm * (frames as f64 - 1.0) * (c2 - c1);
        shift = shift.max((b.stats.log_likelihood - a.stats.log_likelihood - expected).abs());
    }
    outcome(
        posterior <= FLAT_FIELD_TOL && shift <= FLAT_FIELD_TOL,
        format!(
            "{FLAT_FIELD_INSTANCES} instances, max |d gamma|,|d grad|={posterior:.2e}, max LL shift error={shift:.2e}"
        ),
    )
}

struct TransitionRuns {
    p_speech: f64,
    p_silence: f64,
    trained_tse: Vec<f64>,
    fixed_tse: Vec<f64>,
    elapsed: Duration,
}

fn train_with_tse(corpus: &Corpus, refs: &[Alignment], config: TrainConfig) -> Result<(Model<f64>, Vec<f64>), Error> {
    let dim = corpus.feature_dim().expect("non-empty corpus");
    let mut model = Model::new(config, corpus.inventory.clone(), dim)?;
    let mut per_epoch = Vec::new();
    fit(&mut model, corpus, PretrainMode::None, &mut |_, m| {
        let (hyps, _) = align_corpus(m, &corpus.utterances, m.config.prior_scale)?;
        per_epoch.push(corpus_tse(&hyps, refs).tse());
        Ok(())
    })?;
    Ok((model, per_epoch))
}

fn transition_runs() -> &'static Result<TransitionRuns, String> {
    static RUNS: OnceLock<Result<TransitionRuns, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let run = || -> Result<TransitionRuns, Error> {
            let start = Instant::now();
            let dir = tempfile::tempdir()?;
            let corpus = synth(SEPARABLE_SPEC, SYNTH_UTTERANCES, dir.path())?;
            let refs = neural_hmm::alignment::load_alignments(&dir.path().join("reference.tsv"))?;
            let (trained, trained_tse) =
                train_with_tse(&corpus, &refs, desk_config(TmKindName::SpeechSilence, TRANSITION_EPOCHS))?;
            let elapsed = start.elapsed();
            let (_, fixed_tse) = train_with_tse(&corpus, &refs, desk_config(TmKindName::Fixed, TRANSITION_EPOCHS))?;
            let p = trained.tm.forward_probs();
            Ok(TransitionRuns { p_speech: p[0], p_silence: p[1], trained_tse, fixed_tse, elapsed })
        };
        run().map_err(|e| e.to_string())
    })
}

fn transition_learning() -> Result<Outcome, Error> {
    let r = transition_runs().as_ref().map_err(|e| Error::Invalid(e.clone()))?;
    outcome(
        (r.p_speech - TRUE_P_SPEECH).abs() <= P_SPEECH_TOL && r.p_silence < P_SILENCE_MAX && r.elapsed < TRANSITION_BUDGET,
        format!(
            "learned p_F speech={:.4} (true {TRUE_P_SPEECH:.4}) silence={:.4} (true 0.0250) after {TRANSITION_EPOCHS} epochs, {:.1}s",
            r.p_speech,
            r.p_silence,
            r.elapsed.as_secs_f64()
        ),
    )
}

fn alignment_trend() -> Result<Outcome, Error> {
    let r = transition_runs().as_ref().map_err(|e| Error::Invalid(e.clone()))?;
    let (t1, tn) = (r.trained_tse[0], *r.trained_tse.last().expect("epochs"));
    let (f1, fnl) = (r.fixed_tse[0], *r.fixed_tse.last().expect("epochs"));
    outcome(
        tn <= fnl && tn < t1 && fnl < f1,
        format!("TSE frames trained TM {t1:.3} -> {tn:.3}, fixed 0.5 TM {f1:.3} -> {fnl:.3}"),
    )
}

fn viterbi_oracle() -> Result<Outcome, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let (mut mismatches, mut bound_violations) = (0usize, 0usize);
    for _ in 0..VITERBI_INSTANCES {
        let states = rng.random_range(1..=5);
        let frames = rng.random_range(states..=8);
        let (log_phi, field, scales) = random_instance(&mut rng, frames, states);
        let v = viterbi(log_phi.view(), &field, scales, None, 0.0)?;
        let mut best: Option<(f64, Vec<usize>)> = None;
        for_each_path(frames, states, |p| {
            let w = path_log_weight(p, log_phi.view(), &field, scales);
            if best.as_ref().is_none_or(|(b, _)| w > *b) {
                best = Some((w, p.to_vec()));
            }
        });
        if v.path != best.expect("feasible").1 {
            mismatches += 1;
        }
        if v.score > forward_backward(log_phi.view(), &field, scales)?.log_likelihood {
            bound_violations += 1;
        }
    }
    outcome(
        mismatches == 0 && bound_violations == 0,
        format!("{VITERBI_INSTANCES} instances, {mismatches} argmax mismatches, {bound_violations} score > full-sum"),
    )
}

fn segmented(id: &str, labels: &[&str], bounds: &[usize], frames: usize) -> Alignment {
    let mut out = Vec::new();
    let mut k = 0;
    for t in 0..frames {
        while k < bounds.len() && t >= bounds[k] {
            k += 1;
        }
        out.push(AlignedFrame { state: k, label: labels[k].to_string(), substate: 0 });
    }
    Alignment { utt_id: id.to_string(), frames: out }
}

fn tse_metric() -> Result<Outcome, Error> {
    let r = segmented("u1", &["sil", "AA", "sil"], &[10, 20], 30);
    let shifted = segmented("u1", &["sil", "AA", "sil"], &[12, 22], 30);
    let other = segmented("u2", &["sil", "BB", "sil"], &[10, 20], 30);
    let other_ref = segmented("u2", &["sil", "CC", "sil"], &[10, 20], 30);
    let identity = tse(&r, &r)?;
    let shift = tse(&shifted, &r)?;
    let acc = corpus_tse(&[shifted, other], &[r, other_ref]);
    outcome(
        identity == 0.0 && shift == 4.0 / 3.0 && acc.skipped == 1 && acc.utterances == 1 && acc.tse() == 4.0 / 3.0,
        format!(
            "identity={identity}, shifted={shift:.6} (expected 4/3), mismatch skipped={} compared={}",
            acc.skipped, acc.utterances
        ),
    )
}

/// Corpus files, checkpoint and alignment TSV, as bytes.
type PipelineBytes = (Vec<u8>, Vec<u8>, Vec<u8>);

fn pipeline_bytes(dir: &Path, threads: usize) -> Result<PipelineBytes, Error> {
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Invalid(e.to_string()))?;
    pool.install(|| {
        let corpus = synth(SEPARABLE_SPEC, 40, dir)?;
        let mut corpus_bytes = Vec::new();
        let mut names: Vec<_> = walk(dir)?;
        names.sort();
        for n in names {
            corpus_bytes.extend(fs::read(&n)?);
        }
        let mut config = desk_config(TmKindName::FullInput, 3);
        config.pretrain_epochs = 1;
        let dim = corpus.feature_dim().expect("non-empty corpus");
        let mut model = Model::new(config, corpus.inventory.clone(), dim)?;
        fit(&mut model, &corpus, PretrainMode::WithPrior, &mut |_, _| Ok(()))?;
        let mut ckpt = Vec::new();
        write_checkpoint(&mut ckpt, &model)?;
        let (alignments, _) = align_corpus(&model, &corpus.utterances, 0.3)?;
        let mut tsv = Vec::new();
        write_alignments(&mut tsv, &alignments)?;
        Ok((corpus_bytes, ckpt, tsv))
    })
}

fn walk(dir: &Path) -> Result<Vec<std::path::PathBuf>, Error> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            out.extend(walk(&p)?);
        } else {
            out.push(p);
        }
    }
    Ok(out)
}

fn determinism() -> Result<Outcome, Error> {
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    let one = pipeline_bytes(a.path(), 1)?;
    let many = pipeline_bytes(b.path(), 4)?;
    outcome(
        one == many,
        format!(
            "threads 1 vs 4: corpus {}, checkpoint {}, alignments {}",
            if one.0 == many.0 { "identical" } else { "differs" },
            if one.1 == many.1 { "identical" } else { "differs" },
            if one.2 == many.2 { "identical" } else { "differs" },
        ),
    )
}

fn scale_sensitivity() -> Result<Outcome, Error> {
    let dir = tempfile::tempdir()?;
    let corpus = synth(OVERLAP_SPEC, 100, dir.path())?;
    let dim = corpus.feature_dim().expect("non-empty corpus");
    let run = |scale: f64| -> (Result<(), Error>, Vec<f64>) {
        let mut config = desk_config(TmKindName::SpeechSilence, 10);
        config.lpm_scale = scale;
        config.tm_scale = scale;
        let mut losses = Vec::new();
        let res = Model::new(config, corpus.inventory.clone(), dim).and_then(|mut model| {
            train(&mut model, &corpus.utterances, &mut |r, _| {
                losses.push(r.loss_per_frame);
                Ok(())
            })
        });
        (res, losses)
    };
    let (low_res, low) = run(0.3);
    let (high_res, high) = run(1.0);
    let low_ok = low_res.is_ok() && low.iter().all(|l| l.is_finite());
    let high_desc = match high_res {
        Ok(()) => format!("completed, final loss/frame {:.4}", high.last().copied().unwrap_or(f64::NAN)),
        Err(e) => format!("diverged after {} epochs: {e}", high.len()),
    };
    outcome(
        low_ok,
        format!(
            "(0.3,0.3) final loss/frame {:.4} without NaN; (1.0,1.0) {high_desc}",
            low.last().copied().unwrap_or(f64::NAN)
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 10] = [
        ("oracle equivalence", oracle),
        ("gradient correctness", gradients),
        ("normalization invariants", normalization),
        ("flat-field degeneration", flat_field),
        ("transition learning", transition_learning),
        ("alignment quality trend", alignment_trend),
        ("viterbi correctness", viterbi_oracle),
        ("tse metric", tse_metric),
        ("determinism", determinism),
        ("scale sensitivity", scale_sensitivity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let line = match check() {
            Ok(o) => {
                if !o.pass {
                    failed += 1;
                }
                format!("{} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail)
            }
            Err(e) => {
                failed += 1;
                format!("FAIL | error: {e}")
            }
        };
        println!("acceptance {:>2} {name}: {line}", i + 1);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
