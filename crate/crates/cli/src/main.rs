//! `nhmm`: synthesize corpora, train, align, score and inspect neural HMMs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use neural_hmm::alignment::{corpus_tse, dump_soft_alignment, load_alignments, save_alignments, FRAME_SHIFT_MS};
use neural_hmm::checkpoint::{load_checkpoint, save_checkpoint};
use neural_hmm::datasets::{synth_corpus, GenerativeSpec};
use neural_hmm::trainer::{align_corpus, fit};
use neural_hmm::verify::run_checks;
use neural_hmm::{Corpus, Model, PretrainMode, TrainConfig};

/// Tolerance the `check` command enforces on the lattice oracle.
const ORACLE_TOLERANCE: f64 = 1e-9;
/// Tolerance the `check` command enforces on finite-difference suites.
const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "nhmm", version, about = "Full-sum neural HMM training and forced alignment")]
struct Cli {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a synthetic corpus with reference alignments.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
    },
    /// Train a model on a corpus and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Pretrain::Plain)]
        pretrain: Pretrain,
    },
    /// Viterbi-align every utterance of a corpus.
    Align {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prior correction scale (defaults to the checkpoint's prior.scale).
        #[arg(long)]
        prior_scale: Option<f64>,
    },
    /// Time stamp error of hypothesis alignments against references.
    Tse {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Print the transition probabilities of a checkpoint.
    ShowTm {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Run the lattice oracle and gradient checks.
    Check {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write the state occupancies of one utterance as TSV.
    DumpGamma {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        utt: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Pretrain {
    None,
    Plain,
    Prior,
}

impl From<Pretrain> for PretrainMode {
    fn from(p: Pretrain) -> Self {
        match p {
            Pretrain::None => PretrainMode::None,
            Pretrain::Plain => PretrainMode::Plain,
            Pretrain::Prior => PretrainMode::WithPrior,
        }
    }
}

fn load_corpus(dir: &Path) -> anyhow::Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn synth(spec: &Path, out: &Path, n: usize) -> anyhow::Result<()> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let spec = GenerativeSpec::load(spec).with_context(|| format!("reading spec {}", spec.display()))?;
    let refs = synth_corpus(&spec, n, out)?;
    let frames: usize = refs.iter().map(|a| a.len()).sum();
    println!("utterances={} frames={} out={}", refs.len(), frames, out.display());
    Ok(())
}

fn train(config: &Path, corpus: &Path, out: &Path, pretrain: Pretrain) -> anyhow::Result<()> {
    let config = TrainConfig::load(config).with_context(|| format!("reading config {}", config.display()))?;
    let corpus = load_corpus(corpus)?;
    let dim = corpus.feature_dim().ok_or_else(|| anyhow!("corpus is empty"))?;
    let infeasible: Vec<&str> =
        corpus.utterances.iter().filter(|u| !u.chain.feasible(u.features.nrows())).map(|u| u.id.as_str()).collect();
    if !infeasible.is_empty() {
        eprintln!("warning: skipping infeasible utterances: {}", infeasible.join(" "));
    }
    let mut model = Model::new(config, corpus.inventory.clone(), dim)?;
    fit(&mut model, &corpus, pretrain.into(), &mut |r, _| {
        let probs: Vec<String> = r.forward_probs.iter().map(|p| format!("{p:.4}")).collect();
        println!(
            "phase={} epoch={} loss_per_frame={:.6} skipped={} p_forward={}",
            if r.pretraining { "pretrain" } else { "train" },
            r.epoch,
            r.loss_per_frame,
            r.skipped,
            probs.join(",")
        );
        Ok(())
    })?;
    save_checkpoint(out, &model).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn align(ckpt: &Path, corpus: &Path, out: &Path, prior_scale: Option<f64>) -> anyhow::Result<()> {
    let model = load_model(ckpt)?;
    let corpus = load_corpus(corpus)?;
    if corpus.inventory != model.inventory {
        bail!("corpus inventory differs from the checkpoint's");
    }
    let scale = prior_scale.unwrap_or(model.config.prior_scale);
    if !(scale >= 0.0 && scale.is_finite()) {
        bail!("--prior-scale must be a non-negative number");
    }
    let (alignments, skipped) = align_corpus(&model, &corpus.utterances, scale)?;
    if !skipped.is_empty() {
        eprintln!("warning: skipping infeasible utterances: {}", skipped.join(" "));
    }
    save_alignments(out, &alignments).with_context(|| format!("writing {}", out.display()))?;
    println!("aligned={} skipped={}", alignments.len(), skipped.len());
    Ok(())
}

fn tse(hyp: &Path, reference: &Path) -> anyhow::Result<()> {
    let hyps = load_alignments(hyp)?;
    let refs = load_alignments(reference)?;
    let acc = corpus_tse(&hyps, &refs);
    let frames = acc.tse();
    println!(
        "tse_frames={:.3} tse_ms={:.1} segments={} skipped_utts={}",
        frames,
        frames * FRAME_SHIFT_MS,
        acc.segments,
        acc.skipped
    );
    Ok(())
}

fn show_tm(ckpt: &Path) -> anyhow::Result<()> {
    let model = load_model(ckpt)?;
    println!("# kind={}", model.tm.kind().name());
    println!("slot\tp_F\tp_L");
    for (name, p) in model.tm.layout().names().iter().zip(model.tm.forward_probs()) {
        println!("{name}\t{p:.4}\t{:.4}", 1.0 - p);
    }
    Ok(())
}

fn check(instances: usize, seed: u64) -> anyhow::Result<()> {
    if instances == 0 {
        bail!("--instances must be at least 1");
    }
    let r = run_checks(seed, instances)?;
    println!("oracle_instances={}", r.oracle.instances);
    println!("oracle_log_likelihood_err={:.3e}", r.oracle.log_likelihood);
    println!("oracle_posterior_err={:.3e}", r.oracle.posteriors);
    println!("normalization_err={:.3e}", r.oracle.normalization);
    println!("grad_log_phi_rel_err={:.3e}", r.log_phi_grad);
    for (kind, e) in &r.transition_grad {
        println!("grad_tm_{kind}_rel_err={e:.3e}");
    }
    for (kind, e) in &r.end_to_end_grad {
        println!("grad_end_to_end_{kind}_rel_err={e:.3e}");
    }
    if r.oracle.max() > ORACLE_TOLERANCE {
        bail!("lattice oracle error {:.3e} exceeds {ORACLE_TOLERANCE:e}", r.oracle.max());
    }
    if r.worst() > GRADIENT_TOLERANCE {
        bail!("gradient check error {:.3e} exceeds {GRADIENT_TOLERANCE:e}", r.worst());
    }
    println!("ok");
    Ok(())
}

fn dump_gamma(ckpt: &Path, corpus: &Path, utt: &str, out: &Path) -> anyhow::Result<()> {
    let model = load_model(ckpt)?;
    let corpus = load_corpus(corpus)?;
    let u = corpus.find(utt).ok_or_else(|| anyhow!("utterance {utt} not in corpus"))?;
    if !u.chain.feasible(u.features.nrows()) {
        bail!("utterance {utt} is infeasible: {} frames for {} states", u.features.nrows(), u.chain.len());
    }
    let stats = model.lattice_stats(u)?;
    fs::write(out, dump_soft_alignment(stats.gamma.view())).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { spec, out, n } => synth(&spec, &out, n),
        Command::Train { config, corpus, out, pretrain } => train(&config, &corpus, &out, pretrain),
        Command::Align { ckpt, corpus, out, prior_scale } => align(&ckpt, &corpus, &out, prior_scale),
        Command::Tse { hyp, reference } => tse(&hyp, &reference),
        Command::ShowTm { ckpt } => show_tm(&ckpt),
        Command::Check { instances, seed } => check(instances, seed),
        Command::DumpGamma { ckpt, corpus, utt, out } => dump_gamma(&ckpt, &corpus, &utt, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::FAILURE;
        }
        pool = pool.num_threads(n);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| run(cli)),
        Err(e) => Err(e.into()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
