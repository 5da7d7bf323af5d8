use ndarray::Array2;
use proptest::prelude::*;

use neural_hmm::alignment::{tse, viterbi, AlignedFrame, Alignment};
use neural_hmm::lattice::{brute_force, for_each_path, forward_backward, loss_and_grads, path_log_weight, Scales};
use neural_hmm::logspace::{log_add, log_sum_exp};
use neural_hmm::optim::OneCycle;
use neural_hmm::topology::{expand_labels, LabelId, LabelInventory, SilenceMode};
use neural_hmm::transition::{InitStrategy, TransitionField, TransitionKind, TransitionModel};
use neural_hmm::TrainConfig;

/// A feasible random lattice instance.
#[derive(Debug, Clone)]
struct Instance {
    log_phi: Array2<f64>,
    field: TransitionField<f64>,
    scales: Scales<f64>,
}

fn instance(max_states: usize, max_frames: usize) -> impl Strategy<Value = Instance> {
    (1..=max_states).prop_flat_map(move |s| (Just(s), s..=max_frames.max(s))).prop_flat_map(|(s, t)| {
        (
            prop::collection::vec(0.01f64..1.0, t * s),
            prop::collection::vec(0.02f64..0.98, t * s),
            0.0f64..=1.5,
            0.0f64..=1.5,
        )
            .prop_map(move |(phi, p, lpm, tm)| {
                let p = Array2::from_shape_vec((t, s), p).unwrap();
                Instance {
                    log_phi: Array2::from_shape_vec((t, s), phi).unwrap().mapv(f64::ln),
                    field: TransitionField { log_forward: p.mapv(f64::ln), log_loop: p.mapv(|v| (1.0 - v).ln()) },
                    scales: Scales::new(lpm, tm),
                }
            })
    })
}

/// Alignment over `labels` (one state each) with given segment lengths.
fn alignment_from_lengths(labels: &[&str], lengths: &[usize]) -> Alignment {
    let mut frames = Vec::new();
    for (s, (&l, &n)) in labels.iter().zip(lengths).enumerate() {
        for _ in 0..n {
            frames.push(AlignedFrame { state: s, label: l.to_string(), substate: 0 });
        }
    }
    Alignment { utt_id: "p".into(), frames }
}

/// Random segment lengths (each >= 1) summing to `total`.
fn lengths(segments: usize, total: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..total - segments + 1, segments - 1).prop_map(move |mut cuts| {
        cuts.sort_unstable();
        let mut out = Vec::with_capacity(segments);
        let mut prev = 0;
        for c in cuts {
            out.push(c - prev + 1);
            prev = c;
        }
        out.push(total - segments + 1 - prev);
        out
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lattice_matches_enumeration(inst in instance(5, 8)) {
        let fast = forward_backward(inst.log_phi.view(), &inst.field, inst.scales).unwrap();
        let slow = brute_force(inst.log_phi.view(), &inst.field, inst.scales).unwrap();
        prop_assert!((fast.log_likelihood - slow.log_likelihood).abs() <= 1e-10);
        prop_assert!(fast.max_posterior_diff(&slow) <= 1e-9);
        prop_assert!(fast.normalization_error() <= 1e-8);
    }

    #[test]
    fn outputs_are_finite(inst in instance(12, 60)) {
        let r = loss_and_grads(inst.log_phi.view(), &inst.field, inst.scales).unwrap();
        prop_assert!(r.loss.is_finite());
        prop_assert!(r.d_log_phi.iter().all(|v| v.is_finite()));
        prop_assert!(r.stats.xi_loop.iter().chain(r.stats.xi_fwd.iter()).all(|v| v.is_finite()));
        prop_assert!(r.stats.normalization_error() <= 1e-8);
    }

    #[test]
    fn log_phi_shift_moves_only_the_likelihood(inst in instance(5, 10), c in -3.0f64..3.0) {
        let a = forward_backward(inst.log_phi.view(), &inst.field, inst.scales).unwrap();
        let shifted = inst.log_phi.mapv(|v| v + c);
        let b = forward_backward(shifted.view(), &inst.field, inst.scales).unwrap();
        let frames = inst.log_phi.nrows() as f64;
        prop_assert!((b.log_likelihood - a.log_likelihood - inst.scales.lpm * frames * c).abs() <= 1e-9);
        prop_assert!(a.max_posterior_diff(&b) <= 1e-9);
    }

    #[test]
    fn flat_field_value_only_shifts_the_likelihood(inst in instance(5, 10), c1 in -4.0f64..0.0, c2 in -4.0f64..0.0) {
        let (t, s) = inst.log_phi.dim();
        let f1 = TransitionField::flat(t, s, c1);
        let f2 = TransitionField::flat(t, s, c2);
        let a = loss_and_grads(inst.log_phi.view(), &f1, inst.scales).unwrap();
        let b = loss_and_grads(inst.log_phi.view(), &f2, inst.scales).unwrap();
        let expected = inst.scales.tm * (t as f64 - 1.0) * (c2 - c1);
        prop_assert!((b.stats.log_likelihood - a.stats.log_likelihood - expected).abs() <= 1e-10);
        for (x, y) in a.stats.gamma.iter().zip(b.stats.gamma.iter()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
        for (x, y) in a.d_log_phi.iter().zip(b.d_log_phi.iter()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn loss_gradient_rows_sum_to_minus_lpm(inst in instance(6, 12)) {
        let r = loss_and_grads(inst.log_phi.view(), &inst.field, inst.scales).unwrap();
        for row in r.d_log_phi.rows() {
            prop_assert!((row.sum() + inst.scales.lpm).abs() <= 1e-9);
        }
    }

    #[test]
    fn viterbi_is_the_best_path_and_bounded_by_full_sum(inst in instance(5, 8)) {
        let v = viterbi(inst.log_phi.view(), &inst.field, inst.scales, None, 0.0).unwrap();
        let fb = forward_backward(inst.log_phi.view(), &inst.field, inst.scales).unwrap();
        prop_assert!(v.score <= fb.log_likelihood + 1e-12);
        let (t, s) = inst.log_phi.dim();
        let mut best = f64::NEG_INFINITY;
        for_each_path(t, s, |p| best = best.max(path_log_weight(p, inst.log_phi.view(), &inst.field, inst.scales)));
        prop_assert!((v.score - best).abs() <= 1e-10);
        let own = path_log_weight(&v.path, inst.log_phi.view(), &inst.field, inst.scales);
        prop_assert!((own - best).abs() <= 1e-10);
    }

    #[test]
    fn viterbi_path_ignores_constant_log_phi_shift(inst in instance(6, 14), c in -5.0f64..5.0) {
        let a = viterbi(inst.log_phi.view(), &inst.field, inst.scales, None, 0.0).unwrap();
        let shifted = inst.log_phi.mapv(|v| v + c);
        let b = viterbi(shifted.view(), &inst.field, inst.scales, None, 0.0).unwrap();
        prop_assert_eq!(a.path, b.path);
    }

    #[test]
    fn tse_is_a_pseudometric(
        (segs, a, b, c) in (1usize..6, 0usize..20).prop_flat_map(|(segs, extra)| {
            let total = segs + extra;
            (Just(segs), lengths(segs, total), lengths(segs, total), lengths(segs, total))
        })
    ) {
        let labels: Vec<&str> = (0..segs).map(|i| ["A", "B", "C"][i % 3]).collect();
        let a = alignment_from_lengths(&labels, &a);
        let b = alignment_from_lengths(&labels, &b);
        let c = alignment_from_lengths(&labels, &c);
        prop_assert_eq!(tse(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(tse(&a, &b).unwrap(), tse(&b, &a).unwrap());
        prop_assert!(tse(&a, &c).unwrap() <= tse(&a, &b).unwrap() + tse(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn log_sum_exp_matches_pairwise(xs in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let pairwise = xs.iter().copied().fold(f64::NEG_INFINITY, log_add);
        prop_assert!((log_sum_exp(&xs) - pairwise).abs() <= 1e-10);
        let direct = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        prop_assert!((log_sum_exp(&xs) - direct).abs() <= 1e-9 * direct.abs().max(1.0));
    }

    #[test]
    fn one_cycle_stays_in_bounds(total in 1u64..5000, step in 0u64..10_000) {
        let s = OneCycle::new(total);
        let lr = s.lr(step);
        prop_assert!(lr >= s.lr_min - 1e-18 && lr <= s.lr_max + 1e-18);
    }

    #[test]
    fn tied_full_equals_speech_silence(speech in -3.0f64..3.0, silence in -3.0f64..3.0, n in 1usize..4) {
        let inv = LabelInventory::new(&["sil", "A", "B"], "sil").unwrap();
        let labels: Vec<LabelId> = (0..n).map(|i| LabelId(1 + i % 2)).collect();
        let chain = expand_labels(&labels, &inv, SilenceMode::MandatoryEnds).unwrap();
        let mut ss = TransitionModel::<f64>::init(TransitionKind::SpeechSilence, &inv, InitStrategy::Flat, 0);
        ss.logits = vec![speech, silence];
        let mut full = TransitionModel::<f64>::init(TransitionKind::Full, &inv, InitStrategy::Flat, 0);
        for k in 0..full.logits.len() {
            full.logits[k] = if full.layout().is_silence_slot(k) { silence } else { speech };
        }
        let frames = chain.len() + 3;
        prop_assert_eq!(ss.evaluate(&chain, frames, None).unwrap(), full.evaluate(&chain, frames, None).unwrap());
    }

    #[test]
    fn config_text_round_trips(
        lpm in 0.0f64..2.0,
        tm in 0.0f64..2.0,
        epochs in 0usize..50,
        hidden in prop::collection::vec(1usize..128, 1..4),
        seed in any::<u64>(),
    ) {
        let cfg = TrainConfig { lpm_scale: lpm, tm_scale: tm, epochs, hidden, seed, ..TrainConfig::default() };
        prop_assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
