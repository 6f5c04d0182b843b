mod support;

use eend_vib::analysis_viz::{categorize_frames, pca_fit, project_encoding, Category};
use eend_vib::autodiff::sigmoid;
use eend_vib::data_sim::{
    labels_from_segments, read_rttm, simulate_conversation, write_rttm, SimConfig, FRAME_SECONDS,
};
use eend_vib::losses::{
    diarization_loss_pit_values, kld_loss_values, total_loss_values, LossWeights, Permutation,
};
use eend_vib::model::{activity_probs_values, EendEda, StochasticEncoding};
use eend_vib::pipeline::{Checkpoint, RngState, Stage};
use eend_vib::scoring::{score_der, Timeline};
use eend_vib::{Graph, SeededRng, Tensor};
use proptest::prelude::*;
use support::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn binary(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::bool::ANY, rows * cols).prop_map(move |d| {
        Tensor::new(
            vec![rows, cols],
            d.into_iter().map(|b| b as u8 as f64).collect(),
        )
        .unwrap()
    })
}

fn pit_case() -> impl Strategy<Value = (Tensor, Tensor, Vec<usize>)> {
    (2usize..=5, 1usize..15).prop_flat_map(|(s, t)| {
        (
            matrix(s, t, 0.01, 0.99),
            binary(s, t),
            Just((0..s).collect::<Vec<_>>()).prop_shuffle(),
        )
    })
}

fn segs(name: &'static str) -> impl Strategy<Value = Vec<Seg>> {
    prop::collection::vec((0u32..2000, 1u32..300), 0..6).prop_map(move |v| {
        v.into_iter()
            .map(|(a, d)| (name.to_string(), a as f64 / 100.0, (a + d) as f64 / 100.0))
            .collect()
    })
}

fn timeline(segs: &[Seg]) -> Timeline {
    Timeline::from_segments(segs.iter().map(|(n, a, b)| (n.as_str(), *a, *b))).unwrap()
}

fn scoring_case() -> impl Strategy<Value = (Vec<Seg>, Vec<Seg>)> {
    let reference = (segs("r0"), segs("r1"), segs("r2")).prop_map(|(a, b, c)| [a, b, c].concat());
    let hyp = (segs("h0"), segs("h1"), segs("h2")).prop_map(|(a, b, c)| [a, b, c].concat());
    (reference, hyp)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pit_invariant_to_joint_row_permutation((p, y, perm) in pit_case()) {
        let phi = Permutation::new(perm).unwrap();
        let (a, _) = diarization_loss_pit_values(&p, &y, None).unwrap();
        let (b, _) = diarization_loss_pit_values(&phi.apply_rows(&p), &phi.apply_rows(&y), None).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn kld_is_non_negative_and_zero_only_at_standard_normal(
        mu in prop::collection::vec(-3.0f64..3.0, 1..12),
        log_sigma in prop::collection::vec(-2.0f64..2.0, 12),
    ) {
        let n = mu.len();
        let sigma: Vec<f64> = log_sigma[..n].iter().map(|l| l.exp()).collect();
        let enc = StochasticEncoding::new(
            Tensor::new(vec![1, n], mu.clone()).unwrap(),
            Tensor::new(vec![1, n], sigma.clone()).unwrap(),
        ).unwrap();
        let k = kld_loss_values(&enc, 1.0).unwrap();
        prop_assert!(k >= 0.0);
        let dist = mu.iter().map(|m| m.abs()).chain(sigma.iter().map(|s| (s - 1.0).abs())).fold(0.0, f64::max);
        if dist > 1e-3 {
            prop_assert!(k > 1e-12);
        }
        let zero = StochasticEncoding::new(Tensor::zeros([1, n]), Tensor::filled([1, n], 1.0)).unwrap();
        prop_assert!(kld_loss_values(&zero, 1.0).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn total_loss_is_monotone_in_each_component(
        base in prop::collection::vec(0.0f64..5.0, 4),
        bump in 0.0f64..5.0,
        which in 0usize..4,
        w in prop::collection::vec(0.0f64..10.0, 3),
    ) {
        let weights = LossWeights { alpha: w[0], beta_e: w[1], beta_a: w[2], ..LossWeights::default() };
        let mut hi = base.clone();
        hi[which] += bump;
        let f = |v: &[f64]| total_loss_values(v[0], v[1], v[2], v[3], &weights);
        prop_assert!(f(&hi) >= f(&base));
    }

    #[test]
    fn der_invariant_to_hypothesis_relabeling((reference, hyp) in scoring_case(), shift in 1usize..3) {
        let relabeled: Vec<Seg> = hyp
            .iter()
            .map(|(n, a, b)| {
                let k: usize = n[1..].parse().unwrap();
                (format!("z{}", (k + shift) % 3), *a, *b)
            })
            .collect();
        let (r, h1, h2) = (timeline(&reference), timeline(&hyp), timeline(&relabeled));
        prop_assert_eq!(score_der(&r, &h1, 0.25, true).unwrap(), score_der(&r, &h2, 0.25, true).unwrap());
    }

    #[test]
    fn wider_collar_never_scores_more_speech(
        (reference, hyp) in scoring_case(),
        c1 in 0.0f64..1.0,
        extra in 0.0f64..1.0,
        overlap in prop::bool::ANY,
    ) {
        let (r, h) = (timeline(&reference), timeline(&hyp));
        let narrow = score_der(&r, &h, c1, overlap).unwrap();
        let wide = score_der(&r, &h, c1 + extra, overlap).unwrap();
        prop_assert!(wide.scored_speech_s <= narrow.scored_speech_s + 1e-12);
    }

    #[test]
    fn der_components_are_consistent((reference, hyp) in scoring_case(), overlap in prop::bool::ANY) {
        let d = score_der(&timeline(&reference), &timeline(&hyp), 0.25, overlap).unwrap();
        for v in [d.missed_speech_s, d.false_alarm_s, d.speaker_confusion_s, d.scored_speech_s] {
            prop_assert!(v >= 0.0);
        }
        prop_assert!(d.missed_speech_s + d.speaker_confusion_s <= d.scored_speech_s + 1e-9);
        if d.scored_speech_s > 0.0 {
            let want = (d.missed_speech_s + d.false_alarm_s + d.speaker_confusion_s) / d.scored_speech_s;
            prop_assert!((d.der - want).abs() <= 1e-12 * want.max(1.0));
        }
    }

    #[test]
    fn timelines_are_sorted_and_disjoint((reference, _) in scoring_case()) {
        let t = timeline(&reference);
        let raw: f64 = reference.iter().map(|(_, a, b)| b - a).sum();
        prop_assert!(t.total_speech() <= raw + 1e-9);
        for (_, segs) in t.speakers() {
            for w in segs.windows(2) {
                prop_assert!(w[0].1 < w[1].0);
            }
            prop_assert!(segs.iter().all(|(a, b)| b > a && *a >= 0.0));
        }
    }

    #[test]
    fn projected_covariance_is_the_congruence(
        cloud in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 5), 6..20),
        mu in prop::collection::vec(-3.0f64..3.0, 5),
        sigma in prop::collection::vec(0.0f64..3.0, 5),
    ) {
        let basis = pca_fit(&cloud).unwrap();
        let (_, cov) = project_encoding(&mu, &sigma, &basis);
        let w = &basis.components;
        // (W diag(σ²)) Wᵀ, accumulated in the opposite order
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..5).rev().map(|k| (w[i][k] * sigma[k] * sigma[k]) * w[j][k]).sum();
                prop_assert!((cov[i][j] - want).abs() <= 1e-14 * want.abs().max(1.0));
            }
        }
        let (_, zero) = project_encoding(&mu, &[0.0; 5], &basis);
        prop_assert_eq!(zero, [[0.0; 2]; 2]);
    }

    #[test]
    fn frame_categories_partition_frames(y in (1usize..5, 1usize..40).prop_flat_map(|(s, t)| binary(s, t))) {
        let (s, t) = (y.rows(), y.cols());
        let (mut silence, mut single, mut overlap) = (0, 0, 0);
        for k in 0..t {
            let col: Vec<f64> = (0..s).map(|r| y.get2(r, k)).collect();
            let active = col.iter().filter(|&&v| v > 0.5).count();
            match categorize_frames(&col) {
                Category::Silence => { prop_assert_eq!(active, 0); silence += 1 }
                Category::Speaker(i) => { prop_assert!(active == 1 && col[i] == 1.0); single += 1 }
                Category::Overlap => { prop_assert!(active >= 2); overlap += 1 }
                other => prop_assert!(false, "frame categorised as {other}"),
            }
        }
        prop_assert_eq!(silence + single + overlap, t);
    }

    #[test]
    fn softmax_rows_sum_to_one(x in (1usize..6, 1usize..10).prop_flat_map(|(r, c)| matrix(r, c, -50.0, 50.0))) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax_rows(v).unwrap();
        let out = g.value(s);
        for r in 0..out.rows() {
            prop_assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sigmoid_stays_in_open_unit_interval(x in -1e3f64..1e3) {
        let y = sigmoid(x);
        prop_assert!(y > 0.0 && y < 1.0);
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![x]));
        let s = g.sigmoid(v).unwrap();
        prop_assert_eq!(g.value(s).data()[0], y);
    }

    #[test]
    fn activity_probs_follow_attractor_order(
        (frames, attrs, perm) in (1usize..8, 1usize..5, 1usize..5).prop_flat_map(|(t, s, d)| {
            (matrix(t, d, -2.0, 2.0), matrix(s, d, -2.0, 2.0), Just((0..s).collect::<Vec<_>>()).prop_shuffle())
        })
    ) {
        let phi = Permutation::new(perm).unwrap();
        let p = activity_probs_values(&frames, &attrs).unwrap();
        let permuted = activity_probs_values(&frames, &phi.apply_rows(&attrs)).unwrap();
        prop_assert_eq!(permuted, phi.apply_rows(&p));
        prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rttm_round_trip_is_lossless(y in (1usize..4, 1usize..120).prop_flat_map(|(s, t)| binary(s, t))) {
        let names: Vec<String> = (0..y.rows()).map(|i| format!("spk{i}")).collect();
        let text = write_rttm("c", &y, &names, FRAME_SECONDS);
        let back = labels_from_segments(&read_rttm(&text).unwrap(), &names, y.cols(), FRAME_SECONDS).unwrap();
        prop_assert_eq!(back, y);
    }

    #[test]
    fn simulated_conversations_satisfy_invariants(
        seed in any::<u64>(),
        n_speakers in 1usize..5,
        frames in 40usize..120,
        overlap_prob in 0.0f64..1.0,
    ) {
        let cfg = SimConfig { n_speakers, frames, feat_dim: 4, overlap_prob, ..SimConfig::default() };
        let c = simulate_conversation(&cfg, "p", &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(c.y.shape(), &[n_speakers, frames]);
        prop_assert_eq!(c.x.shape(), &[frames, 4]);
        prop_assert!(c.x.is_finite());
        prop_assert!(c.y.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for s in 0..n_speakers {
            prop_assert!(c.y.row(s).iter().any(|&v| v == 1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_bytes_are_stable(seed in any::<u64>(), epoch in 0usize..100) {
        let model = EendEda::new(tiny_model_config(3, 8), &mut SeededRng::new(seed)).unwrap();
        let ck = Checkpoint::from_model(&model, Stage::Adapt, epoch, RngState { seed, epoch: epoch as u64 });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        ck.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        prop_assert_eq!(&back, &ck);
        back.save(&path).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}
