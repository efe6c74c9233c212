use proptest::prelude::*;
use scaar_core::leaksim::{
    emit_op, gen_dataset_with, hamming_weight, simulate_inference, DatasetOptions, LabelMode, LeakageModel, VictimSpec,
    ZeroSkip,
};
use scaar_core::pipeline::binomial_band;
use scaar_core::rng;
use scaar_core::trace::TraceSet;

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn noise_variance_matches_sigma() {
    for sigma in [0.5, 1.0, 3.0] {
        let m = LeakageModel {
            sigma,
            samples_per_op: 1,
            ..Default::default()
        };
        let mut r = rng::stream(1, 0);
        let draws: Vec<f64> = (0..10_000).map(|_| emit_op(0x5a, &m, &mut r)[0] as f64).collect();
        let (mean, var) = mean_var(&draws);
        let expected = m.b + m.a * hamming_weight(0x5a) as f64;
        assert!(
            (mean - expected).abs() < 4.0 * sigma / 100.0,
            "sigma {sigma}: mean {mean}"
        );
        assert!(
            (var / (sigma * sigma) - 1.0).abs() < 0.05,
            "sigma {sigma}: variance {var}"
        );
    }
}

#[test]
fn noiseless_class_means_follow_the_emission_law() {
    let spec = VictimSpec::default_victim(0);
    let m = LeakageModel {
        sigma: 0.0,
        ..Default::default()
    };
    let mut r = rng::stream(2, 0);
    let input = spec.draw_input(3, &mut r);
    let t = simulate_inference(&input, &spec, &m, 9).unwrap();
    let ops = spec.operands(&input);
    for (k, &op) in ops.iter().enumerate() {
        let expected = if op == 0 {
            0.0
        } else {
            m.b + m.a * hamming_weight(op) as f64
        } as f32;
        assert!(t.samples[k * 4..k * 4 + 4].iter().all(|&s| s == expected));
    }
}

#[test]
fn flipped_output_labels_occur_at_the_configured_rate() {
    let spec = VictimSpec::default_victim(0);
    let m = LeakageModel {
        sigma: 0.0,
        ..Default::default()
    };
    let opts = DatasetOptions {
        session_id: 0,
        labels: LabelMode::OutputAttribute { flip_prob: 0.08 },
    };
    let set = gen_dataset_with(&spec, &m, 200, 5, &opts).unwrap();
    let flipped = set
        .traces()
        .iter()
        .enumerate()
        .filter(|(k, t)| t.label as usize != k % 10)
        .count();
    let (lo, hi) = binomial_band(set.len(), 0.08, 0.99);
    let rate = flipped as f64 / set.len() as f64;
    assert!((lo..=hi).contains(&rate), "flip rate {rate} outside [{lo}, {hi}]");
}

#[test]
fn sessions_share_labels_not_noise() {
    let spec = VictimSpec::default_victim(0);
    let m = LeakageModel::default();
    let gen = |seed| -> TraceSet { gen_dataset_with(&spec, &m, 5, seed, &DatasetOptions::default()).unwrap() };
    let (a, b) = (gen(1), gen(2));
    assert_eq!(a.labels(), b.labels());
    assert_ne!(a.traces()[0].samples, b.traces()[0].samples);
    assert_eq!(gen(1), a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zeroing_an_operand_never_lengthens_time_mode_traces(
        input in proptest::collection::vec(any::<u8>(), 64),
        which in 0usize..64,
    ) {
        let spec = VictimSpec::default_victim(0);
        let m = LeakageModel { zero_skip: ZeroSkip::Time, ..Default::default() };
        let active = |x: &[u8]| -> usize {
            simulate_inference(x, &spec, &m, 0).unwrap().meta["active_len"].parse().unwrap()
        };
        let mut zeroed = input.clone();
        zeroed[which] = 0;
        prop_assert!(active(&zeroed) <= active(&input));
    }
}
