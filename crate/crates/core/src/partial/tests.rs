use proptest::prelude::*;

use super::*;
use crate::model::{init_weights, Example, ModelWeights, TokenBatch};
use crate::rng::seeded_rng;
use crate::tensor::Tensor;

/// Independent oracle for the top-k rule: neuron `j` survives iff fewer than
/// `keep` neurons beat it, where higher score wins and equal scores go to the
/// lower index.
fn brute_keep(scores: &[f64], keep: usize) -> Vec<usize> {
    (0..scores.len())
        .filter(|&j| {
            let beaten_by = (0..scores.len())
                .filter(|&i| scores[i] > scores[j] || (scores[i] == scores[j] && i < j))
                .count();
            beaten_by < keep
        })
        .collect()
}

/// `round(1 + (i-1)(L-1)/(k-1))` with halves going down, evaluated in f64.
fn brute_uniform(total: usize, k: usize) -> Vec<usize> {
    if k == 1 {
        return vec![1];
    }
    (1..=k)
        .map(|i| {
            let x = 1.0 + (i - 1) as f64 * (total - 1) as f64 / (k - 1) as f64;
            let f = x.floor();
            if x - f > 0.5 + 1e-12 {
                f as usize + 1
            } else {
                f as usize
            }
        })
        .collect()
}

fn large() -> ModelConfig {
    ModelConfig {
        enc_layers: 24,
        dec_layers: 24,
        d_model: 8,
        d_ff: 2816,
        n_heads: 1,
        vocab_size: 16,
        prompt_len: 2,
        max_len: 8,
    }
}

fn profile_of(config: &ModelConfig, seed: u64) -> ActivationProfile {
    let mut rng = seeded_rng(seed, "scores");
    let layer = |rng: &mut crate::rng::Rng| (0..config.d_ff).map(|_| rng.below(50) as f64).collect::<Vec<_>>();
    ActivationProfile {
        enc: (0..config.enc_layers).map(|_| layer(&mut rng)).collect(),
        dec: (0..config.dec_layers).map(|_| layer(&mut rng)).collect(),
        sample_count: 1,
        prompt_seed: seed,
    }
}

#[test]
fn uniform_selection_examples() {
    assert_eq!(select_layers_uniform(24, 3).unwrap(), vec![1, 12, 24]);
    assert_eq!(select_layers_uniform(24, 6).unwrap(), vec![1, 6, 10, 15, 19, 24]);
    assert_eq!(select_layers_uniform(24, 6).unwrap(), brute_uniform(24, 6));
    assert_eq!(select_layers_uniform(7, 7).unwrap(), (1..=7).collect::<Vec<_>>());
    assert_eq!(select_layers_uniform(5, 1).unwrap(), vec![1]);
    assert!(select_layers_uniform(4, 5).is_err());
    assert!(select_layers_uniform(4, 0).is_err());
}

#[test]
fn last_selection_examples() {
    assert_eq!(select_layers_last(24, 3).unwrap(), vec![1, 2, 3]);
    assert_eq!(select_layers_last(6, 6).unwrap(), (1..=6).collect::<Vec<_>>());
    assert_eq!(select_layers_last(5, 1).unwrap(), vec![1]);
    assert!(select_layers_last(3, 4).is_err());
}

#[test]
fn neuron_tie_rule() {
    let s = [5.0, 1.0, 9.0, 9.0];
    assert_eq!(top_scores_mask(&s, 2).active_indices(), vec![2, 3]);
    assert_eq!(top_scores_mask(&s, 3).active_indices(), vec![0, 2, 3]);
    assert_eq!(brute_keep(&s, 3), vec![0, 2, 3]);
    assert_eq!(top_scores_mask(&[1.0, 1.0, 1.0], 2).active_indices(), vec![0, 1]);
}

#[test]
fn kept_counts() {
    assert_eq!(kept_neurons(0.25, 2816).unwrap(), 704);
    assert_eq!(kept_neurons(0.5, 2816).unwrap(), 1408);
    assert_eq!(kept_neurons(0.75, 2816).unwrap(), 2112);
    assert_eq!(kept_neurons(1.0, 2816).unwrap(), 2816);
    assert_eq!(kept_neurons(0.3, 10).unwrap(), 3);
    assert_eq!(kept_neurons(0.31, 10).unwrap(), 4);
    assert_eq!(kept_neurons(1e-9, 10).unwrap(), 1);
    assert!(kept_neurons(0.0, 10).is_err());
    assert!(kept_neurons(1.5, 10).is_err());
    assert_eq!(retained_count(0.25, 24).unwrap(), 6);
    assert_eq!(retained_count(0.01, 24).unwrap(), 1);
    assert_eq!(retained_count(0.75, 4).unwrap(), 3);
    assert!(retained_count(-0.5, 4).is_err());
}

#[test]
fn select_neurons_full_fraction_keeps_all() {
    let cfg = ModelConfig {
        d_ff: 40,
        enc_layers: 2,
        dec_layers: 2,
        ..large()
    };
    let p = profile_of(&cfg, 1);
    for strategy in [NeuronStrategy::Activation, NeuronStrategy::Random] {
        let m = select_neurons(&p, 1.0, strategy, &seeded_rng(0, "n")).unwrap();
        assert!(m.enc.iter().chain(&m.dec).all(NeuronMask::is_full));
    }
    assert!(select_neurons(&p, 0.0, NeuronStrategy::Activation, &seeded_rng(0, "n")).is_err());
}

#[test]
fn random_masks_follow_the_seed() {
    let cfg = ModelConfig {
        d_ff: 64,
        enc_layers: 3,
        dec_layers: 3,
        ..large()
    };
    let p = profile_of(&cfg, 2);
    let a = select_neurons(&p, 0.25, NeuronStrategy::Random, &seeded_rng(5, "n")).unwrap();
    let b = select_neurons(&p, 0.25, NeuronStrategy::Random, &seeded_rng(5, "n")).unwrap();
    let c = select_neurons(&p, 0.25, NeuronStrategy::Random, &seeded_rng(6, "n")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.enc.iter().all(|m| m.active() == 16));
    assert_ne!(a.enc[0], a.enc[1]);
}

#[test]
fn partial_spec_table_rows() {
    let cfg = large();
    let rng = seeded_rng(0, "spec");
    let p = profile_of(&cfg, 3);
    let identity = make_partial_spec(&cfg, &PartialOptions::full(), None, &rng).unwrap();
    assert_eq!(identity, PartialSpec::identity(&cfg));

    let fr = PartialOptions {
        width_fraction: 0.25,
        ..PartialOptions::full()
    };
    let spec = make_partial_spec(&cfg, &fr, Some(&p), &rng).unwrap();
    assert_eq!(spec.enc_layers.len(), 24);
    assert!(spec.enc_widths().iter().chain(&spec.dec_widths()).all(|&w| w == 704));

    let cr = PartialOptions {
        depth_fraction: 0.25,
        width_fraction: 0.25,
        ..PartialOptions::full()
    };
    let spec = make_partial_spec(&cfg, &cr, Some(&p), &rng).unwrap();
    assert_eq!((spec.enc_layers.len(), spec.dec_layers.len()), (6, 6));
    assert_eq!(spec.enc_layers, vec![1, 6, 10, 15, 19, 24]);
    assert!(spec.enc_widths().iter().all(|&w| w == 704));
    assert_eq!(spec.enc_masks[1], top_scores_mask(&p.enc[5], 704));

    assert!(make_partial_spec(&cfg, &fr, None, &rng).is_err());
    let random = PartialOptions {
        neuron_strategy: NeuronStrategy::Random,
        ..fr
    };
    assert!(make_partial_spec(&cfg, &random, None, &rng).is_ok());
}

#[test]
fn retain_full_decoder_is_never_reduced() {
    let cfg = large();
    let p = profile_of(&cfg, 4);
    for (depth, width) in [(0.25, 0.25), (0.5, 1.0), (1.0, 0.5)] {
        let opts = PartialOptions {
            depth_fraction: depth,
            width_fraction: width,
            decoder_policy: DecoderPolicy::RetainFull,
            ..PartialOptions::full()
        };
        let spec = make_partial_spec(&cfg, &opts, Some(&p), &seeded_rng(0, "s")).unwrap();
        assert_eq!(spec.dec_layers, (1..=24).collect::<Vec<_>>());
        assert!(spec.dec_masks.iter().all(NeuronMask::is_full));
    }
}

#[test]
fn subsumption_examples() {
    let cfg = large();
    let rng = seeded_rng(0, "s");
    let depth = |f| {
        make_partial_spec(
            &cfg,
            &PartialOptions {
                depth_fraction: f,
                ..PartialOptions::full()
            },
            None,
            &rng,
        )
        .unwrap()
    };
    let a = depth(3.0 / 24.0);
    let b = depth(6.0 / 24.0);
    assert_eq!(a.enc_layers, vec![1, 12, 24]);
    assert!(is_subsumed(&a, &a, &cfg).unwrap());
    assert!(!is_subsumed(&a, &b, &cfg).unwrap());
    assert!(is_subsumed(&b, &PartialSpec::identity(&cfg), &cfg).unwrap());

    let mut narrow = PartialSpec::identity(&cfg);
    narrow.enc_masks[3] = NeuronMask::keeping(cfg.d_ff, [1, 2, 3]);
    assert!(is_subsumed(&narrow, &PartialSpec::identity(&cfg), &cfg).unwrap());
    assert!(!is_subsumed(&PartialSpec::identity(&cfg), &narrow, &cfg).unwrap());

    let other = ModelConfig {
        d_ff: 100,
        ..cfg.clone()
    };
    assert!(is_subsumed(&a, &a, &other).is_err());
}

#[test]
fn spec_validation() {
    let cfg = ModelConfig::tiny();
    let mut s = PartialSpec::identity(&cfg);
    assert!(s.validate(&cfg).is_ok());
    assert!(s.is_identity(&cfg));
    s.enc_masks[0] = NeuronMask::keeping(cfg.d_ff, []);
    assert!(s.validate(&cfg).is_err());
    let mut s = PartialSpec::identity(&cfg);
    s.dec_layers = vec![1, 5];
    s.dec_masks.truncate(2);
    assert!(s.validate(&cfg).is_err());
    let mut s = PartialSpec::identity(&cfg);
    s.decoder_policy = DecoderPolicy::RetainFull;
    s.dec_masks[0] = NeuronMask::keeping(cfg.d_ff, [0]);
    assert!(s.validate(&cfg).is_err());
}

#[test]
fn spec_serializes_as_plain_json() {
    let cfg = ModelConfig::tiny();
    let mut s = PartialSpec::identity(&cfg);
    s.decoder_policy = DecoderPolicy::RetainFull;
    let text = serde_json::to_string(&s).unwrap();
    assert!(text.contains("\"retain-full\""));
    let back: PartialSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, s);
    assert_eq!(s.label(&cfg), "enc 4/4 dec 4/4 ffn 128");
}

fn tiny_weights(seed: u64) -> ModelWeights {
    let cfg = ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        d_model: 8,
        d_ff: 8,
        n_heads: 2,
        vocab_size: 16,
        prompt_len: 2,
        max_len: 12,
    };
    init_weights(&cfg, &seeded_rng(seed, "w")).unwrap()
}

fn sample() -> Vec<TokenBatch> {
    let ex: Vec<Example> = (0..6)
        .map(|i| Example {
            input: (8..8 + 1 + i % 4).map(|t| t as u32).collect(),
            target: vec![9 + (i % 3) as u32],
        })
        .collect();
    vec![TokenBatch::new(&ex[..4]), TokenBatch::new(&ex[4..])]
}

#[test]
fn zero_inputs_give_zero_scores() {
    let mut w = tiny_weights(1);
    let d = w.config.d_model;
    w.embed = Tensor::zeros(&[16, d]);
    w.enc_pos = Tensor::zeros(&[12, d]);
    w.dec_pos = Tensor::zeros(&[12, d]);
    for l in &mut w.encoder {
        l.attn.wo = Tensor::zeros(&[d, d]);
    }
    for l in &mut w.decoder {
        l.self_attn.wo = Tensor::zeros(&[d, d]);
        l.cross_attn.wo = Tensor::zeros(&[d, d]);
    }
    let p = profile_activations(&w, &sample(), &seeded_rng(0, "p"), &ProfileOptions::default()).unwrap();
    assert!(p.enc.iter().chain(&p.dec).flatten().all(|&s| s == 0.0));
    assert_eq!(p.sample_count, 6);
}

#[test]
fn unit_input_scores_one_neuron() {
    let mut w = tiny_weights(2);
    let d = w.config.d_model;
    let j = 3;
    let mut embed = vec![0f32; 16 * d];
    embed[9 * d + j] = 1.0;
    w.embed = Tensor::new(vec![16, d], embed).unwrap();
    w.enc_pos = Tensor::zeros(&[12, d]);
    let eye: Vec<f32> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
    let l = &mut w.encoder[0];
    l.attn.wo = Tensor::zeros(&[d, d]);
    l.ffn.w1 = Tensor::new(vec![d, d], eye).unwrap();
    let batch = TokenBatch::new(&[Example {
        input: vec![9],
        target: vec![9],
    }]);
    let p = profile_activations(&w, &[batch], &seeded_rng(0, "p"), &ProfileOptions::default()).unwrap();
    // RMS normalization maps e_j to e_j / sqrt(1/d + 1e-6).
    let expected = 1.0 / (1.0 / d as f64 + 1e-6).sqrt();
    for (i, &s) in p.enc[0].iter().enumerate() {
        if i == j {
            assert!((s - expected).abs() < 1e-5, "{s}");
        } else {
            assert_eq!(s, 0.0);
        }
    }
}

#[test]
fn duplicated_sample_doubles_scores() {
    let w = tiny_weights(3);
    let rng = seeded_rng(0, "p");
    let opts = ProfileOptions::default();
    let once = profile_activations(&w, &sample(), &rng, &opts).unwrap();
    let mut twice_sample = sample();
    twice_sample.extend(sample());
    let twice = profile_activations(&w, &twice_sample, &rng, &opts).unwrap();
    for (a, b) in once.enc.iter().chain(&once.dec).flatten().zip(twice.enc.iter().chain(&twice.dec).flatten()) {
        assert_eq!(2.0 * a, *b);
    }
    assert!(once.enc[0].iter().any(|&s| s > 0.0));
    let again = profile_activations(&w, &sample(), &rng, &opts).unwrap();
    assert_eq!(once, again);
    assert!(profile_activations(&w, &[], &rng, &opts).is_err());
}

#[test]
fn profile_round_trips_through_json() {
    let w = tiny_weights(4);
    let p = profile_activations(&w, &sample(), &seeded_rng(1, "p"), &ProfileOptions::default()).unwrap();
    let back: ActivationProfile = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
    assert_eq!(back, p);
}

proptest! {
    #[test]
    fn uniform_selection_properties(total in 1usize..=32, k_seed in 0usize..1000) {
        let k = 1 + k_seed % total;
        let s = select_layers_uniform(total, k).unwrap();
        prop_assert_eq!(s.len(), k);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(s[0], 1);
        if k >= 2 {
            prop_assert_eq!(*s.last().unwrap(), total);
        }
        prop_assert_eq!(s, brute_uniform(total, k));
    }

    #[test]
    fn activation_mask_keeps_the_top(scores in prop::collection::vec(0u8..20, 1..40), frac in 0.01f64..=1.0) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let keep = kept_neurons(frac, scores.len()).unwrap();
        let m = top_scores_mask(&scores, keep);
        prop_assert_eq!(m.active(), keep);
        prop_assert_eq!(m.active_indices(), brute_keep(&scores, keep));
        let kept_min = m.active_indices().iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        let dropped_max = (0..scores.len()).filter(|&i| !m.bits()[i]).map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(kept_min >= dropped_max);
    }
}
