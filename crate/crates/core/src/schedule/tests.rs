use super::*;
use crate::partial::{ActivationProfile, NeuronStrategy};
use crate::rng::seeded_rng;

fn large() -> ModelConfig {
    ModelConfig {
        enc_layers: 24,
        dec_layers: 24,
        d_model: 8,
        d_ff: 2816,
        n_heads: 2,
        vocab_size: 16,
        prompt_len: 2,
        max_len: 8,
    }
}

fn flat_profile(cfg: &ModelConfig) -> ActivationProfile {
    let layer: Vec<f64> = (0..cfg.d_ff).map(|i| (i % 7) as f64).collect();
    ActivationProfile {
        enc: vec![layer.clone(); cfg.enc_layers],
        dec: vec![layer; cfg.dec_layers],
        sample_count: 1,
        prompt_seed: 0,
    }
}

#[test]
fn fr_preset_widths() {
    let cfg = large();
    let s = preset_schedule(
        Preset::Fr4Stage,
        &cfg,
        1000,
        &PresetOptions::default(),
        Some(&flat_profile(&cfg)),
        &seeded_rng(0, "p"),
    )
    .unwrap();
    let widths: Vec<usize> = s.stages.iter().map(|st| st.spec.enc_widths()[0]).collect();
    assert_eq!(widths, vec![704, 1408, 2112, 2816]);
    assert!(s.stages.iter().all(|st| st.spec.enc_layers.len() == 24));
    assert!(s.stages[3].spec.is_identity(&cfg));
}

#[test]
fn preset_fractions() {
    assert_eq!(Preset::Ld2Stage.step_fractions(), &[0.6, 0.4]);
    for p in Preset::ALL {
        let sum: f64 = p.step_fractions().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(p.name().parse::<Preset>().unwrap(), p);
    }
    assert!("bogus".parse::<Preset>().is_err());
}

#[test]
fn four_stage_boundaries() {
    let cfg = ModelConfig::tiny();
    let s = preset_schedule(
        Preset::Ld4Stage,
        &cfg,
        1000,
        &PresetOptions::default(),
        None,
        &seeded_rng(0, "p"),
    )
    .unwrap();
    assert_eq!(s.boundaries(), vec![200, 400, 600]);
    assert_eq!(s.total_steps(), 1000);
    assert_eq!(s.stage_at(0), 0);
    assert_eq!(s.stage_at(199), 0);
    assert_eq!(s.stage_at(200), 1);
    assert_eq!(s.stage_at(999), 3);
    let layers: Vec<usize> = s.stages.iter().map(|st| st.spec.enc_layers.len()).collect();
    assert_eq!(layers, vec![1, 2, 3, 4]);
}

#[test]
fn two_stage_preset() {
    let cfg = large();
    let s = preset_schedule(
        Preset::Ld2Stage,
        &cfg,
        500,
        &PresetOptions::default(),
        None,
        &seeded_rng(0, "p"),
    )
    .unwrap();
    assert_eq!(s.stages.iter().map(|st| st.steps).collect::<Vec<_>>(), vec![300, 200]);
    assert_eq!(s.stages[0].spec.enc_layers.len(), 18);
    assert_eq!(s.step_fractions(), vec![0.6, 0.4]);
}

#[test]
fn fr_preset_needs_a_profile_for_activation_masks() {
    let cfg = ModelConfig::tiny();
    let rng = seeded_rng(0, "p");
    assert!(Preset::Fr4Stage.needs_profile());
    assert!(preset_schedule(Preset::Fr4Stage, &cfg, 100, &PresetOptions::default(), None, &rng).is_err());
    let random = PresetOptions {
        neuron_strategy: NeuronStrategy::Random,
        ..PresetOptions::default()
    };
    assert!(preset_schedule(Preset::Fr4Stage, &cfg, 100, &random, None, &rng).is_ok());
}

#[test]
fn allocation_rules() {
    assert_eq!(allocate_steps(10, &[0.2, 0.2, 0.2, 0.4]).unwrap(), vec![2, 2, 2, 4]);
    assert_eq!(allocate_steps(7, &[0.5, 0.5]).unwrap(), vec![4, 3]);
    assert!(allocate_steps(2, &[0.2, 0.2, 0.2, 0.4]).is_err());
    assert!(allocate_steps(10, &[0.5, 0.6]).is_err());
}

#[test]
fn validation_and_serialization() {
    let cfg = ModelConfig::tiny();
    let s = preset_schedule(
        Preset::Cr4Stage,
        &cfg,
        100,
        &PresetOptions {
            neuron_strategy: NeuronStrategy::Random,
            ..PresetOptions::default()
        },
        None,
        &seeded_rng(1, "p"),
    )
    .unwrap();
    let text = serde_json::to_string_pretty(&s).unwrap();
    let back: Schedule = serde_json::from_str(&text).unwrap();
    assert_eq!(back, s);

    let mut bad = s.clone();
    bad.stages.pop();
    assert!(bad.validate(&cfg).is_err());
    bad.partial_final = true;
    assert!(bad.validate(&cfg).is_ok());
    bad.stages[0].steps = 0;
    assert!(bad.validate(&cfg).is_err());
    assert!(Schedule {
        stages: vec![],
        partial_final: true
    }
    .validate(&cfg)
    .is_err());
}
