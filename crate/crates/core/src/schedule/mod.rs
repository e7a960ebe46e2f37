//! Progressive training schedules and the named presets.

use serde::{Deserialize, Serialize};

use crate::cost::{schedule_cost_from_specs, CostReport, SeqProfile};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::partial::{
    make_partial_spec, ActivationProfile, DecoderPolicy, LayerStrategy, NeuronStrategy, PartialOptions, PartialSpec,
};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub label: String,
    pub spec: PartialSpec,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub stages: Vec<Stage>,
    /// Permit a final stage that is not the full model.
    #[serde(default)]
    pub partial_final: bool,
}

impl Schedule {
    /// One stage on `spec`.
    pub fn single(spec: PartialSpec, steps: usize) -> Self {
        Schedule {
            stages: vec![Stage {
                label: "full".into(),
                spec,
                steps,
            }],
            partial_final: true,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let last = self.stages.last().ok_or(Error::Empty("schedule"))?;
        for (i, st) in self.stages.iter().enumerate() {
            if st.steps == 0 {
                return Err(Error::Config(format!("stage {} has no steps", i + 1)));
            }
            st.spec.validate(config)?;
        }
        if !self.partial_final && !last.spec.is_identity(config) {
            return Err(Error::Config("final stage is not the full model".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// Global step at which each stage after the first begins.
    pub fn boundaries(&self) -> Vec<usize> {
        self.stages
            .iter()
            .scan(0, |acc, s| {
                *acc += s.steps;
                Some(*acc)
            })
            .take(self.stages.len().saturating_sub(1))
            .collect()
    }

    pub fn step_fractions(&self) -> Vec<f64> {
        let total = self.total_steps() as f64;
        self.stages.iter().map(|s| s.steps as f64 / total).collect()
    }

    /// Stage index active at global step `t` (0-based).
    pub fn stage_at(&self, t: usize) -> usize {
        self.boundaries().iter().take_while(|&&b| b <= t).count()
    }

    pub fn cost(&self, config: &ModelConfig, seq: &SeqProfile) -> Result<CostReport> {
        self.validate(config)?;
        let stages: Vec<(String, &PartialSpec, usize)> =
            self.stages.iter().map(|s| (s.label.clone(), &s.spec, s.steps)).collect();
        schedule_cost_from_specs(config, &stages, seq)
    }
}

/// Splits `total` steps by `fractions`; the last stage takes the remainder.
pub fn allocate_steps(total: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    let sum: f64 = fractions.iter().sum();
    if fractions.is_empty() || (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::InvalidArgument(format!("step fractions {fractions:?} must be positive and sum to 1")));
    }
    let mut steps: Vec<usize> = fractions[..fractions.len() - 1]
        .iter()
        .map(|f| (f * total as f64).round() as usize)
        .collect();
    let used: usize = steps.iter().sum();
    if used >= total || steps.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "{total} steps cannot be split into {} stages",
            fractions.len()
        )));
    }
    steps.push(total - used);
    Ok(steps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Ld4Stage,
    Fr4Stage,
    Cr4Stage,
    Ld2Stage,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Ld4Stage, Preset::Fr4Stage, Preset::Cr4Stage, Preset::Ld2Stage];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Ld4Stage => "ld-4stage",
            Preset::Fr4Stage => "fr-4stage",
            Preset::Cr4Stage => "cr-4stage",
            Preset::Ld2Stage => "ld-2stage",
        }
    }

    pub fn step_fractions(self) -> &'static [f64] {
        match self {
            Preset::Ld2Stage => &[0.6, 0.4],
            _ => &[0.2, 0.2, 0.2, 0.4],
        }
    }

    /// `(depth, width)` fraction of each stage.
    pub fn ladder(self) -> Vec<(f64, f64)> {
        const Q: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
        match self {
            Preset::Ld4Stage => Q.iter().map(|&f| (f, 1.0)).collect(),
            Preset::Fr4Stage => Q.iter().map(|&f| (1.0, f)).collect(),
            Preset::Cr4Stage => Q.iter().map(|&f| (f, f)).collect(),
            Preset::Ld2Stage => vec![(0.75, 1.0), (1.0, 1.0)],
        }
    }

    pub fn needs_profile(self) -> bool {
        matches!(self, Preset::Fr4Stage | Preset::Cr4Stage)
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset {s:?}")))
    }
}

/// Strategy knobs shared by every stage of a preset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetOptions {
    pub layer_strategy: LayerStrategy,
    pub neuron_strategy: NeuronStrategy,
    pub decoder_policy: DecoderPolicy,
}

impl Default for PresetOptions {
    fn default() -> Self {
        PresetOptions {
            layer_strategy: LayerStrategy::Uniform,
            neuron_strategy: NeuronStrategy::Activation,
            decoder_policy: DecoderPolicy::Reduce,
        }
    }
}

/// Builds the named schedule over `total_steps`.
pub fn preset_schedule(
    preset: Preset,
    config: &ModelConfig,
    total_steps: usize,
    opts: &PresetOptions,
    profile: Option<&ActivationProfile>,
    rng: &Rng,
) -> Result<Schedule> {
    ladder_schedule(&preset.ladder(), preset.step_fractions(), config, total_steps, opts, profile, rng)
}

/// Schedule over an explicit `(depth, width)` ladder.
pub fn ladder_schedule(
    ladder: &[(f64, f64)],
    fractions: &[f64],
    config: &ModelConfig,
    total_steps: usize,
    opts: &PresetOptions,
    profile: Option<&ActivationProfile>,
    rng: &Rng,
) -> Result<Schedule> {
    if ladder.len() != fractions.len() {
        return Err(Error::InvalidArgument("ladder and fractions differ in length".into()));
    }
    let steps = allocate_steps(total_steps, fractions)?;
    let stages = ladder
        .iter()
        .zip(steps)
        .enumerate()
        .map(|(i, (&(depth, width), steps))| {
            let po = PartialOptions {
                depth_fraction: depth,
                width_fraction: width,
                layer_strategy: opts.layer_strategy,
                neuron_strategy: opts.neuron_strategy,
                decoder_policy: opts.decoder_policy,
            };
            let spec = make_partial_spec(config, &po, profile, &rng.child(&format!("stage{}", i + 1)))?;
            Ok(Stage {
                label: format!("stage{} {}", i + 1, spec.label(config)),
                spec,
                steps,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let schedule = Schedule {
        stages,
        partial_final: false,
    };
    schedule.validate(config)?;
    Ok(schedule)
}

#[cfg(test)]
mod tests;
