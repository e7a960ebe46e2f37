use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fastpt::analysis::{ablation_report, embeddings_csv, similarity_from_sets, AblationRun, PromptSet, SimilarityMatrix};
use fastpt::checkpoint::{load_checkpoint, load_config, load_prompt, save_checkpoint};
use fastpt::cost::SeqProfile;
use fastpt::model::{init_weights, ModelConfig, ModelWeights, TokenBatch};
use fastpt::optim::OptimizerKind;
use fastpt::partial::{
    make_partial_spec, profile_activations, ActivationProfile, LayerStrategy, NeuronStrategy, PartialOptions,
    ProfileOptions,
};
use fastpt::schedule::{ladder_schedule, preset_schedule, PresetOptions, Schedule};
use fastpt::tasks::{gen_pretrain_corpus, gen_task, TaskData, TaskSpec};
use fastpt::trainer::{fpt_train, init_prompt, pt_train, pretrain_with_losses, write_run_dir, Hyper, RunRecord};
use fastpt::seeded_rng;

use crate::args::*;

/// Bad invocation detected after parsing; exits with the usage code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(a) => pretrain(a),
        Command::Tune(a) => tune(a),
        Command::Fpt(a) => fpt(a),
        Command::Profile(a) => profile(a),
        Command::Flops(a) => flops(a),
        Command::Analyze(a) => analyze(a),
        Command::Ablate(a) => ablate(a),
        Command::SweepStages(a) => sweep(a),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("FASTPT_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| usage(format!("FASTPT_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn read_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(ModelConfig::tiny()),
    }
}

fn load_model(src: &ModelSource, seed: u64) -> Result<ModelWeights> {
    if let Some(dir) = &src.backbone {
        let (w, _) = load_checkpoint(dir).with_context(|| format!("loading backbone {}", dir.display()))?;
        return Ok(w);
    }
    let cfg = read_config(src.config.as_deref())?;
    Ok(init_weights(&cfg, &seeded_rng(seed, "backbone"))?)
}

fn make_task(a: &TaskArgs, config: &ModelConfig) -> Result<TaskData> {
    let mut spec = TaskSpec::new(a.task, config.vocab_size, a.task_seed);
    if let Some(n) = a.train_size {
        spec.train_size = n;
    }
    if let Some(n) = a.dev_size {
        spec.dev_size = n;
    }
    if spec.max_len > config.max_input_len() {
        bail!("task inputs up to {} tokens exceed the model's {}", spec.max_len, config.max_input_len());
    }
    Ok(gen_task(&spec)?)
}

fn hyper(t: &TrainArgs, seed: u64) -> Hyper {
    Hyper {
        learning_rate: t.learning_rate,
        batch_size: t.batch_size,
        optimizer: t.optimizer,
        eval_every: t.eval_every,
        seed,
        prompt_std: t.prompt_std,
        reset_optimizer: !t.keep_optimizer,
        eval_size: t.eval_size,
    }
}

/// One `(seed, dir)` per requested run.
fn seed_dirs(train: &TrainArgs, common: &Common) -> Result<Vec<(u64, PathBuf)>> {
    if train.seeds.is_empty() {
        return Ok(vec![(resolve_seed(common.seed)?, common.out.clone())]);
    }
    if common.seed.is_some() {
        return Err(usage("--seed and --seeds are mutually exclusive"));
    }
    Ok(train.seeds.iter().map(|&s| (s, common.out.join(format!("seed{s}")))).collect())
}

fn profile_from(weights: &ModelWeights, task: &TaskData, samples: usize, seed: u64) -> Result<ActivationProfile> {
    let n = samples.min(task.train.len());
    let batches: Vec<TokenBatch> = task.train[..n].chunks(64).map(TokenBatch::new).collect();
    Ok(profile_activations(weights, &batches, &seeded_rng(seed, "profile"), &ProfileOptions::default())?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn save_run(
    dir: &Path,
    weights: &ModelWeights,
    schedule: &Schedule,
    task: &TaskData,
    h: &Hyper,
    record: &mut RunRecord,
    profile: Option<&ActivationProfile>,
) -> Result<()> {
    write_run_dir(dir, weights, schedule, h, record)?;
    write_json(&dir.join("task.json"), &task.spec)?;
    let seq = SeqProfile::from_examples(&task.train, weights.config.prompt_len)?;
    fs::write(dir.join("cost.csv"), schedule.cost(&weights.config, &seq)?.to_csv())?;
    if let Some(p) = profile {
        write_json(&dir.join("profile.json"), p)?;
    }
    Ok(())
}

fn report(seed: u64, record: &RunRecord, relative: f64) {
    if let Some(e) = record.final_eval() {
        println!("seed {seed}: em {:.4} loss {:.4} relative_cost {relative:.4}", e.em, e.loss);
    }
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let seed = resolve_seed(a.common.seed)?;
    let cfg = read_config(a.config.as_deref())?;
    let corpus = gen_pretrain_corpus(&cfg, a.corpus_size, seed)?;
    let h = Hyper {
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        optimizer: OptimizerKind::Adam,
        ..Hyper::prompt_tuning(seed)
    };
    let rep = pretrain_with_losses(&cfg, &corpus, a.steps, &h)?;
    save_checkpoint(&a.common.out, &rep.weights, None)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in rep.losses.iter().enumerate() {
        writeln!(csv, "{},{l:.6}", i + 1).unwrap();
    }
    fs::write(a.common.out.join("pretrain_losses.csv"), csv)?;
    write_json(&a.common.out.join("pretrain.json"), &(&h, a.corpus_size, a.steps))?;
    println!("weights digest {}", rep.weights.digest());
    Ok(())
}

fn tune(a: TuneArgs) -> Result<()> {
    for (seed, dir) in seed_dirs(&a.train, &a.common)? {
        let weights = load_model(&a.model, seed)?;
        let cfg = weights.config.clone();
        let task = make_task(&a.task, &cfg)?;
        let opts = PartialOptions {
            depth_fraction: a.depth,
            width_fraction: a.width,
            layer_strategy: a.strategy.layer_strategy,
            neuron_strategy: a.strategy.neuron_strategy,
            decoder_policy: a.strategy.decoder_policy,
        };
        let profile = if a.width < 1.0 && a.strategy.neuron_strategy == NeuronStrategy::Activation {
            Some(profile_from(&weights, &task, a.strategy.profile_samples, seed)?)
        } else {
            None
        };
        let spec = make_partial_spec(&cfg, &opts, profile.as_ref(), &seeded_rng(seed, "spec"))?;
        let schedule = Schedule::single(spec.clone(), a.train.steps);
        let seq = SeqProfile::from_examples(&task.train, cfg.prompt_len)?;
        let cost = schedule.cost(&cfg, &seq)?;
        if a.dry_run {
            print!("{}", cost.to_csv());
            continue;
        }
        let h = hyper(&a.train, seed);
        let (_, mut record) = pt_train(&weights, &spec, &init_prompt(&cfg, &h), &task, a.train.steps, &h)?;
        save_run(&dir, &weights, &schedule, &task, &h, &mut record, profile.as_ref())?;
        report(seed, &record, cost.weighted_relative);
    }
    Ok(())
}

fn fpt(a: FptArgs) -> Result<()> {
    for (seed, dir) in seed_dirs(&a.train, &a.common)? {
        let weights = load_model(&a.model, seed)?;
        let cfg = weights.config.clone();
        let task = make_task(&a.task, &cfg)?;
        let mut profile = None;
        let schedule = match (&a.preset, &a.schedule) {
            (Some(preset), None) => {
                if preset.needs_profile() && a.strategy.neuron_strategy == NeuronStrategy::Activation {
                    profile = Some(profile_from(&weights, &task, a.strategy.profile_samples, seed)?);
                }
                let opts = PresetOptions {
                    layer_strategy: a.strategy.layer_strategy,
                    neuron_strategy: a.strategy.neuron_strategy,
                    decoder_policy: a.strategy.decoder_policy,
                };
                preset_schedule(*preset, &cfg, a.train.steps, &opts, profile.as_ref(), &seeded_rng(seed, "schedule"))?
            }
            (None, Some(path)) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let s: Schedule = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                s.validate(&cfg)?;
                s
            }
            _ => return Err(usage("exactly one of --preset and --schedule is required")),
        };
        let seq = SeqProfile::from_examples(&task.train, cfg.prompt_len)?;
        let cost = schedule.cost(&cfg, &seq)?;
        if a.dry_run {
            print!("{}", cost.to_csv());
            continue;
        }
        let h = hyper(&a.train, seed);
        let (_, mut record) = fpt_train(&weights, &schedule, &task, &h)?;
        save_run(&dir, &weights, &schedule, &task, &h, &mut record, profile.as_ref())?;
        report(seed, &record, cost.weighted_relative);
    }
    Ok(())
}

fn profile(a: ProfileArgs) -> Result<()> {
    let seed = resolve_seed(a.common.seed)?;
    let weights = load_model(&a.model, seed)?;
    let task = make_task(&a.task, &weights.config)?;
    let p = profile_from(&weights, &task, a.samples, seed)?;
    fs::create_dir_all(&a.common.out)?;
    write_json(&a.common.out.join("profile.json"), &p)?;
    println!("profiled {} examples", p.sample_count);
    Ok(())
}

fn flops(a: FlopsArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let cfg = read_config(a.config.as_deref())?;
    let schedule = match (&a.schedule, &a.preset) {
        (Some(path), None) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let s: Schedule = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            s.validate(&cfg)?;
            s
        }
        (None, Some(preset)) => {
            // Costs depend on widths only, so random masks stand in for profiled ones.
            let opts = PresetOptions {
                neuron_strategy: NeuronStrategy::Random,
                ..PresetOptions::default()
            };
            preset_schedule(*preset, &cfg, a.steps, &opts, None, &seeded_rng(seed, "schedule"))?
        }
        _ => return Err(usage("exactly one of --preset and --schedule is required")),
    };
    let task = make_task(
        &TaskArgs {
            task: a.task,
            task_seed: 0,
            train_size: None,
            dev_size: None,
        },
        &cfg,
    )?;
    let seq = SeqProfile::from_examples(&task.train, cfg.prompt_len)?;
    let csv = schedule.cost(&cfg, &seq)?.to_csv();
    print!("{csv}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("cost.csv"), csv)?;
    }
    Ok(())
}

fn read_prompt_set(dir: &Path) -> Result<PromptSet> {
    let ctx = |f: &str| format!("reading {}", dir.join(f).display());
    let cfg = load_config(&dir.join("config.json")).with_context(|| ctx("config.json"))?;
    let task: TaskSpec = serde_json::from_str(&fs::read_to_string(dir.join("task.json")).with_context(|| ctx("task.json"))?)?;
    let hyper: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("hyper.json")).with_context(|| ctx("hyper.json"))?)?;
    let seed = hyper["hyper"]["seed"].as_u64().context("hyper.json has no seed")?;
    let schedule: Schedule =
        serde_json::from_str(&fs::read_to_string(dir.join("schedule.json")).with_context(|| ctx("schedule.json"))?)?;
    let mut set = PromptSet::new(task.kind.name(), seed);
    for (i, stage) in schedule.stages.iter().enumerate() {
        let file = format!("prompt_stage{}.bin", i + 1);
        let p = load_prompt(&dir.join(&file)).with_context(|| ctx(&file))?;
        set.push(stage.label.clone(), p, stage.spec.is_identity(&cfg));
    }
    Ok(set)
}

fn mean_matrix(ms: &[SimilarityMatrix]) -> Result<SimilarityMatrix> {
    let first = &ms[0];
    if ms.iter().any(|m| m.rows != first.rows || m.cols != first.cols) {
        bail!("seeds cover different tasks; cannot average their similarity matrices");
    }
    let n = ms.len() as f64;
    let values = (0..first.rows.len())
        .map(|r| (0..first.cols.len()).map(|c| ms.iter().map(|m| m.values[r][c]).sum::<f64>() / n).collect())
        .collect();
    Ok(SimilarityMatrix {
        rows: first.rows.clone(),
        cols: first.cols.clone(),
        values,
    })
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let sets = a.runs.iter().map(|d| read_prompt_set(d)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&a.common.out)?;
    fs::write(a.common.out.join("embeddings.csv"), embeddings_csv(&sets)?)?;
    let mut by_seed: BTreeMap<u64, Vec<PromptSet>> = BTreeMap::new();
    for s in &sets {
        by_seed.entry(s.seed).or_default().push(s.clone());
    }
    let mut matrices = Vec::new();
    for (seed, group) in &by_seed {
        let m = similarity_from_sets(group).with_context(|| format!("seed {seed}"))?;
        if by_seed.len() > 1 {
            fs::write(a.common.out.join(format!("similarity_seed{seed}.csv")), m.to_csv())?;
        }
        matrices.push(m);
    }
    let m = mean_matrix(&matrices)?;
    fs::write(a.common.out.join("similarity.csv"), m.to_csv())?;
    print!("{}", m.to_csv());
    println!("diagonal wins {}/{}", m.diagonal_win_count(), m.diagonal_wins().len());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let seeds = if a.train.seeds.is_empty() {
        vec![resolve_seed(a.common.seed)?]
    } else {
        a.train.seeds.clone()
    };
    let arms: [(&str, LayerStrategy, NeuronStrategy); 2] = match a.axis {
        Axis::Neuron => [
            ("activation", LayerStrategy::Uniform, NeuronStrategy::Activation),
            ("random", LayerStrategy::Uniform, NeuronStrategy::Random),
        ],
        Axis::Layer => [
            ("uniform", LayerStrategy::Uniform, NeuronStrategy::Activation),
            ("last", LayerStrategy::Last, NeuronStrategy::Activation),
        ],
    };
    let (depth, width) = match a.axis {
        Axis::Neuron => (1.0, a.fraction),
        Axis::Layer => (a.fraction, 1.0),
    };
    fs::create_dir_all(&a.common.out)?;
    let mut table = String::from("task,strategy,seed,em\n");
    let mut pairs = String::from("task,a,b,a_wins,b_wins,ties,mean_diff\n");
    for kind in &a.tasks {
        let mut runs = Vec::new();
        for &seed in &seeds {
            let weights = load_model(&a.model, seed)?;
            let cfg = weights.config.clone();
            let targs = TaskArgs {
                task: *kind,
                task_seed: a.task_seed,
                train_size: None,
                dev_size: None,
            };
            let task = make_task(&targs, &cfg)?;
            let profile = profile_from(&weights, &task, a.profile_samples, seed)?;
            let h = hyper(&a.train, seed);
            for (name, ls, ns) in arms {
                let opts = PartialOptions {
                    depth_fraction: depth,
                    width_fraction: width,
                    layer_strategy: ls,
                    neuron_strategy: ns,
                    decoder_policy: fastpt::partial::DecoderPolicy::Reduce,
                };
                let spec = make_partial_spec(&cfg, &opts, Some(&profile), &seeded_rng(seed, "ablate-spec"))?;
                let (_, record) = pt_train(&weights, &spec, &init_prompt(&cfg, &h), &task, a.train.steps, &h)?;
                let dir = a.common.out.join(kind.name()).join(name).join(format!("seed{seed}"));
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("record.csv"), record.record_csv())?;
                fs::write(dir.join("metrics.csv"), record.metrics_csv())?;
                runs.push(AblationRun::from_record(name, seed, &record)?);
            }
        }
        let rep = ablation_report(&runs)?;
        for line in rep.to_csv().lines().skip(1) {
            writeln!(table, "{kind},{line}").unwrap();
        }
        for line in rep.pairs_csv().lines().skip(1) {
            writeln!(pairs, "{kind},{line}").unwrap();
        }
        for s in &rep.strategies {
            println!("{kind} {}: mean em {:.4}", s.strategy, s.mean_em);
        }
    }
    fs::write(a.common.out.join("ablation.csv"), &table)?;
    fs::write(a.common.out.join("ablation_pairs.csv"), &pairs)?;
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    if a.fractions.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
        return Err(usage("--fractions must lie strictly between 0 and 1"));
    }
    let mut csv = String::from("first_fraction,seed,em,relative_cost\n");
    for (seed, _) in seed_dirs(&a.train, &a.common)? {
        let weights = load_model(&a.model, seed)?;
        let cfg = weights.config.clone();
        let task = make_task(&a.task, &cfg)?;
        let profile = if a.width < 1.0 && a.strategy.neuron_strategy == NeuronStrategy::Activation {
            Some(profile_from(&weights, &task, a.strategy.profile_samples, seed)?)
        } else {
            None
        };
        let opts = PresetOptions {
            layer_strategy: a.strategy.layer_strategy,
            neuron_strategy: a.strategy.neuron_strategy,
            decoder_policy: a.strategy.decoder_policy,
        };
        let seq = SeqProfile::from_examples(&task.train, cfg.prompt_len)?;
        let h = hyper(&a.train, seed);
        for &f in &a.fractions {
            let ladder = [(a.depth, a.width), (1.0, 1.0)];
            let schedule = ladder_schedule(
                &ladder,
                &[f, 1.0 - f],
                &cfg,
                a.train.steps,
                &opts,
                profile.as_ref(),
                &seeded_rng(seed, "schedule"),
            )?;
            let cost = schedule.cost(&cfg, &seq)?;
            let (_, record) = fpt_train(&weights, &schedule, &task, &h)?;
            let em = record.final_eval().map_or(f64::NAN, |e| e.em);
            writeln!(csv, "{f},{seed},{em:.6},{:.6}", cost.weighted_relative).unwrap();
            println!("first stage {f}: seed {seed} em {em:.4} relative_cost {:.4}", cost.weighted_relative);
        }
    }
    fs::create_dir_all(&a.common.out)?;
    fs::write(a.common.out.join("sweep.csv"), csv)?;
    Ok(())
}
