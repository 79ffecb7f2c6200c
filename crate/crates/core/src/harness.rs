//! End-to-end experiment driver: composes data synthesis, poisoning,
//! training, bound learning, and the paired-model defense into reproducible
//! scenario runs, and computes the attack metrics.
//!
//! Every run writes per-seed CSVs plus checkpoints under its output
//! directory and a summary aggregated across seeds; every CSV carries the
//! config hash as a footer comment, and reruns with the same config and
//! seeds reproduce all CSVs byte-identically. Timings go to stdout only.

use crate::config::{write_csv, ConfigMap};
use crate::datagen::{
    apply_imbalance, embed_trigger, poison, split_clean_set, synth_classes, CleanSet, DataGeometry,
    Dataset, ImbalanceKind, ImbalanceSpec, Sample, TriggerKind, TriggerSpec,
};
use crate::error::{Error, Result};
use crate::mitigation::{run_mitigation, MitigationConfig, MitigationOutcome, Objective};
use crate::mmdf::{defend_batch, fit_null, NullModel};
use crate::network::{presets, save_checkpoint, BoundVectors, Network};
use crate::trainer::{evaluate_clipped, train, LrSchedule, Metrics, TrainConfig, TrainOutcome};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Backdoor,
    Imbalance,
    Overtrain,
    LambdaSweep,
    ObjectiveCross,
    Balanced,
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "backdoor" => Scenario::Backdoor,
            "imbalance" => Scenario::Imbalance,
            "overtrain" => Scenario::Overtrain,
            "lambda_sweep" => Scenario::LambdaSweep,
            "objective_cross" => Scenario::ObjectiveCross,
            "balanced" => Scenario::Balanced,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown scenario '{other}' (expected backdoor|imbalance|overtrain|lambda_sweep|objective_cross|balanced)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Backdoor => "backdoor",
            Scenario::Imbalance => "imbalance",
            Scenario::Overtrain => "overtrain",
            Scenario::LambdaSweep => "lambda_sweep",
            Scenario::ObjectiveCross => "objective_cross",
            Scenario::Balanced => "balanced",
        }
    }
}

/// Mean and unbiased standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MeanStd { mean, std, n }
}

/// Attack metrics over seeds, each as a percentage.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackMetrics {
    pub asr: MeanStd,
    pub acc: MeanStd,
    pub pacc: MeanStd,
}

/// One seed's attack numbers, in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleAttack {
    pub asr: f64,
    pub acc: f64,
    pub pacc: f64,
}

/// A classification pipeline under evaluation.
pub enum Decider<'a> {
    Plain(&'a Network),
    Clipped(&'a Network, &'a BoundVectors),
    Defended {
        net: &'a Network,
        bounds: &'a BoundVectors,
        null: &'a NullModel,
        theta: f64,
    },
}

impl Decider<'_> {
    pub fn decide_all(&self, ds: &Dataset) -> Result<Vec<usize>> {
        match self {
            Decider::Plain(net) => crate::trainer::predict(net, None, ds),
            Decider::Clipped(net, bounds) => crate::trainer::predict(net, Some(bounds), ds),
            Decider::Defended { net, bounds, null, theta } => {
                let (batch, _) = ds.batched()?;
                Ok(defend_batch(net, bounds, null, &batch, *theta)?
                    .into_iter()
                    .map(|v| v.final_label)
                    .collect())
            }
        }
    }

    pub fn metrics(&self, ds: &Dataset) -> Result<Metrics> {
        match self {
            Decider::Plain(net) => evaluate_clipped(net, None, ds),
            Decider::Clipped(net, bounds) => evaluate_clipped(net, Some(bounds), ds),
            Decider::Defended { .. } => {
                let preds = self.decide_all(ds)?;
                let mut correct = vec![0usize; ds.num_classes()];
                let mut total = vec![0usize; ds.num_classes()];
                for (s, &p) in ds.samples().iter().zip(&preds) {
                    total[s.label] += 1;
                    if p == s.label {
                        correct[s.label] += 1;
                    }
                }
                let hits: usize = correct.iter().sum();
                Ok(Metrics {
                    accuracy: hits as f64 / ds.len() as f64,
                    per_class: correct
                        .iter()
                        .zip(&total)
                        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
                        .collect(),
                    class_totals: total,
                })
            }
        }
    }
}

/// Apply the trigger to every non-target-class sample of a clean test set,
/// keeping the true (source) labels.
pub fn triggered_variant(test: &Dataset, trigger: &TriggerSpec) -> Result<Dataset> {
    let samples: Vec<Sample> = test
        .samples()
        .iter()
        .filter(|s| s.label != trigger.target)
        .map(|s| {
            Ok(Sample {
                x: embed_trigger(&s.x, trigger)?,
                label: s.label,
                poisoned: true,
            })
        })
        .collect::<Result<_>>()?;
    if samples.is_empty() {
        return Err(Error::InvalidDataset(
            "no eligible (non-target-class) test samples to trigger".to_string(),
        ));
    }
    Dataset::new(samples, test.input_shape().to_vec(), test.num_classes())
}

/// ASR, ACC, and PACC (percent) of one pipeline: success rate of the trigger
/// on non-target-class test samples, clean-test accuracy, and accuracy on
/// the same triggered samples.
pub fn compute_attack_metrics(
    decider: &Decider,
    test: &Dataset,
    trigger: &TriggerSpec,
) -> Result<SingleAttack> {
    let triggered = triggered_variant(test, trigger)?;
    let decisions = decider.decide_all(&triggered)?;
    let n = decisions.len() as f64;
    let to_target = decisions.iter().filter(|&&d| d == trigger.target).count() as f64;
    let to_source = triggered
        .samples()
        .iter()
        .zip(&decisions)
        .filter(|(s, &d)| d == s.label)
        .count() as f64;
    let clean = decider.metrics(test)?;
    Ok(SingleAttack {
        asr: 100.0 * to_target / n,
        acc: 100.0 * clean.accuracy,
        pacc: 100.0 * to_source / n,
    })
}

// ---------------------------------------------------------------------------
// experiment configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub classes: usize,
    pub geometry: DataGeometry,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub clean_per_class: usize,
    pub imbalance: ImbalanceSpec,
    pub trigger_kind: TriggerKind,
    pub trigger_amplitude: f64,
    pub trigger_alpha: f64,
    pub trigger_target: usize,
    pub poison_rate: f64,
    pub arch: String,
    pub train: TrainConfig,
    pub mitigation: MitigationConfig,
    pub theta: f64,
    pub sweep_lambdas: Vec<f64>,
}

/// Desk-scale defaults; every key can be overridden by a config file or a
/// CLI flag.
pub fn default_config() -> ConfigMap {
    let mut m = ConfigMap::new();
    m.set("seeds", "0,1,2");
    m.set("data.classes", 10);
    m.set("data.kind", "vector");
    m.set("data.dim", 64);
    m.set("data.side", 16);
    m.set("data.train_per_class", 500);
    m.set("data.test_per_class", 100);
    m.set("data.separation", 3.0);
    m.set("clean.per_class", 50);
    m.set("imbalance.kind", "lt");
    m.set("imbalance.gamma", 100);
    m.set("trigger.kind", "additive");
    m.set("trigger.amplitude", 0.03);
    m.set("trigger.alpha", 0.2);
    m.set("trigger.target", 0);
    m.set("poison.rate", 0.02);
    m.set("arch", "mlp3");
    m.set("train.epochs", 40);
    m.set("train.batch", 64);
    m.set("train.lr", 0.05);
    m.set("train.schedule", "step");
    m.set("train.momentum", 0.9);
    m.set("train.weight_decay", 1e-4);
    m.set("train.augment_noise", 0);
    m.set("mitigation.lambda", 1e-5);
    m.set("mitigation.max_iterations", 300);
    m.set("mitigation.stop_threshold", 1e-4);
    m.set("mitigation.outer_step", 0.01);
    m.set("mitigation.ascent_steps", 50);
    m.set("mitigation.ascent_step_size", 0.1);
    m.set("mitigation.beta", 2.0);
    m.set("defense.theta", 0.005);
    m.set("sweep.lambdas", "0,1e-7,1e-6,1e-5,1e-4,1e-3");
    m
}

impl ExperimentConfig {
    /// Resolve a full configuration from a merged key=value map.
    pub fn from_map(map: &ConfigMap, out_dir: &Path) -> Result<Self> {
        let scenario = Scenario::parse(map.require("scenario")?)?;
        let geometry = match map.require("data.kind")? {
            "vector" => DataGeometry::Vector { dim: map.get_usize("data.dim")? },
            "image" => DataGeometry::Image { side: map.get_usize("data.side")? },
            other => {
                return Err(Error::InvalidConfig(format!(
                    "data.kind must be vector|image, got '{other}'"
                )))
            }
        };
        let imbalance = ImbalanceSpec {
            kind: match map.require("imbalance.kind")? {
                "lt" => ImbalanceKind::Lt,
                "step" => ImbalanceKind::Step,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "imbalance.kind must be lt|step, got '{other}'"
                    )))
                }
            },
            gamma: map.get_f64("imbalance.gamma")?,
            n0: map.get_usize("data.train_per_class")?,
        };
        let trigger_kind = match map.require("trigger.kind")? {
            "additive" => TriggerKind::AdditiveGlobal,
            "patch" => TriggerKind::PatchReplace,
            "blend" => TriggerKind::PatchBlend,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "trigger.kind must be additive|patch|blend, got '{other}'"
                )))
            }
        };
        let seeds = map.get_u64_list("seeds")?;
        if seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".to_string()));
        }
        let mitigation = MitigationConfig {
            lambda: map.get_f64("mitigation.lambda")?,
            max_iterations: map.get_usize("mitigation.max_iterations")?,
            stop_threshold: map.get_f64("mitigation.stop_threshold")?,
            outer_step: map.get_f64("mitigation.outer_step")?,
            ascent_steps: map.get_usize("mitigation.ascent_steps")?,
            ascent_step_size: map.get_f64("mitigation.ascent_step_size")?,
            restarts_per_class: match map.get("mitigation.j_c") {
                Some(_) => Some(map.get_usize("mitigation.j_c")?),
                None => None,
            },
            beta: map.get_f64("mitigation.beta")?,
            seed: 0, // set per seed below
        };
        Ok(Self {
            scenario,
            seeds,
            out_dir: out_dir.to_path_buf(),
            classes: map.get_usize("data.classes")?,
            geometry,
            train_per_class: map.get_usize("data.train_per_class")?,
            test_per_class: map.get_usize("data.test_per_class")?,
            separation: map.get_f64("data.separation")?,
            clean_per_class: map.get_usize("clean.per_class")?,
            imbalance,
            trigger_kind,
            trigger_amplitude: map.get_f64("trigger.amplitude")?,
            trigger_alpha: map.get_f64("trigger.alpha")?,
            trigger_target: map.get_usize("trigger.target")?,
            poison_rate: map.get_f64("poison.rate")?,
            arch: map.require("arch")?.to_string(),
            train: TrainConfig {
                epochs: map.get_usize("train.epochs")?,
                batch_size: map.get_usize("train.batch")?,
                learning_rate: map.get_f64("train.lr")?,
                schedule: match map.require("train.schedule")? {
                    "step" => LrSchedule::StepDecay,
                    "constant" => LrSchedule::Constant,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "train.schedule must be step|constant, got '{other}'"
                        )))
                    }
                },
                decay_epochs: None,
                momentum: map.get_f64("train.momentum")?,
                weight_decay: map.get_f64("train.weight_decay")?,
                augment_noise: map.get_f64("train.augment_noise")?,
                seed: 0, // set per seed below
            },
            mitigation,
            theta: map.get_f64("defense.theta")?,
            sweep_lambdas: map.get_f64_list("sweep.lambdas")?,
        })
    }

    pub fn fresh_network(&self, seed: u64) -> Result<Network> {
        let classes = self.classes;
        match (self.arch.as_str(), &self.geometry) {
            ("mlp3", DataGeometry::Vector { dim }) => Ok(presets::mlp3(*dim, classes, seed)),
            ("mlp3", DataGeometry::Image { side }) => Ok(presets::mlp3(side * side, classes, seed)),
            ("cnns", DataGeometry::Image { side }) => Ok(presets::cnn_s(*side, classes, seed)),
            ("cnns", DataGeometry::Vector { .. }) => Err(Error::InvalidConfig(
                "arch cnns requires data.kind = image".to_string(),
            )),
            (other, _) => Err(Error::InvalidConfig(format!("unknown arch '{other}'"))),
        }
    }

    pub fn trigger(&self) -> TriggerSpec {
        let shape = self.geometry.shape();
        match self.trigger_kind {
            TriggerKind::AdditiveGlobal => {
                TriggerSpec::chessboard(&shape, self.trigger_amplitude, self.trigger_target)
            }
            kind => TriggerSpec::corner_patch(&shape, kind, self.trigger_alpha, self.trigger_target),
        }
    }
}

/// Train/clean/test partition for one seed. The clean set is disjoint from
/// both the training pool and the evaluation pool.
pub struct SeedData {
    pub train: Dataset,
    pub clean: CleanSet,
    pub test: Dataset,
}

pub fn make_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let per_class = cfg.train_per_class + cfg.clean_per_class + cfg.test_per_class;
    let pool = synth_classes(cfg.classes, cfg.geometry, per_class, cfg.separation, seed)?;
    // samples are generated class-major, index-within-class ordered
    let mut train_idx = Vec::new();
    let mut rest_idx = Vec::new();
    for c in 0..cfg.classes {
        let base = c * per_class;
        train_idx.extend(base..base + cfg.train_per_class);
        rest_idx.extend(base + cfg.train_per_class..base + per_class);
    }
    let train = pool.subset(&train_idx);
    let rest = pool.subset(&rest_idx);
    let (clean, test) = split_clean_set(&rest, cfg.clean_per_class, seed)?;
    Ok(SeedData { train, clean, test })
}

// ---------------------------------------------------------------------------
// experiment runner
// ---------------------------------------------------------------------------

/// One (stage, metric, value) observation for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub stage: String,
    pub metric: String,
    pub value: f64,
}

fn row(stage: &str, metric: &str, value: f64) -> MetricRow {
    MetricRow { stage: stage.to_string(), metric: metric.to_string(), value }
}

struct SeedContext<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    hash: String,
    rows: Vec<MetricRow>,
    per_class: Vec<(String, Vec<f64>, Vec<usize>)>,
}

impl SeedContext<'_> {
    fn record_metrics(&mut self, stage: &str, m: &Metrics) {
        self.rows.push(row(stage, "acc", 100.0 * m.accuracy));
        let rarest = self.cfg.classes - 1;
        self.rows.push(row(stage, "acc_rarest", 100.0 * m.per_class[rarest]));
        self.per_class.push((stage.to_string(), m.per_class.clone(), m.class_totals.clone()));
    }

    fn record_attack(&mut self, stage: &str, a: &SingleAttack) {
        self.rows.push(row(stage, "asr", a.asr));
        self.rows.push(row(stage, "acc", a.acc));
        self.rows.push(row(stage, "pacc", a.pacc));
    }

    fn write_history(&self, name: &str, outcome: &MitigationOutcome) -> Result<()> {
        let classes = self.cfg.classes;
        let mut header = String::from("iteration,total_loss,term1,term2");
        for c in 0..classes {
            header.push_str(&format!(",mean_margin_c{c}"));
        }
        let rows: Vec<String> = outcome
            .history
            .iter()
            .map(|r| {
                let mut line = format!("{},{},{},{}", r.iteration, r.total_loss, r.term1, r.term2);
                for m in &r.mean_class_margins {
                    line.push_str(&format!(",{m}"));
                }
                line
            })
            .collect();
        write_csv(&self.dir.join(format!("margin_history_{name}.csv")), &header, &rows, &self.hash)
    }

    fn write_curve(&self, name: &str, outcome: &TrainOutcome) -> Result<()> {
        let rows: Vec<String> = outcome
            .curve
            .iter()
            .map(|e| {
                format!(
                    "{},{},{},{}",
                    e.epoch,
                    e.loss,
                    e.train_acc,
                    e.test_acc.map_or(String::from(""), |v| v.to_string())
                )
            })
            .collect();
        write_csv(
            &self.dir.join(format!("train_curve_{name}.csv")),
            "epoch,loss,train_acc,test_acc",
            &rows,
            &self.hash,
        )
    }

    fn finish(self) -> Result<Vec<MetricRow>> {
        let rows: Vec<String> = self
            .rows
            .iter()
            .map(|r| format!("{},{},{}", r.stage, r.metric, r.value))
            .collect();
        write_csv(&self.dir.join("metrics.csv"), "stage,metric,value", &rows, &self.hash)?;
        let mut pc_rows = Vec::new();
        for (stage, accs, totals) in &self.per_class {
            for (c, (a, t)) in accs.iter().zip(totals).enumerate() {
                pc_rows.push(format!("{stage},{c},{},{t}", 100.0 * a));
            }
        }
        write_csv(
            &self.dir.join("per_class_acc.csv"),
            "stage,class,acc,test_count",
            &pc_rows,
            &self.hash,
        )?;
        Ok(self.rows)
    }
}

fn stage_time<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f().map_err(|e| e.in_stage(name));
    println!("  stage {name}: {:.1}s", t0.elapsed().as_secs_f64());
    out
}

/// Run every seed of the configured scenario, writing artifacts under the
/// output directory; returns that directory.
pub fn run_experiment(cfg: &ExperimentConfig, resolved: &ConfigMap) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(
        cfg.out_dir.join("config.resolved"),
        format!("# hash: {}\n{}", resolved.hash(), resolved.canonical()),
    )?;
    let hash = resolved.hash();
    let mut all_rows: Vec<(u64, Vec<MetricRow>)> = Vec::new();
    for &seed in &cfg.seeds {
        println!("seed {seed} [{}]", cfg.scenario.name());
        let dir = cfg.out_dir.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir)?;
        let ctx = SeedContext {
            cfg,
            dir,
            hash: hash.clone(),
            rows: Vec::new(),
            per_class: Vec::new(),
        };
        let rows = match run_seed(cfg, seed, ctx) {
            Ok(rows) => rows,
            Err(e) => {
                // partial outputs stay on disk; the failing stage is named
                std::fs::write(cfg.out_dir.join("error.txt"), format!("seed {seed}: {e}\n"))?;
                return Err(e);
            }
        };
        all_rows.push((seed, rows));
    }
    write_summary(cfg, &hash, &all_rows)?;
    Ok(cfg.out_dir.clone())
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, mut ctx: SeedContext) -> Result<Vec<MetricRow>> {
    let data = stage_time("data", || make_data(cfg, seed))?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let mit_cfg = MitigationConfig { seed, ..cfg.mitigation.clone() };

    match cfg.scenario {
        Scenario::Backdoor => {
            let trigger = cfg.trigger();
            let baseline = stage_time("train-baseline", || {
                train(&cfg.fresh_network(seed)?, &data.train, Some(&data.test), &train_cfg)
            })?;
            ctx.write_curve("baseline", &baseline)?;
            save_checkpoint(&baseline.network, None, &ctx.dir.join("baseline.ckpt"))?;
            let base_m = evaluate_clipped(&baseline.network, None, &data.test)?;
            ctx.record_metrics("baseline", &base_m);

            let poisoned_ds = stage_time("poison", || poison(&data.train, &trigger, cfg.poison_rate, seed))?;
            let poisoned = stage_time("train-poisoned", || {
                train(&cfg.fresh_network(seed)?, &poisoned_ds, Some(&data.test), &train_cfg)
            })?;
            ctx.write_curve("poisoned", &poisoned)?;
            save_checkpoint(&poisoned.network, None, &ctx.dir.join("poisoned.ckpt"))?;
            let net = &poisoned.network;
            let pre = compute_attack_metrics(&Decider::Plain(net), &data.test, &trigger)?;
            ctx.record_attack("pre", &pre);

            let mmac = stage_time("mmac", || {
                run_mitigation(net, &data.clean, &mit_cfg, Objective::Mmac)
            })?;
            ctx.write_history("mmac", &mmac)?;
            save_checkpoint(net, Some(&mmac.bounds), &ctx.dir.join("mitigated.ckpt"))?;
            let post = compute_attack_metrics(&Decider::Clipped(net, &mmac.bounds), &data.test, &trigger)?;
            ctx.record_attack("mmac", &post);

            let null = stage_time("fit-null", || fit_null(net, &mmac.bounds, &data.clean))?;
            let defended = Decider::Defended { net, bounds: &mmac.bounds, null: &null, theta: cfg.theta };
            let dfm = compute_attack_metrics(&defended, &data.test, &trigger)?;
            ctx.record_attack("mmdf", &dfm);
            write_verdicts(&ctx, net, &mmac.bounds, &null, cfg.theta, &data.test, &trigger)?;
        }
        Scenario::Imbalance => {
            let imb = stage_time("imbalance", || apply_imbalance(&data.train, &cfg.imbalance, seed))?;
            let baseline = stage_time("train", || {
                train(&cfg.fresh_network(seed)?, &imb, Some(&data.test), &train_cfg)
            })?;
            ctx.write_curve("baseline", &baseline)?;
            save_checkpoint(&baseline.network, None, &ctx.dir.join("baseline.ckpt"))?;
            ctx.record_metrics("baseline", &evaluate_clipped(&baseline.network, None, &data.test)?);

            let mmom = stage_time("mmom", || {
                run_mitigation(&baseline.network, &data.clean, &mit_cfg, Objective::Mmom)
            })?;
            ctx.write_history("mmom", &mmom)?;
            save_checkpoint(&baseline.network, Some(&mmom.bounds), &ctx.dir.join("mitigated.ckpt"))?;
            ctx.record_metrics(
                "mmom",
                &evaluate_clipped(&baseline.network, Some(&mmom.bounds), &data.test)?,
            );
        }
        Scenario::Overtrain => {
            let imb = stage_time("imbalance", || apply_imbalance(&data.train, &cfg.imbalance, seed))?;
            let nominal = stage_time("train-1x", || {
                train(&cfg.fresh_network(seed)?, &imb, Some(&data.test), &train_cfg)
            })?;
            ctx.write_curve("base_1x", &nominal)?;
            let over_cfg = train_cfg.over_trained();
            let over = stage_time("train-5x", || {
                train(&cfg.fresh_network(seed)?, &imb, Some(&data.test), &over_cfg)
            })?;
            ctx.write_curve("base_5x", &over)?;
            ctx.record_metrics("base_1x", &evaluate_clipped(&nominal.network, None, &data.test)?);
            ctx.record_metrics("base_5x", &evaluate_clipped(&over.network, None, &data.test)?);

            let mm1 = stage_time("mmom-1x", || {
                run_mitigation(&nominal.network, &data.clean, &mit_cfg, Objective::Mmom)
            })?;
            ctx.write_history("mmom_1x", &mm1)?;
            ctx.record_metrics(
                "mmom_1x",
                &evaluate_clipped(&nominal.network, Some(&mm1.bounds), &data.test)?,
            );
            let mm5 = stage_time("mmom-5x", || {
                run_mitigation(&over.network, &data.clean, &mit_cfg, Objective::Mmom)
            })?;
            ctx.write_history("mmom_5x", &mm5)?;
            ctx.record_metrics(
                "mmom_5x",
                &evaluate_clipped(&over.network, Some(&mm5.bounds), &data.test)?,
            );
            save_checkpoint(&over.network, Some(&mm5.bounds), &ctx.dir.join("mitigated.ckpt"))?;
        }
        Scenario::LambdaSweep => {
            let imb = stage_time("imbalance", || apply_imbalance(&data.train, &cfg.imbalance, seed))?;
            let baseline = stage_time("train", || {
                train(&cfg.fresh_network(seed)?, &imb, Some(&data.test), &train_cfg)
            })?;
            ctx.record_metrics("baseline", &evaluate_clipped(&baseline.network, None, &data.test)?);
            for &lambda in &cfg.sweep_lambdas {
                let stage = format!("lambda_{lambda:e}");
                let cfg_l = MitigationConfig { lambda, ..mit_cfg.clone() };
                let out = stage_time(&stage, || {
                    run_mitigation(&baseline.network, &data.clean, &cfg_l, Objective::Mmom)
                })?;
                ctx.write_history(&stage, &out)?;
                ctx.record_metrics(
                    &stage,
                    &evaluate_clipped(&baseline.network, Some(&out.bounds), &data.test)?,
                );
            }
        }
        Scenario::ObjectiveCross => {
            let imb = stage_time("imbalance", || apply_imbalance(&data.train, &cfg.imbalance, seed))?;
            let baseline = stage_time("train", || {
                train(&cfg.fresh_network(seed)?, &imb, Some(&data.test), &train_cfg)
            })?;
            ctx.record_metrics("baseline", &evaluate_clipped(&baseline.network, None, &data.test)?);
            let net = &baseline.network;
            let mmac = stage_time("mmac", || run_mitigation(net, &data.clean, &mit_cfg, Objective::Mmac))?;
            ctx.write_history("mmac", &mmac)?;
            ctx.record_metrics("mmac", &evaluate_clipped(net, Some(&mmac.bounds), &data.test)?);
            let mmom = stage_time("mmom", || run_mitigation(net, &data.clean, &mit_cfg, Objective::Mmom))?;
            ctx.write_history("mmom", &mmom)?;
            ctx.record_metrics("mmom", &evaluate_clipped(net, Some(&mmom.bounds), &data.test)?);
            if let Some(last) = mmac.history.last() {
                ctx.rows.push(row("mmac", "final_term1", last.term1));
            }
            if let Some(last) = mmom.history.last() {
                ctx.rows.push(row("mmom", "final_term1", last.term1));
            }
        }
        Scenario::Balanced => {
            let baseline = stage_time("train", || {
                train(&cfg.fresh_network(seed)?, &data.train, Some(&data.test), &train_cfg)
            })?;
            ctx.write_curve("baseline", &baseline)?;
            ctx.record_metrics("baseline", &evaluate_clipped(&baseline.network, None, &data.test)?);
            let mmom = stage_time("mmom", || {
                run_mitigation(&baseline.network, &data.clean, &mit_cfg, Objective::Mmom)
            })?;
            ctx.write_history("mmom", &mmom)?;
            save_checkpoint(&baseline.network, Some(&mmom.bounds), &ctx.dir.join("mitigated.ckpt"))?;
            ctx.record_metrics(
                "mmom",
                &evaluate_clipped(&baseline.network, Some(&mmom.bounds), &data.test)?,
            );
        }
    }
    ctx.finish()
}

fn write_verdicts(
    ctx: &SeedContext,
    net: &Network,
    bounds: &BoundVectors,
    null: &NullModel,
    theta: f64,
    test: &Dataset,
    trigger: &TriggerSpec,
) -> Result<()> {
    let triggered = triggered_variant(test, trigger)?;
    let mut rows = Vec::new();
    for (tag, ds) in [("clean", test), ("triggered", &triggered)] {
        let (batch, _) = ds.batched()?;
        for (i, v) in defend_batch(net, bounds, null, &batch, theta)?.iter().enumerate() {
            rows.push(format!(
                "{tag},{i},{},{},{},{},{},{},{}",
                ds.samples()[i].label,
                v.original_label,
                v.mitigated_label,
                v.statistic,
                v.p_value,
                v.reason.label(),
                v.final_label
            ));
        }
    }
    write_csv(
        &ctx.dir.join("verdicts.csv"),
        "set,sample,true_label,original_label,mitigated_label,statistic,p_value,reason,final_label",
        &rows,
        &ctx.hash,
    )
}

fn write_summary(cfg: &ExperimentConfig, hash: &str, all: &[(u64, Vec<MetricRow>)]) -> Result<()> {
    // aggregate over seeds, preserving first-seen row order
    let mut order: Vec<(String, String)> = Vec::new();
    for (_, rows) in all {
        for r in rows {
            let key = (r.stage.clone(), r.metric.clone());
            if !order.contains(&key) {
                order.push(key);
            }
        }
    }
    let mut lines = Vec::new();
    for (stage, metric) in &order {
        let values: Vec<f64> = all
            .iter()
            .flat_map(|(_, rows)| {
                rows.iter()
                    .filter(|r| &r.stage == stage && &r.metric == metric)
                    .map(|r| r.value)
            })
            .collect();
        let ms = mean_std(&values);
        lines.push(format!("{},{},{},{},{}", cfg.scenario.name(), stage, metric, ms.mean, ms.std));
    }
    write_csv(
        &cfg.out_dir.join("summary.csv"),
        "scenario,stage,metric,mean,std",
        &lines,
        hash,
    )?;

    let mut text = format!("scenario: {} ({} seeds)\n", cfg.scenario.name(), all.len());
    for (stage, metric) in &order {
        let values: Vec<f64> = all
            .iter()
            .flat_map(|(_, rows)| {
                rows.iter()
                    .filter(|r| &r.stage == stage && &r.metric == metric)
                    .map(|r| r.value)
            })
            .collect();
        let ms = mean_std(&values);
        text.push_str(&format!("  {stage:>14} {metric:<12} {:8.2} ± {:.2}\n", ms.mean, ms.std));
    }
    std::fs::write(cfg.out_dir.join("summary.txt"), text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// consolidated report
// ---------------------------------------------------------------------------

/// Aggregate several completed run directories of the same scenario into one
/// comparison table (CSV + plain text). Every number is recomputed from the
/// stored per-seed CSVs.
pub fn report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<PathBuf> {
    if run_dirs.is_empty() {
        return Err(Error::Report("no run directories given".to_string()));
    }
    let mut scenario: Option<String> = None;
    let mut lines = Vec::new();
    let mut text = String::new();
    for dir in run_dirs {
        let resolved = dir.join("config.resolved");
        let conf_text = std::fs::read_to_string(&resolved)
            .map_err(|_| Error::Report(format!("{}: missing config.resolved", dir.display())))?;
        let conf = ConfigMap::from_str_contents(&conf_text)?;
        let this = conf.require("scenario")?.to_string();
        match &scenario {
            None => scenario = Some(this),
            Some(s) if *s == this => {}
            Some(s) => {
                return Err(Error::Report(format!(
                    "mixed scenarios: '{s}' and '{this}' cannot share a report"
                )))
            }
        }
        // recompute aggregates from per-seed metrics files
        let mut per_key: Vec<((String, String), Vec<f64>)> = Vec::new();
        let mut seed_dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_dir()
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("seed-"))
            })
            .collect();
        seed_dirs.sort();
        if seed_dirs.is_empty() {
            return Err(Error::Report(format!("{}: no seed directories", dir.display())));
        }
        for sd in &seed_dirs {
            let (_, rows, _) = crate::config::read_csv(&sd.join("metrics.csv"))?;
            for r in rows {
                if r.len() != 3 {
                    continue;
                }
                let key = (r[0].clone(), r[1].clone());
                let v: f64 = r[2]
                    .parse()
                    .map_err(|_| Error::Report(format!("bad value '{}' in {}", r[2], sd.display())))?;
                match per_key.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, vs)) => vs.push(v),
                    None => per_key.push((key, vec![v])),
                }
            }
        }
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("run")
            .to_string();
        text.push_str(&format!("{name}:\n"));
        for ((stage, metric), values) in &per_key {
            let ms = mean_std(values);
            lines.push(format!("{name},{stage},{metric},{},{},{}", ms.mean, ms.std, ms.n));
            text.push_str(&format!(
                "  {stage:>14} {metric:<12} {:8.2} ± {:.2}  (n={})\n",
                ms.mean, ms.std, ms.n
            ));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let mut hasher_map = ConfigMap::new();
    hasher_map.set("report.dirs", run_dirs.len());
    write_csv(
        &out_dir.join("report.csv"),
        "run,stage,metric,mean,std,n",
        &lines,
        &hasher_map.hash(),
    )?;
    std::fs::write(out_dir.join("report.txt"), text)?;
    Ok(out_dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attack_metrics_for_a_constant_to_target_model() {
        // constant-to-target network: one dense layer with a huge bias on
        // the target logit
        use crate::network::{Activation, LayerKind, LayerSpec, LayerWeights};
        use crate::tensor::Tensor;
        let constant_net = |target: usize| {
            let mut bias = vec![0.0; 3];
            bias[target] = 100.0;
            Network::new(
                vec![LayerSpec {
                    kind: LayerKind::Dense { input: 4, output: 3 },
                    activation: Activation::None,
                    clippable: false,
                }],
                vec![LayerWeights::Dense {
                    w: Tensor::zeros(vec![4, 3]),
                    b: Tensor::new(vec![3], bias).unwrap(),
                }],
                vec![4],
            )
            .unwrap()
        };
        let test = synth_classes(3, DataGeometry::Vector { dim: 4 }, 10, 4.0, 0).unwrap();
        let trigger = TriggerSpec::chessboard(&[4], 0.05, 1);
        let net = constant_net(1);
        let m = compute_attack_metrics(&Decider::Plain(&net), &test, &trigger).unwrap();
        assert_eq!(m.asr, 100.0);
        assert_eq!(m.pacc, 0.0);
    }

    #[test]
    fn attack_metrics_match_a_hand_tally() {
        // tiny fixture: 20 eligible samples, hand-tallied against predict()
        let test = synth_classes(3, DataGeometry::Vector { dim: 6 }, 10, 3.0, 5).unwrap();
        let trigger = TriggerSpec::chessboard(&[6], 0.1, 2);
        let net = presets::mlp3(6, 3, 7);
        let m = compute_attack_metrics(&Decider::Plain(&net), &test, &trigger).unwrap();
        let triggered = triggered_variant(&test, &trigger).unwrap();
        assert_eq!(triggered.len(), 20);
        let mut to_target = 0.0;
        let mut to_source = 0.0;
        for s in triggered.samples() {
            let logits = net.forward(&s.x).unwrap();
            let pred = crate::trainer::argmax(logits.data());
            if pred == 2 {
                to_target += 1.0;
            }
            if pred == s.label {
                to_source += 1.0;
            }
        }
        assert_eq!(m.asr, 100.0 * to_target / 20.0);
        assert_eq!(m.pacc, 100.0 * to_source / 20.0);
    }

    #[test]
    fn mean_std_uses_the_unbiased_formula() {
        let ms = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(ms.mean, 2.0);
        assert!((ms.std - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[5.0]).std, 0.0);
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in ["backdoor", "imbalance", "overtrain", "lambda_sweep", "objective_cross", "balanced"] {
            assert_eq!(Scenario::parse(s).unwrap().name(), s);
        }
        assert!(Scenario::parse("nope").is_err());
    }
}
