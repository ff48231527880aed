//! End-to-end steps on the real few-shot task: pretraining on base classes, final k-shot
//! fine-tuning with (possibly learned) parameters, the ablation grid and curve export.

use std::fmt::Write as _;

use crate::augment::AugMagnitude;
use crate::error::{Error, Result};
use crate::eval::{confidence_interval, mean};
use crate::losses::{LossParams, TrainClock};
use crate::proxytask::{meta_tune, EpisodeConfig, FewShotTask, MetaConfig, MetaOutcome};
use crate::rng;
use crate::synthbench::{Benchmark, Pool, ProposalConfig};
use crate::trainer::{pretrain, DetectorModel, EvalSet, TrainSchedule};

/// Head over every benchmark class, trained on the pretrain pool; novel rows stay zero.
pub fn pretrain_target(
    bench: &Benchmark,
    schedule: &TrainSchedule,
    proposal: &ProposalConfig,
    seed: u64,
) -> Result<DetectorModel> {
    let kinds: Vec<_> = bench.classes.iter().map(|c| (c.id, c.kind)).collect();
    let layout = DetectorModel::for_classes(bench, &kinds)?;
    pretrain(
        bench,
        &bench.image_ids(Pool::Pretrain),
        &layout,
        schedule,
        proposal,
        &mut rng::stream(seed, "pretrain", &[]),
    )
}

/// The benchmark's own few-shot task: k-shot support over all classes from the support
/// pool, scored on the query pool. Query proposals depend only on the benchmark.
pub fn target_task<'a>(bench: &'a Benchmark, model: DetectorModel, proposal: &ProposalConfig) -> FewShotTask<'a> {
    let query = bench.image_ids(Pool::Query);
    let eval = EvalSet::build(bench, &query, proposal, &mut rng::stream(0, "target-query", &[]));
    FewShotTask {
        bench,
        support_pool: bench.image_ids(Pool::Support),
        support_classes: bench.classes.iter().map(|c| c.id).collect(),
        eval,
        eval_classes: model.foreground(),
        base_model: model,
        proposal: *proposal,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalScores {
    pub map_base: f64,
    pub map_novel: f64,
    pub hm: f64,
}

/// Mean query metrics over `repeats` k-shot draws. Draw `r` uses the same support images and
/// fine-tuning stream whatever the loss and augmentation, so arms compared under one seed see
/// identical data.
pub fn final_evaluate(
    task: &FewShotTask<'_>,
    loss: &LossParams,
    aug: AugMagnitude,
    cfg: &EpisodeConfig,
    seed: u64,
    repeats: usize,
) -> Result<FinalScores> {
    if repeats == 0 {
        return Err(Error::contract("final evaluation needs at least one repeat"));
    }
    let (mut b, mut n, mut h) = (Vec::new(), Vec::new(), Vec::new());
    for r in 0..repeats {
        let mut stream = rng::stream(seed, "final", &[r as u64]);
        let (_, report) = task.run_trial(&task.base_model, loss, aug, cfg, &mut stream)?;
        b.push(report.map_base);
        n.push(report.map_novel);
        h.push(report.hm);
    }
    Ok(FinalScores {
        map_base: mean(&b),
        map_novel: mean(&n),
        hm: mean(&h),
    })
}

/// One arm of the toggle grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationArm {
    pub proxy_imitation: bool,
    pub reinit_model: bool,
    pub normalize_rewards: bool,
}

impl AblationArm {
    pub fn label(&self) -> String {
        let b = |v: bool| if v { "on" } else { "off" };
        format!(
            "imit={} reinit={} norm={}",
            b(self.proxy_imitation),
            b(self.reinit_model),
            b(self.normalize_rewards)
        )
    }

    pub fn apply(&self, cfg: &mut EpisodeConfig) {
        cfg.proxy_imitation = self.proxy_imitation;
        cfg.reinit_model = self.reinit_model;
        cfg.normalize_rewards = self.normalize_rewards;
    }
}

/// All eight arms, the fully enabled one first.
pub fn ablation_grid() -> Vec<AblationArm> {
    let mut arms = Vec::with_capacity(8);
    for imit in [true, false] {
        for reinit in [true, false] {
            for norm in [true, false] {
                arms.push(AblationArm {
                    proxy_imitation: imit,
                    reinit_model: reinit,
                    normalize_rewards: norm,
                });
            }
        }
    }
    arms
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub arm: AblationArm,
    pub seeds: Vec<u64>,
    pub hm: Vec<f64>,
    pub mean_hm: f64,
    pub ci: f64,
}

/// Meta-tune with `meta` under `seed`, then score the decoded parameters on the target task.
/// A run whose search ends on parameters that cannot be decoded or trained scores zero.
pub fn tune_and_score(
    bench: &Benchmark,
    target: &FewShotTask<'_>,
    meta: &MetaConfig,
    seed: u64,
    workers: usize,
    repeats: usize,
) -> Result<(Option<MetaOutcome>, FinalScores)> {
    let zero = FinalScores {
        map_base: 0.0,
        map_novel: 0.0,
        hm: 0.0,
    };
    let outcome = match meta_tune(bench, meta, seed, workers, |_, _| {}) {
        Ok(o) => o,
        Err(Error::Contract(m)) => return Err(Error::Contract(m)),
        Err(_) => return Ok((None, zero)),
    };
    let scores = match final_evaluate(target, &outcome.loss, outcome.aug, &meta.episode, seed, repeats) {
        Ok(s) => s,
        Err(Error::Divergence(_)) => zero,
        Err(e) => return Err(e),
    };
    Ok((Some(outcome), scores))
}

/// The toggle grid over `seeds`; each arm reports mean final HM and its confidence interval.
pub fn run_ablation(
    bench: &Benchmark,
    target: &FewShotTask<'_>,
    meta: &MetaConfig,
    seeds: &[u64],
    workers: usize,
    repeats: usize,
    mut progress: impl FnMut(&AblationArm, u64, f64),
) -> Result<Vec<ArmResult>> {
    let mut results = Vec::new();
    for arm in ablation_grid() {
        let mut cfg = meta.clone();
        arm.apply(&mut cfg.episode);
        let mut hm = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let (_, s) = tune_and_score(bench, target, &cfg, seed, workers, repeats)?;
            progress(&arm, seed, s.hm);
            hm.push(s.hm);
        }
        results.push(ArmResult {
            arm,
            seeds: seeds.to_vec(),
            mean_hm: mean(&hm),
            ci: confidence_interval(&hm)?,
            hm,
        });
    }
    Ok(results)
}

pub const ABLATION_HEADER: &str = "proxy_imitation,reinit_model,normalize_rewards,mean_hm,ci,per_seed_hm";

pub fn ablation_csv(results: &[ArmResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{ABLATION_HEADER}");
    for r in results {
        let per: Vec<String> = r.hm.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.arm.proxy_imitation,
            r.arm.reinit_model,
            r.arm.normalize_rewards,
            r.mean_hm,
            r.ci,
            per.join(";")
        );
    }
    s
}

pub const CURVE_POINTS: usize = 101;

/// Temperature at `t = 0, 0.01, ..., 1` as `t,temperature` CSV; ScaledDynamic parameters add
/// an `alpha=<value>` line in front.
pub fn temperature_curve_csv(loss: &LossParams) -> Result<String> {
    loss.validate()?;
    let mut s = String::new();
    if loss.variant == crate::losses::LossVariant::ScaledDynamic {
        let _ = writeln!(s, "alpha={}", loss.rho_alpha);
    }
    s.push_str("t,temperature\n");
    for i in 0..CURVE_POINTS {
        let t = i as f64 / (CURVE_POINTS - 1) as f64;
        let _ = writeln!(s, "{t},{}", loss.temperature(TrainClock::new(t)?));
    }
    Ok(s)
}
