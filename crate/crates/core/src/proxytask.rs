//! Proxy few-shot tasks carved out of base-class data, and the episodic policy search that
//! runs on them.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::augment::AugMagnitude;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::losses::{ClassKind, LossParams, LossVariant};
use crate::policy::{
    decode_rho, reinforce_update, sample_rho, search_params, sigma_schedule, EpisodeResult, FrozenParams, PolicyState,
    RhoSample, SearchStage, TrajectoryRow, write_trajectory_rows, TRAJECTORY_HEADER,
};
use crate::rng;
use crate::synthbench::{Benchmark, Pool, ProposalConfig};
use crate::trainer::{fine_tune, pretrain, DetectorModel, EvalSet, SupportSet, TrainSchedule};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub proxy_base: Vec<usize>,
    pub proxy_novel: Vec<usize>,
}

impl ClassSplit {
    pub fn all(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.proxy_base.iter().chain(&self.proxy_novel).copied().collect();
        v.sort_unstable();
        v
    }

    /// `(class, kind)` with proxy-novel classes marked novel.
    pub fn kinds(&self) -> Vec<(usize, ClassKind)> {
        self.all()
            .into_iter()
            .map(|c| {
                let kind = if self.proxy_novel.contains(&c) {
                    ClassKind::Novel
                } else {
                    ClassKind::Base
                };
                (c, kind)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplits {
    pub pretrain: Vec<usize>,
    pub support_pool: Vec<usize>,
    pub query: Vec<usize>,
    /// Clean images held out for the reward of the non-imitation ablation arm.
    pub base_holdout: Vec<usize>,
}

/// Fractions of the clean (proxy-base-only) images sent to pretraining and to the holdout;
/// everything else is split evenly between support pool and query.
const PRETRAIN_FRACTION: f64 = 0.6;
const HOLDOUT_FRACTION: f64 = 0.1;
const MIN_PRETRAIN_IMAGES: usize = 10;

pub fn make_proxy_splits<R: Rng + ?Sized>(
    bench: &Benchmark,
    n_proxy_novel: usize,
    rng: &mut R,
) -> Result<(ClassSplit, DataSplits)> {
    let base = bench.base_classes();
    if n_proxy_novel == 0 || n_proxy_novel >= base.len() {
        return Err(Error::contract(format!(
            "n_proxy_novel must be in 1..{}, got {n_proxy_novel}",
            base.len()
        )));
    }
    let mut proxy_novel: Vec<usize> = index::sample(rng, base.len(), n_proxy_novel)
        .into_iter()
        .map(|i| base[i])
        .collect();
    proxy_novel.sort_unstable();
    let proxy_base: Vec<usize> = base.iter().copied().filter(|c| !proxy_novel.contains(c)).collect();
    let novel_set: BTreeSet<usize> = proxy_novel.iter().copied().collect();

    let (mut clean, mut mixed): (Vec<usize>, Vec<usize>) = bench
        .image_ids(Pool::Pretrain)
        .into_iter()
        .partition(|&i| bench.annotations[i].iter().all(|a| !novel_set.contains(&a.class_id)));
    clean.shuffle(rng);
    let n_pre = (clean.len() as f64 * PRETRAIN_FRACTION).round() as usize;
    let n_hold = (clean.len() as f64 * HOLDOUT_FRACTION).round() as usize;
    if n_pre < MIN_PRETRAIN_IMAGES || n_hold == 0 {
        return Err(Error::InfeasibleSplit(format!(
            "only {} images are free of proxy-novel objects",
            clean.len()
        )));
    }
    let mut pretrain = clean[..n_pre].to_vec();
    let mut base_holdout = clean[n_pre..n_pre + n_hold].to_vec();
    mixed.extend_from_slice(&clean[n_pre + n_hold..]);
    mixed.shuffle(rng);
    let half = mixed.len() / 2;
    let mut support_pool = mixed[..half].to_vec();
    let mut query = mixed[half..].to_vec();
    if support_pool.is_empty() || query.is_empty() {
        return Err(Error::InfeasibleSplit("support pool or query split is empty".into()));
    }
    for v in [&mut pretrain, &mut base_holdout, &mut support_pool, &mut query] {
        v.sort_unstable();
    }
    Ok((
        ClassSplit {
            proxy_base,
            proxy_novel,
        },
        DataSplits {
            pretrain,
            support_pool,
            query,
            base_holdout,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShotCounting {
    /// A class is satisfied once `k` annotated instances are included.
    Instances,
    /// A class is satisfied once `k` images containing it are included.
    Images,
}

impl FromStr for ShotCounting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "instances" => Ok(ShotCounting::Instances),
            "images" => Ok(ShotCounting::Images),
            other => Err(Error::contract(format!("unknown shot counting `{other}`"))),
        }
    }
}

impl fmt::Display for ShotCounting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShotCounting::Instances => "instances",
            ShotCounting::Images => "images",
        })
    }
}

/// Greedy k-shot draw: visit `pool` in random order and keep an image whenever it contains a
/// class that is still short of `k`.
pub fn sample_k_shot<R: Rng + ?Sized>(
    bench: &Benchmark,
    pool: &[usize],
    classes: &[usize],
    k: usize,
    counting: ShotCounting,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if k == 0 || classes.is_empty() {
        return Err(Error::contract("k-shot sampling needs k > 0 and at least one class"));
    }
    let slot = |c: usize| classes.iter().position(|&x| x == c);
    let mut counts = vec![0usize; classes.len()];
    let mut order = pool.to_vec();
    order.shuffle(rng);
    let mut chosen = Vec::new();
    for i in order {
        if counts.iter().all(|&n| n >= k) {
            break;
        }
        let anns = &bench.annotations[i];
        if !anns.iter().any(|a| slot(a.class_id).is_some_and(|s| counts[s] < k)) {
            continue;
        }
        chosen.push(i);
        for (c, n) in counts_for(anns.iter().map(|a| a.class_id), counting) {
            if let Some(s) = slot(c) {
                counts[s] += n;
            }
        }
    }
    if let Some(s) = counts.iter().position(|&n| n < k) {
        return Err(Error::InsufficientPool(format!(
            "class {} has {} of {k} shots after exhausting {} pool images",
            classes[s],
            counts[s],
            pool.len()
        )));
    }
    Ok(chosen)
}

fn counts_for(ids: impl Iterator<Item = usize>, counting: ShotCounting) -> Vec<(usize, usize)> {
    let mut tally: Vec<(usize, usize)> = Vec::new();
    for c in ids {
        match tally.iter_mut().find(|(x, _)| *x == c) {
            Some(e) => e.1 += 1,
            None => tally.push((c, 1)),
        }
    }
    if counting == ShotCounting::Images {
        for e in &mut tally {
            e.1 = 1;
        }
    }
    tally
}

pub fn sample_support<R: Rng + ?Sized>(
    bench: &Benchmark,
    splits: &DataSplits,
    class_split: &ClassSplit,
    k: usize,
    counting: ShotCounting,
    rng: &mut R,
) -> Result<Vec<usize>> {
    sample_k_shot(bench, &splits.support_pool, &class_split.all(), k, counting, rng)
}

/// Which query metric becomes the episode reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMetric {
    NovelMap,
    AllMap,
    Hm,
}

impl FromStr for RewardMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "novel_map" => Ok(RewardMetric::NovelMap),
            "all_map" => Ok(RewardMetric::AllMap),
            "hm" => Ok(RewardMetric::Hm),
            other => Err(Error::contract(format!("unknown reward metric `{other}`"))),
        }
    }
}

impl fmt::Display for RewardMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardMetric::NovelMap => "novel_map",
            RewardMetric::AllMap => "all_map",
            RewardMetric::Hm => "hm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeConfig {
    pub n_trials: usize,
    pub k_shot: usize,
    pub inner_iterations: usize,
    pub inner_lr: f64,
    pub batch_images: usize,
    pub reinit_model: bool,
    pub normalize_rewards: bool,
    pub proxy_imitation: bool,
    pub shot_counting: ShotCounting,
    pub reward_metric: RewardMetric,
    /// Multiplier from mAP in [0, 1] to the raw reward (100 = percentage points).
    pub reward_scale: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            n_trials: 8,
            k_shot: 5,
            inner_iterations: 300,
            inner_lr: 5.0,
            batch_images: 2,
            reinit_model: true,
            normalize_rewards: true,
            proxy_imitation: true,
            shot_counting: ShotCounting::Instances,
            reward_metric: RewardMetric::NovelMap,
            reward_scale: 100.0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 || self.k_shot == 0 || self.inner_iterations == 0 || self.batch_images == 0 {
            return Err(Error::contract("n_trials, k_shot, inner_iterations and batch_images must be positive"));
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) || !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return Err(Error::contract("inner_lr and reward_scale must be positive and finite"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            total_iterations: self.inner_iterations,
            learning_rate: self.inner_lr,
            batch_images: self.batch_images,
        }
    }
}

/// A pretrained head plus everything needed to fine-tune it on k-shot draws and score it.
#[derive(Debug, Clone)]
pub struct FewShotTask<'a> {
    pub bench: &'a Benchmark,
    pub base_model: DetectorModel,
    pub support_pool: Vec<usize>,
    /// Classes that must reach k shots in every support draw.
    pub support_classes: Vec<usize>,
    pub eval: EvalSet,
    /// Classes scored on `eval`, with the kind used for the base/novel means.
    pub eval_classes: Vec<(usize, ClassKind)>,
    pub proposal: ProposalConfig,
}

impl FewShotTask<'_> {
    pub fn draw_support<R: Rng + ?Sized>(&self, k: usize, counting: ShotCounting, rng: &mut R) -> Result<SupportSet> {
        let ids = sample_k_shot(self.bench, &self.support_pool, &self.support_classes, k, counting, rng)?;
        Ok(SupportSet::build(self.bench, &ids, &self.base_model, &self.proposal, rng))
    }

    pub fn score(&self, model: &DetectorModel) -> EvalReport {
        let dets = self.eval.detect(model);
        evaluate(&dets, &self.bench.annotations, &self.eval.image_ids, &self.eval_classes, 0.5)
    }

    /// Draw a support set, fine-tune `start` on it and score the result.
    pub fn run_trial<R: Rng + ?Sized>(
        &self,
        start: &DetectorModel,
        loss: &LossParams,
        aug: AugMagnitude,
        cfg: &EpisodeConfig,
        rng: &mut R,
    ) -> Result<(DetectorModel, EvalReport)> {
        let support = self.draw_support(cfg.k_shot, cfg.shot_counting, rng)?;
        let model = fine_tune(start, &support, loss, aug, &cfg.schedule(), rng)?;
        let report = self.score(&model);
        Ok((model, report))
    }
}

pub fn reward_of(report: &EvalReport, metric: RewardMetric) -> f64 {
    match metric {
        RewardMetric::NovelMap => report.map_novel,
        RewardMetric::AllMap => report.map_all,
        RewardMetric::Hm => report.hm,
    }
}

/// Proxy-task data and models shared by every episode of a meta-tuning run.
#[derive(Debug, Clone)]
pub struct ProxySetup<'a> {
    pub class_split: ClassSplit,
    pub splits: DataSplits,
    /// Rewards on proxy-novel query data.
    pub imitation: FewShotTask<'a>,
    /// Rewards on the proxy-base holdout.
    pub holdout: FewShotTask<'a>,
}

impl<'a> ProxySetup<'a> {
    pub fn build(
        bench: &'a Benchmark,
        n_proxy_novel: usize,
        pretrain_schedule: &TrainSchedule,
        proposal: &ProposalConfig,
        seed: u64,
    ) -> Result<Self> {
        let (class_split, splits) = make_proxy_splits(bench, n_proxy_novel, &mut rng::stream(seed, "proxy-split", &[]))?;
        let layout = DetectorModel::for_classes(bench, &class_split.kinds())?;
        let base_model = pretrain(
            bench,
            &splits.pretrain,
            &layout,
            pretrain_schedule,
            proposal,
            &mut rng::stream(seed, "proxy-pretrain", &[]),
        )?;
        let query = EvalSet::build(bench, &splits.query, proposal, &mut rng::stream(seed, "proxy-query", &[]));
        let holdout_set = EvalSet::build(bench, &splits.base_holdout, proposal, &mut rng::stream(seed, "proxy-holdout", &[]));
        let imitation = FewShotTask {
            bench,
            base_model,
            support_pool: splits.support_pool.clone(),
            support_classes: class_split.all(),
            eval: query,
            eval_classes: class_split.kinds(),
            proposal: *proposal,
        };
        let holdout = FewShotTask {
            eval: holdout_set,
            eval_classes: class_split.proxy_base.iter().map(|&c| (c, ClassKind::Base)).collect(),
            ..imitation.clone()
        };
        Ok(ProxySetup {
            class_split,
            splits,
            imitation,
            holdout,
        })
    }

    pub fn task(&self, proxy_imitation: bool) -> &FewShotTask<'a> {
        if proxy_imitation {
            &self.imitation
        } else {
            &self.holdout
        }
    }

    pub fn reward(&self, report: &EvalReport, cfg: &EpisodeConfig) -> f64 {
        let metric = if cfg.proxy_imitation {
            cfg.reward_metric
        } else {
            // The holdout has no proxy-novel classes; score every proxy-base class.
            RewardMetric::AllMap
        };
        cfg.reward_scale * reward_of(report, metric)
    }
}

/// What one policy-search stage explores and what it keeps fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSpec {
    pub stage: SearchStage,
    pub variant: LossVariant,
    pub frozen: FrozenParams,
    /// Position of the stage in the run; part of the trial stream keys.
    pub index: usize,
}

impl StageSpec {
    pub fn param_names(&self) -> Vec<String> {
        search_params(self.variant, self.stage).into_iter().map(String::from).collect()
    }
}

type TrialOutcome = Result<(RhoSample, f64, DetectorModel)>;

#[allow(clippy::too_many_arguments)]
fn one_trial(
    setup: &ProxySetup<'_>,
    start: &DetectorModel,
    policy: &PolicyState,
    cfg: &EpisodeConfig,
    stage: &StageSpec,
    seed: u64,
    episode: usize,
    trial: usize,
) -> TrialOutcome {
    let mut r = rng::stream(seed, "trial", &[stage.index as u64, episode as u64, trial as u64]);
    let rho = sample_rho(policy, &mut r);
    let (loss, aug) = decode_rho(&rho, stage.variant, stage.stage, &stage.frozen)?;
    let task = setup.task(cfg.proxy_imitation);
    let (model, report) = task.run_trial(start, &loss, aug, cfg, &mut r)?;
    Ok((rho, setup.reward(&report, cfg), model))
}

/// One episode: `n_trials` fresh samples, whitening, best selection and a single REINFORCE step.
///
/// Without re-initialization every trial starts from the weights the previous trial ended
/// with; `carry` holds that state across trials and episodes.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    policy: &PolicyState,
    setup: &ProxySetup<'_>,
    cfg: &EpisodeConfig,
    stage: &StageSpec,
    eta: f64,
    seed: u64,
    carry: &mut DetectorModel,
    pool: Option<&ThreadPool>,
) -> Result<(PolicyState, EpisodeResult)> {
    cfg.validate()?;
    policy.validate()?;
    let episode = policy.episode;
    let base = &setup.task(cfg.proxy_imitation).base_model;
    let outcomes: Vec<TrialOutcome> = if cfg.reinit_model {
        let run = |t: usize| one_trial(setup, base, policy, cfg, stage, seed, episode, t);
        match pool {
            Some(p) => p.install(|| (0..cfg.n_trials).into_par_iter().map(run).collect()),
            None => (0..cfg.n_trials).map(run).collect(),
        }
    } else {
        let mut out = Vec::with_capacity(cfg.n_trials);
        for t in 0..cfg.n_trials {
            let o = one_trial(setup, carry, policy, cfg, stage, seed, episode, t);
            if let Ok((_, _, m)) = &o {
                *carry = m.clone();
            }
            out.push(o);
        }
        out
    };

    let mut samples = Vec::new();
    let mut rewards = Vec::new();
    let mut first_failure = None;
    let mut failed = 0;
    for o in outcomes {
        match o {
            Ok((rho, reward, _)) => {
                samples.push(rho);
                rewards.push(reward);
            }
            Err(e) => {
                failed += 1;
                first_failure.get_or_insert_with(|| e.to_string());
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::EpisodeFailed {
            episode,
            trials: cfg.n_trials,
            first: first_failure.unwrap_or_default(),
        });
    }
    let result = EpisodeResult::from_trials(samples, rewards, cfg.normalize_rewards, failed)?;
    let i = result.best_index;
    let mut next = reinforce_update(policy, &result.samples[i], result.norm_rewards[i], eta);
    next.episode += 1;
    Ok((next, result))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub variant: LossVariant,
    pub stages: Vec<SearchStage>,
    pub episodes: usize,
    pub eta: f64,
    pub sigma0: f64,
    pub sigma_min: f64,
    pub n_proxy_novel: usize,
    pub pretrain: TrainSchedule,
    pub proposal: ProposalConfig,
    pub episode: EpisodeConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            variant: LossVariant::Static,
            stages: vec![SearchStage::Loss],
            episodes: 200,
            eta: 0.0005,
            sigma0: 0.1,
            sigma_min: 0.01,
            n_proxy_novel: 3,
            pretrain: default_pretrain_schedule(),
            proposal: ProposalConfig::default(),
            episode: EpisodeConfig::default(),
        }
    }
}

pub fn default_pretrain_schedule() -> TrainSchedule {
    TrainSchedule {
        total_iterations: 10000,
        learning_rate: 5.0,
        batch_images: 16,
    }
}

pub fn validate_stages(stages: &[SearchStage]) -> Result<()> {
    let ok = matches!(
        stages,
        [SearchStage::Loss] | [SearchStage::Aug] | [SearchStage::Loss, SearchStage::Aug]
    );
    if !ok {
        let names: Vec<&str> = stages.iter().map(|s| s.name()).collect();
        return Err(Error::contract(format!(
            "stages must be a nonempty prefix-ordered subset of [loss, aug], got [{}]",
            names.join(", ")
        )));
    }
    Ok(())
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        validate_stages(&self.stages)?;
        self.episode.validate()?;
        self.pretrain.validate()?;
        if self.episodes == 0 {
            return Err(Error::contract("episodes must be positive"));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.eta) || !positive(self.sigma0) || !positive(self.sigma_min) || self.sigma_min > self.sigma0 {
            return Err(Error::contract("need eta > 0 and 0 < sigma_min <= sigma0"));
        }
        if self.stages.contains(&SearchStage::Loss) && self.variant == LossVariant::Baseline {
            return Err(Error::contract("the baseline loss has nothing to search"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: SearchStage,
    pub param_names: Vec<String>,
    pub trajectory: Vec<TrajectoryRow>,
    pub final_policy: PolicyState,
    pub failed_trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaOutcome {
    pub class_split: ClassSplit,
    pub stages: Vec<StageOutcome>,
    pub loss: LossParams,
    pub aug: AugMagnitude,
}

impl MetaOutcome {
    /// `name=value` lines for the decoded parameters.
    pub fn learned_params_text(&self) -> String {
        learned_params_text(&self.loss, self.aug)
    }

    /// Every stage's rows under one header; parameter names tell the stages apart.
    pub fn write_trajectory<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{TRAJECTORY_HEADER}")?;
        for st in &self.stages {
            write_trajectory_rows(&mut w, &st.param_names, &st.trajectory)?;
        }
        Ok(())
    }
}

pub fn learned_params_text(loss: &LossParams, aug: AugMagnitude) -> String {
    let mut lines = vec![format!("variant={}", loss.variant.name())];
    let num = |name: &str, v: f64| format!("{name}={v:.16e}");
    match loss.variant {
        LossVariant::Baseline => {}
        LossVariant::Static => lines.push(num("tau", loss.rho_tau)),
        LossVariant::Dynamic | LossVariant::ScaledDynamic => {
            lines.push(num("a", loss.rho_a));
            lines.push(num("b", loss.rho_b));
            lines.push(num("c", loss.rho_c));
            if loss.variant == LossVariant::ScaledDynamic {
                lines.push(num("alpha", loss.rho_alpha));
            }
        }
    }
    lines.push(num("aug", aug.value()));
    lines.join("\n") + "\n"
}

/// Parse what [`learned_params_text`] writes.
pub fn parse_learned_params(text: &str, origin: &std::path::Path) -> Result<(LossParams, AugMagnitude)> {
    let mut variant = None;
    let mut vals = std::collections::BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(origin, format!("line {}: expected name=value", n + 1)))?;
        if k.trim() == "variant" {
            variant = Some(v.trim().parse::<LossVariant>()?);
        } else {
            let x: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, format!("line {}: bad number", n + 1)))?;
            vals.insert(k.trim().to_string(), x);
        }
    }
    let variant = variant.ok_or_else(|| Error::parse(origin, "missing variant line"))?;
    let get = |k: &str| {
        vals.get(k)
            .copied()
            .ok_or_else(|| Error::parse(origin, format!("missing `{k}`")))
    };
    let loss = match variant {
        LossVariant::Baseline => LossParams::baseline(),
        LossVariant::Static => LossParams::static_temperature(get("tau")?)?,
        LossVariant::Dynamic => LossParams::dynamic(get("a")?, get("b")?, get("c")?)?,
        LossVariant::ScaledDynamic => LossParams::scaled_dynamic(get("a")?, get("b")?, get("c")?, get("alpha")?)?,
    };
    let aug = AugMagnitude::new(vals.get("aug").copied().unwrap_or(0.0))?;
    Ok((loss, aug))
}

/// Run the configured stages in order on a proxy task built from `bench`. The loss stage's
/// final mean is decoded and frozen before the augmentation stage starts.
pub fn meta_tune(
    bench: &Benchmark,
    cfg: &MetaConfig,
    seed: u64,
    workers: usize,
    mut progress: impl FnMut(SearchStage, &TrajectoryRow),
) -> Result<MetaOutcome> {
    cfg.validate()?;
    let setup = ProxySetup::build(bench, cfg.n_proxy_novel, &cfg.pretrain, &cfg.proposal, seed)?;
    let pool = if workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::contract(format!("cannot start worker pool: {e}")))?,
        )
    } else {
        None
    };
    let mut frozen = FrozenParams::default();
    let mut outcomes = Vec::new();
    for (index, &stage) in cfg.stages.iter().enumerate() {
        let spec = StageSpec {
            stage,
            variant: cfg.variant,
            frozen,
            index,
        };
        let names = spec.param_names();
        let mut policy = PolicyState::new(names.clone(), vec![0.0; names.len()], cfg.sigma0)?;
        let mut carry = setup.task(cfg.episode.proxy_imitation).base_model.clone();
        let mut trajectory = Vec::with_capacity(cfg.episodes);
        let mut failed = 0;
        for e in 0..cfg.episodes {
            policy.sigma = sigma_schedule(e, cfg.episodes, cfg.sigma0, cfg.sigma_min);
            let (next, result) = run_episode(&policy, &setup, &cfg.episode, &spec, cfg.eta, seed, &mut carry, pool.as_ref())?;
            failed += result.failed_trials;
            let row = TrajectoryRow {
                episode: e,
                mu: next.mu.clone(),
                sigma: policy.sigma,
                best_reward_raw: result.raw_rewards[result.best_index],
                best_reward_norm: result.norm_rewards[result.best_index],
            };
            progress(stage, &row);
            trajectory.push(row);
            policy = next;
        }
        let (loss, aug) = decode_rho(&RhoSample { values: policy.mu.clone() }, cfg.variant, stage, &frozen)?;
        frozen = FrozenParams { loss, aug };
        outcomes.push(StageOutcome {
            stage,
            param_names: names,
            trajectory,
            final_policy: policy,
            failed_trials: failed,
        });
    }
    Ok(MetaOutcome {
        class_split: setup.class_split,
        stages: outcomes,
        loss: frozen.loss,
        aug: frozen.aug,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::{generate, SceneSpec};

    fn small_bench() -> Benchmark {
        let spec = SceneSpec {
            n_pretrain: 400,
            n_support: 60,
            n_query: 60,
            ..SceneSpec::default()
        };
        generate(&spec, 5).unwrap()
    }

    #[test]
    fn splits_are_disjoint_and_pure() {
        let bench = small_bench();
        for s in 0..5 {
            let (cs, ds) = make_proxy_splits(&bench, 3, &mut rng::stream(s, "x", &[])).unwrap();
            assert_eq!(cs.proxy_novel.len(), 3);
            assert_eq!(cs.proxy_base.len(), bench.base_classes().len() - 3);
            let sets = [&ds.pretrain, &ds.support_pool, &ds.query, &ds.base_holdout];
            let mut seen = BTreeSet::new();
            for set in sets {
                for &i in set {
                    assert!(seen.insert(i), "image {i} in two splits");
                }
            }
            for &i in &ds.pretrain {
                assert!(bench.annotations[i].iter().all(|a| !cs.proxy_novel.contains(&a.class_id)));
            }
        }
    }

    #[test]
    fn too_many_proxy_novel_is_rejected() {
        let bench = small_bench();
        let n = bench.base_classes().len();
        assert!(make_proxy_splits(&bench, n, &mut rng::stream(0, "x", &[])).is_err());
        assert!(make_proxy_splits(&bench, 0, &mut rng::stream(0, "x", &[])).is_err());
    }

    #[test]
    fn greedy_support_is_minimal() {
        let bench = small_bench();
        let (cs, ds) = make_proxy_splits(&bench, 3, &mut rng::stream(1, "x", &[])).unwrap();
        for k in [1, 3] {
            let ids = sample_support(&bench, &ds, &cs, k, ShotCounting::Instances, &mut rng::stream(2, "k", &[])).unwrap();
            let count = |set: &[usize], c: usize| -> usize {
                set.iter().map(|&i| bench.annotations[i].iter().filter(|a| a.class_id == c).count()).sum()
            };
            for c in cs.all() {
                assert!(count(&ids, c) >= k);
            }
            // Each kept image was needed by some class at the time it was added.
            for j in 0..ids.len() {
                let before = &ids[..j];
                assert!(bench.annotations[ids[j]]
                    .iter()
                    .any(|a| cs.all().contains(&a.class_id) && count(before, a.class_id) < k));
            }
        }
    }

    #[test]
    fn image_counting_counts_images() {
        let bench = small_bench();
        let (cs, ds) = make_proxy_splits(&bench, 3, &mut rng::stream(1, "x", &[])).unwrap();
        let ids = sample_support(&bench, &ds, &cs, 2, ShotCounting::Images, &mut rng::stream(3, "k", &[])).unwrap();
        for c in cs.all() {
            let n = ids.iter().filter(|&&i| bench.annotations[i].iter().any(|a| a.class_id == c)).count();
            assert!(n >= 2);
        }
    }

    #[test]
    fn insufficient_pool_is_an_error() {
        let bench = small_bench();
        let (cs, ds) = make_proxy_splits(&bench, 3, &mut rng::stream(1, "x", &[])).unwrap();
        let err = sample_support(&bench, &ds, &cs, 100_000, ShotCounting::Instances, &mut rng::stream(3, "k", &[]));
        assert!(matches!(err, Err(Error::InsufficientPool(_))));
    }

    #[test]
    fn stage_order_is_enforced() {
        assert!(validate_stages(&[SearchStage::Loss, SearchStage::Aug]).is_ok());
        assert!(validate_stages(&[SearchStage::Aug, SearchStage::Loss]).is_err());
        assert!(validate_stages(&[]).is_err());
        assert!(validate_stages(&[SearchStage::Loss, SearchStage::Loss]).is_err());
    }

    #[test]
    fn learned_params_round_trip() {
        let loss = LossParams::scaled_dynamic(-0.3, 1.0 / 3.0, 0.1, 1.7).unwrap();
        let aug = AugMagnitude::new(0.23).unwrap();
        let text = learned_params_text(&loss, aug);
        let (l2, a2) = parse_learned_params(&text, std::path::Path::new("mem")).unwrap();
        assert_eq!(l2, loss);
        assert_eq!(a2, aug);
    }
}
