//! Flat `key = value` run configuration shared by every command.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossVariant;
use crate::policy::SearchStage;
use crate::proxytask::{validate_stages, EpisodeConfig, MetaConfig};
use crate::synthbench::{ProposalConfig, SceneSpec};
use crate::trainer::TrainSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub benchmark: PathBuf,
    pub out: PathBuf,
    pub model: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub detections: Option<PathBuf>,

    pub scene: SceneSpec,

    pub variant: LossVariant,
    pub stages: Vec<SearchStage>,
    pub episodes: usize,
    pub eta: f64,
    pub sigma0: f64,
    pub sigma_min: f64,
    pub n_proxy_novel: usize,
    pub episode: EpisodeConfig,
    pub pretrain: TrainSchedule,

    /// Support draws averaged by the final few-shot evaluation.
    pub eval_repeats: usize,
    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let meta = MetaConfig::default();
        RunConfig {
            seed: 0,
            workers: 1,
            benchmark: PathBuf::from("bench"),
            out: PathBuf::from("out"),
            model: None,
            params: None,
            detections: None,
            scene: SceneSpec::default(),
            variant: meta.variant,
            stages: meta.stages,
            episodes: meta.episodes,
            eta: meta.eta,
            sigma0: meta.sigma0,
            sigma_min: meta.sigma_min,
            n_proxy_novel: meta.n_proxy_novel,
            episode: meta.episode,
            pretrain: meta.pretrain,
            eval_repeats: 5,
            ablate_seeds: 5,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Set one field from its textual form. Unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = || Error::contract(format!("bad value `{v}` for `{key}`"));
        macro_rules! num {
            () => {
                v.parse().map_err(|_| bad())?
            };
        }
        let flag = || parse_bool(v).ok_or_else(bad);
        let path = || if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        match key.trim() {
            "seed" => self.seed = num!(),
            "workers" => self.workers = num!(),
            "benchmark" => self.benchmark = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "model" => self.model = path(),
            "params" => self.params = path(),
            "detections" => self.detections = path(),

            "image_size" => self.scene.image_size = num!(),
            "n_classes" => self.scene.n_classes = num!(),
            "n_novel" => self.scene.n_novel = num!(),
            "max_objects" => self.scene.max_objects = num!(),
            "n_pretrain" => self.scene.n_pretrain = num!(),
            "n_support" => self.scene.n_support = num!(),
            "n_query" => self.scene.n_query = num!(),
            "noise_std" => self.scene.noise_std = num!(),
            "lighting_jitter" => self.scene.lighting_jitter = num!(),
            "hue_band_halfwidth" => self.scene.hue_band_halfwidth = num!(),
            "min_object_size" => self.scene.min_object_size = num!(),
            "max_object_size" => self.scene.max_object_size = num!(),

            "variant" => self.variant = v.parse()?,
            "stages" => {
                self.stages = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "episodes" => self.episodes = num!(),
            "eta" => self.eta = num!(),
            "sigma0" => self.sigma0 = num!(),
            "sigma_min" => self.sigma_min = num!(),
            "n_proxy_novel" => self.n_proxy_novel = num!(),
            "n_trials" => self.episode.n_trials = num!(),
            "k_shot" => self.episode.k_shot = num!(),
            "inner_iterations" => self.episode.inner_iterations = num!(),
            "inner_lr" => self.episode.inner_lr = num!(),
            "batch_images" => self.episode.batch_images = num!(),
            "reinit_model" => self.episode.reinit_model = flag()?,
            "normalize_rewards" => self.episode.normalize_rewards = flag()?,
            "proxy_imitation" => self.episode.proxy_imitation = flag()?,
            "shot_counting" => self.episode.shot_counting = v.parse()?,
            "reward_metric" => self.episode.reward_metric = v.parse()?,
            "reward_scale" => self.episode.reward_scale = num!(),
            "pretrain_iterations" => self.pretrain.total_iterations = num!(),
            "pretrain_lr" => self.pretrain.learning_rate = num!(),
            "pretrain_batch_images" => self.pretrain.batch_images = num!(),
            "eval_repeats" => self.eval_repeats = num!(),
            "ablate_seeds" => self.ablate_seeds = num!(),
            other => return Err(Error::contract(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Apply a `key = value` file on top of `self`; `#` starts a comment line.
    pub fn merge_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v).map_err(|e| Error::parse(origin, format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge_text(text, origin)?;
        Ok(cfg)
    }

    /// Every field, in a form [`RunConfig::from_text`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let s = &self.scene;
        let e = &self.episode;
        let stages: Vec<&str> = self.stages.iter().map(|s| s.name()).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("workers", self.workers.to_string());
        kv("benchmark", self.benchmark.display().to_string());
        kv("out", self.out.display().to_string());
        kv("model", opt_path(&self.model));
        kv("params", opt_path(&self.params));
        kv("detections", opt_path(&self.detections));
        kv("image_size", s.image_size.to_string());
        kv("n_classes", s.n_classes.to_string());
        kv("n_novel", s.n_novel.to_string());
        kv("max_objects", s.max_objects.to_string());
        kv("n_pretrain", s.n_pretrain.to_string());
        kv("n_support", s.n_support.to_string());
        kv("n_query", s.n_query.to_string());
        kv("noise_std", s.noise_std.to_string());
        kv("lighting_jitter", s.lighting_jitter.to_string());
        kv("hue_band_halfwidth", s.hue_band_halfwidth.to_string());
        kv("min_object_size", s.min_object_size.to_string());
        kv("max_object_size", s.max_object_size.to_string());
        kv("variant", self.variant.name().to_string());
        kv("stages", stages.join(","));
        kv("episodes", self.episodes.to_string());
        kv("eta", self.eta.to_string());
        kv("sigma0", self.sigma0.to_string());
        kv("sigma_min", self.sigma_min.to_string());
        kv("n_proxy_novel", self.n_proxy_novel.to_string());
        kv("n_trials", e.n_trials.to_string());
        kv("k_shot", e.k_shot.to_string());
        kv("inner_iterations", e.inner_iterations.to_string());
        kv("inner_lr", e.inner_lr.to_string());
        kv("batch_images", e.batch_images.to_string());
        kv("reinit_model", e.reinit_model.to_string());
        kv("normalize_rewards", e.normalize_rewards.to_string());
        kv("proxy_imitation", e.proxy_imitation.to_string());
        kv("shot_counting", e.shot_counting.to_string());
        kv("reward_metric", e.reward_metric.to_string());
        kv("reward_scale", e.reward_scale.to_string());
        kv("pretrain_iterations", self.pretrain.total_iterations.to_string());
        kv("pretrain_lr", self.pretrain.learning_rate.to_string());
        kv("pretrain_batch_images", self.pretrain.batch_images.to_string());
        kv("eval_repeats", self.eval_repeats.to_string());
        kv("ablate_seeds", self.ablate_seeds.to_string());
        out
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            variant: self.variant,
            stages: self.stages.clone(),
            episodes: self.episodes,
            eta: self.eta,
            sigma0: self.sigma0,
            sigma_min: self.sigma_min,
            n_proxy_novel: self.n_proxy_novel,
            pretrain: self.pretrain,
            proposal: ProposalConfig::default(),
            episode: self.episode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        validate_stages(&self.stages)?;
        self.meta_config().validate()?;
        if self.workers == 0 || self.eval_repeats == 0 {
            return Err(Error::contract("workers and eval_repeats must be positive"));
        }
        if self.ablate_seeds < 2 {
            return Err(Error::contract("ablate_seeds must be at least 2 for a confidence interval"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxytask::{RewardMetric, ShotCounting};

    #[test]
    fn text_round_trip_keeps_every_field() {
        let mut cfg = RunConfig::default();
        cfg.seed = 17;
        cfg.variant = LossVariant::ScaledDynamic;
        cfg.stages = vec![SearchStage::Loss, SearchStage::Aug];
        cfg.episode.normalize_rewards = false;
        cfg.episode.shot_counting = ShotCounting::Images;
        cfg.episode.reward_metric = RewardMetric::Hm;
        cfg.eta = 1.0 / 3.0;
        cfg.params = Some(PathBuf::from("p/learned_params.txt"));
        cfg.scene.noise_std = 0.1 + 0.2;
        let back = RunConfig::from_text(&cfg.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_text("nope = 1", Path::new("mem")).is_err());
        assert!(RunConfig::from_text("episodes = many", Path::new("mem")).is_err());
        assert!(RunConfig::from_text("reinit_model = maybe", Path::new("mem")).is_err());
        assert!(RunConfig::from_text("just a line", Path::new("mem")).is_err());
    }

    #[test]
    fn later_values_win() {
        let cfg = RunConfig::from_text("# comment\nepisodes = 10\n\nepisodes = 12\n", Path::new("mem")).unwrap();
        assert_eq!(cfg.episodes, 12);
    }

    #[test]
    fn stage_order_is_validated() {
        let mut cfg = RunConfig::default();
        cfg.set("stages", "aug,loss").unwrap();
        assert!(cfg.validate().is_err());
        cfg.set("stages", "loss,aug").unwrap();
        assert!(cfg.validate().is_ok());
    }
}
