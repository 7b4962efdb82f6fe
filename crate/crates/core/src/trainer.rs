//! Imitation training: teacher forcing followed by DAgger rounds, plus greedy
//! evaluation.
//!
//! Every visited state is labeled by the oracle of the configured supervision
//! mode when it is collected. Round `k` executes the oracle's action with
//! probability `beta_k = p^k` and a policy-sampled action otherwise; round 0
//! (`beta = 1`) is the teacher-forcing data. All rounds are aggregated in a
//! replay buffer and the policy is retrained on the whole buffer.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::{Dataset, Episode, Split};
use crate::metrics::{compute_metrics, MetricsConfig, MetricsError, MetricsReport, Trajectory};
use crate::policy::{
    argmax_action, init_params, loss_and_grad, policy_step, sample_action, token_ids,
    EpisodeSample, PolicyConfig, PolicyError, PolicyParams, PolicyState, Sgd, SgdConfig, StepInput,
};
use crate::sensors::{EpisodeOracle, OracleConfig, SensorError, SupervisionMode};
use crate::worldsim::{apply_action, observe, ActionType, GridMap, ScanConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no training episodes")]
    EmptyDataset,
    #[error("oracle failed on episode {episode}: {source}")]
    Oracle {
        episode: String,
        source: SensorError,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("metrics failed on episode {episode}: {source}")]
    Metrics {
        episode: String,
        source: MetricsError,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: SupervisionMode,
    pub seed: u64,
    /// Epochs over the teacher-forcing data.
    pub tf_epochs: usize,
    pub dagger_rounds: usize,
    /// Epochs over the aggregated buffer after each DAgger round.
    pub dagger_epochs: usize,
    /// Episodes collected per DAgger round (0 = every training episode).
    pub episodes_per_round: usize,
    /// Base of the oracle-mixing schedule `beta_k = beta_base^k`.
    pub beta_base: f64,
    /// Episodes per minibatch.
    pub batch_size: usize,
    pub max_steps: usize,
    pub sgd: SgdConfig,
    pub policy: PolicyConfig,
    pub oracle: OracleConfig,
    pub scan: ScanConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: SupervisionMode::Goal,
            seed: 0,
            tf_epochs: 10,
            dagger_rounds: 3,
            dagger_epochs: 2,
            episodes_per_round: 0,
            beta_base: 0.75,
            batch_size: 8,
            max_steps: 200,
            sgd: SgdConfig::default(),
            policy: PolicyConfig::default(),
            oracle: OracleConfig::default(),
            scan: ScanConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.beta_base) {
            return bad("beta_base must be in [0, 1]");
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return bad("batch_size and max_steps must be positive");
        }
        if self.scan.n_rays != self.policy.n_rays || self.scan.max_range != self.policy.max_range {
            return bad("scan and policy disagree on rays or range");
        }
        if !(self.sgd.lr > 0.0)
            || !(0.0..1.0).contains(&self.sgd.momentum)
            || !(self.sgd.clip > 0.0)
        {
            return bad("optimizer settings out of range");
        }
        Ok(())
    }

    pub fn beta(&self, round: usize) -> f64 {
        self.beta_base.powi(round as i32)
    }
}

/// Aggregated labeled episodes from all rounds.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    pub samples: Vec<EpisodeSample>,
    /// Round that produced each sample.
    pub rounds: Vec<usize>,
}

impl ReplayBuffer {
    pub fn append(&mut self, round: usize, samples: Vec<EpisodeSample>) {
        self.rounds
            .extend(std::iter::repeat_n(round, samples.len()));
        self.samples.extend(samples);
    }

    /// Number of labeled steps.
    pub fn len(&self) -> usize {
        self.samples.iter().map(|s| s.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub phase: String,
    pub round: usize,
    pub epoch: usize,
    pub loss: f64,
    pub buffer_size: usize,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["phase", "round", "epoch", "loss", "buffer_size"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.phase.clone(),
            r.round.to_string(),
            r.epoch.to_string(),
            format!("{:.6}", r.loss),
            r.buffer_size.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
}

/// Seed for (run seed, stream, round, item), mixed through ChaCha.
pub(crate) fn sub_seed(seed: u64, stream: u64, round: usize, item: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(round as u64);
    rng.set_word_pos(item as u128 * 2);
    rng.gen()
}

/// Result of one labeled rollout.
pub struct Rollout {
    pub trajectory: Trajectory,
    pub sample: EpisodeSample,
    /// Oracle target index at every step.
    pub targets: Vec<usize>,
}

/// Rolls out one episode, labeling every state with the oracle of `mode`.
/// Each step executes the oracle action with probability `beta`, else an
/// action sampled from `policy`.
#[allow(clippy::too_many_arguments)]
pub fn labeled_rollout(
    map: &GridMap,
    episode: &Episode,
    mode: SupervisionMode,
    policy: Option<&PolicyParams>,
    beta: f64,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<Rollout, TrainError> {
    let oracle_err = |source| TrainError::Oracle {
        episode: episode.id.clone(),
        source,
    };
    let mut oracle = EpisodeOracle::new(map, &episode.pano_path, mode, cfg.oracle.clone(), seed)
        .map_err(oracle_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = token_ids(&episode.instruction);
    let mut state = PolicyState::new(&cfg.policy);
    let mut pose = episode.start;
    let mut prev = None;
    let mut poses = vec![pose];
    let mut actions = Vec::new();
    let mut steps = Vec::new();
    let mut labels = Vec::new();
    let mut targets = Vec::new();
    let mut stopped = false;
    for t in 0..cfg.max_steps {
        let obs = observe(map, &pose, prev, t, &cfg.scan);
        let out = oracle.query(&pose).map_err(oracle_err)?;
        let use_oracle = beta >= 1.0 || rng.gen::<f64>() < beta;
        let action = match policy {
            Some(p) if beta < 1.0 => {
                let (probs, next) = policy_step(p, &state, &obs, &tokens);
                state = next;
                if use_oracle {
                    out.action
                } else {
                    sample_action(&probs, &mut rng)
                }
            }
            _ => out.action,
        };
        steps.push(StepInput::from(&obs));
        labels.push(out.labels);
        targets.push(out.target_index);
        pose = apply_action(map, &pose, action);
        poses.push(pose);
        actions.push(action);
        prev = Some(action);
        if action == ActionType::Stop {
            stopped = true;
            break;
        }
    }
    Ok(Rollout {
        trajectory: Trajectory {
            poses,
            actions,
            stopped,
        },
        sample: EpisodeSample {
            id: episode.id.clone(),
            tokens,
            steps,
            labels,
        },
        targets,
    })
}

fn train_episodes(data: &Dataset) -> Vec<&Episode> {
    data.episodes
        .iter()
        .filter(|e| e.split == Split::Train)
        .collect()
}

fn collect(
    data: &Dataset,
    episodes: &[&Episode],
    params: Option<&PolicyParams>,
    round: usize,
    cfg: &TrainConfig,
) -> Result<Vec<EpisodeSample>, TrainError> {
    let beta = cfg.beta(round);
    episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            let seed = sub_seed(cfg.seed, 1, round, i);
            labeled_rollout(data.map_of(ep), ep, cfg.mode, params, beta, seed, cfg)
                .map(|r| r.sample)
        })
        .collect()
}

/// Minibatch SGD over `samples` for `epochs` epochs; appends one log row per
/// epoch with the step-weighted mean minibatch loss.
#[allow(clippy::too_many_arguments)]
fn fit(
    params: &mut PolicyParams,
    sgd: &mut Sgd,
    samples: &[EpisodeSample],
    epochs: usize,
    phase: &str,
    round: usize,
    cfg: &TrainConfig,
    log: &mut Vec<LogRow>,
) -> Result<(), TrainError> {
    let buffer_size: usize = samples.iter().map(|s| s.steps.len()).sum();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 2, round, epoch));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut weight = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<EpisodeSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let n: usize = batch.iter().map(|s| s.steps.len()).sum();
            let (l, g) = loss_and_grad(params, &batch)?;
            sgd.step(params, &g);
            total += l * n as f64;
            weight += n;
        }
        let loss = if weight > 0 {
            total / weight as f64
        } else {
            0.0
        };
        log::debug!("{phase} round {round} epoch {epoch}: loss {loss:.4}");
        log.push(LogRow {
            phase: phase.to_string(),
            round,
            epoch,
            loss,
            buffer_size,
        });
    }
    Ok(())
}

/// State carried through training.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: PolicyParams,
    pub buffer: ReplayBuffer,
    pub log: Vec<LogRow>,
    sgd: Sgd,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let params = init_params(config.seed, &config.policy);
        let sgd = Sgd::new(config.sgd.clone(), params.data.len());
        Ok(Trainer {
            config,
            params,
            buffer: ReplayBuffer::default(),
            log: Vec::new(),
            sgd,
        })
    }

    /// Collects oracle-driven rollouts (round 0) and fits them.
    pub fn teacher_forcing_phase(&mut self, data: &Dataset) -> Result<(), TrainError> {
        let episodes = train_episodes(data);
        if episodes.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let samples = collect(data, &episodes, None, 0, &self.config)?;
        self.buffer.append(0, samples);
        let cfg = self.config.clone();
        fit(
            &mut self.params,
            &mut self.sgd,
            &self.buffer.samples,
            cfg.tf_epochs,
            "teacher_forcing",
            0,
            &cfg,
            &mut self.log,
        )
    }

    /// DAgger round `k >= 1`: collect with `beta_k`, aggregate, retrain.
    pub fn dagger_round(&mut self, data: &Dataset, k: usize) -> Result<(), TrainError> {
        let mut episodes = train_episodes(data);
        if episodes.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let cfg = self.config.clone();
        if cfg.episodes_per_round > 0 && cfg.episodes_per_round < episodes.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3, k, 0));
            episodes.shuffle(&mut rng);
            episodes.truncate(cfg.episodes_per_round);
        }
        let samples = collect(data, &episodes, Some(&self.params), k, &cfg)?;
        self.buffer.append(k, samples);
        fit(
            &mut self.params,
            &mut self.sgd,
            &self.buffer.samples,
            cfg.dagger_epochs,
            "dagger",
            k,
            &cfg,
            &mut self.log,
        )
    }

    /// Teacher forcing followed by all DAgger rounds. `on_round` sees the
    /// parameters after each round (0 = teacher forcing).
    pub fn run(
        &mut self,
        data: &Dataset,
        mut on_round: impl FnMut(usize, &PolicyParams),
    ) -> Result<(), TrainError> {
        self.teacher_forcing_phase(data)?;
        on_round(0, &self.params);
        for k in 1..=self.config.dagger_rounds {
            self.dagger_round(data, k)?;
            on_round(k, &self.params);
        }
        Ok(())
    }
}

/// Trains a policy from scratch under `config`.
pub fn train(
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(PolicyParams, Vec<LogRow>), TrainError> {
    let mut t = Trainer::new(config.clone())?;
    t.run(data, |_, _| {})?;
    Ok((t.params, t.log))
}

/// Greedy rollout of a trained policy.
pub fn policy_rollout(
    map: &GridMap,
    episode: &Episode,
    params: &PolicyParams,
    max_steps: usize,
    scan: &ScanConfig,
) -> Trajectory {
    let tokens = token_ids(&episode.instruction);
    let mut state = PolicyState::new(&params.config);
    let mut pose = episode.start;
    let mut prev = None;
    let mut poses = vec![pose];
    let mut actions = Vec::new();
    let mut stopped = false;
    for t in 0..max_steps {
        let obs = observe(map, &pose, prev, t, scan);
        let (probs, next) = policy_step(params, &state, &obs, &tokens);
        state = next;
        let action = argmax_action(&probs);
        pose = apply_action(map, &pose, action);
        poses.push(pose);
        actions.push(action);
        prev = Some(action);
        if action == ActionType::Stop {
            stopped = true;
            break;
        }
    }
    Trajectory {
        poses,
        actions,
        stopped,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: String,
    pub split: Split,
    pub divergence: f64,
    pub metrics: MetricsReport,
    #[serde(skip)]
    pub trajectory: Option<Trajectory>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeResult>,
    /// Mean metrics and episode count per split.
    pub aggregates: BTreeMap<Split, (MetricsReport, usize)>,
}

impl EvalReport {
    pub fn from_results(episodes: Vec<EpisodeResult>) -> Self {
        let mut by_split: BTreeMap<Split, Vec<MetricsReport>> = BTreeMap::new();
        for r in &episodes {
            by_split.entry(r.split).or_default().push(r.metrics.clone());
        }
        let aggregates = by_split
            .into_iter()
            .map(|(s, v)| (s, (MetricsReport::mean(&v), v.len())))
            .collect();
        EvalReport {
            episodes,
            aggregates,
        }
    }

    pub fn mean(&self, split: Split) -> Option<&MetricsReport> {
        self.aggregates.get(&split).map(|(m, _)| m)
    }
}

/// How an evaluation chooses actions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Driver<'a> {
    Policy(&'a PolicyParams),
    /// The oracle of a supervision mode acts directly (no learning).
    Oracle(SupervisionMode),
}

/// Rolls out every episode of `episodes` and scores it.
pub fn evaluate(
    data: &Dataset,
    episodes: &[&Episode],
    driver: Driver<'_>,
    cfg: &TrainConfig,
    metrics: &MetricsConfig,
) -> Result<EvalReport, TrainError> {
    let results = episodes
        .par_iter()
        .map(|ep| {
            let map = data.map_of(ep);
            let traj = match driver {
                Driver::Policy(p) => policy_rollout(map, ep, p, cfg.max_steps, &cfg.scan),
                Driver::Oracle(mode) => {
                    let seed = sub_seed(cfg.seed, 4, 0, 0);
                    labeled_rollout(map, ep, mode, None, 1.0, seed, cfg)?.trajectory
                }
            };
            let m =
                compute_metrics(ep, &traj, map, metrics).map_err(|source| TrainError::Metrics {
                    episode: ep.id.clone(),
                    source,
                })?;
            Ok(EpisodeResult {
                episode_id: ep.id.clone(),
                split: ep.split,
                divergence: ep.divergence,
                metrics: m,
                trajectory: Some(traj),
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(EvalReport::from_results(results))
}

/// Greedy evaluation of `params` on the validation splits.
pub fn evaluate_policy(
    params: &PolicyParams,
    data: &Dataset,
    cfg: &TrainConfig,
    metrics: &MetricsConfig,
) -> Result<EvalReport, TrainError> {
    let episodes: Vec<&Episode> = data
        .episodes
        .iter()
        .filter(|e| e.split != Split::Train)
        .collect();
    evaluate(data, &episodes, Driver::Policy(params), cfg, metrics)
}
