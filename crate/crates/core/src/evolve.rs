//! The self-evolution loop.
//!
//! Each iteration:
//! 1. Data evolution: search fresh episodes with the current policy until
//!    `valid_samples_per_iteration` groups with nonzero reward spread are
//!    collected (or the episode cap trips).
//! 2. Model evolution: update the reward model per the reward mode, then
//!    the policy with Tree-GRPO over the buffer.
//! 3. Greedy evaluation without search.
//!
//! Every random stream is derived from `(seed, purpose, iteration, index)`,
//! so a run is a pure function of its configuration and a resumed run
//! matches an uninterrupted one.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{write_json, ModelCheckpoint, ModelKind, RunCheckpoint};
use crate::config::{RewardMode, RunConfig};
use crate::env::{self, EnvConfig, OutcomeLabel, ReplayRecord, WorldState};
use crate::error::{Error, Result};
use crate::mcts::{extract_experience, PolicyProposer, RewardSource, SearchConfig, SearchTree};
use crate::mgrm::{self, eval_accuracy, label_to_reward, RewardModel};
use crate::optim::{cosine_lr, is_valid_group, tree_grpo_loss_and_grad, ExperienceGroup, Optimizer};
use crate::params::ParamVector;
use crate::policy::{ActionText, AgentState, Policy};

/// Independent 64-bit seed for one purpose and position.
pub fn derive_seed(master: u64, purpose: &str, a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(purpose.as_bytes());
    h.update([0]);
    for x in [master, a, b] {
        h.update(x.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// One row of `metrics.csv`. Wall-clock figures live in [`PhaseTimings`]
/// so that this file is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    pub success_rate: f64,
    pub avg_steps: f64,
    pub loss: f64,
    pub mean_kl: f64,
    pub clip_frac: f64,
    pub valid_groups: usize,
    pub episodes: usize,
    pub rm_accuracy: Option<f64>,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub iter: usize,
    pub collect_secs: f64,
    pub reward_model_secs: f64,
    pub policy_secs: f64,
    pub eval_secs: f64,
}

/// One optimizer step of `train_log.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iter: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub mean_kl: f64,
    pub clip_frac: f64,
    pub valid_groups: usize,
}

/// Groups collected in one iteration, in episode order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperienceBuffer {
    pub iteration: usize,
    pub groups: Vec<ExperienceGroup>,
}

impl ExperienceBuffer {
    pub fn new(iteration: usize) -> Self {
        Self { iteration, groups: Vec::new() }
    }

    /// Appends only groups that carry signal.
    pub fn push(&mut self, group: ExperienceGroup) -> bool {
        let ok = is_valid_group(&group.pr) && group.pr.len() >= 2;
        if ok {
            self.groups.push(group);
        }
        ok
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            iteration: usize,
            #[serde(flatten)]
            group: &'a ExperienceGroup,
        }
        for g in &self.groups {
            serde_json::to_writer(&mut out, &Line { iteration: self.iteration, group: g })?;
            out.write_all(b"\n").map_err(|e| Error::io("experience dump", e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub success_rate: f64,
    pub avg_steps: f64,
    pub episodes: usize,
}

/// Run one episode per seed with `actor` choosing every action.
pub fn evaluate_with<F>(actor: F, env_config: &EnvConfig, seeds: &[u64]) -> Result<EvalSummary>
where
    F: Fn(&AgentState, &WorldState) -> Result<ActionText> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::Input("episodes must be >= 1".into()));
    }
    let outcomes: Vec<(bool, u32)> = seeds
        .par_iter()
        .map(|&seed| {
            let (mut world, obs) = env::reset(seed, env_config)?;
            let mut state = AgentState::new(obs.tokens);
            while !world.is_done() {
                let a = actor(&state, &world)?;
                let (w, o, _, _) = env::step(&world, &a.tokens);
                state.push(&a, o.tokens);
                world = w;
            }
            Ok((world.goal_reached, world.step_count))
        })
        .collect::<Result<_>>()?;
    let n = outcomes.len() as f64;
    Ok(EvalSummary {
        success_rate: outcomes.iter().filter(|(s, _)| *s).count() as f64 / n,
        avg_steps: outcomes.iter().map(|(_, t)| f64::from(*t)).sum::<f64>() / n,
        episodes: outcomes.len(),
    })
}

/// Greedy single-path execution, no search.
pub fn evaluate_policy(
    policy: &Policy,
    params: &ParamVector,
    env_config: &EnvConfig,
    seeds: &[u64],
) -> Result<EvalSummary> {
    // Greedy decoding never consumes randomness.
    evaluate_with(
        |s, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            Ok(policy.sample_action(params, s, 0.0, &mut rng)?.0)
        },
        env_config,
        seeds,
    )
}

/// Step log of one greedy episode.
pub fn greedy_replay(
    policy: &Policy,
    params: &ParamVector,
    env_config: &EnvConfig,
    seed: u64,
) -> Result<Vec<ReplayRecord>> {
    let (mut world, obs) = env::reset(seed, env_config)?;
    let mut state = AgentState::new(obs.tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::new();
    let mut t = 0;
    while !world.is_done() {
        let (a, _) = policy.sample_action(params, &state, 0.0, &mut rng)?;
        let (w, o, r, done) = env::step(&world, &a.tokens);
        out.push(ReplayRecord::new(t, &a.tokens, &o, r, done));
        state.push(&a, o.tokens);
        world = w;
        t += 1;
    }
    Ok(out)
}

pub fn eval_seeds(config: &RunConfig) -> Vec<u64> {
    (0..config.eval_episodes as u64)
        .map(|i| derive_seed(config.seed ^ config.env.seed, "eval", 0, i))
        .collect()
}

/// Grow one search tree over a fresh episode. With `keep_labels`, also
/// return the simulator's verdict for every rollout end and every node.
#[allow(clippy::too_many_arguments)]
/// States paired with their simulator outcome.
type Labeled = Vec<(AgentState, OutcomeLabel)>;

fn grow_tree(
    search: &SearchConfig,
    env_config: &EnvConfig,
    proposer: &PolicyProposer<'_>,
    task_seed: u64,
    tree_seed: u64,
    reward: RewardSource<'_>,
    keep_labels: bool,
) -> Result<(SearchTree<WorldState>, Labeled)> {
    let (world, obs) = env::reset(task_seed, env_config)?;
    let rng = ChaCha8Rng::seed_from_u64(tree_seed);
    let mut tree = SearchTree::new(AgentState::new(obs.tokens), world, search.clone(), rng);
    let mut labeled = Vec::new();
    for _ in 0..search.iterations {
        for r in tree.iterate(proposer, reward)? {
            if keep_labels {
                labeled.push((r.final_state, r.label));
            }
        }
    }
    if keep_labels {
        for n in &tree.nodes {
            labeled.push((n.agent_state.clone(), n.terminal.unwrap_or_else(|| env::gt_outcome(&n.world))));
        }
    }
    Ok((tree, labeled))
}

/// Simulator-labeled histories from ground-truth searches of the initial
/// policy: the distribution a reward model judges during training.
fn searched_states(
    config: &RunConfig,
    env_config: &EnvConfig,
    purpose: &str,
    episodes: usize,
) -> Result<Vec<(AgentState, OutcomeLabel)>> {
    let policy = Policy::new(config.policy);
    let params = policy.init_params(derive_seed(config.seed, "policy-init", 0, 0));
    let proposer = PolicyProposer { policy: &policy, params: &params };
    let per_episode: Vec<Vec<(AgentState, OutcomeLabel)>> = (0..episodes as u64)
        .into_par_iter()
        .map(|i| {
            let task = derive_seed(config.seed ^ env_config.seed, purpose, 0, i);
            let tree = derive_seed(config.seed, purpose, 1, i);
            let (_, labeled) =
                grow_tree(&config.search, env_config, &proposer, task, tree, RewardSource::GroundTruth, true)?;
            Ok(labeled)
        })
        .collect::<Result<_>>()?;
    Ok(per_episode.concat())
}

/// Held-out states for reward-model accuracy. Task seeds come from their
/// own stream, disjoint from training episodes.
pub fn heldout_set(config: &RunConfig) -> Result<Vec<(AgentState, OutcomeLabel)>> {
    searched_states(config, &config.env, "heldout", config.rm_train.heldout_episodes)
}

/// Base reward model for self-supervised runs: supervised on two-object
/// episodes only, so it never sees a labeled single-object task.
pub fn pretrain_reward_model(
    rm: &RewardModel,
    init: &ParamVector,
    config: &RunConfig,
) -> Result<ParamVector> {
    let env = EnvConfig { put_two_fraction: 1.0, ..config.env.clone() };
    let data = searched_states(config, &env, "pretrain", config.rm_train.pretrain_episodes)?;
    let mut params = init.clone();
    for _ in 0..config.rm_train.pretrain_steps {
        params = rm.supervised_update(&params, &data, config.rm_train.pretrain_lr)?.0;
    }
    Ok(params)
}

struct EpisodeOutput {
    groups: Vec<ExperienceGroup>,
    labeled: Vec<(AgentState, OutcomeLabel)>,
}

/// Output of one iteration.
#[derive(Debug, Clone)]
pub struct IterationOutput {
    pub metrics: IterationMetrics,
    pub timings: PhaseTimings,
    pub train_log: Vec<TrainLogRow>,
    pub buffer: ExperienceBuffer,
}

/// Owns the parameters and everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub policy: Policy,
    pub rm: RewardModel,
    pub policy_params: ParamVector,
    pub rm_params: ParamVector,
    pub reference: ParamVector,
    pub optimizer: Optimizer,
    pub global_step: usize,
    pub completed_iterations: usize,
    heldout: Option<Vec<(AgentState, OutcomeLabel)>>,
    eval_seeds: Vec<u64>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let policy = Policy::new(config.policy);
        let rm = RewardModel::new(config.mgrm);
        let policy_params = policy.init_params(derive_seed(config.seed, "policy-init", 0, 0));
        let mut rm_params = rm.init_params(derive_seed(config.seed, "rm-init", 0, 0));
        if config.reward_mode == RewardMode::SelfSupervisedMgrm {
            rm_params = pretrain_reward_model(&rm, &rm_params, &config)?;
        }
        let optimizer = Optimizer::new(config.optim.optimizer, policy_params.len());
        Self::assemble(config, policy, rm, policy_params.clone(), policy_params, rm_params, optimizer, 0, 0)
    }

    pub fn from_checkpoint(config: RunConfig, ck: &RunCheckpoint) -> Result<Self> {
        config.validate()?;
        if ck.config_hash != config.hash() {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint has {}, current config is {}",
                ck.config_hash,
                config.hash()
            )));
        }
        let policy = Policy::new(config.policy);
        let rm = RewardModel::new(config.mgrm);
        let reference = policy.init_params(derive_seed(config.seed, "policy-init", 0, 0));
        Self::assemble(
            config,
            policy,
            rm,
            reference,
            ck.policy.params()?,
            ck.reward_model.params()?,
            ck.optimizer.clone(),
            ck.global_step,
            ck.completed_iterations,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: RunConfig,
        policy: Policy,
        rm: RewardModel,
        reference: ParamVector,
        policy_params: ParamVector,
        rm_params: ParamVector,
        optimizer: Optimizer,
        global_step: usize,
        completed_iterations: usize,
    ) -> Result<Self> {
        let heldout = if config.reward_mode.uses_reward_model() {
            Some(heldout_set(&config)?)
        } else {
            None
        };
        let eval_seeds = eval_seeds(&config);
        Ok(Self {
            config,
            policy,
            rm,
            policy_params,
            rm_params,
            reference,
            optimizer,
            global_step,
            completed_iterations,
            heldout,
            eval_seeds,
        })
    }

    pub fn checkpoint(&self) -> RunCheckpoint {
        RunCheckpoint {
            format_version: crate::checkpoint::FORMAT_VERSION,
            config_hash: self.config.hash(),
            completed_iterations: self.completed_iterations,
            global_step: self.global_step,
            policy: ModelCheckpoint::new(ModelKind::Policy, self.config.seed, &self.policy_params),
            reward_model: ModelCheckpoint::new(ModelKind::Reward, self.config.seed, &self.rm_params),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn evaluate(&self) -> Result<EvalSummary> {
        evaluate_policy(&self.policy, &self.policy_params, &self.config.env, &self.eval_seeds)
    }

    fn search_episode(&self, iter: usize, episode: usize, judge: RewardSource<'_>) -> Result<EpisodeOutput> {
        let c = &self.config;
        let (i, e) = (iter as u64, episode as u64);
        let proposer = PolicyProposer { policy: &self.policy, params: &self.policy_params };
        let (tree, labeled) = grow_tree(
            &c.search,
            &c.env,
            &proposer,
            derive_seed(c.seed ^ c.env.seed, "task", i, e),
            derive_seed(c.seed, "tree", i, e),
            judge,
            c.reward_mode == RewardMode::SupervisedMgrm,
        )?;
        let groups = extract_experience(&tree, c.min_group_size, &self.policy, &self.policy_params)?
            .into_iter()
            .filter(|g| is_valid_group(&g.pr))
            .collect();
        Ok(EpisodeOutput { groups, labeled })
    }

    /// Search episodes until the valid-group target is met. In supervised
    /// mode the reward model is calibrated against simulator labels every
    /// `calibration_interval` episodes, and once more on any remainder.
    /// Returns the buffer and the episode count.
    fn collect(&mut self, iter: usize) -> Result<(ExperienceBuffer, usize)> {
        let c = self.config.clone();
        let target = c.optim.valid_samples_per_iteration;
        let cap = c.episode_cap_factor * target;
        let calibrate = c.reward_mode == RewardMode::SupervisedMgrm;
        let mut buffer = ExperienceBuffer::new(iter);
        let mut pending: Vec<(AgentState, OutcomeLabel)> = Vec::new();
        let mut pending_episodes = 0;
        let mut episodes = 0;
        while buffer.len() < target && episodes < cap {
            let end = (episodes + c.collect_batch).min(cap);
            let outs = self.search_batch(iter, episodes..end)?;
            for out in outs {
                for g in out.groups {
                    buffer.push(g);
                }
                pending.extend(out.labeled);
            }
            pending_episodes += end - episodes;
            episodes = end;
            if calibrate && pending_episodes >= c.rm_train.calibration_interval {
                self.calibrate(&pending)?;
                pending.clear();
                pending_episodes = 0;
            }
        }
        if calibrate && !pending.is_empty() {
            self.calibrate(&pending)?;
        }
        Ok((buffer, episodes))
    }

    fn search_batch(&self, iter: usize, episodes: std::ops::Range<usize>) -> Result<Vec<EpisodeOutput>> {
        let c = &self.config;
        let (rm, rm_params, mapping) = (&self.rm, &self.rm_params, c.mgrm.mapping);
        let judge_fn = move |s: &AgentState| {
            let label = rm.classify(rm_params, s).expect("histories hold vocabulary tokens only");
            label_to_reward(label, &mapping)
        };
        let judge = match c.reward_mode {
            RewardMode::GroundTruth => RewardSource::GroundTruth,
            _ => RewardSource::Judge(&judge_fn),
        };
        episodes.into_par_iter().map(|e| self.search_episode(iter, e, judge)).collect()
    }

    fn calibrate(&mut self, batch: &[(AgentState, OutcomeLabel)]) -> Result<()> {
        let rt = &self.config.rm_train;
        for _ in 0..rt.calibration_steps {
            self.rm_params = self.rm.supervised_update(&self.rm_params, batch, rt.supervised_lr)?.0;
        }
        Ok(())
    }

    /// Majority-vote pseudo labels and GRPO on the reward model.
    fn self_supervise(&mut self, iter: usize) -> Result<()> {
        let c = self.config.clone();
        let mut records = Vec::new();
        for j in 0..c.rm_train.ttrl_states as u64 {
            let seed = derive_seed(c.seed ^ c.env.seed, "ttrl-task", iter as u64, j);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, "ttrl-rollout", iter as u64, j));
            let (recs, diag) = mgrm::ttrl_generate_pseudo_gt(
                &self.policy,
                &self.policy_params,
                &self.rm,
                &self.rm_params,
                &c.env,
                seed,
                c.mgrm.votes,
                &mut rng,
            )?;
            log::debug!("iter {iter} vote {j}: {:?}", diag);
            records.extend(recs);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, "ttrl-update", iter as u64, 0));
        for _ in 0..c.rm_train.ttrl_steps {
            if records.is_empty() {
                break;
            }
            self.rm_params = mgrm::ttrl_update(
                &self.rm,
                &self.rm_params,
                &records,
                c.mgrm.group_size,
                &c.optim,
                c.rm_train.ttrl_lr,
                &mut rng,
            )?
            .params;
        }
        Ok(())
    }

    fn update_policy(&mut self, iter: usize, buffer: &ExperienceBuffer) -> Result<Vec<TrainLogRow>> {
        let c = &self.config;
        let chunk = if c.optim.steps_per_iter > 0 {
            buffer.len().div_ceil(c.optim.steps_per_iter)
        } else {
            c.optim.batch_size
        };
        let total = c.schedule_steps();
        let mut rows = Vec::new();
        for batch in buffer.groups.chunks(chunk.max(1)) {
            let lr = cosine_lr(self.global_step, total, c.optim.lr0, c.optim.warmup_ratio);
            let (loss, grad, stats) =
                tree_grpo_loss_and_grad(batch, &self.policy, &self.policy_params, &self.reference, &c.optim)?;
            self.policy_params = self.optimizer.step(&self.policy_params, &grad, lr, &c.optim)?;
            self.policy_params.check_finite()?;
            rows.push(TrainLogRow {
                iter,
                step: self.global_step,
                lr,
                loss,
                mean_kl: stats.mean_kl,
                clip_frac: stats.clip_frac,
                valid_groups: batch.len(),
            });
            self.global_step += 1;
        }
        Ok(rows)
    }

    /// One full iteration; `iter` counts from 1.
    pub fn run_iteration(&mut self) -> Result<IterationOutput> {
        let iter = self.completed_iterations + 1;
        self.iteration_inner(iter).map_err(|e| Error::Iteration { iter, source: Box::new(e) })
    }

    fn iteration_inner(&mut self, iter: usize) -> Result<IterationOutput> {
        let t0 = Instant::now();
        let (mut buffer, episodes) = self.collect(iter)?;
        let t1 = Instant::now();
        if self.config.reward_mode == RewardMode::SelfSupervisedMgrm {
            self.self_supervise(iter)?;
        }
        let t2 = Instant::now();
        let target = self.config.optim.valid_samples_per_iteration;
        let aborted = buffer.len() < target;
        let mut train_log = Vec::new();
        if aborted {
            log::warn!(
                "iteration {iter}: only {} of {target} valid groups after {episodes} episodes; \
                 keeping previous policy parameters",
                buffer.len()
            );
        } else {
            buffer.groups.truncate(target);
            train_log = self.update_policy(iter, &buffer)?;
        }
        let t3 = Instant::now();
        let eval = self.evaluate()?;
        let rm_accuracy = match &self.heldout {
            Some(set) => Some(eval_accuracy(&self.rm, &self.rm_params, set)?.accuracy()),
            None => None,
        };
        let t4 = Instant::now();
        let n = train_log.len().max(1) as f64;
        let metrics = IterationMetrics {
            iter,
            success_rate: eval.success_rate,
            avg_steps: eval.avg_steps,
            loss: train_log.iter().map(|r| r.loss).sum::<f64>() / n,
            mean_kl: train_log.iter().map(|r| r.mean_kl).sum::<f64>() / n,
            clip_frac: train_log.iter().map(|r| r.clip_frac).sum::<f64>() / n,
            valid_groups: buffer.len(),
            episodes,
            rm_accuracy,
            aborted,
        };
        let timings = PhaseTimings {
            iter,
            collect_secs: (t1 - t0).as_secs_f64(),
            reward_model_secs: (t2 - t1).as_secs_f64(),
            policy_secs: (t3 - t2).as_secs_f64(),
            eval_secs: (t4 - t3).as_secs_f64(),
        };
        self.completed_iterations = iter;
        Ok(IterationOutput { metrics, timings, train_log, buffer })
    }
}

/// Options for [`run`] beyond the configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from this run checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop once this many iterations are complete.
    pub stop_after: Option<usize>,
}

pub fn checkpoint_path(out_dir: &Path, iter: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("iter_{iter:04}.json"))
}

pub fn checkpoint_save(trainer: &Trainer, path: &Path) -> Result<()> {
    trainer.checkpoint().save(path)
}

pub fn checkpoint_load(config: RunConfig, path: &Path) -> Result<Trainer> {
    let ck = RunCheckpoint::load(path, Some(&config.hash()))?;
    Trainer::from_checkpoint(config, &ck)
}

struct CsvSink {
    writer: csv::Writer<std::fs::File>,
}

impl CsvSink {
    /// Fresh file with a header, or an append without one.
    fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let writer = csv::WriterBuilder::new().has_headers(!(append && exists)).from_writer(file);
        Ok(Self { writer })
    }

    fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush().map_err(|e| Error::io("csv sink", e))
    }
}

fn write_header_only<T: Serialize + Default>(path: &Path, _: T) -> Result<()> {
    let names: Vec<String> = serde_json::to_value(T::default())?
        .as_object()
        .map(|o| o.keys().cloned().collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&names)?;
    w.flush().map_err(|e| Error::io(path, e))
}

impl Default for IterationMetrics {
    fn default() -> Self {
        Self {
            iter: 0,
            success_rate: 0.0,
            avg_steps: 0.0,
            loss: 0.0,
            mean_kl: 0.0,
            clip_frac: 0.0,
            valid_groups: 0,
            episodes: 0,
            rm_accuracy: None,
            aborted: false,
        }
    }
}

/// Run the loop, streaming `metrics.csv`, `train_log.csv` and
/// `timings.csv` into `config.out_dir` and checkpointing every iteration.
pub fn run(config: &RunConfig, options: &RunOptions) -> Result<Vec<IterationMetrics>> {
    let out = config.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out.join("resolved-config.json"), config)?;
    let mut trainer = match &options.resume {
        Some(path) => checkpoint_load(config.clone(), path)?,
        None => Trainer::new(config.clone())?,
    };
    let append = options.resume.is_some();
    let metrics_path = out.join("metrics.csv");
    if config.iterations == 0 || trainer.completed_iterations >= config.iterations {
        if !append || !metrics_path.exists() {
            write_header_only(&metrics_path, IterationMetrics::default())?;
        }
        return Ok(Vec::new());
    }
    let mut metrics_sink = CsvSink::open(&metrics_path, append)?;
    let mut log_sink = CsvSink::open(&out.join("train_log.csv"), append)?;
    let mut time_sink = CsvSink::open(&out.join("timings.csv"), append)?;
    let stop = options.stop_after.unwrap_or(config.iterations).min(config.iterations);
    let mut rows = Vec::new();
    while trainer.completed_iterations < stop {
        let output = trainer.run_iteration()?;
        let m = &output.metrics;
        log::info!(
            "iter {:>3}  success {:.3}  steps {:5.2}  loss {:+.4}  groups {} from {} episodes{}",
            m.iter,
            m.success_rate,
            m.avg_steps,
            m.loss,
            m.valid_groups,
            m.episodes,
            if m.aborted { "  ABORTED" } else { "" }
        );
        metrics_sink.write(m)?;
        for r in &output.train_log {
            log_sink.write(r)?;
        }
        time_sink.write(&output.timings)?;
        if config.dump_experience {
            let path = out.join("experience").join(format!("iter_{:04}.jsonl", m.iter));
            std::fs::create_dir_all(path.parent().expect("has parent"))
                .map_err(|e| Error::io(&path, e))?;
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            output.buffer.write_jsonl(std::io::BufWriter::new(f))?;
        }
        checkpoint_save(&trainer, &checkpoint_path(&out, m.iter))?;
        rows.push(output.metrics);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, "task", 2, 3), derive_seed(1, "task", 2, 3));
        assert_ne!(derive_seed(1, "task", 2, 3), derive_seed(1, "tree", 2, 3));
        assert_ne!(derive_seed(1, "task", 2, 3), derive_seed(1, "task", 3, 2));
    }

    #[test]
    fn oracle_actor_always_succeeds() {
        let env = EnvConfig::default();
        let seeds: Vec<u64> = (0..20).collect();
        let s = evaluate_with(
            |_, w| Ok(ActionText::new(env::oracle_action(w).expect("not done"))),
            &env,
            &seeds,
        )
        .unwrap();
        assert_eq!(s.success_rate, 1.0);
        assert!(s.avg_steps <= 5.0);
    }

    #[test]
    fn idle_actor_exhausts_the_budget() {
        let env = EnvConfig::default();
        let s = evaluate_with(|_, _| ActionText::parse("the"), &env, &[1, 2, 3]).unwrap();
        assert_eq!(s.success_rate, 0.0);
        assert_eq!(s.avg_steps, 30.0);
        assert!(evaluate_with(|_, _| ActionText::parse("the"), &env, &[]).is_err());
    }
}
