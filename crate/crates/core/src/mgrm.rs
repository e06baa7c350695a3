//! Outcome reward model: a three-way classifier (Success, Continue,
//! Failure) over the interaction history.
//!
//! It shares the policy's encoder shape but owns its parameters. Two ways
//! to train it: cross-entropy against simulator labels, or self-supervised
//! rounds where the majority vote over K rollouts becomes the target and the
//! model is reinforced with 0/1 rewards for agreeing.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvConfig, OutcomeLabel};
use crate::error::{Error, Result};
use crate::optim::{grpo_scalar_reward_update, GrpoStats, OptimConfig, ScoredGroup};
use crate::params::{self, log_softmax, softmax, Dims, ParamVector};
use crate::policy::{context_tokens, AgentState, Policy, Turn};
use crate::vocab::{Token, Vocabulary};

/// Scalar reward for each label when the model judges MCTS rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelMapping {
    pub success_reward: f64,
    pub continue_reward: f64,
    pub failure_reward: f64,
}

impl Default for LabelMapping {
    fn default() -> Self {
        Self { success_reward: 1.0, continue_reward: 0.0, failure_reward: -1.0 }
    }
}

pub fn label_to_reward(label: OutcomeLabel, mapping: &LabelMapping) -> f64 {
    match label {
        OutcomeLabel::Success => mapping.success_reward,
        OutcomeLabel::Continue => mapping.continue_reward,
        OutcomeLabel::Failure => mapping.failure_reward,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MgrmConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub window: usize,
    pub mapping: LabelMapping,
    /// Rollouts per initial state whose votes form the pseudo label.
    pub votes: usize,
    /// Labels sampled per record in a self-supervised update.
    pub group_size: usize,
}

impl Default for MgrmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden_dim: 32,
            window: 32,
            mapping: LabelMapping::default(),
            votes: 10,
            group_size: 10,
        }
    }
}

impl MgrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 1 || self.hidden_dim < 1 || self.window < 1 {
            return Err(Error::Config("mgrm: embed_dim, hidden_dim and window must be >= 1".into()));
        }
        let m = self.mapping;
        if ![m.success_reward, m.continue_reward, m.failure_reward].iter().all(|r| r.is_finite()) {
            return Err(Error::Config("mgrm.mapping: rewards must be finite".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config("mgrm.group_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Result of one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: OutcomeLabel,
    /// Log-probability of `label` at temperature 1.
    pub logprob: f64,
    pub probs: [f64; 3],
}

/// Winner among three scores. A tie at the top, whichever heads it
/// involves, yields Continue: no decisive verdict means the episode is
/// treated as ongoing.
pub fn argmax_label(scores: &[f64]) -> OutcomeLabel {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut top = OutcomeLabel::ALL.into_iter().filter(|l| scores[l.index()] == best);
    match (top.next(), top.next()) {
        (Some(l), None) => l,
        _ => OutcomeLabel::Continue,
    }
}

/// Most frequent label, with ties resolved as in [`argmax_label`].
pub fn majority_vote(labels: &[OutcomeLabel]) -> Result<OutcomeLabel> {
    if labels.is_empty() {
        return Err(Error::Input("majority vote over zero labels".into()));
    }
    let mut counts = [0.0; 3];
    for l in labels {
        counts[l.index()] += 1.0;
    }
    Ok(argmax_label(&counts))
}

#[derive(Debug, Clone, Copy)]
pub struct RewardModel {
    pub config: MgrmConfig,
}

impl RewardModel {
    pub fn new(config: MgrmConfig) -> Self {
        Self { config }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            vocab: Vocabulary::get().len(),
            embed: self.config.embed_dim,
            hidden: self.config.hidden_dim,
            output: 3,
        }
    }

    pub fn init_params(&self, seed: u64) -> ParamVector {
        ParamVector::init(seed, self.dims())
    }

    pub fn context(&self, state: &AgentState) -> Result<Vec<Token>> {
        let vocab = Vocabulary::get();
        vocab.check(&state.initial)?;
        for t in &state.history {
            vocab.check(&t.action)?;
            vocab.check(&t.observation)?;
        }
        Ok(context_tokens(state, &[], self.config.window))
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.dims != self.dims() {
            return Err(Error::Input(format!(
                "reward model expects dims {:?}, got {:?}",
                self.dims(),
                params.dims
            )));
        }
        Ok(())
    }

    pub fn logits(&self, params: &ParamVector, state: &AgentState) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let ctx = self.context(state)?;
        Ok(params::forward(params, params::mean_embedding(params, &ctx)).logits)
    }

    /// Temperature 0 is the tie-ruled argmax; otherwise a draw from
    /// `softmax(logits / temperature)`.
    pub fn predict(
        &self,
        params: &ParamVector,
        state: &AgentState,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Prediction> {
        let z = self.logits(params, state)?;
        let lp = log_softmax(&z);
        let label = if temperature <= 0.0 {
            argmax_label(&z)
        } else {
            let i = crate::policy::sample_index(&z, temperature, rng);
            OutcomeLabel::from_index(i).expect("three heads")
        };
        let p = softmax(&z);
        Ok(Prediction { label, logprob: lp[label.index()], probs: [p[0], p[1], p[2]] })
    }

    /// Greedy label without a generator.
    pub fn classify(&self, params: &ParamVector, state: &AgentState) -> Result<OutcomeLabel> {
        Ok(argmax_label(&self.logits(params, state)?))
    }

    pub fn label_logprob(
        &self,
        params: &ParamVector,
        state: &AgentState,
        label: OutcomeLabel,
    ) -> Result<f64> {
        Ok(log_softmax(&self.logits(params, state)?)[label.index()])
    }

    /// Gradient of `Σ weight · log p(label | state)` accumulated into `grad`.
    pub fn accumulate_grad_label(
        &self,
        params: &ParamVector,
        state: &AgentState,
        label: OutcomeLabel,
        weight: f64,
        grad: &mut ParamVector,
    ) -> Result<()> {
        self.check_params(params)?;
        let ctx = self.context(state)?;
        let act = params::forward(params, params::mean_embedding(params, &ctx));
        let mut dz: Vec<f64> = softmax(&act.logits).iter().map(|p| -weight * p).collect();
        dz[label.index()] += weight;
        params::backward(params, &act, &ctx, &dz, grad);
        Ok(())
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub fn ce_loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &[(AgentState, OutcomeLabel)],
    ) -> Result<(f64, ParamVector)> {
        if batch.is_empty() {
            return Err(Error::Input("empty supervised batch".into()));
        }
        let n = batch.len() as f64;
        let mut grad = ParamVector::zeros(params.dims);
        let mut loss = 0.0;
        for (state, label) in batch {
            loss -= self.label_logprob(params, state, *label)?;
            // d(−log p)/dθ = −∇ log p.
            self.accumulate_grad_label(params, state, *label, -1.0 / n, &mut grad)?;
        }
        Ok((loss / n, grad))
    }

    /// One SGD step on mean cross-entropy. Returns the new parameters and
    /// the loss before the step.
    pub fn supervised_update(
        &self,
        params: &ParamVector,
        batch: &[(AgentState, OutcomeLabel)],
        lr: f64,
    ) -> Result<(ParamVector, f64)> {
        let (loss, grad) = self.ce_loss_and_grad(params, batch)?;
        Ok((crate::optim::sgd_step(params, &grad, lr)?, loss))
    }
}

/// One input with a group of sampled labels, scored 1 when they match the
/// target and 0 otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGroup {
    pub state: AgentState,
    pub labels: Vec<OutcomeLabel>,
    pub rewards: Vec<f64>,
    /// One entry per label: the label is the single output token.
    pub old_logprobs: Vec<Vec<f64>>,
}

impl ScoredGroup for LabelGroup {
    type Model = RewardModel;

    fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    fn old_logprobs(&self) -> &[Vec<f64>] {
        &self.old_logprobs
    }

    fn item_logprobs(&self, model: &RewardModel, params: &ParamVector, i: usize) -> Result<Vec<f64>> {
        Ok(vec![model.label_logprob(params, &self.state, self.labels[i])?])
    }

    fn accumulate_item_grad(
        &self,
        model: &RewardModel,
        params: &ParamVector,
        i: usize,
        weights: &[f64],
        grad: &mut ParamVector,
    ) -> Result<()> {
        model.accumulate_grad_label(params, &self.state, self.labels[i], weights[0], grad)
    }
}

/// A terminal history with the pseudo label voted for its initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeled {
    pub state: AgentState,
    pub label: OutcomeLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VoteDiagnostics {
    /// Votes per head, in (Success, Continue, Failure) order.
    pub votes: [usize; 3],
    /// Rollouts whose simulator verdict equals the pseudo label. Reported,
    /// never trained on.
    pub agreeing_with_simulator: usize,
}

/// Roll the policy out `votes` times from one initial state at temperature
/// 1, label each final history greedily, and attach the majority label to
/// every one of them.
#[allow(clippy::too_many_arguments)]
pub fn ttrl_generate_pseudo_gt(
    policy: &Policy,
    policy_params: &ParamVector,
    rm: &RewardModel,
    rm_params: &ParamVector,
    env_config: &EnvConfig,
    task_seed: u64,
    votes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<PseudoLabeled>, VoteDiagnostics)> {
    if votes < 3 {
        return Err(Error::Config(format!("self-supervised voting needs K >= 3, got {votes}")));
    }
    let (world0, obs0) = env::reset(task_seed, env_config)?;
    let mut finals = Vec::with_capacity(votes);
    let mut verdicts = Vec::with_capacity(votes);
    for _ in 0..votes {
        let mut world = world0.clone();
        let mut state = AgentState::new(obs0.tokens.clone());
        while !world.is_done() {
            let (a, _) = policy.sample_action(policy_params, &state, 1.0, rng)?;
            let (w, obs, _, _) = env::step(&world, &a.tokens);
            state.push(&a, obs.tokens);
            world = w;
        }
        verdicts.push(env::gt_outcome(&world));
        finals.push(state);
    }
    let predicted: Vec<OutcomeLabel> =
        finals.iter().map(|s| rm.classify(rm_params, s)).collect::<Result<_>>()?;
    let pseudo = majority_vote(&predicted)?;
    let mut diag = VoteDiagnostics::default();
    for p in &predicted {
        diag.votes[p.index()] += 1;
    }
    diag.agreeing_with_simulator = verdicts.iter().filter(|v| **v == pseudo).count();
    let records = finals.into_iter().map(|state| PseudoLabeled { state, label: pseudo }).collect();
    Ok((records, diag))
}

/// Outcome of a self-supervised update.
#[derive(Debug, Clone, PartialEq)]
pub struct TtrlOutcome {
    pub params: ParamVector,
    pub stats: Option<GrpoStats>,
    pub groups_used: usize,
    pub groups_skipped: usize,
}

/// Sample `group_size` labels per record, reward agreement with the
/// record's label, and take one group-relative step. When every group is
/// degenerate the parameters come back unchanged.
pub fn ttrl_update(
    rm: &RewardModel,
    params: &ParamVector,
    records: &[PseudoLabeled],
    group_size: usize,
    config: &OptimConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TtrlOutcome> {
    if records.is_empty() {
        return Err(Error::Input("self-supervised update needs at least one record".into()));
    }
    let mut groups = Vec::with_capacity(records.len());
    for rec in records {
        let z = rm.logits(params, &rec.state)?;
        let lp = log_softmax(&z);
        let labels: Vec<OutcomeLabel> = (0..group_size)
            .map(|_| {
                let i = crate::policy::sample_index(&z, 1.0, rng);
                OutcomeLabel::from_index(i).expect("three heads")
            })
            .collect();
        groups.push(LabelGroup {
            state: rec.state.clone(),
            rewards: labels.iter().map(|l| f64::from(u8::from(*l == rec.label))).collect(),
            old_logprobs: labels.iter().map(|l| vec![lp[l.index()]]).collect(),
            labels,
        });
    }
    let used = groups.iter().filter(|g| crate::optim::is_valid_group(&g.rewards)).count();
    if used == 0 {
        log::warn!("all {} label groups agree unanimously; reward model unchanged", groups.len());
        return Ok(TtrlOutcome {
            params: params.clone(),
            stats: None,
            groups_used: 0,
            groups_skipped: groups.len(),
        });
    }
    let (next, stats) = grpo_scalar_reward_update(&groups, rm, params, config, lr)?;
    Ok(TtrlOutcome {
        params: next,
        stats: Some(stats),
        groups_used: used,
        groups_skipped: groups.len() - used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl ClassAccuracy {
    /// Percentage; 0 for an empty class.
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

/// Per-class and overall accuracy, rows ordered Success, Continue, Failure.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub classes: [ClassAccuracy; 3],
    pub overall: ClassAccuracy,
}

impl AccuracyReport {
    /// Tally `(predicted, truth)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (OutcomeLabel, OutcomeLabel)>) -> Self {
        let mut r = Self::default();
        for (pred, truth) in pairs {
            let c = &mut r.classes[truth.index()];
            c.total += 1;
            r.overall.total += 1;
            if pred == truth {
                c.correct += 1;
                r.overall.correct += 1;
            }
        }
        r
    }

    pub fn accuracy(&self) -> f64 {
        self.overall.percent() / 100.0
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "correct", "total", "percent"])?;
        let rows = OutcomeLabel::ALL
            .iter()
            .map(|l| (l.name(), self.classes[l.index()]))
            .chain(std::iter::once(("overall", self.overall)));
        for (name, c) in rows {
            w.write_record([
                name.to_string(),
                c.correct.to_string(),
                c.total.to_string(),
                format!("{:.2}", c.percent()),
            ])?;
        }
        w.flush().map_err(|e| Error::io("accuracy csv", e))?;
        Ok(())
    }
}

impl std::fmt::Display for AccuracyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<10} {:>8} {:>8} {:>8}", "class", "correct", "total", "percent")?;
        for l in OutcomeLabel::ALL {
            let c = self.classes[l.index()];
            writeln!(f, "{:<10} {:>8} {:>8} {:>7.2}%", l.name(), c.correct, c.total, c.percent())?;
        }
        write!(
            f,
            "{:<10} {:>8} {:>8} {:>7.2}%",
            "overall",
            self.overall.correct,
            self.overall.total,
            self.overall.percent()
        )
    }
}

/// Greedy predictions against simulator labels.
pub fn eval_accuracy(
    rm: &RewardModel,
    params: &ParamVector,
    set: &[(AgentState, OutcomeLabel)],
) -> Result<AccuracyReport> {
    if set.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let preds: Vec<OutcomeLabel> =
        set.iter().map(|(s, _)| rm.classify(params, s)).collect::<Result<_>>()?;
    Ok(AccuracyReport::from_pairs(preds.into_iter().zip(set.iter().map(|(_, l)| *l))))
}

/// One labeled history on disk, tokens as space-separated words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledRecord {
    pub initial: String,
    pub history: Vec<TurnRecord>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRecord {
    pub action: String,
    pub observation: String,
}

impl LabeledRecord {
    pub fn new(state: &AgentState, label: OutcomeLabel) -> Self {
        let v = Vocabulary::get();
        Self {
            initial: v.decode(&state.initial),
            history: state
                .history
                .iter()
                .map(|t| TurnRecord { action: v.decode(&t.action), observation: v.decode(&t.observation) })
                .collect(),
            label: label.name().to_string(),
        }
    }

    pub fn to_pair(&self) -> Result<(AgentState, OutcomeLabel)> {
        let v = Vocabulary::get();
        let label = OutcomeLabel::parse(&self.label)
            .ok_or_else(|| Error::Input(format!("unknown label `{}`", self.label)))?;
        let mut state = AgentState::new(v.encode(&self.initial)?);
        for t in &self.history {
            state.history.push(Turn { action: v.encode(&t.action)?, observation: v.encode(&t.observation)? });
        }
        Ok((state, label))
    }
}

/// Read a labeled JSONL set. Errors name the 1-based line.
pub fn read_labeled_jsonl<R: BufRead>(input: R) -> Result<Vec<(AgentState, OutcomeLabel)>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("labeled set", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabeledRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("line {}: {e}", i + 1)))?;
        out.push(rec.to_pair().map_err(|e| Error::Input(format!("line {}: {e}", i + 1)))?);
    }
    if out.is_empty() {
        return Err(Error::Input("labeled set has no records".into()));
    }
    Ok(out)
}

pub fn write_labeled_jsonl<W: Write>(set: &[(AgentState, OutcomeLabel)], mut out: W) -> Result<()> {
    for (s, l) in set {
        serde_json::to_writer(&mut out, &LabeledRecord::new(s, *l))?;
        out.write_all(b"\n").map_err(|e| Error::io("labeled set", e))?;
    }
    Ok(())
}

/// Histories with simulator labels: every prefix of episodes driven by a
/// mix of the shortest-plan oracle and uniformly random canonical actions.
/// `explore` is the per-step chance of a random action.
pub fn labeled_states(
    env_config: &EnvConfig,
    seeds: impl IntoIterator<Item = u64>,
    explore: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(AgentState, OutcomeLabel)>> {
    let mut out = Vec::new();
    for seed in seeds {
        let (mut world, obs) = env::reset(seed, env_config)?;
        let mut state = AgentState::new(obs.tokens);
        out.push((state.clone(), env::gt_outcome(&world)));
        while !world.is_done() {
            let action = match env::oracle_action(&world) {
                Some(a) if !rng.gen_bool(explore) => a,
                _ => {
                    let all = env::canonical_actions(&world);
                    all[rng.gen_range(0..all.len())].clone()
                }
            };
            let a = crate::policy::ActionText::new(action);
            let (w, o, _, _) = env::step(&world, &a.tokens);
            state.push(&a, o.tokens);
            world = w;
            out.push((state.clone(), env::gt_outcome(&world)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use OutcomeLabel::*;

    fn rm() -> RewardModel {
        RewardModel::new(MgrmConfig::default())
    }

    fn state(text: &str) -> AgentState {
        AgentState::new(Vocabulary::get().encode(text).unwrap())
    }

    #[test]
    fn zero_params_are_uniform_and_tie_to_continue() {
        let m = rm();
        let p = ParamVector::zeros(m.dims());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pred = m.predict(&p, &state("task put apple in fridge"), 0.0, &mut rng).unwrap();
        assert_eq!(pred.label, Continue);
        for q in pred.probs {
            assert!((q - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn votes() {
        let ten = [Success, Success, Continue, Success, Failure, Success, Success, Success, Success, Success];
        assert_eq!(majority_vote(&ten).unwrap(), Success);
        let mut tie = vec![Success; 5];
        tie.extend([Failure; 5]);
        assert_eq!(majority_vote(&tie).unwrap(), Continue);
        assert_eq!(majority_vote(&[Continue]).unwrap(), Continue);
        assert_eq!(majority_vote(&[Success, Failure]).unwrap(), Continue);
        assert_eq!(majority_vote(&[Failure, Failure, Success]).unwrap(), Failure);
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn mapping() {
        let m = LabelMapping::default();
        assert_eq!(label_to_reward(Success, &m), 1.0);
        assert_eq!(label_to_reward(Continue, &m), 0.0);
        assert_eq!(label_to_reward(Failure, &m), -1.0);
    }

    #[test]
    fn ce_of_uniform_is_ln3() {
        let m = rm();
        let p = ParamVector::zeros(m.dims());
        let batch = vec![(state("task put mug in sink"), Failure), (state("you see apple"), Success)];
        let (loss, _) = m.ce_loss_and_grad(&p, &batch).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn accuracy_table_arithmetic() {
        let mut pairs = vec![(Success, Success); 77];
        pairs.extend([(Failure, Continue); 7]);
        let r = AccuracyReport::from_pairs(pairs);
        assert_eq!((r.overall.correct, r.overall.total), (77, 84));
        assert_eq!(format!("{:.2}", r.overall.percent()), "91.67");
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("class,correct,total,percent\n"));
        assert!(text.ends_with("overall,77,84,91.67\n"));
    }

    #[test]
    fn labeled_record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = labeled_states(&EnvConfig::default(), [1, 2], 0.3, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_labeled_jsonl(&set, &mut buf).unwrap();
        assert_eq!(read_labeled_jsonl(buf.as_slice()).unwrap(), set);
        let err = read_labeled_jsonl("{\"bad\": 1}\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
