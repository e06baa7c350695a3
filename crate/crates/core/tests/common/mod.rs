//! Fixtures and independent oracles shared by the integration tests and the
//! acceptance binary. Nothing here calls into the code under test to compute
//! an expected value.

#![allow(dead_code)]

use std::cell::Cell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seea_core::env::{self, EnvConfig, OutcomeLabel, WorldState};
use seea_core::error::Result;
use seea_core::mcts::{
    run_search, PolicyProposer, Proposer, RewardSource, SearchConfig, SearchEnv, SearchTree,
};
use seea_core::mgrm::{label_to_reward, LabelGroup, LabelMapping, MgrmConfig, RewardModel};
use seea_core::optim::{tree_grpo_loss_and_grad, ExperienceGroup, GroupSource, OptimConfig};
use seea_core::params::ParamVector;
use seea_core::policy::{ActionText, AgentState, Policy, PolicyConfig};
use seea_core::vocab::Token;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Central difference of `f` along coordinate `i`.
pub fn central_difference(f: &dyn Fn(&ParamVector) -> f64, params: &ParamVector, i: usize) -> f64 {
    let mut plus = params.clone();
    plus.values[i] += FD_STEP;
    let mut minus = params.clone();
    minus.values[i] -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

/// `|a − n| / max(|a|, |n|)`, defined as 0 when both vanish exactly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Coordinates to probe: half drawn from the support of the analytic
/// gradient, half uniformly, so that both the active parameters and the
/// exactly-zero remainder are exercised.
pub fn probe_coordinates(grad: &ParamVector, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let support: Vec<usize> = (0..grad.len()).filter(|&i| grad.values[i] != 0.0).collect();
    (0..count)
        .map(|k| {
            if k % 2 == 0 && !support.is_empty() {
                support[rng.gen_range(0..support.len())]
            } else {
                rng.gen_range(0..grad.len())
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub coordinates: usize,
    pub worst: f64,
}

/// Compare an analytic gradient with central differences of `loss`.
pub fn fd_compare(
    loss: &dyn Fn(&ParamVector) -> f64,
    params: &ParamVector,
    analytic: &ParamVector,
    coords: &[usize],
) -> FdReport {
    let worst = coords
        .iter()
        .map(|&i| relative_error(analytic.values[i], central_difference(loss, params, i)))
        .fold(0.0, f64::max);
    FdReport { coordinates: coords.len(), worst }
}

/// Parameters with larger spread than the default init, so that gradients
/// are well away from zero.
pub fn spread_params(dims: seea_core::params::Dims, seed: u64, scale: f64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..dims.total()).map(|_| rng.gen_range(-scale..scale)).collect();
    ParamVector { dims, values }
}

/// A mid-episode MiniHouse state reached by random canonical actions.
pub fn random_state(seed: u64) -> AgentState {
    let config = EnvConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut world, obs) = env::reset(seed, &config).expect("default env");
    let mut state = AgentState::new(obs.tokens);
    for _ in 0..rng.gen_range(0..8) {
        if world.is_done() {
            break;
        }
        let options = env::canonical_actions(&world);
        let a = ActionText::new(options[rng.gen_range(0..options.len())].clone());
        let (w, o, _, _) = env::step(&world, &a.tokens);
        state.push(&a, o.tokens);
        world = w;
    }
    state
}

/// Policy-sampled actions for `state` that are pairwise distinct.
pub fn sampled_actions(
    policy: &Policy,
    params: &ParamVector,
    state: &AgentState,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ActionText> {
    let mut out: Vec<ActionText> = Vec::new();
    while out.len() < n {
        let (a, _) = policy.sample_action(params, state, 1.0, rng).expect("sampling");
        if !out.contains(&a) {
            out.push(a);
        }
    }
    out
}

/// One policy-gradient fixture: a batch of experience groups whose recorded
/// old log-probs are jittered away from the current parameters, and a
/// reference snapshot that differs from them.
pub struct PolicyFixture {
    pub policy: Policy,
    pub params: ParamVector,
    pub reference: ParamVector,
    pub batch: Vec<ExperienceGroup>,
    pub config: OptimConfig,
}

pub fn policy_fixture(seed: u64) -> PolicyFixture {
    let policy = Policy::new(PolicyConfig::default());
    let dims = policy.config.dims();
    let params = spread_params(dims, seed, 0.5);
    let mut reference = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for v in &mut reference.values {
        *v += rng.gen_range(-0.05..0.05);
    }
    let groups = rng.gen_range(2..=3);
    let batch = (0..groups)
        .map(|g| {
            let state = random_state(seed * 31 + g);
            let size = rng.gen_range(2..=4);
            let actions = sampled_actions(&policy, &params, &state, size, &mut rng);
            let mut pr: Vec<f64> = (0..size).map(|_| rng.gen_range(-1.0..1.0)).collect();
            pr[0] += 0.5;
            let old_logprobs = actions
                .iter()
                .map(|a| {
                    let lp = policy.logprob(&params, &state, a).expect("scoring").0;
                    // Ratios spread over both sides of the clip band.
                    lp.iter().map(|x| x + rng.gen_range(-0.4..0.4)).collect()
                })
                .collect();
            ExperienceGroup { state, actions, pr, old_logprobs, source: GroupSource::PolicyTree }
        })
        .collect();
    let config = OptimConfig { beta: 0.1, ..OptimConfig::default() };
    PolicyFixture { policy, params, reference, batch, config }
}

/// Labelled histories and sampled-label groups for the reward model.
pub struct RewardFixture {
    pub rm: RewardModel,
    pub params: ParamVector,
    pub labelled: Vec<(AgentState, OutcomeLabel)>,
    pub groups: Vec<LabelGroup>,
    pub config: OptimConfig,
}

pub fn reward_fixture(seed: u64) -> RewardFixture {
    let rm = RewardModel::new(MgrmConfig::default());
    let params = spread_params(rm.dims(), seed, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed_270b);
    let labelled: Vec<(AgentState, OutcomeLabel)> = (0..rng.gen_range(3..=6))
        .map(|k| (random_state(seed * 17 + k), OutcomeLabel::ALL[rng.gen_range(0..3)]))
        .collect();
    let groups = labelled
        .iter()
        .map(|(state, target)| {
            let mut labels: Vec<OutcomeLabel> =
                (0..6).map(|_| OutcomeLabel::ALL[rng.gen_range(0..3)]).collect();
            labels[0] = *target;
            if labels.iter().all(|l| l == target) {
                labels[1] = OutcomeLabel::ALL[(target.index() + 1) % 3];
            }
            let lp = log_softmax3(&rm.logits(&params, state).expect("logits"));
            LabelGroup {
                state: state.clone(),
                rewards: labels.iter().map(|l| if l == target { 1.0 } else { 0.0 }).collect(),
                old_logprobs: labels
                    .iter()
                    .map(|l| vec![lp[l.index()] + rng.gen_range(-0.4..0.4)])
                    .collect(),
                labels,
            }
        })
        .collect();
    RewardFixture { rm, params, labelled, groups, config: OptimConfig::default() }
}

fn log_softmax3(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

// Toy worlds for the search oracles.

/// Words used as actions in the toy worlds; each is a single valid token.
pub const TOY_WORDS: [&str; 4] = ["desk", "shelf", "sofa", "sink"];

pub fn toy_action(i: usize) -> ActionText {
    ActionText::parse(TOY_WORDS[i]).expect("toy word in vocabulary")
}

pub fn toy_index(a: &ActionText) -> usize {
    TOY_WORDS
        .iter()
        .position(|w| ActionText::parse(w).expect("word") == *a)
        .expect("toy action")
}

/// Two decisions, then the episode ends. The first step pays `r1[a]`, the
/// second `r2[a][b]`.
#[derive(Debug, Clone)]
pub struct TwoLevel {
    pub r1: [f64; 4],
    pub r2: [[f64; 4]; 4],
    pub taken: Vec<usize>,
}

impl TwoLevel {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r1 = [0.0; 4];
        let mut r2 = [[0.0; 4]; 4];
        for x in &mut r1 {
            *x = rng.gen_range(0.0..0.5);
        }
        for row in &mut r2 {
            for x in row.iter_mut() {
                *x = rng.gen_range(0.0..1.0);
            }
        }
        Self { r1, r2, taken: Vec::new() }
    }

    /// Oracle reward sequence of an action sequence, independent of the
    /// search's own bookkeeping.
    pub fn rewards_of(&self, seq: &[usize]) -> Vec<f64> {
        seq.iter()
            .enumerate()
            .map(|(t, &a)| if t == 0 { self.r1[a] } else { self.r2[seq[0]][a] })
            .collect()
    }
}

impl SearchEnv for TwoLevel {
    fn step_action(&self, action: &ActionText) -> (Self, Vec<Token>, f64, bool) {
        let a = toy_index(action);
        let mut next = self.clone();
        next.taken.push(a);
        let r = self.rewards_of(&next.taken)[next.taken.len() - 1];
        (next.clone(), Vec::new(), r, next.taken.len() >= 2)
    }

    fn outcome(&self) -> OutcomeLabel {
        if self.taken.len() < 2 {
            OutcomeLabel::Continue
        } else if self.r2[self.taken[0]][self.taken[1]] > 0.5 {
            OutcomeLabel::Success
        } else {
            OutcomeLabel::Failure
        }
    }

    fn is_done(&self) -> bool {
        self.taken.len() >= 2
    }
}

/// One decision. Choosing `winner` succeeds, anything else fails.
#[derive(Debug, Clone)]
pub struct Bandit {
    pub winner: usize,
    pub chosen: Option<usize>,
}

impl SearchEnv for Bandit {
    fn step_action(&self, action: &ActionText) -> (Self, Vec<Token>, f64, bool) {
        let a = toy_index(action);
        let r = if a == self.winner { 1.0 } else { 0.0 };
        (Self { winner: self.winner, chosen: Some(a) }, Vec::new(), r, true)
    }

    fn outcome(&self) -> OutcomeLabel {
        match self.chosen {
            None => OutcomeLabel::Continue,
            Some(a) if a == self.winner => OutcomeLabel::Success,
            Some(_) => OutcomeLabel::Failure,
        }
    }

    fn is_done(&self) -> bool {
        self.chosen.is_some()
    }
}

/// Uniform draws over the toy actions from the tree's generator.
pub struct UniformToy;

impl Proposer for UniformToy {
    fn propose(&self, _: &AgentState, _: f64, rng: &mut ChaCha8Rng) -> Result<ActionText> {
        Ok(toy_action(rng.gen_range(0..TOY_WORDS.len())))
    }
}

/// Cycles through every toy action from a seeded offset, so that a full
/// expansion always covers the whole action set.
pub struct CyclingToy {
    pub next: Cell<usize>,
}

impl Proposer for CyclingToy {
    fn propose(&self, _: &AgentState, _: f64, _: &mut ChaCha8Rng) -> Result<ActionText> {
        let i = self.next.get();
        self.next.set(i + 1);
        Ok(toy_action(i % TOY_WORDS.len()))
    }
}

pub fn toy_root() -> AgentState {
    AgentState::new(vec![])
}

/// Brute-force edge statistics. Each trajectory is a full action sequence
/// and the number of its leading actions that were tree edges; only those
/// edges are credited. The value for an action prefix is the visit count
/// and the mean discounted return of the trajectories through it.
pub fn brute_force_q(
    trajectories: &[(Vec<usize>, usize)],
    rewards_of: impl Fn(&[usize]) -> Vec<f64>,
    gamma: f64,
) -> BTreeMap<Vec<usize>, (u64, f64)> {
    let mut acc: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
    for (traj, in_tree) in trajectories {
        let rewards = rewards_of(traj);
        for t in 0..*in_tree {
            let mut ret = 0.0;
            let mut discount = 1.0;
            for r in &rewards[t..] {
                ret += discount * r;
                discount *= gamma;
            }
            acc.entry(traj[..=t].to_vec()).or_default().push(ret);
        }
    }
    acc.into_iter()
        .map(|(k, rets)| {
            let n = rets.len() as u64;
            (k, (n, rets.iter().sum::<f64>() / n as f64))
        })
        .collect()
}

pub fn toy_config() -> SearchConfig {
    SearchConfig {
        iterations: 60,
        max_depth: 4,
        candidates: 3,
        exploration: 1.0,
        gamma: 0.9,
        p_expand_all: 0.5,
        path_budget: 5,
        ..SearchConfig::default()
    }
}

/// Run the two-level search while recording every trajectory, then compare
/// each edge with the brute-force mean of the trajectories through it.
/// Returns the number of edges compared and how many disagree (visit count
/// differs or |Q − mean| > 1e-12).
pub fn two_level_matches_oracle(seed: u64) -> (usize, usize) {
    let world = TwoLevel::random(seed);
    let config = toy_config();
    let mut tree = SearchTree::new(toy_root(), world.clone(), config.clone(), ChaCha8Rng::seed_from_u64(seed));
    let mut trajectories = Vec::new();
    for _ in 0..config.iterations {
        tree.expand_root(&UniformToy).unwrap();
        let path = tree.select(tree.root);
        let prefix: Vec<usize> =
            path.iter().map(|&(n, e)| toy_index(&tree.node(n).edges[e].action)).collect();
        let rollouts = tree.iterate(&UniformToy, RewardSource::GroundTruth).unwrap();
        if rollouts.is_empty() {
            trajectories.push((prefix.clone(), prefix.len()));
        }
        for r in rollouts {
            let mut full = prefix.clone();
            full.extend(r.actions.iter().map(toy_index));
            trajectories.push((full, prefix.len()));
        }
    }
    let oracle = brute_force_q(&trajectories, |s| world.rewards_of(s), config.gamma);
    let (mut compared, mut mismatched) = (0, 0);
    for node in &tree.nodes {
        let mut seq = Vec::new();
        let mut cur = node.id;
        while let Some((p, e)) = tree.node(cur).parent {
            seq.push(toy_index(&tree.node(p).edges[e].action));
            cur = p;
        }
        seq.reverse();
        for edge in node.edges.iter().filter(|e| e.visits > 0) {
            let mut key = seq.clone();
            key.push(toy_index(&edge.action));
            let (n, q) = oracle[&key];
            compared += 1;
            mismatched += usize::from(edge.visits != n || (edge.q - q).abs() > 1e-12);
        }
    }
    (compared, mismatched)
}


/// Greedy search (c = 0) on a one-step world where a single action wins.
/// Returns whether the root's argmax-Q edge is the exhaustive optimum.
pub fn bandit_trial(trial: u64) -> bool {
    let winner = (trial % 4) as usize;
    let world = Bandit { winner, chosen: None };
    let config = SearchConfig {
        iterations: 200,
        max_depth: 1,
        candidates: 4,
        exploration: 0.0,
        p_expand_all: 1.0,
        ..SearchConfig::default()
    };
    let proposer = CyclingToy { next: Cell::new((trial / 4) as usize) };
    let mapping = LabelMapping::default();
    let judge = move |s: &AgentState| {
        // The judge sees only the history; replay it in a fresh world.
        let a = ActionText::new(s.history[0].action.clone());
        let w = Bandit { winner, chosen: None }.step_action(&a).0;
        label_to_reward(w.outcome(), &mapping)
    };
    let tree = run_search(
        toy_root(),
        world.clone(),
        &proposer,
        RewardSource::Judge(&judge),
        &config,
        ChaCha8Rng::seed_from_u64(trial),
    )
    .unwrap();
    let root = tree.node(tree.root);
    let best_q = root.edges.iter().map(|e| e.q).fold(f64::NEG_INFINITY, f64::max);
    let chosen = root.edges.iter().position(|e| e.q == best_q).unwrap();
    // Exhaustive optimum: try every candidate in the world directly.
    let optimum = root
        .edges
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            let ra = world.step_action(&a.action).2;
            let rb = world.step_action(&b.action).2;
            ra.partial_cmp(&rb).unwrap().then(j.cmp(i))
        })
        .unwrap()
        .0;
    chosen == optimum && toy_index(&root.edges[chosen].action) == winner
}


pub fn minihouse_tree(seed: u64, config: &SearchConfig) -> SearchTree<WorldState> {
    let policy = Policy::new(PolicyConfig::default());
    let params = policy.init_params(seed);
    let (world, obs) = env::reset(seed, &EnvConfig::default()).unwrap();
    run_search(
        AgentState::new(obs.tokens),
        world,
        &PolicyProposer { policy: &policy, params: &params },
        RewardSource::GroundTruth,
        config,
        ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef),
    )
    .unwrap()
}

/// Full expansions on the path from the root to `id`, counted from the
/// per-node flags alone.
pub fn full_on_path<E>(tree: &SearchTree<E>, id: usize) -> usize {
    let mut count = 0;
    let mut cur = Some(id);
    while let Some(c) = cur {
        count += usize::from(tree.nodes[c].fully_expanded);
        cur = tree.nodes[c].parent.map(|(p, _)| p);
    }
    count
}


/// Largest deviation between the Tree-GRPO gradient and the gradient of
/// the unclipped outputs alone, on a two-output group where every token
/// sits at ρ = e. Output 0 (Â = +1) is on the clipped branch and must
/// contribute nothing; output 1 (Â = −1) keeps d(−J)/dlogπ = ρ / n_tok.
pub fn clipped_gradient_leak(seed: u64) -> f64 {
    let mut f = policy_fixture(seed);
    f.config.beta = 0.0;
    let mut g = f.batch[0].clone();
    g.pr = vec![1.0, 0.0];
    g.actions.truncate(2);
    g.old_logprobs = g
        .actions
        .iter()
        .map(|a| f.policy.logprob(&f.params, &g.state, a).unwrap().0.iter().map(|x| x - 1.0).collect())
        .collect();
    let batch = vec![g];
    let (_, grad, stats) =
        tree_grpo_loss_and_grad(&batch, &f.policy, &f.params, &f.params, &f.config).unwrap();
    assert!(stats.clip_frac > 0.0);
    let g = &batch[0];
    let n_tok = (g.old_logprobs[0].len() + g.old_logprobs[1].len()) as f64;
    let weights: Vec<f64> = f
        .policy
        .logprob(&f.params, &g.state, &g.actions[1])
        .unwrap()
        .0
        .iter()
        .zip(&g.old_logprobs[1])
        .map(|(n, o)| (n - o).exp() / n_tok)
        .collect();
    let expected = f.policy.grad_logprob(&f.params, &g.state, &g.actions[1], &weights).unwrap();
    grad.values.iter().zip(&expected.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}
