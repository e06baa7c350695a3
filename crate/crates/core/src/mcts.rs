//! Monte Carlo tree search over episodes.
//!
//! Each iteration runs selection (UCT), expansion (candidate actions sampled
//! from the policy), a rollout to termination, and a backup of discounted
//! returns. Two pruning rules bound the tree: a node draws its full group of
//! `candidates` with probability `p_expand_all` (otherwise one), and no
//! root-to-leaf path holds more than `path_budget` full expansions.
//!
//! The edge Q-values of a finished tree are the process rewards used for
//! group-relative training.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, OutcomeLabel, WorldState};
use crate::error::{Error, Result};
use crate::optim::{ExperienceGroup, GroupSource};
use crate::params::ParamVector;
use crate::policy::{ActionText, AgentState, Policy};
use crate::vocab::{Token, Vocabulary};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub iterations: usize,
    pub max_depth: usize,
    /// Candidates per full expansion (`G`).
    pub candidates: usize,
    pub exploration: f64,
    pub gamma: f64,
    pub p_expand_all: f64,
    /// Maximum number of full expansions on one root-to-leaf path (`L`).
    pub path_budget: usize,
    pub expansion_temperature: f64,
    pub rollout_temperature: f64,
    pub rollouts_per_expansion: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            iterations: 30,
            max_depth: 30,
            candidates: 5,
            exploration: std::f64::consts::SQRT_2,
            gamma: 0.99,
            p_expand_all: 0.5,
            path_budget: 5,
            expansion_temperature: 1.0,
            rollout_temperature: 1.0,
            rollouts_per_expansion: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("search.{m}")));
        if self.iterations < 1 {
            return bad("iterations must be >= 1");
        }
        if self.max_depth < 1 {
            return bad("max_depth must be >= 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.p_expand_all) {
            return bad("p_expand_all must be in [0, 1]");
        }
        if self.path_budget < 1 {
            return bad("path_budget must be >= 1");
        }
        if self.candidates < 2 {
            return bad("candidates must be >= 2");
        }
        if self.rollouts_per_expansion < 1 {
            return bad("rollouts_per_expansion must be >= 1");
        }
        if self.exploration < 0.0 || self.expansion_temperature < 0.0 || self.rollout_temperature < 0.0 {
            return bad("exploration and temperatures must be >= 0");
        }
        Ok(())
    }
}

/// Environment view needed by the search.
pub trait SearchEnv: Clone {
    fn step_action(&self, action: &ActionText) -> (Self, Vec<Token>, f64, bool);
    fn outcome(&self) -> OutcomeLabel;
    fn is_done(&self) -> bool;
}

impl SearchEnv for WorldState {
    fn step_action(&self, action: &ActionText) -> (Self, Vec<Token>, f64, bool) {
        let (next, obs, r, done) = env::step(self, &action.tokens);
        (next, obs.tokens, r, done)
    }

    fn outcome(&self) -> OutcomeLabel {
        env::gt_outcome(self)
    }

    fn is_done(&self) -> bool {
        WorldState::is_done(self)
    }
}

/// Source of candidate and rollout actions.
pub trait Proposer {
    fn propose(&self, state: &AgentState, temperature: f64, rng: &mut ChaCha8Rng) -> Result<ActionText>;
}

/// Proposals sampled from a policy snapshot.
#[derive(Debug, Clone, Copy)]
pub struct PolicyProposer<'a> {
    pub policy: &'a Policy,
    pub params: &'a ParamVector,
}

impl Proposer for PolicyProposer<'_> {
    fn propose(&self, state: &AgentState, temperature: f64, rng: &mut ChaCha8Rng) -> Result<ActionText> {
        Ok(self.policy.sample_action(self.params, state, temperature, rng)?.0)
    }
}

/// Where the scalar rewards in backup come from.
#[derive(Clone, Copy)]
pub enum RewardSource<'a> {
    /// Environment rewards, step by step.
    GroundTruth,
    /// A judge scores the final history of every trajectory; every other
    /// step contributes 0.
    Judge(&'a (dyn Fn(&AgentState) -> f64 + Sync)),
}

impl std::fmt::Debug for RewardSource<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::GroundTruth => f.write_str("GroundTruth"),
            Self::Judge(_) => f.write_str("Judge"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeStat {
    pub action: ActionText,
    pub visits: u64,
    pub return_sum: f64,
    pub q: f64,
    pub child: Option<NodeId>,
}

impl EdgeStat {
    fn new(action: ActionText) -> Self {
        Self { action, visits: 0, return_sum: 0.0, q: 0.0, child: None }
    }
}

#[derive(Debug, Clone)]
pub struct SearchNode<E> {
    pub id: NodeId,
    /// Parent node and the index of the inbound edge.
    pub parent: Option<(NodeId, usize)>,
    pub agent_state: AgentState,
    pub world: E,
    pub edges: Vec<EdgeStat>,
    pub fully_expanded: bool,
    pub terminal: Option<OutcomeLabel>,
    pub depth: usize,
    /// Full expansions on the path from the root to here, inclusive.
    pub full_on_path: usize,
    /// Reward credited to the inbound edge.
    pub arrival_reward: f64,
    /// Times this node was reached by a selection path.
    pub visits: u64,
}

#[derive(Debug, Clone)]
pub struct SearchTree<E> {
    pub nodes: Vec<SearchNode<E>>,
    pub root: NodeId,
    pub config: SearchConfig,
    pub rng: ChaCha8Rng,
}

/// A simulated continuation from a leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub actions: Vec<ActionText>,
    pub rewards: Vec<f64>,
    pub label: OutcomeLabel,
    pub final_state: AgentState,
}

/// `Q + c·sqrt(ln(parent_visits) / (1 + N))`.
pub fn uct_score(edge: &EdgeStat, parent_visits: u64, c: f64) -> f64 {
    let parent = parent_visits.max(1) as f64;
    edge.q + c * (parent.ln() / (1.0 + edge.visits as f64)).sqrt()
}

/// `Σ_k γ^k · r_k`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut g = 0.0;
    let mut w = 1.0;
    for r in rewards {
        g += w * r;
        w *= gamma;
    }
    g
}

impl<E: SearchEnv> SearchTree<E> {
    /// Tree holding only an unexpanded root.
    pub fn new(agent_state: AgentState, world: E, config: SearchConfig, rng: ChaCha8Rng) -> Self {
        let terminal = world.is_done().then(|| world.outcome());
        let root = SearchNode {
            id: 0,
            parent: None,
            agent_state,
            world,
            edges: Vec::new(),
            fully_expanded: false,
            terminal,
            depth: 0,
            full_on_path: 0,
            arrival_reward: 0.0,
            visits: 0,
        };
        Self { nodes: vec![root], root: 0, config, rng }
    }

    pub fn node(&self, id: NodeId) -> &SearchNode<E> {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Descend by maximum UCT (ties to the lowest edge index) until an edge
    /// without a child or a terminal child is chosen.
    pub fn select(&self, from: NodeId) -> Vec<(NodeId, usize)> {
        let c = self.config.exploration;
        let mut path = Vec::new();
        let mut id = from;
        loop {
            let node = &self.nodes[id];
            if node.terminal.is_some() || node.edges.is_empty() {
                break;
            }
            let parent_visits = node.visits.max(1);
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, e) in node.edges.iter().enumerate() {
                let s = uct_score(e, parent_visits, c);
                if s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            path.push((id, best));
            match node.edges[best].child {
                Some(child) if self.nodes[child].terminal.is_none() => id = child,
                _ => break,
            }
        }
        path
    }

    /// Draw the candidate edges of a non-terminal node.
    fn add_candidates<P: Proposer>(&mut self, id: NodeId, proposer: &P) -> Result<()> {
        let cfg = &self.config;
        let parent_full = self.nodes[id]
            .parent
            .map(|(p, _)| self.nodes[p].full_on_path)
            .unwrap_or(0);
        let coin = self.rng.gen_bool(cfg.p_expand_all);
        let full = coin && parent_full < cfg.path_budget;
        let (want, attempts) = if full { (cfg.candidates, 3 * cfg.candidates) } else { (1, 1) };
        let temperature = cfg.expansion_temperature;
        let state = self.nodes[id].agent_state.clone();
        let mut found: Vec<ActionText> = Vec::with_capacity(want);
        for _ in 0..attempts {
            let a = proposer.propose(&state, temperature, &mut self.rng)?;
            if !found.contains(&a) {
                found.push(a);
            }
            if found.len() == want {
                break;
            }
        }
        let node = &mut self.nodes[id];
        node.edges = found.into_iter().map(EdgeStat::new).collect();
        node.fully_expanded = full;
        node.full_on_path = parent_full + usize::from(full);
        Ok(())
    }

    /// Create the root's candidates.
    pub fn expand_root<P: Proposer>(&mut self, proposer: &P) -> Result<()> {
        if self.nodes[self.root].terminal.is_none() && self.nodes[self.root].edges.is_empty() {
            self.add_candidates(self.root, proposer)?;
        }
        Ok(())
    }

    /// Execute the last edge of `path` and attach the resulting node.
    pub fn expand<P: Proposer>(
        &mut self,
        path: &[(NodeId, usize)],
        proposer: &P,
        reward: RewardSource<'_>,
    ) -> Result<NodeId> {
        let &(parent, edge) = path
            .last()
            .ok_or_else(|| Error::Input("cannot expand an empty path".into()))?;
        if self.nodes[parent].edges[edge].child.is_some() {
            return Err(Error::Input(format!("edge {edge} of node {parent} already has a child")));
        }
        let action = self.nodes[parent].edges[edge].action.clone();
        let (world, obs, env_reward, done) = self.nodes[parent].world.step_action(&action);
        let agent_state = self.nodes[parent].agent_state.extended(&action, obs);
        let depth = self.nodes[parent].depth + 1;
        let terminal = (done || depth >= self.config.max_depth).then(|| world.outcome());
        let arrival_reward = match reward {
            RewardSource::GroundTruth => env_reward,
            RewardSource::Judge(judge) if terminal.is_some() => judge(&agent_state),
            RewardSource::Judge(_) => 0.0,
        };
        let id = self.nodes.len();
        self.nodes.push(SearchNode {
            id,
            parent: Some((parent, edge)),
            agent_state,
            world,
            edges: Vec::new(),
            fully_expanded: false,
            terminal,
            depth,
            full_on_path: self.nodes[parent].full_on_path,
            arrival_reward,
            visits: 0,
        });
        self.nodes[parent].edges[edge].child = Some(id);
        if terminal.is_none() {
            self.add_candidates(id, proposer)?;
        }
        Ok(id)
    }

    /// Roll out from `id` until the episode ends or `max_depth` is reached.
    pub fn simulate<P: Proposer>(
        &mut self,
        id: NodeId,
        proposer: &P,
        reward: RewardSource<'_>,
    ) -> Result<Rollout> {
        let node = &self.nodes[id];
        let mut world = node.world.clone();
        let mut state = node.agent_state.clone();
        let mut depth = node.depth;
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let temperature = self.config.rollout_temperature;
        let mut done = node.terminal.is_some() || world.is_done();
        while !done && depth < self.config.max_depth {
            let a = proposer.propose(&state, temperature, &mut self.rng)?;
            let (w, obs, r, d) = world.step_action(&a);
            state.push(&a, obs);
            world = w;
            depth += 1;
            done = d;
            rewards.push(match reward {
                RewardSource::GroundTruth => r,
                RewardSource::Judge(_) => 0.0,
            });
            actions.push(a);
        }
        if let (RewardSource::Judge(judge), Some(last)) = (reward, rewards.last_mut()) {
            *last = judge(&state);
        }
        Ok(Rollout { actions, rewards, label: world.outcome(), final_state: state })
    }

    /// Credit `rewards` (one per step, starting with the first edge of
    /// `path`) to every edge on the path.
    pub fn backup(&mut self, path: &[(NodeId, usize)], rewards: &[f64]) {
        let gamma = self.config.gamma;
        for (t, &(id, edge)) in path.iter().enumerate() {
            let ret = discounted_return(rewards.get(t..).unwrap_or(&[]), gamma);
            let node = &mut self.nodes[id];
            node.visits += 1;
            let e = &mut node.edges[edge];
            e.visits += 1;
            e.return_sum += ret;
            e.q = e.return_sum / e.visits as f64;
        }
    }

    /// Rewards credited to each edge of `path` by the nodes it reaches.
    pub fn path_rewards(&self, path: &[(NodeId, usize)]) -> Vec<f64> {
        path.iter()
            .map(|&(id, e)| {
                self.nodes[id].edges[e]
                    .child
                    .map(|c| self.nodes[c].arrival_reward)
                    .unwrap_or(0.0)
            })
            .collect()
    }

    /// One select → expand → simulate → backup cycle. Returns the rollouts
    /// it ran.
    pub fn iterate<P: Proposer>(&mut self, proposer: &P, reward: RewardSource<'_>) -> Result<Vec<Rollout>> {
        self.expand_root(proposer)?;
        let path = self.select(self.root);
        let Some(&(last, edge)) = path.last() else {
            return Ok(Vec::new());
        };
        let leaf = match self.nodes[last].edges[edge].child {
            Some(child) => child,
            None => self.expand(&path, proposer, reward)?,
        };
        let prefix = self.path_rewards(&path);
        let mut rollouts = Vec::new();
        if self.nodes[leaf].terminal.is_some() {
            self.backup(&path, &prefix);
        } else {
            for _ in 0..self.config.rollouts_per_expansion {
                let r = self.simulate(leaf, proposer, reward)?;
                let mut rewards = prefix.clone();
                rewards.extend(&r.rewards);
                self.backup(&path, &rewards);
                rollouts.push(r);
            }
        }
        Ok(rollouts)
    }

    /// Non-terminal nodes whose visited edges form a group of at least
    /// `min_group_size`.
    pub fn groups(&self, min_group_size: usize) -> Vec<(NodeId, Vec<usize>)> {
        self.nodes
            .iter()
            .filter(|n| n.terminal.is_none())
            .filter_map(|n| {
                let visited: Vec<usize> =
                    (0..n.edges.len()).filter(|i| n.edges[*i].visits >= 1).collect();
                (visited.len() >= min_group_size.max(2)).then_some((n.id, visited))
            })
            .collect()
    }

    /// Structural summary for dumps and determinism checks.
    pub fn dump_records(&self) -> Vec<NodeRecord> {
        let vocab = Vocabulary::get();
        self.nodes
            .iter()
            .map(|n| NodeRecord {
                id: n.id,
                parent: n.parent.map(|(p, _)| p),
                depth: n.depth,
                action_tokens: n
                    .parent
                    .map(|(p, e)| {
                        self.nodes[p].edges[e]
                            .action
                            .tokens
                            .iter()
                            .map(|t| vocab.word(*t).to_string())
                            .collect()
                    })
                    .unwrap_or_default(),
                fully_expanded: n.fully_expanded,
                terminal: n.terminal,
                edges: n
                    .edges
                    .iter()
                    .map(|e| EdgeRecord {
                        action: e.action.text(),
                        n: e.visits,
                        q: e.q,
                        r_sum: e.return_sum,
                        child: e.child,
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for rec in self.dump_records() {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io("tree dump", e))?;
        }
        Ok(())
    }
}

/// Run `config.iterations` search cycles from the given root.
pub fn run_search<E: SearchEnv, P: Proposer>(
    root_state: AgentState,
    world: E,
    proposer: &P,
    reward: RewardSource<'_>,
    config: &SearchConfig,
    rng: ChaCha8Rng,
) -> Result<SearchTree<E>> {
    config.validate()?;
    let mut tree = SearchTree::new(root_state, world, config.clone(), rng);
    for _ in 0..config.iterations {
        tree.iterate(proposer, reward)?;
    }
    Ok(tree)
}

/// Groups of visited sibling edges with their Q-values as process rewards.
/// Old-policy log-probs are scored under the collecting snapshot. Groups
/// with zero spread are kept; training filters them.
pub fn extract_experience<E: SearchEnv>(
    tree: &SearchTree<E>,
    min_group_size: usize,
    policy: &Policy,
    params: &ParamVector,
) -> Result<Vec<ExperienceGroup>> {
    tree.groups(min_group_size)
        .into_iter()
        .map(|(id, edges)| {
            let node = tree.node(id);
            let actions: Vec<ActionText> =
                edges.iter().map(|&e| node.edges[e].action.clone()).collect();
            let old_logprobs = actions
                .iter()
                .map(|a| Ok(policy.logprob(params, &node.agent_state, a)?.0))
                .collect::<Result<_>>()?;
            Ok(ExperienceGroup {
                state: node.agent_state.clone(),
                pr: edges.iter().map(|&e| node.edges[e].q).collect(),
                actions,
                old_logprobs,
                source: GroupSource::PolicyTree,
            })
        })
        .collect()
}

/// One line of the tree dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub action_tokens: Vec<String>,
    pub fully_expanded: bool,
    pub terminal: Option<OutcomeLabel>,
    pub edges: Vec<EdgeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub action: String,
    pub n: u64,
    pub q: f64,
    pub r_sum: f64,
    pub child: Option<NodeId>,
}
