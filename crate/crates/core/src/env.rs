//! MiniHouse: a deterministic text household in the style of ALFWorld.
//!
//! The agent walks between receptacles, opens and closes the ones with a
//! door, and moves objects around. Rewards are sparse: `1.0` on the step
//! that first satisfies the task goal, `0.0` otherwise.
//!
//! Actions are token sequences. The parser skips filler words: the command
//! is the first verb token, its argument the first id token of the right
//! kind that follows it. `go` needs a receptacle; the other verbs default
//! to the current receptacle (`open`, `close`), the first visible object
//! (`take`) or the held object (`put`). Anything that does not parse, or
//! parses to an impossible command, yields `nothing happens` and only
//! advances the step counter.
//!
//! The step that exhausts the budget without success ends its observation
//! with `task not complete`, so a reader of the history alone can tell a
//! lost episode from one still in progress.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{
    Token, TokenClass, Verb, Vocabulary, EOS, OBJECTS, OPENABLE_RECEPTACLES, PLAIN_RECEPTACLES,
    ROOMS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub rooms: usize,
    pub receptacles: usize,
    pub openable: usize,
    pub objects: usize,
    pub max_episode_steps: u32,
    /// Share of episodes that draw a two-object task.
    pub put_two_fraction: f64,
    /// Mixed into every episode seed.
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            rooms: 2,
            receptacles: 8,
            openable: 3,
            objects: 6,
            max_episode_steps: 30,
            put_two_fraction: 0.0,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("env.{msg}")));
        if self.rooms < 1 || self.rooms > ROOMS.len() {
            return bad(format!("rooms must be in 1..={}, got {}", ROOMS.len(), self.rooms));
        }
        if self.receptacles < 2 {
            return bad(format!("receptacles must be >= 2, got {}", self.receptacles));
        }
        if self.openable > OPENABLE_RECEPTACLES.len() || self.openable >= self.receptacles {
            return bad(format!(
                "openable must be < receptacles and <= {}, got {}",
                OPENABLE_RECEPTACLES.len(),
                self.openable
            ));
        }
        if self.receptacles - self.openable > PLAIN_RECEPTACLES.len() {
            return bad(format!(
                "at most {} receptacles without a door are available",
                PLAIN_RECEPTACLES.len()
            ));
        }
        if self.objects < 1 || self.objects > OBJECTS.len() {
            return bad(format!("objects must be in 1..={}, got {}", OBJECTS.len(), self.objects));
        }
        if self.max_episode_steps < 1 {
            return bad("max_episode_steps must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.put_two_fraction) {
            return bad("put_two_fraction must be in [0, 1]".into());
        }
        if self.put_two_fraction > 0.0 && self.objects < 2 {
            return bad("put_two_fraction > 0 needs at least 2 objects".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    PutSingle,
    PutTwo,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub target_objects: Vec<Token>,
    pub target_receptacle: Token,
    pub instruction_tokens: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Room {
    pub name: Token,
    pub receptacles: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldState {
    pub rooms: Vec<Room>,
    pub receptacle_contents: BTreeMap<Token, BTreeSet<Token>>,
    /// Only receptacles with a door have an entry.
    pub receptacle_open: BTreeMap<Token, bool>,
    pub agent_at: Token,
    pub holding: Option<Token>,
    pub step_count: u32,
    pub max_episode_steps: u32,
    pub goal_reached: bool,
    pub task: TaskSpec,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub tokens: Vec<Token>,
}

pub const MAX_OBSERVATION_TOKENS: usize = 16;

/// Three-valued task verdict. Order matches the reward model heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OutcomeLabel {
    Success,
    Continue,
    Failure,
}

impl OutcomeLabel {
    pub const ALL: [OutcomeLabel; 3] = [Self::Success, Self::Continue, Self::Failure];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Success => "success",
            Self::Continue => "continue",
            Self::Failure => "failure",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "success" | "s" => Some(Self::Success),
            "continue" | "c" => Some(Self::Continue),
            "failure" | "f" => Some(Self::Failure),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Go(Token),
    Take(Option<Token>),
    Put(Option<Token>),
    Open(Option<Token>),
    Close(Option<Token>),
}

/// Parse an action token sequence. Tokens after `<eos>` are ignored.
pub fn parse_action(tokens: &[Token]) -> Option<Command> {
    let vocab = Vocabulary::get();
    let body: Vec<Token> = tokens
        .iter()
        .copied()
        .take_while(|t| *t != EOS)
        .filter(|t| vocab.contains(*t))
        .collect();
    let pos = body
        .iter()
        .position(|t| matches!(vocab.class(*t), TokenClass::Verb(_)))?;
    let verb = match vocab.class(body[pos]) {
        TokenClass::Verb(v) => v,
        _ => unreachable!(),
    };
    let rest = &body[pos + 1..];
    let first_of = |class: TokenClass| rest.iter().copied().find(|t| vocab.class(*t) == class);
    match verb {
        Verb::Go => first_of(TokenClass::Receptacle).map(Command::Go),
        Verb::Take => Some(Command::Take(first_of(TokenClass::Object))),
        Verb::Put => Some(Command::Put(first_of(TokenClass::Object))),
        Verb::Open => Some(Command::Open(first_of(TokenClass::Receptacle))),
        Verb::Close => Some(Command::Close(first_of(TokenClass::Receptacle))),
    }
}

fn words(ws: &[&str]) -> Vec<Token> {
    let v = Vocabulary::get();
    ws.iter().map(|w| v.tok(w)).collect()
}

/// The exact observation for invalid actions.
pub fn nothing_happens() -> Observation {
    Observation { tokens: words(&["nothing", "happens"]) }
}

/// Generate a fresh episode.
pub fn reset(task_seed: u64, config: &EnvConfig) -> Result<(WorldState, Observation)> {
    config.validate()?;
    let vocab = Vocabulary::get();
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed);

    let mut plain: Vec<Token> = PLAIN_RECEPTACLES.iter().map(|w| vocab.tok(w)).collect();
    let mut doors: Vec<Token> = OPENABLE_RECEPTACLES.iter().map(|w| vocab.tok(w)).collect();
    plain.shuffle(&mut rng);
    doors.shuffle(&mut rng);
    plain.truncate(config.receptacles - config.openable);
    doors.truncate(config.openable);

    let mut all: Vec<Token> = plain.iter().chain(doors.iter()).copied().collect();
    all.shuffle(&mut rng);
    let mut rooms: Vec<Room> = ROOMS[..config.rooms]
        .iter()
        .map(|w| Room { name: vocab.tok(w), receptacles: Vec::new() })
        .collect();
    for (i, r) in all.iter().enumerate() {
        rooms[i % config.rooms].receptacles.push(*r);
    }
    for room in &mut rooms {
        room.receptacles.sort();
    }

    let mut objects: Vec<Token> = OBJECTS.iter().map(|w| vocab.tok(w)).collect();
    objects.shuffle(&mut rng);
    objects.truncate(config.objects);

    let kind = if config.put_two_fraction > 0.0 && rng.gen_bool(config.put_two_fraction) {
        TaskKind::PutTwo
    } else {
        TaskKind::PutSingle
    };
    let start = *plain.choose(&mut rng).expect("at least one plain receptacle");
    let target = loop {
        let r = *all.choose(&mut rng).expect("receptacles");
        if r != start {
            break r;
        }
    };

    let mut contents: BTreeMap<Token, BTreeSet<Token>> =
        all.iter().map(|r| (*r, BTreeSet::new())).collect();
    let first = objects[0];
    contents.get_mut(&start).unwrap().insert(first);
    let (target_objects, rest) = match kind {
        TaskKind::PutSingle => (vec![first], &objects[1..]),
        TaskKind::PutTwo => {
            let second = objects[1];
            let spots: Vec<Token> =
                all.iter().copied().filter(|r| *r != start && *r != target).collect();
            let r = *spots.choose(&mut rng).unwrap_or(&target);
            contents.get_mut(&r).unwrap().insert(second);
            (vec![first, second], &objects[2..])
        }
    };
    let elsewhere: Vec<Token> = all.iter().copied().filter(|r| *r != start).collect();
    for obj in rest {
        let r = *elsewhere.choose(&mut rng).unwrap();
        contents.get_mut(&r).unwrap().insert(*obj);
    }

    let mut instruction = vec![vocab.tok("put"), target_objects[0]];
    if let Some(second) = target_objects.get(1) {
        instruction.push(vocab.tok("and"));
        instruction.push(*second);
    }
    instruction.push(vocab.tok("in"));
    instruction.push(target);

    let state = WorldState {
        rooms,
        receptacle_contents: contents,
        receptacle_open: doors.iter().map(|r| (*r, false)).collect(),
        agent_at: start,
        holding: None,
        step_count: 0,
        max_episode_steps: config.max_episode_steps,
        goal_reached: false,
        task: TaskSpec {
            kind,
            target_objects,
            target_receptacle: target,
            instruction_tokens: instruction,
        },
        rng_seed: task_seed,
    };
    let obs = state.initial_observation();
    Ok((state, obs))
}

/// Apply one action. Returns the successor, its observation, the sparse
/// reward and the episode-done flag.
pub fn step(state: &WorldState, action: &[Token]) -> (WorldState, Observation, f64, bool) {
    let mut next = state.clone();
    if state.is_done() {
        return (next, nothing_happens(), 0.0, true);
    }
    next.step_count += 1;
    let obs = parse_action(action).and_then(|cmd| next.apply(cmd));
    let (obs, reward) = match obs {
        Some(mut obs) => {
            let reward = if !next.goal_reached && next.goal_satisfied() {
                next.goal_reached = true;
                obs.tokens.extend(words(&["task", "complete"]));
                1.0
            } else {
                0.0
            };
            (obs, reward)
        }
        None => (nothing_happens(), 0.0),
    };
    let done = next.is_done();
    let mut obs = obs;
    if done && !next.goal_reached {
        // Budget exhausted: the history itself must reveal the verdict.
        obs.tokens.truncate(MAX_OBSERVATION_TOKENS - 3);
        obs.tokens.extend(words(&["task", "not", "complete"]));
    }
    (next, obs, reward, done)
}

/// Simulator verdict for the current state.
pub fn gt_outcome(state: &WorldState) -> OutcomeLabel {
    if state.goal_satisfied() {
        OutcomeLabel::Success
    } else if state.step_count >= state.max_episode_steps {
        OutcomeLabel::Failure
    } else {
        OutcomeLabel::Continue
    }
}

/// Every canonical action text (without `<eos>`) whose step is not
/// `nothing happens`.
pub fn enumerate_valid_actions(state: &WorldState) -> Vec<Vec<Token>> {
    canonical_actions(state)
        .into_iter()
        .filter(|a| parse_action(a).is_some_and(|c| state.clone().apply(c).is_some()))
        .filter(|_| !state.is_done())
        .collect()
}

/// All grammatical action texts over the ids of this layout: each verb
/// alone and each verb followed by one id of the kind it takes.
pub fn canonical_actions(state: &WorldState) -> Vec<Vec<Token>> {
    let vocab = Vocabulary::get();
    let receptacles: Vec<Token> = state.receptacle_contents.keys().copied().collect();
    let objects = state.all_objects();
    let mut out = Vec::new();
    for verb in [Verb::Go, Verb::Take, Verb::Put, Verb::Open, Verb::Close] {
        let v = vocab.verb_token(verb);
        if verb != Verb::Go {
            out.push(vec![v]);
        }
        let args = match verb {
            Verb::Take | Verb::Put => &objects,
            _ => &receptacles,
        };
        for a in args {
            out.push(vec![v, *a]);
        }
    }
    out
}

/// Next action of a shortest plan, or `None` once the goal holds.
pub fn oracle_action(state: &WorldState) -> Option<Vec<Token>> {
    if state.goal_satisfied() {
        return None;
    }
    let vocab = Vocabulary::get();
    let target = state.task.target_receptacle;
    let pending: Vec<Token> = state
        .task
        .target_objects
        .iter()
        .copied()
        .filter(|o| !state.receptacle_contents[&target].contains(o))
        .collect();
    let here = state.agent_at;
    let closed_here = state.receptacle_open.get(&here) == Some(&false);
    match state.holding {
        Some(h) if pending.contains(&h) => {
            if here != target {
                Some(vec![vocab.tok("go"), target])
            } else if closed_here {
                Some(vec![vocab.tok("open"), target])
            } else {
                Some(vec![vocab.tok("put"), h])
            }
        }
        Some(h) => {
            if closed_here {
                Some(vec![vocab.tok("open"), here])
            } else {
                Some(vec![vocab.tok("put"), h])
            }
        }
        None => {
            let obj = *pending.first()?;
            let loc = state.location_of(obj)?;
            if here != loc {
                Some(vec![vocab.tok("go"), loc])
            } else if closed_here {
                Some(vec![vocab.tok("open"), loc])
            } else {
                Some(vec![vocab.tok("take"), obj])
            }
        }
    }
}

impl WorldState {
    pub fn is_done(&self) -> bool {
        self.goal_reached || self.step_count >= self.max_episode_steps
    }

    pub fn goal_satisfied(&self) -> bool {
        let inside = &self.receptacle_contents[&self.task.target_receptacle];
        self.task.target_objects.iter().all(|o| inside.contains(o))
    }

    pub fn all_objects(&self) -> Vec<Token> {
        let mut objs: Vec<Token> =
            self.receptacle_contents.values().flat_map(|s| s.iter().copied()).collect();
        objs.extend(self.holding);
        objs.sort();
        objs
    }

    pub fn object_count(&self) -> usize {
        self.receptacle_contents.values().map(|s| s.len()).sum::<usize>()
            + usize::from(self.holding.is_some())
    }

    pub fn location_of(&self, obj: Token) -> Option<Token> {
        self.receptacle_contents
            .iter()
            .find(|(_, s)| s.contains(&obj))
            .map(|(r, _)| *r)
    }

    pub fn room_of(&self, receptacle: Token) -> Option<Token> {
        self.rooms
            .iter()
            .find(|room| room.receptacles.contains(&receptacle))
            .map(|room| room.name)
    }

    fn accessible(&self, r: Token) -> bool {
        self.receptacle_open.get(&r).copied().unwrap_or(true)
    }

    fn visible_here(&self) -> Vec<Token> {
        if self.accessible(self.agent_at) {
            self.receptacle_contents[&self.agent_at].iter().copied().collect()
        } else {
            Vec::new()
        }
    }

    fn initial_observation(&self) -> Observation {
        let mut tokens = words(&["task"]);
        tokens.extend(&self.task.instruction_tokens);
        tokens.extend(words(&["you", "see"]));
        tokens.extend(self.visible_here());
        tokens.truncate(MAX_OBSERVATION_TOKENS);
        Observation { tokens }
    }

    fn seen_list(&self, tokens: &mut Vec<Token>) {
        let seen = self.visible_here();
        tokens.extend(words(&["you", "see"]));
        if seen.is_empty() {
            tokens.extend(words(&["nothing"]));
        } else {
            tokens.extend(seen);
        }
    }

    /// Execute a parsed command in place; `None` means it was impossible.
    fn apply(&mut self, cmd: Command) -> Option<Observation> {
        let here = self.agent_at;
        let mut tokens = Vec::new();
        match cmd {
            Command::Go(r) => {
                if r == here || !self.receptacle_contents.contains_key(&r) {
                    return None;
                }
                self.agent_at = r;
                tokens.extend(words(&["you", "arrive", "at"]));
                tokens.push(r);
                if let Some(room) = self.room_of(r) {
                    tokens.push(Vocabulary::get().tok("in"));
                    tokens.push(room);
                }
                if self.accessible(r) {
                    self.seen_list(&mut tokens);
                } else {
                    tokens.push(r);
                    tokens.extend(words(&["is", "closed"]));
                }
            }
            Command::Take(obj) => {
                if self.holding.is_some() {
                    return None;
                }
                let seen = self.visible_here();
                let obj = match obj {
                    Some(o) if seen.contains(&o) => o,
                    Some(_) => return None,
                    None => *seen.first()?,
                };
                self.receptacle_contents.get_mut(&here)?.remove(&obj);
                self.holding = Some(obj);
                tokens.extend(words(&["you", "pick", "up"]));
                tokens.push(obj);
            }
            Command::Put(obj) => {
                let held = self.holding?;
                if obj.is_some_and(|o| o != held) || !self.accessible(here) {
                    return None;
                }
                self.receptacle_contents.get_mut(&here)?.insert(held);
                self.holding = None;
                tokens.extend(words(&["you", "put"]));
                tokens.push(held);
                tokens.push(Vocabulary::get().tok("in"));
                tokens.push(here);
            }
            Command::Open(r) => {
                if r.is_some_and(|r| r != here) || self.receptacle_open.get(&here) != Some(&false) {
                    return None;
                }
                self.receptacle_open.insert(here, true);
                tokens.extend(words(&["you", "open"]));
                tokens.push(here);
                self.seen_list(&mut tokens);
            }
            Command::Close(r) => {
                if r.is_some_and(|r| r != here) || self.receptacle_open.get(&here) != Some(&true) {
                    return None;
                }
                self.receptacle_open.insert(here, false);
                tokens.extend(words(&["you", "close"]));
                tokens.push(here);
            }
        }
        // "task complete" may still be appended.
        tokens.truncate(MAX_OBSERVATION_TOKENS - 2);
        Some(Observation { tokens })
    }
}

/// One line of the trajectory replay log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub t: u32,
    pub action_tokens: Vec<String>,
    pub observation_tokens: Vec<String>,
    pub reward: f64,
    pub done: bool,
}

impl ReplayRecord {
    pub fn new(t: u32, action: &[Token], obs: &Observation, reward: f64, done: bool) -> Self {
        let v = Vocabulary::get();
        Self {
            t,
            action_tokens: action.iter().map(|t| v.word(*t).to_string()).collect(),
            observation_tokens: obs.tokens.iter().map(|t| v.word(*t).to_string()).collect(),
            reward,
            done,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(w: &str) -> Token {
        Vocabulary::get().tok(w)
    }

    fn act(text: &str) -> Vec<Token> {
        Vocabulary::get().encode(text).unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = EnvConfig::default();
        let a = reset(7, &cfg).unwrap();
        let b = reset(7, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.step_count, 0);
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = EnvConfig::default();
        let (a, _) = reset(7, &cfg).unwrap();
        let (b, _) = reset(8, &cfg).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn initial_observation_contains_instruction() {
        let (s, obs) = reset(7, &EnvConfig::default()).unwrap();
        for t in &s.task.instruction_tokens {
            assert!(obs.tokens.contains(t));
        }
        assert!(obs.tokens.len() <= MAX_OBSERVATION_TOKENS);
    }

    #[test]
    fn rejects_bad_sizes() {
        let cfg = EnvConfig { receptacles: 1, openable: 0, ..Default::default() };
        assert!(matches!(reset(1, &cfg), Err(Error::Config(_))));
        let cfg = EnvConfig { objects: 0, ..Default::default() };
        assert!(reset(1, &cfg).is_err());
        let cfg = EnvConfig { rooms: 0, ..Default::default() };
        assert!(reset(1, &cfg).is_err());
    }

    #[test]
    fn layout_counts() {
        let cfg = EnvConfig::default();
        for seed in 0..50 {
            let (s, _) = reset(seed, &cfg).unwrap();
            assert_eq!(s.receptacle_contents.len(), 8);
            assert_eq!(s.receptacle_open.len(), 3);
            assert_eq!(s.object_count(), 6);
            assert_eq!(s.rooms.len(), 2);
            assert_ne!(s.agent_at, s.task.target_receptacle);
            assert_eq!(s.location_of(s.task.target_objects[0]), Some(s.agent_at));
        }
    }

    fn find_state(pred: impl Fn(&WorldState) -> bool) -> WorldState {
        let cfg = EnvConfig::default();
        (0..1000)
            .map(|seed| reset(seed, &cfg).unwrap().0)
            .find(|s| pred(s))
            .expect("no layout matches")
    }

    #[test]
    fn open_closed_drawer() {
        let s = find_state(|s| s.receptacle_open.contains_key(&tok("drawer")));
        let (s, _, _, _) = step(&s, &act("go drawer"));
        let (s2, obs, r, done) = step(&s, &act("open drawer"));
        assert_eq!(&obs.tokens[..3], &act("you open drawer")[..]);
        assert_eq!(r, 0.0);
        assert!(!done);
        assert!(s2.receptacle_open[&tok("drawer")]);
    }

    #[test]
    fn take_elsewhere_is_nothing_happens() {
        let s = find_state(|_| true);
        let obj = s.task.target_objects[0];
        let other = *s.receptacle_contents.keys().find(|r| **r != s.agent_at).unwrap();
        let (moved, _, _, _) = step(&s, &[tok("go"), other]);
        if moved.location_of(obj) != Some(moved.agent_at) {
            let (after, obs, r, _) = step(&moved, &[tok("take"), obj]);
            assert_eq!(obs, nothing_happens());
            assert_eq!(r, 0.0);
            let mut expect = moved.clone();
            expect.step_count += 1;
            assert_eq!(after, expect);
        }
    }

    #[test]
    fn oracle_plan_completes_task() {
        let cfg = EnvConfig::default();
        for seed in 0..100 {
            let (mut s, _) = reset(seed, &cfg).unwrap();
            let mut total = 0.0;
            let mut last = None;
            while let Some(a) = oracle_action(&s) {
                let (n, obs, r, done) = step(&s, &a);
                assert_ne!(obs, nothing_happens());
                total += r;
                s = n;
                last = Some((r, done));
                if done {
                    break;
                }
            }
            assert_eq!(total, 1.0);
            assert_eq!(last, Some((1.0, true)));
            assert_eq!(gt_outcome(&s), OutcomeLabel::Success);
            assert!(s.step_count <= 5);
        }
    }

    #[test]
    fn put_two_oracle() {
        let cfg = EnvConfig { put_two_fraction: 1.0, ..Default::default() };
        for seed in 0..50 {
            let (mut s, _) = reset(seed, &cfg).unwrap();
            assert_eq!(s.task.kind, TaskKind::PutTwo);
            while let Some(a) = oracle_action(&s) {
                let (n, _, _, done) = step(&s, &a);
                s = n;
                if done {
                    break;
                }
            }
            assert_eq!(gt_outcome(&s), OutcomeLabel::Success);
        }
    }

    #[test]
    fn outcome_labels() {
        let (mut s, _) = reset(3, &EnvConfig::default()).unwrap();
        assert_eq!(gt_outcome(&s), OutcomeLabel::Continue);
        let junk = act("the the");
        for t in 1..=30 {
            let (n, obs, _, _) = step(&s, &junk);
            if t < 30 {
                assert_eq!(obs, nothing_happens());
            } else {
                assert_eq!(crate::vocab::Words(&obs.tokens).to_string(), "nothing happens task not complete");
            }
            s = n;
        }
        assert_eq!(s.step_count, 30);
        assert_eq!(gt_outcome(&s), OutcomeLabel::Failure);
        let (n, _, r, done) = step(&s, &junk);
        assert_eq!((n.step_count, r, done), (30, 0.0, true));
    }

    #[test]
    fn parser_skips_filler() {
        assert_eq!(parse_action(&act("the go to fridge")), Some(Command::Go(tok("fridge"))));
        assert_eq!(parse_action(&act("go apple")), None);
        assert_eq!(parse_action(&act("take")), Some(Command::Take(None)));
        assert_eq!(
            parse_action(&[tok("put"), EOS, tok("apple")]),
            Some(Command::Put(None))
        );
        assert_eq!(parse_action(&act("nothing")), None);
    }

    #[test]
    fn valid_action_listing_is_exact() {
        let cfg = EnvConfig { put_two_fraction: 0.5, ..Default::default() };
        for seed in 0..40 {
            let (mut s, _) = reset(seed, &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..12 {
                let valid = enumerate_valid_actions(&s);
                let set: BTreeSet<_> = valid.iter().cloned().collect();
                assert_eq!(set.len(), valid.len(), "duplicates");
                for a in canonical_actions(&s) {
                    let (_, obs, _, _) = step(&s, &a);
                    assert_eq!(set.contains(&a), obs != nothing_happens(), "{:?}", a);
                }
                if valid.is_empty() {
                    break;
                }
                let a = valid.choose(&mut rng).unwrap();
                s = step(&s, a).0;
            }
        }
    }
}
