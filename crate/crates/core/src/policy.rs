//! Autoregressive action policy over the shared vocabulary.
//!
//! The context is a bag of the last `window` tokens of the interaction
//! history (task observation, then the most recent action/observation
//! pairs, then the partial action), joined with `<sep>`. Its mean embedding
//! feeds a one-hidden-layer tanh network that scores the next token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{self, argmax, log_softmax, Dims, ParamVector};
use crate::vocab::{Token, Vocabulary, EOS, SEP};

/// One executed step: the action body (no `<eos>`) and what came back.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    pub action: Vec<Token>,
    pub observation: Vec<Token>,
}

/// Full interaction history `s_t`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentState {
    pub initial: Vec<Token>,
    pub history: Vec<Turn>,
}

impl AgentState {
    pub fn new(initial: Vec<Token>) -> Self {
        Self { initial, history: Vec::new() }
    }

    /// `s_{t+1} = {s_t, (a_t, o_t)}`.
    pub fn extended(&self, action: &ActionText, observation: Vec<Token>) -> Self {
        let mut next = self.clone();
        next.history.push(Turn { action: action.body().to_vec(), observation });
        next
    }

    /// In-place form of [`AgentState::extended`].
    pub fn push(&mut self, action: &ActionText, observation: Vec<Token>) {
        self.history.push(Turn { action: action.body().to_vec(), observation });
    }

    pub fn depth(&self) -> usize {
        self.history.len()
    }
}

/// Generated action tokens, always terminated by `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionText {
    pub tokens: Vec<Token>,
}

impl ActionText {
    /// Appends `<eos>` if missing.
    pub fn new(mut tokens: Vec<Token>) -> Self {
        if tokens.last() != Some(&EOS) {
            tokens.push(EOS);
        }
        Self { tokens }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self::new(Vocabulary::get().encode(text)?))
    }

    /// Tokens before `<eos>`.
    pub fn body(&self) -> &[Token] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        Vocabulary::get().decode(&self.tokens)
    }
}

/// Per-token `log π(token_k | s, prefix_<k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs(pub Vec<f64>);

impl TokenLogProbs {
    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Architecture of the policy; parameters are passed in separately so that
/// any snapshot can be scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub window: usize,
    pub max_action_tokens: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { embed_dim: 16, hidden_dim: 32, window: 32, max_action_tokens: 8 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("policy dims must be >= 1".into()));
        }
        if self.max_action_tokens == 0 {
            return Err(Error::Config("policy.max_action_tokens must be >= 1".into()));
        }
        if self.window < 2 * self.max_action_tokens {
            return Err(Error::Config(format!(
                "policy.window must be >= {}",
                2 * self.max_action_tokens
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        let v = Vocabulary::get().len();
        Dims { vocab: v, embed: self.embed_dim, hidden: self.hidden_dim, output: v }
    }

    pub fn init_params(&self, seed: u64) -> ParamVector {
        ParamVector::init(seed, self.dims())
    }
}

/// Context tokens the encoder sees: the whole initial observation, the
/// most recent history that fits, and the current prefix.
pub fn context_tokens(state: &AgentState, prefix: &[Token], window: usize) -> Vec<Token> {
    assemble_context(&state.initial, &flatten_history(state), prefix, window)
}

/// History segments joined with `<sep>`, empty segments skipped.
pub fn flatten_history(state: &AgentState) -> Vec<Token> {
    let mut history = Vec::new();
    for turn in &state.history {
        for seg in [&turn.action, &turn.observation] {
            if seg.is_empty() {
                continue;
            }
            if !history.is_empty() {
                history.push(SEP);
            }
            history.extend_from_slice(seg);
        }
    }
    history
}

/// [`context_tokens`] over a pre-flattened history.
pub fn assemble_context(
    initial: &[Token],
    history: &[Token],
    prefix: &[Token],
    window: usize,
) -> Vec<Token> {
    let tail_len = if prefix.is_empty() { 0 } else { prefix.len() + 1 };
    let head_sep = usize::from(!history.is_empty() && !initial.is_empty());
    let budget = window.saturating_sub(initial.len() + tail_len + head_sep);
    let mut out = Vec::with_capacity(window.max(initial.len() + tail_len) + 1);
    out.extend_from_slice(initial);
    if !history.is_empty() && budget > 0 {
        if head_sep == 1 {
            out.push(SEP);
        }
        out.extend_from_slice(&history[history.len().saturating_sub(budget)..]);
    }
    if !prefix.is_empty() {
        out.push(SEP);
        out.extend_from_slice(prefix);
    }
    if out.len() > window {
        out.drain(..out.len() - window);
    }
    out
}

/// Policy operations over an explicit parameter snapshot.
#[derive(Debug, Clone, Copy)]
pub struct Policy {
    pub config: PolicyConfig,
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Self {
        Self { config }
    }

    pub fn init_params(&self, seed: u64) -> ParamVector {
        self.config.init_params(seed)
    }

    fn validate_state(&self, state: &AgentState) -> Result<()> {
        let vocab = Vocabulary::get();
        vocab.check(&state.initial)?;
        for turn in &state.history {
            vocab.check(&turn.action)?;
            vocab.check(&turn.observation)?;
        }
        Ok(())
    }

    fn context(&self, state: &AgentState, prefix: &[Token]) -> Result<Vec<Token>> {
        self.validate_state(state)?;
        Vocabulary::get().check(prefix)?;
        Ok(context_tokens(state, prefix, self.config.window))
    }

    pub fn encode_context(
        &self,
        params: &ParamVector,
        state: &AgentState,
        prefix: &[Token],
    ) -> Result<Vec<f64>> {
        let ctx = self.context(state, prefix)?;
        Ok(params::mean_embedding(params, &ctx))
    }

    pub fn token_logits(&self, params: &ParamVector, feature: &[f64]) -> Vec<f64> {
        params::forward(params, feature.to_vec()).logits
    }

    /// Decode one action. Temperature 0 is greedy with ties to the lowest
    /// token id. Returned log-probs are at temperature 1.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        params: &ParamVector,
        state: &AgentState,
        temperature: f64,
        rng: &mut R,
    ) -> Result<(ActionText, TokenLogProbs)> {
        let mut prefix: Vec<Token> = Vec::with_capacity(self.config.max_action_tokens);
        let mut logps = Vec::with_capacity(self.config.max_action_tokens);
        // Validate the state once; the prefix only holds sampled ids.
        self.validate_state(state)?;
        let history = flatten_history(state);
        loop {
            let ctx = assemble_context(&state.initial, &history, &prefix, self.config.window);
            let logits = params::forward(params, params::mean_embedding(params, &ctx)).logits;
            let lp = log_softmax(&logits);
            let next = if prefix.len() + 1 == self.config.max_action_tokens {
                EOS.index()
            } else if temperature <= 0.0 {
                argmax(&logits)
            } else {
                sample_index(&logits, temperature, rng)
            };
            logps.push(lp[next]);
            let tok = Token(next as u16);
            prefix.push(tok);
            if tok == EOS {
                break;
            }
        }
        Ok((ActionText { tokens: prefix }, TokenLogProbs(logps)))
    }

    pub fn logprob(
        &self,
        params: &ParamVector,
        state: &AgentState,
        action: &ActionText,
    ) -> Result<TokenLogProbs> {
        self.check_action(action)?;
        self.validate_state(state)?;
        let history = flatten_history(state);
        let mut out = Vec::with_capacity(action.len());
        for k in 0..action.len() {
            let ctx = assemble_context(&state.initial, &history, &action.tokens[..k], self.config.window);
            let logits = params::forward(params, params::mean_embedding(params, &ctx)).logits;
            out.push(log_softmax(&logits)[action.tokens[k].index()]);
        }
        Ok(TokenLogProbs(out))
    }

    /// Gradient of `Σ_k w_k · log π(token_k | prefix_k)`.
    pub fn grad_logprob(
        &self,
        params: &ParamVector,
        state: &AgentState,
        action: &ActionText,
        weights: &[f64],
    ) -> Result<ParamVector> {
        let mut grad = ParamVector::zeros(params.dims);
        self.accumulate_grad_logprob(params, state, action, weights, &mut grad)?;
        Ok(grad)
    }

    pub fn accumulate_grad_logprob(
        &self,
        params: &ParamVector,
        state: &AgentState,
        action: &ActionText,
        weights: &[f64],
        grad: &mut ParamVector,
    ) -> Result<()> {
        self.check_action(action)?;
        if weights.len() != action.len() {
            return Err(Error::Input(format!(
                "{} token weights for a {}-token action",
                weights.len(),
                action.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::Numeric(format!("non-finite token weight {w}")));
        }
        self.validate_state(state)?;
        let history = flatten_history(state);
        for (k, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let ctx = assemble_context(&state.initial, &history, &action.tokens[..k], self.config.window);
            let act = params::forward(params, params::mean_embedding(params, &ctx));
            let mut dz: Vec<f64> = params::softmax(&act.logits).iter().map(|p| -w * p).collect();
            dz[action.tokens[k].index()] += w;
            params::backward(params, &act, &ctx, &dz, grad);
        }
        Ok(())
    }

    fn check_action(&self, action: &ActionText) -> Result<()> {
        Vocabulary::get().check(&action.tokens)?;
        if action.tokens.last() != Some(&EOS) || action.len() > self.config.max_action_tokens {
            return Err(Error::Input(format!(
                "malformed action `{}`: must end with <eos> and have at most {} tokens",
                action.text(),
                self.config.max_action_tokens
            )));
        }
        Ok(())
    }
}

/// Draw an index from `softmax(logits / temperature)`.
pub fn sample_index<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let probs = params::softmax(&scaled);
    let mut u: f64 = rng.gen();
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.len() - 1
}
