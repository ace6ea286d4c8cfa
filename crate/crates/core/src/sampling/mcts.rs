//! Discriminator-guided tree search over continuations.
//!
//! Each emitted token runs `rounds` simulations from a fresh root at the
//! current prefix. A simulation descends by PUCT,
//! `V(s') + c_puct · p(s'|s) · sqrt(N(s) / (1 + N(s')))`, until it reaches a
//! node without a value, scores that node with the discriminator (no
//! rollout), expands it over the nucleus of the generator, and raises every
//! ancestor's value to `max(V, D(leaf))`.
//!
//! Visit accounting: a node's count goes up on every pass through it,
//! including the pass that evaluates it. The root is expanded before the
//! first round, so its child counts sum to `rounds`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nucleus::{nucleus_set, NucleusSpec};
use crate::error::{Error, Result};
use crate::models::{sample_categorical, PrefixDiscriminator, TabularGenerator};
use crate::seqspace::{Sequence, Token};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MctsMode {
    /// Emit the most visited child; the behaviour component is a Dirac.
    Conditional,
    /// Sample a child proportionally to visits.
    Unconditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MctsConfig {
    pub c_puct: f64,
    pub rounds: u32,
    /// Nucleus mass used when expanding a node.
    pub sigma: f64,
    pub mode: MctsMode,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self { c_puct: 1.0, rounds: 50, sigma: 0.1, mode: MctsMode::Unconditional }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("mcts rounds must be >= 1".into()));
        }
        if !(self.c_puct >= 0.0 && self.c_puct.is_finite()) {
            return Err(Error::Config(format!("c_puct must be finite and >= 0, got {}", self.c_puct)));
        }
        NucleusSpec::new(self.sigma)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MctsNode {
    pub token: Option<Token>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub visits: u32,
    pub value: f64,
    /// Generator probability of this node's token given its parent.
    pub prior: f64,
    pub evaluated: bool,
    pub terminal: bool,
}

/// One search tree rooted at a fixed prefix.
pub struct MctsTree<'a> {
    gen: &'a TabularGenerator,
    disc: &'a PrefixDiscriminator,
    ctx: u32,
    cfg: MctsConfig,
    root_prefix: Vec<Token>,
    nodes: Vec<MctsNode>,
}

impl<'a> MctsTree<'a> {
    pub fn new(
        gen: &'a TabularGenerator,
        disc: &'a PrefixDiscriminator,
        ctx: u32,
        root_prefix: &[Token],
        cfg: MctsConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        gen.space().check_context(ctx)?;
        gen.space().validate_prefix(root_prefix)?;
        let terminal = gen.space().is_terminal(root_prefix);
        let mut tree = Self {
            gen,
            disc,
            ctx,
            cfg,
            root_prefix: root_prefix.to_vec(),
            nodes: vec![MctsNode {
                token: None,
                parent: None,
                children: Vec::new(),
                visits: 0,
                value: 0.0,
                prior: 1.0,
                evaluated: true,
                terminal,
            }],
        };
        if !terminal {
            tree.expand(0);
        }
        Ok(tree)
    }

    pub fn nodes(&self) -> &[MctsNode] {
        &self.nodes
    }

    pub fn root(&self) -> &MctsNode {
        &self.nodes[0]
    }

    /// Full token prefix of a node.
    pub fn prefix_of(&self, mut id: usize) -> Vec<Token> {
        let mut rev = Vec::new();
        while let Some(t) = self.nodes[id].token {
            rev.push(t);
            id = self.nodes[id].parent.expect("non-root nodes have a parent");
        }
        let mut p = self.root_prefix.clone();
        p.extend(rev.into_iter().rev());
        p
    }

    fn expand(&mut self, id: usize) {
        let prefix = self.prefix_of(id);
        let probs = self.gen.step_probs(self.ctx, &prefix, 1.0);
        let set = nucleus_set(&probs, NucleusSpec { sigma: self.cfg.sigma });
        for t in set {
            let mut child_prefix = prefix.clone();
            child_prefix.push(t as Token);
            let terminal = self.gen.space().is_terminal(&child_prefix);
            let child = self.nodes.len();
            self.nodes.push(MctsNode {
                token: Some(t as Token),
                parent: Some(id),
                children: Vec::new(),
                visits: 0,
                value: 0.0,
                prior: probs[t],
                evaluated: false,
                terminal,
            });
            self.nodes[id].children.push(child);
        }
    }

    /// PUCT choice among the children of `id`; lowest token id on ties.
    pub fn select_child(&self, id: usize) -> usize {
        let parent_visits = self.nodes[id].visits as f64;
        let mut best = None;
        let mut best_score = f64::NEG_INFINITY;
        for &c in &self.nodes[id].children {
            let n = &self.nodes[c];
            let score = n.value + self.cfg.c_puct * n.prior * (parent_visits / (1.0 + n.visits as f64)).sqrt();
            if score > best_score {
                best_score = score;
                best = Some(c);
            }
        }
        best.expect("selection only runs on expanded nodes")
    }

    /// One selection / expansion / evaluation / back-propagation round.
    pub fn simulate(&mut self) {
        if self.nodes[0].terminal {
            return;
        }
        let mut path = vec![0];
        self.nodes[0].visits += 1;
        let mut id = 0;
        while self.nodes[id].evaluated && !self.nodes[id].terminal {
            id = self.select_child(id);
            self.nodes[id].visits += 1;
            path.push(id);
        }
        let score = self.disc.score(self.ctx, &self.prefix_of(id));
        let node = &mut self.nodes[id];
        node.value = score;
        if !node.evaluated {
            node.evaluated = true;
            if !node.terminal {
                self.expand(id);
            }
        }
        for &a in &path[..path.len() - 1] {
            let v = &mut self.nodes[a].value;
            *v = v.max(score);
        }
    }

    pub fn run(&mut self) {
        for _ in 0..self.cfg.rounds {
            self.simulate();
        }
    }

    /// Per-symbol statistics of the root's children.
    pub fn root_trace(&self) -> RootTrace {
        let n = self.gen.space().num_symbols();
        let mut visits = vec![0u32; n];
        let mut values = vec![0.0; n];
        let mut priors = vec![0.0; n];
        for &c in &self.nodes[0].children {
            let node = &self.nodes[c];
            let t = node.token.expect("children carry a token") as usize;
            visits[t] = node.visits;
            values[t] = node.value;
            priors[t] = node.prior;
        }
        RootTrace { prefix: Sequence(self.root_prefix.clone()), chosen: None, visits, values, priors }
    }
}

/// Root statistics for one emitted position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootTrace {
    pub prefix: Sequence,
    pub chosen: Option<Token>,
    /// Visit count of each symbol's child (0 outside the nucleus).
    pub visits: Vec<u32>,
    pub values: Vec<f64>,
    pub priors: Vec<f64>,
}

impl RootTrace {
    /// Visit counts normalized to a categorical.
    pub fn visit_dist(&self) -> Vec<f64> {
        let total: u32 = self.visits.iter().sum();
        self.visits.iter().map(|&v| v as f64 / total as f64).collect()
    }

    /// Most visited symbol, lowest id on ties.
    pub fn most_visited(&self) -> Token {
        let mut best = 0;
        for (i, &v) in self.visits.iter().enumerate() {
            if v > self.visits[best] {
                best = i;
            }
        }
        best as Token
    }
}

/// Identifies the (context, seed) a decode was produced for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeTag {
    pub ctx: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub tag: DecodeTag,
    pub config: MctsConfig,
    pub sequence: Sequence,
    pub steps: Vec<RootTrace>,
}

impl DecodeOutput {
    pub fn check_tag(&self, tag: DecodeTag) -> Result<()> {
        if self.tag != tag {
            return Err(Error::StaleDecode {
                expected: format!("ctx {} seed {}", self.tag.ctx, self.tag.seed),
                actual: format!("ctx {} seed {}", tag.ctx, tag.seed),
            });
        }
        Ok(())
    }
}

/// Searches from `prefix` and returns the root statistics.
pub fn search_root(
    gen: &TabularGenerator,
    disc: &PrefixDiscriminator,
    ctx: u32,
    prefix: &[Token],
    cfg: MctsConfig,
) -> Result<RootTrace> {
    let mut tree = MctsTree::new(gen, disc, ctx, prefix, cfg)?;
    tree.run();
    Ok(tree.root_trace())
}

/// Decodes one sequence, one fresh search per emitted token.
pub fn mcts_decode<R: Rng + ?Sized>(
    gen: &TabularGenerator,
    disc: &PrefixDiscriminator,
    ctx: u32,
    cfg: MctsConfig,
    seed: u64,
    rng: &mut R,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    gen.space().check_context(ctx)?;
    let mut y = Sequence::empty();
    let mut steps = Vec::new();
    while !gen.space().is_terminal(y.tokens()) {
        let mut trace = search_root(gen, disc, ctx, y.tokens(), cfg)?;
        let t = match cfg.mode {
            MctsMode::Conditional => trace.most_visited(),
            MctsMode::Unconditional => sample_categorical(&trace.visit_dist(), rng) as Token,
        };
        trace.chosen = Some(t);
        y.push(t);
        steps.push(trace);
    }
    Ok(DecodeOutput { tag: DecodeTag { ctx, seed }, config: cfg, sequence: y, steps })
}
