//! Exact belief propagation on the grammar tree.
//!
//! Messages are stored per level as flat `n_level * v` arrays. Every message
//! is normalized right after it is computed. Sums over child tuples only
//! visit the `m·v` stored rules of a layer, since the rule factor vanishes
//! everywhere else.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grammar::{Datum, GrammarParams, RuleLayer, RuleTable, Symbol};

/// Normalization tolerance used by the invariant checks.
pub const NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorSource {
    /// Unmasked tokens are one-hot, masked tokens uniform. Carries the masked fraction.
    Masking { masked_fraction: f64 },
    /// Every token keeps `1-ε+ε/v` on its value.
    Epsilon { epsilon: f64 },
    Custom,
}

/// Upward messages at the leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafPriorField {
    v: usize,
    beliefs: Vec<f64>,
    source: PriorSource,
}

impl LeafPriorField {
    /// Masking priors: one-hot on the token where `mask[i]` is false, uniform otherwise.
    pub fn masking(leaves: &[Symbol], mask: &[bool], v: usize) -> Result<Self> {
        if mask.len() != leaves.len() {
            return Err(Error::LengthMismatch { expected: leaves.len(), got: mask.len() });
        }
        let mut beliefs = vec![0.0; leaves.len() * v];
        for (i, (&x, &masked)) in leaves.iter().zip(mask).enumerate() {
            check_symbol(x, v)?;
            let row = &mut beliefs[i * v..(i + 1) * v];
            if masked {
                row.fill(1.0 / v as f64);
            } else {
                row[x as usize] = 1.0;
            }
        }
        let masked = mask.iter().filter(|&&b| b).count();
        let masked_fraction = if mask.is_empty() { 0.0 } else { masked as f64 / mask.len() as f64 };
        Ok(LeafPriorField { v, beliefs, source: PriorSource::Masking { masked_fraction } })
    }

    /// ε-process priors: `1-ε+ε/v` on the true token, `ε/v` elsewhere.
    pub fn epsilon(leaves: &[Symbol], epsilon: f64, v: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidParams(format!("epsilon {epsilon} outside [0, 1]")));
        }
        let off = epsilon / v as f64;
        let on = 1.0 - epsilon + off;
        let mut beliefs = vec![off; leaves.len() * v];
        for (i, &x) in leaves.iter().enumerate() {
            check_symbol(x, v)?;
            beliefs[i * v + x as usize] = on;
        }
        Ok(LeafPriorField { v, beliefs, source: PriorSource::Epsilon { epsilon } })
    }

    /// Hand-built priors; each row must be a probability vector.
    pub fn from_beliefs(v: usize, beliefs: Vec<f64>) -> Result<Self> {
        if v == 0 || !beliefs.len().is_multiple_of(v) {
            return Err(Error::LengthMismatch { expected: v, got: beliefs.len() });
        }
        for row in beliefs.chunks(v) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&b| !(b >= 0.0)) || (sum - 1.0).abs() > NORM_TOL {
                return Err(Error::InvalidParams(format!("prior row {row:?} is not normalized")));
            }
        }
        Ok(LeafPriorField { v, beliefs, source: PriorSource::Custom })
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn len(&self) -> usize {
        self.beliefs.len() / self.v
    }

    pub fn is_empty(&self) -> bool {
        self.beliefs.is_empty()
    }

    pub fn source(&self) -> PriorSource {
        self.source
    }

    pub fn leaf(&self, i: usize) -> &[f64] {
        &self.beliefs[i * self.v..(i + 1) * self.v]
    }
}

fn check_symbol(x: Symbol, v: usize) -> Result<()> {
    if (x as usize) < v {
        Ok(())
    } else {
        Err(Error::OutOfRange { index: x as usize, size: v })
    }
}

/// Upward and downward messages for every node of the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageField {
    params: GrammarParams,
    up: Vec<Vec<f64>>,
    down: Vec<Vec<f64>>,
    up_valid: bool,
    down_valid: bool,
}

fn normalize(msg: &mut [f64], level: usize, node: usize) -> Result<()> {
    let sum: f64 = msg.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::ZeroNormalization { level, node });
    }
    let inv = 1.0 / sum;
    msg.iter_mut().for_each(|x| *x *= inv);
    Ok(())
}

/// Unnormalized upward message of a parent from its `s` contiguous children.
fn upward_node(layer: &RuleLayer, children: &[f64], v: usize, m: usize, s: usize, out: &mut [f64]) {
    for (y, slot) in out.iter_mut().enumerate() {
        let mut total = 0.0;
        for rule in layer.rules_of(y as Symbol).chunks_exact(s) {
            let mut prod = 1.0;
            for (c, &a) in rule.iter().enumerate() {
                prod *= children[c * v + a as usize];
                if prod == 0.0 {
                    break;
                }
            }
            total += prod;
        }
        *slot = total;
    }
    debug_assert_eq!(layer.rules_of(0).len(), m * s);
}

/// Unnormalized downward message of child `c` given the parent's downward
/// message and the upward messages of all `s` children.
fn downward_child(layer: &RuleLayer, parent_down: &[f64], children: &[f64], c: usize, v: usize, s: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (y, &py) in parent_down.iter().enumerate() {
        if py == 0.0 {
            continue;
        }
        for rule in layer.rules_of(y as Symbol).chunks_exact(s) {
            let mut prod = py;
            for (j, &a) in rule.iter().enumerate() {
                if j != c {
                    prod *= children[j * v + a as usize];
                }
            }
            out[rule[c] as usize] += prod;
        }
    }
}

impl MessageField {
    /// Upward sweep from the leaf priors to the root. The downward pass is
    /// left invalid.
    pub fn upward(rules: &RuleTable, priors: &LeafPriorField) -> Result<Self> {
        let params = *rules.params();
        let GrammarParams { v, m, s, depth } = params;
        if priors.v != v {
            return Err(Error::LengthMismatch { expected: v, got: priors.v });
        }
        if priors.len() != params.num_leaves() {
            return Err(Error::LengthMismatch { expected: params.num_leaves(), got: priors.len() });
        }
        let mut up = Vec::with_capacity(depth + 1);
        up.push(priors.beliefs.clone());
        for level in 1..=depth {
            let layer = rules.layer(level);
            let n = params.level_size(level);
            let mut msgs = vec![0.0; n * v];
            let below = &up[level - 1];
            for i in 0..n {
                let out = &mut msgs[i * v..(i + 1) * v];
                upward_node(layer, &below[i * s * v..(i + 1) * s * v], v, m, s, out);
                normalize(out, level, i)?;
            }
            up.push(msgs);
        }
        Ok(MessageField { params, up, down: Vec::new(), up_valid: true, down_valid: false })
    }

    /// Downward sweep from a uniform root message to the leaves.
    pub fn downward(&mut self, rules: &RuleTable) -> Result<()> {
        if !self.up_valid {
            return Err(Error::PassesNotRun("upward"));
        }
        let GrammarParams { v, s, depth, .. } = self.params;
        let mut down: Vec<Vec<f64>> = (0..=depth).map(|l| vec![0.0; self.params.level_size(l) * v]).collect();
        down[depth].fill(1.0 / v as f64);
        for level in (1..=depth).rev() {
            let layer = rules.layer(level);
            let (lower, upper) = down.split_at_mut(level);
            let parent_down = &upper[0];
            let child_down = &mut lower[level - 1];
            let child_up = &self.up[level - 1];
            for i in 0..self.params.level_size(level) {
                let pd = &parent_down[i * v..(i + 1) * v];
                let cu = &child_up[i * s * v..(i + 1) * s * v];
                for c in 0..s {
                    let node = i * s + c;
                    let out = &mut child_down[node * v..(node + 1) * v];
                    downward_child(layer, pd, cu, c, v, s, out);
                    normalize(out, level - 1, node)?;
                }
            }
        }
        self.down = down;
        self.down_valid = true;
        Ok(())
    }

    pub fn params(&self) -> &GrammarParams {
        &self.params
    }

    pub fn is_complete(&self) -> bool {
        self.up_valid && self.down_valid
    }

    pub fn up(&self, level: usize, node: usize) -> &[f64] {
        let v = self.params.v;
        &self.up[level][node * v..(node + 1) * v]
    }

    pub fn down(&self, level: usize, node: usize) -> Result<&[f64]> {
        if !self.down_valid {
            return Err(Error::PassesNotRun("downward"));
        }
        let v = self.params.v;
        Ok(&self.down[level][node * v..(node + 1) * v])
    }

    /// Node marginals `∝ ν↑ ν↓`.
    pub fn marginals(&self) -> Result<Marginals> {
        if !self.is_complete() {
            return Err(Error::PassesNotRun("marginals need both passes"));
        }
        let v = self.params.v;
        let mut levels = Vec::with_capacity(self.up.len());
        for (level, (up, down)) in self.up.iter().zip(&self.down).enumerate() {
            let mut probs: Vec<f64> = up.iter().zip(down).map(|(a, b)| a * b).collect();
            for (node, row) in probs.chunks_mut(v).enumerate() {
                normalize(row, level, node)?;
            }
            levels.push(probs);
        }
        Ok(Marginals { v, levels })
    }

    /// Root marginal mass on `class`.
    pub fn class_probability(&self, class: Symbol) -> Result<f64> {
        if !self.is_complete() {
            return Err(Error::PassesNotRun("class probability needs both passes"));
        }
        let v = self.params.v;
        check_symbol(class, v)?;
        let depth = self.params.depth;
        let mut root: Vec<f64> = self.up(depth, 0).iter().zip(&self.down[depth]).map(|(a, b)| a * b).collect();
        normalize(&mut root, depth, 0)?;
        Ok(root[class as usize])
    }
}

/// Upward sweep followed by downward sweep.
pub fn run_bp(rules: &RuleTable, priors: &LeafPriorField) -> Result<MessageField> {
    let mut field = MessageField::upward(rules, priors)?;
    field.downward(rules)?;
    Ok(field)
}

/// Per-node posterior marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    v: usize,
    levels: Vec<Vec<f64>>,
}

impl Marginals {
    pub fn node(&self, level: usize, node: usize) -> &[f64] {
        &self.levels[level][node * self.v..(node + 1) * self.v]
    }

    pub fn level(&self, level: usize) -> &[f64] {
        &self.levels[level]
    }

    /// `E[one_hot(x̂_{0,i}) | priors]` for every leaf, flattened `n * v`.
    /// This is the exact score direction of the denoiser.
    pub fn leaf_expectation(&self) -> &[f64] {
        &self.levels[0]
    }

    /// Symbol with the largest marginal and its probability.
    pub fn top(&self, level: usize, node: usize) -> (Symbol, f64) {
        let row = self.node(level, node);
        let (a, p) = row
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (a, &p)| if p > best.1 { (a, p) } else { best });
        (a as Symbol, p)
    }
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return Some(k);
            }
            u -= w;
            last = Some(k);
        }
    }
    // Rounding can leave u marginally above the last positive weight.
    last
}

/// Ancestral sampling from the posterior: draw the root from its marginal,
/// then at each sampled node draw a rule with probability proportional to
/// the product of the children's upward messages. The field is not modified.
pub fn sample_posterior<R: Rng + ?Sized>(rules: &RuleTable, field: &MessageField, rng: &mut R) -> Result<Datum> {
    if !field.up_valid {
        return Err(Error::PassesNotRun("upward"));
    }
    let GrammarParams { v, m, s, depth } = field.params;
    // The root downward message is uniform, so the root marginal is its upward message.
    let root = sample_index(field.up(depth, 0), rng).ok_or(Error::ZeroNormalization { level: depth, node: 0 })?;
    let mut levels = vec![Vec::new(); depth + 1];
    levels[depth] = vec![root as Symbol];
    let mut weights = vec![0.0; m];
    for level in (1..=depth).rev() {
        let layer = rules.layer(level);
        let child_up = &field.up[level - 1];
        let mut children = Vec::with_capacity(levels[level].len() * s);
        for (i, &y) in levels[level].iter().enumerate() {
            let cu = &child_up[i * s * v..(i + 1) * s * v];
            for (r, rule) in layer.rules_of(y).chunks_exact(s).enumerate() {
                weights[r] = rule.iter().enumerate().map(|(c, &a)| cu[c * v + a as usize]).product();
            }
            let r = sample_index(&weights, rng).ok_or(Error::ZeroNormalization { level, node: i })?;
            children.extend_from_slice(layer.rule(y, r));
        }
        levels[level - 1] = children;
    }
    Ok(Datum { levels })
}

/// Incremental BP used to assign leaves one at a time.
///
/// Upward messages are kept current for the whole tree; clamping a leaf
/// refreshes only its ancestors. A leaf marginal is obtained by recomputing
/// downward messages along the root-to-leaf path only.
#[derive(Debug, Clone)]
pub struct LeafConditioner<'a> {
    rules: &'a RuleTable,
    field: MessageField,
}

impl<'a> LeafConditioner<'a> {
    pub fn new(rules: &'a RuleTable, priors: &LeafPriorField) -> Result<Self> {
        Ok(LeafConditioner { rules, field: MessageField::upward(rules, priors)? })
    }

    /// Posterior marginal of leaf `i` given the current priors.
    pub fn leaf_marginal(&self, i: usize) -> Result<Vec<f64>> {
        let GrammarParams { v, s, depth, .. } = self.field.params;
        let n = self.field.params.num_leaves();
        if i >= n {
            return Err(Error::OutOfRange { index: i, size: n });
        }
        let mut down = vec![1.0 / v as f64; v];
        let mut next = vec![0.0; v];
        for level in (1..=depth).rev() {
            let parent = i / s.pow(level as u32);
            let child = i / s.pow(level as u32 - 1);
            let c = child - parent * s;
            let cu = &self.field.up[level - 1][parent * s * v..(parent + 1) * s * v];
            downward_child(self.rules.layer(level), &down, cu, c, v, s, &mut next);
            normalize(&mut next, level - 1, child)?;
            std::mem::swap(&mut down, &mut next);
        }
        let mut marg: Vec<f64> = self.field.up(0, i).iter().zip(&down).map(|(a, b)| a * b).collect();
        normalize(&mut marg, 0, i)?;
        Ok(marg)
    }

    /// Fixes leaf `i` to `symbol` and refreshes the upward path to the root.
    pub fn clamp(&mut self, i: usize, symbol: Symbol) -> Result<()> {
        let GrammarParams { v, m, s, depth } = self.field.params;
        check_symbol(symbol, v)?;
        let leaf = &mut self.field.up[0][i * v..(i + 1) * v];
        leaf.fill(0.0);
        leaf[symbol as usize] = 1.0;
        let mut node = i;
        for level in 1..=depth {
            node /= s;
            let (lower, upper) = self.field.up.split_at_mut(level);
            let children = &lower[level - 1][node * s * v..(node + 1) * s * v];
            let out = &mut upper[0][node * v..(node + 1) * v];
            upward_node(self.rules.layer(level), children, v, m, s, out);
            normalize(out, level, node)?;
        }
        Ok(())
    }

    pub fn field(&self) -> &MessageField {
        &self.field
    }
}
