//! Random hierarchy grammars and their derivation trees.
//!
//! A grammar has `depth` layers. Layer `ℓ` (1-based) rewrites each of the `v`
//! symbols of level `ℓ` into one of `m` ordered `s`-tuples of level `ℓ-1`
//! symbols. Within a layer all `m·v` tuples are distinct, so every generable
//! `s`-block has exactly one parent and derivations can be parsed back from
//! the leaves.
//!
//! Symbols are integers `0..v` at every level; levels are separate index
//! spaces.

use std::collections::HashMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Symbol = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GrammarParams {
    /// Vocabulary size per level.
    pub v: usize,
    /// Production rules per symbol.
    pub m: usize,
    /// Branching factor.
    pub s: usize,
    /// Number of layers between root and leaves.
    #[serde(rename = "L")]
    pub depth: usize,
}

impl GrammarParams {
    pub fn new(v: usize, m: usize, s: usize, depth: usize) -> Result<Self> {
        let p = GrammarParams { v, m, s, depth };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.v < 2 || self.s < 2 || self.depth < 1 || self.m < 1 {
            return Err(Error::InvalidParams(format!(
                "need v >= 2, s >= 2, L >= 1, m >= 1 (got v={}, m={}, s={}, L={})",
                self.v, self.m, self.s, self.depth
            )));
        }
        if let Some(space) = self.tuple_space() {
            if self.m * self.v > space {
                return Err(Error::InvalidParams(format!(
                    "m*v = {} exceeds the {} available {}-tuples",
                    self.m * self.v,
                    space,
                    self.s
                )));
            }
        }
        if self.num_leaves_checked().is_none() {
            return Err(Error::InvalidParams(format!("s^L overflows for s={}, L={}", self.s, self.depth)));
        }
        Ok(())
    }

    /// `v^s`, or `None` when it does not fit in a `usize`.
    pub fn tuple_space(&self) -> Option<usize> {
        self.v.checked_pow(self.s as u32)
    }

    fn num_leaves_checked(&self) -> Option<usize> {
        self.s.checked_pow(self.depth as u32)
    }

    /// Length of the visible string, `s^L`.
    pub fn num_leaves(&self) -> usize {
        self.s.pow(self.depth as u32)
    }

    /// Number of nodes at `level` (0 = leaves, `depth` = root).
    pub fn level_size(&self, level: usize) -> usize {
        self.s.pow((self.depth - level) as u32)
    }
}

/// One layer of rules: `rules[(symbol*m + r)*s + c]` is child `c` of rule `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleLayer {
    v: usize,
    m: usize,
    s: usize,
    rules: Vec<Symbol>,
    inverse: HashMap<u64, (Symbol, u32)>,
}

impl RuleLayer {
    fn from_rules(v: usize, m: usize, s: usize, rules: Vec<Symbol>) -> Result<Self> {
        debug_assert_eq!(rules.len(), v * m * s);
        let mut inverse = HashMap::with_capacity(v * m);
        for y in 0..v {
            for r in 0..m {
                let start = (y * m + r) * s;
                let tuple = &rules[start..start + s];
                if let Some(&bad) = tuple.iter().find(|&&a| a as usize >= v) {
                    return Err(Error::InvalidParams(format!("symbol {bad} out of vocabulary {v}")));
                }
                let code = encode(tuple, v);
                if inverse.insert(code, (y as Symbol, r as u32)).is_some() {
                    return Err(Error::InvalidParams(format!(
                        "tuple {tuple:?} assigned twice within a layer"
                    )));
                }
            }
        }
        Ok(RuleLayer { v, m, s, rules, inverse })
    }

    /// The `s` children of rule `r` of `symbol`.
    #[inline]
    pub fn rule(&self, symbol: Symbol, r: usize) -> &[Symbol] {
        let start = (symbol as usize * self.m + r) * self.s;
        &self.rules[start..start + self.s]
    }

    /// All `m` rules of `symbol`, flattened.
    #[inline]
    pub fn rules_of(&self, symbol: Symbol) -> &[Symbol] {
        let start = symbol as usize * self.m * self.s;
        &self.rules[start..start + self.m * self.s]
    }

    /// Every rule of the layer flattened, symbol-major.
    #[inline]
    pub fn flat(&self) -> &[Symbol] {
        &self.rules
    }

    /// Parent symbol and rule index producing `block`, if any.
    pub fn parent_of(&self, block: &[Symbol]) -> Option<(Symbol, u32)> {
        if block.len() != self.s || block.iter().any(|&a| a as usize >= self.v) {
            return None;
        }
        self.inverse.get(&encode(block, self.v)).copied()
    }
}

fn encode(tuple: &[Symbol], v: usize) -> u64 {
    tuple.iter().fold(0u64, |acc, &a| acc * v as u64 + a as u64)
}

fn decode(mut code: u64, v: usize, s: usize, out: &mut [Symbol]) {
    for c in (0..s).rev() {
        out[c] = (code % v as u64) as Symbol;
        code /= v as u64;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleTable {
    params: GrammarParams,
    /// `layers[ℓ-1]` rewrites level `ℓ` into level `ℓ-1`.
    layers: Vec<RuleLayer>,
}

impl RuleTable {
    /// Draws a random grammar. For each layer, `m·v` tuples are sampled
    /// without replacement from the `v^s` possible ones and dealt `m` per
    /// symbol in sampling order.
    pub fn build<R: Rng + ?Sized>(params: GrammarParams, rng: &mut R) -> Result<Self> {
        params.validate()?;
        let GrammarParams { v, m, s, depth } = params;
        let space = params
            .tuple_space()
            .ok_or_else(|| Error::InvalidParams("v^s does not fit in memory indices".into()))?;
        let mut layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            let mut codes: Vec<usize> = index::sample(rng, space, m * v).into_vec();
            codes.shuffle(rng);
            let mut rules = vec![0; v * m * s];
            for (k, &code) in codes.iter().enumerate() {
                decode(code as u64, v, s, &mut rules[k * s..(k + 1) * s]);
            }
            layers.push(RuleLayer::from_rules(v, m, s, rules)?);
        }
        Ok(RuleTable { params, layers })
    }

    /// Builds a table from explicit forward maps, `forward[ℓ-1][y][r]` being
    /// the `r`-th tuple of symbol `y` at layer `ℓ`.
    pub fn from_forward(params: GrammarParams, forward: &[Vec<Vec<Vec<Symbol>>>]) -> Result<Self> {
        params.validate()?;
        let GrammarParams { v, m, s, depth } = params;
        if forward.len() != depth {
            return Err(Error::LengthMismatch { expected: depth, got: forward.len() });
        }
        let mut layers = Vec::with_capacity(depth);
        for layer in forward {
            if layer.len() != v {
                return Err(Error::LengthMismatch { expected: v, got: layer.len() });
            }
            let mut rules = Vec::with_capacity(v * m * s);
            for sym_rules in layer {
                if sym_rules.len() != m {
                    return Err(Error::LengthMismatch { expected: m, got: sym_rules.len() });
                }
                for tuple in sym_rules {
                    if tuple.len() != s {
                        return Err(Error::LengthMismatch { expected: s, got: tuple.len() });
                    }
                    rules.extend_from_slice(tuple);
                }
            }
            layers.push(RuleLayer::from_rules(v, m, s, rules)?);
        }
        Ok(RuleTable { params, layers })
    }

    pub fn params(&self) -> &GrammarParams {
        &self.params
    }

    /// Rules rewriting level `level` (1-based) into level `level-1`.
    pub fn layer(&self, level: usize) -> &RuleLayer {
        &self.layers[level - 1]
    }

    /// Forward maps as nested vectors, the inverse of [`RuleTable::from_forward`].
    pub fn forward(&self) -> Vec<Vec<Vec<Vec<Symbol>>>> {
        let GrammarParams { v, m, .. } = self.params;
        self.layers
            .iter()
            .map(|layer| {
                (0..v)
                    .map(|y| (0..m).map(|r| layer.rule(y as Symbol, r).to_vec()).collect())
                    .collect()
            })
            .collect()
    }

    /// Samples a derivation tree. `root = None` draws the class uniformly.
    pub fn generate<R: Rng + ?Sized>(&self, root: Option<Symbol>, rng: &mut R) -> Result<Datum> {
        let GrammarParams { v, m, s, depth } = self.params;
        let root = match root {
            Some(c) if (c as usize) < v => c,
            Some(c) => return Err(Error::OutOfRange { index: c as usize, size: v }),
            None => rng.random_range(0..v) as Symbol,
        };
        let mut levels = vec![Vec::new(); depth + 1];
        levels[depth] = vec![root];
        for level in (1..=depth).rev() {
            let layer = self.layer(level);
            let mut children = Vec::with_capacity(levels[level].len() * s);
            for &y in &levels[level] {
                let r = rng.random_range(0..m);
                children.extend_from_slice(layer.rule(y, r));
            }
            levels[level - 1] = children;
        }
        Ok(Datum { levels })
    }

    /// Parses a leaf string back into its unique derivation.
    pub fn derive(&self, leaves: &[Symbol]) -> Result<Datum> {
        let GrammarParams { s, depth, .. } = self.params;
        let n = self.params.num_leaves();
        if leaves.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: leaves.len() });
        }
        let mut levels = Vec::with_capacity(depth + 1);
        levels.push(leaves.to_vec());
        for level in 1..=depth {
            let layer = self.layer(level);
            let below = &levels[level - 1];
            let mut parents = Vec::with_capacity(below.len() / s);
            for (block, chunk) in below.chunks(s).enumerate() {
                match layer.parent_of(chunk) {
                    Some((y, _)) => parents.push(y),
                    None => return Err(Error::NotGenerable { level, block }),
                }
            }
            levels.push(parents);
        }
        Ok(Datum { levels })
    }

    /// Checks the datum invariant: every node's children form one of its rules.
    pub fn check(&self, datum: &Datum) -> Result<()> {
        let GrammarParams { s, depth, .. } = self.params;
        if datum.levels.len() != depth + 1 {
            return Err(Error::LengthMismatch { expected: depth + 1, got: datum.levels.len() });
        }
        for level in 1..=depth {
            let expected = self.params.level_size(level);
            if datum.levels[level].len() != expected {
                return Err(Error::LengthMismatch { expected, got: datum.levels[level].len() });
            }
            let layer = self.layer(level);
            for (i, &y) in datum.levels[level].iter().enumerate() {
                let block = &datum.levels[level - 1][i * s..(i + 1) * s];
                match layer.parent_of(block) {
                    Some((p, _)) if p == y => {}
                    _ => return Err(Error::NotGenerable { level, block: i }),
                }
            }
        }
        Ok(())
    }
}

/// Serialized form: parameters plus per-layer forward maps.
#[derive(Serialize, Deserialize)]
struct RuleTableDoc {
    params: GrammarParams,
    layers: Vec<Vec<Vec<Vec<Symbol>>>>,
}

impl Serialize for RuleTable {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        RuleTableDoc { params: self.params, layers: self.forward() }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RuleTable {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = RuleTableDoc::deserialize(deserializer)?;
        RuleTable::from_forward(doc.params, &doc.layers).map_err(serde::de::Error::custom)
    }
}

/// A full derivation: `levels[0]` are the visible tokens, `levels[L]` the root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Datum {
    pub levels: Vec<Vec<Symbol>>,
}

impl Datum {
    pub fn leaves(&self) -> &[Symbol] {
        &self.levels[0]
    }

    pub fn class(&self) -> Symbol {
        self.levels[self.levels.len() - 1][0]
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }
}

/// Tree distance between two leaves: edges up to their lowest common ancestor.
/// Returns `(ℓ̃, r)` with `r = s^ℓ̃ - 1`.
pub fn leaf_pair_distance(i: usize, j: usize, params: &GrammarParams) -> Result<(usize, usize)> {
    let n = params.num_leaves();
    for idx in [i, j] {
        if idx >= n {
            return Err(Error::OutOfRange { index: idx, size: n });
        }
    }
    let ell = tree_distance(i, j, params.s);
    Ok((ell, params.s.pow(ell as u32) - 1))
}

#[inline]
pub(crate) fn tree_distance(mut i: usize, mut j: usize, s: usize) -> usize {
    let mut ell = 0;
    while i != j {
        i /= s;
        j /= s;
        ell += 1;
    }
    ell
}
