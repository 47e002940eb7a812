//! Brute-force enumeration of every derivation of a small grammar.

#![allow(dead_code)]

use rand::Rng;
use rhm_core::belief_prop::LeafPriorField;
use rhm_core::grammar::{Datum, GrammarParams, RuleTable, Symbol};

/// Every derivation of the grammar together with its prior weight.
pub fn derivations(rules: &RuleTable) -> Vec<(Datum, f64)> {
    let GrammarParams { v, m, s, depth } = *rules.params();
    let mut out = Vec::new();
    for root in 0..v as Symbol {
        let mut partial = vec![(vec![vec![root]], 1.0 / v as f64)];
        for level in (1..=depth).rev() {
            let layer = rules.layer(level);
            let mut next = Vec::new();
            for (levels, w) in partial {
                let parents = levels.last().unwrap().clone();
                // Cartesian product over the rule chosen at each parent.
                let mut children: Vec<(Vec<Symbol>, f64)> = vec![(Vec::new(), w)];
                for &y in &parents {
                    let mut grown = Vec::new();
                    for (c, cw) in &children {
                        for r in 0..m {
                            let mut c2 = c.clone();
                            c2.extend_from_slice(layer.rule(y, r));
                            grown.push((c2, cw / m as f64));
                        }
                    }
                    children = grown;
                }
                for (c, cw) in children {
                    debug_assert_eq!(c.len(), parents.len() * s);
                    let mut l = levels.clone();
                    l.push(c);
                    next.push((l, cw));
                }
            }
            partial = next;
        }
        for (mut levels, w) in partial {
            levels.reverse();
            out.push((Datum { levels }, w));
        }
    }
    out
}

/// Posterior over derivations given leaf priors.
pub fn posterior(rules: &RuleTable, priors: &LeafPriorField) -> Vec<(Datum, f64)> {
    let mut post: Vec<(Datum, f64)> = derivations(rules)
        .into_iter()
        .map(|(d, w)| {
            let lik: f64 = d.leaves().iter().enumerate().map(|(i, &x)| priors.leaf(i)[x as usize]).product();
            (d, w * lik)
        })
        .collect();
    let z: f64 = post.iter().map(|p| p.1).sum();
    post.iter_mut().for_each(|p| p.1 /= z);
    post
}

pub fn enumerated_marginal(post: &[(Datum, f64)], level: usize, node: usize, v: usize) -> Vec<f64> {
    let mut m = vec![0.0; v];
    for (d, w) in post {
        m[d.levels[level][node] as usize] += w;
    }
    m
}

pub fn tiny_grammar(rng: &mut impl Rng) -> RuleTable {
    let v = rng.random_range(2..=3);
    let m = rng.random_range(1..=2);
    RuleTable::build(GrammarParams::new(v, m, 2, 2).unwrap(), rng).unwrap()
}

pub fn check_all_marginals(rules: &RuleTable, priors: &LeafPriorField) -> f64 {
    let params = *rules.params();
    let post = posterior(rules, priors);
    let marg = rhm_core::belief_prop::run_bp(rules, priors).unwrap().marginals().unwrap();
    let mut worst: f64 = 0.0;
    for level in 0..=params.depth {
        for node in 0..params.level_size(level) {
            let want = enumerated_marginal(&post, level, node, params.v);
            for (a, b) in marg.node(level, node).iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

