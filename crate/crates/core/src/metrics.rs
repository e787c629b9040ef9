//! Accuracy and WUPS@t scoring.
//!
//! WUPS compares answers as word sets. For prediction words `A` and truth
//! words `T`, with `s` the thresholded Wu-Palmer similarity:
//!
//! ```text
//! score = min( prod_{a in A} max_{t in T} s(a, t),
//!              prod_{t in T} max_{a in A} s(a, t) )
//! ```
//!
//! `s` is multiplied by 0.1 when the raw similarity falls below the threshold.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROOT_MARKER: &str = "ROOT";
const BELOW_THRESHOLD_WEIGHT: f64 = 0.1;

/// A single-rooted word taxonomy. The root has depth 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyTree {
    parent: HashMap<String, Option<String>>,
    depth: HashMap<String, usize>,
    root: String,
}

impl TaxonomyTree {
    /// Builds a tree from `(child, parent)` edges; exactly one edge must have
    /// parent [`ROOT_MARKER`].
    pub fn from_edges<I, S>(edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut parent: HashMap<String, Option<String>> = HashMap::new();
        let mut root = None;
        for (child, par) in edges {
            let (child, par) = (child.into(), par.into());
            if child == ROOT_MARKER {
                return Err(Error::Taxonomy("ROOT cannot be a child".into()));
            }
            let par = if par == ROOT_MARKER {
                if let Some(prev) = root.replace(child.clone()) {
                    return Err(Error::Taxonomy(format!("multiple roots: {prev} and {child}")));
                }
                None
            } else {
                Some(par)
            };
            if parent.insert(child.clone(), par).is_some() {
                return Err(Error::Taxonomy(format!("node {child} has more than one parent")));
            }
        }
        let root = root.ok_or_else(|| Error::Taxonomy("no node has parent ROOT".into()))?;

        let mut depth: HashMap<String, usize> = HashMap::with_capacity(parent.len());
        depth.insert(root.clone(), 1);
        for start in parent.keys() {
            let mut chain = Vec::new();
            let mut node = start.as_str();
            let base = loop {
                if let Some(d) = depth.get(node) {
                    break *d;
                }
                if chain.len() > parent.len() {
                    return Err(Error::Taxonomy(format!("cycle through {start}")));
                }
                chain.push(node.to_string());
                node = match parent.get(node) {
                    Some(Some(p)) => p.as_str(),
                    Some(None) => unreachable!("root depth is preset"),
                    None => return Err(Error::Taxonomy(format!("parent {node} of {} is not a node", chain.last().unwrap()))),
                };
            };
            for (k, n) in chain.into_iter().rev().enumerate() {
                depth.insert(n, base + k + 1);
            }
        }
        Ok(TaxonomyTree { parent, depth, root })
    }

    /// Parses `child<TAB>parent` lines; blank lines and `#` comments are skipped.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut edges = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(c), Some(p), None) if !c.trim().is_empty() && !p.trim().is_empty() => {
                    edges.push((c.trim().to_string(), p.trim().to_string()))
                }
                _ => {
                    return Err(Error::Parse {
                        line: n + 1,
                        message: "expected child<TAB>parent".into(),
                    })
                }
            }
        }
        Self::from_edges(edges)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(BufReader::new(File::open(path)?))
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.parent.contains_key(word)
    }

    pub fn depth(&self, word: &str) -> Option<usize> {
        self.depth.get(word).copied()
    }

    pub fn parent(&self, word: &str) -> Option<&str> {
        self.parent.get(word)?.as_deref()
    }

    pub fn lowest_common_ancestor(&self, a: &str, b: &str) -> Option<&str> {
        let (mut a, mut b) = (self.parent.get_key_value(a)?.0.as_str(), self.parent.get_key_value(b)?.0.as_str());
        let (mut da, mut db) = (self.depth[a], self.depth[b]);
        while da > db {
            a = self.parent(a)?;
            da -= 1;
        }
        while db > da {
            b = self.parent(b)?;
            db -= 1;
        }
        while a != b {
            a = self.parent(a)?;
            b = self.parent(b)?;
        }
        Some(a)
    }
}

/// `2 * depth(lca) / (depth(a) + depth(b))`.
pub fn wup_similarity(a: &str, b: &str, tree: &TaxonomyTree) -> Result<f64> {
    for w in [a, b] {
        if !tree.contains(w) {
            return Err(Error::OutOfTaxonomy(w.to_string()));
        }
    }
    let lca = tree.lowest_common_ancestor(a, b).expect("single-rooted tree");
    let d = tree.depth[lca] as f64;
    Ok(2.0 * d / (tree.depth[a] + tree.depth[b]) as f64)
}

/// How words missing from the taxonomy are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutOfTaxonomy {
    /// Exact match scores 1, anything else 0.
    #[default]
    ExactMatch,
    /// Return [`Error::OutOfTaxonomy`].
    Strict,
}

fn word_set(answer: &str) -> Vec<String> {
    let mut words: Vec<String> = answer.split_whitespace().map(str::to_lowercase).collect();
    words.sort();
    words.dedup();
    words
}

fn word_score(a: &str, b: &str, tree: &TaxonomyTree, t: f64, policy: OutOfTaxonomy) -> Result<f64> {
    if !(tree.contains(a) && tree.contains(b)) {
        return match policy {
            OutOfTaxonomy::ExactMatch => Ok(if a == b { 1.0 } else { 0.0 }),
            OutOfTaxonomy::Strict => Err(Error::OutOfTaxonomy(if tree.contains(a) { b } else { a }.to_string())),
        };
    }
    let s = wup_similarity(a, b, tree)?;
    Ok(if s < t { s * BELOW_THRESHOLD_WEIGHT } else { s })
}

fn one_way(from: &[String], to: &[String], tree: &TaxonomyTree, t: f64, policy: OutOfTaxonomy) -> Result<f64> {
    let mut product = 1.0;
    for a in from {
        let mut best: f64 = 0.0;
        for b in to {
            best = best.max(word_score(a, b, tree, t, policy)?);
        }
        product *= best;
    }
    Ok(product)
}

/// WUPS for a single answer pair.
pub fn wups_pair(prediction: &str, truth: &str, tree: &TaxonomyTree, t: f64, policy: OutOfTaxonomy) -> Result<f64> {
    let (a, b) = (word_set(prediction), word_set(truth));
    Ok(one_way(&a, &b, tree, t, policy)?.min(one_way(&b, &a, tree, t, policy)?))
}

fn check_lengths<S, T>(predictions: &[S], truths: &[T]) -> Result<()> {
    if predictions.len() != truths.len() {
        return Err(Error::dim("prediction/truth count", &[predictions.len()], &[truths.len()]));
    }
    Ok(())
}

/// Mean WUPS@t with out-of-taxonomy words scored by exact match.
pub fn wups_at_t<S: AsRef<str> + Sync, T: AsRef<str> + Sync>(
    predictions: &[S],
    truths: &[T],
    tree: &TaxonomyTree,
    t: f64,
) -> Result<f64> {
    wups_at_t_with(predictions, truths, tree, t, OutOfTaxonomy::ExactMatch)
}

pub fn wups_at_t_with<S: AsRef<str> + Sync, T: AsRef<str> + Sync>(
    predictions: &[S],
    truths: &[T],
    tree: &TaxonomyTree,
    t: f64,
    policy: OutOfTaxonomy,
) -> Result<f64> {
    check_lengths(predictions, truths)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::arg(format!("threshold must be in [0, 1], got {t}")));
    }
    if predictions.is_empty() {
        log::warn!("WUPS over an empty answer list is defined as 1.0");
        return Ok(1.0);
    }
    let scores: Vec<f64> = predictions
        .par_iter()
        .zip(truths.par_iter())
        .map(|(p, g)| wups_pair(p.as_ref(), g.as_ref(), tree, t, policy))
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Fraction of case-folded exact matches.
pub fn accuracy<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], truths: &[T]) -> Result<f64> {
    check_lengths(predictions, truths)?;
    if predictions.is_empty() {
        return Err(Error::arg("accuracy of an empty answer list"));
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p.as_ref().trim().to_lowercase() == t.as_ref().trim().to_lowercase())
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub accuracy: f64,
    #[serde(rename = "wups_0.0", skip_serializing_if = "Option::is_none", default)]
    pub wups_0_0: Option<f64>,
    #[serde(rename = "wups_0.9", skip_serializing_if = "Option::is_none", default)]
    pub wups_0_9: Option<f64>,
    pub n: usize,
}

/// Accuracy, plus WUPS@0.0 and WUPS@0.9 when a taxonomy is given.
pub fn score_report<S: AsRef<str> + Sync, T: AsRef<str> + Sync>(
    predictions: &[S],
    truths: &[T],
    tree: Option<&TaxonomyTree>,
) -> Result<ScoreReport> {
    let accuracy = accuracy(predictions, truths)?;
    let (wups_0_0, wups_0_9) = match tree {
        Some(tree) => (
            Some(wups_at_t(predictions, truths, tree, 0.0)?),
            Some(wups_at_t(predictions, truths, tree, 0.9)?),
        ),
        None => (None, None),
    };
    Ok(ScoreReport {
        accuracy,
        wups_0_0,
        wups_0_9,
        n: predictions.len(),
    })
}
