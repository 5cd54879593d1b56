//! Prefix-tree batching of one rollout group's training samples.
//!
//! Every sample's `state ⊕ action` sequence is inserted into a trie. The
//! merged forward walks the trie depth-first with a single key/value cache,
//! computing each node exactly once and truncating the cache when it
//! backtracks. Because every position goes through the same per-token
//! routine with the same cached prefix, the logits are bitwise identical to
//! an independent forward of each sample.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::policy::forward::step_token;
use crate::policy::{log_softmax, KvCache, ModelConfig, PolicyError, PolicyParams};
use crate::trajectory::CompletionSample;
use crate::vocab::Token;

#[derive(Debug, thiserror::Error)]
pub enum PrefixError {
    #[error("sample {index} belongs to group {found}, tree scope is {scope}")]
    Scope { index: usize, found: u64, scope: u64 },
    #[error("sample {0} has an empty token sequence")]
    EmptySample(usize),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// One trie node. Node 0 is the root and carries no token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrieNode {
    pub token: Option<Token>,
    pub parent: usize,
    /// Number of tokens on the path from the root, i.e. the number of keys
    /// this position attends over.
    pub depth: usize,
    pub children: BTreeMap<Token, usize>,
    /// How many samples pass through this node.
    pub pass_count: usize,
    /// How many samples end exactly here.
    pub end_count: usize,
}

/// Where a sample lives in the tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub leaf: usize,
    pub seq_len: usize,
    pub state_len: usize,
    pub action_len: usize,
}

/// Trie over one group's samples. Nodes are numbered in depth-first
/// preorder with children visited in token order, so `nodes` is the same
/// for any permutation of the input; `samples` follows input order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixTree {
    pub group_id: u64,
    pub nodes: Vec<TrieNode>,
    pub samples: Vec<SampleMeta>,
}

impl PrefixTree {
    pub fn node_count(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Nodes on the path of two or more samples.
    pub fn shared_node_count(&self) -> usize {
        self.nodes[1..].iter().filter(|n| n.pass_count >= 2).count()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Node indices from the first token to the sample's last token.
    pub fn path(&self, sample: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.samples[sample].seq_len);
        let mut at = self.samples[sample].leaf;
        while at != 0 {
            out.push(at);
            at = self.nodes[at].parent;
        }
        out.reverse();
        out
    }

    /// Token sequence of a root-to-node path.
    pub fn sequence(&self, sample: usize) -> Vec<Token> {
        self.path(sample).into_iter().map(|n| self.nodes[n].token.unwrap()).collect()
    }

    /// Input indices of the samples whose path contains `node`.
    pub fn members(&self, node: usize) -> Vec<usize> {
        (0..self.samples.len()).filter(|&s| self.path(s).contains(&node)).collect()
    }
}

/// Builds the trie over the samples' full sequences. All samples must
/// belong to rollout group `scope`.
pub fn build_tree(samples: &[CompletionSample], scope: u64) -> Result<PrefixTree, PrefixError> {
    let mut seqs = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.group_id != scope {
            return Err(PrefixError::Scope { index: i, found: s.group_id, scope });
        }
        let seq = s.full_sequence();
        if seq.is_empty() {
            return Err(PrefixError::EmptySample(i));
        }
        seqs.push(seq);
    }
    // Insert into a scratch trie, then renumber in canonical preorder.
    let mut scratch = vec![TrieNode {
        token: None,
        parent: 0,
        depth: 0,
        children: BTreeMap::new(),
        pass_count: samples.len(),
        end_count: 0,
    }];
    let mut leaves = Vec::with_capacity(seqs.len());
    for seq in &seqs {
        let mut at = 0;
        for (k, &t) in seq.iter().enumerate() {
            at = match scratch[at].children.get(&t) {
                Some(&c) => c,
                None => {
                    scratch.push(TrieNode {
                        token: Some(t),
                        parent: at,
                        depth: k + 1,
                        children: BTreeMap::new(),
                        pass_count: 0,
                        end_count: 0,
                    });
                    let c = scratch.len() - 1;
                    scratch[at].children.insert(t, c);
                    c
                }
            };
            scratch[at].pass_count += 1;
        }
        scratch[at].end_count += 1;
        leaves.push(at);
    }
    let mut order = Vec::with_capacity(scratch.len());
    let mut stack = vec![0usize];
    while let Some(n) = stack.pop() {
        order.push(n);
        stack.extend(scratch[n].children.values().rev());
    }
    let mut renumber = vec![0usize; scratch.len()];
    for (new, &old) in order.iter().enumerate() {
        renumber[old] = new;
    }
    let nodes = order
        .iter()
        .map(|&old| {
            let n = &scratch[old];
            TrieNode {
                token: n.token,
                parent: renumber[n.parent],
                depth: n.depth,
                children: n.children.iter().map(|(&t, &c)| (t, renumber[c])).collect(),
                pass_count: n.pass_count,
                end_count: n.end_count,
            }
        })
        .collect();
    let samples = samples
        .iter()
        .zip(leaves)
        .map(|(s, leaf)| SampleMeta {
            leaf: renumber[leaf],
            seq_len: s.state_tokens.len() + s.action_tokens.len(),
            state_len: s.state_tokens.len(),
            action_len: s.action_tokens.len(),
        })
        .collect();
    Ok(PrefixTree { group_id: scope, nodes, samples })
}

/// Multiply-accumulate counting rule for one forward position.
///
/// A token attending over `n` keys costs `attn · n + constant`, where per
/// layer the attention scores and value mixing take `2d` MACs per key, the
/// four `d×d` projections and the `d×4d`/`4d×d` MLP take `12d²`, and the two
/// norms `2d`; the unembedding adds `d·V` once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub attn: u64,
    pub constant: u64,
}

impl CostModel {
    pub fn new(d_model: usize, layers: usize, vocab: usize) -> Self {
        let (d, l, v) = (d_model as u64, layers as u64, vocab as u64);
        Self { attn: 2 * d * l, constant: l * (12 * d * d + 2 * d) + d * v }
    }

    pub fn for_config(c: &ModelConfig) -> Self {
        Self::new(c.d_model, c.layers, c.vocab)
    }

    /// Cost of the token at 1-based position `n`.
    pub fn token(&self, n: usize) -> u64 {
        self.attn * n as u64 + self.constant
    }

    /// Cost of processing a whole sequence of length `m` from scratch.
    pub fn sequence(&self, m: usize) -> u64 {
        let m = m as u64;
        self.attn * m * (m + 1) / 2 + self.constant * m
    }
}

/// Work of one merged batch, split into nodes shared by several samples
/// and nodes on a single sample's branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub group_id: u64,
    pub shared_flops: u64,
    pub branch_flops: u64,
    pub independent_flops: u64,
    pub ratio: f64,
}

impl FlopLedger {
    pub fn for_tree(tree: &PrefixTree, cost: &CostModel) -> Self {
        let (mut shared, mut branch) = (0u64, 0u64);
        for n in &tree.nodes[1..] {
            let c = cost.token(n.depth);
            if n.pass_count >= 2 {
                shared += c;
            } else {
                branch += c;
            }
        }
        let independent: u64 = tree.samples.iter().map(|s| cost.sequence(s.seq_len)).sum();
        let merged = shared + branch;
        let ratio = if merged == 0 { 1.0 } else { independent as f64 / merged as f64 };
        Self {
            group_id: tree.group_id,
            shared_flops: shared,
            branch_flops: branch,
            independent_flops: independent,
            ratio,
        }
    }

    pub fn merged_flops(&self) -> u64 {
        self.shared_flops + self.branch_flops
    }
}

/// Logits of every sample's full sequence, row-major `seq_len × V`, in
/// input order.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedLogits {
    pub vocab: usize,
    pub per_sample: Vec<Vec<f64>>,
    pub ledger: FlopLedger,
}

/// Computes each trie node once, resuming from the cached parent path.
pub fn merged_forward(params: &PolicyParams, tree: &PrefixTree) -> Result<MergedLogits, PrefixError> {
    let cap = params.config.context_cap;
    if tree.depth() > cap {
        return Err(PolicyError::ContextCap { len: tree.depth(), cap }.into());
    }
    for n in &tree.nodes[1..] {
        params.check_tokens(&[n.token.unwrap()])?;
    }
    let v = params.config.vocab;
    let mut node_logits: Vec<Vec<f64>> = vec![Vec::new(); tree.nodes.len()];
    let mut cache = KvCache::new(params);
    // Preorder numbering means the cache holds exactly the parent's path
    // once truncated to `depth - 1`.
    for (i, n) in tree.nodes.iter().enumerate().skip(1) {
        cache.truncate(n.depth - 1);
        debug_assert_eq!(cache.len(), n.depth - 1);
        node_logits[i] = step_token(params, &mut cache, n.token.unwrap(), None);
    }
    let per_sample = (0..tree.samples.len())
        .map(|s| {
            let path = tree.path(s);
            let mut out = Vec::with_capacity(path.len() * v);
            for n in path {
                out.extend_from_slice(&node_logits[n]);
            }
            out
        })
        .collect();
    let ledger = FlopLedger::for_tree(tree, &CostModel::for_config(&params.config));
    Ok(MergedLogits { vocab: v, per_sample, ledger })
}

/// Action-position logits per sample (row-major `action_len × V`), in
/// input order. Row `t` predicts action token `t`.
pub fn deconstruct(tree: &PrefixTree, merged: &MergedLogits) -> Result<Vec<Vec<f64>>, PrefixError> {
    if merged.per_sample.len() != tree.samples.len() {
        return Err(PrefixError::Integrity(format!(
            "{} logit blocks for {} samples",
            merged.per_sample.len(),
            tree.samples.len()
        )));
    }
    let v = merged.vocab;
    tree.samples
        .iter()
        .zip(&merged.per_sample)
        .enumerate()
        .map(|(i, (m, logits))| {
            if logits.len() != m.seq_len * v
                || m.state_len + m.action_len != m.seq_len
                || tree.nodes[m.leaf].depth != m.seq_len
            {
                return Err(PrefixError::Integrity(format!("sample {i}: metadata does not match logits")));
            }
            if m.action_len == 0 {
                return Ok(Vec::new());
            }
            if m.state_len == 0 {
                return Err(PrefixError::Integrity(format!("sample {i}: action without state")));
            }
            let lo = (m.state_len - 1) * v;
            Ok(logits[lo..lo + m.action_len * v].to_vec())
        })
        .collect()
}

/// Per-token log-probabilities of each sample's action tokens through the
/// merged path, plus the ledger of the work done.
pub fn merged_action_log_probs(
    params: &PolicyParams,
    samples: &[CompletionSample],
    scope: u64,
) -> Result<(Vec<Vec<f64>>, FlopLedger), PrefixError> {
    let tree = build_tree(samples, scope)?;
    let merged = merged_forward(params, &tree)?;
    let rows = deconstruct(&tree, &merged)?;
    let v = params.config.vocab;
    let lps = samples
        .iter()
        .zip(rows)
        .map(|(s, r)| {
            s.action_tokens.iter().enumerate().map(|(t, a)| log_softmax(&r[t * v..(t + 1) * v])[a.id()]).collect()
        })
        .collect();
    Ok((lps, merged.ledger))
}
