//! Forward evaluation, log-probabilities and sampling.
//!
//! Summation order, fixed everywhere:
//! * `matvec`: `out[j] = Σ_i x[i]·W[i][j]` for `i` ascending, starting from
//!   `0.0`; biases are added after the sum.
//! * RMSNorm: `ms = (Σ_i x_i²)/d`, `r = 1/sqrt(ms + ε)`, `y_i = (x_i·r)·g_i`.
//! * attention: scores over key positions ascending, max-shifted softmax
//!   with the normalizer summed ascending, values mixed ascending.
//!
//! Every position is computed by the same [`step_token`] routine whether it
//! comes from a fresh forward, a cache resume, or the training forward.

use rand::Rng;

use super::{BlockLayout, PolicyError, PolicyParams};
use crate::seed;
use crate::vocab::Token;

pub(crate) const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn matvec(x: &[f64], w: &[f64], n_out: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n_out..(i + 1) * n_out];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// Returns the inverse RMS `r`.
#[inline]
pub(crate) fn rmsnorm(x: &[f64], g: &[f64], out: &mut [f64]) -> f64 {
    let mut ss = 0.0;
    for &v in x {
        ss += v * v;
    }
    let r = 1.0 / (ss / x.len() as f64 + RMS_EPS).sqrt();
    for ((o, &v), &gi) in out.iter_mut().zip(x).zip(g) {
        *o = v * r * gi;
    }
    r
}

#[inline]
pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Max-shifted log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &l in logits {
        z += (l - m).exp();
    }
    let lse = m + z.ln();
    logits.iter().map(|&l| l - lse).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerKv {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

/// Per-layer key/value rows for every processed position.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub(crate) layers: Vec<LayerKv>,
    len: usize,
    d: usize,
}

impl KvCache {
    pub fn new(params: &PolicyParams) -> Self {
        let c = &params.config;
        Self { layers: (0..c.layers).map(|_| LayerKv { k: Vec::new(), v: Vec::new() }).collect(), len: 0, d: c.d_model }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drops every position `>= len`.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        for l in &mut self.layers {
            l.k.truncate(len * self.d);
            l.v.truncate(len * self.d);
        }
        self.len = len;
    }
}

/// Activations of one block at one position, kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub(crate) struct BlockActs {
    pub x_in: Vec<f64>,
    pub r1: f64,
    pub h: Vec<f64>,
    pub q: Vec<f64>,
    /// `heads × (pos+1)` attention weights.
    pub probs: Vec<f64>,
    pub o: Vec<f64>,
    pub x_mid: Vec<f64>,
    pub r2: f64,
    pub h2: Vec<f64>,
    pub u: Vec<f64>,
    pub g: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct TokenActs {
    pub blocks: Vec<BlockActs>,
    pub x_final: Vec<f64>,
    pub rf: f64,
    pub hf: Vec<f64>,
}

fn block_step(
    p: &PolicyParams,
    b: &BlockLayout,
    kv: &mut LayerKv,
    pos: usize,
    x: &mut [f64],
    rec: Option<&mut BlockActs>,
) {
    let c = &p.config;
    let d = c.d_model;
    let f = c.mlp_dim();
    let hd = c.head_dim();
    let w = &p.data;
    let x_in = rec.as_ref().map(|_| x.to_vec());

    let mut h = vec![0.0; d];
    let r1 = rmsnorm(x, &w[b.ln1..b.ln1 + d], &mut h);
    let mut q = vec![0.0; d];
    let mut k = vec![0.0; d];
    let mut v = vec![0.0; d];
    matvec(&h, &w[b.wq..b.wq + d * d], d, &mut q);
    matvec(&h, &w[b.wk..b.wk + d * d], d, &mut k);
    matvec(&h, &w[b.wv..b.wv + d * d], d, &mut v);
    kv.k.extend_from_slice(&k);
    kv.v.extend_from_slice(&v);
    debug_assert_eq!(kv.k.len(), (pos + 1) * d);

    let n = pos + 1;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut o = vec![0.0; d];
    let mut probs = vec![0.0; c.heads * n];
    for head in 0..c.heads {
        let lo = head * hd;
        let pr = &mut probs[head * n..(head + 1) * n];
        let mut m = f64::NEG_INFINITY;
        for (s, ps) in pr.iter_mut().enumerate() {
            let ks = &kv.k[s * d + lo..s * d + lo + hd];
            let mut dot = 0.0;
            for (qi, ki) in q[lo..lo + hd].iter().zip(ks) {
                dot += qi * ki;
            }
            *ps = dot * scale;
            m = m.max(*ps);
        }
        let mut z = 0.0;
        for ps in pr.iter_mut() {
            *ps = (*ps - m).exp();
            z += *ps;
        }
        for ps in pr.iter_mut() {
            *ps /= z;
        }
        let oh = &mut o[lo..lo + hd];
        for (s, &a) in pr.iter().enumerate() {
            let vs = &kv.v[s * d + lo..s * d + lo + hd];
            for (oi, vi) in oh.iter_mut().zip(vs) {
                *oi += a * vi;
            }
        }
    }
    let mut attn = vec![0.0; d];
    matvec(&o, &w[b.wo..b.wo + d * d], d, &mut attn);
    for (xi, ai) in x.iter_mut().zip(&attn) {
        *xi += ai;
    }
    let x_mid = rec.as_ref().map(|_| x.to_vec());

    let mut h2 = vec![0.0; d];
    let r2 = rmsnorm(x, &w[b.ln2..b.ln2 + d], &mut h2);
    let mut u = vec![0.0; f];
    matvec(&h2, &w[b.w1..b.w1 + d * f], f, &mut u);
    for (ui, bi) in u.iter_mut().zip(&w[b.b1..b.b1 + f]) {
        *ui += bi;
    }
    let g: Vec<f64> = u.iter().map(|&ui| gelu(ui)).collect();
    let mut m = vec![0.0; d];
    matvec(&g, &w[b.w2..b.w2 + f * d], d, &mut m);
    for (mi, bi) in m.iter_mut().zip(&w[b.b2..b.b2 + d]) {
        *mi += bi;
    }
    for (xi, mi) in x.iter_mut().zip(&m) {
        *xi += mi;
    }

    if let Some(r) = rec {
        *r = BlockActs { x_in: x_in.unwrap(), r1, h, q, probs, o, x_mid: x_mid.unwrap(), r2, h2, u, g };
    }
}

/// Processes one token at position `cache.len()`, appending its keys and
/// values to the cache, and returns its logits.
pub(crate) fn step_token(
    p: &PolicyParams,
    cache: &mut KvCache,
    token: Token,
    mut rec: Option<&mut TokenActs>,
) -> Vec<f64> {
    let c = &p.config;
    let d = c.d_model;
    let pos = cache.len;
    let l = &p.layout;
    let w = &p.data;
    let te = l.tok_emb + token.id() * d;
    let pe = l.pos_emb + pos * d;
    let mut x: Vec<f64> = (0..d).map(|i| w[te + i] + w[pe + i]).collect();
    if let Some(r) = rec.as_deref_mut() {
        r.blocks = vec![BlockActs::default(); c.layers];
    }
    for (bi, b) in l.blocks.iter().enumerate() {
        let br = rec.as_deref_mut().map(|r| &mut r.blocks[bi]);
        block_step(p, b, &mut cache.layers[bi], pos, &mut x, br);
    }
    cache.len += 1;
    let mut hf = vec![0.0; d];
    let rf = rmsnorm(&x, &w[l.ln_f..l.ln_f + d], &mut hf);
    let mut logits = vec![0.0; c.vocab];
    matvec(&hf, &w[l.unembed..l.unembed + d * c.vocab], c.vocab, &mut logits);
    if let Some(r) = rec {
        r.x_final = x;
        r.rf = rf;
        r.hf = hf;
    }
    logits
}

/// Logits for each input position plus the cache needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Row-major `len × V`.
    pub logits: Vec<f64>,
    pub vocab: usize,
    pub cache: KvCache,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.logits.len() / self.vocab
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn logits_at(&self, t: usize) -> &[f64] {
        &self.logits[t * self.vocab..(t + 1) * self.vocab]
    }
}

/// Feeds `tokens` after whatever `cache` already holds. Returns row-major
/// logits for the new positions.
pub fn forward_from(p: &PolicyParams, cache: &mut KvCache, tokens: &[Token]) -> Result<Vec<f64>, PolicyError> {
    let total = cache.len() + tokens.len();
    if total > p.config.context_cap {
        return Err(PolicyError::ContextCap { len: total, cap: p.config.context_cap });
    }
    p.check_tokens(tokens)?;
    let mut out = Vec::with_capacity(tokens.len() * p.config.vocab);
    for &t in tokens {
        out.extend(step_token(p, cache, t, None));
    }
    Ok(out)
}

pub fn forward(p: &PolicyParams, tokens: &[Token]) -> Result<ForwardTrace, PolicyError> {
    if tokens.is_empty() {
        return Err(PolicyError::EmptyInput);
    }
    let mut cache = KvCache::new(p);
    let logits = forward_from(p, &mut cache, tokens)?;
    Ok(ForwardTrace { logits, vocab: p.config.vocab, cache })
}

fn scored_sequence(context: &[Token], action: &[Token]) -> Vec<Token> {
    let mut seq = context.to_vec();
    if let Some((_, head)) = action.split_last() {
        seq.extend_from_slice(head);
    }
    seq
}

/// Per-token `log π(action_t | context, action_<t)`.
pub fn token_log_probs(p: &PolicyParams, context: &[Token], action: &[Token]) -> Result<Vec<f64>, PolicyError> {
    if context.is_empty() {
        return Err(PolicyError::EmptyInput);
    }
    if action.is_empty() {
        return Ok(Vec::new());
    }
    p.check_tokens(action)?;
    let trace = forward(p, &scored_sequence(context, action))?;
    let base = context.len() - 1;
    Ok(action.iter().enumerate().map(|(t, a)| log_softmax(trace.logits_at(base + t))[a.id()]).collect())
}

pub fn log_prob(p: &PolicyParams, context: &[Token], action: &[Token]) -> Result<f64, PolicyError> {
    Ok(token_log_probs(p, context, action)?.iter().sum())
}

/// A sampled completion with the behavior log-probability of each token.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub tokens: Vec<Token>,
    pub logprobs: Vec<f64>,
}

/// Temperature-1 autoregressive sampling. Stops after emitting a token in
/// `stop_set`, after `max_tokens`, or when `context ⊕ output` reaches the
/// context cap.
pub fn sample_action(
    p: &PolicyParams,
    context: &[Token],
    max_tokens: usize,
    stop_set: &[Token],
    rng_seed: u64,
) -> Result<Completion, PolicyError> {
    if context.is_empty() {
        return Err(PolicyError::EmptyInput);
    }
    let cap = p.config.context_cap;
    if context.len() >= cap {
        return Err(PolicyError::ContextCap { len: context.len() + 1, cap });
    }
    let limit = max_tokens.max(1).min(cap - context.len());
    let mut rng = seed::rng(rng_seed);
    let mut cache = KvCache::new(p);
    let ctx_logits = forward_from(p, &mut cache, context)?;
    let v = p.config.vocab;
    let mut logits = ctx_logits[ctx_logits.len() - v..].to_vec();
    let mut out = Completion { tokens: Vec::new(), logprobs: Vec::new() };
    loop {
        let lp = log_softmax(&logits);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = v - 1;
        for (j, &l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                pick = j;
                break;
            }
        }
        let tok = Token(pick as u32);
        out.tokens.push(tok);
        out.logprobs.push(lp[pick]);
        if stop_set.contains(&tok) || out.tokens.len() >= limit {
            break;
        }
        logits = step_token(p, &mut cache, tok, None);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{InitConfig, ModelConfig};
    use super::*;
    use crate::vocab::tokens;

    fn params(seed: u64) -> PolicyParams {
        PolicyParams::init(ModelConfig { context_cap: 32, ..Default::default() }, InitConfig::default(), seed).unwrap()
    }

    #[test]
    fn single_token_trace() {
        let t = forward(&params(1), &tokens(&[3])).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.cache.len(), 1);
    }

    #[test]
    fn prefix_logits_are_causal() {
        let p = params(2);
        let a = forward(&p, &tokens(&[20])).unwrap();
        let b = forward(&p, &tokens(&[20, 33])).unwrap();
        assert_eq!(a.logits_at(0), b.logits_at(0));
    }

    #[test]
    fn overlong_input_rejected() {
        let p = params(3);
        let long = vec![Token(1); 33];
        assert!(matches!(forward(&p, &long), Err(PolicyError::ContextCap { .. })));
        assert!(matches!(forward(&p, &[]), Err(PolicyError::EmptyInput)));
        assert!(matches!(forward(&p, &[Token(64)]), Err(PolicyError::InvalidToken { .. })));
    }

    #[test]
    fn cache_resume_exact_for_every_split() {
        let p = PolicyParams::init(ModelConfig::default(), InitConfig::default(), 4).unwrap();
        let seq: Vec<Token> = (0..16).map(|i| Token((i * 7 + 3) % 64)).collect();
        let full = forward(&p, &seq).unwrap();
        for split in 0..seq.len() {
            let mut cache = KvCache::new(&p);
            forward_from(&p, &mut cache, &seq[..split]).unwrap();
            let rest = forward_from(&p, &mut cache, &seq[split..]).unwrap();
            assert_eq!(&rest[..], &full.logits[split * 64..], "split {split}");
        }
    }

    #[test]
    fn truncate_then_resume_matches() {
        let p = params(5);
        let seq = tokens(&[1, 20, 21, 22, 23]);
        let alt = tokens(&[1, 20, 40, 41]);
        let mut trace = forward(&p, &seq).unwrap();
        trace.cache.truncate(2);
        let resumed = forward_from(&p, &mut trace.cache, &alt[2..]).unwrap();
        let direct = forward(&p, &alt).unwrap();
        assert_eq!(&resumed[..], &direct.logits[2 * 64..]);
    }

    #[test]
    fn softmax_normalized() {
        let p = params(6);
        let t = forward(&p, &tokens(&[1, 2, 3, 4, 5, 6])).unwrap();
        for i in 0..t.len() {
            let s: f64 = log_softmax(t.logits_at(i)).iter().map(|l| l.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_prob_additive() {
        let p = params(7);
        let ctx = tokens(&[1, 30]);
        let a = tokens(&[40, 41]);
        let joint = log_prob(&p, &ctx, &a).unwrap();
        let first = log_prob(&p, &ctx, &a[..1]).unwrap();
        let second = log_prob(&p, &tokens(&[1, 30, 40]), &a[1..]).unwrap();
        assert!((joint - (first + second)).abs() < 1e-12);
        assert!(joint < 0.0);
    }

    #[test]
    fn uniform_params_give_log_inverse_vocab() {
        let p = PolicyParams::zeros(ModelConfig::default()).unwrap();
        let lp = log_prob(&p, &tokens(&[1]), &tokens(&[9])).unwrap();
        assert!((lp + (64f64).ln()).abs() < 1e-12);
        assert!((lp + 4.1589).abs() < 1e-4);
    }

    #[test]
    fn sampling_deterministic_and_logprobs_consistent() {
        let p = params(8);
        let ctx = tokens(&[1, 20, 21]);
        let a = sample_action(&p, &ctx, 6, &[Token(7)], 99).unwrap();
        let b = sample_action(&p, &ctx, 6, &[Token(7)], 99).unwrap();
        assert_eq!(a, b);
        assert!(!a.tokens.is_empty() && a.tokens.len() <= 6);
        let lps = token_log_probs(&p, &ctx, &a.tokens).unwrap();
        assert_eq!(lps, a.logprobs);
    }

    #[test]
    fn sampling_respects_cap() {
        let p = params(9);
        let ctx = vec![Token(20); 30];
        let a = sample_action(&p, &ctx, 10, &[], 1).unwrap();
        assert_eq!(a.tokens.len(), 2);
        assert!(sample_action(&p, &[Token(20); 32], 10, &[], 1).is_err());
    }

    #[test]
    fn peaked_policy_emits_stop_token() {
        let mut p = PolicyParams::zeros(ModelConfig::default()).unwrap();
        let l = p.layout.clone();
        let d = p.config.d_model;
        p.data[l.ln_f..l.ln_f + d].fill(1.0);
        // constant embedding so the final hidden state is a fixed positive vector
        for v in 0..64 {
            p.data[l.tok_emb + v * d..l.tok_emb + (v + 1) * d].fill(1.0);
        }
        for i in 0..d {
            p.data[l.unembed + i * 64 + 7] = 10.0;
        }
        let c = sample_action(&p, &tokens(&[1, 2]), 5, &[Token(7)], 3).unwrap();
        assert_eq!(c.tokens, vec![Token(7)]);
    }
}
