//! Exact reverse-mode gradients of (weighted) action log-probabilities.

use super::forward::{gelu_grad, log_softmax, step_token, KvCache, TokenActs};
use super::{Gradient, PolicyError, PolicyParams};
use crate::vocab::Token;

/// `gw[i][j] += x_i · dy_j`
#[inline]
fn outer_acc(gw: &mut [f64], x: &[f64], dy: &[f64]) {
    let n_out = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        let row = &mut gw[i * n_out..(i + 1) * n_out];
        for (g, &d) in row.iter_mut().zip(dy) {
            *g += xi * d;
        }
    }
}

/// `out_i += Σ_j W[i][j] · dy_j`
#[inline]
fn matvec_t_acc(w: &[f64], dy: &[f64], out: &mut [f64]) {
    let n_out = dy.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * n_out..(i + 1) * n_out];
        let mut s = 0.0;
        for (&wij, &d) in row.iter().zip(dy) {
            s += wij * d;
        }
        *o += s;
    }
}

/// Backward through `y = (x·r)·g`; accumulates into `dx` and `dg`.
#[inline]
fn rmsnorm_back(x: &[f64], r: f64, g: &[f64], dy: &[f64], dx: &mut [f64], dg: &mut [f64]) {
    let d = x.len() as f64;
    let mut s = 0.0;
    for ((&dyi, &gi), &xi) in dy.iter().zip(g).zip(x) {
        s += dyi * gi * xi;
    }
    let c = r * r * r / d;
    for k in 0..x.len() {
        dx[k] += r * g[k] * dy[k] - c * x[k] * s;
        dg[k] += dy[k] * x[k] * r;
    }
}

/// Gradient of `Σ_t weights[t] · log π(action_t | context, action_<t)`.
/// Returns the weighted sum together with its gradient.
pub fn grad_weighted_log_prob(
    p: &PolicyParams,
    context: &[Token],
    action: &[Token],
    weights: &[f64],
) -> Result<(f64, Gradient), PolicyError> {
    assert_eq!(action.len(), weights.len(), "one weight per action token");
    if context.is_empty() {
        return Err(PolicyError::EmptyInput);
    }
    let mut grad = p.zeros_like();
    if action.is_empty() {
        return Ok((0.0, grad));
    }
    p.check_tokens(context)?;
    p.check_tokens(action)?;
    let mut seq = context.to_vec();
    seq.extend_from_slice(&action[..action.len() - 1]);
    let cap = p.config.context_cap;
    if seq.len() > cap {
        return Err(PolicyError::ContextCap { len: seq.len(), cap });
    }

    let c = p.config;
    let (d, f, v, hd) = (c.d_model, c.mlp_dim(), c.vocab, c.head_dim());
    let l = &p.layout;
    let w = &p.data;
    let n = seq.len();
    let base = context.len() - 1;

    let mut cache = KvCache::new(p);
    let mut acts: Vec<TokenActs> = Vec::with_capacity(n);
    let mut value = 0.0;
    // dx: gradient w.r.t. the residual stream at the current layer boundary.
    let mut dx = vec![vec![0.0; d]; n];
    for (pos, &tok) in seq.iter().enumerate() {
        let mut rec = TokenActs::default();
        let logits = step_token(p, &mut cache, tok, Some(&mut rec));
        if pos >= base {
            let t = pos - base;
            let wt = weights[t];
            let lp = log_softmax(&logits);
            let target = action[t].id();
            value += wt * lp[target];
            if wt != 0.0 {
                let dlogit: Vec<f64> =
                    lp.iter().enumerate().map(|(j, &lpj)| wt * ((j == target) as u8 as f64 - lpj.exp())).collect();
                outer_acc(&mut grad.data[l.unembed..l.unembed + d * v], &rec.hf, &dlogit);
                let mut dhf = vec![0.0; d];
                matvec_t_acc(&w[l.unembed..l.unembed + d * v], &dlogit, &mut dhf);
                rmsnorm_back(
                    &rec.x_final,
                    rec.rf,
                    &w[l.ln_f..l.ln_f + d],
                    &dhf,
                    &mut dx[pos],
                    &mut grad.data[l.ln_f..l.ln_f + d],
                );
            }
        }
        acts.push(rec);
    }

    let scale = 1.0 / (hd as f64).sqrt();
    for (bi, b) in l.blocks.iter().enumerate().rev() {
        let kv = &cache.layers[bi];
        // MLP
        let mut dx_mid = vec![vec![0.0; d]; n];
        for pos in 0..n {
            let a = &acts[pos].blocks[bi];
            let dm = &dx[pos];
            for (g, &x) in grad.data[b.b2..b.b2 + d].iter_mut().zip(dm) {
                *g += x;
            }
            outer_acc(&mut grad.data[b.w2..b.w2 + f * d], &a.g, dm);
            let mut dg = vec![0.0; f];
            matvec_t_acc(&w[b.w2..b.w2 + f * d], dm, &mut dg);
            let du: Vec<f64> = dg.iter().zip(&a.u).map(|(&g, &u)| g * gelu_grad(u)).collect();
            for (g, &x) in grad.data[b.b1..b.b1 + f].iter_mut().zip(&du) {
                *g += x;
            }
            outer_acc(&mut grad.data[b.w1..b.w1 + d * f], &a.h2, &du);
            let mut dh2 = vec![0.0; d];
            matvec_t_acc(&w[b.w1..b.w1 + d * f], &du, &mut dh2);
            dx_mid[pos].copy_from_slice(dm);
            rmsnorm_back(
                &a.x_mid,
                a.r2,
                &w[b.ln2..b.ln2 + d],
                &dh2,
                &mut dx_mid[pos],
                &mut grad.data[b.ln2..b.ln2 + d],
            );
        }
        // attention
        let mut dq = vec![vec![0.0; d]; n];
        let mut dk = vec![vec![0.0; d]; n];
        let mut dv = vec![vec![0.0; d]; n];
        for pos in 0..n {
            let a = &acts[pos].blocks[bi];
            let dattn = &dx_mid[pos];
            outer_acc(&mut grad.data[b.wo..b.wo + d * d], &a.o, dattn);
            let mut dout = vec![0.0; d];
            matvec_t_acc(&w[b.wo..b.wo + d * d], dattn, &mut dout);
            let m = pos + 1;
            for head in 0..c.heads {
                let lo = head * hd;
                let pr = &a.probs[head * m..(head + 1) * m];
                let doh = &dout[lo..lo + hd];
                let mut da = vec![0.0; m];
                for s in 0..m {
                    let vs = &kv.v[s * d + lo..s * d + lo + hd];
                    da[s] = doh.iter().zip(vs).map(|(x, y)| x * y).sum();
                    for (dvi, &doi) in dv[s][lo..lo + hd].iter_mut().zip(doh) {
                        *dvi += pr[s] * doi;
                    }
                }
                let dot: f64 = pr.iter().zip(&da).map(|(x, y)| x * y).sum();
                for s in 0..m {
                    let ds = pr[s] * (da[s] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ks = &kv.k[s * d + lo..s * d + lo + hd];
                    for (dqi, &ki) in dq[pos][lo..lo + hd].iter_mut().zip(ks) {
                        *dqi += ds * ki;
                    }
                    for (dki, &qi) in dk[s][lo..lo + hd].iter_mut().zip(&a.q[lo..lo + hd]) {
                        *dki += ds * qi;
                    }
                }
            }
        }
        for pos in 0..n {
            let a = &acts[pos].blocks[bi];
            outer_acc(&mut grad.data[b.wq..b.wq + d * d], &a.h, &dq[pos]);
            outer_acc(&mut grad.data[b.wk..b.wk + d * d], &a.h, &dk[pos]);
            outer_acc(&mut grad.data[b.wv..b.wv + d * d], &a.h, &dv[pos]);
            let mut dh = vec![0.0; d];
            matvec_t_acc(&w[b.wq..b.wq + d * d], &dq[pos], &mut dh);
            matvec_t_acc(&w[b.wk..b.wk + d * d], &dk[pos], &mut dh);
            matvec_t_acc(&w[b.wv..b.wv + d * d], &dv[pos], &mut dh);
            let mut dxi = dx_mid[pos].clone();
            rmsnorm_back(&a.x_in, a.r1, &w[b.ln1..b.ln1 + d], &dh, &mut dxi, &mut grad.data[b.ln1..b.ln1 + d]);
            dx[pos] = dxi;
        }
    }
    for (pos, &tok) in seq.iter().enumerate() {
        let te = l.tok_emb + tok.id() * d;
        let pe = l.pos_emb + pos * d;
        for i in 0..d {
            grad.data[te + i] += dx[pos][i];
            grad.data[pe + i] += dx[pos][i];
        }
    }
    Ok((value, grad))
}

/// `∇_θ log π(action | context)`.
pub fn grad_log_prob(p: &PolicyParams, context: &[Token], action: &[Token]) -> Result<Gradient, PolicyError> {
    let ones = vec![1.0; action.len()];
    grad_weighted_log_prob(p, context, action, &ones).map(|(_, g)| g)
}
