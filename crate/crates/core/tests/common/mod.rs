// Plain-loop reference implementations of the three networks and their losses.
// Nothing here touches the tape; every op is written out on Vec<Vec<f64>>.
#![allow(dead_code)]

use coiflow::nn::NetConfig;
use coiflow::params::ParamLayout;

pub type M = Vec<Vec<f64>>;

pub struct Params<'a> {
    pub layout: &'a ParamLayout,
    pub values: &'a [f64],
}

impl Params<'_> {
    pub fn mat(&self, name: &str) -> M {
        let s = self.layout.slice(name).unwrap_or_else(|| panic!("no slice {name}"));
        let v = &self.values[s.range()];
        (0..s.rows).map(|r| v[r * s.cols..(r + 1) * s.cols].to_vec()).collect()
    }

    pub fn row(&self, name: &str) -> Vec<f64> {
        let m = self.mat(name);
        assert_eq!(m.len(), 1);
        m.into_iter().next().unwrap()
    }
}

pub fn from_array(a: &ndarray::Array2<f64>) -> M {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn matmul(a: &M, b: &M) -> M {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            let mut out = vec![0.0; n];
            for (k, &x) in row.iter().enumerate() {
                for j in 0..n {
                    out[j] += x * b[k][j];
                }
            }
            out
        })
        .collect()
}

pub fn affine(x: &M, w: &M, b: &[f64]) -> M {
    let mut y = matmul(x, w);
    for row in &mut y {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

pub fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn hcat(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
}

pub fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu(a: &M) -> M {
    a.iter().map(|r| r.iter().map(|&x| gelu_scalar(x)).collect()).collect()
}

pub fn layer_norm(x: &M, g: &[f64], b: &[f64]) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / sd * g[i] + b[i])
                .collect()
        })
        .collect()
}

/// Rotates column pairs `(2i, 2i+1)` of every head by `pos · 10000^(−2i/d)`.
pub fn rope(x: &M, heads: usize) -> M {
    let d = x[0].len() / heads;
    let mut out = x.clone();
    for (pos, row) in x.iter().enumerate() {
        for h in 0..heads {
            for i in 0..d / 2 {
                let theta = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
                let (a, b) = (row[h * d + 2 * i], row[h * d + 2 * i + 1]);
                out[pos][h * d + 2 * i] = a * theta.cos() - b * theta.sin();
                out[pos][h * d + 2 * i + 1] = a * theta.sin() + b * theta.cos();
            }
        }
    }
    out
}

pub fn attention(q: &M, k: &M, v: &M, heads: usize, causal: bool) -> M {
    let n = q.len();
    let d = q[0].len() / heads;
    let mut out = vec![vec![0.0; q[0].len()]; n];
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        for i in 0..n {
            let visible = if causal { i + 1 } else { n };
            let scores: Vec<f64> = (0..visible)
                .map(|j| {
                    cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let top = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..visible).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

pub fn depthwise(x: &M, w: &M, b: &[f64]) -> M {
    let n = x.len();
    let k = w.len() as isize;
    (0..n)
        .map(|t| {
            let mut row = b.to_vec();
            for j in 0..k {
                let src = t as isize + j - k / 2;
                if src >= 0 && (src as usize) < n {
                    for (c, v) in row.iter_mut().enumerate() {
                        *v += x[src as usize][c] * w[j as usize][c];
                    }
                }
            }
            row
        })
        .collect()
}

/// One sequence through the shared transformer stack.
pub fn trunk(p: &Params, cfg: &NetConfig, mut x: M, causal: bool) -> M {
    for i in 0..cfg.layers {
        let n = |s: &str| format!("block{i}.{s}");
        let h = layer_norm(&x, &p.row(&n("ln1.g")), &p.row(&n("ln1.b")));
        let mut q = affine(&h, &p.mat(&n("attn.wq")), &p.row(&n("attn.bq")));
        let mut k = affine(&h, &p.mat(&n("attn.wk")), &p.row(&n("attn.bk")));
        let v = affine(&h, &p.mat(&n("attn.wv")), &p.row(&n("attn.bv")));
        if cfg.use_rotary {
            q = rope(&q, cfg.heads);
            k = rope(&k, cfg.heads);
        }
        let a = attention(&q, &k, &v, cfg.heads, causal);
        x = add(&x, &affine(&a, &p.mat(&n("attn.wo")), &p.row(&n("attn.bo"))));
        if cfg.use_conv_block {
            let h = layer_norm(&x, &p.row(&n("conv.ln.g")), &p.row(&n("conv.ln.b")));
            let y = gelu(&depthwise(&h, &p.mat(&n("conv.dw_w")), &p.row(&n("conv.dw_b"))));
            x = add(&x, &affine(&y, &p.mat(&n("conv.pw_w")), &p.row(&n("conv.pw_b"))));
        }
        let h = layer_norm(&x, &p.row(&n("ln2.g")), &p.row(&n("ln2.b")));
        let y = gelu(&affine(&h, &p.mat(&n("ffn.w1")), &p.row(&n("ffn.b1"))));
        x = add(&x, &affine(&y, &p.mat(&n("ffn.w2")), &p.row(&n("ffn.b2"))));
    }
    if cfg.layers > 0 {
        x = layer_norm(&x, &p.row("final_ln.g"), &p.row("final_ln.b"));
    }
    x
}

/// Field network output for one state.
pub fn field(p: &Params, cfg: &NetConfig, xt: &M, z: &M, pmt: &M, t: f64) -> M {
    let c = affine(&hcat(xt, z), &p.mat("cond_proj.w"), &p.row("cond_proj.b"));
    let h = affine(&hcat(&c, pmt), &p.mat("in_proj.w"), &p.row("in_proj.b"));
    let half = cfg.time_embed_dim / 2;
    let mut emb = vec![0.0; cfg.time_embed_dim];
    for i in 0..half {
        let arg = 1000.0 * t * 10000f64.powf(-(i as f64) / half as f64);
        emb[i] = arg.sin();
        emb[half + i] = arg.cos();
    }
    let e = gelu(&affine(&vec![emb], &p.mat("time.w1"), &p.row("time.b1")));
    let e = affine(&e, &p.mat("time.w2"), &p.row("time.b2"));
    let h: M = h.iter().map(|r| r.iter().zip(&e[0]).map(|(a, b)| a + b).collect()).collect();
    let h = trunk(p, cfg, h, false);
    affine(&h, &p.mat("head.w"), &p.row("head.b"))
}

/// Raw inputs of one flow-matching example, before any path arithmetic.
pub struct FlowCase {
    pub v1: M,
    pub v_full: M,
    pub noise: M,
    pub split: usize,
    pub t: f64,
    pub sigma_min: f64,
    pub implicit: bool,
    pub semantic_prior: bool,
}

/// Masked regression loss of one example, computed from scratch.
pub fn cfm_loss(p: &Params, cfg: &NetConfig, c: &FlowCase) -> f64 {
    let rows = c.v1.len();
    let dim = c.v1[0].len();
    let mut x1 = c.v_full.clone();
    let mut x0 = c.noise.clone();
    for r in 0..rows {
        for j in 0..dim {
            if !c.implicit {
                x1[r][j] -= c.v1[r][j];
            }
            if c.semantic_prior {
                x0[r][j] += c.v1[r][j];
            }
        }
    }
    for r in 0..c.split {
        x0[r] = x1[r].clone();
    }
    let mut xt = x0.clone();
    let mut pmt = c.v_full.clone();
    for r in 0..rows {
        for j in 0..dim {
            xt[r][j] = (1.0 - (1.0 - c.sigma_min) * c.t) * x0[r][j] + c.t * x1[r][j];
            if r >= c.split {
                pmt[r][j] = 0.0;
            }
        }
    }
    let pred = field(p, cfg, &xt, &c.v1, &pmt, c.t);
    let mut acc = 0.0;
    for r in c.split..rows {
        for j in 0..dim {
            let u = x1[r][j] - (1.0 - c.sigma_min) * x0[r][j];
            acc += (pred[r][j] - u).powi(2);
        }
    }
    acc / ((rows - c.split) * dim) as f64
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let top = row.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = row.iter().map(|v| (v - top).exp()).sum();
    row[target] - top - z.ln()
}

/// Mean next-token NLL over positions `loss_from.max(1)..len`, pooled over sequences.
pub fn lm_loss(p: &Params, cfg: &NetConfig, seqs: &[(Vec<u32>, usize)]) -> f64 {
    let emb = p.mat("tok_emb");
    let mut nll = 0.0;
    let mut count = 0;
    for (tokens, loss_from) in seqs {
        let x: M = tokens.iter().map(|&t| emb[t as usize].clone()).collect();
        let h = trunk(p, cfg, x, true);
        let logits = affine(&h, &p.mat("head.w"), &p.row("head.b"));
        for i in (*loss_from).max(1)..tokens.len() {
            nll -= log_softmax_at(&logits[i - 1], tokens[i] as usize);
            count += 1;
        }
    }
    nll / count as f64
}

/// One masked-token example: `stack[l][i]`, prompt frames `< prompt_len`.
pub struct DiscreteCase {
    pub stack: Vec<Vec<u32>>,
    pub prompt_len: usize,
    pub layer: usize,
    pub masked: Vec<bool>,
}

/// Mean over examples of the mean cross-entropy on masked frames of the target layer.
pub fn discrete_loss(p: &Params, cfg: &NetConfig, codebook: usize, cases: &[DiscreteCase]) -> f64 {
    let mut total = 0.0;
    for c in cases {
        let q = c.stack.len();
        let n = c.stack[0].len();
        let layer_emb = p.mat("layer_emb");
        let mut x = vec![layer_emb[c.layer - 2].clone(); n];
        for l in 1..=q {
            let table = p.mat(&format!("emb{l}"));
            for i in 0..n {
                let id = if i < c.prompt_len || l < c.layer {
                    c.stack[l - 1][i] as usize
                } else if l == c.layer && c.masked[i] {
                    codebook
                } else if l == c.layer {
                    c.stack[l - 1][i] as usize
                } else {
                    continue;
                };
                for (a, b) in x[i].iter_mut().zip(&table[id]) {
                    *a += b;
                }
            }
        }
        let h = trunk(p, cfg, x, false);
        let logits = affine(
            &h,
            &p.mat(&format!("head{}.w", c.layer)),
            &p.row(&format!("head{}.b", c.layer)),
        );
        let mut ce = 0.0;
        let mut k = 0;
        for i in 0..n {
            if c.masked[i] {
                ce -= log_softmax_at(&logits[i], c.stack[c.layer - 1][i] as usize);
                k += 1;
            }
        }
        total += ce / k as f64;
    }
    total / cases.len() as f64
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
