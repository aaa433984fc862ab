//! Straight-line reference implementations used as test oracles.
//!
//! Written against plain nested vectors with textbook formulas, sharing no
//! code with the library beyond reading parameter values by name.

#![allow(dead_code)]

use capcore::model::ModelParams;
use capcore::params::ParamStore;
use capcore::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn vecf(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(p, &x)| x * b[p][j]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|x| x.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Softmax over the allowed entries of a row; forbidden entries get 0.
pub fn masked_softmax(row: &[f64], allowed: &[bool]) -> Vec<f64> {
    let max = row
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row
        .iter()
        .zip(allowed)
        .map(|(v, &a)| if a { (v - max).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub struct Attn {
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
}

impl Attn {
    pub fn load(p: &ModelParams, prefix: &str) -> Self {
        let m = |n: &str| mat(p.get(&format!("{prefix}.{n}")).unwrap());
        let v = |n: &str| vecf(p.get(&format!("{prefix}.{n}")).unwrap());
        Self {
            wq: m("wq"),
            bq: v("bq"),
            wk: m("wk"),
            bk: v("bk"),
            wv: m("wv"),
            bv: v("bv"),
            wo: m("wo"),
            bo: v("bo"),
        }
    }
}

/// `allowed(i, j)` says whether query `i` may see key `j`.
pub fn mha(q_in: &Mat, kv_in: &Mat, w: &Attn, heads: usize, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
    let q = add_row(&mm(q_in, &w.wq), &w.bq);
    let k = add_row(&mm(kv_in, &w.wk), &w.bk);
    let v = add_row(&mm(kv_in, &w.wv), &w.bv);
    let d = q[0].len();
    let dk = d / heads;
    let mut ctx = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..q.len() {
            let scores: Vec<f64> = (0..k.len())
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mask: Vec<bool> = (0..k.len()).map(|j| allowed(i, j)).collect();
            let p = masked_softmax(&scores, &mask);
            for c in cols.clone() {
                ctx[i][c] = (0..k.len()).map(|j| p[j] * v[j][c]).sum();
            }
        }
    }
    add_row(&mm(&ctx, &w.wo), &w.bo)
}

fn norm(p: &ModelParams, prefix: &str, x: &Mat) -> Mat {
    let g = vecf(p.get(&format!("{prefix}.gain")).unwrap());
    let b = vecf(p.get(&format!("{prefix}.bias")).unwrap());
    layer_norm(x, &g, &b, p.config().ln_eps)
}

fn ff(p: &ModelParams, prefix: &str, x: &Mat) -> Mat {
    let w1 = mat(p.get(&format!("{prefix}.w1")).unwrap());
    let b1 = vecf(p.get(&format!("{prefix}.b1")).unwrap());
    let w2 = mat(p.get(&format!("{prefix}.w2")).unwrap());
    let b2 = vecf(p.get(&format!("{prefix}.b2")).unwrap());
    let h: Mat = add_row(&mm(x, &w1), &b1)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    add_row(&mm(&h, &w2), &b2)
}

/// Visual embedding of `rows` real feature rows, zero-padded to N.
pub fn embed_visual(p: &ModelParams, features: &Mat) -> Mat {
    let cfg = p.config();
    let mut f = features.clone();
    if !cfg.use_visual_features {
        for r in &mut f {
            r.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    while f.len() < cfg.max_visual_tokens {
        f.push(vec![0.0; cfg.feature_dim]);
    }
    add(&mm(&f, &mat(p.get("visual.proj").unwrap())), &mat(p.get("visual.pos").unwrap()))
}

pub fn encode(p: &ModelParams, ev: &Mat, real: usize) -> Mat {
    let cfg = p.config();
    let mut x = ev.clone();
    for l in 0..cfg.n_encoder_layers {
        let pre = format!("encoder.{l}");
        let h = norm(p, &format!("{pre}.ln1"), &x);
        let a = mha(&h, &h, &Attn::load(p, &format!("{pre}.attn")), cfg.n_heads, &|_, j| j < real);
        x = add(&x, &a);
        let h = norm(p, &format!("{pre}.ln2"), &x);
        x = add(&x, &ff(p, &format!("{pre}.ff"), &h));
    }
    x
}

/// Logits for every position of `ids`.
pub fn decode(p: &ModelParams, memory: &Mat, real: usize, ids: &[u32]) -> Mat {
    let cfg = p.config();
    let emb = mat(p.get("text.token_emb").unwrap());
    let pos = mat(p.get("text.pos").unwrap());
    let mut x: Mat = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| emb[id as usize].iter().zip(&pos[t]).map(|(a, b)| a + b).collect())
        .collect();
    for l in 0..cfg.n_decoder_layers {
        let pre = format!("decoder.{l}");
        let h = norm(p, &format!("{pre}.ln1"), &x);
        let a = mha(&h, &h, &Attn::load(p, &format!("{pre}.self_attn")), cfg.n_heads, &|i, j| j <= i);
        x = add(&x, &a);
        let h = norm(p, &format!("{pre}.ln2"), &x);
        let c = mha(&h, memory, &Attn::load(p, &format!("{pre}.cross_attn")), cfg.n_heads, &|_, j| j < real);
        x = add(&x, &c);
        let h = norm(p, &format!("{pre}.ln3"), &x);
        x = add(&x, &ff(p, &format!("{pre}.ff"), &h));
    }
    let h = norm(p, "final_norm", &x);
    add_row(&mm(&h, &mat(p.get("head.weight").unwrap())), &vecf(p.get("head.bias").unwrap()))
}

pub fn forward(p: &ModelParams, features: &Mat, ids: &[u32]) -> Mat {
    let ev = embed_visual(p, features);
    let memory = encode(p, &ev, features.len());
    decode(p, &memory, features.len(), ids)
}

/// Mean token NLL of `targets` (None = ignored) under `logits`.
pub fn mean_nll(logits: &Mat, targets: &[Option<usize>]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (row, t) in logits.iter().zip(targets) {
        if let Some(t) = t {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            sum += lse - row[*t];
            n += 1;
        }
    }
    (sum, n)
}

// ---- residual CNN ----

/// `[C][H][W]` image.
pub type Img = Vec<Vec<Vec<f64>>>;

pub fn img(t: &Tensor) -> Img {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..c)
        .map(|ch| {
            (0..h)
                .map(|y| (0..w).map(|x| t.data()[(ch * h + y) * w + x]).collect())
                .collect()
        })
        .collect()
}

pub fn conv(x: &Img, k: &Tensor, stride: usize, pad: usize) -> Img {
    let (co, ci, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let (h, w) = (x[0].len() as isize, x[0][0].len() as isize);
    let oh = ((h + 2 * pad as isize - kh as isize) / stride as isize + 1) as usize;
    let ow = ((w + 2 * pad as isize - kw as isize) / stride as isize + 1) as usize;
    let kv = |o: usize, c: usize, a: usize, b: usize| k.data()[((o * ci + c) * kh + a) * kw + b];
    (0..co)
        .map(|o| {
            (0..oh)
                .map(|y| {
                    (0..ow)
                        .map(|xo| {
                            let mut s = 0.0;
                            for c in 0..ci {
                                for a in 0..kh {
                                    for b in 0..kw {
                                        let iy = (y * stride + a) as isize - pad as isize;
                                        let ix = (xo * stride + b) as isize - pad as isize;
                                        if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                            s += x[c][iy as usize][ix as usize] * kv(o, c, a, b);
                                        }
                                    }
                                }
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn bn(x: &Img, g: &Tensor, b: &Tensor) -> Img {
    let f = 1.0 / (1.0f64 + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(c, plane)| {
            plane
                .iter()
                .map(|r| r.iter().map(|v| v * g.data()[c] * f + b.data()[c]).collect())
                .collect()
        })
        .collect()
}

fn relu(x: &Img) -> Img {
    x.iter()
        .map(|p| p.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect())
        .collect()
}

fn img_add(a: &Img, b: &Img) -> Img {
    a.iter()
        .zip(b)
        .map(|(p, q)| p.iter().zip(q).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect())
        .collect()
}

/// Feature row of one standardized frame for a network with the given
/// per-stage channels and blocks per stage.
pub fn resnet(store: &ParamStore, frame: &Tensor, stages: &[usize], blocks: usize) -> Vec<f64> {
    let g = |n: &str| store.get(n).unwrap();
    let mut h = relu(&bn(&conv(&img(frame), g("stem.conv"), 2, 1), g("stem.bn.gain"), g("stem.bn.bias")));
    let mut c_in = stages[0];
    for (s, &c) in stages.iter().enumerate() {
        for b in 0..blocks {
            let pre = format!("stage{s}.block{b}");
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let n = |x: &str| format!("{pre}.{x}");
            let r = relu(&bn(&conv(&h, g(&n("conv1")), stride, 1), g(&n("bn1.gain")), g(&n("bn1.bias"))));
            let r = bn(&conv(&r, g(&n("conv2")), 1, 1), g(&n("bn2.gain")), g(&n("bn2.bias")));
            let short = if c_in != c { conv(&h, g(&n("proj")), stride, 0) } else { h.clone() };
            h = relu(&img_add(&r, &short));
            c_in = c;
        }
    }
    let pooled: Vec<f64> = h
        .iter()
        .map(|p| p.iter().flatten().sum::<f64>() / (p.len() * p[0].len()) as f64)
        .collect();
    let out = mm(&vec![pooled], &mat(g("lift.weight")));
    out[0].iter().zip(g("lift.bias").data()).map(|(a, b)| a + b).collect()
}
