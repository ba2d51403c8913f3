//! Unbatched straight-line forward pass used as a test oracle. Everything is
//! plain nested loops over `Vec<f64>`; it shares no code with the graph path.

use super::params::Parameters;
use crate::numerics::Tensor;

type Mat = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (r, c) = (w.rows(), w.cols());
    assert_eq!(x.len(), r);
    let mut out = vec![0.0; c];
    for j in 0..c {
        let mut s = 0.0;
        for i in 0..r {
            s += x[i] * w.get(i, j);
        }
        out[j] = s;
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gain[j] + bias[j])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

/// Multi-head attention with per-head, per-pair loops.
pub fn attention(queries: &Mat, keys: &Mat, w: [&Tensor; 4], heads: usize) -> Mat {
    let d = queries[0].len();
    let hd = d / heads;
    let qs: Mat = queries.iter().map(|x| vecmat(x, w[0])).collect();
    let ks: Mat = keys.iter().map(|x| vecmat(x, w[1])).collect();
    let vs: Mat = keys.iter().map(|x| vecmat(x, w[2])).collect();
    let mut out = Vec::new();
    for q in &qs {
        let mut concat = vec![0.0; d];
        for h in 0..heads {
            let lo = h * hd;
            let scores: Vec<f64> = ks
                .iter()
                .map(|k| (lo..lo + hd).map(|c| q[c] * k[c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (p, v) in exps.iter().zip(&vs) {
                for c in lo..lo + hd {
                    concat[c] += p / z * v[c];
                }
            }
        }
        out.push(vecmat(&concat, w[3]));
    }
    out
}

fn weights<'a>(p: &'a Parameters, prefix: &str) -> [&'a Tensor; 4] {
    [
        p.get(&format!("{prefix}.q")),
        p.get(&format!("{prefix}.k")),
        p.get(&format!("{prefix}.v")),
        p.get(&format!("{prefix}.o")),
    ]
}

fn norm(p: &Parameters, prefix: &str, x: &[f64]) -> Vec<f64> {
    layer_norm(
        x,
        p.get(&format!("{prefix}.gain")).data(),
        p.get(&format!("{prefix}.bias")).data(),
        p.config().layer_norm_eps,
    )
}

pub fn fuse(p: &Parameters, views: &Tensor) -> Vec<f64> {
    let cfg = p.config();
    let heads = cfg.num_heads;
    let mut tokens: Mat = rows(views)
        .iter()
        .map(|f| add(&vecmat(f, p.get("input.weight")), p.get("input.bias").data()))
        .collect();
    let n = tokens.len();
    for d in 0..cfg.num_blocks {
        let pre = format!("blocks.{d}");
        let prev = tokens.clone();
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let x = &prev[i];
            let h = norm(p, &format!("{pre}.self_norm"), x);
            let a = attention(&vec![h.clone()], &vec![h], weights(p, &format!("{pre}.self_attn")), heads);
            let x1 = add(x, &a[0]);
            let x2 = if n > 1 {
                let memory: Mat = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| norm(p, &format!("{pre}.cross_kv_norm"), &prev[j]))
                    .collect();
                let hq = norm(p, &format!("{pre}.cross_q_norm"), &x1);
                let c = attention(&vec![hq], &memory, weights(p, &format!("{pre}.cross_attn")), heads);
                add(&x1, &c[0])
            } else {
                x1
            };
            let h = norm(p, &format!("{pre}.mlp_norm"), &x2);
            let f1: Vec<f64> = add(
                &vecmat(&h, p.get(&format!("{pre}.mlp.fc1.weight"))),
                p.get(&format!("{pre}.mlp.fc1.bias")).data(),
            )
            .into_iter()
            .map(gelu)
            .collect();
            let f2 = add(
                &vecmat(&f1, p.get(&format!("{pre}.mlp.fc2.weight"))),
                p.get(&format!("{pre}.mlp.fc2.bias")).data(),
            );
            next.push(add(&x2, &f2));
        }
        tokens = next;
    }
    let latent = p.get("pool.latent").data().to_vec();
    let kv: Mat = tokens.iter().map(|t| norm(p, "pool.kv_norm", t)).collect();
    let pooled = attention(&vec![latent.clone()], &kv, weights(p, "pool.attn"), heads);
    let z = add(&latent, &pooled[0]);
    let out = add(&vecmat(&z, p.get("output.weight")), p.get("output.bias").data());
    let nrm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    out.iter().map(|v| v / nrm).collect()
}
