//! Independent straight-line reference implementations used to verify the
//! tape-based compute paths. Nothing here touches the autodiff engine; each
//! function is a direct transcription of the defining arithmetic.

use crate::attention::RptConfig;
use crate::error::Result;
use crate::optim::ParamSet;
use crate::tensor::Tensor;

/// Naive O(N²·D_h) relative bias: P(n,m) = Σ_d Q(n,d)·Ω(n−m), with distances
/// beyond the table clipped to its boundary rows.
pub fn relpos_bias_naive(q: &Tensor<f64>, table: &Tensor<f64>, n_max: usize) -> Tensor<f64> {
    let n = q.rows();
    let dh = q.cols();
    let mut p = Tensor::zeros(&[n, n]);
    for a in 0..n {
        for m in 0..n {
            let dist = a as isize - m as isize;
            let row = (dist + n_max as isize - 1).clamp(0, 2 * n_max as isize - 2) as usize;
            let mut acc = 0.0;
            for d in 0..dh {
                acc += q.at2(a, d) * table.at2(row, d);
            }
            p.set2(a, m, acc);
        }
    }
    p
}

fn layer_norm_ref(x: &Tensor<f64>, gain: &[f64], bias: &[f64]) -> Tensor<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let mean: f64 = (0..d).map(|j| x.at2(i, j)).sum::<f64>() / d as f64;
        let var: f64 = (0..d).map(|j| (x.at2(i, j) - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for j in 0..d {
            out.set2(i, j, (x.at2(i, j) - mean) * inv * gain[j] + bias[j]);
        }
    }
    out
}

fn gelu_ref(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn matmul_ref(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.at2(i, p) * b.at2(p, j);
            }
            out.set2(i, j, acc);
        }
    }
    out
}

/// Per-head-loop reference for the pre-normalized relative attention sublayer
/// (residual included).
pub fn mhsa_reference(
    x: &Tensor<f64>,
    params: &ParamSet<f64>,
    prefix: &str,
    cfg: &RptConfig,
) -> Result<Tensor<f64>> {
    let n = x.rows();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let gain = params.get(&format!("{prefix}attn.norm.gain"))?.data().to_vec();
    let bias = params.get(&format!("{prefix}attn.norm.bias"))?.data().to_vec();
    let xn = layer_norm_ref(x, &gain, &bias);

    let mut cat = Tensor::zeros(&[n, d]);
    for h in 0..cfg.heads {
        let wq = params.get(&format!("{prefix}attn.wq.h{h}"))?;
        let wk = params.get(&format!("{prefix}attn.wk.h{h}"))?;
        let wv = params.get(&format!("{prefix}attn.wv.h{h}"))?;
        let q = matmul_ref(&xn, wq);
        let k = matmul_ref(&xn, wk);
        let v = matmul_ref(&xn, wv);
        let bias_p = if cfg.relative {
            let tname = if cfg.per_head_tables {
                format!("{prefix}attn.relpos.h{h}")
            } else {
                format!("{prefix}attn.relpos")
            };
            Some(relpos_bias_naive(&q, params.get(&tname)?, cfg.n_max))
        } else {
            None
        };
        for i in 0..n {
            // logits -> softmax row
            let mut row = Vec::with_capacity(n);
            for m in 0..n {
                let mut acc = 0.0;
                for dd in 0..dh {
                    acc += q.at2(i, dd) * k.at2(m, dd);
                }
                if let Some(p) = &bias_p {
                    acc += p.at2(i, m);
                }
                row.push(acc / (dh as f64).sqrt());
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for dd in 0..dh {
                let mut acc = 0.0;
                for m in 0..n {
                    acc += exps[m] / sum * v.at2(m, dd);
                }
                cat.set2(i, h * dh + dd, acc);
            }
        }
    }
    let wo = params.get(&format!("{prefix}attn.wo"))?;
    let mut out = matmul_ref(&cat, wo);
    for i in 0..n {
        for j in 0..d {
            let v = out.at2(i, j) + x.at2(i, j);
            out.set2(i, j, v);
        }
    }
    Ok(out)
}

/// Straight-line reference for the LR sublayer.
pub fn local_relational_reference(
    x: &Tensor<f64>,
    params: &ParamSet<f64>,
    prefix: &str,
) -> Result<Tensor<f64>> {
    let (n, d) = (x.rows(), x.cols());
    let gain = params.get(&format!("{prefix}lr.norm.gain"))?.data().to_vec();
    let bias = params.get(&format!("{prefix}lr.norm.bias"))?.data().to_vec();
    let xn = layer_norm_ref(x, &gain, &bias);

    let w1 = params.get(&format!("{prefix}lr.lin1.w"))?;
    let b1 = params.get(&format!("{prefix}lr.lin1.b"))?;
    let mut h1 = matmul_ref(&xn, w1);
    for i in 0..n {
        for j in 0..d {
            h1.set2(i, j, gelu_ref(h1.at2(i, j) + b1.data()[j]));
        }
    }

    let cw = params.get(&format!("{prefix}lr.conv.w"))?;
    let cb = params.get(&format!("{prefix}lr.conv.b"))?;
    let mut c = Tensor::zeros(&[n, d]);
    for t in 0..n {
        for co in 0..d {
            let mut acc = cb.data()[co];
            for ci in 0..d {
                for j in 0..3usize {
                    let src = t as isize + j as isize - 1;
                    if src >= 0 && (src as usize) < n {
                        acc += h1.at2(src as usize, ci) * cw.at2(co, ci * 3 + j);
                    }
                }
            }
            c.set2(t, co, gelu_ref(acc));
        }
    }

    let w2 = params.get(&format!("{prefix}lr.lin2.w"))?;
    let b2 = params.get(&format!("{prefix}lr.lin2.b"))?;
    let mut out = matmul_ref(&c, w2);
    for i in 0..n {
        for j in 0..d {
            let v = out.at2(i, j) + b2.data()[j] + x.at2(i, j);
            out.set2(i, j, v);
        }
    }
    Ok(out)
}

/// Brute-force average precision: for each positive, count by explicit pair
/// comparison how many items outrank it (higher score, or equal score with a
/// smaller original index), and average the precisions. Independent of the
/// sort-based implementation.
pub fn average_precision_brute(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n = scores.len();
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return None;
    }
    let mut total = 0.0;
    for i in 0..n {
        if labels[i] != 1 {
            continue;
        }
        let mut rank = 1usize; // items at or above i in the tie-broken order
        let mut pos_at_or_above = 1usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            let above = scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
            if above {
                rank += 1;
                if labels[j] == 1 {
                    pos_at_or_above += 1;
                }
            }
        }
        total += pos_at_or_above as f64 / rank as f64;
    }
    Some(total / positives as f64)
}
