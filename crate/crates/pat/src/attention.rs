//! Relative Positional Transformer block: multi-head self-attention with a
//! learnable relative-distance bias on the attention logits, followed by a
//! local relational sublayer (linear → conv → linear). Both sublayers are
//! pre-normalized with residual connections.

use rand_chacha::ChaCha8Rng;

use crate::error::{PatError, Result};
use crate::init;
use crate::optim::{BoundParams, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct RptConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Maximum sequence length the relative table is sized for; longer
    /// sequences clip distances to the boundary rows.
    pub n_max: usize,
    pub relative: bool,
    /// One table per layer shared across heads by default; enabling this
    /// gives each head its own table.
    pub per_head_tables: bool,
}

impl RptConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(PatError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.n_max == 0 {
            return Err(PatError::Config("n_max must be positive".into()));
        }
        Ok(())
    }
}

/// Register all parameters of one RPT block under `prefix`.
pub fn register_rpt<E: Scalar>(
    params: &mut ParamSet<E>,
    prefix: &str,
    cfg: &RptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    for h in 0..cfg.heads {
        params.add(&format!("{prefix}attn.wq.h{h}"), init::gaussian(rng, &[d, dh], 0.02));
        params.add(&format!("{prefix}attn.wk.h{h}"), init::gaussian(rng, &[d, dh], 0.02));
        params.add(&format!("{prefix}attn.wv.h{h}"), init::gaussian(rng, &[d, dh], 0.02));
    }
    params.add(&format!("{prefix}attn.wo"), init::gaussian(rng, &[d, d], 0.02));
    if cfg.relative {
        let rows = 2 * cfg.n_max - 1;
        if cfg.per_head_tables {
            for h in 0..cfg.heads {
                params.add(&format!("{prefix}attn.relpos.h{h}"), init::gaussian(rng, &[rows, dh], 0.02));
            }
        } else {
            params.add(&format!("{prefix}attn.relpos"), init::gaussian(rng, &[rows, dh], 0.02));
        }
    }
    params.add(&format!("{prefix}attn.norm.gain"), init::ones(&[d]));
    params.add(&format!("{prefix}attn.norm.bias"), Tensor::zeros(&[d]));

    params.add(&format!("{prefix}lr.norm.gain"), init::ones(&[d]));
    params.add(&format!("{prefix}lr.norm.bias"), Tensor::zeros(&[d]));
    params.add(&format!("{prefix}lr.lin1.w"), init::gaussian(rng, &[d, d], 0.02));
    params.add(&format!("{prefix}lr.lin1.b"), Tensor::zeros(&[d]));
    params.add(&format!("{prefix}lr.conv.w"), init::gaussian(rng, &[d, d * 3], 0.02));
    params.add(&format!("{prefix}lr.conv.b"), Tensor::zeros(&[d]));
    params.add(&format!("{prefix}lr.lin2.w"), init::gaussian(rng, &[d, d], 0.02));
    params.add(&format!("{prefix}lr.lin2.b"), Tensor::zeros(&[d]));
    Ok(())
}

/// Column index layout for the relative score matrix: column j of the
/// N×(2N−1) matrix holds the score at relative distance j−(N−1). Distances
/// outside the table clip to its boundary rows.
pub fn relpos_row_indices(n: usize, n_max: usize) -> Vec<usize> {
    (0..2 * n - 1)
        .map(|j| {
            let dist = j as isize - (n as isize - 1);
            let row = dist + (n_max as isize - 1);
            row.clamp(0, 2 * n_max as isize - 2) as usize
        })
        .collect()
}

/// Relative-position bias P(n,m) = Σ_d Q(n,d)·Ω(n−m) via the memory-efficient
/// path: one N×(2N−1) score matrix gathered into N×N, never an N×N×D_h
/// intermediate.
pub fn relpos_bias<E: Scalar>(tape: &mut Tape<E>, q: Var, table: Var, n_max: usize) -> Result<Var> {
    relpos_bias_impl(tape, q, table, n_max, false)
}

/// Fault-injectable variant used by the verifier's self-test: `flip_sign`
/// negates the relative distance, which must break skew/naive agreement.
pub fn relpos_bias_impl<E: Scalar>(
    tape: &mut Tape<E>,
    q: Var,
    table: Var,
    n_max: usize,
    flip_sign: bool,
) -> Result<Var> {
    let n = tape.value(q).rows();
    let mut idx = relpos_row_indices(n, n_max);
    if flip_sign {
        idx.reverse();
    }
    let rows = tape.row_gather(table, &idx)?;
    let scores = tape.matmul_nt(q, rows)?;
    tape.skew_gather(scores)
}

fn head_context(e: PatError, h: usize) -> PatError {
    match e {
        PatError::NonFinite { op } => PatError::NonFinite { op: format!("mhsa head {h}: {op}") },
        other => other,
    }
}

/// Pre-normalized multi-head self-attention with relative positional bias and
/// residual connection. `x` is N×D°.
pub fn mhsa_relative<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    bound: &BoundParams<E>,
    prefix: &str,
    cfg: &RptConfig,
) -> Result<Var> {
    let gain = bound.var(&format!("{prefix}attn.norm.gain"))?;
    let bias = bound.var(&format!("{prefix}attn.norm.bias"))?;
    let xn = tape.layer_norm(x, gain, bias)?;

    let dh = cfg.head_dim();
    let scale = E::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let wq = bound.var(&format!("{prefix}attn.wq.h{h}"))?;
        let wk = bound.var(&format!("{prefix}attn.wk.h{h}"))?;
        let wv = bound.var(&format!("{prefix}attn.wv.h{h}"))?;
        let q = tape.matmul(xn, wq)?;
        let k = tape.matmul(xn, wk)?;
        let v = tape.matmul(xn, wv)?;
        let mut logits = tape.matmul_nt(q, k).map_err(|e| head_context(e, h))?;
        if cfg.relative {
            let table_name = if cfg.per_head_tables {
                format!("{prefix}attn.relpos.h{h}")
            } else {
                format!("{prefix}attn.relpos")
            };
            let table = bound.var(&table_name)?;
            let p = relpos_bias(tape, q, table, cfg.n_max).map_err(|e| head_context(e, h))?;
            logits = tape.add(logits, p).map_err(|e| head_context(e, h))?;
        }
        let scaled = tape.scale(logits, scale).map_err(|e| head_context(e, h))?;
        let attn = tape.softmax(scaled).map_err(|e| head_context(e, h))?;
        heads.push(tape.matmul(attn, v)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let wo = bound.var(&format!("{prefix}attn.wo"))?;
    let proj = tape.matmul(cat, wo)?;
    tape.add(proj, x)
}

/// Local relational sublayer: linear → GELU → temporal conv (k=3, s=1, p=1)
/// → GELU → linear, pre-normalized, with residual. Temporal length preserved.
pub fn local_relational<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    bound: &BoundParams<E>,
    prefix: &str,
) -> Result<Var> {
    let gain = bound.var(&format!("{prefix}lr.norm.gain"))?;
    let bias = bound.var(&format!("{prefix}lr.norm.bias"))?;
    let xn = tape.layer_norm(x, gain, bias)?;
    let w1 = bound.var(&format!("{prefix}lr.lin1.w"))?;
    let b1 = bound.var(&format!("{prefix}lr.lin1.b"))?;
    let h1 = tape.affine(xn, w1, b1)?;
    let a1 = tape.gelu(h1)?;
    let cw = bound.var(&format!("{prefix}lr.conv.w"))?;
    let cb = bound.var(&format!("{prefix}lr.conv.b"))?;
    let c = tape.conv1d(a1, cw, cb, 3, 1, 1)?;
    let a2 = tape.gelu(c)?;
    let w2 = bound.var(&format!("{prefix}lr.lin2.w"))?;
    let b2 = bound.var(&format!("{prefix}lr.lin2.b"))?;
    let h2 = tape.affine(a2, w2, b2)?;
    tape.add(h2, x)
}

/// One RPT block: relative-bias attention followed by the LR sublayer.
pub fn rpt_block<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    bound: &BoundParams<E>,
    prefix: &str,
    cfg: &RptConfig,
) -> Result<Var> {
    let o = mhsa_relative(tape, x, bound, prefix, cfg)?;
    local_relational(tape, o, bound, prefix)
}

/// Standard sinusoidal table for the absolute-encoding ablation:
/// channel pair 2i/2i+1 of position t holds sin/cos(t / 10000^(2i/d)).
pub fn absolute_encoding<E: Scalar>(n: usize, d: usize) -> Result<Tensor<E>> {
    if d % 2 != 0 {
        return Err(PatError::Config(format!(
            "absolute encoding requires even feature dim, got {d}"
        )));
    }
    let mut out = Tensor::zeros(&[n, d]);
    for t in 0..n {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = t as f64 * freq;
            out.set2(t, 2 * i, E::from_f64(angle.sin()));
            out.set2(t, 2 * i + 1, E::from_f64(angle.cos()));
        }
    }
    Ok(out)
}
