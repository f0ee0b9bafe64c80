//! The full detection network: a fine module at full temporal resolution, a
//! non-hierarchical multi-scale coarse module (each branch downsamples the
//! fine features exactly once), and a dual-head classification module fused
//! by convex weights. Ablation variants rewire the same pieces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, RptConfig};
use crate::error::{PatError, Result};
use crate::init;
use crate::loss::{LossParams, WeightedHead};
use crate::optim::{BoundParams, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    Relative,
    Absolute,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Full,
    V1Hierarchical,
    V2FromTokens,
    FdmOnly,
    CdmOnly,
    TokensOnly,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Tokens per training clip (relative tables are sized for this length).
    pub t: usize,
    /// Input token dimension.
    pub d: usize,
    /// Model feature dimension.
    pub d_star: usize,
    /// RPT blocks per module.
    pub b: usize,
    /// Attention heads.
    pub h: usize,
    /// Coarse granularity branches.
    pub f: usize,
    /// Classes.
    pub c: usize,
    pub alpha_fine: f64,
    pub alpha_coarse: f64,
    pub encoding: EncodingMode,
    pub structure: Structure,
    pub loss: LossParams,
    #[serde(default)]
    pub per_head_tables: bool,
}

impl ModelConfig {
    /// Published defaults for the large-scale configuration.
    pub fn paper() -> Self {
        ModelConfig {
            t: 256,
            d: 1024,
            d_star: 512,
            b: 3,
            h: 8,
            f: 3,
            c: 157,
            alpha_fine: 0.1,
            alpha_coarse: 0.9,
            encoding: EncodingMode::Relative,
            structure: Structure::Full,
            loss: LossParams::default(),
            per_head_tables: false,
        }
    }

    /// Small profile for CPU-scale experiments and ablations.
    pub fn desk() -> Self {
        ModelConfig {
            t: 64,
            d: 16,
            d_star: 32,
            b: 2,
            h: 4,
            f: 2,
            c: 8,
            alpha_fine: 0.5,
            alpha_coarse: 0.5,
            encoding: EncodingMode::Relative,
            structure: Structure::Full,
            loss: LossParams::default(),
            per_head_tables: false,
        }
    }

    pub fn uses_fdm(&self) -> bool {
        matches!(
            self.structure,
            Structure::Full | Structure::V1Hierarchical | Structure::V2FromTokens | Structure::FdmOnly
        )
    }

    pub fn uses_cdm(&self) -> bool {
        matches!(
            self.structure,
            Structure::Full | Structure::V1Hierarchical | Structure::V2FromTokens | Structure::CdmOnly
        )
    }

    pub fn has_fine_head(&self) -> bool {
        self.uses_fdm() || self.structure == Structure::TokensOnly
    }

    pub fn has_coarse_head(&self) -> bool {
        self.uses_cdm()
    }

    /// α weight for each active head; a lone head carries full weight.
    pub fn head_alphas(&self) -> (Option<f64>, Option<f64>) {
        match (self.has_fine_head(), self.has_coarse_head()) {
            (true, true) => (Some(self.alpha_fine), Some(self.alpha_coarse)),
            (true, false) => (Some(1.0), None),
            (false, true) => (None, Some(1.0)),
            (false, false) => (None, None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.d == 0 || self.d_star == 0 || self.c == 0 {
            return Err(PatError::Config("all dimensions must be positive".into()));
        }
        if self.d_star % self.h != 0 {
            return Err(PatError::Config(format!(
                "d_star {} not divisible by heads {}",
                self.d_star, self.h
            )));
        }
        if (self.alpha_fine + self.alpha_coarse - 1.0).abs() > 1e-9
            || self.alpha_fine < 0.0
            || self.alpha_coarse < 0.0
        {
            return Err(PatError::Config(
                "fusion weights must be nonnegative and sum to 1".into(),
            ));
        }
        if self.uses_cdm() {
            if self.f == 0 {
                return Err(PatError::Config("coarse module requires f >= 1 branches".into()));
            }
            if self.t % (1 << self.f) != 0 || self.t < (1 << self.f) {
                return Err(PatError::Config(format!(
                    "t={} must be divisible by 2^f={}",
                    self.t,
                    1 << self.f
                )));
            }
        }
        if self.uses_fdm() && self.b == 0 {
            return Err(PatError::Config("b must be >= 1".into()));
        }
        if self.encoding == EncodingMode::Absolute && self.d_star % 2 != 0 {
            return Err(PatError::Config("absolute encoding requires even d_star".into()));
        }
        self.loss.validate()
    }
}

/// A strided or plain input-projection convolution recorded during forward,
/// as an edge of the module graph. Used to audit the single-striding
/// property: walk parents from a branch back to "input" and count strides.
#[derive(Clone, Debug)]
pub struct ConvEdge {
    pub name: String,
    pub parent: String,
    pub stride: usize,
}

pub struct PatOutput {
    pub fine: Option<Var>,
    pub coarse: Option<Var>,
    /// Temporal lengths of each coarse branch before upsampling.
    pub branch_lengths: Vec<usize>,
    /// Shape of the fine feature map feeding the fine head, if present.
    pub fine_feature_shape: Option<Vec<usize>>,
    /// Shape of the fused coarse feature map feeding the coarse head.
    pub coarse_feature_shape: Option<Vec<usize>>,
    pub conv_edges: Vec<ConvEdge>,
}

impl PatOutput {
    pub fn heads(&self, cfg: &ModelConfig) -> Vec<WeightedHead> {
        let (af, ac) = cfg.head_alphas();
        let mut out = Vec::new();
        if let (Some(v), Some(a)) = (self.fine, af) {
            out.push(WeightedHead { probs: v, alpha: a });
        }
        if let (Some(v), Some(a)) = (self.coarse, ac) {
            out.push(WeightedHead { probs: v, alpha: a });
        }
        out
    }
}

/// Count strided convolutions on the path from the network input to `name`.
pub fn strided_convs_to(edges: &[ConvEdge], name: &str) -> usize {
    let mut count = 0;
    let mut cur = name.to_string();
    loop {
        let Some(e) = edges.iter().find(|e| e.name == cur) else {
            return count;
        };
        if e.stride > 1 {
            count += 1;
        }
        if e.parent == "input" {
            return count;
        }
        cur = e.parent.clone();
    }
}

/// Convex fusion of the two heads: Ŷ = α_fine·Y_fine + α_coarse·Y_coarse.
pub fn fuse_predictions<E: Scalar>(
    fine: &Tensor<E>,
    coarse: &Tensor<E>,
    alpha_fine: f64,
    alpha_coarse: f64,
) -> Result<Tensor<E>> {
    if (alpha_fine + alpha_coarse - 1.0).abs() > 1e-9 || alpha_fine < 0.0 || alpha_coarse < 0.0 {
        return Err(PatError::Config("fusion weights must be nonnegative and sum to 1".into()));
    }
    if fine.shape() != coarse.shape() {
        return Err(PatError::ShapeMismatch {
            op: "fuse_predictions",
            lhs: fine.shape().to_vec(),
            rhs: coarse.shape().to_vec(),
        });
    }
    let (af, ac) = (E::from_f64(alpha_fine), E::from_f64(alpha_coarse));
    let data = fine
        .data()
        .iter()
        .zip(coarse.data())
        .map(|(&a, &b)| af * a + ac * b)
        .collect();
    Tensor::from_vec(fine.shape(), data)
}

pub struct PatModel {
    pub cfg: ModelConfig,
}

impl PatModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PatModel { cfg })
    }

    fn rpt_cfg(&self, n_max: usize) -> RptConfig {
        RptConfig {
            d_model: self.cfg.d_star,
            heads: self.cfg.h,
            n_max,
            relative: self.cfg.encoding == EncodingMode::Relative,
            per_head_tables: self.cfg.per_head_tables,
        }
    }

    fn branch_input_dim(&self) -> usize {
        match self.cfg.structure {
            Structure::Full | Structure::V1Hierarchical => self.cfg.d_star,
            _ => self.cfg.d,
        }
    }

    /// Deterministic parameter initialization for the configured variant.
    pub fn init_params<E: Scalar>(&self, seed: u64) -> Result<ParamSet<E>> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();

        if cfg.uses_fdm() {
            ps.add("fdm.in_conv.w", init::gaussian(&mut rng, &[cfg.d_star, cfg.d * 3], 0.02));
            ps.add("fdm.in_conv.b", Tensor::zeros(&[cfg.d_star]));
            for b in 0..cfg.b {
                attention::register_rpt(&mut ps, &format!("fdm.block{b}."), &self.rpt_cfg(cfg.t), &mut rng)?;
            }
        }
        if cfg.structure == Structure::TokensOnly {
            ps.add("proj.w", init::gaussian(&mut rng, &[cfg.d, cfg.d_star], 0.02));
            ps.add("proj.b", Tensor::zeros(&[cfg.d_star]));
        }
        if cfg.uses_cdm() {
            let in_dim = self.branch_input_dim();
            for i in 1..=cfg.f {
                ps.add(
                    &format!("cdm.branch{i}.in_conv.w"),
                    init::gaussian(&mut rng, &[cfg.d_star, in_dim * 3], 0.02),
                );
                ps.add(&format!("cdm.branch{i}.in_conv.b"), Tensor::zeros(&[cfg.d_star]));
                for b in 0..cfg.b {
                    attention::register_rpt(
                        &mut ps,
                        &format!("cdm.branch{i}.block{b}."),
                        &self.rpt_cfg(cfg.t >> i),
                        &mut rng,
                    )?;
                }
            }
        }
        if cfg.has_fine_head() {
            self.register_head(&mut ps, "clasm.fine", &mut rng);
        }
        if cfg.has_coarse_head() {
            self.register_head(&mut ps, "clasm.coarse", &mut rng);
        }
        Ok(ps)
    }

    fn register_head<E: Scalar>(&self, ps: &mut ParamSet<E>, prefix: &str, rng: &mut ChaCha8Rng) {
        let d = self.cfg.d_star;
        ps.add(&format!("{prefix}.conv1.w"), init::gaussian(rng, &[d, d], 0.02));
        ps.add(&format!("{prefix}.conv1.b"), Tensor::zeros(&[d]));
        ps.add(&format!("{prefix}.conv2.w"), init::gaussian(rng, &[d, self.cfg.c], 0.02));
        ps.add(&format!("{prefix}.conv2.b"), Tensor::zeros(&[self.cfg.c]));
    }

    fn maybe_absolute<E: Scalar>(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        if self.cfg.encoding != EncodingMode::Absolute {
            return Ok(x);
        }
        let n = tape.value(x).rows();
        let enc = attention::absolute_encoding::<E>(n, self.cfg.d_star)?;
        let ev = tape.constant(enc)?;
        tape.add(x, ev)
    }

    fn run_blocks<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams<E>,
        mut x: Var,
        module: &str,
        n_max: usize,
    ) -> Result<Var> {
        let cfg = self.rpt_cfg(n_max);
        for b in 0..self.cfg.b {
            x = attention::rpt_block(tape, x, bound, &format!("{module}block{b}."), &cfg)?;
        }
        Ok(x)
    }

    /// Classification head: 1×1 conv → GELU → 1×1 conv → sigmoid.
    fn class_head<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams<E>,
        x: Var,
        prefix: &str,
    ) -> Result<Var> {
        let w1 = bound.var(&format!("{prefix}.conv1.w"))?;
        let b1 = bound.var(&format!("{prefix}.conv1.b"))?;
        let h = tape.affine(x, w1, b1)?;
        let a = tape.gelu(h)?;
        let w2 = bound.var(&format!("{prefix}.conv2.w"))?;
        let b2 = bound.var(&format!("{prefix}.conv2.b"))?;
        let logits = tape.affine(a, w2, b2)?;
        tape.sigmoid(logits)
    }

    /// Forward pass on a `tokens` leaf of shape T'×D. T' may differ from the
    /// configured clip length (full-sequence inference); it must still be
    /// divisible by 2^F when the coarse module is active.
    pub fn forward<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams<E>,
        tokens: Var,
    ) -> Result<PatOutput> {
        let cfg = &self.cfg;
        let t_len = tape.value(tokens).rows();
        if tape.value(tokens).cols() != cfg.d {
            return Err(PatError::ShapeMismatch {
                op: "forward",
                lhs: tape.value(tokens).shape().to_vec(),
                rhs: vec![t_len, cfg.d],
            });
        }
        if cfg.uses_cdm() && (t_len % (1 << cfg.f) != 0 || t_len < (1 << cfg.f)) {
            return Err(PatError::Config(format!(
                "sequence length {} not divisible by 2^f={}; degenerate clips are rejected",
                t_len,
                1 << cfg.f
            )));
        }
        let mut edges = Vec::new();

        // Fine-grained features.
        let fine_feats = if cfg.uses_fdm() {
            let w = bound.var("fdm.in_conv.w")?;
            let b = bound.var("fdm.in_conv.b")?;
            let x = tape.conv1d(tokens, w, b, 3, 1, 1)?;
            edges.push(ConvEdge { name: "fdm".into(), parent: "input".into(), stride: 1 });
            let x = self.maybe_absolute(tape, x)?;
            Some(self.run_blocks(tape, bound, x, "fdm.", cfg.t)?)
        } else if cfg.structure == Structure::TokensOnly {
            let w = bound.var("proj.w")?;
            let b = bound.var("proj.b")?;
            let x = tape.affine(tokens, w, b)?;
            edges.push(ConvEdge { name: "proj".into(), parent: "input".into(), stride: 1 });
            Some(self.maybe_absolute(tape, x)?)
        } else {
            None
        };

        // Coarse branches: each downsamples exactly once in the main design.
        let mut branch_lengths = Vec::new();
        let coarse_feats = if cfg.uses_cdm() {
            let mut summed: Option<Var> = None;
            let mut chain_input = fine_feats; // v1 threads this through branches
            let mut chain_parent = "fdm".to_string();
            for i in 1..=cfg.f {
                let w = bound.var(&format!("cdm.branch{i}.in_conv.w"))?;
                let b = bound.var(&format!("cdm.branch{i}.in_conv.b"))?;
                let name = format!("cdm.branch{i}");
                let (mut x, parent) = match cfg.structure {
                    Structure::Full => {
                        let f = fine_feats.expect("full structure has fine features");
                        (tape.conv1d(f, w, b, 3, 1 << i, 1)?, "fdm".to_string())
                    }
                    Structure::V1Hierarchical => {
                        let src = chain_input.expect("v1 threads fine features");
                        (tape.conv1d(src, w, b, 3, 2, 1)?, chain_parent.clone())
                    }
                    Structure::V2FromTokens | Structure::CdmOnly => {
                        let x = tape.conv1d(tokens, w, b, 3, 1 << i, 1)?;
                        (self.maybe_absolute(tape, x)?, "input".to_string())
                    }
                    _ => unreachable!("uses_cdm excludes head-only variants"),
                };
                edges.push(ConvEdge {
                    name: name.clone(),
                    parent,
                    stride: if cfg.structure == Structure::V1Hierarchical { 2 } else { 1 << i },
                });
                x = self.run_blocks(tape, bound, x, &format!("{name}."), cfg.t >> i)?;
                if cfg.structure == Structure::V1Hierarchical {
                    chain_input = Some(x);
                    chain_parent = name;
                }
                branch_lengths.push(tape.value(x).rows());
                let up = tape.resample_rows(x, t_len)?;
                summed = Some(match summed {
                    Some(s) => tape.add(s, up)?,
                    None => up,
                });
            }
            summed
        } else {
            None
        };

        let fine_feature_shape = fine_feats.map(|v| tape.value(v).shape().to_vec());
        let coarse_feature_shape = coarse_feats.map(|v| tape.value(v).shape().to_vec());
        let fine = match fine_feats {
            Some(f) if cfg.has_fine_head() => Some(self.class_head(tape, bound, f, "clasm.fine")?),
            _ => None,
        };
        let coarse = match coarse_feats {
            Some(c) => Some(self.class_head(tape, bound, c, "clasm.coarse")?),
            None => None,
        };
        Ok(PatOutput {
            fine,
            coarse,
            branch_lengths,
            fine_feature_shape,
            coarse_feature_shape,
            conv_edges: edges,
        })
    }

    /// Plain-value inference: fused prediction grid for a token matrix.
    pub fn predict<E: Scalar>(
        &self,
        params: &ParamSet<E>,
        tokens: &Tensor<E>,
        alpha_override: Option<(f64, f64)>,
    ) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let tv = tape.constant(tokens.clone())?;
        let out = self.forward(&mut tape, &bound, tv)?;
        let (af, ac) = alpha_override.unwrap_or((self.cfg.alpha_fine, self.cfg.alpha_coarse));
        match (out.fine, out.coarse) {
            (Some(f), Some(c)) => {
                fuse_predictions(tape.value(f), tape.value(c), af, ac)
            }
            (Some(f), None) => Ok(tape.value(f).clone()),
            (None, Some(c)) => Ok(tape.value(c).clone()),
            (None, None) => Err(PatError::Config("variant produced no prediction head".into())),
        }
    }
}
