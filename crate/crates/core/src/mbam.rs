//! Multimodal bottleneck attention: factorized bilinear squeeze, sigmoid
//! bottleneck excitation, and channel-wise refinement of each modality.
//!
//! All functions take row matrices (`[N × dim]`, one row per segment).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MpnError, Result};
use crate::nn::{Graph, Init, Linear, ParamId};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FbcConfig {
    pub p: usize,
    pub q: usize,
    pub rank: usize,
    pub atoms: usize,
    pub lasso_lambda: f64,
}

impl Default for FbcConfig {
    fn default() -> Self {
        Self {
            p: 32,
            q: 16,
            rank: 4,
            atoms: 64,
            lasso_lambda: 0.01,
        }
    }
}

impl FbcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q == 0 {
            return Err(MpnError::Config("feature dimensions must be at least 1".into()));
        }
        if self.rank == 0 || self.atoms == 0 {
            return Err(MpnError::Config("fbc_rank and fbc_atoms must be at least 1".into()));
        }
        if self.atoms % 2 != 0 {
            return Err(MpnError::Config(format!(
                "fbc_atoms must be even for the k/2 bottleneck, got {}",
                self.atoms
            )));
        }
        if !(self.lasso_lambda >= 0.0) || !self.lasso_lambda.is_finite() {
            return Err(MpnError::Config(format!(
                "fbc_lambda must be finite and non-negative, got {}",
                self.lasso_lambda
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.atoms / 2
    }
}

/// Binary pooling matrix `[k × rk]`: row `l` is one on columns
/// `l·r .. (l+1)·r` and zero elsewhere.
pub fn pooling_matrix<F: Scalar>(atoms: usize, rank: usize) -> Tensor<F> {
    let mut p = Tensor::zeros(&[atoms, atoms * rank]);
    for l in 0..atoms {
        for c in l * rank..(l + 1) * rank {
            p.set(&[l, c], F::one());
        }
    }
    p
}

#[derive(Clone, Copy, Debug)]
pub struct FbcParams {
    /// `Ũ`, `[p × rk]`
    pub u: ParamId,
    /// `Ṽ`, `[q × rk]`
    pub v: ParamId,
    pub cfg: FbcConfig,
}

impl FbcParams {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, cfg: FbcConfig) -> Self {
        let rk = cfg.rank * cfg.atoms;
        Self {
            u: init.glorot(&format!("{name}.u"), cfg.p, rk),
            v: init.glorot(&format!("{name}.v"), cfg.q, rk),
            cfg,
        }
    }
}

/// `sign(x) ∘ max(|x| − threshold, 0)`.
pub fn soft_threshold<F: Scalar>(g: &mut Graph<'_, F>, x: Var, threshold: f64) -> Var {
    let s = g.sign(x);
    let mag = g.abs(x);
    let shifted = g.add_scalar(mag, F::from_f(-threshold));
    let shrunk = g.max_scalar(shifted, F::zero());
    g.mul(s, shrunk).expect("same shape")
}

/// Pre-threshold codes `c' = P(Ũᵀ f_v ∘ Ṽᵀ f_a)` for every row.
pub fn fbc_codes<F: Scalar>(g: &mut Graph<'_, F>, fv: Var, fa: Var, params: &FbcParams) -> Result<Var> {
    let cfg = params.cfg;
    let (sv, sa) = (g.shape(fv).to_vec(), g.shape(fa).to_vec());
    if sv.len() != 2 || sa.len() != 2 || sv[0] != sa[0] || sv[1] != cfg.p || sa[1] != cfg.q {
        return Err(MpnError::dim("fbc_squeeze", &sv, &sa));
    }
    let (u, v) = (g.p(params.u), g.p(params.v));
    let pu = g.matmul(fv, u)?;
    let pv = g.matmul(fa, v)?;
    let prod = g.mul(pu, pv)?;
    g.group_sum(prod, cfg.rank)
}

/// Fused code `z = [c_1; …; c_N]`, `[N × k]`.
pub fn fbc_squeeze<F: Scalar>(g: &mut Graph<'_, F>, fv: Var, fa: Var, params: &FbcParams) -> Result<Var> {
    let c = fbc_codes(g, fv, fa, params)?;
    Ok(soft_threshold(g, c, params.cfg.lasso_lambda / 2.0))
}

/// How the two modalities are fused before excitation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SqueezeVariant {
    Concat,
    Product,
    Addition,
    #[default]
    Fbc,
}

impl SqueezeVariant {
    pub const ALL: [SqueezeVariant; 4] = [
        SqueezeVariant::Concat,
        SqueezeVariant::Product,
        SqueezeVariant::Addition,
        SqueezeVariant::Fbc,
    ];
}

impl fmt::Display for SqueezeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SqueezeVariant::Concat => "concat",
            SqueezeVariant::Product => "product",
            SqueezeVariant::Addition => "addition",
            SqueezeVariant::Fbc => "fbc",
        })
    }
}

impl FromStr for SqueezeVariant {
    type Err = MpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "concat" => Ok(SqueezeVariant::Concat),
            "product" => Ok(SqueezeVariant::Product),
            "addition" => Ok(SqueezeVariant::Addition),
            "fbc" => Ok(SqueezeVariant::Fbc),
            _ => Err(MpnError::Config(format!(
                "unknown squeeze variant {s:?} (expected concat, product, addition or fbc)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum SqueezeParams {
    Fbc(FbcParams),
    Concat(Linear),
    /// Separate projections for the elementwise product/addition variants.
    Pair { visual: Linear, audio: Linear },
}

impl SqueezeParams {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, variant: SqueezeVariant, cfg: FbcConfig) -> Self {
        match variant {
            SqueezeVariant::Fbc => SqueezeParams::Fbc(FbcParams::new(init, &format!("{name}.fbc"), cfg)),
            SqueezeVariant::Concat => {
                SqueezeParams::Concat(init.linear(&format!("{name}.concat"), cfg.p + cfg.q, cfg.atoms, true))
            }
            SqueezeVariant::Product | SqueezeVariant::Addition => SqueezeParams::Pair {
                visual: init.linear(&format!("{name}.visual"), cfg.p, cfg.atoms, true),
                audio: init.linear(&format!("{name}.audio"), cfg.q, cfg.atoms, true),
            },
        }
    }
}

/// Fuse `fv [N × p]` and `fa [N × q]` into `[N × k]` with the chosen variant.
pub fn squeeze_ablation<F: Scalar>(
    g: &mut Graph<'_, F>,
    variant: SqueezeVariant,
    fv: Var,
    fa: Var,
    params: &SqueezeParams,
) -> Result<Var> {
    match (variant, params) {
        (SqueezeVariant::Fbc, SqueezeParams::Fbc(p)) => fbc_squeeze(g, fv, fa, p),
        (SqueezeVariant::Concat, SqueezeParams::Concat(lin)) => {
            let joined = g.concat(&[fv, fa])?;
            lin.forward(g, joined)
        }
        (SqueezeVariant::Product | SqueezeVariant::Addition, SqueezeParams::Pair { visual, audio }) => {
            let pv = visual.forward(g, fv)?;
            let pa = audio.forward(g, fa)?;
            if variant == SqueezeVariant::Product {
                g.mul(pv, pa)
            } else {
                g.add(pv, pa)
            }
        }
        _ => Err(MpnError::Config(format!(
            "squeeze variant {variant} does not match its parameters"
        ))),
    }
}

/// Bottleneck gate weights for one modality: `W₁ [k_hid × k]`, `W₂ [k × k_hid]`,
/// stored transposed for row-vector products. No biases.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ExcitationParams {
    pub visual_gate: GateParams,
    pub audio_gate: GateParams,
    /// `f(·)` projections of the raw features to `k` channels.
    pub visual_proj: Linear,
    pub audio_proj: Linear,
}

impl ExcitationParams {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, cfg: FbcConfig) -> Self {
        let (k, kh) = (cfg.atoms, cfg.hidden());
        let mut gate = |m: &str| GateParams {
            w1: init.glorot(&format!("{name}.{m}.w1"), k, kh),
            w2: init.glorot(&format!("{name}.{m}.w2"), kh, k),
        };
        let visual_gate = gate("visual_gate");
        let audio_gate = gate("audio_gate");
        Self {
            visual_gate,
            audio_gate,
            visual_proj: init.linear(&format!("{name}.visual_proj"), cfg.p, k, true),
            audio_proj: init.linear(&format!("{name}.audio_proj"), cfg.q, k, true),
        }
    }
}

fn gate<F: Scalar>(g: &mut Graph<'_, F>, z: Var, p: &GateParams) -> Result<Var> {
    let (w1, w2) = (g.p(p.w1), g.p(p.w2));
    let h = g.matmul(z, w1)?;
    let h = g.relu(h);
    let s = g.matmul(h, w2)?;
    Ok(g.sigmoid(s))
}

/// Per-modality gates `φ = σ(W₂ δ(W₁ z))`, each `[N × k]`.
pub fn excitation<F: Scalar>(g: &mut Graph<'_, F>, z: Var, params: &ExcitationParams) -> Result<(Var, Var)> {
    Ok((gate(g, z, &params.visual_gate)?, gate(g, z, &params.audio_gate)?))
}

/// `v̂ = f(v) ⊙ φᵛ`, `â = f(a) ⊙ φᵃ`.
pub fn refine<F: Scalar>(
    g: &mut Graph<'_, F>,
    v: Var,
    a: Var,
    phi_v: Var,
    phi_a: Var,
    params: &ExcitationParams,
) -> Result<(Var, Var)> {
    let fv = params.visual_proj.forward(g, v)?;
    let fv = g.relu(fv);
    let fa = params.audio_proj.forward(g, a)?;
    let fa = g.relu(fa);
    Ok((g.mul(fv, phi_v)?, g.mul(fa, phi_a)?))
}

#[derive(Clone, Copy, Debug)]
pub struct MbamParams {
    pub variant: SqueezeVariant,
    pub squeeze: SqueezeParams,
    pub excitation: ExcitationParams,
}

impl MbamParams {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, variant: SqueezeVariant, cfg: FbcConfig) -> Self {
        Self {
            variant,
            squeeze: SqueezeParams::new(init, &format!("{name}.squeeze"), variant, cfg),
            excitation: ExcitationParams::new(init, &format!("{name}.excitation"), cfg),
        }
    }
}

/// Output of the full module on a row batch.
#[derive(Clone, Copy, Debug)]
pub struct MbamOutput {
    pub z: Var,
    pub phi_v: Var,
    pub phi_a: Var,
    pub v_hat: Var,
    pub a_hat: Var,
}

pub fn mbam_forward<F: Scalar>(g: &mut Graph<'_, F>, fv: Var, fa: Var, params: &MbamParams) -> Result<MbamOutput> {
    let z = squeeze_ablation(g, params.variant, fv, fa, &params.squeeze)?;
    let (phi_v, phi_a) = excitation(g, z, &params.excitation)?;
    let (v_hat, a_hat) = refine(g, fv, fa, phi_v, phi_a, &params.excitation)?;
    Ok(MbamOutput {
        z,
        phi_v,
        phi_a,
        v_hat,
        a_hat,
    })
}
