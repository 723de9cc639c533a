//! The full network: audio-guided visual attention feeding a classification
//! subnetwork (co-attention, video-level category) and a localization
//! subnetwork (bottleneck attention, segment relevance) in parallel.
//!
//! Everything runs on batches: visual regions `[B × T × R × p]`, audio
//! `[B × T × q]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{mcm_forward, self_attention, AttentionConfig, BlockParams, McmOrder, McmParams};
use crate::error::{MpnError, Result};
use crate::mbam::{mbam_forward, FbcConfig, MbamParams, SqueezeVariant};
use crate::nn::{Graph, Init, Linear, Mlp, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Which subnetworks are present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetworkVariant {
    #[default]
    Full,
    ClassificationOnly,
    LocalizationOnly,
}

impl NetworkVariant {
    pub const ALL: [NetworkVariant; 3] = [
        NetworkVariant::LocalizationOnly,
        NetworkVariant::ClassificationOnly,
        NetworkVariant::Full,
    ];

    fn has_classification(self) -> bool {
        self != NetworkVariant::LocalizationOnly
    }

    fn has_localization(self) -> bool {
        self != NetworkVariant::ClassificationOnly
    }
}

impl fmt::Display for NetworkVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetworkVariant::Full => "full",
            NetworkVariant::ClassificationOnly => "classification",
            NetworkVariant::LocalizationOnly => "localization",
        })
    }
}

impl FromStr for NetworkVariant {
    type Err = MpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "two-subnetworks" => Ok(NetworkVariant::Full),
            "classification" | "classification-only" => Ok(NetworkVariant::ClassificationOnly),
            "localization" | "localization-only" => Ok(NetworkVariant::LocalizationOnly),
            _ => Err(MpnError::Config(format!(
                "unknown network variant {s:?} (expected full, classification or localization)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub attention: AttentionConfig,
    pub fbc: FbcConfig,
    pub classes: usize,
    pub regions: usize,
    pub agva_hidden: usize,
    pub classifier_hidden: usize,
    pub relevance_hidden: usize,
    pub network: NetworkVariant,
    pub mcm_order: McmOrder,
    pub squeeze: SqueezeVariant,
    pub local_to_global: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            attention: AttentionConfig::default(),
            fbc: FbcConfig::default(),
            classes: 5,
            regions: 4,
            agva_hidden: 64,
            classifier_hidden: 64,
            relevance_hidden: 32,
            network: NetworkVariant::Full,
            mcm_order: McmOrder::SaCma,
            squeeze: SqueezeVariant::Fbc,
            local_to_global: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        self.fbc.validate()?;
        if self.attention.d_model != self.fbc.atoms {
            return Err(MpnError::Config(format!(
                "d_model ({}) must equal fbc_atoms ({}) so gates apply to co-attention outputs",
                self.attention.d_model, self.fbc.atoms
            )));
        }
        for (name, v) in [
            ("classes", self.classes),
            ("regions", self.regions),
            ("agva_hidden", self.agva_hidden),
            ("classifier_hidden", self.classifier_hidden),
            ("relevance_hidden", self.relevance_hidden),
        ] {
            if v == 0 {
                return Err(MpnError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.classes >= 255 {
            return Err(MpnError::Config("at most 254 classes are supported".into()));
        }
        Ok(())
    }

    /// Whether MBAM gates refine the co-attention outputs.
    pub fn gating_active(&self) -> bool {
        self.local_to_global && self.network == NetworkVariant::Full
    }
}

/// Score MLP `wᵀ tanh(A v + B a + b)` over spatial regions.
#[derive(Clone, Copy, Debug)]
pub struct AgvaParams {
    pub visual: Linear,
    pub audio: Linear,
    pub score: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierParams {
    /// Shared first layer.
    pub hidden: Linear,
    pub video: Linear,
    pub segment: Linear,
}

impl ClassifierParams {
    fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, fan_in: usize, hidden: usize, classes: usize) -> Self {
        Self {
            hidden: init.linear(&format!("{name}.hidden"), fan_in, hidden, true),
            video: init.linear(&format!("{name}.video"), hidden, classes, true),
            segment: init.linear(&format!("{name}.segment"), hidden, classes, true),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassificationParams {
    pub visual_proj: Linear,
    pub audio_proj: Linear,
    pub mcms: Vec<McmParams>,
    pub final_block: BlockParams,
    pub classifier: ClassifierParams,
    /// Segment relevance head, present only without the localization subnetwork.
    pub relevance: Option<Mlp>,
}

#[derive(Clone, Debug)]
pub struct LocalizationParams {
    pub mbam: MbamParams,
    pub visual_relevance: Mlp,
    pub audio_relevance: Mlp,
    /// Category heads on MBAM features, present only without the
    /// classification subnetwork.
    pub classifier: Option<ClassifierParams>,
}

/// Parameter layout. Values live in a separate [`ParamStore`] so the same
/// layout serves `f32` training and `f64` gradient checks.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub agva: AgvaParams,
    pub classification: Option<ClassificationParams>,
    pub localization: Option<LocalizationParams>,
}

#[derive(Clone, Debug)]
pub struct Mpn {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

/// Graph nodes produced by one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[B × T]`
    pub p_r: Var,
    /// Unimodal relevance `[B × T]` (absent without the localization subnetwork).
    pub p_r_visual: Option<Var>,
    pub p_r_audio: Option<Var>,
    /// `[B × C]`
    pub p_c: Var,
    /// `[B × T × C]`
    pub p_c_seg: Var,
    /// `p_r[t] · p_c_seg[t]`, `[B × T × C]`
    pub p_j: Var,
    /// `[B × T × R]`
    pub agva_weights: Var,
    pub gates: Option<(Var, Var)>,
}

impl Mpn {
    /// Allocate parameters for `cfg`; initial values are drawn from `rng`.
    pub fn init<F: Scalar>(cfg: ModelConfig, rng: &mut Rng) -> Result<(Mpn, ParamStore<F>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng,
        };
        let (p, q, d, k) = (cfg.fbc.p, cfg.fbc.q, cfg.attention.d_model, cfg.fbc.atoms);

        let agva = AgvaParams {
            visual: init.linear("agva.visual", p, cfg.agva_hidden, false),
            audio: init.linear("agva.audio", q, cfg.agva_hidden, true),
            score: init.linear("agva.score", cfg.agva_hidden, 1, false),
        };

        let classification = cfg.network.has_classification().then(|| {
            let wide = cfg.attention.widened();
            ClassificationParams {
                visual_proj: init.linear("cls.visual_proj", p, d, true),
                audio_proj: init.linear("cls.audio_proj", q, d, true),
                mcms: (0..cfg.attention.n_mcm)
                    .map(|i| McmParams::new(&mut init, &format!("cls.mcm{i}"), cfg.attention))
                    .collect(),
                final_block: BlockParams::new(&mut init, "cls.final_sa", wide),
                classifier: ClassifierParams::new(&mut init, "cls.head", 2 * d, cfg.classifier_hidden, cfg.classes),
                relevance: (!cfg.network.has_localization())
                    .then(|| init.mlp("cls.relevance", 2 * d, cfg.relevance_hidden, 1)),
            }
        });

        let localization = cfg.network.has_localization().then(|| LocalizationParams {
            mbam: MbamParams::new(&mut init, "loc.mbam", cfg.squeeze, cfg.fbc),
            visual_relevance: init.mlp("loc.visual_relevance", k, cfg.relevance_hidden, 1),
            audio_relevance: init.mlp("loc.audio_relevance", k, cfg.relevance_hidden, 1),
            classifier: (!cfg.network.has_classification())
                .then(|| ClassifierParams::new(&mut init, "loc.head", 2 * k, cfg.classifier_hidden, cfg.classes)),
        });

        let mpn = Mpn {
            cfg,
            params: ModelParams {
                agva,
                classification,
                localization,
            },
        };
        Ok((mpn, store))
    }

    /// Full forward pass. `visual` is `[B × T × R × p]`, `audio` `[B × T × q]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, visual: Var, audio: Var, tau: f64) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let (sv, sa) = (g.shape(visual).to_vec(), g.shape(audio).to_vec());
        if sv.len() != 4 || sa.len() != 3 || sv[..2] != sa[..2] || sv[2] != cfg.regions || sv[3] != cfg.fbc.p || sa[2] != cfg.fbc.q
        {
            return Err(MpnError::dim("mpn_forward", &sv, &sa));
        }
        let (b, t) = (sv[0], sv[1]);

        let (v_att, agva_weights) = audio_guided_attention(g, visual, audio, &self.params.agva)?;

        let loc = match &self.params.localization {
            Some(lp) => Some(localization_forward(g, v_att, audio, lp)?),
            None => None,
        };
        let gates = match (&loc, cfg.gating_active()) {
            (Some(l), true) => Some((l.phi_v, l.phi_a)),
            _ => None,
        };

        let (p_c, p_c_seg, cls_features) = match &self.params.classification {
            Some(cp) => {
                let out = classification_forward(g, v_att, audio, cp, cfg.mcm_order, tau, gates)?;
                (out.p_c, out.p_c_seg, Some(out.features))
            }
            None => {
                let l = loc.as_ref().expect("localization present");
                let head = self.params.localization.as_ref().unwrap().classifier.as_ref().unwrap();
                let feats = g.concat(&[l.v_hat, l.a_hat])?;
                let feats = g.reshape(feats, &[b, t, 2 * cfg.fbc.atoms])?;
                let (p_c, p_c_seg) = classify(g, feats, head)?;
                (p_c, p_c_seg, None)
            }
        };

        let (p_r, p_r_visual, p_r_audio) = match (&loc, &self.params.classification) {
            (Some(l), _) => (l.p_r, Some(l.p_r_visual), Some(l.p_r_audio)),
            (None, Some(cp)) => {
                let head = cp.relevance.as_ref().expect("relevance head without localization");
                let feats = cls_features.expect("classification features");
                let logit = head.forward(g, feats)?;
                let p = g.sigmoid(logit);
                (g.reshape(p, &[b, t])?, None, None)
            }
            (None, None) => unreachable!("at least one subnetwork"),
        };

        let p_j = g.scale_rows(p_c_seg, p_r)?;
        Ok(ForwardOutput {
            p_r,
            p_r_visual,
            p_r_audio,
            p_c,
            p_c_seg,
            p_j,
            agva_weights,
            gates,
        })
    }

    /// Inference on a batch: runs the forward pass on a throwaway tape and
    /// returns one [`Predictions`] per video.
    pub fn predict(&self, store: &ParamStore<f32>, visual: Tensor<f32>, audio: Tensor<f32>, tau: f64) -> Result<Vec<Predictions>> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &vars);
        let (v, a) = (g.constant(visual), g.constant(audio));
        let out = self.forward(&mut g, v, a, tau)?;
        Ok(Predictions::from_forward(&g, &out))
    }
}

/// Audio-guided spatial attention. Returns pooled visual features
/// `[B × T × p]` and the region weights `[B × T × R]`.
pub fn audio_guided_attention<F: Scalar>(
    g: &mut Graph<'_, F>,
    visual: Var,
    audio: Var,
    params: &AgvaParams,
) -> Result<(Var, Var)> {
    let sv = g.shape(visual).to_vec();
    let (b, t, r, p) = (sv[0], sv[1], sv[2], sv[3]);
    let n = b * t;
    let regions = g.reshape(visual, &[n * r, p])?;
    let q = g.shape(audio)[2];
    let a_rows = g.reshape(audio, &[n, q])?;
    let hv = params.visual.forward(g, regions)?;
    let ha = params.audio.forward(g, a_rows)?;
    let ha = g.repeat_rows(ha, r)?;
    let h = g.add(hv, ha)?;
    let h = g.tanh(h);
    let scores = params.score.forward(g, h)?;
    let scores = g.reshape(scores, &[n, r])?;
    let w = g.softmax(scores, F::one())?;
    let w3 = g.reshape(w, &[n, 1, r])?;
    let v3 = g.reshape(visual, &[n, r, p])?;
    let pooled = g.bmm(w3, v3, false)?;
    Ok((g.reshape(pooled, &[b, t, p])?, g.reshape(w, &[b, t, r])?))
}

/// Classification subnetwork outputs.
#[derive(Clone, Copy, Debug)]
pub struct ClassificationOutput {
    pub p_c: Var,
    pub p_c_seg: Var,
    /// Output of the final self-attention block, `[B × T × 2d]`.
    pub features: Var,
}

/// Video-level and segment-level category distributions from `[B × T × w]`
/// features: max-pool over time for the video head, per segment for the
/// segment head; both share the first layer.
pub fn classify<F: Scalar>(g: &mut Graph<'_, F>, feats: Var, head: &ClassifierParams) -> Result<(Var, Var)> {
    let pooled = g.max_axis(feats, 1)?;
    let hv = head.hidden.forward(g, pooled)?;
    let hv = g.relu(hv);
    let logits = head.video.forward(g, hv)?;
    let p_c = g.softmax(logits, F::one())?;

    let hs = head.hidden.forward(g, feats)?;
    let hs = g.relu(hs);
    let seg_logits = head.segment.forward(g, hs)?;
    let p_c_seg = g.softmax(seg_logits, F::one())?;
    Ok((p_c, p_c_seg))
}

/// Project both modalities, run the co-attention cascade, optionally gate
/// with MBAM excitation, fuse with a final self-attention block and classify.
pub fn classification_forward<F: Scalar>(
    g: &mut Graph<'_, F>,
    v_att: Var,
    audio: Var,
    params: &ClassificationParams,
    order: McmOrder,
    tau: f64,
    gates: Option<(Var, Var)>,
) -> Result<ClassificationOutput> {
    let shape = g.shape(v_att).to_vec();
    let (b, t) = (shape[0], shape[1]);
    let mut v = params.visual_proj.forward(g, v_att)?;
    let mut a = params.audio_proj.forward(g, audio)?;
    for mcm in &params.mcms {
        (v, a) = mcm_forward(g, v, a, mcm, order, tau)?;
    }
    if let Some((phi_v, phi_a)) = gates {
        let d = g.shape(v)[2];
        if g.shape(phi_v) != [b * t, d] || g.shape(phi_a) != [b * t, d] {
            return Err(MpnError::dim("local_to_global", g.shape(phi_v), &[b * t, d]));
        }
        let gv = g.reshape(phi_v, &[b, t, d])?;
        let ga = g.reshape(phi_a, &[b, t, d])?;
        v = g.mul(v, gv)?;
        a = g.mul(a, ga)?;
    }
    let joint = g.concat(&[v, a])?;
    let features = self_attention(g, joint, &params.final_block, tau)?;
    let (p_c, p_c_seg) = classify(g, features, &params.classifier)?;
    Ok(ClassificationOutput { p_c, p_c_seg, features })
}

/// Unimodal relevance scores from refined features `[B·T × k]` and their
/// product, each `[B × T]`.
pub fn relevance<F: Scalar>(
    g: &mut Graph<'_, F>,
    v_hat: Var,
    a_hat: Var,
    b: usize,
    t: usize,
    params: &LocalizationParams,
) -> Result<(Var, Var, Var)> {
    let lv = params.visual_relevance.forward(g, v_hat)?;
    let la = params.audio_relevance.forward(g, a_hat)?;
    let pv = g.sigmoid(lv);
    let pa = g.sigmoid(la);
    let pv = g.reshape(pv, &[b, t])?;
    let pa = g.reshape(pa, &[b, t])?;
    let p_r = g.mul(pa, pv)?;
    Ok((p_r, pv, pa))
}

/// Localization subnetwork outputs; gates are `[B·T × k]`.
#[derive(Clone, Copy, Debug)]
pub struct LocalizationOutput {
    pub p_r: Var,
    pub p_r_visual: Var,
    pub p_r_audio: Var,
    pub phi_v: Var,
    pub phi_a: Var,
    pub v_hat: Var,
    pub a_hat: Var,
}

/// Bottleneck attention then one sigmoid MLP per modality; the event
/// relevance is the product of the two unimodal scores.
pub fn localization_forward<F: Scalar>(
    g: &mut Graph<'_, F>,
    v_att: Var,
    audio: Var,
    params: &LocalizationParams,
) -> Result<LocalizationOutput> {
    let shape = g.shape(v_att).to_vec();
    let (b, t, p) = (shape[0], shape[1], shape[2]);
    let q = g.shape(audio)[2];
    let fv = g.reshape(v_att, &[b * t, p])?;
    let fa = g.reshape(audio, &[b * t, q])?;
    let m = mbam_forward(g, fv, fa, &params.mbam)?;
    let (p_r, pv, pa) = relevance(g, m.v_hat, m.a_hat, b, t, params)?;
    Ok(LocalizationOutput {
        p_r,
        p_r_visual: pv,
        p_r_audio: pa,
        phi_v: m.phi_v,
        phi_a: m.phi_a,
        v_hat: m.v_hat,
        a_hat: m.a_hat,
    })
}

/// Per-video prediction values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub p_r: Vec<f32>,
    pub p_c: Vec<f32>,
    pub p_c_seg: Vec<Vec<f32>>,
    pub p_j: Vec<Vec<f32>>,
    pub agva_weights: Vec<Vec<f32>>,
}

impl Predictions {
    pub fn from_forward<F: Scalar>(g: &Graph<'_, F>, out: &ForwardOutput) -> Vec<Predictions> {
        let rows = |v: Var| -> Vec<Vec<f32>> {
            let t = g.value(v);
            let n = t.last_dim();
            t.data().chunks(n).map(|c| c.iter().map(|x| x.to_f() as f32).collect()).collect()
        };
        let p_r = rows(out.p_r);
        let p_c = rows(out.p_c);
        let b = p_r.len();
        let t = p_r[0].len();
        let split = |v: Var| -> Vec<Vec<Vec<f32>>> {
            let r = rows(v);
            r.chunks(t).map(|c| c.to_vec()).collect()
        };
        let (seg, joint, agva) = (split(out.p_c_seg), split(out.p_j), split(out.agva_weights));
        (0..b)
            .map(|i| Predictions {
                p_r: p_r[i].clone(),
                p_c: p_c[i].clone(),
                p_c_seg: seg[i].clone(),
                p_j: joint[i].clone(),
                agva_weights: agva[i].clone(),
            })
            .collect()
    }
}

/// How segment labels are read off the predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[default]
    Full,
    Weak,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Full => "full",
            Regime::Weak => "weak",
        })
    }
}

impl FromStr for Regime {
    type Err = MpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Regime::Full),
            "weak" => Ok(Regime::Weak),
            _ => Err(MpnError::Config(format!("unknown regime {s:?} (expected full or weak)"))),
        }
    }
}

pub const DECODE_THRESHOLD: f32 = 0.5;

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Segment labels: a class index, or `classes` for background. A segment is
/// an event when `p_r ≥ threshold`.
pub fn decode(preds: &Predictions, regime: Regime, threshold: f32) -> Vec<usize> {
    let background = preds.p_c.len();
    let video_class = argmax(&preds.p_c);
    preds
        .p_r
        .iter()
        .enumerate()
        .map(|(t, &r)| {
            if r >= threshold {
                match regime {
                    Regime::Full => video_class,
                    Regime::Weak => argmax(&preds.p_c_seg[t]),
                }
            } else {
                background
            }
        })
        .collect()
}
