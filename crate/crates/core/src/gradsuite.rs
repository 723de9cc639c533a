//! Finite-difference gradient checks over every block of the network and
//! the end-to-end losses, in 64-bit arithmetic on a tiny configuration.
//!
//! Each check perturbs the parameters the block reads plus its inputs. Block
//! outputs are reduced to a scalar by a fixed random linear functional so
//! every output element contributes.

use std::time::Instant;

use crate::attention::{cross_modal_attention, mcm_forward, self_attention, AttentionConfig};
use crate::error::{MpnError, Result};
use crate::mbam::{excitation, fbc_codes, fbc_squeeze, refine, FbcConfig, SqueezeParams};
use crate::model::{
    audio_guided_attention, classification_forward, classify, localization_forward, relevance, ModelConfig, Mpn,
};
use crate::nn::{Graph, ParamStore};
use crate::rng::Rng;
use crate::tensor::{grad_check_with, FaultSite, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use crate::train::{full_loss, mil_pool, weak_loss};

/// Every block fails the suite above this relative error.
pub const SUITE_TOL: f64 = 1e-4;
/// Central-difference step.
pub const SUITE_STEP: f64 = 1e-5;
/// Denominator floor of the relative error. Coordinates whose gradient is
/// below this in magnitude are compared in absolute terms; central
/// differences carry about 1e-11 of rounding noise at this step.
pub const SUITE_FLOOR: f64 = 1e-6;
/// Inputs whose soft-threshold argument lies this close to a kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

pub const BLOCKS: &[&str] = &[
    "self_attention",
    "cross_modal_attention",
    "mcm",
    "audio_guided_attention",
    "fbc_squeeze",
    "excitation",
    "refine",
    "classification_head",
    "relevance_heads",
    "classification_subnetwork",
    "localization_subnetwork",
    "full_loss",
    "weak_loss",
    "end_to_end_full",
    "end_to_end_weak",
];

const BATCH: usize = 2;
const TAU: f64 = 2.0;

/// The tiny geometry: T=3, R=2, p=6, q=4, d_model=k=8.
#[derive(Clone, Copy, Debug)]
pub struct TinyScale {
    pub segments: usize,
    pub model: ModelConfig,
}

impl Default for TinyScale {
    fn default() -> Self {
        Self {
            segments: 3,
            model: ModelConfig {
                attention: AttentionConfig {
                    d_model: 8,
                    n_heads: 2,
                    d_k: 4,
                    d_v: 4,
                    ff_hidden: 16,
                    n_mcm: 2,
                },
                fbc: FbcConfig {
                    p: 6,
                    q: 4,
                    rank: 2,
                    atoms: 8,
                    lasso_lambda: 0.02,
                },
                classes: 3,
                regions: 2,
                agva_hidden: 6,
                classifier_hidden: 6,
                relevance_hidden: 5,
                ..ModelConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockResult {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl BlockResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

type Body<'b> = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Vec<Var>> + 'b;

struct Suite {
    scale: TinyScale,
    mpn: Mpn,
    store: ParamStore<f64>,
    fault: Option<FaultSite>,
    rng: Rng,
}

fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::from_f64(shape, &data).expect("shape")
}

impl Suite {
    fn new(scale: TinyScale, seed: u64, fault: Option<FaultSite>) -> Result<Self> {
        let rng = Rng::new(seed);
        let (mpn, store) = Mpn::init::<f64>(scale.model, &mut rng.derive(1))?;
        // Non-trivial norms and biases so no gradient vanishes by symmetry.
        let mut store = store;
        let mut perturb = rng.derive(2);
        for t in store.tensors_mut() {
            for x in t.data_mut() {
                *x += perturb.uniform(-0.1, 0.1);
            }
        }
        Ok(Self {
            scale,
            mpn,
            store,
            fault,
            rng: rng.derive(3),
        })
    }

    fn input(&mut self, shape: &[usize]) -> Tensor<f64> {
        random(&mut self.rng, shape, -1.0, 1.0)
    }

    fn probs(&mut self, shape: &[usize]) -> Tensor<f64> {
        random(&mut self.rng, shape, 0.05, 0.95)
    }

    /// Check the parameters whose names start with any of `prefixes`, plus
    /// `inputs`. `body` maps the input vars to outputs.
    fn check(&mut self, name: &'static str, prefixes: &[&str], inputs: Vec<Tensor<f64>>, body: &Body<'_>) -> Result<BlockResult> {
        let start = Instant::now();
        let selected: Vec<usize> = self
            .store
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(i, _)| i)
            .collect();
        if selected.is_empty() && !prefixes.is_empty() {
            return Err(MpnError::Parameter(format!("{name}: no parameters match {prefixes:?}")));
        }
        let mut params: Vec<Tensor<f64>> = selected.iter().map(|&i| self.store.tensors()[i].clone()).collect();
        let n_sel = params.len();
        params.extend(inputs);

        // Output shapes fix the projection weights; compute them once.
        let probe_shapes = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
            let outs = self.run(&mut tape, &vars, &selected, n_sel, body)?;
            outs.iter().map(|&o| tape.shape(o).to_vec()).collect::<Vec<_>>()
        };
        let weights: Vec<Tensor<f64>> = probe_shapes
            .iter()
            .map(|s| random(&mut self.rng, s, -1.0, 1.0))
            .collect();

        let fault = self.fault;
        let report = grad_check_with(
            |tape| {
                if let Some(site) = fault {
                    tape.inject_fault(site);
                }
            },
            |tape, vars| {
                let outs = self.run(tape, vars, &selected, n_sel, body)?;
                let mut total: Option<Var> = None;
                for (o, w) in outs.into_iter().zip(&weights) {
                    let w = tape.constant(w.clone());
                    let prod = tape.mul(o, w)?;
                    let s = tape.sum(prod);
                    total = Some(match total {
                        Some(t) => tape.add(t, s)?,
                        None => s,
                    });
                }
                total.ok_or_else(|| MpnError::Parameter(format!("{name}: block produced no outputs")))
            },
            &params,
            GradCheckOptions {
                h: SUITE_STEP,
                tol: SUITE_TOL,
                floor: SUITE_FLOOR,
            },
        )?;
        Ok(BlockResult {
            name,
            report,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Bind the whole store (selected entries as the checked leaves, the rest
    /// as constants) and evaluate `body`.
    fn run(&self, tape: &mut Tape<f64>, vars: &[Var], selected: &[usize], n_sel: usize, body: &Body<'_>) -> Result<Vec<Var>> {
        let mut bound = Vec::with_capacity(self.store.len());
        let mut next = 0;
        for (i, t) in self.store.tensors().iter().enumerate() {
            if next < n_sel && selected[next] == i {
                bound.push(vars[next]);
                next += 1;
            } else {
                bound.push(tape.constant(t.clone()));
            }
        }
        let mut g = Graph::new(tape, &bound);
        body(&mut g, &vars[n_sel..])
    }

    fn cls(&self) -> &crate::model::ClassificationParams {
        self.mpn.params.classification.as_ref().expect("full network")
    }

    fn loc(&self) -> &crate::model::LocalizationParams {
        self.mpn.params.localization.as_ref().expect("full network")
    }

    /// FBC inputs whose codes stay clear of the soft-threshold kinks.
    fn fbc_inputs(&mut self, rows: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let fbc = match &self.loc().mbam.squeeze {
            SqueezeParams::Fbc(p) => *p,
            _ => return Err(MpnError::Config("gradient suite expects the fbc squeeze".into())),
        };
        let thr = fbc.cfg.lasso_lambda / 2.0;
        let (p, q) = (fbc.cfg.p, fbc.cfg.q);
        for _ in 0..1000 {
            let fv = self.input(&[rows, p]);
            let fa = self.input(&[rows, q]);
            let mut tape = Tape::new();
            let vars = self.store.bind(&mut tape, false);
            let mut g = Graph::new(&mut tape, &vars);
            let (v, a) = (g.constant(fv.clone()), g.constant(fa.clone()));
            let c = fbc_codes(&mut g, v, a, &fbc)?;
            let clear = g
                .value(c)
                .data()
                .iter()
                .all(|x| (x.abs() - thr).abs() > KINK_MARGIN && x.abs() > KINK_MARGIN);
            if clear {
                return Ok((fv, fa));
            }
        }
        Err(MpnError::Numerical("could not draw kink-free fbc inputs".into()))
    }
}

/// Run the whole suite. `fault` corrupts one backward rule (negative control).
pub fn run_suite(scale: TinyScale, seed: u64, fault: Option<FaultSite>) -> Result<Vec<BlockResult>> {
    let mut s = Suite::new(scale, seed, fault)?;
    let cfg = s.scale.model;
    let (b, t) = (BATCH, s.scale.segments);
    let n = b * t;
    let (r, p, q) = (cfg.regions, cfg.fbc.p, cfg.fbc.q);
    let (d, k, c) = (cfg.attention.d_model, cfg.fbc.atoms, cfg.classes);
    let order = cfg.mcm_order;
    let mut out = Vec::with_capacity(BLOCKS.len());

    let blk = s.cls().mcms[0].visual[0].clone();
    let x = s.input(&[b, t, d]);
    out.push(s.check("self_attention", &["cls.mcm0.visual.0."], vec![x], &|g, v| {
        Ok(vec![self_attention(g, v[0], &blk, TAU)?])
    })?);

    let blk = s.cls().mcms[0].visual[1].clone();
    let (x, y) = (s.input(&[b, t, d]), s.input(&[b, t, d]));
    out.push(s.check("cross_modal_attention", &["cls.mcm0.visual.1."], vec![x, y], &|g, v| {
        Ok(vec![cross_modal_attention(g, v[0], v[1], &blk, TAU)?])
    })?);

    let mcm = s.cls().mcms[0].clone();
    let (x, y) = (s.input(&[b, t, d]), s.input(&[b, t, d]));
    out.push(s.check("mcm", &["cls.mcm0."], vec![x, y], &|g, v| {
        let (vo, ao) = mcm_forward(g, v[0], v[1], &mcm, order, TAU)?;
        Ok(vec![vo, ao])
    })?);

    let agva = s.mpn.params.agva;
    let (x, y) = (s.input(&[b, t, r, p]), s.input(&[b, t, q]));
    out.push(s.check("audio_guided_attention", &["agva."], vec![x, y], &|g, v| {
        let (pooled, w) = audio_guided_attention(g, v[0], v[1], &agva)?;
        Ok(vec![pooled, w])
    })?);

    let fbc = match &s.loc().mbam.squeeze {
        SqueezeParams::Fbc(f) => *f,
        _ => unreachable!("checked in fbc_inputs"),
    };
    let (fv, fa) = s.fbc_inputs(n)?;
    out.push(s.check("fbc_squeeze", &["loc.mbam.squeeze."], vec![fv, fa], &|g, v| {
        Ok(vec![fbc_squeeze(g, v[0], v[1], &fbc)?])
    })?);

    let exc = s.loc().mbam.excitation;
    let z = s.input(&[n, k]);
    out.push(s.check("excitation", &["loc.mbam.excitation.visual_gate.", "loc.mbam.excitation.audio_gate."], vec![z], &|g, v| {
        let (pv, pa) = excitation(g, v[0], &exc)?;
        Ok(vec![pv, pa])
    })?);

    let inputs = vec![s.input(&[n, p]), s.input(&[n, q]), s.probs(&[n, k]), s.probs(&[n, k])];
    out.push(s.check("refine", &["loc.mbam.excitation.visual_proj.", "loc.mbam.excitation.audio_proj."], inputs, &|g, v| {
        let (vh, ah) = refine(g, v[0], v[1], v[2], v[3], &exc)?;
        Ok(vec![vh, ah])
    })?);

    let head = s.cls().classifier;
    let feats = s.input(&[b, t, 2 * d]);
    out.push(s.check("classification_head", &["cls.head."], vec![feats], &|g, v| {
        let (pc, ps) = classify(g, v[0], &head)?;
        Ok(vec![pc, ps])
    })?);

    let loc = s.loc().clone();
    let (vh, ah) = (s.input(&[n, k]), s.input(&[n, k]));
    out.push(s.check("relevance_heads", &["loc.visual_relevance.", "loc.audio_relevance."], vec![vh, ah], &|g, v| {
        let (pr, pv, pa) = relevance(g, v[0], v[1], b, t, &loc)?;
        Ok(vec![pr, pv, pa])
    })?);

    let cls = s.cls().clone();
    let inputs = vec![s.input(&[b, t, p]), s.input(&[b, t, q]), s.probs(&[n, d]), s.probs(&[n, d])];
    out.push(s.check("classification_subnetwork", &["cls."], inputs, &|g, v| {
        let o = classification_forward(g, v[0], v[1], &cls, order, TAU, Some((v[2], v[3])))?;
        Ok(vec![o.p_c, o.p_c_seg])
    })?);

    let (x, y) = (s.input(&[b, t, p]), s.input(&[b, t, q]));
    out.push(s.check("localization_subnetwork", &["loc."], vec![x, y], &|g, v| {
        let o = localization_forward(g, v[0], v[1], &loc)?;
        Ok(vec![o.p_r, o.phi_v, o.phi_a])
    })?);

    let seg_labels: Vec<Vec<usize>> = (0..b)
        .map(|i| (0..t).map(|j| if (i + j) % 2 == 0 { i % c } else { c }).collect())
        .collect();
    let video_labels: Vec<usize> = (0..b).map(|i| i % c).collect();
    let lambda = 0.6;
    let (pr, pc) = (s.probs(&[b, t]), s.probs(&[b, c]));
    out.push(s.check("full_loss", &[], vec![pr, pc], &|g, v| {
        Ok(vec![full_loss(g, v[0], v[1], &seg_labels, &video_labels, lambda)?])
    })?);

    let pj = s.probs(&[b, t, c]);
    out.push(s.check("weak_loss", &[], vec![pj], &|g, v| {
        let pooled = mil_pool(g, v[0])?;
        Ok(vec![weak_loss(g, pooled, &video_labels)?])
    })?);

    let mpn = s.mpn.clone();
    let (x, y) = (s.input(&[b, t, r, p]), s.input(&[b, t, q]));
    out.push(s.check("end_to_end_full", &[""], vec![x.clone(), y.clone()], &|g, v| {
        let o = mpn.forward(g, v[0], v[1], TAU)?;
        Ok(vec![full_loss(g, o.p_r, o.p_c, &seg_labels, &video_labels, lambda)?])
    })?);

    out.push(s.check("end_to_end_weak", &[""], vec![x, y], &|g, v| {
        let o = mpn.forward(g, v[0], v[1], TAU)?;
        let pooled = mil_pool(g, o.p_j)?;
        Ok(vec![weak_loss(g, pooled, &video_labels)?])
    })?);

    debug_assert_eq!(out.iter().map(|r| r.name).collect::<Vec<_>>(), BLOCKS);
    Ok(out)
}

/// Tab-separated report with a header row.
pub fn format_report(results: &[BlockResult]) -> String {
    let mut s = String::from("block\tmax_rel_error\tcoordinates\tseconds\tstatus\n");
    for r in results {
        s.push_str(&format!(
            "{}\t{:.3e}\t{}\t{:.2}\t{}\n",
            r.name,
            r.report.max_rel_error,
            r.report.coordinates,
            r.seconds,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}
