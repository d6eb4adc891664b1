//! Representational independence: per-layer cosine profiling under
//! intervention, the independence loss, iterative independent-direction
//! search, and the pass/fail verifier.
//!
//! Two directions are representationally independent (under directional
//! ablation) when ablating either one leaves the other's per-layer cosine
//! representation unchanged. Orthogonality does not imply this: ablating a
//! direction early can shift representations downstream through the
//! network's nonlinearities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PromptRecord, Token};
use crate::interventions::{cosine, Direction, DirectionSource, SelectionContext};
use crate::model::{InterventionSpec, TapeIntervention, TokenInput, ToyModel};
use crate::rdo::{rdo_train, OptimConfig, RdoOptions, RdoOutcome};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Error;

/// Constraint block for independence-regularized training.
#[derive(Debug, Clone)]
pub struct RepIndSetup {
    /// Directions the trained vector must stay independent of.
    pub constraints: Vec<Direction>,
    /// Loss weight (λ_ind).
    pub lambda: f64,
    /// Fraction of trace points included in the layer set.
    pub layer_cutoff: f64,
}

impl RepIndSetup {
    pub fn new(constraints: Vec<Direction>) -> Self {
        RepIndSetup {
            constraints,
            lambda: DEFAULT_LAMBDA_IND,
            layer_cutoff: DEFAULT_LAYER_CUTOFF,
        }
    }
}

pub const DEFAULT_LAMBDA_IND: f64 = 200.0;
pub const DEFAULT_LAYER_CUTOFF: f64 = 0.9;

/// The first `floor(cutoff * (n_layers + 1))` trace points, at least one.
/// A cutoff below 1 always leaves the latest trace points unconstrained;
/// constraining representations right at the unembedding input pins the
/// output itself.
pub fn layer_set(n_layers: usize, cutoff: f64) -> Result<Vec<usize>, Error> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(Error::Config(format!("layer cutoff must be in (0, 1], got {cutoff}")));
    }
    let points = n_layers + 1;
    let k = ((cutoff * points as f64).floor() as usize).clamp(1, points);
    Ok((0..k).collect())
}

/// Mean cosine between a direction and the last-token residual, per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CosineProfile {
    /// `per_layer[l]` is the mean over prompts of
    /// `cos(direction, x_last^(l))`.
    pub per_layer: Vec<f64>,
    /// Description of the intervention active while profiling.
    pub intervention: String,
}

/// Profiles `direction` against the last-token residual stream of each
/// prompt under `intervention`.
pub fn cosine_profile(
    model: &ToyModel,
    direction: &[f64],
    prompts: &[Vec<Token>],
    intervention: &InterventionSpec,
) -> Result<CosineProfile, Error> {
    if prompts.is_empty() {
        return Err(Error::Empty { what: "prompt set" });
    }
    if direction.len() != model.config.d_model {
        return Err(Error::DirectionDim {
            direction: direction.len(),
            d_model: model.config.d_model,
        });
    }
    let n_points = model.config.n_layers + 1;
    let per_prompt: Vec<Result<Vec<f64>, Error>> = prompts
        .par_iter()
        .map(|p| {
            let (_, trace) = model.forward(p, intervention)?;
            Ok((0..n_points)
                .map(|l| cosine(direction, trace.last_residual(l)))
                .collect())
        })
        .collect();
    let mut per_layer = vec![0.0; n_points];
    for r in per_prompt {
        let cs = r?;
        for (acc, c) in per_layer.iter_mut().zip(&cs) {
            *acc += c;
        }
    }
    let n = prompts.len() as f64;
    per_layer.iter_mut().for_each(|v| *v /= n);
    Ok(CosineProfile {
        per_layer,
        intervention: intervention.describe(),
    })
}

/// The independence loss between `r` (raw, will be normalized) and a fixed
/// direction `v`, averaged over the prompt tokens and the layer set.
///
/// Pure evaluation path; [`repind_loss_and_grad`] is the differentiable
/// twin and the two must agree.
pub fn repind_loss_value(
    model: &ToyModel,
    r_raw: &[f64],
    v: &Direction,
    prompts: &[Vec<Token>],
    layer_cutoff: f64,
) -> Result<f64, Error> {
    if prompts.is_empty() {
        return Err(Error::Empty { what: "prompt set" });
    }
    let layers = layer_set(model.config.n_layers, layer_cutoff)?;
    let r = Direction::from_raw(
        r_raw.to_vec(),
        DirectionSource::Random,
        0,
        crate::interventions::TokenPosition::Last,
    )?;
    let mut total = 0.0;
    for p in prompts {
        let (_, clean) = model.forward(p, &InterventionSpec::none())?;
        let (_, abl_v) = model.forward(p, &v.ablation())?;
        let (_, abl_r) = model.forward(p, &r.ablation())?;
        let mut prompt_term = 0.0;
        for &l in &layers {
            let mut layer_term = 0.0;
            for i in 0..p.len() {
                let d1 = cosine(clean.residual(l, i), &r.vector)
                    - cosine(abl_v.residual(l, i), &r.vector);
                let d2 = cosine(clean.residual(l, i), &v.vector)
                    - cosine(abl_r.residual(l, i), &v.vector);
                layer_term += d1 * d1 + d2 * d2;
            }
            prompt_term += layer_term / p.len() as f64;
        }
        total += prompt_term / layers.len() as f64;
    }
    Ok(total / prompts.len() as f64)
}

/// Differentiable independence loss w.r.t. the raw direction `r`, built on
/// a tape (clean and `v`-ablated passes are constants; the `r`-ablated pass
/// carries the gradient).
pub fn repind_loss_and_grad(
    model: &ToyModel,
    r_raw: &[f64],
    v: &Direction,
    prompts: &[Vec<Token>],
    layer_cutoff: f64,
) -> Result<(f64, Vec<f64>), Error> {
    if prompts.is_empty() {
        return Err(Error::Empty { what: "prompt set" });
    }
    let layers = layer_set(model.config.n_layers, layer_cutoff)?;
    let d = model.config.d_model;

    let mut tape = Tape::new();
    let w = model.weights_on_tape(&mut tape, false);
    let r_leaf = tape.leaf(Tensor::vector(r_raw.to_vec()));
    let norm = tape.l2norm(r_leaf);
    let rhat = tape.div_scalar(r_leaf, norm)?;
    let rhat_col = tape.reshape(rhat, vec![d, 1])?;
    let v_col = tape.constant(Tensor::new(vec![d, 1], v.vector.clone())?);

    let mut prompt_terms = Vec::new();
    for p in prompts {
        let (_, clean) = model.forward(p, &InterventionSpec::none())?;
        let (_, abl_v) = model.forward(p, &v.ablation())?;
        let fp = model.forward_with_weights(
            &mut tape,
            &w,
            TokenInput::Ids(p),
            &TapeIntervention::Ablate { unit: rhat },
        )?;
        let rows_norms = |trace: &crate::model::ActivationTrace, l: usize| {
            let t = trace.layer(l);
            let data = t.data().to_vec();
            let norms: Vec<f64> = (0..p.len())
                .map(|i| crate::tensor::l2_norm(trace.residual(l, i)))
                .collect();
            (
                Tensor::new(vec![p.len(), d], data).unwrap(),
                Tensor::new(vec![p.len(), 1], norms).unwrap(),
            )
        };
        let mut layer_terms = Vec::new();
        for &l in &layers {
            let (xc, nc) = rows_norms(&clean, l);
            let (xa, na) = rows_norms(&abl_v, l);
            let xc_v = tape.constant(xc);
            let nc_v = tape.constant(nc);
            let xa_v = tape.constant(xa);
            let na_v = tape.constant(na);
            let c1_num = tape.matmul(xc_v, rhat_col)?;
            let c1 = tape.div(c1_num, nc_v)?;
            let c2_num = tape.matmul(xa_v, rhat_col)?;
            let c2 = tape.div(c2_num, na_v)?;
            let d1 = tape.sub(c1, c2)?;
            let s1 = tape.mul(d1, d1)?;

            let cos_clean_v: Vec<f64> = (0..p.len())
                .map(|i| cosine(clean.residual(l, i), &v.vector))
                .collect();
            let c3 = tape.constant(Tensor::new(vec![p.len(), 1], cos_clean_v)?);
            let xr = fp.residuals[l];
            let nr = tape.row_norms(xr)?;
            let c4_num = tape.matmul(xr, v_col)?;
            let c4 = tape.div(c4_num, nr)?;
            let d2 = tape.sub(c3, c4)?;
            let s2 = tape.mul(d2, d2)?;

            let both = tape.add(s1, s2)?;
            layer_terms.push(tape.mean(both));
        }
        let mut acc = layer_terms[0];
        for &t in &layer_terms[1..] {
            acc = tape.add(acc, t)?;
        }
        prompt_terms.push(tape.scale(acc, 1.0 / layers.len() as f64));
    }
    let mut acc = prompt_terms[0];
    for &t in &prompt_terms[1..] {
        acc = tape.add(acc, t)?;
    }
    let loss = tape.scale(acc, 1.0 / prompts.len() as f64);
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((value, grads.wrt_or_zeros(r_leaf, d)))
}

// ── verification ────────────────────────────────────────────────────────

pub const DEFAULT_EPSILON: f64 = 0.05;

/// Outcome of an independence check between two directions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndependenceReport {
    pub schema_version: u32,
    pub epsilon: f64,
    pub layer_cutoff: f64,
    /// |Δ cos| per layer for the first direction's representation when the
    /// second is ablated.
    pub deviation_r: Vec<f64>,
    /// The reverse ordering.
    pub deviation_v: Vec<f64>,
    pub max_deviation_r: f64,
    pub max_deviation_v: f64,
    pub pass: bool,
    pub model_checksum: String,
}

/// Checks whether ablating either direction moves the other's prompt-mean
/// cosine profile by less than `epsilon` on every layer in the cutoff set.
pub fn verify_independence(
    model: &ToyModel,
    r: &Direction,
    v: &Direction,
    prompts: &[Vec<Token>],
    epsilon: f64,
    layer_cutoff: f64,
) -> Result<IndependenceReport, Error> {
    let layers = layer_set(model.config.n_layers, layer_cutoff)?;
    let r_clean = cosine_profile(model, &r.vector, prompts, &InterventionSpec::none())?;
    let r_under_v = cosine_profile(model, &r.vector, prompts, &v.ablation())?;
    let v_clean = cosine_profile(model, &v.vector, prompts, &InterventionSpec::none())?;
    let v_under_r = cosine_profile(model, &v.vector, prompts, &r.ablation())?;
    let dev = |a: &CosineProfile, b: &CosineProfile| -> Vec<f64> {
        layers
            .iter()
            .map(|&l| (a.per_layer[l] - b.per_layer[l]).abs())
            .collect()
    };
    let deviation_r = dev(&r_clean, &r_under_v);
    let deviation_v = dev(&v_clean, &v_under_r);
    let max_r = deviation_r.iter().cloned().fold(0.0, f64::max);
    let max_v = deviation_v.iter().cloned().fold(0.0, f64::max);
    Ok(IndependenceReport {
        schema_version: 1,
        epsilon,
        layer_cutoff,
        deviation_r,
        deviation_v,
        max_deviation_r: max_r,
        max_deviation_v: max_v,
        pass: max_r < epsilon && max_v < epsilon,
        model_checksum: model.checksum()?,
    })
}

pub fn save_independence_report(
    path: &std::path::Path,
    report: &IndependenceReport,
) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

// ── training ────────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct RepIndOutcome {
    pub direction: Direction,
    /// All candidate directions, one per seed.
    pub candidates: Vec<Direction>,
    /// Validation refusal score of each candidate under its own ablation
    /// (mean refusal-propensity; lower is a stronger attack).
    pub refusal_scores: Vec<f64>,
    /// Set when no candidate beat the random-direction ASR baseline.
    pub failed: bool,
    /// ASR of the selected candidate and of the random baseline.
    pub selected_asr: f64,
    pub random_asr: f64,
}

/// Trains `n_candidates` independence-constrained directions with distinct
/// init seeds and returns the one with the lowest validation refusal score.
/// The outcome carries a failure flag when none beats the random-direction
/// ASR baseline.
#[allow(clippy::too_many_arguments)]
pub fn train_repind_direction(
    model: &ToyModel,
    dataset: &[PromptRecord],
    constraints: &RepIndSetup,
    cfg: &OptimConfig,
    sel_ctx: &SelectionContext<'_>,
    n_candidates: usize,
    max_new_tokens: usize,
    matcher: &crate::eval::RefusalMatcher,
) -> Result<RepIndOutcome, Error> {
    if n_candidates == 0 {
        return Err(Error::Config("need at least one candidate".into()));
    }
    for c in &constraints.constraints {
        if !c.is_unit() {
            return Err(Error::Config("constraint directions must be unit norm".into()));
        }
    }
    let mut candidates = Vec::with_capacity(n_candidates);
    for k in 0..n_candidates {
        let options = RdoOptions {
            init_seed: cfg.seed.wrapping_mul(6364136223846793005).wrapping_add(k as u64 + 1),
            orthogonal_to: None,
            repind: Some(constraints.clone()),
        };
        let outcome: RdoOutcome = rdo_train(model, dataset, cfg, &options, sel_ctx)?;
        let mut dir = outcome.direction;
        dir.source = DirectionSource::RepInd;
        candidates.push(dir);
    }

    // Validation refusal score: mean refusal-propensity under ablation.
    let mut refusal_scores = Vec::with_capacity(n_candidates);
    for c in &candidates {
        let mut s = 0.0;
        for p in sel_ctx.harmful_val {
            s += crate::eval::refusal_propensity(model, p, &c.ablation())?;
        }
        refusal_scores.push(s / sel_ctx.harmful_val.len() as f64);
    }
    let mut best = 0;
    for i in 1..n_candidates {
        if refusal_scores[i] < refusal_scores[best] {
            best = i;
        }
    }

    let selected = candidates[best].clone();
    let selected_asr = crate::eval::asr_fraction(
        model,
        sel_ctx.harmful_val,
        &selected.ablation(),
        max_new_tokens,
        matcher,
    )?;
    let random = Direction::random(model.config.d_model, cfg.seed ^ 0xD1CE, selected.layer);
    let random_asr = crate::eval::asr_fraction(
        model,
        sel_ctx.harmful_val,
        &random.ablation(),
        max_new_tokens,
        matcher,
    )?;
    let failed = selected_asr <= random_asr;
    if failed {
        log::warn!(
            "independence-constrained search failed: ASR {selected_asr:.3} does not beat the random baseline {random_asr:.3}"
        );
    }
    Ok(RepIndOutcome {
        direction: selected,
        candidates,
        refusal_scores,
        failed,
        selected_asr,
        random_asr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interventions::TokenPosition;
    use crate::model::ModelConfig;

    #[test]
    fn layer_set_honors_cutoff() {
        // 4 layers -> 5 trace points; 0.9 covers the first four, leaving
        // the unembedding input unconstrained; 1.0 covers all.
        assert_eq!(layer_set(4, 0.9).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(layer_set(4, 1.0).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(layer_set(4, 0.6).unwrap(), vec![0, 1, 2]);
        assert!(layer_set(4, 0.0).is_err());
    }

    fn tiny_model(seed: u64) -> ToyModel {
        ToyModel::init(ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_mlp: 32,
            max_seq_len: 16,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn profile_of_own_activation_is_one() {
        let m = tiny_model(3);
        let p = vec![3u32, 7, 9];
        let (_, trace) = m.forward(&p, &InterventionSpec::none()).unwrap();
        let x = trace.last_residual(1).to_vec();
        let prof = cosine_profile(&m, &x, &[p], &InterventionSpec::none()).unwrap();
        assert!((prof.per_layer[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn profile_is_zero_under_own_ablation() {
        let m = tiny_model(4);
        let p = vec![4u32, 8, 10, 12];
        let dir = Direction::from_raw(
            (0..16).map(|i| ((i * 7 + 3) % 5) as f64 - 2.0).collect(),
            DirectionSource::Random,
            0,
            TokenPosition::Last,
        )
        .unwrap();
        let prof = cosine_profile(&m, &dir.vector, &[p], &dir.ablation()).unwrap();
        for (l, c) in prof.per_layer.iter().enumerate() {
            assert!(c.abs() < 1e-9, "layer {l}: cos {c}");
        }
    }

    #[test]
    fn repind_loss_zero_for_decoupled_subspaces() {
        // Zero every block write: the trace is constant and equals the
        // embedding, which we confine to the first half of the space. A
        // direction in the untouched half is never represented, so ablating
        // it is the identity and the loss vanishes identically.
        let mut m = tiny_model(5);
        for l in 0..m.config.n_layers {
            for w in m.weights.layers[l].wo.data_mut() {
                *w = 0.0;
            }
            for w in m.weights.layers[l].w_out.data_mut() {
                *w = 0.0;
            }
        }
        let d = m.config.d_model;
        let zero_hi = |t: &mut Tensor| {
            let cols = t.shape()[1];
            let rows = t.shape()[0];
            for r in 0..rows {
                for c in cols / 2..cols {
                    t.data_mut()[r * cols + c] = 0.0;
                }
            }
        };
        zero_hi(&mut m.weights.embed);
        zero_hi(&mut m.weights.pos_embed);

        let mut v_raw = vec![0.0; d];
        v_raw[d - 1] = 1.0;
        let v = Direction::from_raw(v_raw, DirectionSource::Random, 0, TokenPosition::Last).unwrap();
        let mut r_raw = vec![0.0; d];
        r_raw[0] = 0.6;
        r_raw[1] = 0.8;
        let prompts = vec![vec![3u32, 5, 7], vec![4u32, 6, 8, 10]];
        let loss = repind_loss_value(&m, &r_raw, &v, &prompts, 1.0).unwrap();
        assert!(loss.abs() < 1e-12, "loss = {loss}");
    }

    #[test]
    fn repind_loss_positive_for_self() {
        let m = tiny_model(6);
        let dir = Direction::from_raw(
            (0..16).map(|i| (i as f64 * 0.37).sin()).collect(),
            DirectionSource::Random,
            0,
            TokenPosition::Last,
        )
        .unwrap();
        let prompts = vec![vec![3u32, 5, 7, 9]];
        let loss = repind_loss_value(&m, &dir.vector, &dir, &prompts, 0.9).unwrap();
        assert!(loss > 1e-4, "self-ablation must move its own cosine: {loss}");
    }

    #[test]
    fn tape_and_pure_losses_agree() {
        let m = tiny_model(7);
        let v = Direction::from_raw(
            (0..16).map(|i| ((i % 3) as f64) - 1.0).collect(),
            DirectionSource::Random,
            0,
            TokenPosition::Last,
        )
        .unwrap();
        let r_raw: Vec<f64> = (0..16).map(|i| (i as f64 * 0.13).cos()).collect();
        let prompts = vec![vec![5u32, 6, 7], vec![8u32, 9, 10, 11]];
        let pure = repind_loss_value(&m, &r_raw, &v, &prompts, 0.9).unwrap();
        let (taped, grad) = repind_loss_and_grad(&m, &r_raw, &v, &prompts, 0.9).unwrap();
        assert!((pure - taped).abs() < 1e-10, "{pure} vs {taped}");
        assert_eq!(grad.len(), 16);
        assert!(grad.iter().any(|g| g.abs() > 0.0));
    }

    #[test]
    fn verify_independence_is_symmetric_and_fails_for_self() {
        let m = tiny_model(8);
        let d1 = Direction::from_raw(
            (0..16).map(|i| (i as f64 + 1.0).recip()).collect(),
            DirectionSource::Random,
            0,
            TokenPosition::Last,
        )
        .unwrap();
        let prompts = vec![vec![3u32, 4, 5, 6], vec![7u32, 8, 9]];
        let self_report = verify_independence(&m, &d1, &d1, &prompts, 0.05, 0.9).unwrap();
        assert!(!self_report.pass, "self-ablation zeroes its own cosine");

        let d2 = Direction::from_raw(
            (0..16).map(|i| ((i * i) as f64 * 0.11).sin()).collect(),
            DirectionSource::Random,
            0,
            TokenPosition::Last,
        )
        .unwrap();
        let ab = verify_independence(&m, &d1, &d2, &prompts, 0.05, 0.9).unwrap();
        let ba = verify_independence(&m, &d2, &d1, &prompts, 0.05, 0.9).unwrap();
        assert_eq!(ab.pass, ba.pass);
        assert!((ab.max_deviation_r - ba.max_deviation_v).abs() < 1e-12);
        assert!((ab.max_deviation_v - ba.max_deviation_r).abs() < 1e-12);
    }
}
