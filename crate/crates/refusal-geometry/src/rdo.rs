//! Gradient-based refusal-direction optimization: the three losses, target
//! generation, and the projected-gradient training loop.
//!
//! The trained parameter is a raw vector `r`; every loss sees only the unit
//! vector `r̂ = r / ‖r‖`, and `r` is renormalized after each optimizer step.
//! Three losses drive the refusal properties:
//!
//! - **ablation**: cross-entropy toward a compliance target on harmful
//!   prompts under directional ablation of `r̂`;
//! - **addition**: cross-entropy toward a refusal target on safe prompts
//!   with `α·r̂` added to the stream at one layer;
//! - **retain**: masked KL between the clean and ablated output
//!   distributions on safe prompts, limiting side effects.
//!
//! An optional representational-independence term and an optional hard
//! orthogonality constraint extend the same loop for the independence
//! experiments.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PromptRecord, Token, ANSWER_TOKEN};
use crate::interventions::{
    select_direction, Direction, DirectionSource, SelectionContext, SelectionOutcome,
    TokenPosition,
};
use crate::model::{InterventionSpec, TapeIntervention, TokenInput, ToyModel};
use crate::optim::AdamW;
use crate::repind::{layer_set, RepIndSetup};
use crate::tape::{Tape, Var};
use crate::tensor::{det_dot, l2_norm, Tensor};
use crate::Error;

/// Hyperparameters of the direction optimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lambda_abl: f64,
    pub lambda_add: f64,
    pub lambda_ret: f64,
    /// Scale for activation addition during training and evaluation;
    /// conventionally the norm of the DIM direction.
    pub alpha: f64,
    /// Layer receiving the activation addition.
    pub add_layer: usize,
    pub lr: f64,
    /// Records consumed per optimizer step.
    pub batch_size: usize,
    /// Microbatches per optimizer step; microbatch = batch_size / this.
    pub grad_accum_steps: usize,
    pub max_steps: usize,
    /// Cap on the number of `t_retain` tokens in the retain mask (the last
    /// prompt token is always included). `usize::MAX` means all.
    pub retain_mask_len: usize,
    pub seed: u64,
    /// Plateau check cadence (optimizer steps).
    pub plateau_every: usize,
    /// Divide the learning rate by 10 this many times at most.
    pub plateau_reductions_max: usize,
    /// Stop when the last this-many losses are flat and the lr is exhausted.
    pub flat_window: usize,
    pub flat_rel_tol: f64,
    /// Abort when the loss exceeds its initial value for this many
    /// consecutive steps.
    pub divergence_patience: usize,
    /// Checkpoint pool length for direction selection.
    pub pool_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lambda_abl: 1.0,
            lambda_add: 0.2,
            lambda_ret: 1.0,
            alpha: 1.0,
            add_layer: 0,
            lr: 0.01,
            batch_size: 16,
            grad_accum_steps: 16,
            max_steps: 300,
            retain_mask_len: usize::MAX,
            seed: 0,
            plateau_every: 5,
            plateau_reductions_max: 2,
            flat_window: 10,
            flat_rel_tol: 1e-3,
            divergence_patience: 25,
            pool_size: 20,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), Error> {
        for (name, v) in [
            ("lambda_abl", self.lambda_abl),
            ("lambda_add", self.lambda_add),
            ("lambda_ret", self.lambda_ret),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config("batch_size and grad_accum_steps must be positive".into()));
        }
        if self.batch_size % self.grad_accum_steps != 0 {
            return Err(Error::Config(format!(
                "batch_size {} must be divisible by grad_accum_steps {}",
                self.batch_size, self.grad_accum_steps
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        Ok(())
    }

    pub fn microbatch(&self) -> usize {
        self.batch_size / self.grad_accum_steps
    }
}

/// Values of the individual loss terms at one step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ablation: f64,
    pub addition: f64,
    pub retain: f64,
    pub repind: f64,
    pub total: f64,
}

// ── target generation ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetGenConfig {
    /// Greedy tokens generated for the compliance target on `p_harm`.
    pub answer_len: usize,
    /// Greedy tokens generated for the refusal target on `p_safe`.
    pub refusal_len: usize,
    /// Greedy tokens generated (no intervention) for the retain target;
    /// conventionally one shorter than `answer_len`.
    pub retain_len: usize,
    /// Below this fraction of compliance targets starting with the answer
    /// marker, the dataset is flagged low quality.
    pub low_quality_threshold: f64,
}

impl Default for TargetGenConfig {
    fn default() -> Self {
        TargetGenConfig {
            answer_len: 6,
            refusal_len: 6,
            retain_len: 5,
            low_quality_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TargetGenOutcome {
    pub records: Vec<PromptRecord>,
    pub dropped: usize,
    /// Fraction of compliance targets that begin with the answer marker.
    pub answer_marker_fraction: f64,
    pub low_quality: bool,
}

/// Fills the three targets of each record from the model itself:
/// compliance targets from ablated generation on harmful prompts, refusal
/// targets from activation addition on safe prompts, retain targets from
/// intervention-free generation. Records whose generation fails are dropped
/// with a log entry.
pub fn generate_targets(
    model: &ToyModel,
    seed_direction: &Direction,
    records: &[PromptRecord],
    cfg: &TargetGenConfig,
) -> Result<TargetGenOutcome, Error> {
    if records.is_empty() {
        return Err(Error::Empty { what: "prompt records" });
    }
    let ablate = seed_direction.ablation();
    let add = seed_direction.addition();
    let results: Vec<Option<PromptRecord>> = records
        .par_iter()
        .map(|rec| {
            let gen = || -> Result<PromptRecord, Error> {
                let a = model.generate(&rec.p_harm, cfg.answer_len, &ablate)?;
                let r = model.generate(&rec.p_safe, cfg.refusal_len, &add)?;
                let t = model.generate(&rec.p_safe, cfg.retain_len, &InterventionSpec::none())?;
                Ok(PromptRecord {
                    p_harm: rec.p_harm.clone(),
                    p_safe: rec.p_safe.clone(),
                    t_answer: a[rec.p_harm.len()..].to_vec(),
                    t_refusal: r[rec.p_safe.len()..].to_vec(),
                    t_retain: t[rec.p_safe.len()..].to_vec(),
                })
            };
            match gen() {
                Ok(rec) => Some(rec),
                Err(e) => {
                    log::warn!("target generation dropped a record: {e}");
                    None
                }
            }
        })
        .collect();
    let mut out = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for r in results {
        match r {
            Some(rec) => out.push(rec),
            None => dropped += 1,
        }
    }
    if out.is_empty() {
        return Err(Error::Empty { what: "generated target set (all records dropped)" });
    }
    let marker_hits = out
        .iter()
        .filter(|r| r.t_answer.first() == Some(&ANSWER_TOKEN))
        .count();
    let answer_marker_fraction = marker_hits as f64 / out.len() as f64;
    let low_quality = answer_marker_fraction < cfg.low_quality_threshold;
    if low_quality {
        log::warn!(
            "target set flagged low quality: only {:.0}% of compliance targets start with the answer marker",
            100.0 * answer_marker_fraction
        );
    }
    Ok(TargetGenOutcome {
        records: out,
        dropped,
        answer_marker_fraction,
        low_quality,
    })
}

// ── retain KL ───────────────────────────────────────────────────────────

/// Pointwise KL divergence between two distributions over the same support.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut kl = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            kl += p[i] * (p[i] / q[i]).ln();
        }
    }
    kl
}

/// Output rows covered by the retain mask: the last prompt token plus every
/// retain-target token except the final one (each row predicts the next
/// token, so these rows span the full target).
pub fn retain_mask_rows(prompt_len: usize, retain_len: usize, cap: usize) -> Vec<usize> {
    let n = retain_len.min(cap);
    (prompt_len - 1..prompt_len - 1 + n + 1).collect()
}

/// Mean full-vocabulary KL between the clean and ablated next-token
/// distributions over the retain mask of `p_safe ++ t_retain`.
pub fn retain_kl(
    model: &ToyModel,
    direction: &Direction,
    p_safe: &[Token],
    t_retain: &[Token],
) -> Result<f64, Error> {
    if t_retain.is_empty() {
        return Err(Error::Empty { what: "retain mask" });
    }
    let mut seq = p_safe.to_vec();
    seq.extend_from_slice(t_retain);
    let (clean, _) = model.forward(&seq, &InterventionSpec::none())?;
    let (ablated, _) = model.forward(&seq, &direction.ablation())?;
    let v = model.config.vocab_size;
    let rows = retain_mask_rows(p_safe.len(), t_retain.len(), usize::MAX);
    let mut total = 0.0;
    for &r in &rows {
        let mut p = clean.data()[r * v..(r + 1) * v].to_vec();
        let mut q = ablated.data()[r * v..(r + 1) * v].to_vec();
        crate::tape::softmax_slice(&mut p);
        crate::tape::softmax_slice(&mut q);
        total += kl_divergence(&p, &q);
    }
    Ok(total / rows.len() as f64)
}

// ── per-record losses on a tape ─────────────────────────────────────────

/// Constant per-record data reused across steps: the clean next-token
/// distributions (and their logs) at the retain-mask rows.
pub struct RetainCache {
    mask_rows: Vec<usize>,
    p: Tensor,
    log_p: Tensor,
}

pub fn build_retain_cache(
    model: &ToyModel,
    rec: &PromptRecord,
    cap: usize,
) -> Result<RetainCache, Error> {
    if rec.t_retain.is_empty() {
        return Err(Error::Empty { what: "retain mask" });
    }
    let mut seq = rec.p_safe.clone();
    seq.extend_from_slice(&rec.t_retain);
    let (clean, _) = model.forward(&seq, &InterventionSpec::none())?;
    let v = model.config.vocab_size;
    let mask_rows = retain_mask_rows(rec.p_safe.len(), rec.t_retain.len(), cap);
    let mut p = Vec::with_capacity(mask_rows.len() * v);
    let mut log_p = Vec::with_capacity(mask_rows.len() * v);
    for &r in &mask_rows {
        let mut row = clean.data()[r * v..(r + 1) * v].to_vec();
        crate::tape::softmax_slice(&mut row);
        log_p.extend(row.iter().map(|x| x.ln()));
        p.extend_from_slice(&row);
    }
    Ok(RetainCache {
        p: Tensor::new(vec![mask_rows.len(), v], p)?,
        log_p: Tensor::new(vec![mask_rows.len(), v], log_p)?,
        mask_rows,
    })
}

/// Constant per-record data for the representational-independence term:
/// clean prompt activations and activations under ablation of each
/// constraint direction, restricted to prompt rows of `p_harm`.
pub struct RepIndCache {
    layers: Vec<usize>,
    prompt_len: usize,
    /// Per layer: clean prompt-row activations `[p, d]` and row norms `[p,1]`.
    clean: Vec<(Tensor, Tensor)>,
    /// Per constraint, per layer: same under ablation of that constraint.
    ablated_v: Vec<Vec<(Tensor, Tensor)>>,
    /// Per constraint, per layer: `cos(x_clean_i, v)` as `[p, 1]`.
    cos_clean_v: Vec<Vec<Tensor>>,
}

pub fn build_repind_cache(
    model: &ToyModel,
    p_harm: &[Token],
    setup: &RepIndSetup,
) -> Result<RepIndCache, Error> {
    let layers = layer_set(model.config.n_layers, setup.layer_cutoff)?;
    let p = p_harm.len();
    let rows_norms = |trace: &crate::model::ActivationTrace, l: usize| {
        let t = trace.layer(l);
        let d = t.shape()[1];
        let data = t.data()[..p * d].to_vec();
        let norms: Vec<f64> = (0..p).map(|i| l2_norm(&data[i * d..(i + 1) * d])).collect();
        (
            Tensor::new(vec![p, d], data).unwrap(),
            Tensor::new(vec![p, 1], norms).unwrap(),
        )
    };
    let (_, clean_trace) = model.forward(p_harm, &InterventionSpec::none())?;
    let clean: Vec<(Tensor, Tensor)> = layers.iter().map(|&l| rows_norms(&clean_trace, l)).collect();
    let mut ablated_v = Vec::with_capacity(setup.constraints.len());
    let mut cos_clean_v = Vec::with_capacity(setup.constraints.len());
    for v in &setup.constraints {
        let (_, tr) = model.forward(p_harm, &v.ablation())?;
        ablated_v.push(layers.iter().map(|&l| rows_norms(&tr, l)).collect::<Vec<_>>());
        let cc: Vec<Tensor> = layers
            .iter()
            .map(|&l| {
                let cos: Vec<f64> = (0..p)
                    .map(|i| crate::interventions::cosine(clean_trace.residual(l, i), &v.vector))
                    .collect();
                Tensor::new(vec![p, 1], cos).unwrap()
            })
            .collect();
        cos_clean_v.push(cc);
    }
    Ok(RepIndCache {
        layers,
        prompt_len: p,
        clean,
        ablated_v,
        cos_clean_v,
    })
}

/// The three per-record loss terms (plus optional independence terms) on a
/// tape, differentiable through `rhat`.
#[allow(clippy::too_many_arguments)]
fn record_losses_on_tape(
    model: &ToyModel,
    tape: &mut Tape,
    w: &crate::model::TapeWeights,
    rhat: Var,
    rec: &PromptRecord,
    cfg: &OptimConfig,
    retain_cache: &RetainCache,
    repind: Option<(&RepIndSetup, &RepIndCache)>,
) -> Result<(Var, Var, Var, Option<Var>), Error> {
    if !rec.has_targets() {
        return Err(Error::Config(
            "record lacks targets; run target generation first".into(),
        ));
    }
    let d = model.config.d_model;

    // Ablation loss: CE toward t_answer on the ablated harmful pass.
    let (abl_loss, abl_residuals) = {
        let mut seq = rec.p_harm.clone();
        seq.extend_from_slice(&rec.t_answer);
        let input = &seq[..seq.len() - 1];
        let fp = model.forward_with_weights(
            tape,
            w,
            TokenInput::Ids(input),
            &TapeIntervention::Ablate { unit: rhat },
        )?;
        let p = rec.p_harm.len();
        let rows: Vec<usize> = (p - 1..p - 1 + rec.t_answer.len()).collect();
        let targets: Vec<usize> = rec.t_answer.iter().map(|&t| t as usize).collect();
        let picked = tape.gather_rows(fp.logits, &rows)?;
        (tape.cross_entropy(picked, &targets)?, fp.residuals)
    };

    // Addition loss: CE toward t_refusal with alpha*rhat added on the safe pass.
    let add_loss = {
        let mut seq = rec.p_safe.clone();
        seq.extend_from_slice(&rec.t_refusal);
        let input = &seq[..seq.len() - 1];
        let fp = model.forward_with_weights(
            tape,
            w,
            TokenInput::Ids(input),
            &TapeIntervention::AddScaled {
                unit: rhat,
                alpha: cfg.alpha,
                layer: cfg.add_layer,
            },
        )?;
        let p = rec.p_safe.len();
        let rows: Vec<usize> = (p - 1..p - 1 + rec.t_refusal.len()).collect();
        let targets: Vec<usize> = rec.t_refusal.iter().map(|&t| t as usize).collect();
        let picked = tape.gather_rows(fp.logits, &rows)?;
        tape.cross_entropy(picked, &targets)?
    };

    // Retain loss: masked KL(clean ‖ ablated) on the safe pass.
    let retain_loss = {
        let mut seq = rec.p_safe.clone();
        seq.extend_from_slice(&rec.t_retain);
        let fp = model.forward_with_weights(
            tape,
            w,
            TokenInput::Ids(&seq),
            &TapeIntervention::Ablate { unit: rhat },
        )?;
        let picked = tape.gather_rows(fp.logits, &retain_cache.mask_rows)?;
        let log_q = tape.log_softmax(picked)?;
        let log_p = tape.constant(retain_cache.log_p.clone());
        let p_const = tape.constant(retain_cache.p.clone());
        let diff = tape.sub(log_p, log_q)?;
        let prod = tape.mul(p_const, diff)?;
        let total = tape.sum(prod);
        tape.scale(total, 1.0 / retain_cache.mask_rows.len() as f64)
    };

    // Independence terms, reusing the ablated harmful pass (prompt rows of
    // a causal model match a prompt-only pass exactly).
    let repind_loss = match repind {
        None => None,
        Some((setup, cache)) => {
            let rhat_col = tape.reshape(rhat, vec![d, 1])?;
            let p = cache.prompt_len;
            let prompt_rows: Vec<usize> = (0..p).collect();
            let mut per_constraint = Vec::new();
            for (j, v) in setup.constraints.iter().enumerate() {
                let v_col = {
                    let t = Tensor::new(vec![d, 1], v.vector.clone())?;
                    tape.constant(t)
                };
                let mut layer_terms = Vec::new();
                for (li, &l) in cache.layers.iter().enumerate() {
                    // cos(x_clean, r̂) − cos(x_ablate(v), r̂)
                    let (xc, nc) = &cache.clean[li];
                    let (xa, na) = &cache.ablated_v[j][li];
                    let xc_v = tape.constant(xc.clone());
                    let nc_v = tape.constant(nc.clone());
                    let xa_v = tape.constant(xa.clone());
                    let na_v = tape.constant(na.clone());
                    let c1_num = tape.matmul(xc_v, rhat_col)?;
                    let c1 = tape.div(c1_num, nc_v)?;
                    let c2_num = tape.matmul(xa_v, rhat_col)?;
                    let c2 = tape.div(c2_num, na_v)?;
                    let d1 = tape.sub(c1, c2)?;
                    let s1 = tape.mul(d1, d1)?;

                    // cos(x_clean, v) − cos(x_ablate(r̂), v)
                    let xr = tape.gather_rows(abl_residuals[l], &prompt_rows)?;
                    let nr = tape.row_norms(xr)?;
                    let c4_num = tape.matmul(xr, v_col)?;
                    let c4 = tape.div(c4_num, nr)?;
                    let c3 = tape.constant(cache.cos_clean_v[j][li].clone());
                    let d2 = tape.sub(c3, c4)?;
                    let s2 = tape.mul(d2, d2)?;

                    let both = tape.add(s1, s2)?;
                    layer_terms.push(tape.mean(both));
                }
                let mut acc = layer_terms[0];
                for &t in &layer_terms[1..] {
                    acc = tape.add(acc, t)?;
                }
                per_constraint.push(tape.scale(acc, 1.0 / cache.layers.len() as f64));
            }
            let mut acc = per_constraint[0];
            for &t in &per_constraint[1..] {
                acc = tape.add(acc, t)?;
            }
            Some(acc)
        }
    };

    Ok((abl_loss, add_loss, retain_loss, repind_loss))
}

/// Caches for a dataset, built once per training run.
pub struct LossCaches {
    retain: Vec<RetainCache>,
    repind: Vec<RepIndCache>,
}

pub fn build_caches(
    model: &ToyModel,
    dataset: &[PromptRecord],
    cfg: &OptimConfig,
    repind: Option<&RepIndSetup>,
) -> Result<LossCaches, Error> {
    let retain: Vec<RetainCache> = {
        let results: Vec<Result<RetainCache, Error>> = dataset
            .par_iter()
            .map(|rec| build_retain_cache(model, rec, cfg.retain_mask_len))
            .collect();
        let mut out = Vec::with_capacity(results.len());
        for r in results {
            out.push(r?);
        }
        out
    };
    let repind_caches = match repind {
        None => Vec::new(),
        Some(setup) => {
            let results: Vec<Result<RepIndCache, Error>> = dataset
                .par_iter()
                .map(|rec| build_repind_cache(model, &rec.p_harm, setup))
                .collect();
            let mut out = Vec::with_capacity(results.len());
            for r in results {
                out.push(r?);
            }
            out
        }
    };
    Ok(LossCaches {
        retain,
        repind: repind_caches,
    })
}

/// Weighted total loss of one unit direction over a microbatch, assembled
/// on the shared tape.
#[allow(clippy::too_many_arguments)]
fn weighted_total_on_tape(
    model: &ToyModel,
    tape: &mut Tape,
    w: &crate::model::TapeWeights,
    rhat: Var,
    dataset: &[PromptRecord],
    indices: &[usize],
    cfg: &OptimConfig,
    caches: &LossCaches,
    repind: Option<&RepIndSetup>,
) -> Result<(Var, LossBreakdown), Error> {
    let mut abl_terms = Vec::new();
    let mut add_terms = Vec::new();
    let mut ret_terms = Vec::new();
    let mut ind_terms = Vec::new();
    for &i in indices {
        let rec = &dataset[i];
        let rp = repind.map(|s| (s, &caches.repind[i]));
        let (a, b, c, ind) =
            record_losses_on_tape(model, tape, w, rhat, rec, cfg, &caches.retain[i], rp)?;
        abl_terms.push(a);
        add_terms.push(b);
        ret_terms.push(c);
        if let Some(t) = ind {
            ind_terms.push(t);
        }
    }
    let n = indices.len() as f64;
    let mean_of = |tape: &mut Tape, terms: &[Var]| -> Result<Var, Error> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(tape.scale(acc, 1.0 / n))
    };
    let abl = mean_of(tape, &abl_terms)?;
    let add = mean_of(tape, &add_terms)?;
    let ret = mean_of(tape, &ret_terms)?;
    let mut total = tape.scale(abl, cfg.lambda_abl);
    let add_w = tape.scale(add, cfg.lambda_add);
    total = tape.add(total, add_w)?;
    let ret_w = tape.scale(ret, cfg.lambda_ret);
    total = tape.add(total, ret_w)?;
    let mut ind_val = 0.0;
    if let Some(setup) = repind {
        if !ind_terms.is_empty() {
            let ind = mean_of(tape, &ind_terms)?;
            ind_val = tape.value(ind).item()?;
            let ind_w = tape.scale(ind, setup.lambda);
            total = tape.add(total, ind_w)?;
        }
    }
    let breakdown = LossBreakdown {
        ablation: tape.value(abl).item()?,
        addition: tape.value(add).item()?,
        retain: tape.value(ret).item()?,
        repind: ind_val,
        total: tape.value(total).item()?,
    };
    Ok((total, breakdown))
}

/// Weighted loss over a microbatch of records, differentiated with respect
/// to the raw direction vector. Returns the term breakdown and `∇_r`.
#[allow(clippy::too_many_arguments)]
pub fn microbatch_loss_and_grad(
    model: &ToyModel,
    r_raw: &[f64],
    dataset: &[PromptRecord],
    indices: &[usize],
    cfg: &OptimConfig,
    caches: &LossCaches,
    repind: Option<&RepIndSetup>,
) -> Result<(LossBreakdown, Vec<f64>), Error> {
    let mut tape = Tape::new();
    let w = model.weights_on_tape(&mut tape, false);
    let r_leaf = tape.leaf(Tensor::vector(r_raw.to_vec()));
    let norm = tape.l2norm(r_leaf);
    let rhat = tape.div_scalar(r_leaf, norm)?;
    let (total, breakdown) =
        weighted_total_on_tape(model, &mut tape, &w, rhat, dataset, indices, cfg, caches, repind)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Tensor(crate::TensorError::NonFinite {
            context: "training loss".to_string(),
            index: 0,
        }));
    }
    let grads = tape.backward(total)?;
    let grad = grads.wrt_or_zeros(r_leaf, r_raw.len());
    Ok((breakdown, grad))
}

/// Cone-step loss: mean weighted total over fresh cone samples plus mean
/// over the basis vectors themselves, differentiated with respect to the
/// flattened basis matrix.
#[allow(clippy::too_many_arguments)]
pub fn microbatch_loss_and_grad_for_basis(
    model: &ToyModel,
    basis: &[Vec<f64>],
    sample_coeffs: &[Vec<f64>],
    dataset: &[PromptRecord],
    indices: &[usize],
    cfg: &OptimConfig,
    caches: &LossCaches,
) -> Result<(LossBreakdown, Vec<f64>), Error> {
    let n = basis.len();
    let d = basis[0].len();
    let mut tape = Tape::new();
    let w = model.weights_on_tape(&mut tape, false);
    let b_leaf = tape.leaf(Tensor::new(vec![n, d], basis.concat())?);

    let unit_dir_from = |tape: &mut Tape, v: Var| -> Result<Var, Error> {
        let flat = tape.reshape(v, vec![d])?;
        let norm = tape.l2norm(flat);
        Ok(tape.div_scalar(flat, norm)?)
    };

    let mut sample_totals = Vec::with_capacity(sample_coeffs.len());
    let mut agg = LossBreakdown {
        ablation: 0.0,
        addition: 0.0,
        retain: 0.0,
        repind: 0.0,
        total: 0.0,
    };
    let mut n_evals = 0.0;
    for s in sample_coeffs {
        let s_row = tape.constant(Tensor::new(vec![1, n], s.clone())?);
        let r = tape.matmul(s_row, b_leaf)?;
        let rhat = unit_dir_from(&mut tape, r)?;
        let (total, bd) =
            weighted_total_on_tape(model, &mut tape, &w, rhat, dataset, indices, cfg, caches, None)?;
        sample_totals.push(total);
        agg.ablation += bd.ablation;
        agg.addition += bd.addition;
        agg.retain += bd.retain;
        n_evals += 1.0;
    }
    let mut basis_totals = Vec::with_capacity(n);
    for i in 0..n {
        let row = tape.gather_rows(b_leaf, &[i])?;
        let rhat = unit_dir_from(&mut tape, row)?;
        let (total, bd) =
            weighted_total_on_tape(model, &mut tape, &w, rhat, dataset, indices, cfg, caches, None)?;
        basis_totals.push(total);
        agg.ablation += bd.ablation;
        agg.addition += bd.addition;
        agg.retain += bd.retain;
        n_evals += 1.0;
    }

    let mean_of = |tape: &mut Tape, terms: &[Var]| -> Result<Var, Error> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(tape.scale(acc, 1.0 / terms.len() as f64))
    };
    let l_sample = mean_of(&mut tape, &sample_totals)?;
    let l_basis = mean_of(&mut tape, &basis_totals)?;
    let loss = tape.add(l_sample, l_basis)?;

    agg.ablation /= n_evals;
    agg.addition /= n_evals;
    agg.retain /= n_evals;
    agg.total = tape.value(loss).item()?;
    if !agg.total.is_finite() {
        return Err(Error::Tensor(crate::TensorError::NonFinite {
            context: "cone training loss".to_string(),
            index: 0,
        }));
    }
    let grads = tape.backward(loss)?;
    let grad = grads.wrt_or_zeros(b_leaf, n * d);
    Ok((agg, grad))
}

/// `compute_loss` over a whole batch, value only (used by tests and the
/// gradient-check oracle path).
pub fn compute_loss(
    model: &ToyModel,
    r_raw: &[f64],
    batch: &[PromptRecord],
    cfg: &OptimConfig,
    repind: Option<&RepIndSetup>,
) -> Result<LossBreakdown, Error> {
    let caches = build_caches(model, batch, cfg, repind)?;
    let indices: Vec<usize> = (0..batch.len()).collect();
    let (breakdown, _) =
        microbatch_loss_and_grad(model, r_raw, batch, &indices, cfg, &caches, repind)?;
    Ok(breakdown)
}

/// Like [`compute_loss`] but also returns the analytic gradient.
pub fn compute_loss_and_grad(
    model: &ToyModel,
    r_raw: &[f64],
    batch: &[PromptRecord],
    cfg: &OptimConfig,
    repind: Option<&RepIndSetup>,
) -> Result<(LossBreakdown, Vec<f64>), Error> {
    let caches = build_caches(model, batch, cfg, repind)?;
    let indices: Vec<usize> = (0..batch.len()).collect();
    microbatch_loss_and_grad(model, r_raw, batch, &indices, cfg, &caches, repind)
}

// ── the training loop ───────────────────────────────────────────────────

/// Extensions to the base loop.
#[derive(Default)]
pub struct RdoOptions {
    /// Seed for the random initialization of `r` (distinct from the batch
    /// seed so candidate runs can share data order).
    pub init_seed: u64,
    /// Keep `r` (and its gradient) orthogonal to this unit vector at every
    /// step.
    pub orthogonal_to: Option<Vec<f64>>,
    /// Add `lambda * Σ` independence terms against these directions.
    pub repind: Option<RepIndSetup>,
}

#[derive(Debug)]
pub struct RdoOutcome {
    pub direction: Direction,
    /// Unit directions from the last `pool_size` optimizer steps, oldest
    /// first; the returned direction is selected from this pool.
    pub pool: Vec<Direction>,
    pub loss_curve: Vec<LossBreakdown>,
    pub selection: SelectionOutcome,
    pub lr_reductions: usize,
    pub steps_run: usize,
}

fn project_out_slice(x: &mut [f64], unit: &[f64]) {
    let c = det_dot(x, unit);
    for (xi, ui) in x.iter_mut().zip(unit) {
        *xi -= c * ui;
    }
}

/// Projected gradient descent on the direction: sample a batch, take an
/// adaptive-moment step on `r`, renormalize to unit length, and keep a
/// checkpoint pool. Converges by learning-rate plateau exhaustion; the
/// returned direction is chosen from the pool by [`select_direction`].
pub fn rdo_train(
    model: &ToyModel,
    dataset: &[PromptRecord],
    cfg: &OptimConfig,
    options: &RdoOptions,
    sel_ctx: &SelectionContext<'_>,
) -> Result<RdoOutcome, Error> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty { what: "training dataset" });
    }
    for rec in dataset {
        if !rec.has_targets() {
            return Err(Error::Config(
                "dataset contains records without targets; run target generation first".into(),
            ));
        }
    }
    let d = model.config.d_model;
    if let Some(u) = &options.orthogonal_to {
        if u.len() != d {
            return Err(Error::DirectionDim { direction: u.len(), d_model: d });
        }
    }
    let repind = options.repind.as_ref();
    let caches = build_caches(model, dataset, cfg, repind)?;

    // Initialize r: isotropic Gaussian, optionally projected, normalized.
    let mut r = {
        use rand_distr::Distribution;
        let mut rng = ChaCha8Rng::seed_from_u64(options.init_seed);
        let dist = rand_distr::StandardNormal;
        let mut v: Vec<f64> = (0..d).map(|_| dist.sample(&mut rng)).collect();
        if let Some(u) = &options.orthogonal_to {
            project_out_slice(&mut v, u);
        }
        let n = l2_norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        v
    };

    let mut opt = AdamW::new(&[d], cfg.lr);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut batch_rng);
    let mut cursor = 0usize;
    let draw = |rng: &mut ChaCha8Rng, order: &mut Vec<usize>, cursor: &mut usize, k: usize| {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if *cursor >= order.len() {
                order.shuffle(rng);
                *cursor = 0;
            }
            out.push(order[*cursor]);
            *cursor += 1;
        }
        out
    };

    let mut pool: Vec<Direction> = Vec::new();
    let mut curve: Vec<LossBreakdown> = Vec::new();
    let mut lr_reductions = 0usize;
    let mut initial_loss = f64::NAN;
    let mut above_initial_streak = 0usize;
    let mut steps_run = 0usize;

    for step in 1..=cfg.max_steps {
        steps_run = step;
        let micro = cfg.microbatch();
        let mut grad_acc = vec![0.0; d];
        let mut sums = LossBreakdown {
            ablation: 0.0,
            addition: 0.0,
            retain: 0.0,
            repind: 0.0,
            total: 0.0,
        };
        for _ in 0..cfg.grad_accum_steps {
            let idx = draw(&mut batch_rng, &mut order, &mut cursor, micro);
            let (bd, g) =
                microbatch_loss_and_grad(model, &r, dataset, &idx, cfg, &caches, repind)?;
            for (a, gi) in grad_acc.iter_mut().zip(&g) {
                *a += gi;
            }
            sums.ablation += bd.ablation;
            sums.addition += bd.addition;
            sums.retain += bd.retain;
            sums.repind += bd.repind;
            sums.total += bd.total;
        }
        let inv = 1.0 / cfg.grad_accum_steps as f64;
        for g in grad_acc.iter_mut() {
            *g *= inv;
        }
        let bd = LossBreakdown {
            ablation: sums.ablation * inv,
            addition: sums.addition * inv,
            retain: sums.retain * inv,
            repind: sums.repind * inv,
            total: sums.total * inv,
        };

        if let Some(u) = &options.orthogonal_to {
            project_out_slice(&mut grad_acc, u);
        }
        opt.lr = cfg.lr / 10f64.powi(lr_reductions as i32);
        opt.step(&mut [&mut r], &[&grad_acc]);
        if let Some(u) = &options.orthogonal_to {
            project_out_slice(&mut r, u);
        }
        let n = l2_norm(&r);
        if n < 1e-12 {
            return Err(Error::Tensor(crate::TensorError::ZeroNorm { op: "rdo step" }));
        }
        r.iter_mut().for_each(|x| *x /= n);

        pool.push(Direction {
            vector: r.clone(),
            norm_at_extraction: cfg.alpha,
            source: DirectionSource::Rdo,
            layer: cfg.add_layer,
            position: TokenPosition::Last,
        });
        if pool.len() > cfg.pool_size {
            pool.remove(0);
        }
        curve.push(bd);
        log::debug!(
            "rdo step {step}: total {:.4} (abl {:.4} add {:.4} ret {:.4} ind {:.4})",
            bd.total,
            bd.ablation,
            bd.addition,
            bd.retain,
            bd.repind
        );

        // Divergence watchdog.
        if step == 1 {
            initial_loss = bd.total;
        } else if bd.total > initial_loss {
            above_initial_streak += 1;
            if above_initial_streak >= cfg.divergence_patience {
                return Err(Error::Diverged {
                    initial: initial_loss,
                    last: bd.total,
                    steps: above_initial_streak,
                });
            }
        } else {
            above_initial_streak = 0;
        }

        // Plateau schedule: every `plateau_every` steps compare the last
        // window against the previous one.
        let w = cfg.plateau_every;
        if step % w == 0 && curve.len() >= 2 * w && lr_reductions < cfg.plateau_reductions_max {
            let last: f64 = curve[curve.len() - w..].iter().map(|b| b.total).sum::<f64>() / w as f64;
            let prev: f64 =
                curve[curve.len() - 2 * w..curve.len() - w].iter().map(|b| b.total).sum::<f64>()
                    / w as f64;
            if last > prev - cfg.flat_rel_tol * prev.abs().max(1e-12) {
                lr_reductions += 1;
                log::debug!("rdo step {step}: plateau, lr -> {}", cfg.lr / 10f64.powi(lr_reductions as i32));
            }
        }

        // Converged: lr exhausted and the recent window is flat.
        if lr_reductions >= cfg.plateau_reductions_max && curve.len() >= cfg.flat_window {
            let tail = &curve[curve.len() - cfg.flat_window..];
            let lo = tail.iter().map(|b| b.total).fold(f64::INFINITY, f64::min);
            let hi = tail.iter().map(|b| b.total).fold(f64::NEG_INFINITY, f64::max);
            let mid = 0.5 * (lo + hi);
            if (hi - lo) <= cfg.flat_rel_tol * mid.abs().max(1e-12) {
                log::debug!("rdo converged at step {step}");
                break;
            }
        }
    }

    let selection = select_direction(model, &pool, sel_ctx)?;
    Ok(RdoOutcome {
        direction: selection.direction.clone(),
        pool,
        loss_curve: curve,
        selection,
        lr_reductions,
        steps_run,
    })
}
