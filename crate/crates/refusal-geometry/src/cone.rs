//! Refusal cone optimization: orthonormal basis training, uniform cone
//! sampling, and Gram-Schmidt re-projection.
//!
//! A cone is the set of nonnegative combinations of an orthonormal basis
//! `b_1..b_N`; every unit direction inside it should mediate refusal. The
//! basis is trained jointly by projected gradient descent: each step
//! averages the direction losses over fresh Monte Carlo cone samples plus
//! the basis vectors themselves (the cone's boundary degrades first), then
//! re-orthonormalizes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PromptRecord, Token};
use crate::eval::RefusalMatcher;
use crate::interventions::{
    score_candidate, Direction, DirectionSource, SelectionContext, TokenPosition,
};
use crate::model::{InterventionSpec, ToyModel};
use crate::optim::AdamW;
use crate::rdo::{build_caches, microbatch_loss_and_grad_for_basis, LossBreakdown, OptimConfig};
use crate::tensor::{det_dot, l2_norm};
use crate::Error;

/// Residual-norm floor below which orthogonalization is degenerate.
pub const GS_DEGENERACY_FLOOR: f64 = 1e-8;

/// Training metadata carried by a basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeMeta {
    pub steps: usize,
    pub seed: u64,
    pub model_checksum: String,
}

/// An ordered orthonormal set spanning a polyhedral cone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeBasis {
    pub n: usize,
    pub vectors: Vec<Vec<f64>>,
    pub meta: ConeMeta,
}

impl ConeBasis {
    pub fn validate(&self, d_model: usize) -> Result<(), Error> {
        if self.n == 0 || self.n != self.vectors.len() {
            return Err(Error::Config(format!(
                "cone dimension {} does not match {} stored vectors",
                self.n,
                self.vectors.len()
            )));
        }
        if self.n > d_model {
            return Err(Error::Config(format!(
                "cone dimension {} exceeds d_model {d_model}",
                self.n
            )));
        }
        for v in &self.vectors {
            if v.len() != d_model {
                return Err(Error::DirectionDim { direction: v.len(), d_model });
            }
        }
        self.check_orthonormal(1e-6)
    }

    pub fn check_orthonormal(&self, tol: f64) -> Result<(), Error> {
        for i in 0..self.n {
            for j in i..self.n {
                let d = det_dot(&self.vectors[i], &self.vectors[j]);
                let target = if i == j { 1.0 } else { 0.0 };
                if (d - target).abs() > tol {
                    return Err(Error::Config(format!(
                        "basis not orthonormal: <b{i}, b{j}> = {d:.3e}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The i-th basis vector as a [`Direction`] with the given default
    /// addition scale.
    pub fn basis_direction(&self, i: usize, alpha: f64, layer: usize) -> Direction {
        Direction {
            vector: self.vectors[i].clone(),
            norm_at_extraction: alpha,
            source: DirectionSource::Rdo,
            layer,
            position: TokenPosition::Last,
        }
    }
}

/// One uniform draw from the cone's unit-sphere patch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConeSample {
    /// Nonnegative coefficients with unit Euclidean norm.
    pub coefficients: Vec<f64>,
    /// The resulting unit direction `B s`.
    pub direction: Vec<f64>,
}

/// Classical Gram-Schmidt with a re-orthogonalization pass. Preserves the
/// span and the direction of the first vector; errors with the offending
/// index when a residual collapses below [`GS_DEGENERACY_FLOOR`].
pub fn gram_schmidt(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, Error> {
    if vectors.is_empty() {
        return Err(Error::Empty { what: "vector list" });
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for (i, v) in vectors.iter().enumerate() {
        let mut u = v.clone();
        // Two projection passes; the second mops up floating-point residue.
        for _ in 0..2 {
            for w in &out {
                let c = det_dot(&u, w);
                for (ui, wi) in u.iter_mut().zip(w) {
                    *ui -= c * wi;
                }
            }
        }
        let norm = l2_norm(&u);
        if norm < GS_DEGENERACY_FLOOR {
            return Err(Error::DegenerateBasis { index: i, norm });
        }
        u.iter_mut().for_each(|x| *x /= norm);
        out.push(u);
    }
    Ok(out)
}

/// Uniform unit vector on the cone's positive-orthant patch:
/// `s = |g| / ‖g‖` for standard Gaussian `g`, then `r = B s`.
pub fn sample_cone_direction(basis: &ConeBasis, rng: &mut ChaCha8Rng) -> Result<ConeSample, Error> {
    let dist = rand_distr::StandardNormal;
    let mut s: Vec<f64> = (0..basis.n)
        .map(|_| {
            let g: f64 = dist.sample(rng);
            g.abs()
        })
        .collect();
    let norm = l2_norm(&s);
    if norm < 1e-12 {
        // Astronomically unlikely; resample deterministically.
        return sample_cone_direction(basis, rng);
    }
    s.iter_mut().for_each(|x| *x /= norm);
    let d = basis.vectors[0].len();
    let mut r = vec![0.0; d];
    for (si, b) in s.iter().zip(&basis.vectors) {
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri += si * bi;
        }
    }
    Ok(ConeSample {
        coefficients: s,
        direction: r,
    })
}

// ── training ────────────────────────────────────────────────────────────

/// Cone-specific knobs on top of the shared [`OptimConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConeConfig {
    pub n: usize,
    /// Fresh Monte Carlo cone samples per accumulation step.
    pub samples_per_step: usize,
}

impl Default for ConeConfig {
    fn default() -> Self {
        ConeConfig {
            n: 2,
            samples_per_step: 16,
        }
    }
}

#[derive(Debug)]
pub struct RcoOutcome {
    pub basis: ConeBasis,
    /// Bases from the last `pool_size` steps, oldest first.
    pub pool: Vec<ConeBasis>,
    pub loss_curve: Vec<LossBreakdown>,
    pub steps_run: usize,
    /// Index into the pool of the returned basis.
    pub selected: usize,
    /// Set when no pooled basis had every vector qualifying and the
    /// best-sample fallback decided.
    pub fallback_used: bool,
    /// Vectors re-randomized after degenerate orthogonalization.
    pub rerandomized: usize,
}

/// Projected gradient descent on all basis vectors jointly. Per
/// accumulation step the loss is the mean over fresh cone samples plus the
/// mean over the basis vectors; after each optimizer step the basis is
/// re-projected by Gram-Schmidt (degenerate vectors are re-randomized and
/// logged). Returns the most recent pooled basis whose every vector
/// qualifies under the selection scoring, falling back to the basis with
/// the best sampled-direction score.
pub fn rco_train(
    model: &ToyModel,
    dataset: &[PromptRecord],
    cfg: &OptimConfig,
    cone_cfg: &ConeConfig,
    sel_ctx: &SelectionContext<'_>,
) -> Result<RcoOutcome, Error> {
    cfg.validate()?;
    let d = model.config.d_model;
    if cone_cfg.n == 0 || cone_cfg.n > d {
        return Err(Error::Config(format!(
            "cone dimension must be in 1..={d}, got {}",
            cone_cfg.n
        )));
    }
    if cone_cfg.samples_per_step == 0 {
        return Err(Error::Config("samples_per_step must be positive".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Empty { what: "training dataset" });
    }
    let n = cone_cfg.n;
    let caches = build_caches(model, dataset, cfg, None)?;
    let checksum = model.checksum()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xC0DE));
    let dist = rand_distr::StandardNormal;
    let draw_vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d).map(|_| {
            let g: f64 = dist.sample(rng);
            g
        }).collect()
    };
    let init: Vec<Vec<f64>> = (0..n).map(|_| draw_vec(&mut rng)).collect();
    let mut basis_vecs = gram_schmidt(&init)?;
    let mut rerandomized = 0usize;

    let mut opt = AdamW::new(&[n * d], cfg.lr);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut batch_rng);
    let mut cursor = 0usize;

    let mut pool: Vec<ConeBasis> = Vec::new();
    let mut curve = Vec::new();
    let mut lr_reductions = 0usize;
    let mut steps_run = 0usize;

    for step in 1..=cfg.max_steps {
        steps_run = step;
        let micro = cfg.microbatch();
        let mut grad_acc = vec![0.0; n * d];
        let mut total_sum = LossBreakdown {
            ablation: 0.0,
            addition: 0.0,
            retain: 0.0,
            repind: 0.0,
            total: 0.0,
        };
        for _ in 0..cfg.grad_accum_steps {
            let mut idx = Vec::with_capacity(micro);
            for _ in 0..micro {
                if cursor >= order.len() {
                    order.shuffle(&mut batch_rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            // Fresh coefficient draws for this accumulation step.
            let coeffs: Vec<Vec<f64>> = (0..cone_cfg.samples_per_step)
                .map(|_| {
                    let mut s: Vec<f64> = (0..n)
                        .map(|_| {
                            let g: f64 = dist.sample(&mut batch_rng);
                            g.abs()
                        })
                        .collect();
                    let norm = l2_norm(&s).max(1e-12);
                    s.iter_mut().for_each(|x| *x /= norm);
                    s
                })
                .collect();
            let (bd, g) = microbatch_loss_and_grad_for_basis(
                model, &basis_vecs, &coeffs, dataset, &idx, cfg, &caches,
            )?;
            for (a, gi) in grad_acc.iter_mut().zip(&g) {
                *a += gi;
            }
            total_sum.ablation += bd.ablation;
            total_sum.addition += bd.addition;
            total_sum.retain += bd.retain;
            total_sum.total += bd.total;
        }
        let inv = 1.0 / cfg.grad_accum_steps as f64;
        for g in grad_acc.iter_mut() {
            *g *= inv;
        }
        let bd = LossBreakdown {
            ablation: total_sum.ablation * inv,
            addition: total_sum.addition * inv,
            retain: total_sum.retain * inv,
            repind: 0.0,
            total: total_sum.total * inv,
        };

        let mut flat: Vec<f64> = basis_vecs.concat();
        opt.lr = cfg.lr / 10f64.powi(lr_reductions as i32);
        opt.step(&mut [&mut flat], &[&grad_acc]);
        let mut updated: Vec<Vec<f64>> =
            (0..n).map(|i| flat[i * d..(i + 1) * d].to_vec()).collect();

        // Re-project; recover degenerate vectors by re-randomization.
        basis_vecs = loop {
            match gram_schmidt(&updated) {
                Ok(b) => break b,
                Err(Error::DegenerateBasis { index, norm }) => {
                    log::warn!(
                        "step {step}: basis vector {index} degenerate (residual {norm:.2e}); re-randomizing"
                    );
                    rerandomized += 1;
                    updated[index] = draw_vec(&mut rng);
                }
                Err(e) => return Err(e),
            }
        };

        pool.push(ConeBasis {
            n,
            vectors: basis_vecs.clone(),
            meta: ConeMeta {
                steps: step,
                seed: cfg.seed,
                model_checksum: checksum.clone(),
            },
        });
        if pool.len() > cfg.pool_size {
            pool.remove(0);
        }
        curve.push(bd);
        log::debug!("rco step {step}: total {:.4}", bd.total);

        let w = cfg.plateau_every;
        if step % w == 0 && curve.len() >= 2 * w && lr_reductions < cfg.plateau_reductions_max {
            let last: f64 = curve[curve.len() - w..].iter().map(|b| b.total).sum::<f64>() / w as f64;
            let prev: f64 =
                curve[curve.len() - 2 * w..curve.len() - w].iter().map(|b| b.total).sum::<f64>()
                    / w as f64;
            if last > prev - cfg.flat_rel_tol * prev.abs().max(1e-12) {
                lr_reductions += 1;
            }
        }
        if lr_reductions >= cfg.plateau_reductions_max && curve.len() >= cfg.flat_window {
            let tail = &curve[curve.len() - cfg.flat_window..];
            let lo = tail.iter().map(|b| b.total).fold(f64::INFINITY, f64::min);
            let hi = tail.iter().map(|b| b.total).fold(f64::NEG_INFINITY, f64::max);
            let mid = 0.5 * (lo + hi);
            if (hi - lo) <= cfg.flat_rel_tol * mid.abs().max(1e-12) {
                break;
            }
        }
    }

    // Selection: newest basis whose every vector qualifies (positive
    // refusal-score drop, KL under threshold); otherwise the basis whose
    // sampled directions score best.
    let mut selected = None;
    for (i, b) in pool.iter().enumerate().rev() {
        let mut all_ok = true;
        for vi in 0..n {
            let dir = b.basis_direction(vi, cfg.alpha, cfg.add_layer);
            let s = score_candidate(model, &dir, sel_ctx)?;
            if !(s.score > 0.0 && s.kl <= sel_ctx.kl_threshold) {
                all_ok = false;
                break;
            }
        }
        if all_ok {
            selected = Some(i);
            break;
        }
    }
    let fallback_used = selected.is_none();
    let selected = match selected {
        Some(i) => i,
        None => {
            // Best mean sampled-direction score.
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, b) in pool.iter().enumerate() {
                let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5A17);
                let mut mean = 0.0;
                let k = 8;
                for _ in 0..k {
                    let s = sample_cone_direction(b, &mut sample_rng)?;
                    let dir = Direction {
                        vector: s.direction,
                        norm_at_extraction: cfg.alpha,
                        source: DirectionSource::ConeSample,
                        layer: cfg.add_layer,
                        position: TokenPosition::Last,
                    };
                    mean += score_candidate(model, &dir, sel_ctx)?.score;
                }
                mean /= k as f64;
                if mean > best_score {
                    best_score = mean;
                    best = i;
                }
            }
            log::warn!("rco selection fell back to the best-sample heuristic (basis {best})");
            best
        }
    };

    Ok(RcoOutcome {
        basis: pool[selected].clone(),
        pool: pool.clone(),
        loss_curve: curve,
        steps_run,
        selected,
        fallback_used,
        rerandomized,
    })
}

// ── evaluation ──────────────────────────────────────────────────────────

/// Per-sample ablation ASR distribution of a cone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConeEvalReport {
    pub n_samples: usize,
    pub per_sample_asr: Vec<f64>,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub model_checksum: String,
}

/// Samples `n_samples` directions from the cone and measures each one's
/// directional-ablation ASR over the prompt set.
pub fn evaluate_cone(
    model: &ToyModel,
    basis: &ConeBasis,
    harmful_prompts: &[Vec<Token>],
    n_samples: usize,
    seed: u64,
    max_new_tokens: usize,
    matcher: &RefusalMatcher,
) -> Result<ConeEvalReport, Error> {
    basis.validate(model.config.d_model)?;
    if harmful_prompts.is_empty() {
        return Err(Error::Empty { what: "harmful prompt set" });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<ConeSample> = (0..n_samples)
        .map(|_| sample_cone_direction(basis, &mut rng))
        .collect::<Result<_, _>>()?;
    let asrs: Vec<Result<f64, Error>> = samples
        .par_iter()
        .map(|s| {
            crate::eval::asr_fraction(
                model,
                harmful_prompts,
                &InterventionSpec::ablate(s.direction.clone()),
                max_new_tokens,
                matcher,
            )
        })
        .collect();
    let mut per_sample = Vec::with_capacity(n_samples);
    for a in asrs {
        per_sample.push(a?);
    }
    let mut sorted = per_sample.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.is_empty() {
        f64::NAN
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    Ok(ConeEvalReport {
        n_samples,
        min: sorted.first().copied().unwrap_or(f64::NAN),
        median,
        max: sorted.last().copied().unwrap_or(f64::NAN),
        per_sample_asr: per_sample,
        model_checksum: model.checksum()?,
    })
}

// ── persistence ─────────────────────────────────────────────────────────

const CONE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ConeFile {
    schema_version: u32,
    #[serde(flatten)]
    basis: ConeBasis,
}

pub fn save_cone(path: &std::path::Path, basis: &ConeBasis) -> Result<(), Error> {
    let file = ConeFile {
        schema_version: CONE_SCHEMA_VERSION,
        basis: basis.clone(),
    };
    std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn load_cone(
    path: &std::path::Path,
    expected_checksum: Option<&str>,
) -> Result<ConeBasis, Error> {
    let file: ConeFile = serde_json::from_slice(&std::fs::read(path)?)?;
    if file.schema_version != CONE_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported cone schema_version {}",
            file.schema_version
        )));
    }
    if let Some(expected) = expected_checksum {
        if file.basis.meta.model_checksum != expected {
            return Err(Error::ChecksumMismatch {
                expected: file.basis.meta.model_checksum,
                actual: expected.to_string(),
            });
        }
    }
    Ok(file.basis)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis2() -> ConeBasis {
        ConeBasis {
            n: 2,
            vectors: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            meta: ConeMeta {
                steps: 0,
                seed: 0,
                model_checksum: "test".into(),
            },
        }
    }

    #[test]
    fn gram_schmidt_fixed_point() {
        let input = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = gram_schmidt(&input).unwrap();
        for (a, b) in out.iter().flatten().zip(input.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_schmidt_hand_case() {
        let out = gram_schmidt(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!((out[0][0] - 1.0).abs() < 1e-12 && out[0][1].abs() < 1e-12);
        assert!(out[1][0].abs() < 1e-12 && (out[1][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gram_schmidt_rejects_duplicates() {
        let err = gram_schmidt(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap_err();
        match err {
            Error::DegenerateBasis { index, .. } => assert_eq!(index, 1),
            other => panic!("expected DegenerateBasis, got {other}"),
        }
    }

    #[test]
    fn gram_schmidt_preserves_span_and_first_direction() {
        let input = vec![vec![2.0, 0.0, 0.0], vec![1.0, 3.0, 0.0], vec![1.0, 1.0, 4.0]];
        let out = gram_schmidt(&input).unwrap();
        // First vector keeps its direction.
        assert!((out[0][0] - 1.0).abs() < 1e-12);
        // Orthonormal.
        for i in 0..3 {
            for j in 0..3 {
                let d = det_dot(&out[i], &out[j]);
                let t = if i == j { 1.0 } else { 0.0 };
                assert!((d - t).abs() < 1e-10);
            }
        }
        // Span preserved: every input reconstructs from the output basis.
        for v in &input {
            let mut recon = vec![0.0; 3];
            for b in &out {
                let c = det_dot(v, b);
                for (r, bi) in recon.iter_mut().zip(b) {
                    *r += c * bi;
                }
            }
            for (a, b) in recon.iter().zip(v) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn one_dimensional_cone_always_returns_b1() {
        let basis = ConeBasis {
            n: 1,
            vectors: vec![vec![0.6, 0.8]],
            meta: ConeMeta {
                steps: 0,
                seed: 0,
                model_checksum: "test".into(),
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let s = sample_cone_direction(&basis, &mut rng).unwrap();
            assert_eq!(s.coefficients, vec![1.0]);
            assert!((s.direction[0] - 0.6).abs() < 1e-12);
            assert!((s.direction[1] - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn samples_are_unit_norm_and_nonnegative() {
        let basis = basis2();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let s = sample_cone_direction(&basis, &mut rng).unwrap();
            assert!(s.coefficients.iter().all(|&c| c >= 0.0));
            assert!((l2_norm(&s.coefficients) - 1.0).abs() < 1e-9);
            assert!((l2_norm(&s.direction) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn two_dim_mean_angle_is_45_degrees() {
        let basis = basis2();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 100_000;
        let mut mean_angle = 0.0;
        for _ in 0..n {
            let s = sample_cone_direction(&basis, &mut rng).unwrap();
            let cos_to_b1 = det_dot(&s.direction, &basis.vectors[0]);
            mean_angle += cos_to_b1.clamp(-1.0, 1.0).acos();
        }
        mean_angle = mean_angle.to_degrees() / n as f64;
        assert!(
            (mean_angle - 45.0).abs() < 1.0,
            "mean angle {mean_angle:.2}°"
        );
    }

    #[test]
    fn cone_file_round_trip() {
        let basis = basis2();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cone.json");
        save_cone(&path, &basis).unwrap();
        let back = load_cone(&path, Some("test")).unwrap();
        assert_eq!(back, basis);
        assert!(matches!(
            load_cone(&path, Some("wrong")),
            Err(Error::ChecksumMismatch { .. })
        ));
    }
}
