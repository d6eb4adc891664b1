//! Linear interventions on the residual stream and the difference-in-means
//! baseline extractor.
//!
//! A [`Direction`] stores a unit vector plus extraction metadata; the
//! pre-normalization magnitude is kept in `norm_at_extraction` and doubles
//! as the default scale for activation addition.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Token;
use crate::model::{InterventionSpec, ToyModel};
use crate::tensor::{det_dot, l2_norm};
use crate::Error;

/// Where a direction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionSource {
    Dim,
    Rdo,
    ConeSample,
    RepInd,
    Random,
}

/// Token position used when reading residual activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPosition {
    /// The final prompt token.
    Last,
    Index(usize),
}

impl TokenPosition {
    pub fn resolve(&self, seq_len: usize) -> Result<usize, Error> {
        match *self {
            TokenPosition::Last => Ok(seq_len - 1),
            TokenPosition::Index(i) if i < seq_len => Ok(i),
            TokenPosition::Index(i) => Err(Error::Config(format!(
                "token position {i} out of range for a {seq_len}-token prompt"
            ))),
        }
    }
}

/// A unit vector in residual-stream space with intervention metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub vector: Vec<f64>,
    pub norm_at_extraction: f64,
    pub source: DirectionSource,
    pub layer: usize,
    pub position: TokenPosition,
}

impl Direction {
    /// Normalizes `raw` and stores its original magnitude.
    pub fn from_raw(
        raw: Vec<f64>,
        source: DirectionSource,
        layer: usize,
        position: TokenPosition,
    ) -> Result<Self, Error> {
        let norm = l2_norm(&raw);
        if norm < 1e-12 {
            return Err(Error::Tensor(crate::TensorError::ZeroNorm {
                op: "Direction::from_raw",
            }));
        }
        Ok(Direction {
            vector: raw.iter().map(|v| v / norm).collect(),
            norm_at_extraction: norm,
            source,
            layer,
            position,
        })
    }

    /// Seeded random unit direction (the control baseline).
    pub fn random(d_model: usize, seed: u64, layer: usize) -> Self {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dist = rand_distr::StandardNormal;
        let raw: Vec<f64> = (0..d_model).map(|_| dist.sample(&mut rng)).collect();
        Direction::from_raw(raw, DirectionSource::Random, layer, TokenPosition::Last)
            .expect("gaussian vector has positive norm")
    }

    pub fn is_unit(&self) -> bool {
        (l2_norm(&self.vector) - 1.0).abs() <= 1e-9
    }

    /// Ablation spec for this direction.
    pub fn ablation(&self) -> InterventionSpec {
        InterventionSpec::ablate(self.vector.clone())
    }

    /// Activation addition at this direction's layer with the default scale
    /// (the extraction norm).
    pub fn addition(&self) -> InterventionSpec {
        InterventionSpec::add(self.vector.clone(), self.norm_at_extraction, self.layer)
    }

    /// Activation addition with an explicit scale.
    pub fn addition_scaled(&self, alpha: f64) -> InterventionSpec {
        InterventionSpec::add(self.vector.clone(), alpha, self.layer)
    }

    /// Activation subtraction with an explicit scale.
    pub fn subtraction_scaled(&self, alpha: f64) -> InterventionSpec {
        InterventionSpec::subtract(self.vector.clone(), alpha, self.layer)
    }
}

/// Sign for [`add_scaled`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

/// `x - r̂ r̂ᵀ x`: removes the component of `x` along the direction.
pub fn ablate_vector(x: &[f64], r: &Direction) -> Result<Vec<f64>, Error> {
    if x.len() != r.vector.len() {
        return Err(Error::DirectionDim {
            direction: r.vector.len(),
            d_model: x.len(),
        });
    }
    let norm = l2_norm(&r.vector);
    if norm < 1e-12 {
        return Err(Error::Tensor(crate::TensorError::ZeroNorm { op: "ablate_vector" }));
    }
    let unit: Vec<f64> = r.vector.iter().map(|v| v / norm).collect();
    let c = det_dot(x, &unit);
    Ok(x.iter().zip(&unit).map(|(xi, ui)| xi - c * ui).collect())
}

/// `x ± α·r̂`.
pub fn add_scaled(x: &[f64], r: &Direction, alpha: f64, sign: Sign) -> Result<Vec<f64>, Error> {
    if x.len() != r.vector.len() {
        return Err(Error::DirectionDim {
            direction: r.vector.len(),
            d_model: x.len(),
        });
    }
    if !alpha.is_finite() {
        return Err(Error::Config("non-finite alpha".into()));
    }
    let s = match sign {
        Sign::Plus => alpha,
        Sign::Minus => -alpha,
    };
    Ok(x.iter().zip(&r.vector).map(|(xi, ri)| xi + s * ri).collect())
}

/// Cosine similarity of two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    det_dot(a, b) / (na * nb)
}

/// The difference-in-means formula on raw activation vectors: mean of the
/// first set minus mean of the second. Returns the raw difference and its
/// norm; a norm below `1e-8` is degenerate.
pub fn dim_from_activations(
    harmful: &[Vec<f64>],
    safe: &[Vec<f64>],
) -> Result<(Vec<f64>, f64), Error> {
    if harmful.is_empty() {
        return Err(Error::Empty { what: "harmful activation set" });
    }
    if safe.is_empty() {
        return Err(Error::Empty { what: "safe activation set" });
    }
    let d = harmful[0].len();
    let mean = |rows: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for r in rows {
            for (mi, v) in m.iter_mut().zip(r) {
                *mi += v;
            }
        }
        let n = rows.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    };
    let mh = mean(harmful);
    let ms = mean(safe);
    let diff: Vec<f64> = mh.iter().zip(&ms).map(|(a, b)| a - b).collect();
    let norm = l2_norm(&diff);
    if norm < 1e-8 {
        return Err(Error::DegenerateDirection { norm });
    }
    Ok((diff, norm))
}

/// Difference-in-means direction: mean residual activation over harmful
/// prompts minus mean over safe prompts, at one layer and token position.
///
/// Flags a degenerate direction when the difference norm is below `1e-8`.
pub fn extract_dim(
    model: &ToyModel,
    harmful: &[Vec<Token>],
    safe: &[Vec<Token>],
    layer: usize,
    position: TokenPosition,
) -> Result<Direction, Error> {
    if harmful.is_empty() {
        return Err(Error::Empty { what: "harmful prompt set" });
    }
    if safe.is_empty() {
        return Err(Error::Empty { what: "safe prompt set" });
    }
    if layer > model.config.n_layers {
        return Err(Error::Config(format!(
            "layer {layer} out of range (trace has {} points)",
            model.config.n_layers + 1
        )));
    }
    let activations_at = |prompts: &[Vec<Token>]| -> Result<Vec<Vec<f64>>, Error> {
        let rows: Vec<Result<Vec<f64>, Error>> = prompts
            .par_iter()
            .map(|p| {
                let pos = position.resolve(p.len())?;
                let (_, trace) = model.forward(p, &InterventionSpec::none())?;
                Ok(trace.residual(layer, pos).to_vec())
            })
            .collect();
        rows.into_iter().collect()
    };
    let (diff, _) = dim_from_activations(&activations_at(harmful)?, &activations_at(safe)?)?;
    Direction::from_raw(diff, DirectionSource::Dim, layer, position)
}

/// Validation data for [`select_direction`].
pub struct SelectionContext<'a> {
    /// Harmful prompts scored for refusal-propensity drop under ablation.
    pub harmful_val: &'a [Vec<Token>],
    /// Safe records (with `t_retain` filled) for the side-effect KL filter.
    pub safe_val: &'a [crate::data::PromptRecord],
    /// Candidates above this KL are filtered out (default 0.1 nats).
    pub kl_threshold: f64,
}

pub const DEFAULT_KL_THRESHOLD: f64 = 0.1;

/// Per-candidate numbers backing a selection decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateScore {
    /// Mean refusal-propensity drop under ablation (higher is better).
    pub score: f64,
    /// Mean side-effect KL on safe records (lower is better).
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub index: usize,
    pub direction: Direction,
    /// Set when every candidate exceeded the KL threshold and the best
    /// scorer was returned regardless.
    pub all_over_threshold: bool,
    pub scores: Vec<CandidateScore>,
}

/// Scores one candidate: refusal-propensity drop and side-effect KL.
pub fn score_candidate(
    model: &ToyModel,
    candidate: &Direction,
    ctx: &SelectionContext<'_>,
) -> Result<CandidateScore, Error> {
    let drops: Vec<Result<f64, Error>> = ctx
        .harmful_val
        .par_iter()
        .map(|p| {
            let base = crate::eval::refusal_propensity(model, p, &InterventionSpec::none())?;
            let abl = crate::eval::refusal_propensity(model, p, &candidate.ablation())?;
            Ok(base - abl)
        })
        .collect();
    let mut score = 0.0;
    for d in drops {
        score += d?;
    }
    score /= ctx.harmful_val.len().max(1) as f64;

    let kls: Vec<Result<f64, Error>> = ctx
        .safe_val
        .par_iter()
        .map(|rec| crate::rdo::retain_kl(model, candidate, &rec.p_safe, &rec.t_retain))
        .collect();
    let mut kl = 0.0;
    for k in kls {
        kl += k?;
    }
    kl /= ctx.safe_val.len().max(1) as f64;

    Ok(CandidateScore { score, kl })
}

/// Picks the candidate with the best refusal-propensity drop among those
/// under the KL threshold; ties break toward lower KL, then lower index.
/// If no candidate passes the filter, the best scorer is returned with
/// `all_over_threshold` set.
pub fn select_direction(
    model: &ToyModel,
    candidates: &[Direction],
    ctx: &SelectionContext<'_>,
) -> Result<SelectionOutcome, Error> {
    if candidates.is_empty() {
        return Err(Error::Empty { what: "candidate pool" });
    }
    if ctx.harmful_val.is_empty() {
        return Err(Error::Empty { what: "harmful validation set" });
    }
    let scores: Vec<CandidateScore> = {
        let results: Vec<Result<CandidateScore, Error>> = candidates
            .par_iter()
            .map(|c| score_candidate(model, c, ctx))
            .collect();
        let mut out = Vec::with_capacity(results.len());
        for r in results {
            out.push(r?);
        }
        out
    };

    let better = |a: usize, b: usize| -> bool {
        // true when candidate a beats candidate b
        if scores[a].score != scores[b].score {
            return scores[a].score > scores[b].score;
        }
        if scores[a].kl != scores[b].kl {
            return scores[a].kl < scores[b].kl;
        }
        a < b
    };

    let compliant: Vec<usize> = (0..candidates.len())
        .filter(|&i| scores[i].kl <= ctx.kl_threshold)
        .collect();
    let (pool, all_over): (Vec<usize>, bool) = if compliant.is_empty() {
        ((0..candidates.len()).collect(), true)
    } else {
        (compliant, false)
    };
    let mut best = pool[0];
    for &i in &pool[1..] {
        if better(i, best) {
            best = i;
        }
    }
    if all_over {
        log::warn!(
            "select_direction: all {} candidates exceed the KL threshold {}",
            candidates.len(),
            ctx.kl_threshold
        );
    }
    Ok(SelectionOutcome {
        index: best,
        direction: candidates[best].clone(),
        all_over_threshold: all_over,
        scores,
    })
}

// ── direction files ─────────────────────────────────────────────────────

const DIRECTION_SCHEMA_VERSION: u32 = 1;

/// On-disk direction format.
#[derive(Debug, Serialize, Deserialize)]
pub struct DirectionFile {
    pub schema_version: u32,
    pub vector: Vec<f64>,
    pub norm_at_extraction: f64,
    pub source: DirectionSource,
    pub layer: usize,
    pub position: TokenPosition,
    pub model_checksum: String,
}

pub fn save_direction(
    path: &std::path::Path,
    direction: &Direction,
    model_checksum: &str,
) -> Result<(), Error> {
    let file = DirectionFile {
        schema_version: DIRECTION_SCHEMA_VERSION,
        vector: direction.vector.clone(),
        norm_at_extraction: direction.norm_at_extraction,
        source: direction.source,
        layer: direction.layer,
        position: direction.position,
        model_checksum: model_checksum.to_string(),
    };
    std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

/// Loads a direction file; when `expected_checksum` is given, a mismatch is
/// refused.
pub fn load_direction(
    path: &std::path::Path,
    expected_checksum: Option<&str>,
) -> Result<Direction, Error> {
    let bytes = std::fs::read(path)?;
    let file: DirectionFile = serde_json::from_slice(&bytes)?;
    if file.schema_version != DIRECTION_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported direction schema_version {}",
            file.schema_version
        )));
    }
    if let Some(expected) = expected_checksum {
        if file.model_checksum != expected {
            return Err(Error::ChecksumMismatch {
                expected: file.model_checksum,
                actual: expected.to_string(),
            });
        }
    }
    let dir = Direction {
        vector: file.vector,
        norm_at_extraction: file.norm_at_extraction,
        source: file.source,
        layer: file.layer,
        position: file.position,
    };
    if !dir.is_unit() {
        return Err(Error::Config(
            "direction file vector is not unit norm".into(),
        ));
    }
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir_from(v: Vec<f64>) -> Direction {
        Direction::from_raw(v, DirectionSource::Random, 0, TokenPosition::Last).unwrap()
    }

    #[test]
    fn ablate_axis_aligned() {
        let r = dir_from(vec![1.0, 0.0]);
        assert_eq!(ablate_vector(&[3.0, 4.0], &r).unwrap(), vec![0.0, 4.0]);
    }

    #[test]
    fn ablate_parallel_gives_zero() {
        let r = dir_from(vec![2.0, 1.0]);
        let x = vec![4.0, 2.0];
        let out = ablate_vector(&x, &r).unwrap();
        for v in out {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn ablate_orthogonal_unchanged() {
        let r = dir_from(vec![1.0, 0.0]);
        let out = ablate_vector(&[0.0, 7.5], &r).unwrap();
        assert_eq!(out, vec![0.0, 7.5]);
    }

    #[test]
    fn ablate_is_idempotent_and_orthogonal() {
        let r = dir_from(vec![0.3, -1.2, 0.4]);
        let x = vec![1.0, 2.0, 3.0];
        let once = ablate_vector(&x, &r).unwrap();
        let twice = ablate_vector(&once, &r).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(det_dot(&r.vector, &once).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_non_interference_identity() {
        // if r ⊥ v then dot(r, ablate(x, v)) == dot(r, x) for all x
        let v = dir_from(vec![1.0, 0.0, 0.0]);
        let r = vec![0.0, 0.6, 0.8];
        let x = vec![2.0, -3.0, 0.5];
        let ablated = ablate_vector(&x, &v).unwrap();
        assert!((det_dot(&r, &ablated) - det_dot(&r, &x)).abs() < 1e-12);
    }

    #[test]
    fn add_then_subtract_restores_exactly() {
        let r = dir_from(vec![0.0, 1.0]);
        let x = vec![1.0, 1.0];
        let up = add_scaled(&x, &r, 2.0, Sign::Plus).unwrap();
        let back = add_scaled(&up, &r, 2.0, Sign::Minus).unwrap();
        assert_eq!(back, x);
        let down = add_scaled(&x, &r, 2.0, Sign::Minus).unwrap();
        assert_eq!(down, vec![1.0, -1.0]);
    }

    #[test]
    fn add_zero_alpha_is_identity() {
        let r = dir_from(vec![0.6, 0.8]);
        let x = vec![1.5, -2.5];
        assert_eq!(add_scaled(&x, &r, 0.0, Sign::Plus).unwrap(), x);
    }

    #[test]
    fn from_raw_rejects_zero() {
        assert!(Direction::from_raw(
            vec![0.0; 4],
            DirectionSource::Dim,
            0,
            TokenPosition::Last
        )
        .is_err());
    }

    #[test]
    fn dim_formula_singletons_and_degenerate() {
        // Singleton sets: exactly the difference of the two vectors.
        let (diff, norm) =
            dim_from_activations(&[vec![2.0, 1.0]], &[vec![0.5, -1.0]]).unwrap();
        assert_eq!(diff, vec![1.5, 2.0]);
        assert_eq!(norm, 2.5);
        // Identical sets: degenerate.
        let same = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert!(matches!(
            dim_from_activations(&same, &same),
            Err(Error::DegenerateDirection { .. })
        ));
    }

    #[test]
    fn dim_formula_order_invariance() {
        let harm = vec![vec![1.0, 0.1], vec![0.5, 0.9], vec![2.0, -0.4]];
        let safe = vec![vec![-1.0, 0.3], vec![0.0, 0.0]];
        let (a, _) = dim_from_activations(&harm, &safe).unwrap();
        let harm_rev: Vec<Vec<f64>> = harm.iter().rev().cloned().collect();
        let safe_rev: Vec<Vec<f64>> = safe.iter().rev().cloned().collect();
        let (b, _) = dim_from_activations(&harm_rev, &safe_rev).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dim_formula_scaling_equivariance() {
        let harm = vec![vec![1.0, 0.1, -0.3], vec![0.5, 0.9, 0.2]];
        let safe = vec![vec![-1.0, 0.3, 0.8]];
        let (raw, norm) = dim_from_activations(&harm, &safe).unwrap();
        let c = 3.7;
        let scale_all = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| r.iter().map(|v| c * v).collect())
                .collect()
        };
        let (raw_c, norm_c) = dim_from_activations(&scale_all(&harm), &scale_all(&safe)).unwrap();
        assert!((norm_c - c * norm).abs() < 1e-9 * norm);
        for (a, b) in raw.iter().zip(&raw_c) {
            // Normalized directions identical.
            assert!((a / norm - b / norm_c).abs() < 1e-12);
        }
    }

    #[test]
    fn direction_file_round_trip_and_checksum_guard() {
        let d = dir_from(vec![0.1, -0.4, 0.9, 0.2]);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("dir.json");
        save_direction(&path, &d, "abc123").unwrap();
        let back = load_direction(&path, Some("abc123")).unwrap();
        assert_eq!(back, d);
        let err = load_direction(&path, Some("other")).unwrap_err();
        assert!(matches!(err, Error::ChecksumMismatch { .. }));
    }
}
