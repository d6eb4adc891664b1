//! Discrete adversarial suffix search: greedy coordinate descent guided by
//! one-hot relaxation gradients, with an extra loss term that drives the
//! suffix to suppress a target direction's late-layer representation.
//!
//! Per iteration, candidate token swaps at every suffix position are ranked
//! by the gradient of the loss with respect to a one-hot token relaxation;
//! the top-k per position are re-evaluated exactly and the single best
//! improving swap is applied. The reported loss is nonincreasing across
//! iterations by construction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{answer_template, Token};
use crate::eval::{is_refusal, RefusalMatcher};
use crate::interventions::{cosine, Direction};
use crate::model::{InterventionSpec, TapeIntervention, TokenInput, ToyModel};
use crate::repind::CosineProfile;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Error;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuffixAttackConfig {
    pub suffix_len: usize,
    /// Candidates ranked by gradient per position (capped at the vocab).
    pub candidate_pool: usize,
    /// Candidates re-evaluated exactly per position per iteration.
    pub top_k: usize,
    pub max_iters: usize,
    /// Weight of the cross-entropy toward the compliance target.
    pub w_ce: f64,
    /// Weight of the direction-suppression term.
    pub w_dir: f64,
    /// Fraction of trace points (from the top) whose last-token cosine is
    /// penalized.
    pub late_layer_fraction: f64,
    pub seed: u64,
}

impl Default for SuffixAttackConfig {
    fn default() -> Self {
        SuffixAttackConfig {
            suffix_len: 2,
            candidate_pool: usize::MAX,
            top_k: 8,
            max_iters: 32,
            w_ce: 1.0,
            w_dir: 1.0,
            late_layer_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SuffixAttackConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.suffix_len == 0 {
            return Err(Error::Config("suffix_len must be >= 1".into()));
        }
        if !(self.w_ce >= 0.0 && self.w_dir >= 0.0) {
            return Err(Error::Config("attack loss weights must be >= 0".into()));
        }
        if !(self.late_layer_fraction > 0.0 && self.late_layer_fraction <= 1.0) {
            return Err(Error::Config("late_layer_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// The last `ceil(fraction * (n_layers + 1))` trace points.
pub fn late_layers(n_layers: usize, fraction: f64) -> Vec<usize> {
    let points = n_layers + 1;
    let k = ((fraction * points as f64).ceil() as usize).clamp(1, points);
    (points - k..points).collect()
}

/// `w_ce · CE(target | tokens)  +  w_dir · mean over late layers of
/// cos(direction, x_last)²` where `x_last` is the residual at the final
/// token of `tokens` (squared, so both signs of representation are
/// penalized).
pub fn attack_loss(
    model: &ToyModel,
    tokens: &[Token],
    target: &[Token],
    direction: &Direction,
    cfg: &SuffixAttackConfig,
) -> Result<f64, Error> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::Empty { what: "compliance target" });
    }
    let mut seq = tokens.to_vec();
    seq.extend_from_slice(target);
    let input = &seq[..seq.len() - 1];
    let (logits, trace) = model.forward(input, &InterventionSpec::none())?;
    let v = model.config.vocab_size;
    let p = tokens.len();

    let mut ce = 0.0;
    for (k, &t) in target.iter().enumerate() {
        let mut row = logits.data()[(p - 1 + k) * v..(p + k) * v].to_vec();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x -= max;
            sum += x.exp();
        }
        ce -= row[t as usize] - sum.ln();
    }
    ce /= target.len() as f64;

    let layers = late_layers(model.config.n_layers, cfg.late_layer_fraction);
    let mut dir_term = 0.0;
    for &l in &layers {
        let c = cosine(&direction.vector, trace.residual(l, p - 1));
        dir_term += c * c;
    }
    dir_term /= layers.len() as f64;

    Ok(cfg.w_ce * ce + cfg.w_dir * dir_term)
}

/// Attack loss differentiated with respect to the (raw) direction vector.
/// Only the suppression term depends on it; the cross-entropy term is a
/// constant offset. Used by the gradient-check suite.
pub fn attack_loss_and_grad_direction(
    model: &ToyModel,
    tokens: &[Token],
    target: &[Token],
    dir_raw: &[f64],
    cfg: &SuffixAttackConfig,
) -> Result<(f64, Vec<f64>), Error> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::Empty { what: "compliance target" });
    }
    let d = model.config.d_model;
    if dir_raw.len() != d {
        return Err(Error::DirectionDim { direction: dir_raw.len(), d_model: d });
    }
    let mut seq = tokens.to_vec();
    seq.extend_from_slice(target);
    let input = &seq[..seq.len() - 1];
    let (logits, trace) = model.forward(input, &InterventionSpec::none())?;
    let v = model.config.vocab_size;
    let p = tokens.len();
    let mut ce = 0.0;
    for (k, &t) in target.iter().enumerate() {
        let mut row = logits.data()[(p - 1 + k) * v..(p + k) * v].to_vec();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x -= max;
            sum += x.exp();
        }
        ce -= row[t as usize] - sum.ln();
    }
    ce /= target.len() as f64;

    let layers = late_layers(model.config.n_layers, cfg.late_layer_fraction);
    let mut tape = Tape::new();
    let r_leaf = tape.leaf(Tensor::vector(dir_raw.to_vec()));
    let r_norm = tape.l2norm(r_leaf);
    let mut terms = Vec::with_capacity(layers.len());
    for &l in &layers {
        let x = trace.residual(l, p - 1);
        let x_const = tape.constant(Tensor::vector(x.to_vec()));
        let num = tape.dot(x_const, r_leaf)?;
        let xn = crate::tensor::l2_norm(x);
        let den = tape.scale(r_norm, xn);
        let c = tape.div(num, den)?;
        terms.push(tape.mul(c, c)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    let dir_term = tape.scale(acc, 1.0 / layers.len() as f64);
    let weighted = tape.scale(dir_term, cfg.w_dir);
    let value = cfg.w_ce * ce + tape.value(weighted).item()?;
    let grads = tape.backward(weighted)?;
    Ok((value, grads.wrt_or_zeros(r_leaf, d)))
}

/// Gradient of the attack loss with respect to a one-hot relaxation of the
/// input tokens, restricted to the suffix rows.
fn suffix_token_gradients(
    model: &ToyModel,
    tokens: &[Token],
    suffix_start: usize,
    target: &[Token],
    direction: &Direction,
    cfg: &SuffixAttackConfig,
) -> Result<Vec<Vec<f64>>, Error> {
    let v = model.config.vocab_size;
    let d = model.config.d_model;
    let mut seq = tokens.to_vec();
    seq.extend_from_slice(target);
    let input = &seq[..seq.len() - 1];

    let mut onehot = vec![0.0; input.len() * v];
    for (i, &t) in input.iter().enumerate() {
        onehot[i * v + t as usize] = 1.0;
    }
    let mut tape = Tape::new();
    let w = model.weights_on_tape(&mut tape, false);
    let oh = tape.leaf(Tensor::new(vec![input.len(), v], onehot)?);
    let fp = model.forward_with_weights(&mut tape, &w, TokenInput::OneHot(oh), &TapeIntervention::None)?;

    let p = tokens.len();
    let rows: Vec<usize> = (p - 1..p - 1 + target.len()).collect();
    let targets: Vec<usize> = target.iter().map(|&t| t as usize).collect();
    let picked = tape.gather_rows(fp.logits, &rows)?;
    let ce = tape.cross_entropy(picked, &targets)?;

    let layers = late_layers(model.config.n_layers, cfg.late_layer_fraction);
    let dir_col = tape.constant(Tensor::new(vec![d, 1], direction.vector.clone())?);
    let mut terms = Vec::with_capacity(layers.len());
    for &l in &layers {
        let row = tape.gather_rows(fp.residuals[l], &[p - 1])?;
        let num = tape.matmul(row, dir_col)?;
        let nrm = tape.row_norms(row)?;
        let c = tape.div(num, nrm)?;
        let sq = tape.mul(c, c)?;
        terms.push(tape.reshape(sq, vec![1])?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    let dir_term = tape.scale(acc, 1.0 / layers.len() as f64);

    let ce_w = tape.scale(ce, cfg.w_ce);
    let dir_w = tape.scale(dir_term, cfg.w_dir);
    let loss = tape.add(ce_w, dir_w)?;
    let grads = tape.backward(loss)?;
    let g = grads.wrt_or_zeros(oh, input.len() * v);

    Ok((0..tokens.len() - suffix_start)
        .map(|i| {
            let row = suffix_start + i;
            g[row * v..(row + 1) * v].to_vec()
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuffixAttackOutcome {
    pub suffix: Vec<Token>,
    pub final_loss: f64,
    /// Best loss after each iteration, starting with the initial suffix.
    pub loss_trace: Vec<f64>,
    pub profile_before: CosineProfile,
    pub profile_after: CosineProfile,
    pub iterations_run: usize,
    pub early_stopped: bool,
}

/// Greedy coordinate descent over suffix tokens. Per iteration the best
/// exactly-evaluated improving swap is applied; the search stops early when
/// a full sweep finds none.
pub fn suffix_attack(
    model: &ToyModel,
    prompt: &[Token],
    target: &[Token],
    direction: &Direction,
    cfg: &SuffixAttackConfig,
) -> Result<SuffixAttackOutcome, Error> {
    cfg.validate()?;
    let v = model.config.vocab_size;
    if prompt.len() + cfg.suffix_len + target.len() > model.config.max_seq_len {
        return Err(Error::ContextOverflow {
            needed: prompt.len() + cfg.suffix_len + target.len(),
            max: model.config.max_seq_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut suffix: Vec<Token> = (0..cfg.suffix_len)
        .map(|_| rng.gen_range(0..v as Token))
        .collect();

    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(&suffix);
    let mut best_loss = attack_loss(model, &tokens, target, direction, cfg)?;
    let mut trace = vec![best_loss];
    let mut iterations_run = 0;
    let mut early_stopped = false;

    let pool = cfg.candidate_pool.min(v);
    let k = cfg.top_k.min(pool);
    for _ in 0..cfg.max_iters {
        iterations_run += 1;
        let grads = if cfg.w_ce == 0.0 && cfg.w_dir == 0.0 {
            // Constant loss; no informative gradient and nothing to improve.
            vec![vec![0.0; v]; cfg.suffix_len]
        } else {
            suffix_token_gradients(model, &tokens, prompt.len(), target, direction, cfg)?
        };

        // Rank swap candidates per position by ascending relaxation
        // gradient, then evaluate the top-k exactly.
        let mut candidates: Vec<(usize, Token)> = Vec::with_capacity(cfg.suffix_len * k);
        for (pos, g) in grads.iter().enumerate() {
            let mut ranked: Vec<usize> = (0..v).collect();
            ranked.sort_by(|&a, &b| g[a].partial_cmp(&g[b]).unwrap().then(a.cmp(&b)));
            for &t in ranked.iter().take(pool).take(k) {
                if t as Token != suffix[pos] {
                    candidates.push((pos, t as Token));
                }
            }
        }
        let evals: Vec<Result<f64, Error>> = candidates
            .par_iter()
            .map(|&(pos, tok)| {
                let mut trial = tokens.clone();
                trial[prompt.len() + pos] = tok;
                attack_loss(model, &trial, target, direction, cfg)
            })
            .collect();

        let mut best_swap: Option<(usize, Token, f64)> = None;
        for (ci, e) in evals.into_iter().enumerate() {
            let loss = e?;
            if loss < best_loss && best_swap.map_or(true, |(_, _, b)| loss < b) {
                let (pos, tok) = candidates[ci];
                best_swap = Some((pos, tok, loss));
            }
        }
        match best_swap {
            Some((pos, tok, loss)) => {
                suffix[pos] = tok;
                tokens[prompt.len() + pos] = tok;
                best_loss = loss;
                trace.push(best_loss);
            }
            None => {
                early_stopped = true;
                break;
            }
        }
    }

    let profile_before =
        crate::repind::cosine_profile(model, &direction.vector, &[prompt.to_vec()], &InterventionSpec::none())?;
    let profile_after =
        crate::repind::cosine_profile(model, &direction.vector, &[tokens.clone()], &InterventionSpec::none())?;
    Ok(SuffixAttackOutcome {
        suffix,
        final_loss: best_loss,
        loss_trace: trace,
        profile_before,
        profile_after,
        iterations_run,
        early_stopped,
    })
}

/// Exact minimizer over every possible suffix of the given length (oracle
/// for short suffixes on small vocabularies). Ties break lexicographically.
pub fn exhaustive_suffix_search(
    model: &ToyModel,
    prompt: &[Token],
    target: &[Token],
    direction: &Direction,
    cfg: &SuffixAttackConfig,
    suffix_len: usize,
) -> Result<(Vec<Token>, f64), Error> {
    let v = model.config.vocab_size;
    if suffix_len == 0 || suffix_len > 2 {
        return Err(Error::Config("exhaustive search supports suffix lengths 1 and 2".into()));
    }
    let combos: Vec<Vec<Token>> = if suffix_len == 1 {
        (0..v as Token).map(|t| vec![t]).collect()
    } else {
        (0..v as Token)
            .flat_map(|a| (0..v as Token).map(move |b| vec![a, b]))
            .collect()
    };
    let losses: Vec<Result<f64, Error>> = combos
        .par_iter()
        .map(|s| {
            let mut tokens = prompt.to_vec();
            tokens.extend_from_slice(s);
            attack_loss(model, &tokens, target, direction, cfg)
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, l) in losses.into_iter().enumerate() {
        let l = l?;
        if best.map_or(true, |(_, b)| l < b) {
            best = Some((i, l));
        }
    }
    let (i, loss) = best.expect("non-empty vocabulary");
    Ok((combos[i].clone(), loss))
}

// ── the multi-prompt experiment ─────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptAttackRow {
    pub prompt: Vec<Token>,
    pub suffix: Vec<Token>,
    pub final_loss: f64,
    pub loss_trace: Vec<f64>,
    pub refused_before: bool,
    pub refused_after: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackExperimentReport {
    pub schema_version: u32,
    pub model_checksum: String,
    pub per_prompt: Vec<PromptAttackRow>,
    pub jailbreak_rate_before: f64,
    pub jailbreak_rate_after: f64,
    /// Mean |cos(direction, x_last)| over prompts and late layers, without
    /// and with the trained suffixes.
    pub mean_abs_cos_before: f64,
    pub mean_abs_cos_after: f64,
    /// `(before - after) / before`.
    pub cosine_reduction: f64,
}

impl AttackExperimentReport {
    pub fn save(&self, path: &std::path::Path) -> Result<(), Error> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Per-prompt suffix attacks against the model; targets are the canonical
/// compliance continuation of each prompt. Measures the jailbreak rate and
/// the direction's late-layer representation before and after.
pub fn run_suffix_attack_experiment(
    model: &ToyModel,
    direction: &Direction,
    prompts: &[Vec<Token>],
    cfg: &SuffixAttackConfig,
    matcher: &RefusalMatcher,
    max_new_tokens: usize,
) -> Result<AttackExperimentReport, Error> {
    if prompts.is_empty() {
        return Err(Error::Empty { what: "prompt set" });
    }
    let layers = late_layers(model.config.n_layers, cfg.late_layer_fraction);
    let rows: Vec<Result<(PromptAttackRow, f64, f64), Error>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let target = answer_template(prompt[0]);
            let mut cfg_i = cfg.clone();
            cfg_i.seed = cfg.seed.wrapping_add(i as u64);
            let outcome = suffix_attack(model, prompt, &target, direction, &cfg_i)?;

            let before_full = model.generate(prompt, max_new_tokens, &InterventionSpec::none())?;
            let refused_before = is_refusal(&before_full[prompt.len()..], matcher);
            let mut attacked = prompt.clone();
            attacked.extend_from_slice(&outcome.suffix);
            let after_full = model.generate(&attacked, max_new_tokens, &InterventionSpec::none())?;
            let refused_after = is_refusal(&after_full[attacked.len()..], matcher);

            let mean_abs = |profile: &CosineProfile| {
                layers.iter().map(|&l| profile.per_layer[l].abs()).sum::<f64>()
                    / layers.len() as f64
            };
            let before_cos = mean_abs(&outcome.profile_before);
            let after_cos = mean_abs(&outcome.profile_after);
            Ok((
                PromptAttackRow {
                    prompt: prompt.clone(),
                    suffix: outcome.suffix,
                    final_loss: outcome.final_loss,
                    loss_trace: outcome.loss_trace,
                    refused_before,
                    refused_after,
                },
                before_cos,
                after_cos,
            ))
        })
        .collect();

    let mut per_prompt = Vec::with_capacity(prompts.len());
    let mut cos_before = 0.0;
    let mut cos_after = 0.0;
    for r in rows {
        let (row, b, a) = r?;
        per_prompt.push(row);
        cos_before += b;
        cos_after += a;
    }
    cos_before /= prompts.len() as f64;
    cos_after /= prompts.len() as f64;
    let n = per_prompt.len() as f64;
    let jb_before = per_prompt.iter().filter(|r| !r.refused_before).count() as f64 / n;
    let jb_after = per_prompt.iter().filter(|r| !r.refused_after).count() as f64 / n;
    Ok(AttackExperimentReport {
        schema_version: 1,
        model_checksum: model.checksum()?,
        per_prompt,
        jailbreak_rate_before: jb_before,
        jailbreak_rate_after: jb_after,
        mean_abs_cos_before: cos_before,
        mean_abs_cos_after: cos_after,
        cosine_reduction: if cos_before > 0.0 {
            (cos_before - cos_after) / cos_before
        } else {
            0.0
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interventions::{DirectionSource, TokenPosition};
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> ToyModel {
        ToyModel::init(ModelConfig {
            vocab_size: 12,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_mlp: 32,
            max_seq_len: 16,
            seed,
        })
        .unwrap()
    }

    fn some_direction() -> Direction {
        Direction::from_raw(
            (0..16).map(|i| ((i as f64) * 0.7).sin()).collect(),
            DirectionSource::Random,
            0,
            TokenPosition::Last,
        )
        .unwrap()
    }

    #[test]
    fn late_layer_selection() {
        // 2 layers -> 3 trace points; 25% covers the final one.
        assert_eq!(late_layers(2, 0.25), vec![2]);
        assert_eq!(late_layers(2, 1.0), vec![0, 1, 2]);
        assert_eq!(late_layers(4, 0.25), vec![3, 4]);
    }

    #[test]
    fn zero_dir_weight_is_pure_cross_entropy() {
        let m = tiny_model(1);
        let dir = some_direction();
        let cfg_both = SuffixAttackConfig {
            w_dir: 0.0,
            ..Default::default()
        };
        let tokens = vec![3u32, 4, 5];
        let target = vec![1u32, 3, 3, 2];
        let loss = attack_loss(&m, &tokens, &target, &dir, &cfg_both).unwrap();
        // Recompute the CE by hand through the propensity machinery.
        let cfg_dir_only = SuffixAttackConfig {
            w_ce: 0.0,
            ..Default::default()
        };
        let dir_only = attack_loss(&m, &tokens, &target, &dir, &cfg_dir_only).unwrap();
        let cfg_full = SuffixAttackConfig::default();
        let full = attack_loss(&m, &tokens, &target, &dir, &cfg_full).unwrap();
        assert!((full - (loss + dir_only)).abs() < 1e-12);
        assert!(dir_only >= 0.0);
    }

    #[test]
    fn zero_weights_search_is_noop() {
        let m = tiny_model(2);
        let dir = some_direction();
        let cfg = SuffixAttackConfig {
            w_ce: 0.0,
            w_dir: 0.0,
            suffix_len: 1,
            max_iters: 4,
            ..Default::default()
        };
        let out = suffix_attack(&m, &[3, 4, 5], &[1, 3, 3, 2], &dir, &cfg).unwrap();
        assert!(out.early_stopped);
        assert_eq!(out.iterations_run, 1);
        assert_eq!(out.loss_trace.len(), 1);
    }

    #[test]
    fn loss_trace_is_nonincreasing() {
        let m = tiny_model(3);
        let dir = some_direction();
        let cfg = SuffixAttackConfig {
            suffix_len: 2,
            max_iters: 8,
            ..Default::default()
        };
        let out = suffix_attack(&m, &[3, 4, 5, 6], &[1, 3, 3, 2], &dir, &cfg).unwrap();
        for w in out.loss_trace.windows(2) {
            assert!(w[1] <= w[0], "loss increased: {:?}", out.loss_trace);
        }
    }

    #[test]
    fn length_one_greedy_matches_exhaustive() {
        let m = tiny_model(4);
        let dir = some_direction();
        let cfg = SuffixAttackConfig {
            suffix_len: 1,
            candidate_pool: usize::MAX,
            top_k: usize::MAX,
            max_iters: 8,
            ..Default::default()
        };
        let prompt = vec![3u32, 7, 9];
        let target = vec![1u32, 3, 3, 2];
        let greedy = suffix_attack(&m, &prompt, &target, &dir, &cfg).unwrap();
        let (_, best) = exhaustive_suffix_search(&m, &prompt, &target, &dir, &cfg, 1).unwrap();
        assert!(
            (greedy.final_loss - best).abs() < 1e-12,
            "greedy {} vs exhaustive {}",
            greedy.final_loss,
            best
        );
    }
}
