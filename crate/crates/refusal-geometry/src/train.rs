//! Trainer for the synthetic refuse-or-answer task.
//!
//! Supervision is next-token cross-entropy on the continuation positions
//! only; prompts are random and carry no signal. Training prompts stream
//! from the task seed, held-out accuracy is measured on an independent
//! stream, and the whole loop is deterministic under the config seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SyntheticTaskSpec, Token};
use crate::model::{ModelConfig, TapeIntervention, TokenInput, ToyModel};
use crate::optim::AdamW;
use crate::tape::Tape;
use crate::Error;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target_accuracy: f64,
    pub eval_every: usize,
    pub eval_prompts: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 1500,
            batch_size: 16,
            lr: 2e-3,
            target_accuracy: 0.99,
            eval_every: 25,
            eval_prompts: 64,
            seed: 0,
        }
    }
}

/// One point on the learning curve: step, mean batch loss, held-out
/// accuracy (`NaN` until first measured).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_accuracy: f64,
    pub curve: Vec<(usize, f64, f64)>,
}

fn sample_prompt(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng, harmful: bool) -> Vec<Token> {
    let safe = spec.safe_tokens();
    let len = rng.gen_range(spec.prompt_len_min..=spec.prompt_len_max);
    let mut p: Vec<Token> = (0..len).map(|_| safe[rng.gen_range(0..safe.len())]).collect();
    if harmful {
        let pos = rng.gen_range(0..p.len());
        p[pos] = spec.trigger_tokens[rng.gen_range(0..spec.trigger_tokens.len())];
    }
    p
}

/// Cross-entropy of the canonical continuation, differentiated w.r.t. the
/// model weights mirrored on a fresh tape. Returns (loss, grads per param).
fn supervised_loss_and_grads(
    model: &ToyModel,
    prompt: &[Token],
    continuation: &[Token],
) -> Result<(f64, Vec<Vec<f64>>), Error> {
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(continuation);
    let input = &seq[..seq.len() - 1];

    let mut tape = Tape::new();
    let w = model.weights_on_tape(&mut tape, true);
    let fp = model.forward_with_weights(&mut tape, &w, TokenInput::Ids(input), &TapeIntervention::None)?;

    let p = prompt.len();
    let rows: Vec<usize> = (p - 1..p - 1 + continuation.len()).collect();
    let targets: Vec<usize> = continuation.iter().map(|&t| t as usize).collect();
    let picked = tape.gather_rows(fp.logits, &rows)?;
    let loss = tape.cross_entropy(picked, &targets)?;
    let loss_val = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let params = ToyModel::tape_params(&w);
    let out = params
        .iter()
        .map(|&v| grads.wrt_or_zeros(v, tape.value(v).numel()))
        .collect();
    Ok((loss_val, out))
}

/// Teacher-forced next-token accuracy over continuation positions.
pub fn task_accuracy(
    model: &ToyModel,
    spec: &SyntheticTaskSpec,
    prompts: &[Vec<Token>],
) -> Result<f64, Error> {
    let results: Vec<Result<(usize, usize), Error>> = prompts
        .par_iter()
        .map(|prompt| {
            let cont = spec.canonical_continuation(prompt);
            let mut seq = prompt.clone();
            seq.extend_from_slice(&cont);
            let input = &seq[..seq.len() - 1];
            let (logits, _) = model.forward(input, &crate::model::InterventionSpec::none())?;
            let v = model.config.vocab_size;
            let p = prompt.len();
            let mut correct = 0;
            for (k, &target) in cont.iter().enumerate() {
                let row = &logits.data()[(p - 1 + k) * v..(p + k) * v];
                let mut best = 0;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = i;
                    }
                }
                if best == target as usize {
                    correct += 1;
                }
            }
            Ok((correct, cont.len()))
        })
        .collect();
    let mut correct = 0usize;
    let mut total = 0usize;
    for r in results {
        let (c, t) = r?;
        correct += c;
        total += t;
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Balanced held-out prompt set from an RNG stream independent of training.
pub fn heldout_prompts(spec: &SyntheticTaskSpec, n: usize, seed: u64) -> Vec<Vec<Token>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| sample_prompt(spec, &mut rng, i % 2 == 0)).collect()
}

/// Trains a fresh model on the task until it reaches the accuracy target.
///
/// Errors with [`Error::TrainingFailed`] (learning curve attached) if the
/// target is not reached within `cfg.max_steps`.
pub fn train_toy_model(
    task: &SyntheticTaskSpec,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ToyModel, TrainReport), Error> {
    task.validate()?;
    if model_cfg.vocab_size < task.vocab_size {
        return Err(Error::Config(format!(
            "model vocab_size {} smaller than task vocab_size {}",
            model_cfg.vocab_size, task.vocab_size
        )));
    }
    let mut model = ToyModel::init(model_cfg)?;
    let sizes: Vec<usize> = model.params().iter().map(|t| t.numel()).collect();
    let mut opt = AdamW::new(&sizes, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(task.seed));
    let eval_set = heldout_prompts(task, cfg.eval_prompts, cfg.seed ^ 0x9e3779b97f4a7c15);

    let mut curve = Vec::new();
    let mut accuracy = f64::NAN;
    let mut steps_run = 0;
    for step in 1..=cfg.max_steps {
        steps_run = step;
        let batch: Vec<(Vec<Token>, Vec<Token>)> = (0..cfg.batch_size)
            .map(|i| {
                let p = sample_prompt(task, &mut rng, i % 2 == 0);
                let c = task.canonical_continuation(&p);
                (p, c)
            })
            .collect();

        let per_record: Vec<Result<(f64, Vec<Vec<f64>>), Error>> = batch
            .par_iter()
            .map(|(p, c)| supervised_loss_and_grads(&model, p, c))
            .collect();

        let mut mean_loss = 0.0;
        let mut acc_grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        for r in per_record {
            let (loss, grads) = r?;
            mean_loss += loss;
            for (a, g) in acc_grads.iter_mut().zip(&grads) {
                for (ai, gi) in a.iter_mut().zip(g) {
                    *ai += gi;
                }
            }
        }
        mean_loss /= cfg.batch_size as f64;
        let scale = 1.0 / cfg.batch_size as f64;
        for g in &mut acc_grads {
            for gi in g.iter_mut() {
                *gi *= scale;
            }
        }

        {
            let mut params = model.params_mut();
            let mut views: Vec<&mut [f64]> =
                params.iter_mut().map(|t| t.data_mut()).collect();
            let grad_views: Vec<&[f64]> = acc_grads.iter().map(|g| g.as_slice()).collect();
            opt.step(&mut views, &grad_views);
        }

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            accuracy = task_accuracy(&model, task, &eval_set)?;
            curve.push((step, mean_loss, accuracy));
            log::debug!("step {step}: loss {mean_loss:.4}, heldout accuracy {accuracy:.4}");
            if accuracy >= cfg.target_accuracy {
                break;
            }
        } else {
            curve.push((step, mean_loss, f64::NAN));
        }
    }

    if !(accuracy >= cfg.target_accuracy) {
        return Err(Error::TrainingFailed {
            target: cfg.target_accuracy,
            reached: accuracy,
            steps: steps_run,
            curve,
        });
    }
    Ok((
        model,
        TrainReport {
            steps_run,
            final_accuracy: accuracy,
            curve,
        },
    ))
}
