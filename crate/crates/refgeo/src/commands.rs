//! Implementation of every pipeline command.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use refusal_geometry::artifact::Manifest;
use refusal_geometry::cone::{evaluate_cone, load_cone, rco_train, save_cone, ConeConfig};
use refusal_geometry::data::{read_jsonl, write_jsonl, PromptRecord, Token};
use refusal_geometry::eval::{
    asr, best_of_n, refusal_scaling_curve, side_effect_kl, write_samples_csv, write_xy_csv,
    BestOfNResult, BestOfNStrategy, RefusalMatcher,
};
use refusal_geometry::interventions::{
    extract_dim, load_direction, save_direction, Direction, SelectionContext, TokenPosition,
};
use refusal_geometry::model::{InterventionSpec, ToyModel};
use refusal_geometry::rdo::{generate_targets, rdo_train, OptimConfig, RdoOptions};
use refusal_geometry::repind::{
    cosine_profile, save_independence_report, train_repind_direction, verify_independence,
    RepIndSetup,
};
use refusal_geometry::train::train_toy_model;

use crate::config::{alpha_grid, ExperimentConfig};
use crate::Command;

pub enum CommandError {
    /// Invalid configuration or unusable inputs; exit status 2.
    Config(String),
    /// Everything else; exit status 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CommandError {
    fn from(e: anyhow::Error) -> Self {
        CommandError::Runtime(e)
    }
}

impl From<refusal_geometry::Error> for CommandError {
    fn from(e: refusal_geometry::Error) -> Self {
        match e {
            refusal_geometry::Error::Config(msg) => CommandError::Config(msg),
            refusal_geometry::Error::ChecksumMismatch { .. } => {
                CommandError::Config(e.to_string())
            }
            other => CommandError::Runtime(anyhow::Error::new(other)),
        }
    }
}

type CmdResult = Result<(), CommandError>;

/// Errors with status 2 when a flag's path does not exist.
fn require(path: &Path, flag: &str) -> Result<(), CommandError> {
    if !path.exists() {
        return Err(CommandError::Config(format!(
            "field '--{flag}': path '{}' does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn ensure_out(out: &Path) -> Result<(), CommandError> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory '{}'", out.display()))?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(ToyModel, String), CommandError> {
    require(path, "model")?;
    Ok(ToyModel::load(path)?)
}

fn load_dir_checked(path: &Path, flag: &str, checksum: &str) -> Result<Direction, CommandError> {
    require(path, flag)?;
    Ok(load_direction(path, Some(checksum))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CommandError> {
    std::fs::write(path, serde_json::to_vec_pretty(value).map_err(anyhow::Error::new)?)
        .with_context(|| format!("writing '{}'", path.display()))?;
    Ok(())
}

/// Records with all targets present, or a config error naming the file.
fn read_target_records(path: &Path, flag: &str) -> Result<Vec<PromptRecord>, CommandError> {
    require(path, flag)?;
    let records = read_jsonl(path)?;
    if records.is_empty() {
        return Err(CommandError::Config(format!(
            "field '--{flag}': '{}' holds no records",
            path.display()
        )));
    }
    if !records.iter().all(|r| r.has_targets()) {
        return Err(CommandError::Config(format!(
            "field '--{flag}': '{}' has records without targets; run gen-targets first",
            path.display()
        )));
    }
    Ok(records)
}

fn harmful_prompts(records: &[PromptRecord]) -> Vec<Vec<Token>> {
    records.iter().map(|r| r.p_harm.clone()).collect()
}

fn safe_prompts(records: &[PromptRecord]) -> Vec<Vec<Token>> {
    records.iter().map(|r| r.p_safe.clone()).collect()
}

/// The optimizer config wired to a seed direction's scale and layer.
fn optim_for(cfg: &ExperimentConfig, dim: &Direction) -> OptimConfig {
    OptimConfig {
        alpha: dim.norm_at_extraction,
        add_layer: dim.layer,
        ..cfg.optim.clone()
    }
}

fn selection_ctx<'a>(
    cfg: &ExperimentConfig,
    val_harm: &'a [Vec<Token>],
    val_records: &'a [PromptRecord],
) -> SelectionContext<'a> {
    let n = cfg.eval.selection_prompts.min(val_harm.len()).min(val_records.len());
    SelectionContext {
        harmful_val: &val_harm[..n],
        safe_val: &val_records[..n],
        kl_threshold: cfg.eval.kl_threshold,
    }
}

pub fn dispatch(command: Command, cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    match command {
        Command::GenData => gen_data(cfg, out),
        Command::TrainToy => train_toy(cfg, out),
        Command::ExtractDim { model, data, layer, position } => {
            extract_dim_cmd(cfg, out, &model, &data, layer, &position)
        }
        Command::GenTargets { model, direction, data } => {
            gen_targets_cmd(cfg, out, &model, &direction, &data)
        }
        Command::TrainRdo { model, train, val, dim } => {
            train_rdo_cmd(cfg, out, &model, &train, &val, &dim)
        }
        Command::TrainCone { model, train, val, dim, cone_dim } => {
            train_cone_cmd(cfg, out, &model, &train, &val, &dim, cone_dim)
        }
        Command::TrainRepind { model, train, val, dim, constraint } => {
            train_repind_cmd(cfg, out, &model, &train, &val, &dim, &constraint)
        }
        Command::VerifyIndependence { model, direction_a, direction_b, data } => {
            verify_independence_cmd(cfg, out, &model, &direction_a, &direction_b, &data)
        }
        Command::AttackSuffix { model, direction, data } => {
            attack_suffix_cmd(cfg, out, &model, &direction, &data)
        }
        Command::Evaluate { model, direction, cone, data } => {
            evaluate_cmd(cfg, out, &model, direction.as_deref(), cone.as_deref(), &data)
        }
        Command::BestOfN { model, direction, cone, data, n, temperature } => {
            best_of_n_cmd(cfg, out, &model, direction.as_deref(), cone.as_deref(), &data, n, temperature)
        }
    }
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    ensure_out(out)?;
    let splits = refusal_geometry::data::generate_datasets(&cfg.task)?;
    let mut manifest = Manifest::new("gen-data", cfg.seed(), cfg.echo());
    for (name, records) in [
        ("train.jsonl", &splits.train),
        ("val.jsonl", &splits.val),
        ("test.jsonl", &splits.test),
    ] {
        let path = out.join(name);
        write_jsonl(&path, records)?;
        manifest.add_output(&path)?;
        log::info!("wrote {} ({} rows)", path.display(), records.len());
    }
    manifest.save(&out.join("gen-data-manifest.json"))?;
    Ok(())
}

fn train_toy(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    ensure_out(out)?;
    let (model, report) = train_toy_model(&cfg.task, cfg.model.clone(), &cfg.train)?;
    let model_path = out.join("model.json");
    let checksum = model.save(&model_path)?;
    let report_path = out.join("train-report.json");
    write_json(&report_path, &report)?;
    log::info!(
        "trained to accuracy {:.4} in {} steps; checksum {checksum}",
        report.final_accuracy,
        report.steps_run
    );
    let mut manifest = Manifest::new("train-toy", cfg.seed(), cfg.echo());
    manifest.add_output(&model_path)?;
    manifest.add_output(&report_path)?;
    manifest.save(&out.join("train-toy-manifest.json"))?;
    Ok(())
}

fn extract_dim_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    model_path: &Path,
    data: &Path,
    layer: Option<usize>,
    position: &str,
) -> CmdResult {
    ensure_out(out)?;
    require(data, "data")?;
    let (model, checksum) = load_model(model_path)?;
    let records = read_jsonl(data)?;
    if records.is_empty() {
        return Err(CommandError::Config(format!(
            "field '--data': '{}' holds no records",
            data.display()
        )));
    }
    let layer = layer.unwrap_or(model.config.n_layers / 2);
    let position = match position {
        "last" => TokenPosition::Last,
        s => match s.parse::<usize>() {
            Ok(i) => TokenPosition::Index(i),
            Err(_) => {
                return Err(CommandError::Config(format!(
                    "field '--position': '{s}' is neither 'last' nor an index"
                )))
            }
        },
    };
    let dim = extract_dim(
        &model,
        &harmful_prompts(&records),
        &safe_prompts(&records),
        layer,
        position,
    )?;
    let dim_path = out.join("dim.json");
    save_direction(&dim_path, &dim, &checksum)?;
    log::info!(
        "difference-in-means direction at layer {layer}: norm {:.4}",
        dim.norm_at_extraction
    );
    let mut manifest = Manifest::new("extract-dim", cfg.seed(), cfg.echo());
    manifest.add_input(model_path)?;
    manifest.add_input(data)?;
    manifest.add_output(&dim_path)?;
    manifest.save(&out.join("extract-dim-manifest.json"))?;
    Ok(())
}

fn gen_targets_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    model_path: &Path,
    direction: &Path,
    data: &[PathBuf],
) -> CmdResult {
    ensure_out(out)?;
    let (model, checksum) = load_model(model_path)?;
    let dim = load_dir_checked(direction, "direction", &checksum)?;
    let mut manifest = Manifest::new("gen-targets", cfg.seed(), cfg.echo());
    manifest.add_input(model_path)?;
    manifest.add_input(direction)?;
    for path in data {
        require(path, "data")?;
        let records = read_jsonl(path)?;
        let outcome = generate_targets(&model, &dim, &records, &cfg.targets)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "data".into());
        let target_path = out.join(format!("{stem}-targets.jsonl"));
        write_jsonl(&target_path, &outcome.records)?;
        log::info!(
            "{}: {} records targeted ({} dropped, {:.0}% answer-marker{})",
            target_path.display(),
            outcome.records.len(),
            outcome.dropped,
            100.0 * outcome.answer_marker_fraction,
            if outcome.low_quality { ", LOW QUALITY" } else { "" }
        );
        manifest.add_input(path)?;
        manifest.add_output(&target_path)?;
    }
    manifest.save(&out.join("gen-targets-manifest.json"))?;
    Ok(())
}

fn train_rdo_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    model_path: &Path,
    train: &Path,
    val: &Path,
    dim_path: &Path,
) -> CmdResult {
    ensure_out(out)?;
    let (model, checksum) = load_model(model_path)?;
    let dim = load_dir_checked(dim_path, "dim", &checksum)?;
    let train_records = read_target_records(train, "train")?;
    let val_records = read_target_records(val, "val")?;
    let val_harm = harmful_prompts(&val_records);
    let optim = optim_for(cfg, &dim);
    let sel = selection_ctx(cfg, &val_harm, &val_records);
    let outcome = rdo_train(
        &model,
        &train_records,
        &optim,
        &RdoOptions {
            init_seed: cfg.seed().wrapping_add(1),
            ..Default::default()
        },
        &sel,
    )?;

    let dir_path = out.join("rdo.json");
    save_direction(&dir_path, &outcome.direction, &checksum)?;
    let pool_dir = out.join("rdo-pool");
    std::fs::create_dir_all(&pool_dir).map_err(anyhow::Error::new)?;
    let first_step = outcome.steps_run + 1 - outcome.pool.len();
    for (i, d) in outcome.pool.iter().enumerate() {
        save_direction(
            &pool_dir.join(format!("step-{:04}.json", first_step + i)),
            d,
            &checksum,
        )?;
    }
    let curve_path = out.join("rdo-loss.json");
    write_json(&curve_path, &outcome.loss_curve)?;
    log::info!(
        "direction optimization: {} steps, selected pool index {} (warning flag {})",
        outcome.steps_run,
        outcome.selection.index,
        outcome.selection.all_over_threshold
    );
    let mut manifest = Manifest::new("train-rdo", cfg.seed(), cfg.echo());
    for p in [model_path, dim_path, train, val] {
        manifest.add_input(p)?;
    }
    manifest.add_output(&dir_path)?;
    manifest.add_output(&curve_path)?;
    manifest.save(&out.join("train-rdo-manifest.json"))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cone_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    model_path: &Path,
    train: &Path,
    val: &Path,
    dim_path: &Path,
    cone_dim: Option<usize>,
) -> CmdResult {
    ensure_out(out)?;
    let (model, checksum) = load_model(model_path)?;
    let dim = load_dir_checked(dim_path, "dim", &checksum)?;
    let train_records = read_target_records(train, "train")?;
    let val_records = read_target_records(val, "val")?;
    let val_harm = harmful_prompts(&val_records);
    let optim = optim_for(cfg, &dim);
    let sel = selection_ctx(cfg, &val_harm, &val_records);
    let cone_cfg = ConeConfig {
        n: cone_dim.unwrap_or(cfg.cone.n),
        ..cfg.cone.clone()
    };
    let outcome = rco_train(&model, &train_records, &optim, &cone_cfg, &sel)?;
    let cone_path = out.join("cone.json");
    save_cone(&cone_path, &outcome.basis)?;
    let curve_path = out.join("cone-loss.json");
    write_json(&curve_path, &outcome.loss_curve)?;
    log::info!(
        "cone optimization: {} steps, basis {} selected (fallback {}), {} re-randomizations",
        outcome.steps_run,
        outcome.selected,
        outcome.fallback_used,
        outcome.rerandomized
    );
    let mut manifest = Manifest::new("train-cone", cfg.seed(), cfg.echo());
    for p in [model_path, dim_path, train, val] {
        manifest.add_input(p)?;
    }
    manifest.add_output(&cone_path)?;
    manifest.add_output(&curve_path)?;
    manifest.save(&out.join("train-cone-manifest.json"))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_repind_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    model_path: &Path,
    train: &Path,
    val: &Path,
    dim_path: &Path,
    constraints: &[PathBuf],
) -> CmdResult {
    ensure_out(out)?;
    let (model, checksum) = load_model(model_path)?;
    let dim = load_dir_checked(dim_path, "dim", &checksum)?;
    let train_records = read_target_records(train, "train")?;
    let val_records = read_target_records(val, "val")?;
    let val_harm = harmful_prompts(&val_records);
    let mut constraint_dirs = Vec::with_capacity(constraints.len());
    for c in constraints {
        constraint_dirs.push(load_dir_checked(c, "constraint", &checksum)?);
    }
    let optim = optim_for(cfg, &dim);
    let sel = selection_ctx(cfg, &val_harm, &val_records);
    let setup = RepIndSetup {
        constraints: constraint_dirs,
        lambda: cfg.repind.lambda,
        layer_cutoff: cfg.repind.layer_cutoff,
    };
    let outcome = train_repind_direction(
        &model,
        &train_records,
        &setup,
        &optim,
        &sel,
        cfg.repind.candidates,
        cfg.eval.max_new_tokens,
        &RefusalMatcher::default(),
    )?;
    let dir_path = out.join("repind.json");
    save_direction(&dir_path, &outcome.direction, &checksum)?;
    let cand_dir = out.join("repind-candidates");
    std::fs::create_dir_all(&cand_dir).map_err(anyhow::Error::new)?;
    for (i, c) in outcome.candidates.iter().enumerate() {
        save_direction(&cand_dir.join(format!("candidate-{i}.json")), c, &checksum)?;
    }
    log::info!(
        "independence-constrained search: selected ASR {:.3} vs random {:.3}{}",
        outcome.selected_asr,
        outcome.random_asr,
        if outcome.failed { " (FAILED to beat the baseline)" } else { "" }
    );
    let mut manifest = Manifest::new("train-repind", cfg.seed(), cfg.echo());
    for p in [model_path, dim_path, train, val] {
        manifest.add_input(p)?;
    }
    for c in constraints {
        manifest.add_input(c)?;
    }
    manifest.add_output(&dir_path)?;
    manifest.save(&out.join("train-repind-manifest.json"))?;
    Ok(())
}

fn verify_independence_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    model_path: &Path,
    a: &Path,
    b: &Path,
    data: &Path,
) -> CmdResult {
    ensure_out(out)?;
    let (model, checksum) = load_model(model_path)?;
    let dir_a = load_dir_checked(a, "direction-a", &checksum)?;
    let dir_b = load_dir_checked(b, "direction-b", &checksum)?;
    require(data, "data")?;
    let records = read_jsonl(data)?;
    let prompts = harmful_prompts(&records);
    let report = verify_independence(
        &model,
        &dir_a,
        &dir_b,
        &prompts,
        cfg.repind.epsilon,
        cfg.repind.layer_cutoff,
    )?;
    let report_path = out.join("independence-report.json");
    save_independence_report(&report_path, &report)?;
    log::info!(
        "independence: max deviation {:.4}/{:.4}, pass = {}",
        report.max_deviation_r,
        report.max_deviation_v,
        report.pass
    );
    let mut manifest = Manifest::new("verify-independence", cfg.seed(), cfg.echo());
    for p in [model_path, a, b, data] {
        manifest.add_input(p)?;
    }
    manifest.add_output(&report_path)?;
    manifest.save(&out.join("verify-independence-manifest.json"))?;
    Ok(())
}

fn attack_suffix_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    model_path: &Path,
    direction: &Path,
    data: &Path,
) -> CmdResult {
    ensure_out(out)?;
    let (model, checksum) = load_model(model_path)?;
    let dir = load_dir_checked(direction, "direction", &checksum)?;
    require(data, "data")?;
    let records = read_jsonl(data)?;
    let prompts = harmful_prompts(&records);
    let report = refusal_geometry::attack::run_suffix_attack_experiment(
        &model,
        &dir,
        &prompts,
        &cfg.attack,
        &RefusalMatcher::default(),
        cfg.eval.max_new_tokens,
    )?;
    let report_path = out.join("attack-report.json");
    report.save(&report_path)?;
    log::info!(
        "suffix attack: jailbreak {:.3} -> {:.3}, late-layer |cos| reduction {:.1}%",
        report.jailbreak_rate_before,
        report.jailbreak_rate_after,
        100.0 * report.cosine_reduction
    );
    let mut manifest = Manifest::new("attack-suffix", cfg.seed(), cfg.echo());
    for p in [model_path, direction, data] {
        manifest.add_input(p)?;
    }
    manifest.add_output(&report_path)?;
    manifest.save(&out.join("attack-suffix-manifest.json"))?;
    Ok(())
}

fn evaluate_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    model_path: &Path,
    direction: Option<&Path>,
    cone: Option<&Path>,
    data: &Path,
) -> CmdResult {
    ensure_out(out)?;
    let (model, checksum) = load_model(model_path)?;
    let records = read_target_records(data, "data")?;
    let harm = harmful_prompts(&records);
    let safe = safe_prompts(&records);
    let matcher = RefusalMatcher::default();
    let mut manifest = Manifest::new("evaluate", cfg.seed(), cfg.echo());
    manifest.add_input(model_path)?;
    manifest.add_input(data)?;

    match (direction, cone) {
        (Some(dir_path), None) => {
            let dir = load_dir_checked(dir_path, "direction", &checksum)?;
            manifest.add_input(dir_path)?;
            let mut report = asr(
                &model,
                "evaluate-direction",
                &harm,
                &dir.ablation(),
                cfg.eval.max_new_tokens,
                &matcher,
            )?;
            let grid = alpha_grid(&cfg.eval, dir.norm_at_extraction);
            report.refusal_curve =
                refusal_scaling_curve(&model, &safe, &dir, &grid, cfg.eval.max_new_tokens, &matcher)?;
            report.side_effect_kl = Some(side_effect_kl(&model, &dir, &records)?);
            let report_path = out.join("eval-report.json");
            report.save(&report_path)?;
            manifest.add_output(&report_path)?;

            let curve_path = out.join("alpha-curve.csv");
            write_xy_csv(&curve_path, ("alpha", "refusal_fraction"), &report.refusal_curve)?;
            manifest.add_output(&curve_path)?;

            let profile = cosine_profile(&model, &dir.vector, &harm, &InterventionSpec::none())?;
            let rows: Vec<(f64, f64)> = profile
                .per_layer
                .iter()
                .enumerate()
                .map(|(l, c)| (l as f64, *c))
                .collect();
            let profile_path = out.join("cosine-profile.csv");
            write_xy_csv(&profile_path, ("layer", "cosine"), &rows)?;
            manifest.add_output(&profile_path)?;
            log::info!(
                "ASR {:.3}, side-effect KL {:.4}",
                report.asr,
                report.side_effect_kl.unwrap()
            );
        }
        (None, Some(cone_path)) => {
            require(cone_path, "cone")?;
            let basis = load_cone(cone_path, Some(&checksum))?;
            manifest.add_input(cone_path)?;
            let report = evaluate_cone(
                &model,
                &basis,
                &harm,
                cfg.eval.cone_samples,
                cfg.seed(),
                cfg.eval.max_new_tokens,
                &matcher,
            )?;
            let report_path = out.join("cone-eval-report.json");
            write_json(&report_path, &report)?;
            manifest.add_output(&report_path)?;
            let samples_path = out.join("cone-samples.csv");
            write_samples_csv(&samples_path, "asr", &report.per_sample_asr)?;
            manifest.add_output(&samples_path)?;
            log::info!(
                "cone ASR over {} samples: min {:.3} median {:.3} max {:.3}",
                report.n_samples,
                report.min,
                report.median,
                report.max
            );
        }
        _ => {
            return Err(CommandError::Config(
                "field '--direction'/'--cone': exactly one must be given".into(),
            ))
        }
    }
    manifest.save(&out.join("evaluate-manifest.json"))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn best_of_n_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    model_path: &Path,
    direction: Option<&Path>,
    cone: Option<&Path>,
    data: &Path,
    n: usize,
    temperature: f64,
) -> CmdResult {
    ensure_out(out)?;
    let (model, checksum) = load_model(model_path)?;
    let records = read_jsonl(data)?;
    let harm = harmful_prompts(&records);
    let matcher = RefusalMatcher::default();
    let mut manifest = Manifest::new("best-of-n", cfg.seed(), cfg.echo());
    manifest.add_input(model_path)?;
    manifest.add_input(data)?;

    let result: BestOfNResult = match (direction, cone) {
        (None, Some(cone_path)) => {
            require(cone_path, "cone")?;
            let basis = load_cone(cone_path, Some(&checksum))?;
            manifest.add_input(cone_path)?;
            best_of_n(
                &model,
                &harm,
                &BestOfNStrategy::ConeSamples(&basis),
                n,
                cfg.seed(),
                cfg.eval.max_new_tokens,
                &matcher,
            )?
        }
        (Some(dir_path), None) => {
            let dir = load_dir_checked(dir_path, "direction", &checksum)?;
            manifest.add_input(dir_path)?;
            best_of_n(
                &model,
                &harm,
                &BestOfNStrategy::Temperature(&dir, temperature),
                n,
                cfg.seed(),
                cfg.eval.max_new_tokens,
                &matcher,
            )?
        }
        _ => {
            return Err(CommandError::Config(
                "field '--direction'/'--cone': exactly one must be given".into(),
            ))
        }
    };
    let rows: Vec<(f64, f64)> = (1..=n).map(|k| (k as f64, result.asr_at(k))).collect();
    let report_path = out.join("best-of-n.json");
    write_json(&report_path, &result)?;
    manifest.add_output(&report_path)?;
    let csv_path = out.join("n-vs-asr.csv");
    write_xy_csv(&csv_path, ("n", "asr"), &rows)?;
    manifest.add_output(&csv_path)?;
    log::info!("best-of-{n} ASR {:.3}", result.asr());
    manifest.save(&out.join("best-of-n-manifest.json"))?;
    Ok(())
}
