use std::path::{Path, PathBuf};
use std::time::Instant;

use prfusion_core::checkpoint;
use prfusion_core::config::RunConfig;
use prfusion_core::diagnostics::{gradcheck_table, run_gradcheck, GradCheckConfig};
use prfusion_core::model::Model;
use prfusion_core::pipeline::{ablation_arms, ablation_table, db_queries, embed as embed_frames, run_ablation, train_on};
use prfusion_core::report::CsvTable;
use prfusion_core::retrieval::{recall_metrics, DescriptorDb};
use prfusion_core::sweep::{perturbation_sweep, sweep_table, SweepConfig, SweepModel};
use prfusion_core::synth::{generate_world, Dataset, Role};
use prfusion_core::training::loss_table;
use prfusion_core::Error;

use crate::Failure;

type Outcome = Result<(), Failure>;

fn need<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, Error> {
    p.as_deref().ok_or_else(|| Error::Config(format!("{key} is not set")))
}

/// Writes to `out` when set, else to stdout.
fn emit(table: &CsvTable, cfg: &RunConfig) -> Result<(), Error> {
    match &cfg.out {
        Some(path) => {
            table.write(path, &cfg.hash())?;
            log::info!("wrote {}", path.display());
        }
        None => print!("{}", table.render(&cfg.hash())),
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset, Error> {
    let t = Instant::now();
    let ds = Dataset::load(path)?;
    log::info!("loaded {} frames from {} in {:.1?}", ds.len(), path.display(), t.elapsed());
    Ok(ds)
}

fn load_model(path: &Path) -> Result<Model, Error> {
    let m = checkpoint::load(path)?;
    log::info!("loaded {} checkpoint {}", m.config.variant, path.display());
    Ok(m)
}

pub fn gen_data(cfg: &RunConfig) -> Outcome {
    let out = need(&cfg.out, "out")?;
    let world = generate_world(cfg.world_seed, cfg.world.clone())?;
    let ds = Dataset::render(&world)?;
    ds.save(out)?;
    log::info!("wrote {} frames to {}", ds.len(), out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Outcome {
    let ds = load_dataset(need(&cfg.train_dataset, "train_dataset")?)?;
    let ckpt = need(&cfg.checkpoint, "checkpoint")?;
    let mut model = Model::new(cfg.model.clone())?;
    let trace = train_on(&mut model, &ds, &cfg.train)?;
    checkpoint::save(&model, ckpt)?;
    log::info!("wrote checkpoint {}", ckpt.display());
    emit(&loss_table(&trace), cfg)?;
    Ok(())
}

pub fn embed(cfg: &RunConfig, role: &str) -> Outcome {
    let role = match role {
        "db" => Some(Role::Database),
        "query" => Some(Role::Query),
        "all" => None,
        other => return Err(Error::Config(format!("role must be db, query or all, got {other:?}")).into()),
    };
    let model = load_model(need(&cfg.checkpoint, "checkpoint")?)?;
    let ds = load_dataset(need(&cfg.dataset, "dataset")?)?;
    let out = need(&cfg.out, "out")?;
    let db = embed_frames(&model, &ds, role)?;
    db.save(out)?;
    log::info!("wrote {} descriptors of dimension {} to {}", db.len(), db.dim(), out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Outcome {
    let db = DescriptorDb::load(need(&cfg.db, "db")?)?;
    let queries = DescriptorDb::load(need(&cfg.queries, "queries")?)?;
    let report = recall_metrics(&db, &db_queries(&queries), cfg.k_max, cfg.tau)?;
    log::info!("AR@1 {:.4} AR@1% {:.4}", report.ar_at(1), report.ar_one_percent);
    emit(&report.table(), cfg)?;
    Ok(())
}

pub fn perturb(cfg: &RunConfig) -> Outcome {
    let ds = load_dataset(need(&cfg.dataset, "dataset")?)?;
    let main = load_model(need(&cfg.checkpoint, "checkpoint")?)?;
    let control = cfg.control_checkpoint.as_deref().map(load_model).transpose()?;
    let mut models = vec![SweepModel {
        name: main.config.variant.name().to_string(),
        model: &main,
    }];
    if let Some(c) = &control {
        let mut name = c.config.variant.name().to_string();
        if name == models[0].name {
            name.push_str("-control");
        }
        models.push(SweepModel { name, model: c });
    }
    let sweep = SweepConfig {
        alphas: cfg.alphas.clone(),
        extrinsics: cfg.extrinsic_errors(),
        tau: cfg.tau,
        seed: cfg.noise_seed,
    };
    let rows = perturbation_sweep(&models, &ds, &sweep)?;
    emit(&sweep_table(&rows), cfg)?;
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Outcome {
    let t = Instant::now();
    let rows = run_gradcheck(&GradCheckConfig {
        solver: cfg.model.metric_solver,
        seed: cfg.model.seed,
        max_per_input: cfg.gradcheck_probes,
        ..GradCheckConfig::default()
    })?;
    log::info!("gradient check finished in {:.1?}", t.elapsed());
    emit(&gradcheck_table(&rows), cfg)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.module).collect();
    if !failed.is_empty() {
        return Err(Failure::CheckFailed(format!("gradient check failed for {}", failed.join(","))));
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig, switch: &str) -> Outcome {
    let arms = ablation_arms(&cfg.model, switch)?;
    let train_set = load_dataset(need(&cfg.train_dataset, "train_dataset")?)?;
    let eval_set = load_dataset(need(&cfg.dataset, "dataset")?)?;
    let results = run_ablation(&arms, &train_set, &eval_set, &cfg.train, cfg.k_max, cfg.tau)?;
    emit(&ablation_table(&results), cfg)?;
    Ok(())
}
