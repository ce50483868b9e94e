//! End-to-end experiment steps shared by the command line and the tests.

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::model::{Descriptor, Model, ModelConfig};
use crate::report::CsvTable;
use crate::retrieval::{recall_metrics, DescriptorDb, RecallReport};
use crate::synth::{Dataset, Role};
use crate::training::{train, EpochStats, TrainConfig};

/// Describes every frame of `role` (or all frames) into a database.
pub fn embed(model: &Model, dataset: &Dataset, role: Option<Role>) -> Result<DescriptorDb> {
    let idx: Vec<usize> = match role {
        Some(r) => dataset.indices(r),
        None => (0..dataset.len()).collect(),
    };
    if idx.is_empty() {
        return Err(Error::Data("no frames to embed".into()));
    }
    let ids: Vec<u64> = idx.iter().map(|&i| dataset.entries[i].id).collect();
    let descs = idx
        .iter()
        .map(|&i| model.describe(&dataset.frames[i]))
        .collect::<Result<Vec<_>>>()?;
    DescriptorDb::from_descriptors(&ids, &descs)
}

/// Reads a database back as query descriptors.
pub fn db_queries(db: &DescriptorDb) -> Vec<Descriptor> {
    (0..db.len())
        .map(|i| Descriptor {
            f: db.descriptor(i).iter().map(|&v| v as f64).collect(),
            position: db.positions()[i],
        })
        .collect()
}

/// Database frames against query frames of one dataset.
pub fn evaluate(model: &Model, dataset: &Dataset, k_max: usize, tau: f64) -> Result<RecallReport> {
    let db = embed(model, dataset, Some(Role::Database))?;
    let queries = embed(model, dataset, Some(Role::Query))?;
    recall_metrics(&db, &db_queries(&queries), k_max, tau)
}

pub fn train_on(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    train(model, &dataset.frames, &dataset.positions(), cfg, |s| {
        log::info!("epoch {} mean_loss {:.6} skipped {}", s.epoch, s.mean_loss, s.skipped);
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationArm {
    pub name: String,
    pub config: ModelConfig,
}

fn arm(name: impl Into<String>, base: &ModelConfig, edit: impl FnOnce(&mut ModelConfig)) -> AblationArm {
    let mut config = base.clone();
    edit(&mut config);
    AblationArm { name: name.into(), config }
}

/// Expands an ablation switch into its arms.
///
/// Named grids are `modules`, `attention`, `window`, `knn` and `samples`;
/// `key=v1,v2,...` gives one arm per value of any model key.
pub fn ablation_arms(base: &ModelConfig, switch: &str) -> Result<Vec<AblationArm>> {
    let arms = match switch {
        "modules" => vec![
            arm("full", base, |_| {}),
            arm("no-gfm", base, |c| c.use_gfm = false),
            arm("no-ndm", base, |c| c.use_ndm = false),
            arm("no-lfm", base, |c| c.use_lfm = false),
        ],
        "attention" => AttentionKind::ALL
            .iter()
            .map(|&k| arm(k.name(), base, |c| c.attention = k))
            .collect(),
        "window" => [(1, 1), (2, 2), (4, 4)]
            .iter()
            .map(|&w| arm(format!("{}x{}", w.0, w.1), base, |c| c.window = w))
            .collect(),
        "knn" => [5, 10, 25, 50]
            .iter()
            .map(|&k| arm(format!("k{k}"), base, |c| c.knn = k))
            .collect(),
        "samples" => [4, 8, 16, 32]
            .iter()
            .map(|&n| {
                arm(format!("n{n}"), base, |c| {
                    c.n2d = n;
                    c.n3d = n;
                })
            })
            .collect(),
        other => {
            let (key, values) = other
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("unknown ablation switch {other:?}")))?;
            let mut arms = Vec::new();
            for v in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
                let mut config = base.clone();
                if !config.set(key, v)? {
                    return Err(Error::Config(format!("{key:?} is not a model key")));
                }
                arms.push(AblationArm {
                    name: format!("{key}={v}"),
                    config,
                });
            }
            arms
        }
    };
    if arms.is_empty() {
        return Err(Error::Config(format!("ablation switch {switch:?} has no arms")));
    }
    for a in &arms {
        a.config.validate()?;
    }
    Ok(arms)
}

pub const ABLATION_COLUMNS: [&str; 7] = ["arm", "variant", "ar1", "ar5", "ar1pct", "final_loss", "evaluated"];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub arm: AblationArm,
    pub recall: RecallReport,
    pub final_loss: f64,
}

/// Trains each arm from its own seed on `train_set` and evaluates on `eval_set`.
pub fn run_ablation(
    arms: &[AblationArm],
    train_set: &Dataset,
    eval_set: &Dataset,
    cfg: &TrainConfig,
    k_max: usize,
    tau: f64,
) -> Result<Vec<AblationResult>> {
    arms.iter()
        .map(|a| {
            log::info!("ablation arm {}", a.name);
            let mut model = Model::new(a.config.clone())?;
            let trace = train_on(&mut model, train_set, cfg)?;
            Ok(AblationResult {
                arm: a.clone(),
                recall: evaluate(&model, eval_set, k_max.max(5), tau)?,
                final_loss: trace.last().map_or(f64::NAN, |s| s.mean_loss),
            })
        })
        .collect()
}

pub fn ablation_table(results: &[AblationResult]) -> CsvTable {
    let mut t = CsvTable::new(&ABLATION_COLUMNS);
    for r in results {
        t.push(vec![
            r.arm.name.clone(),
            r.arm.config.variant.name().to_string(),
            format!("{:.6}", r.recall.ar_at(1)),
            format!("{:.6}", r.recall.ar_at(5)),
            format!("{:.6}", r.recall.ar_one_percent),
            format!("{:.9e}", r.final_loss),
            r.recall.evaluated.to_string(),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_grids_expand() {
        let base = ModelConfig::default();
        assert_eq!(ablation_arms(&base, "modules").unwrap().len(), 4);
        let att = ablation_arms(&base, "attention").unwrap();
        assert_eq!(att.len(), 5);
        assert_eq!(att[1].name, "vanilla");
        let one = ablation_arms(&base, "attention=vanilla").unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].config.attention, AttentionKind::Vanilla);
    }

    #[test]
    fn bad_switches_are_config_errors() {
        let base = ModelConfig::default();
        assert!(matches!(ablation_arms(&base, "nope"), Err(Error::Config(_))));
        assert!(matches!(ablation_arms(&base, "epochs=3"), Err(Error::Config(_))));
        assert!(matches!(ablation_arms(&base, "knn="), Err(Error::Config(_))));
        assert!(matches!(ablation_arms(&base, "c=0"), Err(Error::Config(_))));
    }
}
