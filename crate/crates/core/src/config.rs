//! Flat `key=value` run configuration covering every tunable knob.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::report::config_hash;
use crate::sweep::ExtrinsicError;
use crate::synth::WorldConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub world: WorldConfig,
    pub world_seed: u64,
    pub tau: f64,
    pub k_max: usize,
    pub alphas: Vec<f64>,
    /// `(t_e meters, r_e degrees)` pairs.
    pub extrinsic_grid: Vec<(f64, f64)>,
    pub noise_seed: u64,
    pub gradcheck_probes: usize,
    pub dataset: Option<PathBuf>,
    pub train_dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub control_checkpoint: Option<PathBuf>,
    pub db: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            world: WorldConfig::default(),
            world_seed: 7,
            tau: 25.0,
            k_max: 25,
            alphas: vec![0.0, 0.02, 0.05, 0.1, 0.2],
            extrinsic_grid: vec![(0.0, 0.0), (0.1, 1.0), (0.2, 2.0), (0.5, 5.0), (1.0, 10.0)],
            noise_seed: 0,
            gradcheck_probes: 64,
            dataset: None,
            train_dataset: None,
            checkpoint: None,
            control_checkpoint: None,
            db: None,
            queries: None,
            out: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        let w = &mut self.world;
        match key {
            "epochs" => t.epochs = num(key, value)?,
            "batch" => t.batch = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "margin" => t.margin = num(key, value)?,
            "rho" => t.rho = num(key, value)?,
            "rho_neg" => t.rho_neg = num(key, value)?,
            "flip_prob" => t.flip_prob = num(key, value)?,
            "point_jitter" => t.jitter = num(key, value)?,
            "train_seed" => t.seed = num(key, value)?,
            "world_seed" => self.world_seed = num(key, value)?,
            "n_places" => w.n_places = num(key, value)?,
            "revisits" => w.revisits = num(key, value)?,
            "spacing" => w.spacing = num(key, value)?,
            "jitter_pos" => w.jitter_pos = num(key, value)?,
            "jitter_yaw" => w.jitter_yaw = num(key, value)?,
            "image_height" => w.height = num(key, value)?,
            "image_width" => w.width = num(key, value)?,
            "focal" => w.focal = num(key, value)?,
            "far_clip" => w.far_clip = num(key, value)?,
            "landmarks_min" => w.landmarks_min = num(key, value)?,
            "landmarks_max" => w.landmarks_max = num(key, value)?,
            "points_per_frame" => w.points_per_frame = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "k_max" => self.k_max = num(key, value)?,
            "alphas" => self.alphas = list(key, value)?,
            "extrinsic_grid" => {
                self.extrinsic_grid = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|pair| {
                        let (a, b) = pair
                            .split_once(':')
                            .ok_or_else(|| Error::Config(format!("extrinsic_grid entries are t:r_deg, got {pair:?}")))?;
                        Ok((num(key, a)?, num(key, b)?))
                    })
                    .collect::<Result<_>>()?
            }
            "noise_seed" => self.noise_seed = num(key, value)?,
            "gradcheck_probes" => self.gradcheck_probes = num(key, value)?,
            "dataset" => self.dataset = path(value),
            "train_dataset" => self.train_dataset = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "control_checkpoint" => self.control_checkpoint = path(value),
            "db" => self.db = path(value),
            "queries" => self.queries = path(value),
            "out" => self.out = path(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, file: &Path) -> Result<()> {
        let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.train.batch < 2 || !(self.train.lr >= 0.0) {
            return bad("batch must be at least 2 and lr nonnegative".into());
        }
        if self.train.rho_neg < self.train.rho {
            return bad(format!("rho_neg {} below rho {}", self.train.rho_neg, self.train.rho));
        }
        if self.k_max == 0 || !(self.tau > 0.0) {
            return bad("k_max and tau must be positive".into());
        }
        if self.alphas.iter().any(|&a| !(a >= 0.0)) {
            return bad("noise intensities must be nonnegative".into());
        }
        Ok(())
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn resolved(&self) -> String {
        let t = &self.train;
        let w = &self.world;
        let mut pairs: Vec<(&str, String)> = self.model.entries();
        pairs.extend([
            ("epochs", t.epochs.to_string()),
            ("batch", t.batch.to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("margin", t.margin.to_string()),
            ("rho", t.rho.to_string()),
            ("rho_neg", t.rho_neg.to_string()),
            ("flip_prob", t.flip_prob.to_string()),
            ("point_jitter", t.jitter.to_string()),
            ("train_seed", t.seed.to_string()),
            ("world_seed", self.world_seed.to_string()),
            ("n_places", w.n_places.to_string()),
            ("revisits", w.revisits.to_string()),
            ("spacing", w.spacing.to_string()),
            ("jitter_pos", w.jitter_pos.to_string()),
            ("jitter_yaw", w.jitter_yaw.to_string()),
            ("image_height", w.height.to_string()),
            ("image_width", w.width.to_string()),
            ("focal", w.focal.to_string()),
            ("far_clip", w.far_clip.to_string()),
            ("landmarks_min", w.landmarks_min.to_string()),
            ("landmarks_max", w.landmarks_max.to_string()),
            ("points_per_frame", w.points_per_frame.to_string()),
            ("tau", self.tau.to_string()),
            ("k_max", self.k_max.to_string()),
            ("alphas", join(&self.alphas)),
            (
                "extrinsic_grid",
                self.extrinsic_grid.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(","),
            ),
            ("noise_seed", self.noise_seed.to_string()),
            ("gradcheck_probes", self.gradcheck_probes.to_string()),
            ("dataset", show(&self.dataset)),
            ("train_dataset", show(&self.train_dataset)),
            ("checkpoint", show(&self.checkpoint)),
            ("control_checkpoint", show(&self.control_checkpoint)),
            ("db", show(&self.db)),
            ("queries", show(&self.queries)),
            ("out", show(&self.out)),
        ]);
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        config_hash(&self.resolved())
    }

    pub fn extrinsic_errors(&self) -> Vec<ExtrinsicError> {
        self.extrinsic_grid
            .iter()
            .map(|&(t, r)| ExtrinsicError::oblique(t, r.to_radians()))
            .collect()
    }
}
