//! Run configuration: network topology, training, partitioning and
//! inference settings. Serialized as TOML.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::BranchMode;
use crate::error::{Error, Result};
use crate::spatial::{check_schedule, LevelSpec};
use crate::tensor::{LossForm, LrSchedule};

/// Grid sizes of the five encoder levels.
pub const DEFAULT_GRIDS: [f64; 5] = [0.24, 0.48, 0.96, 1.92, 3.84];
pub const RADIUS_FACTOR: f64 = 2.5;
pub const SIGMA_FACTOR: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub levels: Vec<LevelSpec>,
    pub widths: Vec<usize>,
    pub kernels_3d: usize,
    pub kernels_2d: usize,
    /// Kernel influence distance as a multiple of the level grid size.
    pub sigma_factor: f64,
    pub branch_mode: BranchMode,
    /// 1-based encoder levels whose second block carries a SegECC.
    pub segecc_levels: Vec<usize>,
    pub segecc_channels: usize,
    pub segecc_hidden: usize,
    pub attention: bool,
    /// Maximum number of rows per sphere that take part in attention.
    pub attention_cap: usize,
    pub kernel_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: LrSchedule,
    pub momentum: f64,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub spheres_per_batch: usize,
    pub sphere_radius: f64,
    pub jitter: f64,
    pub loss: LossForm,
    pub bn_momentum: f64,
    pub max_edges: usize,
    /// Quantile of neighbor counts used to calibrate neighbor caps.
    pub neighbor_quantile: f64,
    /// Loss weights are the inverse-frequency weights raised to this power
    /// and renormalized; 1 keeps them as is, 0 makes them uniform.
    pub class_weight_power: f64,
    /// Classes with fewer training points are counted as having this many
    /// when weights are computed; 0 rejects empty classes.
    #[serde(default)]
    pub class_count_floor: u64,
    /// Draw sphere centers class-uniformly instead of point-uniformly.
    pub balanced_centers: bool,
    /// Batches averaged into fresh normalization statistics after every
    /// epoch; 0 keeps the running averages.
    pub bn_refresh_batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub reg: f64,
    pub k_adj: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub min_votes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub segment: SegmentConfig,
    pub inference: InferenceConfig,
}

fn schedule(grids: &[f64]) -> Vec<LevelSpec> {
    grids.iter().map(|&g| LevelSpec::new(g, RADIUS_FACTOR * g)).collect()
}

impl Default for Config {
    /// The full-scale configuration.
    fn default() -> Self {
        Config {
            seed: 0,
            network: NetworkConfig {
                levels: schedule(&DEFAULT_GRIDS),
                widths: vec![64, 128, 256, 512, 1024],
                kernels_3d: 15,
                kernels_2d: 17,
                sigma_factor: SIGMA_FACTOR,
                branch_mode: BranchMode::Hybrid,
                segecc_levels: vec![3, 4],
                segecc_channels: 32,
                segecc_hidden: 64,
                attention: true,
                attention_cap: 4096,
                kernel_seed: 0,
            },
            train: TrainConfig {
                lr: LrSchedule {
                    base: 0.001,
                    decay: 0.9,
                    every: 5,
                },
                momentum: 0.9,
                epochs: 60,
                iterations_per_epoch: 2000,
                spheres_per_batch: 1,
                sphere_radius: 24.0,
                jitter: 0.04,
                loss: LossForm::Categorical,
                bn_momentum: 0.98,
                max_edges: 80,
                neighbor_quantile: 0.9,
                class_weight_power: 1.0,
                class_count_floor: 0,
                balanced_centers: true,
                bn_refresh_batches: 0,
            },
            segment: SegmentConfig { reg: 0.03, k_adj: 10 },
            inference: InferenceConfig { min_votes: 20 },
        }
    }
}

impl Config {
    /// Single-CPU scale: three levels, batches of four 7 m spheres, narrow
    /// layers, softened class weights.
    pub fn desk() -> Self {
        let mut c = Config::default();
        c.network.levels = schedule(&DEFAULT_GRIDS[..3]);
        c.network.widths = vec![32, 64, 128];
        c.network.segecc_levels = vec![2, 3];
        c.network.segecc_channels = 16;
        c.network.segecc_hidden = 32;
        c.network.attention_cap = 1024;
        c.train.lr.base = 0.01;
        c.train.epochs = 30;
        c.train.iterations_per_epoch = 70;
        c.train.spheres_per_batch = 4;
        c.train.sphere_radius = 7.0;
        c.train.class_weight_power = 0.5;
        c.train.balanced_centers = false;
        c.train.bn_refresh_batches = 16;
        c
    }

    /// `desk`, `paper`/`default`, or a path to a TOML file.
    pub fn resolve(spec: &str) -> Result<Self> {
        match spec {
            "desk" => Ok(Config::desk()),
            "paper" | "default" => Ok(Config::default()),
            path => Config::load(Path::new(path)),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read config {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(format!("write config {}", path.display()), e))
    }

    pub fn sigma(&self, level: usize) -> f64 {
        self.network.sigma_factor * self.network.levels[level].grid
    }

    /// True when every level has both neighbor caps set.
    pub fn is_calibrated(&self) -> bool {
        self.network
            .levels
            .iter()
            .enumerate()
            .all(|(l, s)| s.max_neighbors.is_some() && (l == 0 || s.max_strided_neighbors.is_some()))
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.network;
        check_schedule(&n.levels)?;
        if n.widths.len() != n.levels.len() {
            return Err(Error::Config(format!(
                "{} widths for {} levels",
                n.widths.len(),
                n.levels.len()
            )));
        }
        if n.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if n.kernels_3d < 2 || n.kernels_2d < 2 {
            return Err(Error::Config("kernel counts must be at least 2".into()));
        }
        if !(n.sigma_factor > 0.0) {
            return Err(Error::Config("sigma_factor must be positive".into()));
        }
        if let Some(&l) = n.segecc_levels.iter().find(|&&l| l == 0 || l > n.levels.len()) {
            return Err(Error::Config(format!(
                "segecc level {l} is not an encoder level (1..={})",
                n.levels.len()
            )));
        }
        if !n.segecc_levels.is_empty() && (n.segecc_channels == 0 || n.segecc_hidden == 0) {
            return Err(Error::Config("segecc widths must be positive".into()));
        }
        if n.attention && n.attention_cap == 0 {
            return Err(Error::Config("attention_cap must be positive".into()));
        }
        let t = &self.train;
        if !(t.lr.base > 0.0) || !(t.lr.decay > 0.0) || t.lr.every == 0 {
            return Err(Error::Config("learning rate schedule must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.momentum) || !(0.0..1.0).contains(&t.bn_momentum) {
            return Err(Error::Config("momenta must lie in [0, 1)".into()));
        }
        if t.iterations_per_epoch == 0 || t.spheres_per_batch == 0 {
            return Err(Error::Config("iterations and batch size must be positive".into()));
        }
        if !(t.sphere_radius > 0.0) || !(t.jitter >= 0.0) {
            return Err(Error::Config("sphere radius must be positive and jitter >= 0".into()));
        }
        if t.max_edges == 0 {
            return Err(Error::Config("max_edges must be >= 1".into()));
        }
        if !(t.class_weight_power >= 0.0) {
            return Err(Error::Config("class_weight_power must be >= 0".into()));
        }
        if !(t.neighbor_quantile > 0.0 && t.neighbor_quantile <= 1.0) {
            return Err(Error::Config("neighbor_quantile must lie in (0, 1]".into()));
        }
        if !(self.segment.reg >= 0.0) || self.segment.k_adj < 3 {
            return Err(Error::Config("segment reg must be >= 0 and k_adj >= 3".into()));
        }
        if self.inference.min_votes == 0 {
            return Err(Error::Config("min_votes must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for c in [Config::default(), Config::desk()] {
            c.validate().unwrap();
            assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn inconsistent_configs_are_named() {
        let mut c = Config::default();
        c.network.widths.pop();
        assert!(c.validate().unwrap_err().to_string().contains("4 widths for 5 levels"));
        let mut c = Config::default();
        c.network.segecc_levels = vec![6];
        assert!(c.validate().unwrap_err().to_string().contains("segecc level 6"));
        assert!(Config::from_toml("seed = 1\nbogus = 2").is_err());
    }

    #[test]
    fn calibration_flag() {
        let mut c = Config::desk();
        assert!(!c.is_calibrated());
        for s in c.network.levels.iter_mut() {
            s.max_neighbors = Some(10);
            s.max_strided_neighbors = Some(10);
        }
        assert!(c.is_calibrated());
    }
}
