//! Pipeline configuration: one TOML file, one section per stage.

use std::path::Path;

use msmap_core::elevation::NavmapConfig;
use msmap_core::merge::MergeConfig;
use msmap_core::optimizer::Loss;
use msmap_core::planner::PrmParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OctreeConfig {
    pub resolution: f64,
    /// Points farther than this from their sensor origin are not inserted.
    pub max_range: f64,
}

impl Default for OctreeConfig {
    fn default() -> Self {
        Self {
            resolution: 0.05,
            max_range: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Sample spacing of the ground-truth surface clouds.
    pub surface_spacing: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            surface_spacing: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// RPE window in meters of travelled distance.
    pub rpe_delta: f64,
    /// Association threshold for change scoring.
    pub tau: f64,
    /// Voxel size for downsampling the map before point-to-point scoring;
    /// zero keeps every point.
    pub map_voxel: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rpe_delta: 1.0,
            tau: 0.05,
            map_voxel: 0.05,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// When set, replaces every stage seed (vocabulary, RANSAC, PRM, generator).
    pub seed: Option<u64>,
    pub octree: OctreeConfig,
    pub merge: MergeConfig,
    pub navmap: NavmapConfig,
    pub planner: PrmParams,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Parses TOML, rejecting keys the configuration does not know.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let value: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| CliError::Validation(format!("config: {e}")))?;
        let mut unknown = Vec::new();
        let cfg: PipelineConfig =
            serde_ignored::deserialize(value, |path| unknown.push(path.to_string()))
                .map_err(|e| CliError::Validation(format!("config: {e}")))?;
        if let Some(key) = unknown.first() {
            return Err(CliError::Validation(format!("config: unknown key `{key}`")));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    /// Applies the global seed to every stage.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(s) = self.seed {
            self.merge.place.vocabulary_seed = s;
            self.merge.place.ransac.seed = s;
            self.planner.seed = s;
        }
        self
    }

    pub fn generator_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Checks every value against the stage preconditions, naming the key.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad: Vec<String> = Vec::new();
        let mut pos = |key: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{key} must be positive and finite (got {v})"));
            }
        };
        pos("octree.resolution", self.octree.resolution);
        pos("octree.max_range", self.octree.max_range);
        let place = &self.merge.place;
        pos(
            "merge.place.ransac.inlier_threshold",
            place.ransac.inlier_threshold,
        );
        pos("merge.place.ransac.sigma_floor", place.ransac.sigma_floor);
        let opt = &self.merge.optimizer;
        pos("merge.optimizer.lambda_init", opt.lambda_init);
        if let Loss::Cauchy { scale } = opt.loss {
            pos("merge.optimizer.loss.scale", scale);
        }
        pos("navmap.resolution", self.navmap.resolution);
        pos("navmap.gap", self.navmap.gap);
        for (i, r) in self.navmap.filter_resolutions.iter().enumerate() {
            pos(&format!("navmap.filter_resolutions[{i}]"), *r);
        }
        pos(
            "navmap.traversability.stride",
            self.navmap.traversability.stride,
        );
        pos(
            "navmap.traversability.step_height",
            self.navmap.traversability.step_height,
        );
        pos("planner.radius", self.planner.radius);
        pos("planner.robot.length", self.planner.robot.length);
        pos("planner.robot.width", self.planner.robot.width);
        pos("synth.surface_spacing", self.synth.surface_spacing);
        pos("eval.rpe_delta", self.eval.rpe_delta);
        pos("eval.tau", self.eval.tau);
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                bad.push(msg.to_owned());
            }
        };
        check(
            place.word_count >= 1,
            "merge.place.word_count must be at least 1",
        );
        check(place.top_k >= 1, "merge.place.top_k must be at least 1");
        check(
            (0.0..=1.0).contains(&place.min_similarity),
            "merge.place.min_similarity must lie in [0, 1]",
        );
        check(
            place.ransac.iterations >= 1,
            "merge.place.ransac.iterations must be at least 1",
        );
        check(
            place.ransac.min_inliers >= 3,
            "merge.place.ransac.min_inliers must be at least 3",
        );
        check(
            opt.max_iterations >= 1,
            "merge.optimizer.max_iterations must be at least 1",
        );
        check(
            opt.lambda_factor > 1.0,
            "merge.optimizer.lambda_factor must exceed 1",
        );
        check(
            opt.gradient_tolerance >= 0.0 && opt.relative_cost_tolerance >= 0.0,
            "merge.optimizer tolerances must be non-negative",
        );
        check(
            self.planner.samples >= 1,
            "planner.samples must be at least 1",
        );
        check(
            (0.0..=1.0).contains(&self.planner.t_min),
            "planner.t_min must lie in [0, 1]",
        );
        check(
            self.eval.map_voxel >= 0.0 && self.eval.map_voxel.is_finite(),
            "eval.map_voxel must be non-negative",
        );
        match bad.into_iter().next() {
            Some(msg) => Err(CliError::Validation(format!("config: {msg}"))),
            None => Ok(()),
        }
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
