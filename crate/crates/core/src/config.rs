//! Run configuration: every tunable constant of the pipeline in one TOML
//! document. Unknown keys are rejected and missing keys take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::{PartitionPlan, Schedule};
use crate::model::ModelConfig;
use crate::rng::derive_seed;
use crate::supervoxel::GraphConfig;
use crate::volume::SynthSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    /// Extra synthetic cases, generated after the training pool, on which
    /// modality attention is measured.
    pub held_out_cases: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { held_out_cases: 24 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Every random stream of the pipeline is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub synth: SynthSpec,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub partition: PartitionPlan,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 2024,
            out_dir: PathBuf::from("runs/default"),
            threads: 0,
            synth: SynthSpec::default(),
            graph: GraphConfig::default(),
            model: ModelConfig::default(),
            schedule: Schedule::default(),
            partition: PartitionPlan::default(),
            explain: ExplainConfig::default(),
        };
        c.set_seed(c.seed);
        c
    }
}

impl RunConfig {
    /// Benchmark scale: 40 volumes of 32³, four clients, 60 rounds, with the
    /// patch sampler and model narrowed so that all three paradigms train in
    /// minutes on one core.
    pub fn benchmark() -> Self {
        let mut c = Self::default();
        c.out_dir = PathBuf::from("runs/benchmark");
        c.graph.patches_per_modality = 8;
        c.graph.patch_neighbors = 9;
        c.model.d_model = 24;
        c.model.patch_features = c.graph.n_features();
        c
    }

    /// Eight small volumes and a few rounds; exercises every command quickly.
    pub fn smoke() -> Self {
        let mut c = Self::benchmark();
        c.out_dir = PathBuf::from("runs/smoke");
        c.synth.n_volumes = 8;
        c.synth.dims = [24, 24, 24];
        c.synth.tumor_radius_range = [3.0, 5.0];
        c.graph.k_supervoxels = 100;
        c.graph.patches_per_modality = 4;
        c.graph.patch_neighbors = 5;
        c.model.d_model = 12;
        c.model.n_heads = 3;
        c.model.pe_dim = 4;
        c.model.patch_features = c.graph.n_features();
        c.schedule.rounds = 3;
        c.explain.held_out_cases = 4;
        c
    }

    /// Sets the master seed and re-derives the component seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = derive_seed(seed, &[1]);
        self.partition.seed = derive_seed(seed, &[2]);
        self.schedule.seed = derive_seed(seed, &[3]);
    }

    pub fn graph_seed(&self) -> u64 {
        derive_seed(self.seed, &[4])
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, &[5])
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.graph.validate()?;
        self.model.validate()?;
        self.schedule.validate()?;
        if self.model.patch_features != self.graph.n_features() {
            return Err(Error::invalid(
                "patch_features",
                format!(
                    "model expects {} but graphs carry patch_neighbors + 3 = {}",
                    self.model.patch_features,
                    self.graph.n_features()
                ),
            ));
        }
        let f = &self.partition.fractions;
        if f.is_empty() || f.len() > self.synth.n_volumes {
            return Err(Error::invalid("fractions", "need between 1 and n_volumes clients"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.set_seed(c.seed);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for c in [RunConfig::default(), RunConfig::benchmark(), RunConfig::smoke()] {
            c.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 3"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[model]\nd_modell = 3").is_err());
        assert!(RunConfig::from_toml("[synth]\nseed = 3").is_err());
    }

    #[test]
    fn partial_files_fill_in_defaults_and_derive_seeds() {
        let c = RunConfig::from_toml("seed = 9\n[schedule]\nrounds = 4").unwrap();
        assert_eq!(c.schedule.rounds, 4);
        assert_eq!(c.model, ModelConfig::default());
        let mut d = RunConfig::default();
        d.set_seed(9);
        assert_eq!(c.synth.seed, d.synth.seed);
        assert_ne!(c.synth.seed, RunConfig::default().synth.seed);
    }

    #[test]
    fn mismatched_patch_width_is_rejected() {
        let err = RunConfig::from_toml("[graph]\npatch_neighbors = 10").unwrap_err();
        assert!(err.to_string().contains("patch_features"));
    }
}
