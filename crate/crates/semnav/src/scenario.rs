//! Synthetic datasets on disk and the settings used for the flood
//! responder scenario.

use std::path::Path;

use semnav_core::fewshot::EpisodicConfig;
use semnav_core::frugal::FrugalConfig;
use semnav_core::irl::{sample_demonstrations, Cell, DemoSet, GridMdp, IrlConfig, RewardWeights};
use semnav_core::mlp::SgdConfig;
use semnav_core::rng::SplitMix64;
use semnav_core::synthetic::{
    flood_benchmark, flood_color, shapes_benchmark, FloodBenchmark, FloodConfig, ShapesConfig, FLOOD_CLASSES,
    FLOOD_DEMO_REWARDS,
};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::registry::write_atomic;

pub const FLOOD_HORIZON: usize = 144;
pub const FLOOD_DEMOS: usize = 200;
const DEMO_STREAM: u64 = 0x4445_4d4f;

/// Head training on random-appearance shapes scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTraining {
    pub scenes: usize,
    pub appearances: usize,
    pub seed: u64,
    pub config: EpisodicConfig,
}

impl Default for HeadTraining {
    fn default() -> Self {
        let base = EpisodicConfig::default();
        Self {
            scenes: 120,
            appearances: 96,
            seed: 0,
            config: EpisodicConfig {
                sgd: SgdConfig { epochs: 5000, ..base.sgd },
                ..base
            },
        }
    }
}

pub fn flood_seg_config() -> FrugalConfig {
    FrugalConfig {
        sgd: SgdConfig {
            epochs: 300,
            ..SgdConfig::default()
        },
        ..FrugalConfig::default()
    }
}

pub fn flood_irl_config() -> IrlConfig {
    IrlConfig {
        learning_rate: 0.004,
        iterations: 100,
        horizon: Some(FLOOD_HORIZON),
        ..IrlConfig::default()
    }
}

/// Route demonstrations drawn on the true four-class map from the
/// benchmark's demonstration rewards.
pub fn flood_demos(bench: &FloodBenchmark, seed: u64) -> DemoSet {
    let mdp = GridMdp::from_semantic(&bench.scene.truth, FLOOD_CLASSES.len(), bench.goal, FLOOD_HORIZON)
        .expect("benchmark truth uses the flood classes");
    let names = FLOOD_CLASSES.iter().map(|s| s.to_string()).collect();
    let weights = RewardWeights::new(names, FLOOD_DEMO_REWARDS.to_vec()).expect("finite rewards");
    let demos = sample_demonstrations(&mdp, &weights, FLOOD_DEMOS, &mut SplitMix64::derive(seed, DEMO_STREAM))
        .expect("goal is reachable");
    DemoSet::from_demos(bench.goal, &demos)
}

/// `scenario.json` of a generated flood directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloodScenario {
    pub start: Cell,
    pub goal: Cell,
    pub new_class: String,
    pub new_class_color: [u8; 3],
    pub truth_classes: Vec<String>,
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Flood,
    Shapes,
}

/// Writes a seeded dataset. Flood: `image.ppm`, `palette.json`,
/// `labels.pgm`, `truth.pgm`, `support.ppm`, `support_mask.pgm`,
/// `demos.json`, `scenario.json`. Shapes: `palette.json` plus
/// `images/NN.ppm` / `labels/NN.pgm` pairs with full labels.
pub fn write_synthetic(kind: SyntheticKind, seed: u64, out: &Path) -> Result<Vec<String>> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    match kind {
        SyntheticKind::Flood => {
            let bench = flood_benchmark(&FloodConfig {
                seed,
                ..FloodConfig::default()
            });
            let scenario = FloodScenario {
                start: bench.start,
                goal: bench.goal,
                new_class: FLOOD_CLASSES[3].to_string(),
                new_class_color: flood_color(),
                truth_classes: FLOOD_CLASSES.iter().map(|s| s.to_string()).collect(),
                horizon: FLOOD_HORIZON,
            };
            let demos = flood_demos(&bench, seed);
            files.push(("image.ppm".into(), bench.scene.image.save()));
            files.push(("palette.json".into(), bench.palette.to_json().into_bytes()));
            files.push(("labels.pgm".into(), bench.labels.save()));
            files.push(("truth.pgm".into(), bench.scene.truth.save()));
            files.push(("support.ppm".into(), bench.support.image.save()));
            files.push(("support_mask.pgm".into(), bench.support_mask().save()));
            files.push(("demos.json".into(), serde_json::to_vec(&demos).expect("demos serialize")));
            files.push(("scenario.json".into(), serde_json::to_vec_pretty(&scenario).expect("scenario serializes")));
        }
        SyntheticKind::Shapes => {
            let (palette, scenes) = shapes_benchmark(&ShapesConfig {
                seed,
                ..ShapesConfig::default()
            });
            files.push(("palette.json".into(), palette.to_json().into_bytes()));
            for (i, scene) in scenes.iter().enumerate() {
                files.push((format!("images/{i:02}.ppm"), scene.image.save()));
                files.push((format!("labels/{i:02}.pgm"), scene.truth.save()));
            }
        }
    }
    for (name, bytes) in &files {
        write_atomic(&out.join(name), bytes)?;
    }
    Ok(files.into_iter().map(|(n, _)| n).collect())
}
