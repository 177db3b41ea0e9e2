//! Run configuration: a TOML file merged with command-line overrides.
//! Precedence is flag, then file, then built-in default.

use super::load_image;
use crate::dataset::{
    generate_dataset, procedural_scene, split_ids, ClearDepthPair, HazeSampling, SceneSample,
};
use crate::error::{Error, Result};
use crate::losses::Preset;
use crate::physics::DepthMap;
use crate::scalar::Scalar;
use crate::tensor::htf;
use crate::training::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Procedural scenes to generate when `source` is unset.
    pub scenes: usize,
    /// Directory of `<name>.png` clear images with `<name>.depth.htf` raw depth.
    pub source: Option<PathBuf>,
    pub draws_per_image: usize,
    pub airlight_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub per_channel_airlight: bool,
    /// Share of source images held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let h = HazeSampling::default();
        Self {
            scenes: 10,
            source: None,
            draws_per_image: h.per_image_draws,
            airlight_range: h.airlight_range,
            beta_range: h.beta_range,
            per_channel_airlight: h.per_channel_airlight,
            test_fraction: 0.2,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            output: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces `train.loss` with the preset's weights.
    pub preset: Option<Preset>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Some(Preset::IL2PerT),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub data_seed: Option<u64>,
    pub scenes: Option<usize>,
    pub image_size: Option<usize>,
    pub batch_size: Option<usize>,
    pub stage1_iters: Option<usize>,
    pub stage2_iters: Option<usize>,
    pub scale: Option<f64>,
    pub lr: Option<f64>,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Generated samples partitioned by source image.
#[derive(Clone, Debug)]
pub struct SplitData<T> {
    pub train: Vec<SceneSample<T>>,
    pub test: Vec<SceneSample<T>>,
    pub sampling: HazeSampling,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a file, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(p) = o.preset {
            self.preset = Some(p);
        }
        let t = &mut self.train;
        let d = &mut self.data;
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(o.seed, t.seed);
        set!(o.data_seed, d.seed);
        set!(o.scenes, d.scenes);
        set!(o.image_size, t.image_size);
        set!(o.batch_size, t.batch_size);
        set!(o.stage1_iters, t.stage1_iters);
        set!(o.stage2_iters, t.stage2_iters);
        set!(o.scale, t.scale);
        set!(o.lr, t.adam.lr);
        set!(o.dataset, self.paths.dataset);
        set!(o.output, self.paths.output);
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.sampling().validate()?;
        let d = &self.data;
        if d.source.is_none() && d.scenes == 0 {
            return Err(Error::Config("data.scenes must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::Config(format!(
                "data.test_fraction {} not in [0, 1)",
                d.test_fraction
            )));
        }
        Ok(())
    }

    /// Training configuration with the preset's loss weights applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(p) = self.preset {
            t.loss = p.weights();
        }
        t
    }

    pub fn sampling(&self) -> HazeSampling {
        HazeSampling {
            per_image_draws: self.data.draws_per_image,
            airlight_range: self.data.airlight_range,
            beta_range: self.data.beta_range,
            per_channel_airlight: self.data.per_channel_airlight,
            seed: self.data.seed,
        }
    }

    fn source_pairs<T: Scalar>(&self) -> Result<Vec<ClearDepthPair<T>>> {
        let size = self.train.image_size;
        match &self.data.source {
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.data.seed);
                Ok((0..self.data.scenes)
                    .map(|i| procedural_scene(&format!("img{i:03}"), size, &mut rng))
                    .collect())
            }
            Some(dir) => load_pairs(dir),
        }
    }

    /// Builds the hazy dataset and splits it by source image id.
    pub fn synthesize<T: Scalar>(&self) -> Result<SplitData<T>> {
        let pairs = self.source_pairs::<T>()?;
        let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
        let (_, test_ids) = split_ids(&ids, self.data.test_fraction, self.data.seed);
        let sampling = self.sampling();
        let all = generate_dataset(&pairs, &sampling)?;
        let (test, train) = all
            .into_iter()
            .partition(|s| test_ids.contains(&s.source_id));
        Ok(SplitData {
            train,
            test,
            sampling,
        })
    }
}

/// Reads every `<name>.png` in `dir` that has a `<name>.depth.htf` beside it,
/// in name order. Depth is normalized by its maximum.
pub fn load_pairs<T: Scalar>(dir: &Path) -> Result<Vec<ClearDepthPair<T>>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<String> = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if let Some(stem) = e.file_name().to_str().and_then(|n| n.strip_suffix(".png")) {
            names.push(stem.to_string());
        }
    }
    names.sort();
    let mut out = Vec::new();
    for name in names {
        let dpath = dir.join(format!("{name}.depth.htf"));
        if !dpath.is_file() {
            continue;
        }
        let clear = load_image::<T>(&dir.join(format!("{name}.png")))?;
        let depth = DepthMap::normalize(htf::load::<T>(&dpath)?)?;
        if depth.tensor().shape()[1..] != clear.shape()[1..] {
            return Err(Error::dim(format!("{name}: depth and image sizes differ")));
        }
        out.push(ClearDepthPair {
            id: name,
            clear,
            depth: Some(depth),
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no <name>.png + <name>.depth.htf pairs",
            dir.display()
        )));
    }
    Ok(out)
}
