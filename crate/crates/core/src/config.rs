//! System configuration: defaults for every hyperparameter, a flat
//! `section.key = value` file format with `#` comments, strict unknown-key
//! rejection, and range validation.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::frame_io::DatasetFormat;
use crate::geom::Aabb;
use crate::mapper::{MappingConfig, MappingStrategy};
use crate::objective::ObjectiveWeights;
use crate::renderer::SamplingConfig;
use crate::sparse_volume::PriorMode;
use crate::tracker::TrackingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorSelect {
    /// Projective-TSDF prior embeddings (the full method).
    Analytic,
    /// Zero embeddings with the same fusion weights (ablation).
    None,
}

impl PriorSelect {
    pub fn mode(self) -> PriorMode<f64> {
        match self {
            PriorSelect::Analytic => PriorMode::Analytic,
            PriorSelect::None => PriorMode::None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemConfig {
    pub dataset_path: Option<PathBuf>,
    /// None means detect from the directory contents.
    pub dataset_format: Option<DatasetFormat>,
    pub voxel_size: f64,
    pub tr: f64,
    pub plane_cell: f64,
    /// None means derive from the first frame's back-projection, inflated.
    pub bounds: Option<Aabb<f64>>,
    pub prior: PriorSelect,
    pub sampling: SamplingConfig<f64>,
    pub tracking: TrackingConfig<f64>,
    pub mapping: MappingConfig<f64>,
    pub weights: ObjectiveWeights<f64>,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            dataset_path: None,
            dataset_format: None,
            voxel_size: 0.04,
            tr: 0.08,
            plane_cell: 0.24,
            bounds: None,
            prior: PriorSelect::Analytic,
            sampling: SamplingConfig::default(),
            tracking: TrackingConfig::default(),
            mapping: MappingConfig::default(),
            weights: ObjectiveWeights::default(),
            seed: 0,
            output: PathBuf::from("out"),
        }
    }
}

fn bad(key: &str, msg: &str) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| bad(key, &format!("expected a number, got `{v}`")))
}

fn parse_count(key: &str, v: &str) -> Result<usize> {
    let n: i64 = v
        .parse()
        .map_err(|_| bad(key, &format!("expected an integer, got `{v}`")))?;
    usize::try_from(n).map_err(|_| bad(key, &format!("must be non-negative, got {n}")))
}

fn parse_positive(key: &str, v: &str) -> Result<f64> {
    let x = parse_f64(key, v)?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(bad(key, &format!("must be positive, got {v}")))
    }
}

fn parse_weight(key: &str, v: &str) -> Result<f64> {
    let x = parse_f64(key, v)?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(bad(key, &format!("must be non-negative, got {v}")))
    }
}

impl SystemConfig {
    /// Parse overrides from flat `section.key = value` lines. Blank lines and
    /// `#` comments (whole-line or trailing) are ignored; unknown keys and
    /// out-of-range values are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SystemConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if v.is_empty() {
            return Err(bad(key, "empty value"));
        }
        match key {
            "dataset.path" => self.dataset_path = Some(PathBuf::from(v)),
            "dataset.format" => {
                self.dataset_format = match v {
                    "auto" => None,
                    "directory" => Some(DatasetFormat::Directory),
                    "tum" => Some(DatasetFormat::Tum),
                    _ => return Err(bad(key, "expected auto | directory | tum")),
                }
            }
            "scene.voxel_size" => self.voxel_size = parse_positive(key, v)?,
            "scene.tr" => self.tr = parse_positive(key, v)?,
            "scene.plane_cell" => self.plane_cell = parse_positive(key, v)?,
            "scene.prior" => {
                self.prior = match v {
                    "analytic" => PriorSelect::Analytic,
                    "none" => PriorSelect::None,
                    _ => return Err(bad(key, "expected analytic | none")),
                }
            }
            "scene.bounds" => {
                let nums: Vec<f64> = v
                    .split_whitespace()
                    .map(|s| parse_f64(key, s))
                    .collect::<Result<_>>()?;
                if nums.len() != 6 {
                    return Err(bad(key, "expected `x0 y0 z0 x1 y1 z1`"));
                }
                self.bounds = Some(Aabb::new(
                    [nums[0], nums[1], nums[2]],
                    [nums[3], nums[4], nums[5]],
                ));
            }
            "sampling.coarse" => self.sampling.n_coarse = parse_count(key, v)?,
            "sampling.fine" => self.sampling.n_fine = parse_count(key, v)?,
            "sampling.near" => self.sampling.n1 = parse_positive(key, v)?,
            "sampling.far" => self.sampling.n2 = parse_positive(key, v)?,
            "tracking.iters" => self.tracking.iters = parse_count(key, v)?,
            "tracking.pixels" => self.tracking.pixels = parse_count(key, v)?,
            "tracking.lr_rotation" => self.tracking.lr_rotation = parse_positive(key, v)?,
            "tracking.lr_translation" => {
                self.tracking.lr_translation = parse_positive(key, v)?
            }
            "mapping.interval" => self.mapping.interval = parse_count(key, v)?,
            "mapping.iters" => self.mapping.iters = parse_count(key, v)?,
            "mapping.pixels" => self.mapping.pixels = parse_count(key, v)?,
            "mapping.db_pixels" => self.mapping.db_pixels_per_frame = parse_count(key, v)?,
            "mapping.recent" => self.mapping.recent = parse_count(key, v)?,
            "mapping.covisible" => self.mapping.covisible = parse_count(key, v)?,
            "mapping.random" => self.mapping.random = parse_count(key, v)?,
            "mapping.covisibility_threshold" => {
                self.mapping.covisibility_threshold = parse_weight(key, v)?
            }
            "mapping.keyframe_stride" => {
                self.mapping.keyframe_stride = parse_count(key, v)?
            }
            "mapping.strategy" => {
                self.mapping.strategy = match v {
                    "all_frames" => MappingStrategy::AllFrames,
                    "keyframe" => MappingStrategy::Keyframe,
                    _ => return Err(bad(key, "expected all_frames | keyframe")),
                }
            }
            "mapping.lr_embeddings" => self.mapping.lr_embeddings = parse_positive(key, v)?,
            "mapping.lr_planes" => self.mapping.lr_planes = parse_positive(key, v)?,
            "mapping.lr_decoders" => self.mapping.lr_decoders = parse_positive(key, v)?,
            "mapping.lr_poses" => self.mapping.lr_poses = parse_positive(key, v)?,
            "objective.rgb" => self.weights.rgb = parse_weight(key, v)?,
            "objective.depth" => self.weights.depth = parse_weight(key, v)?,
            "objective.fs" => self.weights.fs = parse_weight(key, v)?,
            "objective.sdf" => self.weights.sdf = parse_weight(key, v)?,
            "system.seed" => {
                self.seed = v
                    .parse()
                    .map_err(|_| bad(key, &format!("expected an unsigned integer, got `{v}`")))?
            }
            "system.output" => self.output = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let ensure = |ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        };
        ensure(self.tr >= self.voxel_size, "scene.tr must be >= scene.voxel_size")?;
        ensure(self.sampling.n_coarse >= 1, "sampling.coarse must be >= 1")?;
        ensure(
            self.sampling.n1 < self.sampling.n2,
            "sampling.near must be < sampling.far",
        )?;
        ensure(self.tracking.pixels >= 1, "tracking.pixels must be >= 1")?;
        ensure(self.mapping.pixels >= 1, "mapping.pixels must be >= 1")?;
        ensure(
            self.mapping.db_pixels_per_frame >= 1,
            "mapping.db_pixels must be >= 1",
        )?;
        ensure(
            self.mapping.frame_budget() >= 1,
            "mapping frame budget must be >= 1",
        )?;
        ensure(
            self.mapping.covisibility_threshold <= 1.0,
            "mapping.covisibility_threshold must be <= 1",
        )?;
        ensure(
            self.mapping.keyframe_stride >= 1,
            "mapping.keyframe_stride must be >= 1",
        )?;
        if let Some(b) = &self.bounds {
            ensure(
                (0..3).all(|a| b.max[a] > b.min[a]),
                "scene.bounds must have max > min on every axis",
            )?;
        }
        Ok(())
    }

    /// The fully resolved configuration in the same format `parse` reads —
    /// echoed to the log so every run records its effective settings.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        if let Some(p) = &self.dataset_path {
            kv("dataset.path", p.display().to_string());
        }
        kv(
            "dataset.format",
            match self.dataset_format {
                None => "auto".into(),
                Some(DatasetFormat::Directory) => "directory".into(),
                Some(DatasetFormat::Tum) => "tum".into(),
            },
        );
        kv("scene.voxel_size", self.voxel_size.to_string());
        kv("scene.tr", self.tr.to_string());
        kv("scene.plane_cell", self.plane_cell.to_string());
        kv(
            "scene.prior",
            match self.prior {
                PriorSelect::Analytic => "analytic".into(),
                PriorSelect::None => "none".into(),
            },
        );
        if let Some(b) = &self.bounds {
            kv(
                "scene.bounds",
                format!(
                    "{} {} {} {} {} {}",
                    b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]
                ),
            );
        }
        kv("sampling.coarse", self.sampling.n_coarse.to_string());
        kv("sampling.fine", self.sampling.n_fine.to_string());
        kv("sampling.near", self.sampling.n1.to_string());
        kv("sampling.far", self.sampling.n2.to_string());
        kv("tracking.iters", self.tracking.iters.to_string());
        kv("tracking.pixels", self.tracking.pixels.to_string());
        kv("tracking.lr_rotation", self.tracking.lr_rotation.to_string());
        kv(
            "tracking.lr_translation",
            self.tracking.lr_translation.to_string(),
        );
        kv("mapping.interval", self.mapping.interval.to_string());
        kv("mapping.iters", self.mapping.iters.to_string());
        kv("mapping.pixels", self.mapping.pixels.to_string());
        kv(
            "mapping.db_pixels",
            self.mapping.db_pixels_per_frame.to_string(),
        );
        kv("mapping.recent", self.mapping.recent.to_string());
        kv("mapping.covisible", self.mapping.covisible.to_string());
        kv("mapping.random", self.mapping.random.to_string());
        kv(
            "mapping.covisibility_threshold",
            self.mapping.covisibility_threshold.to_string(),
        );
        kv(
            "mapping.keyframe_stride",
            self.mapping.keyframe_stride.to_string(),
        );
        kv(
            "mapping.strategy",
            match self.mapping.strategy {
                MappingStrategy::AllFrames => "all_frames".into(),
                MappingStrategy::Keyframe => "keyframe".into(),
            },
        );
        kv(
            "mapping.lr_embeddings",
            self.mapping.lr_embeddings.to_string(),
        );
        kv("mapping.lr_planes", self.mapping.lr_planes.to_string());
        kv("mapping.lr_decoders", self.mapping.lr_decoders.to_string());
        kv("mapping.lr_poses", self.mapping.lr_poses.to_string());
        kv("objective.rgb", self.weights.rgb.to_string());
        kv("objective.depth", self.weights.depth.to_string());
        kv("objective.fs", self.weights.fs.to_string());
        kv("objective.sdf", self.weights.sdf.to_string());
        kv("system.seed", self.seed.to_string());
        kv("system.output", self.output.display().to_string());
        s
    }
}
