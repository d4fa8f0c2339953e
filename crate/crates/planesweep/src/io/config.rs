//! Flat key-value run configuration shared by the CLI flags and config
//! files: `key = value` lines, `#` comments, later keys override earlier
//! ones.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::cascade::CascadeConfig;
use crate::costvol::{CostMetric, FilterKernel, RegularizerMode, Tiny3dParams};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::geometry::{FeatureExtractor, TinyConvParams};
use crate::sampler::{HeuristicProducer, StagePatchNets, UniformProducer};
use crate::sampling::DeviationNorm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerChoice {
    Uniform,
    Heuristic,
    PatchNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureModeChoice {
    Photometric,
    TinyConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizerChoice {
    Filter,
    Tiny3d,
}

/// Everything a run needs, with the published defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub planes: [usize; 4],
    pub range_scales: [f64; 3],
    pub loss_weights: [f64; 4],
    pub cost_metric: CostMetric,
    pub deviation_norm: DeviationNorm,
    pub feature_mode: FeatureModeChoice,
    pub feature_channels: [usize; 4],
    pub feature_seed: u64,
    pub feature_params: Option<PathBuf>,
    pub regularizer: RegularizerChoice,
    pub filter_radii: [usize; 3],
    pub filter_kernel: FilterKernel,
    pub regularizer_seed: u64,
    pub regularizer_params: Option<PathBuf>,
    pub sampler: SamplerChoice,
    pub beta: f64,
    pub patchnet_seed: u64,
    pub patchnet_params: Option<PathBuf>,
    pub threads: usize,
    pub views: usize,
    pub fusion: FusionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            planes: [48, 16, 8, 8],
            range_scales: [0.38, 0.16, 0.04],
            loss_weights: [0.25, 0.5, 1.0, 2.0],
            cost_metric: CostMetric::Variance,
            deviation_norm: DeviationNorm::Range,
            feature_mode: FeatureModeChoice::Photometric,
            feature_channels: [64, 32, 16, 8],
            feature_seed: 1,
            feature_params: None,
            regularizer: RegularizerChoice::Filter,
            filter_radii: [1, 1, 1],
            filter_kernel: FilterKernel::Box,
            regularizer_seed: 1,
            regularizer_params: None,
            sampler: SamplerChoice::Heuristic,
            beta: 8.0,
            patchnet_seed: 1,
            patchnet_params: None,
            threads: 0,
            views: 5,
            fusion: FusionConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let mut pairs = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected 'key = value'".into(),
            })?;
            pairs.insert(key.trim().to_string(), (i + 1, value.trim().to_string()));
        }
        for (key, (line, value)) in pairs {
            self.set(&key, &value).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Apply one `key = value` setting (also backs the CLI flags).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |msg: &str| Error::Config(format!("key '{key}': {msg} (got '{value}')"));
        match key {
            "planes" => self.planes = parse_array4_usize(value).ok_or_else(|| bad("want 4 plane counts"))?,
            "range_scales" => {
                self.range_scales = parse_array3_f64(value).ok_or_else(|| bad("want 3 scales"))?
            }
            "loss_weights" => {
                self.loss_weights = parse_array4_f64(value).ok_or_else(|| bad("want 4 weights"))?
            }
            "cost_metric" => {
                self.cost_metric = match value {
                    "variance" => CostMetric::Variance,
                    "sqdiff" => CostMetric::SquaredDiffToRef,
                    _ => return Err(bad("want variance|sqdiff")),
                }
            }
            "deviation_norm" => {
                self.deviation_norm = match value {
                    "range" => DeviationNorm::Range,
                    "literal" => DeviationNorm::Literal,
                    _ => return Err(bad("want range|literal")),
                }
            }
            "feature_mode" => {
                self.feature_mode = match value {
                    "photometric" => FeatureModeChoice::Photometric,
                    "tiny-conv" => FeatureModeChoice::TinyConv,
                    _ => return Err(bad("want photometric|tiny-conv")),
                }
            }
            "feature_channels" => {
                self.feature_channels =
                    parse_array4_usize(value).ok_or_else(|| bad("want 4 channel counts"))?
            }
            "feature_seed" => self.feature_seed = value.parse().map_err(|_| bad("want integer"))?,
            "feature_params" => self.feature_params = Some(PathBuf::from(value)),
            "regularizer" => {
                self.regularizer = match value {
                    "filter" => RegularizerChoice::Filter,
                    "tiny-3d" => RegularizerChoice::Tiny3d,
                    _ => return Err(bad("want filter|tiny-3d")),
                }
            }
            "filter_radii" => {
                let r = parse_array3_f64(value).ok_or_else(|| bad("want 3 radii"))?;
                self.filter_radii = [r[0] as usize, r[1] as usize, r[2] as usize];
            }
            "filter_kernel" => {
                self.filter_kernel = match value {
                    "box" => FilterKernel::Box,
                    "gaussian" => FilterKernel::Gaussian,
                    _ => return Err(bad("want box|gaussian")),
                }
            }
            "regularizer_seed" => {
                self.regularizer_seed = value.parse().map_err(|_| bad("want integer"))?
            }
            "regularizer_params" => self.regularizer_params = Some(PathBuf::from(value)),
            "sampler" => {
                self.sampler = match value {
                    "uniform" => SamplerChoice::Uniform,
                    "heuristic" => SamplerChoice::Heuristic,
                    "patchnet" => SamplerChoice::PatchNet,
                    _ => return Err(bad("want uniform|heuristic|patchnet")),
                }
            }
            "beta" => self.beta = value.parse().map_err(|_| bad("want number"))?,
            "patchnet_seed" => self.patchnet_seed = value.parse().map_err(|_| bad("want integer"))?,
            "patchnet_params" => self.patchnet_params = Some(PathBuf::from(value)),
            "threads" => self.threads = value.parse().map_err(|_| bad("want integer"))?,
            "views" => self.views = value.parse().map_err(|_| bad("want integer"))?,
            "fusion_confidence" => {
                self.fusion.min_confidence = value.parse().map_err(|_| bad("want number"))?
            }
            "fusion_reprojection_px" => {
                self.fusion.max_reprojection_px = value.parse().map_err(|_| bad("want number"))?
            }
            "fusion_depth_relative" => {
                self.fusion.max_depth_relative = value.parse().map_err(|_| bad("want number"))?
            }
            "fusion_min_views" => {
                self.fusion.min_consistent_views = value.parse().map_err(|_| bad("want integer"))?
            }
            other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    pub fn cascade_config(&self) -> CascadeConfig {
        CascadeConfig {
            plane_counts: self.planes,
            range_scales: self.range_scales,
            loss_weights: self.loss_weights,
            cost_metric: self.cost_metric,
            deviation_norm: self.deviation_norm,
        }
    }

    pub fn feature_extractor(&self) -> Result<FeatureExtractor> {
        Ok(match self.feature_mode {
            FeatureModeChoice::Photometric => FeatureExtractor::Photometric,
            FeatureModeChoice::TinyConv => {
                let params = match &self.feature_params {
                    Some(path) => TinyConvParams::load(path)?,
                    None => TinyConvParams::seeded(self.feature_seed, self.feature_channels),
                };
                FeatureExtractor::TinyConv(params)
            }
        })
    }

    pub fn regularizer_mode(&self) -> Result<RegularizerMode> {
        Ok(match self.regularizer {
            RegularizerChoice::Filter => RegularizerMode::Filter {
                radii: self.filter_radii,
                kernel: self.filter_kernel,
            },
            RegularizerChoice::Tiny3d => RegularizerMode::Tiny3d(match &self.regularizer_params {
                Some(path) => Tiny3dParams::load(path)?,
                None => Tiny3dParams::seeded(self.regularizer_seed),
            }),
        })
    }

    /// The distribution producer for refinement stages.
    pub fn producer(&self) -> Result<Box<dyn crate::sampler::DistributionProducer>> {
        Ok(match self.sampler {
            SamplerChoice::Uniform => Box::new(UniformProducer),
            SamplerChoice::Heuristic => Box::new(HeuristicProducer {
                sharpness: self.beta,
            }),
            SamplerChoice::PatchNet => {
                let transitions = [
                    (self.planes[0], self.planes[1]),
                    (self.planes[1], self.planes[2]),
                    (self.planes[2], self.planes[3]),
                ];
                let nets = match &self.patchnet_params {
                    Some(path) => StagePatchNets::load(path)?,
                    None => StagePatchNets::seeded(self.patchnet_seed, &transitions)?,
                };
                Box::new(nets)
            }
        })
    }
}

fn parse_parts(value: &str) -> Vec<&str> {
    value
        .split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .collect()
}

fn parse_array4_usize(value: &str) -> Option<[usize; 4]> {
    let parts = parse_parts(value);
    if parts.len() != 4 {
        return None;
    }
    let mut out = [0usize; 4];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().ok()?;
    }
    Some(out)
}

fn parse_array4_f64(value: &str) -> Option<[f64; 4]> {
    let parts = parse_parts(value);
    if parts.len() != 4 {
        return None;
    }
    let mut out = [0.0; 4];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().ok()?;
    }
    Some(out)
}

fn parse_array3_f64(value: &str) -> Option<[f64; 3]> {
    let parts = parse_parts(value);
    if parts.len() != 3 {
        return None;
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().ok()?;
    }
    Some(out)
}
