//! Run configuration: a TOML file with one table per concern, overridden
//! by command-line flags.

use std::path::Path;

use gmnn_core::event::{ParseOptions, SensorGeometry, WindowSpec};
use gmnn_core::model::ModelConfig;
use gmnn_core::synth::SceneConfig;
use gmnn_core::train::TrainConfig;
use gmnn_core::{GmnnError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub window_ms: f64,
    /// Defaults to `window_ms` (tumbling windows).
    pub stride_ms: Option<f64>,
    pub n_max: usize,
    pub width: u32,
    pub height: u32,
    pub has_header: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_ms: 100.0,
            stride_ms: None,
            n_max: 10_000,
            width: SensorGeometry::DAVIS346.width,
            height: SensorGeometry::DAVIS346.height,
            has_header: false,
        }
    }
}

pub fn ms_to_us(ms: f64) -> Result<u64> {
    if !(ms.is_finite() && ms > 0.0) {
        return Err(GmnnError::Config(format!("duration must be > 0 ms, got {ms}")));
    }
    Ok((ms * 1000.0).round().max(1.0) as u64)
}

impl WindowConfig {
    pub fn spec(&self) -> Result<WindowSpec> {
        let duration = ms_to_us(self.window_ms)?;
        let stride = match self.stride_ms {
            Some(s) => ms_to_us(s)?,
            None => duration,
        };
        let spec = WindowSpec {
            duration,
            n_max: self.n_max,
            stride,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn geometry(&self) -> Result<SensorGeometry> {
        SensorGeometry::new(self.width, self.height)
    }

    pub fn parse_options(&self) -> ParseOptions {
        ParseOptions {
            has_header: self.has_header,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub boundary_radius_px: f64,
    pub background: u16,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            boundary_radius_px: 2.0,
            background: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub layers: Vec<usize>,
    pub k_sets: bool,
    pub train_graphs: usize,
    pub eval_graphs: usize,
    pub graph_ms: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            layers: (1..=7).collect(),
            k_sets: true,
            train_graphs: 12,
            eval_graphs: 4,
            graph_ms: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub graphs: usize,
    pub graph_ms: f64,
    pub repetitions: usize,
    /// Contour event rate of the timing scene, per object and second.
    pub event_rate: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            graphs: 40,
            graph_ms: 10.0,
            repetitions: 5,
            event_rate: 5_000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; all available cores when absent.
    pub workers: Option<usize>,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Scene for `synth`, `ablate` and `bench`; the built-in benchmark
    /// scene when absent.
    pub scene: Option<SceneConfig>,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| GmnnError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| GmnnError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn scene(&self) -> SceneConfig {
        self.scene.clone().unwrap_or_else(SceneConfig::benchmark)
    }
}

/// `a..b` (inclusive), `a..=b`, or a comma list.
pub fn parse_layer_range(s: &str) -> std::result::Result<Vec<usize>, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    let out = if let Some((a, b)) = s.split_once("..") {
        let (lo, hi) = (num(a)?, num(b.trim_start_matches('='))?);
        (lo..=hi).collect::<Vec<_>>()
    } else {
        s.split(',').map(num).collect::<std::result::Result<_, _>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(format!("layer counts must be >= 1, got {s:?}"));
    }
    Ok(out)
}

pub fn parse_usize_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}")))
        .collect()
}
