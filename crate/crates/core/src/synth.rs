//! Synthetic labelled event scenes.
//!
//! Moving silhouettes fire events along their contours (labelled with the
//! object's class) while sensor noise fires uniformly over the frame with
//! the background class. Output depends only on the config and the seed.
//!
//! Scene files are TOML:
//!
//! ```toml
//! width = 346
//! height = 260
//! duration_us = 800000
//! event_rate = 1500.0      # contour events per second, per object
//! noise_rate = 300.0       # background events per second, whole sensor
//!
//! [motion]
//! kind = "linear"          # linear | rotational | partial_rotational
//! speed = 40.0             # px/s (linear) or deg/s (rotational kinds)
//! direction_deg = 0.0      # linear only
//! amplitude_deg = 30.0     # partial_rotational only
//!
//! [[objects]]
//! shape = "disc"
//! radius = 30.0
//! center = [100.0, 130.0]
//! class = 1
//!
//! [[objects]]
//! shape = "rect"
//! width = 60.0
//! height = 40.0
//! center = [240.0, 130.0]
//! class = 2
//! ```

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{GmnnError, Result};
use crate::event::{window_events, ClassId, Event, Polarity, SensorGeometry, WindowSpec};
use crate::graph::{build_graph, EventGraph};

pub const BACKGROUND_CLASS: ClassId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Linear,
    Rotational,
    PartialRotational,
}

impl std::str::FromStr for MotionKind {
    type Err = GmnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(MotionKind::Linear),
            "rotational" => Ok(MotionKind::Rotational),
            "partial_rotational" | "partial-rotational" => Ok(MotionKind::PartialRotational),
            other => Err(GmnnError::config(format!("unknown motion kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub kind: MotionKind,
    pub speed: f64,
    #[serde(default)]
    pub direction_deg: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude_deg: f64,
}

fn default_amplitude() -> f64 {
    30.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Silhouette {
    Disc { radius: f64 },
    Rect { width: f64, height: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(flatten)]
    pub silhouette: Silhouette,
    pub center: [f64; 2],
    pub class: ClassId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    #[serde(default = "default_width")]
    pub width: u32,
    #[serde(default = "default_height")]
    pub height: u32,
    pub duration_us: u64,
    pub event_rate: f64,
    #[serde(default)]
    pub noise_rate: f64,
    pub motion: Motion,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
}

fn default_width() -> u32 {
    SensorGeometry::DAVIS346.width
}

fn default_height() -> u32 {
    SensorGeometry::DAVIS346.height
}

impl SceneConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SceneConfig =
            toml::from_str(text).map_err(|e| GmnnError::config(format!("scene config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scene config serializes")
    }

    pub fn geometry(&self) -> SensorGeometry {
        SensorGeometry {
            width: self.width,
            height: self.height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        SensorGeometry::new(self.width, self.height)?;
        if self.duration_us == 0 {
            return Err(GmnnError::config("scene duration must be > 0"));
        }
        if !(self.event_rate.is_finite() && self.event_rate > 0.0) {
            return Err(GmnnError::config(format!(
                "event rate must be > 0, got {}",
                self.event_rate
            )));
        }
        if !(self.noise_rate.is_finite() && self.noise_rate >= 0.0) {
            return Err(GmnnError::config(format!(
                "noise rate must be >= 0, got {}",
                self.noise_rate
            )));
        }
        if !self.motion.speed.is_finite() {
            return Err(GmnnError::config("motion speed must be finite"));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            let area = match obj.silhouette {
                Silhouette::Disc { radius } if radius > 0.0 => PI * radius * radius,
                Silhouette::Disc { .. } => 0.0,
                Silhouette::Rect { width, height } => {
                    if width <= 0.0 || height <= 0.0 {
                        0.0
                    } else {
                        width * height
                    }
                }
            };
            if !(area.is_finite() && area > 0.0) {
                return Err(GmnnError::config(format!("object {i} has zero area")));
            }
        }
        Ok(())
    }

    /// Two classes, each a single moving object, without noise. Used as
    /// the overfitting fixture.
    pub fn two_class_fixture() -> Self {
        SceneConfig {
            width: 346,
            height: 260,
            duration_us: 800_000,
            event_rate: 1_000.0,
            noise_rate: 0.0,
            motion: Motion {
                kind: MotionKind::Linear,
                speed: 40.0,
                direction_deg: 90.0,
                amplitude_deg: default_amplitude(),
            },
            objects: vec![
                SceneObject {
                    silhouette: Silhouette::Disc { radius: 35.0 },
                    center: [100.0, 100.0],
                    class: 0,
                },
                SceneObject {
                    silhouette: Silhouette::Rect {
                        width: 70.0,
                        height: 50.0,
                    },
                    center: [250.0, 100.0],
                    class: 1,
                },
            ],
        }
    }
}

impl SceneConfig {
    /// Three rotating objects over background noise; the default scene
    /// for ablations and timing.
    pub fn benchmark() -> Self {
        SceneConfig {
            width: 346,
            height: 260,
            duration_us: 800_000,
            event_rate: 1_200.0,
            noise_rate: 300.0,
            motion: Motion {
                kind: MotionKind::Rotational,
                speed: 20.0,
                direction_deg: 0.0,
                amplitude_deg: default_amplitude(),
            },
            objects: vec![
                SceneObject {
                    silhouette: Silhouette::Disc { radius: 30.0 },
                    center: [90.0, 90.0],
                    class: 1,
                },
                SceneObject {
                    silhouette: Silhouette::Rect {
                        width: 60.0,
                        height: 40.0,
                    },
                    center: [250.0, 100.0],
                    class: 2,
                },
                SceneObject {
                    silhouette: Silhouette::Disc { radius: 20.0 },
                    center: [170.0, 190.0],
                    class: 3,
                },
            ],
        }
    }
}

/// `n` objects on a grid over the sensor, alternating discs and
/// rectangles, with classes `1..=n`.
pub fn grid_objects(n: usize, width: u32, height: u32) -> Vec<SceneObject> {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols).max(1);
    let (cw, ch) = (width as f64 / cols as f64, height as f64 / rows as f64);
    let size = 0.3 * cw.min(ch);
    (0..n)
        .map(|i| {
            let center = [cw * ((i % cols) as f64 + 0.5), ch * ((i / cols) as f64 + 0.5)];
            let silhouette = if i % 2 == 0 {
                Silhouette::Disc { radius: size }
            } else {
                Silhouette::Rect {
                    width: 2.0 * size,
                    height: 1.4 * size,
                }
            };
            SceneObject {
                silhouette,
                center,
                class: (i + 1) as ClassId,
            }
        })
        .collect()
}

/// Labelled graphs over tumbling windows of a synthesized scene. Empty
/// windows are skipped.
pub fn scene_graphs(config: &SceneConfig, seed: u64, spec: WindowSpec) -> Result<Vec<EventGraph>> {
    let events = synth_scene(config, seed)?;
    window_events(&events, spec)?
        .iter()
        .filter(|w| !w.is_empty())
        .map(|w| build_graph(w, config.geometry()))
        .collect()
}

/// The overfitting fixture: the two-class scene cut into eight 100 ms
/// windows of about 200 events each.
pub fn overfit_fixture(seed: u64) -> Result<Vec<EventGraph>> {
    scene_graphs(
        &SceneConfig::two_class_fixture(),
        seed,
        WindowSpec::tumbling(100_000, 10_000),
    )
}

/// Pose of the scene at time `t` (seconds): rotation about the sensor centre
/// followed by a translation.
struct Pose {
    angle: f64,
    angular_velocity: f64,
    shift: [f64; 2],
    velocity: [f64; 2],
}

fn pose_at(motion: &Motion, t: f64) -> Pose {
    match motion.kind {
        MotionKind::Linear => {
            let dir = motion.direction_deg.to_radians();
            let v = [motion.speed * dir.cos(), motion.speed * dir.sin()];
            Pose {
                angle: 0.0,
                angular_velocity: 0.0,
                shift: [v[0] * t, v[1] * t],
                velocity: v,
            }
        }
        MotionKind::Rotational => {
            let w = motion.speed.to_radians();
            Pose {
                angle: w * t,
                angular_velocity: w,
                shift: [0.0, 0.0],
                velocity: [0.0, 0.0],
            }
        }
        MotionKind::PartialRotational => {
            // Triangle wave between -amplitude and +amplitude.
            let w = motion.speed.to_radians().abs();
            let amp = motion.amplitude_deg.to_radians().abs();
            if w == 0.0 || amp == 0.0 {
                return Pose {
                    angle: 0.0,
                    angular_velocity: 0.0,
                    shift: [0.0, 0.0],
                    velocity: [0.0, 0.0],
                };
            }
            let period = 4.0 * amp / w;
            let phase = (t + amp / w).rem_euclid(period);
            let (angle, ang_vel) = if phase < period / 2.0 {
                (-amp + w * phase, w)
            } else {
                (amp - w * (phase - period / 2.0), -w)
            };
            Pose {
                angle,
                angular_velocity: ang_vel,
                shift: [0.0, 0.0],
                velocity: [0.0, 0.0],
            }
        }
    }
}

fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Point on the object outline (object frame) with its outward normal, for
/// a uniform sample `u` in [0, 1).
fn contour_point(silhouette: Silhouette, u: f64) -> ([f64; 2], [f64; 2]) {
    match silhouette {
        Silhouette::Disc { radius } => {
            let a = 2.0 * PI * u;
            let n = [a.cos(), a.sin()];
            ([radius * n[0], radius * n[1]], n)
        }
        Silhouette::Rect { width, height } => {
            let (hw, hh) = (width / 2.0, height / 2.0);
            let mut s = u * 2.0 * (width + height);
            if s < width {
                return ([-hw + s, -hh], [0.0, -1.0]);
            }
            s -= width;
            if s < height {
                return ([hw, -hh + s], [1.0, 0.0]);
            }
            s -= height;
            if s < width {
                return ([hw - s, hh], [0.0, 1.0]);
            }
            s -= width;
            ([-hw, hh - s], [-1.0, 0.0])
        }
    }
}

fn poisson_count(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let dist = Poisson::new(mean).expect("positive poisson mean");
    dist.sample(rng) as u64
}

/// Generates a labelled, time-sorted event stream.
pub fn synth_scene(config: &SceneConfig, seed: u64) -> Result<Vec<Event>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = config.geometry();
    let duration_s = config.duration_us as f64 * 1e-6;
    let centre = [config.width as f64 / 2.0, config.height as f64 / 2.0];
    let jitter = Normal::new(0.0, 0.5).expect("valid normal");

    let mut events = Vec::new();
    for obj in &config.objects {
        let n = poisson_count(&mut rng, config.event_rate * duration_s);
        let mut times: Vec<u64> = (0..n)
            .map(|_| rng.random_range(0..config.duration_us))
            .collect();
        times.sort_unstable();
        for t in times {
            let pose = pose_at(&config.motion, t as f64 * 1e-6);
            let (local, normal) = contour_point(obj.silhouette, rng.random::<f64>());
            let rel_centre = [obj.center[0] - centre[0], obj.center[1] - centre[1]];
            let p_rel = rotate([rel_centre[0] + local[0], rel_centre[1] + local[1]], pose.angle);
            let px = centre[0] + p_rel[0] + pose.shift[0] + jitter.sample(&mut rng);
            let py = centre[1] + p_rel[1] + pose.shift[1] + jitter.sample(&mut rng);

            // Polarity follows the sign of the edge's motion along its normal.
            let n = rotate(normal, pose.angle);
            let vel = [
                pose.velocity[0] - pose.angular_velocity * p_rel[1],
                pose.velocity[1] + pose.angular_velocity * p_rel[0],
            ];
            let polarity = if n[0] * vel[0] + n[1] * vel[1] < 0.0 {
                Polarity::Negative
            } else {
                Polarity::Positive
            };

            let (x, y) = (px.round() as i64, py.round() as i64);
            if geometry.contains(x, y) {
                events.push(Event::new(x as u32, y as u32, t, polarity).with_label(obj.class));
            }
        }
    }

    let n_noise = poisson_count(&mut rng, config.noise_rate * duration_s);
    for _ in 0..n_noise {
        let x = rng.random_range(0..config.width);
        let y = rng.random_range(0..config.height);
        let t = rng.random_range(0..config.duration_us);
        let polarity = if rng.random::<bool>() {
            Polarity::Positive
        } else {
            Polarity::Negative
        };
        events.push(Event::new(x, y, t, polarity).with_label(BACKGROUND_CLASS));
    }

    events.sort_by_key(|e| e.t);
    Ok(events)
}
