//! Shape-world scenes: randomly placed flat-colored shapes with packing
//! constraints that keep every object inside the image and mostly
//! non-overlapping.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorKind {
    Red,
    Green,
    Blue,
    Yellow,
    Gray,
}

impl ColorKind {
    pub const ALL: [ColorKind; 5] = [
        ColorKind::Red,
        ColorKind::Green,
        ColorKind::Blue,
        ColorKind::Yellow,
        ColorKind::Gray,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ColorKind::Red => "red",
            ColorKind::Green => "green",
            ColorKind::Blue => "blue",
            ColorKind::Yellow => "yellow",
            ColorKind::Gray => "gray",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ColorKind::Red => [200, 40, 40],
            ColorKind::Green => [40, 160, 60],
            ColorKind::Blue => [40, 70, 200],
            ColorKind::Yellow => [220, 200, 40],
            ColorKind::Gray => [110, 110, 110],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Large,
}

/// One placed shape. `extent` is the radius for circles and the half-width
/// for squares and triangles; the analytic bounding box is always the
/// axis-aligned square of side `2 * extent` around `center`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: ColorKind,
    pub size: SizeClass,
    pub center: (f64, f64),
    pub extent: f64,
}

impl SceneObject {
    /// (x_min, y_min, width, height) in pixels.
    pub fn bbox(&self) -> [f64; 4] {
        [
            self.center.0 - self.extent,
            self.center.1 - self.extent,
            2.0 * self.extent,
            2.0 * self.extent,
        ]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapeWorldScene {
    pub objects: Vec<SceneObject>,
    pub image_size: usize,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub small_extent: (f64, f64),
    pub large_extent: (f64, f64),
    /// Packing guard: at most this many large objects per scene.
    pub max_large: usize,
    /// Clearance kept between an object's bounding box and the image border.
    pub border_margin: f64,
    /// Pairwise center distance must be at least this times the extent sum.
    pub min_separation: f64,
    /// Placement tries before generation gives up.
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 64,
            min_objects: 2,
            max_objects: 6,
            small_extent: (4.0, 6.0),
            large_extent: (8.0, 10.0),
            max_large: 3,
            border_margin: 1.0,
            min_separation: 0.6,
            max_attempts: 1000,
        }
    }
}

/// Deterministic scene from (seed, config): object count, attributes and
/// positions all come from a seeded stream, with rejection sampling on the
/// separation constraint.
pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<ShapeWorldScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempts = 0usize;

    loop {
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut sizes: Vec<SizeClass> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < 0.5 {
                    SizeClass::Small
                } else {
                    SizeClass::Large
                }
            })
            .collect();
        let mut large_count = sizes.iter().filter(|s| **s == SizeClass::Large).count();
        for s in sizes.iter_mut() {
            if large_count <= cfg.max_large {
                break;
            }
            if *s == SizeClass::Large {
                *s = SizeClass::Small;
                large_count -= 1;
            }
        }

        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        let mut scene_ok = true;
        for &size in &sizes {
            let (lo, hi) = match size {
                SizeClass::Small => cfg.small_extent,
                SizeClass::Large => cfg.large_extent,
            };
            let shape = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
            let color = ColorKind::ALL[rng.random_range(0..ColorKind::ALL.len())];
            let mut placed = false;
            for _ in 0..100 {
                attempts += 1;
                if attempts > cfg.max_attempts {
                    return Err(Error::Generation {
                        attempts: cfg.max_attempts,
                    });
                }
                let extent = lo + rng.random::<f64>() * (hi - lo);
                // Centers live on the pixel-center grid (k + 0.5) so the
                // rasterized extremes track the analytic bounding box.
                let lo_px = (extent + cfg.border_margin - 0.5).ceil() as i64;
                let hi_px = (cfg.image_size as f64 - extent - cfg.border_margin - 0.5).floor() as i64;
                if hi_px < lo_px {
                    continue;
                }
                let cx = rng.random_range(lo_px..=hi_px) as f64 + 0.5;
                let cy = rng.random_range(lo_px..=hi_px) as f64 + 0.5;
                let sep_ok = objects.iter().all(|o| {
                    let d = ((o.center.0 - cx).powi(2) + (o.center.1 - cy).powi(2)).sqrt();
                    d >= cfg.min_separation * (o.extent + extent)
                });
                if sep_ok {
                    objects.push(SceneObject {
                        shape,
                        color,
                        size,
                        center: (cx, cy),
                        extent,
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                scene_ok = false;
                break;
            }
        }

        if scene_ok {
            let scene = ShapeWorldScene {
                objects,
                image_size: cfg.image_size,
                rng_seed: seed,
            };
            debug_assert!(scene.check_invariants(cfg).is_ok());
            return Ok(scene);
        }
    }
}

impl ShapeWorldScene {
    /// Direct checker for the scene invariants; the generation oracle.
    pub fn check_invariants(&self, cfg: &GenConfig) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::Contract("scene has no objects".into()));
        }
        let s = self.image_size as f64;
        for (i, o) in self.objects.iter().enumerate() {
            let [x, y, w, h] = o.bbox();
            if x < 0.0 || y < 0.0 || x + w > s || y + h > s {
                return Err(Error::Contract(format!("object {i} out of bounds")));
            }
            if o.extent <= 0.0 {
                return Err(Error::Contract(format!("object {i} has no extent")));
            }
        }
        for i in 0..self.objects.len() {
            for j in (i + 1)..self.objects.len() {
                let (a, b) = (&self.objects[i], &self.objects[j]);
                let d = ((a.center.0 - b.center.0).powi(2) + (a.center.1 - b.center.1).powi(2))
                    .sqrt();
                if d < cfg.min_separation * (a.extent + b.extent) - 1e-9 {
                    return Err(Error::Contract(format!("objects {i},{j} too close")));
                }
            }
        }
        Ok(())
    }
}
