//! Procedural benchmark rasters: textured class regions plus sensor noise.
//!
//! `shapes` scenes have a background class with rectangles and ellipses of
//! two other classes per scene. `flood` scenes are small town maps (roads,
//! grass, buildings) cut by a flooded area.

use serde::{Deserialize, Serialize};

use crate::irl::Cell;
use crate::raster::{BinaryMask, ImageRaster, LabelPalette, PaletteClass, SemanticRaster, SparseLabelRaster};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Texture {
    Smooth,
    /// Independent per-pixel grain.
    Grain { amp: f64 },
    /// Sinusoidal stripes; `angle` in radians.
    Stripes { period: f64, amp: f64, angle: f64 },
    Checker { period: usize, amp: f64 },
    /// Sparse dark/bright dots.
    Speckle { density: f64, amp: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub name: String,
    pub color: [f64; 3],
    pub texture: Texture,
}

impl Appearance {
    fn new(name: &str, color: [f64; 3], texture: Texture) -> Self {
        Self {
            name: name.to_string(),
            color,
            texture,
        }
    }

    fn display_color(&self) -> [u8; 3] {
        self.color.map(crate::raster::quantize)
    }

    fn shade(&self, x: usize, y: usize, rng: &mut SplitMix64) -> f64 {
        match self.texture {
            Texture::Smooth => 0.0,
            Texture::Grain { amp } => amp * (2.0 * rng.next_f64() - 1.0),
            Texture::Stripes { period, amp, angle } => {
                let t = x as f64 * angle.cos() + y as f64 * angle.sin();
                amp * (2.0 * std::f64::consts::PI * t / period).sin()
            }
            Texture::Checker { period, amp } => {
                if ((x / period) + (y / period)) % 2 == 0 {
                    amp
                } else {
                    -amp
                }
            }
            Texture::Speckle { density, amp } => {
                if rng.next_f64() < density {
                    if rng.next_f64() < 0.5 {
                        amp
                    } else {
                        -amp
                    }
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fixed appearance bank. The first five entries form the default shapes
/// benchmark; `water` is never used by episode scenes of the flood kind.
pub fn appearance_bank() -> Vec<Appearance> {
    use Texture::*;
    vec![
        Appearance::new("ground", [0.62, 0.55, 0.42], Grain { amp: 0.05 }),
        Appearance::new("vegetation", [0.25, 0.52, 0.20], Speckle { density: 0.3, amp: 0.12 }),
        Appearance::new("water", [0.18, 0.32, 0.62], Stripes { period: 6.0, amp: 0.05, angle: 0.0 }),
        Appearance::new("roof", [0.72, 0.26, 0.22], Checker { period: 3, amp: 0.08 }),
        Appearance::new("pavement", [0.50, 0.50, 0.52], Stripes { period: 5.0, amp: 0.06, angle: 0.785 }),
        Appearance::new("sand", [0.86, 0.78, 0.55], Grain { amp: 0.03 }),
        Appearance::new("forest", [0.10, 0.30, 0.12], Speckle { density: 0.4, amp: 0.08 }),
        Appearance::new("rubble", [0.46, 0.38, 0.34], Grain { amp: 0.15 }),
        Appearance::new("snow", [0.92, 0.92, 0.94], Smooth),
        Appearance::new("clay", [0.62, 0.32, 0.16], Stripes { period: 4.0, amp: 0.07, angle: 1.571 }),
        Appearance::new("asphalt", [0.20, 0.20, 0.23], Grain { amp: 0.04 }),
        Appearance::new("moss", [0.46, 0.60, 0.30], Checker { period: 2, amp: 0.06 }),
        Appearance::new("tarp", [0.15, 0.55, 0.70], Smooth),
        Appearance::new("ash", [0.70, 0.68, 0.66], Speckle { density: 0.25, amp: 0.15 }),
        Appearance::new("mud", [0.38, 0.28, 0.18], Stripes { period: 7.0, amp: 0.04, angle: 0.4 }),
        Appearance::new("crop", [0.75, 0.70, 0.25], Stripes { period: 3.0, amp: 0.08, angle: 1.571 }),
    ]
}

/// `count` appearances with random textures, named `random-{i}`. Colours
/// come in families of three near-duplicates so that episodes see
/// look-alike distractors.
pub fn random_appearances(count: usize, seed: u64) -> Vec<Appearance> {
    let mut rng = SplitMix64::derive(seed, 0x5241_4e44);
    let mut base = [0.0; 3];
    (0..count)
        .map(|i| {
            if i % 3 == 0 {
                base = [rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)];
            }
            let color = base.map(|c| (c + rng.uniform(-0.12, 0.12)).clamp(0.02, 0.98));
            let texture = match rng.below(5) {
                0 => Texture::Smooth,
                1 => Texture::Grain {
                    amp: rng.uniform(0.02, 0.15),
                },
                2 => Texture::Stripes {
                    period: rng.uniform(3.0, 8.0),
                    amp: rng.uniform(0.03, 0.1),
                    angle: rng.uniform(0.0, std::f64::consts::PI),
                },
                3 => Texture::Checker {
                    period: 2 + rng.below_usize(3),
                    amp: rng.uniform(0.03, 0.1),
                },
                _ => Texture::Speckle {
                    density: rng.uniform(0.1, 0.4),
                    amp: rng.uniform(0.05, 0.15),
                },
            };
            Appearance {
                name: format!("random-{i}"),
                color,
                texture,
            }
        })
        .collect()
}

pub fn palette_for(appearances: &[Appearance]) -> LabelPalette {
    LabelPalette::new(
        appearances
            .iter()
            .enumerate()
            .map(|(i, a)| PaletteClass {
                id: i as u8,
                name: a.name.clone(),
                color: a.display_color(),
            })
            .collect(),
    )
    .expect("bank names are unique")
}

/// Ground-truth scene: image plus its dense class map.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageRaster,
    pub truth: SemanticRaster,
}

/// Renders `classes` through `appearances` with per-scene colour jitter and
/// additive Gaussian noise.
pub fn render(
    classes: &SemanticRaster,
    appearances: &[Appearance],
    jitter: f64,
    noise: f64,
    rng: &mut SplitMix64,
) -> ImageRaster {
    let tints: Vec<[f64; 3]> = appearances
        .iter()
        .map(|a| {
            let mut c = a.color;
            for v in &mut c {
                *v += rng.uniform(-jitter, jitter);
            }
            c
        })
        .collect();
    let (w, h) = classes.dims();
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let class = classes.get(x, y) as usize;
            let shade = appearances[class].shade(x, y, rng);
            for c in 0..3 {
                let v = tints[class][c] + shade + noise * rng.normal();
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageRaster::new(w, h, 3, data).expect("clamped render")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    /// Number of bank appearances used; class 0 is the background.
    pub classes: usize,
    /// Distinct foreground classes per scene.
    pub classes_per_scene: usize,
    /// Draw each scene's background class at random instead of using class 0.
    #[serde(default)]
    pub vary_background: bool,
    pub jitter: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            count: 20,
            classes: 5,
            classes_per_scene: 2,
            vary_background: false,
            jitter: 0.03,
            noise: 0.04,
            seed: 0,
        }
    }
}

pub fn shapes_palette(classes: usize) -> LabelPalette {
    palette_for(&appearance_bank()[..classes])
}

pub fn shapes_benchmark(config: &ShapesConfig) -> (LabelPalette, Vec<Scene>) {
    let bank = appearance_bank();
    assert!(config.classes >= 2 && config.classes <= bank.len(), "unsupported class count");
    shapes_with(&bank[..config.classes], config)
}

/// Shapes scenes over an arbitrary appearance list; `config.classes` is
/// ignored in favour of `appearances.len()`.
pub fn shapes_with(appearances: &[Appearance], config: &ShapesConfig) -> (LabelPalette, Vec<Scene>) {
    let config = &ShapesConfig {
        classes: appearances.len(),
        ..config.clone()
    };
    assert!(config.classes >= 2 && config.classes <= 255, "unsupported class count");
    let per_scene = config.classes_per_scene.clamp(1, config.classes - 1);
    let mut rng = SplitMix64::derive(config.seed, 0x5348_4150_4553);
    let scenes = (0..config.count)
        .map(|_| {
            let background = if config.vary_background {
                rng.below_usize(config.classes) as u8
            } else {
                0
            };
            let foreground: Vec<u8> = (0..config.classes as u8).filter(|&c| c != background).collect();
            let chosen = rng.sample_without_replacement(&foreground, per_scene);
            let (w, h) = (config.width, config.height);
            let mut truth = SemanticRaster::filled(w, h, background);
            let shapes = 3 + rng.below_usize(3);
            let scale = w.min(h) as f64;
            for s in 0..shapes {
                let class = chosen[s % chosen.len()];
                let sw = (scale * rng.uniform(0.15, 0.45)) as isize;
                let sh = (scale * rng.uniform(0.15, 0.45)) as isize;
                let cx = rng.below_usize(w) as isize;
                let cy = rng.below_usize(h) as isize;
                let ellipse = rng.next_f64() < 0.5;
                for y in (cy - sh / 2).max(0)..(cy + sh / 2).min(h as isize) {
                    for x in (cx - sw / 2).max(0)..(cx + sw / 2).min(w as isize) {
                        let inside = !ellipse || {
                            let dx = (x - cx) as f64 / (sw as f64 / 2.0);
                            let dy = (y - cy) as f64 / (sh as f64 / 2.0);
                            dx * dx + dy * dy <= 1.0
                        };
                        if inside {
                            truth.set(x as usize, y as usize, class);
                        }
                    }
                }
            }
            let image = render(&truth, appearances, config.jitter, config.noise, &mut rng);
            Scene { image, truth }
        })
        .collect();
    (palette_for(appearances), scenes)
}

/// Class names of the flood benchmark, in id order. `flooded` is absent from
/// the base palette and is added by few-shot segmentation.
pub const FLOOD_CLASSES: [&str; 4] = ["road", "grass", "building", "flooded"];

/// Rewards used to sample the benchmark's route demonstrations, one per
/// entry of [`FLOOD_CLASSES`].
pub const FLOOD_DEMO_REWARDS: [f64; 4] = [-0.2, -0.6, -2.0, -4.0];

/// Episode training set for few-shot heads: shapes scenes over random
/// appearances with varied backgrounds.
pub fn episode_scenes(count: usize, appearances: usize, seed: u64) -> (LabelPalette, Vec<Scene>) {
    shapes_with(
        &random_appearances(appearances, seed),
        &ShapesConfig {
            count,
            classes_per_scene: 3,
            vary_background: true,
            seed,
            ..ShapesConfig::default()
        },
    )
}

fn flood_appearances() -> Vec<Appearance> {
    let bank = appearance_bank();
    let pick = |name: &str| {
        let a = bank.iter().find(|a| a.name == name).expect("bank entry");
        Appearance {
            name: String::new(),
            ..a.clone()
        }
    };
    let mut out = vec![pick("pavement"), pick("vegetation"), pick("roof"), pick("water")];
    for (a, name) in out.iter_mut().zip(FLOOD_CLASSES) {
        a.name = name.to_string();
    }
    out
}

/// Palette with `road`, `grass` and `building`.
pub fn flood_base_palette() -> LabelPalette {
    palette_for(&flood_appearances()[..3])
}

/// Display colour for the `flooded` class.
pub fn flood_color() -> [u8; 3] {
    flood_appearances()[3].display_color()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloodConfig {
    pub size: usize,
    /// Fraction of non-flooded pixels that carry a label.
    pub label_fraction: f64,
    pub jitter: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for FloodConfig {
    fn default() -> Self {
        Self {
            size: 48,
            label_fraction: 0.1,
            jitter: 0.02,
            noise: 0.03,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloodBenchmark {
    /// Three-class palette without `flooded`.
    pub palette: LabelPalette,
    /// Town map whose ground truth includes class 3 (`flooded`).
    pub scene: Scene,
    /// Sparse labels on non-flooded pixels only.
    pub labels: SparseLabelRaster,
    /// A second flooded town, used as the few-shot support.
    pub support: Scene,
    /// Start and goal on the main road, on opposite sides of the flood.
    pub start: Cell,
    pub goal: Cell,
}

impl FloodBenchmark {
    pub fn support_mask(&self) -> BinaryMask {
        self.support.truth.mask_of(3)
    }
}

/// Town layout: grass, a main road along the middle row band with a loop
/// road above it, scattered buildings, and a flood over the main road.
fn flood_town(size: usize, flood_center: (f64, f64), radii: (f64, f64), rng: &mut SplitMix64) -> SemanticRaster {
    let n = size as isize;
    let mut truth = SemanticRaster::filled(size, size, 1);
    let mid = n / 2;
    let top = n / 6;
    let (left, right) = (n / 8, n - 1 - n / 8);
    let mut road = |x: isize, y: isize| {
        if (0..n).contains(&x) && (0..n).contains(&y) {
            truth.set(x as usize, y as usize, 0);
        }
    };
    for x in 0..n {
        for dy in -1..=1 {
            road(x, mid + dy);
        }
    }
    for x in left..=right {
        for dy in 0..2 {
            road(x, top + dy);
        }
    }
    for y in top..=mid {
        for dx in 0..2 {
            road(left + dx, y);
            road(right - dx, y);
        }
    }
    let mut placed = 0;
    let mut attempts = 0;
    while placed < size / 6 && attempts < 500 {
        attempts += 1;
        let (bw, bh) = (3 + rng.below_usize(4) as isize, 3 + rng.below_usize(4) as isize);
        let (x0, y0) = (rng.below_usize(size) as isize, rng.below_usize(size) as isize);
        let fits = (y0 - 1..y0 + bh + 1).all(|y| {
            (x0 - 1..x0 + bw + 1).all(|x| (0..n).contains(&x) && (0..n).contains(&y) && truth.get(x as usize, y as usize) == 1)
        });
        if fits {
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    truth.set(x as usize, y as usize, 2);
                }
            }
            placed += 1;
        }
    }
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 - flood_center.1) / radii.1;
            let dy = (y as f64 - flood_center.0) / radii.0;
            if dx * dx + dy * dy <= 1.0 {
                truth.set(x, y, 3);
            }
        }
    }
    truth
}

pub fn flood_benchmark(config: &FloodConfig) -> FloodBenchmark {
    assert!(config.size >= 24, "flood maps need at least 24x24 cells");
    let mut rng = SplitMix64::derive(config.seed, 0x464c_4f4f_44);
    let appearances = flood_appearances();
    let s = config.size as f64;
    let mid = (config.size / 2) as f64;
    let center = (mid + rng.uniform(-1.0, 1.0), mid + rng.uniform(-2.0, 2.0));
    let radii = (s * rng.uniform(0.14, 0.18), s * rng.uniform(0.16, 0.2));
    let truth = flood_town(config.size, center, radii, &mut rng);
    let image = render(&truth, &appearances, config.jitter, config.noise, &mut rng);

    let dry: Vec<usize> = (0..truth.data().len()).filter(|&i| truth.data()[i] != 3).collect();
    let keep = ((config.label_fraction * dry.len() as f64).round() as usize).clamp(1, dry.len());
    let mut chosen = rng.sample_without_replacement(&dry, keep);
    chosen.sort_unstable();
    let labels = truth.to_sparse().retain_indices(&chosen);

    let support_center = (s * rng.uniform(0.3, 0.7), s * rng.uniform(0.3, 0.7));
    let support_radii = (s * rng.uniform(0.12, 0.2), s * rng.uniform(0.12, 0.2));
    let support_truth = flood_town(config.size, support_center, support_radii, &mut rng);
    let support_image = render(&support_truth, &appearances, config.jitter, config.noise, &mut rng);

    let row = config.size / 2;
    FloodBenchmark {
        palette: palette_for(&appearances[..3]),
        scene: Scene { image, truth },
        labels,
        support: Scene {
            image: support_image,
            truth: support_truth,
        },
        start: (row, 1),
        goal: (row, config.size - 2),
    }
}
