use std::f64::consts::PI;

use deepicp_core::{Point, PointCloud, RigidTransform, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{BenchError, Result};

/// Layout and sampling parameters for a synthetic street-like scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    /// Side length of the square ground patch, meters.
    pub extent: f64,
    /// Ground samples per square meter.
    pub ground_density: f64,
    /// Samples per square meter on object surfaces.
    pub surface_density: f64,
    pub poles: usize,
    pub boxes: usize,
    pub trees: usize,
    /// Car-sized boxes that move between the two frames.
    pub dynamic_clusters: usize,
    /// Maximum horizontal displacement of a dynamic cluster, meters.
    pub dynamic_displacement: f64,
    /// Standard deviation of isotropic per-point noise, meters.
    pub jitter: f64,
    /// Maximum horizontal sensor displacement between frames, meters.
    pub viewpoint_translation: f64,
    /// Maximum yaw change between frames, degrees.
    pub viewpoint_yaw: f64,
    /// Maximum roll/pitch change between frames, degrees. Vertical
    /// displacement is drawn from a tenth of the horizontal range.
    pub viewpoint_tilt: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: 32.0,
            ground_density: 0.75,
            surface_density: 8.0,
            poles: 6,
            boxes: 5,
            trees: 4,
            dynamic_clusters: 2,
            dynamic_displacement: 1.5,
            jitter: 0.02,
            viewpoint_translation: 2.0,
            viewpoint_yaw: 5.0,
            viewpoint_tilt: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            self.ground_density,
            self.surface_density,
            self.dynamic_displacement,
            self.jitter,
            self.viewpoint_translation,
            self.viewpoint_yaw,
            self.viewpoint_tilt,
        ];
        if !(self.extent > 0.0) || non_negative.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(BenchError::Config(format!("invalid scene parameters: {self:?}")));
        }
        let objects = self.poles + self.boxes + self.trees + self.dynamic_clusters;
        if self.ground_density == 0.0 && (objects == 0 || self.surface_density == 0.0) {
            return Err(BenchError::Config("scene has no content".into()));
        }
        Ok(())
    }
}

/// A source/target pair with the transform mapping source coordinates into
/// the target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub source: PointCloud,
    pub target: PointCloud,
    pub ground_truth: RigidTransform,
    /// Marks source points sampled from clusters that move between frames.
    pub source_dynamic: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ground { half: f64 },
    Stripe { y: f64, half: f64 },
    Pole { center: [f64; 2], radius: f64, height: f64 },
    Cuboid { center: [f64; 2], half: [f64; 3], yaw: f64, intensity: f64 },
    Tree { center: [f64; 2], trunk: f64, crown: f64 },
}

struct Item {
    shape: Shape,
    dynamic: bool,
}

/// Builds a deterministic scene pair. Source and target are independent
/// samplings of the same static surfaces; dynamic clusters are displaced
/// before the target is sampled, and the target is expressed in the moved
/// sensor frame.
pub fn synth_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut layout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let items = layout(config, &mut layout_rng);
    let ground_truth = viewpoint(config, &mut layout_rng);
    let moved: Vec<Item> = items
        .iter()
        .map(|item| Item {
            shape: if item.dynamic {
                displace(item.shape, config.dynamic_displacement, &mut layout_rng)
            } else {
                item.shape
            },
            dynamic: item.dynamic,
        })
        .collect();

    let mut source_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut target_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
    let (source_points, source_dynamic) = sample_all(&items, config, &RigidTransform::identity(), &mut source_rng);
    let (target_points, _) = sample_all(&moved, config, &ground_truth, &mut target_rng);
    Ok(Scene {
        source: PointCloud::new(source_points)?,
        target: PointCloud::new(target_points)?,
        ground_truth,
        source_dynamic,
    })
}

/// `count` scenes with seeds `config.seed, config.seed + 1, ...`.
pub fn synth_scenes(config: &SceneConfig, count: usize) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| {
            synth_scene(&SceneConfig {
                seed: config.seed.wrapping_add(i),
                ..config.clone()
            })
        })
        .collect()
}

fn layout(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Item> {
    let half = config.extent / 2.0;
    let inner = half * 0.85;
    let spot = |rng: &mut ChaCha8Rng| [rng.gen_range(-inner..inner), rng.gen_range(-inner..inner)];
    let mut items = vec![Item {
        shape: Shape::Ground { half },
        dynamic: false,
    }];
    for _ in 0..2 {
        items.push(Item {
            shape: Shape::Stripe {
                y: rng.gen_range(-inner..inner),
                half,
            },
            dynamic: false,
        });
    }
    for _ in 0..config.poles {
        items.push(Item {
            shape: Shape::Pole {
                center: spot(rng),
                radius: rng.gen_range(0.1..0.2),
                height: rng.gen_range(3.0..6.0),
            },
            dynamic: false,
        });
    }
    for _ in 0..config.boxes {
        items.push(Item {
            shape: Shape::Cuboid {
                center: spot(rng),
                half: [rng.gen_range(0.4..1.5), rng.gen_range(0.4..1.5), rng.gen_range(0.5..1.25)],
                yaw: rng.gen_range(0.0..PI),
                intensity: rng.gen_range(0.4..0.7),
            },
            dynamic: false,
        });
    }
    for _ in 0..config.trees {
        items.push(Item {
            shape: Shape::Tree {
                center: spot(rng),
                trunk: rng.gen_range(1.5..2.5),
                crown: rng.gen_range(0.8..1.5),
            },
            dynamic: false,
        });
    }
    for _ in 0..config.dynamic_clusters {
        items.push(Item {
            shape: Shape::Cuboid {
                center: spot(rng),
                half: [2.0, 0.9, 0.75],
                yaw: rng.gen_range(0.0..PI),
                intensity: rng.gen_range(0.6..0.9),
            },
            dynamic: true,
        });
    }
    items
}

fn viewpoint(config: &SceneConfig, rng: &mut ChaCha8Rng) -> RigidTransform {
    let mut symmetric = |range: f64| if range > 0.0 { rng.gen_range(-range..=range) } else { 0.0 };
    let t = Vector3::new(
        symmetric(config.viewpoint_translation),
        symmetric(config.viewpoint_translation),
        symmetric(config.viewpoint_translation / 10.0),
    );
    let roll = symmetric(config.viewpoint_tilt).to_radians();
    let pitch = symmetric(config.viewpoint_tilt).to_radians();
    let yaw = symmetric(config.viewpoint_yaw).to_radians();
    RigidTransform::from_roll_pitch_yaw(t, roll, pitch, yaw)
}

fn displace(shape: Shape, range: f64, rng: &mut ChaCha8Rng) -> Shape {
    match shape {
        Shape::Cuboid {
            center,
            half,
            yaw,
            intensity,
        } if range > 0.0 => {
            let heading = rng.gen_range(0.0..2.0 * PI);
            let dist = rng.gen_range(0.0..=range);
            Shape::Cuboid {
                center: [center[0] + dist * heading.cos(), center[1] + dist * heading.sin()],
                half,
                yaw,
                intensity,
            }
        }
        other => other,
    }
}

fn sample_all(
    items: &[Item],
    config: &SceneConfig,
    frame: &RigidTransform,
    rng: &mut ChaCha8Rng,
) -> (Vec<Point>, Vec<bool>) {
    // A point at source-frame position x appears at frame(x).
    let noise = Normal::new(0.0, config.jitter.max(0.0)).expect("jitter validated non-negative");
    let mut points = Vec::new();
    let mut dynamic = Vec::new();
    for item in items {
        let before = points.len();
        sample_shape(&item.shape, config, rng, &mut points);
        dynamic.extend(std::iter::repeat_n(item.dynamic, points.len() - before));
    }
    for p in &mut points {
        let mut q = frame.apply_point(&p.position);
        if config.jitter > 0.0 {
            q += Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
        }
        p.position = q;
    }
    (points, dynamic)
}

fn count_for(area: f64, density: f64) -> usize {
    (area * density).round() as usize
}

fn sample_shape(shape: &Shape, config: &SceneConfig, rng: &mut ChaCha8Rng, out: &mut Vec<Point>) {
    match *shape {
        Shape::Ground { half } => {
            let n = count_for(4.0 * half * half, config.ground_density);
            for _ in 0..n {
                let (x, y) = (rng.gen_range(-half..half), rng.gen_range(-half..half));
                out.push(Point::new(x, y, 0.0, rng.gen_range(0.1..0.25)));
            }
        }
        Shape::Stripe { y, half } => {
            // Painted lane marking: bright, 0.15 m wide, 1.5 m dashes every 3 m.
            let per_dash = count_for(1.5 * 0.15, config.ground_density * 4.0);
            let dashes = (2.0 * half / 3.0).floor() as usize;
            for d in 0..dashes {
                let start = -half + 3.0 * d as f64;
                for _ in 0..per_dash {
                    let x = start + rng.gen_range(0.0..1.5);
                    out.push(Point::new(x, y + rng.gen_range(-0.075..0.075), 0.0, rng.gen_range(0.85..1.0)));
                }
            }
        }
        Shape::Pole { center, radius, height } => {
            let n = count_for(2.0 * PI * radius * height, config.surface_density * 2.0);
            for _ in 0..n {
                let a = rng.gen_range(0.0..2.0 * PI);
                let z = rng.gen_range(0.0..height);
                out.push(Point::new(
                    center[0] + radius * a.cos(),
                    center[1] + radius * a.sin(),
                    z,
                    rng.gen_range(0.75..0.9),
                ));
            }
        }
        Shape::Cuboid {
            center,
            half,
            yaw,
            intensity,
        } => {
            let [hx, hy, hz] = half;
            // Four walls and a roof, each chosen in proportion to its area.
            let faces = [
                4.0 * hy * hz,
                4.0 * hy * hz,
                4.0 * hx * hz,
                4.0 * hx * hz,
                4.0 * hx * hy,
            ];
            let total: f64 = faces.iter().sum();
            let n = count_for(total, config.surface_density);
            let (c, s) = (yaw.cos(), yaw.sin());
            for _ in 0..n {
                let mut pick = rng.gen_range(0.0..total);
                let mut face = 0;
                while face < 4 && pick >= faces[face] {
                    pick -= faces[face];
                    face += 1;
                }
                let u = rng.gen_range(-1.0..1.0);
                let v = rng.gen_range(-1.0..1.0);
                let (lx, ly, lz) = match face {
                    0 => (hx, u * hy, v * hz),
                    1 => (-hx, u * hy, v * hz),
                    2 => (u * hx, hy, v * hz),
                    3 => (u * hx, -hy, v * hz),
                    _ => (u * hx, v * hy, hz),
                };
                out.push(Point::new(
                    center[0] + c * lx - s * ly,
                    center[1] + s * lx + c * ly,
                    lz + hz,
                    (intensity + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0),
                ));
            }
        }
        Shape::Tree { center, trunk, crown } => {
            let radius = 0.15;
            let n = count_for(2.0 * PI * radius * trunk, config.surface_density * 2.0);
            for _ in 0..n {
                let a = rng.gen_range(0.0..2.0 * PI);
                out.push(Point::new(
                    center[0] + radius * a.cos(),
                    center[1] + radius * a.sin(),
                    rng.gen_range(0.0..trunk),
                    rng.gen_range(0.3..0.4),
                ));
            }
            let n = count_for(4.0 * PI * crown * crown, config.surface_density * 0.5);
            for _ in 0..n {
                // Uniform on the sphere via the cylinder projection.
                let z: f64 = rng.gen_range(-1.0..1.0);
                let a = rng.gen_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).sqrt();
                out.push(Point::new(
                    center[0] + crown * r * a.cos(),
                    center[1] + crown * r * a.sin(),
                    trunk + crown + crown * z,
                    rng.gen_range(0.2..0.35),
                ));
            }
        }
    }
}
