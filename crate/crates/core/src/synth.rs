//! Seeded synthetic scenes for tests, benchmarks and calibration when no
//! recorded data is at hand: a ring-sampled ground plane plus a few boxy
//! objects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pcd_io::{Point, PointCloud};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub ground_points: usize,
    pub objects: usize,
    pub points_per_object: usize,
    /// Maximum ground distance from the sensor in meters.
    pub radius: f32,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            ground_points: 4000,
            objects: 8,
            points_per_object: 150,
            radius: 50.0,
        }
    }
}

pub fn synthetic_cloud(seed: u64, params: &SceneParams) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(params.ground_points + params.objects * params.points_per_object);
    for _ in 0..params.ground_points {
        // denser near the sensor, like a spinning scanner
        let r = 2.0 + (params.radius - 2.0) * rng.gen::<f32>().powi(2);
        let a = rng.gen_range(-std::f32::consts::PI..std::f32::consts::PI);
        let z = -1.8 + rng.gen_range(-0.05..0.05);
        points.push(Point::new(r * a.cos(), r * a.sin(), z, rng.gen_range(0.0..40.0)));
    }
    for _ in 0..params.objects {
        let r = rng.gen_range(5.0..params.radius * 0.8);
        let a = rng.gen_range(-std::f32::consts::PI..std::f32::consts::PI);
        let (cx, cy) = (r * a.cos(), r * a.sin());
        let (l, w, h) = (rng.gen_range(3.5..5.0), rng.gen_range(1.6..2.1), rng.gen_range(1.4..1.9));
        let yaw = rng.gen_range(-std::f32::consts::PI..std::f32::consts::PI);
        let (s, c) = yaw.sin_cos();
        let reflect = rng.gen_range(20.0..120.0);
        for _ in 0..params.points_per_object {
            let u = rng.gen_range(-0.5..0.5) * l;
            let v = rng.gen_range(-0.5..0.5) * w;
            let z = -1.8 + rng.gen_range(0.0..h);
            points.push(Point::new(cx + c * u - s * v, cy + s * u + c * v, z, reflect + rng.gen_range(-10.0..10.0)));
        }
    }
    PointCloud::from_points(points)
}
