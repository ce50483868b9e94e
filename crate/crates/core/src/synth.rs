//! Deterministic synthetic driving worlds.
//!
//! Places sit on a circular loop; each carries its own cluster of boxes and
//! spheres in front of the vehicle. A frame is rendered by casting camera
//! rays against the landmarks and a flat ground, and LiDAR returns are cast
//! from the camera centre, so pixels and points agree exactly under the
//! shipped extrinsics.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{parse_numbers, read_calibration, write_calibration, CameraModel, ExtrinsicCalibration, Pose};
use crate::image::Image;
use crate::model::SceneFrame;

/// Sensor height above the ground (meters).
pub const SENSOR_HEIGHT: f64 = 1.6;
const SKY: [f64; 3] = [0.62, 0.74, 0.92];
const GROUND: [f64; 3] = [0.42, 0.42, 0.40];

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub n_places: usize,
    pub revisits: usize,
    /// Arc length between consecutive places (m).
    pub spacing: f64,
    pub jitter_pos: f64,
    /// Yaw jitter (rad).
    pub jitter_yaw: f64,
    pub landmarks_min: usize,
    pub landmarks_max: usize,
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    pub points_per_frame: usize,
    pub far_clip: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_places: 100,
            revisits: 2,
            spacing: 70.0,
            jitter_pos: 2.0,
            jitter_yaw: 3f64.to_radians(),
            landmarks_min: 6,
            landmarks_max: 10,
            height: 64,
            width: 96,
            focal: 60.0,
            points_per_frame: 512,
            far_clip: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Axis-aligned box with these half extents.
    Cuboid([f64; 3]),
    Sphere(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub shape: Shape,
    pub center: [f64; 3],
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Database,
    Query,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Database => "db",
            Role::Query => "query",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visit {
    pub id: u64,
    pub place: usize,
    pub pass: usize,
    pub role: Role,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    pub place_poses: Vec<Pose>,
    pub landmarks: Vec<Landmark>,
    /// Trajectory order: every place on pass 0, then every place on pass 1, ...
    pub visits: Vec<Visit>,
}

fn jittered(base: &Pose, cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Pose {
    if cfg.jitter_pos == 0.0 && cfg.jitter_yaw == 0.0 {
        return *base;
    }
    let r = cfg.jitter_pos * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..2.0 * PI);
    let dyaw = rng.random_range(-1.0..=1.0) * cfg.jitter_yaw;
    let [x, y, z] = base.position();
    let yaw = base.rotation()[(1, 0)].atan2(base.rotation()[(0, 0)]);
    Pose::from_yaw(yaw + dyaw, [x + r * a.cos(), y + r * a.sin(), z])
}

pub fn generate_world(seed: u64, config: WorldConfig) -> Result<World> {
    if config.n_places < 2 {
        return Err(Error::Config("a world needs at least 2 places".into()));
    }
    if config.revisits == 0 || config.landmarks_min == 0 || config.landmarks_min > config.landmarks_max {
        return Err(Error::Config("bad revisit or landmark counts".into()));
    }
    if config.revisits == 1 {
        log::warn!("world has a single pass: there will be no queries with positives");
    }
    let n = config.n_places;
    let radius = config.spacing / (2.0 * (PI / n as f64).sin());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_fov = (config.width as f64 / 2.0 / config.focal).atan();

    let mut place_poses = Vec::with_capacity(n);
    let mut landmarks = Vec::new();
    for i in 0..n {
        let theta = 2.0 * PI * i as f64 / n as f64;
        let yaw = theta + PI / 2.0;
        let pose = Pose::from_yaw(yaw, [radius * theta.cos(), radius * theta.sin(), SENSOR_HEIGHT]);
        let count = rng.random_range(config.landmarks_min..=config.landmarks_max);
        for _ in 0..count {
            let ahead = rng.random_range(8.0..40.0);
            let lateral = rng.random_range(-0.7..0.7) * ahead * half_fov.tan();
            let (shape, z) = if rng.random_bool(0.5) {
                let h = [rng.random_range(0.8..4.0), rng.random_range(0.8..4.0), rng.random_range(1.0..5.0)];
                (Shape::Cuboid(h), h[2])
            } else {
                let r = rng.random_range(0.8..3.5);
                (Shape::Sphere(r), r + rng.random_range(0.0..3.0))
            };
            let local = [ahead, lateral, z - SENSOR_HEIGHT];
            let center = pose.transform(&local);
            let albedo = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
            landmarks.push(Landmark { shape, center, albedo });
        }
        place_poses.push(pose);
    }

    let mut visits = Vec::with_capacity(n * config.revisits);
    for pass in 0..config.revisits {
        for (place, base) in place_poses.iter().enumerate() {
            visits.push(Visit {
                id: visits.len() as u64,
                place,
                pass,
                role: if pass == 0 { Role::Database } else { Role::Query },
                pose: jittered(base, &config, &mut rng),
            });
        }
    }
    Ok(World {
        seed,
        config,
        place_poses,
        landmarks,
        visits,
    })
}

/// Fixed camera ← LiDAR rotation: camera x = −y_lidar, y = −z_lidar, z = x_lidar.
pub fn default_calibration() -> ExtrinsicCalibration {
    let r = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    ExtrinsicCalibration {
        cam_from_lidar: Pose::new(r, Vector3::zeros()).expect("axis permutation is a rotation"),
    }
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    albedo: [f64; 3],
}

fn intersect(lm: &Landmark, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let c = Vector3::from(lm.center);
    match lm.shape {
        Shape::Sphere(r) => {
            let oc = o - c;
            let b = oc.dot(d);
            let disc = b * b - (oc.norm_squared() - r * r);
            if disc < 0.0 {
                return None;
            }
            let t = -b - disc.sqrt();
            (t > 1e-9).then(|| (t, (o + d * t - c) / r))
        }
        Shape::Cuboid(h) => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            let mut sign = 0.0;
            for k in 0..3 {
                let (lo, hi) = (c[k] - h[k], c[k] + h[k]);
                if d[k].abs() < 1e-12 {
                    if o[k] < lo || o[k] > hi {
                        return None;
                    }
                    continue;
                }
                let (a, b) = ((lo - o[k]) / d[k], (hi - o[k]) / d[k]);
                let (near, far) = if a < b { (a, b) } else { (b, a) };
                if near > t0 {
                    t0 = near;
                    axis = k;
                    sign = -d[k].signum();
                }
                t1 = t1.min(far);
            }
            if t0 > t1 || t0 <= 1e-9 {
                return None;
            }
            let mut n = Vector3::zeros();
            n[axis] = sign;
            Some((t0, n))
        }
    }
}

/// Landmarks within reach of a pose, precomputed once per frame.
struct Scene<'a> {
    landmarks: Vec<&'a Landmark>,
    far: f64,
}

impl<'a> Scene<'a> {
    fn new(world: &'a World, pose: &Pose) -> Self {
        let p = Vector3::from(pose.position());
        let far = world.config.far_clip;
        let landmarks = world
            .landmarks
            .iter()
            .filter(|l| (Vector3::from(l.center) - p).norm() < far + 10.0)
            .collect();
        Scene { landmarks, far }
    }

    /// Nearest hit along a unit world-frame ray within the far clip.
    fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if d.z < -1e-12 {
            let t = -o.z / d.z;
            if t <= self.far {
                best = Some(Hit {
                    t,
                    normal: Vector3::z(),
                    albedo: GROUND,
                });
            }
        }
        for lm in &self.landmarks {
            if let Some((t, normal)) = intersect(lm, o, d) {
                if t <= self.far && best.as_ref().is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        normal,
                        albedo: lm.albedo,
                    });
                }
            }
        }
        best
    }
}

fn shade(hit: &Hit, far: f64) -> [f64; 3] {
    let light = Vector3::new(0.4, 0.3, 0.866).normalize();
    let lambert = 0.55 + 0.45 * hit.normal.dot(&light).max(0.0);
    let fog = 1.0 - 0.5 * (hit.t / far);
    hit.albedo.map(|a| a * lambert * fog)
}

fn frame_seed(world_seed: u64, pose: &Pose) -> u64 {
    let mut h = Sha256::new();
    h.update(world_seed.to_le_bytes());
    for v in pose.to_array() {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn camera_model(cfg: &WorldConfig) -> Result<CameraModel> {
    CameraModel::new(
        cfg.focal,
        cfg.focal,
        cfg.width as f64 / 2.0,
        cfg.height as f64 / 2.0,
        cfg.height,
        cfg.width,
    )
}

/// Renders the camera image and LiDAR sweep seen from a vehicle pose.
pub fn render_frame(world: &World, pose: &Pose) -> Result<SceneFrame> {
    let cfg = &world.config;
    let cam = camera_model(cfg)?;
    let cal = default_calibration();
    let scene = Scene::new(world, pose);
    let origin = Vector3::from(pose.position());
    // world ← camera rotation
    let rot = pose.rotation() * cal.cam_from_lidar.rotation().transpose();
    let ray = |u: f64, v: f64| -> Vector3<f64> {
        (rot * Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0)).normalize()
    };

    let mut data = Vec::with_capacity(cfg.height * cfg.width * 3);
    for i in 0..cfg.height {
        for j in 0..cfg.width {
            let d = ray(j as f64 + 0.5, i as f64 + 0.5);
            match scene.cast(&origin, &d) {
                Some(hit) => data.extend(shade(&hit, scene.far)),
                None => data.extend(SKY),
            }
        }
    }
    let mut image = Image::new(cfg.height, cfg.width, 3, data)?;
    image.quantize_u8();

    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(world.seed, pose));
    let vehicle_from_world = pose.inverse();
    let mut points = Vec::with_capacity(cfg.points_per_frame);
    let mut ground = false;
    let mut attempts = 0;
    while points.len() < cfg.points_per_frame && attempts < 50 * cfg.points_per_frame {
        attempts += 1;
        let u = rng.random_range(0.0..cfg.width as f64);
        let v = rng.random_range(0.0..cfg.height as f64);
        let d = ray(u, v);
        if let Some(hit) = scene.cast(&origin, &d) {
            ground |= hit.albedo == GROUND;
            let p = origin + d * hit.t;
            points.push(vehicle_from_world.transform(&[p.x, p.y, p.z]));
        }
    }
    if !ground {
        let d = ray(cfg.width as f64 / 2.0, cfg.height as f64 - 0.5);
        let t = -origin.z / d.z;
        let p = origin + d * t;
        points.push(vehicle_from_world.transform(&[p.x, p.y, p.z]));
    }

    Ok(SceneFrame {
        image,
        points,
        pose: *pose,
        cam,
        cal: Some(cal),
    })
}

/// In-memory dataset: frames plus their manifest rows.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub frames: Vec<SceneFrame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: u64,
    pub role: Role,
    pub place: usize,
    pub position: [f64; 3],
}

impl Dataset {
    pub fn render(world: &World) -> Result<Self> {
        let mut entries = Vec::with_capacity(world.visits.len());
        let mut frames = Vec::with_capacity(world.visits.len());
        for v in &world.visits {
            frames.push(render_frame(world, &v.pose)?);
            entries.push(ManifestEntry {
                id: v.id,
                role: v.role,
                place: v.place,
                position: v.pose.position(),
            });
        }
        Ok(Dataset { entries, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].role == role).collect()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.entries.iter().map(|e| e.position).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from("id,role,place,x,y,z\n");
        for (e, f) in self.entries.iter().zip(&self.frames) {
            let [x, y, z] = e.position;
            writeln!(manifest, "{},{},{},{x},{y},{z}", e.id, e.role.name(), e.place).unwrap();
            let fdir = frame_dir(dir, e.id);
            std::fs::create_dir_all(&fdir).map_err(|err| Error::io(&fdir, err))?;
            f.image.write_ppm(&fdir.join("image.ppm"))?;
            let mut pts = String::with_capacity(f.points.len() * 48);
            for p in &f.points {
                writeln!(pts, "{} {} {}", p[0], p[1], p[2]).unwrap();
            }
            write_file(&fdir.join("points.xyz"), &pts)?;
            let pose: Vec<String> = f.pose.to_array().iter().map(|v| v.to_string()).collect();
            write_file(&fdir.join("pose.txt"), &(pose.join(" ") + "\n"))?;
            let cal = f.cal.unwrap_or_else(ExtrinsicCalibration::identity);
            write_calibration(&fdir.join("calib.txt"), &cal, &f.cam)?;
        }
        write_file(&dir.join("manifest.csv"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.csv");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        let mut frames = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Data(format!("{}:{}: malformed manifest row {line:?}", path.display(), lineno + 1));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(bad());
            }
            let id: u64 = cols[0].parse().map_err(|_| bad())?;
            let role = match cols[1] {
                "db" => Role::Database,
                "query" => Role::Query,
                _ => return Err(bad()),
            };
            let place = cols[2].parse().map_err(|_| bad())?;
            let mut position = [0.0; 3];
            for k in 0..3 {
                position[k] = cols[3 + k].parse().map_err(|_| bad())?;
            }
            entries.push(ManifestEntry { id, role, place, position });
            frames.push(load_frame(&frame_dir(dir, id))?);
        }
        Ok(Dataset { entries, frames })
    }
}

fn frame_dir(root: &Path, id: u64) -> PathBuf {
    root.join(format!("{id:06}"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_frame(dir: &Path) -> Result<SceneFrame> {
    let image = Image::read_ppm(&dir.join("image.ppm"))?;
    let nums = parse_numbers(&read_text(&dir.join("points.xyz"))?)?;
    if nums.len() % 3 != 0 || nums.is_empty() {
        return Err(Error::Data(format!("{}: point file is not n×3", dir.display())));
    }
    let points = nums.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let pose = Pose::from_array(&parse_numbers(&read_text(&dir.join("pose.txt"))?)?)?;
    let (cal, cam) = read_calibration(&dir.join("calib.txt"))?;
    let frame = SceneFrame {
        image,
        points,
        pose,
        cam,
        cal: Some(cal),
    };
    frame.validate()?;
    Ok(frame)
}
