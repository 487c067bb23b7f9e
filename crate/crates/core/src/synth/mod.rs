//! Procedural driving-like scenes with exact depth and camera motion.
//!
//! A scene is a ground plane below the camera, a fronto-parallel back wall
//! and a few upright boxes standing on the ground, each carrying its own
//! procedural texture defined in surface coordinates. Frames are rendered
//! by casting rays from each camera position, so every view is consistent
//! with the same geometry. One box may move sideways on its own, breaking
//! the static-world assumption inside its footprint.
//!
//! World coordinates coincide with the frame-0 camera: x right, y down,
//! z forward, ground at `y = camera_height`.

mod io;

pub use io::{
    dataset_hash, read_pfm, read_pgm, read_ppm, write_pfm, write_pgm, write_ppm, Dataset, DatasetManifest, PoseRecord,
    PosesFile, Split, TripletRecord, DATASET_FORMAT_VERSION, RUN_MANIFEST_NAME,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diff::Array;
use crate::error::{Error, Result};
use crate::geometry::{pose_to_transform, Intrinsics, Pose6DoF, Z_MIN};

/// Fraction of target pixels that must project inside every source frame.
pub const MIN_VISIBILITY: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub camera_height: f64,
    /// Every rendered depth must fall inside this range.
    pub depth_range: (f64, f64),
    pub wall_depth: (f64, f64),
    pub box_depth: (f64, f64),
    pub max_boxes: usize,
    /// Forward camera travel per frame.
    pub speed: (f64, f64),
    /// Maximum absolute sideways camera travel per frame.
    pub lateral_speed: f64,
    /// Maximum absolute yaw change per frame, radians.
    pub yaw_rate: f64,
    /// Multiplier on all texture frequencies.
    pub texture_frequency: f64,
    pub moving_object_probability: f64,
    /// Sideways speed of the moving box per frame.
    pub object_speed: (f64, f64),
    /// Rays per pixel along each axis.
    pub supersample: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 48,
            focal: 48.0,
            camera_height: 1.5,
            depth_range: (1.0, 30.0),
            wall_depth: (6.0, 10.0),
            box_depth: (3.0, 10.0),
            max_boxes: 3,
            speed: (0.2, 0.4),
            lateral_speed: 0.2,
            yaw_rate: 0.02,
            texture_frequency: 1.0,
            moving_object_probability: 0.25,
            object_speed: (0.3, 0.6),
            supersample: 3,
        }
    }
}

fn ordered(name: &str, r: (f64, f64)) -> Result<()> {
    if r.0.is_finite() && r.1.is_finite() && r.0 <= r.1 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be an ordered finite range, got {r:?}")))
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 || self.supersample == 0 {
            return Err(Error::Config("resolution and supersample must be positive".into()));
        }
        if !(self.focal > 0.0 && self.camera_height > 0.0) {
            return Err(Error::Config("focal and camera_height must be positive".into()));
        }
        for (name, r) in [
            ("depth_range", self.depth_range),
            ("wall_depth", self.wall_depth),
            ("box_depth", self.box_depth),
            ("speed", self.speed),
            ("object_speed", self.object_speed),
        ] {
            ordered(name, r)?;
        }
        if self.depth_range.0 <= 0.0 {
            return Err(Error::Config("depth_range must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.moving_object_probability) {
            return Err(Error::Config("moving_object_probability must lie in [0, 1]".into()));
        }
        if self.yaw_rate < 0.0 || self.lateral_speed < 0.0 || self.texture_frequency <= 0.0 {
            return Err(Error::Config(
                "yaw_rate and lateral_speed must be >= 0 and texture_frequency > 0".into(),
            ));
        }
        let lo = self.depth_range.0;
        let near_ground = self.focal * self.camera_height / ((self.height as f64 - 1.0) / 2.0);
        if near_ground < lo {
            return Err(Error::Config(format!(
                "nearest ground depth {near_ground:.3} lies below depth_range minimum {lo}"
            )));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::universal(self.width, self.height, self.focal)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

/// Per-frame camera motion: forward travel, sideways travel and yaw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CameraMotion {
    pub forward: f64,
    pub lateral: f64,
    pub yaw: f64,
}

impl CameraMotion {
    /// Camera-to-world rotation and centre of the camera at frame `t`.
    fn camera(&self, t: f64) -> ([f64; 9], [f64; 3]) {
        let (s, c) = (t * self.yaw).sin_cos();
        ([c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c], [t * self.lateral, 0.0, t * self.forward])
    }

    /// Motion taking frame-0 camera coordinates to frame-`t` coordinates.
    pub fn pose_to(&self, t: f64) -> Pose6DoF {
        let (r, c) = self.camera(t);
        // inverse of (R, c): (R^T, -R^T c)
        let mut tr = [0.0; 3];
        for (i, v) in tr.iter_mut().enumerate() {
            *v = -(0..3).map(|k| r[k * 3 + i] * c[k]).sum::<f64>();
        }
        Pose6DoF {
            axis_angle: [0.0, -t * self.yaw, 0.0],
            translation: tr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Wave {
    k: [f64; 2],
    phase: f64,
    amp: [f64; 3],
}

/// Smooth band-limited texture over surface coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    base: [f64; 3],
    waves: Vec<Wave>,
    checker_period: [f64; 2],
    checker_amp: [f64; 3],
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, wavelength: (f64, f64), freq_scale: f64, contrast: f64) -> Self {
        let base = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
        let waves = (0..5)
            .map(|_| {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let lambda = rng.gen_range(wavelength.0..wavelength.1) / freq_scale;
                let a = contrast * rng.gen_range(0.02..0.06);
                Wave {
                    k: [theta.cos() / lambda, theta.sin() / lambda],
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    amp: [a * rng.gen_range(0.5..1.0), a * rng.gen_range(0.5..1.0), a * rng.gen_range(0.5..1.0)],
                }
            })
            .collect();
        let period = rng.gen_range(wavelength.0..wavelength.1) * 1.5 / freq_scale;
        let c = contrast * rng.gen_range(0.05..0.1);
        Texture {
            base,
            waves,
            checker_period: [period, period * rng.gen_range(0.7..1.4)],
            checker_amp: [c, c * rng.gen_range(0.6..1.0), c * rng.gen_range(0.6..1.0)],
        }
    }

    /// Colour at surface point `(u, v)` seen with footprint `(fu, fv)`;
    /// each frequency component is attenuated by a Gaussian prefilter of
    /// the footprint so that distant texture does not alias.
    fn eval(&self, u: f64, v: f64, fu: f64, fv: f64) -> [f64; 3] {
        use std::f64::consts::{PI, TAU};
        let atten = |ku: f64, kv: f64| (-2.0 * PI * PI * ((ku * fu).powi(2) + (kv * fv).powi(2))).exp();
        let mut c = self.base;
        for w in &self.waves {
            let a = atten(w.k[0], w.k[1]);
            if a < 1e-6 {
                continue;
            }
            let s = (TAU * (w.k[0] * u + w.k[1] * v) + w.phase).cos() * a;
            for ch in 0..3 {
                c[ch] += w.amp[ch] * s;
            }
        }
        let (pu, pv) = (self.checker_period[0], self.checker_period[1]);
        let a = atten(1.0 / pu, 1.0 / pv);
        if a > 1e-6 {
            let q = (2.0 * (TAU * u / pu).sin()).tanh() * (2.0 * (TAU * v / pv).sin()).tanh() * a;
            for ch in 0..3 {
                c[ch] += self.checker_amp[ch] * q;
            }
        }
        c.map(|x| x.clamp(0.0, 1.0))
    }
}

/// Upright textured rectangle standing on the ground, facing the camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub center_x: f64,
    pub half_width: f64,
    pub height: f64,
    pub depth: f64,
    /// Sideways motion per frame; zero for static boxes.
    pub velocity: f64,
    texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub config: SceneConfig,
    pub wall_depth: f64,
    pub boxes: Vec<SceneBox>,
    pub motion: CameraMotion,
    ground: Texture,
    wall: Texture,
}

impl Scene {
    pub fn is_static(&self) -> bool {
        self.boxes.iter().all(|b| b.velocity == 0.0)
    }

    pub fn moving_box(&self) -> Option<usize> {
        self.boxes.iter().position(|b| b.velocity != 0.0)
    }
}

/// Build a scene deterministically from `seed`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = config.depth_range;
    // wall and box depths are clamped into the configured depth range
    let clip = |r: (f64, f64)| (r.0.clamp(lo, hi), r.1.clamp(lo, hi));
    let wall_range = clip(config.wall_depth);
    let wall_depth = rng.gen_range(wall_range.0..=wall_range.1);
    let fs = config.texture_frequency;
    let ground = Texture::random(&mut rng, (0.6, 1.8), fs, 1.0);
    let wall = Texture::random(&mut rng, (1.5, 4.0), fs, 1.2);

    let box_range = clip(config.box_depth);
    let box_range = (box_range.0.min(wall_depth), box_range.1.min(wall_depth - 0.5).max(box_range.0.min(wall_depth)));
    let n_boxes = if config.max_boxes == 0 {
        0
    } else {
        rng.gen_range(1..=config.max_boxes)
    };
    let mut boxes = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let depth = rng.gen_range(box_range.0..=box_range.1);
        // keep boxes roughly in view: |x| within 70% of the half field of view
        let half_view = depth * (config.width as f64 / 2.0) / config.focal;
        let center_x = rng.gen_range(-0.7..0.7) * half_view;
        let half_width = rng.gen_range(0.15..0.35) * half_view;
        let height = rng.gen_range(0.8..2.4);
        let texture = Texture::random(&mut rng, (0.3, 0.9), fs, 1.5);
        boxes.push(SceneBox {
            center_x,
            half_width,
            height,
            depth,
            velocity: 0.0,
            texture,
        });
    }
    let motion = CameraMotion {
        forward: rng.gen_range(config.speed.0..=config.speed.1),
        lateral: rng.gen_range(-1.0..1.0) * config.lateral_speed,
        yaw: rng.gen_range(-1.0..1.0) * config.yaw_rate,
    };
    let moving: f64 = rng.gen();
    if !boxes.is_empty() && moving < config.moving_object_probability {
        // the nearest box moves, so its footprint is large
        let idx = (0..boxes.len())
            .min_by(|&a, &b| boxes[a].depth.total_cmp(&boxes[b].depth))
            .expect("nonempty");
        let speed = rng.gen_range(config.object_speed.0..=config.object_speed.1);
        boxes[idx].velocity = if rng.gen::<bool>() { speed } else { -speed };
    }
    Ok(Scene {
        seed,
        config: config.clone(),
        wall_depth,
        boxes,
        motion,
        ground,
        wall,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Hit {
    Ground,
    Wall,
    Box(usize),
}

/// Nearest intersection of a world ray with the scene at time `t`:
/// `(kind, ray parameter, world point)`.
fn intersect(scene: &Scene, origin: [f64; 3], dir: [f64; 3], t: f64) -> Option<(Hit, f64, [f64; 3])> {
    let at = |s: f64| [origin[0] + s * dir[0], origin[1] + s * dir[1], origin[2] + s * dir[2]];
    let mut best: Option<(Hit, f64)> = None;
    let mut consider = |hit: Hit, s: f64| {
        if s > 1e-9 && best.is_none_or(|(_, b)| s < b) {
            best = Some((hit, s));
        }
    };
    let h = scene.config.camera_height;
    if dir[1] > 0.0 {
        consider(Hit::Ground, (h - origin[1]) / dir[1]);
    }
    if dir[2] > 0.0 {
        consider(Hit::Wall, (scene.wall_depth - origin[2]) / dir[2]);
        for (i, b) in scene.boxes.iter().enumerate() {
            let s = (b.depth - origin[2]) / dir[2];
            let p = at(s);
            let cx = b.center_x + t * b.velocity;
            if (p[0] - cx).abs() <= b.half_width && p[1] <= h && p[1] >= h - b.height {
                consider(Hit::Box(i), s);
            }
        }
    }
    best.map(|(hit, s)| (hit, s, at(s)))
}

fn shade(scene: &Scene, hit: Hit, p: [f64; 3], cam_z: f64, t: f64, pixel_angle: f64) -> [f64; 3] {
    // world-space footprint of one sub-pixel ray, halved for the prefilter
    let fp = 0.5 * pixel_angle * cam_z;
    match hit {
        Hit::Ground => {
            let rel = scene.config.camera_height.max(1e-6);
            scene.ground.eval(p[0], p[2], fp, fp * cam_z / rel)
        }
        Hit::Wall => scene.wall.eval(p[0], p[1], fp, fp),
        Hit::Box(i) => {
            let b = &scene.boxes[i];
            b.texture.eval(p[0] - (b.center_x + t * b.velocity), p[1], fp, fp)
        }
    }
}

/// Three consecutive frames with optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTriplet {
    /// Frames at t = -1, 0, 1, each `[1, 3, H, W]` in [0, 1].
    pub frames: [Array; 3],
    /// `[1, 1, H, W]` z-depth of frame 0.
    pub depth: Option<Array>,
    /// Motions from frame 0 to frames -1 and 1.
    pub poses: Option<[Pose6DoF; 2]>,
    pub intrinsics: Intrinsics,
    /// `[1, 1, H, W]`, 1.0 where frame 0 sees the moving box.
    pub object_mask: Option<Array>,
}

impl FrameTriplet {
    pub fn target(&self) -> &Array {
        &self.frames[1]
    }

    pub fn sources(&self) -> [&Array; 2] {
        [&self.frames[0], &self.frames[2]]
    }
}

/// Fraction of frame-0 pixels whose true 3-D point projects inside the
/// frame reached by `pose`.
pub fn visibility(depth: &Array, k: &Intrinsics, pose: &Pose6DoF) -> f64 {
    let tr = pose_to_transform(pose);
    let (h, w) = (k.height, k.width);
    let mut seen = 0usize;
    for v in 0..h {
        for u in 0..w {
            let z = depth.data[v * w + u];
            let p = [(u as f64 - k.cx) / k.fx * z, (v as f64 - k.cy) / k.fy * z, z];
            let q = tr.apply(p);
            if q[2] <= Z_MIN {
                continue;
            }
            let x = k.fx * q[0] / q[2] + k.cx;
            let y = k.fy * q[1] / q[2] + k.cy;
            if x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64 {
                seen += 1;
            }
        }
    }
    seen as f64 / (h * w) as f64
}

/// Render frames -1, 0, 1 of `scene` under `motion`.
pub fn render_triplet(scene: &Scene, motion: &CameraMotion) -> Result<FrameTriplet> {
    let cfg = &scene.config;
    let k = cfg.intrinsics()?;
    let (h, w, ss) = (cfg.height, cfg.width, cfg.supersample);
    let pixel_angle = 1.0 / (cfg.focal * ss as f64);
    let mut frames: Vec<Array> = Vec::with_capacity(3);
    let mut depth = vec![0.0; h * w];
    let mut mask = vec![0.0; h * w];
    let moving = scene.moving_box();
    for t in [-1.0, 0.0, 1.0] {
        let (r, c) = motion.camera(t);
        let mut img = vec![0.0; 3 * h * w];
        for v in 0..h {
            for u in 0..w {
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let du = u as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5;
                        let dv = v as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5;
                        let d = [(du - k.cx) / k.fx, (dv - k.cy) / k.fy, 1.0];
                        let dw = [
                            r[0] * d[0] + r[1] * d[1] + r[2] * d[2],
                            r[3] * d[0] + r[4] * d[1] + r[5] * d[2],
                            r[6] * d[0] + r[7] * d[1] + r[8] * d[2],
                        ];
                        let (hit, s, p) = intersect(scene, c, dw, t).ok_or_else(|| {
                            Error::Precondition(format!("ray at pixel ({u}, {v}) misses the scene"))
                        })?;
                        let col = shade(scene, hit, p, s, t, pixel_angle);
                        for ch in 0..3 {
                            acc[ch] += col[ch];
                        }
                    }
                }
                let n = (ss * ss) as f64;
                for ch in 0..3 {
                    img[ch * h * w + v * w + u] = acc[ch] / n;
                }
                if t == 0.0 {
                    let d = [(u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0];
                    let (hit, s, _) = intersect(scene, [0.0; 3], d, 0.0)
                        .ok_or_else(|| Error::Precondition(format!("ray at pixel ({u}, {v}) misses the scene")))?;
                    // d has unit z, so the ray parameter is the z-depth
                    depth[v * w + u] = s.clamp(cfg.depth_range.0, cfg.depth_range.1);
                    if moving.is_some_and(|m| hit == Hit::Box(m)) {
                        mask[v * w + u] = 1.0;
                    }
                }
            }
        }
        frames.push(Array::new(&[1, 3, h, w], img)?);
    }
    let depth = Array::new(&[1, 1, h, w], depth)?;
    let poses = [motion.pose_to(-1.0), motion.pose_to(1.0)];
    for (name, p) in ["frame -1", "frame 1"].iter().zip(&poses) {
        let vis = visibility(&depth, &k, p);
        if vis < MIN_VISIBILITY {
            return Err(Error::Precondition(format!(
                "only {:.1}% of target pixels stay visible in {name}; use smaller camera motion",
                vis * 100.0
            )));
        }
    }
    let mut it = frames.into_iter();
    let frames = [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
    Ok(FrameTriplet {
        frames,
        depth: Some(depth),
        poses: Some(poses),
        intrinsics: k,
        object_mask: moving.map(|_| Array { shape: vec![1, 1, h, w], data: mask }),
    })
}

/// Generate and render the scene for `seed` with its own sampled motion.
pub fn synthesize(seed: u64, config: &SceneConfig) -> Result<FrameTriplet> {
    let scene = generate_scene(seed, config)?;
    render_triplet(&scene, &scene.motion)
}

/// Per-triplet seed derived from a master seed, split name and index.
pub fn triplet_seed(master: u64, split: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(split.as_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig {
            width: 32,
            height: 24,
            focal: 24.0,
            supersample: 2,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(9, &small()).unwrap();
        let b = generate_scene(9, &small()).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(10, &small()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_probability_is_static() {
        let cfg = SceneConfig {
            moving_object_probability: 0.0,
            ..small()
        };
        for s in 0..20 {
            assert!(generate_scene(s, &cfg).unwrap().is_static());
        }
    }

    #[test]
    fn zero_motion_identical_frames() {
        let cfg = SceneConfig {
            moving_object_probability: 0.0,
            ..small()
        };
        let scene = generate_scene(3, &cfg).unwrap();
        let t = render_triplet(&scene, &CameraMotion::default()).unwrap();
        assert_eq!(t.frames[0], t.frames[1]);
        assert_eq!(t.frames[1], t.frames[2]);
    }

    #[test]
    fn depth_respects_range() {
        let cfg = SceneConfig {
            depth_range: (2.0, 10.0),
            wall_depth: (12.0, 20.0),
            speed: (0.1, 0.2),
            ..small()
        };
        for s in 0..5 {
            let t = synthesize(s, &cfg).unwrap();
            let d = t.depth.unwrap();
            assert!(d.data.iter().all(|&z| (2.0..=10.0).contains(&z)));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = SceneConfig {
            depth_range: (5.0, 2.0),
            ..small()
        };
        assert!(matches!(generate_scene(0, &bad), Err(Error::Config(_))));
        let bad = SceneConfig {
            moving_object_probability: 1.5,
            ..small()
        };
        assert!(generate_scene(0, &bad).is_err());
    }

    #[test]
    fn large_motion_reports_visibility() {
        let scene = generate_scene(1, &small()).unwrap();
        let fast = CameraMotion {
            forward: 2.5,
            ..CameraMotion::default()
        };
        let err = render_triplet(&scene, &fast).unwrap_err();
        assert!(err.to_string().contains("smaller camera motion"), "{err}");
    }

    #[test]
    fn pose_matches_camera_motion() {
        let m = CameraMotion {
            forward: 0.3,
            lateral: 0.02,
            yaw: 0.01,
        };
        let p = m.pose_to(1.0);
        let (r, c) = m.camera(1.0);
        // the camera centre maps to the origin of frame 1
        let q = pose_to_transform(&p).apply(c);
        assert!(q.iter().all(|v| v.abs() < 1e-12));
        // a world direction maps through R^T
        let tr = pose_to_transform(&p);
        let x = tr.apply([c[0] + r[2], c[1] + r[5], c[2] + r[8]]);
        assert!((x[2] - 1.0).abs() < 1e-12 && x[0].abs() < 1e-12);
    }
}
