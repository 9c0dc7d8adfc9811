//! Procedural stick-figure renderer.
//!
//! Each figure is a jointed skeleton with a large-scale body, two small
//! fingertip clusters at the wrists, a tight cluster of face points inside
//! the head disk and toe points at the ankles. Left limbs are drawn brighter
//! than right limbs so the two sides are distinguishable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simcc::{KeypointSet, PartGroup, VIS_OCCLUDED, VIS_UNLABELED, VIS_VISIBLE};

pub const MAX_BODY: usize = 13;
const LABEL_DROP_STREAM: u64 = 3;
pub const MAX_FOOT: usize = 6;
pub const MAX_FACE: usize = 8;
pub const MAX_PER_HAND: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub num_samples: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_num_body")]
    pub num_body: usize,
    #[serde(default = "default_num_per_hand")]
    pub num_per_hand: usize,
    #[serde(default = "default_num_face")]
    pub num_face: usize,
    #[serde(default = "default_num_foot")]
    pub num_foot: usize,
    #[serde(default = "default_occlusion_rate")]
    pub occlusion_rate: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Chance that an in-frame keypoint's annotation is withheld (`v = 0`),
    /// as in partially annotated whole-body data.
    #[serde(default)]
    pub label_drop_rate: f64,
    pub seed: u64,
}

fn default_image_size() -> usize {
    64
}
fn default_num_body() -> usize {
    9
}
fn default_num_per_hand() -> usize {
    4
}
fn default_num_face() -> usize {
    4
}
fn default_num_foot() -> usize {
    2
}
fn default_occlusion_rate() -> f64 {
    0.15
}
fn default_noise_std() -> f64 {
    0.03
}

impl GenConfig {
    pub fn new(num_samples: usize, seed: u64) -> Self {
        Self {
            num_samples,
            image_size: default_image_size(),
            num_body: default_num_body(),
            num_per_hand: default_num_per_hand(),
            num_face: default_num_face(),
            num_foot: default_num_foot(),
            occlusion_rate: default_occlusion_rate(),
            noise_std: default_noise_std(),
            label_drop_rate: 0.0,
            seed,
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.num_body + 2 * self.num_per_hand + self.num_face + self.num_foot
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(3..=MAX_BODY).contains(&self.num_body) {
            return bad(format!("num_body must be in 3..={MAX_BODY}, got {}", self.num_body));
        }
        if self.num_per_hand > MAX_PER_HAND || self.num_face > MAX_FACE || self.num_foot > MAX_FOOT {
            return bad(format!(
                "at most {MAX_PER_HAND} per hand, {MAX_FACE} face and {MAX_FOOT} foot keypoints"
            ));
        }
        if self.image_size < 16 {
            return bad(format!("image_size must be >= 16, got {}", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad(format!("occlusion_rate must be in [0, 1], got {}", self.occlusion_rate));
        }
        if !(0.0..=1.0).contains(&self.label_drop_rate) {
            return bad(format!(
                "label_drop_rate must be in [0, 1], got {}",
                self.label_drop_rate
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        Ok(())
    }

    /// Part group of every keypoint, in keypoint order.
    pub fn part_groups(&self) -> Vec<PartGroup> {
        let mut g = vec![PartGroup::Body; self.num_body];
        g.extend(std::iter::repeat_n(PartGroup::Foot, self.num_foot));
        g.extend(std::iter::repeat_n(PartGroup::Face, self.num_face));
        g.extend(std::iter::repeat_n(PartGroup::Hand, 2 * self.num_per_hand));
        g
    }

    pub fn keypoint_names(&self) -> Vec<String> {
        let mut names: Vec<String> = BODY_NAMES[..self.num_body].iter().map(|s| s.to_string()).collect();
        names.extend(FOOT_NAMES[..self.num_foot].iter().map(|s| s.to_string()));
        names.extend(FACE_NAMES[..self.num_face].iter().map(|s| s.to_string()));
        for side in ["left", "right"] {
            names.extend((0..self.num_per_hand).map(|j| format!("{side}_finger{j}")));
        }
        names
    }

    /// Per-sample seed; samples are independent of each other.
    pub fn sample_seed(&self, index: usize) -> u64 {
        splitmix64(self.seed ^ splitmix64(index as u64 + 1))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Body keypoints in annotation priority order; `num_body` keeps a prefix.
pub const BODY_NAMES: [&str; MAX_BODY] = [
    "head",
    "neck",
    "pelvis",
    "left_wrist",
    "right_wrist",
    "left_elbow",
    "right_elbow",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "left_shoulder",
    "right_shoulder",
];
pub const FOOT_NAMES: [&str; MAX_FOOT] = [
    "left_toe",
    "right_toe",
    "left_heel",
    "right_heel",
    "left_ball",
    "right_ball",
];
pub const FACE_NAMES: [&str; MAX_FACE] = [
    "left_eye",
    "right_eye",
    "nose",
    "mouth",
    "left_ear",
    "right_ear",
    "chin",
    "brow",
];

/// 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_unit(&self) -> crate::model::Image {
        crate::model::Image {
            width: self.width,
            height: self.height,
            data: self.pixels.iter().map(|p| f64::from(*p) / 255.0).collect(),
        }
    }
}

type P = [f64; 2];

fn add(a: P, b: P) -> P {
    [a[0] + b[0], a[1] + b[1]]
}

fn polar(len: f64, angle: f64) -> P {
    [len * angle.cos(), len * angle.sin()]
}

fn seg_dist(p: P, a: P, b: P) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (ap[0] - t * ab[0]).hypot(ap[1] - t * ab[1])
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, value: f64, alpha: f64) {
        let p = &mut self.px[y * self.size + x];
        *p = *p * (1.0 - alpha) + value * alpha;
    }

    fn bounds(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let lo = lo.floor().max(0.0) as usize;
        let hi = (hi.ceil() + 1.0).clamp(0.0, self.size as f64) as usize;
        lo.min(hi)..hi
    }

    /// Anti-aliased thick segment.
    fn segment(&mut self, a: P, b: P, thickness: f64, value: f64) {
        let r = thickness / 2.0 + 1.0;
        let xs = self.bounds(a[0].min(b[0]) - r, a[0].max(b[0]) + r);
        let ys = self.bounds(a[1].min(b[1]) - r, a[1].max(b[1]) + r);
        for y in ys {
            for x in xs.clone() {
                let d = seg_dist([x as f64, y as f64], a, b);
                let cov = (thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    self.blend(x, y, value, cov);
                }
            }
        }
    }

    fn blob(&mut self, c: P, sigma: f64, value: f64) {
        let r = 3.0 * sigma;
        for y in self.bounds(c[1] - r, c[1] + r) {
            for x in self.bounds(c[0] - r, c[0] + r) {
                let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2);
                let a = (-d2 / (2.0 * sigma * sigma)).exp();
                if a > 1e-3 {
                    self.blend(x, y, value, a);
                }
            }
        }
    }

    fn disk(&mut self, c: P, radius: f64, value: f64) {
        for y in self.bounds(c[1] - radius - 1.0, c[1] + radius + 1.0) {
            for x in self.bounds(c[0] - radius - 1.0, c[0] + radius + 1.0) {
                let d = (x as f64 - c[0]).hypot(y as f64 - c[1]);
                let cov = (radius + 0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    self.blend(x, y, value, cov);
                }
            }
        }
    }
}

/// Joint indices into the full 13-joint skeleton (same order as `BODY_NAMES`).
mod j {
    pub const HEAD: usize = 0;
    pub const NECK: usize = 1;
    pub const PELVIS: usize = 2;
    pub const L_WRIST: usize = 3;
    pub const R_WRIST: usize = 4;
    pub const L_ELBOW: usize = 5;
    pub const R_ELBOW: usize = 6;
    pub const L_KNEE: usize = 7;
    pub const R_KNEE: usize = 8;
    pub const L_ANKLE: usize = 9;
    pub const R_ANKLE: usize = 10;
    pub const L_SHOULDER: usize = 11;
    pub const R_SHOULDER: usize = 12;
}

struct Limb {
    a: usize,
    b: usize,
    thickness: f64,
    value: f64,
}

/// Renders one figure. Fully determined by `(skeleton_seed, cfg)`.
pub fn render_figure(skeleton_seed: u64, cfg: &GenConfig) -> Result<(GrayImage, KeypointSet)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(skeleton_seed);
    let size = cfg.image_size as f64;
    let height = size * rng.gen_range(0.55..0.85);
    let u = height / 4.0;
    let center = [
        size / 2.0 + size * rng.gen_range(-0.12..0.12),
        size / 2.0 + size * rng.gen_range(-0.1..0.1),
    ];
    let lean = rng.gen_range(-0.25..0.25);
    let up = -std::f64::consts::FRAC_PI_2 + lean;
    let down = up + std::f64::consts::PI;
    let across = up + std::f64::consts::FRAC_PI_2;

    let mut joints = [[0.0; 2]; MAX_BODY];
    joints[j::NECK] = add(center, polar(0.9 * u, up));
    joints[j::PELVIS] = add(center, polar(0.6 * u, down));
    let head_tilt = rng.gen_range(-0.35..0.35);
    let head_r = 0.38 * u;
    joints[j::HEAD] = add(joints[j::NECK], polar(0.75 * u, up + head_tilt));
    joints[j::L_SHOULDER] = add(joints[j::NECK], polar(0.5 * u, across));
    joints[j::R_SHOULDER] = add(joints[j::NECK], polar(-0.5 * u, across));
    let hip_l = add(joints[j::PELVIS], polar(0.3 * u, across));
    let hip_r = add(joints[j::PELVIS], polar(-0.3 * u, across));

    let mut forearm_dir = [0.0; 2];
    for (side, (sh, el, wr)) in [
        (j::L_SHOULDER, j::L_ELBOW, j::L_WRIST),
        (j::R_SHOULDER, j::R_ELBOW, j::R_WRIST),
    ]
    .into_iter()
    .enumerate()
    {
        let outward = if side == 0 {
            across
        } else {
            across + std::f64::consts::PI
        };
        let upper = outward + rng.gen_range(-1.3..1.6) * if side == 0 { 1.0 } else { -1.0 };
        let fore = upper + rng.gen_range(-1.4..1.4);
        joints[el] = add(joints[sh], polar(0.95 * u, upper));
        joints[wr] = add(joints[el], polar(0.85 * u, fore));
        forearm_dir[side] = fore;
    }
    let mut foot_dir = [0.0; 2];
    for (side, (hip, kn, an)) in [(hip_l, j::L_KNEE, j::L_ANKLE), (hip_r, j::R_KNEE, j::R_ANKLE)]
        .into_iter()
        .enumerate()
    {
        let sign = if side == 0 { 1.0 } else { -1.0 };
        let thigh = down + sign * rng.gen_range(-0.15..0.6);
        let shin = thigh + sign * rng.gen_range(-0.6..0.2);
        joints[kn] = add(hip, polar(1.1 * u, thigh));
        joints[an] = add(joints[kn], polar(1.0 * u, shin));
        foot_dir[side] = shin - sign * std::f64::consts::FRAC_PI_2 * rng.gen_range(0.7..1.0);
    }

    // Fingertips fan out from the wrist along the forearm.
    let hand_len = height / 6.0;
    let mut fingers: [Vec<P>; 2] = [Vec::new(), Vec::new()];
    for side in 0..2 {
        let wr = joints[if side == 0 { j::L_WRIST } else { j::R_WRIST }];
        let spread = 1.2;
        let curl = rng.gen_range(-0.4..0.4);
        for k in 0..cfg.num_per_hand {
            let frac = if cfg.num_per_hand > 1 {
                k as f64 / (cfg.num_per_hand - 1) as f64 - 0.5
            } else {
                0.0
            };
            let len = hand_len * rng.gen_range(0.75..1.0);
            fingers[side].push(add(wr, polar(len, forearm_dir[side] + curl + spread * frac)));
        }
    }

    let feet: Vec<P> = (0..cfg.num_foot)
        .map(|i| {
            let side = i % 2;
            let ankle = joints[if side == 0 { j::L_ANKLE } else { j::R_ANKLE }];
            let dir = foot_dir[side];
            match i / 2 {
                0 => add(ankle, polar(0.4 * u, dir)),
                1 => add(ankle, polar(-0.12 * u, dir)),
                _ => add(ankle, polar(0.22 * u, dir + 0.3)),
            }
        })
        .collect();

    // Face points in the head's frame: x across, y down the face.
    const FACE_LAYOUT: [[f64; 2]; MAX_FACE] = [
        [0.4, -0.15],
        [-0.4, -0.15],
        [0.0, 0.15],
        [0.0, 0.5],
        [0.85, 0.0],
        [-0.85, 0.0],
        [0.0, 0.8],
        [0.0, -0.5],
    ];
    let head_up = up + head_tilt;
    let face: Vec<P> = FACE_LAYOUT[..cfg.num_face]
        .iter()
        .map(|[fx, fy]| {
            let across_h = head_up + std::f64::consts::FRAC_PI_2;
            add(
                add(joints[j::HEAD], polar(fx * head_r, across_h)),
                polar(-fy * head_r, head_up),
            )
        })
        .collect();

    let bright = 0.95;
    let dim = 0.55;
    let mut limbs = vec![
        Limb {
            a: j::L_SHOULDER,
            b: j::L_ELBOW,
            thickness: 0.3 * u,
            value: bright,
        },
        Limb {
            a: j::L_ELBOW,
            b: j::L_WRIST,
            thickness: 0.25 * u,
            value: bright,
        },
        Limb {
            a: j::R_SHOULDER,
            b: j::R_ELBOW,
            thickness: 0.3 * u,
            value: dim,
        },
        Limb {
            a: j::R_ELBOW,
            b: j::R_WRIST,
            thickness: 0.25 * u,
            value: dim,
        },
        Limb {
            a: j::L_KNEE,
            b: j::L_ANKLE,
            thickness: 0.3 * u,
            value: bright,
        },
        Limb {
            a: j::R_KNEE,
            b: j::R_ANKLE,
            thickness: 0.3 * u,
            value: dim,
        },
    ];
    // Occluders are limbs redrawn on top of the finished figure.
    let occluders: Vec<usize> = (0..limbs.len()).filter(|_| rng.gen_bool(cfg.occlusion_rate)).collect();

    let mut canvas = Canvas {
        size: cfg.image_size,
        px: vec![0.08; cfg.image_size * cfg.image_size],
    };
    canvas.segment(joints[j::NECK], joints[j::PELVIS], 0.55 * u, 0.7);
    canvas.segment(joints[j::L_SHOULDER], joints[j::R_SHOULDER], 0.3 * u, 0.7);
    canvas.segment(hip_l, hip_r, 0.3 * u, 0.7);
    canvas.segment(hip_l, joints[j::L_KNEE], 0.35 * u, bright);
    canvas.segment(hip_r, joints[j::R_KNEE], 0.35 * u, dim);
    for limb in &limbs {
        canvas.segment(joints[limb.a], joints[limb.b], limb.thickness, limb.value);
    }
    for (side, ankle) in [j::L_ANKLE, j::R_ANKLE].into_iter().enumerate() {
        let value = if side == 0 { bright } else { dim };
        let toe = add(joints[ankle], polar(0.4 * u, foot_dir[side]));
        canvas.segment(joints[ankle], toe, 0.18 * u, value);
    }
    canvas.segment(joints[j::NECK], joints[j::HEAD], 0.2 * u, 0.7);
    canvas.disk(joints[j::HEAD], head_r, 0.4);
    for p in &face {
        canvas.blob(*p, 0.55, 1.0);
    }
    for (side, tips) in fingers.iter().enumerate() {
        let wr = joints[if side == 0 { j::L_WRIST } else { j::R_WRIST }];
        let value = if side == 0 { 1.0 } else { 0.6 };
        for tip in tips {
            canvas.segment(wr, *tip, 0.9, value);
            canvas.blob(*tip, 0.7, value);
        }
    }
    for p in [j::L_ELBOW, j::R_ELBOW, j::L_KNEE, j::R_KNEE] {
        canvas.blob(joints[p], 0.8, 1.0);
    }
    for &o in &occluders {
        let limb = &mut limbs[o];
        limb.thickness *= 1.6;
        canvas.segment(joints[limb.a], joints[limb.b], limb.thickness, 0.8);
    }

    // Keypoint list: body prefix, foot, face, hands (left then right).
    let mut coords: Vec<P> = joints[..cfg.num_body].to_vec();
    let mut owner: Vec<Option<usize>> = (0..cfg.num_body).map(Some).collect();
    coords.extend(&feet);
    owner.extend((0..cfg.num_foot).map(|i| Some(if i % 2 == 0 { j::L_ANKLE } else { j::R_ANKLE })));
    coords.extend(&face);
    owner.extend((0..cfg.num_face).map(|_| Some(j::HEAD)));
    for (side, tips) in fingers.iter().enumerate() {
        coords.extend(tips);
        owner.extend(
            tips.iter()
                .map(|_| Some(if side == 0 { j::L_WRIST } else { j::R_WRIST })),
        );
    }

    let max = size - 1.0;
    let visibility: Vec<u8> = coords
        .iter()
        .zip(&owner)
        .map(|(c, own)| {
            if c[0] < 0.0 || c[0] > max || c[1] < 0.0 || c[1] > max {
                return VIS_UNLABELED;
            }
            let covered = occluders.iter().any(|&o| {
                let limb = &limbs[o];
                let incident = own.is_some_and(|jt| jt == limb.a || jt == limb.b);
                !incident && seg_dist(*c, joints[limb.a], joints[limb.b]) <= limb.thickness / 2.0
            });
            if covered {
                VIS_OCCLUDED
            } else {
                VIS_VISIBLE
            }
        })
        .collect();

    if cfg.noise_std > 0.0 {
        for p in &mut canvas.px {
            // Box-Muller
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            *p += cfg.noise_std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
    let pixels = canvas
        .px
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();

    let mut visibility = visibility;
    if cfg.label_drop_rate > 0.0 {
        // Own stream, so images do not depend on the drop rate.
        let mut drop_rng = ChaCha8Rng::seed_from_u64(skeleton_seed);
        drop_rng.set_stream(LABEL_DROP_STREAM);
        for v in &mut visibility {
            if drop_rng.gen_bool(cfg.label_drop_rate) {
                *v = VIS_UNLABELED;
            }
        }
    }
    let kps = KeypointSet::new(coords, visibility, cfg.part_groups())?;
    Ok((
        GrayImage {
            width: cfg.image_size,
            height: cfg.image_size,
            pixels,
        },
        kps,
    ))
}
