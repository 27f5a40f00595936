//! Procedural stand-in for a vehicle dataset. Each identity is a coloured
//! body with stripes, a window and wheels at identity-specific positions.
//! Cameras shift brightness and position, views mirror or crop, and every
//! instance gets its own jitter and pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub num_cameras: usize,
    /// `0` original, `1` mirrored, `2` cropped.
    pub num_views: usize,
    pub image_size: (usize, usize),
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            num_identities: 16,
            images_per_identity: 8,
            num_cameras: 4,
            num_views: 2,
            image_size: (40, 40),
            noise: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_identities == 0 || self.images_per_identity == 0 || self.num_cameras == 0 {
            return Err("identities, images per identity and cameras must be positive".into());
        }
        if !(1..=3).contains(&self.num_views) {
            return Err(format!("num_views must be 1, 2 or 3, got {}", self.num_views));
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return Err(format!("image size {:?} is below 8×8", self.image_size));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(format!("noise {} must be finite and non-negative", self.noise));
        }
        Ok(())
    }

    pub fn camera_of(&self, instance: usize) -> usize {
        instance % self.num_cameras
    }

    pub fn view_of(&self, instance: usize) -> usize {
        (instance / self.num_cameras) % self.num_views
    }

    /// Flat index of `(identity, instance)` in [`synth_generate`] output.
    pub fn index_of(&self, identity: usize, instance: usize) -> usize {
        identity * self.images_per_identity + instance
    }
}

type Rgb = [f64; 3];

struct Identity {
    background: Rgb,
    body: Rgb,
    accent: Rgb,
    /// `(u0, v0, u1, v1)` in unit scene coordinates.
    body_box: (f64, f64, f64, f64),
    stripes: usize,
    vertical_stripes: bool,
    window: (f64, f64, f64, f64),
    wheels: [f64; 2],
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn color(rng: &mut ChaCha8Rng) -> Rgb {
    std::array::from_fn(|_| rng.random_range(0.05..0.95))
}

impl Identity {
    fn new(seed: u64, id: usize) -> Self {
        let mut rng = stream(seed, 1 + id as u64);
        let u0 = rng.random_range(0.10..0.25);
        let u1 = rng.random_range(0.75..0.90);
        let v0 = rng.random_range(0.20..0.40);
        let v1 = rng.random_range(0.62..0.78);
        let wu = rng.random_range(u0 + 0.02..u0 + 0.35);
        let wv = rng.random_range(v0 + 0.02..v0 + 0.10);
        Self {
            background: color(&mut rng).map(|c| 0.2 + 0.3 * c),
            body: color(&mut rng),
            accent: color(&mut rng),
            body_box: (u0, v0, u1, v1),
            stripes: rng.random_range(1..=3),
            vertical_stripes: rng.random_bool(0.5),
            window: (
                wu,
                wv,
                wu + rng.random_range(0.12..0.22),
                wv + rng.random_range(0.08..0.14),
            ),
            wheels: [rng.random_range(u0 + 0.05..0.45), rng.random_range(0.55..u1 - 0.05)],
        }
    }

    fn shade(&self, u: f64, v: f64) -> Rgb {
        let (u0, v0, u1, v1) = self.body_box;
        for &cu in &self.wheels {
            if (u - cu).powi(2) + (v - v1).powi(2) < 0.09f64.powi(2) {
                return [0.08, 0.08, 0.08];
            }
        }
        if u >= u0 && u < u1 && v >= v0 && v < v1 {
            let (wu0, wv0, wu1, wv1) = self.window;
            if u >= wu0 && u < wu1 && v >= wv0 && v < wv1 {
                return [0.85, 0.9, 0.95];
            }
            let t = if self.vertical_stripes {
                (u - u0) / (u1 - u0)
            } else {
                (v - v0) / (v1 - v0)
            };
            let band = (t * (2 * self.stripes + 1) as f64) as usize;
            return if band % 2 == 1 { self.accent } else { self.body };
        }
        let fade = 0.85 + 0.15 * v;
        self.background.map(|c| c * fade)
    }
}

struct Camera {
    brightness: f64,
    shift: (f64, f64),
}

impl Camera {
    fn new(spec: &SyntheticDatasetSpec, cam: usize) -> Self {
        let mut rng = stream(spec.seed, (1 << 32) + cam as u64);
        let span = if spec.num_cameras > 1 {
            cam as f64 / (spec.num_cameras - 1) as f64
        } else {
            0.5
        };
        Self {
            brightness: -0.12 + 0.24 * span,
            shift: (rng.random_range(-3..=3) as f64, rng.random_range(-3..=3) as f64),
        }
    }
}

/// Renders instance `instance` of identity `identity` as planar RGB.
pub fn render_sample(spec: &SyntheticDatasetSpec, identity: usize, instance: usize) -> Vec<f64> {
    let ident = Identity::new(spec.seed, identity);
    let cam = Camera::new(spec, spec.camera_of(instance));
    let view = spec.view_of(instance);
    let mut rng = stream(spec.seed, (2 << 32) + ((identity as u64) << 20) + instance as u64);
    let jitter = (rng.random_range(-1..=1) as f64, rng.random_range(-1..=1) as f64);
    let brightness = cam.brightness + rng.random_range(-0.03..0.03);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let (h, w) = spec.image_size;
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let xs = if view == 1 { (w - 1 - x) as f64 } else { x as f64 };
            let mut u = (xs - cam.shift.0 - jitter.0 + 0.5) / w as f64;
            let mut v = (y as f64 - cam.shift.1 - jitter.1 + 0.5) / h as f64;
            if view == 2 {
                u = 0.1 + 0.8 * u;
                v = 0.1 + 0.8 * v;
            }
            let rgb = ident.shade(u, v);
            for c in 0..3 {
                let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                out[(c * h + y) * w + x] = (rgb[c] + brightness + n).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// All `num_identities × images_per_identity` samples, identity-major.
pub fn synth_generate(spec: &SyntheticDatasetSpec) -> Result<ImageSet, String> {
    spec.validate()?;
    let n = spec.images_per_identity;
    let images: Vec<Vec<f64>> = (0..spec.num_identities * n)
        .into_par_iter()
        .map(|i| render_sample(spec, i / n, i % n))
        .collect();
    let (h, w) = spec.image_size;
    let mut set = ImageSet::new(h, w);
    for (i, img) in images.into_iter().enumerate() {
        let inst = i % n;
        set.push(img, i / n, spec.camera_of(inst), spec.view_of(inst))
            .map_err(|e| e.to_string())?;
    }
    Ok(set)
}

/// Train, query and gallery indices into [`synth_generate`] output.
///
/// Instance `j` is held out when `j + j / num_cameras` is odd, which with
/// two views keeps every camera and view in both halves while holding out
/// each identity's remaining camera/view pairs. Queries are the held-out
/// original-view instances; the gallery is every held-out instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeldOutSplit {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

pub fn held_out_split(spec: &SyntheticDatasetSpec) -> HeldOutSplit {
    let mut split = HeldOutSplit {
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
    };
    for id in 0..spec.num_identities {
        for j in 0..spec.images_per_identity {
            let i = spec.index_of(id, j);
            if (j + j / spec.num_cameras) % 2 == 1 {
                split.gallery.push(i);
                if spec.view_of(j) == 0 {
                    split.query.push(i);
                }
            } else {
                split.train.push(i);
            }
        }
    }
    split
}
