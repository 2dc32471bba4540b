use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeClass {
    Disc,
    Square,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 2] = [ShapeClass::Disc, ShapeClass::Square];

    pub fn index(self) -> usize {
        match self {
            ShapeClass::Disc => 0,
            ShapeClass::Square => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Disc => "disc",
            ShapeClass::Square => "square",
        }
    }
}

impl std::str::FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disc" => Ok(ShapeClass::Disc),
            "square" => Ok(ShapeClass::Square),
            other => Err(Error::Format(format!("unknown class `{other}`"))),
        }
    }
}

/// Axis-aligned box in pixels: top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        ix.max(0.0) * iy.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub class: ShapeClass,
    pub bbox: BBox,
    /// Peak grey level of the shape.
    pub intensity: f64,
}

/// Bounds for scene generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_extent: usize,
    pub max_extent: usize,
    pub noise_level: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 48,
            min_objects: 1,
            max_objects: 4,
            min_extent: 8,
            max_extent: 20,
            noise_level: 0.15,
        }
    }
}

impl SceneSpec {
    pub fn with_noise(noise_level: f64) -> Self {
        Self {
            noise_level,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.min_objects >= 1
            && self.min_objects <= self.max_objects
            && self.max_objects <= 4
            && self.min_extent >= 2
            && self.min_extent <= self.max_extent
            && self.max_extent <= self.size
            && self.noise_level >= 0.0
            && self.noise_level.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid scene spec {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub noise_level: f64,
    /// `[1, size, size]`, values in `[0, 1]`.
    pub image: Tensor,
    pub objects: Vec<SceneObject>,
}

/// SplitMix64 finalizer, used to derive per-scene seeds.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SUPERSAMPLE: usize = 4;

fn coverage(obj: &SceneObject, px: usize, py: usize) -> f64 {
    let b = obj.bbox;
    let (x0, y0) = (px as f64, py as f64);
    if x0 + 1.0 <= b.x || x0 >= b.x + b.w || y0 + 1.0 <= b.y || y0 >= b.y + b.h {
        return 0.0;
    }
    match obj.class {
        ShapeClass::Square => {
            let ix = (x0 + 1.0).min(b.x + b.w) - x0.max(b.x);
            let iy = (y0 + 1.0).min(b.y + b.h) - y0.max(b.y);
            ix.max(0.0) * iy.max(0.0)
        }
        ShapeClass::Disc => {
            let (cx, cy) = b.center();
            let (rx, ry) = (0.5 * b.w, 0.5 * b.h);
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = (x0 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - cx) / rx;
                    let v = (y0 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - cy) / ry;
                    if u * u + v * v <= 1.0 {
                        hits += 1;
                    }
                }
            }
            hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
        }
    }
}

/// Rasterizes objects with anti-aliased edges and adds Gaussian pixel
/// noise of standard deviation `noise_level`, clamped to `[0, 1]`.
pub fn render(objects: &[SceneObject], size: usize, noise_level: f64, rng: &mut impl Rng) -> Tensor {
    let mut img = vec![0.0f64; size * size];
    for obj in objects {
        for py in 0..size {
            for px in 0..size {
                let c = coverage(obj, px, py);
                if c > 0.0 {
                    let v = &mut img[py * size + px];
                    *v = (*v).max(c * obj.intensity);
                }
            }
        }
    }
    if noise_level > 0.0 {
        for v in &mut img {
            let n: f64 = StandardNormal.sample(rng);
            *v = (*v + noise_level * n).clamp(0.0, 1.0);
        }
    }
    Tensor::from_parts(vec![1, size, size], img)
}

fn separated(a: &BBox, b: &BBox) -> bool {
    // One free pixel between shapes; touching-adjacent layouts stay legal.
    a.x + a.w + 1.0 <= b.x || b.x + b.w + 1.0 <= a.x || a.y + a.h + 1.0 <= b.y || b.y + b.h + 1.0 <= a.y
}

/// Draws object layouts for a seed without rendering.
pub fn sample_objects(seed: u64, spec: &SceneSpec) -> Result<(Vec<SceneObject>, ChaCha8Rng)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(target);
    let mut attempts = 0;
    while objects.len() < target && attempts < 200 {
        attempts += 1;
        let class = if rng.random_bool(0.5) {
            ShapeClass::Disc
        } else {
            ShapeClass::Square
        };
        let ext = rng.random_range(spec.min_extent..=spec.max_extent);
        let x = rng.random_range(0..=spec.size - ext);
        let y = rng.random_range(0..=spec.size - ext);
        let intensity = rng.random_range(0.6..1.0);
        let bbox = BBox::new(x as f64, y as f64, ext as f64, ext as f64);
        if objects.iter().all(|o| separated(&o.bbox, &bbox)) {
            objects.push(SceneObject {
                class,
                bbox,
                intensity,
            });
        }
    }
    if objects.len() < spec.min_objects {
        return Err(Error::InvalidArgument(format!(
            "could not place {} objects for seed {seed}",
            spec.min_objects
        )));
    }
    Ok((objects, rng))
}

/// Deterministic scene for a seed.
pub fn gen_scene(seed: u64, spec: &SceneSpec) -> Result<SyntheticScene> {
    let (objects, mut rng) = sample_objects(seed, spec)?;
    let image = render(&objects, spec.size, spec.noise_level, &mut rng);
    Ok(SyntheticScene {
        seed,
        noise_level: spec.noise_level,
        image,
        objects,
    })
}

impl SyntheticScene {
    /// Same layout rendered without noise.
    pub fn noiseless(&self) -> Self {
        let size = self.image.shape()[1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Self {
            seed: self.seed,
            noise_level: 0.0,
            image: render(&self.objects, size, 0.0, &mut rng),
            objects: self.objects.clone(),
        }
    }
}

/// `count` scenes with seeds derived from `base_seed`.
pub fn gen_dataset(count: usize, base_seed: u64, spec: &SceneSpec) -> Result<Vec<SyntheticScene>> {
    (0..count as u64)
        .map(|i| gen_scene(mix_seed(base_seed, i), spec))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_disc_is_analytic() {
        let obj = SceneObject {
            class: ShapeClass::Disc,
            bbox: BBox::new(16.0, 16.0, 16.0, 16.0),
            intensity: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = render(&[obj], 48, 0.0, &mut rng);
        let at = |x: usize, y: usize| img.data()[y * 48 + x];
        assert_eq!(at(24, 24), 1.0);
        assert_eq!(at(0, 0), 0.0);
        assert_eq!(at(16, 16), 0.0);
        // Pixels whose every subsample is inside radius 8 around (24, 24).
        for y in 0..48 {
            for x in 0..48 {
                let far = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
                    .iter()
                    .map(|(dx, dy)| {
                        let (u, v) = (x as f64 + dx - 24.0, y as f64 + dy - 24.0);
                        (u * u + v * v).sqrt()
                    })
                    .fold(0.0, f64::max);
                if far < 8.0 {
                    assert_eq!(at(x, y), 1.0);
                }
            }
        }
        let mass: f64 = img.data().iter().sum();
        let area = std::f64::consts::PI * 64.0;
        assert!((mass - area).abs() < 0.01 * area, "mass {mass}");
        assert_eq!(obj.bbox, BBox::new(16.0, 16.0, 16.0, 16.0));
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        assert_eq!(gen_scene(99, &spec).unwrap(), gen_scene(99, &spec).unwrap());
        assert_ne!(gen_scene(99, &spec).unwrap(), gen_scene(100, &spec).unwrap());
    }

    #[test]
    fn scene_invariants_hold() {
        let spec = SceneSpec::default();
        for s in gen_dataset(300, 5, &spec).unwrap() {
            assert!((1..=4).contains(&s.objects.len()));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for o in &s.objects {
                let b = o.bbox;
                assert!(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 48.0 && b.y + b.h <= 48.0);
            }
        }
    }

    #[test]
    fn class_balance_over_a_thousand_scenes() {
        let scenes = gen_dataset(1000, 77, &SceneSpec::default()).unwrap();
        let (mut discs, mut total) = (0usize, 0usize);
        for s in &scenes {
            for o in &s.objects {
                total += 1;
                if o.class == ShapeClass::Disc {
                    discs += 1;
                }
            }
        }
        let frac = discs as f64 / total as f64;
        assert!((0.45..=0.55).contains(&frac), "disc fraction {frac}");
    }

    #[test]
    fn iou_basics() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(20.0, 0.0, 5.0, 5.0)), 0.0);
        let b = BBox::new(5.0, 0.0, 10.0, 10.0);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
    }
}
