//! Seeded procedural tabletop textures (wood grain, stone, composite tiles).

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Material {
    Wood,
    Stone,
    Composite,
}

impl Material {
    pub const ALL: [Material; 3] = [Material::Wood, Material::Stone, Material::Composite];

    pub fn as_str(self) -> &'static str {
        match self {
            Material::Wood => "wood",
            Material::Stone => "stone",
            Material::Composite => "composite",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_lowercase().as_str() {
            "wood" => Some(Material::Wood),
            "stone" => Some(Material::Stone),
            "composite" => Some(Material::Composite),
            _ => None,
        }
    }
}

const WOOD: [([u8; 3], [u8; 3]); 5] = [
    ([150, 101, 58], [104, 64, 33]),
    ([196, 154, 108], [150, 108, 66]),
    ([112, 72, 45], [70, 42, 24]),
    ([214, 182, 140], [176, 138, 96]),
    ([132, 86, 60], [92, 54, 38]),
];
const STONE: [([u8; 3], [u8; 3]); 5] = [
    ([150, 150, 146], [98, 98, 96]),
    ([206, 200, 188], [150, 144, 132]),
    ([92, 94, 98], [52, 54, 58]),
    ([176, 160, 140], [120, 108, 92]),
    ([222, 222, 218], [170, 172, 170]),
];
const COMPOSITE: [([u8; 3], [u8; 3]); 5] = [
    ([236, 232, 220], [190, 186, 176]),
    ([170, 178, 170], [126, 134, 126]),
    ([150, 162, 176], [104, 114, 128]),
    ([60, 62, 66], [34, 36, 40]),
    ([210, 196, 170], [160, 146, 120]),
];

/// Smooth value noise over a lattice of `cell`-pixel spacing.
struct ValueNoise {
    cols: usize,
    rows: usize,
    cell: f64,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, width: u32, height: u32, cell: f64) -> Self {
        let cols = (f64::from(width) / cell).ceil() as usize + 2;
        let rows = (f64::from(height) / cell).ceil() as usize + 2;
        let lattice = (0..cols * rows).map(|_| rng.random::<f64>()).collect();
        Self {
            cols,
            rows,
            cell,
            lattice,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let fx = x / self.cell;
        let fy = y / self.cell;
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (smooth(fx - fx.floor()), smooth(fy - fy.floor()));
        let g = |c: usize, r: usize| self.lattice[r.min(self.rows - 1) * self.cols + c.min(self.cols - 1)];
        let top = lerp(g(ix, iy), g(ix + 1, iy), tx);
        let bot = lerp(g(ix, iy + 1), g(ix + 1, iy + 1), tx);
        lerp(top, bot, ty)
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Multi-octave noise in [0, 1].
struct Fbm(Vec<ValueNoise>);

impl Fbm {
    fn new(rng: &mut ChaCha8Rng, width: u32, height: u32, base_cell: f64, octaves: usize) -> Self {
        Self(
            (0..octaves)
                .map(|o| ValueNoise::new(rng, width, height, (base_cell / f64::from(1 << o)).max(1.0)))
                .collect(),
        )
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (mut acc, mut amp, mut norm) = (0.0, 1.0, 0.0);
        for n in &self.0 {
            acc += amp * n.at(x, y);
            norm += amp;
            amp *= 0.5;
        }
        acc / norm
    }
}

fn mix(a: [u8; 3], b: [u8; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|c| lerp(f64::from(a[c]), f64::from(b[c]), t.clamp(0.0, 1.0)))
}

fn to_px(v: [f64; 3]) -> Rgb<u8> {
    Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8))
}

/// Renders a `width`×`height` texture of the given material. Identical
/// arguments give identical images.
pub fn render(material: Material, seed: u64, width: u32, height: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_u64.wrapping_mul(material as u64 + 1));
    let scale = f64::from(width.max(height));
    match material {
        Material::Wood => {
            let (light, dark) = WOOD[rng.random_range(0..WOOD.len())];
            let vertical = rng.random_bool(0.5);
            let freq = rng.random_range(6.0..14.0) / scale;
            let warp = Fbm::new(&mut rng, width, height, scale / 3.0, 3);
            let grain = Fbm::new(&mut rng, width, height, scale / 24.0, 2);
            let warp_amp = rng.random_range(0.8..2.0);
            RgbImage::from_fn(width, height, |x, y| {
                let (x, y) = (f64::from(x), f64::from(y));
                let along = if vertical { x } else { y };
                let ring = (along * freq + warp.at(x, y) * warp_amp).fract();
                let stripe = (ring * std::f64::consts::TAU).sin() * 0.5 + 0.5;
                let t = 0.7 * stripe + 0.3 * grain.at(x, y);
                to_px(mix(light, dark, t))
            })
        }
        Material::Stone => {
            let (light, dark) = STONE[rng.random_range(0..STONE.len())];
            let body = Fbm::new(&mut rng, width, height, scale / 4.0, 4);
            let speckle_density = rng.random_range(0.02..0.08);
            let speckle_seed: u64 = rng.random();
            RgbImage::from_fn(width, height, |x, y| {
                let t = body.at(f64::from(x), f64::from(y));
                let mut v = mix(light, dark, (t - 0.2) * 1.6);
                let h = hash2(speckle_seed, x, y);
                if h < speckle_density {
                    v = v.map(|c| c * 0.65);
                } else if h > 1.0 - speckle_density {
                    v = v.map(|c| (c * 1.2).min(255.0));
                }
                to_px(v)
            })
        }
        Material::Composite => {
            let (light, dark) = COMPOSITE[rng.random_range(0..COMPOSITE.len())];
            let tile = (scale / rng.random_range(3.0..7.0)).max(4.0);
            let seam = rng.random_range(1.0..2.5);
            let noise = Fbm::new(&mut rng, width, height, scale / 10.0, 2);
            let tile_seed: u64 = rng.random();
            RgbImage::from_fn(width, height, |x, y| {
                let (fx, fy) = (f64::from(x), f64::from(y));
                let (tx, ty) = ((fx / tile).floor() as u32, (fy / tile).floor() as u32);
                let shade = 0.25 * hash2(tile_seed, tx, ty) + 0.15 * noise.at(fx, fy);
                let on_seam = fx % tile < seam || fy % tile < seam;
                let t = if on_seam { 0.95 } else { shade };
                to_px(mix(light, dark, t))
            })
        }
    }
}

fn hash2(seed: u64, x: u32, y: u32) -> f64 {
    let mut z = seed ^ (u64::from(x) << 32 | u64::from(y));
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Black/white checkerboard with `cell`-pixel squares.
pub fn checkerboard(width: u32, height: u32, cell: u32) -> RgbImage {
    let cell = cell.max(1);
    RgbImage::from_fn(width, height, |x, y| {
        if (x / cell + y / cell) % 2 == 0 {
            Rgb([255, 255, 255])
        } else {
            Rgb([0, 0, 0])
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic_and_sized() {
        for m in Material::ALL {
            let a = render(m, 42, 37, 23);
            assert_eq!(a.dimensions(), (37, 23));
            assert_eq!(a, render(m, 42, 37, 23));
            assert_ne!(a, render(m, 43, 37, 23));
        }
    }

    #[test]
    fn textures_are_not_flat() {
        for m in Material::ALL {
            let img = render(m, 7, 64, 64);
            let first = *img.get_pixel(0, 0);
            assert!(img.pixels().any(|p| *p != first), "{m:?} is flat");
        }
    }
}
