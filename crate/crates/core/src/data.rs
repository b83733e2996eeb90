//! Desk-scale synthetic dataset: one coloured shape per 32x32 image on a
//! gradient background, ten classes.
//!
//! Pixels are quantized to 8-bit levels so images survive a PNG round trip
//! unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

pub const IMAGE_SIZE: usize = 32;

pub const CLASS_NAMES: [&str; 10] = [
    "circle",
    "square",
    "triangle",
    "ring",
    "cross",
    "horizontal stripes",
    "vertical stripes",
    "diamond",
    "checkerboard",
    "diagonal bar",
];

/// Parameters that fully determine a rendered image.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub class: usize,
    pub center: (f64, f64),
    pub radius: f64,
    pub foreground: [f64; 3],
    pub background: [[f64; 3]; 2],
    /// Gradient direction of the background, radians.
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
    pub caption: String,
}

impl Scene {
    pub fn random(rng: &mut impl Rng, class: usize) -> Scene {
        let background = [random_color(rng), random_color(rng)];
        let bg_mean: Vec<f64> = (0..3).map(|c| 0.5 * (background[0][c] + background[1][c])).collect();
        let mut foreground = random_color(rng);
        // Keep the shape visible against the background.
        for _ in 0..32 {
            let d: f64 = (0..3).map(|c| (foreground[c] - bg_mean[c]).powi(2)).sum::<f64>().sqrt();
            if d > 0.45 {
                break;
            }
            foreground = random_color(rng);
        }
        Scene {
            class,
            center: (rng.random_range(12.0..20.0), rng.random_range(12.0..20.0)),
            radius: rng.random_range(7.0..11.0),
            foreground,
            background,
            angle: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Render with the shape displaced by `(dx, dy)` pixels.
    pub fn render_shifted(&self, dx: f64, dy: f64) -> Image {
        let n = IMAGE_SIZE;
        let (ca, sa) = (self.angle.cos(), self.angle.sin());
        let mut data = vec![0.0; 3 * n * n];
        // 4x4 supersampling for anti-aliased edges.
        const SS: usize = 4;
        for y in 0..n {
            for x in 0..n {
                let mut cover = 0.0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                        let u = (px - self.center.0 - dx) / self.radius;
                        let v = (py - self.center.1 - dy) / self.radius;
                        if inside(self.class, u, v) {
                            cover += 1.0;
                        }
                    }
                }
                cover /= (SS * SS) as f64;
                let t = 0.5
                    + 0.5 * ((x as f64 / n as f64 - 0.5) * ca + (y as f64 / n as f64 - 0.5) * sa) * 1.4;
                let t = t.clamp(0.0, 1.0);
                for c in 0..3 {
                    let bg = (1.0 - t) * self.background[0][c] + t * self.background[1][c];
                    data[(c * n + y) * n + x] = (1.0 - cover) * bg + cover * self.foreground[c];
                }
            }
        }
        Image::new(3, n, n, data).expect("fixed shape").quantized()
    }

    pub fn render(&self) -> Image {
        self.render_shifted(0.0, 0.0)
    }

    pub fn caption(&self) -> String {
        CLASS_NAMES[self.class].to_string()
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
    ]
}

/// Membership test in shape-local coordinates; the shape spans roughly
/// `[-1, 1]^2`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    let in_box = u.abs() < 0.9 && v.abs() < 0.9;
    match class {
        0 => r < 0.9,
        1 => u.abs() < 0.75 && v.abs() < 0.75,
        2 => v > -0.8 && v < 0.8 && u.abs() < 0.55 * (v + 0.8),
        3 => r < 0.95 && r > 0.55,
        4 => (u.abs() < 0.3 && v.abs() < 0.95) || (v.abs() < 0.3 && u.abs() < 0.95),
        5 => in_box && (((v + 0.9) / 0.6).floor() as i64) % 2 == 0,
        6 => in_box && (((u + 0.9) / 0.6).floor() as i64) % 2 == 0,
        7 => u.abs() + v.abs() < 0.95,
        8 => in_box && ((((u + 0.9) / 0.9).floor() + ((v + 0.9) / 0.9).floor()) as i64) % 2 == 0,
        9 => in_box && (u - v).abs() < 0.45,
        _ => false,
    }
}

/// `n` images with classes cycling through all ten; fully determined by `seed`.
pub fn synthetic_dataset(n: usize, seed: u64) -> Vec<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let scene = Scene::random(&mut rng, i % CLASS_NAMES.len());
            LabeledImage {
                image: scene.render(),
                label: scene.class,
                caption: scene.caption(),
            }
        })
        .collect()
}

/// `groups` sequences of `k` frames. Within a sequence the shape moves
/// `shift` pixels per frame along a random axis-aligned direction.
pub fn translated_sequences(groups: usize, k: usize, shift: f64, seed: u64) -> Vec<Vec<LabeledImage>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..groups)
        .map(|g| {
            let scene = Scene::random(&mut rng, g % CLASS_NAMES.len());
            let (dx, dy) = match rng.random_range(0..4) {
                0 => (shift, 0.0),
                1 => (-shift, 0.0),
                2 => (0.0, shift),
                _ => (0.0, -shift),
            };
            let offset = (k as f64 - 1.0) / 2.0;
            (0..k)
                .map(|i| {
                    let t = i as f64 - offset;
                    LabeledImage {
                        image: scene.render_shifted(t * dx, t * dy),
                        label: scene.class,
                        caption: scene.caption(),
                    }
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_quantized() {
        let a = synthetic_dataset(12, 5);
        let b = synthetic_dataset(12, 5);
        assert_eq!(a, b);
        for item in &a {
            assert_eq!(item.image, item.image.quantized());
            assert_eq!(item.caption, CLASS_NAMES[item.label]);
        }
        assert_ne!(a, synthetic_dataset(12, 6));
    }

    #[test]
    fn every_class_draws_something() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for class in 0..CLASS_NAMES.len() {
            let scene = Scene::random(&mut rng, class);
            let mut plain = scene.clone();
            plain.foreground = [0.0; 3];
            let diff: f64 = scene
                .render()
                .data()
                .iter()
                .zip(plain.render().data())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff > 5.0, "class {class} rendered nothing");
        }
    }

    #[test]
    fn frames_are_shifted_copies() {
        let seqs = translated_sequences(3, 4, 2.0, 1);
        assert_eq!(seqs.len(), 3);
        for s in &seqs {
            assert_eq!(s.len(), 4);
            assert_ne!(s[0].image, s[1].image);
            assert!(s.iter().all(|f| f.label == s[0].label));
        }
    }
}
