//! Weak (geometric) and strong (photometric) augmentation, and CutMix.
//!
//! Strong views are built on top of a weak view and never move pixels, so
//! the weak view's pseudo-labels line up with them exactly.

use rand::Rng;

use crate::error::Result;
use crate::mask::Mask;
use crate::phantom::Sample;
use crate::tensor::Tensor;

/// Flip, rotation and scale applied about the image centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub flip: bool,
    pub angle_deg: f64,
    pub scale: f64,
}

impl Geometry {
    pub const IDENTITY: Geometry = Geometry {
        flip: false,
        angle_deg: 0.0,
        scale: 1.0,
    };

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Geometry {
            flip: rng.gen_bool(0.5),
            angle_deg: rng.gen_range(-10.0..=10.0),
            scale: rng.gen_range(0.9..=1.1),
        }
    }

    /// Source coordinate that lands on output pixel `(x, y)`.
    fn source(&self, x: f64, y: f64, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let x = if self.flip { w as f64 - 1.0 - x } else { x };
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        // inverse rotation, then inverse scale
        let u = (c * dx + s * dy) / self.scale;
        let v = (-s * dx + c * dy) / self.scale;
        (cx + u, cy + v)
    }
}

/// Intensity gain, additive offset and gamma, applied in that order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Photometric {
    pub gain: f64,
    pub offset: f64,
    pub gamma: f64,
}

impl Photometric {
    pub const IDENTITY: Photometric = Photometric {
        gain: 1.0,
        offset: 0.0,
        gamma: 1.0,
    };

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Photometric {
            gain: rng.gen_range(0.7..=1.3),
            offset: rng.gen_range(-0.1..=0.1),
            gamma: rng.gen_range(0.7..=1.4),
        }
    }

    pub fn apply(&self, image: &Tensor) -> Tensor {
        let data = image
            .data()
            .iter()
            .map(|&v| {
                let v = (self.gain * f64::from(v) + self.offset).clamp(0.0, 1.0);
                v.powf(self.gamma).clamp(0.0, 1.0) as f32
            })
            .collect();
        Tensor::new(image.dims(), data).expect("same dims, finite values")
    }
}

/// Resample image (bilinear) and mask (nearest) through `geom`. Pixels
/// mapped from outside the canvas become 0 / background.
pub fn apply_geometry(sample: &Sample, geom: &Geometry) -> Sample {
    let (w, h) = (sample.width(), sample.height());
    let src = sample.pixels();
    let mut img = vec![0f32; w * h];
    let mut mask = Mask::empty(w, h);
    let at = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            f64::from(src[y as usize * w + x as usize])
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = geom.source(x as f64, y as f64, w, h);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let mut v = at(x0, y0) * (1.0 - fx) * (1.0 - fy);
            if fx > 0.0 {
                v += at(x0 + 1, y0) * fx * (1.0 - fy);
            }
            if fy > 0.0 {
                v += at(x0, y0 + 1) * (1.0 - fx) * fy;
                if fx > 0.0 {
                    v += at(x0 + 1, y0 + 1) * fx * fy;
                }
            }
            img[y * w + x] = v.clamp(0.0, 1.0) as f32;

            let (nx, ny) = ((sx + 0.5).floor(), (sy + 0.5).floor());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                mask.set(x, y, sample.mask.get(nx as usize, ny as usize));
            }
        }
    }
    Sample {
        image: Tensor::new(&[1, h, w], img).expect("canvas dims"),
        mask,
        ..sample.clone()
    }
}

pub fn weak_augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> (Sample, Geometry) {
    let geom = Geometry::draw(rng);
    (apply_geometry(sample, &geom), geom)
}

/// Photometric jitter only; the mask is untouched.
pub fn strong_augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    let p = Photometric::draw(rng);
    Sample {
        image: p.apply(&sample.image),
        ..sample.clone()
    }
}

/// A weak view and two independently jittered strong views of it.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub weak: Sample,
    pub strong1: Sample,
    pub strong2: Sample,
    pub geometry: Geometry,
}

pub fn augment_pair<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> AugmentedPair {
    let (weak, geometry) = weak_augment(sample, rng);
    let strong1 = strong_augment(&weak, rng);
    let strong2 = strong_augment(&weak, rng);
    AugmentedPair {
        weak,
        strong1,
        strong2,
        geometry,
    }
}

/// Half-open pixel rectangle `[x0, x0+w) × [y0, y0+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl CutBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// Per-pixel composition: `b` inside the box, `a` elsewhere.
    pub fn compose<T: Copy>(&self, a: &[T], b: &[T], width: usize) -> Vec<T> {
        assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(i, (&pa, &pb))| if self.contains(i % width, i / width) { pb } else { pa })
            .collect()
    }

    /// Draw a box covering a `1 - lambda` share of a `w×h` canvas.
    pub fn draw<R: Rng + ?Sized>(lambda: f64, w: usize, h: usize, rng: &mut R) -> Self {
        let side = (1.0 - lambda.clamp(0.0, 1.0)).sqrt();
        let bw = ((w as f64 * side).round() as usize).min(w);
        let bh = ((h as f64 * side).round() as usize).min(h);
        CutBox {
            x0: rng.gen_range(0..=w - bw),
            y0: rng.gen_range(0..=h - bh),
            w: bw,
            h: bh,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CutMixed {
    pub sample: Sample,
    /// Exact share of pixels kept from `a`.
    pub lambda: f64,
    pub cut: CutBox,
}

/// Paste a box of `b` into `a` (image and mask). `lambda ~ U(0,1)`.
pub fn cutmix<R: Rng + ?Sized>(a: &Sample, b: &Sample, rng: &mut R) -> Result<CutMixed> {
    let lambda = rng.gen::<f64>();
    cutmix_with(a, b, lambda, rng)
}

pub fn cutmix_with<R: Rng + ?Sized>(a: &Sample, b: &Sample, lambda: f64, rng: &mut R) -> Result<CutMixed> {
    a.mask.same_dims(&b.mask)?;
    let (w, h) = (a.width(), a.height());
    let cut = CutBox::draw(lambda, w, h, rng);
    let mixed = Sample {
        image: Tensor::new(&[1, h, w], cut.compose(a.pixels(), b.pixels(), w))?,
        mask: Mask::new(w, h, cut.compose(a.mask.data(), b.mask.data(), w))?,
        ..a.clone()
    };
    Ok(CutMixed {
        sample: mixed,
        lambda: 1.0 - cut.area() as f64 / (w * h) as f64,
        cut,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomask::View;
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn sample(seed: u64) -> Sample {
        generate_phantom(seed, View::FourChamber, 0, &PhantomConfig::default()).unwrap()
    }

    #[test]
    fn identity_geometry_is_exact() {
        let s = sample(1);
        let out = apply_geometry(&s, &Geometry::IDENTITY);
        assert_eq!(out, s);
        assert!(out.image.bits_eq(&s.image));
    }

    #[test]
    fn flip_is_an_involution() {
        let s = sample(2);
        let g = Geometry {
            flip: true,
            ..Geometry::IDENTITY
        };
        let once = apply_geometry(&s, &g);
        assert_ne!(once.mask, s.mask);
        let twice = apply_geometry(&once, &g);
        assert_eq!(twice.mask, s.mask);
        for (a, b) in twice.pixels().iter().zip(s.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rotated_mask_only_uses_original_classes() {
        let mut rng = rng_stream!(5, "aug-test");
        for seed in 0..20 {
            let s = sample(seed);
            let (w, _) = weak_augment(&s, &mut rng);
            let orig = s.mask.classes();
            for c in w.mask.classes() {
                assert!(c == 0 || orig.contains(&c));
            }
        }
    }

    #[test]
    fn strong_views_keep_geometry() {
        let mut rng = rng_stream!(6, "aug-test");
        let pair = augment_pair(&sample(3), &mut rng);
        assert_eq!(pair.strong1.mask, pair.weak.mask);
        assert_eq!(pair.strong2.mask, pair.weak.mask);
        for v in pair.strong1.pixels().iter().chain(pair.strong2.pixels()) {
            assert!((0.0..=1.0).contains(v));
        }
        assert!(!pair.strong1.image.bits_eq(&pair.strong2.image));
    }

    #[test]
    fn photometric_identity_is_exact() {
        let s = sample(4);
        assert!(Photometric::IDENTITY.apply(&s.image).bits_eq(&s.image));
    }

    #[test]
    fn cutmix_extremes() {
        let (a, b) = (sample(7), sample(8));
        let mut rng = rng_stream!(1, "mix");
        let keep = cutmix_with(&a, &b, 1.0, &mut rng).unwrap();
        assert_eq!(keep.sample, a);
        assert_eq!(keep.lambda, 1.0);
        let swap = cutmix_with(&a, &b, 0.0, &mut rng).unwrap();
        assert_eq!(swap.sample.mask, b.mask);
        assert!(swap.sample.image.bits_eq(&b.image));
        assert_eq!(swap.lambda, 0.0);
    }

    #[test]
    fn cutmix_lambda_matches_pixel_count() {
        let a = sample(9);
        let mut b = a.clone();
        // mark b's pixels so provenance is observable
        b.image = Tensor::full(&[1, 64, 64], 2.0).unwrap();
        let mut rng = rng_stream!(2, "mix");
        for _ in 0..200 {
            let m = cutmix(&a, &b, &mut rng).unwrap();
            let kept = m.sample.pixels().iter().filter(|&&v| v != 2.0).count();
            let frac = kept as f64 / 4096.0;
            assert!((frac - m.lambda).abs() <= 2.0 / 4096.0);
            assert!(m.cut.x0 + m.cut.w <= 64 && m.cut.y0 + m.cut.h <= 64);
        }
    }

    #[test]
    fn cutmix_dim_mismatch() {
        let a = sample(1);
        let b = generate_phantom(1, View::Lvot, 0, &PhantomConfig::clean(32)).unwrap();
        let mut rng = rng_stream!(3, "mix");
        assert!(cutmix(&a, &b, &mut rng).is_err());
    }
}
