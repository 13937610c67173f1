//! Synthetic forward models `y = Φx + n` for the five degradation kinds.
//!
//! Haze and rain are stand-ins: a global-transmission scattering model and
//! additive line-segment streaks. Both are deterministic given their seed.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DegradationKind {
    Noise,
    Blur,
    Haze,
    Rain,
    Lowlight,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] =
        [DegradationKind::Noise, DegradationKind::Blur, DegradationKind::Haze, DegradationKind::Rain, DegradationKind::Lowlight];

    pub fn as_str(self) -> &'static str {
        match self {
            DegradationKind::Noise => "noise",
            DegradationKind::Blur => "blur",
            DegradationKind::Haze => "haze",
            DegradationKind::Rain => "rain",
            DegradationKind::Lowlight => "lowlight",
        }
    }

    /// Text description used as the contrastive label.
    pub fn label(self) -> &'static str {
        match self {
            DegradationKind::Noise => "image with noise",
            DegradationKind::Blur => "image with blur",
            DegradationKind::Haze => "image with haze",
            DegradationKind::Rain => "image with rain",
            DegradationKind::Lowlight => "image with low light",
        }
    }

    /// Parameter names in manifest order.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            DegradationKind::Noise => &["sigma"],
            DegradationKind::Blur => &["kernel_radius", "kernel_sigma"],
            DegradationKind::Haze => &["airlight", "transmission"],
            DegradationKind::Rain => &["streak_count", "streak_length_px", "streak_angle_deg", "streak_intensity"],
            DegradationKind::Lowlight => &["gamma", "gain"],
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DegradationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Param(format!("unknown degradation kind {s:?}")))
    }
}

/// One concrete parameterization of a degradation operator.
#[derive(Clone, Debug, PartialEq)]
pub enum Degradation {
    /// `sigma` in 8-bit units.
    Noise { sigma: f64 },
    Blur { kernel_radius: usize, kernel_sigma: f64 },
    Haze { airlight: f64, transmission: f64 },
    Rain { streak_count: usize, streak_length_px: f64, streak_angle_deg: f64, streak_intensity: f64 },
    Lowlight { gamma: f64, gain: f64 },
}

impl Degradation {
    pub fn kind(&self) -> DegradationKind {
        match self {
            Degradation::Noise { .. } => DegradationKind::Noise,
            Degradation::Blur { .. } => DegradationKind::Blur,
            Degradation::Haze { .. } => DegradationKind::Haze,
            Degradation::Rain { .. } => DegradationKind::Rain,
            Degradation::Lowlight { .. } => DegradationKind::Lowlight,
        }
    }

    /// Values in [`DegradationKind::param_names`] order.
    pub fn values(&self) -> Vec<f64> {
        match *self {
            Degradation::Noise { sigma } => vec![sigma],
            Degradation::Blur { kernel_radius, kernel_sigma } => vec![kernel_radius as f64, kernel_sigma],
            Degradation::Haze { airlight, transmission } => vec![airlight, transmission],
            Degradation::Rain { streak_count, streak_length_px, streak_angle_deg, streak_intensity } => {
                vec![streak_count as f64, streak_length_px, streak_angle_deg, streak_intensity]
            }
            Degradation::Lowlight { gamma, gain } => vec![gamma, gain],
        }
    }

    /// Builds from values in [`DegradationKind::param_names`] order.
    pub fn from_values(kind: DegradationKind, v: &[f64]) -> Result<Self> {
        let want = kind.param_names().len();
        if v.len() != want {
            return Err(Error::Param(format!("{kind} takes {want} parameters, got {}", v.len())));
        }
        let count = |x: f64, name: &str| {
            if x < 0.0 || x.fract() != 0.0 {
                Err(Error::Param(format!("{name} must be a non-negative integer, got {x}")))
            } else {
                Ok(x as usize)
            }
        };
        let d = match kind {
            DegradationKind::Noise => Degradation::Noise { sigma: v[0] },
            DegradationKind::Blur => Degradation::Blur { kernel_radius: count(v[0], "kernel_radius")?, kernel_sigma: v[1] },
            DegradationKind::Haze => Degradation::Haze { airlight: v[0], transmission: v[1] },
            DegradationKind::Rain => Degradation::Rain {
                streak_count: count(v[0], "streak_count")?,
                streak_length_px: v[1],
                streak_angle_deg: v[2],
                streak_intensity: v[3],
            },
            DegradationKind::Lowlight => Degradation::Lowlight { gamma: v[0], gain: v[1] },
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        match *self {
            Degradation::Noise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => bad(format!("noise sigma {sigma} < 0")),
            Degradation::Blur { kernel_radius, kernel_sigma } if kernel_radius > 0 && !(kernel_sigma > 0.0) => {
                bad(format!("blur kernel_sigma {kernel_sigma} must be positive"))
            }
            Degradation::Haze { airlight, .. } if !(0.0..=1.0).contains(&airlight) => bad(format!("airlight {airlight} outside [0,1]")),
            Degradation::Haze { transmission, .. } if !(transmission > 0.0 && transmission <= 1.0) => {
                bad(format!("transmission {transmission} outside (0,1]"))
            }
            Degradation::Rain { streak_length_px, streak_intensity, streak_angle_deg, .. }
                if !(streak_length_px >= 0.0 && (0.0..=1.0).contains(&streak_intensity) && streak_angle_deg.is_finite()) =>
            {
                bad("rain streak length must be >= 0 and intensity in [0,1]".into())
            }
            Degradation::Lowlight { gamma, .. } if !(gamma >= 1.0 && gamma.is_finite()) => bad(format!("lowlight gamma {gamma} < 1")),
            Degradation::Lowlight { gain, .. } if !(gain > 0.0 && gain <= 1.0) => bad(format!("lowlight gain {gain} outside (0,1]")),
            _ => Ok(()),
        }
    }

    /// `name=value` pairs joined by commas.
    pub fn flatten(&self) -> String {
        self.kind()
            .param_names()
            .iter()
            .zip(self.values())
            .map(|(n, v)| format!("{n}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_flat(kind: DegradationKind, s: &str) -> Result<Self> {
        let mut vals = Vec::new();
        for (i, part) in s.split(',').enumerate() {
            let (k, v) = part.split_once('=').ok_or_else(|| Error::Param(format!("malformed parameter {part:?}")))?;
            if kind.param_names().get(i) != Some(&k) {
                return Err(Error::Param(format!("unexpected parameter {k:?} for {kind}")));
            }
            vals.push(v.parse::<f64>().map_err(|_| Error::Param(format!("bad number {v:?}")))?);
        }
        Degradation::from_values(kind, &vals)
    }
}

/// A degradation together with the seed of its random component.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    pub degradation: Degradation,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(degradation: Degradation, seed: u64) -> Self {
        DegradationSpec { degradation, seed }
    }

    pub fn kind(&self) -> DegradationKind {
        self.degradation.kind()
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        match self.degradation {
            Degradation::Noise { sigma } => apply_noise(img, sigma, self.seed),
            Degradation::Blur { kernel_radius, kernel_sigma } => apply_blur(img, kernel_radius, kernel_sigma),
            Degradation::Haze { airlight, transmission } => apply_haze(img, airlight, transmission),
            Degradation::Rain { .. } => apply_rain(img, self),
            Degradation::Lowlight { gamma, gain } => apply_lowlight(img, gamma, gain),
        }
    }
}

/// SplitMix64 finalizer combining two seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Additive i.i.d. Gaussian noise with standard deviation `sigma/255`.
pub fn apply_noise(img: &Image, sigma: f64, seed: u64) -> Result<Image> {
    Degradation::Noise { sigma }.validate()?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma / 255.0).expect("validated sigma");
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    Ok(out.clamp01())
}

/// Normalized `(2r+1)²` Gaussian kernel, row-major.
pub fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let k1 = gaussian_kernel_1d(radius, sigma);
    let n = k1.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = k1[i] * k1[j];
        }
    }
    k
}

fn gaussian_kernel_1d(radius: usize, sigma: f64) -> Vec<f64> {
    if radius == 0 {
        return vec![1.0];
    }
    let r = radius as isize;
    let w: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mirror index without repeating the edge sample (`-1 → 1`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Convolution with a normalized Gaussian kernel, reflect-padded borders.
pub fn apply_blur(img: &Image, kernel_radius: usize, kernel_sigma: f64) -> Result<Image> {
    Degradation::Blur { kernel_radius, kernel_sigma }.validate()?;
    if kernel_radius == 0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel_1d(kernel_radius, kernel_sigma);
    let r = kernel_radius as isize;
    let (w, h) = (img.width(), img.height());
    let mut tmp = Image::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let s: f64 = (-r..=r).map(|d| k[(d + r) as usize] * img.get(reflect(x as isize + d, w), y, c)).sum();
                tmp.set(x, y, c, s);
            }
        }
    }
    let mut out = Image::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let s: f64 = (-r..=r).map(|d| k[(d + r) as usize] * tmp.get(x, reflect(y as isize + d, h), c)).sum();
                out.set(x, y, c, s);
            }
        }
    }
    Ok(out.clamp01())
}

/// Atmospheric scattering with global transmission: `x·t + A·(1−t)`.
pub fn apply_haze(img: &Image, airlight: f64, transmission: f64) -> Result<Image> {
    Degradation::Haze { airlight, transmission }.validate()?;
    Ok(img.map(|v| v * transmission + airlight * (1.0 - transmission)).clamp01())
}

/// Streak mask (single channel, `H×W`) for a rain spec.
pub fn rain_mask(width: usize, height: usize, spec: &DegradationSpec) -> Result<Vec<f64>> {
    let Degradation::Rain { streak_count, streak_length_px, streak_angle_deg, streak_intensity } = spec.degradation else {
        return Err(Error::Param(format!("rain operator given a {} spec", spec.kind())));
    };
    spec.degradation.validate()?;
    let mut mask = vec![0.0; width * height];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let theta = streak_angle_deg.to_radians();
    let (dx, dy) = (theta.sin(), theta.cos());
    let steps = (streak_length_px * 2.0).ceil() as usize;
    for _ in 0..streak_count {
        let x0 = rng.random::<f64>() * width as f64;
        let y0 = rng.random::<f64>() * height as f64;
        for s in 0..=steps {
            let t = s as f64 * 0.5;
            let (px, py) = ((x0 + t * dx).floor(), (y0 + t * dy).floor());
            if px < 0.0 || py < 0.0 || px >= width as f64 || py >= height as f64 {
                continue;
            }
            let i = py as usize * width + px as usize;
            mask[i] = streak_intensity;
        }
    }
    Ok(mask)
}

/// Additive clamped overlay of seeded line-segment streaks.
pub fn apply_rain(img: &Image, spec: &DegradationSpec) -> Result<Image> {
    let mask = rain_mask(img.width(), img.height(), spec)?;
    let mut out = img.clone();
    for (i, px) in out.data_mut().chunks_mut(3).enumerate() {
        px.iter_mut().for_each(|v| *v += mask[i]);
    }
    Ok(out.clamp01())
}

/// `gain · x^gamma` per channel.
pub fn apply_lowlight(img: &Image, gamma: f64, gain: f64) -> Result<Image> {
    Degradation::Lowlight { gamma, gain }.validate()?;
    Ok(img.map(|v| gain * v.max(0.0).powf(gamma)).clamp01())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y, c| (x as f64 * 0.03 + y as f64 * 0.02 + c as f64 * 0.1).min(1.0))
    }

    #[test]
    fn zero_parameters_are_identity() {
        let img = ramp(9, 7);
        assert_eq!(apply_noise(&img, 0.0, 3).unwrap(), img);
        assert_eq!(apply_blur(&img, 0, 0.0).unwrap(), img);
        assert_eq!(apply_haze(&img, 0.7, 1.0).unwrap(), img);
        assert_eq!(apply_lowlight(&img, 1.0, 1.0).unwrap(), img);
        let rain = |count, intensity| DegradationSpec::new(
            Degradation::Rain { streak_count: count, streak_length_px: 6.0, streak_angle_deg: 10.0, streak_intensity: intensity },
            5,
        );
        assert_eq!(apply_rain(&img, &rain(0, 0.5)).unwrap(), img);
        assert_eq!(apply_rain(&img, &rain(30, 0.0)).unwrap(), img);
    }

    #[test]
    fn negative_sigma_is_rejected() {
        assert!(matches!(apply_noise(&ramp(3, 3), -1.0, 0), Err(Error::Param(_))));
        assert!(apply_blur(&ramp(3, 3), 2, 0.0).is_err());
        assert!(apply_haze(&ramp(3, 3), 1.2, 0.5).is_err());
        assert!(apply_haze(&ramp(3, 3), 0.5, 0.0).is_err());
        assert!(apply_lowlight(&ramp(3, 3), 0.5, 0.5).is_err());
        assert!(apply_lowlight(&ramp(3, 3), 2.0, 0.0).is_err());
        assert!(Degradation::from_values(DegradationKind::Rain, &[-3.0, 4.0, 0.0, 0.5]).is_err());
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let img = Image::filled(8, 6, 0.37);
        let out = apply_blur(&img, 3, 1.7).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn blur_of_impulse_reproduces_kernel() {
        let mut img = Image::filled(7, 7, 0.0);
        for c in 0..3 {
            img.set(3, 3, c, 1.0);
        }
        let out = apply_blur(&img, 1, 1.0).unwrap();
        // Direct evaluation of exp(-(i²+j²)/2) normalized over the 3×3 support.
        let raw = |i: i32, j: i32| (-((i * i + j * j) as f64) / 2.0).exp();
        let z: f64 = (-1..=1).flat_map(|i| (-1..=1).map(move |j| raw(i, j))).sum();
        for dy in -1..=1i32 {
            for dx in -1..=1i32 {
                let got = out.get((3 + dx) as usize, (3 + dy) as usize, 1);
                assert!((got - raw(dx, dy) / z).abs() < 1e-12);
            }
        }
        assert_eq!(out.get(5, 3, 0), 0.0);
    }

    #[test]
    fn blur_preserves_linear_interior() {
        let img = Image::from_fn(20, 20, |x, y, _| 0.2 + 0.01 * x as f64 + 0.015 * y as f64);
        let out = apply_blur(&img, 3, 1.2).unwrap();
        for y in 3..17 {
            for x in 3..17 {
                assert!((out.get(x, y, 0) - img.get(x, y, 0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn haze_hand_values() {
        let img = Image::filled(2, 2, 0.2);
        let out = apply_haze(&img, 0.8, 0.5).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
        let limit = apply_haze(&ramp(6, 6), 0.8, 1e-6).unwrap();
        assert!(limit.data().iter().all(|v| (v - 0.8).abs() < 1e-5));
    }

    #[test]
    fn lowlight_hand_values() {
        let one = apply_lowlight(&Image::filled(1, 1, 1.0), 2.0, 0.5).unwrap();
        assert_eq!(one.get(0, 0, 0), 0.5);
        let half = apply_lowlight(&Image::filled(1, 1, 0.5), 2.0, 0.8).unwrap();
        assert!((half.get(0, 0, 2) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn rain_on_black_is_the_mask_and_repeatable() {
        let spec = DegradationSpec::new(
            Degradation::Rain { streak_count: 50, streak_length_px: 8.0, streak_angle_deg: 15.0, streak_intensity: 0.6 },
            99,
        );
        let black = Image::filled(32, 32, 0.0);
        let a = apply_rain(&black, &spec).unwrap();
        let b = apply_rain(&black, &spec).unwrap();
        let mask = rain_mask(32, 32, &spec).unwrap();
        for (i, px) in a.data().chunks(3).enumerate() {
            assert!(px.iter().all(|v| *v == mask[i]));
        }
        let bits = |im: &Image| im.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(mask.iter().filter(|v| **v > 0.0).count() > 50);
    }

    #[test]
    fn flatten_round_trip() {
        let d = Degradation::Rain { streak_count: 12, streak_length_px: 5.5, streak_angle_deg: -10.0, streak_intensity: 0.4 };
        let s = d.flatten();
        assert_eq!(s, "streak_count=12,streak_length_px=5.5,streak_angle_deg=-10,streak_intensity=0.4");
        assert_eq!(Degradation::parse_flat(DegradationKind::Rain, &s).unwrap(), d);
    }

    fn arb_degradation() -> impl Strategy<Value = Degradation> {
        prop_oneof![
            (0.0..80.0f64).prop_map(|sigma| Degradation::Noise { sigma }),
            (0usize..4, 0.3..3.0f64).prop_map(|(r, s)| Degradation::Blur { kernel_radius: r, kernel_sigma: s }),
            (0.0..=1.0f64, 0.01..=1.0f64).prop_map(|(a, t)| Degradation::Haze { airlight: a, transmission: t }),
            (0usize..40, 0.0..12.0f64, -45.0..45.0f64, 0.0..=1.0f64).prop_map(|(c, l, a, i)| Degradation::Rain {
                streak_count: c,
                streak_length_px: l,
                streak_angle_deg: a,
                streak_intensity: i
            }),
            (1.0..4.0f64, 0.05..=1.0f64).prop_map(|(g, k)| Degradation::Lowlight { gamma: g, gain: k }),
        ]
    }

    proptest! {
        #[test]
        fn operators_stay_in_unit_range_and_are_pure(d in arb_degradation(), seed in any::<u64>(), base in 0.0..1.0f64) {
            let img = Image::from_fn(12, 10, |x, y, c| ((x * 13 + y * 7 + c * 5) as f64 * 0.0137 + base).fract());
            let spec = DegradationSpec::new(d, seed);
            let a = spec.apply(&img).unwrap();
            let b = spec.apply(&img).unwrap();
            prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn haze_is_affine(alpha in 0.0..=1.0f64, a in 0.0..=1.0f64, t in 0.01..=1.0f64) {
            let u = Image::from_fn(5, 4, |x, y, c| ((x + 2 * y + c) as f64 * 0.07).fract());
            let v = Image::from_fn(5, 4, |x, y, c| ((3 * x + y + 2 * c) as f64 * 0.11).fract());
            let mix = Image::from_fn(5, 4, |x, y, c| alpha * u.get(x, y, c) + (1.0 - alpha) * v.get(x, y, c));
            let lhs = apply_haze(&mix, a, t).unwrap();
            let hu = apply_haze(&u, a, t).unwrap();
            let hv = apply_haze(&v, a, t).unwrap();
            for i in 0..lhs.data().len() {
                let rhs = alpha * hu.data()[i] + (1.0 - alpha) * hv.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn noise_variance_matches_sigma_before_clamping() {
        // Mid-gray sits 5.1 std from either clamp bound at sigma=25.
        let sigma = 25.0;
        let img = Image::filled(4, 4, 0.5);
        let draws = 1000;
        let mut sum = vec![0.0; 48];
        let mut sq = vec![0.0; 48];
        for s in 0..draws {
            let out = apply_noise(&img, sigma, s).unwrap();
            for (i, v) in out.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let want = (sigma / 255.0f64).powi(2);
        let mean_var: f64 = (0..48)
            .map(|i| {
                let m = sum[i] / draws as f64;
                sq[i] / draws as f64 - m * m
            })
            .sum::<f64>()
            / 48.0;
        assert!((mean_var / want - 1.0).abs() < 0.05, "variance {mean_var} vs {want}");
    }
}
