//! Synthetic degradation: blur, bilinear downscale, Gaussian noise, uniform
//! quantization and upscale back, optionally applied twice.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Video;
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

/// Parameter ranges; each clip draws one value per stage uniformly from
/// its range. `None` switches a stage off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationConfig {
    pub blur_sigma: Option<[f64; 2]>,
    pub scale: [f64; 2],
    pub noise_sigma: [f64; 2],
    pub quant_levels: Option<[u32; 2]>,
    pub second_order: bool,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            blur_sigma: Some([0.4, 1.2]),
            scale: [1.5, 2.0],
            noise_sigma: [0.02, 0.06],
            quant_levels: Some([16, 32]),
            second_order: false,
        }
    }
}

impl DegradationConfig {
    /// Every stage at its identity setting.
    pub fn identity() -> Self {
        Self { blur_sigma: None, scale: [1.0, 1.0], noise_sigma: [0.0, 0.0], quant_levels: None, second_order: false }
    }

    pub fn validate(&self) -> Result<()> {
        fn range(field: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
            if !(r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi) {
                return Err(Error::config(field, format!("{r:?} must be an ordered range inside [{lo}, {hi}]")));
            }
            Ok(())
        }
        if let Some(s) = self.blur_sigma {
            range("degrade.blur_sigma", s, 0.2, 3.0)?;
        }
        range("degrade.scale", self.scale, 1.0, 4.0)?;
        range("degrade.noise_sigma", self.noise_sigma, 0.0, 0.1)?;
        if let Some([a, b]) = self.quant_levels {
            range("degrade.quant_levels", [a as f64, b as f64], 8.0, 64.0)?;
        }
        Ok(())
    }
}

/// Concrete parameters of one pass of the chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    pub blur_sigma: f64,
    pub scale: f64,
    pub noise_sigma: f64,
    pub quant_levels: Option<u32>,
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

/// Draws the per-pass parameters for a clip.
pub fn sample_params(cfg: &DegradationConfig, seed: SeedStream) -> Vec<DegradeParams> {
    let passes = if cfg.second_order { 2 } else { 1 };
    (0..passes)
        .map(|k| {
            let mut rng = seed.derive("degrade-params").index(k).rng();
            DegradeParams {
                blur_sigma: cfg.blur_sigma.map_or(0.0, |r| uniform(&mut rng, r)),
                scale: uniform(&mut rng, cfg.scale),
                noise_sigma: uniform(&mut rng, cfg.noise_sigma),
                quant_levels: cfg.quant_levels.map(|[a, b]| rng.gen_range(a..=b)),
            }
        })
        .collect()
}

/// Degrades `v`; deterministic per `(cfg, seed)`, output in `[0, 1]`.
pub fn degrade(v: &Video, cfg: &DegradationConfig, seed: SeedStream) -> Result<Video> {
    cfg.validate()?;
    let mut out = v.clone();
    for (k, p) in sample_params(cfg, seed).iter().enumerate() {
        out = apply(&out, p, seed.derive("degrade-noise").index(k as u64))?;
    }
    Ok(out)
}

/// One pass of the chain with fixed parameters.
pub fn apply(v: &Video, p: &DegradeParams, noise_seed: SeedStream) -> Result<Video> {
    let (h, w) = (v.height(), v.width());
    let lh = ((h as f64 / p.scale).round() as usize).max(1);
    let lw = ((w as f64 / p.scale).round() as usize).max(1);
    let noise = if p.noise_sigma > 0.0 { noise_seed.normals(v.frames() * v.channels() * lh * lw) } else { Vec::new() };
    let mut data = Vec::with_capacity(v.data().len());
    for (i, plane) in v.data().chunks(h * w).enumerate() {
        let mut x = gaussian_blur(plane, h, w, p.blur_sigma);
        x = resize_bilinear(&x, h, w, lh, lw);
        if p.noise_sigma > 0.0 {
            let n = &noise[i * lh * lw..(i + 1) * lh * lw];
            for (a, e) in x.iter_mut().zip(n) {
                *a += p.noise_sigma * e;
            }
        }
        if let Some(levels) = p.quant_levels {
            let q = (levels - 1) as f64;
            for a in x.iter_mut() {
                *a = (a.clamp(0.0, 1.0) * q).round() / q;
            }
        }
        x = resize_bilinear(&x, lh, lw, h, w);
        data.extend(x.into_iter().map(|a| a.clamp(0.0, 1.0)));
    }
    Video::new(Tensor::new(v.tensor().shape().to_vec(), data)?)
}

/// Normalized Gaussian taps for offsets `-r..=r` with `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let j = i.rem_euclid(period);
    (if j >= n as i64 { period - j } else { j }) as usize
}

/// Separable Gaussian blur of an `h x w` plane with reflect padding.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] =
                k.iter().enumerate().map(|(j, kv)| kv * plane[y * w + reflect(x as i64 + j as i64 - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                k.iter().enumerate().map(|(j, kv)| kv * tmp[reflect(y as i64 + j as i64 - r, h) * w + x]).sum();
        }
    }
    out
}

fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Half-pixel-centred bilinear resampling with edge clamping.
pub fn resize_bilinear(plane: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    if (h, w) == (nh, nw) {
        return plane.to_vec();
    }
    let (ty, tx) = (taps(h, nh), taps(w, nw));
    let mut out = Vec::with_capacity(nh * nw);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::psnr;

    fn clip(seed: u64) -> Video {
        let n = 3 * 3 * 16 * 16;
        let mut rng = SeedStream::new(seed).rng();
        Video::new(Tensor::new([3, 3, 16, 16], (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()).unwrap()
    }

    #[test]
    fn identity_chain() {
        let v = clip(1);
        assert_eq!(degrade(&v, &DegradationConfig::identity(), SeedStream::new(3)).unwrap(), v);
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let v = Video::new(Tensor::full([2, 1, 9, 7], 0.37)).unwrap();
        let cfg = DegradationConfig { blur_sigma: Some([2.5, 3.0]), ..DegradationConfig::identity() };
        let out = degrade(&v, &cfg, SeedStream::new(4)).unwrap();
        assert!(out.tensor().max_abs_diff(v.tensor()) < 1e-12);
    }

    #[test]
    fn kernel_properties() {
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
        for s in [0.2, 0.7, 1.0, 3.0] {
            let k = gaussian_kernel(s);
            assert_eq!(k.len(), 2 * (3.0 * s).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(k.windows(2).take(k.len() / 2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn impulse_shows_kernel() {
        let (h, w) = (15, 15);
        let mut plane = vec![0.0; h * w];
        plane[7 * w + 7] = 1.0;
        let sigma = 1.0;
        let out = gaussian_blur(&plane, h, w, sigma);
        // Direct 2D convolution oracle: outer product of the unnormalized 1D taps.
        let g = |i: i64| (-(i * i) as f64 / 2.0).exp();
        let z: f64 = (-3..=3).map(g).sum();
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                let want = g(dy) * g(dx) / (z * z);
                let got = out[(7 + dy) as usize * w + (7 + dx) as usize];
                assert!((got - want).abs() < 1e-15);
            }
        }
        assert_eq!(out[0], 0.0);
        assert_eq!(gaussian_blur(&plane, h, w, 0.0), plane);
    }

    #[test]
    fn reflect_padding_at_border() {
        // Impulse at the corner mirrors back into the plane.
        let mut plane = vec![0.0; 5 * 5];
        plane[0] = 1.0;
        let out = gaussian_blur(&plane, 5, 5, 0.3);
        let k = gaussian_kernel(0.3);
        let c = k.len() / 2;
        assert!((out[0] - k[c] * k[c]).abs() < 1e-15);
        assert!((out[1] - k[c] * k[c + 1]).abs() < 1e-15);
    }

    #[test]
    fn output_range_and_determinism() {
        let v = clip(2);
        let cfg = DegradationConfig { noise_sigma: [0.1, 0.1], second_order: true, ..DegradationConfig::default() };
        let a = degrade(&v, &cfg, SeedStream::new(8)).unwrap();
        let b = degrade(&v, &cfg, SeedStream::new(8)).unwrap();
        assert_eq!(a.tensor().checksum(), b.tensor().checksum());
        assert!(a.data().iter().all(|x| (0.0..=1.0).contains(x)));
        assert_ne!(a, degrade(&v, &cfg, SeedStream::new(9)).unwrap());
        assert_eq!(sample_params(&cfg, SeedStream::new(8)).len(), 2);
    }

    #[test]
    fn bilinear_resize_hand_values() {
        let p = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(resize_bilinear(&p, 1, 4, 1, 2), vec![0.5, 2.5]);
        assert_eq!(resize_bilinear(&[0.0, 1.0], 1, 2, 1, 4), vec![0.0, 0.25, 0.75, 1.0]);
        assert_eq!(resize_bilinear(&p, 2, 2, 2, 2), p.to_vec());
    }

    #[test]
    fn config_bounds() {
        assert!(DegradationConfig::default().validate().is_ok());
        let bad = [
            DegradationConfig { blur_sigma: Some([0.1, 1.0]), ..Default::default() },
            DegradationConfig { scale: [2.0, 1.5], ..Default::default() },
            DegradationConfig { noise_sigma: [0.0, 0.2], ..Default::default() },
            DegradationConfig { quant_levels: Some([4, 16]), ..Default::default() },
        ];
        for b in bad {
            assert!(b.validate().is_err(), "{b:?}");
        }
    }

    #[test]
    fn psnr_non_increasing_in_noise() {
        let mut last = f64::INFINITY;
        for sigma in [0.0, 0.02, 0.05, 0.1] {
            let cfg = DegradationConfig { noise_sigma: [sigma, sigma], ..DegradationConfig::identity() };
            let mean = (0..20)
                .map(|s| {
                    let v = clip(100 + s);
                    psnr(&v, &degrade(&v, &cfg, SeedStream::new(s)).unwrap()).unwrap()
                })
                .sum::<f64>()
                / 20.0;
            assert!(mean <= last, "{sigma}: {mean} > {last}");
            last = mean;
        }
    }

    proptest::proptest! {
        #[test]
        fn output_stays_in_range_and_is_seeded(
            sigma in 0.2f64..3.0,
            scale in 1.0f64..4.0,
            noise in 0.0f64..0.1,
            levels in 8u32..64,
            second_order: bool,
            seed in 0u64..10_000,
        ) {
            let cfg = DegradationConfig {
                blur_sigma: Some([sigma, sigma]),
                scale: [scale, scale],
                noise_sigma: [noise, noise],
                quant_levels: Some([levels, levels]),
                second_order,
            };
            let v = clip(seed);
            let a = degrade(&v, &cfg, SeedStream::new(seed)).unwrap();
            proptest::prop_assert_eq!(a.tensor().shape(), v.tensor().shape());
            proptest::prop_assert!(a.data().iter().all(|x| (0.0..=1.0).contains(x)));
            proptest::prop_assert_eq!(&a, &degrade(&v, &cfg, SeedStream::new(seed)).unwrap());
        }
    }
}
