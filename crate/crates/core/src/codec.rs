//! Lossless analytic latent codec.
//!
//! `encode` is a space-to-depth rearrangement by [`SPATIAL_FACTOR`] followed
//! by the affine map `z = (p - 0.5) * 2`; `decode` inverts both and clamps to
//! `[0, 1]`. There is no temporal compression. The round trip is bit-exact
//! for pixel values on a dyadic grid `k / 2^m` (m <= 52), which covers every
//! clip produced by [`crate::data`] and every value read from an 8-bit file
//! after [`quantize_to_grid`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SPATIAL_FACTOR: usize = 2;

/// Pixel-space clip, shape `[frames, channels, height, width]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    tensor: Tensor,
}

impl Video {
    /// Validates rank, channel count and range.
    pub fn new(tensor: Tensor) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 {
            return Err(Error::invalid("video", format!("expected [F, C, H, W], got {s:?}")));
        }
        if s[1] != 1 && s[1] != 3 {
            return Err(Error::invalid("video", format!("channels must be 1 or 3, got {}", s[1])));
        }
        if tensor.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("video", "pixel values must lie in [0, 1]"));
        }
        Ok(Self { tensor })
    }

    /// Like [`Video::new`] but clamps out-of-range values instead of failing.
    pub fn clamped(tensor: Tensor) -> Result<Self> {
        Self::new(tensor.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn from_fn(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        f: impl FnMut(usize) -> f64,
    ) -> Result<Self> {
        Self::clamped(Tensor::from_fn([frames, channels, height, width], f))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }

    pub fn frame_len(&self) -> usize {
        self.channels() * self.height() * self.width()
    }

    /// Pixels of one frame, channel-major.
    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data()[f * n..(f + 1) * n]
    }

    /// Copies the spatial window `[top, top+h) x [left, left+w)` of every frame.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Video> {
        if top + h > self.height() || left + w > self.width() || h == 0 || w == 0 {
            return Err(Error::invalid(
                "crop",
                format!("window {h}x{w} at ({top}, {left}) exceeds {}x{}", self.height(), self.width()),
            ));
        }
        let (c, hh, ww) = (self.channels(), self.height(), self.width());
        let mut out = Vec::with_capacity(self.frames() * c * h * w);
        for f in 0..self.frames() {
            for ch in 0..c {
                for y in top..top + h {
                    let row = ((f * c + ch) * hh + y) * ww;
                    out.extend_from_slice(&self.data()[row + left..row + left + w]);
                }
            }
        }
        Video::new(Tensor::new([self.frames(), c, h, w], out)?)
    }
}

/// Codec-space clip, shape `[frames, channels * f^2, height / f, width / f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    tensor: Tensor,
}

impl LatentVideo {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 4 {
            return Err(Error::invalid("latent", format!("expected [F, C, H, W], got {:?}", tensor.shape())));
        }
        Ok(Self { tensor })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { tensor: Tensor::zeros(shape) }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.tensor.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { tensor: self.tensor.map(f) }
    }

    pub fn zip_map(&self, other: &LatentVideo, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        Ok(Self { tensor: self.tensor.zip_map(&other.tensor, f)? })
    }

    pub fn mean_squared_distance(&self, other: &LatentVideo) -> Result<f64> {
        let d = self.zip_map(other, |a, b| (a - b) * (a - b))?;
        Ok(d.data().iter().sum::<f64>() / d.data().len() as f64)
    }

    pub fn cosine_similarity(&self, other: &LatentVideo) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "cosine_similarity",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            }
            .into());
        }
        let dot: f64 = self.data().iter().zip(other.data()).map(|(a, b)| a * b).sum();
        let na: f64 = self.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = other.data().iter().map(|b| b * b).sum::<f64>().sqrt();
        Ok(dot / (na * nb).max(1e-300))
    }
}

/// Rounds pixel values to the nearest multiple of `2^-bits`.
pub fn quantize_to_grid(v: f64, bits: u32) -> f64 {
    let scale = f64::from(1u32 << bits);
    (v * scale).round() / scale
}

pub fn encode(v: &Video) -> Result<LatentVideo> {
    let f = SPATIAL_FACTOR;
    let (frames, c, h, w) = (v.frames(), v.channels(), v.height(), v.width());
    if h % f != 0 || w % f != 0 {
        return Err(Error::invalid(
            "encode",
            format!("height {h} and width {w} must be divisible by the spatial factor f={f}"),
        ));
    }
    let (lh, lw) = (h / f, w / f);
    let lc = c * f * f;
    let mut out = vec![0.0; frames * lc * lh * lw];
    for t in 0..frames {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let p = v.data()[((t * c + ch) * h + y) * w + x];
                    let z = (ch * f + y % f) * f + x % f;
                    out[((t * lc + z) * lh + y / f) * lw + x / f] = (p - 0.5) * 2.0;
                }
            }
        }
    }
    LatentVideo::new(Tensor::new([frames, lc, lh, lw], out)?)
}

/// Inverse of [`encode`], clamping pixels to `[0, 1]`.
pub fn decode(z: &LatentVideo) -> Result<Video> {
    let f = SPATIAL_FACTOR;
    let [frames, lc, lh, lw] = z.shape();
    if lc % (f * f) != 0 || !matches!(lc / (f * f), 1 | 3) {
        return Err(Error::invalid("decode", format!("latent channels {lc} must be 1 or 3 times f^2 (f={f})")));
    }
    let c = lc / (f * f);
    let (h, w) = (lh * f, lw * f);
    let mut out = vec![0.0; frames * c * h * w];
    for t in 0..frames {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let zc = (ch * f + y % f) * f + x % f;
                    let zv = z.data()[((t * lc + zc) * lh + y / f) * lw + x / f];
                    out[((t * c + ch) * h + y) * w + x] = (zv / 2.0 + 0.5).clamp(0.0, 1.0);
                }
            }
        }
    }
    Video::new(Tensor::new([frames, c, h, w], out)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rng::SeedStream;
    use rand::Rng;

    fn grid_video(seed: u64, frames: usize, c: usize, h: usize, w: usize) -> Video {
        let mut rng = SeedStream::new(seed).rng();
        Video::from_fn(frames, c, h, w, |_| f64::from(rng.gen::<u16>()) / 65536.0).unwrap()
    }

    #[test]
    fn constant_half_encodes_to_zero() {
        let v = Video::from_fn(2, 3, 4, 4, |_| 0.5).unwrap();
        assert!(encode(&v).unwrap().data().iter().all(|&z| z == 0.0));
        assert_eq!(decode(&LatentVideo::zeros([2, 12, 2, 2])).unwrap(), v);
    }

    #[test]
    fn two_by_two_rearrangement() {
        let (a, b, c, d) = (0.125, 0.25, 0.75, 1.0);
        let v = Video::new(Tensor::new([1, 1, 2, 2], vec![a, b, c, d]).unwrap()).unwrap();
        let z = encode(&v).unwrap();
        assert_eq!(z.shape(), [1, 4, 1, 1]);
        assert_eq!(z.data(), &[2.0 * a - 1.0, 2.0 * b - 1.0, 2.0 * c - 1.0, 2.0 * d - 1.0]);
    }

    #[test]
    fn indivisible_dims_name_the_factor() {
        let v = Video::from_fn(1, 1, 3, 4, |_| 0.0).unwrap();
        let msg = encode(&v).unwrap_err().to_string();
        assert!(msg.contains("f=2"), "{msg}");
    }

    #[test]
    fn decode_clamps() {
        let z = LatentVideo::new(Tensor::full([1, 4, 1, 1], 3.0)).unwrap();
        assert!(decode(&z).unwrap().data().iter().all(|&p| p == 1.0));
        let z = LatentVideo::new(Tensor::full([1, 4, 1, 1], -3.0)).unwrap();
        assert!(decode(&z).unwrap().data().iter().all(|&p| p == 0.0));
        assert!(decode(&LatentVideo::zeros([1, 8, 1, 1])).is_err());
    }

    #[test]
    fn encode_decode_identity_on_in_range_latents() {
        let mut rng = SeedStream::new(3).rng();
        let z = LatentVideo::new(Tensor::from_fn([2, 12, 3, 3], |_| f64::from(rng.gen_range(-256i32..=256)) / 256.0))
            .unwrap();
        assert_eq!(encode(&decode(&z).unwrap()).unwrap(), z);
    }

    #[test]
    fn crop_window() {
        let v = Video::from_fn(1, 1, 4, 4, |i| i as f64 / 16.0).unwrap();
        let c = v.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.data(), &[6.0 / 16.0, 7.0 / 16.0, 10.0 / 16.0, 11.0 / 16.0]);
        assert!(v.crop(3, 3, 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn lossless_on_grid(seed in 0u64..10_000, frames in 1usize..4, rgb in any::<bool>(), h in 1usize..5, w in 1usize..5) {
            let v = grid_video(seed, frames, if rgb { 3 } else { 1 }, 2 * h, 2 * w);
            prop_assert_eq!(decode(&encode(&v).unwrap()).unwrap(), v);
        }

        #[test]
        fn encode_is_affine(seed in 0u64..10_000, alpha in 0.0f64..1.0) {
            let (a, b) = (grid_video(seed, 2, 3, 4, 4), grid_video(seed + 1, 2, 3, 4, 4));
            let mix = Video::new(a.tensor().zip_map(b.tensor(), |x, y| alpha * x + (1.0 - alpha) * y).unwrap()).unwrap();
            let lhs = encode(&mix).unwrap();
            let (za, zb) = (encode(&a).unwrap(), encode(&b).unwrap());
            let rhs = za.zip_map(&zb, |x, y| alpha * x + (1.0 - alpha) * y).unwrap();
            prop_assert!(lhs.tensor().max_abs_diff(rhs.tensor()) < 1e-12);
        }
    }
}
