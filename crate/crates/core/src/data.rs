//! Procedural toy clips with captions, quality scoring, and the on-disk
//! dataset format (a `VVT1` container plus a JSON manifest sidecar).
//!
//! Each clip shows one textured object drifting over a patterned background
//! with wrap-around motion. Captions name the object's shape, colour,
//! direction of travel and texture.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Video;
use crate::error::{Error, Result};
use crate::io::Container;
use crate::net::CaptionTokens;
use crate::rng::SeedStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Disk,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    Checker,
    Stripes,
}

const SHAPES: [Shape; 3] = [Shape::Square, Shape::Disk, Shape::Bar];
const TEXTURES: [Texture; 3] = [Texture::Solid, Texture::Checker, Texture::Stripes];

/// Object colours, indexed by colour id.
pub const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.15, 0.15],
    [0.15, 0.85, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.9, 0.2],
    [0.2, 0.9, 0.9],
    [0.9, 0.25, 0.9],
    [0.95, 0.95, 0.95],
    [0.55, 0.55, 0.55],
];

/// Unit steps for the eight compass directions, starting east and turning
/// counter-clockwise (image y grows downward).
pub const DIRECTIONS: [(i64, i64); 8] = [(1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1)];

/// Vocabulary layout: 0 is padding, then shapes, colours, directions, textures.
pub mod vocab {
    pub const SHAPE: u32 = 1;
    pub const COLOR: u32 = 4;
    pub const DIRECTION: u32 = 12;
    pub const TEXTURE: u32 = 20;
    pub const SIZE: u32 = 23;
    /// Words in a caption.
    pub const WORDS: usize = 4;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub background: u8,
    pub background_level: f64,
    pub shape: Shape,
    pub color: u8,
    pub direction: u8,
    pub speed: u8,
    pub size: usize,
    pub texture: Texture,
    pub start: (usize, usize),
}

/// The attributes a caption names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionSpec {
    pub shape: Shape,
    pub color: u8,
    pub direction: u8,
    pub texture: Texture,
}

impl CaptionSpec {
    pub fn of(scene: &Scene) -> Self {
        Self { shape: scene.shape, color: scene.color, direction: scene.direction, texture: scene.texture }
    }

    pub fn words(&self) -> [u32; vocab::WORDS] {
        let s = SHAPES.iter().position(|&x| x == self.shape).unwrap() as u32;
        let t = TEXTURES.iter().position(|&x| x == self.texture).unwrap() as u32;
        [
            vocab::SHAPE + s,
            vocab::COLOR + u32::from(self.color),
            vocab::DIRECTION + u32::from(self.direction),
            vocab::TEXTURE + t,
        ]
    }

    pub fn tokens(&self, len: usize) -> Result<CaptionTokens> {
        CaptionTokens::padded(&self.words(), len)
    }

    /// Inverse of [`CaptionSpec::tokens`].
    pub fn decode(c: &CaptionTokens) -> Result<Self> {
        let w = c.words();
        let bad = || Error::invalid("caption", format!("cannot decode {:?}", c.ids()));
        if w.len() != vocab::WORDS {
            return Err(bad());
        }
        let in_range = |v: u32, lo: u32, hi: u32| if (lo..hi).contains(&v) { Ok(v - lo) } else { Err(bad()) };
        Ok(Self {
            shape: SHAPES[in_range(w[0], vocab::SHAPE, vocab::COLOR)? as usize],
            color: in_range(w[1], vocab::COLOR, vocab::DIRECTION)? as u8,
            direction: in_range(w[2], vocab::DIRECTION, vocab::TEXTURE)? as u8,
            texture: TEXTURES[in_range(w[3], vocab::TEXTURE, vocab::SIZE)? as usize],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedClip {
    pub video: Video,
    pub caption: CaptionSpec,
    pub scene: Scene,
    pub misaligned: bool,
}

fn sample_scene(rng: &mut impl Rng, h: usize, w: usize) -> Scene {
    let min = h.min(w);
    Scene {
        background: rng.gen_range(0..4),
        background_level: rng.gen_range(0.1..0.4),
        shape: SHAPES[rng.gen_range(0..3)],
        color: rng.gen_range(0..PALETTE.len() as u8),
        direction: rng.gen_range(0..8),
        speed: rng.gen_range(1..=2),
        size: rng.gen_range((min / 4).max(2)..=(min / 2).max(2)),
        texture: TEXTURES[rng.gen_range(0..3)],
        start: (rng.gen_range(0..h), rng.gen_range(0..w)),
    }
}

fn background(scene: &Scene, y: usize, x: usize, h: usize, w: usize) -> f64 {
    let b = scene.background_level;
    match scene.background {
        0 => b,
        1 => b + 0.2 * x as f64 / w as f64,
        2 => b + 0.2 * y as f64 / h as f64,
        _ => b + if ((x + y) / 4).is_multiple_of(2) { 0.1 } else { 0.0 },
    }
}

/// Signed wrap-around offset from `c` to `p` on a ring of length `n`.
fn ring(p: usize, c: usize, n: usize) -> f64 {
    let d = (p as i64 - c as i64).rem_euclid(n as i64);
    (if d > n as i64 / 2 { d - n as i64 } else { d }) as f64
}

/// Rasterizes a scene into `[frames, 3, h, w]`.
pub fn render(scene: &Scene, frames: usize, h: usize, w: usize) -> Result<Video> {
    let (dx, dy) = DIRECTIONS[scene.direction as usize];
    let speed = i64::from(scene.speed);
    let r = scene.size as f64 / 2.0;
    let color = PALETTE[scene.color as usize];
    let mut data = vec![0.0; frames * 3 * h * w];
    for f in 0..frames {
        let cy = (scene.start.0 as i64 + dy * speed * f as i64).rem_euclid(h as i64) as usize;
        let cx = (scene.start.1 as i64 + dx * speed * f as i64).rem_euclid(w as i64) as usize;
        for y in 0..h {
            for x in 0..w {
                let (oy, ox) = (ring(y, cy, h), ring(x, cx, w));
                let inside = match scene.shape {
                    Shape::Square => oy.abs() < r && ox.abs() < r,
                    Shape::Disk => oy * oy + ox * ox < r * r,
                    Shape::Bar => oy.abs() < (r / 2.0).max(1.0) && ox.abs() < r * 1.5,
                };
                let gain = if !inside {
                    None
                } else {
                    Some(match scene.texture {
                        Texture::Solid => 1.0,
                        Texture::Checker => {
                            if ((oy + 64.0) as i64 / 2 + (ox + 64.0) as i64 / 2) % 2 == 0 {
                                1.0
                            } else {
                                0.55
                            }
                        }
                        Texture::Stripes => {
                            if (ox + 64.0) as i64 / 2 % 2 == 0 {
                                1.0
                            } else {
                                0.45
                            }
                        }
                    })
                };
                for c in 0..3 {
                    let v = match gain {
                        Some(g) => color[c] * g,
                        None => background(scene, y, x, h, w),
                    };
                    data[((f * 3 + c) * h + y) * w + x] = v;
                }
            }
        }
    }
    Video::new(Tensor::new([frames, 3, h, w], data)?)
}

/// A clip, its caption and scene; with probability `misalignment_rate`
/// one caption attribute is replaced by a different random value.
pub fn gen_clip(seed: SeedStream, frames: usize, h: usize, w: usize, misalignment_rate: f64) -> Result<GeneratedClip> {
    if frames == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("gen_clip", "frames and extents must be positive"));
    }
    let mut rng = seed.derive("scene").rng();
    let scene = sample_scene(&mut rng, h, w);
    let video = render(&scene, frames, h, w)?;
    let mut caption = CaptionSpec::of(&scene);
    let mut mrng = seed.derive("misalign").rng();
    let misaligned = mrng.gen_bool(misalignment_rate.clamp(0.0, 1.0));
    if misaligned {
        match mrng.gen_range(0..4) {
            0 => {
                caption.shape =
                    SHAPES[(SHAPES.iter().position(|&s| s == scene.shape).unwrap() + mrng.gen_range(1..3)) % 3]
            }
            1 => caption.color = (scene.color + mrng.gen_range(1..PALETTE.len() as u8)) % PALETTE.len() as u8,
            2 => caption.direction = (scene.direction + mrng.gen_range(1..8)) % 8,
            _ => {
                caption.texture =
                    TEXTURES[(TEXTURES.iter().position(|&t| t == scene.texture).unwrap() + mrng.gen_range(1..3)) % 3]
            }
        }
    }
    Ok(GeneratedClip { video, caption, scene, misaligned })
}

/// Variance of the 4-neighbour Laplacian over interior pixels of every
/// channel plane.
pub fn sharpness(v: &Video) -> f64 {
    let (h, w) = (v.height(), v.width());
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut vals = Vec::new();
    for plane in v.data().chunks(h * w) {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let p = |yy: usize, xx: usize| plane[yy * w + xx];
                vals.push(4.0 * p(y, x) - p(y - 1, x) - p(y + 1, x) - p(y, x - 1) - p(y, x + 1));
            }
        }
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|l| (l - m) * (l - m)).sum::<f64>() / vals.len() as f64
}

/// Mean absolute change of the per-frame mean intensity.
pub fn flicker(v: &Video) -> f64 {
    let f = v.frames();
    if f < 2 {
        return 0.0;
    }
    let means: Vec<f64> = (0..f).map(|t| v.frame(t).iter().sum::<f64>() / v.frame_len() as f64).collect();
    means.windows(2).map(|m| (m[1] - m[0]).abs()).sum::<f64>() / (f - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityThresholds {
    pub min_sharpness: f64,
    pub max_flicker: f64,
}

impl QualityThresholds {
    pub fn accepts(&self, v: &Video) -> bool {
        sharpness(v) >= self.min_sharpness && flicker(v) <= self.max_flicker
    }
}

/// Keeps the items whose video passes both thresholds, in order.
pub fn quality_filter<T: Clone>(items: &[T], video: impl Fn(&T) -> &Video, th: &QualityThresholds) -> Result<Vec<T>> {
    if th.min_sharpness.is_nan() || th.max_flicker.is_nan() {
        return Err(Error::invalid("quality_filter", "thresholds must not be NaN"));
    }
    Ok(items.iter().filter(|i| th.accepts(video(i))).cloned().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Real,
    Distilled,
}

/// A clean training clip and its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: String,
    pub seed: u64,
    pub source: SourceTag,
    pub video: Video,
    pub caption: CaptionTokens,
    pub misaligned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub clips: usize,
    pub held_out: usize,
    pub height: usize,
    pub width: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub misalignment_rate: f64,
    pub min_sharpness: f64,
    pub max_flicker: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            clips: 64,
            held_out: 16,
            height: 32,
            width: 32,
            min_frames: 5,
            max_frames: 9,
            misalignment_rate: 0.3,
            min_sharpness: 1e-3,
            max_flicker: 0.05,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 {
            return Err(Error::config("data.clips", "must be positive"));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::config("data.height", "extents must be positive and even"));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::config("data.min_frames", "need 1 <= min_frames <= max_frames"));
        }
        if !(0.0..=1.0).contains(&self.misalignment_rate) {
            return Err(Error::config("data.misalignment_rate", "must lie in [0, 1]"));
        }
        if !self.min_sharpness.is_finite() || self.max_flicker.is_nan() {
            return Err(Error::config("data.min_sharpness", "thresholds must be numbers"));
        }
        Ok(())
    }

    pub fn thresholds(&self) -> QualityThresholds {
        QualityThresholds { min_sharpness: self.min_sharpness, max_flicker: self.max_flicker }
    }
}

/// Generates clips from consecutive seed indices until `count` pass the
/// quality filter.
pub fn generate(
    cfg: &DataConfig,
    count: usize,
    seed: SeedStream,
    caption_len: usize,
    id_prefix: &str,
) -> Result<Vec<Pair>> {
    cfg.validate()?;
    let th = cfg.thresholds();
    let mut out = Vec::with_capacity(count);
    let mut k = 0u64;
    while out.len() < count {
        if k > 100 * count as u64 + 1000 {
            return Err(Error::invalid("generate", "quality filter rejects almost every clip"));
        }
        let s = seed.index(k);
        k += 1;
        let frames = s.derive("frames").rng().gen_range(cfg.min_frames..=cfg.max_frames);
        let clip = gen_clip(s, frames, cfg.height, cfg.width, cfg.misalignment_rate)?;
        if !th.accepts(&clip.video) {
            continue;
        }
        out.push(Pair {
            id: format!("{id_prefix}{:05}", out.len()),
            seed: s.value(),
            source: SourceTag::Real,
            video: clip.video,
            caption: clip.caption.tokens(caption_len)?,
            misaligned: clip.misaligned,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub source: SourceTag,
    pub caption: Vec<u32>,
    pub frames: usize,
    pub misaligned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub counts: BTreeMap<SourceTag, usize>,
    pub clips: Vec<ManifestEntry>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn manifest_of(pairs: &[Pair]) -> Manifest {
    let mut counts = BTreeMap::new();
    counts.insert(SourceTag::Real, 0);
    counts.insert(SourceTag::Distilled, 0);
    for p in pairs {
        *counts.entry(p.source).or_insert(0) += 1;
    }
    Manifest {
        count: pairs.len(),
        counts,
        clips: pairs
            .iter()
            .map(|p| ManifestEntry {
                id: p.id.clone(),
                seed: p.seed,
                source: p.source,
                caption: p.caption.ids().to_vec(),
                frames: p.video.frames(),
                misaligned: p.misaligned,
            })
            .collect(),
    }
}

/// Writes `path` (tensors) and `path.json` (manifest).
pub fn write_dataset(pairs: &[Pair], path: &Path) -> Result<()> {
    let mut c = Container::new();
    for (i, p) in pairs.iter().enumerate() {
        c.push_tensor(format!("clip.{i:05}.video"), p.video.tensor())?;
        c.push_i32(format!("clip.{i:05}.caption"), p.caption.ids().iter().map(|&x| x as i32).collect())?;
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    c.write(path)?;
    let m = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest_of(pairs)).expect("manifest serializes");
    std::fs::write(&m, json).map_err(|e| Error::io(&m, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Pair>> {
    let c = Container::read(path)?;
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing { what: "dataset manifest", path: mpath.clone() }
        } else {
            Error::io(&mpath, e)
        }
    })?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: mpath.clone(),
        offset: 0,
        msg: e.to_string(),
    })?;
    if m.count != m.clips.len() || c.len() != 2 * m.count {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("manifest lists {} clips but the container has {} records", m.count, c.len()),
        });
    }
    m.clips
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let video = Video::new(c.tensor(&format!("clip.{i:05}.video"))?)?;
            let ids: Vec<u32> = c.i32s(&format!("clip.{i:05}.caption"))?.iter().map(|&x| x as u32).collect();
            if ids != e.caption || video.frames() != e.frames {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    offset: 0,
                    msg: format!("clip {} disagrees with its manifest entry", e.id),
                });
            }
            Ok(Pair {
                id: e.id,
                seed: e.seed,
                source: e.source,
                video,
                caption: CaptionTokens::new(ids),
                misaligned: e.misaligned,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clips_are_deterministic_and_captions_decode() {
        for i in 0..20 {
            let s = SeedStream::new(7).index(i);
            let a = gen_clip(s, 5, 16, 16, 0.0).unwrap();
            let b = gen_clip(s, 5, 16, 16, 0.0).unwrap();
            assert_eq!(a.video.tensor().checksum(), b.video.tensor().checksum());
            assert!(!a.misaligned);
            let tokens = a.caption.tokens(8).unwrap();
            assert_eq!(CaptionSpec::decode(&tokens).unwrap(), CaptionSpec::of(&a.scene));
            assert!(tokens.ids().iter().all(|&t| t < 64));
        }
    }

    #[test]
    fn misalignment_rate_monte_carlo() {
        let mut mismatched = 0;
        for i in 0..1000 {
            let c = gen_clip(SeedStream::new(99).index(i), 1, 8, 8, 0.3).unwrap();
            if c.caption != CaptionSpec::of(&c.scene) {
                mismatched += 1;
            }
            assert_eq!(c.misaligned, c.caption != CaptionSpec::of(&c.scene));
        }
        let rate = mismatched as f64 / 1000.0;
        assert!((rate - 0.3).abs() <= 0.03, "{rate}");
    }

    #[test]
    fn object_wraps_and_moves() {
        let c = gen_clip(SeedStream::new(3), 6, 16, 16, 0.0).unwrap();
        assert!(c.video.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(c.video.frame(0), c.video.frame(1));
        // Every frame still shows the object's colour somewhere.
        let col = PALETTE[c.scene.color as usize];
        for f in 0..6 {
            let fr = c.video.frame(f);
            let hit = (0..256).any(|i| (0..3).all(|ch| (fr[ch * 256 + i] - col[ch]).abs() < 1e-12));
            let textured = c.scene.texture != Texture::Solid;
            assert!(hit || textured, "frame {f}");
        }
    }

    #[test]
    fn sharpness_and_flicker_oracles() {
        let gray = Video::new(Tensor::full([3, 3, 8, 8], 0.4)).unwrap();
        assert_eq!(sharpness(&gray), 0.0);
        assert_eq!(flicker(&gray), 0.0);
        let th = QualityThresholds { min_sharpness: 1e-9, max_flicker: f64::INFINITY };
        assert!(!th.accepts(&gray));

        let checker = Video::from_fn(1, 1, 8, 8, |i| ((i / 8 + i % 8) % 2) as f64).unwrap();
        // Interior 6x6: 18 cells at +4 and 18 at -4 -> mean 0, variance 16.
        let mut lap = Vec::new();
        for y in 1..7 {
            for x in 1..7 {
                lap.push(if (x + y) % 2 == 1 { 4.0 } else { -4.0 });
            }
        }
        let m: f64 = lap.iter().sum::<f64>() / 36.0;
        let want = lap.iter().map(|l: &f64| (l - m).powi(2)).sum::<f64>() / 36.0;
        assert_eq!(want, 16.0);
        assert_eq!(sharpness(&checker), want);

        let steps = Video::from_fn(3, 1, 2, 2, |i| [0.0, 0.5, 0.25][i / 4]).unwrap();
        assert!((flicker(&steps) - (0.5 + 0.25) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn filter_identity_and_idempotence() {
        let vids: Vec<Video> = (0..10)
            .map(|i| gen_clip(SeedStream::new(5).index(i), 4, 8, 8, 0.0).unwrap().video)
            .chain([Video::new(Tensor::full([2, 3, 8, 8], 0.3)).unwrap()])
            .collect();
        let open = QualityThresholds { min_sharpness: 0.0, max_flicker: f64::INFINITY };
        assert_eq!(quality_filter(&vids, |v| v, &open).unwrap(), vids);
        let th = QualityThresholds { min_sharpness: 0.05, max_flicker: 0.01 };
        let once = quality_filter(&vids, |v| v, &th).unwrap();
        assert!(once.len() < vids.len());
        assert_eq!(quality_filter(&once, |v| v, &th).unwrap(), once);
        let bad = QualityThresholds { min_sharpness: f64::NAN, max_flicker: 0.0 };
        assert!(quality_filter(&vids, |v| v, &bad).is_err());
    }

    #[test]
    fn dataset_round_trip_and_truncation() {
        let cfg = DataConfig { clips: 3, height: 8, width: 8, ..DataConfig::default() };
        let mut pairs = generate(&cfg, 3, SeedStream::new(1), 8, "real-").unwrap();
        pairs[2].source = SourceTag::Distilled;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.vvt");
        write_dataset(&pairs, &p).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back, pairs);
        for pair in &back {
            CaptionSpec::decode(&pair.caption).unwrap();
        }
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path(&p)).unwrap()).unwrap();
        assert_eq!(m.count, 3);
        assert_eq!(m.counts[&SourceTag::Real] + m.counts[&SourceTag::Distilled], 3);

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Corrupt { .. })));
    }
}
