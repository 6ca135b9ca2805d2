//! Restoration inference: sampling from pure noise under LQ and caption
//! conditioning, and tiled aggregation by direct block concatenation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{decode, encode, LatentVideo, Video};
use crate::error::{Error, Result};
use crate::net::{CaptionTokens, Conditioning, VTheta};
use crate::pipeline::Checkpoint;
use crate::rng::SeedStream;
use crate::schedule::sample;
use crate::tensor::Tensor;

/// Default number of sampler steps.
pub const RESTORE_STEPS: usize = 50;

/// Noise stream for tile `(row, col)`; an untiled restore uses tile `(0, 0)`.
pub fn tile_seed(seed: u64, row: usize, col: usize) -> SeedStream {
    SeedStream::new(seed).derive("restore-tile").index(row as u64).index(col as u64)
}

fn check_ready(ck: &Checkpoint, caption: &CaptionTokens) -> Result<()> {
    if !ck.has_control() {
        return Err(Error::invalid("checkpoint", "has no control modules; restoration needs a fine-tuned checkpoint"));
    }
    caption.validate(&ck.net)
}

fn noise_like(shape: [usize; 4], seed: SeedStream) -> Result<LatentVideo> {
    LatentVideo::new(Tensor::new(shape, seed.normals(shape.iter().product()))?)
}

/// Samples a latent from pure noise at `T - 1` with the given conditioning.
pub fn sample_latent(
    ck: &Checkpoint,
    shape: [usize; 4],
    caption: &CaptionTokens,
    cond: Conditioning<'_>,
    steps: usize,
    noise: SeedStream,
) -> Result<LatentVideo> {
    let schedule = ck.schedule.build()?;
    let model = VTheta::new(&ck.net, &ck.params);
    let x_start = noise_like(shape, noise)?;
    sample(&schedule, |x, t| model.predict(x, caption, t, cond), &x_start, schedule.last(), steps)
}

/// Restores `lq` whole, drawing the starting noise from `noise`.
pub fn restore_with(
    ck: &Checkpoint,
    lq: &Video,
    caption: &CaptionTokens,
    steps: usize,
    noise: SeedStream,
) -> Result<Video> {
    check_ready(ck, caption)?;
    let z_lq = encode(lq)?;
    let cond = Conditioning::Control { z_lq: &z_lq, ablation: ck.train.ablation };
    let z = sample_latent(ck, z_lq.shape(), caption, cond, steps, noise)?;
    Video::clamped(decode(&z)?.into_tensor())
}

/// Restores `lq` whole; deterministic per seed.
pub fn restore(ck: &Checkpoint, lq: &Video, caption: &CaptionTokens, steps: usize, seed: u64) -> Result<Video> {
    restore_with(ck, lq, caption, steps, tile_seed(seed, 0, 0))
}

/// Axis-aligned rectangle in latent cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// A tile reads `src` and writes `dst`, which lies inside `src`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub src: Rect,
    pub dst: Rect,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub height: usize,
    pub width: usize,
    pub tile: usize,
    pub tiles: Vec<Tile>,
}

/// Tile starts and destination spans along one axis of length `n`.
fn axis_plan(n: usize, tile: usize) -> Vec<(usize, usize, usize)> {
    (0..n.div_ceil(tile))
        .map(|i| {
            let dst = i * tile;
            let src = dst.min(n - tile);
            (src, dst, tile.min(n - dst))
        })
        .collect()
}

/// Non-overlapping destination partition of an `h x w` latent grid. Edge
/// tiles are anchored to the far edge, so their sources overlap neighbours.
pub fn plan_tiles(h: usize, w: usize, tile: usize) -> Result<TileGrid> {
    if tile == 0 || tile > h.min(w) {
        return Err(Error::invalid("plan_tiles", format!("tile {tile} does not fit a {h}x{w} grid")));
    }
    let mut tiles = Vec::new();
    for (row, &(sy, dy, hy)) in axis_plan(h, tile).iter().enumerate() {
        for (col, &(sx, dx, wx)) in axis_plan(w, tile).iter().enumerate() {
            tiles.push(Tile {
                row,
                col,
                src: Rect { top: sy, left: sx, height: tile, width: tile },
                dst: Rect { top: dy, left: dx, height: hy, width: wx },
            });
        }
    }
    Ok(TileGrid { height: h, width: w, tile, tiles })
}

impl TileGrid {
    /// How many destination rectangles cover each cell, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let mut c = vec![0; self.height * self.width];
        for t in &self.tiles {
            for y in t.dst.top..t.dst.top + t.dst.height {
                for x in t.dst.left..t.dst.left + t.dst.width {
                    c[y * self.width + x] += 1;
                }
            }
        }
        c
    }
}

/// Per-run record of a tiled restoration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreLog {
    pub steps: usize,
    pub tiles: usize,
    pub seam_metric: f64,
    pub runtime: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TiledRestore {
    pub video: Video,
    pub log: RestoreLog,
    /// Writes per latent cell, counted while assembling the output.
    pub coverage: Vec<u32>,
}

/// Runs `f` on the source crop of every tile (in parallel) and copies each
/// destination block into place without blending. `tile` is in latent
/// cells; `f` must return a clip of the crop's shape.
pub fn map_tiles<F>(video: &Video, tile: usize, f: F) -> Result<(Video, TileGrid, Vec<u32>)>
where
    F: Fn(&Tile, &Video) -> Result<Video> + Sync,
{
    if !video.height().is_multiple_of(2) || !video.width().is_multiple_of(2) {
        return Err(Error::invalid("tiling", "frame extents must be even"));
    }
    let (lh, lw) = (video.height() / 2, video.width() / 2);
    let grid = plan_tiles(lh, lw, tile)?;
    let tp = 2 * tile;
    let parts = grid
        .tiles
        .par_iter()
        .map(|t| {
            let crop = video.crop(2 * t.src.top, 2 * t.src.left, tp, tp)?;
            let out = f(t, &crop)?;
            if out.tensor().shape() != crop.tensor().shape() {
                return Err(Error::invalid("tiling", "tile result changed shape"));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let (fr, c, h, w) = (video.frames(), video.channels(), video.height(), video.width());
    let mut out = vec![0.0; fr * c * h * w];
    let mut coverage = vec![0u32; lh * lw];
    for (t, part) in grid.tiles.iter().zip(&parts) {
        for y in t.dst.top..t.dst.top + t.dst.height {
            for x in t.dst.left..t.dst.left + t.dst.width {
                coverage[y * lw + x] += 1;
            }
        }
        let (oy, ox) = (2 * (t.dst.top - t.src.top), 2 * (t.dst.left - t.src.left));
        for plane in 0..fr * c {
            for y in 0..2 * t.dst.height {
                let src = &part.data()[plane * tp * tp + (oy + y) * tp + ox..][..2 * t.dst.width];
                let row = plane * h * w + (2 * t.dst.top + y) * w + 2 * t.dst.left;
                out[row..row + 2 * t.dst.width].copy_from_slice(src);
            }
        }
    }
    Ok((Video::new(Tensor::new([fr, c, h, w], out)?)?, grid, coverage))
}

/// Restores every tile independently with its own noise stream and
/// concatenates the destination blocks.
pub fn restore_tiled(
    ck: &Checkpoint,
    lq: &Video,
    caption: &CaptionTokens,
    tile: usize,
    steps: usize,
    seed: u64,
) -> Result<TiledRestore> {
    let start = Instant::now();
    check_ready(ck, caption)?;
    if !tile.is_multiple_of(ck.net.patch) {
        return Err(Error::invalid(
            "restore_tiled",
            format!("tile {tile} must be a multiple of the patch size {}", ck.net.patch),
        ));
    }
    let (video, grid, coverage) =
        map_tiles(lq, tile, |t, crop| restore_with(ck, crop, caption, steps, tile_seed(seed, t.row, t.col)))?;
    let seam_metric = seam_metric(&video, &grid);
    Ok(TiledRestore {
        video,
        log: RestoreLog { steps, tiles: grid.tiles.len(), seam_metric, runtime: start.elapsed().as_secs_f64() },
        coverage,
    })
}

/// Mean absolute pixel step across tile borders minus the mean step
/// between all other neighbouring pixels. Zero for a single tile.
pub fn seam_metric(v: &Video, grid: &TileGrid) -> f64 {
    let (h, w) = (v.height(), v.width());
    let mut col_border = vec![false; w];
    let mut row_border = vec![false; h];
    for t in &grid.tiles {
        if t.dst.left > 0 {
            col_border[2 * t.dst.left] = true;
        }
        if t.dst.top > 0 {
            row_border[2 * t.dst.top] = true;
        }
    }
    let (mut border, mut nb, mut inner, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for plane in v.data().chunks(h * w) {
        for y in 0..h {
            for x in 0..w {
                let p = plane[y * w + x];
                if x > 0 {
                    let d = (p - plane[y * w + x - 1]).abs();
                    if col_border[x] {
                        border += d;
                        nb += 1;
                    } else {
                        inner += d;
                        ni += 1;
                    }
                }
                if y > 0 {
                    let d = (p - plane[(y - 1) * w + x]).abs();
                    if row_border[y] {
                        border += d;
                        nb += 1;
                    } else {
                        inner += d;
                        ni += 1;
                    }
                }
            }
        }
    }
    if nb == 0 || ni == 0 {
        return 0.0;
    }
    border / nb as f64 - inner / ni as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DataConfig};
    use crate::degrade::DegradationConfig;
    use crate::net::NetConfig;
    use crate::pipeline::{TrainConfig, Trainer};
    use crate::schedule::ScheduleConfig;

    fn checkpoint(trained: bool) -> Checkpoint {
        let net = NetConfig {
            depth: 6,
            hidden: 8,
            heads: 2,
            max_frames: 4,
            max_grid: 4,
            mlp_ratio: 2,
            projector_width: 4,
            ..NetConfig::default()
        };
        let data = generate(
            &DataConfig { height: 8, width: 8, min_frames: 2, max_frames: 2, ..DataConfig::default() },
            3,
            SeedStream::new(4),
            8,
            "r",
        )
        .unwrap();
        let cfg = TrainConfig { learning_rate: 1e-2, steps: 3, ..TrainConfig::default() };
        let mut pre = Trainer::pretrain(net, ScheduleConfig::default(), cfg.clone(), 1).unwrap();
        pre.run(&data, 3, |_| Ok(())).unwrap();
        let mut ft = Trainer::finetune(&pre.into_checkpoint(), cfg, DegradationConfig::default(), 2).unwrap();
        if trained {
            ft.run(&data, 3, |_| Ok(())).unwrap();
        }
        ft.into_checkpoint()
    }

    fn clip(seed: u64, h: usize, w: usize) -> Video {
        let n = 2 * 3 * h * w;
        Video::new(
            Tensor::new(
                [2, 3, h, w],
                SeedStream::new(seed).normals(n).iter().map(|x| (0.5 + 0.2 * x).clamp(0.0, 1.0)).collect(),
            )
            .unwrap(),
        )
        .unwrap()
    }

    fn cap() -> CaptionTokens {
        CaptionTokens::padded(&[1, 5, 13, 21], 8).unwrap()
    }

    #[test]
    fn hand_enumerated_plan() {
        let g = plan_tiles(10, 10, 4).unwrap();
        assert_eq!(g.tiles.len(), 9);
        let cols: Vec<(usize, usize, usize)> =
            g.tiles.iter().filter(|t| t.row == 0).map(|t| (t.src.left, t.dst.left, t.dst.width)).collect();
        assert_eq!(cols, vec![(0, 0, 4), (4, 4, 4), (6, 8, 2)]);
        let rows: Vec<usize> = g.tiles.iter().filter(|t| t.col == 0).map(|t| t.src.top).collect();
        assert_eq!(rows, vec![0, 4, 6]);
        assert!(g.coverage().iter().all(|&c| c == 1));
        let one = plan_tiles(4, 4, 4).unwrap();
        assert_eq!(one.tiles.len(), 1);
        assert!(plan_tiles(3, 10, 4).is_err());
        assert!(plan_tiles(4, 4, 0).is_err());
    }

    #[test]
    fn restore_is_deterministic_and_in_range() {
        let ck = checkpoint(true);
        let lq = clip(1, 8, 8);
        let a = restore(&ck, &lq, &cap(), 4, 7).unwrap();
        let b = restore(&ck, &lq, &cap(), 4, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(restore(&ck, &lq, &cap(), 4, 8).unwrap(), a);
    }

    #[test]
    fn untrained_control_matches_backbone_sample() {
        let ck = checkpoint(false);
        let lq = clip(2, 8, 8);
        let out = restore(&ck, &lq, &cap(), 5, 3).unwrap();
        let z = sample_latent(&ck, [2, 12, 4, 4], &cap(), Conditioning::Backbone, 5, tile_seed(3, 0, 0)).unwrap();
        let plain = Video::clamped(decode(&z).unwrap().into_tensor()).unwrap();
        assert_eq!(out, plain);
    }

    #[test]
    fn single_tile_equals_untiled() {
        let ck = checkpoint(true);
        let lq = clip(3, 8, 8);
        let tiled = restore_tiled(&ck, &lq, &cap(), 4, 3, 11).unwrap();
        assert_eq!(tiled.video, restore(&ck, &lq, &cap(), 3, 11).unwrap());
        assert_eq!(tiled.log.tiles, 1);
        assert_eq!(tiled.log.seam_metric, 0.0);
    }

    #[test]
    fn quadrants_equal_standalone_tiles() {
        let ck = checkpoint(true);
        let lq = clip(4, 16, 16);
        let tiled = restore_tiled(&ck, &lq, &cap(), 4, 3, 5).unwrap();
        assert!(tiled.coverage.iter().all(|&c| c == 1));
        assert!(tiled.log.seam_metric.is_finite());
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let crop = lq.crop(8 * r, 8 * c, 8, 8).unwrap();
            let alone = restore_with(&ck, &crop, &cap(), 3, tile_seed(5, r, c)).unwrap();
            assert_eq!(tiled.video.crop(8 * r, 8 * c, 8, 8).unwrap(), alone, "tile {r},{c}");
        }
    }

    #[test]
    fn edge_anchored_tiles_copy_their_tail() {
        let ck = checkpoint(true);
        let lq = clip(5, 12, 12);
        let tiled = restore_tiled(&ck, &lq, &cap(), 4, 2, 9).unwrap();
        assert_eq!(tiled.log.tiles, 4);
        assert!(tiled.coverage.iter().all(|&c| c == 1));
        // Tile (1, 1) reads latent rows/cols 2..6 and writes 4..6.
        let src = lq.crop(4, 4, 8, 8).unwrap();
        let alone = restore_with(&ck, &src, &cap(), 2, tile_seed(9, 1, 1)).unwrap();
        assert_eq!(tiled.video.crop(8, 8, 4, 4).unwrap(), alone.crop(4, 4, 4, 4).unwrap());
    }

    #[test]
    fn backbone_only_checkpoint_is_rejected() {
        let mut ck = checkpoint(false);
        ck.params.remove_partition(crate::net::Partition::TrainableControl);
        assert!(restore(&ck, &clip(1, 8, 8), &cap(), 2, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn every_plan_partitions_the_grid(h in 1usize..20, w in 1usize..20, tile in 1usize..20) {
            proptest::prop_assume!(tile <= h.min(w));
            let grid = plan_tiles(h, w, tile).unwrap();
            proptest::prop_assert!(grid.coverage().iter().all(|&c| c == 1));
            for t in &grid.tiles {
                proptest::prop_assert_eq!((t.src.height, t.src.width), (tile, tile));
                proptest::prop_assert!(t.src.top + tile <= h && t.src.left + tile <= w);
                proptest::prop_assert!(t.src.top <= t.dst.top && t.dst.top + t.dst.height <= t.src.top + tile);
                proptest::prop_assert!(t.src.left <= t.dst.left && t.dst.left + t.dst.width <= t.src.left + tile);
            }
        }

        #[test]
        fn identity_tiles_reassemble_the_input(h in 1usize..8, w in 1usize..8, tile in 1usize..8, seed in 0u64..1000) {
            proptest::prop_assume!(tile <= h.min(w));
            let v = clip(seed, 2 * h, 2 * w);
            let (out, _, _) = map_tiles(&v, tile, |_, crop| Ok(crop.clone())).unwrap();
            proptest::prop_assert_eq!(out, v);
        }
    }
}
