//! Shared fixtures for the benchmarks.

use vividtoy::codec::LatentVideo;
use vividtoy::data::{generate, DataConfig, Pair};
use vividtoy::net::{init_backbone, init_control, NetConfig, ParamStore};
use vividtoy::{SeedStream, Tensor};

/// The default network with control modules attached.
pub fn full_params(cfg: &NetConfig) -> ParamStore {
    let mut p = init_backbone(cfg, SeedStream::new(1)).expect("valid config");
    init_control(&mut p, cfg, SeedStream::new(2)).expect("valid config");
    p
}

pub fn latent(seed: u64, shape: [usize; 4]) -> LatentVideo {
    let n = shape.iter().product();
    LatentVideo::new(Tensor::new(shape, SeedStream::new(seed).normals(n)).expect("shape")).expect("finite")
}

/// Default-sized toy clips.
pub fn clips(n: usize) -> Vec<Pair> {
    generate(&DataConfig::default(), n, SeedStream::new(3), NetConfig::default().caption_len, "bench-")
        .expect("default config")
}
