//! Concept distillation: partially noise a source clip, then denoise it with
//! the pretrained backbone conditioned on the clip's caption, and blend the
//! results with the real pairs.

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{decode, encode, LatentVideo, Video};
use crate::data::{Pair, SourceTag};
use crate::error::{Error, Result};
use crate::net::{CaptionTokens, Conditioning, VTheta};
use crate::pipeline::Checkpoint;
use crate::restore::map_tiles;
use crate::rng::SeedStream;
use crate::schedule::{sample, NoiseSchedule, TimeStep};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Injection timestep; half the default schedule length.
    pub t_star: usize,
    pub denoise_steps: usize,
    /// Real to distilled pairs, e.g. `[5, 1]`.
    pub blend_ratio: [u32; 2],
    /// Latent tile for clips larger than the backbone's training crop.
    pub tile: Option<usize>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { t_star: 500, denoise_steps: 25, blend_ratio: [5, 1], tile: None }
    }
}

impl DistillConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.t_star >= schedule.len() {
            return Err(Error::config("distill.t_star", format!("must be below {}", schedule.len())));
        }
        if self.denoise_steps == 0 || self.denoise_steps > self.t_star + 1 {
            return Err(Error::config("distill.denoise_steps", "must lie in [1, t_star + 1]"));
        }
        if self.blend_ratio[0] == 0 {
            return Err(Error::config("distill.blend_ratio", "the real share must be positive"));
        }
        if self.tile == Some(0) {
            return Err(Error::config("distill.tile", "must be positive"));
        }
        Ok(())
    }

    /// Distilled pairs emitted for `real` source pairs: `ceil(real * d / r)`.
    pub fn distilled_count(&self, real: usize) -> usize {
        let [r, d] = self.blend_ratio.map(|x| x as usize);
        (real * d).div_ceil(r)
    }

    pub fn t_star(&self, schedule: &NoiseSchedule) -> Result<TimeStep> {
        self.validate(schedule)?;
        schedule.timestep(self.t_star)
    }
}

/// Noises `z0` to `t_star` with noise from `seed` and denoises it back
/// with `predict_v`.
pub fn distill_latent<F>(
    schedule: &NoiseSchedule,
    predict_v: F,
    z0: &LatentVideo,
    cfg: &DistillConfig,
    seed: SeedStream,
) -> Result<LatentVideo>
where
    F: FnMut(&LatentVideo, TimeStep) -> Result<LatentVideo>,
{
    let t = cfg.t_star(schedule)?;
    let eps = LatentVideo::new(Tensor::new(z0.shape(), seed.derive("distill-noise").normals(z0.tensor().numel()))?)?;
    let z_t = schedule.add_noise(z0, t, &eps)?;
    sample(schedule, predict_v, &z_t, t, cfg.denoise_steps)
}

/// The backbone's caption-conditioned re-synthesis of `video`.
pub fn distill_sample(
    backbone: &Checkpoint,
    video: &Video,
    caption: &CaptionTokens,
    cfg: &DistillConfig,
    seed: SeedStream,
) -> Result<Video> {
    if backbone.pretrain_steps == 0 {
        return Err(Error::invalid("distill", "the backbone has not been pretrained"));
    }
    caption.validate(&backbone.net)?;
    let schedule = backbone.schedule.build()?;
    cfg.validate(&schedule)?;
    let model = VTheta::new(&backbone.net, &backbone.params);
    let one = |v: &Video, s: SeedStream| -> Result<Video> {
        let z0 = encode(v)?;
        let predict = |x: &LatentVideo, t: TimeStep| model.predict(x, caption, t, Conditioning::Backbone);
        let z = distill_latent(&schedule, predict, &z0, cfg, s)?;
        Video::clamped(decode(&z)?.into_tensor())
    };
    match cfg.tile {
        Some(tile) if tile < video.height().min(video.width()) / 2 => {
            let (out, _, _) =
                map_tiles(video, tile, |t, crop| one(crop, seed.index(t.row as u64).index(t.col as u64)))?;
            Ok(out)
        }
        _ => one(video, seed),
    }
}

/// Mean latent cosine similarity between `a` and `b`.
pub fn latent_similarity(a: &Video, b: &Video) -> Result<f64> {
    encode(a)?.cosine_similarity(&encode(b)?)
}

/// Appends `ceil(n * d / r)` distilled pairs, each keeping its source's
/// caption, to the real pairs of `dataset`.
pub fn build_distilled_set(
    backbone: &Checkpoint,
    dataset: &[Pair],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<Vec<Pair>> {
    let real: Vec<&Pair> = dataset.iter().filter(|p| p.source == SourceTag::Real).collect();
    if real.is_empty() {
        return Err(Error::invalid("distill", "the dataset has no real pairs"));
    }
    let n = cfg.distilled_count(real.len());
    if n == 0 {
        return Ok(dataset.to_vec());
    }
    let root = SeedStream::new(seed).derive("distill");
    let mut rng = root.derive("pick").rng();
    let mut picks: Vec<usize> = if n <= real.len() {
        sample_indices(&mut rng, real.len(), n).into_vec()
    } else {
        (0..n).map(|i| i % real.len()).collect()
    };
    picks.sort_unstable();
    let distilled = picks
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let src = real[i];
            let s = root.index(k as u64);
            Ok(Pair {
                id: format!("distilled-{k:05}"),
                seed: s.value(),
                source: SourceTag::Distilled,
                video: distill_sample(backbone, &src.video, &src.caption, cfg, s)?,
                caption: src.caption.clone(),
                misaligned: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = dataset.to_vec();
    out.extend(distilled);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DataConfig};
    use crate::net::NetConfig;
    use crate::pipeline::{TrainConfig, Trainer};
    use crate::schedule::{recover_x0_at, ScheduleConfig};

    fn schedule() -> NoiseSchedule {
        ScheduleConfig::default().build().unwrap()
    }

    fn latent(seed: u64) -> LatentVideo {
        LatentVideo::new(Tensor::new([2, 12, 2, 2], SeedStream::new(seed).normals(96)).unwrap()).unwrap()
    }

    /// Predicts the velocity that points exactly at `z0`.
    fn oracle<'a>(
        s: &'a NoiseSchedule,
        z0: &'a LatentVideo,
    ) -> impl FnMut(&LatentVideo, TimeStep) -> Result<LatentVideo> + 'a {
        move |x, t| {
            let a = s.alpha_bar(t);
            x.zip_map(z0, |x, z| (a.sqrt() * x - z) / (1.0 - a).sqrt())
        }
    }

    #[test]
    fn config_rules() {
        let s = schedule();
        assert!(DistillConfig::default().validate(&s).is_ok());
        assert!(DistillConfig { t_star: 1000, ..Default::default() }.validate(&s).is_err());
        assert!(DistillConfig { t_star: 10, denoise_steps: 12, ..Default::default() }.validate(&s).is_err());
        assert!(DistillConfig { blend_ratio: [0, 1], ..Default::default() }.validate(&s).is_err());
        let c = DistillConfig::default();
        assert_eq!(c.distilled_count(500), 100);
        assert_eq!(c.distilled_count(64), 13);
        assert_eq!(DistillConfig { blend_ratio: [1, 0], ..c }.distilled_count(500), 0);
    }

    #[test]
    fn oracle_predictor_recovers_the_source() {
        let s = schedule();
        let z0 = latent(1);
        for (t_star, steps) in [(500, 1), (500, 25), (999, 50)] {
            let cfg = DistillConfig { t_star, denoise_steps: steps, ..Default::default() };
            let out = distill_latent(&s, oracle(&s, &z0), &z0, &cfg, SeedStream::new(3)).unwrap();
            assert!(out.tensor().max_abs_diff(z0.tensor()) < 1e-9, "t*={t_star} steps={steps}");
        }
    }

    #[test]
    fn near_clean_injection_is_identity() {
        // With abar -> 1 the injected noise vanishes and a null predictor
        // hands back the source.
        let s = NoiseSchedule::from_betas(vec![1e-14]).unwrap();
        let z0 = latent(2);
        let cfg = DistillConfig { t_star: 0, denoise_steps: 1, ..Default::default() };
        let zero = |x: &LatentVideo, _| Ok(LatentVideo::zeros(x.shape()));
        let out = distill_latent(&s, zero, &z0, &cfg, SeedStream::new(1)).unwrap();
        assert!(out.tensor().max_abs_diff(z0.tensor()) < 1e-6);
        let back = recover_x0_at(1.0, &z0, &LatentVideo::zeros(z0.shape())).unwrap();
        assert_eq!(back, z0);
    }

    fn tiny() -> (Checkpoint, Vec<Pair>) {
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
            &DataConfig {
                height: 8,
                width: 8,
                min_frames: 2,
                max_frames: 2,
                misalignment_rate: 0.3,
                ..DataConfig::default()
            },
            11,
            SeedStream::new(4),
            8,
            "real-",
        )
        .unwrap();
        let mut t =
            Trainer::pretrain(net, ScheduleConfig::default(), TrainConfig { steps: 2, ..Default::default() }, 1)
                .unwrap();
        t.run(&data, 2, |_| Ok(())).unwrap();
        (t.into_checkpoint(), data)
    }

    #[test]
    fn blended_set_shapes_tags_and_captions() {
        let (ck, data) = tiny();
        let cfg = DistillConfig { t_star: 100, denoise_steps: 3, ..Default::default() };
        let out = build_distilled_set(&ck, &data, &cfg, 5).unwrap();
        assert_eq!(out.len(), 11 + 3);
        assert_eq!(&out[..11], data.as_slice());
        for p in &out[11..] {
            assert_eq!(p.source, SourceTag::Distilled);
            let src = data.iter().find(|d| d.caption == p.caption).expect("caption from a source pair");
            assert_eq!(src.video.tensor().shape(), p.video.tensor().shape());
        }
        let again = build_distilled_set(&ck, &data, &cfg, 5).unwrap();
        assert_eq!(again, out);
        let none = DistillConfig { blend_ratio: [1, 0], ..cfg };
        assert_eq!(build_distilled_set(&ck, &data, &none, 5).unwrap(), data);
    }

    #[test]
    fn untrained_backbone_is_rejected() {
        let (mut ck, data) = tiny();
        ck.pretrain_steps = 0;
        let cfg = DistillConfig { t_star: 100, denoise_steps: 3, ..Default::default() };
        assert!(distill_sample(&ck, &data[0].video, &data[0].caption, &cfg, SeedStream::new(0)).is_err());
    }

    #[test]
    fn tiled_distillation_keeps_shape() {
        let (ck, _) = tiny();
        let clip = generate(
            &DataConfig { height: 16, width: 16, min_frames: 2, max_frames: 2, ..DataConfig::default() },
            1,
            SeedStream::new(8),
            8,
            "r",
        )
        .unwrap()
        .remove(0);
        let cfg = DistillConfig { t_star: 100, denoise_steps: 2, tile: Some(4), ..Default::default() };
        let out = distill_sample(&ck, &clip.video, &clip.caption, &cfg, SeedStream::new(1)).unwrap();
        assert_eq!(out.tensor().shape(), clip.video.tensor().shape());
        assert!(latent_similarity(&out, &clip.video).unwrap().is_finite());
    }
}
