//! A quick build sanity suite: gradients, round trips and the fine-tune
//! init identity on a tiny network. Each check reports instead of panicking.

use std::time::Instant;

use serde::Serialize;

use crate::codec::{decode, encode, quantize_to_grid, LatentVideo, Video};
use crate::data::{generate, DataConfig};
use crate::degrade::DegradationConfig;
use crate::error::{Error, Result};
use crate::net::{CaptionTokens, Conditioning, NetConfig, VTheta};
use crate::pipeline::{Checkpoint, TrainConfig, Trainer};
use crate::rng::SeedStream;
use crate::schedule::{recover_x0_at, sample, ScheduleConfig};
use crate::tensor::{finite_difference_check, primitive_cases, randn, Tensor};

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn tiny_net() -> NetConfig {
    NetConfig {
        depth: 6,
        hidden: 8,
        heads: 2,
        caption_vocab: 32,
        caption_len: 8,
        max_frames: 4,
        max_grid: 4,
        mlp_ratio: 2,
        projector_width: 4,
        ..NetConfig::default()
    }
}

fn latent(seed: SeedStream, shape: [usize; 4]) -> Result<LatentVideo> {
    LatentVideo::new(Tensor::new(shape, seed.normals(shape.iter().product()))?)
}

fn bound(name: &str, value: f64, limit: f64) -> Result<String> {
    if value <= limit {
        Ok(format!("{name} {value:.2e} <= {limit:.0e}"))
    } else {
        Err(Error::invalid("selfcheck", format!("{name} {value:.3e} exceeds {limit:.0e}")))
    }
}

fn primitives() -> Result<String> {
    let mut worst: f64 = 0.0;
    for case in primitive_cases() {
        for seed in 0..3u64 {
            let err = finite_difference_check(&case.f, &randn(1000 + seed, &case.shape), 1e-4)?;
            if err > 1e-5 {
                return Err(Error::invalid("selfcheck", format!("{} seed {seed}: rel err {err:.3e}", case.name)));
            }
            worst = worst.max(err);
        }
    }
    bound("worst primitive rel err", worst, 1e-5)
}

/// A two-stage tiny model with every control path moved off zero.
fn tiny_finetuned() -> Result<Trainer> {
    let data = generate(
        &DataConfig { height: 8, width: 8, min_frames: 2, max_frames: 2, ..DataConfig::default() },
        3,
        SeedStream::new(5),
        8,
        "check-",
    )?;
    let train = TrainConfig { learning_rate: 1e-2, steps: 3, ..TrainConfig::default() };
    let mut pre = Trainer::pretrain(tiny_net(), ScheduleConfig::default(), train.clone(), 1)?;
    pre.run(&data, 3, |_| Ok(()))?;
    let mut ft = Trainer::finetune(&pre.into_checkpoint(), train, DegradationConfig::default(), 2)?;
    ft.run(&data, 3, |_| Ok(()))?;
    Ok(ft)
}

fn loss_gradient() -> Result<String> {
    let ft = tiny_finetuned()?;
    let data = generate(
        &DataConfig { height: 8, width: 8, min_frames: 2, max_frames: 2, ..DataConfig::default() },
        2,
        SeedStream::new(6),
        8,
        "check-",
    )?;
    let pool: Vec<_> = data.iter().collect();
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        let ex = ft.examples(&pool, 100 + k)?.remove(0);
        worst = worst.max(ft.directional_check(&ex, SeedStream::new(k as u64).derive("direction"), 1e-4)?);
    }
    bound("loss directional rel err", worst, 1e-5)
}

fn v_algebra() -> Result<String> {
    let schedule = ScheduleConfig::default().build()?;
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let s = SeedStream::new(i).derive("v-algebra");
        let x0 = latent(s.derive("x0"), [1, 12, 2, 2])?;
        let eps = latent(s.derive("eps"), [1, 12, 2, 2])?;
        let t = schedule.timestep((i as usize * 97) % schedule.len())?;
        let x_t = schedule.add_noise(&x0, t, &eps)?;
        let v = schedule.v_target(&x0, &eps, t)?;
        worst = worst.max(schedule.recover_x0(&x_t, &v, t)?.tensor().max_abs_diff(x0.tensor()));
    }
    bound("recover_x0 max error", worst, 1e-12)
}

fn codec() -> Result<String> {
    for i in 0..20u64 {
        let n = 3 * 3 * 4 * 6;
        let data = SeedStream::new(i).derive("codec").uniforms(n).into_iter().map(|u| quantize_to_grid(u, 8)).collect();
        let v = Video::new(Tensor::new([3, 3, 4, 6], data)?)?;
        if decode(&encode(&v)?)? != v {
            return Err(Error::invalid("selfcheck", format!("codec round trip differs on clip {i}")));
        }
    }
    Ok("20 clips bit-exact".into())
}

fn init_identity() -> Result<String> {
    let net = tiny_net();
    let train = TrainConfig { steps: 1, ..TrainConfig::default() };
    let mut pre = Trainer::pretrain(
        net.clone(),
        ScheduleConfig::default(),
        TrainConfig { learning_rate: 1e-2, ..train.clone() },
        3,
    )?;
    let data = generate(
        &DataConfig { height: 8, width: 8, min_frames: 2, max_frames: 2, ..DataConfig::default() },
        1,
        SeedStream::new(7),
        8,
        "check-",
    )?;
    pre.run(&data, 1, |_| Ok(()))?;
    let ft = Trainer::finetune(&pre.ck, train, DegradationConfig::default(), 4)?;
    let schedule = ft.schedule().clone();
    let cap = CaptionTokens::padded(&[1, 4, 12, 20], net.caption_len)?;
    for i in 0..5u64 {
        let x = latent(SeedStream::new(i).derive("x"), [2, 12, 4, 4])?;
        let z = latent(SeedStream::new(i).derive("z"), [2, 12, 4, 4])?;
        let t = schedule.timestep((i as usize * 211) % schedule.len())?;
        let base = VTheta::new(&net, &pre.ck.params).predict(&x, &cap, t, Conditioning::Backbone)?;
        let cond = Conditioning::Control { z_lq: &z, ablation: ft.ck.train.ablation };
        let full = VTheta::new(&net, &ft.ck.params).predict(&x, &cap, t, cond)?;
        if base != full {
            return Err(Error::invalid("selfcheck", format!("fine-tune init differs from the backbone on input {i}")));
        }
    }
    Ok("5 inputs bit-exact".into())
}

fn sampler() -> Result<String> {
    let schedule = ScheduleConfig::default().build()?;
    let x0 = latent(SeedStream::new(8), [1, 12, 2, 2])?;
    let start = latent(SeedStream::new(9), [1, 12, 2, 2])?;
    let mut worst: f64 = 0.0;
    for steps in [1, 50] {
        let oracle = |x: &LatentVideo, t| {
            let a = schedule.alpha_bar(t);
            x.zip_map(&x0, |x, z| (a.sqrt() * x - z) / (1.0 - a).sqrt())
        };
        let out = sample(&schedule, oracle, &start, schedule.last(), steps)?;
        worst = worst.max(out.tensor().max_abs_diff(x0.tensor()));
    }
    let clean = recover_x0_at(1.0, &x0, &LatentVideo::zeros(x0.shape()))?;
    worst = worst.max(clean.tensor().max_abs_diff(x0.tensor()));
    bound("oracle sampler max error", worst, 1e-6)
}

fn checkpoint_round_trip() -> Result<String> {
    let ft = tiny_finetuned()?;
    let path = std::env::temp_dir().join(format!("vividtoy-selfcheck-{}.vvt", std::process::id()));
    let result = ft.ck.write(&path).and_then(|_| Checkpoint::read(&path));
    let _ = std::fs::remove_file(&path);
    let _ = std::fs::remove_file(path.with_extension("json"));
    if result? != ft.ck {
        return Err(Error::invalid("selfcheck", "checkpoint read back differs"));
    }
    Ok(format!("{} tensors", ft.ck.params.len()))
}

/// Runs every check in order.
pub fn run() -> Vec<CheckOutcome> {
    type Check = (&'static str, fn() -> Result<String>);
    let checks: [Check; 7] = [
        ("primitive_gradients", primitives),
        ("loss_gradient", loss_gradient),
        ("v_algebra", v_algebra),
        ("codec_round_trip", codec),
        ("init_identity", init_identity),
        ("oracle_sampler", sampler),
        ("checkpoint_round_trip", checkpoint_round_trip),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(e) => (false, e.to_string()),
            };
            CheckOutcome { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_check_passes() {
        for c in super::run() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
