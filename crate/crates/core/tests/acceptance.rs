//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. The training experiments are sized for
//! one CPU core and take on the order of two hours.

use std::collections::BTreeMap;
use std::time::Instant;

use vividtoy::codec::{decode, encode, LatentVideo, Video};
use vividtoy::data::{generate, DataConfig, Pair};
use vividtoy::degrade::{degrade, DegradationConfig};
use vividtoy::distill::{build_distilled_set, distill_sample, latent_similarity, DistillConfig};
use vividtoy::eval::{psnr, AblationTable};
use vividtoy::net::{Ablation, CaptionTokens, Conditioning, ConnectorMode, NetConfig, Partition, VTheta};
use vividtoy::pipeline::{example_loss, Checkpoint, Example, TrainConfig, Trainer};
use vividtoy::restore::{plan_tiles, restore, restore_tiled, Rect};
use vividtoy::schedule::{sample, ScheduleConfig};
use vividtoy::tensor::{primitive_cases, randn};
use vividtoy::{Graph, SeedStream, Tensor};

type Outcome = Result<String, String>;

const DATA_SEED: u64 = 2024;
const HELD_SEED: u64 = 4048;
const SEEDS: [u64; 3] = [0, 1, 2];
const STEPS: usize = 2000;
const LR: f64 = 1e-3;
const CROP: usize = 16;
const RESTORE_TILE: usize = 8;

fn latent(seed: SeedStream, shape: [usize; 4]) -> LatentVideo {
    LatentVideo::new(Tensor::new(shape, seed.normals(shape.iter().product())).unwrap()).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn small_data(n: usize, seed: u64, h: usize, frames: usize) -> Vec<Pair> {
    let cfg = DataConfig { height: h, width: h, min_frames: frames, max_frames: frames, ..DataConfig::default() };
    generate(&cfg, n, SeedStream::new(seed), NetConfig::default().caption_len, "acc-").unwrap()
}

/// A default-size network after a few pretraining and fine-tuning steps,
/// so every parameter group sits away from its initial value.
fn warmed_trainer(ft_steps: usize) -> (Checkpoint, Trainer) {
    let data = small_data(4, 77, 16, 2);
    let train = TrainConfig { learning_rate: 1e-2, steps: 5, ..TrainConfig::default() };
    let mut pre = Trainer::pretrain(NetConfig::default(), ScheduleConfig::default(), train, 1).unwrap();
    pre.run(&data, 5, |_| Ok(())).unwrap();
    let backbone = pre.into_checkpoint();
    let train = TrainConfig { learning_rate: 1e-2, steps: ft_steps.max(1), ..TrainConfig::default() };
    let mut ft = Trainer::finetune(&backbone, train, DegradationConfig::default(), 2).unwrap();
    ft.run(&data, ft_steps, |_| Ok(())).unwrap();
    (backbone, ft)
}

fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Derivative of the loss along a unit random direction through every
/// trained parameter, analytic against central differences.
fn loss_direction_error(trainer: &Trainer, ex: &Example, seed: SeedStream) -> f64 {
    let (_, grads) = trainer.loss_and_grads(std::slice::from_ref(ex)).unwrap();
    let mut dirs: BTreeMap<String, Vec<f64>> =
        grads.iter().map(|(n, g)| (n.clone(), seed.derive(n).normals(g.numel()))).collect();
    let norm = dirs.values().flatten().map(|x| x * x).sum::<f64>().sqrt();
    dirs.values_mut().flatten().for_each(|x| *x /= norm);
    let analytic: f64 = grads.iter().map(|(n, g)| g.data().iter().zip(&dirs[n]).map(|(a, b)| a * b).sum::<f64>()).sum();
    let ck = &trainer.ck;
    let loss_at = |s: f64| {
        let mut params = ck.params.clone();
        for (n, d) in &dirs {
            let p = params.get(n).unwrap();
            let moved: Vec<f64> = p.data().iter().zip(d).map(|(p, d)| p + s * d).collect();
            params.set(n, Tensor::new(p.shape().to_vec(), moved).unwrap()).unwrap();
        }
        let g = Graph::new();
        let bound = params.bind(&g, |_, _| false).unwrap();
        example_loss(&g, &bound, &ck.net, trainer.schedule(), ex, ck.train.ablation).unwrap().value().item()
    };
    let h = 1e-4;
    rel_err(analytic, (loss_at(h) - loss_at(-h)) / (2.0 * h))
}

fn c1_autodiff() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut worst_case = "";
    for case in primitive_cases() {
        for seed in 0..10u64 {
            let x = randn(500 + seed, &case.shape);
            let g = Graph::new();
            let v = g.leaf(x.clone(), true).unwrap();
            let root = (case.f)(&g, v).unwrap();
            let analytic =
                g.backward(root).unwrap().get(v).cloned().unwrap_or_else(|| Tensor::zeros(case.shape.clone()));
            let f = |d: &[f64]| {
                let g = Graph::new();
                let v = g.constant(Tensor::new(case.shape.clone(), d.to_vec()).unwrap()).unwrap();
                (case.f)(&g, v).unwrap().value().item()
            };
            let numeric = central_difference(&f, x.data(), 1e-4);
            for (a, n) in analytic.data().iter().zip(&numeric) {
                let e = rel_err(*a, *n);
                if e > worst {
                    worst = e;
                    worst_case = case.name;
                }
            }
        }
    }
    let cases = primitive_cases().len();

    let (_, ft) = warmed_trainer(3);
    let (pre, _) = warmed_trainer(0);
    let pre = Trainer::resume(pre).unwrap();
    let data = small_data(4, 78, 8, 2);
    let pool: Vec<&Pair> = data.iter().collect();
    let mut worst_loss: f64 = 0.0;
    for seed in 0..10u64 {
        for trainer in [&pre, &ft] {
            let ex = trainer.examples(&pool, 1000 + seed as usize).unwrap().remove(0);
            worst_loss = worst_loss.max(loss_direction_error(trainer, &ex, SeedStream::new(seed).derive("dir")));
        }
    }
    check(
        worst <= 1e-5 && worst_loss <= 1e-5,
        format!("{cases} primitives x 10 seeds worst {worst:.2e} ({worst_case}); full loss worst {worst_loss:.2e}"),
    )
}

fn c2_init_identity() -> Outcome {
    let (backbone, ft) = warmed_trainer(0);
    let net = &backbone.net;
    let schedule = ft.schedule();
    for i in 0..20u64 {
        let s = SeedStream::new(i).derive("identity");
        let mut rng_shape = s.derive("shape").uniforms(3).into_iter();
        let frames = 1 + (rng_shape.next().unwrap() * 6.0) as usize;
        let h = 2 * (1 + (rng_shape.next().unwrap() * 6.0) as usize);
        let w = 2 * (1 + (rng_shape.next().unwrap() * 6.0) as usize);
        let x = latent(s.derive("x"), [frames, 12, h, w]);
        let z = latent(s.derive("z"), [frames, 12, h, w]);
        let words: Vec<u32> = s.derive("caption").uniforms(4).iter().map(|u| 1 + (u * 63.0) as u32).collect();
        let cap = CaptionTokens::padded(&words, net.caption_len).unwrap();
        let t = schedule.timestep((s.derive("t").uniforms(1)[0] * 1000.0) as usize).unwrap();
        let base = VTheta::new(net, &backbone.params).predict(&x, &cap, t, Conditioning::Backbone).unwrap();
        let full = VTheta::new(net, &ft.ck.params)
            .predict(&x, &cap, t, Conditioning::Control { z_lq: &z, ablation: Ablation::default() })
            .unwrap();
        if base.data().iter().zip(full.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("input {i} differs, max diff {:.3e}", base.tensor().max_abs_diff(full.tensor())));
        }
    }
    Ok("20 random inputs bit-exact".into())
}

fn c3_freeze() -> Outcome {
    let (backbone, ft) = warmed_trainer(0);
    let frozen0 = ft.ck.params.partition_checksum(Partition::FrozenBackbone);
    let control0 = ft.ck.params.partition_checksum(Partition::TrainableControl);
    let data = small_data(8, 79, 32, 3);
    let train = TrainConfig { learning_rate: LR, steps: 100, crop: Some(CROP), ..TrainConfig::default() };
    let mut ft = Trainer::finetune(&backbone, train, DegradationConfig::default(), 2).unwrap();
    ft.run(&data, 100, |_| Ok(())).unwrap();
    let p = &ft.ck.params;
    let frozen = p.partition_checksum(Partition::FrozenBackbone);
    let control = p.partition_checksum(Partition::TrainableControl);
    let untouched = backbone.params.iter().all(|(n, old)| p.get(n).is_some_and(|t| t == &old.tensor));
    let control_tensors = p.names(Partition::TrainableControl).iter().filter(|n| !backbone.params.contains(n)).count();
    check(
        ft.ck.step == 100 && frozen == frozen0 && untouched && control != control0,
        format!(
            "frozen {} -> {}, trainable {} -> {}, {control_tensors} control tensors",
            &frozen0[..12],
            &frozen[..12],
            &control0[..12],
            &control[..12]
        ),
    )
}

fn c4_v_algebra() -> Outcome {
    let schedule = ScheduleConfig::default().build().unwrap();
    let mut worst: f64 = 0.0;
    let mut worst_formula: f64 = 0.0;
    for i in 0..1000u64 {
        let s = SeedStream::new(i).derive("triple");
        let x0 = latent(s.derive("x0"), [2, 12, 2, 2]);
        let eps = latent(s.derive("eps"), [2, 12, 2, 2]);
        let t = schedule.timestep((s.derive("t").uniforms(1)[0] * 1000.0) as usize).unwrap();
        let x_t = schedule.add_noise(&x0, t, &eps).unwrap();
        let v = schedule.v_target(&x0, &eps, t).unwrap();
        worst = worst.max(schedule.recover_x0(&x_t, &v, t).unwrap().tensor().max_abs_diff(x0.tensor()));

        // The forward formulas against a product of (1 - beta) written out here.
        let ab: f64 = (0..=t.get()).map(|k| 1.0 - (1e-4 + (0.02 - 1e-4) * k as f64 / 999.0)).product();
        for (((&x, &e), &xt), &vv) in x0.data().iter().zip(eps.data()).zip(x_t.data()).zip(v.data()) {
            worst_formula = worst_formula.max((ab.sqrt() * x + (1.0 - ab).sqrt() * e - xt).abs());
            worst_formula = worst_formula.max((ab.sqrt() * e - (1.0 - ab).sqrt() * x - vv).abs());
        }
    }
    check(
        worst <= 1e-12 && worst_formula <= 1e-12,
        format!("1000 triples, recovery {worst:.2e}, forward formulas {worst_formula:.2e}"),
    )
}

fn c5_solver() -> Outcome {
    let schedule = ScheduleConfig::default().build().unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..10u64 {
        let x0 = latent(SeedStream::new(i).derive("x0"), [2, 12, 2, 2]);
        let start = latent(SeedStream::new(i).derive("start"), [2, 12, 2, 2]);
        for steps in [1, 50] {
            let oracle = |x: &LatentVideo, t| {
                let a = schedule.alpha_bar(t);
                x.zip_map(&x0, |x, z| (a.sqrt() * x - z) / (1.0 - a).sqrt())
            };
            let out = sample(&schedule, oracle, &start, schedule.last(), steps).unwrap();
            worst = worst.max(out.tensor().max_abs_diff(x0.tensor()));
        }
    }

    // Independent unit-variance Gaussian data: the posterior mean is linear
    // in x_t, so each sampler step is an affine map whose effect on the
    // moments can be propagated in closed form.
    let (mu, sd) = (1.0, 1.0);
    let gain = |ab: f64| ab.sqrt() * sd * sd / (ab * sd * sd + 1.0 - ab);
    let gaussian = |x: &LatentVideo, t| {
        let ab = schedule.alpha_bar(t);
        let (a, sig, k) = (ab.sqrt(), (1.0 - ab).sqrt(), gain(ab));
        Ok(x.map(|x| (a * x - (mu + k * (x - a * mu))) / sig))
    };
    let ts: Vec<usize> = (0..50).map(|i| 999 - i * 1000 / 50).collect();
    let (mut m_cf, mut v_cf) = (0.0, 1.0);
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bars()[t];
        let to = ts.get(i + 1).map_or(1.0, |&n| schedule.alpha_bars()[n]);
        let (a, sig, k) = (ab.sqrt(), (1.0 - ab).sqrt(), gain(ab));
        let (a_to, s_to) = (to.sqrt(), (1.0 - to).sqrt());
        let slope = a_to * k + s_to * (1.0 - a * k) / sig;
        let offset = (a_to - s_to * a / sig) * mu * (1.0 - k * a);
        m_cf = slope * m_cf + offset;
        v_cf *= slope * slope;
    }
    let mut values = Vec::new();
    for seed in 0..2000u64 {
        let start = latent(SeedStream::new(seed).derive("gauss"), [1, 12, 2, 2]);
        values.extend_from_slice(sample(&schedule, gaussian, &start, schedule.last(), 50).unwrap().data());
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let (mean_err, var_err) = ((mean - mu).abs() / mu, (var - sd * sd).abs() / (sd * sd));
    let closed_form = (mean - m_cf).abs() / m_cf <= 0.02 && (var - v_cf).abs() / v_cf <= 0.02;
    check(
        worst <= 1e-6 && mean_err <= 0.05 && var_err <= 0.10 && closed_form,
        format!(
            "exact oracle {worst:.2e}; gaussian mean {mean:.4} (err {:.2}%), var {var:.4} (err {:.2}%); \
             closed form for this step grid {m_cf:.4} / {v_cf:.4}",
            100.0 * mean_err,
            100.0 * var_err
        ),
    )
}

fn c6_codec() -> Outcome {
    for i in 0..100u64 {
        let s = SeedStream::new(i).derive("clip");
        let dims = s.derive("dims").uniforms(3);
        let (f, h, w) =
            (1 + (dims[0] * 9.0) as usize, 2 * (1 + (dims[1] * 16.0) as usize), 2 * (1 + (dims[2] * 16.0) as usize));
        let v = Video::new(Tensor::new([f, 3, h, w], s.derive("px").uniforms(f * 3 * h * w)).unwrap()).unwrap();
        let back = decode(&encode(&v).unwrap()).unwrap();
        if back.data().iter().zip(v.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("clip {i} ({f}x3x{h}x{w}) is not reproduced bit-exactly"));
        }
    }
    Ok("100 random clips bit-exact".into())
}

fn c7_tiling() -> Outcome {
    let (_, ft) = warmed_trainer(3);
    let clip = &small_data(1, 80, 16, 3)[0];
    let lq = degrade(&clip.video, &DegradationConfig::default(), SeedStream::new(1)).unwrap();
    let whole = restore(&ft.ck, &lq, &clip.caption, 10, 5).unwrap();
    let tiled = restore_tiled(&ft.ck, &lq, &clip.caption, 8, 10, 5).unwrap();
    let same = whole.data().iter().zip(tiled.video.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let grid = plan_tiles(10, 10, 4).unwrap();
    // Rows and columns: destinations 0..4, 4..8, 8..10; the last source is
    // pulled back to 6..10.
    let spans = [(0, 0, 4), (4, 4, 4), (6, 8, 2)];
    let mut expected = Vec::new();
    for (r, &(sy, dy, hy)) in spans.iter().enumerate() {
        for (c, &(sx, dx, wx)) in spans.iter().enumerate() {
            expected.push((
                r,
                c,
                Rect { top: sy, left: sx, height: 4, width: 4 },
                Rect { top: dy, left: dx, height: hy, width: wx },
            ));
        }
    }
    let actual: Vec<_> = grid.tiles.iter().map(|t| (t.row, t.col, t.src, t.dst)).collect();
    let coverage = grid.coverage();
    let ones = coverage.len() == 100 && coverage.iter().all(|&c| c == 1);
    check(
        same && tiled.log.tiles == 1 && actual == expected && ones,
        format!(
            "single tile bit-exact: {same}; 10x10/4 plan matches: {}; coverage all ones: {ones}",
            actual == expected
        ),
    )
}

struct Budget {
    data: Vec<Pair>,
    held: Vec<Pair>,
}

fn budget() -> Budget {
    let cfg = DataConfig::default();
    let len = NetConfig::default().caption_len;
    Budget {
        data: generate(&cfg, cfg.clips, SeedStream::new(DATA_SEED), len, "real-").unwrap(),
        held: generate(&cfg, cfg.held_out, SeedStream::new(HELD_SEED), len, "held-").unwrap(),
    }
}

/// Mean restored and degraded PSNR over the held-out clips.
fn held_out_psnr(ck: &Checkpoint, held: &[Pair]) -> (f64, f64) {
    let noise = SeedStream::new(0).derive("eval-degrade");
    let (mut out, mut lq_sum) = (0.0, 0.0);
    for (i, p) in held.iter().enumerate() {
        let lq = degrade(&p.video, &DegradationConfig::default(), noise.index(i as u64)).unwrap();
        let r = restore_tiled(ck, &lq, &p.caption, RESTORE_TILE, 50, i as u64).unwrap();
        out += psnr(&r.video, &p.video).unwrap();
        lq_sum += psnr(&lq, &p.video).unwrap();
    }
    (out / held.len() as f64, lq_sum / held.len() as f64)
}

struct SeedRun {
    backbone: Checkpoint,
    first_losses: f64,
    last_losses: f64,
    /// `(label, restored psnr, lq psnr)` per configuration.
    rows: Vec<(&'static str, f64, f64)>,
}

const CONFIGS: [(&str, bool, ConnectorMode, bool); 4] = [
    ("a", false, ConnectorMode::Dual, true),
    ("c", true, ConnectorMode::MlpOnly, true),
    ("e", true, ConnectorMode::Dual, false),
    ("f", true, ConnectorMode::Dual, true),
];

fn run_seed(b: &Budget, seed: u64) -> SeedRun {
    let start = Instant::now();
    let train = TrainConfig { learning_rate: LR, steps: STEPS, crop: Some(CROP), ..TrainConfig::default() };
    let mut pre = Trainer::pretrain(NetConfig::default(), ScheduleConfig::default(), train.clone(), seed).unwrap();
    let mut losses = Vec::with_capacity(STEPS);
    pre.run(&b.data, STEPS, |r| {
        losses.push(r.loss);
        Ok(())
    })
    .unwrap();
    let first_losses = losses[..100].iter().sum::<f64>() / 100.0;
    let last_losses = losses[STEPS - 100..].iter().sum::<f64>() / 100.0;
    let backbone = pre.into_checkpoint();
    let distill = DistillConfig { tile: Some(RESTORE_TILE), ..DistillConfig::default() };
    let mixed = build_distilled_set(&backbone, &b.data, &distill, seed).unwrap();
    eprintln!("  seed {seed}: pretrain {first_losses:.4} -> {last_losses:.4}, {:.0}s", start.elapsed().as_secs_f64());

    let mut rows = Vec::new();
    for (label, projector_on, connector_mode, distill_on) in CONFIGS {
        let train = TrainConfig { ablation: Ablation { projector_on, connector_mode }, distill_on, ..train.clone() };
        let mut ft = Trainer::finetune(&backbone, train, DegradationConfig::default(), seed).unwrap();
        ft.run(&mixed, STEPS, |_| Ok(())).unwrap();
        let (out, lq) = held_out_psnr(&ft.ck, &b.held);
        eprintln!("  seed {seed} ({label}): {out:.3} dB vs lq {lq:.3} dB, {:.0}s", start.elapsed().as_secs_f64());
        rows.push((label, out, lq));
    }
    SeedRun { backbone, first_losses, last_losses, rows }
}

fn c8_end_to_end(run: &SeedRun) -> Outcome {
    let (_, out, lq) = *run.rows.iter().find(|r| r.0 == "f").unwrap();
    let ratio = run.last_losses / run.first_losses;
    check(
        out >= lq + 3.0 && ratio < 0.5,
        format!(
            "restored {out:.3} dB vs lq {lq:.3} dB (gain {:+.3}, need +3); pretrain loss ratio {ratio:.3} (need < 0.5)",
            out - lq
        ),
    )
}

fn c9_ablations(runs: &[SeedRun]) -> Outcome {
    let mut table = AblationTable::default();
    for run in runs {
        for &(label, out, lq) in &run.rows {
            let (_, p, c, d) = CONFIGS.iter().find(|c| c.0 == label).unwrap();
            let flags = vec![
                format!("projector={}", if *p { "on" } else { "off" }),
                format!("connector={}", c.as_str()),
                format!("distill={}", if *d { "on" } else { "off" }),
            ];
            table.record(label, flags, out, lq);
        }
    }
    print!("{}", table.render());
    let full = table.rows["f"].mean_psnr();
    let beaten: Vec<&str> = ["a", "c", "e"].into_iter().filter(|l| table.rows[*l].mean_psnr() > full).collect();
    check(
        beaten.is_empty(),
        format!("full mean {full:.3} dB over {} seeds; configurations above it: {beaten:?}", runs.len()),
    )
}

fn c10_retention(backbone: &Checkpoint, held: &[Pair]) -> Outcome {
    let schedule_len = backbone.schedule.build().unwrap().len();
    let mut means = Vec::new();
    for t_star in [schedule_len / 4, schedule_len / 2, 3 * schedule_len / 4] {
        let cfg = DistillConfig { t_star, tile: Some(RESTORE_TILE), ..DistillConfig::default() };
        let mut sum = 0.0;
        for seed in 0..50u64 {
            let clip = &held[seed as usize % held.len()];
            let noise = SeedStream::new(seed).derive("retention");
            let out = distill_sample(backbone, &clip.video, &clip.caption, &cfg, noise).unwrap();
            sum += latent_similarity(&clip.video, &out).unwrap();
        }
        means.push(sum / 50.0);
    }
    check(
        means.windows(2).all(|w| w[1] <= w[0]),
        format!("mean cosine at T/4, T/2, 3T/4: {:.4}, {:.4}, {:.4}", means[0], means[1], means[2]),
    )
}

fn report(results: &mut Vec<bool>, id: usize, name: &str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = f();
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {id:>2} {name}: {detail} [{secs:.1}s]");
    results.push(outcome.is_ok());
}

fn main() {
    let mut results = Vec::new();
    report(&mut results, 1, "autodiff", c1_autodiff);
    report(&mut results, 2, "init identity", c2_init_identity);
    report(&mut results, 3, "freeze policy", c3_freeze);
    report(&mut results, 4, "v algebra", c4_v_algebra);
    report(&mut results, 5, "solver consistency", c5_solver);
    report(&mut results, 6, "codec losslessness", c6_codec);
    report(&mut results, 7, "tiling", c7_tiling);

    let start = Instant::now();
    let b = budget();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(&b, s)).collect();
    let shared = start.elapsed().as_secs_f64();
    println!("training experiments: {} seeds x {} configurations in {shared:.0}s", SEEDS.len(), CONFIGS.len());
    report(&mut results, 8, "end-to-end restoration", || c8_end_to_end(&runs[0]));
    report(&mut results, 9, "ablation directionality", || c9_ablations(&runs));
    report(&mut results, 10, "distillation retention", || c10_retention(&runs[0].backbone, &b.held));

    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
