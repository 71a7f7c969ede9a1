//! Acceptance suite: one line per criterion, non-zero exit when any fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctbert::fusion::macro_f1;
use ctbert::lungseg::{fill_holes, filter_by_area, refine_mask, BinaryImage, SliceMask};
use ctbert::nn::{BertConfig, Ctx};
use ctbert::pipeline::store::{decode_embedding, encode_embedding, read_tensor};
use ctbert::pipeline::{
    cmd_evaluate, cmd_extract, cmd_predict, cmd_preprocess, cmd_synth, cmd_train, read_volume_rows, Layout,
    RunConfig, TrainStage,
};
use ctbert::sampling::{sample_eval, stage2_windows};
use ctbert::stage1::{BackboneConfig, Stage1Config, Stage1Model};
use ctbert::stage2::{segment_average, Stage2Config, Stage2Model, Stage2Task};
use ctbert::tensor::{Tensor, Var};
use ctbert::trainer::{fixed_batch_losses, train_stage1, window_batch, StackVolume, TrainConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn resampling() -> Outcome {
    let start = Instant::now();
    for n in 1..=500usize {
        let got = sample_eval(n, 32).map_err(|e| e.to_string())?;
        // Lower half by the plain midpoint rule, upper half by reflection.
        let lower: Vec<usize> = (0..16).map(|k| ((2 * k + 1) as f64 * n as f64 / 64.0).floor() as usize).collect();
        let oracle: Vec<usize> = (0..32).map(|k| if k < 16 { lower[k] } else { n - 1 - lower[31 - k] }).collect();
        ensure(got == oracle, || format!("n={n}: {got:?} != {oracle:?}"))?;
        for (k, &i) in got.iter().enumerate() {
            let pos = (k as f64 + 0.5) * n as f64 / 32.0;
            ensure(i < n && (i as f64 + 0.5 - pos).abs() <= 0.5, || format!("n={n}: index {i} far from {pos}"))?;
            ensure(got[k] + got[31 - k] == n - 1, || format!("n={n}: asymmetric at {k}"))?;
        }
        ensure(got.windows(2).all(|w| w[0] <= w[1]), || format!("n={n}: unsorted"))?;
        if n >= 32 {
            ensure(got.windows(2).all(|w| w[0] < w[1]), || format!("n={n}: repeated index"))?;
        }
        for t in [16, 32] {
            let plan = stage2_windows(n, t).map_err(|e| e.to_string())?;
            let covered: BTreeSet<usize> = plan.windows.iter().flatten().copied().collect();
            ensure(plan.windows.iter().all(|w| w.len() == t), || format!("n={n}: short window"))?;
            ensure(covered == (0..n).collect(), || format!("n={n}, T={t}: union is not [0, n)"))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!("n = 1..500 in {secs:.3}s"))
}

fn segment_oracle(x: &[f64], w: usize, d: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * d];
    for j in 0..k {
        if w >= k {
            let (a, b) = (j as f64 * w as f64 / k as f64, (j + 1) as f64 * w as f64 / k as f64);
            for i in 0..w {
                let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                for c in 0..d {
                    out[j * d + c] += overlap * x[i * d + c] / (b - a);
                }
            }
        } else {
            let pos = ((j as f64 + 0.5) * w as f64 / k as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            for i in 0..w {
                let hat = (1.0 - (pos - i as f64).abs()).max(0.0);
                for c in 0..d {
                    out[j * d + c] += hat * x[i * d + c];
                }
            }
        }
    }
    out
}

fn segment_average_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let w = rng.random_range(1..=64usize);
        let k = [4, 8, 16][case % 3];
        let d = rng.random_range(1..=6usize);
        let x: Vec<f64> = (0..w * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let got = segment_average(&Tensor::from_vec(&[w, d], x.clone()), k).map_err(|e| e.to_string())?;
        let want = segment_oracle(&x, w, d, k);
        for (g, o) in got.data().iter().zip(&want) {
            worst = worst.max((g - o).abs());
        }
        ensure(worst <= 1e-6, || format!("W={w} K={k}: deviation {worst:e}"))?;

        let c: f64 = rng.random_range(-5.0..5.0);
        let flat = segment_average(&Tensor::from_vec(&[w, d], vec![c; w * d]), k).map_err(|e| e.to_string())?;
        ensure(flat.data().iter().all(|&v| v == c), || format!("W={w} K={k}: constant {c} not preserved"))?;
    }
    for k in [4, 8, 16] {
        let x: Vec<f64> = (0..k * 5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let got = segment_average(&Tensor::from_vec(&[k, 5], x.clone()), k).map_err(|e| e.to_string())?;
        ensure(got.data() == x.as_slice(), || format!("K={k}: W == K is not the identity"))?;
    }
    Ok(format!("1000 cases, max deviation {worst:.1e}"))
}

fn reference_macro_f1(preds: &[usize], truths: &[usize], classes: usize) -> f64 {
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &t) in preds.iter().zip(truths) {
        m[t][p] += 1;
    }
    let f1s = (0..classes).map(|c| {
        let tp = m[c][c] as f64;
        let fp = (0..classes).filter(|&t| t != c).map(|t| m[t][c]).sum::<usize>() as f64;
        let fn_ = (0..classes).filter(|&p| p != c).map(|p| m[c][p]).sum::<usize>() as f64;
        if 2.0 * tp + fp + fn_ == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    });
    f1s.sum::<f64>() / classes as f64
}

fn macro_f1_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut degenerate = 0;
    for case in 0..1000 {
        let classes = if case % 2 == 0 { 2 } else { 4 };
        let n = rng.random_range(1..=40usize);
        // Narrow label ranges make absent classes and zero denominators common.
        let span = rng.random_range(1..=classes);
        let truths: Vec<usize> = (0..n).map(|_| rng.random_range(0..span)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        if (0..classes).any(|c| !truths.contains(&c) && !preds.contains(&c)) {
            degenerate += 1;
        }
        let got = macro_f1(&preds, &truths, classes).map_err(|e| e.to_string())?;
        let want = reference_macro_f1(&preds, &truths, classes);
        ensure((got - want).abs() <= 1e-12, || format!("case {case}: {got} vs {want}"))?;
    }
    Ok(format!("1000 samples, {degenerate} with zero-denominator classes"))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Worst relative error between backprop and central differences over `samples` random weights.
fn gradcheck(
    params: &mut ctbert::nn::ParamStore<f64>,
    samples: usize,
    seed: u64,
    loss: impl Fn(&ctbert::nn::ParamStore<f64>) -> Var<f64>,
) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grads = loss(params).backward();
    let ids: Vec<_> = params.trainable_ids().collect();
    // Wider steps straddle ReLU and max-pool kinks in the backbone.
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let id = ids[rng.random_range(0..ids.len())];
        let idx = rng.random_range(0..params.get(id).numel());
        let analytic = params.grad_or_zero(&grads, id).data()[idx];
        let orig = params.get(id).data()[idx];
        params.get_mut(id).data_mut()[idx] = orig + h;
        let up = loss(params).value().item();
        params.get_mut(id).data_mut()[idx] = orig - h;
        let down = loss(params).value().item();
        params.get_mut(id).data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-10);
        let rel = (analytic - numeric).abs() / scale;
        if rel > 1e-3 {
            return Err(format!("{}[{idx}]: backprop {analytic:e}, numeric {numeric:e}", params.name(id)));
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s1 = Stage1Model::<f64>::new(Stage1Config::toy(), 5).map_err(|e| e.to_string())?;
    let x = random_tensor(&mut rng, &[2, 3, 8, 56, 56]);
    let net = s1.net.clone();
    let w1 = gradcheck(&mut s1.params, 24, 6, |p| {
        let ctx = Ctx::train(p, 9);
        let m = Stage1Model { config: Stage1Config::toy(), net: net.clone(), params: p.clone() };
        m.logits(&ctx, &Var::constant(x.clone())).bce_with_logits(&[1.0, 0.0])
    })?;

    let bert = BertConfig { model_dim: 16, heads: 4, layers: 1, ff_dim: 32, dropout: 0.1, max_positions: 16 };
    let segs = random_tensor(&mut rng, &[3, 4, 16]);
    let mut worst2 = 0.0f64;
    for task in [Stage2Task::Binary, Stage2Task::Severity] {
        let config = Stage2Config { hidden: [12, 8], ..Stage2Config::new(bert.clone(), 4, task) };
        let mut s2 = Stage2Model::<f64>::new(config.clone(), 7).map_err(|e| e.to_string())?;
        let net = s2.net.clone();
        let w = gradcheck(&mut s2.params, 24, 8, |p| {
            let ctx = Ctx::train(p, 10);
            let m = Stage2Model { config: config.clone(), net: net.clone(), params: p.clone() };
            let logits = m.logits(&ctx, &Var::constant(segs.clone()));
            match task {
                Stage2Task::Binary => logits.reshape(&[3]).bce_with_logits(&[1.0, 0.0, 1.0]),
                Stage2Task::Severity => logits.cross_entropy(&[0, 3, 2], None),
            }
        })?;
        worst2 = worst2.max(w);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!("step 1e-6; stage 1 worst {w1:.1e} (24 weights), stage 2 worst {worst2:.1e} (48 weights), {secs:.1}s"))
}

fn shapes() -> Outcome {
    let toy = BackboneConfig::toy();
    let configs = vec![
        ("full", BackboneConfig::full()),
        ("toy", toy.clone()),
        ("toy 16x32", BackboneConfig { input_frames: 16, input_size: 32, ..toy.clone() }),
        ("toy 8x16", BackboneConfig { input_size: 16, spatial_strides: [1, 2, 2, 1], ..toy.clone() }),
        (
            "mixed",
            BackboneConfig {
                block_counts: [2, 1, 1, 2],
                temporal_strides: [2, 1, 2, 1],
                spatial_strides: [2, 1, 2, 1],
                stem_stride: 1,
                stem_pool: false,
                input_size: 23,
                input_frames: 12,
                ..toy.clone()
            },
        ),
        ("wide", BackboneConfig { toy_scale_factor: 4, temporal_strides: [2, 2, 1, 1], input_size: 40, ..toy }),
    ];
    let mut notes = Vec::new();
    for (name, backbone) in configs {
        let (t, d) = backbone.output_shape().map_err(|e| e.to_string())?;
        let product: usize = backbone.temporal_strides.iter().product();
        ensure(t == backbone.input_frames / product, || format!("{name}: analytic T' {t}"))?;
        let bert = BertConfig { model_dim: d, heads: 8, ff_dim: 2 * d, max_positions: t + 1, ..BertConfig::default() };
        let model = Stage1Model::<f32>::new(Stage1Config { backbone: backbone.clone(), bert }, 1).map_err(|e| e.to_string())?;
        let (f, s) = (backbone.input_frames, backbone.input_size);
        let x = Tensor::from_vec(&[1, 3, f, s, s], (0..3 * f * s * s).map(|i| (i % 17) as f32 / 17.0).collect());
        let ctx = Ctx::eval(&model.params);
        let seq = model.features(&ctx, &Var::constant(x));
        ensure(seq.shape() == [1, t, d], || format!("{name}: runtime {:?}, analytic ({t}, {d})", seq.shape()))?;
        ensure(seq.value().all_finite(), || format!("{name}: non-finite features"))?;
        notes.push(format!("{name} {t}x{d}"));
    }
    Ok(notes.join(", "))
}

fn tiny_config(dir: &Path, extra: &[&str]) -> RunConfig {
    let mut cfg = RunConfig::default();
    let base = [
        format!("data_root={}", dir.join("data").display()),
        format!("out={}", dir.join("run").display()),
        "preprocess.segmenter=morph".into(),
        "preprocess.write_masks=false".into(),
    ];
    for a in base.iter().map(String::as_str).chain(extra.iter().copied()) {
        cfg.apply_override(a).expect("valid override");
    }
    cfg
}

fn load_stacks(cfg: &RunConfig) -> Result<Vec<StackVolume>, String> {
    let layout = Layout::new(cfg);
    let rows = read_volume_rows(&layout.volumes_csv()).map_err(|e| e.to_string())?;
    rows.iter()
        .map(|r| {
            let t = read_tensor(&layout.stack_file(&r.volume_id)).map_err(|e| e.to_string())?;
            let shape = t.shape().to_vec();
            Ok(StackVolume {
                volume_id: r.volume_id.clone(),
                label: r.label,
                severity: r.severity,
                size: shape[2],
                n_slices: shape[0],
                data: t.into_data(),
            })
        })
        .collect()
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tiny_config(
        dir.path(),
        &[
            "seed=21",
            "synth.train=8",
            "synth.val=0",
            "synth.test=0",
            "synth.min_slices=20",
            "synth.max_slices=30",
            "synth.image_size=128",
            "preprocess.stack_size=32",
            "backbone.scale=toy",
            "backbone.input_size=32",
            "backbone.input_frames=16",
        ],
    );
    cmd_synth(&cfg).map_err(|e| e.to_string())?;
    cmd_preprocess(&cfg).map_err(|e| e.to_string())?;
    let vols = load_stacks(&cfg)?;
    let covid = vols.iter().filter(|v| v.label == Some(ctbert::ingest::Label::Covid)).count();
    ensure(vols.len() == 8 && covid > 0 && covid < 8, || format!("{} volumes, {covid} covid", vols.len()))?;

    let s1 = cfg.stage1().map_err(|e| e.to_string())?;
    let refs: Vec<&StackVolume> = vols.iter().collect();
    let windows: Vec<Vec<usize>> = vols.iter().map(|v| sample_eval(v.n_slices, 16).unwrap()).collect();
    let targets: Vec<f32> =
        vols.iter().map(|v| if v.label == Some(ctbert::ingest::Label::Covid) { 1.0 } else { 0.0 }).collect();
    let mut probe = Stage1Model::new(s1.clone(), 22).map_err(|e| e.to_string())?;
    let losses = fixed_batch_losses(&mut probe, &window_batch(&refs, &windows), &targets, 1e-4, 6, 23)
        .map_err(|e| e.to_string())?;
    ensure(losses.windows(2).all(|w| w[1] < w[0]), || format!("losses {losses:?}"))?;

    let train_cfg = TrainConfig { learning_rate: 1e-3, max_epochs: 200, seed: 24, ..TrainConfig::default() };
    let model = Stage1Model::new(s1, 22).map_err(|e| e.to_string())?;
    let out = train_stage1(model, &vols, &vols, &train_cfg).map_err(|e| e.to_string())?;
    let r = out.record;
    ensure(r.best_val_accuracy == 1.0, || format!("best training accuracy {} after {} epochs", r.best_val_accuracy, r.epochs.len()))?;
    Ok(format!(
        "100% at epoch {} of 200; first losses {:.4} > {:.4} > {:.4} > {:.4} > {:.4} > {:.4}",
        r.best_epoch, losses[0], losses[1], losses[2], losses[3], losses[4], losses[5]
    ))
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = tiny_config(
        dir.path(),
        &[
            "seed=7",
            "synth.train=200",
            "synth.val=50",
            "synth.test=0",
            "synth.min_slices=20",
            "synth.max_slices=48",
            "preprocess.segmenter=unet",
            "preprocess.stack_size=56",
            "unet.input_size=64",
            "unet.train_slices=50",
            "unet.epochs=15",
            "backbone.scale=toy",
            "backbone.input_size=56",
            "backbone.spatial_strides=1,2,2,1",
            "backbone.input_frames=16",
            "stage1.learning_rate=0.001",
            "stage1.max_epochs=30",
            "stage2.learning_rate=0.001",
            "severity.learning_rate=0.001",
            "stage2.max_epochs=150",
            "severity.max_epochs=150",
        ],
    );
    let step = |r: ctbert::Result<()>| r.map_err(|e| e.to_string());
    step(cmd_synth(&cfg).map(drop))?;
    step(cmd_preprocess(&cfg).map(drop))?;
    step(cmd_train(&cfg, TrainStage::Stage1).map(drop))?;
    step(cmd_extract(&cfg).map(drop))?;
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    for k in [4, 8, 16] {
        cfg.set("stage2.segments", &k.to_string()).map_err(|e| e.to_string())?;
        step(cmd_train(&cfg, TrainStage::Stage2).map(drop))?;
        step(cmd_train(&cfg, TrainStage::Severity).map(drop))?;
        step(cmd_predict(&cfg).map(drop))?;
        let e = cmd_evaluate(&cfg, None).map_err(|e| e.to_string())?;
        let (s1, s2, fused) = (e.stage1.macro_f1, e.stage2.macro_f1, e.fused.macro_f1);
        let sev = e.severity.as_ref().map_or(0.0, |s| s.macro_f1);
        notes.push(format!("K={k}: s1 {s1:.3} s2 {s2:.3} fused {fused:.3} severity {sev:.3}"));
        if fused < 0.90 {
            failures.push(format!("K={k} fused {fused:.3} < 0.90"));
        }
        if fused < s1.max(s2) - 0.02 {
            failures.push(format!("K={k} fused {fused:.3} below best stage {:.3} - 0.02", s1.max(s2)));
        }
        if sev < 0.60 {
            failures.push(format!("K={k} severity {sev:.3} < 0.60"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 1800.0 {
        failures.push(format!("took {secs:.0}s"));
    }
    let summary = format!("{}; {secs:.0}s", notes.join("; "));
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{} ({summary})", failures.join(", ")))
    }
}

fn random_mask(rng: &mut ChaCha8Rng) -> BinaryImage {
    let size = [32, 48, 64, 96][rng.random_range(0..4)];
    let mut data = vec![false; size * size];
    for _ in 0..rng.random_range(0..5) {
        let (cy, cx) = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
        let (ry, rx) = (rng.random_range(2.0..size as f64 / 3.0), rng.random_range(2.0..size as f64 / 3.0));
        let hollow = rng.random_bool(0.4);
        for r in 0..size {
            for c in 0..size {
                let q = ((r as f64 - cy) / ry).powi(2) + ((c as f64 - cx) / rx).powi(2);
                if q <= 1.0 && !(hollow && q < 0.3) {
                    data[r * size + c] = true;
                }
            }
        }
    }
    let noise = rng.random_range(0.0..0.1);
    for v in &mut data {
        if rng.random_bool(noise) {
            *v = !*v;
        }
    }
    BinaryImage::new(size, size, data)
}

fn masks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..500 {
        let m = SliceMask::from_binary(random_mask(&mut rng));
        let r = refine_mask(&m);
        ensure(refine_mask(&r) == r, || format!("mask {case}: refinement not idempotent"))?;
        ensure(m.mask.data.iter().zip(&r.mask.data).all(|(&a, &b)| !a || b), || format!("mask {case}: foreground lost"))?;
        ensure(fill_holes(&r.mask) == r.mask, || format!("mask {case}: interior holes remain"))?;
    }
    for case in 0..500 {
        let n = rng.random_range(1..=60usize);
        let areas: Vec<usize> = (0..n).map(|_| if rng.random_bool(0.2) { 0 } else { rng.random_range(0..5000) }).collect();
        let (a, b) = (rng.random_range(0.01..=1.0f64), rng.random_range(0.01..=1.0f64));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let loose: BTreeSet<usize> = filter_by_area(&areas, lo).map_err(|e| e.to_string())?.kept.into_iter().collect();
        let strict: BTreeSet<usize> = filter_by_area(&areas, hi).map_err(|e| e.to_string())?.kept.into_iter().collect();
        ensure(strict.is_subset(&loose), || format!("areas {case}: ratio {hi} keeps more than {lo}"))?;
    }
    Ok("500 masks, 500 area vectors".into())
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tiny = [
        "seed=31",
        "synth.train=6",
        "synth.val=3",
        "synth.test=0",
        "synth.min_slices=8",
        "synth.max_slices=14",
        "synth.image_size=128",
        "preprocess.stack_size=16",
        "backbone.scale=toy",
        "backbone.input_size=16",
        "backbone.input_frames=8",
        "backbone.spatial_strides=1,2,2,1",
        "stage2.segments=4",
        "stage2.hidden=16,8",
        "train.max_epochs=3",
        "stage1.learning_rate=0.001",
        "stage2.learning_rate=0.001",
    ];
    let mut records = Vec::new();
    for name in ["a", "b"] {
        let mut cfg = tiny_config(dir.path(), &tiny);
        cfg.set("out", &dir.path().join(name).display().to_string()).map_err(|e| e.to_string())?;
        if name == "a" {
            cmd_synth(&cfg).map_err(|e| e.to_string())?;
        }
        cmd_preprocess(&cfg).map_err(|e| e.to_string())?;
        let r1 = cmd_train(&cfg, TrainStage::Stage1).map_err(|e| e.to_string())?;
        cmd_extract(&cfg).map_err(|e| e.to_string())?;
        let r2 = cmd_train(&cfg, TrainStage::Stage2).map_err(|e| e.to_string())?;
        records.push((r1, r2));
    }
    ensure(records[0] == records[1], || "run records differ".into())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut compared = 0;
    for file in ["stage1/model.ckpt", "stage1/run.jsonl", "stage2_k4/model.ckpt", "stage2_k4/run.jsonl"] {
        let same = fs::read(a.join(file)).map_err(|e| e.to_string())? == fs::read(b.join(file)).map_err(|e| e.to_string())?;
        ensure(same, || format!("{file} differs"))?;
        compared += 1;
    }
    let emb_dir = a.join("embeddings");
    let mut embeddings = 0;
    for entry in fs::read_dir(&emb_dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.extension().is_some_and(|e| e == "emb") {
            let bytes = fs::read(&path).map_err(|e| e.to_string())?;
            let seq = decode_embedding(&bytes, &path).map_err(|e| e.to_string())?;
            let again = encode_embedding(&seq).map_err(|e| e.to_string())?;
            ensure(again == bytes, || format!("{} does not round-trip", path.display()))?;
            embeddings += 1;
        }
    }
    ensure(embeddings == 9, || format!("{embeddings} embedding files"))?;
    Ok(format!("{compared} artifacts identical, {embeddings} embedding files round-trip"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("resampling oracle", resampling),
        ("segment-average oracle", segment_average_suite),
        ("macro-F1 oracle", macro_f1_suite),
        ("gradient check", gradients),
        ("shape algebra", shapes),
        ("overfit sanity", overfit),
        ("end-to-end synthetic benchmark", end_to_end),
        ("mask invariants", masks),
        ("reproducibility", reproducibility),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {} PASS {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
