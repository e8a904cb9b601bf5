//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.
//!
//! Runs with a custom harness so the summary is always printed:
//! `cargo test -p sia-cli --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sia_cli::commands;
use sia_cli::config::RunConfig;
use sia_core::adapter::Adapter;
use sia_core::eval::{ap50, evaluate_baseline, predict, GroundTruth, ImageDetection};
use sia_core::{
    allocate, classify, extract_region_feature, roi_align, AdapterBank, BinPartition, BoundingBox,
    ClassifierConfig, Dataset, DeformationKind, Feature, FeatureMap, RegionSample, RoiConfig, Split,
    TextEmbeddingBank,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Box<dyn Fn() -> Outcome>);

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    require(elapsed <= Duration::from_secs(limit_s), || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// Synthetic task of the planted-recovery criterion: B=4, K=8, D=32,
/// rotations, sigma 0.05, 200 train / 50 eval per class per bin.
fn planted_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth.dim = 32;
    cfg.synth.num_classes = 8;
    cfg.synth.bins = 4;
    cfg.synth.samples_per_class_per_bin = 250;
    cfg.synth.noise_std = 0.05;
    cfg.synth.deformation = DeformationKind::Rotation;
    cfg.split.train_per_cell = Some(200);
    let data = dir.join("data");
    cfg.paths.out_dir = Some(data.clone());
    cfg.paths.train = Some(data.join("train.sia"));
    cfg.paths.eval = Some(data.join("eval.sia"));
    cfg.paths.texts = Some(data.join("texts.sia"));
    cfg
}

fn with_run_dir(cfg: &RunConfig, dir: &Path) -> RunConfig {
    let mut c = cfg.clone();
    c.paths.out_dir = Some(dir.to_path_buf());
    c.paths.checkpoint = Some(dir.join("bank.sia"));
    c
}

fn criterion_1_gradients() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let g = &cfg.gradcheck;
    require(
        (g.instances, g.dim, g.hidden_dim, g.num_adapters, g.num_classes, g.batch) == (100, 8, 2, 3, 5, 4)
            && g.step == 1e-4
            && g.margin == 1e-6,
        || format!("unexpected gradcheck defaults {g:?}"),
    )?;
    let s = commands::gradcheck(&cfg, None).map_err(|e| format!("{e:#}"))?;
    let elapsed = start.elapsed();
    require(s.report.max_rel_error <= 1e-5, || {
        format!("max relative error {:e}", s.report.max_rel_error)
    })?;
    require(s.report.compared > 0, || "no coordinates compared".into())?;
    within(elapsed, 30)?;
    Ok(format!(
        "max rel error {:.2e} over {} coordinates ({} skipped), tau {}, {:.2}s",
        s.report.max_rel_error,
        s.report.compared,
        s.report.skipped,
        g.tau,
        elapsed.as_secs_f64()
    ))
}

fn criterion_2_allocation() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ratios: Vec<f64> = (0..100_000).map(|_| log_uniform(&mut rng, 1e-3, 1e3)).collect();
    let mut partitions = vec![BinPartition::geometric(sia_core::BankConfig::default().num_adapters)
        .map_err(|e| e.to_string())?];
    while partitions.len() < 21 {
        let n = rng.random_range(1..=16usize);
        let mut interior: Vec<f64> = (1..n).map(|_| log_uniform(&mut rng, 1e-2, 1e2)).collect();
        interior.sort_by(f64::total_cmp);
        interior.dedup();
        partitions.push(BinPartition::from_interior(&interior).map_err(|e| e.to_string())?);
    }
    for p in &partitions {
        for &r in &ratios {
            let y = allocate(p, r).map_err(|e| e.to_string())?;
            let hot = y.onehot();
            let ones = hot.iter().filter(|&&v| v == 1.0).count();
            let zeros = hot.iter().filter(|&&v| v == 0.0).count();
            require(ones == 1 && zeros == p.num_bins() - 1, || {
                format!("ratio {r}: {ones} hot entries")
            })?;
            // bins are (s_{k-1}, s_k]: index = number of interior bounds strictly below r
            let expected = p.interior().iter().filter(|&&s| s < r).count();
            require(y.index() == expected, || {
                format!("ratio {r}: bin {} but expected {expected}", y.index())
            })?;
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, 5)?;
    Ok(format!(
        "{} ratios x {} partitions, {:.2}s",
        ratios.len(),
        partitions.len(),
        elapsed.as_secs_f64()
    ))
}

fn criterion_3_init_baseline(dir: &Path) -> Outcome {
    let mut checked = 0;
    let cases = [
        (DeformationKind::Rotation, 0usize, 10usize, 0.9),
        (DeformationKind::GeneralLinear, 2, 4, 0.5),
        (DeformationKind::Identity, 1, 1, 0.0),
        (DeformationKind::Rotation, 3, 16, 0.99),
    ];
    for (i, &(deformation, novel, n, lambda)) in cases.iter().enumerate() {
        let mut cfg = RunConfig::default();
        cfg.synth.dim = 16;
        cfg.synth.num_classes = 6;
        cfg.synth.samples_per_class_per_bin = 20;
        cfg.synth.deformation = deformation;
        cfg.synth.novel_classes = novel;
        cfg.set_seed(30 + i as u64);
        let data = dir.join(format!("c3-{i}"));
        cfg.paths.out_dir = Some(data.clone());
        commands::gen_synth(&cfg).map_err(|e| format!("{e:#}"))?;
        cfg.paths.eval = Some(data.join("dataset.sia"));
        cfg.paths.texts = Some(data.join("texts.sia"));
        cfg.bank.num_adapters = n;
        cfg.bank.lambda = lambda;
        cfg.eval.init_bank = true;
        let s = commands::eval(&cfg).map_err(|e| format!("{e:#}"))?;
        require(s.adapted == s.baseline, || format!("case {i}: init report differs from baseline"))?;

        // the same through a checkpoint written to disk
        let dataset = Dataset::load(&data.join("dataset.sia")).map_err(|e| e.to_string())?;
        let texts = TextEmbeddingBank::load(&data.join("texts.sia")).map_err(|e| e.to_string())?;
        let bank = AdapterBank::from_config(dataset.dim(), &cfg.bank.bank_config(), None, 3).map_err(|e| e.to_string())?;
        let ckpt = data.join("init_bank.sia");
        bank.save(&ckpt).map_err(|e| e.to_string())?;
        cfg.eval.init_bank = false;
        cfg.paths.checkpoint = Some(ckpt);
        let s = commands::eval(&cfg).map_err(|e| format!("{e:#}"))?;
        require(s.adapted == s.baseline, || format!("case {i}: checkpoint report differs from baseline"))?;

        let adapted = predict(&bank, &dataset, &texts, &cfg.classifier).map_err(|e| e.to_string())?;
        let raw = AdapterBank::from_config(dataset.dim(), &cfg.bank.bank_config(), None, 3)
            .and_then(|b| b.with_lambda(0.0))
            .map_err(|e| e.to_string())?;
        let baseline = predict(&raw, &dataset, &texts, &cfg.classifier).map_err(|e| e.to_string())?;
        require(adapted == baseline, || format!("case {i}: per-sample argmax differs"))?;
        let direct = evaluate_baseline(&dataset, &texts, &cfg.classifier, bank.partition()).map_err(|e| e.to_string())?;
        require(direct == s.baseline, || format!("case {i}: baseline report mismatch"))?;
        checked += dataset.len();
    }
    Ok(format!("{} cases, {checked} samples, reports identical", cases.len()))
}

fn train_and_eval(cfg: &RunConfig, dir: &Path, n: usize) -> Result<f64, String> {
    let mut c = with_run_dir(cfg, dir);
    c.bank.num_adapters = n;
    c.bank.boundaries = None;
    commands::train(&c).map_err(|e| format!("{e:#}"))?;
    let s = commands::eval(&c).map_err(|e| format!("{e:#}"))?;
    Ok(s.adapted.overall_accuracy)
}

fn criterion_4_planted_recovery(dir: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = planted_config(dir);
    let synth = commands::gen_synth(&cfg).map_err(|e| format!("{e:#}"))?;
    require(synth.train_samples == 200 * 8 * 4 && synth.eval_samples == 50 * 8 * 4, || {
        format!("split sizes {} / {}", synth.train_samples, synth.eval_samples)
    })?;
    let oracle = synth.oracle_accuracy_eval.ok_or("empty eval split")?;
    let acc1 = train_and_eval(&cfg, &dir.join("n1"), 1)?;
    let acc4 = train_and_eval(&cfg, &dir.join("n4"), 4)?;
    let elapsed = start.elapsed();
    let detail = format!(
        "acc(N=1) {acc1:.4}, acc(N=4) {acc4:.4}, oracle {oracle:.4}, {:.1}s",
        elapsed.as_secs_f64()
    );
    require(acc4 - acc1 >= 0.10, || format!("gap below 10pp: {detail}"))?;
    require(acc4 >= 0.9 * oracle, || format!("below 90% of oracle: {detail}"))?;
    within(elapsed, 120)?;
    Ok(detail)
}

fn criterion_5_ablation(dir: &Path) -> Outcome {
    let start = Instant::now();
    let mut cfg = planted_config(dir);
    if !dir.join("data").join("train.sia").exists() {
        commands::gen_synth(&cfg).map_err(|e| format!("{e:#}"))?;
    }
    cfg.ablate.n_values = vec![1, 2, 4, 16];
    let full = commands::ablate_n(&with_run_dir(&cfg, &dir.join("ablate-full"))).map_err(|e| format!("{e:#}"))?;
    cfg.ablate.thin_per_cell = Some(20);
    let thin = commands::ablate_n(&with_run_dir(&cfg, &dir.join("ablate-thin"))).map_err(|e| format!("{e:#}"))?;
    let elapsed = start.elapsed();
    let acc = |rows: &[commands::AblationRow]| -> BTreeMap<usize, f64> {
        rows.iter().map(|r| (r.num_adapters, r.accuracy)).collect()
    };
    let (f, t) = (acc(&full.rows), acc(&thin.rows));
    require(full.rows.len() == 4 && thin.rows.len() == 4, || "row count".into())?;
    require(
        full.rows.iter().all(|r| r.boundaries.len() + 1 == r.num_adapters),
        || "rows must record their boundaries".into(),
    )?;
    let detail = format!(
        "full: 1 {:.4}, 2 {:.4}, 4 {:.4}, 16 {:.4}; thinned to 20: 4 {:.4}, 16 {:.4}; {:.1}s",
        f[&1],
        f[&2],
        f[&4],
        f[&16],
        t[&4],
        t[&16],
        elapsed.as_secs_f64()
    );
    require(f[&4] >= f[&2] && f[&2] >= f[&1], || format!("not increasing up to 4: {detail}"))?;
    require(t[&16] <= t[&4], || format!("thinned N=16 beats N=4: {detail}"))?;
    within(elapsed, 300)?;
    Ok(detail)
}

fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Brute-force AP for one class: greedy matching redone from scratch for
/// every prefix of the ranking, then the interpolated PR curve.
fn brute_force_ap(dets: &[ImageDetection], gts: &[GroundTruth]) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut ranked: Vec<&ImageDetection> = dets.iter().collect();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let tp_in_prefix = |k: usize| -> usize {
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for d in &ranked[..k] {
            let mut best: Option<usize> = None;
            let mut best_iou = 0.0;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] || g.image_id != d.image_id {
                    continue;
                }
                let o = box_iou(&d.bbox, &g.bbox);
                if o >= 0.5 && (best.is_none() || o > best_iou) {
                    best = Some(gi);
                    best_iou = o;
                }
            }
            if let Some(gi) = best {
                used[gi] = true;
                tp += 1;
            }
        }
        tp
    };
    let n = ranked.len();
    let tps: Vec<usize> = (0..=n).map(tp_in_prefix).collect();
    let precision: Vec<f64> = (1..=n).map(|k| tps[k] as f64 / k as f64).collect();
    let g = gts.len() as f64;
    let mut ap = 0.0;
    for k in 1..=n {
        if tps[k] > tps[k - 1] {
            let best = precision[k - 1..].iter().cloned().fold(f64::MIN, f64::max);
            ap += best / g;
        }
    }
    Some(ap)
}

fn criterion_6_ap50() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid = |rng: &mut ChaCha8Rng| {
        BoundingBox::new(
            rng.random_range(0..4) as f64 * 0.5,
            rng.random_range(0..4) as f64 * 0.5,
            rng.random_range(1..4) as f64,
            rng.random_range(1..4) as f64,
        )
        .unwrap()
    };
    let mut classes_checked = 0;
    for inst in 0..1000 {
        let k = rng.random_range(1..=3usize);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for c in 0..k {
            for _ in 0..rng.random_range(0..=5) {
                dets.push(ImageDetection {
                    image_id: rng.random_range(0..2),
                    class: c,
                    score: rng.random_range(0..4) as f64 * 0.25,
                    bbox: grid(&mut rng),
                });
            }
            for _ in 0..rng.random_range(0..=3) {
                gts.push(GroundTruth {
                    image_id: rng.random_range(0..2),
                    class: c,
                    bbox: grid(&mut rng),
                });
            }
        }
        let got = ap50(&dets, &gts, k).map_err(|e| e.to_string())?;
        for (c, &ap) in got.iter().enumerate() {
            let d: Vec<ImageDetection> = dets.iter().filter(|d| d.class == c).copied().collect();
            let g: Vec<GroundTruth> = gts.iter().filter(|g| g.class == c).copied().collect();
            let want = brute_force_ap(&d, &g);
            require(ap == want, || format!("instance {inst} class {c}: {ap:?} vs {want:?}"))?;
            classes_checked += 1;
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, 10)?;
    Ok(format!("1000 instances, {classes_checked} class APs equal, {:.2}s", elapsed.as_secs_f64()))
}

fn criterion_7_numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_sum: f64 = 0.0;
    let mut worst_scale: f64 = 0.0;
    for i in 0..10_000 {
        let dim = rng.random_range(1..=16usize);
        let k = rng.random_range(2..=10usize);
        let protos: Vec<f32> = (0..dim * k)
            .map(|j| if j % dim == 0 { 1.0 } else { rng.random_range(-1.0f32..1.0) })
            .collect();
        let names = (0..k).map(|c| format!("c{c}")).collect();
        let texts = TextEmbeddingBank::new(dim, protos, names, vec![Split::Base; k]).map_err(|e| e.to_string())?;
        let tau = [0.01, 0.1, 1.0][i % 3];
        let cfg = ClassifierConfig { tau, normalize: true };
        let mut beta = Feature::from_fn(dim, |_, _| rng.random_range(-10.0..10.0));
        beta[0] += 1e-3;
        let p = classify(&beta, &texts, &cfg).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max((p.sum() - 1.0).abs());

        let pow2 = 2f64.powi(rng.random_range(-20..=20));
        let p2 = classify(&(&beta * pow2), &texts, &cfg).map_err(|e| e.to_string())?;
        require(p2 == p, || format!("input {i}: scale {pow2} changed probabilities"))?;
        let c = log_uniform(&mut rng, 1e-6, 1e6);
        let pc = classify(&(&beta * c), &texts, &cfg).map_err(|e| e.to_string())?;
        worst_scale = worst_scale.max((&pc - &p).amax());
        require(pc.argmax().0 == p.argmax().0, || format!("input {i}: scale {c} changed argmax"))?;
    }
    require(worst_sum <= 1e-9, || format!("probability sum off by {worst_sum:e}"))?;
    require(worst_scale <= 1e-12, || format!("arbitrary scale moved probabilities by {worst_scale:e}"))?;

    let cfg = RoiConfig::default();
    let mut worst_roi: f64 = 0.0;
    for case in 0..100 {
        let (h, w) = (rng.random_range(6..20usize), rng.random_range(6..20usize));
        let scale = [1.0, 0.5, 0.25][case % 3];
        let coef: Vec<[f64; 3]> = (0..3)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-5.0..5.0)])
            .collect();
        let map = FeatureMap::from_fn(3, h, w, scale, |c, u, v| coef[c][0] * u + coef[c][1] * v + coef[c][2])
            .map_err(|e| e.to_string())?;
        // interior: every sample lies between the outermost cell centers
        let (lo_u, hi_u) = (0.5, w as f64 - 0.5);
        let (lo_v, hi_v) = (0.5, h as f64 - 0.5);
        let u0 = rng.random_range(lo_u..hi_u - 1.0);
        let v0 = rng.random_range(lo_v..hi_v - 1.0);
        let u1 = rng.random_range(u0 + 0.5..hi_u);
        let v1 = rng.random_range(v0 + 0.5..hi_v);
        let bbox = BoundingBox::new(u0 / scale, v0 / scale, (u1 - u0) / scale, (v1 - v0) / scale).unwrap();
        let aligned = roi_align(&map, &bbox, &cfg).map_err(|e| e.to_string())?;
        let p = cfg.pool_size as f64;
        for (ch, k) in coef.iter().enumerate() {
            let f = |u: f64, v: f64| k[0] * u + k[1] * v + k[2];
            for py in 0..cfg.pool_size {
                for px in 0..cfg.pool_size {
                    let u = u0 + (u1 - u0) * (px as f64 + 0.5) / p;
                    let v = v0 + (v1 - v0) * (py as f64 + 0.5) / p;
                    worst_roi = worst_roi.max((aligned.get(ch, py, px) - f(u, v)).abs());
                }
            }
        }
        let pooled = extract_region_feature(&map, &bbox, &cfg).map_err(|e| e.to_string())?;
        for (ch, &val) in pooled.iter().enumerate() {
            let centre = coef[ch][0] * (u0 + u1) / 2.0 + coef[ch][1] * (v0 + v1) / 2.0 + coef[ch][2];
            worst_roi = worst_roi.max((val - centre).abs());
        }
    }
    require(worst_roi <= 1e-6, || format!("roi_align off affine map by {worst_roi:e}"))?;
    Ok(format!(
        "sum err {worst_sum:.1e}, arbitrary-scale err {worst_scale:.1e}, roi err {worst_roi:.1e}"
    ))
}

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        out.insert(
            entry.file_name().to_string_lossy().into_owned(),
            fs::read(entry.path()).map_err(|e| e.to_string())?,
        );
    }
    Ok(out)
}

fn criterion_8_determinism(dir: &Path) -> Outcome {
    let data = dir.join("data");
    let run = dir.join("run");
    let mut cfg = RunConfig::default();
    cfg.synth.samples_per_class_per_bin = 30;
    cfg.synth.novel_classes = 2;
    cfg.bank.num_adapters = 4;
    cfg.set_seed(11);
    cfg.paths.train = Some(data.join("train.sia"));
    cfg.paths.eval = Some(data.join("eval.sia"));
    cfg.paths.texts = Some(data.join("texts.sia"));
    cfg.paths.checkpoint = Some(run.join("bank.sia"));
    cfg.eval.export_features = true;
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&data);
        let _ = fs::remove_dir_all(&run);
        let mut gen = cfg.clone();
        gen.paths.out_dir = Some(data.clone());
        commands::gen_synth(&gen).map_err(|e| format!("{e:#}"))?;
        let mut c = cfg.clone();
        c.paths.out_dir = Some(run.clone());
        commands::train(&c).map_err(|e| format!("{e:#}"))?;
        commands::eval(&c).map_err(|e| format!("{e:#}"))?;
        runs.push((snapshot(&data)?, snapshot(&run)?));
    }
    let files = runs[0].0.len() + runs[0].1.len();
    for (name, bytes) in runs[0].0.iter().chain(&runs[0].1) {
        let again = runs[1].0.get(name).or_else(|| runs[1].1.get(name));
        require(again == Some(bytes), || format!("{name} differs between runs"))?;
    }
    require(runs[0].0.len() == runs[1].0.len() && runs[0].1.len() == runs[1].1.len(), || {
        "different file sets".into()
    })?;
    Ok(format!("{files} files byte-identical across two runs"))
}

fn random_partition(rng: &mut ChaCha8Rng) -> BinPartition {
    let n = rng.random_range(1..=6usize);
    let mut interior: Vec<f64> = (1..n).map(|_| log_uniform(rng, 0.05, 20.0)).collect();
    interior.sort_by(f64::total_cmp);
    interior.dedup();
    BinPartition::from_interior(&interior).unwrap()
}

fn f32_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(rows, cols, |_, _| f64::from(rng.random_range(-3.0f32..3.0)))
}

fn random_bank(rng: &mut ChaCha8Rng) -> AdapterBank {
    let partition = random_partition(rng);
    let (d, dh) = (rng.random_range(1..=12usize), rng.random_range(1..=4usize));
    let adapters = (0..partition.num_bins())
        .map(|_| Adapter {
            w1: f32_matrix(d, dh, rng),
            w2: f32_matrix(dh, d, rng),
        })
        .collect();
    AdapterBank::new(adapters, partition, rng.random::<f64>()).unwrap()
}

fn random_labels(k: usize, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<Split>) {
    let names = (0..k).map(|c| format!("class \"{c}\", {}", rng.random::<u16>())).collect();
    let mut tags: Vec<Split> = (0..k)
        .map(|_| if rng.random_bool(0.3) { Split::Novel } else { Split::Base })
        .collect();
    tags[0] = Split::Base;
    (names, tags)
}

fn random_texts(rng: &mut ChaCha8Rng) -> TextEmbeddingBank {
    let (d, k) = (rng.random_range(1..=12usize), rng.random_range(2..=9usize));
    let protos = (0..d * k)
        .map(|j| if j % d == 0 { rng.random_range(0.5f32..2.0) } else { rng.random_range(-1.0f32..1.0) })
        .collect();
    let (names, tags) = random_labels(k, rng);
    TextEmbeddingBank::new(d, protos, names, tags).unwrap()
}

fn random_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    let (d, k) = (rng.random_range(1..=12usize), rng.random_range(2..=6usize));
    let (names, tags) = random_labels(k, rng);
    let samples = (0..rng.random_range(0..40u64))
        .map(|id| {
            let label = rng.random_range(0..k);
            RegionSample {
                id: id * 7 + rng.random_range(0..7),
                image_id: rng.random_range(0..5),
                bbox: BoundingBox::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    log_uniform(rng, 0.01, 100.0),
                    log_uniform(rng, 0.01, 100.0),
                )
                .unwrap(),
                label,
                split: tags[label],
                feature: (0..d).map(|_| rng.random_range(-1e3f32..1e3)).collect(),
            }
        })
        .collect();
    Dataset::new(d, names, tags, samples).unwrap()
}

fn criterion_9_round_trips(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..100 {
        let bank = random_bank(&mut rng);
        let bytes = bank.to_bytes();
        let back = AdapterBank::from_bytes(&bytes).map_err(|e| e.to_string())?;
        require(back == bank && back.to_bytes() == bytes, || format!("bank {i} changed"))?;

        let texts = random_texts(&mut rng);
        let bytes = texts.to_bytes();
        let back = TextEmbeddingBank::from_bytes(&bytes).map_err(|e| e.to_string())?;
        require(back == texts && back.to_bytes() == bytes, || format!("text bank {i} changed"))?;

        let ds = random_dataset(&mut rng);
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).map_err(|e| e.to_string())?;
        require(back == ds && back.to_bytes() == bytes, || format!("dataset {i} changed"))?;

        if i % 10 == 0 {
            let path = dir.join(format!("bank-{i}.sia"));
            bank.save(&path).map_err(|e| e.to_string())?;
            require(AdapterBank::load(&path).map_err(|e| e.to_string())? == bank, || {
                format!("bank {i} changed on disk")
            })?;
            let path = dir.join(format!("ds-{i}.sia"));
            ds.save(&path).map_err(|e| e.to_string())?;
            require(Dataset::load(&path).map_err(|e| e.to_string())? == ds, || {
                format!("dataset {i} changed on disk")
            })?;
        }
    }
    Ok("100 banks, 100 text banks, 100 datasets bit-exact".into())
}

fn main() {
    let root = tempfile::tempdir().expect("temporary directory");
    let sub = |name: &str| {
        let p = root.path().join(name);
        fs::create_dir_all(&p).expect("create work dir");
        p
    };
    let (planted, c3, c8, c9) = (sub("planted"), sub("init"), sub("determinism"), sub("roundtrip"));
    let criteria: Vec<Criterion> = vec![
        ("1 gradient correctness", Box::new(criterion_1_gradients)),
        ("2 allocation totality and exclusivity", Box::new(criterion_2_allocation)),
        ("3 init-baseline equivalence", Box::new(move || criterion_3_init_baseline(&c3))),
        ("4 planted-deformation recovery", Box::new({
            let p = planted.clone();
            move || criterion_4_planted_recovery(&p)
        })),
        ("5 ablation shape", Box::new(move || criterion_5_ablation(&planted))),
        ("6 AP50 oracle equivalence", Box::new(criterion_6_ap50)),
        ("7 numerical hygiene", Box::new(criterion_7_numerics)),
        ("8 determinism", Box::new(move || criterion_8_determinism(&c8))),
        ("9 serialization round trips", Box::new(move || criterion_9_round_trips(&c9))),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS [{name}] {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL [{name}] {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
