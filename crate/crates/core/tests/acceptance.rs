//! Acceptance suite. Each test prints one `PASS` or `FAIL` line on stderr,
//! bypassing libtest's output capture, and then asserts the same outcome.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use advdepth::cli::{
    cmd_adapt, cmd_eval, cmd_sweep, cmd_synth, cmd_train, ExperimentConfig, GridValue, SweepKind, ADAPT_REPORT,
    METRICS_JSON, RESOLVED_CONFIG, SWEEP_CSV,
};
use advdepth::data::{
    load_dataset, make_mask, preprocess, render_scene, synth_scene, write_dataset, DatasetProfile, DatasetSplit,
    BatchMode, DepthMap, LabeledSample, PreprocessProfile, SceneConfig, UnlabeledSample,
};
use advdepth::graph::Graph;
use advdepth::losses::{self, LossKind, LossWeights};
use advdepth::metrics::{compute_metrics, evaluate_model, Aggregation};
use advdepth::models::checkpoint::{load_network, save_network};
use advdepth::models::{
    build_depth_discriminator, build_generator, build_pair_discriminator, receptive_fields, DiscriminatorSpec,
    GeneratorSpec, InitScheme, Mode, Network,
};
use advdepth::trainer::{
    self, semi_generator_grads, supervised_generator_grads, Discriminators, TrainConfig, TrainOptions, TrainState,
    CHECKPOINT_FILE, CURVE_FILE, EPOCHS_FILE, FINAL_FILE,
};
use advdepth::Tensor;

fn report(name: &str, ok: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "{} {name} ({:.2}s): {detail}\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{line}");
}

fn bits(values: &[f64]) -> Vec<u64> {
    values.iter().map(|v| v.to_bits()).collect()
}

fn same_params(a: &Network, b: &Network) -> bool {
    let flat = |n: &Network| -> Vec<u64> {
        n.params()
            .iter()
            .chain(n.buffers())
            .flat_map(|p| bits(p.value.data()))
            .collect()
    };
    a.spec() == b.spec() && flat(a) == flat(b)
}

#[test]
fn receptive_field_table() {
    let t = Instant::now();
    let sizes = receptive_fields(&DiscriminatorSpec::pair()).sizes();
    let depth = receptive_fields(&DiscriminatorSpec::depth()).sizes();
    let el = t.elapsed();
    let ok = sizes == [4, 10, 22, 46, 70] && depth == sizes && el < Duration::from_secs(1);
    report("receptive_fields", ok, el, &format!("{sizes:?}"));
}

struct Oracle {
    rel: f64,
    rmse: f64,
    rmse_log: f64,
    log10: f64,
    delta: [f64; 3],
    n: usize,
}

fn scalar_oracle(pred: &[f64], gt: &[f64], mask: &[bool]) -> Oracle {
    let thresholds = [1.25, 1.5625, 1.953125];
    let (mut rel, mut sq, mut sq_log, mut l10) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let mut n = 0;
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let (p, g) = (pred[i], gt[i]);
        n += 1;
        rel += (p - g).abs() / g;
        sq += (p - g) * (p - g);
        sq_log += (p.ln() - g.ln()) * (p.ln() - g.ln());
        l10 += (p.log10() - g.log10()).abs();
        let ratio = if p > g { p / g } else { g / p };
        for k in 0..3 {
            if ratio < thresholds[k] {
                hits[k] += 1;
            }
        }
    }
    let nf = n as f64;
    Oracle {
        rel: rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        log10: l10 / nf,
        delta: hits.map(|h| h as f64 / nf),
        n,
    }
}

#[test]
fn metric_oracle() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut empty_ok = true;
    for case in 0..1000 {
        let (h, w) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let n = h * w;
        let keep = rng.random_range(0.05..1.0);
        let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..80.0)).collect();
        let mut pred: Vec<f64> = gt.iter().map(|g| g * rng.random_range(0.4..2.5)).collect();
        // exact threshold ratios land on the strict boundary
        for i in (0..n).step_by(7) {
            pred[i] = gt[i] * [1.25, 1.5625, 1.953125, 0.8][i % 4];
        }
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(keep)).collect();
        if case % 100 == 0 {
            mask.fill(false);
        }
        let got = compute_metrics(&pred, &gt, &mask);
        if !mask.iter().any(|&m| m) {
            empty_ok &= got.is_err();
            continue;
        }
        let got = got.unwrap();
        let want = scalar_oracle(&pred, &gt, &mask);
        let diffs = [
            got.rel - want.rel,
            got.rmse - want.rmse,
            got.rmse_log - want.rmse_log,
            got.log10 - want.log10,
            got.delta1 - want.delta[0],
            got.delta2 - want.delta[1],
            got.delta3 - want.delta[2],
        ];
        let d = diffs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        worst = worst.max(d);
        if d > 1e-9 || got.n_pixels != want.n {
            failures.push(case);
        }
    }

    let hand = compute_metrics(&[1.0, 5.0], &[2.0, 4.0], &[true, true]).unwrap();
    let hand_want = scalar_oracle(&[1.0, 5.0], &[2.0, 4.0], &[true, true]);
    let hand_ok = hand.rel == 0.375
        && hand.rmse == 1.0
        && (hand.delta1, hand.delta2, hand.delta3) == (0.0, 0.5, 0.5)
        && hand.log10 == hand_want.log10
        && hand.rmse_log == hand_want.rmse_log
        && (hand.log10 - 0.19897).abs() < 1e-5;
    let el = t.elapsed();
    let ok = failures.is_empty() && hand_ok && empty_ok && el < Duration::from_secs(10);
    report(
        "metric_oracle",
        ok,
        el,
        &format!(
            "1000 arrays, max deviation {worst:.2e}, {} mismatches; hand example rel {} rmse {} log10 {:.5} d1 {} d2 {} d3 {}",
            failures.len(),
            hand.rel,
            hand.rmse,
            hand.log10,
            hand.delta1,
            hand.delta2,
            hand.delta3
        ),
    );
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Wrt {
    G,
    Pd,
    Dd,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    PdLoss,
    GPd,
    DdLoss,
    GDd,
    GSemi,
    GSup,
    Pixel(LossKind),
}

struct Fixture {
    x: Tensor,
    gt: Tensor,
    mask: Tensor,
    w: LossWeights,
}

/// Loss value and gradient with respect to the parameters of `wrt`.
fn objective(fx: &Fixture, nets: [&Network; 3], op: Op, wrt: Wrt) -> (f64, Vec<Tensor>) {
    let [g, pd, dd] = nets;
    let mut gr = Graph::new();
    let gv = g.bind(&mut gr, wrt == Wrt::G);
    let pv = pd.bind(&mut gr, wrt == Wrt::Pd);
    let dv = dd.bind(&mut gr, wrt == Wrt::Dd);
    let x = gr.constant(fx.x.clone());
    let y = gr.constant(fx.gt.clone());
    let pred = g.forward(&mut gr, &gv, &[x], Mode::Train).unwrap().output;
    let pd_fake = pd.forward(&mut gr, &pv, &[x, pred], Mode::Train).unwrap().output;
    let pd_real = pd.forward(&mut gr, &pv, &[x, y], Mode::Train).unwrap().output;
    let dd_fake = dd.forward(&mut gr, &dv, &[pred], Mode::Train).unwrap().output;
    let dd_real = dd.forward(&mut gr, &dv, &[y], Mode::Train).unwrap().output;
    let w = &fx.w;
    let loss = match op {
        Op::PdLoss => losses::loss_pd(&mut gr, pd_real, pd_fake, w),
        Op::GPd => losses::loss_g_pd(&mut gr, pd_fake, w),
        Op::DdLoss => losses::loss_dd(&mut gr, dd_real, dd_fake, w),
        Op::GDd => losses::loss_g_dd(&mut gr, dd_fake, w),
        Op::GSemi => losses::loss_g_semi(&mut gr, w, Some(pd_fake), Some(dd_fake)),
        Op::GSup => losses::loss_g_sup(&mut gr, w, w.beta, Some(pd_fake), Some(dd_fake), pred, &fx.gt, &fx.mask),
        Op::Pixel(kind) => losses::pixel_loss(&mut gr, kind, pred, &fx.gt, &fx.mask),
    }
    .unwrap();
    let (vars, net) = match wrt {
        Wrt::G => (&gv, g),
        Wrt::Pd => (&pv, pd),
        Wrt::Dd => (&dv, dd),
    };
    let mut grads = gr.backward(loss.var);
    let out = vars
        .iter()
        .zip(net.params())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    (gr.value(loss.var).data()[0], out)
}

#[test]
fn gradient_checks() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (n, h, w) = (2, 32, 32);
    let plane = n * h * w;
    let fx = Fixture {
        x: Tensor::new(vec![n, 3, h, w], (0..3 * plane).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap(),
        gt: Tensor::new(vec![n, 1, h, w], (0..plane).map(|_| rng.random_range(0.5..9.5)).collect()).unwrap(),
        mask: Tensor::new(vec![n, 1, h, w], (0..plane).map(|i| if i % 11 == 5 { 0.0 } else { 1.0 }).collect()).unwrap(),
        w: LossWeights::default(),
    };
    let mut g = build_generator(&GeneratorSpec::tiny_unet(2)).unwrap();
    g.init_params(&InitScheme::HeNormal { seed: 1 }).unwrap();
    let narrow = [4, 8, 8, 8];
    let mut pd = build_pair_discriminator(&DiscriminatorSpec::pair().with_widths(narrow)).unwrap();
    let mut dd = build_depth_discriminator(&DiscriminatorSpec::depth().with_widths(narrow)).unwrap();
    pd.init_params(&InitScheme::Normal002 { seed: 2 }).unwrap();
    dd.init_params(&InitScheme::Normal002 { seed: 3 }).unwrap();
    let g_params = g.param_count();

    let mut cases: Vec<(Op, Wrt)> = [Op::PdLoss, Op::GPd, Op::DdLoss, Op::GDd, Op::GSemi, Op::GSup]
        .into_iter()
        .chain(LossKind::ALL.map(Op::Pixel))
        .map(|op| (op, Wrt::G))
        .collect();
    cases.push((Op::PdLoss, Wrt::Pd));
    cases.push((Op::DdLoss, Wrt::Dd));

    let step = 1e-6;
    let mut worst = Vec::new();
    let mut ok = g_params <= 5000;
    for (op, wrt) in cases {
        let nets = [&g, &pd, &dd];
        let (_, grads) = objective(&fx, nets, op, wrt);
        let target = match wrt {
            Wrt::G => &g,
            Wrt::Pd => &pd,
            Wrt::Dd => &dd,
        };
        let sizes: Vec<usize> = target.params().iter().map(|p| p.value.len()).collect();
        let total: usize = sizes.iter().sum();
        let mut max_err = 0.0f64;
        for _ in 0..10 {
            let mut flat = rng.random_range(0..total);
            let pi = sizes.iter().position(|&s| if flat < s { true } else { flat -= s; false }).unwrap();
            let eval = |delta: f64| {
                let mut net = target.clone();
                net.params_mut()[pi].value.data_mut()[flat] += delta;
                let nets = match wrt {
                    Wrt::G => [&net, &pd, &dd],
                    Wrt::Pd => [&g, &net, &dd],
                    Wrt::Dd => [&g, &pd, &net],
                };
                objective(&fx, nets, op, wrt).0
            };
            let fd = (eval(step) - eval(-step)) / (2.0 * step);
            let an = grads[pi].data()[flat];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            max_err = max_err.max(err);
        }
        ok &= max_err < 1e-4;
        worst.push(format!("{op:?}/{wrt:?} {max_err:.1e}"));
    }
    let el = t.elapsed();
    ok &= el < Duration::from_secs(120);
    report(
        "gradient_checks",
        ok,
        el,
        &format!("generator {g_params} params, 10 probes each, max rel err: {}", worst.join(", ")),
    );
}

fn small_cfg(seed: u64) -> TrainConfig {
    let narrow = [4, 8, 8, 8];
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        generator: GeneratorSpec::tiny_unet(4),
        pair_discriminator: DiscriminatorSpec::pair().with_widths(narrow),
        depth_discriminator: DiscriminatorSpec::depth().with_widths(narrow),
        seed,
        ..Default::default()
    }
}

fn tiny_split(n_l: u64, n_u: u64) -> DatasetSplit {
    let labeled = (0..n_l).map(|s| synth_scene(s, (64, 64)).unwrap()).collect();
    let unlabeled = (0..n_u)
        .map(|s| UnlabeledSample {
            image: synth_scene(500 + s, (64, 64)).unwrap().image,
        })
        .collect();
    DatasetSplit::new(labeled, unlabeled, 0).unwrap()
}

/// Every parameter set to zero gives discriminators whose output is
/// `sigmoid(bias)` everywhere, whatever the input.
fn constant_discriminator(net: &mut Network, logit: f64) {
    net.zero_params();
    let last = net.params_mut().last_mut().unwrap();
    assert!(last.name.ends_with("bias"), "{}", last.name);
    last.value.data_mut().fill(logit);
}

#[test]
fn fixed_points() {
    let t = Instant::now();
    let split = tiny_split(4, 4);
    let ln2 = std::f64::consts::LN_2;
    let mut notes = Vec::new();
    let mut ok = true;

    let base = small_cfg(5);
    let mut st = TrainState::new(&base).unwrap();
    constant_discriminator(&mut st.pd, 0.0);
    constant_discriminator(&mut st.dd, 0.0);
    let images = advdepth::data::image_batch(split.unlabeled.iter().map(|u| &u.image)).unwrap();
    let reals = advdepth::data::image_batch(split.labeled.iter().map(|s| &s.image)).unwrap();
    let depths = advdepth::data::depth_batch(split.labeled.iter().map(|s| &s.depth)).unwrap();
    let fake = st.g.infer(&[&images]).unwrap();
    let out = |net: &Network, ins: &[&Tensor]| net.infer(ins).unwrap();
    let w = LossWeights::default();
    let disc = |real: Tensor, fake: Tensor, f: fn(&mut Graph, _, _, &LossWeights) -> advdepth::Result<losses::Loss>| {
        let mut g = Graph::new();
        let (r, k) = (g.constant(real), g.constant(fake));
        let l = f(&mut g, r, k, &w).unwrap();
        g.value(l.var).data()[0]
    };
    let pd_loss = disc(out(&st.pd, &[&reals, &depths]), out(&st.pd, &[&images, &fake]), losses::loss_pd);
    let dd_loss = disc(out(&st.dd, &[&depths]), out(&st.dd, &[&fake]), losses::loss_dd);
    ok &= (pd_loss - 2.0 * ln2).abs() < 1e-6 && (dd_loss - 2.0 * ln2).abs() < 1e-6;
    notes.push(format!("pd {pd_loss:.9} dd {dd_loss:.9} (2ln2 {:.9})", 2.0 * ln2));

    for lambda in [0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
        let mut c = base.clone();
        c.weights.lambda = lambda;
        let v = semi_generator_grads(&st, &c, &split, &[0, 1, 2, 3]).unwrap().record.loss_g;
        ok &= (v - 0.5f64.ln()).abs() < 1e-6;
        notes.push(format!("g(λ={lambda}) {v:.9}"));
    }

    // any constant output, not just one half, leaves G without adversarial gradient
    for logit in [0.0, 1.3, -2.0] {
        constant_discriminator(&mut st.pd, logit);
        constant_discriminator(&mut st.dd, -logit);
        for mode in [Discriminators::Both, Discriminators::PdOnly, Discriminators::DdOnly] {
            let c = TrainConfig {
                discriminators: mode,
                ..base.clone()
            };
            let semi = semi_generator_grads(&st, &c, &split, &[0, 1]).unwrap();
            let sup = supervised_generator_grads(&st, &c, &split, &[0, 1], 0.0).unwrap();
            let nonzero = semi
                .grads
                .iter()
                .chain(&sup.grads)
                .flat_map(|t| t.data())
                .filter(|&&v| v != 0.0)
                .count();
            ok &= nonzero == 0;
            if nonzero > 0 {
                notes.push(format!("{nonzero} nonzero G gradients at logit {logit}, {mode:?}"));
            }
        }
    }
    notes.push("constant discriminators: all G adversarial gradients exactly zero".into());
    report("fixed_points", ok, t.elapsed(), &notes.join("; "));
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn semi_supervised_trend() {
    let t = Instant::now();
    let hw = (64, 64);
    let render = |seeds: std::ops::Range<u64>| -> Vec<LabeledSample> {
        seeds.into_par_iter().map(|s| synth_scene(s, hw).unwrap()).collect()
    };
    let labeled = render(0..32);
    let unlabeled: Vec<UnlabeledSample> = render(10_000..10_512)
        .into_iter()
        .map(|s| UnlabeledSample { image: s.image })
        .collect();
    let test = render(20_000..20_064);
    let semi_split = DatasetSplit::new(labeled.clone(), unlabeled, 0).unwrap();
    let sup_split = DatasetSplit::new(labeled, Vec::new(), 0).unwrap();

    let narrow = [8, 16, 32, 32];
    let cfg = |seed: u64, batching: BatchMode| TrainConfig {
        generator: GeneratorSpec::tiny_unet(16),
        pair_discriminator: DiscriminatorSpec::pair().with_widths(narrow),
        depth_discriminator: DiscriminatorSpec::depth().with_widths(narrow),
        batching,
        seed,
        ..Default::default()
    };
    let rmse = |c: &TrainConfig, split: &DatasetSplit| {
        let out = trainer::train(c, split, &TrainOptions::default()).unwrap();
        assert_eq!(out.epochs.len(), 20);
        evaluate_model(&out.state.g, &test, None, Aggregation::Pixel).unwrap().report.rmse
    };
    let (mut semi, mut sup) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        semi.push(rmse(&cfg(seed, BatchMode::Alternating), &semi_split));
        sup.push(rmse(&cfg(seed, BatchMode::Supervised), &sup_split));
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    let detail = format!("semi rmse [{}], supervised rmse [{}]", fmt(&semi), fmt(&sup));
    let (ms, mp) = (median(&mut semi), median(&mut sup));
    let el = t.elapsed();
    let ok = ms <= mp && el <= Duration::from_secs(30 * 60);
    report(
        "semi_supervised_trend",
        ok,
        el,
        &format!("median semi {ms:.4} vs supervised {mp:.4}; {detail}"),
    );
}

struct Corpus {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    train: PathBuf,
    test: PathBuf,
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

fn load_config(path: &Path, overrides: &[(&str, toml::Value)]) -> ExperimentConfig {
    let ov: Vec<(String, toml::Value)> = overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    ExperimentConfig::load(path, &ov).unwrap()
}

fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

fn synth(root: &Path, name: &str, seed: u64, n_l: usize, n_u: usize, scene: &str) -> PathBuf {
    let mut c = ExperimentConfig {
        out_dir: root.join(name),
        seed,
        ..Default::default()
    };
    c.train.seed = seed;
    c.synth.n_labeled = n_l;
    c.synth.n_unlabeled = n_u;
    c.synth.scene = scene.into();
    let p = write_config(root, &format!("{name}.toml"), &c);
    cmd_synth(&load_config(&p, &[])).unwrap();
    c.out_dir
}

fn corpus() -> Corpus {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let train = synth(&root, "train_data", 1, 8, 8, "indoor");
    let test = synth(&root, "test_data", 2, 4, 0, "indoor");
    Corpus {
        _tmp: tmp,
        root,
        train,
        test,
    }
}

fn experiment(c: &Corpus, out: &str, seed: u64) -> ExperimentConfig {
    let mut e = ExperimentConfig {
        out_dir: c.root.join(out),
        seed,
        train: small_cfg(seed),
        ..Default::default()
    };
    e.data.path = Some(c.train.clone());
    e.data.test_path = Some(c.test.clone());
    e
}

fn csv_column(path: &Path, name: &str) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().parse().unwrap()).collect()
}

fn csv_phases(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().to_string()).collect()
}

#[test]
fn ablation_structure() {
    let t = Instant::now();
    let c = corpus();
    let mut sweep = experiment(&c, "sweep", 11);
    sweep.sweep.kind = SweepKind::Lambda;
    sweep.sweep.grid = vec![GridValue::Float(1.0), GridValue::Float(0.0)];
    let p = write_config(&c.root, "sweep.toml", &sweep);
    let rows = cmd_sweep(&load_config(&p, &[])).unwrap();
    let mut notes = Vec::new();
    let mut ok = rows.iter().all(|r| r.status == "ok");

    let mut points = Vec::new();
    for e in fs::read_dir(&sweep.out_dir).unwrap() {
        let dir = e.unwrap().path();
        if dir.join("point_config.toml").exists() {
            let pc = load_config(&dir.join("point_config.toml"), &[]);
            points.push((dir, pc));
        }
    }
    let (l1_dir, l1_cfg) = points
        .iter()
        .find(|(_, pc)| pc.train.discriminators == Discriminators::Both && pc.train.weights.lambda == 1.0)
        .expect("lambda=1 point");
    let (l0_dir, l0_cfg) = points
        .iter()
        .find(|(_, pc)| pc.train.discriminators == Discriminators::DdOnly)
        .expect("lambda=0 point");

    // the same run configured as PD-only from scratch
    let pd_dir = c.root.join("pd_only");
    let pd = load_config(
        &l1_dir.join("point_config.toml"),
        &[
            ("train.discriminators", toml::Value::String("pd_only".into())),
            ("out_dir", path_value(&pd_dir)),
        ],
    );
    cmd_train(&pd).unwrap();
    let g_sweep = load_network(&l1_dir.join(FINAL_FILE)).unwrap();
    let g_pd = load_network(&pd_dir.join(FINAL_FILE)).unwrap();
    let same_g = same_params(&g_sweep, &g_pd);
    let same_metrics = fs::read(l1_dir.join(METRICS_JSON)).unwrap() == fs::read(pd_dir.join(METRICS_JSON)).unwrap();
    let same_curve = ["loss_g", "loss_g_pd", "loss_g_dd", "loss_l1", "loss_pd"]
        .iter()
        .all(|col| bits(&csv_column(&l1_dir.join(CURVE_FILE), col)) == bits(&csv_column(&pd_dir.join(CURVE_FILE), col)));
    let dd_trained = csv_column(&l1_dir.join(CURVE_FILE), "loss_dd").iter().any(|&v| v != 0.0);
    ok &= same_g && same_metrics && same_curve && dd_trained && l1_cfg.seed == pd.seed;
    notes.push(format!(
        "lambda=1 vs pd_only (seed {}): generator identical {same_g}, metrics identical {same_metrics}, G/PD curve identical {same_curve}, DD still trained {dd_trained}",
        pd.seed
    ));

    // DD only: no PD term logged and PD never updated
    let curve = l0_dir.join(CURVE_FILE);
    let phases = csv_phases(&curve);
    let adv: Vec<usize> = (0..phases.len()).filter(|&i| phases[i] != "warmup").collect();
    let g_pd_col = csv_column(&curve, "loss_g_pd");
    let pd_col = csv_column(&curve, "loss_pd");
    let dd_col = csv_column(&curve, "loss_dd");
    let zero_pd = g_pd_col.iter().chain(&pd_col).all(|&v| v == 0.0);
    let dd_active = !adv.is_empty() && adv.iter().all(|&i| dd_col[i] > 0.0);
    let final_state = TrainState::load(&l0_dir.join(CHECKPOINT_FILE)).unwrap();
    let fresh = TrainState::new(&l0_cfg.train).unwrap();
    let pd_untouched = same_params(&final_state.pd, &fresh.pd) && final_state.counters.pd_updates == 0;
    ok &= zero_pd && dd_active && pd_untouched;
    notes.push(format!(
        "dd_only: {} adversarial steps, PD columns all zero {zero_pd}, DD loss logged {dd_active}, PD untouched {pd_untouched}",
        adv.len()
    ));
    report("ablation_structure", ok, t.elapsed(), &notes.join("; "));
}

fn planted(scene: &SceneConfig, size: (usize, usize), plants: &[((usize, usize), f64)]) -> advdepth::data::RenderedScene {
    let mut r = render_scene(3, size, scene).unwrap();
    let (h, w) = size;
    let mut d = r.depth.values().to_vec();
    for &((y, x), v) in plants {
        d[y * w + x] = v;
    }
    r.depth = DepthMap::new(h, w, d).unwrap();
    r
}

#[test]
fn pipeline_exactness() {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut ok = true;

    // NYU: 640x480 native frames, resized then center-cropped
    let nyu_scene = render_scene(1, (480, 640), &SceneConfig::indoor()).unwrap();
    let resize_only = PreprocessProfile {
        center_crop: None,
        ..DatasetProfile::Nyu.preprocess()
    };
    let mid = preprocess(&nyu_scene.rgb, Some(&nyu_scene.depth), Some(&nyu_scene.semantic), &resize_only).unwrap();
    let fin = preprocess(&nyu_scene.rgb, Some(&nyu_scene.depth), Some(&nyu_scene.semantic), &DatasetProfile::Nyu.preprocess()).unwrap();
    let dims = |p: &advdepth::data::Preprocessed| {
        let d = p.depth.as_ref().unwrap();
        let s = p.semantic.as_ref().unwrap();
        [(p.image.width(), p.image.height()), (d.width(), d.height()), (s.width(), s.height())]
    };
    let nyu_dir = tmp.path().join("nyu");
    write_dataset(&nyu_dir, &[nyu_scene.clone()], &[nyu_scene.rgb.clone()], 0.001, DatasetProfile::Nyu, 0).unwrap();
    let loaded = load_dataset(&nyu_dir, None).unwrap();
    let l = &loaded.labeled[0];
    let loaded_dims = [
        (l.image.width(), l.image.height()),
        (l.depth.width(), l.depth.height()),
        (l.mask.width(), l.mask.height()),
        (loaded.unlabeled[0].image.width(), loaded.unlabeled[0].image.height()),
    ];
    let nyu_ok = dims(&mid) == [(320, 240); 3] && dims(&fin) == [(304, 228); 3] && loaded_dims == [(304, 228); 4];
    ok &= nyu_ok;
    notes.push(format!("nyu 640x480 -> {:?} -> {:?}, loaded {:?}", dims(&mid)[0], dims(&fin)[0], loaded_dims[0]));

    // Make3D: stored at the working resolution so planted pixels survive the resize
    let make3d_dir = tmp.path().join("make3d");
    let scene = planted(&SceneConfig::road(), (240, 320), &[((10, 10), 75.0), ((20, 20), 70.0), ((30, 30), 12.5)]);
    write_dataset(&make3d_dir, &[scene], &[], 0.01, DatasetProfile::Make3d, 0).unwrap();
    let m = &load_dataset(&make3d_dir, None).unwrap().labeled[0];
    let at = |s: &LabeledSample, y: usize, x: usize| (s.depth.get(y, x), s.mask.values()[y * s.mask.width() + x]);
    let (d75, m75) = at(m, 10, 10);
    let (d70, m70) = at(m, 20, 20);
    let (_, m12) = at(m, 30, 30);
    let direct = make_mask(&DepthMap::new(1, 3, vec![75.0, 70.0, 69.9]).unwrap(), DatasetProfile::Make3d.mask_bounds()).unwrap();
    let make3d_ok = d75 == 75.0 && !m75 && d70 == 70.0 && m70 && m12 && direct.values() == [false, true, true];
    ok &= make3d_ok;
    notes.push(format!("make3d: 75 m pixel masked {}, 70 m pixel kept {m70}", !m75));

    // KITTI: strict on both ends
    let kitti_dir = tmp.path().join("kitti");
    let scene = planted(&SceneConfig::road(), (64, 96), &[((5, 5), 0.0), ((6, 6), 80.0), ((7, 7), 79.99), ((8, 8), 0.01)]);
    write_dataset(&kitti_dir, &[scene], &[], 0.01, DatasetProfile::Kitti, 0).unwrap();
    let k = &load_dataset(&kitti_dir, None).unwrap().labeled[0];
    let got: Vec<bool> = [(5, 5), (6, 6), (7, 7), (8, 8)].iter().map(|&(y, x)| at(k, y, x).1).collect();
    let kitti_ok = got == [false, false, true, true];
    ok &= kitti_ok;
    notes.push(format!("kitti: 0 m masked {}, 80 m masked {}, 79.99 m kept {}", !got[0], !got[1], got[2]));
    report("pipeline_exactness", ok, t.elapsed(), &notes.join("; "));
}

fn same_file(a: &Path, b: &Path) -> bool {
    matches!((fs::read(a), fs::read(b)), (Ok(x), Ok(y)) if x == y)
}

fn same_tree(a: &Path, b: &Path, sub: &str) -> bool {
    let mut names: Vec<_> = fs::read_dir(a.join(sub)).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    !names.is_empty() && names.iter().all(|n| same_file(&a.join(sub).join(n), &b.join(sub).join(n)))
}

fn replay(dir: &Path, to: &Path) -> ExperimentConfig {
    load_config(&dir.join(RESOLVED_CONFIG), &[("out_dir", path_value(to))])
}

#[test]
fn determinism_and_persistence() {
    let t = Instant::now();
    let c = corpus();
    let mut notes = Vec::new();
    let mut ok = true;

    // interrupted at several points, resumed through the train command
    let full = experiment(&c, "full", 21);
    cmd_train(&load_config(&write_config(&c.root, "full.toml", &full), &[])).unwrap();
    let split = load_dataset(&c.train, None).unwrap();
    let total = csv_column(&full.out_dir.join(CURVE_FILE), "step").len() as u64;
    let mut resumed_ok = true;
    for stop in [1, 3, total / 2 + 1, total - 1] {
        let part = experiment(&c, &format!("part{stop}"), 21);
        let cut = trainer::train(
            &part.train,
            &split,
            &TrainOptions {
                out_dir: Some(part.out_dir.clone()),
                stop_after_steps: Some(stop),
                ..Default::default()
            },
        )
        .unwrap();
        resumed_ok &= cut.interrupted;
        let mut resume = part.clone();
        resume.resume = Some(part.out_dir.join(CHECKPOINT_FILE));
        cmd_train(&load_config(&write_config(&c.root, &format!("resume{stop}.toml"), &resume), &[])).unwrap();
        for f in [FINAL_FILE, CURVE_FILE, EPOCHS_FILE, METRICS_JSON] {
            resumed_ok &= same_file(&part.out_dir.join(f), &full.out_dir.join(f));
        }
    }
    ok &= resumed_ok;
    notes.push(format!("resume after 1, 3, {}, {} of {total} steps identical {resumed_ok}", total / 2 + 1, total - 1));

    // round trips preserve forward outputs bit for bit
    let state = TrainState::load(&full.out_dir.join(CHECKPOINT_FILE)).unwrap();
    let tmp = c.root.join("roundtrip");
    fs::create_dir_all(&tmp).unwrap();
    state.save(&tmp.join("state.ckpt")).unwrap();
    let state_back = TrainState::load(&tmp.join("state.ckpt")).unwrap();
    let test = load_dataset(&c.test, None).unwrap().labeled;
    let x = advdepth::data::image_batch(test.iter().map(|s| &s.image)).unwrap();
    let y = advdepth::data::depth_batch(test.iter().map(|s| &s.depth)).unwrap();
    let mut round_ok = state_back == state;
    for (name, net, inputs) in [
        ("g", &state.g, vec![&x]),
        ("pd", &state.pd, vec![&x, &y]),
        ("dd", &state.dd, vec![&y]),
    ] {
        let p = tmp.join(format!("{name}.ckpt"));
        save_network(&p, net).unwrap();
        let back = load_network(&p).unwrap();
        round_ok &= bits(net.infer(&inputs).unwrap().data()) == bits(back.infer(&inputs).unwrap().data());
    }
    ok &= round_ok;
    notes.push(format!("checkpoint round trips bitwise {round_ok}"));

    // every command run again from the configuration it wrote
    let mut replays = Vec::new();
    let r = c.root.join("train_data_replay");
    cmd_synth(&replay(&c.train, &r)).unwrap();
    replays.push((
        "synth",
        same_file(&c.train.join("manifest.json"), &r.join("manifest.json"))
            && ["images", "depths", "semantic"].iter().all(|s| same_tree(&c.train, &r, s)),
    ));

    let r = c.root.join("full_replay");
    cmd_train(&replay(&full.out_dir, &r)).unwrap();
    replays.push(("train", [FINAL_FILE, CURVE_FILE, METRICS_JSON].iter().all(|f| same_file(&full.out_dir.join(f), &r.join(f)))));

    let mut ev = experiment(&c, "eval", 21);
    ev.eval.checkpoint = Some(full.out_dir.join(FINAL_FILE));
    ev.eval.visualize = true;
    ev.eval.max_visualizations = 2;
    cmd_eval(&load_config(&write_config(&c.root, "eval.toml", &ev), &[])).unwrap();
    let r = c.root.join("eval_replay");
    cmd_eval(&replay(&ev.out_dir, &r)).unwrap();
    replays.push(("eval", same_file(&ev.out_dir.join(METRICS_JSON), &r.join(METRICS_JSON)) && same_tree(&ev.out_dir, &r, "viz")));

    let mut sw = experiment(&c, "sweep", 21);
    sw.sweep.kind = SweepKind::LabelCount;
    sw.sweep.grid = vec![GridValue::Int(4), GridValue::Int(8)];
    cmd_sweep(&load_config(&write_config(&c.root, "sweep.toml", &sw), &[])).unwrap();
    let r = c.root.join("sweep_replay");
    cmd_sweep(&replay(&sw.out_dir, &r)).unwrap();
    replays.push(("sweep", same_file(&sw.out_dir.join(SWEEP_CSV), &r.join(SWEEP_CSV))));

    let target = synth(&c.root, "target_data", 9, 4, 8, "shifted");
    let mut ad = experiment(&c, "adapt", 21);
    ad.adapt.source = Some(c.train.clone());
    ad.adapt.target = Some(target);
    cmd_adapt(&load_config(&write_config(&c.root, "adapt.toml", &ad), &[])).unwrap();
    let r = c.root.join("adapt_replay");
    cmd_adapt(&replay(&ad.out_dir, &r)).unwrap();
    replays.push(("adapt", same_file(&ad.out_dir.join(ADAPT_REPORT), &r.join(ADAPT_REPORT))));

    let replay_ok = replays.iter().all(|(_, same)| *same);
    ok &= replay_ok;
    notes.push(format!(
        "replay from resolved config: {}",
        replays.iter().map(|(n, s)| format!("{n} {s}")).collect::<Vec<_>>().join(", ")
    ));
    report("determinism_and_persistence", ok, t.elapsed(), &notes.join("; "));
}
