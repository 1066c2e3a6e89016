//! End-to-end acceptance checks, one PASS/FAIL line per criterion on
//! stderr. The desk fixture (4,800 samples, pretrained components) is built
//! once; criteria run one at a time so each wall-clock budget measures only
//! its own work.

use std::f64::consts::LN_2;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use capgan::captioner::{
    captioner_loss, captioner_loss_from_codes, CaptionDecoderNet, CaptionerReport, FrozenEncoder, ImageEncoderNet,
    CODE_DIM,
};
use capgan::condaug::{kl_to_standard_normal, CondAugNet};
use capgan::dataset::{read_image, render_scene, synthesize_dataset, Cell, Color, Kind, Object, ShapeScene, Size, TokenBatch};
use capgan::harness::{
    load_captioner, load_classifier, load_textenc, open_dataset, run_evaluate, run_generate, run_train_captioner,
    run_train_classifier, run_train_refine, run_train_stage1, run_train_textenc, store_digest, Checkpoint,
    EvalOptions, RunLog, StageChain, StepRecord, TextToImage, TrainConfig, TrainOptions,
};
use capgan::metrics::{inception_score, ClassifierReport};
use capgan::stages::{
    d_loss, g_adv_loss, refine_g_loss, saturating_g_loss, saturating_g_value, stage1_g_loss, Arch, Discriminator,
    GLossWeights, Generator1, RealRef, RefineGenerator,
};
use capgan::textenc::PAD;
use diffcomp::{
    grad_check, grad_check_param, BatchNormOpts, BnMode, GruCell, ParamStore, RunningStats, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DESK_SAMPLES: usize = 4800;
const SMALL_SAMPLES: usize = 512;
const SEEDS: [u64; 3] = [1, 2, 3];

fn serial() -> MutexGuard<'static, ()> {
    static SERIAL: Mutex<()> = Mutex::new(());
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes past the test harness's output capture so the verdicts always
/// reach the log.
fn verdict(id: u8, name: &str, pass: bool, elapsed: Duration, limit: Duration, detail: &str) {
    let in_time = elapsed <= limit;
    let status = if pass && in_time { "PASS" } else { "FAIL" };
    let line = format!(
        "criterion {id} {status}  {name}: {detail} [{:.1}s, limit {:.0}s]",
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(pass, "{line}");
    assert!(in_time, "{line}");
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Desk {
    _dir: tempfile::TempDir,
    root: PathBuf,
    /// Paths for the 4,800-sample dataset and the shared pretrained parts.
    cfg: TrainConfig,
    small: PathBuf,
    captioners: Vec<CaptionerReport>,
    classifiers: Vec<ClassifierReport>,
    gate_time: Duration,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let pre = root.join("pre");
        let cfg = TrainConfig {
            dataset: root.join("desk"),
            captioner_checkpoint: pre.join("captioner.pgan"),
            textenc_checkpoint: pre.join("textenc.pgan"),
            classifier_checkpoint: pre.join("classifier.pgan"),
            ..TrainConfig::default()
        };
        synthesize_dataset(DESK_SAMPLES, cfg.resolution, cfg.data_seed, &cfg.dataset).unwrap();
        let small = root.join("small");
        synthesize_dataset(SMALL_SAMPLES, cfg.resolution, cfg.data_seed, &small).unwrap();

        let start = Instant::now();
        let (mut captioners, mut classifiers) = (Vec::new(), Vec::new());
        for seed in SEEDS {
            let seeded = TrainConfig {
                init_seed: seed,
                train_seed: 100 + seed,
                ..cfg.clone()
            };
            let out = root.join(format!("gate{seed}"));
            let (cap, report) = run_train_captioner(&seeded, &out).unwrap();
            captioners.push(report);
            let (clf, report) = run_train_classifier(&seeded, &out).unwrap();
            classifiers.push(report);
            if seed == SEEDS[0] {
                std::fs::create_dir_all(&pre).unwrap();
                std::fs::copy(cap, &cfg.captioner_checkpoint).unwrap();
                std::fs::copy(clf, &cfg.classifier_checkpoint).unwrap();
            }
        }
        let gate_time = start.elapsed();
        let (textenc, _) = run_train_textenc(&cfg, &root.join("te")).unwrap();
        std::fs::copy(textenc, &cfg.textenc_checkpoint).unwrap();
        Desk {
            _dir: dir,
            root,
            cfg,
            small,
            captioners,
            classifiers,
            gate_time,
        }
    })
}

// ---------------------------------------------------------------------------
// 1: gradients

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;
const DEEP_TOL: f64 = 1e-3;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut rng(seed))
}

fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.1..1.5);
            if r.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn weighted<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> diffcomp::Result<Var<'t, f64>> {
    let w = tape.constant(randn(&y.shape(), seed));
    y.mul(w)?.sum()
}

fn ok<T>(r: capgan::Result<T>) -> diffcomp::Result<T> {
    Ok(r.expect("library call inside a gradient check"))
}

#[derive(Default)]
struct GradSuite {
    rows: Vec<(String, f64, f64)>,
}

impl GradSuite {
    fn add(&mut self, name: impl Into<String>, tol: f64, err: diffcomp::Result<f64>) {
        self.rows.push((name.into(), err.unwrap(), tol));
    }

    fn input(
        &mut self,
        name: &str,
        tol: f64,
        x: &Tensor<f64>,
        step: f64,
        f: impl for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> diffcomp::Result<Var<'t, f64>>,
    ) {
        self.add(name, tol, grad_check(f, x, step));
    }
}

fn elementwise_and_shape_ops(s: &mut GradSuite) {
    let x = randn(&[3, 4], 1);
    let away = away_from_zero(&[3, 4], 2);
    let positive = x.map(|v| v.abs() + 0.2);
    s.input("neg", TOL, &x, STEP, |t, x| weighted(t, x.neg()?, 9));
    s.input("exp", TOL, &x, STEP, |t, x| weighted(t, x.exp()?, 9));
    s.input("log", TOL, &positive, STEP, |t, x| weighted(t, x.log()?, 9));
    s.input("tanh", TOL, &x, STEP, |t, x| weighted(t, x.tanh()?, 9));
    s.input("sigmoid", TOL, &x, STEP, |t, x| weighted(t, x.sigmoid()?, 9));
    s.input("relu", TOL, &away, STEP, |t, x| weighted(t, x.relu()?, 9));
    s.input("leaky_relu", TOL, &away, STEP, |t, x| weighted(t, x.leaky_relu(0.2)?, 9));
    s.input("square", TOL, &x, STEP, |t, x| weighted(t, x.square()?, 9));
    s.input("scale", TOL, &x, STEP, |t, x| weighted(t, x.scale(-1.7)?, 9));
    s.input("add_scalar", TOL, &x, STEP, |t, x| weighted(t, x.add_scalar(0.3)?, 9));
    s.input("mean", TOL, &x, STEP, |_, x| x.mean());
    s.input("sum", TOL, &x, STEP, |_, x| x.sum());

    let a = randn(&[2, 3, 4], 3);
    let b = randn(&[3, 1], 4);
    s.input("add", TOL, &a, STEP, |t, x| weighted(t, x.add(t.constant(b.clone()))?, 11));
    s.input("add (broadcast side)", TOL, &b, STEP, |t, y| weighted(t, t.constant(a.clone()).add(y)?, 11));
    s.input("sub", TOL, &a, STEP, |t, x| weighted(t, x.sub(t.constant(b.clone()))?, 11));
    s.input("sub (broadcast side)", TOL, &b, STEP, |t, y| weighted(t, t.constant(a.clone()).sub(y)?, 11));
    s.input("mul", TOL, &a, STEP, |t, x| weighted(t, x.mul(t.constant(b.clone()))?, 11));
    s.input("mul (broadcast side)", TOL, &b, STEP, |t, y| weighted(t, t.constant(a.clone()).mul(y)?, 11));

    let m = randn(&[3, 5], 5);
    let n = randn(&[5, 2], 6);
    s.input("matmul lhs", TOL, &m, STEP, |t, x| weighted(t, x.matmul(t.constant(n.clone()))?, 12));
    s.input("matmul rhs", TOL, &n, STEP, |t, y| weighted(t, t.constant(m.clone()).matmul(y)?, 12));

    let img = randn(&[2, 3, 8, 8], 7);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 4), (1, 0, 1)] {
        let kernel = randn(&[4, 3, k, k], 8);
        s.input(&format!("conv2d input k{k} s{stride}"), TOL, &img, STEP, |t, x| {
            weighted(t, x.conv2d(t.constant(kernel.clone()), stride, pad)?, 13)
        });
        s.input(&format!("conv2d kernel k{k} s{stride}"), TOL, &kernel, STEP, |t, k| {
            weighted(t, t.constant(img.clone()).conv2d(k, stride, pad)?, 13)
        });
    }
    let small = randn(&[2, 3, 4, 4], 9);
    s.input("upsample_nearest", TOL, &small, STEP, |t, x| weighted(t, x.upsample_nearest(2)?, 14));
    s.input("avg_downsample", TOL, &small, STEP, |t, x| weighted(t, x.avg_downsample(2)?, 14));

    let bx = randn(&[4, 2, 3, 3], 10);
    let gamma = Tensor::from_f64(&[2], &[1.3, -0.6]).unwrap();
    let beta = Tensor::from_f64(&[2], &[0.2, 0.5]).unwrap();
    let stats = || RunningStats {
        mean: vec![0.1, -0.2],
        var: vec![0.8, 1.4],
    };
    for mode in [BnMode::Train, BnMode::Eval] {
        fn bn<'t>(
            x: Var<'t, f64>,
            g: Var<'t, f64>,
            b: Var<'t, f64>,
            stats: &mut RunningStats<f64>,
            mode: BnMode,
        ) -> diffcomp::Result<Var<'t, f64>> {
            Var::batchnorm2d(x, g, b, stats, mode, BatchNormOpts::default())
        }
        s.input(&format!("batchnorm2d input {mode:?}"), DEEP_TOL, &bx, STEP, |t, x| {
            weighted(t, bn(x, t.constant(gamma.clone()), t.constant(beta.clone()), &mut stats(), mode)?, 15)
        });
        s.input(&format!("batchnorm2d gamma {mode:?}"), DEEP_TOL, &gamma, STEP, |t, g| {
            weighted(t, bn(t.constant(bx.clone()), g, t.constant(beta.clone()), &mut stats(), mode)?, 15)
        });
        s.input(&format!("batchnorm2d beta {mode:?}"), DEEP_TOL, &beta, STEP, |t, b| {
            weighted(t, bn(t.constant(bx.clone()), t.constant(gamma.clone()), b, &mut stats(), mode)?, 15)
        });
    }

    let pred = randn(&[4, 3], 16);
    let target = randn(&[4, 3], 17);
    s.input("mse", TOL, &pred, STEP, |t, x| x.mse(t.constant(target.clone())));
    let labels = Tensor::from_f64(&[4, 3], &[1., 0., 1., 0., 0., 1., 1., 1., 0., 0., 1., 0.]).unwrap();
    let logits = pred.map(|v| 3.0 * v);
    s.input("bce_with_logits", TOL, &logits, STEP, |_, x| x.bce_with_logits(&labels));
    s.input("cross_entropy", TOL, &logits, STEP, |_, x| x.cross_entropy(&[2, 0, 1, 2], None));
    s.input("cross_entropy with ignored rows", TOL, &logits, STEP, |_, x| {
        x.cross_entropy(&[2, 0, 1, 0], Some(0))
    });

    let r = randn(&[2, 3, 2, 2], 18);
    let other = randn(&[2, 2, 2, 2], 20);
    s.input("reshape", TOL, &r, STEP, |t, x| weighted(t, x.reshape(&[6, 4])?, 19));
    s.input("flatten", TOL, &r, STEP, |t, x| weighted(t, x.flatten()?, 19));
    s.input("concat", TOL, &r, STEP, |t, x| weighted(t, Var::concat(&[x, t.constant(other.clone()), x], 1)?, 19));
    s.input("narrow", TOL, &r, STEP, |t, x| weighted(t, x.narrow(1, 1, 2)?, 19));
    s.input("replicate_spatial", TOL, &m, STEP, |t, x| weighted(t, x.replicate_spatial(2, 3)?, 19));
    s.input("embedding", TOL, &m, STEP, |t, table| weighted(t, table.embedding(&[2, 0, 2, 1])?, 19));

    let mut store = ParamStore::<f64>::new();
    let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng(22));
    let gx = randn(&[2, 3], 23);
    let gh = randn(&[2, 4], 24).map(f64::tanh);
    for id in [cell.w_input, cell.w_hidden, cell.b_input, cell.b_hidden] {
        let err = grad_check_param(
            &store,
            id,
            |t, p| weighted(t, cell.forward(p, t.constant(gx.clone()), t.constant(gh.clone()))?, 25),
            STEP,
        );
        s.add(format!("gru {}", store.entry(id).name), TOL, err);
    }
    s.input("gru input", TOL, &gx, STEP, |t, x| {
        let p = store.bind(t, false);
        weighted(t, cell.forward(&p, x, t.constant(gh.clone()))?, 25)
    });
    s.input("gru hidden", TOL, &gh, STEP, |t, h| {
        let p = store.bind(t, false);
        weighted(t, cell.forward(&p, t.constant(gx.clone()), h)?, 25)
    });
}

fn grad_arch() -> Arch {
    Arch {
        ng: 4,
        nz: 3,
        dt: 5,
        c0: 8,
        cd: 8,
        ce: 8,
        nd: 2,
        mg: 4,
    }
}

fn composite_losses(s: &mut GradSuite) {
    let x = Tensor::new(&[3, 1], vec![0.3, -0.7, 1.2]).unwrap();
    let other = Tensor::new(&[3, 1], vec![-0.2, 0.4, 0.9]).unwrap();
    s.input("discriminator loss, real logits", TOL, &x, 1e-6, |t, l| ok(d_loss(l, t.constant(other.clone()))));
    s.input("discriminator loss, fake logits", TOL, &x, 1e-6, |t, l| ok(d_loss(t.constant(other.clone()), l)));
    s.input("generator adversarial loss", TOL, &x, 1e-6, |_, l| ok(g_adv_loss(l)));

    let mu = randn(&[3, 4], 30);
    let logvar = randn(&[3, 4], 31);
    s.input("KL wrt mu", TOL, &mu, 1e-6, |t, m| ok(kl_to_standard_normal(m, t.constant(logvar.clone()))));
    s.input("KL wrt logvar", TOL, &logvar, 1e-6, |t, l| ok(kl_to_standard_normal(t.constant(mu.clone()), l)));
    s.input("refinement generator loss wrt mu", TOL, &mu, 1e-6, |t, m| {
        ok(refine_g_loss(t.constant(x.clone()), m, t.constant(logvar.clone()), 0.7))
    });
    s.input("refinement generator loss wrt logvar", TOL, &logvar, 1e-6, |t, l| {
        ok(refine_g_loss(t.constant(x.clone()), t.constant(mu.clone()), l, 0.7))
    });
    s.input("saturating generator loss", TOL, &x, 1e-6, |t, l| {
        let kl = ok(kl_to_standard_normal(t.constant(mu.clone()), t.constant(logvar.clone())))?;
        ok(saturating_g_loss(l, kl, 0.7))
    });

    let mut ca_store = ParamStore::<f64>::new();
    let ca = CondAugNet::new(&mut ca_store, "ca", 6, 4, &mut rng(32));
    let phi = randn(&[3, 6], 33);
    let eps = randn(&[3, 4], 34);
    for id in [ca.mu.weight, ca.mu.bias.unwrap(), ca.logvar.weight, ca.logvar.bias.unwrap()] {
        let err = grad_check_param(
            &ca_store,
            id,
            |t, p| {
                let out = ok(ca.forward(p, t.constant(phi.clone()), &eps))?;
                let kl = ok(kl_to_standard_normal(out.mu, out.logvar))?;
                weighted(t, out.c, 35)?.add(kl)
            },
            1e-6,
        );
        s.add(format!("conditioning augmentation {}", ca_store.entry(id).name), TOL, err);
    }

    let mut enc_store = ParamStore::<f64>::new();
    let enc = ImageEncoderNet::new(&mut enc_store, 16, [4, 4, 8, 8], &mut rng(36)).unwrap();
    let e0 = FrozenEncoder {
        net: &enc,
        store: &enc_store,
    };
    let real = Tensor::uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng(37));
    let fake = Tensor::uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng(38));
    s.input("captioner loss wrt generated images", DEEP_TOL, &fake, 1e-6, |_, f| ok(captioner_loss(&e0, &real, f)));
    let codes = randn(&[2, CODE_DIM], 39);
    s.input("captioner loss wrt codes", TOL, &randn(&[2, CODE_DIM], 40), 1e-6, |_, c| {
        ok(captioner_loss_from_codes(&codes, c))
    });
    let two_logits = Tensor::new(&[2, 1], vec![0.4, -0.1]).unwrap();
    let (mu2, logvar2) = (randn(&[2, 4], 41), randn(&[2, 4], 42));
    let weights = GLossWeights { captioner: 1.0, kl: 1.0 };
    s.input("stage-I generator loss wrt images", DEEP_TOL, &fake, 1e-6, |t, f| {
        let loss = ok(stage1_g_loss(
            t.constant(two_logits.clone()),
            f,
            RealRef::Images(&real),
            t.constant(mu2.clone()),
            t.constant(logvar2.clone()),
            &e0,
            weights,
        ))?;
        Ok(loss.total)
    });
    s.input("stage-I generator loss wrt logits", TOL, &two_logits, 1e-6, |t, l| {
        let loss = ok(stage1_g_loss(
            l,
            t.constant(fake.clone()),
            RealRef::Images(&real),
            t.constant(mu2.clone()),
            t.constant(logvar2.clone()),
            &e0,
            weights,
        ))?;
        Ok(loss.total)
    });

    let arch = grad_arch();
    let mut g_store = ParamStore::<f64>::new();
    let g1 = Generator1::new(&mut g_store, &arch, 16, &mut rng(43)).unwrap();
    let z = randn(&[2, arch.nz], 44);
    s.input("stage-I generator wrt code", DEEP_TOL, &randn(&[2, arch.ng], 45), 1e-6, |t, c| {
        let p = g_store.bind(t, false);
        weighted(t, ok(g1.forward(&p, c, Some(t.constant(z.clone())), BnMode::Eval))?, 46)
    });
    let mut d_store = ParamStore::<f64>::new();
    let disc = Discriminator::new(&mut d_store, "d1", &arch, 16, &mut rng(47)).unwrap();
    let dphi = randn(&[2, arch.dt], 48);
    s.input("discriminator wrt images", DEEP_TOL, &real, 1e-6, |t, x| {
        let p = d_store.bind(t, false);
        ok(disc.forward(&p, x, t.constant(dphi.clone()), BnMode::Train))?.sum()
    });
    let mut r_store = ParamStore::<f64>::new();
    let g2 = RefineGenerator::new(&mut r_store, "g2", &arch, 8, &mut rng(49)).unwrap();
    let prev = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng(50));
    let rc = randn(&[2, arch.ng], 51);
    s.input("refinement generator wrt previous image", DEEP_TOL, &prev, 1e-6, |t, sv| {
        let p = r_store.bind(t, false);
        ok(g2.forward(&p, sv, t.constant(rc.clone()), BnMode::Eval))?.sum()
    });
    s.input("refinement generator wrt code", DEEP_TOL, &rc, 1e-6, |t, cv| {
        let p = r_store.bind(t, false);
        ok(g2.forward(&p, t.constant(prev.clone()), cv, BnMode::Eval))?.sum()
    });

    let mut dec_store = ParamStore::<f64>::new();
    let dec = CaptionDecoderNet::new(&mut dec_store, 21, 6, 8, &mut rng(52));
    let captions = TokenBatch::from_sequences(&[vec![2usize, 5, 7, 1], vec![2, 9, 1]]);
    let targets = CaptionDecoderNet::targets(&captions);
    s.input("caption decoder cross-entropy wrt codes", DEEP_TOL, &randn(&[2, CODE_DIM], 53), 1e-6, |t, c| {
        let p = dec_store.bind(t, false);
        ok(dec.logits(&p, c, &captions))?.cross_entropy(&targets, Some(PAD))
    });
}

#[test]
fn criterion_1_gradient_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut suite = GradSuite::default();
    elementwise_and_shape_ops(&mut suite);
    composite_losses(&mut suite);
    let elapsed = start.elapsed();
    let failures: Vec<String> = suite
        .rows
        .iter()
        .filter(|(_, err, tol)| !(*err < *tol))
        .map(|(name, err, tol)| format!("{name} {err:.2e} ≥ {tol:.0e}"))
        .collect();
    let worst = suite.rows.iter().map(|r| r.1 / r.2).fold(0.0, f64::max);
    let detail = format!(
        "{} checks, worst error at {:.3} of its tolerance{}",
        suite.rows.len(),
        worst,
        if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
    );
    verdict(1, "gradient oracles", failures.is_empty(), elapsed, minutes(2), &detail);
}

// ---------------------------------------------------------------------------
// 2: closed forms

#[test]
fn criterion_2_closed_form_losses() {
    let _g = serial();
    let start = Instant::now();
    let tape = Tape::<f64>::new();
    let col = |v: &[f64]| tape.constant(Tensor::new(&[v.len(), 1], v.to_vec()).unwrap());
    let item = |v: capgan::Result<Var<'_, f64>>| v.unwrap().item().unwrap();
    let mut unit_mu = vec![0.0; 4];
    unit_mu[0] = 1.0;
    let zeros = || tape.constant(Tensor::zeros(&[1, 4]));
    let codes = Tensor::<f64>::randn(&[3, CODE_DIM], &mut rng(3));
    let two_class = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
    let one_hot: Vec<Vec<f64>> = (0..24 * 2)
        .map(|i| (0..24).map(|c| if c == i % 24 { 1.0 } else { 0.0 }).collect())
        .collect();
    let flat = vec![vec![0.25, 0.5, 0.25]; 30];
    let hand = (0.9f64 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln()).exp();

    let checks: Vec<(&str, f64, f64)> = vec![
        ("KL at the standard normal", item(kl_to_standard_normal(zeros(), zeros())), 0.0),
        (
            "KL with one unit mean",
            item(kl_to_standard_normal(tape.constant(Tensor::new(&[1, 4], unit_mu).unwrap()), zeros())),
            0.5,
        ),
        ("bce at logit 0", col(&[0.0]).bce_with_logits(&Tensor::ones(&[1, 1])).unwrap().item().unwrap(), LN_2),
        ("discriminator loss at D = 0.5", item(d_loss(col(&[0.0, 0.0]), col(&[0.0, 0.0]))), 2.0 * LN_2),
        ("generator adversarial loss at D = 0.5", item(g_adv_loss(col(&[0.0, 0.0]))), LN_2),
        (
            "saturating generator objective at D = 0.5",
            saturating_g_value(&[0.5], 0.5, 1.0),
            0.5f64.ln() + 0.5,
        ),
        (
            "captioner loss at equality",
            item(captioner_loss_from_codes(&codes, tape.constant(codes.clone()))),
            0.0,
        ),
        ("inception score lower bound", inception_score(&flat, 3).unwrap().0, 1.0),
        ("inception score upper bound", inception_score(&one_hot, 1).unwrap().0, 24.0),
        ("inception score two-image case", inception_score(&two_class, 1).unwrap().0, hand),
    ];
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let failing: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| !((got - want).abs() < 1e-6))
        .map(|(name, got, want)| format!("{name}: {got} vs {want}"))
        .collect();
    let detail = format!(
        "{} values, max deviation {worst:.1e} (two-image score {:.5}){}",
        checks.len(),
        hand,
        if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
    );
    verdict(2, "closed-form losses", failing.is_empty(), elapsed, Duration::from_secs(10), &detail);
}

// ---------------------------------------------------------------------------
// 3 and 4: the default stage-I run

struct ScheduleRun {
    cfg: TrainConfig,
    checkpoint: PathBuf,
    records: Vec<StepRecord>,
    elapsed: Duration,
    frozen_before: (Vec<u8>, Vec<u8>, String, String),
}

fn frozen_state(cfg: &TrainConfig) -> (Vec<u8>, Vec<u8>, String, String) {
    let (cap, _) = load_captioner(&cfg.captioner_checkpoint).unwrap();
    let (enc, _, _) = load_textenc(&cfg.textenc_checkpoint).unwrap();
    (
        std::fs::read(&cfg.captioner_checkpoint).unwrap(),
        std::fs::read(&cfg.textenc_checkpoint).unwrap(),
        store_digest(&cap.store),
        store_digest(&enc.store),
    )
}

fn schedule_run() -> &'static ScheduleRun {
    static RUN: OnceLock<ScheduleRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let d = desk();
        let cfg = TrainConfig {
            dataset: d.small.clone(),
            epochs: 6,
            ..d.cfg.clone()
        };
        let frozen_before = frozen_state(&cfg);
        let start = Instant::now();
        let run = run_train_stage1(&cfg, &TrainOptions::new(d.root.join("schedule"))).unwrap();
        let elapsed = start.elapsed();
        let (_, records) = RunLog::read(&run.log).unwrap();
        ScheduleRun {
            cfg,
            checkpoint: run.checkpoint,
            records,
            elapsed,
            frozen_before,
        }
    })
}

#[test]
fn criterion_3_captioner_term_schedule() {
    let _g = serial();
    let run = schedule_run();
    let warmup = run.cfg.warmup_epochs;
    let (early, late): (Vec<&StepRecord>, Vec<&StepRecord>) = run.records.iter().partition(|r| r.epoch < warmup);
    let early_zero = early.iter().all(|r| r.cap_loss == 0.0);
    let positive = late.iter().filter(|r| r.cap_loss > 0.0).count();
    let share = positive as f64 / late.len().max(1) as f64;
    let pass = warmup == 5 && !early.is_empty() && !late.is_empty() && early_zero && share >= 0.95;
    let detail = format!(
        "{} steps before epoch {warmup} all exactly 0: {early_zero}; {positive}/{} later steps positive ({:.1}%)",
        early.len(),
        late.len(),
        100.0 * share
    );
    verdict(3, "captioner-term schedule", pass, run.elapsed, minutes(10), &detail);
}

#[test]
fn criterion_4_freeze_contracts() {
    let _g = serial();
    let run = schedule_run();
    let d = desk();
    let start = Instant::now();
    let after = frozen_state(&run.cfg);
    let upstream_ok = {
        let ckpt = Checkpoint::load(&run.checkpoint).unwrap();
        let listed: Vec<String> = serde_json::from_value(ckpt.meta.model["upstream"].clone()).unwrap();
        listed == [format!("captioner:{}", after.2), format!("textenc:{}", after.3)]
    };
    let pretrained_ok = after == run.frozen_before;

    let stage1_bytes = std::fs::read(&run.checkpoint).unwrap();
    let chain = StageChain::load(std::slice::from_ref(&run.checkpoint)).unwrap();
    let (g1, d1) = (store_digest(&chain.stage1.g), store_digest(&chain.stage1.d));
    let refine_cfg = TrainConfig {
        stage: 2,
        previous_stages: vec![run.checkpoint.clone()],
        ..run.cfg.clone()
    };
    let refine = run_train_refine(
        &refine_cfg,
        &TrainOptions {
            max_steps: Some(3),
            ..TrainOptions::new(d.root.join("freeze_stage2"))
        },
    )
    .unwrap();
    let reloaded = StageChain::load(std::slice::from_ref(&run.checkpoint)).unwrap();
    let previous_ok = std::fs::read(&run.checkpoint).unwrap() == stage1_bytes
        && store_digest(&reloaded.stage1.g) == g1
        && store_digest(&reloaded.stage1.d) == d1
        && refine.steps == 3
        && after == frozen_state(&run.cfg);
    let elapsed = start.elapsed();
    let detail = format!(
        "captioner and text encoder unchanged by stage I: {pretrained_ok}; upstream digests recorded: {upstream_ok}; \
         stage I unchanged by stage II: {previous_ok}"
    );
    verdict(4, "freeze contracts", pretrained_ok && upstream_ok && previous_ok, elapsed, minutes(1), &detail);
}

// ---------------------------------------------------------------------------
// 5: determinism and resume

fn tensors_equal(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.tensors.len() == b.tensors.len()
        && a.tensors.iter().zip(&b.tensors).all(|((na, ta), (nb, tb))| {
            na == nb
                && ta.shape() == tb.shape()
                && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

#[test]
fn criterion_5_determinism_and_resume() {
    let _g = serial();
    let d = desk();
    let start = Instant::now();
    let cfg = TrainConfig {
        dataset: d.small.clone(),
        epochs: 6,
        warmup_epochs: 2,
        ..d.cfg.clone()
    };
    let limited = |dir: &str, steps: u64, resume: Option<PathBuf>| {
        run_train_stage1(
            &cfg,
            &TrainOptions {
                max_steps: Some(steps),
                resume,
                ..TrainOptions::new(d.root.join(dir))
            },
        )
        .unwrap()
    };
    let a = limited("determinism_a", 50, None);
    let b = limited("determinism_b", 50, None);
    let log_a = std::fs::read(&a.log).unwrap();
    let identical = log_a == std::fs::read(&b.log).unwrap() && a.steps == 50;

    let partial = limited("resume", 20, None);
    let saved = d.root.join("resume/partial.pgan");
    std::fs::rename(&partial.checkpoint, &saved).unwrap();
    let resumed = limited("resume", 50, Some(saved));
    let (_, ra) = RunLog::read(&a.log).unwrap();
    let (_, rc) = RunLog::read(&resumed.log).unwrap();
    let next_step_ok = ra.get(20).is_some() && ra.get(20) == rc.get(20);
    let log_ok = std::fs::read(&resumed.log).unwrap() == log_a;
    let (ca, cc) = (Checkpoint::load(&a.checkpoint).unwrap(), Checkpoint::load(&resumed.checkpoint).unwrap());
    let state_ok = tensors_equal(&ca, &cc) && ca.meta == cc.meta;
    let captioner_active = ra.iter().any(|r| r.cap_loss > 0.0);
    let elapsed = start.elapsed();
    let detail = format!(
        "two 50-step logs bit-identical: {identical}; resumed at step 20, next record equal: {next_step_ok}, \
         full log equal: {log_ok}, final tensors equal: {state_ok}"
    );
    verdict(
        5,
        "determinism and resume",
        identical && next_step_ok && log_ok && state_ok && captioner_active,
        elapsed,
        minutes(5),
        &detail,
    );
}

// ---------------------------------------------------------------------------
// 6: pretrained quality gates

fn red_circle() -> ShapeScene {
    ShapeScene {
        objects: vec![Object {
            kind: Kind::Circle,
            color: Color::Red,
            cell: Cell { row: 1, col: 1 },
            size: Size::Large,
        }],
        relation: None,
        background: 0,
    }
}

#[test]
fn criterion_6_captioner_and_classifier_gates() {
    let _g = serial();
    let d = desk();
    let cap_acc: Vec<f64> = d.captioners.iter().map(|r| *r.heldout_accuracy.last().unwrap()).collect();
    let clf_acc: Vec<f64> = d.classifiers.iter().map(|r| *r.heldout_accuracy.last().unwrap()).collect();
    let cap_epochs = d.captioners.iter().map(|r| r.epoch_losses.len()).max().unwrap();
    let clf_epochs = d.classifiers.iter().map(|r| r.epoch_losses.len()).max().unwrap();

    let (cap, _) = load_captioner(&d.cfg.captioner_checkpoint).unwrap();
    let data = open_dataset(&d.cfg).unwrap();
    let image = render_scene(&red_circle(), d.cfg.resolution).unwrap();
    let words = data.vocab.decode(&cap.caption_image(&image).unwrap());
    let decoded_ok = words.split_whitespace().any(|w| w == "red") && words.split_whitespace().any(|w| w == "circle");

    let pass = median(&cap_acc) > 0.90 && cap_epochs <= 20 && median(&clf_acc) > 0.95 && clf_epochs <= 10 && decoded_ok;
    let detail = format!(
        "captioner token accuracy {cap_acc:.3?} (median {:.3}, {cap_epochs} epochs); classifier accuracy {clf_acc:.3?} \
         (median {:.3}, {clf_epochs} epochs); red circle decodes as \"{words}\"",
        median(&cap_acc),
        median(&clf_acc)
    );
    verdict(6, "captioner and classifier gates", pass, d.gate_time, minutes(30), &detail);
}

// ---------------------------------------------------------------------------
// 7: captioner term on versus off

const GENERATOR_STEPS: u64 = 3000;

fn ablation_run(d: &Desk, seed: u64, weight: f64) -> (f64, f64) {
    let mut cfg = d.cfg.clone();
    cfg.captioner_weight = weight;
    cfg.init_seed = 10 + seed;
    cfg.train_seed = 20 + seed;
    // channel widths halved to fit six runs in the time budget
    cfg.arch.c0 = 64;
    cfg.arch.cd = 32;
    cfg.checkpoint_every = 0;
    let train_len = DESK_SAMPLES - cfg.holdout;
    cfg.epochs = (GENERATOR_STEPS as usize).div_ceil(train_len / cfg.batch_size);
    let out = d.root.join(format!("ablation_s{seed}_w{weight}"));
    let run = run_train_stage1(
        &cfg,
        &TrainOptions {
            max_steps: Some(GENERATOR_STEPS),
            ..TrainOptions::new(&out)
        },
    )
    .unwrap();
    assert_eq!(run.steps, GENERATOR_STEPS);
    let data = open_dataset(&cfg).unwrap();
    let model = TextToImage::load(&cfg.textenc_checkpoint, &[run.checkpoint]).unwrap();
    let (clf, clf_digest) = load_classifier(&cfg.classifier_checkpoint).unwrap();
    let (cap, cap_digest) = load_captioner(&cfg.captioner_checkpoint).unwrap();
    let report = run_evaluate(
        &cfg,
        &data,
        Some(&model),
        (&clf, &clf_digest),
        (&cap, &cap_digest),
        &EvalOptions {
            seed: 5,
            skip_generation: false,
        },
        Some(&out.join("score.json")),
    )
    .unwrap();
    assert_eq!(report.samples, 512);
    (report.perceptual_distance, report.inception_mean)
}

#[test]
fn criterion_7_captioner_term_improves_perceptual_distance() {
    let _g = serial();
    let d = desk();
    let start = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3 {
        let (pd0, is0) = ablation_run(d, seed, 0.0);
        let (pd1, is1) = ablation_run(d, seed, 1.0);
        let win = pd1 < pd0 && is1 >= is0 - 0.1;
        wins += win as usize;
        rows.push(format!(
            "seed {seed}: distance {pd0:.4}→{pd1:.4}, score {is0:.3}→{is1:.3} {}",
            if win { "ok" } else { "no" }
        ));
    }
    let elapsed = start.elapsed();
    let detail = format!("{wins}/3 pairs ({})", rows.join("; "));
    verdict(7, "captioner term on vs off", wins >= 2, elapsed, minutes(90), &detail);
}

// ---------------------------------------------------------------------------
// 8: three-stage chain

fn captions() -> Vec<String> {
    ["a red circle", "a small blue square", "a green triangle left of a white circle"]
        .map(String::from)
        .to_vec()
}

fn finite_images(paths: &[PathBuf], res: usize) -> bool {
    paths.iter().all(|p| {
        let img = read_image(p).unwrap();
        img.shape() == [3, res, res] && img.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0)
    })
}

fn stage_log_ok(log: &Path) -> bool {
    let (_, records) = RunLog::read(log).unwrap();
    !records.is_empty() && records.iter().all(|r| r.is_finite() && r.cap_loss == 0.0)
}

#[test]
fn criterion_8_three_stage_chain() {
    let _g = serial();
    let d = desk();
    let s1 = schedule_run();
    let start = Instant::now();
    let base = TrainConfig {
        epochs: 2,
        ..s1.cfg.clone()
    };
    let s1_bytes = std::fs::read(&s1.checkpoint).unwrap();
    let cfg2 = TrainConfig {
        stage: 2,
        previous_stages: vec![s1.checkpoint.clone()],
        ..base.clone()
    };
    let r2 = run_train_refine(&cfg2, &TrainOptions::new(d.root.join("chain2"))).unwrap();
    let s2_bytes = std::fs::read(&r2.checkpoint).unwrap();
    let cfg3 = TrainConfig {
        stage: 3,
        previous_stages: vec![s1.checkpoint.clone(), r2.checkpoint.clone()],
        ..base.clone()
    };
    let r3 = run_train_refine(&cfg3, &TrainOptions::new(d.root.join("chain3"))).unwrap();
    let frozen = std::fs::read(&s1.checkpoint).unwrap() == s1_bytes && std::fs::read(&r2.checkpoint).unwrap() == s2_bytes;

    let stages = [s1.checkpoint.clone(), r2.checkpoint.clone(), r3.checkpoint.clone()];
    let resolutions: Vec<usize> =
        (1..=3).map(|k| StageChain::load(&stages[..k]).unwrap().out_res()).collect();
    let logs_ok = stage_log_ok(&r2.log) && stage_log_ok(&r3.log);

    // loss oracles for the refinement objectives
    let tape = Tape::<f64>::new();
    let zero = || tape.constant(Tensor::zeros(&[2, 1]));
    let zeros = || tape.constant(Tensor::zeros(&[2, 4]));
    let oracles_ok = (d_loss(zero(), zero()).unwrap().item().unwrap() - 2.0 * LN_2).abs() < 1e-6
        && (refine_g_loss(zero(), zeros(), zeros(), 1.0).unwrap().item().unwrap() - LN_2).abs() < 1e-6
        && (saturating_g_value(&[0.5], 0.5, 1.0) - (0.5f64.ln() + 0.5)).abs() < 1e-6;

    let model = TextToImage::load(&d.cfg.textenc_checkpoint, &stages).unwrap();
    let generated = run_generate(&model, &captions(), 11, 2, &d.root.join("chain_images")).unwrap();
    let images_ok = generated.resolution == 64 && generated.images.len() == 6 && finite_images(&generated.images, 64);
    let elapsed = start.elapsed();
    let pass = frozen && resolutions == [16, 32, 64] && logs_ok && oracles_ok && images_ok;
    let detail = format!(
        "resolutions {resolutions:?}; predecessors frozen: {frozen}; stage logs finite: {logs_ok}; \
         loss oracles: {oracles_ok}; {} valid 64×64 images from grammar captions: {images_ok} ({} + {} steps)",
        generated.images.len(),
        r2.steps,
        r3.steps
    );
    verdict(8, "three-stage chain", pass, elapsed, minutes(60), &detail);
}
