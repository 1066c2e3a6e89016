use capgan::captioner::{
    captioner_loss, captioner_loss_from_codes, cosine_lr, Captioner, CaptionerConfig, FrozenEncoder, ImageEncoderNet,
    PerceptualEncoder, CODE_DIM, MAX_DECODE_LEN,
};
use capgan::dataset::{synthesize_dataset, Dataset};
use capgan::textenc::{Vocab, END};
use diffcomp::{grad_check, BnMode, EntryKind, ParamStore, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn encoder_f64(resolution: usize, seed: u64) -> (ParamStore<f64>, ImageEncoderNet) {
    let mut store = ParamStore::new();
    let net = ImageEncoderNet::new(&mut store, resolution, [8, 8, 16, 16], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, net)
}

fn images<T: Scalar>(n: usize, r: usize, seed: u64) -> Tensor<T> {
    Tensor::uniform(&[n, 3, r, r], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn code_dimension_is_fixed() {
    for r in [16, 32] {
        let (store, net) = encoder_f64(r, 1);
        let frozen = FrozenEncoder { net: &net, store: &store };
        let tape = Tape::new();
        let x = images::<f64>(2, r, 2);
        let a = frozen.encode(&tape, tape.constant(x.clone())).unwrap().value();
        let b = frozen.encode(&tape, tape.constant(x)).unwrap().value();
        assert_eq!(a.shape(), &[2, CODE_DIM]);
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn wrong_image_shape_is_rejected() {
    let (store, net) = encoder_f64(16, 1);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let x = tape.constant(images::<f64>(1, 32, 2));
    assert_eq!(net.forward(&p, x, BnMode::Eval).unwrap_err().category(), "invalid_input");
    let mut s = ParamStore::<f64>::new();
    assert!(ImageEncoderNet::new(&mut s, 20, [4; 4], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn code_gradient_matches_finite_differences() {
    let (store, net) = encoder_f64(16, 3);
    let x = images::<f64>(1, 16, 4);
    let err = grad_check(
        |tape, x| {
            let p = store.bind(tape, false);
            net.forward(&p, x, BnMode::Eval).expect("encode").sum()
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

/// Code `(mean pixel, 0, …, 0)` per image.
struct MeanStub;

impl PerceptualEncoder<f64> for MeanStub {
    fn encode<'t>(&self, tape: &'t Tape<f64>, images: Var<'t, f64>) -> capgan::Result<Var<'t, f64>> {
        let flat = images.flatten()?;
        let d = flat.shape()[1];
        let mut w = vec![0.0; d * CODE_DIM];
        for i in 0..d {
            w[i * CODE_DIM] = 1.0 / d as f64;
        }
        Ok(flat.matmul(tape.constant(Tensor::new(&[d, CODE_DIM], w)?))?)
    }
}

#[test]
fn stub_encoder_loss_is_one_over_code_dim() {
    let tape = Tape::new();
    let real = Tensor::<f64>::ones(&[3, 3, 16, 16]);
    let fake = tape.leaf(Tensor::zeros(&[3, 3, 16, 16]));
    let loss = captioner_loss(&MeanStub, &real, fake).unwrap();
    assert!((loss.item().unwrap() - 1.0 / 256.0).abs() < 1e-12);
    assert!((loss.item().unwrap() - 0.00390625).abs() < 1e-12);
    let same = captioner_loss(&MeanStub, &real, tape.constant(real.clone())).unwrap();
    assert_eq!(same.item().unwrap(), 0.0);
}

#[test]
fn loss_is_symmetric_and_zero_only_at_equality() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Tensor::<f64>::randn(&[4, CODE_DIM], &mut rng);
    let b = Tensor::<f64>::randn(&[4, CODE_DIM], &mut rng);
    let tape = Tape::new();
    let ab = captioner_loss_from_codes(&a, tape.constant(b.clone())).unwrap().item().unwrap();
    let ba = captioner_loss_from_codes(&b, tape.constant(a.clone())).unwrap().item().unwrap();
    assert_eq!(ab, ba);
    assert!(ab > 0.0);
    let aa = captioner_loss_from_codes(&a, tape.constant(a.clone())).unwrap().item().unwrap();
    assert_eq!(aa, 0.0);
    let short = Tensor::<f64>::zeros(&[3, CODE_DIM]);
    assert_eq!(
        captioner_loss_from_codes(&short, tape.constant(a)).unwrap_err().category(),
        "invalid_input"
    );
}

#[test]
fn gradient_reaches_generated_images_only() {
    let (store, net) = encoder_f64(16, 6);
    let frozen = FrozenEncoder { net: &net, store: &store };
    let tape = Tape::new();
    let real = images::<f64>(2, 16, 7);
    let fake = tape.leaf(images::<f64>(2, 16, 8));
    let loss = captioner_loss(&frozen, &real, fake).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.wrt(fake).unwrap();
    assert!(g.data().iter().any(|&v| v != 0.0));
    for (id, _) in store.entries() {
        assert!(grads.for_param(&store, id).is_none());
    }
    let err = grad_check(
        |_, x| Ok(captioner_loss(&frozen, &real, x).expect("loss")),
        &images::<f64>(2, 16, 8),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

fn tiny_dataset(count: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    synthesize_dataset(count, 16, 31, dir.path()).unwrap();
    let data = Dataset::open(dir.path()).unwrap();
    (dir, data)
}

fn param_values(store: &ParamStore<f32>) -> Vec<Vec<f32>> {
    store
        .entries()
        .filter(|(_, e)| e.kind == EntryKind::Param)
        .map(|(_, e)| e.value.data().to_vec())
        .collect()
}

#[test]
fn initial_loss_is_near_uniform_and_zero_rate_is_a_fixed_point() {
    let (_dir, data) = tiny_dataset(96);
    let (train, held) = data.split(32);
    let cfg = CaptionerConfig {
        epochs: 2,
        lr: 0.0,
        ..CaptionerConfig::default()
    };
    let mut cap = Captioner::new(&cfg, data.vocab.len(), 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let before = param_values(&cap.store);
    let report = cap.train(&data, &train, &held, &cfg, 2).unwrap();
    let uniform = (data.vocab.len() as f64).ln();
    println!("initial loss {:.4} vs ln|V| {uniform:.4}", report.initial_loss);
    assert!((report.initial_loss - uniform).abs() < 0.2 * uniform);
    assert_eq!(param_values(&cap.store), before);
    assert_eq!(report.epoch_losses.len(), 2);
    assert_eq!(report.heldout_accuracy.len(), 2);
}

#[test]
fn greedy_decoding_is_deterministic_and_capped() {
    let vocab = Vocab::standard();
    let cfg = CaptionerConfig::default();
    let mut cap = Captioner::new(&cfg, vocab.len(), 16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let code = Tensor::<f32>::randn(&[CODE_DIM], &mut ChaCha8Rng::seed_from_u64(4));
    let a = cap.decode(&code).unwrap();
    assert_eq!(a, cap.decode(&code).unwrap());
    assert!(a.len() <= MAX_DECODE_LEN);
    // a large bias on one word means the end token never wins
    let bias = cap.decoder.out.bias.unwrap();
    let mut b = vec![0.0f32; vocab.len()];
    b[vocab.id("a").unwrap()] = 1e3;
    cap.store.set_value(bias, Tensor::new(&[vocab.len()], b).unwrap()).unwrap();
    let capped = cap.decode(&code).unwrap();
    assert_eq!(capped.len(), MAX_DECODE_LEN);
    assert!(!capped.contains(&END));
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(1e-3, 0.05, 0, 20), 1e-3);
    assert!((cosine_lr(1e-3, 0.05, 19, 20) - 5e-5).abs() < 1e-12);
    assert!(cosine_lr(1e-3, 0.05, 10, 20) < 1e-3);
    assert_eq!(cosine_lr(1e-3, 0.05, 0, 1), 1e-3);
}

#[test]
fn trained_codes_separate_classes() {
    let (_dir, data) = tiny_dataset(1200);
    let (train, held) = data.split(200);
    let cfg = CaptionerConfig {
        epochs: 5,
        ..CaptionerConfig::default()
    };
    let mut cap = Captioner::new(&cfg, data.vocab.len(), 16, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let report = cap.train(&data, &train, &held, &cfg, 8).unwrap();
    assert!(report.epoch_losses.last() < report.epoch_losses.first());
    let codes = cap.encode_images(&data.images_at(&held, 16).unwrap()).unwrap();
    let labels = data.labels(&held);
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..held.len() {
        for j in i + 1..held.len() {
            let a = &codes.data()[i * CODE_DIM..(i + 1) * CODE_DIM];
            let b = &codes.data()[j * CODE_DIM..(j + 1) * CODE_DIM];
            let d: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
            let slot = if labels[i] == labels[j] { &mut intra } else { &mut inter };
            slot.0 += d;
            slot.1 += 1;
        }
    }
    let (intra, inter) = (intra.0 / intra.1 as f64, inter.0 / inter.1 as f64);
    println!("intra-class {intra:.3} inter-class {inter:.3}");
    assert!(intra < inter);
}
