use attrlink::disambig::{AdapterParams, NliHeadParams, FEATURE_DIM};
use attrlink::evalbench::{rotated_image_pairs, separable_nli_instances};
use attrlink::optim::{
    adapter_batch_loss, ce_loss, contrastive_loss, grad_check, in_batch_accuracy, nli_batch_loss, nli_head_backward,
    train_adapter, train_nli_head, FlatParams, NliInstance, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

#[test]
fn ce_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores = random_vec(&mut rng, 60, 3.0);
    let err = grad_check(|s| ce_loss(s, 17).unwrap(), &scores, 60, H, 2);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn contrastive_gradient_check_b4_d8() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let flat = random_vec(&mut rng, 2 * 4 * 8, 1.0);
    let f = |x: &[f64]| {
        let rows: Vec<Vec<f64>> = x.chunks(8).map(<[f64]>::to_vec).collect();
        let out = contrastive_loss(&rows[..4], &rows[4..]).unwrap();
        let g = out.review_grads.iter().chain(&out.entity_grads).flatten().copied().collect();
        (out.loss, g)
    };
    let err = grad_check(f, &flat, 64, H, 0);
    assert!(err < 1e-5, "{err}");
}

fn nli_fixture(seed: u64) -> (NliHeadParams, Vec<NliInstance>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NliHeadParams::init(16, seed);
    params.b_o = 0.3;
    let data = (0..5)
        .map(|_| NliInstance {
            features: (0..6)
                .map(|_| {
                    let mut x = [0.0; FEATURE_DIM];
                    x.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
                    x
                })
                .collect(),
            gold: rng.random_range(0..6),
        })
        .collect();
    (params, data)
}

#[test]
fn nli_head_gradient_check() {
    let (params, data) = nli_fixture(9);
    let batch: Vec<&NliInstance> = data.iter().collect();
    let n = params.flatten().len();
    // b_o is the last coordinate; cross-entropy is blind to it
    let f = |x: &[f64]| {
        let mut p = params.clone();
        p.assign(x);
        let (loss, g) = nli_batch_loss(&p, &batch).unwrap();
        (loss, g.flatten())
    };
    let flat = params.flatten();
    let mut worst = 0.0f64;
    for seed in 0..4 {
        let trimmed = |x: &[f64]| {
            let mut full = x.to_vec();
            full.push(flat[n - 1]);
            let (l, mut g) = f(&full);
            g.pop();
            (l, g)
        };
        worst = worst.max(grad_check(trimmed, &flat[..n - 1], 50, H, seed));
    }
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn nli_head_output_bias_gradient() {
    let (params, data) = nli_fixture(5);
    let weights: Vec<f64> = (0..6).map(|k| 0.5 + k as f64).collect();
    let f = |x: &[f64]| {
        let mut p = params.clone();
        p.assign(x);
        let mut loss = 0.0;
        let mut grad = NliHeadParams::zeros(p.hidden());
        for inst in &data {
            for (x, w) in inst.features.iter().zip(&weights) {
                loss += w * p.forward(x).unwrap().0;
            }
            nli_head_backward(&p, &inst.features, &weights, &mut grad).unwrap();
        }
        (loss, grad.flatten())
    };
    let err = grad_check(f, &params.flatten(), usize::MAX, H, 0);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn adapter_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (d, dh, b) = (8, 4, 6);
    let mut params = AdapterParams::init(d, dh, 3);
    let w2 = random_vec(&mut rng, 2 * dh * d, 0.5);
    params.review_w2.data_mut().copy_from_slice(&w2[..dh * d]);
    params.entity_w2.data_mut().copy_from_slice(&w2[dh * d..]);
    let reviews: Vec<Vec<f64>> = (0..b).map(|_| random_vec(&mut rng, d, 1.0)).collect();
    let entities: Vec<Vec<f64>> = (0..b).map(|_| random_vec(&mut rng, d, 1.0)).collect();
    let r: Vec<&[f64]> = reviews.iter().map(Vec::as_slice).collect();
    let e: Vec<&[f64]> = entities.iter().map(Vec::as_slice).collect();
    let f = |x: &[f64]| {
        let mut p = params.clone();
        p.assign(x);
        let (loss, g) = adapter_batch_loss(&p, &r, &e).unwrap();
        (loss, g.flatten())
    };
    let err = grad_check(f, &params.flatten(), 80, H, 5);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn separable_features_train_to_high_accuracy() {
    let train = separable_nli_instances(400, 10, 1);
    let dev = separable_nli_instances(100, 10, 2);
    let cfg = TrainConfig {
        seed: 3,
        ..Default::default()
    };
    let (_, report) = train_nli_head(&train, &dev, NliHeadParams::init(16, 3), &cfg).unwrap();
    assert_eq!(report.epochs.len(), 31);
    let best = report.epochs.iter().map(|r| r.dev_acc).fold(0.0, f64::max);
    assert!(best >= 0.99, "{}", report.to_csv());
}

#[test]
fn nli_training_is_bitwise_reproducible() {
    let train = separable_nli_instances(64, 5, 8);
    let cfg = TrainConfig {
        epochs: 4,
        seed: 8,
        ..Default::default()
    };
    let a = train_nli_head(&train, &[], NliHeadParams::init(8, 8), &cfg).unwrap();
    let b = train_nli_head(&train, &[], NliHeadParams::init(8, 8), &cfg).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1.to_csv(), b.1.to_csv());
}

#[test]
fn adapter_learns_rotation() {
    let pairs = rotated_image_pairs(600, 16, 5);
    let (train, dev) = pairs.split_at(500);
    let init = AdapterParams::init(16, 16, 1);
    let before = in_batch_accuracy(&init, dev, 32).unwrap();
    let cfg = TrainConfig {
        seed: 1,
        ..Default::default()
    };
    let (trained, report) = train_adapter(train, dev, init, &cfg).unwrap();
    let after = in_batch_accuracy(&trained, dev, 32).unwrap();
    assert!(before <= 0.5, "{before}");
    assert!(after >= 0.95, "{after}");
    assert!(report.last().unwrap().dev_loss <= report.first().unwrap().dev_loss);

    let again = train_adapter(train, dev, AdapterParams::init(16, 16, 1), &cfg).unwrap();
    assert_eq!(again.0, trained);
}
