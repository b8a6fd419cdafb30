use attrlink::corpus::cosine;
use attrlink::disambig::{adapt, nli_score, AttributeFeatureVector, NliHeadParams};
use attrlink::encoders::hash_embed;
use attrlink::linalg::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn hash_embed_disjoint_vocabulary() {
    let a = hash_embed("crimson leather tote with brass buckle", 256, 42).unwrap();
    let b = hash_embed("quiet wireless earbuds last all day", 256, 42).unwrap();
    let c = cosine(&a, &b);
    assert!(c.abs() < 0.2);
    assert_eq!(c, 0.0);
}

fn naive_head(p: &NliHeadParams, x: &[f64; 6]) -> f64 {
    let h = p.hidden();
    let mut s = p.b_o;
    for k in 0..h {
        let mut z = p.b_h[k];
        for (i, xi) in x.iter().enumerate() {
            z += xi * p.w_h.get(i, k);
        }
        s += p.w_o[k] * z.tanh();
    }
    s
}

#[test]
fn nli_score_fixture() {
    let p = NliHeadParams::init(16, 7);
    let f = AttributeFeatureVector {
        desc_score: 0.25,
        attr_max: 1.0,
        attr_mean: 0.5,
        attr_hit_fraction: 0.5,
        prior_e: 0.2,
        prior_c: 0.8,
    };
    let s = nli_score(&f, &p).unwrap();
    assert!((s - 0.06285714364068519).abs() < 1e-12);
    assert!((s - naive_head(&p, &f.to_array())).abs() < 1e-12);
    assert_eq!(s, nli_score(&f, &p).unwrap());
}

#[test]
fn adapt_fixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w1 = Matrix::uniform(8, 2, 1.0, &mut rng);
    let w2 = Matrix::uniform(2, 8, 1.0, &mut rng);
    let h: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect();
    let out = adapt(&h, &w1, &w2).unwrap();
    let frozen = [
        -0.8044385297661931,
        -0.8431023604177342,
        -0.19752510986179833,
        -0.4756442867685965,
        0.20060920400615811,
        0.34211585590597393,
        0.6426370006717639,
        0.9038716354343481,
    ];
    for (o, f) in out.iter().zip(frozen) {
        assert!((o - f).abs() < 1e-12);
    }

    let mut naive = h.clone();
    for k in 0..2 {
        let z: f64 = (0..8).map(|i| h[i] * w1.get(i, k)).sum();
        for (j, n) in naive.iter_mut().enumerate() {
            *n += z.max(0.0) * w2.get(k, j);
        }
    }
    for (o, n) in out.iter().zip(&naive) {
        assert!((o - n).abs() < 1e-12);
    }
}
