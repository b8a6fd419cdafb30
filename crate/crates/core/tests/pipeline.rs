use std::collections::BTreeMap;

use attrlink::corpus::{cosine, read_embeddings, write_embeddings, EmbeddingStore, Entity, KnowledgeBase, Review};
use attrlink::disambig::{attribute_conflict, FusionConfig, NliHeadParams};
use attrlink::encoders::{HashEmbedder, LexicalEntailment, TextEmbedder};
use attrlink::evalbench::{
    generate_synthetic, grid_search, micro_f1, prediction_map, prepare_synthetic, run_ablation, AblationConfig,
    AblationData, Setting, SynthConfig, Variant,
};
use attrlink::mining::{
    build_entity_image_store, build_title_store, detect_mention, filter_reviews, mine_hard_negatives,
    FilterThresholds, InformativenessFeatures,
};
use attrlink::pipeline::{extract_all_attributes, gold_map, predict_all, Model};
use attrlink::retrieval::RetrievalConfig;
use attrlink::textnorm::{match_key, Stopwords};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn review(id: &str, text: &str, gold: &str) -> Review {
    Review {
        review_id: id.into(),
        text: text.into(),
        mention: None,
        image_ids: vec![],
        gold_entity_id: Some(gold.into()),
        extracted_attributes: BTreeMap::new(),
    }
}

fn small_config(n_reviews: usize) -> SynthConfig {
    SynthConfig {
        n_categories: 3,
        entities_per_category: 40,
        n_reviews,
        ..Default::default()
    }
}

#[test]
fn longer_chunk_wins_when_closer_to_title() {
    let product = Entity {
        entity_id: "p".into(),
        title: "Premium Gas Ranges 30in".into(),
        description: String::new(),
        categories: vec!["Appliances".into(), "Ranges".into()],
        attributes: BTreeMap::new(),
        image_ids: vec![],
    };
    let emb = HashEmbedder::default();
    let title = emb.embed(&product.title);
    let cos_long = cosine(&emb.embed("gas range"), &title);
    let cos_short = cosine(&emb.embed("range"), &title);
    assert!(cos_long > cos_short);
    let m = detect_mention(&review("r", "the gas range heats fast", "p"), &product, &emb, &Stopwords::default()).unwrap();
    assert_eq!((m.surface.as_str(), m.start, m.end), ("gas range", 4, 13));
}

#[test]
fn thousand_vectors_round_trip_through_a_file() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = EmbeddingStore::new(64, false).unwrap();
    for i in 0..1000 {
        store.insert(format!("k{i}"), (0..64).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.amev");
    write_embeddings(&store, &path).unwrap();
    let back = read_embeddings(&path).unwrap();
    assert_eq!(back.len(), 1000);
    for ((ka, va), (kb, vb)) in store.iter().zip(back.iter()) {
        assert_eq!(ka, kb);
        assert!(va.iter().zip(vb).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn extracted_attributes_never_exclude_gold() {
    let mut corpus = generate_synthetic(&small_config(1000)).unwrap();
    let stop = Stopwords::default();
    extract_all_attributes(&mut corpus.reviews, &corpus.kb, &stop);
    for r in &corpus.reviews {
        let gold = corpus.kb.get(r.gold_entity_id.as_deref().unwrap()).unwrap();
        assert!(!r.extracted_attributes.is_empty());
        for (k, v) in &r.extracted_attributes {
            assert_eq!(match_key(&gold.attributes[k], &stop), match_key(v, &stop));
        }
        assert!(!attribute_conflict(gold, &r.extracted_attributes, &stop));
    }
}

#[test]
fn mentioning_every_attribute_isolates_gold_in_its_group() {
    let cfg = SynthConfig {
        review_attribute_mentions: 4,
        ..small_config(200)
    };
    let mut corpus = generate_synthetic(&cfg).unwrap();
    let stop = Stopwords::default();
    extract_all_attributes(&mut corpus.reviews, &corpus.kb, &stop);
    for r in &corpus.reviews {
        let gold = corpus.kb.get(r.gold_entity_id.as_deref().unwrap()).unwrap();
        let survivors: Vec<&Entity> = corpus
            .kb
            .entities()
            .filter(|e| e.title == gold.title)
            .filter(|e| !attribute_conflict(e, &r.extracted_attributes, &stop))
            .collect();
        assert_eq!(survivors.len(), 1);
        assert_eq!(survivors[0].entity_id, gold.entity_id);
    }
}

#[test]
fn planted_informativeness_split_is_recovered() {
    let corpus = generate_synthetic(&small_config(500)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut planted = BTreeMap::new();
    let reviews: Vec<Review> = corpus
        .reviews
        .iter()
        .map(|r| {
            let informative = rng.random_bool(0.5);
            planted.insert(r.review_id.clone(), informative);
            if informative {
                r.clone()
            } else {
                Review {
                    text: "Arrived on time, packaging was fine.".into(),
                    image_ids: vec![],
                    ..r.clone()
                }
            }
        })
        .collect();
    let out = filter_reviews(
        reviews,
        &corpus.kb,
        &FilterThresholds::default(),
        &HashEmbedder::default(),
        Some(&corpus.images),
        &Stopwords::default(),
    )
    .unwrap();
    assert_eq!(out.kept.len() + out.dropped.len(), 500);
    let tp = out.kept.iter().filter(|r| planted[&r.review_id]).count() as f64;
    let planted_pos = planted.values().filter(|&&v| v).count() as f64;
    let precision = tp / out.kept.len() as f64;
    let recall = tp / planted_pos;
    assert!(precision >= 0.95 && recall >= 0.95, "{precision} {recall}");
}

#[test]
fn oracle_features_recover_planted_split() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = FilterThresholds::default();
    let (mut tp, mut fp, mut fnn) = (0, 0, 0);
    for _ in 0..500 {
        let informative = rng.random_bool(0.5);
        let f = if informative {
            InformativenessFeatures {
                mentioned_attribute_count: rng.random_range(1..4),
                image_similarity: rng.random_range(0.5..1.0),
                description_similarity: rng.random_range(0.0..0.6),
                title_similarity: rng.random_range(0.0..0.6),
            }
        } else {
            InformativenessFeatures {
                mentioned_attribute_count: 0,
                image_similarity: rng.random_range(-1.0..0.3),
                description_similarity: rng.random_range(0.0..0.3),
                title_similarity: rng.random_range(0.0..0.3),
            }
        };
        match (informative, t.passes(&f)) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fnn += 1,
            _ => {}
        }
    }
    assert!(tp as f64 / (tp + fp) as f64 >= 0.95);
    assert!(tp as f64 / (tp + fnn) as f64 >= 0.95);
}

#[test]
fn hard_negatives_are_siblings() {
    let corpus = generate_synthetic(&small_config(1)).unwrap();
    let emb = HashEmbedder::default();
    let titles = build_title_store(&corpus.kb, &emb).unwrap();
    let images = build_entity_image_store(&corpus.kb, &corpus.images).unwrap();
    for gold in corpus.kb.entities().take(20) {
        let mined = mine_hard_negatives(gold, 3, &titles, Some(&images)).unwrap();
        assert!(mined.len() <= 6);
        assert!(!mined.contains(&gold.entity_id));
        let siblings: Vec<&str> = corpus
            .kb
            .entities()
            .filter(|e| e.title == gold.title && e.entity_id != gold.entity_id)
            .map(|e| e.entity_id.as_str())
            .collect();
        assert_eq!(siblings.len(), 3);
        for s in siblings {
            assert!(mined.iter().any(|m| m == s), "{s} not mined for {}", gold.entity_id);
        }
    }
}

#[test]
fn hard_negative_cardinality() {
    let entities: Vec<Entity> = (0..30)
        .map(|i| Entity {
            entity_id: format!("e{i:02}"),
            title: format!("Item {i} widget"),
            description: String::new(),
            categories: vec!["Things".into()],
            attributes: BTreeMap::new(),
            image_ids: vec![],
        })
        .collect();
    let kb = KnowledgeBase::from_entities(entities).unwrap();
    let titles = build_title_store(&kb, &HashEmbedder::default()).unwrap();
    let gold = kb.get("e05").unwrap();
    let both = mine_hard_negatives(gold, 10, &titles, Some(&titles)).unwrap();
    assert_eq!(both.len(), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut random = EmbeddingStore::new(16, false).unwrap();
    for e in kb.entities() {
        random.insert(e.entity_id.clone(), (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    }
    let mixed = mine_hard_negatives(gold, 10, &titles, Some(&random)).unwrap();
    assert!(mixed.len() <= 20 && mixed.len() >= 10);
    assert!(!mixed.iter().any(|m| m == "e05"));
}

#[test]
fn grid_prefers_text_when_images_are_noise() {
    let emb = HashEmbedder::default();
    let mut prepared = prepare_synthetic(&small_config(600), &RetrievalConfig::default(), &emb, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let review_images: std::collections::HashSet<String> = prepared
        .split
        .dev
        .iter()
        .filter_map(|r| r.first_image().map(str::to_string))
        .collect();
    let mut rebuilt = EmbeddingStore::new(prepared.corpus.images.dim(), true).unwrap();
    for (k, v) in prepared.corpus.images.iter() {
        let v = if review_images.contains(k) {
            let noise: Vec<f64> = (0..v.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            attrlink::corpus::unit_f32(&noise).unwrap()
        } else {
            v.to_vec()
        };
        rebuilt.insert(k.to_string(), v).unwrap();
    }
    prepared.corpus.images = rebuilt;
    // text score is tanh(attr_mean): high for gold, lower for siblings
    let mut head = NliHeadParams::zeros(1);
    head.w_h.data_mut()[2] = 1.0;
    head.w_o[0] = 1.0;
    let ent = LexicalEntailment::default();
    let ctx = prepared.link_context(&ent);
    let grid: BTreeMap<String, Vec<f64>> = [("lambda".to_string(), vec![0.0, 0.5, 1.0])].into();
    let dev = &prepared.split.dev;
    let result = grid_search(&grid, |p| {
        let f = FusionConfig {
            lambda: p["lambda"],
            apply_attribute_filter: false,
        };
        let preds = predict_all(dev, &prepared.candidates, &ctx, Model { head: &head, adapter: None }, &f, true)?;
        Ok(micro_f1(&prediction_map(&preds), &gold_map(dev), Setting::EndToEnd, None)?.f1)
    })
    .unwrap();
    assert_eq!(result.table.len(), 3);
    assert_eq!(result.best["lambda"], 1.0, "{:?}", result.table);
}

#[test]
fn ablation_orders_variants() {
    let emb = HashEmbedder::default();
    let prepared = prepare_synthetic(&small_config(900), &RetrievalConfig::default(), &emb, 7).unwrap();
    let ent = LexicalEntailment::default();
    let ctx = prepared.link_context(&ent);
    let data = AblationData {
        ctx: &ctx,
        split: &prepared.split,
        candidates: &prepared.candidates,
        adapter: None,
    };
    let table = run_ablation(&data, &AblationConfig::default()).unwrap();
    for row in &table.rows {
        assert!(row.end_to_end_f1 <= row.disambiguation_f1 + 1e-12, "{}", table.to_text());
    }
    let full = table.row(Variant::Full).unwrap();
    let plain = table.row(Variant::WithoutAttribute).unwrap();
    assert!(full.disambiguation_f1 >= plain.disambiguation_f1 + 0.10, "{}", table.to_text());
    assert!(!plain.use_attributes && !plain.apply_attribute_filter);
    assert_eq!(table.row(Variant::WithoutImage).unwrap().lambda, Some(1.0));
    assert_eq!(table.row(Variant::WithoutText).unwrap().lambda, Some(0.0));
    assert_eq!(plain.lambda, full.lambda);
}

#[test]
fn noiseless_review_images_equal_gold_images() {
    let cfg = SynthConfig {
        image_noise_sigma: 0.0,
        ..small_config(100)
    };
    let corpus = generate_synthetic(&cfg).unwrap();
    for r in &corpus.reviews {
        let gold = corpus.kb.get(&corpus.gold[&r.review_id]).unwrap();
        let a = corpus.images.get(r.first_image().unwrap()).unwrap();
        let b = corpus.images.get(gold.first_image().unwrap()).unwrap();
        let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
        let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        assert!((dot / (na * nb) - 1.0).abs() < 1e-6);
    }
}
