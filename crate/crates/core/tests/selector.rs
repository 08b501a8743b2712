use cpner::backbone::ModelConfig;
use cpner::corpus::Vocabulary;
use cpner::numerics::Tensor;
use cpner::prefixstore::{init_prefix, DomainPrefix};
use cpner::selector::{self, cosine, entity_similarity, prefix_similarity, select, weigh, Pooling, SelectorError};
use cpner::taskformat::Domain;
use proptest::prelude::*;

fn domain(name: &str, labels: &[&str]) -> Domain {
    Domain::new(name, labels.iter().map(|s| s.to_string()).collect()).unwrap()
}

/// Vocabulary over the given words plus a hand-set 4-dim embedding per word.
fn fixture(words: &[(&str, [f32; 4])]) -> (Vocabulary, Tensor<f32>) {
    let d = domain("all", &words.iter().map(|w| w.0).collect::<Vec<_>>());
    let vocab = Vocabulary::build(&[], &[d], &[]);
    let mut emb = Tensor::zeros(&[vocab.len(), 4]);
    for (w, v) in words {
        let id = vocab.id(w).unwrap();
        emb.data_mut()[id * 4..id * 4 + 4].copy_from_slice(v);
    }
    (vocab, emb)
}

fn small_config() -> ModelConfig {
    let mut c = ModelConfig::toy(50);
    c.d_model = 16;
    c.num_heads = 2;
    c.d_ff = 32;
    c.prefix_length = 3;
    c
}

fn prefix(seed: u64) -> DomainPrefix {
    init_prefix(&small_config(), &format!("d{seed}"), seed).unwrap()
}

fn negate(p: &DomainPrefix) -> DomainPrefix {
    p.map_matrices(|_, _, t| t.map(|x| -x))
}

#[test]
fn identical_label_sets_have_unit_similarity() {
    let (v, e) = fixture(&[("person", [1.0, 2.0, 0.0, 0.5]), ("city", [0.0, 1.0, 3.0, 0.0])]);
    let a = domain("a", &["person", "city"]);
    let (s, pairs) = entity_similarity(&e, &v, &a, &a, Pooling::Mean).unwrap();
    assert!((s - 1.0).abs() < 1e-6);
    assert!((pairs[0][0] - 1.0).abs() < 1e-6 && (pairs[1][1] - 1.0).abs() < 1e-6);
}

#[test]
fn orthogonal_pooled_vectors_have_zero_similarity() {
    let (v, e) = fixture(&[("person", [1.0, 0.0, 0.0, 0.0]), ("city", [0.0, 1.0, 0.0, 0.0])]);
    let (s, _) = entity_similarity(&e, &v, &domain("a", &["person"]), &domain("b", &["city"]), Pooling::Mean).unwrap();
    assert!(s.abs() < 1e-12);
}

#[test]
fn two_versus_three_labels_matches_hand_cosine() {
    let (v, e) = fixture(&[
        ("person", [1.0, 0.0, 2.0, 0.0]),
        ("city", [0.0, 2.0, 0.0, 0.0]),
        ("band", [1.0, 1.0, 1.0, 1.0]),
        ("song", [0.0, 0.0, 3.0, 0.0]),
        ("award", [2.0, 0.0, 0.0, 1.0]),
    ]);
    let src = domain("s", &["person", "city"]);
    let tgt = domain("t", &["band", "song", "award"]);
    // Source mean (0.5, 1, 1, 0); target mean (1, 1/3, 4/3, 2/3).
    let a = [0.5f64, 1.0, 1.0, 0.0];
    let b = [1.0f64, 1.0 / 3.0, 4.0 / 3.0, 2.0 / 3.0];
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let hand = dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt());
    let (s, pairs) = entity_similarity(&e, &v, &src, &tgt, Pooling::Mean).unwrap();
    assert!((s - hand).abs() < 1e-6, "{s} vs {hand}");
    assert_eq!((pairs.len(), pairs[0].len()), (2, 3));
    // person vs song: (1,0,2,0)·(0,0,3,0) / (√5·3)
    assert!((pairs[0][1] - 2.0 / 5f64.sqrt()).abs() < 1e-6);
}

#[test]
fn multiword_labels_are_mean_pooled() {
    let (v, e) = fixture(&[("music", [1.0, 0.0, 0.0, 0.0]), ("band", [0.0, 1.0, 0.0, 0.0]), ("x", [1.0, 1.0, 0.0, 0.0])]);
    let (s, _) = entity_similarity(&e, &v, &domain("a", &["music band"]), &domain("b", &["x"]), Pooling::Mean).unwrap();
    assert!((s - 1.0).abs() < 1e-6);
}

#[test]
fn out_of_vocabulary_label_is_named() {
    let (v, e) = fixture(&[("person", [1.0, 0.0, 0.0, 0.0])]);
    let err = entity_similarity(&e, &v, &domain("a", &["person"]), &domain("b", &["zorblat"]), Pooling::Mean).unwrap_err();
    match err {
        SelectorError::LabelOutOfVocabulary { label, .. } => assert_eq!(label, "zorblat"),
        other => panic!("{other}"),
    }
}

#[test]
fn max_pooling_is_available() {
    let (v, e) = fixture(&[("person", [1.0, 0.0, 0.0, 0.0]), ("city", [0.0, 1.0, 0.0, 0.0]), ("song", [1.0, 1.0, 0.0, 0.0])]);
    let (s, _) = entity_similarity(&e, &v, &domain("a", &["person", "city"]), &domain("b", &["song"]), Pooling::Max).unwrap();
    assert!((s - 1.0).abs() < 1e-6);
}

#[test]
fn prefix_with_itself_and_negation() {
    let p = prefix(1);
    assert!((prefix_similarity(&p, &p).unwrap() - 1.0).abs() < 1e-9);
    assert!((prefix_similarity(&p, &negate(&p)).unwrap() + 1.0).abs() < 1e-9);
}

#[test]
fn prefix_similarity_matches_flatten_oracle() {
    let (a, b) = (prefix(2), prefix(3));
    let mut total = 0.0;
    let mut n = 0.0;
    for (x, y) in a.matrices.iter().zip(b.matrices.iter()) {
        let (mut dot, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
        for (&p, &q) in x.data().iter().zip(y.data()) {
            dot += p as f64 * q as f64;
            nx += (p as f64).powi(2);
            ny += (q as f64).powi(2);
        }
        total += dot / (nx.sqrt() * ny.sqrt());
        n += 1.0;
    }
    assert_eq!(n as usize, 6, "3 sites x 2 layers");
    assert!((prefix_similarity(&a, &b).unwrap() - total / n).abs() < 1e-6);
}

#[test]
fn prefix_similarity_rejects_other_configs() {
    let a = prefix(1);
    let mut c = small_config();
    c.d_model = 32;
    let b = init_prefix(&c, "other", 1).unwrap();
    assert!(prefix_similarity(&a, &b).is_err());
}

fn select_fixture() -> (Vocabulary, Tensor<f32>) {
    fixture(&[
        ("person", [1.0, 0.0, 0.0, 0.0]),
        ("musician", [0.9, 0.1, 0.0, 0.0]),
        ("city", [0.0, 1.0, 0.0, 0.0]),
        ("song", [0.0, 0.0, 1.0, 0.0]),
    ])
}

#[test]
fn equal_totals_split_weight_evenly() {
    let (v, e) = select_fixture();
    let t = domain("t", &["person"]);
    let p = prefix(4);
    let r = select(&e, &v, &[(&t, &p), (&t, &p)], (&t, &p), 0.5, None, Pooling::Mean).unwrap();
    assert!((r.sources[0].weight - 0.5).abs() < 1e-12 && (r.sources[1].weight - 0.5).abs() < 1e-12);
}

#[test]
fn single_source_gets_all_weight() {
    let (v, e) = select_fixture();
    let (s, t) = (domain("s", &["city"]), domain("t", &["person"]));
    let r = select(&e, &v, &[(&s, &prefix(5))], (&t, &prefix(6)), 0.5, None, Pooling::Mean).unwrap();
    assert_eq!(r.weights(), vec![1.0]);
}

#[test]
fn empty_sources_rejected() {
    let (v, e) = select_fixture();
    let t = domain("t", &["person"]);
    assert!(matches!(select(&e, &v, &[], (&t, &prefix(1)), 0.5, None, Pooling::Mean), Err(SelectorError::NoSources)));
}

#[test]
fn bad_alpha_rejected() {
    let (v, e) = select_fixture();
    let t = domain("t", &["person"]);
    let p = prefix(1);
    assert!(matches!(select(&e, &v, &[(&t, &p)], (&t, &p), 1.5, None, Pooling::Mean), Err(SelectorError::Alpha(_))));
    assert!(matches!(
        select(&e, &v, &[(&t, &p)], (&t, &p), 0.5, Some(&[0.1, 0.2]), Pooling::Mean),
        Err(SelectorError::AlphaCount { .. })
    ));
}

#[test]
fn alpha_extremes_rank_by_one_similarity() {
    let (v, e) = select_fixture();
    let t = domain("t", &["person"]);
    let tp = prefix(10);
    // Source a: close labels, unrelated prefix. Source b: distant labels, prefix close to the target.
    let a = domain("a", &["musician"]);
    let b = domain("b", &["song"]);
    let pa = negate(&tp);
    let pb = tp.map_matrices(|_, _, m| m.map(|x| x * 2.0 + 0.001));
    let sources = [(&a, &pa), (&b, &pb)];
    let r1 = select(&e, &v, &sources, (&t, &tp), 1.0, None, Pooling::Mean).unwrap();
    let r0 = select(&e, &v, &sources, (&t, &tp), 0.0, None, Pooling::Mean).unwrap();
    let argmax = |w: Vec<f64>| if w[0] > w[1] { 0 } else { 1 };
    let argmax_by = |f: fn(&selector::SourceScore) -> f64, r: &selector::SimilarityReport| {
        if f(&r.sources[0]) > f(&r.sources[1]) { 0 } else { 1 }
    };
    assert_eq!(argmax(r1.weights()), argmax_by(|s| s.entity_sim, &r1));
    assert_eq!(argmax(r1.weights()), 0);
    assert_eq!(argmax(r0.weights()), argmax_by(|s| s.prefix_sim, &r0));
    assert_eq!(argmax(r0.weights()), 1);
}

#[test]
fn report_totals_follow_the_mixture_exactly() {
    let (v, e) = select_fixture();
    let t = domain("t", &["person", "city"]);
    let s1 = domain("s1", &["musician", "song"]);
    let (p1, p2, tp) = (prefix(1), prefix(2), prefix(3));
    let r = select(&e, &v, &[(&s1, &p1), (&t, &p2)], (&t, &tp), 0.3, Some(&[0.3, 0.8]), Pooling::Mean).unwrap();
    for s in &r.sources {
        assert_eq!(s.total, s.alpha * s.entity_sim + (1.0 - s.alpha) * s.prefix_sim);
        assert!((-1.0..=1.0).contains(&s.entity_sim) && (-1.0..=1.0).contains(&s.prefix_sim));
    }
    assert_eq!(r.sources[1].alpha, 0.8);
    assert!((r.weights().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let csv = r.pair_csv();
    assert_eq!(csv.lines().count(), 1 + 2 + 2);
    assert!(csv.starts_with("source,label,person,city"));
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<selector::SimilarityReport>(&json).unwrap(), r);
}

#[test]
fn self_selection_wins() {
    let (v, e) = select_fixture();
    let t = domain("t", &["person", "city"]);
    let tp = prefix(7);
    let others: Vec<(Domain, DomainPrefix)> =
        (0..4).map(|i| (domain(&format!("o{i}"), &[["musician", "song", "city", "person"][i]]), prefix(20 + i as u64))).collect();
    let mut sources: Vec<(&Domain, &DomainPrefix)> = others.iter().map(|(d, p)| (d, p)).collect();
    sources.insert(2, (&t, &tp));
    let r = select(&e, &v, &sources, (&t, &tp), 0.5, None, Pooling::Mean).unwrap();
    let w = r.weights();
    assert!(w.iter().all(|&x| w[2] >= x), "{w:?}");
    assert!((r.sources[2].total - 1.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn weights_form_a_simplex(sims in prop::collection::vec((-1.0f64..=1.0, -1.0f64..=1.0), 1..12), alpha in 0.0f64..=1.0) {
        let (ents, pres): (Vec<f64>, Vec<f64>) = sims.into_iter().unzip();
        let (_, w) = weigh(&ents, &pres, &vec![alpha; ents.len()]);
        prop_assert!(w.iter().all(|&x| x > 0.0 && x < 1.0 || (w.len() == 1 && x == 1.0)));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_simplex_for_any_finite_scores(xs in prop::collection::vec(-1e3f64..1e3, 1..10)) {
        let w = selector::softmax(&xs);
        prop_assert!(w.iter().all(|x| x.is_finite() && *x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn raising_one_total_raises_its_weight(xs in prop::collection::vec(-1.0f64..1.0, 2..8), bump in 1e-3f64..1.0, pick in 0usize..8) {
        let i = pick % xs.len();
        let before = selector::softmax(&xs);
        let mut ys = xs.clone();
        ys[i] += bump;
        let after = selector::softmax(&ys);
        prop_assert!(after[i] > before[i]);
    }

    #[test]
    fn cosine_is_bounded(a in prop::collection::vec(-10.0f64..10.0, 6), b in prop::collection::vec(-10.0f64..10.0, 6)) {
        let c = cosine(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn prefix_similarity_is_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
        let c = prefix_similarity(&prefix(s1), &prefix(s2)).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
    }
}
