use std::collections::HashSet;
use std::io::Cursor;

use hsacn_core::ingest::{
    build_corpus, compute_truncation, corpus_hash, nearest_rank, parse_reviews, read_corpus, tokenize, write_corpus,
    CapOverrides, Corpus, RawReview, Split, PAD, UNK,
};
use hsacn_core::reference;
use hsacn_core::synthetic::{planted_corpus, PlantedConfig};
use hsacn_core::HsacnError;
use proptest::prelude::*;

fn raw(user: &str, item: &str, rating: f64, text: &str) -> RawReview {
    RawReview {
        user_id: user.into(),
        item_id: item.into(),
        rating,
        text: text.into(),
    }
}

fn small_corpus(n: usize) -> Vec<RawReview> {
    (0..n)
        .map(|k| {
            raw(
                &format!("u{}", k % 13),
                &format!("i{}", k % 7),
                1.0 + (k % 5) as f64,
                &format!("Review number {k} is here. It mentions word{} twice!", k % 11),
            )
        })
        .collect()
}

fn planted() -> Corpus {
    let p = planted_corpus(&PlantedConfig {
        users: 40,
        items: 20,
        reviews_per_user: 6,
        ..PlantedConfig::default()
    });
    build_corpus(&p.reviews, 5, CapOverrides::default()).unwrap()
}

#[test]
fn parse_maps_fields_and_counts_drops() {
    let input = concat!(
        r#"{"reviewerID":"A1","asin":"B1","overall":5.0,"reviewText":"Great toy."}"#,
        "\n",
        r#"{"reviewerID":"A2","asin":"B1","overall":3.0,"reviewText":""}"#,
        "\n",
        "{not json\n",
        "\n",
        r#"{"reviewerID":"A3","asin":"B2","overall":4.0,"summary":"x"}"#,
        "\n",
        r#"{"reviewerID":"A4","asin":"B3","overall":2.0,"reviewText":"Meh.","unknown":[1,2]}"#,
        "\n",
    );
    let report = parse_reviews(Cursor::new(input)).unwrap();
    assert_eq!(
        report.reviews,
        vec![raw("A1", "B1", 5.0, "Great toy."), raw("A4", "B3", 2.0, "Meh.")]
    );
    assert_eq!(report.dropped_empty, 2);
    assert_eq!(report.errors.len(), 1);
    assert_eq!(report.errors[0].0, 3);
}

#[test]
fn tokenizer_examples() {
    let s = |v: &[&str]| v.iter().map(|w| w.to_string()).collect::<Vec<_>>();
    assert_eq!(
        tokenize("Great toy. Kids love it!"),
        vec![s(&["great", "toy", "."]), s(&["kids", "love", "it", "!"])]
    );
    let long = tokenize("this version is not classic like its predecessor, but its pleasures are still plentiful");
    assert_eq!(long.len(), 1);
    assert_eq!(long[0].len(), 15);
    assert!(tokenize("").is_empty());
    assert_eq!(tokenize("Line one\nline two"), vec![s(&["line", "one"]), s(&["line", "two"])]);
    assert_eq!(tokenize("v1.5 works"), vec![s(&["v1", ".", "5", "works"])]);
}

#[test]
fn truncation_examples() {
    let users = [1, 1, 2, 2, 3, 3, 4, 5, 9, 20];
    assert_eq!(nearest_rank(&users, 90), 9);
    let caps = compute_truncation(&[4, 4], &[4, 4, 4], &[3; 5], &[6; 15]);
    assert_eq!((caps.sentences, caps.words), (3, 6));
    assert_eq!(nearest_rank(&[2, 4, 6, 8, 10], 70), reference::nearest_rank(&[2, 4, 6, 8, 10], 70));
}

proptest! {
    #[test]
    fn nearest_rank_matches_oracle(values in prop::collection::vec(0usize..50, 1..60), percent in 1usize..=100) {
        prop_assert_eq!(nearest_rank(&values, percent), reference::nearest_rank(&values, percent));
    }
}

#[test]
fn too_small_corpus() {
    let err = build_corpus(&small_corpus(9), 1, CapOverrides::default()).unwrap_err();
    assert!(matches!(err, HsacnError::CorpusTooSmall(9)));
}

#[test]
fn split_is_deterministic_80_10_10() {
    let data = small_corpus(100);
    let a = build_corpus(&data, 42, CapOverrides::default()).unwrap();
    let b = build_corpus(&data, 42, CapOverrides::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.split(Split::Train).len(), 80);
    assert_eq!(a.split(Split::Validation).len(), 10);
    assert_eq!(a.split(Split::Test).len(), 10);
    let c = build_corpus(&data, 43, CapOverrides::default()).unwrap();
    assert_ne!(a.split(Split::Test), c.split(Split::Test));
}

#[test]
fn split_sizes_for_awkward_counts() {
    for n in [10, 11, 19, 37, 101] {
        let c = build_corpus(&small_corpus(n), 3, CapOverrides::default()).unwrap();
        let (tr, va) = (c.split(Split::Train).len() as f64, c.split(Split::Validation).len() as f64);
        assert!((tr - 0.8 * n as f64).abs() <= 1.0);
        assert!((va - 0.1 * n as f64).abs() <= 1.0);
    }
}

#[test]
fn test_only_words_map_to_unk() {
    let mut data = small_corpus(60);
    let c0 = build_corpus(&data, 9, CapOverrides::default()).unwrap();
    let k = c0.split(Split::Test)[0].review;
    data[k].text = "Zyzzyva appears once.".into();
    let c = build_corpus(&data, 9, CapOverrides::default()).unwrap();
    assert_eq!(c.reviews[k].sentences[0][0], UNK);
    assert!(c.vocab.words().iter().all(|w| w != "zyzzyva"));
}

#[test]
fn ids_in_range_and_no_inner_padding() {
    let c = planted();
    let v = c.vocab.len() as u32;
    assert_eq!(c.vocab.word(PAD), "<pad>");
    assert_eq!(c.vocab.word(UNK), "<unk>");
    for r in &c.reviews {
        assert!(r.sentences.len() <= c.caps.sentences);
        for s in &r.sentences {
            assert!(!s.is_empty() && s.len() <= c.caps.words);
            assert!(s.iter().all(|&id| id < v && id != PAD));
        }
    }
    let words: HashSet<&String> = c.vocab.words().iter().collect();
    assert_eq!(words.len(), c.vocab.len());
}

#[test]
fn caps_match_oracle_and_truncate_texts() {
    let p = planted_corpus(&PlantedConfig {
        users: 40,
        items: 20,
        reviews_per_user: 6,
        ..PlantedConfig::default()
    });
    let c = build_corpus(&p.reviews, 5, CapOverrides::default()).unwrap();
    let texts: Vec<_> = p.reviews.iter().map(|r| tokenize(&r.text)).collect();
    let mut user_counts = vec![0; c.users.len()];
    let mut item_counts = vec![0; c.items.len()];
    for r in &c.reviews {
        user_counts[r.user] += 1;
        item_counts[r.item] += 1;
    }
    let sentences: Vec<usize> = texts.iter().map(Vec::len).collect();
    let words: Vec<usize> = texts.iter().flatten().map(Vec::len).collect();
    let r_max = reference::nearest_rank(&user_counts, 90).max(reference::nearest_rank(&item_counts, 90));
    assert_eq!(c.caps.reviews, r_max);
    assert_eq!(c.caps.sentences, reference::nearest_rank(&sentences, 70));
    assert_eq!(c.caps.words, reference::nearest_rank(&words, 70));
    // First sentences and first words survive.
    for (k, text) in texts.iter().enumerate() {
        let kept = &c.reviews[k].sentences;
        assert_eq!(kept.len(), text.len().min(c.caps.sentences));
        for (s, t) in kept.iter().zip(text) {
            assert_eq!(s.len(), t.len().min(c.caps.words));
        }
    }
}

#[test]
fn overrides_replace_caps() {
    let c = build_corpus(
        &small_corpus(50),
        1,
        CapOverrides {
            reviews: Some(2),
            sentences: Some(1),
            words: Some(3),
        },
    )
    .unwrap();
    assert_eq!((c.caps.reviews, c.caps.sentences, c.caps.words), (2, 1, 3));
    assert!(c.user_reviews.iter().all(|h| h.len() <= 2));
    assert!(c.reviews.iter().all(|r| r.sentences.len() <= 1 && r.sentences[0].len() <= 3));
}

#[test]
fn histories_hold_recent_training_reviews() {
    let c = build_corpus(
        &small_corpus(120),
        2,
        CapOverrides {
            reviews: Some(3),
            ..CapOverrides::default()
        },
    )
    .unwrap();
    for (u, hist) in c.user_reviews.iter().enumerate() {
        let all: Vec<usize> = c
            .interactions
            .iter()
            .filter(|it| it.user == u && it.split == Split::Train)
            .map(|it| it.review)
            .collect();
        let tail = &all[all.len().saturating_sub(3)..];
        assert_eq!(hist.as_slice(), tail);
    }
}

#[test]
fn target_review_is_excluded() {
    let c = planted();
    for it in c.split(Split::Train) {
        let uh = c.user_history(it.user, it.item);
        assert!(uh.iter().all(|&r| c.reviews[r].item != it.item));
        let ih = c.item_history(it.item, it.user);
        assert!(ih.iter().all(|&r| c.reviews[r].user != it.user));
        assert!(!uh.contains(&it.review) && !ih.contains(&it.review));
    }
}

#[test]
fn truncation_coverage() {
    let c = planted();
    let mut user_counts = vec![0; c.users.len()];
    let mut item_counts = vec![0; c.items.len()];
    for r in &c.reviews {
        user_counts[r.user] += 1;
        item_counts[r.item] += 1;
    }
    let covered = |counts: &[usize]| counts.iter().filter(|&&n| n <= c.caps.reviews).count() as f64 / counts.len() as f64;
    assert!(covered(&user_counts) >= 0.9);
    assert!(covered(&item_counts) >= 0.9);
}

#[test]
fn lookup_errors() {
    let c = planted();
    assert!(matches!(c.user_index("nobody"), Err(HsacnError::Lookup { kind: "user", .. })));
    assert!(matches!(c.item_index("nothing"), Err(HsacnError::Lookup { kind: "item", .. })));
    assert_eq!(c.user_index(&c.users[3]).unwrap(), 3);
}

#[test]
fn cache_round_trip_is_byte_identical() {
    let c = planted();
    let mut first = Vec::new();
    write_corpus(&c, &mut first).unwrap();
    assert!(first.starts_with(b"HSACN-CORPUS v1\n"));
    let back = read_corpus(Cursor::new(&first)).unwrap();
    assert_eq!(back, c);
    let mut second = Vec::new();
    write_corpus(&back, &mut second).unwrap();
    assert_eq!(first, second);
    assert_eq!(corpus_hash(&c).unwrap(), corpus_hash(&back).unwrap());

    let rebuilt = planted();
    assert_eq!(corpus_hash(&rebuilt).unwrap(), corpus_hash(&c).unwrap());
}

#[test]
fn cache_rejects_bad_header() {
    let err = read_corpus(Cursor::new(b"HSACN-CORPUS v9\n{}\n".to_vec())).unwrap_err();
    assert!(matches!(err, HsacnError::Format(_)));
}
