use std::collections::BTreeSet;

use proptest::collection::{btree_set, vec};
use proptest::prelude::*;
use serde_json::json;

use ragpoison_core::clients::{CacheEntry, ResponseCache};
use ragpoison_core::corpus::{segment_by_popularity, temporal_split};
use ragpoison_core::embedding::EmbeddingProvider;
use ragpoison_core::eval::{exposure_delta, mean_target_rank, ndcg_at_k, recall_at_k};
use ragpoison_core::textmetrics::{check_stealth, token_edit_distance, tokenize};
use ragpoison_core::{
    Goal, Interaction, InteractionLog, Item, ItemCatalog, MockEmbedder, RankedList, ScoredItem, Segment, Stage,
    StealthPolicy, TargetSet, VectorIndex,
};

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("i{i:02}")).collect()
}

/// A ranked list (distinct ids) and a relevant set over a 40-item universe.
fn list_and_relevant() -> impl Strategy<Value = (Vec<String>, BTreeSet<String>)> {
    (Just(ids(40)).prop_shuffle(), 0..=40usize, btree_set(0..40usize, 0..=15)).prop_map(|(pool, len, rel)| {
        let list = pool[..len].to_vec();
        let relevant = rel.into_iter().map(|i| format!("i{i:02}")).collect();
        (list, relevant)
    })
}

fn tokens() -> impl Strategy<Value = Vec<u8>> {
    vec(0..4u8, 0..8)
}

fn words() -> impl Strategy<Value = String> {
    vec(
        prop::sample::select(vec!["storm", "harbor", "the", "a", "quiet", "Night,", "dream.", "of"]),
        5..20,
    )
    .prop_map(|w| w.join(" "))
}

fn ranked(user: &str, items: &[String]) -> RankedList {
    RankedList {
        user_id: user.into(),
        stage: Stage::Recommendation,
        entries: items
            .iter()
            .enumerate()
            .map(|(i, id)| ScoredItem {
                item_id: id.clone(),
                score: 1.0 / (i as f64 + 1.0),
            })
            .collect(),
    }
}

proptest! {
    #[test]
    fn metrics_stay_in_unit_interval((list, rel) in list_and_relevant(), k in 1..=25usize) {
        let r = recall_at_k(&list, &rel, k);
        let n = ndcg_at_k(&list, &rel, k);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
    }

    #[test]
    fn recall_grows_with_k((list, rel) in list_and_relevant(), k in 1..=24usize) {
        prop_assert!(recall_at_k(&list, &rel, k) <= recall_at_k(&list, &rel, k + 1));
    }

    #[test]
    fn ndcg_is_one_exactly_for_ideal_prefixes((list, rel) in list_and_relevant(), k in 1..=25usize) {
        prop_assume!(!rel.is_empty());
        let want = rel.len().min(k);
        let ideal = list.len() >= want && list[..want].iter().all(|x| rel.contains(x));
        let n = ndcg_at_k(&list, &rel, k);
        prop_assert_eq!(ideal, (n - 1.0).abs() < 1e-12, "ndcg {}", n);
    }

    #[test]
    fn edit_distance_is_a_metric(a in tokens(), b in tokens(), c in tokens()) {
        let d = |x: &[u8], y: &[u8]| token_edit_distance(x, y);
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) <= a.len() + b.len());
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
        prop_assert_eq!(d(&a, &b) == 0, a == b);
    }

    #[test]
    fn tokenize_is_a_fixed_point(text in "[ A-Za-z0-9.,!?'-]{0,60}") {
        let once = tokenize(&text);
        prop_assert_eq!(tokenize(&once.join(" ")), once.clone());
        prop_assert!(once.iter().all(|t| !t.is_empty() && *t == t.to_lowercase()));
    }

    #[test]
    fn loosening_the_policy_never_rejects(
        original in words(),
        candidate in words(),
        delta in 0.05..0.5f64,
        sigma in 0.0..1.0f64,
        extra_delta in 0.0..0.5f64,
        sigma_drop in 0.0..1.0f64,
    ) {
        let e = MockEmbedder::default();
        let strict = StealthPolicy::new_unchecked(delta, sigma, 3);
        let loose = StealthPolicy::new_unchecked((delta + extra_delta).min(1.0), sigma - sigma_drop, 3);
        let a = check_stealth(&original, &candidate, &strict, &e).unwrap();
        let b = check_stealth(&original, &candidate, &loose, &e).unwrap();
        prop_assert!(!a.accepted || b.accepted);
        prop_assert_eq!(a.edit_count, b.edit_count);
        prop_assert!(a.edit_count <= tokenize(&original).len() + tokenize(&candidate).len());
    }

    #[test]
    fn mean_rank_ignores_user_order(
        lists in vec(Just(ids(30)).prop_shuffle().prop_map(|v| v[..20].to_vec()), 1..8),
        targets in btree_set(0..30usize, 1..6),
        seed in any::<u64>(),
    ) {
        let targets = TargetSet {
            goal: Goal::Promote,
            item_ids: targets.into_iter().map(|i| format!("i{i:02}")).collect(),
            seed: 0,
        };
        let mut ranked_lists: Vec<RankedList> =
            lists.iter().enumerate().map(|(u, l)| ranked(&format!("u{u}"), l)).collect();
        let before = mean_target_rank(&ranked_lists, &targets);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(ranked_lists.as_mut_slice(), &mut rng);
        let after = mean_target_rank(&ranked_lists, &targets);
        prop_assert_eq!(before.coverage, after.coverage);
        match (before.mean, after.mean) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn identity_attack_has_zero_exposure_delta(
        lists in vec(Just(ids(30)).prop_shuffle().prop_map(|v| v[..20].to_vec()), 1..8),
        targets in btree_set(0..30usize, 1..6),
        k in 1..=20usize,
    ) {
        let targets = TargetSet {
            goal: Goal::Promote,
            item_ids: targets.into_iter().map(|i| format!("i{i:02}")).collect(),
            seed: 0,
        };
        let lists: Vec<RankedList> = lists.iter().enumerate().map(|(u, l)| ranked(&format!("u{u}"), l)).collect();
        let report = exposure_delta(&lists, &lists, &targets, k).unwrap();
        prop_assert_eq!(report.total_delta, 0);
        prop_assert!(report.items.iter().all(|i| i.delta == 0 && i.before <= lists.len() as u64));
    }

    #[test]
    fn segmentation_partitions_by_popularity(counts in vec(0..500u64, 1..60), fraction in 0.01..0.99f64) {
        let items = counts.iter().enumerate().map(|(i, c)| {
            let mut item = Item::new(&format!("i{i:02}"), "T", "some words here");
            item.interaction_count = *c;
            item
        });
        let catalog = ItemCatalog::from_items(items).unwrap();
        let seg = segment_by_popularity(&catalog, fraction).unwrap();
        let head = seg.members(Segment::ShortHead);
        let tail = seg.members(Segment::LongTail);
        prop_assert_eq!(head.len() + tail.len(), catalog.len());
        prop_assert!(head.iter().all(|h| !tail.contains(h)));
        let min_head = head.iter().map(|id| catalog.get(id).unwrap().interaction_count).min();
        let max_tail = tail.iter().map(|id| catalog.get(id).unwrap().interaction_count).max();
        if let (Some(h), Some(t)) = (min_head, max_tail) {
            prop_assert!(h >= t);
        }
    }

    #[test]
    fn temporal_split_preserves_rows_and_order(
        rows in vec((0..6usize, 0..20usize, 1..=10u8, 0..1000i64), 0..80),
        fraction in 0.05..0.95f64,
    ) {
        let log = InteractionLog::new(rows.iter().map(|(u, i, r, t)| Interaction {
            user_id: format!("u{u}"),
            item_id: format!("i{i:02}"),
            rating: f64::from(*r) / 2.0,
            timestamp: *t,
        }).collect());
        let (train, test) = temporal_split(&log, fraction).unwrap();
        let key = |r: &Interaction| (r.user_id.clone(), r.item_id.clone(), r.timestamp, r.rating.to_bits());
        let mut all: Vec<_> = log.iter().map(key).collect();
        let mut split: Vec<_> = train.iter().chain(test.iter()).map(key).collect();
        all.sort();
        split.sort();
        prop_assert_eq!(all, split);
        for user in log.users() {
            let last_train = train.for_user(user).map(|r| r.timestamp).max();
            let first_test = test.for_user(user).map(|r| r.timestamp).min();
            if let (Some(a), Some(b)) = (last_train, first_test) {
                prop_assert!(a <= b);
            }
        }
    }

    #[test]
    fn retrieval_is_sorted_and_a_prefix_of_the_full_ranking(
        descs in vec(words(), 1..40),
        query in words(),
        n in 1..50usize,
    ) {
        let catalog = ItemCatalog::from_items(
            descs.iter().enumerate().map(|(i, d)| Item::new(&format!("i{i:02}"), "T", d)),
        ).unwrap();
        let e = MockEmbedder::default();
        let index = VectorIndex::build(&catalog, &e).unwrap();
        let q = e.embed_text(&query);
        let top = index.retrieve_top_n(&q, n).unwrap();
        let full = index.retrieve_top_n(&q, catalog.len()).unwrap();
        prop_assert_eq!(top.len(), n.min(catalog.len()));
        prop_assert!(top.windows(2).all(|w| w[0].score >= w[1].score));
        prop_assert_eq!(&top[..], &full[..top.len()]);
    }

    #[test]
    fn index_ignores_catalog_input_order(descs in vec(words(), 1..20), seed in any::<u64>()) {
        let items: Vec<Item> = descs.iter().enumerate().map(|(i, d)| Item::new(&format!("i{i:02}"), "T", d)).collect();
        let mut shuffled = items.clone();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let e = MockEmbedder::default();
        let a = VectorIndex::build(&ItemCatalog::from_items(items).unwrap(), &e).unwrap();
        let b = VectorIndex::build(&ItemCatalog::from_items(shuffled).unwrap(), &e).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn mock_vectors_are_unit_or_zero(text in "[ a-z.]{0,80}") {
        let v = MockEmbedder::default().embed_batch(&[text.as_str()]).unwrap().remove(0);
        let norm: f64 = v.values.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        prop_assert!(v.is_zero() || (norm - 1.0).abs() < 1e-6);
        if tokenize(&text).is_empty() {
            prop_assert!(v.is_zero());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cache_round_trips(prompt in ".{0,40}", answer in ".{0,40}", model in "[a-z0-9-]{1,12}") {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let request = json!({ "prompt": prompt });
        let key = ResponseCache::key("rewrite", &model, &request);
        let entry = CacheEntry {
            key: key.clone(),
            endpoint: "rewrite".into(),
            model_name: model.clone(),
            request,
            body: json!({ "text": answer }),
            created_at: 1,
        };
        cache.store(&entry).unwrap();
        prop_assert_eq!(cache.load(&key).unwrap(), Some(entry));
        prop_assert_eq!(cache.len(), 1);
    }
}
