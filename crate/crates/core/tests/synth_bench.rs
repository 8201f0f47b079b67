//! The synthetic world and benchmark against brute-force oracles.

use std::collections::{BTreeSet, HashMap, HashSet};

use lincir_core::experiment::world_vocabulary;
use lincir_core::retrieval::{map_at_k, recall_at_k, RankedResult, Truths};
use lincir_core::synth::{
    build_cir_benchmark, caption, render, validate_records, BenchmarkConfig, Mutation, Scene, CAPTION_TEMPLATES,
};
use lincir_core::text::{extract_keyword_spans, tag_pos, tokenize, MaskPolicy, PosLexicon};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_scene_renders() {
    let scenes = Scene::all();
    assert_eq!(scenes.len(), 8 * 6 * 2 * 3);
    let mut distinct = HashSet::new();
    for s in &scenes {
        let img = render(s, 24);
        assert_eq!(img.shape(), [24, 24, 3]);
        assert!(img.all_finite());
        distinct.insert(img.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    assert_eq!(distinct.len(), scenes.len());
}

#[test]
fn every_caption_has_two_keyword_spans() {
    let vocab = world_vocabulary();
    let lex = PosLexicon::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in Scene::all() {
        for _ in 0..CAPTION_TEMPLATES.len() {
            let text = caption(&s, CAPTION_TEMPLATES, &mut rng);
            let seq = tokenize(&text, &vocab, 32);
            let tags = tag_pos(&seq, &lex);
            let masked = extract_keyword_spans(&seq, &tags, MaskPolicy::AllKeywords, &mut rng).unwrap();
            assert!(masked.keyword_spans.len() >= 2, "{text}");
        }
    }
}

#[test]
fn caption_choice_is_fixed_by_seed() {
    let s = Scene::from_index(17);
    let pick = |seed| caption(&s, CAPTION_TEMPLATES, &mut ChaCha8Rng::seed_from_u64(seed));
    assert_eq!(pick(3), pick(3));
}

/// Independent matcher: every gallery scene that agrees with the edited
/// reference on object, color and background.
fn brute_force_targets(reference: &Scene, condition: &str, gallery: &[Scene]) -> BTreeSet<String> {
    let m = parse_condition(reference, condition);
    let want = m.apply(reference);
    gallery
        .iter()
        .filter(|g| g.object == want.object && g.color == want.color && g.background == want.background)
        .map(Scene::id)
        .collect()
}

fn parse_condition(reference: &Scene, condition: &str) -> Mutation {
    let matches: Vec<Mutation> = Mutation::all_for(reference)
        .into_iter()
        .filter(|m| m.condition(reference) == condition)
        .collect();
    assert_eq!(matches.len(), 1, "condition {condition:?} is ambiguous");
    matches[0]
}

#[test]
fn ground_truth_matches_brute_force() {
    for seed in 0..3 {
        let bench = build_cir_benchmark(&BenchmarkConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        let gallery: Vec<Scene> = bench.gallery.iter().map(|g| g.scene).collect();
        validate_records(&bench.dev, &bench.gallery).unwrap();
        validate_records(&bench.test, &bench.gallery).unwrap();
        for r in bench.dev.iter().chain(&bench.test) {
            let reference = Scene::parse_id(&r.reference_id).unwrap();
            let got: BTreeSet<String> = r.targets.iter().cloned().collect();
            assert_eq!(got.len(), 2, "{}", r.query_id);
            assert!(!got.contains(&r.reference_id));
            assert_eq!(got, brute_force_targets(&reference, &r.condition, &gallery));
        }
        let dev: HashSet<(&str, &str)> = bench
            .dev
            .iter()
            .map(|r| (r.reference_id.as_str(), r.condition.as_str()))
            .collect();
        assert!(bench
            .test
            .iter()
            .all(|r| !dev.contains(&(r.reference_id.as_str(), r.condition.as_str()))));
        let train: HashSet<Scene> = bench.train_scenes.iter().copied().collect();
        assert!(bench
            .dev
            .iter()
            .chain(&bench.test)
            .all(|r| !train.contains(&Scene::parse_id(&r.reference_id).unwrap())));
    }
}

/// Ranks gallery scenes by the number of constrained attributes shared with
/// the edited reference; an upper bound for any retriever on this benchmark.
#[test]
fn oracle_retriever_is_perfect() {
    let bench = build_cir_benchmark(&BenchmarkConfig::default()).unwrap();
    let mut results = Vec::new();
    let mut truths: Truths = HashMap::new();
    for r in &bench.test {
        let reference = Scene::parse_id(&r.reference_id).unwrap();
        let want = parse_condition(&reference, &r.condition).apply(&reference);
        let mut items: Vec<(String, f64)> = bench
            .gallery
            .iter()
            .filter(|g| g.item_id != r.reference_id)
            .map(|g| {
                let s = g.scene;
                let score = [
                    s.object == want.object,
                    s.color == want.color,
                    s.background == want.background,
                ]
                .iter()
                .filter(|b| **b)
                .count();
                (g.item_id.clone(), score as f64)
            })
            .collect();
        items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        results.push(RankedResult {
            query_id: r.query_id.clone(),
            items,
        });
        truths.insert(r.query_id.clone(), r.targets.iter().cloned().collect());
    }
    assert_eq!(recall_at_k(&results, &truths, 1).unwrap(), 1.0);
    assert_eq!(map_at_k(&results, &truths, 5).unwrap(), 1.0);
}
