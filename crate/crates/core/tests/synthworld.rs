use std::collections::BTreeSet;

use relgen::numerics::{cosine, rng_from_seed};
use relgen::relvocab::Provenance;
use relgen::synthworld::{
    build_training_example, gen_dataset, mock_encode, read_dataset, write_dataset, ConceptKind,
    ConceptSpace, MockInput, SceneInstance, SceneObject, WorldConfig,
};

fn setup() -> (WorldConfig, ConceptSpace) {
    let w = WorldConfig::desk(1);
    let sp = ConceptSpace::new(&w, 32, 9).unwrap();
    (w, sp)
}

#[test]
fn dataset_bytes_are_reproducible_and_round_trip() {
    let (w, _) = setup();
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_dataset(&mut a, &gen_dataset(64, &w, 7).unwrap()).unwrap();
    write_dataset(&mut b, &gen_dataset(64, &w, 7).unwrap()).unwrap();
    assert_eq!(a, b);
    let back = read_dataset(a.as_slice()).unwrap();
    let mut c = Vec::new();
    write_dataset(&mut c, &back).unwrap();
    assert_eq!(a, c);
    assert_eq!(back, gen_dataset(64, &w, 7).unwrap());
}

#[test]
fn predicate_census_over_512_scenes() {
    let (w, _) = setup();
    let scenes = gen_dataset(512, &w, 3).unwrap();
    let seen: BTreeSet<&str> = scenes
        .iter()
        .flat_map(|s| s.triplets.iter().map(|(_, p, _)| p.as_str()))
        .collect();
    println!("distinct predicates: {}", seen.len());
    assert!(seen.len() >= 30);
}

#[test]
fn visual_noise_concentrates() {
    let (_, sp) = setup();
    let mut rng = rng_from_seed(1);
    let clean = mock_encode(&MockInput::ObjectVisual("cup"), &sp, 0.0, &mut rng).unwrap();
    let n = 1000;
    let mean: f64 = (0..n)
        .map(|_| {
            let v = mock_encode(&MockInput::ObjectVisual("cup"), &sp, 0.1, &mut rng).unwrap();
            cosine(&v, &clean)
        })
        .sum::<f64>()
        / n as f64;
    assert!(mean >= 0.95, "{mean}");
}

#[test]
fn union_visual_prefers_its_own_predicates() {
    let (w, sp) = setup();
    let scenes = gen_dataset(300, &w, 11).unwrap();
    let mut rng = rng_from_seed(0);
    for s in &scenes {
        for pair in s.pairs() {
            let preds = s.pair_predicates(pair);
            let (sc, oc) = (&s.object(pair.0).unwrap().cat, &s.object(pair.1).unwrap().cat);
            let u = mock_encode(&MockInput::UnionVisual(sc, oc, &preds), &sp, 0.0, &mut rng).unwrap();
            let score = |p: &str| cosine(&u, sp.vector(ConceptKind::Predicate, p).unwrap());
            let worst_gt = preds.iter().map(|p| score(p)).fold(f64::INFINITY, f64::min);
            for p in &w.predicates {
                if !preds.contains(p) {
                    assert!(score(p) < worst_gt, "scene {} pair {pair:?} {p}", s.id);
                }
            }
        }
    }
}

#[test]
fn noiseless_pseudo_labels_are_compatible() {
    let (w, sp) = setup();
    let vocab = sp.vocabulary(&w, 0.1).unwrap();
    let scenes = gen_dataset(256, &w, 4).unwrap();
    let mut rng = rng_from_seed(0);
    let mut pseudo = 0;
    for s in &scenes {
        let b = build_training_example(s, &vocab, 8, &sp, 0.0, 1, &mut rng).unwrap();
        b.example.sequence.validate(vocab.len(), 8).unwrap();
        for (i, p) in b.example.sequence.provenance.iter().enumerate() {
            let (so, oo) = b.pairs[b.slot_pair[i]];
            let phrase = vocab.phrase(b.example.sequence.tokens[i]);
            let (sc, oc) = (&s.object(so).unwrap().cat, &s.object(oo).unwrap().cat);
            assert!(w.is_compatible(sc, phrase, oc));
            assert_eq!(b.example.matching.m[i][b.slot_pair[i]], 1);
            if *p == Provenance::Pseudo {
                pseudo += 1;
            }
        }
    }
    assert!(pseudo > 0);
}

#[test]
fn pairs_beyond_l_are_truncated() {
    let (w, sp) = setup();
    let vocab = sp.vocabulary(&w, 0.1).unwrap();
    let objects: Vec<SceneObject> = (0..5)
        .map(|i| SceneObject {
            id: i,
            cat: "person".into(),
            bbox: [0.1 * i as f64, 0.0, 0.1 * i as f64 + 0.1, 0.5],
        })
        .collect();
    let p = &w.compat_row("person", "person").unwrap().predicates[0].0;
    let triplets = (0..5).flat_map(|s| (0..5).filter(move |&o| o != s).map(move |o| (s, o)))
        .take(6)
        .map(|(s, o)| (s, p.clone(), o))
        .collect();
    let scene = SceneInstance { id: 0, objects, triplets };
    let b = build_training_example(&scene, &vocab, 4, &sp, 0.0, 1, &mut rng_from_seed(0)).unwrap();
    assert_eq!(b.example.cond.n, 4);
    assert_eq!(b.pairs.len(), 4);
    assert_eq!(b.example.len(), 4);
}
