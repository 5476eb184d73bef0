use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn set(ids: &[usize]) -> IngredientSet {
    IngredientSet::new(ids.iter().copied())
}

fn random_set(rng: &mut ChaCha8Rng, n: usize) -> IngredientSet {
    let p = rng.gen_range(0.0..0.5);
    IngredientSet::new((0..n).filter(|_| rng.gen_bool(p)))
}

#[test]
fn update_examples() {
    let mut acc = ConfusionAccumulator::new(6);
    acc.update(&set(&[0, 1, 2]), &set(&[1, 2, 3])).unwrap();
    assert_eq!(acc.totals(), (2, 1, 1));
    let (iou, f1) = acc.global_iou_f1().unwrap();
    assert_eq!((iou, f1), (0.5, 2.0 / 3.0));

    let mut acc = ConfusionAccumulator::new(6);
    acc.update(&set(&[]), &set(&[4, 5])).unwrap();
    assert_eq!(acc.totals(), (0, 0, 2));
    assert_eq!(acc.global_iou_f1().unwrap(), (0.0, 0.0));

    let mut acc = ConfusionAccumulator::new(6);
    acc.update(&set(&[3, 4]), &set(&[3, 4])).unwrap();
    assert_eq!(acc.totals(), (2, 0, 0));
    assert_eq!(acc.global_iou_f1().unwrap(), (1.0, 1.0));

    assert!(ConfusionAccumulator::new(3).global_iou_f1().is_err());
    assert!(ConfusionAccumulator::new(3).update(&set(&[3]), &set(&[])).is_err());
}

#[test]
fn cardinality_examples() {
    let s = cardinality_error(&[(3, 4), (5, 4)]).unwrap();
    assert_eq!((s.mean, s.std, s.mean_pred_size), (1.0, 0.0, 4.0));
    assert_eq!(cardinality_error(&[(2, 2), (7, 7)]).unwrap().mean, 0.0);
    assert_eq!(cardinality_error(&[(1, 6)]).unwrap().std, 0.0);
    let s = cardinality_error(&[(0, 2), (4, 4)]).unwrap();
    assert_eq!((s.mean, s.std), (1.0, 1.0));
    assert!(cardinality_error(&[]).is_err());
}

#[test]
fn precision_at_k_examples() {
    assert_eq!(precision_at_k(&[4, 1, 2], &set(&[4]), 1).unwrap(), 1.0);
    assert_eq!(precision_at_k(&[4, 1, 2], &set(&[]), 2).unwrap(), 0.0);
    assert_eq!(precision_at_k(&[4, 1, 2, 0], &set(&[1, 4, 0]), 3).unwrap(), 2.0 / 3.0);
    assert!(precision_at_k(&[1], &set(&[1]), 0).is_err());
}

#[test]
fn per_ingredient_f1_examples() {
    let mut acc = ConfusionAccumulator::new(4);
    acc.update(&set(&[0, 1]), &set(&[0, 2])).unwrap();
    acc.update(&set(&[0]), &set(&[0])).unwrap();
    let f = acc.per_ingredient_f1();
    assert_eq!(f[0], (0, 1.0));
    assert!(f.iter().all(|&(id, _)| id != 3));
    assert_eq!(f.len(), 3);
}

/// Counts computed by enumerating every id of every sample.
fn brute_counts(pairs: &[(IngredientSet, IngredientSet)], n: usize) -> Vec<(u64, u64, u64)> {
    (0..n)
        .map(|id| {
            let mut c = (0, 0, 0);
            for (p, g) in pairs {
                match (p.ids().contains(&id), g.ids().contains(&id)) {
                    (true, true) => c.0 += 1,
                    (true, false) => c.1 += 1,
                    (false, true) => c.2 += 1,
                    _ => {}
                }
            }
            c
        })
        .collect()
}

#[test]
fn accumulator_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.gen_range(1..=30);
        let pairs: Vec<_> = (0..rng.gen_range(1..8))
            .map(|_| (random_set(&mut rng, n), random_set(&mut rng, n)))
            .collect();
        let mut acc = ConfusionAccumulator::new(n);
        for (p, g) in &pairs {
            acc.update(p, g).unwrap();
        }
        let brute = brute_counts(&pairs, n);
        let (tp, fp, fn_) = brute.iter().fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
        assert_eq!(acc.totals(), (tp, fp, fn_));
        if tp + fp + fn_ > 0 {
            let (iou, f1) = acc.global_iou_f1().unwrap();
            assert_eq!(iou, tp as f64 / (tp + fp + fn_) as f64);
            assert_eq!(f1, (2 * tp) as f64 / (2 * tp + fp + fn_) as f64);
            assert!(f1 >= iou);
        }
        let mut expected: Vec<(usize, f64)> = brute
            .iter()
            .enumerate()
            .filter(|(_, c)| c.0 + c.1 + c.2 > 0)
            .map(|(i, c)| (i, (2 * c.0) as f64 / (2 * c.0 + c.1 + c.2) as f64))
            .collect();
        expected.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(acc.per_ingredient_f1(), expected);
    }
}

#[test]
fn accumulation_order_and_sharding_do_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pairs: Vec<_> = (0..40).map(|_| (random_set(&mut rng, 12), random_set(&mut rng, 12))).collect();
    let mut forward = ConfusionAccumulator::new(12);
    let mut backward = ConfusionAccumulator::new(12);
    let (mut a, mut b) = (ConfusionAccumulator::new(12), ConfusionAccumulator::new(12));
    for (i, (p, g)) in pairs.iter().enumerate() {
        forward.update(p, g).unwrap();
        if i % 3 == 0 { a.update(p, g).unwrap() } else { b.update(p, g).unwrap() }
    }
    for (p, g) in pairs.iter().rev() {
        backward.update(p, g).unwrap();
    }
    b.merge(&a).unwrap();
    assert_eq!(forward, backward);
    assert_eq!(forward, b);
}

fn kitchen() -> IngredientVocabulary {
    let counts = [("flour", 30), ("salt", 20), ("sugar", 15), ("olive oil", 12), ("tomato", 11)];
    IngredientVocabulary::from_counts(counts.iter().map(|(n, c)| (n.to_string(), *c)).collect(), vec![]).unwrap()
}

#[test]
fn mention_examples() {
    let v = kitchen();
    let id = |n: &str| v.id(n).unwrap();
    let gt = set(&[id("flour"), id("salt"), id("sugar")]);
    let s = instruction_ingredient_pr(&["mix the flour and salt"], &gt, &v);
    assert_eq!((s.recall, s.precision), (2.0 / 3.0, 1.0));

    let s = instruction_ingredient_pr(&["stir well"], &gt, &v);
    assert_eq!((s.recall, s.precision, s.precision_defined), (0.0, 0.0, false));

    let gt = set(&[id("olive oil"), id("tomato")]);
    let s = instruction_ingredient_pr(&["Heat the Olive Oil.", "add tomatoes"], &gt, &v);
    assert_eq!((s.recall, s.precision), (1.0, 1.0));

    let s = instruction_ingredient_pr(&["add sugar"], &set(&[]), &v);
    assert_eq!((s.recall, s.recall_defined, s.precision), (0.0, false, 0.0));
}

const WORDS: [&str; 9] = ["flour", "salt", "sugar", "olive", "oil", "tomatoes", "and", "the", "."];

#[test]
fn mentions_match_brute_force() {
    let v = kitchen();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        let segs: Vec<String> = (0..rng.gen_range(1..3))
            .map(|_| (0..rng.gen_range(0..6)).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" "))
            .collect();
        let gt = random_set(&mut rng, v.len());
        // For every name, try every segment window of the name's length.
        let mut mentioned = Vec::new();
        for id in 0..v.len() {
            let len = v.name(id).split(' ').count();
            let hit = segs.iter().any(|s| {
                let w = split_words(s);
                w.len() >= len && (0..=w.len() - len).any(|i| normalize_name(&w[i..i + len].join(" ")).ok().as_deref() == Some(v.name(id)))
            });
            if hit {
                mentioned.push(id);
            }
        }
        let hit = mentioned.iter().filter(|&&id| gt.contains(id)).count() as f64;
        let s = instruction_ingredient_pr(&segs, &gt, &v);
        let recall = if gt.is_empty() { 0.0 } else { hit / gt.len() as f64 };
        let precision = if mentioned.is_empty() { 0.0 } else { hit / mentioned.len() as f64 };
        assert_eq!((s.recall, s.precision), (recall, precision), "{segs:?}");
    }
}

#[test]
fn report_serializes_with_expected_keys() {
    let mut r = EvaluationReport {
        f1: Some(0.5),
        ..Default::default()
    };
    r.p_at_k.insert(5, 0.4);
    let json = serde_json::to_value(&r).unwrap();
    for key in ["iou", "f1", "card_error_mean", "card_error_std", "mean_pred_size", "p_at_k", "instr_recall", "instr_precision", "perplexity"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}
