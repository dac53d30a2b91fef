use proptest::prelude::*;

use stepsearch::answer::{normalize, AnswerEquality, NormalizedMatch};
use stepsearch::baselines::majority;
use stepsearch::providers::synthetic::{generate_questions, SyntheticChainTask};
use stepsearch::records::{read_jsonl, write_jsonl, ValueRecord};
use stepsearch::tree::{ucb_score, NodeId, SearchTree};
use stepsearch::value::{
    gold_trace_schedule, quality_update, step, weighted_reward, QualityValue, ReasoningDistance, StepScore,
};

fn fold_inputs() -> impl Strategy<Value = Vec<(u32, f64)>> {
    prop::collection::vec((0u32..100, prop_oneof![Just(0.0), Just(1.0), 0.0..=1.0f64]), 1..64)
}

/// Tree built from `(parent pick, child count, value, visited child pick)` operations.
fn build_tree(ops: &[(usize, usize, f64, usize)]) -> SearchTree {
    let mut t = SearchTree::new("q");
    for (i, &(pick, k, v, visit)) in ops.iter().enumerate() {
        let leaves: Vec<NodeId> = t.nodes().filter(|n| n.is_leaf()).map(|n| n.id).collect();
        let leaf = leaves[pick % leaves.len()];
        let steps = (0..k).map(|j| format!("step {i}.{j}")).collect();
        let values = (0..k).map(|j| QualityValue::clipped(v + j as f64 * 0.1)).collect();
        let ids = t.add_children(leaf, steps, values).unwrap();
        let child = ids[visit % ids.len()];
        t.get_mut(child).unwrap().visits += 1;
        t.backpropagate(child).unwrap();
    }
    t
}

fn tree_ops() -> impl Strategy<Value = Vec<(usize, usize, f64, usize)>> {
    prop::collection::vec((0usize..1000, 1usize..4, 0.0..=1.0f64, 0usize..4), 1..40)
}

proptest! {
    #[test]
    fn fold_stays_bounded(inputs in fold_inputs()) {
        let mut v = QualityValue::ZERO;
        for (m, r) in inputs {
            let w = weighted_reward(v, ReasoningDistance::new(m), StepScore::new(r).unwrap());
            prop_assert!(w.get() <= 1.0 - v.get());
            v = quality_update(v, w).unwrap();
            prop_assert!((0.0..=1.0).contains(&v.get()));
        }
    }

    #[test]
    fn correct_steps_never_lower_value(inputs in fold_inputs()) {
        let mut v = QualityValue::ZERO;
        for (m, _) in inputs {
            let (w, next) = step(v, ReasoningDistance::new(m), StepScore::CORRECT);
            prop_assert!(w.get() >= 0.0);
            prop_assert!(next.get() >= v.get());
            v = next;
        }
    }

    #[test]
    fn tree_json_round_trips(ops in tree_ops()) {
        let t = build_tree(&ops);
        let back = SearchTree::from_json(&t.to_json()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn internal_values_are_visit_weighted_means(ops in tree_ops()) {
        let t = build_tree(&ops);
        for n in t.nodes().filter(|n| !n.is_leaf()) {
            let visited: Vec<_> = n.children.iter().map(|c| t.get(*c).unwrap()).filter(|c| c.visits > 0).collect();
            prop_assert!(!visited.is_empty());
            let den: f64 = visited.iter().map(|c| f64::from(c.visits)).sum();
            let num: f64 = visited.iter().map(|c| f64::from(c.visits) * c.value).sum();
            prop_assert!((num / den - n.value).abs() < 1e-9);
        }
    }

    #[test]
    fn ucb_grows_with_parent_visits(v in 0.0..=1.0f64, n in 1u32..1000, p in 2u32..1000, eps in 0.0..2.0f64) {
        let a = ucb_score(v, n, p, eps);
        let b = ucb_score(v, n, p + 1, eps);
        prop_assert!(a >= v);
        prop_assert!(b >= a);
        prop_assert!(ucb_score(v, 0, p, eps).is_infinite());
    }

    #[test]
    fn optimal_traces_follow_the_gold_schedule(seed in 0u64..500) {
        let q = &generate_questions(1, 6, seed)[0];
        let task = SyntheticChainTask::from_question(q).unwrap();
        let solution = task.optimal_solution().unwrap();
        prop_assert_eq!(solution.len() as u32, task.max_steps);
        let schedule = gold_trace_schedule(solution.len()).unwrap();
        for k in 1..=solution.len() {
            let v = task.oracle_value(&solution[..k]).unwrap();
            prop_assert!((v.get() - schedule[k - 1].1.get()).abs() < 1e-12);
        }
    }

    #[test]
    fn value_records_round_trip(rows in prop::collection::vec(
        ("[a-z0-9-]{1,8}", ".{0,30}", prop::collection::vec(".{0,12}", 0..5), 0.0..=1.0f64, 1u32..5),
        0..20,
    )) {
        let records: Vec<ValueRecord> = rows
            .into_iter()
            .map(|(id, q, steps, v, it)| ValueRecord {
                question_id: id,
                question: q,
                partial_steps: steps,
                value: v,
                iteration: it,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        prop_assert_eq!(write_jsonl(&path, &records).unwrap(), records.len());
        let back: Vec<ValueRecord> = read_jsonl(&path).unwrap();
        prop_assert_eq!(back, records);
    }

    #[test]
    fn normalization_is_idempotent(s in ".{0,40}") {
        let once = normalize(&s);
        prop_assert_eq!(normalize(&once), once.clone());
        prop_assert!(NormalizedMatch::exact().equivalent(&s, &once));
    }

    #[test]
    fn majority_picks_a_most_common_answer(answers in prop::collection::vec("[abc]", 1..15)) {
        let eq = NormalizedMatch::exact();
        let winner = majority(&answers, &eq).unwrap();
        let count = |x: &str| answers.iter().filter(|a| a.as_str() == x).count();
        let best = answers.iter().map(|a| count(a)).max().unwrap();
        prop_assert_eq!(count(&winner), best);
    }
}
