use std::collections::BTreeSet;

use proptest::prelude::*;
use trajcur::branch::select_index;
use trajcur::curate::{build_pipeline_datasets, cumulative_union};
use trajcur::model::{parse_action, parse_agent_reply, render_reply, Provenance, ScrollDirection, Terminal};
use trajcur::policy::clip_context;
use trajcur::reflect::{find_loop, splice_to_fixpoint_by};
use trajcur::{Action, CurationDataset, Observation, QueryRecord, Step, Thought, Trajectory};

const WORD: &str = "[A-Za-z0-9$,./-]{1,8}";

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(WORD, 1..4).prop_map(|w| w.join(" "))
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        (1u32..500).prop_map(Action::click),
        (1u32..500, text(), any::<bool>()).prop_map(|(id, c, e)| Action::type_text(id, c, e)),
        Just(Action::Scroll(ScrollDirection::Up)),
        Just(Action::Scroll(ScrollDirection::Down)),
        Just(Action::GoBack),
        Just(Action::Restart),
        text().prop_map(Action::stop),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn action_text_round_trips(a in action()) {
        prop_assert_eq!(parse_action(&a.render()).unwrap(), a.clone());
        prop_assert_eq!(parse_action(&format!("```{a}```")).unwrap(), a);
    }

    #[test]
    fn reply_round_trips(a in action(), thought in text()) {
        let t = Thought::new(thought);
        let (t2, a2) = parse_agent_reply(&render_reply(&t, &a)).unwrap();
        prop_assert_eq!(t2, t);
        prop_assert_eq!(a2, a);
    }

    #[test]
    fn reply_with_think_block_round_trips(a in action(), thought in text(), block in text()) {
        let t = Thought::with_think_block(thought, block);
        let (t2, a2) = parse_agent_reply(&render_reply(&t, &a)).unwrap();
        prop_assert_eq!(t2, t);
        prop_assert_eq!(a2, a);
    }
}

fn step(i: usize) -> Step {
    Step::new(
        Observation::new(format!("[1] RootWebArea 'page {i}'")),
        Thought::new(format!("thought {i}")),
        Action::click(i as u32 + 1),
        Provenance::SelfPlay,
        1,
    )
}

#[test]
fn clipping_keeps_exactly_the_recent_window() {
    for len in 0..20usize {
        let history: Vec<Step> = (0..len).map(step).collect();
        let current = Observation::new("[1] RootWebArea 'now'");
        for k in 1..8usize {
            let ctx = clip_context("q", &history, &current, k);
            let t = len + 1;
            assert_eq!(ctx.t(), t);
            let expected: Vec<usize> = (1..=len).filter(|&n| n + k > t).collect();
            assert_eq!(ctx.retained_steps(), expected, "T={len} k={k}");
            assert_eq!(ctx.retained_steps().len(), len.min(k - 1));
            // thoughts and actions are never dropped
            assert_eq!(ctx.entries.len(), len);
            let again = ctx.clone().clip(k);
            assert_eq!(again.retained_steps(), expected);
            assert_eq!(again.render_user(), ctx.render_user());
        }
    }
}

fn traj(id: &str, len: usize) -> Trajectory {
    let mut t = Trajectory::new(&QueryRecord::new(id, format!("task {id}"), "site"));
    t.steps = (0..len).map(step).collect();
    t.terminal = Terminal::Stopped;
    t
}

fn dataset(name: &str) -> impl Strategy<Value = CurationDataset> {
    let name = name.to_string();
    prop::collection::btree_map(0u8..24, 1usize..5, 0..12).prop_map(move |m| {
        CurationDataset::from_trajectories(
            name.clone(),
            m.into_iter().map(|(id, len)| traj(&format!("q{id}"), len)),
        )
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn union_keeps_base_and_adds_only_new_ids(a in dataset("a"), b in dataset("b")) {
        let u = cumulative_union(&a, &b, "u");
        let expected: BTreeSet<String> = a.query_set().union(&b.query_set()).cloned().collect();
        prop_assert_eq!(u.query_set(), expected);
        for t in a.trajectories() {
            prop_assert_eq!(u.get(&t.query_id), Some(t));
        }
        for t in b.trajectories().filter(|t| !a.contains(&t.query_id)) {
            prop_assert_eq!(u.get(&t.query_id), Some(t));
        }
        prop_assert_eq!(u.len(), a.len() + b.query_set().difference(&a.query_set()).count());
        // idempotent, and absorbing its own inputs
        prop_assert_eq!(cumulative_union(&u, &b, "u"), u.clone());
        prop_assert_eq!(cumulative_union(&u, &a, "u"), u.clone());
        prop_assert_eq!(cumulative_union(&a, &a, "a"), a);
    }

    #[test]
    fn stacked_datasets_are_nested(
        rej in dataset("rej"), l in dataset("l"), b in dataset("b"), r in dataset("r")
    ) {
        let s = build_pipeline_datasets(&rej, &l, &b, &r);
        prop_assert!(rej.query_set().is_subset(&s.reflection.query_set()));
        prop_assert!(s.reflection.query_set().is_subset(&s.branching.query_set()));
        prop_assert!(s.branching.query_set().is_subset(&s.rollback.query_set()));
        let all: BTreeSet<String> = [&rej, &l, &b, &r].iter().flat_map(|d| d.query_set()).collect();
        prop_assert_eq!(s.rollback.query_set(), all);
        // an id keeps the trajectory of the earliest dataset holding it
        for id in s.rollback.query_set() {
            let first = [&rej, &l, &b, &r].into_iter().find(|d| d.contains(&id)).unwrap();
            prop_assert_eq!(s.rollback.get(&id), first.get(&id));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn selection_is_first_maximum(scores in prop::collection::vec(0u8..=10, 1..10)) {
        let xs: Vec<f64> = scores.iter().map(|&s| f64::from(s) / 10.0).collect();
        let i = select_index(&xs).unwrap();
        let max = xs.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(xs[i], max);
        prop_assert!(xs[..i].iter().all(|&x| x < max));
    }

    #[test]
    fn selection_ignores_monotone_rescaling(
        scores in prop::collection::vec(0u8..=10, 1..10),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let xs: Vec<f64> = scores.iter().map(|&s| f64::from(s) / 10.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * scale + shift).collect();
        let ints: Vec<u8> = scores.clone();
        prop_assert_eq!(select_index(&xs), select_index(&ys));
        prop_assert_eq!(select_index(&xs), select_index(&ints));
    }

    #[test]
    fn selection_ignores_dominated_additions(
        scores in prop::collection::vec(1u8..=10, 1..8),
        extra in prop::collection::vec(0u8..=10, 0..4),
    ) {
        let before = select_index(&scores).unwrap();
        let max = scores[before];
        let mut longer = scores.clone();
        longer.extend(extra.into_iter().map(|e| e.min(max - 1)));
        prop_assert_eq!(select_index(&longer), Some(before));
    }
}

fn brute_force_loop(keys: &[u8]) -> Option<(usize, usize)> {
    let i = (0..keys.len()).find(|&i| keys[i + 1..].contains(&keys[i]))?;
    let j = (i + 1..keys.len()).rev().find(|&j| keys[j] == keys[i])?;
    Some((i, j))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn loop_detection_matches_brute_force(keys in prop::collection::vec(0u8..6, 0..16)) {
        prop_assert_eq!(find_loop(&keys), brute_force_loop(&keys));
    }

    #[test]
    fn splicing_reaches_a_repeat_free_fixpoint(keys in prop::collection::vec(0u8..6, 1..16)) {
        let items: Vec<(usize, u8)> = keys.iter().copied().enumerate().collect();
        let (kept, applied) = splice_to_fixpoint_by(items.clone(), |&(_, k)| k);
        let kept_keys: Vec<u8> = kept.iter().map(|&(_, k)| k).collect();
        let distinct: BTreeSet<u8> = kept_keys.iter().copied().collect();
        prop_assert_eq!(distinct.len(), kept_keys.len());
        // every splice shortens by j - i
        let removed: usize = applied.iter().map(|&(i, j)| j - i).sum();
        prop_assert_eq!(kept.len() + removed, keys.len());
        // survivors keep their relative order and the final item survives
        prop_assert!(kept.windows(2).all(|w| w[0].0 < w[1].0));
        prop_assert_eq!(kept.last().unwrap().0, keys.len() - 1);
        // the first key always survives, as the spliced loop's exit point
        prop_assert_eq!(kept[0].1, keys[0]);
        // applying again changes nothing
        let (again, more) = splice_to_fixpoint_by(kept.clone(), |&(_, k)| k);
        prop_assert_eq!(again, kept);
        prop_assert!(more.is_empty());
    }
}
