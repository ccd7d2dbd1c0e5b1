use std::time::Duration;

use geoflow_core::bench::{build_report, within_tolerance, BenchMode, StageResult};
use geoflow_core::model::Stage;
use geoflow_core::planner::{plan_similarity, CandidatePlan, PlanStep};
use geoflow_core::retrieval::{CatalogEntry, HashEmbedder, Tier, VectorIndex};
use proptest::prelude::*;

fn plan_strategy(id: &'static str) -> impl Strategy<Value = CandidatePlan> {
    prop::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,4}", 0..5).prop_map(move |descs| CandidatePlan {
        plan_id: id.into(),
        steps: descs
            .into_iter()
            .enumerate()
            .map(|(i, d)| PlanStep {
                step_id: format!("s{i}"),
                description: d,
                required_inputs: vec![],
                produced_outputs: vec![],
                stage: Stage::FeatureExtraction,
            })
            .collect(),
        source_round: 0,
    })
}

proptest! {
    #[test]
    fn similarity_is_symmetric_and_bounded(a in plan_strategy("p1"), b in plan_strategy("p2")) {
        let ab = plan_similarity(&a, &b, &HashEmbedder);
        let ba = plan_similarity(&b, &a, &HashEmbedder);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        if !a.steps.is_empty() {
            prop_assert!((plan_similarity(&a, &a, &HashEmbedder) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn top_k_is_sorted_and_bounded(
        texts in prop::collection::vec("[a-d]{1,3}( [a-d]{1,3}){0,3}", 1..40),
        query in "[a-d]{1,3}( [a-d]{1,3}){0,2}",
        k in 1usize..10,
    ) {
        let mut index = VectorIndex::default();
        let entries = texts.iter().enumerate().map(|(i, t)| CatalogEntry::new(format!("e{i:03}"), Tier::FunctionTool, t.clone(), "")).collect();
        index.add(entries).unwrap();
        let got = index.query_top_k(&query, k, None).unwrap();
        prop_assert_eq!(got.len(), k.min(texts.len()));
        for w in got.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].entry_id < w[1].entry_id));
        }
    }

    #[test]
    fn report_ignores_result_order(
        outcomes in prop::collection::vec((0usize..3, any::<bool>(), 0u32..5, 0u64..1000), 1..30),
        seed in any::<u64>(),
    ) {
        let results: Vec<StageResult> = outcomes
            .iter()
            .enumerate()
            .map(|(i, (s, ok, d, ms))| {
                let reasons = if *ok { vec![] } else { vec!["x".to_string()] };
                let mut r = StageResult::new(&format!("c{i}"), Stage::ALL[*s], reasons);
                r.debug_rounds = *d;
                r.running_time = Duration::from_millis(*ms);
                r
            })
            .collect();
        let mut shuffled = results.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed as usize).wrapping_add(i * 7) % n);
        }
        let a = build_report(BenchMode::StageWise, n, results);
        let b = build_report(BenchMode::StageWise, n, shuffled);
        prop_assert_eq!(serde_json::to_value(&a).unwrap(), serde_json::to_value(&b).unwrap());
        for m in a.per_stage.values() {
            prop_assert!(m.passed <= m.total);
            prop_assert!((m.accuracy - m.passed as f64 / m.total as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn tolerance_is_monotone(e in -1e6f64..1e6, d in 0f64..10.0, rel in 0f64..0.1) {
        let a = e + d;
        if within_tolerance(a, e, rel, 1e-6) {
            prop_assert!(within_tolerance(a, e, rel * 2.0, 1e-6));
            prop_assert!(within_tolerance(e + d / 2.0, e, rel, 1e-6));
        }
    }
}
