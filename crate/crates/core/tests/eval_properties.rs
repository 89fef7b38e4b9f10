use firststage::eval::{
    compare_reports, evaluate_run, ndcg_at, permutation_test, EvalConfig, Judgments, Metric, Qrels,
    RunFile,
};
use proptest::prelude::*;

type Case = (Vec<Vec<(u8, f64)>>, Vec<Vec<(u8, u32)>>);

fn run_and_qrels() -> impl Strategy<Value = Case> {
    let ranking = prop::collection::vec((0u8..30, -5.0f64..5.0), 0..25);
    let judged = prop::collection::vec((0u8..30, 0u32..4), 0..10);
    (1usize..6).prop_flat_map(move |n| {
        (
            prop::collection::vec(ranking.clone(), n),
            prop::collection::vec(judged.clone(), n),
        )
    })
}

fn build(runs: &[Vec<(u8, f64)>], judged: &[Vec<(u8, u32)>]) -> (RunFile, Qrels) {
    let mut run = RunFile::new("p");
    let mut qrels = Qrels::default();
    for (q, (r, j)) in runs.iter().zip(judged).enumerate() {
        let qid = format!("q{q}");
        let mut seen = std::collections::BTreeSet::new();
        let list = r
            .iter()
            .filter(|(p, _)| seen.insert(*p))
            .map(|(p, s)| (format!("d{p}"), *s))
            .collect();
        run.insert(&qid, list).unwrap();
        for (p, g) in j {
            qrels.insert(&qid, &format!("d{p}"), *g);
        }
    }
    (run, qrels)
}

proptest! {
    #[test]
    fn metrics_lie_in_unit_interval((runs, judged) in run_and_qrels()) {
        let (run, qrels) = build(&runs, &judged);
        let report = evaluate_run(&run, &qrels, EvalConfig { map_cutoff: 10, k: 5 });
        for m in report.per_query.values().chain(std::iter::once(&report.mean)) {
            for metric in Metric::ALL {
                let v = m.get(metric);
                prop_assert!((0.0..=1.0).contains(&v), "{:?} = {}", metric, v);
            }
        }
    }

    #[test]
    fn metrics_depend_only_on_rank((runs, judged) in run_and_qrels(), scale in 0.1f64..10.0, shift in -3.0f64..3.0) {
        let (run, qrels) = build(&runs, &judged);
        let transformed: Vec<Vec<(u8, f64)>> = runs
            .iter()
            .map(|r| r.iter().map(|(p, s)| (*p, (s * scale + shift).exp())).collect())
            .collect();
        let (run2, _) = build(&transformed, &judged);
        let a = evaluate_run(&run, &qrels, EvalConfig::default());
        let b = evaluate_run(&run2, &qrels, EvalConfig::default());
        prop_assert_eq!(a.per_query, b.per_query);
    }

    #[test]
    fn ndcg_is_one_on_ideal_order(judged in prop::collection::vec((0u8..30, 0u32..4), 1..15)) {
        let j: Judgments = judged.iter().map(|(p, g)| (format!("d{p}"), *g)).collect();
        let mut ideal: Vec<(&String, &u32)> = j.iter().collect();
        ideal.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        let ranking: Vec<&str> = ideal.iter().map(|(p, _)| p.as_str()).collect();
        match ndcg_at(&ranking, &j, 10) {
            Some(v) => prop_assert!((v - 1.0).abs() < 1e-12),
            None => prop_assert!(j.values().all(|&g| g == 0)),
        }
        let mut reversed = ranking.clone();
        reversed.reverse();
        if let Some(v) = ndcg_at(&reversed, &j, 10) {
            prop_assert!(v <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn per_query_values_reproduce_means((runs, judged) in run_and_qrels()) {
        let (run, qrels) = build(&runs, &judged);
        let report = evaluate_run(&run, &qrels, EvalConfig::default());
        for metric in Metric::ALL {
            let values = report.per_query_values(metric);
            let mean = if values.is_empty() {
                0.0
            } else {
                values.iter().map(|(_, v)| v).sum::<f64>() / values.len() as f64
            };
            prop_assert!((mean - report.mean.get(metric)).abs() < 1e-12);
        }
        if report.evaluated() > 0 {
            for c in compare_reports(&report, &report, 200, 0).unwrap() {
                prop_assert_eq!(c.p_value, 1.0);
                prop_assert_eq!(c.queries, report.evaluated());
            }
        }
    }
}

#[test]
fn permutation_null_is_calibrated() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
    let trials = 200;
    let rejections = (0..trials)
        .filter(|&t| {
            let a: Vec<f64> = (0..25).map(|_| rng.gen()).collect();
            let b: Vec<f64> = (0..25).map(|_| rng.gen()).collect();
            permutation_test(&a, &b, 2000, t).unwrap() < 0.05
        })
        .count();
    let rate = rejections as f64 / trials as f64;
    assert!((rate - 0.05).abs() <= 0.04, "{rate}");
}
