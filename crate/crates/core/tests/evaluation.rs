mod common;

use common::{brute_force_query, cosine, rand_vec, retrieval_fixture, rng, Retrieval};
use lkareid::evaluation::{
    cmc_curve, evaluate_features, evaluate_similarities, pairwise_cosine, EvalConfig, EvalError, EvalReport, Sample,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn oracle_report(
    query: &[Sample],
    gallery: &[Sample],
    sims: &[Vec<f64>],
    max_rank: usize,
) -> (Vec<Option<f64>>, Vec<f64>) {
    let per: Vec<Option<(f64, usize)>> = query
        .iter()
        .zip(sims)
        .map(|(q, s)| brute_force_query(q, gallery, s))
        .collect();
    let scored: Vec<(f64, usize)> = per.iter().flatten().copied().collect();
    let cmc = (1..=max_rank)
        .map(|r| scored.iter().filter(|(_, first)| *first <= r).count() as f64 / scored.len() as f64)
        .collect();
    (per.iter().map(|p| p.map(|(ap, _)| ap)).collect(), cmc)
}

fn sims_of(qf: &[Vec<f64>], gf: &[Vec<f64>]) -> Vec<Vec<f64>> {
    qf.iter().map(|q| gf.iter().map(|g| cosine(q, g)).collect()).collect()
}

#[test]
fn fixture_matches_hand_values_and_brute_force() {
    let (q, qf, g, gf) = retrieval_fixture();
    let r = evaluate_features(&q, &qf, &g, &gf, &EvalConfig::default()).unwrap();
    assert!((r.per_query_ap[0].unwrap() - 5.0 / 6.0).abs() <= 1e-12);
    assert!((r.per_query_ap[1].unwrap() - 1.0 / 5.0).abs() <= 1e-12);
    assert_eq!(r.per_query_ap[2], None);
    assert!((r.map - 31.0 / 60.0).abs() <= 1e-12);
    assert_eq!(r.skipped_queries, 1);
    assert_eq!(&r.cmc[..5], &[0.5, 0.5, 0.5, 0.5, 1.0]);
    assert_eq!((r.rank1, r.rank5), (0.5, 1.0));

    let (ap, cmc) = oracle_report(&q, &g, &sims_of(&qf, &gf), 10);
    for (a, b) in r.per_query_ap.iter().zip(&ap) {
        assert_eq!(a.is_some(), b.is_some());
        if let (Some(a), Some(b)) = (a, b) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    assert_eq!(r.cmc, cmc);
}

fn random_case(seed: u64, nq: usize, ng: usize, ids: usize, cams: usize) -> Retrieval {
    let mut r = rng(seed);
    let sample = |r: &mut rand_chacha::ChaCha8Rng| Sample {
        path: None,
        feature: None,
        vehicle_id: r.random_range(0..ids),
        camera_id: r.random_range(0..cams),
        view_id: None,
    };
    let q: Vec<Sample> = (0..nq).map(|_| sample(&mut r)).collect();
    let g: Vec<Sample> = (0..ng).map(|_| sample(&mut r)).collect();
    let qf = (0..nq).map(|_| rand_vec(6, &mut r)).collect();
    let gf = (0..ng).map(|_| rand_vec(6, &mut r)).collect();
    (q, qf, g, gf)
}

#[test]
fn random_fixtures_match_brute_force() {
    for seed in 0..50 {
        let (q, qf, g, gf) = random_case(seed, 7, 20, 4, 3);
        let Ok(r) = evaluate_features(&q, &qf, &g, &gf, &EvalConfig::default()) else {
            continue;
        };
        let (ap, cmc) = oracle_report(&q, &g, &sims_of(&qf, &gf), 10);
        for (a, b) in r.per_query_ap.iter().zip(&ap) {
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "seed {seed}"),
                (None, None) => {}
                _ => panic!("skip mismatch at seed {seed}"),
            }
        }
        for (a, b) in r.cmc.iter().zip(&cmc) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn cosine_matches_scalar_loop() {
    let mut r = rng(4);
    let q: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(4, &mut r)).collect();
    let g: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(4, &mut r)).collect();
    let got = pairwise_cosine(&q, &g).unwrap();
    let want = sims_of(&q, &g);
    for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert!(matches!(
        pairwise_cosine(&q, &[vec![0.0; 4]]),
        Err(EvalError::ZeroNorm { .. })
    ));
}

#[test]
fn perfect_embedding_gives_perfect_scores() {
    let s = |v, c| Sample {
        path: None,
        feature: None,
        vehicle_id: v,
        camera_id: c,
        view_id: None,
    };
    let set: Vec<Sample> = (0..4).flat_map(|v| [s(v, 0), s(v, 1)]).collect();
    let feats: Vec<Vec<f64>> = set
        .iter()
        .map(|x| (0..4).map(|k| if k == x.vehicle_id { 1.0 } else { 0.0 }).collect())
        .collect();
    let r = evaluate_features(&set, &feats, &set, &feats, &EvalConfig::default()).unwrap();
    assert_eq!((r.map, r.rank1), (1.0, 1.0));
}

fn same_scores(a: &EvalReport, b: &EvalReport) {
    assert_eq!(a.map, b.map);
    assert_eq!(a.cmc, b.cmc);
    assert_eq!(a.per_query_ap, b.per_query_ap);
    assert_eq!(a.skipped_queries, b.skipped_queries);
}

#[test]
fn strictly_monotone_transforms_do_not_change_scores() {
    let cfg = EvalConfig::default();
    for seed in 0..10 {
        let (q, qf, g, gf) = random_case(seed, 6, 15, 3, 3);
        let sims = pairwise_cosine(&qf, &gf).unwrap();
        let Ok(base) = evaluate_similarities(&q, &g, &sims, &cfg) else {
            continue;
        };
        let transforms: [fn(f64) -> f64; 3] = [|s| (3.0 * s).exp(), |s| s * s * s - 7.0, |s| (s + 2.0).ln()];
        for f in transforms {
            let t: Vec<Vec<f64>> = sims.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect();
            same_scores(&base, &evaluate_similarities(&q, &g, &t, &cfg).unwrap());
        }
    }
}

#[test]
fn gallery_permutation_does_not_change_scores() {
    let cfg = EvalConfig::default();
    for seed in 0..10 {
        let (q, qf, g, gf) = random_case(seed, 6, 15, 3, 3);
        let Ok(base) = evaluate_features(&q, &qf, &g, &gf, &cfg) else {
            continue;
        };
        let mut perm: Vec<usize> = (0..g.len()).collect();
        perm.shuffle(&mut rng(seed + 100));
        let pg: Vec<Sample> = perm.iter().map(|&i| g[i].clone()).collect();
        let pf: Vec<Vec<f64>> = perm.iter().map(|&i| gf[i].clone()).collect();
        let r = evaluate_features(&q, &qf, &pg, &pf, &cfg).unwrap();
        for (a, b) in base.per_query_ap.iter().zip(&r.per_query_ap) {
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
        assert_eq!(base.cmc, r.cmc);
    }
}

#[test]
fn appending_junk_does_not_change_the_report() {
    let cfg = EvalConfig::default();
    let (q, qf, mut g, mut gf) = retrieval_fixture();
    let base = evaluate_features(&q[..1], &qf[..1], &g, &gf, &cfg).unwrap();
    // Same vehicle and camera as the query, placed at the very top.
    for _ in 0..3 {
        g.push(q[0].clone());
        gf.push(qf[0].clone());
    }
    let r = evaluate_features(&q[..1], &qf[..1], &g, &gf, &cfg).unwrap();
    same_scores(&base, &r);
}

#[test]
fn errors() {
    let (q, qf, g, gf) = retrieval_fixture();
    let cfg = EvalConfig::default();
    assert!(matches!(
        evaluate_features(&[], &[], &g, &gf, &cfg),
        Err(EvalError::EmptyManifest)
    ));
    assert!(matches!(
        evaluate_features(&q[2..], &qf[2..], &g, &gf, &cfg),
        Err(EvalError::AllSkipped(1))
    ));
    assert!(evaluate_features(&q, &qf, &g, &gf, &EvalConfig { max_rank: 4 }).is_err());
    assert!(evaluate_similarities(&q, &g, &[vec![0.0; 6]], &cfg).is_err());
}

proptest! {
    #[test]
    fn cmc_is_monotone_and_bounded(
        lists in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..20), 1..10),
        max_rank in 1usize..25,
    ) {
        let cmc = cmc_curve(&lists, max_rank);
        prop_assert_eq!(cmc.len(), max_rank);
        prop_assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(cmc.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
