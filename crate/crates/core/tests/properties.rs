use proptest::prelude::*;
use rand::Rng;

use migra::classic::{ln_kernel, predict_row_probs, ClassicModelSpec, ModelKind, PairInputs, ProductionFn};
use migra::dataset::{build, downsample, FeatureSchema, Observations};
use migra::flows::{pair_index, FlowMatrix, PredictedFlows, Zone, ZoneTable};
use migra::geo::{distance_km, intervening_sum, pair_features, Centroid, InterveningQuery};
use migra::learn::search::{evaluate_candidates, random_search, SearchSpace};
use migra::learn::{cpc_loss, fit, fit_gbt, predict, AnnSpec, GbtSpec, LearnerSpec, Loss};
use migra::metrics::{cpc, cpc_d, evaluate, rmse};
use migra::seed;
use migra::synth::{synth_dataset, SynthConfig};

fn zone(id: &str, lat: f64, lon: f64, population: f64) -> Zone {
    Zone {
        id: id.into(),
        centroid: Centroid::new(lat, lon).unwrap(),
        population,
        features: vec![],
    }
}

fn arb_zones(max: usize) -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((35.0..40.0f64, -100.0..-95.0f64, 1.0..1e5f64), 3..max)
}

fn table(raw: &[(f64, f64, f64)]) -> ZoneTable {
    let zones = raw
        .iter()
        .enumerate()
        .map(|(k, &(lat, lon, p))| zone(&format!("z{k:02}"), lat, lon, p.round()))
        .collect();
    ZoneTable::new(zones, vec![]).unwrap()
}

fn gravity_synth(seed: u64, n: usize, years: usize) -> (ZoneTable, Vec<FlowMatrix>) {
    let spec = ClassicModelSpec::new(ModelKind::GravityPower, Some(2.0), ProductionFn::new(0.01).unwrap()).unwrap();
    let mut cfg = SynthConfig::new(seed, n, years, spec);
    cfg.noise = 0.4;
    synth_dataset(&cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn haversine_triangle_inequality(a in (-80.0..80.0f64, -179.0..179.0f64),
                                     b in (-80.0..80.0f64, -179.0..179.0f64),
                                     c in (-80.0..80.0f64, -179.0..179.0f64)) {
        let [a, b, c] = [a, b, c].map(|(lat, lon)| Centroid::new(lat, lon).unwrap());
        prop_assert!(distance_km(a, c) <= distance_km(a, b) + distance_km(b, c) + 1e-9);
        prop_assert!((distance_km(a, b) - distance_km(b, a)).abs() < 1e-9);
    }

    #[test]
    fn intervening_sums_ignore_zone_order(raw in arb_zones(12), rot in 0usize..12) {
        let forward = table(&raw);
        // same zones, listed in a different order under shuffled labels
        let n = raw.len();
        let relabeled: Vec<Zone> = (0..n)
            .map(|k| {
                let (lat, lon, p) = raw[(k + rot) % n];
                zone(&format!("r{:02}", (n - k) % n), lat, lon, p.round())
            })
            .collect();
        let other = ZoneTable::new(relabeled, vec![]).unwrap();
        let id_of = |orig: usize| format!("r{:02}", (n - (orig + n - rot % n) % n) % n);
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                let a = intervening_sum(&forward, &InterveningQuery::new("population", format!("z{i:02}"), format!("z{j:02}"))).unwrap();
                let b = intervening_sum(&other, &InterveningQuery::new("population", id_of(i), id_of(j))).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn intervening_sums_grow_with_the_variable(raw in arb_zones(12), bump in 0usize..12, extra in 1.0..1e4f64) {
        let before = table(&raw);
        let mut raised = raw.clone();
        let k = bump % raw.len();
        raised[k].2 += extra;
        let after = table(&raised);
        let p0 = pair_features(&before, &["population"]).unwrap();
        let p1 = pair_features(&after, &["population"]).unwrap();
        let (c0, c1) = (p0.column("intervening_population").unwrap(), p1.column("intervening_population").unwrap());
        for (x, y) in c0.iter().zip(c1) {
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn cpc_is_symmetric_and_label_free(raw in prop::collection::vec(0u32..50, 30)) {
        // 6 zones, 30 ordered pairs
        let ids: std::sync::Arc<[String]> = (0..6).map(|k| format!("z{k}")).collect::<Vec<_>>().into();
        let rev: std::sync::Arc<[String]> = (0..6).map(|k| format!("z{}", 5 - k)).collect::<Vec<_>>().into();
        let n = 6;
        let mut a = PredictedFlows::new(0, ids.clone());
        let mut b = PredictedFlows::new(0, ids.clone());
        let mut ra = PredictedFlows::new(0, rev.clone());
        let mut rb = PredictedFlows::new(0, rev.clone());
        for (p, &v) in raw.iter().enumerate() {
            let (i, j) = migra::flows::pair_at(n, p);
            let w = (v as f64 * 1.7).floor() % 23.0;
            a.add(i, j, v as f64).unwrap();
            b.add(i, j, w).unwrap();
            ra.add(n - 1 - i, n - 1 - j, v as f64).unwrap();
            rb.add(n - 1 - i, n - 1 - j, w).unwrap();
        }
        prop_assert_eq!(cpc(&a, &b).unwrap(), cpc(&b, &a).unwrap());
        prop_assert!((cpc(&a, &b).unwrap() - cpc(&ra, &rb).unwrap()).abs() < 1e-12);
        prop_assert!((rmse(&a, &b).unwrap() - rmse(&ra, &rb).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn radiation_ignores_population_units(raw in arb_zones(15), scale in 0.01..100.0f64) {
        let zones = table(&raw);
        let scaled_zones = ZoneTable::new(
            zones.iter().map(|z| Zone { population: z.population * scale, ..z.clone() }).collect(),
            vec![],
        ).unwrap();
        prop_assume!(zones.populations().iter().all(|&p| p > 0.0));
        let spec = ClassicModelSpec::radiation(ProductionFn::new(0.1).unwrap());
        let pa = pair_features(&zones, &["population"]).unwrap();
        let pb = pair_features(&scaled_zones, &["population"]).unwrap();
        for i in 0..zones.len() {
            let a = predict_row_probs(&spec, &zones, &pa, i).unwrap();
            let b = predict_row_probs(&spec, &scaled_zones, &pb, i).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10, "{} vs {}", x, y);
            }
        }
    }
}

fn softmax(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

#[test]
fn distance_units_matter_only_for_exponential_gravity() {
    let mut rng = seed::rng(3);
    let rows: Vec<PairInputs> = (0..20)
        .map(|_| PairInputs {
            origin_mass: 5e4,
            dest_mass: rng.random_range(1e3..1e6),
            intervening: rng.random_range(0.0..1e6),
            distance_km: rng.random_range(1.0..500.0),
        })
        .collect();
    let probs = |kind, beta, scale: f64| {
        let logs: Vec<f64> = rows
            .iter()
            .map(|p| {
                ln_kernel(
                    kind,
                    beta,
                    PairInputs {
                        distance_km: p.distance_km * scale,
                        ..*p
                    },
                )
            })
            .collect();
        softmax(&logs)
    };
    let max_diff = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(
        max_diff(
            probs(ModelKind::GravityPower, 2.0, 1.0),
            probs(ModelKind::GravityPower, 2.0, 1.609)
        ) < 1e-12
    );
    assert!(
        max_diff(
            probs(ModelKind::GravityExp, 0.02, 1.0),
            probs(ModelKind::GravityExp, 0.02, 1.609)
        ) > 1e-3
    );
}

#[test]
fn batch_loss_over_all_pairs_is_one_minus_cpc() {
    let (zones, years) = gravity_synth(1, 25, 2);
    let pairs = pair_features(&zones, &["population"]).unwrap();
    let obs = build(&zones, &pairs, &years[0], &FeatureSchema::traditional()).unwrap();
    let other = build(&zones, &pairs, &years[1], &FeatureSchema::traditional()).unwrap();
    let loss = cpc_loss(obs.targets(), other.targets()).unwrap();
    let c = cpc(&years[0], &years[1]).unwrap();
    assert!((loss - (1.0 - c)).abs() < 1e-12, "{loss} vs {c}");
}

fn regression_rows() -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = seed::rng(12);
    let rows: Vec<Vec<f64>> = (0..300)
        .map(|_| vec![rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0)])
        .collect();
    let y = rows
        .iter()
        .map(|r| r[0].ln() * 3.0 + (r[1] > 1.0) as u8 as f64 * 4.0)
        .collect();
    (rows, y)
}

fn gbt_table(rows: &[Vec<f64>], y: &[f64]) -> migra::dataset::SampledObservations {
    migra::dataset::SampledObservations::from_rows(vec!["a".into(), "b".into()], rows, y).unwrap()
}

#[test]
fn gbt_is_invariant_to_monotone_feature_maps() {
    let (rows, y) = regression_rows();
    let mapped: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0].ln(), r[1].powi(3)]).collect();
    let spec = GbtSpec {
        max_depth: 3,
        n_estimators: 40,
        learning_rate: 0.2,
        k: 1,
    };
    let a = fit_gbt(&spec, &gbt_table(&rows, &y)).unwrap();
    let b = fit_gbt(&spec, &gbt_table(&mapped, &y)).unwrap();
    for (r, m) in rows.iter().zip(&mapped) {
        assert!((a.predict_raw(r) - b.predict_raw(m)).abs() < 1e-9);
    }
}

#[test]
fn gbt_importance_sums_to_one_and_training_error_never_rises() {
    let (rows, y) = regression_rows();
    let spec = GbtSpec {
        max_depth: 4,
        n_estimators: 60,
        learning_rate: 0.3,
        k: 1,
    };
    let m = fit_gbt(&spec, &gbt_table(&rows, &y)).unwrap();
    assert!((m.importance.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(
        m.train_rmse.windows(2).all(|w| w[1] <= w[0] + 1e-12),
        "{:?}",
        m.train_rmse
    );
    assert!(m.trees.iter().all(|t| t.depth() <= 4));
}

#[test]
fn predictions_land_on_their_pairs() {
    let (zones, years) = gravity_synth(2, 12, 1);
    let pairs = pair_features(&zones, &["population"]).unwrap();
    let obs = build(&zones, &pairs, &years[0], &FeatureSchema::traditional()).unwrap();
    let spec = LearnerSpec::Gbt(GbtSpec {
        max_depth: 3,
        n_estimators: 20,
        learning_rate: 0.3,
        k: 3,
    });
    let model = fit(&spec, &downsample(&obs, 3, 0).unwrap(), 0).unwrap();
    let pred = predict(&model, &obs).unwrap();
    let n = zones.len();
    for r in 0..obs.n_rows() {
        let (i, j) = obs.pair(r);
        assert_eq!(pair_index(n, i, j), r);
        assert_eq!(pred.get(i, j), model.predict_row(obs.row(r)));
    }
}

fn search_data() -> (migra::dataset::ObservationSet, migra::dataset::ObservationSet) {
    let (zones, years) = gravity_synth(4, 20, 2);
    let pairs = pair_features(&zones, &["population"]).unwrap();
    let s = FeatureSchema::traditional();
    (
        build(&zones, &pairs, &years[0], &s).unwrap(),
        build(&zones, &pairs, &years[1], &s).unwrap(),
    )
}

#[test]
fn single_trial_search_and_determinism() {
    let (train, valid) = search_data();
    let mut space = SearchSpace::gbt();
    if let migra::learn::search::LearnerSpace::Gbt(g) = &mut space.learner {
        g.n_estimators = (5, 20);
    }
    let one = random_search(&space, &train, &valid, 1, 9).unwrap();
    assert_eq!(one.trials.len(), 1);
    assert_eq!(one.best().index, 0);

    let strip = |o: &migra::learn::SearchOutcome| -> Vec<_> {
        o.trials
            .iter()
            .map(|t| (t.spec, t.valid_cpc.map(f64::to_bits)))
            .collect()
    };
    let a = random_search(&space, &train, &valid, 6, 9).unwrap();
    let b = random_search(&space, &train, &valid, 6, 9).unwrap();
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(a.best().index, b.best().index);
    let best = a.best().valid_cpc.unwrap();
    assert!(a.trials.iter().all(|t| t.valid_cpc.unwrap() <= best));
}

#[test]
fn search_prefers_a_trained_model_over_an_untrained_one() {
    let (train, valid) = search_data();
    let untrained = LearnerSpec::Ann(AnnSpec {
        loss: Loss::CpcLoss,
        n_layers: 1,
        layer_width: 8,
        n_epochs: 0,
        batch_size: 64,
        k: 2,
    });
    let trained = LearnerSpec::Gbt(GbtSpec {
        max_depth: 4,
        n_estimators: 50,
        learning_rate: 0.2,
        k: 2,
    });
    let out = evaluate_candidates(&[untrained, trained], &train, &valid, 1).unwrap();
    assert_eq!(out.best().index, 1, "{:?}", out.trials);
}

#[test]
fn evaluation_of_identical_flows_is_perfect() {
    let (zones, years) = gravity_synth(5, 15, 1);
    let pairs = pair_features(&zones, &["population"]).unwrap();
    let r = evaluate(&years[0], &years[0].to_f64(), &pairs).unwrap();
    assert_eq!(
        (r.cpc, r.cpc_d, r.rmse, r.r2, r.incoming_mae, r.incoming_r2),
        (1.0, 1.0, 0.0, 1.0, 0.0, 1.0)
    );
    assert_eq!(cpc_d(&years[0], &years[0], &pairs).unwrap(), 1.0);
}
