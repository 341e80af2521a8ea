//! Core pipeline from raw units to a scored ensemble, through the public API only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rulens_core::cmapss::{format_cmapss, parse_cmapss, prepare_split, PreprocessConfig, UnitSeries, SENSOR_COUNT};
use rulens_core::ensemble::{train_ensemble, EnsembleModel};
use rulens_core::metrics::{evaluate_on_test, EvalConfig};
use rulens_core::nn::{Architecture, TrainConfig};

fn unit(rng: &mut ChaCha8Rng, unit_id: u32, seen: usize, total: usize, rul: Option<u32>) -> UnitSeries {
    let mut sensors = Vec::with_capacity(seen);
    for t in 0..seen {
        let wear = ((t + 1) as f64 / total as f64).powi(2);
        let mut s = [0.0; SENSOR_COUNT];
        for (k, v) in s.iter_mut().enumerate() {
            *v = match k + 1 {
                1 | 5 | 10 | 16 | 18 | 19 => 7.0,
                n => 50.0 + n as f64 + (n % 3) as f64 * wear + rng.random_range(-0.02..0.02),
            };
        }
        sensors.push(s);
    }
    UnitSeries {
        unit_id,
        cycles: (1..=seen as u32).collect(),
        op_settings: (0..seen)
            .map(|_| [rng.random_range(-0.01..0.01), rng.random_range(-0.001..0.001), 100.0])
            .collect(),
        sensors,
        true_final_rul: rul,
    }
}

#[test]
fn raw_text_to_scored_ensemble() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let train: Vec<UnitSeries> = (1..=8)
        .map(|id| {
            let n = rng.random_range(30..50);
            unit(&mut rng, id, n, n, None)
        })
        .collect();
    let test: Vec<UnitSeries> = (1..=4)
        .map(|id| {
            let n = rng.random_range(30..50);
            let seen = n - 3 * id as usize;
            unit(&mut rng, id, seen, n, Some(3 * id))
        })
        .collect();

    // The text format round-trips exactly enough for parsing to recover the units.
    let reparsed = parse_cmapss(&format_cmapss(&train)).unwrap();
    assert_eq!(reparsed.len(), train.len());
    assert_eq!(reparsed[3].cycles, train[3].cycles);

    let config = PreprocessConfig {
        window_length: 20,
        ..PreprocessConfig::default()
    };
    let split = prepare_split(&train, &test, &config).unwrap();
    assert_eq!(split.layout.len(), 17);
    let expected_windows: usize = train.iter().map(|u| u.cycles.len() - 20 + 1).sum();
    assert_eq!(split.train.spans.len(), expected_windows);

    let arch = Architecture::new(17, vec![4], vec![2]).unwrap();
    assert_eq!(arch.param_count(), 4 * (17 + 4 + 1) * 4 + (4 + 1) * 2);
    let training = TrainConfig {
        max_epochs: 3,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let (model, histories) = train_ensemble(&arch, &split.train, &training, 237, 3).unwrap();
    assert_eq!(model.member_seeds, vec![237, 238, 239]);
    assert!(histories.iter().all(|h| h.epoch_losses.len() == 3));

    let ev = evaluate_on_test(&model, &split.test_units, &EvalConfig::default()).unwrap();
    assert_eq!(ev.report.n, 4);
    let targets: Vec<f64> = (1..=4).map(|i| 3.0 * i as f64).collect();
    let mus: Vec<f64> = ev.predictions.iter().map(|p| p.summary.mu_star).collect();
    let rmse = (mus.iter().zip(&targets).map(|(m, y)| (m - y).powi(2)).sum::<f64>() / 4.0).sqrt();
    assert!((ev.report.rmse - rmse).abs() < 1e-12);

    // Every cycle is scored when asked, against the uncapped trace.
    let all = evaluate_on_test(
        &model,
        &split.test_units,
        &EvalConfig {
            last_step_only: false,
            ..EvalConfig::default()
        },
    )
    .unwrap();
    let cycles: usize = test.iter().map(|u| u.cycles.len()).sum();
    assert_eq!(all.report.n, cycles);

    let single = EnsembleModel::new(vec![model.members[0].clone()], vec![237]).unwrap();
    let one = evaluate_on_test(&single, &split.test_units, &EvalConfig::default()).unwrap();
    assert!(one.predictions.iter().all(|p| p.summary.uncertainty.u_ep == 0.0));
}
