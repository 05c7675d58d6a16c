use megloc::dataset::{DatasetParams, DatasetStream};
use megloc::forward::{build_synthetic_source_space, compute_lead_field, SensorArray, Snr};
use megloc::nn::{build_mlp_with_hidden, train, TrainingConfig};
use megloc::signal::Correlation;

/// Means over consecutive windows of `w` values.
fn smoothed(values: &[f64], w: usize) -> Vec<f64> {
    values
        .chunks_exact(w)
        .map(|c| c.iter().sum::<f64>() / w as f64)
        .collect()
}

fn slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[test]
fn smoothed_loss_trends_down_on_a_small_noiseless_task() {
    let sensors = SensorArray::helmet(16, 0.12).unwrap();
    let space = build_synthetic_source_space(100, 0.07, 3).unwrap();
    let lf = compute_lead_field(&sensors, &space).unwrap();
    let steps = 1000;
    let seeds = 20;
    let mut decreasing = 0;
    for seed in 0..seeds {
        let mut model = build_mlp_with_hidden(16, 1, &[32, 16], seed).unwrap();
        model.set_output_frame_from(&space).unwrap();
        let params = DatasetParams {
            n_sources: 1,
            count: steps * 32,
            snr: Snr::Noiseless,
            correlation: Correlation::Fixed(0.0),
            n_samples: 1,
            amplitude: 1.0,
            seed: 1000 + seed,
        };
        let mut stream = DatasetStream::new(&lf, &space, params).unwrap();
        let config = TrainingConfig {
            learning_rate: 0.05,
            steps,
            log_every: 1,
            seed,
            ..Default::default()
        };
        let (_, history) = train(model, &mut stream, &config).unwrap();
        let losses: Vec<f64> = history.iter().map(|r| r.loss).collect();
        let s = smoothed(&losses, 10);
        if slope(&s) < 0.0 && s[s.len() - 1] < s[0] {
            decreasing += 1;
        }
    }
    assert!(
        decreasing * 100 >= 95 * seeds as usize,
        "{decreasing}/{seeds} seeds"
    );
}
