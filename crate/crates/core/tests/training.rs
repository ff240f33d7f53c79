use seek_gp::bench::{synthesize_dataset, test_set, BenchmarkName, BenchmarkSpec};
use seek_gp::metrics::evaluate;
use seek_gp::optim::multi_restart_fit;
use seek_gp::{GpModel, IntervalMode, Kernel, Noise, SeekKernel, Standardizer, TrainConfig};

#[test]
fn trained_seek_interpolates_noiseless_analytic_one() {
    let spec = BenchmarkSpec::analytic(BenchmarkName::Analytic1, 55, 0.0, 0);
    let raw = synthesize_dataset(&spec).unwrap();
    let st = Standardizer::fit(&raw, "train");
    let train = st.transform(&raw).unwrap();
    let model = GpModel::new(
        Kernel::Seek(SeekKernel::illustrative_default(1, 0).unwrap()),
        Noise::learned(1e-4).unwrap(),
    );
    let cfg = TrainConfig {
        restarts: 2,
        max_epochs: 1000,
        seed: 5,
        ..TrainConfig::default()
    };
    let (trained, fit) = multi_restart_fit(&model, &train, &cfg).unwrap();
    assert!(fit.best_loss.is_finite());
    assert!(fit.restarts.iter().all(|r| fit.best_loss <= r.final_loss.unwrap_or(f64::INFINITY)));

    // Predict as if the data were exactly noiseless.
    let mut exact = trained.clone();
    exact.noise = Noise::fixed(0.0).unwrap();
    let post = exact.condition(&train).unwrap();
    let at_train = post.predict(&train.x, IntervalMode::StdDev).unwrap();
    let back = st.inverse_prediction(&at_train);
    for (m, y) in back.mean.iter().zip(&raw.y) {
        assert!((m - y).abs() <= 1e-4, "{m} vs {y}");
    }
    assert!(at_train.variance.iter().all(|v| *v <= 1e-6));

    let test = test_set(BenchmarkName::Analytic1).unwrap();
    let pred = st.inverse_prediction(&post.predict(&st.apply_x(&test.x), IntervalMode::StdDev).unwrap());
    let report = evaluate(&pred.mean, &pred.lower, &pred.upper, &test.y).unwrap();
    assert!(report.nrmse < 1.0, "{report:?}");
}
