//! Datasets and fitted models survive a trip through their file formats.

use hermit::datagen::{generate, SynthSpec};
use hermit::io::{load_dataset, load_model, save_model, write_dataset, write_json, TaskSpec};
use hermit::model::log_likelihood;
use hermit::penalty::PenaltyConfig;
use hermit::solver::{fit, FitConfig};

#[test]
fn simulated_dataset_round_trips_with_missing_targets() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { n: 60, missing_rate: 0.3, ..SynthSpec::low_dim(8) };
    let data = generate(&spec).unwrap().data;
    let (csv, tasks) = (dir.path().join("d.csv"), dir.path().join("tasks.json"));
    write_dataset(&csv, &data).unwrap();
    write_json(&tasks, &TaskSpec::of(&data)).unwrap();

    let back = load_dataset(&csv, &tasks).unwrap();
    assert_eq!(back.x(), data.x());
    assert_eq!(back.observed(), data.observed());
    assert_eq!(back.tasks(), data.tasks());
    for ((a, b), &o) in back.y().iter().zip(data.y().iter()).zip(data.observed().iter()) {
        if o {
            assert_eq!(a, b);
        }
    }
    assert!(data.observed().iter().any(|&o| !o));
}

#[test]
fn hand_written_csv_with_blank_cells() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    std::fs::write(&csv, "bias,age,income,bought\n1,0.5,3.2,1\n1,-0.1,,0\n1,2.0,1.5,NaN\n").unwrap();
    let tasks = dir.path().join("tasks.json");
    std::fs::write(&tasks, r#"{"n_features": 2, "families": ["gaussian", "bernoulli"]}"#).unwrap();
    let data = load_dataset(&csv, &tasks).unwrap();
    assert_eq!((data.n(), data.d(), data.m()), (3, 2, 2));
    assert!(!data.observed()[[1, 0]]);
    assert!(!data.observed()[[2, 1]]);
    assert_eq!(data.y()[[0, 0]], 3.2);
}

#[test]
fn fitted_model_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&SynthSpec { n: 80, ..SynthSpec::low_dim(2) }).unwrap().data;
    let (model, _, _) = fit(&data, &PenaltyConfig::lasso(0.02), &FitConfig { t_out: 10, ..FitConfig::with_k(2) }).unwrap();
    let path = dir.path().join("model.json");
    save_model(&path, &model, None).unwrap();
    let (back, gate) = load_model(&path).unwrap();
    assert!(gate.is_none());
    assert_eq!(back.beta(), model.beta());
    assert_eq!(back.pi(), model.pi());
    assert_eq!(log_likelihood(&back, &data).unwrap(), log_likelihood(&model, &data).unwrap());
}
