//! CSV loading, schema checks and synthetic generators.

use drf_core::data::{generate_synthetic, load_csv, read_csv, save_csv, Schema, SynthSpec, SynthTask};
use drf_core::error::DrfError;

fn parse(text: &str, schema: &Schema) -> Result<drf_core::data::Dataset, DrfError> {
    read_csv(text.as_bytes(), schema)
}

#[test]
fn columns_are_grouped_by_prefix_in_numeric_order() {
    let ds = parse("y1,x1,id,x0,y0\n10,2,a,1,5\n20,4,b,3,6\n", &Schema::labeled()).unwrap();
    assert_eq!(ds.feature_names(), ["x0", "x1"]);
    assert_eq!(ds.target_names(), ["y0", "y1"]);
    assert_eq!(ds.features().row(1).to_vec(), vec![3.0, 4.0]);
    assert_eq!(ds.targets().row(0).to_vec(), vec![5.0, 10.0]);
}

#[test]
fn errors_name_the_offending_row_and_column() {
    let err = parse("x0,y0\n1,2\n3,oops\n", &Schema::labeled()).unwrap_err();
    assert!(
        matches!(&err, DrfError::Parse { row: 2, column, .. } if column == "y0"),
        "{err}"
    );

    let err = parse("x0,y0\n1,2\nNaN,3\n", &Schema::labeled()).unwrap_err();
    assert!(
        matches!(&err, DrfError::NonFinite { row: 2, column } if column == "x0"),
        "{err}"
    );

    let err = parse("x0,x1\n1,2\n", &Schema::labeled()).unwrap_err();
    assert!(err.to_string().contains("y0"), "{err}");

    let err = parse("x0,y0\n", &Schema::labeled()).unwrap_err();
    assert!(matches!(err, DrfError::EmptyDataset), "{err}");
}

#[test]
fn targets_are_optional_for_prediction_inputs() {
    let ds = parse("x0,x1\n1,2\n", &Schema::features_only(2)).unwrap();
    assert_eq!(ds.target_dim(), 0);
    let err = parse("x0\n1\n", &Schema::features_only(2)).unwrap_err();
    assert!(err.to_string().contains("x1"), "{err}");
}

#[test]
fn empty_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    std::fs::write(&path, "").unwrap();
    assert!(matches!(
        load_csv(&path, &Schema::labeled()),
        Err(DrfError::EmptyFile(_))
    ));
}

#[test]
fn synthetic_sets_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    for task in [SynthTask::Piecewise, SynthTask::Bimodal, SynthTask::HeteroNoise] {
        let ds = generate_synthetic(&SynthSpec {
            task,
            samples: 64,
            noise: 0.1,
            seed: 3,
        })
        .unwrap();
        assert_eq!(ds.len(), 64);
        let path = dir.path().join(format!("{task}.csv"));
        save_csv(&path, &ds).unwrap();
        let back = load_csv(&path, &Schema::labeled()).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.targets(), ds.targets());
    }
}

#[test]
fn task_names_parse() {
    for name in SynthTask::NAMES {
        let task: SynthTask = name.parse().unwrap();
        assert_eq!(task.name(), name);
    }
    let err = "foo".parse::<SynthTask>().unwrap_err();
    assert!(err.to_string().contains("piecewise, bimodal, hetero-noise"), "{err}");
}

#[test]
fn bimodal_targets_form_two_groups() {
    let ds = generate_synthetic(&SynthSpec {
        task: SynthTask::Bimodal,
        samples: 400,
        noise: 0.0,
        seed: 1,
    })
    .unwrap();
    for (x, y) in ds.features().column(0).iter().zip(ds.targets().column(0)) {
        let upper = 6.0 + 2.0 * (3.0 * x).sin();
        let lower = (x + 2.0) * (x + 2.0) + 1.0;
        assert!((y - upper).abs() < 1e-12 || (y - lower).abs() < 1e-12);
    }
}
