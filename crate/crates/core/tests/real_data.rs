//! Counts on the real training splits. Point the environment variables at
//! local copies and run with `cargo test -- --ignored`.

use std::path::PathBuf;

use vqa_icl::dataset::{load_vqa_dataset, DatasetKind, DatasetPaths};

fn env_path(name: &str) -> Option<PathBuf> {
    std::env::var_os(name).map(PathBuf::from)
}

#[test]
#[ignore = "needs VQAV2_QUESTIONS and VQAV2_ANNOTATIONS"]
fn vqav2_train_has_expected_size() {
    let (Some(questions), Some(annotations)) = (env_path("VQAV2_QUESTIONS"), env_path("VQAV2_ANNOTATIONS")) else {
        panic!("set VQAV2_QUESTIONS and VQAV2_ANNOTATIONS");
    };
    let paths = DatasetPaths {
        questions: Some(questions),
        annotations: Some(annotations),
        ..Default::default()
    };
    let set = load_vqa_dataset(&paths, DatasetKind::Vqav2).unwrap();
    assert_eq!(set.len(), 443_757);
}

#[test]
#[ignore = "needs VIZWIZ_ANNOTATIONS"]
fn vizwiz_train_has_expected_size() {
    let annotations = env_path("VIZWIZ_ANNOTATIONS").expect("set VIZWIZ_ANNOTATIONS");
    let paths = DatasetPaths {
        annotations: Some(annotations),
        ..Default::default()
    };
    let set = load_vqa_dataset(&paths, DatasetKind::Vizwiz).unwrap();
    assert_eq!(set.len(), 20_523);
}
