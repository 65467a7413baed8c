use std::fs;
use std::path::Path;

use normlab_harness::data::{load_cifar10, RECORD_LEN, TEST_FILE, TRAIN_FILES};
use normlab_harness::train::DATA_ENV;
use normlab_harness::HarnessError;

fn record(label: u8, fill: u8) -> Vec<u8> {
    let mut r = vec![fill; RECORD_LEN];
    r[0] = label;
    r
}

#[test]
fn loads_a_directory_of_batches() {
    let dir = tempfile::tempdir().unwrap();
    for (i, name) in TRAIN_FILES.iter().enumerate() {
        let bytes = [record(i as u8, 10 * i as u8), record(9, 200)].concat();
        fs::write(dir.path().join(name), bytes).unwrap();
    }
    fs::write(dir.path().join(TEST_FILE), record(4, 51)).unwrap();
    let data = load_cifar10(dir.path()).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (10, 1));
    assert_eq!(data.train.label(2), 1);
    assert_eq!(data.test.label(0), 4);
    assert_eq!(data.train.stats(), data.test.stats());
    let expected: Vec<u8> = TRAIN_FILES
        .iter()
        .flat_map(|n| fs::read(dir.path().join(n)).unwrap())
        .collect();
    assert_eq!(data.train.to_records(), expected);
}

#[test]
fn truncated_and_missing_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    for name in TRAIN_FILES {
        fs::write(dir.path().join(name), record(0, 0)).unwrap();
    }
    assert!(matches!(
        load_cifar10(dir.path()),
        Err(HarnessError::Io { .. })
    ));
    fs::write(dir.path().join(TEST_FILE), &record(0, 0)[..100]).unwrap();
    assert!(matches!(
        load_cifar10(dir.path()),
        Err(HarnessError::CorruptDataset { .. })
    ));
}

#[test]
#[ignore = "needs the CIFAR-10 binaries in NORMLAB_DATA"]
fn full_training_split_has_fifty_thousand_images() {
    let dir = std::env::var_os(DATA_ENV).expect("NORMLAB_DATA is not set");
    let data = load_cifar10(Path::new(&dir)).unwrap();
    assert_eq!(data.train.len(), 50_000);
    assert_eq!(data.test.len(), 10_000);
}
