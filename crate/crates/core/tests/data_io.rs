use std::fs;

use amd_core::data::{generate_dataset, load_dataset, load_manifest, save_dataset, split_dataset, AttributeSchema, DatasetSplit};
use amd_core::AmdError;

fn small_split() -> DatasetSplit {
    let schema = AttributeSchema::desk_scale();
    let recs = generate_dataset(&schema, 8, 4, 2, 21).unwrap();
    split_dataset(&schema, recs, 0.5, 21).unwrap()
}

#[test]
fn round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let split = small_split();
    save_dataset(&split, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.train, split.train);
    assert_eq!(back.query, split.query);
    assert_eq!(back.gallery, split.gallery);
    assert_eq!(back.schema, split.schema);
}

#[test]
fn saving_twice_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_dataset(&small_split(), a.path()).unwrap();
    save_dataset(&small_split(), b.path()).unwrap();
    for f in ["manifest.json", "images.bin", "masks.bin"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{}", f);
    }
}

#[test]
fn truncated_blob_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&small_split(), dir.path()).unwrap();
    let p = dir.path().join("images.bin");
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(AmdError::Format(_))));
}

#[test]
fn corrupt_mask_header_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&small_split(), dir.path()).unwrap();
    let p = dir.path().join("masks.bin");
    let mut bytes = fs::read(&p).unwrap();
    bytes[0] = b'X';
    fs::write(&p, bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(AmdError::Format(_))));
}

#[test]
fn empty_split_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let empty = DatasetSplit::empty(AttributeSchema::desk_scale());
    save_dataset(&empty, dir.path()).unwrap();
    let m = load_manifest(dir.path()).unwrap();
    assert!(m.records.is_empty());
    let back = load_dataset(dir.path()).unwrap();
    assert!(back.train.is_empty() && back.query.is_empty() && back.gallery.is_empty());
}

#[test]
fn missing_directory_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_dataset(&dir.path().join("nope")).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
