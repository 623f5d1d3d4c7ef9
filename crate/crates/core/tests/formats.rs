use std::path::Path;

use pvmdnn_core::analysis::{decode_pgm, encode_pgm};
use pvmdnn_core::checkpoint::{decode_checkpoint, encode_checkpoint, quantize};
use pvmdnn_core::gesture::{
    build_dataset, build_stream, dataset_file_size, home_input, load_dataset, load_stream,
    render_frame, save_dataset, save_stream, subset, CodingConfig, IMAGE_HEIGHT, IMAGE_WIDTH,
};
use pvmdnn_core::network::init_params;
use pvmdnn_core::{Error, NetworkConfig};

const GOLDEN_HOME: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/home.pgm");

#[test]
fn home_frame_matches_golden() {
    let (frame, clamped) = render_frame(&CodingConfig::default(), [0.0, 0.0]);
    assert!(!clamped);
    let pgm = encode_pgm(&frame, IMAGE_HEIGHT, IMAGE_WIDTH).unwrap();
    if std::env::var_os("PVMDNN_BLESS").is_some() {
        std::fs::write(GOLDEN_HOME, &pgm).unwrap();
    }
    let golden = std::fs::read(GOLDEN_HOME).expect("golden frame present");
    assert_eq!(pgm, golden);
    let (h, w, back) = decode_pgm(&golden).unwrap();
    assert_eq!((h, w), (IMAGE_HEIGHT, IMAGE_WIDTH));
    assert_eq!(home_input(&CodingConfig::default()).0.len(), back.len());
}

#[test]
fn dataset_file_has_predicted_size_and_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.pvmd");
    let d = build_dataset(0, 12).unwrap();
    assert_eq!(d.len(), 16);
    save_dataset(&path, &d).unwrap();
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(
        size,
        dataset_file_size(16, 12, IMAGE_HEIGHT, IMAGE_WIDTH, d.coding.code_len())
    );
    assert_eq!(load_dataset(&path).unwrap(), d);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[40] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Checksum { .. })));
}

#[test]
fn same_seed_same_file() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str| {
        let p = dir.path().join(name);
        save_dataset(&p, &subset(&build_dataset(3, 8).unwrap(), 4).unwrap()).unwrap();
        std::fs::read(p).unwrap()
    };
    assert_eq!(write("a"), write("b"));
}

#[test]
fn stream_file_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let d = subset(&build_dataset(0, 10).unwrap(), 4).unwrap();
    let s = build_stream(&d, &[2, 0, 1], 0.02, 5).unwrap();
    assert_eq!(s.len(), 30);
    assert_eq!(&s.labels[..11], &[2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 0]);
    let p = dir.path().join("s.pvmd");
    save_stream(&p, &s).unwrap();
    assert_eq!(load_stream(&p).unwrap(), s);
    assert!(load_stream(Path::new("/nonexistent/stream")).is_err());
}

#[test]
fn checkpoint_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = init_params(&NetworkConfig::desk(), 4, 11).unwrap();
    let path = dir.path().join("c.ckpt");
    pvmdnn_core::checkpoint::save_checkpoint(&path, &p, 3).unwrap();
    let (q, epoch) = pvmdnn_core::checkpoint::load_checkpoint(&path).unwrap();
    assert_eq!(epoch, 3);
    assert_eq!(q, quantize(&p));
    assert_eq!(decode_checkpoint(&encode_checkpoint(&q, 3)).unwrap().0, q);
}
