mod common;

use common::{mnist_dir, MNIST_FILES};
use ffconv::checkpoint::{dataset_checkpoint, restore_dataset, Checkpoint};
use ffconv::data::{load_mnist, parse_idx_images, parse_idx_labels, split, Split};
use ffconv::Error;

fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend(payload);
    out
}

fn read_raw(dir: &std::path::Path, stem: &str) -> Vec<u8> {
    let plain = dir.join(stem);
    if plain.is_file() {
        return std::fs::read(plain).unwrap();
    }
    let gz = std::fs::read(dir.join(format!("{stem}.gz"))).unwrap();
    let mut out = Vec::new();
    std::io::Read::read_to_end(&mut flate2::read::GzDecoder::new(&gz[..]), &mut out).unwrap();
    out
}

macro_rules! mnist_or_skip {
    () => {
        match mnist_dir() {
            Some(d) => d,
            None => {
                eprintln!("MNIST not found, skipping (scripts/fetch_mnist.sh)");
                return;
            }
        }
    };
}

#[test]
fn fixture_images_parse_and_scale() {
    let bytes = idx(0x0803, &[2, 2, 3], &[0, 255, 51, 102, 153, 204, 1, 2, 3, 4, 5, 6]);
    let t = parse_idx_images(&bytes).unwrap();
    assert_eq!(t.shape(), &[2, 2, 3]);
    assert_eq!(t.data()[1], 1.0);
    assert!((t.data()[2] - 0.2).abs() < 1e-7);
    assert_eq!(parse_idx_labels(&idx(0x0801, &[3], &[7, 0, 9])).unwrap(), vec![7, 0, 9]);
}

#[test]
fn truncated_payload_reports_both_lengths() {
    let bytes = idx(0x0803, &[2, 2, 2], &[0; 7]);
    match parse_idx_images(&bytes) {
        Err(Error::IdxTruncated { expected, actual }) => {
            assert_eq!((expected, actual), (24, 23));
        }
        other => panic!("{other:?}"),
    }
    let msg = parse_idx_images(&bytes).unwrap_err().to_string();
    assert!(msg.contains("24") && msg.contains("23"), "{msg}");
}

#[test]
fn truncated_header_is_reported() {
    assert!(matches!(
        parse_idx_images(&[0, 0, 8, 3, 0, 0]),
        Err(Error::IdxTruncated { expected: 16, actual: 6 })
    ));
    assert!(matches!(parse_idx_labels(&[0, 0]), Err(Error::IdxTruncated { .. })));
}

#[test]
fn wrong_magic_is_reported() {
    let bytes = idx(0x0903, &[1, 1, 1], &[0]);
    assert!(matches!(parse_idx_images(&bytes), Err(Error::IdxMagic { found: 0x0903, .. })));
    let labels_as_images = idx(0x0801, &[1], &[4]);
    assert!(matches!(
        parse_idx_images(&labels_as_images),
        Err(Error::IdxMagic { expected: 0x0803, found: 0x0801 })
    ));
    let images_as_labels = idx(0x0803, &[1, 1, 1], &[4]);
    assert!(matches!(
        parse_idx_labels(&images_as_labels),
        Err(Error::IdxMagic { expected: 0x0801, found: 0x0803 })
    ));
}

#[test]
fn trailing_bytes_are_reported() {
    let bytes = idx(0x0801, &[2], &[1, 2, 3]);
    match parse_idx_labels(&bytes) {
        Err(Error::IdxDimensions(msg)) => assert!(msg.contains("trailing"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_mnist(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
}

#[test]
fn official_files_have_official_shapes() {
    let dir = mnist_or_skip!();
    let (train, test) = load_mnist(&dir).unwrap();
    assert_eq!(train.images.shape(), &[60_000, 28, 28]);
    assert_eq!(test.images.shape(), &[10_000, 28, 28]);
    assert_eq!(train.labels.len(), 60_000);
    assert_eq!(test.labels.len(), 10_000);
    assert!(train.labels.iter().chain(&test.labels).all(|&l| l < 10));
    // Known class totals of the test file.
    assert_eq!(
        test.class_counts(),
        [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]
    );
    let max = train.images.data().iter().cloned().fold(0.0f32, f32::max);
    assert_eq!(max, 1.0);
}

#[test]
fn corrupted_official_files_are_rejected() {
    let dir = mnist_or_skip!();
    let images = read_raw(&dir, MNIST_FILES[0]);
    let short = &images[..images.len() - 1];
    assert!(matches!(
        parse_idx_images(short),
        Err(Error::IdxTruncated { expected: 47_040_016, actual: 47_040_015 })
    ));
    let mut bad = images[..16 + 784].to_vec();
    bad[2] = 9;
    assert!(matches!(parse_idx_images(&bad), Err(Error::IdxMagic { .. })));
    let labels = read_raw(&dir, MNIST_FILES[1]);
    assert!(matches!(parse_idx_images(&labels), Err(Error::IdxMagic { .. })));
}

#[test]
fn split_is_seeded_and_partitions_the_training_file() {
    let dir = mnist_or_skip!();
    let (train, _) = load_mnist(&dir).unwrap();
    let (a, b) = split(&train, 0).unwrap();
    assert_eq!((a.len(), b.len()), (50_000, 10_000));
    assert_eq!((a.split, b.split), (Split::Train, Split::Val));
    assert!(b.class_counts().iter().all(|&c| c > 800));
    let (a2, _) = split(&train, 0).unwrap();
    assert_eq!(a.labels, a2.labels);
    let (a3, _) = split(&train, 1).unwrap();
    assert_ne!(a.labels, a3.labels);
    let total: usize = a.class_counts().iter().chain(b.class_counts().iter()).sum();
    assert_eq!(total, 60_000);
    assert_eq!(
        a.class_counts().iter().zip(b.class_counts()).map(|(x, y)| x + y).collect::<Vec<_>>(),
        train.class_counts().to_vec()
    );
}

#[test]
fn dataset_cache_round_trips() {
    let dir = mnist_or_skip!();
    let (_, test) = load_mnist(&dir).unwrap();
    let small = test.take(100);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("test100.ffcnn");
    dataset_checkpoint(&small).save(&path).unwrap();
    let back = restore_dataset(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back.images, small.images);
    assert_eq!(back.labels, small.labels);
    assert_eq!(back.split, Split::Test);
}
