mod common;

use common::suites;
use mpgan::voxel::{mirror_symmetric, HalfGrid, VoxelGrid, VOXEL_MAGIC};
use mpgan::Error;

#[test]
fn symmetry_suite_passes() {
    suites::symmetry_suite(256).unwrap();
}

#[test]
fn mirrored_halves_keep_their_values() {
    let n = 6;
    let data: Vec<f32> = (0..n / 2 * n * n).map(|i| (i % 7) as f32 / 6.0).collect();
    let half = HalfGrid::from_vec(n, data).unwrap();
    let g = mirror_symmetric(&half);
    for x in 0..n / 2 {
        for y in 0..n {
            for z in 0..n {
                assert_eq!(g.get(x, y, z), half.get(x, y, z));
                assert_eq!(g.get(n - 1 - x, y, z), half.get(x, y, z));
            }
        }
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let g = suites::random_binary_grid(8, 0.3, 1);
    let mut bytes = Vec::new();
    g.write_to(&mut bytes).unwrap();
    assert_eq!(&bytes[..8], VOXEL_MAGIC);
    assert_eq!(VoxelGrid::read_from(bytes.as_slice()).unwrap(), g);

    let truncated = &bytes[..bytes.len() - 3];
    assert!(VoxelGrid::read_from(truncated).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(VoxelGrid::read_from(magic.as_slice()), Err(Error::Malformed(_))));
    let mut range = bytes.clone();
    let at = range.len() - 4;
    range[at..].copy_from_slice(&2.0f32.to_le_bytes());
    assert!(VoxelGrid::read_from(range.as_slice()).is_err());

    let dir = tempfile::tempdir().unwrap();
    assert!(VoxelGrid::load(dir.path().join("missing.mpgvox")).is_err());
}

#[test]
fn grids_validate_shape_and_range() {
    assert!(VoxelGrid::from_vec(4, vec![0.0; 63]).is_err());
    assert!(VoxelGrid::from_vec(2, vec![f32::NAN; 8]).is_err());
    assert!(VoxelGrid::from_vec(2, vec![-0.1; 8]).is_err());
    let clamped = VoxelGrid::from_vec_clamped(2, vec![-1.0, 2.0, 0.5, 0.0, 1.0, 0.25, 3.0, -0.0]).unwrap();
    assert!(clamped.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(HalfGrid::zeros(5).is_err());
}
