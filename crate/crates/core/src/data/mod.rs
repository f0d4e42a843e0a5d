//! Voxel grids, synthetic skull triplets and their on-disk formats.

mod grid;
mod io;
mod synth;

pub use grid::{downsample, BoundingBox, VoxelGrid, BINARIZE_THRESHOLD, MIN_EXTENT};
pub use io::{
    load_dataset, load_manifest, load_voxel_file, read_sidecar, save_dataset, save_voxel_file,
    sha256_hex, ByteEncoding, DatasetManifest, GeneratorInfo, SubjectEntry, VoxelSidecar,
    DATASET_MANIFEST,
};
pub use synth::{
    generate_synthetic_triplets, subject_id, DefectBoxes, ShapeClass, SkullTriplet,
    MIN_SYNTH_EXTENT,
};

/// Splits subjects into a leading training part (`train_fraction`, rounded)
/// and the held-out remainder, after a seeded shuffle.
pub fn split_subjects(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut crate::rng::stream(seed, u64::MAX));
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let n_train = n_train.clamp(usize::from(n > 1), n.saturating_sub(1).max(1));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_seeded() {
        let (train, test) = split_subjects(30, 0.8, 5);
        assert_eq!(train.len(), 24);
        assert_eq!(test.len(), 6);
        assert!(train.iter().all(|i| !test.contains(i)));
        assert_eq!(split_subjects(30, 0.8, 5), (train, test));
    }
}
