use onlineaug_core::data::*;
use proptest::prelude::*;

fn labelled(labels: Vec<usize>, classes: usize) -> DatasetHandle {
    let n = labels.len();
    let images = (0..n * 4).map(|i| i as f64).collect();
    DatasetHandle::new("toy", "train", TaskKind::Classification, classes, (1, 2, 2), Normalization::None, images, labels).unwrap()
}

proptest! {
    #[test]
    fn stratified_reduction_properties(
        labels in prop::collection::vec(0usize..4, 1..200),
        frac in 0.0f64..=1.0,
        seed in 0u64..50,
    ) {
        let d = labelled(labels.clone(), 4);
        let n = (frac * d.len() as f64).round() as usize;
        let idx = stratified_indices(&d, n, seed).unwrap();
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < d.len()));
        prop_assert_eq!(&idx, &stratified_indices(&d, n, seed).unwrap());
        // every class gets its proportional share, rounded either way
        for c in 0..4 {
            let have = labels.iter().filter(|&&l| l == c).count();
            let got = idx.iter().filter(|&&i| labels[i] == c).count();
            let exact = n as f64 * have as f64 / d.len() as f64;
            prop_assert!((got as f64 - exact).abs() < 1.0 + 1e-9, "class {c}: {got} vs {exact}");
        }
        let (sub, same) = stratified_reduce(&d, n, seed).unwrap();
        prop_assert_eq!(&same, &idx);
        for (k, &i) in idx.iter().enumerate() {
            prop_assert_eq!(sub.image(k), d.image(i));
        }
    }
}

#[test]
fn oversized_reduction_fails() {
    assert!(stratified_indices(&labelled(vec![0, 1, 1], 2), 4, 0).is_err());
}

#[test]
fn different_seeds_pick_different_items() {
    let d = labelled((0..100).map(|i| i % 2).collect(), 2);
    assert_ne!(stratified_indices(&d, 20, 0).unwrap(), stratified_indices(&d, 20, 1).unwrap());
}

#[test]
fn index_lists_are_cached_as_text() {
    let root = tempfile::tempdir().unwrap();
    let d = labelled((0..30).map(|i| i % 3).collect(), 3);
    let a = reduce_cached(&d, 9, 4, root.path()).unwrap();
    let path = reduced_index_path(root.path(), "toy", 9, 4);
    let idx = read_indices(&path).unwrap();
    assert_eq!(idx, stratified_indices(&d, 9, 4).unwrap());
    // a hand-edited list wins over recomputation
    write_indices(&path, &[0, 1, 2]).unwrap();
    let b = reduce_cached(&d, 9, 4, root.path()).unwrap();
    assert_eq!(a.len(), 9);
    assert_eq!(b.len(), 3);
    assert!(matches!(read_indices(&root.path().join("missing.txt")), Err(onlineaug_core::Error::NotFound(_))));
}

#[test]
fn csv_directories_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let raw: Vec<f64> = (0..3 * 4).map(|i| 10.0 * i as f64).collect();
    let norm = Normalization::MeanStd { mean: 50.0, std: 25.0 };
    let images = raw.iter().map(|&v| norm.apply(v)).collect();
    let d = DatasetHandle::new("tiny", "test", TaskKind::Classification, 2, (1, 2, 2), norm, images, vec![0, 1, 1]).unwrap();
    save_dir(root.path(), &d, &raw).unwrap();
    assert_eq!(load_dir(root.path(), "tiny", "test").unwrap(), d);
    assert!(matches!(load_dir(root.path(), "tiny", "train"), Err(onlineaug_core::Error::NotFound(_))));
}

#[test]
fn segmentation_strata_use_the_largest_label() {
    let d = synthetic_shapes_dataset(60, 3, 16).unwrap();
    assert_eq!(d.task, TaskKind::Segmentation);
    for i in 0..d.len() {
        let m = d.label(i);
        assert_eq!(d.stratum(i), *m.iter().max().unwrap());
        // lesions are small relative to the organ holding them
        let lesion = m.iter().filter(|&&l| l == 2).count();
        let organ = m.iter().filter(|&&l| l == 1).count();
        assert!(lesion < organ, "item {i}: {lesion} lesion vs {organ} organ pixels");
    }
    let idx = stratified_indices(&d, 20, 0).unwrap();
    assert_eq!(idx.len(), 20);
}

#[test]
fn glyph_splits_are_deterministic_and_balanced() {
    let (a, t) = glyphs_splits(200, 50, 9, 16).unwrap();
    let (b, _) = glyphs_splits(200, 50, 9, 16).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.len(), t.len(), a.classes), (200, 50, 10));
    for c in 0..10 {
        assert!((0..a.len()).any(|i| a.label(i)[0] == c));
    }
}
