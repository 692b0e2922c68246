use std::fs;
use std::path::Path;

use agm_core::datapipe::{generate_synthetic, load_dataset, ImageSet, Layout, PkSampler, SynthConfig};
use agm_core::imaging::Modality;
use agm_core::AgmError;

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        num_identities: 4,
        images_per_identity: 3,
        seed,
        ..SynthConfig::default()
    }
}

fn file_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = agm_core::datapipe::collect_pngs(root)
        .unwrap()
        .into_iter()
        .map(|p| (p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn default_config_writes_four_hundred_images() {
    let dir = tempfile::tempdir().unwrap();
    let index = generate_synthetic(&SynthConfig::default(), dir.path()).unwrap();
    assert_eq!(index.len(), 400);
    assert_eq!(index.count(Modality::Visible), 200);
    assert_eq!(index.count(Modality::Infrared), 200);
    assert_eq!(index.num_classes(), 20);
}

#[test]
fn generation_is_byte_deterministic() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(&small(5), a.path()).unwrap();
    generate_synthetic(&small(5), b.path()).unwrap();
    generate_synthetic(&small(6), c.path()).unwrap();
    assert_eq!(file_bytes(a.path()), file_bytes(b.path()));
    assert_ne!(file_bytes(a.path()), file_bytes(c.path()));
    assert_eq!(
        fs::read(a.path().join("manifest.csv")).unwrap(),
        fs::read(b.path().join("manifest.csv")).unwrap()
    );
}

#[test]
fn collapsed_jitter_makes_infrared_copies_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        luminance_jitter: (1.0, 1.0),
        pose_jitter_px: 0,
        pixel_noise: 0.0,
        background_variation: 0.0,
        ..small(2)
    };
    let index = generate_synthetic(&cfg, dir.path()).unwrap();
    let set = ImageSet::load(index).unwrap();
    let ir = set.select(|r| r.modality == Modality::Infrared);
    for class in 0..ir.index.num_classes() as u32 {
        let imgs: Vec<_> = ir.images.iter().filter(|i| i.identity == class).collect();
        assert!(imgs.len() >= 2);
        assert!(imgs.windows(2).all(|w| w[0].pixels() == w[1].pixels()));
    }
}

#[test]
fn both_layouts_round_trip_counts_and_identities() {
    let dir = tempfile::tempdir().unwrap();
    let generated = generate_synthetic(&small(1), dir.path()).unwrap();
    assert_eq!(Layout::detect(dir.path()), Layout::FlatManifest);
    let from_dirs = load_dataset(dir.path(), Layout::IdDirs, true).unwrap();
    let from_manifest = load_dataset(dir.path(), Layout::FlatManifest, true).unwrap();
    for index in [&from_dirs, &from_manifest] {
        assert_eq!(index.len(), generated.len());
        assert_eq!(index.num_classes(), 4);
        assert_eq!(index.records, generated.records);
    }
    assert!(generated.records.iter().all(|r| r.camera.is_some()));
}

#[test]
fn manifest_with_missing_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let index = generate_synthetic(&small(1), dir.path()).unwrap();
    let victim = index.records[3].path.clone();
    fs::remove_file(&victim).unwrap();
    match load_dataset(dir.path(), Layout::FlatManifest, true) {
        Err(AgmError::MissingFile(p)) => assert_eq!(p, victim),
        other => panic!("expected missing file error, got {other:?}"),
    }
}

#[test]
fn identity_directories_are_remapped_in_sorted_order() {
    let dir = tempfile::tempdir().unwrap();
    let img = agm_core::imaging::Image::filled(6, 3, [10, 20, 30], Modality::Visible).unwrap();
    for id in ["42", "7", "9"] {
        for m in ["visible", "infrared"] {
            agm_core::imaging::write_png(&img, &dir.path().join(m).join(id).join("a.png")).unwrap();
        }
    }
    let index = load_dataset(dir.path(), Layout::IdDirs, true).unwrap();
    assert_eq!(index.original_ids, vec![7, 9, 42]);
    for r in &index.records {
        let expected = match r.original_id {
            7 => 0,
            9 => 1,
            _ => 2,
        };
        assert_eq!(r.identity, expected);
    }

    fs::remove_dir_all(dir.path().join("infrared").join("9")).unwrap();
    assert!(matches!(load_dataset(dir.path(), Layout::IdDirs, true), Err(AgmError::Data(_))));
    assert!(load_dataset(dir.path(), Layout::IdDirs, false).is_ok());
}

#[test]
fn every_sampled_batch_supports_triplet_mining() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        num_identities: 6,
        images_per_identity: 4,
        ..SynthConfig::default()
    };
    let index = generate_synthetic(&cfg, dir.path()).unwrap();
    let sampler = PkSampler::new(4, 4, 3).unwrap();
    for epoch in 0..5 {
        for batch in sampler.epoch(&index, epoch).unwrap() {
            let labels: Vec<u32> = batch.iter().map(|&i| index.records[i].identity).collect();
            let vectors = agm_autograd::Tensor::zeros(&[labels.len(), 2]);
            assert!(agm_core::losses::hard_pairs(&vectors, &labels).is_ok());
        }
    }
}
