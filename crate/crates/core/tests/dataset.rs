use rtcan_core::data::{load_manifest, load_pair, make_split, Split};
use rtcan_core::synth::{distractor_path, generate_dataset, generate_pair, synth_id, Difficulty, SynthOptions};

#[test]
fn generated_dataset_round_trips_through_the_loader() {
    let dir = tempfile::tempdir().unwrap();
    let opts = SynthOptions {
        count: 4,
        seed: 12,
        difficulty: Difficulty::Hard,
        height: 64,
        width: 96,
    };
    generate_dataset(dir.path(), &opts).unwrap();
    let manifest = load_manifest(dir.path()).unwrap();
    assert_eq!(manifest.entries.len(), 4);
    assert!(manifest.entries.iter().all(|e| e.split == Split::Unassigned));

    for i in 0..4 {
        let id = synth_id(i);
        let loaded = load_pair(&manifest, &id).unwrap();
        let fresh = generate_pair(i, &opts).unwrap();
        assert_eq!(loaded, fresh.pair);
        assert_eq!(loaded.size(), (64, 96));
        let regions = image::open(distractor_path(dir.path(), &id)).unwrap().to_luma8();
        assert!(regions.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
        assert!(regions
            .pixels()
            .zip(fresh.distractor_regions.pixels())
            .all(|(a, b)| (a.0[0] == 255) == (b.0[0] == 1)));
    }
}

#[test]
fn split_survives_save_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let opts = SynthOptions {
        count: 12,
        seed: 1,
        height: 32,
        width: 32,
        ..Default::default()
    };
    let m = generate_dataset(dir.path(), &opts).unwrap();
    let split = make_split(&m, 0.75, 0.2, 5).unwrap();
    assert_eq!(split.ids(Split::Test).len(), 3);
    assert_eq!(split.ids(Split::Val).len(), 2);
    assert_eq!(split.ids(Split::Train).len(), 7);
    split.save().unwrap();
    let back = load_manifest(dir.path()).unwrap();
    assert_eq!(back, split);
    assert_eq!(back.content_hash(), split.content_hash());
    assert_ne!(back.content_hash(), m.content_hash());
}
