mod common;

use common::*;
use rulens::archive::Dataset;
use rulens::checkpoint::{read_member, reusable_member, write_member, Checkpoint, MemberSpec};
use rulens::config::{Preset, RunConfig};
use rulens_core::cmapss::PreprocessConfig;
use rulens_core::ensemble::train_ensemble;

fn small_preprocess() -> PreprocessConfig {
    PreprocessConfig {
        window_length: 30,
        ..PreprocessConfig::default()
    }
}

fn dataset(ws: &Workspace) -> Dataset {
    let (train, test, rul) = ws.write_fleet("A", &fleet(3, 6, 3, (25, 60), 0.0));
    Dataset::ingest(&train, Some(&test), Some(&rul), &small_preprocess()).unwrap()
}

#[test]
fn archive_round_trips_bit_exactly() {
    let ws = Workspace::new();
    let ds = dataset(&ws);
    let dir = ws.path("archive");
    ds.write(&dir).unwrap();
    let back = Dataset::read(&dir).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.split, ds.split);
    assert_eq!(ds.manifest.feature_names.len(), 17);
    assert_eq!(ds.manifest.sources.len(), 3);
    for u in &back.split.test_units {
        assert!(u.true_final_rul.is_some());
    }
    let skipped = &ds.manifest.skipped_train_units;
    for u in &ds.manifest.train_units {
        assert_eq!(skipped.contains(&u.unit_id), u.cycles < 30);
    }
}

#[test]
fn corrupt_archives_are_refused() {
    let ws = Workspace::new();
    let ds = dataset(&ws);
    let dir = ws.path("archive");
    ds.write(&dir).unwrap();
    let arrays = dir.join("arrays.bin");
    let mut bytes = std::fs::read(&arrays).unwrap();
    bytes[40] ^= 1;
    std::fs::write(&arrays, &bytes).unwrap();
    let err = Dataset::read(&dir).unwrap_err();
    assert!(format!("{err:#}").contains("checksum"));
    assert_eq!(rulens::exit_code(&err), 2);

    ds.write(&dir).unwrap();
    let manifest = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replacen("\"rul_cap\": 128", "\"rul_cap\": 127", 1)).unwrap();
    assert!(format!("{:#}", Dataset::read(&dir).unwrap_err()).contains("fingerprint"));
}

#[test]
fn checkpoint_round_trips_and_detects_tampering() {
    let ws = Workspace::new();
    let ds = dataset(&ws);
    let mut config = RunConfig::resolve(Preset::Desk, None, &[]).unwrap();
    config.model.recurrent_layers = vec![3];
    config.training.max_epochs = 2;
    config.ensemble.members = 2;
    let arch = config.model.architecture(ds.layout().len()).unwrap();
    let (model, histories) = train_ensemble(&arch, &ds.split.train, &config.training, 237, 2).unwrap();
    let dir = ws.path("ck");
    std::fs::create_dir_all(&dir).unwrap();
    let mut members = Vec::new();
    for (k, (p, h)) in model.members.iter().zip(&histories).enumerate() {
        let spec = MemberSpec {
            index: k,
            seed: p.seed,
            architecture: arch.clone(),
            training: config.training.clone(),
            data_fingerprint: ds.fingerprint().to_string(),
        };
        write_member(&dir, &spec, p, h).unwrap();
        assert!(reusable_member(&dir, &spec).is_some());
        let other = MemberSpec {
            seed: spec.seed + 100,
            ..spec.clone()
        };
        assert!(reusable_member(&dir, &other).is_none());
        members.push((p.clone(), h.clone()));
    }
    let written = Checkpoint::write(
        &dir,
        &config,
        &arch,
        &ds.split.norm_stats,
        &ds.manifest.norm_fingerprint,
        ds.fingerprint(),
        members,
    )
    .unwrap();
    let back = Checkpoint::read(&dir).unwrap();
    assert_eq!(back.model, model);
    assert_eq!(back.histories, histories);
    assert_eq!(back.fingerprint(), written.fingerprint());
    assert_eq!(back.manifest.member_seeds, vec![237, 238]);

    let params = dir.join("member_001/params.bin");
    let mut bytes = std::fs::read(&params).unwrap();
    bytes[0] ^= 0x80;
    std::fs::write(&params, &bytes).unwrap();
    assert!(read_member(&dir, 1).is_err());
    let err = Checkpoint::read(&dir).unwrap_err();
    assert!(format!("{err:#}").contains("checksum"), "{err:#}");
    assert_eq!(rulens::exit_code(&err), 2);
}
