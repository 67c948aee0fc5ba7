use std::fs;

use candle_core::{DType, Device};
use mtml_rsc::checkpoint::read_checkpoint;
use mtml_rsc::data::{toy_subset, Split};
use mtml_rsc::train::{checkpoint_path, load_for_eval, train, TrainPlan};
use mtml_rsc::{Error, ExperimentConfig, ModuleGroup, RelaySystem, Scheme};

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        image_size: 16,
        widths: [8, 16],
        blocks: [1, 1],
        window_size: Some(2),
        epochs: [1, 1, 1],
        batch_size: 4,
        ..Default::default()
    }
}

fn values(sys: &RelaySystem, g: ModuleGroup) -> Vec<Vec<f32>> {
    sys.store(g)
        .vars()
        .iter()
        .map(|v| v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap())
        .collect()
}

#[test]
fn later_stages_resume_from_earlier_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_subset(2, 4, 16, 0, Split::Train).unwrap();
    let mut first = RelaySystem::new(&tiny(), DType::F32, &Device::Cpu).unwrap();
    let plan = |stages: Vec<u8>| TrainPlan {
        stages,
        schemes: Scheme::ALL.to_vec(),
    };
    train(&mut first, &data, &plan(vec![1, 2]), dir.path()).unwrap();

    // A different seed would give different fresh weights; loading must overwrite the frozen ones.
    let cfg = ExperimentConfig { seed: 9, ..tiny() };
    let mut second = RelaySystem::new(&cfg, DType::F32, &Device::Cpu).unwrap();
    let fresh_mtml = values(&second, ModuleGroup::MtmlDestination);
    train(&mut second, &data, &plan(vec![3]), dir.path()).unwrap();
    for g in [ModuleGroup::SourceRelayCodec, ModuleGroup::RelayClassifier] {
        assert_eq!(values(&first, g), values(&second, g), "{g:?} not restored");
    }
    assert_ne!(fresh_mtml, values(&second, ModuleGroup::MtmlDestination));

    let mut third = RelaySystem::new(&tiny(), DType::F32, &Device::Cpu).unwrap();
    load_for_eval(&mut third, &Scheme::ALL, dir.path()).unwrap();
    for g in ModuleGroup::ALL {
        assert_eq!(values(&second, g), values(&third, g));
    }
}

#[test]
fn evaluation_requires_trained_groups() {
    let dir = tempfile::tempdir().unwrap();
    let mut sys = RelaySystem::new(&tiny(), DType::F32, &Device::Cpu).unwrap();
    let err = load_for_eval(&mut sys, &[Scheme::Baseline], dir.path()).unwrap_err();
    assert!(matches!(err, Error::StageOrder(_)), "{err}");
}

#[test]
fn schema_version_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_subset(2, 4, 16, 0, Split::Train).unwrap();
    let mut sys = RelaySystem::new(&tiny(), DType::F32, &Device::Cpu).unwrap();
    let plan = TrainPlan {
        stages: vec![1],
        schemes: vec![],
    };
    train(&mut sys, &data, &plan, dir.path()).unwrap();
    let path = checkpoint_path(dir.path(), ModuleGroup::SourceRelayCodec);
    assert!(read_checkpoint(&path, &Device::Cpu).is_ok());

    let bytes = fs::read(&path).unwrap();
    let needle = br#""schema_version":"1""#;
    let at = bytes.windows(needle.len()).position(|w| w == needle).expect("version key in header");
    let mut patched = bytes.clone();
    patched[at + needle.len() - 2] = b'7';
    fs::write(&path, patched).unwrap();
    let err = read_checkpoint(&path, &Device::Cpu).unwrap_err();
    assert!(err.to_string().contains("schema version 7"), "{err}");
}

#[test]
fn trainable_groups_are_disjoint_variables() {
    let sys = RelaySystem::new(&tiny(), DType::F32, &Device::Cpu).unwrap();
    let mut ids = std::collections::HashSet::new();
    let mut total = 0;
    for g in ModuleGroup::ALL {
        for v in sys.store(g).vars() {
            ids.insert(v.as_tensor().id());
            total += 1;
        }
    }
    assert_eq!(ids.len(), total);
}
