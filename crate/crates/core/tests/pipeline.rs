use std::collections::BTreeMap;

use tecnet::data::synth::{generate, SynthSpec};
use tecnet::data::{load_dir, synthesize};
use tecnet::model::{checkpoint, TecNet, TecNetConfig};
use tecnet::train::trainer::predict;
use tecnet::train::{train, TrainOptions};

#[test]
fn disk_and_memory_datasets_agree() {
    let spec = SynthSpec::new(21, 4, 64);
    let dir = tempfile::tempdir().unwrap();
    generate(&spec, dir.path()).unwrap();
    let disk = load_dir(dir.path()).unwrap();
    let mem = synthesize(&spec, 0..4).unwrap();
    assert_eq!(disk.len(), mem.len());
    for (a, b) in disk.iter().zip(&mem) {
        assert_eq!(a.index, b.index);
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }
}

#[test]
fn trained_checkpoint_predicts_identically_after_reload() {
    let mut cfg = TecNetConfig::nano();
    cfg.layer_numbers = [1; 7];
    let data = synthesize(&SynthSpec::new(5, 3, 64), 0..3).unwrap();
    let (net, mut store) = TecNet::build(&cfg, 9).unwrap();
    let opts = TrainOptions::for_steps(2, 2, 2, 9);
    let report = train(&net, &mut store, &data[..2], &data[2..], &opts, None).unwrap();
    assert_eq!(report.steps.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &cfg, &store, &BTreeMap::new()).unwrap();
    let (net2, store2, _) = checkpoint::load(dir.path(), Some(&cfg)).unwrap();
    assert_eq!(store, store2);

    let a = predict(&net, &store, &data, 0.5).unwrap();
    let b = predict(&net2, &store2, &data, 0.5).unwrap();
    for ((ma, la), (mb, lb)) in a.iter().zip(&b) {
        assert_eq!(ma.data, mb.data);
        assert_eq!(la, lb);
    }
}
