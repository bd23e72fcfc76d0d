use dasm::analysis::pad_matrix;
use dasm::model::{EncoderClassifier, ModelConfig};
use dasm::optim::{OptimizerKind, TrainConfig};
use dasm::par::Exec;
use dasm::synth::{gen_feature_benchmark, BenchmarkConfig};
use dasm::train::{evaluate, train};

fn small() -> BenchmarkConfig {
    BenchmarkConfig { embedding_rates: vec![0.3], per_cell: 120, ..Default::default() }
}

#[test]
fn generation_does_not_depend_on_execution_mode() {
    let a = gen_feature_benchmark(&small(), Exec::Parallel).unwrap();
    let b = gen_feature_benchmark(&small(), Exec::Sequential).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pad_matrix_does_not_depend_on_execution_mode() {
    let sp = gen_feature_benchmark(&small(), Exec::Sequential).unwrap().remove(0);
    let par = pad_matrix(None, &sp.train, &sp.domain_names, sp.er, 3, Exec::Parallel).unwrap();
    let seq = pad_matrix(None, &sp.train, &sp.domain_names, sp.er, 3, Exec::Sequential).unwrap();
    assert_eq!(par, seq);
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let sp = gen_feature_benchmark(&small(), Exec::Sequential).unwrap().remove(0);
    let cfg = TrainConfig { optimizer: OptimizerKind::Dasm, epochs: 3, seed: 9, ..Default::default() };
    let run = || train(EncoderClassifier::new(ModelConfig::default()).unwrap(), &sp, &cfg, "r").unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.report.without_timing(), b.report.without_timing());
    assert_eq!(a.model.params().flatten(), b.model.params().flatten());
    assert_eq!(a.report.counts.forward, a.report.counts.backward);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    a.model.save_checkpoint(&path, Some(&a.bank), 7).unwrap();
    let ck = EncoderClassifier::load_checkpoint(&path).unwrap();
    assert_eq!(ck.step, 7);
    assert_eq!(ck.model.params().flatten(), a.model.params().flatten());
    let e1 = evaluate(&a.model, &sp.test, 4).unwrap();
    let e2 = evaluate(&ck.model, &sp.test, 4).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1, a.report.test);
}

#[test]
fn truncated_checkpoint_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    EncoderClassifier::new(ModelConfig::default()).unwrap().save_checkpoint(&path, None, 0).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 12]).unwrap();
    assert!(matches!(EncoderClassifier::load_checkpoint(&path), Err(dasm::Error::Input(_))));
}
