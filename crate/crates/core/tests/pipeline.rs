use lpt_core::config::RunConfig;
use lpt_core::data::{load_manifest, Split};
use lpt_core::distortion::EvalProfile;
use lpt_core::metrics::{evaluate, EvalSettings};
use lpt_core::model::Model;
use lpt_core::synth::generate;
use lpt_core::train::train;

fn settings(cfg: &RunConfig, seed: u64) -> EvalSettings {
    EvalSettings {
        seed,
        norm: cfg.data.clone(),
        tables: cfg.distortion.tables.clone(),
        batch_size: 5,
        threshold: 0.5,
        corrector: true,
    }
}

#[test]
fn train_save_load_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(6, dir.path(), 11, Split::Train).unwrap();
    let index = load_manifest(&manifest, None).unwrap();
    assert_eq!(index.len(), 12);

    let mut cfg = RunConfig::toy();
    cfg.seed = 21;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 5;
    let out = train(&cfg, &index, Some(&index), None).unwrap();
    // ceil(12 / 5) batches per epoch
    assert_eq!(out.steps.len(), 6);
    assert_eq!(out.validations.len(), 2);
    assert!(out.steps.iter().all(|s| s.total.is_finite()));

    let ckpt = dir.path().join("m.ckpt");
    out.last.save(&ckpt).unwrap();
    let loaded = Model::load(&ckpt).unwrap();

    let profiles = cfg.eval.resolve(&["clean".into(), "hard".into()]).unwrap();
    let a = evaluate(&out.last, &index, &profiles, &settings(&cfg, 3)).unwrap();
    let b = evaluate(&loaded, &index, &profiles, &settings(&cfg, 3)).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.per_profile["clean"].n, 12);
    assert_eq!(a.n, 24);
}

#[test]
fn eval_batch_size_does_not_change_scores() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(4, dir.path(), 2, Split::Test).unwrap();
    let index = load_manifest(&manifest, None).unwrap();
    let cfg = RunConfig::toy();
    let model = Model::new(cfg.model.clone(), 1).unwrap();
    let profiles = vec![EvalProfile::clean(), EvalProfile::hard(1, 3)];
    let mut s = settings(&cfg, 8);
    let a = evaluate(&model, &index, &profiles, &s).unwrap();
    s.batch_size = 3;
    let b = evaluate(&model, &index, &profiles, &s).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}
