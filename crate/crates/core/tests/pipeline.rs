use jsa_tod::eval::{evaluate_split, EvalOptions, GoldStore, MetricsRow};
use jsa_tod::seqmodel::{load_model, save_model, SeqModel};
use jsa_tod::synthdata::{gen_split, mask_labels, read_jsonl, write_jsonl, World, WorldConfig};
use jsa_tod::trainer::{semi_supervised_train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(method: &str) -> TrainConfig {
    TrainConfig {
        method: method.into(),
        epochs_sup: 3,
        epochs_semi: 2,
        batch_size: 8,
        lr_max: 3e-2,
        max_latent_len: 14,
        early_stop_patience: 100,
        label_proportion: 0.2,
        ..TrainConfig::default()
    }
}

#[test]
fn generate_store_train_and_evaluate() {
    let world = World::new(WorldConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let train = gen_split(&world, 100, 4, "train");
    let valid = gen_split(&world, 20, 4, "valid");
    write_jsonl(world.vocab(), &train, &dir.path().join("train.jsonl")).unwrap();
    let train = read_jsonl(world.vocab(), &dir.path().join("train.jsonl")).unwrap();

    let cfg = config("jsa");
    let (masked, gold): (_, GoldStore) = mask_labels(&train, cfg.label_proportion, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(gold.len(), masked.iter().filter(|d| !d.labeled).count());

    let opts = EvalOptions::default();
    let mut epochs = Vec::new();
    let mut hook = |e: usize, p: &dyn SeqModel, q: &dyn SeqModel| {
        epochs.push(e);
        Ok(MetricsRow::from_split(e, "valid", &evaluate_split(&world, p, q, &valid, &opts)?))
    };
    let trained = semi_supervised_train(&cfg, world.vocab().clone(), &world, &masked, &mut hook, None).unwrap();
    assert_eq!(epochs, [1, 2, 3, 4, 5]);
    assert_eq!(trained.cache.len(), gold.len());
    assert!(!trained.grad_norms.is_empty());
    assert!(trained.grad_norms.iter().all(|g| g.is_finite()));

    let m = evaluate_split(&world, trained.p.as_ref(), trained.q.as_ref(), &valid, &opts).unwrap();
    let best = trained.report.rows.iter().find(|r| r.epoch == trained.best_epoch).unwrap();
    assert_eq!(m.combined, best.combined);
    assert!((0.0..=200.0).contains(&m.combined));

    save_model(trained.p.as_ref(), &dir.path().join("p.ckpt")).unwrap();
    let p = load_model(&dir.path().join("p.ckpt"), world.vocab().clone()).unwrap();
    assert_eq!(p.params(), trained.p.params());
}

#[test]
fn all_methods_train_on_the_same_data() {
    let world = World::new(WorldConfig::default()).unwrap();
    let train = gen_split(&world, 60, 9, "train");
    let valid = gen_split(&world, 10, 9, "valid");
    let opts = EvalOptions::default();
    for method in ["sup", "jsa", "var"] {
        let cfg = config(method);
        let (masked, _) = mask_labels(&train, cfg.label_proportion, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut hook = |e: usize, p: &dyn SeqModel, q: &dyn SeqModel| {
            Ok(MetricsRow::from_split(e, "valid", &evaluate_split(&world, p, q, &valid, &opts)?))
        };
        let trained = semi_supervised_train(&cfg, world.vocab().clone(), &world, &masked, &mut hook, None).unwrap();
        assert_eq!(trained.report.rows.len(), 5, "{method}");
        assert_eq!(trained.grad_norms.is_empty(), method == "sup", "{method}");
    }
}
