use sde_fim::datagen::{generate_dataset, CorruptionConfig, Dataset, PriorConfig};
use sde_fim::eval::{canonical_system, field_estimate, mmd_protocol, mse_on_grid, ProtocolConfig, CATALOG};
use sde_fim::model::{infer, Checkpoint, ModelField};
use sde_fim::normalize::{fit_and_normalize, NormalizedField, RenormalizedField};
use sde_fim::sde::simulate;
use sde_fim::training::{TrainConfig, Trainer};
use sde_fim::{ModelConfig, ModelParams, ObservationSet, SeedTree, SimulationGrid, VectorField};

fn small_model() -> ModelConfig {
    ModelConfig { hidden: 16, trunk_depth: 1, heads: 2, ..ModelConfig::default() }
}

#[test]
fn dataset_to_checkpoint_to_estimate() {
    let prior = PriorConfig::desk();
    let ds = generate_dataset(&prior, &CorruptionConfig::default(), 12, 4).unwrap();
    assert_eq!(ds.records.len(), 12);
    let again = Dataset::from_bytes(&ds.to_bytes()).unwrap();
    assert_eq!(again.records, ds.records);

    let cfg = TrainConfig { batch_size: 3, context_min: 8, context_max: 48, locations: 6, lr: 1e-3, ..TrainConfig::default() };
    let params = ModelParams::init(&small_model(), SeedTree::new(1)).unwrap();
    let mut trainer = Trainer::new(params, cfg, &ds.records).unwrap();
    for _ in 0..3 {
        assert!(trainer.step_once().unwrap().l1.is_finite());
    }
    let ck = Checkpoint { params: trainer.params.clone(), step: trainer.step, seed: 4, extra: serde_json::Value::Null, optimizer: None };
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back.params.values, trainer.params.values);

    for rec in ds.records.iter().take(4) {
        let (set, _) = ObservationSet::from_bundle(&rec.corrupted).unwrap();
        let d = rec.system.dim();
        let locs: Vec<Vec<f64>> = (0..5).map(|k| vec![0.1 * k as f64; d]).collect();
        let est = infer(&back.params, &set, &locs).unwrap();
        assert_eq!(est.drift.len(), 5 * d);
        assert!(est.amplitude.iter().all(|a| *a >= 0.0 && a.is_finite()));
    }
}

#[test]
fn model_field_agrees_with_infer() {
    let entry = canonical_system("hopf").unwrap();
    let ctx = entry.simulate_plan(&sde_fim::eval::ObservationPlan { paths: 2, observations: 200, obs_gap: 0.01 }, &entry.initial, SeedTree::new(2)).unwrap();
    let (set, _) = ObservationSet::from_bundle(&ctx).unwrap();
    let params = ModelParams::init(&small_model(), SeedTree::new(3)).unwrap();
    let locs = vec![vec![0.3, -0.2], vec![1.0, 1.5]];
    let est = infer(&params, &set, &locs).unwrap();
    let field = ModelField::new(&params, &set).unwrap();
    let mut f = vec![0.0; 4];
    let mut a = vec![0.0; 4];
    field.evaluate(&locs.concat(), &mut f, &mut a);
    for k in 0..4 {
        assert!((f[k] - est.drift[k]).abs() < 1e-9 * (1.0 + f[k].abs()));
        assert!((a[k] - est.amplitude[k]).abs() < 1e-9 * (1.0 + a[k].abs()));
    }
}

#[test]
fn normalization_views_are_inverse() {
    let entry = canonical_system("duffing").unwrap();
    let grid = SimulationGrid::new(0.01, 300).unwrap();
    let b = simulate(&entry.system, &grid, &[vec![1.0, 0.5]], SeedTree::new(5)).unwrap();
    let (set, _) = ObservationSet::from_bundle(&b).unwrap();
    let (_, rec) = fit_and_normalize(&set).unwrap();
    let there = NormalizedField { inner: &entry.system, record: &rec };
    let back = RenormalizedField { inner: &there, record: &rec };
    let x = [0.7, -1.1, 2.0, 0.3];
    let (mut f0, mut a0, mut f1, mut a1) = (vec![0.0; 4], vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]);
    entry.system.evaluate(&x, &mut f0, &mut a0);
    back.evaluate(&x, &mut f1, &mut a1);
    for k in 0..4 {
        assert!((f0[k] - f1[k]).abs() < 1e-12 * (1.0 + f0[k].abs()));
        assert!((a0[k] - a1[k]).abs() < 1e-12 * (1.0 + a0[k].abs()));
    }
}

#[test]
fn catalog_truth_scores_zero_and_protocol_runs() {
    for name in CATALOG {
        let entry = canonical_system(name).unwrap();
        let grid = entry.eval_grid(64).unwrap();
        let est = field_estimate(&entry.system, &grid.points()).unwrap();
        let mse = mse_on_grid(&est, &entry.system, &grid).unwrap();
        assert_eq!((mse.drift, mse.diffusion), (0.0, 0.0), "{name}");
    }
    let entry = canonical_system("damped-linear").unwrap();
    let reference = entry
        .simulate_plan(&sde_fim::eval::ObservationPlan { paths: 8, observations: 15, obs_gap: 0.02 }, &entry.initial, SeedTree::new(6))
        .unwrap();
    let r = mmd_protocol(&entry.system, &reference, &ProtocolConfig::default(), SeedTree::new(7)).unwrap();
    assert!(r.mmd2.is_finite() && r.biased >= 0.0);
    assert_eq!((r.paths, r.observations, r.diverged), (8, 15, 0));
}
