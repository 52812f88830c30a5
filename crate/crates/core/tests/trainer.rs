use gcl_core::contrastive::{build_pairs, AuxStrategy, ContrastiveSet};
use gcl_core::model::{Architecture, ExpFamHead, FeatureNet, HeadKind, Model};
use gcl_core::numerics::SeededRng;
use gcl_core::synthdata::gen_segmented_sources;
use gcl_core::trainer::{evaluate, grad_check, train, Optimizer, TrainConfig, TrainError};

fn segmented_set(seed: u64) -> ContrastiveSet {
    let mut rng = SeededRng::new(seed);
    let mut ds = gen_segmented_sources(2, 4096, 8, &mut rng).unwrap();
    ds.observations = ds.sources.clone();
    build_pairs(&ds, &AuxStrategy::SegmentLabel { one_hot: true }, &mut rng).unwrap()
}

fn model_for(cs: &ContrastiveSet, seed: u64) -> Model {
    let arch = Architecture {
        features: FeatureNet::standard(2),
        head: HeadKind::ExpFam(ExpFamHead {
            k: 1,
            n_classes: cs.n_classes.unwrap(),
            a_width: 8,
        }),
    };
    Model::new(arch, &mut SeededRng::new(seed)).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 128,
        lr: 3e-3,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_is_the_identity() {
    let cs = segmented_set(1);
    let mut model = model_for(&cs, 2);
    let before = model.params().to_vec();
    let cfg = TrainConfig { lr: 0.0, ..quick(3) };
    let trace = train(&mut model, &cs, &cfg).unwrap();
    assert_eq!(model.params(), &before[..]);
    assert_eq!(trace.final_accuracy, trace.initial_accuracy);
    assert_eq!(trace.final_loss, trace.initial_loss);
}

#[test]
fn equal_seeds_give_bit_identical_parameters() {
    let cs = segmented_set(1);
    let mut a = model_for(&cs, 2);
    let mut b = model_for(&cs, 2);
    let ta = train(&mut a, &cs, &quick(3)).unwrap();
    let tb = train(&mut b, &cs, &quick(3)).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(ta.without_timing(), tb.without_timing());
}

#[test]
fn different_training_seed_changes_the_path() {
    let cs = segmented_set(1);
    let mut a = model_for(&cs, 2);
    let mut b = model_for(&cs, 2);
    train(&mut a, &cs, &quick(2)).unwrap();
    train(&mut b, &cs, &TrainConfig { seed: 5, ..quick(2) }).unwrap();
    assert_ne!(a.params(), b.params());
}

#[test]
fn training_beats_chance_on_nonstationary_sources() {
    let cs = segmented_set(3);
    let mut model = model_for(&cs, 7);
    let trace = train(&mut model, &cs, &quick(15)).unwrap();
    assert!(trace.final_loss < trace.initial_loss);
    assert!(trace.final_accuracy > 0.6, "accuracy {}", trace.final_accuracy);
    let (loss, acc) = evaluate(&model, &cs, quick(1).l2).unwrap();
    assert_eq!((loss, acc), (trace.final_loss, trace.final_accuracy));
}

#[test]
fn exploding_updates_are_reported_as_divergence() {
    let cs = segmented_set(1);
    let mut model = model_for(&cs, 2);
    let cfg = TrainConfig {
        lr: 1e4,
        optimizer: Optimizer::Sgd { momentum: 0.9 },
        ..quick(5)
    };
    match train(&mut model, &cs, &cfg) {
        Err(TrainError::Divergence { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn trace_csv_has_one_row_per_epoch() {
    let cs = segmented_set(1);
    let mut model = model_for(&cs, 2);
    let trace = train(&mut model, &cs, &quick(4)).unwrap();
    let csv = trace.to_csv();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn grad_check_passes_on_a_trained_model() {
    let cs = segmented_set(1);
    let mut model = model_for(&cs, 2);
    train(&mut model, &cs, &quick(2)).unwrap();
    let rows: Vec<usize> = (0..64).chain(cs.half_len()..cs.half_len() + 64).collect();
    let batch = cs.batch(&rows);
    let report = grad_check(&model, &batch, 1e-4, 100, 1e-5, &mut SeededRng::new(8)).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{}", report.max_rel_error);
    assert_eq!(report.entries.len() + report.excluded, 100);
}
