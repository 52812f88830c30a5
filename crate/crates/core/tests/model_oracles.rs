//! The model checked against a straight-line re-implementation that reads
//! parameters by block name, and against central differences.

use gcl_core::contrastive::Batch;
use gcl_core::model::{
    load_checkpoint, save_checkpoint, Architecture, ExpFamHead, FeatureNet, GeneralHead, HeadKind, Model,
    OutputActivation, ParamRole,
};
use gcl_core::numerics::{finite_diff_grad, Matrix, SeededRng};
use proptest::prelude::*;

fn block<'a>(m: &'a Model, name: &str) -> (&'a [f64], usize, usize) {
    let b = m
        .blocks()
        .iter()
        .find(|b| b.name == name)
        .unwrap_or_else(|| panic!("no block {name}"));
    (&m.params()[b.range()], b.rows, b.cols)
}

fn dense(m: &Model, name: &str, x: &[f64]) -> Vec<f64> {
    let (w, rows, cols) = block(m, &format!("{name}.weight"));
    let (b, _, _) = block(m, &format!("{name}.bias"));
    assert_eq!(cols, x.len(), "{name}");
    (0..rows)
        .map(|o| b[o] + (0..cols).map(|i| w[o * cols + i] * x[i]).sum::<f64>())
        .collect()
}

fn softplus_ref(a: f64) -> f64 {
    if a > 30.0 {
        a
    } else {
        a.exp().ln_1p()
    }
}

fn oracle_features(m: &Model, x: &[f64]) -> Vec<f64> {
    let f = &m.arch().features;
    let mut act = x.to_vec();
    for l in 0..f.hidden_layers {
        let z = dense(m, &format!("features.{l}"), &act);
        act = z
            .chunks(f.maxout_group)
            .map(|g| g.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
    }
    let out = dense(m, "features.out", &act);
    match f.output {
        OutputActivation::Abs => out.iter().map(|v| v.abs()).collect(),
        OutputActivation::Identity => out,
    }
}

fn oracle_head(m: &Model, h: &[f64], u: &[f64], class: Option<usize>) -> f64 {
    match &m.arch().head {
        HeadKind::General(_) => (0..h.len())
            .map(|i| {
                let mut input = vec![h[i]];
                input.extend_from_slice(u);
                let a1: Vec<f64> = dense(m, &format!("psi.{i}.0"), &input).into_iter().map(softplus_ref).collect();
                let a2: Vec<f64> = dense(m, &format!("psi.{i}.1"), &a1).into_iter().map(softplus_ref).collect();
                dense(m, &format!("psi.{i}.out"), &a2)[0]
            })
            .sum(),
        HeadKind::ExpFam(e) => {
            let c = class.expect("class");
            let (v, _, cols) = block(m, "v_table");
            let (b, _, _) = block(m, "b_table");
            let mut r = b[c];
            for (i, &hi) in h.iter().enumerate() {
                for j in 0..e.k {
                    r += v[c * cols + i * e.k + j] * hi.powi(j as i32 + 1);
                }
            }
            let a1: Vec<f64> = dense(m, "a.0", h).into_iter().map(softplus_ref).collect();
            r + dense(m, "a.out", &a1)[0]
        }
    }
}

fn oracle_loss(m: &Model, batch: &Batch, l2: f64) -> f64 {
    let rows = batch.x.nrows();
    let mut total = 0.0;
    for r in 0..rows {
        let x = batch.x.row(r).to_vec();
        let u = batch.u.row(r).to_vec();
        let h = oracle_features(m, &x);
        let reg = oracle_head(m, &h, &u, batch.aux_class.as_ref().map(|c| c[r]));
        let y = batch.labels[r];
        total += y * softplus_ref(-reg) + (1.0 - y) * softplus_ref(reg);
    }
    let penalty: f64 = m
        .blocks()
        .iter()
        .filter(|b| b.role == ParamRole::Weight)
        .flat_map(|b| m.params()[b.range()].iter())
        .map(|w| w * w)
        .sum();
    total / rows as f64 + 0.5 * l2 * penalty
}

fn general_arch(n: usize, m: usize) -> Architecture {
    Architecture {
        features: FeatureNet::standard(n),
        head: HeadKind::General(GeneralHead { aux_dim: m, width: 6 }),
    }
}

fn expfam_arch(n: usize, k: usize, classes: usize) -> Architecture {
    Architecture {
        features: FeatureNet::standard(n),
        head: HeadKind::ExpFam(ExpFamHead {
            k,
            n_classes: classes,
            a_width: 5,
        }),
    }
}

fn random_batch(rows: usize, n: usize, m: usize, classes: Option<usize>, rng: &mut SeededRng) -> Batch {
    let x = Matrix::from_shape_fn((rows, n), |_| rng.normal());
    let u = Matrix::from_shape_fn((rows, m), |_| rng.uniform());
    let aux_class = classes.map(|k| (0..rows).map(|_| rng.index(k)).collect());
    let labels = (0..rows).map(|r| if r < rows / 2 { 1.0 } else { 0.0 }).collect();
    Batch { x, u, aux_class, labels }
}

/// Inflates head weights so the head is far from linear.
fn perturbed(arch: Architecture, seed: u64) -> Model {
    let mut rng = SeededRng::new(seed);
    let mut model = Model::new(arch, &mut rng).unwrap();
    for p in model.params_mut() {
        *p += 0.3 * rng.normal();
    }
    model
}

#[test]
fn general_model_matches_oracle() {
    let model = perturbed(general_arch(3, 2), 1);
    let mut rng = SeededRng::new(2);
    for _ in 0..20 {
        let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let u = [rng.uniform(), rng.uniform()];
        let h = model.feature_forward(&x).unwrap();
        let h_ref = oracle_features(&model, &x);
        for (a, b) in h.iter().zip(&h_ref) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
        let r = model.head_forward(&h, &u, None).unwrap();
        let r_ref = oracle_head(&model, &h_ref, &u, None);
        assert!((r - r_ref).abs() <= 1e-11 * (1.0 + r_ref.abs()), "{r} vs {r_ref}");
    }
}

#[test]
fn expfam_model_matches_oracle() {
    let model = perturbed(expfam_arch(4, 3, 5), 3);
    let mut rng = SeededRng::new(4);
    let batch = random_batch(16, 4, 5, Some(5), &mut rng);
    let r = model.regression(&batch).unwrap();
    for row in 0..16 {
        let x = batch.x.row(row).to_vec();
        let h = oracle_features(&model, &x);
        let expected = oracle_head(&model, &h, &[], Some(batch.aux_class.as_ref().unwrap()[row]));
        assert!((r[row] - expected).abs() <= 1e-11 * (1.0 + expected.abs()));
    }
}

#[test]
fn loss_matches_oracle_for_both_heads() {
    let mut rng = SeededRng::new(5);
    let g = perturbed(general_arch(3, 1), 6);
    let gb = random_batch(12, 3, 1, None, &mut rng);
    let e = perturbed(expfam_arch(3, 2, 4), 7);
    let eb = random_batch(12, 3, 4, Some(4), &mut rng);
    for (model, batch) in [(&g, &gb), (&e, &eb)] {
        for l2 in [0.0, 1e-3] {
            let got = model.loss(batch, l2).unwrap();
            let want = oracle_loss(model, batch, l2);
            assert!((got - want).abs() < 1e-12 * (1.0 + want), "{got} vs {want}");
        }
    }
}

/// Every coordinate, not a sample: central differences of the oracle loss
/// against the analytic gradient, skipping coordinates whose perturbation
/// changes a maxout winner or an abs sign on the batch.
fn assert_gradient_matches(model: &Model, batch: &Batch, l2: f64) {
    let eps = 1e-6;
    let (_, grad) = model.backward(batch, l2).unwrap();
    let base = model.kink_signature(batch.x.view()).unwrap();
    let mut probe = model.clone();
    let mut checked = 0;
    for idx in 0..model.n_params() {
        let theta = model.params()[idx];
        let stable = [theta + eps, theta - eps].iter().all(|&t| {
            probe.params_mut()[idx] = t;
            probe.kink_signature(batch.x.view()).unwrap() == base
        });
        probe.params_mut()[idx] = theta;
        if !stable {
            continue;
        }
        let numeric = finite_diff_grad(
            |p: &[f64]| {
                let mut m = model.clone();
                m.params_mut()[idx] = p[0];
                oracle_loss(&m, batch, l2)
            },
            &[theta],
            eps,
        )
        .unwrap()[0];
        let analytic = grad.0[idx];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(
            rel < 1e-5 || (analytic - numeric).abs() < 1e-9,
            "param {idx}: analytic {analytic} numeric {numeric}"
        );
        checked += 1;
    }
    assert!(checked * 10 >= model.n_params() * 9, "only {checked} coordinates checked");
}

#[test]
fn general_gradient_matches_central_differences() {
    let model = perturbed(general_arch(2, 2), 8);
    let batch = random_batch(6, 2, 2, None, &mut SeededRng::new(9));
    assert_gradient_matches(&model, &batch, 1e-3);
}

#[test]
fn expfam_gradient_matches_central_differences() {
    let model = perturbed(expfam_arch(2, 2, 3), 10);
    let batch = random_batch(6, 2, 3, Some(3), &mut SeededRng::new(11));
    assert_gradient_matches(&model, &batch, 1e-3);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let model = perturbed(expfam_arch(3, 2, 4), 12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gclmodel");
    let meta = serde_json::json!({"note": "test"});
    save_checkpoint(&model, &meta, &path).unwrap();
    let (back, meta_back) = load_checkpoint(&path).unwrap();
    assert_eq!(back.params(), model.params());
    assert_eq!(back.arch(), model.arch());
    assert_eq!(meta_back, meta);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let model = perturbed(general_arch(2, 1), 13);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gclmodel");
    save_checkpoint(&model, &serde_json::Value::Null, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_is_nonnegative(seed in 0u64..1000, l2 in 0.0f64..1e-2) {
        let model = perturbed(general_arch(2, 1), seed);
        let batch = random_batch(8, 2, 1, None, &mut SeededRng::new(seed + 1));
        let loss = model.loss(&batch, l2).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
    }

    #[test]
    fn zeroing_one_psi_removes_exactly_its_term(seed in 0u64..1000, j in 0usize..3) {
        let model = perturbed(general_arch(3, 2), seed);
        let mut rng = SeededRng::new(seed ^ 0xabc);
        let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let u = [rng.uniform(), rng.uniform()];
        let h = model.feature_forward(&x).unwrap();
        let before = model.head_forward(&h, &u, None).unwrap();
        let mut only_j = model.clone();
        let mut without_j = model.clone();
        for b in model.blocks() {
            let mine = b.name.starts_with(&format!("psi.{j}."));
            let target = if mine { &mut without_j } else { &mut only_j };
            if b.name.starts_with("psi.") {
                target.params_mut()[b.range()].iter_mut().for_each(|p| *p = 0.0);
            }
        }
        let term_j = only_j.head_forward(&h, &u, None).unwrap();
        // a zeroed psi still contributes its constant zero output, nothing else
        let after = without_j.head_forward(&h, &u, None).unwrap();
        prop_assert!((before - after - term_j).abs() < 1e-10 * (1.0 + before.abs()));
    }

    #[test]
    fn doubling_l2_doubles_the_penalty_gradient(seed in 0u64..1000) {
        let model = perturbed(expfam_arch(2, 1, 3), seed);
        let batch = random_batch(8, 2, 3, Some(3), &mut SeededRng::new(seed + 7));
        let (_, g0) = model.backward(&batch, 0.0).unwrap();
        let (_, g1) = model.backward(&batch, 1e-3).unwrap();
        let (_, g2) = model.backward(&batch, 2e-3).unwrap();
        for i in 0..model.n_params() {
            let p1 = g1.0[i] - g0.0[i];
            let p2 = g2.0[i] - g0.0[i];
            prop_assert!((p2 - 2.0 * p1).abs() < 1e-12);
        }
    }
}
