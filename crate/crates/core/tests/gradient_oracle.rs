//! Central finite differences against the analytic contrastive gradients.

use jointspace_core::encoders::{FeatureMatrix, Modality};
use jointspace_core::jointspace::{contrastive_loss, loss_gradients, ProjectionModel, ScaleConvention};
use jointspace_core::rng::substream;
use jointspace_core::synthetic::gaussian_matrix;
use jointspace_core::Matrix;
use jointspace_oracles::{finite_difference_gradient, relative_error};

const H: f64 = 1e-5;

fn instance(n: usize, d: usize, seed: u64) -> (ProjectionModel, FeatureMatrix, FeatureMatrix) {
    let (v, u) = (5, 7);
    let mut rng = substream(seed, "fd");
    let mut model = ProjectionModel::init(d, v, u, 0.25, ScaleConvention::Inverse, &mut rng).unwrap();
    // non-zero biases so their gradients are exercised away from the init
    model.b_audio = gaussian_matrix(1, d, &mut rng).into_vec();
    model.b_text = gaussian_matrix(1, d, &mut rng).into_vec();
    let a = FeatureMatrix::new(gaussian_matrix(n, v, &mut rng), Modality::Audio);
    let t = FeatureMatrix::new(gaussian_matrix(n, u, &mut rng), Modality::Text);
    (model, a, t)
}

fn loss(model: &ProjectionModel, a: &FeatureMatrix, t: &FeatureMatrix) -> f64 {
    contrastive_loss(&model.logits(a, t).unwrap())
}

/// Max relative error over every parameter coordinate. The numeric side
/// evaluates the loss in double-double so the comparison is not limited by
/// f64 roundoff in the two loss evaluations.
fn max_rel_error(model: &ProjectionModel, a: &FeatureMatrix, t: &FeatureMatrix) -> f64 {
    let (_, grads) = loss_gradients(model, a, t).unwrap();
    let analytic: Vec<f64> = grads.slices().concat();
    let numeric = finite_difference_gradient(model, a, t, H);
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&g, &n)| relative_error(g, n))
        .fold(0.0, f64::max)
}

#[test]
fn gradients_match_finite_differences() {
    let mut seed = 0;
    for n in [2, 8, 32] {
        for d in [4, 16] {
            for _ in 0..4 {
                let (model, a, t) = instance(n, d, seed);
                let err = max_rel_error(&model, &a, &t);
                assert!(err < 1e-6, "n={n} d={d} seed={seed}: rel err {err:e}");
                seed += 1;
            }
        }
    }
}

#[test]
fn gradients_without_normalization() {
    let (mut model, a, t) = instance(8, 6, 99);
    model.normalize = false;
    model.log_scale = 0.1f64.ln();
    let err = max_rel_error(&model, &a, &t);
    assert!(err < 1e-6, "rel err {err:e}");
}

#[test]
fn loss_matches_forward_path_bitwise() {
    let (model, a, t) = instance(8, 6, 7);
    let (l, _) = loss_gradients(&model, &a, &t).unwrap();
    assert_eq!(l.to_bits(), loss(&model, &a, &t).to_bits());
}

#[test]
fn diagonal_optimum_has_vanishing_gradients() {
    let d = 4;
    let mut rng = substream(1, "opt");
    let mut model = ProjectionModel::init(d, d, d, 0.001, ScaleConvention::Inverse, &mut rng).unwrap();
    model.w_audio = Matrix::identity(d);
    model.w_text = Matrix::identity(d);
    let x = Matrix::identity(d);
    let a = FeatureMatrix::new(x.clone(), Modality::Audio);
    let t = FeatureMatrix::new(x, Modality::Text);
    let (l, g) = loss_gradients(&model, &a, &t).unwrap();
    assert!(l < 1e-12);
    assert!(g.slices().iter().all(|s| s.iter().all(|v| v.abs() < 1e-12)));
}

#[test]
fn duplicated_batch_changes_loss_but_stays_finite() {
    let (model, a, t) = instance(4, 6, 3);
    let dup = [0, 1, 2, 3, 0, 1, 2, 3];
    let (l1, _) = loss_gradients(&model, &a, &t).unwrap();
    let (l2, g2) = loss_gradients(&model, &a.select(&dup), &t.select(&dup)).unwrap();
    assert_ne!(l1, l2);
    assert!(g2.is_finite());
}
