//! End-to-end central-difference gradient checks of every architecture.

mod common;

use common::{architecture_gradient_error, relative_error, uniform, FD_STEP};
use facestress::model::{Fusion, MlpConfig, MlpModel};

#[test]
fn unimodal_gradients() {
    let e = architecture_gradient_error(Fusion::Unimodal, &[8]);
    assert!(e < 1e-3, "relative error {e:e}");
}

#[test]
fn early_fusion_gradients() {
    let e = architecture_gradient_error(Fusion::Early, &[11]);
    assert!(e < 1e-3, "relative error {e:e}");
}

#[test]
fn cross_modal_gradients() {
    let e = architecture_gradient_error(Fusion::CrossModal, &[8, 3]);
    assert!(e < 1e-3, "relative error {e:e}");
}

#[test]
fn mlp_gradients() {
    let mut m = MlpModel::new(MlpConfig { hidden: vec![12, 6], dropout: 0.0 }, 5, 3).unwrap();
    let x = uniform(&[4, 5], 1);
    let labels = [1.0, 0.0, 0.0, 1.0];
    let (_, grads) = m.loss_and_grads(&x, &labels, 0).unwrap();
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for p in 0..m.params.len() {
        for i in 0..m.params.tensors[p].len() {
            let orig = m.params.tensors[p].data()[i];
            m.params.tensors[p].data_mut()[i] = orig + FD_STEP;
            let up = m.loss(&x, &labels).unwrap();
            m.params.tensors[p].data_mut()[i] = orig - FD_STEP;
            let down = m.loss(&x, &labels).unwrap();
            m.params.tensors[p].data_mut()[i] = orig;
            n.push((up - down) / (2.0 * FD_STEP));
            a.push(grads[p].data()[i]);
        }
    }
    let e = relative_error(&a, &n);
    assert!(e < 1e-4, "relative error {e:e}");
}
