//! Gradient correctness against the independent finite-difference oracle.

use dnas_core::tensor::{Tape, Tensor};
use dnas_testref::gradient_sweep;

#[test]
fn every_op_passes_the_finite_difference_oracle() {
    let report = gradient_sweep(120, 0xD1FF);
    for failure in report.failures() {
        eprintln!(
            "FAILED {} rel_err={} fwd_gap={}",
            failure.name, failure.max_rel_err, failure.forward_gap
        );
    }
    assert!(
        report.all_passed(),
        "worst relative error {}",
        report.worst()
    );
    assert!(report.cases.len() >= 100);
}

#[test]
fn hand_differentiated_scalar_case() {
    // loss = mse_mean(w * x, y) with x = 2, y = 0, w = 1:
    // d loss / d w = 2 * x * (w * x - y) = 8.
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap());
    let w = tape.leaf_grad(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
    let b = tape.leaf(Tensor::from_vec(&[1], vec![0.0]).unwrap());
    let y = tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![0.0]).unwrap());
    let prod = tape.conv2d(x, w, b).unwrap();
    let loss = tape.mse_mean(prod, y).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[8.0]);
}

#[test]
fn gradient_is_zero_for_unused_parameter() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf_grad(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    let unused = tape.leaf_grad(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
    let b = tape.leaf(Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap());
    let loss = tape.mse_mean(a, b).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(a).is_some());
    // Never touched by the loss: no gradient accumulated.
    assert!(tape.grad(unused).is_none() || tape.grad(unused).unwrap().iter().all(|&g| g == 0.0));
    let _ = unused;
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf_grad(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    assert!(tape.backward(a).is_err());
}

#[test]
fn f32_path_agrees_with_f64_oracle_on_a_small_conv_net() {
    // The production dtype, checked against the same finite differences with
    // a tolerance that allows single-precision accumulation noise.
    use dnas_core::rng::Rng;
    use dnas_testref::refops::{self, RefTensor};

    let mut rng = Rng::seed_from(42);
    let x = Tensor::<f32>::randn(&[1, 2, 4, 4], &mut rng);
    let w = {
        let mut t = Tensor::<f32>::randn(&[2, 2, 3, 3], &mut rng);
        t.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        t
    };
    let b = Tensor::<f32>::randn(&[2], &mut rng);
    let target = Tensor::<f32>::randn(&[1, 2, 4, 4], &mut rng);

    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf_grad(w.clone());
    let bv = tape.leaf_grad(b.clone());
    let tv = tape.leaf(target.clone());
    let y = tape.conv2d(xv, wv, bv).unwrap();
    let loss = tape.mse_mean(y, tv).unwrap();
    tape.backward(loss).unwrap();

    let to_ref = |t: &Tensor<f32>| {
        RefTensor::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
    };
    let (xr, tr) = (to_ref(&x), to_ref(&target));
    let eval = |wr: &RefTensor, br: &RefTensor| {
        refops::mse_mean(&refops::conv2d(&xr, wr, &br.data), &tr)
    };
    let h = 1e-4;
    let wr = to_ref(&w);
    let br = to_ref(&b);
    for (slot, grads) in [(0usize, tape.grad(wv).unwrap()), (1, tape.grad(bv).unwrap())] {
        let base = if slot == 0 { &wr } else { &br };
        for e in 0..base.data.len() {
            let mut plus = base.clone();
            plus.data[e] += h;
            let mut minus = base.clone();
            minus.data[e] -= h;
            let fd = if slot == 0 {
                (eval(&plus, &br) - eval(&minus, &br)) / (2.0 * h)
            } else {
                (eval(&wr, &plus) - eval(&wr, &minus)) / (2.0 * h)
            };
            let ad = grads[e] as f64;
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-3);
            assert!(rel <= 1e-3, "f32 grad mismatch: ad={ad} fd={fd} rel={rel}");
        }
    }
}
