//! Central finite-difference checks for every differentiable op.

use ndcore::{Init, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Builds `sum(op(inputs) * probe)` so every output element carries a
/// distinct weight, then compares tape gradients with central differences.
fn check(name: &str, inputs: &[Tensor], op: impl Fn(&mut Tape, &[Var]) -> Var) {
    let probe_seed = 99;
    let loss_of = |xs: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::eval();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = op(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        let probe = tape.leaf(Init::new(probe_seed).normal(&shape, 1.0));
        let prod = tape.mul(out, probe);
        let loss = tape.sum_all(prod);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = loss_of(inputs);
    let grads = tape.backward(loss);
    for (idx, &v) in vars.iter().enumerate() {
        let analytic = grads.tensor(v);
        let mut numeric = vec![0.0; inputs[idx].len()];
        for j in 0..inputs[idx].len() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[j] -= H;
            let (tp, _, lp) = loss_of(&plus);
            let (tm, _, lm) = loss_of(&minus);
            numeric[j] = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * H);
        }
        let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(1e-12);
        assert!(rel < TOL, "{name}: input {idx} relative error {rel:e}");
    }
}

fn rand(seed: u64, shape: &[usize]) -> Tensor {
    Init::new(seed).normal(shape, 1.0)
}

#[test]
fn matmul_grad() {
    check("matmul", &[rand(1, &[2, 3, 4]), rand(2, &[4, 5])], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn bmm_grad() {
    check("bmm", &[rand(1, &[3, 4, 2]), rand(2, &[3, 2, 5])], |t, v| t.bmm(v[0], v[1], false));
    check("bmm_t", &[rand(3, &[3, 4, 2]), rand(4, &[3, 5, 2])], |t, v| t.bmm(v[0], v[1], true));
}

#[test]
fn elementwise_grads() {
    let a = rand(5, &[3, 4]);
    let b = rand(6, &[3, 4]);
    check("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check("scale", &[a.clone()], |t, v| t.scale(v[0], -2.5));
    check("tanh", &[a.clone()], |t, v| t.tanh(v[0]));
    check("sigmoid", &[a.clone()], |t, v| t.sigmoid(v[0]));
    check("relu", &[a.clone()], |t, v| t.relu(v[0]));
    check("sum_all", &[a.clone()], |t, v| t.sum_all(v[0]));
    check("mean_all", &[a], |t, v| t.mean_all(v[0]));
}

#[test]
fn broadcast_grads() {
    check("add_broadcast", &[rand(7, &[2, 3, 4]), rand(8, &[3, 4])], |t, v| t.add_broadcast(v[0], v[1]));
    check("mul_broadcast", &[rand(9, &[2, 3, 4]), rand(10, &[4])], |t, v| t.mul_broadcast(v[0], v[1]));
}

#[test]
fn softmax_and_layer_norm_grads() {
    check("softmax", &[rand(11, &[3, 5])], |t, v| t.softmax(v[0]));
    check("layer_norm", &[rand(12, &[4, 6])], |t, v| t.layer_norm(v[0]));
}

#[test]
fn depthwise_conv_grad() {
    for k in [1, 3, 5, 7] {
        check(
            &format!("conv k={k}"),
            &[rand(13, &[2, 8, 4]), rand(14, &[4, k]), rand(15, &[4])],
            |t, v| t.depthwise_conv1d(v[0], v[1], v[2]).unwrap(),
        );
    }
}

#[test]
fn shape_op_grads() {
    check("concat", &[rand(16, &[2, 3, 2]), rand(17, &[2, 3, 4])], |t, v| t.concat(&[v[0], v[1]]));
    check("permute", &[rand(18, &[2, 3, 4, 2])], |t, v| t.permute_0213(v[0]));
    check("reshape", &[rand(19, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4]));
    check("slice_rows", &[rand(20, &[5, 3])], |t, v| t.slice_rows(v[0], 3));
}

#[test]
fn dropout_grad_with_fixed_mask() {
    // train-mode masks are fixed by the tape seed, so the op is linear
    let x = rand(21, &[4, 5]);
    let mut tape = Tape::train(3);
    let v = tape.leaf(x.clone());
    let y = tape.dropout(v, 0.3);
    let loss = tape.sum_all(y);
    let g = tape.backward(loss).tensor(v);
    for (i, (&gi, (&xi, &yi))) in g.data().iter().zip(x.data().iter().zip(tape.value(y).data())).enumerate() {
        let expected = if yi == 0.0 { 0.0 } else { 1.0 / 0.7 };
        assert!((gi - expected).abs() < 1e-12, "element {i}");
        if yi != 0.0 {
            assert!((yi - xi / 0.7).abs() < 1e-12);
        }
    }
}

#[test]
fn bce_grad() {
    let labels = [1.0, 0.0, 1.0, 0.0];
    check("bce", &[rand(22, &[4])], |t, v| t.bce_with_logits(v[0], &labels).unwrap());
}
