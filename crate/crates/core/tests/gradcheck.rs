//! Finite-difference gradient checks and backward linearity.

use clearflow_core::autograd::{Graph, Var};
use clearflow_core::testkit::gradient_checks;
use clearflow_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn finite_difference_gradients() {
    let results = gradient_checks();
    for r in &results {
        println!(
            "{:<18} grad rel err {:.2e}  forward err {:.2e}",
            r.op, r.worst_rel_err, r.forward_max_err
        );
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "gradient checks failed: {failed:?}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
    let w0 = Tensor::uniform(&[4, 2], -2.0, 2.0, &mut rng);
    let (a, b) = (0.7f32, -1.3f32);

    let losses = |g: &mut Graph, x: Var, w: Var| {
        let h = g.matmul(x, w).unwrap();
        let s = g.softmax(h).unwrap();
        let l1 = g.sum(s).unwrap();
        let t = g.gelu(h).unwrap();
        let t2 = g.mul(t, t).unwrap();
        let l2 = g.mean(t2).unwrap();
        (l1, l2)
    };

    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let w = g.leaf(w0.clone(), true);
        let (l1, l2) = losses(&mut g, x, w);
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => {
                let s1 = g.scale(l1, a).unwrap();
                let s2 = g.scale(l2, b).unwrap();
                g.add(s1, s2).unwrap()
            }
        };
        let gr = g.backward(loss).unwrap();
        (gr.get(x).unwrap().clone(), gr.get(w).unwrap().clone())
    };
    let (x1, w1) = grad_of(1);
    let (x2, w2) = grad_of(2);
    let (xc, wc) = grad_of(0);
    for (c, (p, q)) in [(xc, (x1, x2)), (wc, (w1, w2))] {
        for i in 0..c.numel() {
            let expect = a * p.data()[i] + b * q.data()[i];
            assert!((c.data()[i] - expect).abs() < 1e-5);
        }
    }
}
