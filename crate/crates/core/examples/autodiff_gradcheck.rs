//! Build a small graph, run backward and compare with finite differences.
//!
//! cargo run --release --example autodiff_gradcheck

use himix::autodiff::Graph;
use himix::gradcheck::grad_check;
use himix::tensor::Tensor;

fn main() -> himix::Result<()> {
    let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?;
    let w = Tensor::matrix(3, 2, vec![0.2, -0.4, 1.1, 0.6, -0.3, 0.9])?;

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.leaf(w.clone());
    let h = g.matmul(xv, wv)?;
    let h = g.gelu(h)?;
    let p = g.softmax(h, 1)?;
    let loss = g.cross_entropy(p, &[0, 1])?;
    g.backward(loss)?;
    println!("loss {:.6}", g.value(loss).item());
    println!("dL/dW {:?}", g.grad(wv).map(|t| t.data().to_vec()));

    let err = grad_check(
        |g, v| {
            let xv = g.constant(x.clone());
            let h = g.matmul(xv, v[0])?;
            let h = g.gelu(h)?;
            let p = g.softmax(h, 1)?;
            g.cross_entropy(p, &[0, 1])
        },
        &[w],
        1e-6,
    )?;
    println!("max relative error vs central differences {err:.2e}");
    Ok(())
}
