//! Records a small least-squares problem on the tape and fits it with SGD
//! and Adam. The last input column is a constant 1 for the bias.

use mkgd::optim::{Optimizer, OptimizerKind};
use mkgd::{ParamStore, Tape, Tensor};

fn loss(tape: &mut Tape, params: &ParamStore, xs: &Tensor, ys: &Tensor) -> mkgd::Result<mkgd::Var> {
    let w = tape.param_from(params, "w")?;
    let x = tape.constant(xs.clone());
    let y = tape.constant(ys.clone());
    let pred = tape.matmul(x, w)?;
    let diff = tape.sub(pred, y)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

fn main() -> mkgd::Result<()> {
    let xs = Tensor::matrix(4, 3, vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 1.0])?;
    let ys = Tensor::matrix(4, 1, vec![1.5, 2.0, 3.5, 5.5])?;
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let mut params = ParamStore::new(0);
        params.insert("w", Tensor::matrix(3, 1, vec![0.0; 3])?)?;
        let mut opt = Optimizer::new(kind, 0.05, Some(5.0), &params);
        for step in 0..=400 {
            let mut tape = Tape::new();
            let l = loss(&mut tape, &params, &xs, &ys)?;
            if step % 100 == 0 {
                println!("{kind:>4} step {step:>3}: loss {:.6}", tape.value(l).item()?);
            }
            let grads = tape.backward(l, &params)?;
            opt.step(&mut params, grads)?;
        }
        let w = params.get("w").unwrap().values();
        println!("{kind:>4} fit: w = [{:.3}, {:.3}], b = {:.3}", w[0], w[1], w[2]);
    }
    Ok(())
}
