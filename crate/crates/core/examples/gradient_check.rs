//! Compares reverse-mode gradients of the full dialogue loss with central
//! finite differences on a tiny model.

use std::sync::Arc;

use mkgd::knowledge::DialogueSample;
use mkgd::model::{KnowledgeModel, ModelConfig};

fn main() -> mkgd::Result<()> {
    let model = KnowledgeModel::new(ModelConfig::new(10, 4, 4));
    let params = model.init_params(3)?;
    let sample = DialogueSample::new(
        0,
        vec![4, 5, 6],
        vec![7, 8],
        Arc::new(vec![vec![4, 9, 7], vec![5, 9, 8]]),
        Some(0),
    )?;
    let (_, grads) = model.loss_and_grads(&params, &sample)?;
    let h = 1e-5;
    let (mut checked, mut worst) = (0, 0.0f64);
    for (name, tensor) in params.iter() {
        let analytic = grads.get(name).expect("every parameter has a gradient");
        for i in 0..tensor.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().values_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().values_mut()[i] -= h;
            let fd = (model.run(&plus, &sample)?.losses.total - model.run(&minus, &sample)?.losses.total) / (2.0 * h);
            let a = analytic.values()[i];
            let err = if a.abs() < 1e-6 { (a - fd).abs() } else { (a - fd).abs() / a.abs().max(fd.abs()) };
            worst = worst.max(err);
            checked += 1;
        }
    }
    println!("checked {checked} entries over {} tensors, worst error {worst:.2e}", params.len());
    Ok(())
}
