//! Saves model parameters and optimizer state, reloads them and checks the
//! reload is bit-exact.

use mkgd::optim::{Optimizer, OptimizerKind};
use mkgd::params::{load_checkpoint, save_checkpoint};
use mkgd::model::{KnowledgeModel, ModelConfig};

fn main() -> mkgd::Result<()> {
    let model = KnowledgeModel::new(ModelConfig::desk(50));
    let params = model.init_params(1)?;
    let opt = Optimizer::new(OptimizerKind::Adam, 1e-3, Some(5.0), &params);
    let path = std::env::temp_dir().join("mkgd_example.ckpt");
    save_checkpoint(&path, &params, opt.adam_state())?;
    let (loaded, adam) = load_checkpoint(&path)?;
    let rebuilt = KnowledgeModel::from_params(&loaded)?;
    println!(
        "{} tensors, {} values, {} bytes; bit-identical {}; adam state {}; vocab {} hidden {}",
        loaded.len(),
        loaded.num_values(),
        std::fs::metadata(&path)?.len(),
        loaded.bit_identical(&params),
        adam.is_some(),
        rebuilt.config().vocab_size,
        rebuilt.config().hidden_dim
    );
    std::fs::remove_file(&path)?;
    Ok(())
}
