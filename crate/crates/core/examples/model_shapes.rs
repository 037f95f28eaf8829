//! Build the toy and default networks and print their feature pyramids.

use petseg::model::{build_model, ModelConfig};
use petseg::nn::Tensor;

fn main() -> petseg::Result<()> {
    for (name, cfg) in [("toy", ModelConfig::toy()), ("default", ModelConfig::default())] {
        let model = build_model(&cfg)?;
        println!("{name}: {} parameters", model.param_count());
        let x = Tensor::zeros([1, 2, 64, 64]);
        for (i, f) in model.encoder_features(&x)?.iter().enumerate() {
            let label = if i == 0 { "stem".to_string() } else { format!("stage{i}") };
            println!("  {label:<7} {:?}", f.shape);
        }
        println!("  logits  {:?}", model.forward(&x)?.shape);
    }
    let toy = build_model(&ModelConfig::toy())?;
    for (name, shape) in toy.param_names().iter().take(8) {
        println!("{name:<36} {shape:?}");
    }
    Ok(())
}
