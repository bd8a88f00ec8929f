//! Toy ViT forward pass, the LoRA zero-init identity and the parameter census.
//!
//! cargo run --release --example vit_lora

use himix::autodiff::Graph;
use himix::corpus::gen_real_from_seed;
use himix::encoder::forward_collect;
use himix::model::{Detector, ModelConfig};

fn main() -> himix::Result<()> {
    let cfg = ModelConfig::default();
    let det = Detector::init(cfg.clone(), 7)?;
    let img = gen_real_from_seed(1, cfg.encoder.image_size)?;
    let e = &cfg.encoder;

    let run = |lora: bool| -> himix::Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = det.params.bind(&mut g, false);
        let pass = forward_collect(&mut g, &p, e, &img, lora)?;
        println!("lora={lora}: {} selected layers, last tokens {:?}", pass.selected.len(), g.shape(pass.last));
        Ok(g.value(pass.last).data().to_vec())
    };
    let (with, without) = (run(true)?, run(false)?);
    println!("B = 0 gives bitwise identical outputs: {}", with == without);

    println!("backbone params  {}", e.backbone_param_count());
    println!("LoRA params      {}", e.lora_param_count());
    println!("trainable census {} (store: {})", cfg.trainable_census(), det.trainable_count());
    println!("total census     {} (store: {})", cfg.total_census(), det.total_count());
    Ok(())
}
