//! Region pooling, cross-layer and cross-granularity fusion weights for one
//! image under each ablation arm.
//!
//! cargo run --release --example fusion_weights

use himix::autodiff::Graph;
use himix::corpus::{gen_fake, Family, FakeParams};
use himix::model::{Detector, ModelConfig, Toggles};

fn main() -> himix::Result<()> {
    let img = gen_fake(Family::C, 5, 64, &FakeParams::default())?;
    for toggles in Toggles::ablation_arms() {
        let det = Detector::init(ModelConfig { toggles, ..ModelConfig::default() }, 7)?;
        let mut g = Graph::new();
        let p = det.params.bind(&mut g, false);
        let f = det.forward(&mut g, &p, &img)?;
        let show = |v: Option<himix::autodiff::Var>| v.map(|v| format!("{:.3?}", g.value(v).data())).unwrap_or("-".into());
        println!("{toggles}");
        println!(
            "  scales {}  layers(cls) {}  layers(reg) {}  granularity {}  score {:.4}",
            show(f.weights.scale),
            show(f.weights.layer_cls),
            show(f.weights.layer_reg),
            show(f.weights.granularity),
            g.value(f.prob).item()
        );
    }
    Ok(())
}
