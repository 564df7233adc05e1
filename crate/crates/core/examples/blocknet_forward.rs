//! Builds the default two-head network, runs a forward pass on synthetic
//! scenes, and prints the per-block feature shapes and resource counts.

use amalgam::blocknet::{BlockNet, BlockNetSpec, HeadSpec};
use amalgam::synthdata::{generate, SceneDistribution};

fn main() -> amalgam::Result<()> {
    let spec = BlockNetSpec::default().with_heads(vec![HeadSpec::new("is_red", 2), HeadSpec::new("shape", 3)]);
    let net = BlockNet::new(spec.clone(), 42)?;
    let data = generate(&SceneDistribution::default(), 4, 7)?;
    let out = net.forward(&data.images)?;

    println!("input {:?}", data.images.shape());
    for (i, map) in out.maps.iter().enumerate() {
        println!("block {i} -> {:?}", map.shape());
    }
    for (task, logits) in &out.logits {
        println!("head {task:<8} -> {:?}", logits.shape());
    }

    let r = net.count_resources();
    println!("\nparams {} | multiply-adds per image {}", r.params, r.flops_per_image);
    let wide = BlockNet::new(spec.widened(1.5), 42)?.count_resources();
    println!("widened x1.5: params {} | multiply-adds per image {}", wide.params, wide.flops_per_image);
    Ok(())
}
