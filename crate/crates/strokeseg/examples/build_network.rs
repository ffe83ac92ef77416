//! Build the segmentation network and print its structure: encoder widths,
//! deep-supervision output scales and the full parameter inventory.
//!
//!     cargo run --release --example build_network            # default config
//!     cargo run --release --example build_network -- tiny    # reduced width
//!
//! The inventory printed for the default config matches
//! tests/golden/segresnet_default_shapes.txt.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strokeseg::nn::segresnet::{NetworkConfig, SegResNet};

fn main() -> strokeseg::Result<()> {
    let variant = std::env::args().nth(1).unwrap_or_default();
    let cfg = match variant.as_str() {
        "tiny" => NetworkConfig {
            init_filters: 8,
            blocks_down: vec![1, 2, 2],
            blocks_up: vec![1, 1],
            ds_heads: 2,
            ..NetworkConfig::default()
        },
        _ => NetworkConfig::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = SegResNet::<f32>::build(cfg.clone(), &mut rng)?;

    eprintln!("encoder widths: {:?}", net.encoder_widths());
    eprintln!("outputs per forward pass: {}", cfg.num_outputs());
    eprintln!("spatial divisor: {}", cfg.divisor());

    let mut total = 0usize;
    for (name, shape) in net.param_inventory() {
        total += shape.iter().product::<usize>();
        println!("{name} {shape:?}");
    }
    eprintln!("total parameters: {total}");

    if variant == "tiny" {
        let x = Array4::<f32>::zeros((cfg.in_channels, 32, 32, 32));
        let logits = net.forward(&x)?;
        for (i, l) in logits.iter().enumerate() {
            eprintln!("logits[{i}]: {:?}", l.dim());
        }
    }
    Ok(())
}
