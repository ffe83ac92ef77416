//! Sliding-window inference: overlapping tiles, center-peaked blending, and
//! the per-voxel probability simplex invariant.
//!
//!     cargo run --release --example sliding_window

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strokeseg::geometry::Geometry;
use strokeseg::infer::{sliding_window_predict, InferenceConfig};
use strokeseg::nn::segresnet::{NetworkConfig, SegResNet};
use strokeseg::volume::MultiChannelVolume;

fn main() -> strokeseg::Result<()> {
    let cfg = NetworkConfig {
        init_filters: 8,
        blocks_down: vec![1, 2],
        blocks_up: vec![1],
        ds_heads: 1,
        ..NetworkConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = SegResNet::<f32>::build(cfg, &mut rng)?;

    // A volume larger than the window, so tiling has to stitch.
    let vol = MultiChannelVolume {
        data: Array4::from_shape_simple_fn((2, 72, 60, 48), || rng.random_range(-1.0..1.0f32)),
        geom: Geometry::identity([1.0; 3]),
        channel_names: vec!["DWI".into(), "ADC".into()],
    };
    let infer_cfg = InferenceConfig {
        window: [32, 32, 32],
        overlap: 0.5,
        save_probs: false,
    };
    let started = std::time::Instant::now();
    let pm = sliding_window_predict(&net, &vol, &infer_cfg)?;
    println!(
        "volume {:?} tiled with {:?} windows at overlap {} in {:.2}s",
        vol.dims(),
        infer_cfg.window,
        infer_cfg.overlap,
        started.elapsed().as_secs_f64()
    );

    let (_, d0, d1, d2) = pm.probs.dim();
    let mut worst = 0.0f32;
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let s = pm.probs[[0, i, j, k]] + pm.probs[[1, i, j, k]];
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    println!("probability map {:?}; worst |channel sum - 1| = {worst:.2e}", pm.dims());
    Ok(())
}
