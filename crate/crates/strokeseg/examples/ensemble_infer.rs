//! Multi-model mean ensembling: average per-model probability maps, argmax,
//! and restore the mask onto the case's native grid.
//!
//!     cargo run --release --example ensemble_infer -- [out_dir]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strokeseg::infer::{binarize, ensemble_predict, restore_native, EnsembleSpec, InferenceConfig};
use strokeseg::io::save_mask;
use strokeseg::nn::segresnet::{NetworkConfig, SegResNet};
use strokeseg::nn::weights::save_weights;
use strokeseg::preprocess::{preprocess_case, PreprocessConfig};
use strokeseg::synth::{write_dataset, SyntheticSpec};

fn main() -> strokeseg::Result<()> {
    let out: std::path::PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/demo-ensemble".into())
        .into();

    // One case on an anisotropic native grid.
    let manifest = write_dataset(
        &out.join("data"),
        &SyntheticSpec {
            cases: 1,
            dims: [36, 36, 20],
            spacing: [1.5, 1.5, 2.5],
            radius: (4.0, 6.0),
            ..Default::default()
        },
    )?;
    let case = &manifest.cases[0];

    // Three untrained members with different seeds stand in for the
    // cross-validation checkpoints.
    let cfg = NetworkConfig {
        init_filters: 4,
        blocks_down: vec![1, 1],
        blocks_up: vec![1],
        ds_heads: 1,
        ..NetworkConfig::default()
    };
    let mut paths = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = SegResNet::<f32>::build(cfg.clone(), &mut rng)?;
        let path = out.join(format!("member{seed}.ckpt"));
        save_weights(&mut net, &path, serde_json::json!({"seed": seed}))?;
        paths.push(path);
    }

    let (img, _, geometry) = preprocess_case(case, &PreprocessConfig::default())?;
    println!(
        "case {}: native {:?} @ {:?} mm -> working {:?} @ 1 mm",
        case.case_id, geometry.native_dims, geometry.native_geom.spacing, img.dims()
    );
    let pm = ensemble_predict(
        &EnsembleSpec {
            checkpoint_paths: paths,
            network: cfg,
        },
        &img,
        &InferenceConfig {
            window: [32, 32, 32],
            overlap: 0.5,
            save_probs: false,
        },
    )?;
    let mask = binarize(&pm);
    let native = restore_native(&mask, &geometry)?;
    println!(
        "ensemble of 3: {} foreground voxels in working space, {} in native space",
        mask.foreground_count(),
        native.foreground_count()
    );
    let path = out.join(format!("{}.nii.gz", case.case_id));
    save_mask(&native, &path)?;
    println!("native-space mask written to {}", path.display());
    Ok(())
}
