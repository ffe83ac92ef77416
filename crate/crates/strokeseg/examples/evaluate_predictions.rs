//! Lesion-wise evaluation: Dice, lesion F1, absolute volume difference and
//! lesion count difference, per case and averaged.
//!
//!     cargo run --release --example evaluate_predictions -- [out_dir]

use ndarray::Array3;
use strokeseg::io::{load_mask, save_mask};
use strokeseg::metrics::{evaluate_cases, Connectivity, LesionMatching};
use strokeseg::synth::{write_dataset, SyntheticSpec};
use strokeseg::volume::SegmentationMask;

fn main() -> strokeseg::Result<()> {
    let out: std::path::PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/demo-eval".into())
        .into();
    let data_dir = out.join("data");
    let manifest = write_dataset(
        &data_dir,
        &SyntheticSpec {
            cases: 4,
            dims: [32, 32, 32],
            radius: (4.0, 7.0),
            seed: 17,
            ..Default::default()
        },
    )?;

    // Imperfect predictions: erode one case, add a spurious lesion to
    // another, copy the rest verbatim.
    let pred_dir = out.join("preds");
    std::fs::create_dir_all(&pred_dir).ok();
    for (i, case) in manifest.cases.iter().enumerate() {
        let gt = load_mask(case.label.as_ref().unwrap())?;
        let mut labels: Array3<u8> = gt.labels.clone();
        match i {
            0 => {
                // drop a z-slab of the lesion
                let dims = labels.dim();
                for x in 0..dims.0 {
                    for y in 0..dims.1 {
                        for z in 0..dims.2 / 2 {
                            labels[[x, y, z]] = 0;
                        }
                    }
                }
            }
            1 => {
                labels[[2, 2, 2]] = 1; // spurious lesion
            }
            _ => {}
        }
        save_mask(
            &SegmentationMask::new(labels, gt.geom.clone()),
            pred_dir.join(format!("{}.nii.gz", case.case_id)),
        )?;
    }

    let report = evaluate_cases(
        &pred_dir,
        &manifest,
        Connectivity::TwentySix,
        LesionMatching::AnyOverlap,
        false,
    )?;
    print!("{}", report.to_csv());
    report.write(out.join("report"))?;
    println!("full report under {}", out.join("report").display());
    Ok(())
}
