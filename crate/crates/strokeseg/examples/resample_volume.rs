//! Resample a volume to isotropic 1 mm spacing and write the result.
//!
//!     cargo run --release --example resample_volume -- [input.nii.gz] [output.nii.gz]
//!
//! Without arguments a demo volume at 2x2x3 mm is generated first.

use strokeseg::io::{load_volume, save_volume};
use strokeseg::preprocess::{resample, ResampleMode};

fn main() -> strokeseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let (input, output) = match (args.next(), args.next()) {
        (Some(i), Some(o)) => (i, o),
        _ => {
            let dir = "target/demo-resample";
            std::fs::create_dir_all(dir).ok();
            let case = strokeseg::synth::make_case(
                &strokeseg::synth::SyntheticSpec {
                    cases: 1,
                    dims: [40, 40, 24],
                    spacing: [2.0, 2.0, 3.0],
                    radius: (4.0, 6.0),
                    ..Default::default()
                },
                0,
            );
            let input = format!("{dir}/anisotropic.nii.gz");
            save_volume(&case.dwi, &input)?;
            (input, format!("{dir}/isotropic.nii.gz"))
        }
    };

    let vol = load_volume(&input)?;
    println!(
        "input : dims {:?}, spacing {:?} mm",
        vol.dims(),
        vol.geom.spacing
    );
    let iso = resample(&vol, [1.0, 1.0, 1.0], ResampleMode::Trilinear)?;
    println!(
        "output: dims {:?}, spacing {:?} mm",
        iso.dims(),
        iso.geom.spacing
    );
    save_volume(&iso, &output)?;
    println!("wrote {output}");
    Ok(())
}
