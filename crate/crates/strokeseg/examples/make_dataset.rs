//! Generate a synthetic sphere-lesion dataset (DWI + ADC + label NIfTI
//! volumes plus a manifest) for desk-scale experiments.
//!
//!     cargo run --release --example make_dataset -- [out_dir] [cases] [size]

use strokeseg::synth::{write_dataset, SyntheticSpec};

fn main() -> strokeseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out_dir = args.next().unwrap_or_else(|| "target/demo-data".into());
    let cases: usize = args.next().map(|s| s.parse().expect("cases")).unwrap_or(6);
    let size: usize = args.next().map(|s| s.parse().expect("size")).unwrap_or(48);

    let spec = SyntheticSpec {
        cases,
        dims: [size, size, size],
        radius: (size as f64 * 0.1, size as f64 * 0.17),
        seed: 0,
        ..SyntheticSpec::default()
    };
    let manifest = write_dataset(&out_dir, &spec)?;
    println!("wrote {} cases under {out_dir}", manifest.cases.len());
    for case in &manifest.cases {
        let mask = strokeseg::io::load_mask(case.label.as_ref().unwrap())?;
        println!(
            "  {}: {} lesion voxels ({:.2} ml at 1 mm)",
            case.case_id,
            mask.foreground_count(),
            mask.foreground_count() as f64 / 1000.0
        );
    }
    println!("manifest: {out_dir}/manifest.json");
    Ok(())
}
