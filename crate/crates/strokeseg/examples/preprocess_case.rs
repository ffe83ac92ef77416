//! Full per-case preparation: load DWI/ADC, resample to 1 mm, stack into a
//! two-channel input and normalize each channel to zero mean / unit std.
//!
//!     cargo run --release --example preprocess_case -- [manifest.json] [case_id]

use strokeseg::io::load_manifest;
use strokeseg::preprocess::{preprocess_case, PreprocessConfig};
use strokeseg::synth::{write_dataset, SyntheticSpec};

fn main() -> strokeseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let manifest_path = match args.next() {
        Some(p) => p,
        None => {
            let dir = "target/demo-preprocess";
            write_dataset(
                dir,
                &SyntheticSpec {
                    cases: 1,
                    dims: [40, 48, 32],
                    spacing: [2.0, 1.5, 2.5],
                    radius: (4.0, 7.0),
                    ..Default::default()
                },
            )?;
            format!("{dir}/manifest.json")
        }
    };
    let manifest = load_manifest(&manifest_path)?;
    let case = match args.next() {
        Some(id) => manifest
            .case(&id)
            .unwrap_or_else(|| panic!("case {id} not in manifest"))
            .clone(),
        None => manifest.cases[0].clone(),
    };

    let cfg = PreprocessConfig::default();
    let (img, mask, geometry) = preprocess_case(&case, &cfg)?;
    println!("case {}", case.case_id);
    println!(
        "  native grid : dims {:?}, spacing {:?} mm",
        geometry.native_dims, geometry.native_geom.spacing
    );
    println!(
        "  working grid: dims {:?}, spacing {:?} mm, channels {:?}",
        img.dims(),
        img.geom.spacing,
        img.channel_names
    );
    for c in 0..img.channels() {
        let ch = img.channel(c);
        let n = ch.len() as f64;
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        println!(
            "  channel {} ({}): mean {mean:+.2e}, std {std:.6}",
            c, img.channel_names[c]
        );
    }
    if let Some(m) = mask {
        println!("  label: {} foreground voxels in working space", m.foreground_count());
    }
    Ok(())
}
