//! Exhaustive differentiability check: the analytic gradient of a scalar
//! function of the network output is compared against central finite
//! differences for every single parameter, in f64, on a small
//! configuration. Probes run in parallel on clones of the base network.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use strokeseg::nn::segresnet::{NetworkConfig, SegResNet};

#[test]
fn every_parameter_matches_central_finite_differences() {
    let cfg = NetworkConfig {
        in_channels: 2,
        out_channels: 2,
        init_filters: 4,
        blocks_down: vec![1, 1],
        blocks_up: vec![1],
        ds_heads: 1,
        ..NetworkConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut net = SegResNet::<f64>::build(cfg, &mut rng).unwrap();
    let x = Array4::from_shape_simple_fn((2, 16, 16, 16), || rng.random_range(-1.0..1.0f64));
    let logits = net.forward(&x).unwrap();
    let projs: Vec<Array4<f64>> = logits
        .iter()
        .map(|l| Array4::from_shape_simple_fn(l.dim(), || rng.random_range(-1.0..1.0f64)))
        .collect();

    net.zero_grads();
    let (_, tape) = net.forward_train(x.clone()).unwrap();
    net.backward(&tape, &projs).unwrap();

    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    net.for_each_param(&mut |p| grads.push((p.name.clone(), p.grad.to_vec())));
    let total: usize = grads.iter().map(|(_, g)| g.len()).sum();
    assert!(total > 5000, "tiny config should still have thousands of parameters");

    let probes: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(ti, (_, g))| (0..g.len()).map(move |pi| (ti, pi)))
        .collect();

    // Small step: the norm-chain landscape has enormous higher-order
    // curvature, which contaminates central differences at h = 1e-5.
    let h = 1e-6;
    let worst = probes
        .par_iter()
        .map(|&(ti, pi)| {
            let objective = |net: &SegResNet<f64>| -> f64 {
                net.forward(&x)
                    .unwrap()
                    .iter()
                    .zip(&projs)
                    .map(|(l, p)| (l * p).sum())
                    .sum()
            };
            let mut probe_net = net.clone();
            let mut idx = 0;
            probe_net.for_each_param(&mut |p| {
                if idx == ti {
                    p.value[pi] += h;
                }
                idx += 1;
            });
            let up = objective(&probe_net);
            let mut idx = 0;
            probe_net.for_each_param(&mut |p| {
                if idx == ti {
                    p.value[pi] -= 2.0 * h;
                }
                idx += 1;
            });
            let dn = objective(&probe_net);
            let fd = (up - dn) / (2.0 * h);
            let an = grads[ti].1[pi];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            (rel, ti, pi, fd, an)
        })
        .reduce(
            || (0.0, usize::MAX, 0, 0.0, 0.0),
            |a, b| if a.0 >= b.0 { a } else { b },
        );

    let (rel, ti, pi, fd, an) = worst;
    assert!(
        rel < 1e-3,
        "worst parameter {}[{pi}]: fd {fd:.6e} vs analytic {an:.6e} (rel {rel:.2e})",
        grads[ti].0
    );
    println!(
        "checked {total} parameters; worst relative error {rel:.2e} at {}[{pi}]",
        grads[ti].0
    );
}
