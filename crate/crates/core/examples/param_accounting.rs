//! Prints parameter and FLOP counts for the default network under each
//! context-branch kernel, plus the heaviest layers of the default build.

use upmad::net::{Network, NetworkConfig};

fn main() -> upmad::Result<()> {
    let dims = [128, 128, 128];
    for kernel in [3, 5, 7] {
        let net = Network::<f32>::new(NetworkConfig {
            msff_kernel: kernel,
            ..Default::default()
        })?;
        let (params, flops) = net.count_params_flops(dims);
        println!("context kernel {kernel}: {params:>9} params  {:.3} GFLOPs at {dims:?}", flops as f64 / 1e9);
    }
    let net = Network::<f32>::new(NetworkConfig::default())?;
    let mut layers: Vec<_> = net.layers().iter().map(|l| (l.flops(dims), l.params(), l.name.as_str())).collect();
    layers.sort_unstable_by(|a, b| b.cmp(a));
    println!("heaviest layers:");
    for (flops, params, name) in layers.iter().take(8) {
        println!("  {name:<32} {params:>8} params  {:.3} GFLOPs", *flops as f64 / 1e9);
    }
    Ok(())
}
