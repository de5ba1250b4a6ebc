//! Runs MC-dropout inference with an untrained network and shows how the
//! mean settles and where variance sits as the number of passes grows.

use upmad::net::{Network, NetworkConfig};
use upmad::phantom::{gen_phantom, PhantomSpec};
use upmad::prior::PriorConfig;
use upmad::train::{mc_infer, prepare_input};

fn main() -> upmad::Result<()> {
    let v = gen_phantom(&PhantomSpec::default(), 4)?;
    let input = prepare_input(&v, true, &PriorConfig::default())?;
    let net = Network::<f32>::new(NetworkConfig::default())?;
    let reference = mc_infer(&net, &input, 128, 1, true)?;
    for n in [1, 4, 16, 64] {
        let mc = mc_infer(&net, &input, n, 1, true)?;
        let drift = mc.mean.data().iter().zip(reference.mean.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        let var = mc.variance.data();
        let peak = var.iter().copied().fold(0.0f32, f32::max);
        let avg = var.iter().sum::<f32>() / var.len() as f32;
        println!("{n:>3} passes: max |mean - mean128| {drift:.4}  variance mean {avg:.2e} max {peak:.2e}");
    }
    let off = mc_infer(&net, &input, 20, 1, false)?;
    println!("dropout off: {} pass, variance max {}", off.n_passes, off.variance.data().iter().copied().fold(0.0f32, f32::max));
    Ok(())
}
