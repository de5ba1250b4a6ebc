//! Trains the default network on a single phantom until it memorises it,
//! then segments the same case with MC dropout. Takes a few minutes.
//!
//! `cargo run --release --example overfit_train -- [epochs]`

use upmad::net::{Network, NetworkConfig};
use upmad::phantom::{gen_phantom, PhantomSpec};
use upmad::prior::PriorConfig;
use upmad::train::{evaluate_case, fit, mc_infer, prepare_case, TrainConfig, DEFAULT_MC_PASSES};

fn main() -> upmad::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    let v = gen_phantom(&PhantomSpec::default(), 0)?;
    let case = prepare_case("0", &v, true, &PriorConfig::default())?;
    let mut net = Network::<f32>::new(NetworkConfig::default())?;
    let config = TrainConfig {
        lr_init: 3e-3,
        cosine_t: epochs,
        max_epochs: epochs,
        patience: epochs,
        ..Default::default()
    };
    let cases = std::slice::from_ref(&case);
    let out = fit(&mut net, cases, cases, &config, |r| {
        if r.epoch % 10 == 0 {
            println!("epoch {:>3}  lr {:.2e}  train {:.4}  val {:.4}", r.epoch, r.lr, r.train_loss, r.val_loss);
        }
    })?;
    println!("stopped: {:?}, best epoch {} (val {:.4})", out.stop, out.best_epoch, out.best_val_loss);
    let mc = mc_infer(&net, &case.input, DEFAULT_MC_PASSES, 0, true)?;
    let report = evaluate_case(&mc, v.labels.as_ref().unwrap(), [1.0; 3])?;
    let [et, wt, tc] = report.dice();
    println!("Dice ET {et:.3}  WT {wt:.3}  TC {tc:.3}");
    Ok(())
}
