//! Walks the ablation grid: for each switch setting prints the layer counts
//! and size of the resulting network and runs a two-epoch fit on three
//! small phantoms.

use upmad::net::{LayerKind, Network, NetworkConfig};
use upmad::phantom::{gen_phantom, PhantomSpec};
use upmad::prior::PriorConfig;
use upmad::train::{fit, prepare_case, Ablation, TrainConfig};

fn main() -> upmad::Result<()> {
    let spec = PhantomSpec {
        dims: [8, 16, 16],
        ..Default::default()
    };
    let base = NetworkConfig {
        stage_widths: [8, 8, 16, 16],
        gn_groups: 4,
        ..Default::default()
    };
    let volumes: Vec<_> = (0..3).map(|k| gen_phantom(&spec, k)).collect::<upmad::Result<_>>()?;
    for ablation in Ablation::STUDY {
        let mut net = Network::<f32>::new(ablation.network_config(&base))?;
        let count = |f: fn(&LayerKind) -> bool| net.layers().iter().filter(|l| f(&l.kind)).count();
        let attention = count(|k| matches!(k, LayerKind::Attention { .. }));
        let dropout = count(|k| matches!(k, LayerKind::Dropout { .. }));
        let (params, flops) = net.count_params_flops(spec.dims);
        let cases = volumes
            .iter()
            .enumerate()
            .map(|(k, v)| prepare_case(k.to_string(), v, ablation.use_prior, &PriorConfig::default()))
            .collect::<upmad::Result<Vec<_>>>()?;
        let config = TrainConfig {
            max_epochs: 2,
            patience: 2,
            lr_init: 1e-3,
            ablation,
            ..Default::default()
        };
        let out = fit(&mut net, &cases[..2], &cases[2..], &config, |_| {})?;
        println!(
            "{:<28} attention {attention}  dropout {dropout}  params {params:>7}  flops {flops:.2e}  val loss {:.4}",
            ablation.label(),
            out.best_val_loss as f32,
        );
    }
    Ok(())
}
