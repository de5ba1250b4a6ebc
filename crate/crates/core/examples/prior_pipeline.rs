//! Builds the FLAIR prior for a few phantoms and reports how well it covers
//! the whole tumour, along with the Otsu threshold that started it.

use upmad::metrics::dice_score;
use upmad::phantom::{gen_phantom, PhantomSpec};
use upmad::prior::{largest_component, otsu_threshold, try_generate_prior, tumor_std_stats, PriorConfig};

fn main() -> upmad::Result<()> {
    let spec = PhantomSpec::default();
    let config = PriorConfig::default();
    let volumes: Vec<_> = (0..5).map(|k| gen_phantom(&spec, k)).collect::<upmad::Result<_>>()?;
    for (k, v) in volumes.iter().enumerate() {
        let flair = v.flair();
        let t = otsu_threshold(flair, config.histogram_bins)?;
        let bright = largest_component(&flair.map(|&x| x as f64 > t), config.component_connectivity);
        let prior = try_generate_prior(flair, &config)?;
        let wt = v.labels.as_ref().unwrap().map(|&c| c != 0);
        println!(
            "case {k}: otsu {t:.1}  bright component {:>4}  prior {:>5}  Dice vs WT {:.3}",
            bright.count(),
            prior.count(),
            dice_score(&prior, &wt)?.value
        );
    }
    let stats = tumor_std_stats(volumes.iter().map(|v| (v.flair(), v.labels.as_ref().unwrap())))?;
    println!("within-tumour FLAIR std: min {:.2} median {:.2} max {:.2}", stats.min, stats.median, stats.max);
    Ok(())
}
