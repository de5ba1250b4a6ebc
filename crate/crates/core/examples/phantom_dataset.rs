//! Generates a small synthetic cohort, writes it to a temporary directory,
//! reads it back and prints the split and per-case region sizes.

use upmad::metrics::compose_regions;
use upmad::phantom::{gen_phantom, list_cases, read_case, split_dataset, write_case, PhantomSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("upmad_phantom_example");
    std::fs::create_dir_all(&dir)?;
    let spec = PhantomSpec::default();
    for k in 0..10 {
        write_case(&dir, k, &gen_phantom(&spec, k)?)?;
    }
    let ids = list_cases(&dir)?;
    let (train, val, test) = split_dataset(&ids, (8, 1, 1), spec.rng_seed)?;
    println!("{} cases in {}", ids.len(), dir.display());
    println!("train {train:?}\nval   {val:?}\ntest  {test:?}");
    for id in ids {
        let v = read_case(&dir, id)?;
        let r = compose_regions(v.labels.as_ref().expect("phantoms carry labels"))?;
        println!("case {id:>2}: dims {:?}  WT {:>5}  TC {:>5}  ET {:>4}", v.dims(), r.wt.count(), r.tc.count(), r.et.count());
    }
    Ok(())
}
