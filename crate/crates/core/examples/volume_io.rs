//! Writes a phantom as SG3D volumes, reads it back, and exports a mid-slice
//! of each modality as PGM.

use upmad::phantom::{gen_phantom, PhantomSpec};
use upmad::volume::{export_slice_pgm, read_volume, write_volume, Modality, MultiModalVolume, SliceAxis};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("upmad_volume_example");
    std::fs::create_dir_all(&dir)?;
    let v = gen_phantom(&PhantomSpec::default(), 0)?;
    let (header, payload) = v.image_payload();
    let path = dir.join("case.sg3d");
    write_volume(&path, &header, &payload)?;
    let (h, p) = read_volume(&path)?;
    let back = MultiModalVolume::from_payload(&h, &p, v.labels.clone())?;
    println!("{}: {} channels, dims {:?}, round trip equal: {}", path.display(), h.channels, h.dims(), back == v);
    let mid = v.dims()[0] / 2;
    for m in Modality::ALL {
        let g = v.modality(m);
        let hi = g.data().iter().copied().fold(0.0f32, f32::max) as f64;
        let out = dir.join(format!("{m:?}_axial.pgm").to_lowercase());
        export_slice_pgm(g, SliceAxis::Axial, mid, (0.0, hi), &out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
