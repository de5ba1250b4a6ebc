//! Voxel grids, multi-modal volumes, the SG3D container and PGM slice export.

mod pgm;
mod sg3d;

use crate::error::{Error, Result};

pub use pgm::{encode_slice_pgm, export_slice_pgm, SliceAxis};
pub use sg3d::{read_volume, write_volume, Dtype, Payload, VolumeHeader, HEADER_LEN, MAGIC};

/// Dense `D x H x W` grid, row-major with W fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

/// Binary voxel mask.
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "grid {dims:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    data.push(f([d, h, w]));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, [d, h, w]: [usize; 3]) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn coord(&self, flat: usize) -> [usize; 3] {
        let w = flat % self.dims[2];
        let h = (flat / self.dims[2]) % self.dims[1];
        [flat / (self.dims[1] * self.dims[2]), h, w]
    }

    pub fn get(&self, c: [usize; 3]) -> &T {
        &self.data[self.index(c)]
    }

    pub fn set(&mut self, c: [usize; 3], v: T) {
        let i = self.index(c);
        self.data[i] = v;
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            dims: self.dims,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Crops to `target` with the window starting at `floor((src - target) / 2)`.
    pub fn center_crop(&self, target: [usize; 3]) -> Result<Self> {
        let start = crop_start(self.dims, target)?;
        Ok(Grid::from_fn(target, |[d, h, w]| {
            self.get([d + start[0], h + start[1], w + start[2]]).clone()
        }))
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Start of the centered crop window per axis.
pub fn crop_start(src: [usize; 3], target: [usize; 3]) -> Result<[usize; 3]> {
    let mut start = [0; 3];
    for a in 0..3 {
        if target[a] > src[a] || target[a] == 0 {
            return Err(Error::Shape(format!(
                "crop target {target:?} must be non-empty and within source {src:?}"
            )));
        }
        start[a] = (src[a] - target[a]) / 2;
    }
    Ok(start)
}

/// MRI sequences in their fixed channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Flair = 0,
    T1ce = 1,
    T1 = 2,
    T2 = 3,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1ce, Modality::T1, Modality::T2];
}

/// Raw label codes.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const NECROSIS: u8 = 1;
    pub const EDEMA: u8 = 2;
    pub const ENHANCING: u8 = 4;

    pub fn is_valid(code: u8) -> bool {
        matches!(code, BACKGROUND | NECROSIS | EDEMA | ENHANCING)
    }
}

/// Four co-registered modalities plus optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    pub modalities: [Grid<f32>; 4],
    pub labels: Option<Grid<u8>>,
}

impl MultiModalVolume {
    pub fn new(modalities: [Grid<f32>; 4], labels: Option<Grid<u8>>) -> Result<Self> {
        let dims = modalities[0].dims();
        if modalities.iter().any(|m| m.dims() != dims) {
            return Err(Error::Shape("modalities have differing dims".into()));
        }
        if let Some(l) = &labels {
            if l.dims() != dims {
                return Err(Error::Shape(format!(
                    "labels {:?} vs modalities {dims:?}",
                    l.dims()
                )));
            }
            if let Some(bad) = l.data().iter().find(|&&c| !label::is_valid(c)) {
                return Err(Error::InvalidArgument(format!("unknown label code {bad}")));
            }
        }
        Ok(Self { modalities, labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.modalities[0].dims()
    }

    pub fn modality(&self, m: Modality) -> &Grid<f32> {
        &self.modalities[m as usize]
    }

    pub fn flair(&self) -> &Grid<f32> {
        self.modality(Modality::Flair)
    }

    /// Same crop window for every modality and the labels.
    pub fn center_crop(&self, target: [usize; 3]) -> Result<Self> {
        let mods = [
            self.modalities[0].center_crop(target)?,
            self.modalities[1].center_crop(target)?,
            self.modalities[2].center_crop(target)?,
            self.modalities[3].center_crop(target)?,
        ];
        let labels = self.labels.as_ref().map(|l| l.center_crop(target)).transpose()?;
        Ok(Self {
            modalities: mods,
            labels,
        })
    }

    /// Modalities as a 4-channel float payload.
    pub fn image_payload(&self) -> (VolumeHeader, Payload) {
        let dims = self.dims();
        let mut data = Vec::with_capacity(4 * dims.iter().product::<usize>());
        for m in &self.modalities {
            data.extend_from_slice(m.data());
        }
        (VolumeHeader::new(4, dims, Dtype::F32), Payload::F32(data))
    }

    /// Rebuilds a volume from a 4-channel float SG3D payload.
    pub fn from_payload(header: &VolumeHeader, payload: &Payload, labels: Option<Grid<u8>>) -> Result<Self> {
        let Payload::F32(data) = payload else {
            return Err(Error::Format("image volume must be float32".into()));
        };
        if header.channels != 4 {
            return Err(Error::Format(format!(
                "image volume needs 4 channels, found {}",
                header.channels
            )));
        }
        let dims = header.dims();
        let vol: usize = dims.iter().product();
        let grid = |c: usize| Grid::new(dims, data[c * vol..(c + 1) * vol].to_vec());
        Self::new([grid(0)?, grid(1)?, grid(2)?, grid(3)?], labels)
    }
}

/// Writes a single-channel grid as uint8 SG3D.
pub fn write_u8_grid(path: impl AsRef<std::path::Path>, grid: &Grid<u8>) -> Result<()> {
    write_volume(
        path,
        &VolumeHeader::new(1, grid.dims(), Dtype::U8),
        &Payload::U8(grid.data().to_vec()),
    )
}

/// Reads a single-channel uint8 SG3D grid.
pub fn read_u8_grid(path: impl AsRef<std::path::Path>) -> Result<Grid<u8>> {
    let (h, p) = read_volume(path)?;
    match p {
        Payload::U8(data) if h.channels == 1 => Grid::new(h.dims(), data),
        _ => Err(Error::Format("expected a 1-channel uint8 volume".into())),
    }
}

pub fn mask_to_u8(m: &Mask) -> Grid<u8> {
    m.map(|&b| b as u8)
}
