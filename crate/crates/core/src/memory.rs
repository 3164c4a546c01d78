//! Visual memory of reference patch features and the nearest-neighbour
//! anomaly map `M_mem[ij] = min_r (1 - <F_ij, r>) / 2`.
//!
//! On-disk layout (all integers little-endian `u32`, floats little-endian `f32`):
//!
//! ```text
//! magic "ANOPLEMB" | version | rows | dim | shots | grid_h | grid_w
//! | n_layers | layers[n_layers] | rows * dim features, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};

use crate::backbone::{ClipBackbone, PromptHook};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ANOPLEMB";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct MemoryBank {
    rows: Tensor,
    dim: usize,
    layers: Vec<usize>,
    shots: usize,
    grid: (usize, usize),
}

impl MemoryBank {
    /// Layer-averaged, normalized patch features of `k` reference images
    /// (`pixels: [k, 3, R, R]`), all seen as view `view`.
    pub fn build(
        backbone: &ClipBackbone,
        hook: &dyn PromptHook,
        pixels: &Tensor,
        layers: &[usize],
        view: usize,
    ) -> Result<Self> {
        let k = pixels.dim(0)?;
        if k == 0 {
            return Err(Error::config(
                "memory bank needs at least one reference shot",
            ));
        }
        if layers.is_empty() {
            return Err(Error::config("memory bank needs at least one layer"));
        }
        let views = vec![view; k];
        let feats = backbone.extract_intermediate_patches(pixels, layers, hook, &views)?;
        Self::from_features(&feats, layers)
    }

    /// From `[k, h, w, d]` unit-norm features.
    pub fn from_features(features: &Tensor, layers: &[usize]) -> Result<Self> {
        let (k, h, w, d) = features.dims4()?;
        if k == 0 {
            return Err(Error::config(
                "memory bank needs at least one reference shot",
            ));
        }
        let rows = features
            .reshape((k * h * w, d))?
            .to_dtype(DType::F32)?
            .contiguous()?;
        Ok(Self {
            rows,
            dim: d,
            layers: layers.to_vec(),
            shots: k,
            grid: (h, w),
        })
    }

    /// Rows `[m, d]`; used directly for tests and custom banks.
    pub fn from_rows(rows: Vec<f32>, dim: usize, grid: (usize, usize)) -> Result<Self> {
        if dim == 0 || rows.len() % dim != 0 {
            return Err(Error::shape(format!(
                "{} values do not form rows of width {dim}",
                rows.len()
            )));
        }
        let m = rows.len() / dim;
        Ok(Self {
            rows: Tensor::from_vec(rows, (m, dim), &Device::Cpu)?,
            dim,
            layers: Vec::new(),
            shots: 0,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn rows(&self) -> Result<Vec<f32>> {
        Ok(self.rows.flatten_all()?.to_vec1::<f32>()?)
    }

    /// Appends rows of another bank with the same width.
    pub fn extend(&mut self, other: &MemoryBank) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::shape("memory banks differ in width"));
        }
        self.rows = Tensor::cat(&[&self.rows, &other.rows], 0)?;
        self.shots += other.shots;
        Ok(())
    }

    /// Anomaly values for each row of `queries: [..., d]` (unit rows),
    /// flattened over the leading dimensions.
    pub fn query(&self, queries: &Tensor) -> Result<Vec<f32>> {
        if self.is_empty() {
            return Err(Error::State("memory bank is empty".into()));
        }
        let d = *queries.dims().last().unwrap_or(&0);
        if d != self.dim {
            return Err(Error::shape(format!(
                "query width {d} does not match bank width {}",
                self.dim
            )));
        }
        let q = queries.to_dtype(DType::F32)?.reshape(((), d))?;
        let sims = q.matmul(&self.rows.t()?)?;
        let best = sims.max(D::Minus1)?.to_vec1::<f32>()?;
        Ok(best
            .into_iter()
            .map(|s| ((1.0 - s) * 0.5).clamp(0.0, 1.0))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + self.len() * self.dim * 4);
        buf.extend_from_slice(MAGIC);
        let header = [
            VERSION,
            self.len() as u32,
            self.dim as u32,
            self.shots as u32,
            self.grid.0 as u32,
            self.grid.1 as u32,
            self.layers.len() as u32,
        ];
        let layers = self.layers.iter().map(|&l| l as u32);
        for v in header.into_iter().chain(layers) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.rows()? {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
        if buf.len() < 8 + 28 || &buf[..8] != MAGIC {
            return Err(bad("not a memory bank file"));
        }
        let word = |i: usize| -> u32 {
            let o = 8 + 4 * i;
            u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"))
        };
        if word(0) != VERSION {
            return Err(bad("unsupported version"));
        }
        let (m, d, shots) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let grid = (word(4) as usize, word(5) as usize);
        let n_layers = word(6) as usize;
        let start = 8 + 4 * (7 + n_layers);
        if buf.len() != start + m * d * 4 {
            return Err(bad("truncated feature block"));
        }
        let layers = (0..n_layers).map(|i| word(7 + i) as usize).collect();
        let rows: Vec<f32> = buf[start..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            rows: Tensor::from_vec(rows, (m, d), &Device::Cpu)?,
            dim: d,
            layers,
            shots,
            grid,
        })
    }
}
