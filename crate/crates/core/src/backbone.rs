//! Multi-level grid features: the stub pyramid backbone, the OFT feature
//! container, and alignment of the four levels into one multi-sight matrix.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const NUM_LEVELS: usize = 4;
const OFT_MAGIC: &[u8; 4] = b"OFT1";

/// Four grid feature maps `[positions, channels]`, finest first. Positions are
/// row-major over a square grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFeatureSet {
    levels: Vec<Tensor<f32>>,
}

impl GridFeatureSet {
    pub fn new(levels: Vec<Tensor<f32>>) -> Result<Self> {
        if levels.len() != NUM_LEVELS {
            return Err(dim_err!("expected {NUM_LEVELS} levels, got {}", levels.len()));
        }
        for (i, l) in levels.iter().enumerate() {
            l.ensure_matrix("feature level")?;
            if l.rows() == 0 || l.cols() == 0 {
                return Err(dim_err!("level {i} has empty shape {:?}", l.shape()));
            }
        }
        for w in levels.windows(2) {
            if w[0].rows() < w[1].rows() {
                return Err(dim_err!(
                    "level position counts must not grow: {} then {}",
                    w[0].rows(),
                    w[1].rows()
                ));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Tensor<f32>] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Tensor<f32> {
        &self.levels[i]
    }

    /// `(positions, channels)` per level.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.rows(), l.cols())).collect()
    }

    pub fn coarsest_positions(&self) -> usize {
        self.levels[NUM_LEVELS - 1].rows()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(OFT_MAGIC);
        out.extend_from_slice(&(self.levels.len() as u32).to_le_bytes());
        for l in &self.levels {
            out.extend_from_slice(&(l.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.cols() as u32).to_le_bytes());
            for v in l.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != OFT_MAGIC {
            return Err(Error::Format("bad magic, expected OFT1".into()));
        }
        let count = r.u32()? as usize;
        if count != NUM_LEVELS {
            return Err(Error::Format(format!(
                "expected {NUM_LEVELS} levels, header advertises {count}"
            )));
        }
        let mut levels = Vec::with_capacity(count);
        for i in 0..count {
            let n = r.u32()? as usize;
            let c = r.u32()? as usize;
            let len = n
                .checked_mul(c)
                .and_then(|v| v.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("level {i} shape {n}x{c} overflows")))?;
            let raw = r.take(len).map_err(|_| {
                Error::Format(format!("truncated: level {i} declares {n}x{c} values"))
            })?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            levels.push(Tensor::matrix(n, c, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last level",
                bytes.len() - r.pos
            )));
        }
        Self::new(levels).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Reads an OFT feature container.
pub fn load_features(path: impl AsRef<Path>) -> Result<GridFeatureSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    GridFeatureSet::from_bytes(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Input to the stub backbone.
#[derive(Clone, Debug)]
pub enum BackboneInput {
    /// Raw image `[height, width, 3]`.
    Image(Tensor<f32>),
    /// Uniform noise image in `[0, 1)` derived from a seed.
    Synthetic { seed: u64, height: usize, width: usize },
}

impl BackboneInput {
    fn image(&self) -> Result<Tensor<f32>> {
        match self {
            BackboneInput::Image(t) => {
                if t.shape().len() != 3 || t.shape()[2] != 3 {
                    return Err(dim_err!("image must be [h, w, 3], got {:?}", t.shape()));
                }
                Ok(t.clone())
            }
            BackboneInput::Synthetic {
                seed,
                height,
                width,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let data = (0..height * width * 3).map(|_| rng.random::<f32>()).collect();
                Tensor::new(vec![*height, *width, 3], data)
            }
        }
    }
}

/// Small trainable-shaped pyramid standing in for a hierarchical vision
/// transformer: a 4×4 patch embedding, two 2×2 patch merges, and a final stage
/// that keeps resolution. Widths are `d0 · {1, 2, 4, 8}`.
#[derive(Clone, Debug)]
pub struct StubBackbone {
    pub d0: usize,
    stages: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl StubBackbone {
    pub const PATCH: usize = 4;

    pub fn new(d0: usize, seed: u64) -> Result<Self> {
        if d0 == 0 {
            return Err(Error::Config("backbone width d0 must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [
            (Self::PATCH * Self::PATCH * 3, d0),
            (4 * d0, 2 * d0),
            (4 * 2 * d0, 4 * d0),
            (4 * d0, 8 * d0),
        ];
        let stages = dims
            .iter()
            .map(|&(i, o)| {
                let bound = (6.0 / (i + o) as f32).sqrt();
                let w = (0..i * o).map(|_| rng.random_range(-bound..bound)).collect();
                (
                    Tensor::matrix(i, o, w).expect("sized"),
                    Tensor::zeros(&[1, o]),
                )
            })
            .collect();
        Ok(Self { d0, stages })
    }

    pub fn set_biases(&mut self, value: f32) {
        for (_, b) in &mut self.stages {
            b.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }

    pub fn forward(&self, input: &BackboneInput) -> Result<GridFeatureSet> {
        let image = input.image()?;
        let (h, w) = (image.shape()[0], image.shape()[1]);
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} must have both sides divisible by 16"
            )));
        }
        let (gh, gw) = (h / Self::PATCH, w / Self::PATCH);
        let patch_len = Self::PATCH * Self::PATCH * 3;
        let mut patches = Vec::with_capacity(gh * gw * patch_len);
        for pr in 0..gh {
            for pc in 0..gw {
                for y in 0..Self::PATCH {
                    for x in 0..Self::PATCH {
                        let base = ((pr * Self::PATCH + y) * w + pc * Self::PATCH + x) * 3;
                        patches.extend_from_slice(&image.data()[base..base + 3]);
                    }
                }
            }
        }
        let g1 = self.stage(0, &Tensor::matrix(gh * gw, patch_len, patches)?)?;
        let g2 = self.stage(1, &merge_2x2(&g1, gh, gw))?;
        let g3 = self.stage(2, &merge_2x2(&g2, gh / 2, gw / 2))?;
        let g4 = self.stage(3, &g3)?;
        GridFeatureSet::new(vec![g1, g2, g3, g4])
    }

    fn stage(&self, i: usize, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (w, b) = &self.stages[i];
        let y = x.matmul(w)?;
        let c = y.cols();
        Ok(Tensor::from_fn(y.rows(), c, |r, j| {
            (y.get(r, j) + b.data()[j]).max(0.0)
        }))
    }
}

/// Concatenates the channels of each 2×2 block of a `gh × gw` grid.
fn merge_2x2(x: &Tensor<f32>, gh: usize, gw: usize) -> Tensor<f32> {
    let c = x.cols();
    let (oh, ow) = (gh / 2, gw / 2);
    let mut data = Vec::with_capacity(oh * ow * 4 * c);
    for r in 0..oh {
        for col in 0..ow {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                data.extend_from_slice(x.row((2 * r + dy) * gw + 2 * col + dx));
            }
        }
    }
    Tensor::matrix(oh * ow, 4 * c, data).expect("sized")
}

fn grid_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

/// `[coarse, fine]` block-mean matrix mapping a square `fine` grid onto a
/// square `coarse` grid.
pub fn merge_matrix<T: Scalar>(fine: usize, coarse: usize) -> Result<Tensor<T>> {
    let (fs, cs) = match (grid_side(fine), grid_side(coarse)) {
        (Some(f), Some(c)) if c > 0 && f % c == 0 => (f, c),
        _ => {
            return Err(Error::Config(format!(
                "cannot merge {fine} positions onto {coarse}: grids must be square with an integer side ratio"
            )))
        }
    };
    let k = fs / cs;
    let w = T::of(1.0 / (k * k) as f64);
    let mut m = Tensor::zeros(&[coarse, fine]);
    for r in 0..cs {
        for c in 0..cs {
            for dy in 0..k {
                for dx in 0..k {
                    m.set(r * cs + c, (r * k + dy) * fs + c * k + dx, w);
                }
            }
        }
    }
    Ok(m)
}

/// Per-level projection to `d_model` followed by block-mean patch merging onto
/// the coarsest grid; the four results are concatenated along channels.
#[derive(Clone, Debug)]
pub struct Aligner {
    pub projections: Vec<Linear>,
    pub level_positions: Vec<usize>,
    pub d_model: usize,
}

impl Aligner {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        level_shapes: &[(usize, usize)],
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if level_shapes.len() != NUM_LEVELS {
            return Err(dim_err!("expected {NUM_LEVELS} level shapes"));
        }
        let coarse = level_shapes[NUM_LEVELS - 1].0;
        for &(n, _) in level_shapes {
            merge_matrix::<f64>(n, coarse)?;
        }
        let projections = level_shapes
            .iter()
            .enumerate()
            .map(|(i, &(_, c))| Linear::new(store, &format!("{name}.level{i}"), c, d_model, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            projections,
            level_positions: level_shapes.iter().map(|s| s.0).collect(),
            d_model,
        })
    }

    fn check(&self, features: &GridFeatureSet) -> Result<()> {
        for (i, (l, p)) in features.levels().iter().zip(&self.projections).enumerate() {
            if l.rows() != self.level_positions[i] || l.cols() != p.in_dim {
                return Err(dim_err!(
                    "level {i} has shape {:?}, model expects [{}, {}]",
                    l.shape(),
                    self.level_positions[i],
                    p.in_dim
                ));
            }
        }
        Ok(())
    }

    /// Projects one level to `d_model` without merging.
    pub fn project_level<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        features: &GridFeatureSet,
        level: usize,
    ) -> Result<NodeId> {
        self.check(features)?;
        let x = g.constant(features.level(level).cast())?;
        self.projections[level].forward(g, x)
    }

    /// The multi-sight matrix `[coarse positions, 4 · d_model]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, features: &GridFeatureSet) -> Result<NodeId> {
        self.check(features)?;
        let coarse = features.coarsest_positions();
        let mut parts = Vec::with_capacity(NUM_LEVELS);
        for (i, level) in features.levels().iter().enumerate() {
            let x = g.constant(level.cast())?;
            let y = self.projections[i].forward(g, x)?;
            let y = if level.rows() == coarse {
                y
            } else {
                let m = g.constant(merge_matrix(level.rows(), coarse)?)?;
                g.matmul(m, y)?
            };
            parts.push(y);
        }
        g.concat_cols(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> GridFeatureSet {
        StubBackbone::new(2, 3)
            .unwrap()
            .forward(&BackboneInput::Synthetic {
                seed: 9,
                height: 16,
                width: 16,
            })
            .unwrap()
    }

    #[test]
    fn stage_layout_for_64px() {
        let set = StubBackbone::new(16, 42)
            .unwrap()
            .forward(&BackboneInput::Synthetic {
                seed: 42,
                height: 64,
                width: 64,
            })
            .unwrap();
        assert_eq!(set.shapes(), vec![(256, 16), (64, 32), (16, 64), (16, 128)]);
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let mut bb = StubBackbone::new(4, 1).unwrap();
        bb.set_biases(0.0);
        let set = bb
            .forward(&BackboneInput::Image(Tensor::zeros(&[32, 32, 3])))
            .unwrap();
        assert!(set.levels().iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backbone_is_deterministic() {
        let run = || {
            StubBackbone::new(8, 42)
                .unwrap()
                .forward(&BackboneInput::Synthetic {
                    seed: 42,
                    height: 32,
                    width: 48,
                })
                .unwrap()
                .to_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_indivisible_image() {
        let bb = StubBackbone::new(4, 1).unwrap();
        let r = bb.forward(&BackboneInput::Synthetic {
            seed: 1,
            height: 40,
            width: 32,
        });
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn oft_round_trip_is_bit_exact() {
        let set = sample_set();
        let back = GridFeatureSet::from_bytes(&set.to_bytes()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn truncated_oft_is_rejected() {
        let bytes = sample_set().to_bytes();
        for cut in [0, 3, 8, 17, bytes.len() - 1] {
            assert!(matches!(
                GridFeatureSet::from_bytes(&bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(GridFeatureSet::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(GridFeatureSet::from_bytes(&bad).is_err());
    }

    #[test]
    fn three_level_header_is_rejected() {
        let mut bytes = sample_set().to_bytes();
        bytes[4..8].copy_from_slice(&3u32.to_le_bytes());
        let err = GridFeatureSet::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("expected 4 levels"), "{err}");
    }

    #[test]
    fn merge_matrix_block_means() {
        let m = merge_matrix::<f64>(16, 4).unwrap();
        // coarse cell 1 (row 0, col 1) averages fine positions 2, 3, 6, 7
        let row: Vec<usize> = (0..16).filter(|&j| m.get(1, j) != 0.0).collect();
        assert_eq!(row, vec![2, 3, 6, 7]);
        assert!(m.row(1).iter().all(|&v| v == 0.0 || v == 0.25));
        assert!(merge_matrix::<f64>(12, 4).is_err());
        assert!(merge_matrix::<f64>(9, 4).is_err());
    }
}
