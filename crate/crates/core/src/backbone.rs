//! Small dense feature extractors for images and point clouds.

use prfusion_tensor::Tensor;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::voxel_downsample;
use crate::image::Image;
use crate::params::{normal_matrix, zero_vector, ParamVisitor, Parameterized};

/// Downsampling factor of [`ImageBackbone`].
pub const IMAGE_STRIDE: usize = 8;

const KERNEL: usize = 3;

/// 3×3 convolution, stride 2, zero padding 1, followed by tanh.
#[derive(Debug, Clone)]
pub struct ConvStage {
    /// `(9·c_in) × c_out`, rows ordered (ki, kj, channel).
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvStage {
    pub fn init(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let fan_in = KERNEL * KERNEL * c_in;
        Ok(ConvStage {
            w: normal_matrix(rng, fan_in, c_out, 1.0 / (fan_in as f64).sqrt())?,
            b: zero_vector(c_out)?,
        })
    }

    pub fn out_extent(h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(2), w.div_ceil(2))
    }

    /// `x` is `(h·w) × c_in`, pixels in row-major order.
    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let c_in = x.cols();
        if x.rows() != h * w || self.w.rows() != KERNEL * KERNEL * c_in {
            return Err(Error::Contract(format!(
                "conv input {:?} does not match {h}x{w} with {} weight rows",
                x.shape(),
                self.w.rows()
            )));
        }
        let (ho, wo) = Self::out_extent(h, w);
        let mut idx = Vec::with_capacity(ho * wo * KERNEL * KERNEL * c_in);
        for oi in 0..ho {
            for oj in 0..wo {
                for ki in 0..KERNEL {
                    for kj in 0..KERNEL {
                        let r = (2 * oi + ki).checked_sub(1).filter(|&r| r < h);
                        let c = (2 * oj + kj).checked_sub(1).filter(|&c| c < w);
                        for ch in 0..c_in {
                            idx.push(r.zip(c).map(|(r, c)| (r * w + c) * c_in + ch));
                        }
                    }
                }
            }
        }
        let cols = x.gather(idx, &[ho * wo, KERNEL * KERNEL * c_in])?;
        Ok(cols.matmul(&self.w)?.add(&self.b)?.tanh())
    }
}

/// Image features on a grid downscaled by [`IMAGE_STRIDE`].
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    /// `(h'·w') × c`, row-major over the grid.
    pub features: Tensor,
    /// Cell-centre `(row, col)` of each feature on the downscaled grid.
    pub coords: Vec<[f64; 2]>,
    pub extent: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ImageBackbone {
    pub stages: Vec<ConvStage>,
}

impl ImageBackbone {
    pub fn init(channels: usize, c: usize, rng: &mut impl Rng) -> Result<Self> {
        let widths = [channels, 16, 32, c];
        let stages = widths
            .windows(2)
            .map(|p| ConvStage::init(p[0], p[1], rng))
            .collect::<Result<_>>()?;
        Ok(ImageBackbone { stages })
    }

    pub fn forward(&self, image: &Image) -> Result<ImageFeatures> {
        let (mut h, mut w) = (image.height(), image.width());
        let mut x = Tensor::new(image.data().to_vec(), &[h * w, image.channels()])?;
        for stage in &self.stages {
            x = stage.forward(&x, h, w)?;
            (h, w) = ConvStage::out_extent(h, w);
        }
        let coords = (0..h)
            .flat_map(|r| (0..w).map(move |c| [r as f64 + 0.5, c as f64 + 0.5]))
            .collect();
        Ok(ImageFeatures {
            features: x,
            coords,
            extent: (h, w),
        })
    }
}

impl Parameterized for ImageBackbone {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, s) in self.stages.iter().enumerate() {
            f(&format!("{prefix}.conv{i}.w"), &s.w);
            f(&format!("{prefix}.conv{i}.b"), &s.b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(&format!("{prefix}.conv{i}.w"), &mut s.w);
            f(&format!("{prefix}.conv{i}.b"), &mut s.b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct PointFeatures {
    pub features: Tensor,
    /// Voxel centroids in the LiDAR frame, one per feature row.
    pub points: Vec<[f64; 3]>,
}

/// Voxelize, then a shared two-layer tanh perceptron on scaled coordinates.
#[derive(Debug, Clone)]
pub struct PointBackbone {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub voxel: f64,
    pub scale: f64,
}

impl PointBackbone {
    pub fn init(c: usize, voxel: f64, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(PointBackbone {
            w1: normal_matrix(rng, 3, c, 1.0)?,
            b1: normal_matrix(rng, 1, c, 1.0)?.reshape(&[c])?.to_param(),
            w2: normal_matrix(rng, c, c, 1.0 / (c as f64).sqrt())?,
            b2: zero_vector(c)?,
            voxel,
            scale,
        })
    }

    pub fn forward(&self, points: &[[f64; 3]]) -> Result<PointFeatures> {
        if points.is_empty() {
            return Err(Error::Data("empty point cloud".into()));
        }
        let points = voxel_downsample(points, self.voxel)?;
        self.forward_voxelized(points)
    }

    /// Skips voxelization; `points` are used as given.
    pub fn forward_voxelized(&self, points: Vec<[f64; 3]>) -> Result<PointFeatures> {
        let n = points.len();
        let flat = points.iter().flatten().map(|v| v * self.scale).collect();
        let x = Tensor::new(flat, &[n, 3])?;
        let h = x.matmul(&self.w1)?.add(&self.b1)?.tanh();
        let features = h.matmul(&self.w2)?.add(&self.b2)?.tanh();
        Ok(PointFeatures { features, points })
    }
}

impl Parameterized for PointBackbone {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&format!("{prefix}.w1"), &self.w1);
        f(&format!("{prefix}.b1"), &self.b1);
        f(&format!("{prefix}.w2"), &self.w2);
        f(&format!("{prefix}.b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
    }
}
