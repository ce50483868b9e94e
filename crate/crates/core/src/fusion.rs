//! Global and local fusion of image and point features.

use std::collections::BTreeMap;

use prfusion_tensor::Tensor;
use rand::Rng;

use crate::attention::{AttentionLayer, AttentionParams, AttentionKind, SolverConfig};
use crate::error::{Error, Result};
use crate::geometry::{assign_windows, WindowGrid, WindowIndex};
use crate::params::{normal_matrix, zero_vector, ParamVisitor, Parameterized};

pub const GEM_INIT_P: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Sample2d,
    Sample3d,
    Pool2d,
    Pool3d,
}

/// Node set of a global fusion layer: `n2d` sampled image features, `n3d`
/// sampled point features, then one mean-pooled node per modality.
#[derive(Debug, Clone)]
pub struct FusionGraph {
    pub features: Tensor,
    pub kinds: Vec<NodeKind>,
    /// Row in the source feature map, `None` for pooled nodes.
    pub sources: Vec<Option<usize>>,
}

impl FusionGraph {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// `k` evenly strided indices out of `0..n`.
pub fn stride_indices(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| i * n / k).collect()
}

pub fn init_global_graph(f2d: &Tensor, f3d: &Tensor, n2d: usize, n3d: usize) -> Result<FusionGraph> {
    let (hw, n) = (f2d.rows(), f3d.rows());
    if n2d > hw || n3d > n {
        return Err(Error::Contract(format!(
            "cannot sample {n2d}/{n3d} nodes from {hw} image and {n} point features"
        )));
    }
    let s2 = stride_indices(hw, n2d);
    let s3 = stride_indices(n, n3d);
    let mut parts = Vec::with_capacity(4);
    if n2d > 0 {
        parts.push(f2d.select_rows(&s2)?);
    }
    if n3d > 0 {
        parts.push(f3d.select_rows(&s3)?);
    }
    parts.push(f2d.mean_rows());
    parts.push(f3d.mean_rows());
    let features = Tensor::concat_rows(&parts)?;

    let mut kinds = vec![NodeKind::Sample2d; n2d];
    kinds.extend(std::iter::repeat_n(NodeKind::Sample3d, n3d));
    kinds.extend([NodeKind::Pool2d, NodeKind::Pool3d]);
    let mut sources: Vec<Option<usize>> = s2.into_iter().map(Some).collect();
    sources.extend(s3.into_iter().map(Some));
    sources.extend([None, None]);
    Ok(FusionGraph { features, kinds, sources })
}

/// Generalized-mean pooling over rows: `((1/n) Σ_i max(F_i, ε)^p)^{1/p}`.
///
/// `p` is a one-element tensor so it can be learned.
pub fn gem_pool(features: &Tensor, p: &Tensor) -> Result<Tensor> {
    if features.rank() != 2 {
        return Err(Error::Contract(format!("gem_pool expects a matrix, got {:?}", features.shape())));
    }
    let mean = features.pow(p)?.mean_rows();
    Ok(mean.ln().mul(&p.recip())?.exp())
}

/// `x ↦ x + tanh(x W1 + b1) W2 + b2`, a two-layer c→c→c perceptron on a
/// residual path.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    pub fn init(c: usize, rng: &mut impl Rng) -> Result<Self> {
        let std = 1.0 / (c as f64).sqrt();
        Ok(Mlp {
            w1: normal_matrix(rng, c, c, std)?,
            b1: zero_vector(c)?,
            w2: normal_matrix(rng, c, c, std)?,
            b2: zero_vector(c)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(&self.w1)?.add(&self.b1)?.tanh();
        Ok(x.add(&h.matmul(&self.w2)?.add(&self.b2)?)?)
    }
}

impl Parameterized for Mlp {
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

#[derive(Debug, Clone)]
pub struct Gfm {
    pub attention: AttentionLayer,
    pub p: Tensor,
    pub mlp2d: Mlp,
    pub mlp3d: Mlp,
    pub n2d: usize,
    pub n3d: usize,
}

#[derive(Debug, Clone)]
pub struct GfmOutput {
    pub f2d: Tensor,
    pub f3d: Tensor,
    pub f_gfm: Tensor,
}

impl Gfm {
    pub fn init(
        c: usize,
        kind: AttentionKind,
        solver: SolverConfig,
        n2d: usize,
        n3d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Gfm {
            attention: AttentionLayer::new(AttentionParams::init(c, rng)?, kind, solver),
            p: Tensor::param(vec![GEM_INIT_P], &[1])?,
            mlp2d: Mlp::init(c, rng)?,
            mlp3d: Mlp::init(c, rng)?,
            n2d,
            n3d,
        })
    }

    /// Sample counts clipped to what the feature maps hold.
    fn sample_counts(&self, f2d: &Tensor, f3d: &Tensor) -> (usize, usize) {
        (self.n2d.min(f2d.rows()), self.n3d.min(f3d.rows()))
    }

    pub fn forward(&self, f2d: &Tensor, f3d: &Tensor) -> Result<GfmOutput> {
        let (n2d, n3d) = self.sample_counts(f2d, f3d);
        let graph = init_global_graph(f2d, f3d, n2d, n3d)?;
        let attended = self.attention.forward(&graph.features)?;
        let f_gfm = gem_pool(&attended, &self.p)?;
        self.update(f2d, f3d, f_gfm)
    }

    /// Pooled summary of the initial graph with no attention; used when
    /// global fusion is ablated away.
    pub fn pool_only(&self, f2d: &Tensor, f3d: &Tensor) -> Result<Tensor> {
        let (n2d, n3d) = self.sample_counts(f2d, f3d);
        let graph = init_global_graph(f2d, f3d, n2d, n3d)?;
        gem_pool(&graph.features, &self.p)
    }

    fn update(&self, f2d: &Tensor, f3d: &Tensor, f_gfm: Tensor) -> Result<GfmOutput> {
        Ok(GfmOutput {
            f2d: self.mlp2d.forward(&f2d.add(&f_gfm)?)?,
            f3d: self.mlp3d.forward(&f3d.add(&f_gfm)?)?,
            f_gfm,
        })
    }
}

impl Parameterized for Gfm {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.attention.params.visit(&format!("{prefix}.attn"), f);
        f(&format!("{prefix}.p"), &self.p);
        self.mlp2d.visit(&format!("{prefix}.mlp2d"), f);
        self.mlp3d.visit(&format!("{prefix}.mlp3d"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.attention.params.visit_mut(&format!("{prefix}.attn"), f);
        f(&format!("{prefix}.p"), &mut self.p);
        self.mlp2d.visit_mut(&format!("{prefix}.mlp2d"), f);
        self.mlp3d.visit_mut(&format!("{prefix}.mlp3d"), f);
    }
}

/// Nodes grouped by the window they fall in, in window order.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub groups: Vec<(WindowIndex, Vec<usize>)>,
    pub kinds: Vec<NodeKind>,
}

impl WindowBatch {
    /// `coords` are feature-plane (row, col) positions; nodes with
    /// `valid[i] == false` join no window.
    pub fn build(coords: &[[f64; 2]], valid: &[bool], kinds: Vec<NodeKind>, grid: &WindowGrid) -> Result<Self> {
        if coords.len() != valid.len() || coords.len() != kinds.len() {
            return Err(Error::Contract("window batch inputs differ in length".into()));
        }
        let kept: Vec<usize> = (0..coords.len()).filter(|&i| valid[i]).collect();
        let kept_coords: Vec<[f64; 2]> = kept.iter().map(|&i| coords[i]).collect();
        let windows = assign_windows(&kept_coords, grid)?;
        let mut map: BTreeMap<WindowIndex, Vec<usize>> = BTreeMap::new();
        for (&i, w) in kept.iter().zip(windows) {
            map.entry(w).or_default().push(i);
        }
        Ok(WindowBatch {
            groups: map.into_iter().collect(),
            kinds,
        })
    }

    pub fn grouped_count(&self) -> usize {
        self.groups.iter().map(|(_, g)| g.len()).sum()
    }

    pub fn index_groups(&self) -> Vec<Vec<usize>> {
        self.groups.iter().map(|(_, g)| g.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Lfm {
    pub attention: AttentionLayer,
    pub window: (usize, usize),
}

/// Where the nodes of a local fusion layer sit on the feature plane.
#[derive(Debug, Clone)]
pub struct LfmLayout<'a> {
    pub coords2d: &'a [[f64; 2]],
    pub coords3d: &'a [[f64; 2]],
    pub valid3d: &'a [bool],
    /// Feature-map extent (rows, cols).
    pub extent: (usize, usize),
}

impl Lfm {
    pub fn init(c: usize, kind: AttentionKind, solver: SolverConfig, window: (usize, usize), rng: &mut impl Rng) -> Result<Self> {
        Ok(Lfm {
            attention: AttentionLayer::new(AttentionParams::init(c, rng)?, kind, solver),
            window,
        })
    }

    pub fn window_batch(&self, layout: &LfmLayout<'_>) -> Result<WindowBatch> {
        let grid = WindowGrid::new(layout.extent, self.window.0, self.window.1)?;
        let mut coords = layout.coords2d.to_vec();
        coords.extend_from_slice(layout.coords3d);
        let mut valid = vec![true; layout.coords2d.len()];
        valid.extend_from_slice(layout.valid3d);
        let mut kinds = vec![NodeKind::Sample2d; layout.coords2d.len()];
        kinds.extend(std::iter::repeat_n(NodeKind::Sample3d, layout.coords3d.len()));
        WindowBatch::build(&coords, &valid, kinds, &grid)
    }

    /// Window-local attention over image and projected point features,
    /// returned split back into the two modalities.
    pub fn forward(&self, f2d: &Tensor, f3d: &Tensor, layout: &LfmLayout<'_>) -> Result<(Tensor, Tensor)> {
        let (hw, n) = (f2d.rows(), f3d.rows());
        if layout.coords2d.len() != hw || layout.coords3d.len() != n || layout.valid3d.len() != n {
            return Err(Error::Contract("layout does not match feature counts".into()));
        }
        let batch = self.window_batch(layout)?;
        let nodes = Tensor::concat_rows(&[f2d.clone(), f3d.clone()])?;
        let out = self.attention.forward_grouped(&nodes, &batch.index_groups())?;
        let first: Vec<usize> = (0..hw).collect();
        let second: Vec<usize> = (hw..hw + n).collect();
        Ok((out.select_rows(&first)?, out.select_rows(&second)?))
    }
}

impl Parameterized for Lfm {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.attention.params.visit(&format!("{prefix}.attn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.attention.params.visit_mut(&format!("{prefix}.attn"), f);
    }
}
