//! The LiDAR backbone: a stem conv into four residual sparse
//! convolution blocks (16, 16, 32, 64 channels, two submanifold convs
//! each) with a stride-2 downsampling conv after every block, a dense 2D
//! map branch, and a fused head producing K deterministic controls plus
//! 4K evidential pre-activations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{RoutedMapRaster, VoxelizedCloud};
use crate::sparse::{build_kernel_map, KernelMap, KernelMapError, OffsetPairs};

use super::layers::*;
use super::mat::Mat;
use super::sparse_conv::{
    conv_backward, conv_forward, grid_pairs_2d, ConvParams, ShapeError, SparseTensor,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("empty input cloud")]
    EmptyCloud,
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    KernelMap(#[from] KernelMapError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetConfig {
    /// Number of lookahead outputs.
    pub k: usize,
    pub input_channels: usize,
    /// Residual block widths.
    pub widths: [usize; 4],
    /// Whether the evidential head exists.
    pub hybrid: bool,
    /// Whether the map branch exists (navigation models).
    pub navigation: bool,
    pub map_h: usize,
    pub map_w: usize,
    pub map_widths: [usize; 2],
    /// Map feature size after the branch's dense layer.
    pub map_feat: usize,
    /// Trunk width between the concat and the heads.
    pub trunk_feat: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            k: 10,
            input_channels: 3,
            widths: [16, 16, 32, 64],
            hybrid: true,
            navigation: true,
            map_h: 64,
            map_w: 64,
            map_widths: [8, 16],
            map_feat: 32,
            trunk_feat: 64,
        }
    }
}

impl NetConfig {
    pub fn lidar_feat(&self) -> usize {
        self.widths[3]
    }

    pub fn concat_dim(&self) -> usize {
        self.lidar_feat() + self.map_feat
    }

    fn down_out_width(&self, block: usize) -> usize {
        if block + 1 < 4 {
            self.widths[block + 1]
        } else {
            self.widths[3]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub conv: ConvParams,
    pub bn: BatchNormParams,
}

impl ConvBn {
    fn zeros(num_offsets: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            conv: ConvParams::zeros(num_offsets, c_in, c_out),
            bn: BatchNormParams::zeros(c_out),
        }
    }

    fn init(num_offsets: usize, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut conv = ConvParams::zeros(num_offsets, c_in, c_out);
        let std = (2.0 / (num_offsets * c_in) as f64).sqrt();
        for w in &mut conv.weights {
            for v in &mut w.data {
                *v = gauss(rng) * std;
            }
        }
        Self {
            conv,
            bn: BatchNormParams::new(c_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv_a: ConvBn,
    pub conv_b: ConvBn,
    pub down: ConvBn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapBranch {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub fc: DenseParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastLidarNet {
    pub cfg: NetConfig,
    pub stem: ConvBn,
    pub blocks: Vec<ResBlock>,
    pub map_branch: Option<MapBranch>,
    pub trunk: DenseParams,
    pub head_x: DenseParams,
    pub head_e: Option<DenseParams>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per sample keeps the draw count fixed.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn dense_init(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> DenseParams {
    let mut p = DenseParams::zeros(c_in, c_out);
    let std = (2.0 / c_in as f64).sqrt();
    for v in &mut p.weight.data {
        *v = gauss(rng) * std;
    }
    p
}

impl FastLidarNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = cfg.widths;
        let stem = ConvBn::init(27, cfg.input_channels, w[0], &mut rng);
        let blocks = (0..4)
            .map(|b| ResBlock {
                conv_a: ConvBn::init(27, w[b], w[b], &mut rng),
                conv_b: ConvBn::init(27, w[b], w[b], &mut rng),
                down: ConvBn::init(27, w[b], cfg.down_out_width(b), &mut rng),
            })
            .collect();
        let map_branch = cfg.navigation.then(|| MapBranch {
            conv1: ConvBn::init(9, 2, cfg.map_widths[0], &mut rng),
            conv2: ConvBn::init(9, cfg.map_widths[0], cfg.map_widths[1], &mut rng),
            fc: dense_init(cfg.map_widths[1], cfg.map_feat, &mut rng),
        });
        let trunk = dense_init(cfg.concat_dim(), cfg.trunk_feat, &mut rng);
        let head_x = dense_init(cfg.trunk_feat, cfg.k, &mut rng);
        let head_e = cfg.hybrid.then(|| dense_init(cfg.trunk_feat, 4 * cfg.k, &mut rng));
        Self {
            cfg,
            stem,
            blocks,
            map_branch,
            trunk,
            head_x,
            head_e,
        }
    }

    /// Same-shaped container with every tensor zeroed; used for
    /// gradients and optimizer state.
    pub fn zeros_like(&self) -> Self {
        let cfg = self.cfg.clone();
        let w = cfg.widths;
        Self {
            stem: ConvBn::zeros(27, cfg.input_channels, w[0]),
            blocks: (0..4)
                .map(|b| ResBlock {
                    conv_a: ConvBn::zeros(27, w[b], w[b]),
                    conv_b: ConvBn::zeros(27, w[b], w[b]),
                    down: ConvBn::zeros(27, w[b], cfg.down_out_width(b)),
                })
                .collect(),
            map_branch: self.map_branch.as_ref().map(|_| MapBranch {
                conv1: ConvBn::zeros(9, 2, cfg.map_widths[0]),
                conv2: ConvBn::zeros(9, cfg.map_widths[0], cfg.map_widths[1]),
                fc: DenseParams::zeros(cfg.map_widths[1], cfg.map_feat),
            }),
            trunk: DenseParams::zeros(cfg.concat_dim(), cfg.trunk_feat),
            head_x: DenseParams::zeros(cfg.trunk_feat, cfg.k),
            head_e: self
                .head_e
                .as_ref()
                .map(|_| DenseParams::zeros(cfg.trunk_feat, 4 * cfg.k)),
            cfg,
        }
    }

    /// Every tensor in declaration order. `trainable_only` skips batch
    /// norm running statistics (they are state, not parameters).
    pub fn tensors(&self, trainable_only: bool) -> Vec<&Vec<f64>> {
        let mut out: Vec<&Vec<f64>> = Vec::new();
        fn conv_bn<'a>(out: &mut Vec<&'a Vec<f64>>, cb: &'a ConvBn, trainable_only: bool) {
            for w in &cb.conv.weights {
                out.push(&w.data);
            }
            out.push(&cb.conv.bias);
            out.push(&cb.bn.gamma);
            out.push(&cb.bn.beta);
            if !trainable_only {
                out.push(&cb.bn.running_mean);
                out.push(&cb.bn.running_var);
            }
        }
        conv_bn(&mut out, &self.stem, trainable_only);
        for b in &self.blocks {
            conv_bn(&mut out, &b.conv_a, trainable_only);
            conv_bn(&mut out, &b.conv_b, trainable_only);
            conv_bn(&mut out, &b.down, trainable_only);
        }
        if let Some(m) = &self.map_branch {
            conv_bn(&mut out, &m.conv1, trainable_only);
            conv_bn(&mut out, &m.conv2, trainable_only);
            out.push(&m.fc.weight.data);
            out.push(&m.fc.bias);
        }
        out.push(&self.trunk.weight.data);
        out.push(&self.trunk.bias);
        out.push(&self.head_x.weight.data);
        out.push(&self.head_x.bias);
        if let Some(h) = &self.head_e {
            out.push(&h.weight.data);
            out.push(&h.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self, trainable_only: bool) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        fn conv_bn<'a>(out: &mut Vec<&'a mut Vec<f64>>, cb: &'a mut ConvBn, trainable_only: bool) {
            for w in &mut cb.conv.weights {
                out.push(&mut w.data);
            }
            out.push(&mut cb.conv.bias);
            out.push(&mut cb.bn.gamma);
            out.push(&mut cb.bn.beta);
            if !trainable_only {
                out.push(&mut cb.bn.running_mean);
                out.push(&mut cb.bn.running_var);
            }
        }
        conv_bn(&mut out, &mut self.stem, trainable_only);
        for b in &mut self.blocks {
            conv_bn(&mut out, &mut b.conv_a, trainable_only);
            conv_bn(&mut out, &mut b.conv_b, trainable_only);
            conv_bn(&mut out, &mut b.down, trainable_only);
        }
        if let Some(m) = &mut self.map_branch {
            conv_bn(&mut out, &mut m.conv1, trainable_only);
            conv_bn(&mut out, &mut m.conv2, trainable_only);
            out.push(&mut m.fc.weight.data);
            out.push(&mut m.fc.bias);
        }
        out.push(&mut self.trunk.weight.data);
        out.push(&mut self.trunk.bias);
        out.push(&mut self.head_x.weight.data);
        out.push(&mut self.head_x.bias);
        if let Some(h) = &mut self.head_e {
            out.push(&mut h.weight.data);
            out.push(&mut h.bias);
        }
        out
    }

    /// Accumulate another same-shaped container (gradient summation).
    pub fn add_assign(&mut self, other: &Self) {
        let mut mine = self.tensors_mut(false);
        let theirs = other.tensors(false);
        assert_eq!(mine.len(), theirs.len());
        for (a, b) in mine.iter_mut().zip(theirs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Multiply every tensor by a scalar (gradient averaging).
    pub fn scale(&mut self, f: f64) {
        for t in self.tensors_mut(false) {
            for v in t.iter_mut() {
                *v *= f;
            }
        }
    }

    pub fn num_trainable_params(&self) -> usize {
        self.tensors(true).iter().map(|t| t.len()).sum()
    }
}

/// Deterministic K controls plus raw evidential pre-activations
/// (4 per lookahead, k-major: gamma, upsilon, alpha, beta). `e_raw` is
/// empty for deterministic-only models.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput {
    pub x: Vec<f64>,
    pub e_raw: Vec<f64>,
}

/// Per-conv (pairs, c_in, c_out) triples plus dense layer dims from one
/// forward pass; the input to MACs accounting.
#[derive(Debug, Clone, Default)]
pub struct ForwardStats {
    pub conv_pairs: Vec<(usize, usize, usize)>,
    pub dense_dims: Vec<(usize, usize)>,
    pub active_sites: Vec<usize>,
}

struct CbrCache {
    x: Mat,
    bn: BnCache,
    bn_out: Mat,
}

struct BlockCache {
    km: KernelMap,
    down_km: KernelMap,
    conv_a: CbrCache,
    conv_b: CbrCache,
    skip_sum: Mat,
    down: CbrCache,
}

struct MapCache {
    pairs1: Vec<OffsetPairs>,
    pairs2: Vec<OffsetPairs>,
    conv1: CbrCache,
    conv2: CbrCache,
    pool_rows: usize,
    pooled: Mat,
    fc_out: Mat,
}

/// Saved activations from one training forward pass.
pub struct Tape {
    stem_km: KernelMap,
    stem: CbrCache,
    blocks: Vec<BlockCache>,
    pool_rows: usize,
    map: Option<MapCache>,
    concat: Mat,
    trunk_out: Mat,
}

fn raster_to_mat(raster: &RoutedMapRaster) -> Mat {
    let n = raster.h * raster.w;
    let mut m = Mat::zeros(n, 2);
    for i in 0..n {
        *m.at_mut(i, 0) = raster.road[i] as f64;
        *m.at_mut(i, 1) = raster.route[i] as f64;
    }
    m
}

fn cloud_to_tensor(cloud: &VoxelizedCloud) -> SparseTensor {
    let n = cloud.len();
    let mut features = Mat::zeros(n, cloud.features.first().map(|f| f.len()).unwrap_or(3));
    for (i, f) in cloud.features.iter().enumerate() {
        features.row_mut(i).copy_from_slice(f);
    }
    SparseTensor::new(cloud.coords.clone(), features)
}

impl FastLidarNet {
    /// Training forward: batch statistics, activations recorded for
    /// [`FastLidarNet::backward`]. Pure; fold the batch statistics into
    /// the running estimates afterwards with
    /// [`FastLidarNet::apply_bn_stats`].
    pub fn forward_train(
        &self,
        cloud: &VoxelizedCloud,
        raster: Option<&RoutedMapRaster>,
    ) -> Result<(NetworkOutput, Tape), NnError> {
        if cloud.is_empty() {
            return Err(NnError::EmptyCloud);
        }
        let t = cloud_to_tensor(cloud);

        let stem_km = build_kernel_map(&t.coords, 3, 1)?;
        let (stem_cache, stem_out) = cbr_train(
            &t.features,
            &stem_km.offsets,
            stem_km.out_coords.len(),
            &self.stem,
        )?;

        let mut feats = stem_out;
        let mut coords = stem_km.out_coords.clone();
        let mut blocks = Vec::with_capacity(4);
        for bi in 0..4 {
            let block = &self.blocks[bi];
            let km = build_kernel_map(&coords, 3, 1)?;
            let (ca, a_out) = cbr_train(&feats, &km.offsets, coords.len(), &block.conv_a)?;
            // Second conv: no relu before the skip-add.
            let conv_b_out = conv_forward(&a_out, &km.offsets, &block.conv_b.conv, coords.len())?;
            let (b_bn_out, b_bn_cache) = batchnorm_train_fwd(&conv_b_out, &block.conv_b.bn)?;
            let cb = CbrCache {
                x: a_out,
                bn: b_bn_cache,
                bn_out: b_bn_out,
            };
            let mut skip_sum = cb.bn_out.clone();
            for (s, f) in skip_sum.data.iter_mut().zip(&feats.data) {
                *s += f;
            }
            let block_out = relu_fwd(&skip_sum);
            let down_km = build_kernel_map(&coords, 3, 2)?;
            let (cd, d_out) = cbr_train(
                &block_out,
                &down_km.offsets,
                down_km.out_coords.len(),
                &block.down,
            )?;
            coords = down_km.out_coords.clone();
            feats = d_out;
            blocks.push(BlockCache {
                km,
                down_km,
                conv_a: ca,
                conv_b: cb,
                skip_sum,
                down: cd,
            });
        }

        let pool_rows = feats.rows;
        let lidar_feat = global_avg_pool_fwd(&feats);

        let (map_feat, map_cache) = self.map_forward_train(raster)?;

        let mut concat = Mat::zeros(1, self.cfg.concat_dim());
        concat.data[..self.cfg.lidar_feat()].copy_from_slice(&lidar_feat.data);
        concat.data[self.cfg.lidar_feat()..].copy_from_slice(&map_feat);

        let trunk_out = dense_fwd(&concat, &self.trunk);
        let trunk_act = relu_fwd(&trunk_out);
        let x = dense_fwd(&trunk_act, &self.head_x).data;
        let e_raw = match &self.head_e {
            Some(h) => dense_fwd(&trunk_act, h).data,
            None => Vec::new(),
        };

        Ok((
            NetworkOutput { x, e_raw },
            Tape {
                stem_km,
                stem: stem_cache,
                blocks,
                pool_rows,
                map: map_cache,
                concat,
                trunk_out,
            },
        ))
    }

    fn map_forward_train(
        &self,
        raster: Option<&RoutedMapRaster>,
    ) -> Result<(Vec<f64>, Option<MapCache>), NnError> {
        let Some(branch) = &self.map_branch else {
            return Ok((vec![0.0; self.cfg.map_feat], None));
        };
        let raster = raster.expect("navigation model requires a raster");
        let input = raster_to_mat(raster);
        let (h, w) = (raster.h, raster.w);
        let pairs1 = grid_pairs_2d(h, w, 2);
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        let pairs2 = grid_pairs_2d(h2, w2, 2);
        let (c1, out1) = cbr_train(&input, &pairs1, h2 * w2, &branch.conv1)?;
        let (h3, w3) = (h2.div_ceil(2), w2.div_ceil(2));
        let (c2, out2) = cbr_train(&out1, &pairs2, h3 * w3, &branch.conv2)?;
        let pool_rows = out2.rows;
        let pooled = global_avg_pool_fwd(&out2);
        let fc_out = dense_fwd(&pooled, &branch.fc);
        let feat = relu_fwd(&fc_out).data;
        Ok((
            feat,
            Some(MapCache {
                pairs1,
                pairs2,
                conv1: c1,
                conv2: c2,
                pool_rows,
                pooled,
                fc_out,
            }),
        ))
    }

    /// Inference forward: running statistics, no tape; returns per-layer
    /// stats for MACs accounting.
    pub fn forward_infer(
        &self,
        cloud: &VoxelizedCloud,
        raster: Option<&RoutedMapRaster>,
    ) -> Result<(NetworkOutput, ForwardStats), NnError> {
        if cloud.is_empty() {
            return Err(NnError::EmptyCloud);
        }
        let mut stats = ForwardStats::default();
        let t = cloud_to_tensor(cloud);
        stats.active_sites.push(t.num_sites());

        let stem_km = build_kernel_map(&t.coords, 3, 1)?;
        let mut feats = cbr_infer(&t.features, &stem_km, &self.stem, &mut stats)?;
        let mut coords = stem_km.out_coords;
        for block in &self.blocks {
            let km = build_kernel_map(&coords, 3, 1)?;
            let a = cbr_infer(&feats, &km, &block.conv_a, &mut stats)?;
            let b_conv = conv_forward(&a, &km.offsets, &block.conv_b.conv, coords.len())?;
            record_conv(&mut stats, &km.offsets, &block.conv_b.conv);
            let mut b = batchnorm_infer_fwd(&b_conv, &block.conv_b.bn)?;
            for (s, f) in b.data.iter_mut().zip(&feats.data) {
                *s += f;
            }
            let block_out = relu_fwd(&b);
            let down_km = build_kernel_map(&coords, 3, 2)?;
            feats = cbr_infer(&block_out, &down_km, &block.down, &mut stats)?;
            coords = down_km.out_coords;
            stats.active_sites.push(coords.len());
        }
        let lidar_feat = global_avg_pool_fwd(&feats);

        let map_feat = self.map_forward_infer(raster, &mut stats)?;

        let mut concat = Mat::zeros(1, self.cfg.concat_dim());
        concat.data[..self.cfg.lidar_feat()].copy_from_slice(&lidar_feat.data);
        concat.data[self.cfg.lidar_feat()..].copy_from_slice(&map_feat);

        let trunk_act = relu_fwd(&dense_fwd(&concat, &self.trunk));
        stats.dense_dims.push((self.trunk.weight.rows, self.trunk.weight.cols));
        let x = dense_fwd(&trunk_act, &self.head_x).data;
        stats
            .dense_dims
            .push((self.head_x.weight.rows, self.head_x.weight.cols));
        let e_raw = match &self.head_e {
            Some(h) => {
                stats.dense_dims.push((h.weight.rows, h.weight.cols));
                dense_fwd(&trunk_act, h).data
            }
            None => Vec::new(),
        };
        Ok((NetworkOutput { x, e_raw }, stats))
    }

    fn map_forward_infer(
        &self,
        raster: Option<&RoutedMapRaster>,
        stats: &mut ForwardStats,
    ) -> Result<Vec<f64>, NnError> {
        let Some(branch) = &self.map_branch else {
            return Ok(vec![0.0; self.cfg.map_feat]);
        };
        let raster = raster.expect("navigation model requires a raster");
        let input = raster_to_mat(raster);
        let (h, w) = (raster.h, raster.w);
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        let (h3, w3) = (h2.div_ceil(2), w2.div_ceil(2));
        let pairs1 = grid_pairs_2d(h, w, 2);
        let pairs2 = grid_pairs_2d(h2, w2, 2);
        let out1 = conv_forward(&input, &pairs1, &branch.conv1.conv, h2 * w2)?;
        record_conv(stats, &pairs1, &branch.conv1.conv);
        let out1 = relu_fwd(&batchnorm_infer_fwd(&out1, &branch.conv1.bn)?);
        let out2 = conv_forward(&out1, &pairs2, &branch.conv2.conv, h3 * w3)?;
        record_conv(stats, &pairs2, &branch.conv2.conv);
        let out2 = relu_fwd(&batchnorm_infer_fwd(&out2, &branch.conv2.bn)?);
        let pooled = global_avg_pool_fwd(&out2);
        stats
            .dense_dims
            .push((branch.fc.weight.rows, branch.fc.weight.cols));
        Ok(relu_fwd(&dense_fwd(&pooled, &branch.fc)).data)
    }

    /// Exact gradients of `forward_train` w.r.t. every trainable tensor,
    /// given head gradients. `grad_e_raw` must be empty when the
    /// evidential head is absent.
    pub fn backward(&self, tape: &Tape, grad_x: &[f64], grad_e_raw: &[f64]) -> Self {
        let mut grads = self.zeros_like();

        let trunk_act = relu_fwd(&tape.trunk_out);
        let gx = Mat::from_vec(1, grad_x.len(), grad_x.to_vec());
        let (mut grad_trunk_act, head_x_grads) = dense_bwd(&gx, &trunk_act, &self.head_x);
        grads.head_x = head_x_grads;
        if let (Some(h), Some(gh)) = (&self.head_e, &mut grads.head_e) {
            let ge = Mat::from_vec(1, grad_e_raw.len(), grad_e_raw.to_vec());
            let (g_extra, he_grads) = dense_bwd(&ge, &trunk_act, h);
            *gh = he_grads;
            for (a, b) in grad_trunk_act.data.iter_mut().zip(&g_extra.data) {
                *a += b;
            }
        }
        let grad_trunk_out = relu_bwd(&tape.trunk_out, &grad_trunk_act);
        let (grad_concat, trunk_grads) = dense_bwd(&grad_trunk_out, &tape.concat, &self.trunk);
        grads.trunk = trunk_grads;

        let lidar_dim = self.cfg.lidar_feat();
        let grad_lidar = Mat::from_vec(1, lidar_dim, grad_concat.data[..lidar_dim].to_vec());
        let grad_map = Mat::from_vec(
            1,
            self.cfg.map_feat,
            grad_concat.data[lidar_dim..].to_vec(),
        );

        if let (Some(branch), Some(gb), Some(cache)) =
            (&self.map_branch, &mut grads.map_branch, &tape.map)
        {
            let grad_fc_out = relu_bwd(&cache.fc_out, &grad_map);
            let (grad_pooled, fc_grads) = dense_bwd(&grad_fc_out, &cache.pooled, &branch.fc);
            gb.fc = fc_grads;
            let grad_out2 = global_avg_pool_bwd(&grad_pooled, cache.pool_rows);
            let grad_out1 = cbr_backward(
                &grad_out2,
                &cache.conv2,
                &cache.pairs2,
                &branch.conv2,
                &mut gb.conv2,
            );
            let _ = cbr_backward(
                &grad_out1,
                &cache.conv1,
                &cache.pairs1,
                &branch.conv1,
                &mut gb.conv1,
            );
        }

        let mut grad_feats = global_avg_pool_bwd(&grad_lidar, tape.pool_rows);
        for bi in (0..4).rev() {
            let block = &self.blocks[bi];
            let cache = &tape.blocks[bi];
            let gb = &mut grads.blocks[bi];
            let grad_block_out = cbr_backward(
                &grad_feats,
                &cache.down,
                &cache.down_km.offsets,
                &block.down,
                &mut gb.down,
            );
            let grad_skip_sum = relu_bwd(&cache.skip_sum, &grad_block_out);
            // conv_b path (bn without relu).
            let (grad_bconv, bn_b_grads) =
                batchnorm_bwd(&grad_skip_sum, &cache.conv_b.bn, &block.conv_b.bn);
            gb.conv_b.bn = bn_b_grads;
            let (grad_a_out, conv_b_grads) = conv_backward(
                &grad_bconv,
                &cache.conv_b.x,
                &cache.km.offsets,
                &block.conv_b.conv,
            )
            .expect("shapes fixed by forward");
            gb.conv_b.conv = conv_b_grads;
            let mut grad_in = cbr_backward(
                &grad_a_out,
                &cache.conv_a,
                &cache.km.offsets,
                &block.conv_a,
                &mut gb.conv_a,
            );
            // Skip connection.
            for (g, s) in grad_in.data.iter_mut().zip(&grad_skip_sum.data) {
                *g += s;
            }
            grad_feats = grad_in;
        }
        let _ = cbr_backward(
            &grad_feats,
            &tape.stem,
            &tape.stem_km.offsets,
            &self.stem,
            &mut grads.stem,
        );
        grads
    }
}

/// Per-layer batch statistics (mean, variance) in declaration order.
#[derive(Debug, Clone)]
pub struct BnStats(pub Vec<(Vec<f64>, Vec<f64>)>);

impl Tape {
    /// Batch statistics of every batch norm layer touched by this
    /// forward pass, for deterministic running-stat replay.
    pub fn bn_stats(&self) -> BnStats {
        fn push(out: &mut Vec<(Vec<f64>, Vec<f64>)>, c: &CbrCache) {
            out.push((c.bn.mean.clone(), c.bn.var.clone()));
        }
        let mut out = Vec::new();
        push(&mut out, &self.stem);
        for b in &self.blocks {
            push(&mut out, &b.conv_a);
            push(&mut out, &b.conv_b);
            push(&mut out, &b.down);
        }
        if let Some(m) = &self.map {
            push(&mut out, &m.conv1);
            push(&mut out, &m.conv2);
        }
        BnStats(out)
    }
}

impl FastLidarNet {
    /// Fold one frame's batch statistics into the running estimates, in
    /// the same declaration order [`Tape::bn_stats`] uses.
    pub fn apply_bn_stats(&mut self, stats: &BnStats) {
        let mut it = stats.0.iter();
        let mut app = |p: &mut BatchNormParams| {
            let (m, v) = it.next().expect("bn stats shorter than layer list");
            update_running_stats(p, m, v);
        };
        app(&mut self.stem.bn);
        for b in &mut self.blocks {
            app(&mut b.conv_a.bn);
            app(&mut b.conv_b.bn);
            app(&mut b.down.bn);
        }
        if let Some(mb) = &mut self.map_branch {
            app(&mut mb.conv1.bn);
            app(&mut mb.conv2.bn);
        }
        assert!(it.next().is_none(), "bn stats longer than layer list");
    }
}

fn record_conv(stats: &mut ForwardStats, offsets: &[OffsetPairs], p: &ConvParams) {
    let pairs: usize = offsets.iter().map(|o| o.pairs.len()).sum();
    stats.conv_pairs.push((pairs, p.c_in(), p.c_out()));
}

/// conv -> batchnorm (train) -> relu, returning the cache and the
/// post-relu output.
fn cbr_train(
    x: &Mat,
    offsets: &[OffsetPairs],
    n_out: usize,
    params: &ConvBn,
) -> Result<(CbrCache, Mat), NnError> {
    let conv_out = conv_forward(x, offsets, &params.conv, n_out)?;
    let (bn_out, bn_cache) = batchnorm_train_fwd(&conv_out, &params.bn)?;
    let out = relu_fwd(&bn_out);
    Ok((
        CbrCache {
            x: x.clone(),
            bn: bn_cache,
            bn_out,
        },
        out,
    ))
}

fn cbr_infer(
    x: &Mat,
    km: &KernelMap,
    params: &ConvBn,
    stats: &mut ForwardStats,
) -> Result<Mat, NnError> {
    let conv_out = conv_forward(x, &km.offsets, &params.conv, km.out_coords.len())?;
    record_conv(stats, &km.offsets, &params.conv);
    Ok(relu_fwd(&batchnorm_infer_fwd(&conv_out, &params.bn)?))
}

/// Backward through conv -> bn -> relu. Accumulates parameter grads into
/// `grads` and returns the input gradient.
fn cbr_backward(
    grad_out: &Mat,
    cache: &CbrCache,
    offsets: &[OffsetPairs],
    params: &ConvBn,
    grads: &mut ConvBn,
) -> Mat {
    let grad_bn_out = relu_bwd(&cache.bn_out, grad_out);
    let (grad_conv_out, bn_grads) = batchnorm_bwd(&grad_bn_out, &cache.bn, &params.bn);
    grads.bn = bn_grads;
    let (grad_x, conv_grads) = conv_backward(&grad_conv_out, &cache.x, offsets, &params.conv)
        .expect("shapes fixed by forward");
    grads.conv = conv_grads;
    grad_x
}

/// Parameter and multiply-accumulate counts for the architecture, using
/// pair counts observed in a real forward pass.
pub fn count_params_macs(net: &FastLidarNet, stats: &ForwardStats) -> (usize, usize) {
    let params = net.num_trainable_params();
    let mut macs = 0usize;
    for &(pairs, c_in, c_out) in &stats.conv_pairs {
        macs += pairs * c_in * c_out;
    }
    for &(c_in, c_out) in &stats.dense_dims {
        macs += c_in * c_out;
    }
    (params, macs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose2;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn small_cfg(hybrid: bool, navigation: bool) -> NetConfig {
        NetConfig {
            k: 3,
            widths: [4, 4, 6, 8],
            hybrid,
            navigation,
            map_h: 16,
            map_w: 16,
            map_widths: [3, 4],
            map_feat: 5,
            trunk_feat: 6,
            ..NetConfig::default()
        }
    }

    fn random_cloud(n: usize, seed: u64) -> VoxelizedCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coords = Vec::new();
        while coords.len() < n {
            let c = [
                rng.random_range(-10..10),
                rng.random_range(-10..10),
                rng.random_range(-3..3),
            ];
            if !coords.contains(&c) {
                coords.push(c);
            }
        }
        let features = coords
            .iter()
            .map(|_| [1.0, rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        VoxelizedCloud {
            coords,
            features,
            voxel_size: 0.2,
        }
    }

    fn test_raster() -> RoutedMapRaster {
        let mut r = RoutedMapRaster::zeros(16, 16, 1.0, Pose2::default());
        for row in 0..16 {
            for col in 6..10 {
                r.road[row * 16 + col] = 1;
            }
            r.route[row * 16 + 8] = 1;
        }
        r
    }

    #[test]
    fn forward_shapes_and_purity() {
        let net = FastLidarNet::new(small_cfg(true, true), 1);
        let cloud = random_cloud(40, 2);
        let raster = test_raster();
        let (out1, _) = net.forward_infer(&cloud, Some(&raster)).unwrap();
        let (out2, _) = net.forward_infer(&cloud, Some(&raster)).unwrap();
        assert_eq!(out1, out2);
        assert_eq!(out1.x.len(), 3);
        assert_eq!(out1.e_raw.len(), 12);
        assert!(out1.x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deterministic_mode_has_no_evidential_output() {
        let net = FastLidarNet::new(small_cfg(false, false), 1);
        let cloud = random_cloud(30, 3);
        let (out, _) = net.forward_infer(&cloud, None).unwrap();
        assert_eq!(out.x.len(), 3);
        assert!(out.e_raw.is_empty());
    }

    #[test]
    fn empty_cloud_rejected() {
        let net = FastLidarNet::new(small_cfg(true, false), 1);
        let cloud = VoxelizedCloud {
            coords: vec![],
            features: vec![],
            voxel_size: 0.2,
        };
        assert!(matches!(
            net.forward_infer(&cloud, None),
            Err(NnError::EmptyCloud)
        ));
    }

    #[test]
    fn translation_invariance() {
        // Shifting the cloud by a multiple of 16 (even at every one of
        // the four stride-2 levels) translates every kernel map without
        // changing its pair structure, so the pooled features match.
        let net = FastLidarNet::new(small_cfg(false, false), 1);
        let cloud = random_cloud(25, 7);
        let shifted = VoxelizedCloud {
            coords: cloud
                .coords
                .iter()
                .map(|c| [c[0] + 16, c[1] - 32, c[2] + 16])
                .collect(),
            features: cloud.features.clone(),
            voxel_size: cloud.voxel_size,
        };
        let (a, _) = net.forward_infer(&cloud, None).unwrap();
        let (b, _) = net.forward_infer(&shifted, None).unwrap();
        for (x, y) in a.x.iter().zip(&b.x) {
            assert_relative_eq!(x, y, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn active_sites_monotone_through_downsampling() {
        let net = FastLidarNet::new(small_cfg(true, false), 1);
        let cloud = random_cloud(60, 5);
        let (_, stats) = net.forward_infer(&cloud, None).unwrap();
        for w in stats.active_sites.windows(2) {
            assert!(w[1] <= w[0], "sites must not grow: {:?}", stats.active_sites);
        }
    }

    #[test]
    fn dense_layer_macs_example() {
        // 96 -> 64 dense: 6144 MACs, 6208 params with bias.
        let p = DenseParams::zeros(96, 64);
        assert_eq!(p.weight.data.len(), 6144);
        assert_eq!(p.num_params(), 6208);
    }

    #[test]
    fn macs_count_uses_pairs() {
        let mut stats = ForwardStats::default();
        stats.conv_pairs.push((4, 3, 16));
        let net = FastLidarNet::new(small_cfg(false, false), 1);
        let (_, macs) = count_params_macs(&net, &stats);
        assert_eq!(macs, 192);
    }

    /// End-to-end finite-difference check of the full network backward.
    #[test]
    fn full_backward_finite_difference() {
        let cfg = small_cfg(true, true);
        let net = FastLidarNet::new(cfg.clone(), 11);
        let cloud = random_cloud(12, 13);
        let raster = test_raster();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let wx: Vec<f64> = (0..cfg.k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let we: Vec<f64> = (0..4 * cfg.k).map(|_| rng.random_range(-1.0..1.0)).collect();

        let objective = |net: &FastLidarNet| -> f64 {
            let (out, _) = net.forward_train(&cloud, Some(&raster)).unwrap();
            out.x.iter().zip(&wx).map(|(a, b)| a * b).sum::<f64>()
                + out.e_raw.iter().zip(&we).map(|(a, b)| a * b).sum::<f64>()
        };

        let (_, tape) = net.forward_train(&cloud, Some(&raster)).unwrap();
        let grads = net.backward(&tape, &wx, &we);

        // Spot-check a sample of parameters in every tensor.
        let h = 1e-5;
        let flat_grads: Vec<f64> = grads
            .tensors(true)
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect();
        let n_params = flat_grads.len();
        let mut checked = 0;
        let stride = (n_params / 60).max(1);
        for idx in (0..n_params).step_by(stride) {
            let mut plus = net.clone();
            perturb(&mut plus, idx, h);
            let mut minus = net.clone();
            perturb(&mut minus, idx, -h);
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let analytic = flat_grads[idx];
            if analytic.abs() < 1e-8 && fd.abs() < 1e-6 {
                continue;
            }
            assert_relative_eq!(analytic, fd, max_relative = 1e-4, epsilon = 1e-7);
            checked += 1;
        }
        assert!(checked > 20, "too few parameters checked: {checked}");
    }

    fn perturb(net: &mut FastLidarNet, flat_idx: usize, delta: f64) {
        let mut offset = 0;
        for t in net.tensors_mut(true) {
            if flat_idx < offset + t.len() {
                t[flat_idx - offset] += delta;
                return;
            }
            offset += t.len();
        }
        panic!("index out of range");
    }
}
