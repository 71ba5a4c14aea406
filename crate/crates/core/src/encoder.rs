// SPDX-License-Identifier: Apache-2.0

//! Fixed-weight forward passes: the per-voxel feature encoder and the
//! three-layer 3D convolution stack that turns voxel features into a
//! bird's-eye-view feature map.
//!
//! Weights come from a seeded ChaCha8 stream, never from training:
//!
//! * encoder layers draw from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`;
//! * convolution kernels draw from `U(0, 6/fan_in)`. Non-negative kernels
//!   make the convolution stack monotone in its input, so growing a voxel
//!   store by maxout can only grow the resulting map.
//! * all biases start at zero, which keeps empty space at exactly zero.
//!
//! The tensors are drawn in the order point layer, voxel layer, conv 1..3,
//! weights before biases.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::voxel::{
    bucket_points, sample_buckets, Buckets, LidarPoint, PointCloud, VoxelFeatureStore, VoxelGridSpec, VoxelKey,
    FEATURE_DIM, SAMPLE_CAP,
};

/// Width of the per-point input tuple.
pub const POINT_FEATURES: usize = 7;
/// Width of the point-wise layer.
pub const POINT_HIDDEN: usize = 64;
/// Channels produced by the convolution stack before the reshape.
pub const CONV_CHANNELS: usize = 64;
/// Depth left after the convolution stack.
pub const OUTPUT_DEPTH: usize = 2;

const WEIGHTS_MAGIC: &[u8; 4] = b"FCWT";
const WEIGHTS_VERSION: u32 = 1;

/// Fully connected layer, row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    fn seeded(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / inputs as f64).sqrt() as f32;
        let weight = (0..inputs * outputs).map(|_| rng.gen_range(-a..a)).collect();
        Self {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    /// `relu(W x + b)` into `out`.
    fn forward_relu(&self, x: &[f32], out: &mut [f32]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let s: f32 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>() + self.bias[o];
            *slot = s.max(0.0);
        }
    }
}

/// 3x3x3 convolution over `(depth, height, width)` followed by `max(0, .)`.
///
/// Kernels are stored `[out][in][kd][kh][kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub inputs: usize,
    pub outputs: usize,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL * KERNEL;

impl Conv3d {
    fn seeded(
        inputs: usize,
        outputs: usize,
        stride: [usize; 3],
        padding: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let a = (6.0 / (inputs * TAPS) as f64) as f32;
        let weight = (0..outputs * inputs * TAPS).map(|_| rng.gen_range(0.0..a)).collect();
        Self {
            inputs,
            outputs,
            stride,
            padding,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    pub fn weight_at(&self, o: usize, i: usize, kd: usize, kh: usize, kw: usize) -> f32 {
        self.weight[(((o * self.inputs + i) * KERNEL + kd) * KERNEL + kh) * KERNEL + kw]
    }

    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.padding[a];
            if padded < KERNEL {
                return Err(Error::DimensionMismatch(format!(
                    "axis {a}: extent {} too small for kernel",
                    dims[a]
                )));
            }
            out[a] = (padded - KERNEL) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// `[tap][in][out]`, so the inner accumulation runs over contiguous
    /// output channels.
    fn tap_major(&self) -> Vec<f32> {
        let mut t = vec![0.0; self.weight.len()];
        for o in 0..self.outputs {
            for i in 0..self.inputs {
                for k in 0..TAPS {
                    t[(k * self.inputs + i) * self.outputs + o] =
                        self.weight[(o * self.inputs + i) * TAPS + k];
                }
            }
        }
        t
    }

    /// Evaluates the layer on the active sites of `input`.
    ///
    /// Output sites are those whose receptive field touches an active input
    /// site. When some bias is positive every output site is evaluated,
    /// since empty space no longer maps to zero. All-zero output sites are
    /// dropped.
    pub fn forward(&self, input: &SparseVolume) -> Result<SparseVolume> {
        if input.channels != self.inputs {
            return Err(Error::DimensionMismatch(format!(
                "conv expects {} channels, got {}",
                self.inputs, input.channels
            )));
        }
        let out_dims = self.output_dims(input.dims)?;
        let candidates = if self.bias.iter().any(|&b| b > 0.0) {
            (0..out_dims.iter().product::<usize>() as u32).collect()
        } else {
            self.reachable_sites(input, out_dims)
        };

        let lookup = input.lookup();
        let taps = self.tap_major();
        let cin = self.inputs;
        let cout = self.outputs;
        let [_, oh, ow] = out_dims;
        let [d, h, w] = input.dims;

        let computed: Vec<(u32, Vec<f32>)> = candidates
            .par_iter()
            .map(|&site| {
                let site_us = site as usize;
                let (oz, oy, ox) = (site_us / (oh * ow), (site_us / ow) % oh, site_us % ow);
                let mut acc = self.bias.clone();
                for kd in 0..KERNEL {
                    let Some(iz) = source(oz, kd, self.stride[0], self.padding[0], d) else {
                        continue;
                    };
                    for kh in 0..KERNEL {
                        let Some(iy) = source(oy, kh, self.stride[1], self.padding[1], h) else {
                            continue;
                        };
                        for kw in 0..KERNEL {
                            let Some(ix) = source(ox, kw, self.stride[2], self.padding[2], w) else {
                                continue;
                            };
                            let slot = lookup[(iz * h + iy) * w + ix];
                            if slot == u32::MAX {
                                continue;
                            }
                            let x = input.site_values(slot as usize);
                            let k = (kd * KERNEL + kh) * KERNEL + kw;
                            let block = &taps[k * cin * cout..(k + 1) * cin * cout];
                            for (ci, &xv) in x.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let row = &block[ci * cout..(ci + 1) * cout];
                                for (a, &wv) in acc.iter_mut().zip(row) {
                                    *a += xv * wv;
                                }
                            }
                        }
                    }
                }
                for a in acc.iter_mut() {
                    *a = a.max(0.0);
                }
                (site, acc)
            })
            .filter(|(_, v)| v.iter().any(|&x| x != 0.0))
            .collect();

        let mut sites = Vec::with_capacity(computed.len());
        let mut data = Vec::with_capacity(computed.len() * cout);
        for (s, v) in computed {
            sites.push(s);
            data.extend_from_slice(&v);
        }
        Ok(SparseVolume {
            channels: cout,
            dims: out_dims,
            sites,
            data,
        })
    }

    fn reachable_sites(&self, input: &SparseVolume, out_dims: [usize; 3]) -> Vec<u32> {
        let [h, w] = [input.dims[1], input.dims[2]];
        let [od, oh, ow] = out_dims;
        let mut out = Vec::with_capacity(input.sites.len() * 9);
        for &s in &input.sites {
            let s = s as usize;
            let pos = [s / (h * w), (s / w) % h, s % w];
            let mut ranges = [[0usize; KERNEL]; 3];
            let mut counts = [0usize; 3];
            for a in 0..3 {
                for k in 0..KERNEL {
                    // o * stride - pad + k == pos
                    let num = pos[a] + self.padding[a];
                    if num < k || (num - k) % self.stride[a] != 0 {
                        continue;
                    }
                    let o = (num - k) / self.stride[a];
                    if o < out_dims[a] {
                        ranges[a][counts[a]] = o;
                        counts[a] += 1;
                    }
                }
            }
            for &z in &ranges[0][..counts[0]] {
                for &y in &ranges[1][..counts[1]] {
                    for &x in &ranges[2][..counts[2]] {
                        out.push(((z * oh + y) * ow + x) as u32);
                    }
                }
            }
        }
        debug_assert!(od * oh * ow <= u32::MAX as usize);
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[inline]
fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let p = o * stride + k;
    if p < pad {
        return None;
    }
    let i = p - pad;
    (i < extent).then_some(i)
}

/// Channel-last sparse tensor over a `(depth, height, width)` grid. Sites
/// are linear indices `(z * H + y) * W + x`, strictly ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVolume {
    pub channels: usize,
    pub dims: [usize; 3],
    pub sites: Vec<u32>,
    pub data: Vec<f32>,
}

impl SparseVolume {
    pub fn site_values(&self, slot: usize) -> &[f32] {
        &self.data[slot * self.channels..(slot + 1) * self.channels]
    }

    fn lookup(&self) -> Vec<u32> {
        let mut lut = vec![u32::MAX; self.dims.iter().product()];
        for (slot, &s) in self.sites.iter().enumerate() {
            lut[s as usize] = slot as u32;
        }
        lut
    }

    /// Builds from a dense channel-major `C x D x H x W` buffer, keeping
    /// sites with any non-zero channel.
    pub fn from_dense(channels: usize, dims: [usize; 3], dense: &[f32]) -> Self {
        let n: usize = dims.iter().product();
        assert_eq!(dense.len(), channels * n, "dense buffer size");
        let mut sites = Vec::new();
        let mut data = Vec::new();
        for s in 0..n {
            if (0..channels).any(|c| dense[c * n + s] != 0.0) {
                sites.push(s as u32);
                data.extend((0..channels).map(|c| dense[c * n + s]));
            }
        }
        Self {
            channels,
            dims,
            sites,
            data,
        }
    }

    /// Dense channel-major `C x D x H x W` copy.
    pub fn to_dense(&self) -> Vec<f32> {
        let n: usize = self.dims.iter().product();
        let mut out = vec![0.0; self.channels * n];
        for (slot, &s) in self.sites.iter().enumerate() {
            for (c, &v) in self.site_values(slot).iter().enumerate() {
                out[c * n + s as usize] = v;
            }
        }
        out
    }

    /// Scatters a voxel store; depth runs along z, height along y and
    /// width along x.
    pub fn from_store(store: &VoxelFeatureStore) -> Self {
        let [w, h, d] = store.spec().dims.map(|v| v as usize);
        let mut sites = Vec::with_capacity(store.len());
        let mut data = Vec::with_capacity(store.len() * FEATURE_DIM);
        // Store order (iz, iy, ix) is exactly ascending site order.
        for (k, f) in store.iter() {
            sites.push(((k.iz as usize * h + k.iy as usize) * w + k.ix as usize) as u32);
            data.extend_from_slice(f);
        }
        Self {
            channels: FEATURE_DIM,
            dims: [d, h, w],
            sites,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub seed: u64,
    pub point_layer: Dense,
    pub voxel_layer: Dense,
    pub convs: [Conv3d; 3],
}

impl EncoderWeights {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point_layer = Dense::seeded(POINT_FEATURES, POINT_HIDDEN, &mut rng);
        let voxel_layer = Dense::seeded(2 * POINT_HIDDEN, FEATURE_DIM, &mut rng);
        let convs = [
            Conv3d::seeded(FEATURE_DIM, CONV_CHANNELS, [2, 1, 1], [1, 1, 1], &mut rng),
            Conv3d::seeded(CONV_CHANNELS, CONV_CHANNELS, [1, 1, 1], [0, 1, 1], &mut rng),
            Conv3d::seeded(CONV_CHANNELS, CONV_CHANNELS, [2, 1, 1], [1, 1, 1], &mut rng),
        ];
        Self {
            seed,
            point_layer,
            voxel_layer,
            convs,
        }
    }

    fn tensors(&self) -> [&Vec<f32>; 10] {
        [
            &self.point_layer.weight,
            &self.point_layer.bias,
            &self.voxel_layer.weight,
            &self.voxel_layer.bias,
            &self.convs[0].weight,
            &self.convs[0].bias,
            &self.convs[1].weight,
            &self.convs[1].bias,
            &self.convs[2].weight,
            &self.convs[2].bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f32>; 10] {
        let [c0, c1, c2] = &mut self.convs;
        [
            &mut self.point_layer.weight,
            &mut self.point_layer.bias,
            &mut self.voxel_layer.weight,
            &mut self.voxel_layer.bias,
            &mut c0.weight,
            &mut c0.bias,
            &mut c1.weight,
            &mut c1.bias,
            &mut c2.weight,
            &mut c2.bias,
        ]
    }

    /// Header `FCWT`, version `u32`, seed `u64`, then every tensor as
    /// little-endian `f32` in generation order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n: usize = self.tensors().iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(16 + 4 * n);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[0..4] != WEIGHTS_MAGIC {
            return Err(Error::Malformed("not a weights file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != WEIGHTS_VERSION {
            return Err(Error::Malformed(format!("weights version {version}")));
        }
        let seed = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        // Shapes are fixed by the version; the seeded instance supplies them.
        let mut w = Self::from_seed(seed);
        let expected: usize = w.tensors().iter().map(|t| t.len()).sum();
        let body = &bytes[16..];
        if body.len() != expected * 4 {
            return Err(Error::Malformed(format!(
                "weights body {} bytes, expected {}",
                body.len(),
                expected * 4
            )));
        }
        let mut values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for t in w.tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Mean position of the distinct points, summed in a canonical order so
/// repeats and permutations leave it bit-identical.
fn centroid(points: &[LidarPoint]) -> [f64; 3] {
    let mut bits: Vec<[u32; 4]> = points
        .iter()
        .map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits(), p.reflectance.to_bits()])
        .collect();
    bits.sort_unstable();
    bits.dedup();
    let mut mean = [0.0f64; 3];
    for b in &bits {
        for a in 0..3 {
            mean[a] += f32::from_bits(b[a]) as f64;
        }
    }
    mean.map(|m| m / bits.len() as f64)
}

/// Per-point input: offsets from the voxel center and from the point
/// centroid, both in voxel units, plus reflectance.
fn point_inputs(points: &[LidarPoint], center: [f64; 3], size: [f64; 3]) -> Vec<[f32; POINT_FEATURES]> {
    let mean = centroid(points);
    points
        .iter()
        .map(|p| {
            let c = [p.x as f64, p.y as f64, p.z as f64];
            [
                ((c[0] - center[0]) / size[0]) as f32,
                ((c[1] - center[1]) / size[1]) as f32,
                ((c[2] - center[2]) / size[2]) as f32,
                p.reflectance,
                ((c[0] - mean[0]) / size[0]) as f32,
                ((c[1] - mean[1]) / size[1]) as f32,
                ((c[2] - mean[2]) / size[2]) as f32,
            ]
        })
        .collect()
}

/// Encodes one voxel's points into a 128-d feature.
///
/// Point-wise layer, max over points, then the voxel layer applied to each
/// point's `[own feature, voxel max]` concatenation and a final max over
/// points.
pub fn encode_voxel(
    spec: &VoxelGridSpec,
    key: VoxelKey,
    points: &[LidarPoint],
    weights: &EncoderWeights,
) -> Result<Vec<f32>> {
    if points.is_empty() {
        return Err(Error::EmptyVoxel(key.ix, key.iy, key.iz));
    }
    let c = spec.voxel_center(key);
    let inputs = point_inputs(points, [c.x, c.y, c.z], spec.voxel);

    let mut pointwise = vec![[0.0f32; POINT_HIDDEN]; inputs.len()];
    for (x, f) in inputs.iter().zip(pointwise.iter_mut()) {
        weights.point_layer.forward_relu(x, f);
    }
    let mut pooled = [0.0f32; POINT_HIDDEN];
    for f in &pointwise {
        for (m, v) in pooled.iter_mut().zip(f) {
            *m = m.max(*v);
        }
    }

    let mut out = vec![0.0f32; FEATURE_DIM];
    let mut joint = [0.0f32; 2 * POINT_HIDDEN];
    let mut u = [0.0f32; FEATURE_DIM];
    joint[POINT_HIDDEN..].copy_from_slice(&pooled);
    for f in &pointwise {
        joint[..POINT_HIDDEN].copy_from_slice(f);
        weights.voxel_layer.forward_relu(&joint, &mut u);
        for (m, v) in out.iter_mut().zip(&u) {
            *m = m.max(*v);
        }
    }
    Ok(out)
}

/// Encodes every (already sampled) voxel.
pub fn encode_voxels(
    spec: &VoxelGridSpec,
    voxels: &Buckets,
    weights: &EncoderWeights,
) -> Result<VoxelFeatureStore> {
    let items: Vec<(&VoxelKey, &Vec<LidarPoint>)> = voxels.iter().collect();
    let encoded: Vec<Result<(VoxelKey, Vec<f32>)>> = items
        .par_iter()
        .map(|(k, pts)| encode_voxel(spec, **k, pts, weights).map(|f| (**k, f)))
        .collect();
    let mut store = VoxelFeatureStore::new(*spec);
    for e in encoded {
        let (k, f) = e?;
        store.insert(k, f)?;
    }
    Ok(store)
}

/// Bucket, sample (at most [`SAMPLE_CAP`] points per voxel) and encode a
/// cloud given in the sensor frame.
pub fn encode_cloud(
    spec: &VoxelGridSpec,
    cloud: &PointCloud,
    weights: &EncoderWeights,
    seed: u64,
) -> Result<VoxelFeatureStore> {
    let buckets = sample_buckets(spec, &bucket_points(spec, cloud), SAMPLE_CAP, seed);
    encode_voxels(spec, &buckets, weights)
}

/// Bird's-eye-view feature map, channel-major `C x H x W`.
///
/// Rows run along y and columns along x of the map frame. `origin` places
/// the lower corner of cell `(0, 0)` and the map axes in the owner's frame.
/// `channel_ids[i]` names the logical channel stored in plane `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeatureMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub origin: Pose,
    pub cell_size: f64,
    pub channel_ids: Vec<u8>,
}

impl SpatialFeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize, origin: Pose, cell_size: f64) -> Self {
        assert!(channels <= FEATURE_DIM);
        Self {
            height,
            width,
            data: vec![0.0; channels * height * width],
            origin,
            cell_size,
            channel_ids: (0..channels as u8).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channel_ids.len()
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    /// L2 norm over channels at every cell, row-major.
    pub fn cell_energy(&self) -> Vec<f64> {
        let n = self.plane_len();
        let mut acc = vec![0.0f64; n];
        for c in 0..self.channels() {
            for (a, &v) in acc.iter_mut().zip(self.plane(c)) {
                *a += v as f64 * v as f64;
            }
        }
        acc.iter_mut().for_each(|a| *a = a.sqrt());
        acc
    }

    /// Fraction of cells whose every channel is zero.
    pub fn zero_cell_fraction(&self) -> f64 {
        let n = self.plane_len();
        if n == 0 {
            return 1.0;
        }
        let zero = (0..n)
            .filter(|&i| (0..self.channels()).all(|c| self.data[c * n + i] == 0.0))
            .count();
        zero as f64 / n as f64
    }

    pub fn is_finite_nonneg(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Runs the convolution stack and returns the `64 x D' x H x W` volume
/// before the reshape.
pub fn feature_volume(store: &VoxelFeatureStore, weights: &EncoderWeights) -> Result<SparseVolume> {
    let mut v = SparseVolume::from_store(store);
    for conv in &weights.convs {
        v = conv.forward(&v)?;
    }
    if v.dims[0] != OUTPUT_DEPTH {
        return Err(Error::DimensionMismatch(format!(
            "grid depth {} reduces to {} instead of {OUTPUT_DEPTH}",
            store.spec().depth(),
            v.dims[0]
        )));
    }
    Ok(v)
}

/// Folds depth into channels: plane `c * D' + d` holds channel `c` at depth
/// `d`.
pub fn reshape_to_map(volume: &SparseVolume, spec: &VoxelGridSpec) -> SpatialFeatureMap {
    let [d, h, w] = volume.dims;
    let channels = volume.channels * d;
    assert!(channels <= FEATURE_DIM, "reshape exceeds channel space");
    let origin = Pose::new(spec.min[0], spec.min[1], 0.0, 0.0);
    let mut map = SpatialFeatureMap::zeros(channels, h, w, origin, spec.voxel[0]);
    let hw = h * w;
    for (slot, &s) in volume.sites.iter().enumerate() {
        let s = s as usize;
        let (z, cell) = (s / hw, s % hw);
        for (c, &v) in volume.site_values(slot).iter().enumerate() {
            map.data[(c * d + z) * hw + cell] = v;
        }
    }
    map
}

/// Voxel store to bird's-eye-view map. The map origin is the grid's lower
/// corner in the sensor frame.
pub fn spatial_features(store: &VoxelFeatureStore, weights: &EncoderWeights) -> Result<SpatialFeatureMap> {
    let spec = store.spec();
    if (spec.voxel[0] - spec.voxel[1]).abs() > 1e-12 {
        return Err(Error::DimensionMismatch("map cells must be square".into()));
    }
    // Check the depth plan before doing any work.
    let mut dims = [spec.depth() as usize, spec.height() as usize, spec.width() as usize];
    for conv in &weights.convs {
        dims = conv.output_dims(dims)?;
    }
    if dims[0] != OUTPUT_DEPTH {
        return Err(Error::DimensionMismatch(format!(
            "grid depth {} reduces to {} instead of {OUTPUT_DEPTH}",
            spec.depth(),
            dims[0]
        )));
    }
    let volume = feature_volume(store, weights)?;
    Ok(reshape_to_map(&volume, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{bucket_points, PointCloud};

    fn small_grid(depth_cells: u32) -> VoxelGridSpec {
        VoxelGridSpec::new(
            (0.0, 7.2),
            (-4.0, 4.0),
            (-3.0, -3.0 + 0.4 * depth_cells as f64),
            [0.2, 0.2, 0.4],
        )
        .unwrap()
    }

    fn cluster(cx: f32, cy: f32, n: usize) -> Vec<LidarPoint> {
        (0..n)
            .map(|i| {
                let t = i as f32 * 0.37;
                LidarPoint::new(cx + 0.3 * t.sin(), cy + 0.25 * t.cos(), -1.5 + 0.05 * (i % 20) as f32, 0.3 + 0.01 * (i % 7) as f32)
            })
            .collect()
    }

    #[test]
    fn seeded_weights_are_reproducible() {
        let a = EncoderWeights::from_seed(42);
        assert_eq!(a, EncoderWeights::from_seed(42));
        assert_ne!(a.point_layer.weight, EncoderWeights::from_seed(43).point_layer.weight);
        assert!(a.convs.iter().all(|c| c.weight.iter().all(|&w| w >= 0.0)));
    }

    #[test]
    fn weights_file_round_trip() {
        let w = EncoderWeights::from_seed(3);
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..4], b"FCWT");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(EncoderWeights::from_bytes(&bytes).unwrap(), w);
        assert!(EncoderWeights::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(EncoderWeights::from_bytes(&bad).is_err());
    }

    #[test]
    fn voxel_feature_has_full_length_and_absorbs_duplicates() {
        let g = small_grid(10);
        let w = EncoderWeights::from_seed(1);
        let pts = vec![
            LidarPoint::new(1.01, 0.03, -1.9, 0.5),
            LidarPoint::new(1.11, 0.13, -1.7, 0.2),
            LidarPoint::new(1.05, 0.09, -1.8, 0.9),
        ];
        let key = g.voxel_index(pts[0].position()).unwrap();
        let f = encode_voxel(&g, key, &pts, &w).unwrap();
        assert_eq!(f.len(), FEATURE_DIM);
        assert!(f.iter().all(|v| *v >= 0.0));
        // Duplicating a point leaves the centroid, and so every input, intact.
        let mut dup = pts.clone();
        dup.push(pts[1]);
        dup.push(pts[0]);
        let mut rotated = pts.clone();
        rotated.rotate_left(1);
        rotated.extend_from_slice(&rotated.clone());
        let f_dup = encode_voxel(&g, key, &dup, &w).unwrap();
        let f_rot = encode_voxel(&g, key, &rotated, &w).unwrap();
        assert_eq!(f, f_dup);
        assert_eq!(f, f_rot);
        assert!(matches!(encode_voxel(&g, key, &[], &w), Err(Error::EmptyVoxel(..))));
    }

    #[test]
    fn empty_input_gives_empty_store() {
        let g = small_grid(10);
        let s = encode_voxels(&g, &Buckets::new(), &EncoderWeights::from_seed(1)).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn empty_voxel_is_rejected() {
        let g = small_grid(10);
        let mut b = Buckets::new();
        b.insert(VoxelKey::new(0, 0, 0), Vec::new());
        assert!(encode_voxels(&g, &b, &EncoderWeights::from_seed(1)).is_err());
    }

    #[test]
    fn desk_grid_shape() {
        let g = VoxelGridSpec::new((0.0, 7.2), (-4.0, 4.0), (-3.0, 1.0), [0.2, 0.2, 0.4]).unwrap();
        assert_eq!(g.dims, [36, 40, 10]);
        let w = EncoderWeights::from_seed(7);
        let cloud = PointCloud::new(cluster(3.0, 0.5, 60));
        let store = encode_voxels(&g, &bucket_points(&g, &cloud), &w).unwrap();
        let map = spatial_features(&store, &w).unwrap();
        assert_eq!((map.channels(), map.height, map.width), (128, 40, 36));
        assert!(map.is_finite_nonneg());
        assert!(map.data.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn zero_store_gives_zero_map() {
        let g = small_grid(10);
        let w = EncoderWeights::from_seed(7);
        let map = spatial_features(&VoxelFeatureStore::new(g), &w).unwrap();
        assert!(map.data.iter().all(|&v| v == 0.0));
        // Zero-valued entries behave the same way.
        let mut s = VoxelFeatureStore::new(g);
        s.insert(VoxelKey::new(3, 3, 3), vec![0.0; FEATURE_DIM]).unwrap();
        let map = spatial_features(&s, &w).unwrap();
        assert!(map.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn incompatible_depth_is_rejected() {
        let w = EncoderWeights::from_seed(7);
        for d in [4u32, 6, 8, 13] {
            let g = small_grid(d);
            let err = spatial_features(&VoxelFeatureStore::new(g), &w).unwrap_err();
            assert!(matches!(err, Error::DimensionMismatch(_)), "depth {d}");
        }
        for d in [9u32, 10, 11, 12] {
            assert!(spatial_features(&VoxelFeatureStore::new(small_grid(d)), &w).is_ok());
        }
    }

    #[test]
    fn positive_bias_fills_empty_space() {
        let g = small_grid(10);
        let mut w = EncoderWeights::from_seed(7);
        w.convs[2].bias.iter_mut().for_each(|b| *b = 0.25);
        let map = spatial_features(&VoxelFeatureStore::new(g), &w).unwrap();
        assert!(map.data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn perturbation_stays_within_receptive_field() {
        let g = small_grid(10);
        let w = EncoderWeights::from_seed(5);
        let mut pts = cluster(2.0, -1.0, 80);
        pts.extend(cluster(5.0, 2.0, 80));
        let base = bucket_points(&g, &PointCloud::new(pts.clone()));
        let store = encode_voxels(&g, &base, &w).unwrap();
        let map = spatial_features(&store, &w).unwrap();

        let victim = *base.keys().nth(base.len() / 3).unwrap();
        let mut moved = base.clone();
        for p in moved.get_mut(&victim).unwrap() {
            p.reflectance += 0.5;
        }
        let store2 = encode_voxels(&g, &moved, &w).unwrap();
        assert_ne!(store.get(&victim), store2.get(&victim));
        let map2 = spatial_features(&store2, &w).unwrap();
        let mut changed = 0;
        for c in 0..map.channels() {
            for r in 0..map.height {
                for col in 0..map.width {
                    if map.get(c, r, col) != map2.get(c, r, col) {
                        changed += 1;
                        assert!((r as i64 - victim.iy as i64).abs() <= 3);
                        assert!((col as i64 - victim.ix as i64).abs() <= 3);
                    }
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn evaluation_is_bit_reproducible() {
        let g = small_grid(10);
        let w = EncoderWeights::from_seed(9);
        let cloud = PointCloud::new(cluster(4.0, 0.0, 120));
        let b = bucket_points(&g, &cloud);
        let m1 = spatial_features(&encode_voxels(&g, &b, &w).unwrap(), &w).unwrap();
        let m2 = spatial_features(&encode_voxels(&g, &b, &w).unwrap(), &w).unwrap();
        assert_eq!(m1, m2);
    }
}
