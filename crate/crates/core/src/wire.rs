// SPDX-License-Identifier: Apache-2.0

//! Feature message envelope, sparse bodies and gzip framing.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset size  field
//!      0    4  magic "FCPR"
//!      4    1  version (1)
//!      5    1  kind: 1 voxel features, 2 spatial features, 3 detections
//!      6   32  sender pose x, y, z, yaw (f64)
//!     38   48  grid x_min, x_max, y_min, y_max, z_min, z_max (f64)
//!     86   24  voxel size x, y, z (f64)
//!    110   16  channel mask (u128)
//!    126    4  entry count (u32)
//!    130    .  body
//! ```
//!
//! Voxel body: `count u32, dim u32, key space u32`, then per entry the
//! linear key (`u32`, strictly ascending) and `dim` f32 values.
//!
//! Spatial body: `height u32, width u32`, then per plane the channel index
//! (`u32`, strictly ascending), the cell count (`u32`) and `height * width`
//! f32 values, row-major.
//!
//! Detection body: per detection `cx, cy, cz, l, w, h, yaw, score` as f32.

use std::io::{Read, Write};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::encoder::SpatialFeatureMap;
use crate::error::{Error, Result};
use crate::evalkit::Detection;
use crate::fusion::{mask_of, select_channels, ChannelMask};
use crate::geom::{Box3D, Pose};
use crate::voxel::{VoxelFeatureStore, VoxelGridSpec, FEATURE_DIM};

pub const MAGIC: &[u8; 4] = b"FCPR";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 130;
pub const VOXEL_BODY_HEADER: usize = 12;
pub const VOXEL_ENTRY_LEN: usize = 4 + 4 * FEATURE_DIM;
pub const SPATIAL_BODY_HEADER: usize = 8;
pub const PLANE_HEADER: usize = 8;
pub const DETECTION_LEN: usize = 32;

/// Bytes per raw LiDAR point (x, y, z, reflectance as f32).
pub const RAW_POINT_BYTES: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Voxel = 1,
    Spatial = 2,
    Detections = 3,
}

impl TryFrom<u8> for MessageKind {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Self::Voxel),
            2 => Ok(Self::Spatial),
            3 => Ok(Self::Detections),
            _ => Err(Error::Malformed(format!("unknown message kind {v}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Voxel(VoxelFeatureStore),
    Spatial(SpatialFeatureMap),
    Detections(Vec<Detection>),
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Self::Voxel(_) => MessageKind::Voxel,
            Self::Spatial(_) => MessageKind::Spatial,
            Self::Detections(_) => MessageKind::Detections,
        }
    }

    pub fn entry_count(&self) -> usize {
        match self {
            Self::Voxel(s) => s.len(),
            Self::Spatial(m) => m.channels(),
            Self::Detections(d) => d.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMessage {
    pub pose: Pose,
    pub grid: VoxelGridSpec,
    pub mask: ChannelMask,
    pub payload: Payload,
}

impl FeatureMessage {
    pub fn voxel(pose: Pose, store: VoxelFeatureStore) -> Self {
        Self {
            pose,
            grid: *store.spec(),
            mask: ChannelMask::FULL,
            payload: Payload::Voxel(store),
        }
    }

    /// Spatial message carrying only the channels in `mask`.
    pub fn spatial(pose: Pose, grid: VoxelGridSpec, map: &SpatialFeatureMap, mask: ChannelMask) -> Result<Self> {
        let selected = select_channels(map, mask)?;
        Ok(Self {
            pose,
            grid,
            mask: mask_of(&selected),
            payload: Payload::Spatial(selected),
        })
    }

    pub fn detections(pose: Pose, grid: VoxelGridSpec, dets: Vec<Detection>) -> Self {
        Self {
            pose,
            grid,
            mask: ChannelMask::EMPTY,
            payload: Payload::Detections(dets),
        }
    }

    /// Uncompressed encoding: header followed by the body.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let body = match &self.payload {
            Payload::Voxel(s) => pack_voxel(s)?,
            Payload::Spatial(m) => pack_spatial(m, mask_of(m))?,
            Payload::Detections(d) => pack_detections(d),
        };
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.payload.kind() as u8);
        for v in [self.pose.x, self.pose.y, self.pose.z, self.pose.yaw] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let g = &self.grid;
        for v in [g.min[0], g.max[0], g.min[1], g.max[1], g.min[2], g.max[2]] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in g.voxel {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.mask.to_le_bytes());
        let count = u32::try_from(self.payload.entry_count())
            .map_err(|_| Error::KeyOutOfRange("entry count exceeds u32".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_LEN);
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Malformed("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Malformed(format!("unsupported version {version}")));
        }
        let kind = MessageKind::try_from(r.u8()?)?;
        let pose = Pose {
            x: r.f64()?,
            y: r.f64()?,
            z: r.f64()?,
            yaw: r.f64()?,
        };
        let ranges: Vec<f64> = (0..6).map(|_| r.f64()).collect::<Result<_>>()?;
        let voxel = [r.f64()?, r.f64()?, r.f64()?];
        let grid = VoxelGridSpec::new(
            (ranges[0], ranges[1]),
            (ranges[2], ranges[3]),
            (ranges[4], ranges[5]),
            voxel,
        )?;
        let mask = ChannelMask::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let count = r.u32()? as usize;
        let body = r.rest();
        let payload = match kind {
            MessageKind::Voxel => Payload::Voxel(unpack_voxel(body, &grid)?),
            MessageKind::Spatial => {
                let map = unpack_spatial(body, &grid)?;
                if mask_of(&map) != mask {
                    return Err(Error::Malformed("channel mask disagrees with planes".into()));
                }
                Payload::Spatial(map)
            }
            MessageKind::Detections => Payload::Detections(unpack_detections(body)?),
        };
        if payload.entry_count() != count {
            return Err(Error::Malformed(format!(
                "declared {count} entries, decoded {}",
                payload.entry_count()
            )));
        }
        Ok(Self {
            pose,
            grid,
            mask,
            payload,
        })
    }

    /// Compressed form, as sent on the link and written to `.fcpr` files.
    pub fn to_wire(&self) -> Result<Vec<u8>> {
        compress(&self.encode()?)
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self> {
        Self::decode(&decompress(bytes)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Malformed(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn voxel_body_len(entries: usize) -> usize {
    VOXEL_BODY_HEADER + entries * VOXEL_ENTRY_LEN
}

pub fn spatial_body_len(planes: usize, height: usize, width: usize) -> usize {
    SPATIAL_BODY_HEADER + planes * (PLANE_HEADER + 4 * height * width)
}

/// Sparse voxel body; keys come out strictly ascending.
pub fn pack_voxel(store: &VoxelFeatureStore) -> Result<Vec<u8>> {
    let spec = store.spec();
    let key_space = u32::try_from(spec.cell_count())
        .map_err(|_| Error::KeyOutOfRange(format!("{} cells exceed u32 keys", spec.cell_count())))?;
    let mut out = Vec::with_capacity(voxel_body_len(store.len()));
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    out.extend_from_slice(&key_space.to_le_bytes());
    for (k, f) in store.iter() {
        let linear = spec.linearize(*k) as u32;
        out.extend_from_slice(&linear.to_le_bytes());
        for v in f {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn unpack_voxel(body: &[u8], grid: &VoxelGridSpec) -> Result<VoxelFeatureStore> {
    let mut r = Reader::new(body);
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let key_space = r.u32()? as u64;
    if dim != FEATURE_DIM {
        return Err(Error::Malformed(format!("feature dim {dim}")));
    }
    if key_space != grid.cell_count() {
        return Err(Error::Malformed("key space disagrees with grid".into()));
    }
    if body.len() != voxel_body_len(count) {
        return Err(Error::Malformed(format!(
            "voxel body is {} bytes, expected {}",
            body.len(),
            voxel_body_len(count)
        )));
    }
    let mut store = VoxelFeatureStore::new(*grid);
    let mut prev: Option<u32> = None;
    for _ in 0..count {
        let linear = r.u32()?;
        if prev.is_some_and(|p| linear <= p) {
            return Err(Error::Malformed("voxel keys not strictly ascending".into()));
        }
        prev = Some(linear);
        let key = grid
            .delinearize(linear as u64)
            .ok_or_else(|| Error::KeyOutOfRange(format!("linear key {linear}")))?;
        let f = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        store.insert(key, f)?;
    }
    r.finish()?;
    Ok(store)
}

/// Dense planes for the channels of `map` selected by `mask`.
pub fn pack_spatial(map: &SpatialFeatureMap, mask: ChannelMask) -> Result<Vec<u8>> {
    let selected = select_channels(map, mask)?;
    let (h, w) = (selected.height, selected.width);
    let cells = u32::try_from(h * w).map_err(|_| Error::Malformed("plane too large".into()))?;
    let mut out = Vec::with_capacity(spatial_body_len(selected.channels(), h, w));
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for (i, &c) in selected.channel_ids.iter().enumerate() {
        out.extend_from_slice(&(c as u32).to_le_bytes());
        out.extend_from_slice(&cells.to_le_bytes());
        for v in selected.plane(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn unpack_spatial(body: &[u8], grid: &VoxelGridSpec) -> Result<SpatialFeatureMap> {
    let mut r = Reader::new(body);
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let plane_bytes = PLANE_HEADER + 4 * h * w;
    let rest = body.len() - SPATIAL_BODY_HEADER;
    if plane_bytes == 0 || rest % plane_bytes != 0 {
        return Err(Error::Malformed("spatial body is not a whole number of planes".into()));
    }
    let planes = rest / plane_bytes;
    if planes > FEATURE_DIM {
        return Err(Error::Malformed(format!("{planes} planes")));
    }
    let origin = Pose::new(grid.min[0], grid.min[1], 0.0, 0.0);
    let mut map = SpatialFeatureMap::zeros(planes, h, w, origin, grid.voxel[0]);
    let mut prev: Option<u32> = None;
    for i in 0..planes {
        let c = r.u32()?;
        if c as usize >= FEATURE_DIM || prev.is_some_and(|p| c <= p) {
            return Err(Error::Malformed(format!("bad channel index {c}")));
        }
        prev = Some(c);
        if r.u32()? as usize != h * w {
            return Err(Error::Malformed("plane cell count disagrees with header".into()));
        }
        map.channel_ids[i] = c as u8;
        for v in map.plane_mut(i).iter_mut() {
            *v = r.f32()?;
        }
    }
    r.finish()?;
    Ok(map)
}

pub fn pack_detections(dets: &[Detection]) -> Vec<u8> {
    let mut out = Vec::with_capacity(dets.len() * DETECTION_LEN);
    for d in dets {
        let b = &d.bbox;
        for v in [b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, d.score] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn unpack_detections(body: &[u8]) -> Result<Vec<Detection>> {
    if body.len() % DETECTION_LEN != 0 {
        return Err(Error::Malformed("detection body length".into()));
    }
    let mut r = Reader::new(body);
    let mut out = Vec::with_capacity(body.len() / DETECTION_LEN);
    for _ in 0..body.len() / DETECTION_LEN {
        let v: Vec<f64> = (0..8).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?;
        out.push(Detection {
            bbox: Box3D::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6]),
            score: v[7],
        });
    }
    Ok(out)
}

/// gzip container around a DEFLATE stream.
pub fn compress(body: &[u8]) -> Result<Vec<u8>> {
    let mut enc = GzEncoder::new(Vec::with_capacity(body.len() / 4 + 64), Compression::default());
    enc.write_all(body)?;
    Ok(enc.finish()?)
}

/// Inverse of [`compress`]; a damaged stream or checksum mismatch is
/// reported as [`Error::Corrupted`].
pub fn decompress(wire: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(wire)
        .read_to_end(&mut out)
        .map_err(|e| Error::Corrupted(e.to_string()))?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeReport {
    /// Encoded message size before compression.
    pub logical_bytes: u64,
    /// Size after gzip.
    pub wire_bytes: u64,
    /// `wire / logical`.
    pub ratio: f64,
    /// Size the raw in-range point cloud would take instead.
    pub raw_reference_bytes: u64,
}

pub fn raw_reference_bytes(in_range_points: usize) -> u64 {
    in_range_points as u64 * RAW_POINT_BYTES
}

pub fn size_report(msg: &FeatureMessage, in_range_points: usize) -> Result<SizeReport> {
    let logical = msg.encode()?;
    let wire = compress(&logical)?;
    Ok(SizeReport {
        logical_bytes: logical.len() as u64,
        wire_bytes: wire.len() as u64,
        ratio: wire.len() as f64 / logical.len() as f64,
        raw_reference_bytes: raw_reference_bytes(in_range_points),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::VoxelKey;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(n: usize, rng: &mut ChaCha8Rng) -> VoxelFeatureStore {
        let g = VoxelGridSpec::reference();
        let mut s = VoxelFeatureStore::new(g);
        while s.len() < n {
            let k = VoxelKey::new(rng.gen_range(0..352), rng.gen_range(0..400), rng.gen_range(0..10));
            s.insert(k, (0..FEATURE_DIM).map(|_| rng.gen()).collect()).unwrap();
        }
        s
    }

    #[test]
    fn empty_store_is_header_only() {
        let s = VoxelFeatureStore::new(VoxelGridSpec::reference());
        let body = pack_voxel(&s).unwrap();
        assert_eq!(body.len(), 12);
        assert_eq!(&body[..4], &0u32.to_le_bytes());
        assert_eq!(unpack_voxel(&body, s.spec()).unwrap(), s);
    }

    #[test]
    fn voxel_body_size_and_repack() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = store_with(2_200, &mut rng);
        let body = pack_voxel(&s).unwrap();
        assert_eq!(body.len(), 12 + 2_200 * 516);
        assert_eq!(body.len(), 1_135_212);
        let back = unpack_voxel(&body, s.spec()).unwrap();
        assert_eq!(pack_voxel(&back).unwrap(), body);
    }

    #[test]
    fn spatial_sizes() {
        assert_eq!(spatial_body_len(128, 400, 352) - 8 - 128 * 8, 72_089_600);
        assert_eq!(5 * 400 * 352 * 4, 2_816_000);
        let m = SpatialFeatureMap::zeros(128, 4, 6, Pose::new(0.0, -0.4, 0.0, 0.0), 0.2);
        assert_eq!(pack_spatial(&m, ChannelMask::MIN).unwrap().len(), spatial_body_len(5, 4, 6));
        assert!(matches!(pack_spatial(&m, ChannelMask::EMPTY), Err(Error::EmptyMask)));
    }

    #[test]
    fn message_round_trips_with_zero_planes() {
        let g = VoxelGridSpec::new((0.0, 1.2), (-0.4, 0.4), (-3.0, 1.0), [0.2, 0.2, 0.4]).unwrap();
        let mut m = SpatialFeatureMap::zeros(128, 4, 6, Pose::new(0.0, -0.4, 0.0, 0.0), 0.2);
        m.plane_mut(60)[7] = 1.25;
        let msg = FeatureMessage::spatial(Pose::new(1.0, 2.0, 0.5, 0.3), g, &m, ChannelMask::KEY).unwrap();
        let bytes = msg.encode().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + spatial_body_len(45, 4, 6));
        let back = FeatureMessage::decode(&bytes).unwrap();
        assert_eq!(back, msg);
        assert_eq!(FeatureMessage::from_wire(&msg.to_wire().unwrap()).unwrap(), msg);
    }

    #[test]
    fn decode_rejects_damage() {
        let s = VoxelFeatureStore::new(VoxelGridSpec::reference());
        let msg = FeatureMessage::voxel(Pose::default(), s);
        let bytes = msg.encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FeatureMessage::decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[5] = 9;
        assert!(FeatureMessage::decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[126] = 3;
        assert!(FeatureMessage::decode(&bad).is_err(), "declared count mismatch");
        assert!(FeatureMessage::decode(&bytes[..100]).is_err());
    }

    #[test]
    fn detections_round_trip() {
        let d = vec![
            Detection {
                bbox: Box3D::new(10.5, -2.25, -0.75, 4.0, 1.5, 1.5, 0.0),
                score: 0.75,
            },
            Detection {
                bbox: Box3D::new(20.0, 3.0, -1.0, 4.0, 1.5, 1.5, 1.5),
                score: 0.5,
            },
        ];
        let msg = FeatureMessage::detections(Pose::default(), VoxelGridSpec::desk(), d);
        let bytes = msg.encode().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 2 * 32);
        let back = FeatureMessage::decode(&bytes).unwrap();
        let Payload::Detections(dd) = &back.payload else { panic!() };
        assert_eq!(dd.len(), 2);
        assert!((dd[1].bbox.yaw - 1.5).abs() < 1e-6);
    }

    #[test]
    fn compression_bounds() {
        let zeros = vec![0u8; 1 << 20];
        let c = compress(&zeros).unwrap();
        assert!(c.len() < 10 * 1024, "{}", c.len());
        assert_eq!(decompress(&c).unwrap(), zeros);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut noise = vec![0u8; 1 << 20];
        rng.fill_bytes(&mut noise);
        let c = compress(&noise).unwrap();
        assert!((c.len() as f64) <= noise.len() as f64 * 1.001, "{}", c.len());
        assert_eq!(decompress(&c).unwrap(), noise);
    }

    #[test]
    fn corruption_is_detected() {
        let body: Vec<u8> = (0..5000u32).flat_map(|i| (i % 251).to_le_bytes()).collect();
        let mut c = compress(&body).unwrap();
        let n = c.len();
        c[n - 6] ^= 0xFF; // inside the CRC32 trailer
        assert!(matches!(decompress(&c), Err(Error::Corrupted(_))));
        let mut c = compress(&body).unwrap();
        c[n / 2] ^= 0x55;
        assert!(decompress(&c).map(|d| d != body).unwrap_or(true));
    }

    #[test]
    fn size_report_examples() {
        assert_eq!(raw_reference_bytes(125_000), 2_000_000);
        let msg = FeatureMessage::voxel(Pose::default(), VoxelFeatureStore::new(VoxelGridSpec::reference()));
        let r = size_report(&msg, 0).unwrap();
        assert_eq!(r.logical_bytes as usize, HEADER_LEN + 12);
        assert!(r.ratio > 0.5 && r.ratio < 1.5, "{}", r.ratio);
    }
}
