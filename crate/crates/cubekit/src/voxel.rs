//! Dense voxel tensors and exact lattice motions.
//!
//! All rotations here are signed-permutation remaps about the grid center:
//! pure index shuffles with no interpolation and no value change. That is
//! what lets every equivariance test in this crate run at tolerances near
//! machine epsilon.
//!
//! Axis order is `[C][Gax][D][H][W]` with C-order (row-major) flattening and
//! z-major spatial storage. The group axis has size 1 for raw input and `|G|`
//! after lifting.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::scalar::{Dtype, Scalar};
use crate::symmetry::{FiniteRotationGroup, RotationElement};

/// Shape of a [`FeatureMap`]: `[channels][group][depth][height][width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapShape {
    pub channels: usize,
    pub group_size: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl MapShape {
    pub fn new(channels: usize, group_size: usize, depth: usize, height: usize, width: usize) -> Self {
        MapShape {
            channels,
            group_size,
            depth,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.group_size * self.spatial_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn spatial_len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_cubic(&self) -> bool {
        self.depth == self.height && self.height == self.width
    }
}

/// Integer voxel translation `(tz, ty, tx)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LatticeOffset {
    pub tz: i64,
    pub ty: i64,
    pub tx: i64,
}

impl LatticeOffset {
    pub fn new(tz: i64, ty: i64, tx: i64) -> Self {
        LatticeOffset { tz, ty, tx }
    }

    fn as_array(self) -> [i64; 3] {
        [self.tz, self.ty, self.tx]
    }
}

/// Tensor shape violations shared by the voxel, gconv, and network modules.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("data length {got} does not match shape ({expected} elements)")]
    DataLength { expected: usize, got: usize },
    #[error("shape entries must all be >= 1")]
    ZeroDim,
    #[error("group axis has size {got}, expected 1 or {group_order}")]
    GroupAxis { got: usize, group_order: usize },
    #[error("kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("kernel size {kernel} exceeds input extent {extent}")]
    KernelTooLarge { kernel: usize, extent: usize },
    #[error("operand shapes disagree: {0}")]
    Mismatch(String),
    #[error("spatial dims {0:?} must all be even")]
    OddSpatialDim([usize; 3]),
}

/// A 5-axis activation tensor `[C][Gax][D][H][W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    shape: MapShape,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(shape: MapShape) -> Self {
        assert!(!shape.is_empty(), "all shape entries must be >= 1");
        FeatureMap {
            shape,
            data: vec![T::ZERO; shape.len()],
        }
    }

    pub fn from_vec(shape: MapShape, data: Vec<T>) -> Result<Self, ShapeError> {
        if shape.is_empty() {
            return Err(ShapeError::ZeroDim);
        }
        if data.len() != shape.len() {
            return Err(ShapeError::DataLength {
                expected: shape.len(),
                got: data.len(),
            });
        }
        Ok(FeatureMap { shape, data })
    }

    /// Build a map by evaluating `f(c, g, d, h, w)` at every site.
    pub fn from_fn(shape: MapShape, mut f: impl FnMut(usize, usize, usize, usize, usize) -> T) -> Self {
        let mut map = Self::zeros(shape);
        let mut idx = 0;
        for c in 0..shape.channels {
            for g in 0..shape.group_size {
                for d in 0..shape.depth {
                    for h in 0..shape.height {
                        for w in 0..shape.width {
                            map.data[idx] = f(c, g, d, h, w);
                            idx += 1;
                        }
                    }
                }
            }
        }
        map
    }

    pub fn shape(&self) -> MapShape {
        self.shape
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

    /// Contiguous `D·H·W` spatial block for channel `c`, group slot `g`.
    pub fn spatial_slice(&self, c: usize, g: usize) -> &[T] {
        let n = self.shape.spatial_len();
        let start = (c * self.shape.group_size + g) * n;
        &self.data[start..start + n]
    }

    pub fn spatial_slice_mut(&mut self, c: usize, g: usize) -> &mut [T] {
        let n = self.shape.spatial_len();
        let start = (c * self.shape.group_size + g) * n;
        &mut self.data[start..start + n]
    }

    pub fn at(&self, c: usize, g: usize, d: usize, h: usize, w: usize) -> T {
        let s = self.shape;
        self.data[(((c * s.group_size + g) * s.depth + d) * s.height + h) * s.width + w]
    }

    /// Shift the spatial axes of every (channel, group) slice by `t`,
    /// filling vacated sites with zero.
    pub fn translated(&self, t: LatticeOffset) -> Self {
        let mut out = Self::zeros(self.shape);
        for c in 0..self.shape.channels {
            for g in 0..self.shape.group_size {
                let shifted = translate_volume(self.spatial_slice(c, g), self.shape.spatial(), t);
                out.spatial_slice_mut(c, g).copy_from_slice(&shifted);
            }
        }
        out
    }
}

/// A 6-axis learnable filter tensor `[K][I][Gax][k][k][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank<T> {
    out_channels: usize,
    in_channels: usize,
    group_size: usize,
    kernel: usize,
    data: Vec<T>,
}

impl<T: Scalar> FilterBank<T> {
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        group_size: usize,
        kernel: usize,
    ) -> Result<Self, ShapeError> {
        if kernel % 2 == 0 {
            return Err(ShapeError::EvenKernel(kernel));
        }
        if out_channels == 0 || in_channels == 0 || group_size == 0 || kernel == 0 {
            return Err(ShapeError::ZeroDim);
        }
        let len = out_channels * in_channels * group_size * kernel * kernel * kernel;
        Ok(FilterBank {
            out_channels,
            in_channels,
            group_size,
            kernel,
            data: vec![T::ZERO; len],
        })
    }

    pub fn from_vec(
        out_channels: usize,
        in_channels: usize,
        group_size: usize,
        kernel: usize,
        data: Vec<T>,
    ) -> Result<Self, ShapeError> {
        let mut bank = Self::zeros(out_channels, in_channels, group_size, kernel)?;
        if data.len() != bank.data.len() {
            return Err(ShapeError::DataLength {
                expected: bank.data.len(),
                got: data.len(),
            });
        }
        bank.data = data;
        Ok(bank)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Contiguous `k³` tap block for out-channel `ko`, in-channel `i`, group slot `g`.
    pub fn kernel_slice(&self, ko: usize, i: usize, g: usize) -> &[T] {
        let n = self.kernel_len();
        let start = ((ko * self.in_channels + i) * self.group_size + g) * n;
        &self.data[start..start + n]
    }

    pub fn kernel_slice_mut(&mut self, ko: usize, i: usize, g: usize) -> &mut [T] {
        let n = self.kernel_len();
        let start = ((ko * self.in_channels + i) * self.group_size + g) * n;
        &mut self.data[start..start + n]
    }
}

/// Rotate a `[D][H][W]` volume about its center by a signed-permutation
/// rotation: `out[x] = in[R⁻¹(x−c)+c]`.
///
/// Because the center is `(N−1)/2` per axis, the remap stays integral on even
/// grids too; each output coordinate is either a source coordinate or its
/// end-reflected counterpart. The output shape is the input shape with axes
/// permuted by the rotation. Works on any `Copy` payload since no values are
/// produced or mixed.
pub fn rotate_volume<T: Copy>(src: &[T], dims: [usize; 3], rot: &RotationElement) -> (Vec<T>, [usize; 3]) {
    assert_eq!(src.len(), dims[0] * dims[1] * dims[2]);
    let inv = rot.inverse_matrix();
    // Source axis j reads from output axis `axis_of[j]` with sign `sign_of[j]`.
    let mut axis_of = [0usize; 3];
    let mut sign_of = [0i32; 3];
    let mut out_dims = [0usize; 3];
    for j in 0..3 {
        for i in 0..3 {
            if inv[j][i] != 0 {
                axis_of[j] = i;
                sign_of[j] = inv[j][i];
                out_dims[i] = dims[j];
            }
        }
    }
    let mut out = Vec::with_capacity(src.len());
    for o0 in 0..out_dims[0] {
        for o1 in 0..out_dims[1] {
            for o2 in 0..out_dims[2] {
                let o = [o0, o1, o2];
                let mut s = [0usize; 3];
                for j in 0..3 {
                    let x = o[axis_of[j]];
                    s[j] = if sign_of[j] > 0 { x } else { dims[j] - 1 - x };
                }
                out.push(src[(s[0] * dims[1] + s[1]) * dims[2] + s[2]]);
            }
        }
    }
    (out, out_dims)
}

/// Shift a `[D][H][W]` volume by `t` voxels: `out[x] = in[x−t]`, zero where
/// the source falls outside the grid. Shape preserved.
pub fn translate_volume<T: Scalar>(src: &[T], dims: [usize; 3], t: LatticeOffset) -> Vec<T> {
    assert_eq!(src.len(), dims[0] * dims[1] * dims[2]);
    let t = t.as_array();
    let mut out = vec![T::ZERO; src.len()];
    let mut idx = 0;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let sd = d as i64 - t[0];
                let sh = h as i64 - t[1];
                let sw = w as i64 - t[2];
                if sd >= 0
                    && sd < dims[0] as i64
                    && sh >= 0
                    && sh < dims[1] as i64
                    && sw >= 0
                    && sw < dims[2] as i64
                {
                    out[idx] = src[((sd as usize) * dims[1] + sh as usize) * dims[2] + sw as usize];
                }
                idx += 1;
            }
        }
    }
    out
}

/// Transform a feature map by group element `p`: every spatial slice is
/// rotated by `p` and, when the map carries a full group axis, slot `ρ` of
/// the output is taken from slot `p⁻¹ρ` of the input.
///
/// Maps with group axis 1 (raw input) are only rotated spatially.
pub fn apply_group_action<T: Scalar>(
    map: &FeatureMap<T>,
    group: &FiniteRotationGroup,
    p: usize,
) -> Result<FeatureMap<T>, ShapeError> {
    let shape = map.shape();
    let gax = shape.group_size;
    if gax != 1 && gax != group.order() {
        return Err(ShapeError::GroupAxis {
            got: gax,
            group_order: group.order(),
        });
    }
    let rot = group.element(p);
    let p_inv = group.inverse(p);

    let (_, out_spatial) = rotate_volume(map.spatial_slice(0, 0), shape.spatial(), rot);
    let out_shape = MapShape::new(shape.channels, gax, out_spatial[0], out_spatial[1], out_spatial[2]);
    let mut out = FeatureMap::zeros(out_shape);
    for c in 0..shape.channels {
        for slot in 0..gax {
            let src_slot = if gax == 1 { 0 } else { group.compose(p_inv, slot) };
            let (rotated, _) = rotate_volume(map.spatial_slice(c, src_slot), shape.spatial(), rot);
            out.spatial_slice_mut(c, slot).copy_from_slice(&rotated);
        }
    }
    Ok(out)
}

const VOXT_MAGIC: &[u8; 4] = b"VOXT";
const VOXT_VERSION: u32 = 1;
/// Fixed-size header that follows the 4-byte magic: version, dtype, ndims,
/// and five u32 dims — 32 bytes exactly. Payload starts at byte 36.
const VOXT_HEADER_BYTES: usize = 32;

/// VOXT decode failures. Each malformed-input condition is a distinct value.
#[derive(Debug, Error)]
pub enum VoxtError {
    #[error("bad magic; not a VOXT file")]
    BadMagic,
    #[error("unsupported VOXT version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u32),
    #[error("dtype mismatch: file holds {found}, caller expects {expected}")]
    DtypeMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("expected 5 dims, file declares {0}")]
    BadRank(u32),
    #[error("zero dimension in header")]
    ZeroDim,
    #[error("truncated payload: expected {expected} bytes after header, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{extra} trailing bytes after payload")]
    TrailingData { extra: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serialize a map to VOXT bytes: `"VOXT" | version | dtype | ndims=5 |
/// [C, Gax, D, H, W] | payload`, all little-endian, payload in C-order.
pub fn voxt_bytes<T: Scalar>(map: &FeatureMap<T>) -> Vec<u8> {
    let s = map.shape();
    let mut out = Vec::with_capacity(4 + VOXT_HEADER_BYTES + map.data().len() * T::BYTE_WIDTH);
    out.extend_from_slice(VOXT_MAGIC);
    for v in [
        VOXT_VERSION,
        T::DTYPE.code(),
        5,
        s.channels as u32,
        s.group_size as u32,
        s.depth as u32,
        s.height as u32,
        s.width as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &x in map.data() {
        x.write_le(&mut out);
    }
    out
}

/// Decode a map from VOXT bytes. The scalar type must match the file's dtype.
pub fn voxt_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<FeatureMap<T>, VoxtError> {
    if bytes.len() < 4 || &bytes[..4] != VOXT_MAGIC {
        return Err(VoxtError::BadMagic);
    }
    if bytes.len() < 4 + VOXT_HEADER_BYTES {
        return Err(VoxtError::Truncated {
            expected: VOXT_HEADER_BYTES,
            found: bytes.len().saturating_sub(4),
        });
    }
    let field = |i: usize| -> u32 {
        let off = 4 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
    };
    let version = field(0);
    if version != VOXT_VERSION {
        return Err(VoxtError::UnsupportedVersion(version));
    }
    let dtype = Dtype::from_code(field(1)).ok_or(VoxtError::UnknownDtype(field(1)))?;
    if dtype != T::DTYPE {
        return Err(VoxtError::DtypeMismatch {
            expected: T::DTYPE.name(),
            found: dtype.name(),
        });
    }
    let ndims = field(2);
    if ndims != 5 {
        return Err(VoxtError::BadRank(ndims));
    }
    let dims: Vec<usize> = (3..8).map(|i| field(i) as usize).collect();
    if dims.iter().any(|&d| d == 0) {
        return Err(VoxtError::ZeroDim);
    }
    let shape = MapShape::new(dims[0], dims[1], dims[2], dims[3], dims[4]);
    let expected = shape.len() * T::BYTE_WIDTH;
    let payload = &bytes[4 + VOXT_HEADER_BYTES..];
    if payload.len() < expected {
        return Err(VoxtError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(VoxtError::TrailingData {
            extra: payload.len() - expected,
        });
    }
    let data: Vec<T> = payload
        .chunks_exact(T::BYTE_WIDTH)
        .map(T::read_le)
        .collect();
    Ok(FeatureMap { shape, data })
}

pub fn write_voxt<T: Scalar>(path: impl AsRef<Path>, map: &FeatureMap<T>) -> Result<(), VoxtError> {
    let mut file = fs::File::create(path)?;
    file.write_all(&voxt_bytes(map))?;
    Ok(())
}

pub fn read_voxt<T: Scalar>(path: impl AsRef<Path>) -> Result<FeatureMap<T>, VoxtError> {
    let bytes = fs::read(path)?;
    voxt_from_bytes(&bytes)
}
