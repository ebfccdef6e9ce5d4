//! Roto-translational group convolution.
//!
//! The fast path pre-rotates each filter bank once per forward pass into a
//! per-rotation scratch bank `[K][I·Gax][k³]`, then runs `|G|` standard
//! translational convolutions. A direct summation over the product group
//! (rotations × translations) is retained as [`gconv_direct`], the slow
//! reference path the fast implementation is audited against.
//!
//! Everything here computes cross-correlation, the usual CNN convention.
//! Stride is fixed at 1; downsampling belongs to pooling layers.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::scalar::Scalar;
use crate::symmetry::{apply_mat, FiniteRotationGroup};
use crate::voxel::{apply_group_action, rotate_volume, FeatureMap, FilterBank, MapShape, ShapeError};

/// Boundary handling for the translational part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Padding {
    /// No padding; output shrinks by `k − 1` per axis.
    Valid,
    /// Zero padding of `(k − 1)/2` per side; output keeps the input shape.
    SameZero,
}

/// Convolution configuration. Stride is always 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ConvSpec {
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same() -> Self {
        ConvSpec {
            padding: Padding::SameZero,
        }
    }

    pub fn valid() -> Self {
        ConvSpec {
            padding: Padding::Valid,
        }
    }

    fn out_dims(&self, dims: [usize; 3], kernel: usize) -> Result<[usize; 3], ShapeError> {
        match self.padding {
            Padding::SameZero => Ok(dims),
            Padding::Valid => {
                let extent = dims.iter().copied().min().unwrap();
                if kernel > extent {
                    return Err(ShapeError::KernelTooLarge { kernel, extent });
                }
                Ok([dims[0] - kernel + 1, dims[1] - kernel + 1, dims[2] - kernel + 1])
            }
        }
    }
}

/// Which of the two group-convolution layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GconvKind {
    /// First layer: raw `Z³` signal in, one response per rotation out.
    Lift,
    /// Deeper layers: group-indexed signal in and out.
    Hidden,
}

/// Zero-pad every channel of a `[C][D][H][W]` block by `pad` per side.
fn pad_channels<T: Scalar>(
    input: &[T],
    channels: usize,
    dims: [usize; 3],
    pad: usize,
) -> (Vec<T>, [usize; 3]) {
    if pad == 0 {
        return (input.to_vec(), dims);
    }
    let pd = [dims[0] + 2 * pad, dims[1] + 2 * pad, dims[2] + 2 * pad];
    let mut out = vec![T::ZERO; channels * pd[0] * pd[1] * pd[2]];
    for c in 0..channels {
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                let src = (c * dims[0] * dims[1] + d * dims[1] + h) * dims[2];
                let dst = ((c * pd[0] + d + pad) * pd[1] + h + pad) * pd[2] + pad;
                out[dst..dst + dims[2]].copy_from_slice(&input[src..src + dims[2]]);
            }
        }
    }
    (out, pd)
}

fn crop_channels<T: Scalar>(
    padded: &[T],
    channels: usize,
    padded_dims: [usize; 3],
    pad: usize,
) -> Vec<T> {
    if pad == 0 {
        return padded.to_vec();
    }
    let dims = [
        padded_dims[0] - 2 * pad,
        padded_dims[1] - 2 * pad,
        padded_dims[2] - 2 * pad,
    ];
    let mut out = vec![T::ZERO; channels * dims[0] * dims[1] * dims[2]];
    for c in 0..channels {
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                let dst = (c * dims[0] * dims[1] + d * dims[1] + h) * dims[2];
                let src = ((c * padded_dims[0] + d + pad) * padded_dims[1] + h + pad) * padded_dims[2] + pad;
                out[dst..dst + dims[2]].copy_from_slice(&padded[src..src + dims[2]]);
            }
        }
    }
    out
}

/// Valid cross-correlation on flat buffers: `input` is `[Ci][dims]`,
/// `filters` is `[K][Ci][k³]`, output is `[K][out_dims]`.
fn conv3d_valid_raw<T: Scalar>(
    input: &[T],
    in_channels: usize,
    dims: [usize; 3],
    filters: &[T],
    out_channels: usize,
    kernel: usize,
) -> Vec<T> {
    let od = dims[0] - kernel + 1;
    let oh = dims[1] - kernel + 1;
    let ow = dims[2] - kernel + 1;
    let out_spatial = od * oh * ow;
    let mut out = vec![T::ZERO; out_channels * out_spatial];
    for ko in 0..out_channels {
        let out_base = ko * out_spatial;
        for ci in 0..in_channels {
            let in_base = ci * dims[0] * dims[1] * dims[2];
            let f_base = (ko * in_channels + ci) * kernel * kernel * kernel;
            for kz in 0..kernel {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let f = filters[f_base + (kz * kernel + ky) * kernel + kx];
                        for tz in 0..od {
                            let src_z = in_base + (tz + kz) * dims[1] * dims[2];
                            for ty in 0..oh {
                                let src = src_z + (ty + ky) * dims[2] + kx;
                                let dst = out_base + (tz * oh + ty) * ow;
                                let in_row = &input[src..src + ow];
                                let out_row = &mut out[dst..dst + ow];
                                for tx in 0..ow {
                                    out_row[tx] += f * in_row[tx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv3d_valid_raw`]: given upstream `[K][out_dims]`, return
/// gradients for the (padded) input and the filters.
fn conv3d_valid_raw_backward<T: Scalar>(
    input: &[T],
    in_channels: usize,
    dims: [usize; 3],
    filters: &[T],
    out_channels: usize,
    kernel: usize,
    upstream: &[T],
) -> (Vec<T>, Vec<T>) {
    let od = dims[0] - kernel + 1;
    let oh = dims[1] - kernel + 1;
    let ow = dims[2] - kernel + 1;
    let out_spatial = od * oh * ow;
    let mut grad_input = vec![T::ZERO; input.len()];
    let mut grad_filters = vec![T::ZERO; filters.len()];
    for ko in 0..out_channels {
        let out_base = ko * out_spatial;
        for ci in 0..in_channels {
            let in_base = ci * dims[0] * dims[1] * dims[2];
            let f_base = (ko * in_channels + ci) * kernel * kernel * kernel;
            for kz in 0..kernel {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let tap = f_base + (kz * kernel + ky) * kernel + kx;
                        let f = filters[tap];
                        let mut acc = T::ZERO;
                        for tz in 0..od {
                            let src_z = in_base + (tz + kz) * dims[1] * dims[2];
                            for ty in 0..oh {
                                let src = src_z + (ty + ky) * dims[2] + kx;
                                let dst = out_base + (tz * oh + ty) * ow;
                                let u_row = &upstream[dst..dst + ow];
                                let in_row = &input[src..src + ow];
                                let gin_row = &mut grad_input[src..src + ow];
                                for tx in 0..ow {
                                    gin_row[tx] += f * u_row[tx];
                                    acc += u_row[tx] * in_row[tx];
                                }
                            }
                        }
                        grad_filters[tap] += acc;
                    }
                }
            }
        }
    }
    (grad_input, grad_filters)
}

fn check_conv_operands<T: Scalar>(
    input: &FeatureMap<T>,
    filters: &FilterBank<T>,
    expected_gax: usize,
) -> Result<(), ShapeError> {
    if input.shape().group_size != expected_gax {
        return Err(ShapeError::GroupAxis {
            got: input.shape().group_size,
            group_order: expected_gax,
        });
    }
    if filters.in_channels() != input.shape().channels {
        return Err(ShapeError::Mismatch(format!(
            "filter in-channels {} vs input channels {}",
            filters.in_channels(),
            input.shape().channels
        )));
    }
    Ok(())
}

/// Plain translational cross-correlation of a group-axis-1 map with a
/// group-axis-1 filter bank.
pub fn conv3d<T: Scalar>(
    input: &FeatureMap<T>,
    filters: &FilterBank<T>,
    spec: &ConvSpec,
) -> Result<FeatureMap<T>, ShapeError> {
    check_conv_operands(input, filters, 1)?;
    if filters.group_size() != 1 {
        return Err(ShapeError::GroupAxis {
            got: filters.group_size(),
            group_order: 1,
        });
    }
    let dims = input.shape().spatial();
    let k = filters.kernel();
    let out_dims = spec.out_dims(dims, k)?;
    let pad = match spec.padding {
        Padding::SameZero => (k - 1) / 2,
        Padding::Valid => 0,
    };
    let (padded, pdims) = pad_channels(input.data(), input.shape().channels, dims, pad);
    let out = conv3d_valid_raw(
        &padded,
        input.shape().channels,
        pdims,
        filters.data(),
        filters.out_channels(),
        k,
    );
    FeatureMap::from_vec(
        MapShape::new(filters.out_channels(), 1, out_dims[0], out_dims[1], out_dims[2]),
        out,
    )
}

/// Gradients of [`conv3d`] contracted against `upstream`.
pub fn conv3d_backward<T: Scalar>(
    input: &FeatureMap<T>,
    filters: &FilterBank<T>,
    upstream: &FeatureMap<T>,
    spec: &ConvSpec,
) -> Result<(FeatureMap<T>, FilterBank<T>), ShapeError> {
    check_conv_operands(input, filters, 1)?;
    let dims = input.shape().spatial();
    let k = filters.kernel();
    let out_dims = spec.out_dims(dims, k)?;
    if upstream.shape() != MapShape::new(filters.out_channels(), 1, out_dims[0], out_dims[1], out_dims[2]) {
        return Err(ShapeError::Mismatch(format!(
            "upstream shape {:?} does not match conv output",
            upstream.shape()
        )));
    }
    let pad = match spec.padding {
        Padding::SameZero => (k - 1) / 2,
        Padding::Valid => 0,
    };
    let channels = input.shape().channels;
    let (padded, pdims) = pad_channels(input.data(), channels, dims, pad);
    let (grad_padded, grad_filters) = conv3d_valid_raw_backward(
        &padded,
        channels,
        pdims,
        filters.data(),
        filters.out_channels(),
        k,
        upstream.data(),
    );
    let grad_input = crop_channels(&grad_padded, channels, pdims, pad);
    Ok((
        FeatureMap::from_vec(input.shape(), grad_input)?,
        FilterBank::from_vec(filters.out_channels(), channels, 1, k, grad_filters)?,
    ))
}

/// Pre-rotated scratch bank for rotation `r`: a flat `[K][I·Gax][k³]` filter
/// block whose slot `(i, ρ)` holds `W[i, r⁻¹ρ]` spatially rotated by `r`.
/// For the lifting layer (`Gax = 1`) the group re-indexing disappears.
fn rotated_scratch<T: Scalar>(
    filters: &FilterBank<T>,
    group: &FiniteRotationGroup,
    r: usize,
) -> Vec<T> {
    let k = filters.kernel();
    let kdims = [k, k, k];
    let gax = filters.group_size();
    let r_inv = group.inverse(r);
    let mut out = Vec::with_capacity(filters.data().len());
    for ko in 0..filters.out_channels() {
        for i in 0..filters.in_channels() {
            for rho in 0..gax {
                let source_slot = if gax == 1 { 0 } else { group.compose(r_inv, rho) };
                let (rotated, _) =
                    rotate_volume(filters.kernel_slice(ko, i, source_slot), kdims, group.element(r));
                out.extend_from_slice(&rotated);
            }
        }
    }
    out
}

/// Scatter a per-rotation scratch gradient back onto the base filter bank:
/// the exact adjoint of [`rotated_scratch`].
fn fold_scratch_grad<T: Scalar>(
    grad_filters: &mut FilterBank<T>,
    grad_scratch: &[T],
    group: &FiniteRotationGroup,
    r: usize,
) {
    let k = grad_filters.kernel();
    let klen = grad_filters.kernel_len();
    let kdims = [k, k, k];
    let gax = grad_filters.group_size();
    let r_inv = group.inverse(r);
    let mut offset = 0;
    for ko in 0..grad_filters.out_channels() {
        for i in 0..grad_filters.in_channels() {
            for rho in 0..gax {
                let source_slot = if gax == 1 { 0 } else { group.compose(r_inv, rho) };
                let (unrotated, _) =
                    rotate_volume(&grad_scratch[offset..offset + klen], kdims, group.element(r_inv));
                let dst = grad_filters.kernel_slice_mut(ko, i, source_slot);
                for (d, s) in dst.iter_mut().zip(&unrotated) {
                    *d += *s;
                }
                offset += klen;
            }
        }
    }
}

fn check_gconv_operands<T: Scalar>(
    kind: GconvKind,
    input: &FeatureMap<T>,
    filters: &FilterBank<T>,
    group: &FiniteRotationGroup,
) -> Result<(), ShapeError> {
    let expected_gax = match kind {
        GconvKind::Lift => 1,
        GconvKind::Hidden => group.order(),
    };
    check_conv_operands(input, filters, expected_gax)?;
    if filters.group_size() != expected_gax {
        return Err(ShapeError::GroupAxis {
            got: filters.group_size(),
            group_order: expected_gax,
        });
    }
    Ok(())
}

fn gconv_forward<T: Scalar>(
    kind: GconvKind,
    input: &FeatureMap<T>,
    filters: &FilterBank<T>,
    group: &FiniteRotationGroup,
    spec: &ConvSpec,
) -> Result<FeatureMap<T>, ShapeError> {
    check_gconv_operands(kind, input, filters, group)?;
    let shape = input.shape();
    let k = filters.kernel();
    let out_dims = spec.out_dims(shape.spatial(), k)?;
    let pad = match spec.padding {
        Padding::SameZero => (k - 1) / 2,
        Padding::Valid => 0,
    };
    let flat_channels = shape.channels * shape.group_size;
    let (padded, pdims) = pad_channels(input.data(), flat_channels, shape.spatial(), pad);

    let n = group.order();
    let kc = filters.out_channels();
    let mut out = FeatureMap::zeros(MapShape::new(kc, n, out_dims[0], out_dims[1], out_dims[2]));
    for r in 0..n {
        let scratch = rotated_scratch(filters, group, r);
        let slice = conv3d_valid_raw(&padded, flat_channels, pdims, &scratch, kc, k);
        let spatial = out_dims[0] * out_dims[1] * out_dims[2];
        for ko in 0..kc {
            out.spatial_slice_mut(ko, r)
                .copy_from_slice(&slice[ko * spatial..(ko + 1) * spatial]);
        }
    }
    Ok(out)
}

/// Lifting layer: convolve a raw map with every rotated copy of the filters,
/// producing one group slot per rotation in canonical group order.
pub fn gconv_lift<T: Scalar>(
    input: &FeatureMap<T>,
    filters: &FilterBank<T>,
    group: &FiniteRotationGroup,
    spec: &ConvSpec,
) -> Result<FeatureMap<T>, ShapeError> {
    gconv_forward(GconvKind::Lift, input, filters, group, spec)
}

/// Hidden layer: group-indexed input, filters rotated spatially and
/// re-indexed along the group axis through the Cayley table.
pub fn gconv_hidden<T: Scalar>(
    input: &FeatureMap<T>,
    filters: &FilterBank<T>,
    group: &FiniteRotationGroup,
    spec: &ConvSpec,
) -> Result<FeatureMap<T>, ShapeError> {
    gconv_forward(GconvKind::Hidden, input, filters, group, spec)
}

/// Exact reverse-mode gradients of the lift/hidden forward contracted with
/// `upstream`: returns `(grad_input, grad_filters)`.
pub fn gconv_backward<T: Scalar>(
    kind: GconvKind,
    input: &FeatureMap<T>,
    filters: &FilterBank<T>,
    upstream: &FeatureMap<T>,
    group: &FiniteRotationGroup,
    spec: &ConvSpec,
) -> Result<(FeatureMap<T>, FilterBank<T>), ShapeError> {
    check_gconv_operands(kind, input, filters, group)?;
    let shape = input.shape();
    let k = filters.kernel();
    let out_dims = spec.out_dims(shape.spatial(), k)?;
    let n = group.order();
    let kc = filters.out_channels();
    let expected = MapShape::new(kc, n, out_dims[0], out_dims[1], out_dims[2]);
    if upstream.shape() != expected {
        return Err(ShapeError::Mismatch(format!(
            "upstream shape {:?}, expected {:?}",
            upstream.shape(),
            expected
        )));
    }
    let pad = match spec.padding {
        Padding::SameZero => (k - 1) / 2,
        Padding::Valid => 0,
    };
    let flat_channels = shape.channels * shape.group_size;
    let (padded, pdims) = pad_channels(input.data(), flat_channels, shape.spatial(), pad);
    let spatial = out_dims[0] * out_dims[1] * out_dims[2];

    let mut grad_padded = vec![T::ZERO; padded.len()];
    let mut grad_filters = FilterBank::zeros(kc, filters.in_channels(), filters.group_size(), k)?;
    let mut upstream_r = vec![T::ZERO; kc * spatial];
    for r in 0..n {
        for ko in 0..kc {
            upstream_r[ko * spatial..(ko + 1) * spatial].copy_from_slice(upstream.spatial_slice(ko, r));
        }
        let scratch = rotated_scratch(filters, group, r);
        let (gp, gs) = conv3d_valid_raw_backward(
            &padded,
            flat_channels,
            pdims,
            &scratch,
            kc,
            k,
            &upstream_r,
        );
        for (acc, v) in grad_padded.iter_mut().zip(&gp) {
            *acc += *v;
        }
        fold_scratch_grad(&mut grad_filters, &gs, group, r);
    }
    let grad_input = crop_channels(&grad_padded, flat_channels, pdims, pad);
    Ok((FeatureMap::from_vec(shape, grad_input)?, grad_filters))
}

/// Direct summation over the product group (rotations × translations): the
/// slow reference path. Every output value is computed from the definition
/// with per-term integer matrix application, sharing no code with the fast
/// path's filter pre-rotation.
pub fn gconv_direct<T: Scalar>(
    kind: GconvKind,
    input: &FeatureMap<T>,
    filters: &FilterBank<T>,
    group: &FiniteRotationGroup,
    spec: &ConvSpec,
) -> Result<FeatureMap<T>, ShapeError> {
    check_gconv_operands(kind, input, filters, group)?;
    let shape = input.shape();
    let k = filters.kernel();
    let ki = k as i64;
    let m = (ki - 1) / 2;
    let out_dims = spec.out_dims(shape.spatial(), k)?;
    let offset = match spec.padding {
        Padding::SameZero => m,
        Padding::Valid => 0,
    };
    let dims = shape.spatial();
    let n = group.order();
    let kc = filters.out_channels();
    let gax = shape.group_size;

    let mut out = FeatureMap::zeros(MapShape::new(kc, n, out_dims[0], out_dims[1], out_dims[2]));
    for ko in 0..kc {
        for r in 0..n {
            let r_inv_mat = group.element(r).inverse_matrix();
            let r_inv = group.inverse(r);
            let dst = out.spatial_slice_mut(ko, r);
            let mut idx = 0;
            for tz in 0..out_dims[0] as i64 {
                for ty in 0..out_dims[1] as i64 {
                    for tx in 0..out_dims[2] as i64 {
                        let mut acc = T::ZERO;
                        for i in 0..shape.channels {
                            for rho in 0..gax {
                                let sigma = if gax == 1 { 0 } else { group.compose(r_inv, rho) };
                                let w = filters.kernel_slice(ko, i, sigma);
                                let f = input.spatial_slice(i, rho);
                                for sz in 0..dims[0] as i64 {
                                    for sy in 0..dims[1] as i64 {
                                        for sx in 0..dims[2] as i64 {
                                            // Kernel coordinate before rotation.
                                            let x = [
                                                sz - tz + offset - m,
                                                sy - ty + offset - m,
                                                sx - tx + offset - m,
                                            ];
                                            if x[0].abs() > m || x[1].abs() > m || x[2].abs() > m {
                                                continue;
                                            }
                                            let y = apply_mat(&r_inv_mat, x);
                                            let wy = ((y[0] + m) * ki + y[1] + m) * ki + y[2] + m;
                                            let fs = (sz * dims[1] as i64 + sy) * dims[2] as i64 + sx;
                                            acc += w[wy as usize] * f[fs as usize];
                                        }
                                    }
                                }
                            }
                        }
                        dst[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Worst-case equivariance error observed over a batch of random trials.
#[derive(Clone, Debug, Serialize)]
pub struct EquivarianceReport {
    pub layer: GconvKind,
    pub group: String,
    pub trials: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Draw `trials` random (input, filter) pairs on cubic grids and verify
/// `layer(p·F, W) = p·layer(F, W)` for every `p ∈ G`, where the action on the
/// output permutes the group axis and rotates space. Reports the worst
/// absolute and relative error across all trials and elements.
pub fn check_equivariance<T: Scalar>(
    layer: GconvKind,
    group: &FiniteRotationGroup,
    trials: usize,
    tol: f64,
    seed: u64,
) -> EquivarianceReport {
    let mut rng = StdRng::seed_from_u64(seed);
    let spec = ConvSpec::same();
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.gen_range(4..=6);
        let channels = rng.gen_range(1..=2);
        let kc = rng.gen_range(1..=2);
        let gax = match layer {
            GconvKind::Lift => 1,
            GconvKind::Hidden => group.order(),
        };
        let input = random_map::<T>(MapShape::new(channels, gax, n, n, n), &mut rng, 1.0);
        let fan_in = channels * gax * 27;
        let scale = 0.5 / (fan_in as f64).sqrt();
        let filters = random_bank::<T>(kc, channels, gax, 3, &mut rng, scale);

        let base = gconv_forward(layer, &input, &filters, group, &spec).unwrap();
        for p in 0..group.order() {
            let transformed_in = apply_group_action(&input, group, p).unwrap();
            let out_of_transformed =
                gconv_forward(layer, &transformed_in, &filters, group, &spec).unwrap();
            let transformed_out = apply_group_action(&base, group, p).unwrap();
            let (abs, rel) = max_errors(out_of_transformed.data(), transformed_out.data());
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
    }
    EquivarianceReport {
        layer,
        group: group.kind().name().to_string(),
        trials,
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        tolerance: tol,
        passed: max_abs <= tol,
    }
}

/// Max absolute elementwise difference plus that difference normalized by the
/// largest magnitude present in either operand.
pub fn max_errors<T: Scalar>(a: &[T], b: &[T]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    let mut max_abs: f64 = 0.0;
    let mut max_mag: f64 = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        max_abs = max_abs.max((x.to_f64() - y.to_f64()).abs());
        max_mag = max_mag.max(x.to_f64().abs()).max(y.to_f64().abs());
    }
    let rel = if max_mag > 0.0 { max_abs / max_mag } else { 0.0 };
    (max_abs, rel)
}

pub(crate) fn random_map<T: Scalar>(shape: MapShape, rng: &mut StdRng, scale: f64) -> FeatureMap<T> {
    FeatureMap::from_fn(shape, |_, _, _, _, _| T::from_f64(rng.gen_range(-scale..scale)))
}

pub(crate) fn random_bank<T: Scalar>(
    out_channels: usize,
    in_channels: usize,
    gax: usize,
    kernel: usize,
    rng: &mut StdRng,
    scale: f64,
) -> FilterBank<T> {
    let len = out_channels * in_channels * gax * kernel * kernel * kernel;
    let data = (0..len)
        .map(|_| T::from_f64(rng.gen_range(-scale..scale)))
        .collect();
    FilterBank::from_vec(out_channels, in_channels, gax, kernel, data).unwrap()
}

/// Broken hidden-layer forward for negative controls: re-indexes the filter
/// group axis by `ρ` instead of `r⁻¹ρ`. Test-only.
#[cfg(test)]
pub(crate) fn gconv_hidden_broken<T: Scalar>(
    input: &FeatureMap<T>,
    filters: &FilterBank<T>,
    group: &FiniteRotationGroup,
    spec: &ConvSpec,
) -> FeatureMap<T> {
    let shape = input.shape();
    let k = filters.kernel();
    let out_dims = spec.out_dims(shape.spatial(), k).unwrap();
    let pad = (k - 1) / 2;
    let flat_channels = shape.channels * shape.group_size;
    let (padded, pdims) = pad_channels(input.data(), flat_channels, shape.spatial(), pad);
    let n = group.order();
    let kc = filters.out_channels();
    let mut out = FeatureMap::zeros(MapShape::new(kc, n, out_dims[0], out_dims[1], out_dims[2]));
    let kdims = [k, k, k];
    for r in 0..n {
        let mut scratch = Vec::with_capacity(filters.data().len());
        for ko in 0..kc {
            for i in 0..filters.in_channels() {
                for rho in 0..n {
                    // Wrong: uses slot ρ directly, skipping the Cayley re-index.
                    let (rotated, _) =
                        rotate_volume(filters.kernel_slice(ko, i, rho), kdims, group.element(r));
                    scratch.extend_from_slice(&rotated);
                }
            }
        }
        let slice = conv3d_valid_raw(&padded, flat_channels, pdims, &scratch, kc, k);
        let spatial = out_dims[0] * out_dims[1] * out_dims[2];
        for ko in 0..kc {
            out.spatial_slice_mut(ko, r)
                .copy_from_slice(&slice[ko * spatial..(ko + 1) * spatial]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symmetry::GroupKind;
    use proptest::prelude::*;

    fn group(kind: GroupKind) -> FiniteRotationGroup {
        FiniteRotationGroup::generate(kind)
    }

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    #[test]
    fn conv_k1_unit_filter_is_identity() {
        let mut r = rng(0);
        let input = random_map::<f64>(MapShape::new(1, 1, 3, 4, 5), &mut r, 1.0);
        let filters = FilterBank::from_vec(1, 1, 1, 1, vec![1.0]).unwrap();
        let out = conv3d(&input, &filters, &ConvSpec::same()).unwrap();
        assert_eq!(out, input);
        let out = conv3d(&input, &filters, &ConvSpec::valid()).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_all_ones_counts_taps() {
        let input = FeatureMap::<f64>::from_fn(MapShape::new(1, 1, 5, 5, 5), |_, _, _, _, _| 1.0);
        let filters = FilterBank::from_vec(1, 1, 1, 3, vec![1.0; 27]).unwrap();
        let out = conv3d(&input, &filters, &ConvSpec::valid()).unwrap();
        assert_eq!(out.shape().spatial(), [3, 3, 3]);
        for &v in out.data() {
            assert_eq!(v, 27.0);
        }
    }

    /// Naive six-nested-loop oracle for plain cross-correlation.
    fn conv_oracle(
        input: &FeatureMap<f64>,
        filters: &FilterBank<f64>,
        spec: &ConvSpec,
    ) -> FeatureMap<f64> {
        let dims = input.shape().spatial();
        let k = filters.kernel() as i64;
        let out_dims = spec.out_dims(dims, filters.kernel()).unwrap();
        let offset = match spec.padding {
            Padding::SameZero => (k - 1) / 2,
            Padding::Valid => 0,
        };
        FeatureMap::from_fn(
            MapShape::new(filters.out_channels(), 1, out_dims[0], out_dims[1], out_dims[2]),
            |ko, _, tz, ty, tx| {
                let mut acc = 0.0;
                for i in 0..input.shape().channels {
                    for kz in 0..k {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sz = tz as i64 + kz - offset;
                                let sy = ty as i64 + ky - offset;
                                let sx = tx as i64 + kx - offset;
                                if sz < 0
                                    || sy < 0
                                    || sx < 0
                                    || sz >= dims[0] as i64
                                    || sy >= dims[1] as i64
                                    || sx >= dims[2] as i64
                                {
                                    continue;
                                }
                                acc += filters.kernel_slice(ko, i, 0)
                                    [((kz * k + ky) * k + kx) as usize]
                                    * input.at(i, 0, sz as usize, sy as usize, sx as usize);
                            }
                        }
                    }
                }
                acc
            },
        )
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let mut r = rng(1);
        let input = random_map::<f64>(MapShape::new(1, 1, 4, 4, 4), &mut r, 1.0);
        let filters = random_bank::<f64>(2, 1, 1, 3, &mut r, 1.0);
        for spec in [ConvSpec::valid(), ConvSpec::same()] {
            let fast = conv3d(&input, &filters, &spec).unwrap();
            let slow = conv_oracle(&input, &filters, &spec);
            let (abs, _) = max_errors(fast.data(), slow.data());
            assert!(abs <= 1e-12, "abs={abs}");
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut r = rng(2);
        let input = random_map::<f64>(MapShape::new(2, 1, 3, 3, 3), &mut r, 1.0);
        let filters = random_bank::<f64>(1, 3, 1, 3, &mut r, 1.0);
        assert!(conv3d(&input, &filters, &ConvSpec::same()).is_err());
        let filters = random_bank::<f64>(1, 2, 1, 5, &mut r, 1.0);
        assert!(matches!(
            conv3d(&input, &filters, &ConvSpec::valid()),
            Err(ShapeError::KernelTooLarge { kernel: 5, extent: 3 })
        ));
    }

    #[test]
    fn lift_on_constant_input_gives_equal_slices() {
        let v = group(GroupKind::V);
        let input = FeatureMap::<f64>::from_fn(MapShape::new(1, 1, 5, 5, 5), |_, _, _, _, _| 1.0);
        let mut r = rng(3);
        let filters = random_bank::<f64>(2, 1, 1, 3, &mut r, 1.0);
        let out = gconv_lift(&input, &filters, &v, &ConvSpec::valid()).unwrap();
        for ko in 0..2 {
            let first = out.spatial_slice(ko, 0).to_vec();
            for g in 1..4 {
                let (abs, _) = max_errors(out.spatial_slice(ko, g), &first);
                assert!(abs <= 1e-12);
            }
        }
    }

    #[test]
    fn lift_identity_slice_equals_plain_conv() {
        let v = group(GroupKind::V);
        let mut r = rng(4);
        let input = random_map::<f64>(MapShape::new(2, 1, 5, 5, 5), &mut r, 1.0);
        let filters = random_bank::<f64>(3, 2, 1, 3, &mut r, 1.0);
        let lifted = gconv_lift(&input, &filters, &v, &ConvSpec::same()).unwrap();
        let plain = conv3d(&input, &filters, &ConvSpec::same()).unwrap();
        for ko in 0..3 {
            assert_eq!(lifted.spatial_slice(ko, 0), plain.spatial_slice(ko, 0));
        }
    }

    #[test]
    fn lift_matches_direct_summation() {
        let v = group(GroupKind::V);
        let mut r = rng(5);
        for trial in 0..5 {
            let input = random_map::<f64>(MapShape::new(1, 1, 4, 4, 4), &mut r, 1.0);
            let filters = random_bank::<f64>(2, 1, 1, 3, &mut r, 1.0);
            for spec in [ConvSpec::same(), ConvSpec::valid()] {
                let fast = gconv_lift(&input, &filters, &v, &spec).unwrap();
                let slow = gconv_direct(GconvKind::Lift, &input, &filters, &v, &spec).unwrap();
                let (abs, _) = max_errors(fast.data(), slow.data());
                assert!(abs <= 1e-12, "trial {trial}: abs={abs}");
            }
        }
    }

    #[test]
    fn hidden_matches_direct_summation() {
        let v = group(GroupKind::V);
        let mut r = rng(6);
        for trial in 0..5 {
            let input = random_map::<f64>(MapShape::new(1, 4, 6, 6, 6), &mut r, 1.0);
            let filters = random_bank::<f64>(2, 1, 4, 3, &mut r, 1.0);
            for spec in [ConvSpec::same(), ConvSpec::valid()] {
                let fast = gconv_hidden(&input, &filters, &v, &spec).unwrap();
                let slow = gconv_direct(GconvKind::Hidden, &input, &filters, &v, &spec).unwrap();
                let (abs, _) = max_errors(fast.data(), slow.data());
                assert!(abs <= 1e-12, "trial {trial}: abs={abs}");
            }
        }
    }

    #[test]
    fn hidden_delta_at_identity_slice_is_identity() {
        let v = group(GroupKind::V);
        let mut r = rng(7);
        let input = random_map::<f64>(MapShape::new(1, 4, 4, 4, 4), &mut r, 1.0);
        let mut filters = FilterBank::<f64>::zeros(1, 1, 4, 3).unwrap();
        filters.kernel_slice_mut(0, 0, 0)[13] = 1.0; // centered tap of the identity slot
        let out = gconv_hidden(&input, &filters, &v, &ConvSpec::same()).unwrap();
        let (abs, _) = max_errors(out.data(), input.data());
        assert!(abs <= 1e-15);
    }

    #[test]
    fn hidden_delta_at_slot_reindexes_by_right_multiplication() {
        let v = group(GroupKind::V);
        let mut r = rng(8);
        let input = random_map::<f64>(MapShape::new(1, 4, 4, 4, 4), &mut r, 1.0);
        let slot = 2;
        let mut filters = FilterBank::<f64>::zeros(1, 1, 4, 3).unwrap();
        filters.kernel_slice_mut(0, 0, slot)[13] = 1.0;
        let out = gconv_hidden(&input, &filters, &v, &ConvSpec::same()).unwrap();
        // out[r] = F[r·slot]: the filter's group index σ satisfies r⁻¹ρ = σ.
        for g in 0..4 {
            assert_eq!(
                out.spatial_slice(0, g),
                input.spatial_slice(0, v.compose(g, slot))
            );
        }
    }

    #[test]
    fn hidden_with_unit_kernels_is_cayley_mixing() {
        // 1³ kernels reduce the layer to a |G|×|G| matrix acting per voxel.
        let v = group(GroupKind::V);
        let mut r = rng(9);
        let input = random_map::<f64>(MapShape::new(1, 4, 3, 3, 3), &mut r, 1.0);
        let filters = random_bank::<f64>(1, 1, 4, 1, &mut r, 1.0);
        let out = gconv_hidden(&input, &filters, &v, &ConvSpec::same()).unwrap();
        for g in 0..4 {
            for d in 0..3 {
                for h in 0..3 {
                    for w in 0..3 {
                        let mut acc = 0.0;
                        for rho in 0..4 {
                            let sigma = v.compose(v.inverse(g), rho);
                            acc += filters.kernel_slice(0, 0, sigma)[0] * input.at(0, rho, d, h, w);
                        }
                        let got = out.at(0, g, d, h, w);
                        assert!((got - acc).abs() <= 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let v = group(GroupKind::V);
        let mut r = rng(10);
        let input = random_map::<f64>(MapShape::new(1, 4, 4, 4, 4), &mut r, 1.0);
        let filters = random_bank::<f64>(2, 1, 4, 3, &mut r, 1.0);
        let upstream = FeatureMap::zeros(MapShape::new(2, 4, 4, 4, 4));
        let (gi, gf) =
            gconv_backward(GconvKind::Hidden, &input, &filters, &upstream, &v, &ConvSpec::same())
                .unwrap();
        assert!(gi.data().iter().all(|&x| x == 0.0));
        assert!(gf.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_delta_upstream_recovers_input_patch() {
        let v = group(GroupKind::V);
        let mut r = rng(11);
        let input = random_map::<f64>(MapShape::new(1, 1, 5, 5, 5), &mut r, 1.0);
        let filters = random_bank::<f64>(1, 1, 1, 3, &mut r, 1.0);
        let spec = ConvSpec::valid();
        let mut upstream = FeatureMap::zeros(MapShape::new(1, 4, 3, 3, 3));
        // Single unit at the identity slice, output position (1, 2, 0).
        upstream.spatial_slice_mut(0, 0)[(1 * 3 + 2) * 3] = 1.0;
        let (_, gf) =
            gconv_backward(GconvKind::Lift, &input, &filters, &upstream, &v, &spec).unwrap();
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let expected = input.at(0, 0, 1 + kz, 2 + ky, kx);
                    let got = gf.kernel_slice(0, 0, 0)[(kz * 3 + ky) * 3 + kx];
                    assert!((got - expected).abs() <= 1e-15);
                }
            }
        }
    }

    /// Central finite differences of the scalar loss `L = ⟨layer(F, W), U⟩`.
    fn finite_difference_check(kind: GconvKind, grp: &FiniteRotationGroup, seed: u64) {
        let gax = match kind {
            GconvKind::Lift => 1,
            GconvKind::Hidden => grp.order(),
        };
        let mut r = rng(seed);
        let spec = ConvSpec::same();
        let input = random_map::<f64>(MapShape::new(1, gax, 5, 5, 5), &mut r, 1.0);
        let filters = random_bank::<f64>(1, 1, gax, 3, &mut r, 1.0);
        let out = gconv_forward(kind, &input, &filters, grp, &spec).unwrap();
        let upstream = random_map::<f64>(out.shape(), &mut r, 1.0);
        let (gi, gf) = gconv_backward(kind, &input, &filters, &upstream, grp, &spec).unwrap();

        let eps = 1e-5;
        let loss = |input: &FeatureMap<f64>, filters: &FilterBank<f64>| -> f64 {
            let out = gconv_forward(kind, input, filters, grp, &spec).unwrap();
            out.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
        };
        let check = |analytic: f64, fd: f64| {
            let denom = analytic.abs().max(fd.abs());
            if denom > 1e-9 {
                assert!(
                    (analytic - fd).abs() / denom <= 1e-6,
                    "analytic={analytic} fd={fd}"
                );
            } else {
                assert!((analytic - fd).abs() <= 1e-9);
            }
        };
        // Sample a spread of input coordinates; check every filter entry.
        for idx in (0..input.data().len()).step_by(17) {
            let mut plus = input.clone();
            plus.data_mut()[idx] += eps;
            let mut minus = input.clone();
            minus.data_mut()[idx] -= eps;
            let fd = (loss(&plus, &filters) - loss(&minus, &filters)) / (2.0 * eps);
            check(gi.data()[idx], fd);
        }
        for idx in 0..filters.data().len() {
            let mut plus = filters.clone();
            plus.data_mut()[idx] += eps;
            let mut minus = filters.clone();
            minus.data_mut()[idx] -= eps;
            let fd = (loss(&input, &plus) - loss(&input, &minus)) / (2.0 * eps);
            check(gf.data()[idx], fd);
        }
    }

    #[test]
    fn lift_gradients_match_finite_differences() {
        finite_difference_check(GconvKind::Lift, &group(GroupKind::V), 12);
    }

    #[test]
    fn hidden_gradients_match_finite_differences() {
        finite_difference_check(GconvKind::Hidden, &group(GroupKind::V), 13);
    }

    #[test]
    fn adjoint_dot_product_identity() {
        // ⟨layer(F, W), U⟩ = ⟨F, grad_input⟩ = ⟨W, grad_filters⟩.
        let s4 = group(GroupKind::S4);
        let mut r = rng(14);
        let input = random_map::<f64>(MapShape::new(1, 24, 4, 4, 4), &mut r, 1.0);
        let filters = random_bank::<f64>(2, 1, 24, 3, &mut r, 0.3);
        let spec = ConvSpec::same();
        let out = gconv_hidden(&input, &filters, &s4, &spec).unwrap();
        let upstream = random_map::<f64>(out.shape(), &mut r, 1.0);
        let (gi, gf) =
            gconv_backward(GconvKind::Hidden, &input, &filters, &upstream, &s4, &spec).unwrap();
        let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
        let forward_dot = dot(out.data(), upstream.data());
        let input_dot = dot(input.data(), gi.data());
        let filter_dot = dot(filters.data(), gf.data());
        assert!((forward_dot - input_dot).abs() / forward_dot.abs() <= 1e-10);
        assert!((forward_dot - filter_dot).abs() / forward_dot.abs() <= 1e-10);
    }

    #[test]
    fn equivariance_holds_for_klein_hidden() {
        let v = group(GroupKind::V);
        let report = check_equivariance::<f64>(GconvKind::Hidden, &v, 10, 1e-12, 15);
        assert!(report.passed, "max abs {}", report.max_abs_error);
    }

    #[test]
    fn equivariance_identity_error_is_zero() {
        let v = group(GroupKind::V);
        let mut r = rng(16);
        let input = random_map::<f64>(MapShape::new(1, 4, 5, 5, 5), &mut r, 1.0);
        let filters = random_bank::<f64>(1, 1, 4, 3, &mut r, 1.0);
        let spec = ConvSpec::same();
        let base = gconv_hidden(&input, &filters, &v, &spec).unwrap();
        let acted = gconv_hidden(
            &apply_group_action(&input, &v, 0).unwrap(),
            &filters,
            &v,
            &spec,
        )
        .unwrap();
        let expected = apply_group_action(&base, &v, 0).unwrap();
        assert_eq!(acted, expected);
    }

    #[test]
    fn broken_cayley_reindexing_fails_equivariance() {
        let v = group(GroupKind::V);
        let mut r = rng(17);
        let input = random_map::<f64>(MapShape::new(1, 4, 5, 5, 5), &mut r, 1.0);
        let filters = random_bank::<f64>(1, 1, 4, 3, &mut r, 1.0);
        let spec = ConvSpec::same();
        let mut worst: f64 = 0.0;
        for p in 0..4 {
            let base = gconv_hidden_broken(&input, &filters, &v, &spec);
            let acted =
                gconv_hidden_broken(&apply_group_action(&input, &v, p).unwrap(), &filters, &v, &spec);
            let expected = apply_group_action(&base, &v, p).unwrap();
            let (abs, _) = max_errors(acted.data(), expected.data());
            worst = worst.max(abs);
        }
        // Error on the order of the activation magnitude, not round-off.
        assert!(worst > 1e-2, "worst={worst}");
    }

    #[test]
    fn klein_bank_embedded_in_s4_matches_klein_model() {
        // Replicate a V filter bank and V input across cosets of V in S4; the
        // S4 output at V's element indices must equal the V output once the
        // 6× coset multiplicity is divided out of the filters.
        let v = group(GroupKind::V);
        let s4 = group(GroupKind::S4);
        let embed: Vec<usize> = v
            .elements()
            .iter()
            .map(|e| s4.index_of(e.matrix()).unwrap())
            .collect();
        // Decompose each σ ∈ S4 as σ = v·rep with rep a right-coset representative.
        let mut reps: Vec<usize> = Vec::new();
        let mut v_part = vec![usize::MAX; 24];
        for sigma in 0..24 {
            if v_part[sigma] != usize::MAX {
                continue;
            }
            reps.push(sigma);
            for (vi, &ve) in embed.iter().enumerate() {
                let member = s4.compose(ve, sigma);
                if v_part[member] == usize::MAX {
                    v_part[member] = vi;
                }
            }
        }
        assert_eq!(reps.len(), 6);
        assert!(v_part.iter().all(|&x| x != usize::MAX));

        let mut r = rng(18);
        let input_v = random_map::<f64>(MapShape::new(1, 4, 4, 4, 4), &mut r, 1.0);
        let filters_v = random_bank::<f64>(1, 1, 4, 3, &mut r, 1.0);
        let mut input_s4 = FeatureMap::<f64>::zeros(MapShape::new(1, 24, 4, 4, 4));
        let mut filters_s4 = FilterBank::<f64>::zeros(1, 1, 24, 3).unwrap();
        for sigma in 0..24 {
            input_s4
                .spatial_slice_mut(0, sigma)
                .copy_from_slice(input_v.spatial_slice(0, v_part[sigma]));
            let src = filters_v.kernel_slice(0, 0, v_part[sigma]).to_vec();
            for (dst, s) in filters_s4.kernel_slice_mut(0, 0, sigma).iter_mut().zip(&src) {
                *dst = *s / 6.0;
            }
        }
        let spec = ConvSpec::same();
        let out_v = gconv_hidden(&input_v, &filters_v, &v, &spec).unwrap();
        let out_s4 = gconv_hidden(&input_s4, &filters_s4, &s4, &spec).unwrap();
        for (vi, &ve) in embed.iter().enumerate() {
            let (abs, _) = max_errors(out_s4.spatial_slice(0, ve), out_v.spatial_slice(0, vi));
            assert!(abs <= 1e-12, "v element {vi}: abs={abs}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn gconv_is_linear(seed in 0u64..500, alpha in -2.0f64..2.0) {
            let v = group(GroupKind::V);
            let mut r = rng(seed);
            let spec = ConvSpec::same();
            let a = random_map::<f64>(MapShape::new(1, 4, 4, 4, 4), &mut r, 1.0);
            let b = random_map::<f64>(MapShape::new(1, 4, 4, 4, 4), &mut r, 1.0);
            let filters = random_bank::<f64>(1, 1, 4, 3, &mut r, 1.0);
            let sum = FeatureMap::from_vec(
                a.shape(),
                a.data().iter().zip(b.data()).map(|(x, y)| alpha * x + y).collect(),
            ).unwrap();
            let out_sum = gconv_hidden(&sum, &filters, &v, &spec).unwrap();
            let out_a = gconv_hidden(&a, &filters, &v, &spec).unwrap();
            let out_b = gconv_hidden(&b, &filters, &v, &spec).unwrap();
            let combined: Vec<f64> = out_a
                .data()
                .iter()
                .zip(out_b.data())
                .map(|(x, y)| alpha * x + y)
                .collect();
            let (abs, _) = max_errors(out_sum.data(), &combined);
            prop_assert!(abs <= 1e-11);
        }

        #[test]
        fn padding_commutes_with_rotation_on_cubes(p in 0usize..24, seed in 0u64..500) {
            let s4 = group(GroupKind::S4);
            let mut r = rng(seed);
            let map = random_map::<f64>(MapShape::new(1, 1, 4, 4, 4), &mut r, 1.0);
            let (padded, pdims) = pad_channels(map.data(), 1, [4, 4, 4], 1);
            let (rot_then_pad, _) = {
                let (rot, rdims) = rotate_volume(map.data(), [4, 4, 4], s4.element(p));
                pad_channels(&rot, 1, rdims, 1)
            };
            let (pad_then_rot, _) = rotate_volume(&padded, pdims, s4.element(p));
            prop_assert_eq!(rot_then_pad, pad_then_rot);
        }
    }
}
