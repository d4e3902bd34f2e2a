//! Naive dense reference implementations.
//!
//! Every routine loops over all elements and all filter taps with no
//! sparsity shortcuts, written in gather form so that it shares no code path
//! with the scatter-based sparse kernels it checks. The dense convolution is
//! `y[o] = bias + sum_f w[f] * x[o - f + center]`, the convention produced by
//! scattering input `d` through tap `f` to output `d + f - center`.

use crate::error::{Error, Result};
use crate::tensor::{spatial_coords, DenseFilter, DenseTensor, TensorShape};
use crate::Real;

/// Input offset paired with output `o` through tap `f`, if inside the grid.
fn source(o: &[usize], tap: &[usize], extent: &[usize], dims: &[usize]) -> Option<usize> {
    let mut lin = 0usize;
    for d in 0..dims.len() {
        let pos = o[d] as i64 - tap[d] as i64 + (extent[d] / 2) as i64;
        if pos < 0 || pos >= dims[d] as i64 {
            return None;
        }
        lin = lin * dims[d] + pos as usize;
    }
    Some(lin)
}

fn all_coords(dims: &[usize]) -> Vec<Vec<usize>> {
    let volume: usize = dims.iter().product();
    (0..volume)
        .map(|s| {
            let mut c = vec![0; dims.len()];
            spatial_coords(s, dims, &mut c);
            c
        })
        .collect()
}

fn check(x: &TensorShape, filter: &DenseFilter) -> Result<()> {
    let f = filter.shape();
    if x.channels() != f.in_channels() || x.rank() != f.rank() {
        return Err(Error::ShapeMismatch(format!(
            "input with {} channels and rank {} against filter with {} input channels and rank {}",
            x.channels(),
            x.rank(),
            f.in_channels(),
            f.rank()
        )));
    }
    Ok(())
}

/// Dense convolution with SAME zero padding, stride 1; bias is added everywhere.
pub fn dense_conv_forward(x: &DenseTensor, filter: &DenseFilter, bias: &[Real]) -> Result<DenseTensor> {
    let shape = x.shape();
    check(shape, filter)?;
    let fshape = filter.shape();
    if bias.len() != fshape.out_channels() {
        return Err(Error::ShapeMismatch("bias length differs from output channels".into()));
    }
    let out_shape = shape.with_channels(fshape.out_channels())?;
    let dims = shape.spatial();
    let extent = fshape.spatial();
    let positions = all_coords(dims);
    let taps = all_coords(extent);
    let mut out = DenseTensor::zeros(out_shape.clone());
    for b in 0..shape.batch() {
        for oc in 0..fshape.out_channels() {
            for (o, oc_coords) in positions.iter().enumerate() {
                let mut acc = bias[oc];
                for ic in 0..fshape.in_channels() {
                    let kernel = filter.kernel(oc, ic);
                    let slab = x.slab(b, ic);
                    for (t, tap) in taps.iter().enumerate() {
                        if let Some(src) = source(oc_coords, tap, extent, dims) {
                            acc += kernel[t] * slab[src];
                        }
                    }
                }
                out.values_mut()[out_shape.key(b, oc, o) as usize] = acc;
            }
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss through [`dense_conv_forward`] given `d_out`.
pub fn dense_conv_backward(
    x: &DenseTensor,
    filter: &DenseFilter,
    d_out: &DenseTensor,
) -> Result<(DenseTensor, DenseFilter, Vec<Real>)> {
    let shape = x.shape();
    check(shape, filter)?;
    let fshape = filter.shape();
    if d_out.shape() != &shape.with_channels(fshape.out_channels())? {
        return Err(Error::ShapeMismatch("output gradient shape".into()));
    }
    let dims = shape.spatial();
    let extent = fshape.spatial();
    let positions = all_coords(dims);
    let taps = all_coords(extent);
    let mut d_x = DenseTensor::zeros(shape.clone());
    let mut d_w = DenseFilter::zeros(fshape.clone());
    let mut d_b = vec![0.0; fshape.out_channels()];
    let kv = fshape.kernel_volume();
    for b in 0..shape.batch() {
        for oc in 0..fshape.out_channels() {
            let g_slab = d_out.slab(b, oc);
            for (o, o_coords) in positions.iter().enumerate() {
                let g = g_slab[o];
                d_b[oc] += g;
                for ic in 0..fshape.in_channels() {
                    let group = fshape.group(oc, ic).start as usize;
                    let x_base = shape.key(b, ic, 0) as usize;
                    for (t, tap) in taps.iter().enumerate() {
                        if let Some(src) = source(o_coords, tap, extent, dims) {
                            d_x.values_mut()[x_base + src] += g * filter.values()[group + t];
                            d_w.values_mut()[group + t] += g * x.values()[x_base + src];
                        }
                    }
                }
            }
        }
    }
    debug_assert_eq!(d_w.values().len(), kv * fshape.in_channels() * fshape.out_channels());
    Ok((d_x, d_w, d_b))
}

pub fn dense_relu(x: &DenseTensor) -> DenseTensor {
    let values = x.values().iter().map(|&v| v.max(0.0)).collect();
    DenseTensor::new(x.shape().clone(), values).expect("same shape")
}

/// Dense max-pooling over `floor(index / stride)` windows (ceil output dims).
/// Returns the pooled tensor and, per output element, the flat input index of
/// its maximum (first occurrence on ties).
pub fn dense_max_pool(x: &DenseTensor, strides: &[usize]) -> Result<(DenseTensor, Vec<usize>)> {
    let shape = x.shape();
    if strides.len() != shape.rank() || strides.contains(&0) {
        return Err(Error::InvalidParameter("pooling strides do not match rank".into()));
    }
    let dims = shape.spatial();
    let out_dims: Vec<usize> = dims.iter().zip(strides).map(|(&s, &st)| s.div_ceil(st)).collect();
    let out_shape = TensorShape::new(shape.batch(), out_dims.clone(), shape.channels())?;
    let mut out = vec![Real::NEG_INFINITY; out_shape.len() as usize];
    let mut arg = vec![usize::MAX; out.len()];
    let mut c = vec![0; dims.len()];
    for (flat, &v) in x.values().iter().enumerate() {
        let (b, ch, s) = shape.split(flat as u64);
        spatial_coords(s, dims, &mut c);
        let mut q = 0;
        for d in 0..dims.len() {
            q = q * out_dims[d] + c[d] / strides[d];
        }
        let o = out_shape.key(b, ch, q) as usize;
        if v > out[o] {
            out[o] = v;
            arg[o] = flat;
        }
    }
    Ok((DenseTensor::new(out_shape, out)?, arg))
}

/// Routes pooled gradients back to the recorded argmax positions.
pub fn dense_max_pool_backward(input_shape: &TensorShape, argmax: &[usize], d_out: &DenseTensor) -> Result<DenseTensor> {
    if argmax.len() != d_out.values().len() {
        return Err(Error::ShapeMismatch("argmax table and gradient differ in length".into()));
    }
    let mut d_x = DenseTensor::zeros(input_shape.clone());
    for (&a, &g) in argmax.iter().zip(d_out.values()) {
        d_x.values_mut()[a] += g;
    }
    Ok(d_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FilterShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dense(shape: TensorShape, rng: &mut ChaCha8Rng) -> DenseTensor {
        let n = shape.len() as usize;
        DenseTensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_filter(shape: FilterShape, rng: &mut ChaCha8Rng) -> DenseFilter {
        let n = shape.len();
        DenseFilter::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_dense(TensorShape::new(2, vec![4, 5], 2).unwrap(), &mut rng);
        let fshape = FilterShape::cube(1, 2, 2, 2).unwrap();
        let mut w = DenseFilter::zeros(fshape.clone());
        w.values_mut()[fshape.key(0, 0, 0) as usize] = 1.0;
        w.values_mut()[fshape.key(1, 1, 0) as usize] = 1.0;
        assert_eq!(dense_conv_forward(&x, &w, &[0.0, 0.0]).unwrap(), x);
    }

    #[test]
    fn ones_kernel_stamps_one_hot() {
        let shape = TensorShape::new(1, vec![5, 5], 1).unwrap();
        let mut x = DenseTensor::zeros(shape.clone());
        x.values_mut()[2 * 5 + 1] = 1.0;
        let w = DenseFilter::new(FilterShape::cube(3, 2, 1, 1).unwrap(), vec![1.0; 9]).unwrap();
        let y = dense_conv_forward(&x, &w, &[0.0]).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let inside = (1..=3).contains(&r) && c <= 2;
                assert_eq!(y.values()[r * 5 + c], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn linearity_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = TensorShape::new(1, vec![9, 9], 2).unwrap();
        let x = random_dense(shape.clone(), &mut rng);
        let y = random_dense(shape.clone(), &mut rng);
        let w = random_filter(FilterShape::cube(3, 2, 2, 3).unwrap(), &mut rng);
        let zero = [0.0; 3];
        let sum = DenseTensor::new(
            shape.clone(),
            x.values().iter().zip(y.values()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let fx = dense_conv_forward(&x, &w, &zero).unwrap();
        let fy = dense_conv_forward(&y, &w, &zero).unwrap();
        let fs = dense_conv_forward(&sum, &w, &zero).unwrap();
        for ((a, b), s) in fx.values().iter().zip(fy.values()).zip(fs.values()) {
            assert!((a + b - s).abs() < 1e-12);
        }

        // shift by one column; interior outputs shift with it
        let mut shifted = DenseTensor::zeros(shape.clone());
        for b in 0..1 {
            for c in 0..2 {
                for r in 0..9 {
                    for col in 1..9 {
                        let dst = shape.key(b, c, r * 9 + col) as usize;
                        let src = shape.key(b, c, r * 9 + col - 1) as usize;
                        shifted.values_mut()[dst] = x.values()[src];
                    }
                }
            }
        }
        let fshift = dense_conv_forward(&shifted, &w, &zero).unwrap();
        let out_shape = fx.shape().clone();
        for oc in 0..3 {
            for r in 1..8 {
                for col in 2..8 {
                    let a = fshift.values()[out_shape.key(0, oc, r * 9 + col) as usize];
                    let b = fx.values()[out_shape.key(0, oc, r * 9 + col - 1) as usize];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_output_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_dense(TensorShape::new(1, vec![4, 4], 1).unwrap(), &mut rng);
        let w = random_filter(FilterShape::cube(3, 2, 1, 2).unwrap(), &mut rng);
        let d = DenseTensor::zeros(x.shape().with_channels(2).unwrap());
        let (dx, dw, db) = dense_conv_backward(&x, &w, &d).unwrap();
        assert!(dx.values().iter().chain(dw.values()).chain(&db).all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_dense(TensorShape::new(2, vec![4, 3], 2).unwrap(), &mut rng);
        let w = random_filter(FilterShape::cube(3, 2, 2, 2).unwrap(), &mut rng);
        let bias = [0.1, -0.3];
        let weights = random_dense(x.shape().clone(), &mut rng);
        let loss = |x: &DenseTensor, w: &DenseFilter| -> Real {
            let y = dense_conv_forward(x, w, &bias).unwrap();
            y.values().iter().zip(weights.values()).map(|(a, b)| a * b).sum()
        };
        let (dx, dw, db) = dense_conv_backward(&x, &w, &weights).unwrap();
        let h = 1e-5;
        for i in 0..x.values().len() {
            let mut p = x.clone();
            p.values_mut()[i] += h;
            let mut m = x.clone();
            m.values_mut()[i] -= h;
            let fd = (loss(&p, &w) - loss(&m, &w)) / (2.0 * h);
            assert!((fd - dx.values()[i]).abs() <= 1e-3 * fd.abs().max(1e-2));
        }
        for i in 0..w.values().len() {
            let mut p = w.clone();
            p.values_mut()[i] += h;
            let mut m = w.clone();
            m.values_mut()[i] -= h;
            let fd = (loss(&x, &p) - loss(&x, &m)) / (2.0 * h);
            assert!((fd - dw.values()[i]).abs() <= 1e-3 * fd.abs().max(1e-2));
        }
        let total: Real = weights.values().iter().sum();
        assert!((db[0] + db[1] - total).abs() < 1e-9);
    }

    #[test]
    fn pool_constant_and_relu() {
        let shape = TensorShape::new(1, vec![4, 4], 1).unwrap();
        let x = DenseTensor::new(shape.clone(), vec![0.7; 16]).unwrap();
        let (y, _) = dense_max_pool(&x, &[2, 2]).unwrap();
        assert_eq!(y.values(), &[0.7; 4]);
        let neg = DenseTensor::new(shape, vec![-1.0; 16]).unwrap();
        assert!(dense_relu(&neg).values().iter().all(|&v| v == 0.0));
    }
}
