//! Minimal dense-tensor engine with reverse-mode differentiation.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{gradient_check, gradient_check_subset, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{Conv2dGeom, Conv3dGeom, GatherMap, SparseMap, GATHER_ZERO};
pub use tensor::{cast, Scalar, Tensor};

use crate::error::Result;

/// 2D cross-correlation, stride 1: `out[b,o,i,j] = Σ_{c,u,v} in_pad[b,c,i+u,j+v]·ker[o,c,u,v]`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, pad: [usize; 2]) -> Result<Tensor<T>> {
    conv2d_strided(input, kernel, pad, [1, 1])
}

pub fn conv2d_strided<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    pad: [usize; 2],
    stride: [usize; 2],
) -> Result<Tensor<T>> {
    let geom = Conv2dGeom::new(input.shape(), kernel.shape(), pad, stride)?;
    Ok(kernels::conv2d_forward(input, kernel, &geom))
}

/// Direct nested-loop 3D cross-correlation with stride 1.
pub fn conv3d_direct<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, pad: [usize; 3]) -> Result<Tensor<T>> {
    conv3d_direct_strided(input, kernel, pad, [1, 1, 1])
}

pub fn conv3d_direct_strided<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    pad: [usize; 3],
    stride: [usize; 3],
) -> Result<Tensor<T>> {
    let geom = Conv3dGeom::new(input.shape(), kernel.shape(), pad, stride)?;
    Ok(kernels::conv3d_forward(input, kernel, &geom))
}

/// Multiply-accumulates of [`conv3d_direct`]: `B·Co·Ci·D'·H'·W'·Kd·Kh·Kw`.
pub fn conv3d_direct_macs(input: &[usize], kernel: &[usize], pad: [usize; 3]) -> Result<u64> {
    Ok(Conv3dGeom::new(input, kernel, pad, [1, 1, 1])?.macs())
}

/// Multiply-accumulates of [`conv2d`]: `B·Co·Ci·H'·W'·Kh·Kw`.
pub fn conv2d_macs(input: &[usize], kernel: &[usize], pad: [usize; 2]) -> Result<u64> {
    Ok(Conv2dGeom::new(input, kernel, pad, [1, 1])?.macs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_small_example() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let k = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &k, [0, 0]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn conv2d_identity_and_zero_kernels() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |i| (i as f64 * 0.37).sin());
        let mut id = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            id.data_mut()[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d(&x, &id, [0, 0]).unwrap(), x);
        let z = conv2d(&x, &Tensor::zeros(&[2, 3, 3, 3]), [1, 1]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_errors_name_the_axis() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        let err = conv2d(&x, &Tensor::zeros(&[1, 3, 1, 1]), [0, 0]).unwrap_err();
        assert!(err.to_string().contains("channel"));
        let err = conv2d(&x, &Tensor::zeros(&[1, 2, 5, 1]), [0, 0]).unwrap_err();
        assert!(err.to_string().contains("axis H"));
        let err = conv2d(&x, &Tensor::zeros(&[1, 2, 1, 6]), [0, 1]).unwrap_err();
        assert!(err.to_string().contains("axis W"));
    }

    #[test]
    fn conv3d_counting_and_identity() {
        let ones = Tensor::<f64>::ones(&[1, 1, 2, 2, 2]);
        let y = conv3d_direct(&ones, &ones, [0, 0, 0]).unwrap();
        assert_eq!(y.data(), &[8.0]);

        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 4, 5], |i| i as f64 - 7.0);
        let mut delta = Tensor::<f64>::zeros(&[1, 1, 3, 3, 3]);
        delta.data_mut()[13] = 1.0;
        assert_eq!(conv3d_direct(&x, &delta, [1, 1, 1]).unwrap(), x);
    }

    #[test]
    fn mac_counts_follow_closed_form() {
        let m = conv3d_direct_macs(&[2, 3, 4, 5, 6], &[7, 3, 3, 3, 3], [1, 1, 1]).unwrap();
        assert_eq!(m, (2 * 7 * 3 * 4 * 5 * 6 * 27) as u64);
        let m = conv2d_macs(&[1, 4, 8, 8], &[2, 4, 3, 3], [0, 0]).unwrap();
        assert_eq!(m, (2 * 4 * 6 * 6 * 9) as u64);
    }
}
