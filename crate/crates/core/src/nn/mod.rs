//! Minimal layer engine with explicit backward passes.
//!
//! Every layer caches what its backward pass needs when `keep` is set on
//! the forward call; backward consumes that cache and accumulates
//! parameter gradients.

mod layers;
mod param;
mod scalar;
mod tensor;

pub use layers::{
    bilinear_taps, broadcast_spatial, global_avg_pool, global_avg_pool_backward, out_extent,
    resize_bilinear, resize_bilinear_backward, scale_channels, scale_channels_backward,
    scale_spatial, scale_spatial_backward, sigmoid, upsample_nearest, upsample_nearest_backward,
    BatchNorm2d, Conv2d, ConvBnRelu, ConvOpts, MaxPool2d, Relu,
};
pub use param::{join, HasParams, Param, ParamKind};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Checks d<r, f(x)>/dx against central differences.
    fn check_input_grad(
        x: &Tensor<f64>,
        mut f: impl FnMut(&Tensor<f64>, bool) -> Tensor<f64>,
        mut back: impl FnMut(&Tensor<f64>) -> Tensor<f64>,
        rng: &mut ChaCha8Rng,
    ) {
        let y = f(x, true);
        let r = random(y.shape(), rng);
        let dx = back(&r);
        let eps = 1e-6;
        for i in (0..x.data().len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (dot(&r, &f(&xp, false)) - dot(&r, &f(&xm, false))) / (2.0 * eps);
            let an = dx.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "index {i}: analytic {an} vs numeric {fd}"
            );
        }
    }

    #[test]
    fn conv_input_and_weight_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, opts) in [
            (3, ConvOpts::same(3).with_bias()),
            (3, ConvOpts::same(3).stride(2)),
            (1, ConvOpts::same(1).with_bias()),
            (3, ConvOpts::same(3).groups(2)),
            (7, ConvOpts::same(7).stride(2)),
        ] {
            let conv = Conv2d::<f64>::new("c", 4, 6, k, opts, &mut rng);
            let x = random([2, 4, 7, 6], &mut rng);
            let mut fwd = conv.clone();
            let mut bwd_conv = conv.clone();
            let y = bwd_conv.forward(&x, true);
            let r = random(y.shape(), &mut rng);
            let dx = bwd_conv.backward(&r);
            let eps = 1e-6;
            for i in (0..x.data().len()).step_by(5) {
                let mut xp = x.clone();
                xp.data_mut()[i] += eps;
                let mut xm = x.clone();
                xm.data_mut()[i] -= eps;
                let fd = (dot(&r, &fwd.forward(&xp, false)) - dot(&r, &fwd.forward(&xm, false))) / (2.0 * eps);
                assert!((fd - dx.data()[i]).abs() < 1e-6, "dx {i}");
            }
            for i in (0..conv.weight.len()).step_by(3) {
                let mut cp = conv.clone();
                cp.weight.value[i] += eps;
                let mut cm = conv.clone();
                cm.weight.value[i] -= eps;
                let fd = (dot(&r, &cp.forward(&x, false)) - dot(&r, &cm.forward(&x, false))) / (2.0 * eps);
                assert!((fd - bwd_conv.weight.grad[i]).abs() < 1e-6, "dw {i}");
            }
            if let Some(b) = &bwd_conv.bias {
                let expect: Vec<f64> = (0..6)
                    .map(|co| (0..2).map(|n| r.item(n)[co * y.plane()..(co + 1) * y.plane()].iter().sum::<f64>()).sum())
                    .collect();
                for (g, e) in b.grad.iter().zip(expect) {
                    assert!((g - e).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn batchnorm_gradients_in_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random([3, 2, 4, 5], &mut rng);
        for train in [true, false] {
            let mut bn = BatchNorm2d::<f64>::new("bn", 2);
            bn.gamma.value = vec![1.5, -0.7];
            bn.beta.value = vec![0.2, 0.1];
            bn.running_mean.value = vec![0.1, -0.2];
            bn.running_var.value = vec![0.8, 1.3];
            let template = bn.clone();
            let mut b2 = bn.clone();
            check_input_grad(
                &x,
                |x, _| template.clone().forward(x, train, false),
                |dy| {
                    b2.forward(&x, train, true);
                    b2.backward(dy)
                },
                &mut rng,
            );
        }
    }

    #[test]
    fn eval_mode_batchnorm_is_batch_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        let x = random([4, 2, 3, 3], &mut rng);
        bn.forward(&x, true, false);
        let full = bn.forward(&x, false, false);
        let single = bn.forward(&Tensor::stack(&[x.unstack()[2].clone()]), false, false);
        assert_eq!(full.item(2), single.item(0));
    }

    #[test]
    fn pooling_and_resampling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([2, 3, 8, 6], &mut rng);

        let mut pool = MaxPool2d::new(3, 2, 1);
        let mut pool2 = MaxPool2d::new(3, 2, 1);
        check_input_grad(&x, |x, _| pool.forward(x, false), |dy| {
            pool2.forward(&x, true);
            pool2.backward(dy)
        }, &mut rng);

        check_input_grad(&x, |x, _| upsample_nearest(x, 2), |dy| upsample_nearest_backward(dy, 2), &mut rng);
        check_input_grad(&x, |x, _| resize_bilinear(x, 16, 12), |dy| resize_bilinear_backward(dy, 8, 6), &mut rng);
        check_input_grad(&x, |x, _| resize_bilinear(x, 5, 9), |dy| resize_bilinear_backward(dy, 8, 6), &mut rng);
        check_input_grad(&x, |x, _| global_avg_pool(x), |dy| global_avg_pool_backward(dy, 8, 6), &mut rng);
    }

    #[test]
    fn gating_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random([2, 3, 4, 4], &mut rng);
        let cg = random([2, 3, 1, 1], &mut rng);
        let sg = random([2, 1, 4, 4], &mut rng);
        check_input_grad(&x, |x, _| scale_channels(x, &cg), |dy| scale_channels_backward(dy, &x, &cg).0, &mut rng);
        check_input_grad(&cg, |g, _| scale_channels(&x, g), |dy| scale_channels_backward(dy, &x, &cg).1, &mut rng);
        check_input_grad(&x, |x, _| scale_spatial(x, &sg), |dy| scale_spatial_backward(dy, &x, &sg).0, &mut rng);
        check_input_grad(&sg, |g, _| scale_spatial(&x, g), |dy| scale_spatial_backward(dy, &x, &sg).1, &mut rng);
    }

    #[test]
    fn bilinear_downscale_by_two_averages_pairs() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 4], vec![1.0, 3.0, 5.0, 9.0]);
        let y = resize_bilinear(&x.clone(), 1, 2);
        // Rows are resampled too (1 -> 1 keeps the row).
        assert_eq!(y.data(), &[2.0, 7.0]);
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random([2, 2, 3, 3], &mut rng);
        let b = random([2, 1, 3, 3], &mut rng);
        let c = Tensor::concat_channels(&[&a, &b]);
        let parts = c.split_channels(&[2, 1]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
