use super::Tensor;
use crate::error::{Error, Result};

/// Guard added to the mean square before the square root in [`rms_normalize`].
pub const RMS_EPS: f64 = 1e-8;

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
}

/// Passes `upstream` where `input > 0`; the subgradient at zero is zero.
pub fn relu_backward(input: &Tensor, upstream_grad: &Tensor) -> Result<Tensor> {
    if input.shape() != upstream_grad.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?} vs {:?}", input.shape(), upstream_grad.shape()),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream_grad.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Per-sample division by the root mean square over everything after the
/// batch axis. Returns the normalized tensor and the per-sample denominators.
pub fn rms_normalize(activations: &Tensor) -> (Tensor, Tensor) {
    let batch = activations.shape()[0];
    let n = activations.sample_len();
    let mut out = activations.clone();
    let mut rms = Tensor::zeros(&[batch]);
    for b in 0..batch {
        let sample = out.sample_mut(b);
        let mean_sq = sample.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / n as f64;
        let denom = (mean_sq + RMS_EPS).sqrt();
        let inv = 1.0 / denom;
        for v in sample.iter_mut() {
            *v = (*v as f64 * inv) as f32;
        }
        rms.data_mut()[b] = denom as f32;
    }
    (out, rms)
}

/// Argmax bookkeeping from [`maxpool2`], consumed by [`maxpool2_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct PoolMask {
    input_shape: Vec<usize>,
    /// Flat input index chosen for each output element.
    argmax: Vec<usize>,
}

impl PoolMask {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// 2×2, stride-2 max pooling. A trailing odd row or column is dropped.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, PoolMask)> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::shape("maxpool2", format!("expected rank 4, got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    let src = input.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best_idx = base + (2 * y) * w + 2 * x;
                let mut best = src[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if src[idx] > best {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
                dst[o] = best;
                argmax.push(best_idx);
                o += 1;
            }
        }
    }
    Ok((
        out,
        PoolMask {
            input_shape: s.to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward(mask: &PoolMask, upstream_grad: &Tensor) -> Result<Tensor> {
    if upstream_grad.len() != mask.argmax.len() {
        return Err(Error::shape(
            "maxpool2_backward",
            format!(
                "upstream_grad has {} elements, mask covers {}",
                upstream_grad.len(),
                mask.argmax.len()
            ),
        ));
    }
    let mut grad = Tensor::zeros(&mask.input_shape);
    let g = grad.data_mut();
    for (&idx, &u) in mask.argmax.iter().zip(upstream_grad.data()) {
        g[idx] += u;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relu_examples() {
        let t = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::from_vec(&[3], vec![0.5, 1.0, 9.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let x = Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        let up = Tensor::from_vec(&[2], vec![5.0, 5.0]).unwrap();
        assert_eq!(relu_backward(&x, &up).unwrap().data(), &[0.0, 5.0]);
    }

    #[test]
    fn rms_examples() {
        let t = Tensor::from_vec(&[2, 4], vec![2.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let (n, rms) = rms_normalize(&t);
        assert_eq!(&n.data()[..4], &[1.0; 4]);
        assert_eq!(rms.data()[0], 2.0);
        assert_eq!(&n.data()[4..], &[0.0; 4]);
        assert!(rms.data()[1] < 1e-3);
    }

    #[test]
    fn pool_examples() {
        let t = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (o, m) = maxpool2(&t).unwrap();
        assert_eq!(o.data(), &[4.0]);
        assert_eq!(m.argmax(), &[3]);

        let c = Tensor::full(&[1, 1, 4, 4], 0.25);
        let (o, m) = maxpool2(&c).unwrap();
        assert_eq!(o.data(), &[0.25; 4]);
        assert_eq!(m.argmax(), &[0, 2, 8, 10]);

        let odd = Tensor::full(&[1, 2, 5, 3], 1.0);
        assert_eq!(maxpool2(&odd).unwrap().0.shape(), &[1, 2, 2, 1]);
    }

    #[test]
    fn pool_matches_window_scan() {
        let vals: Vec<f32> = (0..16).map(|i| ((i * 7) % 11) as f32).collect();
        let t = Tensor::from_vec(&[1, 1, 4, 4], vals.clone()).unwrap();
        let (o, _) = maxpool2(&t).unwrap();
        for wy in 0..2 {
            for wx in 0..2 {
                let mut m = f32::MIN;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(vals[(2 * wy + dy) * 4 + 2 * wx + dx]);
                    }
                }
                assert_eq!(o.data()[wy * 2 + wx], m);
            }
        }
    }

    proptest! {
        #[test]
        fn relu_idempotent(v in proptest::collection::vec(-10.0f32..10.0, 1..64)) {
            let t = Tensor::from_vec(&[v.len()], v).unwrap();
            prop_assert_eq!(relu(&relu(&t)), relu(&t));
        }

        #[test]
        fn rms_mean_square_is_one(v in proptest::collection::vec(-100.0f32..100.0, 1..256)) {
            let n = v.len();
            let t = Tensor::from_vec(&[1, n], v).unwrap();
            let ms = t.data().iter().map(|x| (*x as f64).powi(2)).sum::<f64>() / n as f64;
            prop_assume!(ms.sqrt() > 1e-6 * 100.0);
            let (y, _) = rms_normalize(&t);
            let out = y.data().iter().map(|x| (*x as f64).powi(2)).sum::<f64>() / n as f64;
            prop_assert!((out - 1.0).abs() <= 1e-4, "mean square {}", out);
        }

        #[test]
        fn pool_backward_conserves_mass(
            v in proptest::collection::vec(-5.0f32..5.0, 2 * 3 * 6 * 6),
            g in proptest::collection::vec(-5.0f32..5.0, 2 * 3 * 3 * 3),
        ) {
            let t = Tensor::from_vec(&[2, 3, 6, 6], v).unwrap();
            let (_, mask) = maxpool2(&t).unwrap();
            let up = Tensor::from_vec(&[2, 3, 3, 3], g).unwrap();
            let back = maxpool2_backward(&mask, &up).unwrap();
            let a: f64 = back.data().iter().map(|&x| x as f64).sum();
            let b: f64 = up.data().iter().map(|&x| x as f64).sum();
            prop_assert!((a - b).abs() < 1e-4);
        }
    }
}
