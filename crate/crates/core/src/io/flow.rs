use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FLOW_SCALE: f64 = 16.0;
pub const FLOW_LIMIT: f64 = 128.0;

fn encode(v: f64, scale: f64) -> f64 {
    (scale * v).round().clamp(-FLOW_LIMIT, FLOW_LIMIT)
}

/// Maps a `[2, H, W]` flow field to a `[3, H, W]` image: scaled and clamped
/// x and y flow, then the magnitude of the original flow encoded the same
/// way.
pub fn flow_to_image(flow: &Tensor, scale: f64) -> Result<Tensor> {
    let [2, h, w] = flow.shape()[..] else {
        return Err(Error::Shape {
            op: "flow_to_image",
            left: vec![2, 0, 0],
            right: flow.shape().to_vec(),
        });
    };
    let n = h * w;
    let (u, v) = flow.data().split_at(n);
    let mut out = Vec::with_capacity(3 * n);
    out.extend(u.iter().map(|&x| encode(x, scale)));
    out.extend(v.iter().map(|&x| encode(x, scale)));
    out.extend(u.iter().zip(v).map(|(&a, &b)| encode(a.hypot(b), scale)));
    Tensor::new(vec![3, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_is_zero_image() {
        let img = flow_to_image(&Tensor::zeros(&[2, 2, 3]), FLOW_SCALE).unwrap();
        assert_eq!(img.shape(), &[3, 2, 3]);
        assert!(img.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn three_four_five() {
        let f = Tensor::new(vec![2, 1, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(flow_to_image(&f, 1.0).unwrap().data(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn saturates() {
        let f = Tensor::new(vec![2, 1, 2], vec![1e6, -1e6, -1e6, 0.0]).unwrap();
        let img = flow_to_image(&f, FLOW_SCALE).unwrap();
        assert_eq!(img.data(), &[128.0, -128.0, -128.0, 0.0, 128.0, 128.0]);
    }

    #[test]
    fn rejects_wrong_channels() {
        assert!(flow_to_image(&Tensor::zeros(&[3, 2, 2]), 1.0).is_err());
        assert!(flow_to_image(&Tensor::zeros(&[4]), 1.0).is_err());
    }
}
