//! Token layouts for the two self-attention flavours.
//!
//! Spatial attention sees one `[H·W, C]` matrix per frame (row `i·W + j` is
//! position `(i, j)`); temporal attention sees one `[F, C]` matrix per spatial
//! position, stacking that position across all frames.

use crate::tensor::Tensor;

fn dims4(hidden: &Tensor) -> (usize, usize, usize, usize) {
    let d = hidden.dims();
    assert_eq!(d.len(), 4, "expected [F, C, H, W], got {d:?}");
    (d[0], d[1], d[2], d[3])
}

pub fn spatial_tokens(hidden: &Tensor) -> Vec<Tensor> {
    let (f, c, h, w) = dims4(hidden);
    let plane = h * w;
    let src = hidden.data();
    (0..f)
        .map(|fi| {
            let base = fi * c * plane;
            let mut data = vec![0.0; plane * c];
            for ci in 0..c {
                for p in 0..plane {
                    data[p * c + ci] = src[base + ci * plane + p];
                }
            }
            Tensor::new(vec![plane, c], data).expect("token dims")
        })
        .collect()
}

/// Inverse of [`spatial_tokens`].
pub fn from_spatial_tokens(tokens: &[Tensor], height: usize, width: usize) -> Tensor {
    let plane = height * width;
    let c = tokens[0].dims()[1];
    let f = tokens.len();
    let mut data = vec![0.0; f * c * plane];
    for (fi, tok) in tokens.iter().enumerate() {
        assert_eq!(tok.dims(), &[plane, c]);
        let base = fi * c * plane;
        for p in 0..plane {
            for ci in 0..c {
                data[base + ci * plane + p] = tok.data()[p * c + ci];
            }
        }
    }
    Tensor::new(vec![f, c, height, width], data).expect("hidden dims")
}

pub fn temporal_tokens(hidden: &Tensor) -> Vec<Tensor> {
    let (f, c, h, w) = dims4(hidden);
    let plane = h * w;
    let src = hidden.data();
    (0..plane)
        .map(|p| {
            let mut data = vec![0.0; f * c];
            for fi in 0..f {
                for ci in 0..c {
                    data[fi * c + ci] = src[(fi * c + ci) * plane + p];
                }
            }
            Tensor::new(vec![f, c], data).expect("token dims")
        })
        .collect()
}

/// Inverse of [`temporal_tokens`].
pub fn from_temporal_tokens(tokens: &[Tensor], height: usize, width: usize) -> Tensor {
    let plane = height * width;
    assert_eq!(tokens.len(), plane);
    let (f, c) = (tokens[0].dims()[0], tokens[0].dims()[1]);
    let mut data = vec![0.0; f * c * plane];
    for (p, tok) in tokens.iter().enumerate() {
        for fi in 0..f {
            for ci in 0..c {
                data[(fi * c + ci) * plane + p] = tok.data()[fi * c + ci];
            }
        }
    }
    Tensor::new(vec![f, c, height, width], data).expect("hidden dims")
}
