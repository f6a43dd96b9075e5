//! Dense layer and softmax cross-entropy, generic over the float type so the
//! gradient can be checked in double precision.

use num_traits::Float;

/// `out = W x + b`, `W` row-major `out.len() × x.len()`.
pub fn dense_forward<F: Float>(w: &[F], b: &[F], x: &[F], out: &mut [F]) {
    let n_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        *y = row.iter().zip(x).fold(b[o], |acc, (&wi, &xi)| acc + wi * xi);
    }
}

/// Accumulates `dW += dy xᵀ`, `db += dy` and, when given, writes `dx = Wᵀ dy`.
pub fn dense_backward<F: Float>(w: &[F], x: &[F], dy: &[F], dw: &mut [F], db: &mut [F], dx: Option<&mut [F]>) {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        db[o] = db[o] + g;
        let row = &mut dw[o * n_in..(o + 1) * n_in];
        for (d, &xi) in row.iter_mut().zip(x) {
            *d = *d + g * xi;
        }
    }
    if let Some(dx) = dx {
        for (i, d) in dx.iter_mut().enumerate() {
            *d = dy.iter().enumerate().fold(F::zero(), |acc, (o, &g)| acc + w[o * n_in + i] * g);
        }
    }
}

/// Loss and `∂loss/∂logits` for one sample.
pub fn softmax_cross_entropy<F: Float>(logits: &[F], label: usize) -> (F, Vec<F>) {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().copied().fold(F::zero(), |a, b| a + b);
    let loss = sum.ln() - (logits[label] - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| e / sum - if i == label { F::one() } else { F::zero() })
        .collect();
    (loss, grad)
}

pub fn argmax<F: Float>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
