//! Shared test oracles, independent of the library's attention path:
//! a naive O(n²) dense multi-head attention with grouped-query heads,
//! rotary rotation, and an arbitrary boolean mask.

use hiba_core::autodiff::Mask;

pub struct OracleProjections<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
}

fn rope_rotate_row(row: &mut [f64], pos: usize, base: f64) {
    let dh = row.len();
    for j in 0..dh / 2 {
        let theta = pos as f64 * base.powf(-2.0 * j as f64 / dh as f64);
        let (s, c) = (theta.sin(), theta.cos());
        let (x0, x1) = (row[2 * j], row[2 * j + 1]);
        row[2 * j] = x0 * c - x1 * s;
        row[2 * j + 1] = x0 * s + x1 * c;
    }
}

/// Dense reference attention over `x [n, d]`.
///
/// `mask.is_blocked(i, j)` removes pair (i→j) entirely (probability 0);
/// `positions[i]` is the rotary position of token i.
#[allow(clippy::too_many_arguments)]
pub fn dense_attention_oracle(
    x: &[f64],
    n: usize,
    d: usize,
    h_q: usize,
    h_kv: usize,
    proj: &OracleProjections,
    mask: &Mask,
    positions: &[usize],
) -> Vec<f64> {
    assert_eq!(x.len(), n * d);
    assert_eq!(positions.len(), n);
    let dh = d / h_q;
    let group = h_q / h_kv;
    let scale = 1.0 / (dh as f64).sqrt();

    // Projections: wq [d, h_q·dh], wk/wv [d, h_kv·dh], wo [h_q·dh, d].
    let project = |w: &[f64], heads: usize| -> Vec<f64> {
        let cols = heads * dh;
        let mut out = vec![0.0; n * cols];
        for i in 0..n {
            for c in 0..cols {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += x[i * d + k] * w[k * cols + c];
                }
                out[i * cols + c] = acc;
            }
        }
        out
    };
    let mut q = project(proj.wq, h_q);
    let mut k = project(proj.wk, h_kv);
    let v = project(proj.wv, h_kv);

    for i in 0..n {
        for h in 0..h_q {
            rope_rotate_row(&mut q[i * h_q * dh + h * dh..i * h_q * dh + (h + 1) * dh], positions[i], 10_000.0);
        }
        for h in 0..h_kv {
            rope_rotate_row(&mut k[i * h_kv * dh + h * dh..i * h_kv * dh + (h + 1) * dh], positions[i], 10_000.0);
        }
    }

    let mut ctx = vec![0.0; n * h_q * dh];
    for h in 0..h_q {
        let kvh = h / group;
        for i in 0..n {
            let qrow = &q[i * h_q * dh + h * dh..i * h_q * dh + (h + 1) * dh];
            let mut weights = Vec::new();
            let mut visible = Vec::new();
            for j in 0..n {
                if mask.is_blocked(i, j) {
                    continue;
                }
                let krow = &k[j * h_kv * dh + kvh * dh..j * h_kv * dh + (kvh + 1) * dh];
                let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                weights.push(dot * scale);
                visible.push(j);
            }
            assert!(!visible.is_empty(), "oracle row {i} fully masked");
            let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for w in weights.iter_mut() {
                *w = (*w - max).exp();
                sum += *w;
            }
            for (w, &j) in weights.iter().zip(&visible) {
                let p = w / sum;
                let vrow = &v[j * h_kv * dh + kvh * dh..j * h_kv * dh + (kvh + 1) * dh];
                for (c, &vv) in vrow.iter().enumerate() {
                    ctx[i * h_q * dh + h * dh + c] += p * vv;
                }
            }
        }
    }

    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            let mut acc = 0.0;
            for k in 0..h_q * dh {
                acc += ctx[i * h_q * dh + k] * proj.wo[k * d + c];
            }
            out[i * d + c] = acc;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
