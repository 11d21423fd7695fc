//! Independent scalar-loop oracles for the test suites.
//!
//! Everything here is written against plain `&[f64]` buffers with explicit
//! dimensions and deliberately shares no code with `frla-core`, so a test
//! comparing the two exercises genuinely separate implementations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Plain ijk triple-loop matrix product: [m×k]·[k×n].
pub fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a[i * k + kk] * b[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Direct six-loop valid cross-correlation.
/// Input [b×c_in×h×w], kernel [c_out×c_in×kh×kw], output [b×c_out×h'×w'].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_oracle(
    input: &[f64],
    kernel: &[f64],
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<f64> {
    let h_out = (h - kh) / stride + 1;
    let w_out = (w - kw) / stride + 1;
    let mut out = vec![0.0; b * c_out * h_out * w_out];
    for bi in 0..b {
        for co in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for u in 0..kh {
                            for v in 0..kw {
                                let iy = oy * stride + u;
                                let ix = ox * stride + v;
                                acc += input[((bi * c_in + ci) * h + iy) * w + ix]
                                    * kernel[((co * c_in + ci) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((bi * c_out + co) * h_out + oy) * w_out + ox] = acc;
                }
            }
        }
    }
    out
}

/// Scalar-loop spatial mean of a [b×h×w×d] map, output [b×d].
pub fn gap_oracle(x: &[f64], b: usize, h: usize, w: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * d];
    for bi in 0..b {
        for di in 0..d {
            let mut acc = 0.0;
            for hi in 0..h {
                for wi in 0..w {
                    acc += x[((bi * h + hi) * w + wi) * d + di];
                }
            }
            out[bi * d + di] = acc / (h * w) as f64;
        }
    }
    out
}

/// Brute-force double-loop batch joint-distribution estimator:
/// J0[x,y] = (1/n)·Σ_i p[i,x]·q[i,y], symmetrized, renormalized to sum 1.
pub fn joint_oracle(p: &[f64], q: &[f64], n: usize, k: usize) -> Vec<f64> {
    assert_eq!(p.len(), n * k);
    assert_eq!(q.len(), n * k);
    let mut j0 = vec![0.0; k * k];
    for x in 0..k {
        for y in 0..k {
            let mut acc = 0.0;
            for i in 0..n {
                acc += p[i * k + x] * q[i * k + y];
            }
            j0[x * k + y] = acc / n as f64;
        }
    }
    let mut j = vec![0.0; k * k];
    for x in 0..k {
        for y in 0..k {
            j[x * k + y] = 0.5 * (j0[x * k + y] + j0[y * k + x]);
        }
    }
    let total: f64 = j.iter().sum();
    for v in &mut j {
        *v /= total;
    }
    j
}

/// Direct-sum mutual information of a k×k joint matrix with marginals taken
/// as row/column sums; logs clamped at `eps`.
pub fn mi_oracle(j: &[f64], k: usize, eps: f64) -> f64 {
    let mut row = vec![0.0; k];
    let mut col = vec![0.0; k];
    for x in 0..k {
        for y in 0..k {
            row[x] += j[x * k + y];
            col[y] += j[x * k + y];
        }
    }
    let mut mi = 0.0;
    for x in 0..k {
        for y in 0..k {
            let cell = j[x * k + y];
            mi += cell * (cell.max(eps).ln() - (row[x] * col[y]).max(eps).ln());
        }
    }
    mi
}

/// Batch mutual information straight from two probability-row streams,
/// composing [`joint_oracle`] and [`mi_oracle`].
pub fn batch_mi_oracle(p: &[f64], q: &[f64], n: usize, k: usize, eps: f64) -> f64 {
    mi_oracle(&joint_oracle(p, q, n, k), k, eps)
}

/// Step-by-step scalar implementation of the patch-probability head:
/// project the feature map, pool it per sample, optionally divide each
/// sample's patch features by the Euclidean norm of its pooled feature,
/// multiply by the class matrix transpose, scale, and softmax over classes.
///
/// `features` is [b×h×w×d_v] (last axis fastest), `projection` is
/// [d_v×d], `class_mat` is [k×d]. Returns [b×h×w×k]. `norm_override`
/// forces the per-sample divisor (1.0 reproduces the variant without
/// norm division).
#[allow(clippy::too_many_arguments)]
pub fn patch_probs_oracle(
    features: &[f64],
    b: usize,
    h: usize,
    w: usize,
    d_v: usize,
    projection: &[f64],
    d: usize,
    class_mat: &[f64],
    k: usize,
    logit_scale: f64,
    divide_by_pooled_norm: bool,
    norm_override: Option<f64>,
) -> Vec<f64> {
    assert_eq!(features.len(), b * h * w * d_v);
    assert_eq!(projection.len(), d_v * d);
    assert_eq!(class_mat.len(), k * d);

    // projected patch features [b×h×w×d]
    let mut proj = vec![0.0; b * h * w * d];
    for p in 0..b * h * w {
        for di in 0..d {
            let mut acc = 0.0;
            for vi in 0..d_v {
                acc += features[p * d_v + vi] * projection[vi * d + di];
            }
            proj[p * d + di] = acc;
        }
    }

    // per-sample pooled projected feature and its Euclidean norm
    let mut norms = vec![1.0; b];
    if divide_by_pooled_norm {
        for bi in 0..b {
            let mut pooled = vec![0.0; d];
            for p in 0..h * w {
                for di in 0..d {
                    pooled[di] += proj[(bi * h * w + p) * d + di];
                }
            }
            for v in &mut pooled {
                *v /= (h * w) as f64;
            }
            let mut sq = 0.0;
            for v in &pooled {
                sq += v * v;
            }
            norms[bi] = sq.sqrt();
        }
    }
    if let Some(forced) = norm_override {
        norms = vec![forced; b];
    }

    // logits against the class matrix, then softmax over k
    let mut out = vec![0.0; b * h * w * k];
    for bi in 0..b {
        for p in 0..h * w {
            let mut logits = vec![0.0; k];
            for (ki, logit) in logits.iter_mut().enumerate() {
                let mut acc = 0.0;
                for di in 0..d {
                    acc += proj[(bi * h * w + p) * d + di] / norms[bi] * class_mat[ki * d + di];
                }
                *logit = logit_scale * acc;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let mut exps = vec![0.0; k];
            for (e, l) in exps.iter_mut().zip(&logits) {
                *e = (l - mx).exp();
                sum += *e;
            }
            for ki in 0..k {
                out[(bi * h * w + p) * k + ki] = exps[ki] / sum;
            }
        }
    }
    out
}

/// Confusion-count accuracy oracle: per-class accuracy in percent plus the
/// unweighted average, from prediction/label index pairs.
pub fn class_accuracy_oracle(preds: &[usize], labels: &[usize], k: usize) -> (Vec<f64>, f64) {
    assert_eq!(preds.len(), labels.len());
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (&p, &y) in preds.iter().zip(labels) {
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let per_class: Vec<f64> = (0..k)
        .map(|c| 100.0 * correct[c] as f64 / total[c] as f64)
        .collect();
    let avg = per_class.iter().sum::<f64>() / k as f64;
    (per_class, avg)
}

/// Uniformly random probability-like rows. When `normalize` is set each row
/// sums to 1 (a proper distribution); otherwise entries are raw positives.
pub fn random_prob_rows(rng: &mut ChaCha8Rng, n: usize, k: usize, normalize: bool) -> Vec<f64> {
    let mut rows = vec![0.0; n * k];
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..k {
            let v: f64 = rng.random_range(1e-3..1.0);
            rows[i * k + j] = v;
            sum += v;
        }
        if normalize {
            for j in 0..k {
                rows[i * k + j] /= sum;
            }
        }
    }
    rows
}

/// Asserts elementwise closeness with an absolute tolerance.
pub fn assert_close(actual: &[f64], expected: &[f64], tol: f64, what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}: length mismatch");
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "{what}: index {i}: {a} vs {e} (|diff| = {})",
            (a - e).abs()
        );
    }
}
