//! Straightforward `f64` implementations used as oracles. They share no code
//! with the library.

pub fn conv(
    x: &[f64],
    (b, ci, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    co: usize,
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut out = vec![0.0; b * co * ho * wo];
    for n in 0..b {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for di in 0..k {
                            for dj in 0..k {
                                let (yi, xj) = ((i + di) as isize - pad as isize, (j + dj) as isize - pad as isize);
                                if yi < 0 || xj < 0 || yi >= h as isize || xj >= w as isize {
                                    continue;
                                }
                                let xv = x[((n * ci + c) * h + yi as usize) * w + xj as usize];
                                acc += xv * weight[((o * ci + c) * k + di) * k + dj];
                            }
                        }
                    }
                    out[((n * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    out
}

/// Train-mode batch normalization with the biased batch variance.
pub fn bn_train(x: &[f64], (b, c, h, w): (usize, usize, usize, usize), gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let hw = h * w;
    let m = (b * hw) as f64;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let idx = |n: usize, p: usize| (n * c + ch) * hw + p;
        let mean = (0..b).flat_map(|n| (0..hw).map(move |p| (n, p))).map(|(n, p)| x[idx(n, p)]).sum::<f64>() / m;
        let var = (0..b)
            .flat_map(|n| (0..hw).map(move |p| (n, p)))
            .map(|(n, p)| (x[idx(n, p)] - mean).powi(2))
            .sum::<f64>()
            / m;
        for n in 0..b {
            for p in 0..hw {
                out[idx(n, p)] = gamma[ch] * (x[idx(n, p)] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

pub fn bn_eval(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        for ch in 0..c {
            for p in 0..hw {
                let i = (n * c + ch) * hw + p;
                out[i] = gamma[ch] * (x[i] - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

pub fn leaky(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect()
}

pub fn maxpool(x: &[f64], (b, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        for i in 0..ho {
            for j in 0..wo {
                let at = |di: usize, dj: usize| x[(plane * h + 2 * i + di) * w + 2 * j + dj];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `s·cos(x, W_k)` for every class.
pub fn cosine_logits(x: &[f64], weight: &[f64], n: usize, s: f64) -> Vec<f64> {
    let d = x.len();
    let nx = norm(x);
    (0..n)
        .map(|k| {
            let wk = &weight[k * d..(k + 1) * d];
            s * wk.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / (norm(wk) * nx)
        })
        .collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let t: f64 = e.iter().sum();
    e.into_iter().map(|v| v / t).collect()
}

pub fn cross_entropy(z: &[f64], y: usize) -> f64 {
    -softmax(z)[y].ln()
}

pub fn entropy(z: &[f64]) -> f64 {
    softmax(z).iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

/// `Σ_ij X[c,i,j]·M[i,j]` for a `[C, HW]` block.
pub fn pool(x: &[f64], mask: &[f64]) -> Vec<f64> {
    let hw = mask.len();
    x.chunks(hw).map(|row| row.iter().zip(mask).map(|(a, m)| a * m).sum()).collect()
}

/// Analytic `∂H(softmax(s·cos(x, W)))/∂x`, derived independently:
/// `∂H/∂z_k = −p_k (ln p_k + H)` and
/// `∂z_k/∂x = s (ŵ_k − (ŵ_k·x̂) x̂) / ‖x‖`.
pub fn entropy_grad_x(x: &[f64], weight: &[f64], n: usize, s: f64) -> Vec<f64> {
    let d = x.len();
    let nx = norm(x);
    let xhat: Vec<f64> = x.iter().map(|v| v / nx).collect();
    let z = cosine_logits(x, weight, n, s);
    let p = softmax(&z);
    let h: f64 = p.iter().filter(|&&q| q > 0.0).map(|q| -q * q.ln()).sum();
    let mut g = vec![0.0; d];
    for k in 0..n {
        let dz = if p[k] > 0.0 { -p[k] * (p[k].ln() + h) } else { 0.0 };
        let wk = &weight[k * d..(k + 1) * d];
        let nw = norm(wk);
        let cosk: f64 = wk.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nw;
        for i in 0..d {
            g[i] += dz * s * (wk[i] / nw - cosk * xhat[i]) / nx;
        }
    }
    g
}

/// `x_a = pool(X, M₀ + γ·ΔM(X))` with `ΔM_ij = g·X_ij`.
pub fn adversarial_feature(x: &[f64], c: usize, hw: usize, weight: &[f64], n: usize, s_adv: f64, gamma: f64) -> Vec<f64> {
    let m0 = vec![1.0 / hw as f64; hw];
    let xl = pool(x, &m0);
    let g = entropy_grad_x(&xl, weight, n, s_adv);
    let mask: Vec<f64> = (0..hw)
        .map(|p| m0[p] + gamma * (0..c).map(|ch| g[ch] * x[ch * hw + p]).sum::<f64>())
        .collect();
    pool(x, &mask)
}

/// Central differences of a scalar function.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            v[i] = x[i] + h;
            let up = f(&v);
            v[i] = x[i] - h;
            let down = f(&v);
            v[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
