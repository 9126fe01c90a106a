// Row-independent dense kernels. Every output element is accumulated in a fixed
// index order that does not depend on the batch size, so a row computed inside a
// batch is bitwise equal to the same row computed alone.

const JB: usize = 8;
const RB: usize = 4;

/// `out[r][j] = bias[j] + sum_k x[r][k] * w[k][j]`, summed in increasing `k`.
pub(super) fn affine(x: &[f64], k_dim: usize, w: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = bias.len();
    debug_assert_eq!(w.len(), k_dim * n);
    let rows = if k_dim == 0 { 0 } else { x.len() / k_dim };
    let mut r = 0;
    while r + RB <= rows {
        let xs = &x[r * k_dim..(r + RB) * k_dim];
        let mut j = 0;
        while j + JB <= n {
            let mut acc = [[0.0; JB]; RB];
            for a in acc.iter_mut() {
                a.copy_from_slice(&bias[j..j + JB]);
            }
            for k in 0..k_dim {
                let wk = &w[k * n + j..k * n + j + JB];
                for (q, a) in acc.iter_mut().enumerate() {
                    let xv = xs[q * k_dim + k];
                    for t in 0..JB {
                        a[t] += xv * wk[t];
                    }
                }
            }
            for (q, a) in acc.iter().enumerate() {
                out[(r + q) * n + j..(r + q) * n + j + JB].copy_from_slice(a);
            }
            j += JB;
        }
        for q in 0..RB {
            affine_tail(&xs[q * k_dim..(q + 1) * k_dim], w, bias, j, &mut out[(r + q) * n..(r + q + 1) * n]);
        }
        r += RB;
    }
    for r in r..rows {
        let xr = &x[r * k_dim..(r + 1) * k_dim];
        let or = &mut out[r * n..(r + 1) * n];
        let mut j = 0;
        while j + JB <= n {
            let mut acc = [0.0; JB];
            acc.copy_from_slice(&bias[j..j + JB]);
            for (k, &xv) in xr.iter().enumerate() {
                let wk = &w[k * n + j..k * n + j + JB];
                for t in 0..JB {
                    acc[t] += xv * wk[t];
                }
            }
            or[j..j + JB].copy_from_slice(&acc);
            j += JB;
        }
        affine_tail(xr, w, bias, j, or);
    }
}

fn affine_tail(xr: &[f64], w: &[f64], bias: &[f64], from: usize, or: &mut [f64]) {
    let n = bias.len();
    for jj in from..n {
        let mut a = bias[jj];
        for (k, &xv) in xr.iter().enumerate() {
            a += xv * w[k * n + jj];
        }
        or[jj] = a;
    }
}

/// `dw[k][j] += sum_r x[r][k] * dz[r][j]` and `db[j] += sum_r dz[r][j]`, summed in increasing `r`.
pub(super) fn accumulate_weight_grad(
    x: &[f64],
    k_dim: usize,
    dz: &[f64],
    n: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let rows = dz.len() / n.max(1);
    let mut k = 0;
    while k + RB <= k_dim {
        let mut j = 0;
        while j + JB <= n {
            let mut acc = [[0.0; JB]; RB];
            for (q, a) in acc.iter_mut().enumerate() {
                a.copy_from_slice(&dw[(k + q) * n + j..(k + q) * n + j + JB]);
            }
            for r in 0..rows {
                let xr = &x[r * k_dim + k..r * k_dim + k + RB];
                let dzr = &dz[r * n + j..r * n + j + JB];
                for (q, a) in acc.iter_mut().enumerate() {
                    let xv = xr[q];
                    for t in 0..JB {
                        a[t] += xv * dzr[t];
                    }
                }
            }
            for (q, a) in acc.iter().enumerate() {
                dw[(k + q) * n + j..(k + q) * n + j + JB].copy_from_slice(a);
            }
            j += JB;
        }
        for q in 0..RB {
            weight_grad_tail(x, k_dim, k + q, dz, n, j, rows, dw);
        }
        k += RB;
    }
    for k in k..k_dim {
        let dwk = &mut dw[k * n..(k + 1) * n];
        let mut j = 0;
        while j + JB <= n {
            let mut acc = [0.0; JB];
            acc.copy_from_slice(&dwk[j..j + JB]);
            for r in 0..rows {
                let xv = x[r * k_dim + k];
                let dzr = &dz[r * n + j..r * n + j + JB];
                for t in 0..JB {
                    acc[t] += xv * dzr[t];
                }
            }
            dwk[j..j + JB].copy_from_slice(&acc);
            j += JB;
        }
        weight_grad_tail(x, k_dim, k, dz, n, j, rows, dw);
    }
    for r in 0..rows {
        for (b, g) in db.iter_mut().zip(&dz[r * n..(r + 1) * n]) {
            *b += g;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn weight_grad_tail(x: &[f64], k_dim: usize, k: usize, dz: &[f64], n: usize, from: usize, rows: usize, dw: &mut [f64]) {
    for jj in from..n {
        let mut a = dw[k * n + jj];
        for r in 0..rows {
            a += x[r * k_dim + k] * dz[r * n + jj];
        }
        dw[k * n + jj] = a;
    }
}

/// `dx[r][k] = sum_j dz[r][j] * w[k][j]`.
pub(super) fn input_grad(dz: &[f64], n: usize, w: &[f64], k_dim: usize, dx: &mut [f64]) {
    let rows = dz.len() / n.max(1);
    let mut r = 0;
    while r + RB <= rows {
        let dzs = &dz[r * n..(r + RB) * n];
        for k in 0..k_dim {
            let d = dot_rows(dzs, n, &w[k * n..(k + 1) * n]);
            for q in 0..RB {
                dx[(r + q) * k_dim + k] = d[q];
            }
        }
        r += RB;
    }
    for r in r..rows {
        let dzr = &dz[r * n..(r + 1) * n];
        for k in 0..k_dim {
            dx[r * k_dim + k] = dot(dzr, &w[k * n..(k + 1) * n]);
        }
    }
}

/// `RB` dot products against one shared vector, each in the same order as `dot`.
#[inline]
fn dot_rows(a: &[f64], n: usize, b: &[f64]) -> [f64; RB] {
    let mut acc = [[0.0; 4]; RB];
    let chunks = n / 4;
    for c in 0..chunks {
        let bc = &b[4 * c..4 * c + 4];
        for (q, aq) in acc.iter_mut().enumerate() {
            let ar = &a[q * n + 4 * c..q * n + 4 * c + 4];
            for t in 0..4 {
                aq[t] += ar[t] * bc[t];
            }
        }
    }
    let mut out = [0.0; RB];
    for q in 0..RB {
        let aq = acc[q];
        let mut s = (aq[0] + aq[1]) + (aq[2] + aq[3]);
        for i in 4 * chunks..n {
            s += a[q * n + i] * b[i];
        }
        out[q] = s;
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for t in 0..4 {
            acc[t] += a[4 * c + t] * b[4 * c + t];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_matches_naive() {
        let k = 5;
        let n = 11;
        let x: Vec<f64> = (0..3 * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let b: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        let mut out = vec![0.0; 3 * n];
        affine(&x, k, &w, &b, &mut out);
        for r in 0..3 {
            for j in 0..n {
                let naive: f64 = b[j] + (0..k).map(|kk| x[r * k + kk] * w[kk * n + j]).sum::<f64>();
                assert!((naive - out[r * n + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blocked_rows_equal_single_rows() {
        let (k, n, rows) = (13, 19, 7);
        let x: Vec<f64> = (0..rows * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let b: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        let mut all = vec![0.0; rows * n];
        affine(&x, k, &w, &b, &mut all);
        let mut dx_all = vec![0.0; rows * k];
        input_grad(&all, n, &w, k, &mut dx_all);
        for r in 0..rows {
            let mut one = vec![0.0; n];
            affine(&x[r * k..(r + 1) * k], k, &w, &b, &mut one);
            assert_eq!(one, all[r * n..(r + 1) * n]);
            let mut dx = vec![0.0; k];
            input_grad(&all[r * n..(r + 1) * n], n, &w, k, &mut dx);
            assert_eq!(dx, dx_all[r * k..(r + 1) * k]);
        }
    }

    #[test]
    fn weight_grad_matches_naive() {
        let k = 3;
        let n = 10;
        let rows = 4;
        let x: Vec<f64> = (0..rows * k).map(|i| (i as f64 * 0.3).sin()).collect();
        let dz: Vec<f64> = (0..rows * n).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut dw = vec![0.0; k * n];
        let mut db = vec![0.0; n];
        accumulate_weight_grad(&x, k, &dz, n, &mut dw, &mut db);
        for kk in 0..k {
            for j in 0..n {
                let naive: f64 = (0..rows).map(|r| x[r * k + kk] * dz[r * n + j]).sum();
                assert!((naive - dw[kk * n + j]).abs() < 1e-12);
            }
        }
        let mut dx = vec![0.0; rows * k];
        let w: Vec<f64> = (0..k * n).map(|i| i as f64 * 0.05).collect();
        input_grad(&dz, n, &w, k, &mut dx);
        for r in 0..rows {
            for kk in 0..k {
                let naive: f64 = (0..n).map(|j| dz[r * n + j] * w[kk * n + j]).sum();
                assert!((naive - dx[r * k + kk]).abs() < 1e-12);
            }
        }
    }
}

