//! Independent loop oracles shared by the integration tests.
#![allow(dead_code)]

use lordnet::lordnet::LordFactorWeights;
use lordnet::Field;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Field {
    Field::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn random_factors(c: usize, r: usize, ins: &[usize], outs: &[usize], rng: &mut ChaCha8Rng) -> LordFactorWeights {
    LordFactorWeights {
        eta: random(&[c, r], rng),
        factors: ins.iter().zip(outs).map(|(&i, &o)| random(&[c, r, i, o], rng)).collect(),
    }
}

/// `W[c, m, n]` built entry by entry from the factors, spatial indices row-major.
pub fn dense_weight(p: &LordFactorWeights) -> Field {
    let (c, r) = (p.eta.shape()[0], p.eta.shape()[1]);
    let ins: Vec<usize> = p.factors.iter().map(|a| a.shape()[2]).collect();
    let outs: Vec<usize> = p.factors.iter().map(|a| a.shape()[3]).collect();
    let unravel = |mut k: usize, dims: &[usize]| {
        let mut ix = vec![0; dims.len()];
        for d in (0..dims.len()).rev() {
            ix[d] = k % dims[d];
            k /= dims[d];
        }
        ix
    };
    let n: usize = ins.iter().product();
    let m: usize = outs.iter().product();
    let mut w = Field::zeros(&[c, m, n]);
    for ch in 0..c {
        for mo in 0..m {
            let o = unravel(mo, &outs);
            for ni in 0..n {
                let i = unravel(ni, &ins);
                let mut s = 0.0;
                for rr in 0..r {
                    let mut prod = p.eta.get(&[ch, rr]);
                    for (k, a) in p.factors.iter().enumerate() {
                        prod *= a.get(&[ch, rr, i[k], o[k]]);
                    }
                    s += prod;
                }
                w.set(&[ch, mo, ni], s);
            }
        }
    }
    w
}

/// `Y[c, m] = Σ_n W[c, m, n] X[c, n]`, reshaped to `out_shape`.
pub fn dense_apply(x: &Field, w: &Field, out_shape: &[usize]) -> Field {
    let (c, m, n) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(x.len(), c * n);
    let mut y = vec![0.0; c * m];
    for ch in 0..c {
        for mo in 0..m {
            y[ch * m + mo] = (0..n).map(|ni| w.data()[(ch * m + mo) * n + ni] * x.data()[ch * n + ni]).sum();
        }
    }
    Field::new(out_shape.to_vec(), y).unwrap()
}

/// Dense `-∇²_h` on the interior unknowns of an `n × n` Dirichlet grid, row-major over `(i, j)`.
pub fn dirichlet_matrix(n: usize) -> Vec<Vec<f64>> {
    let m = n - 2;
    let h2 = ((n - 1) as f64).powi(2);
    let mut a = vec![vec![0.0; m * m]; m * m];
    for i in 0..m {
        for j in 0..m {
            let k = i * m + j;
            a[k][k] = 4.0 * h2;
            if i > 0 {
                a[k][k - m] = -h2;
            }
            if i + 1 < m {
                a[k][k + m] = -h2;
            }
            if j > 0 {
                a[k][k - 1] = -h2;
            }
            if j + 1 < m {
                a[k][k + 1] = -h2;
            }
        }
    }
    a
}

/// Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}
