//! Search for ternary bilinear matrix-multiplication algorithms.
//!
//! A rank-`r` algorithm for `n × n` products is a triple `(W_a, W_b, W_c)`
//! with `vec(AB) = W_c [(W_b vec B) ⊙ (W_a vec A)]`, `vec` stacking columns.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::quantize::{ternarize, TernaryMatrix};

/// The `n² × n² × n²` matrix-multiplication tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatMulTensor {
    pub n: usize,
    entries: Vec<u8>,
}

impl MatMulTensor {
    pub fn new(n: usize) -> Self {
        let d = n * n;
        let mut entries = vec![0u8; d * d * d];
        // C[r, c] += A[r, t] B[t, c]; vec index of (row, col) is col·n + row.
        for row in 0..n {
            for col in 0..n {
                for t in 0..n {
                    let i = col * n + row;
                    let k = t * n + row;
                    let l = col * n + t;
                    entries[(i * d + k) * d + l] = 1;
                }
            }
        }
        Self { n, entries }
    }

    pub fn dim(&self) -> usize {
        self.n * self.n
    }

    pub fn get(&self, i: usize, k: usize, l: usize) -> u8 {
        let d = self.dim();
        self.entries[(i * d + k) * d + l]
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }
}

/// A candidate bilinear algorithm, stored as plain integer rows so that
/// malformed input reaches [`verify_exact`] and is rejected there.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BilinearSolution {
    pub n: usize,
    pub r: usize,
    #[serde(rename = "W_a")]
    pub w_a: Vec<Vec<i64>>,
    #[serde(rename = "W_b")]
    pub w_b: Vec<Vec<i64>>,
    #[serde(rename = "W_c")]
    pub w_c: Vec<Vec<i64>>,
    pub exact: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restart_index: Option<usize>,
}

fn rows_of(m: &[&[i64]]) -> Vec<Vec<i64>> {
    m.iter().map(|r| r.to_vec()).collect()
}

impl BilinearSolution {
    /// Builds a solution and fills `exact` from the verifier.
    pub fn new(n: usize, w_a: Vec<Vec<i64>>, w_b: Vec<Vec<i64>>, w_c: Vec<Vec<i64>>) -> Result<Self> {
        let mut sol = Self { n, r: w_a.len(), w_a, w_b, w_c, exact: false, seed: None, restart_index: None };
        sol.exact = verify_exact(&sol)?;
        Ok(sol)
    }

    /// Strassen's classical rank-7 algorithm.
    pub fn strassen() -> Self {
        Self::new(
            2,
            rows_of(&[&[1, 0, 0, 1], &[0, 1, 0, 1], &[1, 0, 0, 0], &[0, 0, 0, 1], &[1, 0, 1, 0], &[-1, 1, 0, 0], &[0, 0, 1, -1]]),
            rows_of(&[&[1, 0, 0, 1], &[1, 0, 0, 0], &[0, 0, 1, -1], &[-1, 1, 0, 0], &[0, 0, 0, 1], &[1, 0, 1, 0], &[0, 1, 0, 1]]),
            rows_of(&[&[1, 0, 0, 1, -1, 0, 1], &[0, 1, 0, 1, 0, 0, 0], &[0, 0, 1, 0, 1, 0, 0], &[1, -1, 1, 0, 0, 1, 0]]),
        )
        .expect("bundled fixture is well formed")
    }

    /// A rank-7 ternary algorithm different from Strassen's, as found by
    /// the SPN search.
    pub fn learned_fixture() -> Self {
        Self::new(
            2,
            rows_of(&[&[-1, -1, 0, 0], &[0, 0, 0, 1], &[-1, -1, 1, 1], &[-1, 0, 1, 0], &[-1, -1, 1, 0], &[0, 0, 1, 0], &[0, -1, 0, 0]]),
            rows_of(&[&[-1, -1, 0, 0], &[0, 0, 0, 1], &[0, 1, 0, 0], &[1, 0, 1, 0], &[-1, -1, -1, 0], &[1, 1, 1, 1], &[0, 0, -1, 0]]),
            rows_of(&[&[1, 0, 0, -1, -1, 0, 1], &[0, 0, 1, 1, 1, 0, -1], &[-1, 0, 0, 0, 1, 1, -1], &[0, 1, 0, 0, 0, 0, 1]]),
        )
        .expect("bundled fixture is well formed")
    }

    /// Schoolbook algorithm with `r = n³`.
    pub fn naive(n: usize) -> Self {
        let d = n * n;
        let (mut wa, mut wb, mut wc) = (Vec::new(), Vec::new(), vec![vec![0i64; n * n * n]; d]);
        let mut j = 0;
        for col in 0..n {
            for row in 0..n {
                for t in 0..n {
                    let mut a = vec![0; d];
                    a[t * n + row] = 1;
                    let mut b = vec![0; d];
                    b[col * n + t] = 1;
                    wa.push(a);
                    wb.push(b);
                    wc[col * n + row][j] = 1;
                    j += 1;
                }
            }
        }
        Self::new(n, wa, wb, wc).expect("naive construction is well formed")
    }

    pub fn matrices(&self) -> Result<(TernaryMatrix, TernaryMatrix, TernaryMatrix)> {
        check_shapes(self)?;
        let conv = |m: &[Vec<i64>]| -> Result<TernaryMatrix> {
            let rows = m.len();
            let cols = m.first().map_or(0, Vec::len);
            TernaryMatrix::new(rows, cols, m.iter().flatten().map(|&v| v as i8).collect(), None)
        };
        Ok((conv(&self.w_a)?, conv(&self.w_b)?, conv(&self.w_c)?))
    }

    /// Applies the algorithm to `n × n` row-major matrices in `i64`.
    pub fn apply_i64(&self, a: &[i64], b: &[i64]) -> Result<Vec<i64>> {
        check_shapes(self)?;
        let n = self.n;
        let col_stack = |m: &[i64]| -> Vec<i64> { (0..n * n).map(|v| m[(v % n) * n + v / n]).collect() };
        let (va, vb) = (col_stack(a), col_stack(b));
        let h: Vec<i64> = (0..self.r)
            .map(|j| {
                let x: i64 = self.w_a[j].iter().zip(&va).map(|(w, v)| w * v).sum();
                let y: i64 = self.w_b[j].iter().zip(&vb).map(|(w, v)| w * v).sum();
                x * y
            })
            .collect();
        let vc: Vec<i64> = self.w_c.iter().map(|row| row.iter().zip(&h).map(|(w, v)| w * v).sum()).collect();
        Ok((0..n * n).map(|idx| vc[(idx % n) * n + idx / n]).collect())
    }
}

fn check_shapes(sol: &BilinearSolution) -> Result<()> {
    let d = sol.n * sol.n;
    let bad = |m: &[Vec<i64>], rows: usize, cols: usize| m.len() != rows || m.iter().any(|row| row.len() != cols);
    if sol.n == 0 || sol.r == 0 {
        return Err(Error::Validation("n and r must be positive".into()));
    }
    if bad(&sol.w_a, sol.r, d) || bad(&sol.w_b, sol.r, d) || bad(&sol.w_c, d, sol.r) {
        return Err(Error::Validation(format!(
            "factor shapes do not match n = {}, r = {} (expected W_a, W_b {}x{d} and W_c {d}x{})",
            sol.n, sol.r, sol.r, sol.r
        )));
    }
    for (name, m) in [("W_a", &sol.w_a), ("W_b", &sol.w_b), ("W_c", &sol.w_c)] {
        if let Some(v) = m.iter().flatten().find(|v| !(-1..=1).contains(*v)) {
            return Err(Error::Validation(format!("{name} has non-ternary entry {v}")));
        }
    }
    Ok(())
}

/// Exact integer check of `Σ_j W_c[i,j] W_a[j,k] W_b[j,l] == M[i,k,l]`.
pub fn verify_exact(sol: &BilinearSolution) -> Result<bool> {
    check_shapes(sol)?;
    let m = MatMulTensor::new(sol.n);
    let d = m.dim();
    for i in 0..d {
        for k in 0..d {
            for l in 0..d {
                let s: i64 = (0..sol.r).map(|j| sol.w_c[i][j] * sol.w_a[j][k] * sol.w_b[j][l]).sum();
                if s != m.get(i, k, l) as i64 {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Training pairs `(vec A, vec B, vec AB)` in column-stacked layout.
#[derive(Clone, Debug)]
pub struct PairDataset {
    pub n: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.a.len() / (self.n * self.n)
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// `count` pairs with i.i.d. uniform `[−1, 1]` entries; the targets are
/// exact products.
pub fn gen_dataset(count: usize, n: usize, seed: u64) -> Result<PairDataset> {
    if count == 0 || n == 0 {
        return Err(config_err!("dataset needs count > 0 and n > 0"));
    }
    let d = n * n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let dist = Uniform::new_inclusive(-1.0f64, 1.0).expect("valid range");
    let mut ds = PairDataset { n, a: Vec::with_capacity(count * d), b: Vec::with_capacity(count * d), c: Vec::with_capacity(count * d) };
    for _ in 0..count {
        let a: Vec<f64> = (0..d).map(|_| dist.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..d).map(|_| dist.sample(&mut rng)).collect();
        // Both in column-stacked order: a[col·n + row].
        for col in 0..n {
            for row in 0..n {
                ds.c.push((0..n).map(|t| a[t * n + row] * b[col * n + t]).sum());
            }
        }
        ds.a.extend(a);
        ds.b.extend(b);
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchPhase {
    pub epochs: usize,
    pub lr: f64,
    pub quantized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchPlan {
    pub pairs: usize,
    pub batch: usize,
    pub momentum: f64,
    pub phases: Vec<SearchPhase>,
    /// Multiplier on the per-sample squared error. `None` means `1/n²`,
    /// i.e. the mean squared error over the entries of `C`.
    pub loss_scale: Option<f64>,
    /// Forward the bare ternary pattern (α = 1) in quantized phases.
    pub fold_alpha: bool,
}

impl Default for SearchPlan {
    fn default() -> Self {
        Self {
            pairs: 100_000,
            batch: 4,
            momentum: 0.9,
            phases: vec![
                SearchPhase { epochs: 1, lr: 0.1, quantized: false },
                SearchPhase { epochs: 1, lr: 0.001, quantized: true },
            ],
            loss_scale: None,
            fold_alpha: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchInit {
    Uniform,
    /// Start from the schoolbook algorithm; needs `r = n³`.
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub restart_index: usize,
    pub seed: u64,
    /// Mean training loss over the last epoch.
    pub final_loss: f64,
    /// Mean squared error of the ternarized algorithm on the training set.
    pub ternary_loss: f64,
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub n: usize,
    pub r: usize,
    pub seed: u64,
    pub restarts: Vec<RestartOutcome>,
    pub solution: Option<BilinearSolution>,
}

impl SearchReport {
    pub fn successes(&self) -> usize {
        self.restarts.iter().filter(|o| o.exact).count()
    }
}

struct Factors {
    w: [Vec<f64>; 3],
}

fn ternary_view(w: &[f64], fold: bool) -> Result<Vec<f64>> {
    let t = ternarize(w)?;
    let alpha = if fold { 1.0 } else { t.alpha };
    Ok(t.pattern.iter().map(|&e| e as f64 * alpha).collect())
}

/// Forward for one sample; returns `(x, y, h, c)`.
fn forward(q: &[Vec<f64>; 3], r: usize, d: usize, va: &[f64], vb: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let x: Vec<f64> = (0..r).map(|j| (0..d).map(|k| q[0][j * d + k] * va[k]).sum()).collect();
    let y: Vec<f64> = (0..r).map(|j| (0..d).map(|l| q[1][j * d + l] * vb[l]).sum()).collect();
    let h: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let c: Vec<f64> = (0..d).map(|i| (0..r).map(|j| q[2][i * r + j] * h[j]).sum()).collect();
    (x, y, h, c)
}

fn ternary_mse(f: &Factors, ds: &PairDataset, r: usize) -> Result<f64> {
    let d = ds.n * ds.n;
    let q = [ternary_view(&f.w[0], true)?, ternary_view(&f.w[1], true)?, ternary_view(&f.w[2], true)?];
    let mut tot = 0.0;
    for t in 0..ds.len() {
        let (_, _, _, c) = forward(&q, r, d, &ds.a[t * d..][..d], &ds.b[t * d..][..d]);
        tot += c.iter().zip(&ds.c[t * d..][..d]).map(|(p, y)| (p - y).powi(2)).sum::<f64>();
    }
    Ok(tot / (ds.len() * d) as f64)
}

fn run_restart(
    n: usize,
    r: usize,
    ds: &PairDataset,
    plan: &SearchPlan,
    init: SearchInit,
    seed: u64,
) -> Result<(RestartOutcome, BilinearSolution)> {
    let d = n * n;
    let mut f = match init {
        SearchInit::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = Uniform::new_inclusive(-1.0f64, 1.0).expect("valid range");
            let mut draw = |len: usize| (0..len).map(|_| dist.sample(&mut rng)).collect::<Vec<f64>>();
            Factors { w: [draw(r * d), draw(r * d), draw(d * r)] }
        }
        SearchInit::Naive => {
            if r != n * n * n {
                return Err(config_err!("naive initialization needs r = n³ = {}", n * n * n));
            }
            let s = BilinearSolution::naive(n);
            let flat = |m: &[Vec<i64>]| m.iter().flatten().map(|&v| v as f64).collect::<Vec<f64>>();
            Factors { w: [flat(&s.w_a), flat(&s.w_b), flat(&s.w_c)] }
        }
    };
    let scale = plan.loss_scale.unwrap_or(1.0 / d as f64);
    let bs = plan.batch;
    let steps = ds.len() / bs;
    let mut vel = [vec![0.0; r * d], vec![0.0; r * d], vec![0.0; d * r]];
    let mut last_loss = f64::NAN;
    for phase in &plan.phases {
        for _ in 0..phase.epochs {
            let mut tot = 0.0;
            for st in 0..steps {
                let q = if phase.quantized {
                    [
                        ternary_view(&f.w[0], plan.fold_alpha)?,
                        ternary_view(&f.w[1], plan.fold_alpha)?,
                        ternary_view(&f.w[2], plan.fold_alpha)?,
                    ]
                } else {
                    f.w.clone()
                };
                let mut g = [vec![0.0; r * d], vec![0.0; r * d], vec![0.0; d * r]];
                for t in st * bs..(st + 1) * bs {
                    let va = &ds.a[t * d..][..d];
                    let vb = &ds.b[t * d..][..d];
                    let (x, y, h, c) = forward(&q, r, d, va, vb);
                    let mut dh = vec![0.0; r];
                    for i in 0..d {
                        let e = c[i] - ds.c[t * d + i];
                        tot += scale * e * e / bs as f64;
                        let dc = scale * 2.0 * e / bs as f64;
                        for j in 0..r {
                            g[2][i * r + j] += dc * h[j];
                            dh[j] += q[2][i * r + j] * dc;
                        }
                    }
                    for j in 0..r {
                        for k in 0..d {
                            g[0][j * d + k] += dh[j] * y[j] * va[k];
                            g[1][j * d + k] += dh[j] * x[j] * vb[k];
                        }
                    }
                }
                for (w, (v, gr)) in f.w.iter_mut().zip(vel.iter_mut().zip(&g)) {
                    for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(gr) {
                        *vi = plan.momentum * *vi + gi;
                        *wi -= phase.lr * *vi;
                    }
                }
            }
            last_loss = tot / steps as f64;
            if !last_loss.is_finite() {
                break;
            }
        }
    }
    let finite = f.w.iter().flatten().all(|v| v.is_finite());
    let to_rows = |w: &[f64], rows: usize, cols: usize| -> Result<Vec<Vec<i64>>> {
        let t = ternarize(w)?;
        Ok(t.pattern.chunks(cols).take(rows).map(|c| c.iter().map(|&e| e as i64).collect()).collect())
    };
    let (sol, ternary_loss) = if finite {
        let mut sol = BilinearSolution::new(n, to_rows(&f.w[0], r, d)?, to_rows(&f.w[1], r, d)?, to_rows(&f.w[2], d, r)?)?;
        sol.seed = Some(seed);
        (sol, ternary_mse(&f, ds, r)?)
    } else {
        let zero = |rows: usize, cols: usize| vec![vec![0i64; cols]; rows];
        let mut sol = BilinearSolution::new(n, zero(r, d), zero(r, d), zero(d, r))?;
        sol.seed = Some(seed);
        (sol, f64::INFINITY)
    };
    let outcome = RestartOutcome {
        restart_index: 0,
        seed,
        final_loss: last_loss,
        ternary_loss,
        exact: sol.exact,
    };
    Ok((outcome, sol))
}

/// Runs `restarts` independent trainings with seeds `seed + i` in parallel.
/// The lowest-index exact algorithm is returned; the outcome list is
/// independent of thread count.
pub fn search(n: usize, r: usize, restarts: usize, seed: u64, plan: &SearchPlan, init: SearchInit) -> Result<SearchReport> {
    if n == 0 || r == 0 {
        return Err(config_err!("n and r must be positive"));
    }
    if restarts == 0 {
        return Err(config_err!("at least one restart is required"));
    }
    if plan.batch == 0 || plan.pairs < plan.batch {
        return Err(config_err!("need batch > 0 and pairs ≥ batch"));
    }
    let ds = gen_dataset(plan.pairs, n, seed)?;
    let results: Vec<(RestartOutcome, BilinearSolution)> = (0..restarts)
        .into_par_iter()
        .map(|i| {
            let (mut o, mut s) = run_restart(n, r, &ds, plan, init, seed.wrapping_add(i as u64))?;
            o.restart_index = i;
            s.restart_index = Some(i);
            log::debug!("restart {i}: loss {:.3e}, ternary mse {:.3e}, exact {}", o.final_loss, o.ternary_loss, o.exact);
            Ok((o, s))
        })
        .collect::<Result<_>>()?;
    let solution = results.iter().find(|(o, _)| o.exact).map(|(_, s)| s.clone());
    Ok(SearchReport { n, r, seed, restarts: results.into_iter().map(|(o, _)| o).collect(), solution })
}
