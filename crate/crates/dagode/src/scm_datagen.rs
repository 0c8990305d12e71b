//! Ground-truth data generation: linear SEMs (equal-variance Gaussian or
//! non-Gaussian noise), nonlinear Gaussian ANMs with GP-sampled functions,
//! and an epidemic ODE as a known physical system.

use std::collections::BTreeMap;

use crate::graphs::Dag;
use crate::ndtensor::{Matrix, SplitRng};
use crate::odeflow::{self, Drift, JacobianDrift, Method};
use crate::{Error, Result};

/// Observation matrix with provenance.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// n x d observations.
    pub x: Matrix,
    pub names: Vec<String>,
    pub truth: Option<Dag>,
    pub meta: DatasetMeta,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub params: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(x: Matrix, names: Vec<String>, truth: Option<Dag>, meta: DatasetMeta) -> Result<Self> {
        if x.rows() < 1 {
            return Err(Error::Contract("dataset needs at least one row".into()));
        }
        if names.len() != x.cols() {
            return Err(Error::Contract("column name count mismatch".into()));
        }
        if !x.all_finite() {
            return Err(Error::Numeric("dataset contains non-finite entries".into()));
        }
        if let Some(t) = &truth {
            if t.node_count() != x.cols() {
                return Err(Error::Contract("truth graph node count mismatch".into()));
            }
        }
        Ok(Dataset { x, names, truth, meta })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    /// CSV with a header row; floats printed in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = self.names.join(",");
        out.push('\n');
        for i in 0..self.n() {
            let row: Vec<String> = self.x.row(i).iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parse a headered numeric CSV. Line numbers are 1-based including the
    /// header.
    pub fn from_csv(text: &str) -> Result<Dataset> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
        let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        if names.is_empty() || names.iter().any(|n| n.is_empty()) {
            return Err(Error::Parse { line: 1, msg: "bad header row".into() });
        }
        let d = names.len();
        let mut data = Vec::new();
        let mut n = 0;
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != d {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected {d} cells, found {}", cells.len()),
                });
            }
            for c in cells {
                let v: f64 = c.trim().parse().map_err(|_| Error::Parse {
                    line: idx + 1,
                    msg: format!("non-numeric cell {c:?}"),
                })?;
                data.push(v);
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Parse { line: 1, msg: "no data rows".into() });
        }
        Dataset::new(
            Matrix::from_vec(n, d, data),
            names,
            None,
            DatasetMeta { generator: "file".into(), ..Default::default() },
        )
    }
}

/// Noise families for the linear SEM generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    /// Unit-variance Gaussian at every node (the equal-variance
    /// identifiable regime).
    GaussianEqualVariance,
    /// Unit-variance uniform (non-Gaussian LiNGAM regime).
    Uniform,
    /// Unit-variance Laplace (non-Gaussian LiNGAM regime).
    Laplace,
}

impl Noise {
    fn sample(self, rng: &mut SplitRng) -> f64 {
        match self {
            Noise::GaussianEqualVariance => rng.normal(),
            Noise::Uniform => rng.uniform_in(-3f64.sqrt(), 3f64.sqrt()),
            Noise::Laplace => rng.laplace(1.0 / 2f64.sqrt()),
        }
    }
}

fn default_names(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("X{i}")).collect()
}

/// Linear SEM over a DAG: X_j = sum_k b_jk X_k + N_j with edge weights drawn
/// uniformly from +/-[0.5, 2.0] and variables filled in topological order.
pub fn gen_linear_sem(g: &Dag, n: usize, noise: Noise, rng: &mut SplitRng) -> Result<Dataset> {
    if n < 1 {
        return Err(Error::Contract("gen_linear_sem requires n >= 1".into()));
    }
    let d = g.node_count();
    let mut weights: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &(p, c) in g.edges() {
        let mag = rng.uniform_in(0.5, 2.0);
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        weights.insert((p, c), sign * mag);
    }
    let mut col_rngs: Vec<SplitRng> = (0..d).map(|_| rng.split()).collect();
    let mut x = Matrix::zeros(n, d);
    for &node in g.order() {
        let parents = g.parents(node);
        let crng = &mut col_rngs[node];
        for i in 0..n {
            let mut v = noise.sample(crng);
            for &p in &parents {
                v += weights[&(p, node)] * x.get(i, p);
            }
            x.set(i, node, v);
        }
    }
    Dataset::new(
        x,
        default_names(d),
        Some(g.clone()),
        DatasetMeta {
            generator: "linear_sem".into(),
            seed: 0,
            params: BTreeMap::from([
                ("noise".into(), format!("{noise:?}")),
                ("n".into(), n.to_string()),
            ]),
        },
    )
}

/// Nonlinear Gaussian ANM: root nodes are unit Gaussian; each non-root is an
/// exact joint GP draw over its realized parent values (unit-bandwidth RBF
/// kernel, unit signal variance) plus unit Gaussian noise.
pub fn gen_gp_anm(g: &Dag, n: usize, rng: &mut SplitRng) -> Result<Dataset> {
    if n < 1 {
        return Err(Error::Contract("gen_gp_anm requires n >= 1".into()));
    }
    if n > 20_000 {
        return Err(Error::Contract("gen_gp_anm caps n at 20000 (n x n Cholesky)".into()));
    }
    let d = g.node_count();
    let mut col_rngs: Vec<SplitRng> = (0..d).map(|_| rng.split()).collect();
    let mut x = Matrix::zeros(n, d);
    for &node in g.order() {
        let parents = g.parents(node);
        let crng = &mut col_rngs[node];
        if parents.is_empty() {
            for i in 0..n {
                x.set(i, node, crng.normal());
            }
            continue;
        }
        let f = gp_draw(&x, &parents, n, crng).map_err(|e| match e {
            Error::Decomposition(msg) => {
                Error::Decomposition(format!("GP kernel for node {node}: {msg}"))
            }
            other => other,
        })?;
        for i in 0..n {
            x.set(i, node, f[i] + crng.normal());
        }
    }
    Dataset::new(
        x,
        default_names(d),
        Some(g.clone()),
        DatasetMeta {
            generator: "gp_anm".into(),
            seed: 0,
            params: BTreeMap::from([("n".into(), n.to_string())]),
        },
    )
}

/// Joint GP draw at the realized parent rows: f ~ N(0, K) with
/// k(u, v) = exp(-||u - v||^2 / 2).
fn gp_draw(x: &Matrix, parents: &[usize], n: usize, rng: &mut SplitRng) -> Result<Vec<f64>> {
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for l in 0..=i {
            let mut sq = 0.0;
            for &p in parents {
                let diff = x.get(i, p) - x.get(l, p);
                sq += diff * diff;
            }
            let v = (-0.5 * sq).exp();
            k.set(i, l, v);
            k.set(l, i, v);
        }
    }
    let l = k.cholesky()?;
    let eps: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let mut f = vec![0.0; n];
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..=i {
            s += l.get(i, j) * eps[j];
        }
        f[i] = s;
    }
    Ok(f)
}

/// Rates of the susceptible/infected/removed epidemic system, per unit time.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct EpidemicParams {
    /// Constant immigration rate.
    pub a: f64,
    /// Natural death rate.
    pub d_rate: f64,
    /// Transmission coefficient.
    pub beta: f64,
    /// Disease-related death rate.
    pub alpha: f64,
    /// Recovery rate.
    pub gamma: f64,
    /// Loss-of-immunity rate.
    pub sigma: f64,
}

impl EpidemicParams {
    /// Illustrative defaults for structure-readout demos.
    pub fn demo() -> Self {
        EpidemicParams { a: 0.5, d_rate: 0.05, beta: 0.01, alpha: 0.1, gamma: 0.05, sigma: 0.02 }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.a, self.d_rate, self.beta, self.alpha, self.gamma, self.sigma];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Contract("epidemic rates must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// The epidemic right-hand side as a drift with a hand-coded Jacobian.
///
///   dX/dt = A - d X - beta X Y + sigma Z
///   dY/dt = beta X Y - (gamma + alpha + d) Y
///   dZ/dt = gamma Y - (sigma + d) Z
#[derive(Debug, Clone)]
pub struct EpidemicRhs(pub EpidemicParams);

impl Drift for EpidemicRhs {
    fn dim(&self) -> usize {
        3
    }

    fn eval(&self, _t: f64, y: &[f64], out: &mut [f64]) {
        let p = &self.0;
        let (x, yy, z) = (y[0], y[1], y[2]);
        out[0] = p.a - p.d_rate * x - p.beta * x * yy + p.sigma * z;
        out[1] = p.beta * x * yy - (p.gamma + p.alpha + p.d_rate) * yy;
        out[2] = p.gamma * yy - (p.sigma + p.d_rate) * z;
    }
}

impl JacobianDrift for EpidemicRhs {
    fn jacobian(&self, _t: f64, y: &[f64]) -> Matrix {
        let p = &self.0;
        let (x, yy) = (y[0], y[1]);
        Matrix::from_vec(
            3,
            3,
            vec![
                -p.d_rate - p.beta * yy,
                -p.beta * x,
                p.sigma,
                p.beta * yy,
                p.beta * x - (p.gamma + p.alpha + p.d_rate),
                0.0,
                0.0,
                p.gamma,
                -(p.sigma + p.d_rate),
            ],
        )
    }
}

/// Integrate the epidemic system with fixed-step RK4; returns the
/// (steps+1) x 3 trajectory including the initial state.
pub fn simulate_epidemic(
    p: &EpidemicParams,
    x0: [f64; 3],
    t_end: f64,
    steps: usize,
) -> Result<Matrix> {
    p.validate()?;
    if steps < 1 {
        return Err(Error::Contract("simulate_epidemic requires steps >= 1".into()));
    }
    if x0.iter().any(|v| *v < 0.0) {
        return Err(Error::Contract("initial state must be nonnegative".into()));
    }
    odeflow::integrate_trajectory(&EpidemicRhs(*p), &x0, 0.0, t_end, steps, Method::Rk4)
}

/// Column-wise standardization to zero mean and unit variance; returns the
/// standardized matrix with per-column (mean, std).
pub fn standardize(x: &Matrix) -> (Matrix, Vec<(f64, f64)>) {
    let (n, d) = (x.rows(), x.cols());
    let mut stats = Vec::with_capacity(d);
    let mut out = x.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(1e-12);
        for i in 0..n {
            out.set(i, j, (x.get(i, j) - mean) / std);
        }
        stats.push((mean, std));
    }
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{sample_er, Dag};

    #[test]
    fn linear_sem_empty_graph_moments() {
        let g = Dag::empty(4);
        let mut rng = SplitRng::new(17);
        let ds = gen_linear_sem(&g, 10_000, Noise::GaussianEqualVariance, &mut rng).unwrap();
        // 5 sigma bounds at n = 10_000 for mean and variance of unit Gaussian
        for j in 0..4 {
            let col: Vec<f64> = (0..ds.n()).map(|i| ds.x.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 5.0 / 100.0, "col {j} mean {mean}");
            assert!((var - 1.0).abs() < 5.0 * 0.0141 + 0.01, "col {j} var {var}");
        }
    }

    #[test]
    fn linear_sem_chain_covariance() {
        // chain A -> B with weight w: cov(A,B) ~ w * var(A)
        let g = Dag::new(2, [(0, 1)]).unwrap();
        let mut rng = SplitRng::new(23);
        let ds = gen_linear_sem(&g, 10_000, Noise::GaussianEqualVariance, &mut rng).unwrap();
        let n = ds.n() as f64;
        let ma = (0..ds.n()).map(|i| ds.x.get(i, 0)).sum::<f64>() / n;
        let mb = (0..ds.n()).map(|i| ds.x.get(i, 1)).sum::<f64>() / n;
        let cov = (0..ds.n())
            .map(|i| (ds.x.get(i, 0) - ma) * (ds.x.get(i, 1) - mb))
            .sum::<f64>()
            / n;
        let var_a = (0..ds.n()).map(|i| (ds.x.get(i, 0) - ma).powi(2)).sum::<f64>() / n;
        // recover the weight actually drawn
        let w = cov / var_a;
        assert!((0.5..=2.0).contains(&w.abs()), "weight magnitude {w}");
        // residual B - wA should have variance ~1
        let resid_var = (0..ds.n())
            .map(|i| (ds.x.get(i, 1) - mb - w * (ds.x.get(i, 0) - ma)).powi(2))
            .sum::<f64>()
            / n;
        assert!((resid_var - 1.0).abs() < 0.08, "residual var {resid_var}");
    }

    #[test]
    fn generators_deterministic_per_seed() {
        let g = {
            let mut r = SplitRng::new(2);
            sample_er(5, 1.0, &mut r).unwrap()
        };
        for noise in [Noise::GaussianEqualVariance, Noise::Uniform, Noise::Laplace] {
            let a = gen_linear_sem(&g, 50, noise, &mut SplitRng::new(9)).unwrap();
            let b = gen_linear_sem(&g, 50, noise, &mut SplitRng::new(9)).unwrap();
            assert_eq!(a.x.data(), b.x.data());
            let c = gen_linear_sem(&g, 50, noise, &mut SplitRng::new(10)).unwrap();
            assert_ne!(a.x.data(), c.x.data());
        }
        let a = gen_gp_anm(&g, 40, &mut SplitRng::new(9)).unwrap();
        let b = gen_gp_anm(&g, 40, &mut SplitRng::new(9)).unwrap();
        assert_eq!(a.x.data(), b.x.data());
    }

    #[test]
    fn gp_anm_root_is_unit_gaussian() {
        let g = Dag::new(2, [(0, 1)]).unwrap();
        let mut rng = SplitRng::new(31);
        let ds = gen_gp_anm(&g, 2000, &mut rng).unwrap();
        let col: Vec<f64> = (0..ds.n()).map(|i| ds.x.get(i, 0)).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 0.07, "root mean {mean}");
        assert!((var - 1.0).abs() < 0.15, "root variance {var}");
    }

    #[test]
    fn gp_draw_covariance_matches_kernel() {
        // 3 fixed parent values; covariance of repeated f-draws ~ K
        let mut x = Matrix::zeros(3, 2);
        x.set(0, 0, 0.0);
        x.set(1, 0, 1.0);
        x.set(2, 0, -0.5);
        let parents = [0usize];
        let mut rng = SplitRng::new(77);
        let reps = 10_000;
        let mut draws = vec![vec![0.0; 3]; reps];
        for dr in draws.iter_mut() {
            let f = gp_draw(&x, &parents, 3, &mut rng).unwrap();
            dr.copy_from_slice(&f);
        }
        for i in 0..3 {
            for j in 0..3 {
                let mi = draws.iter().map(|d| d[i]).sum::<f64>() / reps as f64;
                let mj = draws.iter().map(|d| d[j]).sum::<f64>() / reps as f64;
                let cov = draws.iter().map(|d| (d[i] - mi) * (d[j] - mj)).sum::<f64>()
                    / reps as f64;
                let diff = x.get(i, 0) - x.get(j, 0);
                let want = (-0.5 * diff * diff).exp();
                // ~5 sigma of the sample covariance estimator
                assert!((cov - want).abs() < 0.08, "K[{i}{j}]: {cov} vs {want}");
            }
        }
    }

    #[test]
    fn epidemic_zero_rates_constant() {
        let p = EpidemicParams { a: 0.0, d_rate: 0.0, beta: 0.0, alpha: 0.0, gamma: 0.0, sigma: 0.0 };
        let traj = simulate_epidemic(&p, [5.0, 2.0, 1.0], 1.0, 100).unwrap();
        for s in 0..=100 {
            assert_eq!(traj.row(s), &[5.0, 2.0, 1.0]);
        }
    }

    #[test]
    fn epidemic_pure_decay_matches_exponential() {
        let r = 0.7;
        let p = EpidemicParams { a: 0.0, d_rate: r, beta: 0.0, alpha: 0.0, gamma: 0.0, sigma: 0.0 };
        let traj = simulate_epidemic(&p, [2.0, 1.0, 3.0], 1.0, 1000).unwrap();
        let last = traj.row(1000);
        for (i, &x0) in [2.0, 1.0, 3.0].iter().enumerate() {
            let want = x0 * (-r as f64).exp();
            assert!((last[i] - want).abs() < 1e-8, "{} vs {want}", last[i]);
        }
    }

    #[test]
    fn epidemic_rk4_fourth_order_convergence() {
        let r = 0.7;
        let p = EpidemicParams { a: 0.0, d_rate: r, beta: 0.0, alpha: 0.0, gamma: 0.0, sigma: 0.0 };
        let exact = 2.0 * (-r as f64).exp();
        let err = |steps: usize| {
            let t = simulate_epidemic(&p, [2.0, 0.0, 0.0], 1.0, steps).unwrap();
            (t.get(steps, 0) - exact).abs()
        };
        let ratio = err(8) / err(16);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn epidemic_jacobian_support_pattern() {
        let p = EpidemicParams::demo();
        let rhs = EpidemicRhs(p);
        let j = rhs.jacobian(0.0, &[100.0, 5.0, 2.0]);
        // X depends on X,Y,Z; Y on X,Y; Z on Y,Z
        assert!(j.get(0, 0) != 0.0 && j.get(0, 1) != 0.0 && j.get(0, 2) != 0.0);
        assert!(j.get(1, 0) != 0.0 && j.get(1, 1) != 0.0 && j.get(1, 2) == 0.0);
        assert!(j.get(2, 0) == 0.0 && j.get(2, 1) != 0.0 && j.get(2, 2) != 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let g = Dag::empty(3);
        let mut rng = SplitRng::new(3);
        let ds = gen_linear_sem(&g, 20, Noise::Uniform, &mut rng).unwrap();
        let text = ds.to_csv();
        let back = Dataset::from_csv(&text).unwrap();
        assert_eq!(back.x.data(), ds.x.data());
        assert_eq!(back.names, ds.names);
    }

    #[test]
    fn csv_parse_errors() {
        assert!(matches!(
            Dataset::from_csv("a,b\n1.0,oops\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            Dataset::from_csv("a,b\n1.0\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(Dataset::from_csv("").is_err());
        let one = Dataset::from_csv("a,b\n1.0,2.0\n").unwrap();
        assert_eq!((one.n(), one.d()), (1, 2));
    }
}
