#![allow(dead_code)]

use frk::dynamic::DynamicStModel;
use frk::{build_multires, BasisSet, KModel, Location, MultiResSpec, NoiseParams, SpatialDataset, SreParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_psd(rng: &mut ChaCha8Rng, r: usize, rank: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(r, rank, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() / rank as f64
}

pub fn uniform_2d(rng: &mut ChaCha8Rng, n: usize) -> Vec<Location> {
    (0..n)
        .map(|_| Location::from([rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]))
        .collect()
}

const GRIDS: [&[[usize; 2]]; 5] = [&[[2, 2], [4, 4]], &[[3, 3], [5, 5]], &[[3, 3], [6, 6]], &[[2, 3], [4, 5]], &[[4, 4]]];

pub fn random_basis(rng: &mut ChaCha8Rng) -> BasisSet {
    let g = GRIDS[rng.random_range(0..GRIDS.len())];
    let counts: Vec<Vec<usize>> = g.iter().map(|c| c.to_vec()).collect();
    build_multires(&MultiResSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], &counts, 1.5)).unwrap()
}

pub fn random_k_model(rng: &mut ChaCha8Rng, r: usize) -> KModel {
    match rng.random_range(0..4) {
        0 => KModel::ScaledIdentity {
            variance: rng.random_range(0.2..2.0),
        },
        1 => KModel::Ar1PerResolution {
            variance: rng.random_range(0.2..2.0),
            rho: rng.random_range(-0.8..0.8),
        },
        2 => KModel::ExpCentroid {
            variance: rng.random_range(0.2..2.0),
            length_scale: rng.random_range(0.05..0.5),
        },
        // rank-deficient unstructured K
        _ => KModel::Unstructured {
            k: random_psd(rng, r, (r / 2).max(1)),
        },
    }
}

/// A random dataset with covariates, some duplicated locations, and a
/// random admissible parameter set.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (SpatialDataset, BasisSet, SreParams) {
    let basis = random_basis(rng);
    let mut locs = uniform_2d(rng, n);
    for i in 0..n / 10 {
        let j = rng.random_range(0..n);
        locs[i] = locs[j].clone();
    }
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { locs[i].coords()[1] });
    let z = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let ds = SpatialDataset::new(locs, z, Some(x)).unwrap();
    let params = SreParams::new(
        DVector::from_vec(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
        random_k_model(rng, basis.len()),
        NoiseParams::new(rng.random_range(0.0..0.3), rng.random_range(0.05..0.5)).unwrap(),
    )
    .unwrap();
    (ds, basis, params)
}

pub fn same(a: &Location, b: &Location) -> bool {
    a.coords() == b.coords()
}

pub fn dense_phi(basis: &BasisSet, locs: &[Location]) -> DMatrix<f64> {
    let rows: Vec<_> = locs.iter().map(|l| basis.eval(l).unwrap().transpose()).collect();
    DMatrix::from_rows(&rows)
}

/// `C_Z = ΦKΦᵀ + (σ²_δ + σ²_ε)I`.
pub fn dense_cz(ds: &SpatialDataset, basis: &BasisSet, params: &SreParams) -> DMatrix<f64> {
    let phi = dense_phi(basis, ds.locations());
    let k = frk::k_matrix(&params.k_model, basis).unwrap();
    &phi * k * phi.transpose() + dense_noise(ds, &params.noise)
}

/// `σ²_ε` per row plus `σ²_δ` between rows at bitwise-equal sites.
pub fn dense_noise(ds: &SpatialDataset, noise: &frk::NoiseParams) -> DMatrix<f64> {
    let locs = ds.locations();
    DMatrix::from_fn(ds.len(), ds.len(), |i, j| {
        let d = if same(&locs[i], &locs[j]) { noise.sigma2_delta } else { 0.0 };
        d + if i == j { noise.sigma2_eps } else { 0.0 }
    })
}

/// Joint-Gaussian conditional mean, variance and prior variance of `Y(s₀)`
/// by explicit inversion of `C_Z`.
pub fn dense_conditional(
    ds: &SpatialDataset,
    basis: &BasisSet,
    params: &SreParams,
    targets: &[Location],
    x0: Option<&DMatrix<f64>>,
) -> Vec<(f64, f64, f64)> {
    let cz = dense_cz(ds, basis, params);
    let cinv = cz.clone().lu().try_inverse().expect("C_Z invertible");
    let k = frk::k_matrix(&params.k_model, basis).unwrap();
    let phi = dense_phi(basis, ds.locations());
    let resid = ds.z() - ds.covariates().map_or(DVector::zeros(ds.len()), |x| x * &params.beta);
    let w = &cinv * resid;
    targets
        .iter()
        .enumerate()
        .map(|(t, s0)| {
            let phi0 = basis.eval(s0).unwrap();
            let mut c0 = &phi * (&k * &phi0);
            for (i, l) in ds.locations().iter().enumerate() {
                if same(l, s0) {
                    c0[i] += params.noise.sigma2_delta;
                }
            }
            let prior = phi0.dot(&(&k * &phi0)) + params.noise.sigma2_delta;
            let fixed = x0.map_or(0.0, |x| x.row(t).transpose().dot(&params.beta));
            (fixed + c0.dot(&w), prior - c0.dot(&(&cinv * &c0)), prior)
        })
        .collect()
}

/// `|a − b| / max(|b|, scale)`.
pub fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / b.abs().max(scale)
}

/// Nelder–Mead minimization with restarts from the incumbent.
pub fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: &[f64], step: f64, iters: usize) -> (Vec<f64>, f64) {
    let d = x0.len();
    let mut best = (x0.to_vec(), f(x0));
    for _ in 0..4 {
        let mut simplex: Vec<(Vec<f64>, f64)> = vec![best.clone()];
        for i in 0..d {
            let mut x = best.0.clone();
            x[i] += step;
            let fx = f(&x);
            simplex.push((x, fx));
        }
        for _ in 0..iters {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let centroid: Vec<f64> = (0..d).map(|j| simplex[..d].iter().map(|s| s.0[j]).sum::<f64>() / d as f64).collect();
            let along = |t: f64| -> Vec<f64> { (0..d).map(|j| centroid[j] + t * (simplex[d].0[j] - centroid[j])).collect() };
            let xr = along(-1.0);
            let fr = f(&xr);
            if fr < simplex[0].1 {
                let xe = along(-2.0);
                let fe = f(&xe);
                simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[d - 1].1 {
                simplex[d] = (xr, fr);
            } else {
                let xc = along(0.5);
                let fc = f(&xc);
                if fc < simplex[d].1 {
                    simplex[d] = (xc, fc);
                } else {
                    let x0 = simplex[0].0.clone();
                    for s in simplex.iter_mut().skip(1) {
                        s.0 = (0..d).map(|j| x0[j] + 0.5 * (s.0[j] - x0[j])).collect();
                        s.1 = f(&s.0);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[0].1 <= best.1 {
            best = simplex[0].clone();
        }
    }
    best
}

/// Prior mean and covariance of the stacked states `(α₁, …, α_T)`.
pub fn stacked_prior(model: &DynamicStModel, t_len: usize) -> (DVector<f64>, DMatrix<f64>) {
    let r = model.basis.len();
    let mut means = vec![model.m0.clone()];
    let mut marg = vec![model.p0.clone()];
    for t in 1..t_len {
        means.push(&model.m * &means[t - 1]);
        marg.push(&model.m * &marg[t - 1] * model.m.transpose() + &model.c_omega);
    }
    let mut mean = DVector::zeros(r * t_len);
    let mut cov = DMatrix::zeros(r * t_len, r * t_len);
    for t in 0..t_len {
        mean.rows_mut(t * r, r).copy_from(&means[t]);
        let mut prop = DMatrix::identity(r, r);
        for s in t..t_len {
            // cov(α_s, α_t) = M^{s−t} P_t
            let block = &prop * &marg[t];
            cov.view_mut((s * r, t * r), (r, r)).copy_from(&block);
            cov.view_mut((t * r, s * r), (r, r)).copy_from(&block.transpose());
            prop = &model.m * prop;
        }
    }
    (mean, cov)
}

/// Moments of `α_t` given the slices `0..upto` by dense batch conditioning.
pub fn batch_posterior(model: &DynamicStModel, data: &frk::StDataset, upto: usize) -> (DVector<f64>, DMatrix<f64>) {
    let t_len = data.t_len();
    let r = model.basis.len();
    let (mean, cov) = stacked_prior(model, t_len);
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut z = Vec::new();
    for t in 0..upto {
        let Some(ds) = &data.slices()[t] else { continue };
        for (i, l) in ds.locations().iter().enumerate() {
            let mut h = DVector::zeros(r * t_len);
            h.rows_mut(t * r, r).copy_from(&model.basis.eval(l).unwrap());
            rows.push(h);
            z.push(ds.z()[i]);
        }
    }
    if rows.is_empty() {
        return (mean, cov);
    }
    let h = DMatrix::from_columns(&rows).transpose();
    let mut s = &h * &cov * h.transpose();
    for i in 0..s.nrows() {
        s[(i, i)] += model.noise.xi();
    }
    let sinv = s.try_inverse().unwrap();
    let gain = &cov * h.transpose() * &sinv;
    let innov = DVector::from_vec(z) - &h * &mean;
    (&mean + &gain * innov, &cov - &gain * &h * &cov)
}

pub fn block(m: &DVector<f64>, c: &DMatrix<f64>, t: usize, r: usize) -> (DVector<f64>, DMatrix<f64>) {
    (m.rows(t * r, r).into_owned(), c.view((t * r, t * r), (r, r)).into_owned())
}

pub fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, steps: usize) -> f64 {
    let h = (b - a) / steps as f64;
    let mut s = 0.5 * (f(a) + f(b));
    for i in 1..steps {
        s += f(a + i as f64 * h);
    }
    s * h
}

/// `∫ (F(x) − 1{x ≥ z})² dx`, split at the jump and truncated at `μ ± 12σ`.
pub fn crps_quadrature(mu: f64, sigma: f64, z: f64) -> f64 {
    let n = Normal::new(mu, sigma).unwrap();
    let (lo, hi) = ((mu - 12.0 * sigma).min(z), (mu + 12.0 * sigma).max(z));
    trapezoid(|x| n.cdf(x).powi(2), lo, z, 200_000) + trapezoid(|x| (1.0 - n.cdf(x)).powi(2), z, hi, 200_000)
}
