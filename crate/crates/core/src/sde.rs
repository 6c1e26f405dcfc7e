//! Ornstein-Uhlenbeck variance-exploding (OUVE) diffusion.
//!
//! The forward process relaxes the clean spectrogram `s0` toward the noisy
//! conditioner `x` while adding geometrically growing noise:
//!
//! ```text
//! mu_t      = e^{-gamma t} s0 + (1 - e^{-gamma t}) x
//! sigma_t^2 = smin^2 ((smax/smin)^{2t} - e^{-2 gamma t}) / (2 ln(smax/smin))
//! f(s, x)   = gamma (x - s)
//! g(t)      = smin (smax/smin)^t sqrt(2 ln(smax/smin))
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SdeParams {
    pub gamma: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub t_eps: f64,
    /// Number of reverse predictor steps between `t = 1` and `t_eps`.
    pub n_steps: usize,
    pub corrector_steps: usize,
    /// Signal-to-noise ratio `r` of the Langevin corrector step size.
    pub corrector_snr: f64,
}

impl Default for SdeParams {
    fn default() -> Self {
        SdeParams {
            gamma: 1.5,
            sigma_min: 0.05,
            sigma_max: 0.5,
            t_eps: 0.03,
            n_steps: 30,
            corrector_steps: 1,
            corrector_snr: 0.5,
        }
    }
}

impl SdeParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_min > 0.0
            && self.sigma_min < self.sigma_max
            && self.gamma > 0.0
            && self.t_eps > 0.0
            && self.t_eps < 1.0
            && self.n_steps >= 1
            && self.corrector_snr > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid diffusion parameters {self:?}")))
        }
    }

    fn log_ratio(&self) -> Result<f64> {
        if self.sigma_max == self.sigma_min {
            return Err(Error::invalid("sigma_max equals sigma_min"));
        }
        Ok((self.sigma_max / self.sigma_min).ln())
    }

    /// Reverse step size `(1 - t_eps) / n_steps`.
    pub fn step_size(&self) -> f64 {
        (1.0 - self.t_eps) / self.n_steps as f64
    }
}

/// A sample of the forward process at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub t: f64,
    pub s_t: Tensor,
}

pub fn mean(s0: &Tensor, x: &Tensor, t: f64, p: &SdeParams) -> Result<Tensor> {
    let a = (-p.gamma * t).exp();
    s0.zip_map(x, |s, x| a * s + (1.0 - a) * x)
        .map_err(|_| Error::shape("mean", format!("{:?} vs {:?}", s0.shape(), x.shape())))
}

pub fn std(t: f64, p: &SdeParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("std: t = {t} outside [0, 1]")));
    }
    let lr = p.log_ratio()?;
    let ratio = p.sigma_max / p.sigma_min;
    let var = p.sigma_min.powi(2) * (ratio.powf(2.0 * t) - (-2.0 * p.gamma * t).exp()) / (2.0 * lr);
    Ok(var.max(0.0).sqrt())
}

pub fn diffusion_coeff(t: f64, p: &SdeParams) -> Result<f64> {
    let lr = p.log_ratio()?;
    Ok(p.sigma_min * (p.sigma_max / p.sigma_min).powf(t) * (2.0 * lr).sqrt())
}

pub fn drift(s_t: &Tensor, x_ref: &Tensor, p: &SdeParams) -> Result<Tensor> {
    x_ref
        .zip_map(s_t, |x, s| p.gamma * (x - s))
        .map_err(|_| Error::shape("drift", format!("{:?} vs {:?}", s_t.shape(), x_ref.shape())))
}

/// `s_t = mean(s0, x, t) + std(t) z`
pub fn perturb(s0: &Tensor, x: &Tensor, t: f64, z: &Tensor, p: &SdeParams) -> Result<DiffusionState> {
    let mut s_t = mean(s0, x, t, p)?;
    s_t.axpy(std(t, p)?, z)
        .map_err(|_| Error::shape("perturb", format!("z {:?} vs {:?}", z.shape(), s0.shape())))?;
    Ok(DiffusionState { t, s_t })
}

/// Loss weighting `lambda(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// `lambda = sigma_t^2`, so the loss is `mean |sigma_t score + z|^2`.
    SigmaSq,
    Unit,
}

/// Weighted denoising score matching loss and its gradient with respect to `score`.
pub fn dsm_loss_and_grad(
    score: &Tensor,
    s_t: &Tensor,
    mu_t: &Tensor,
    sigma_t: f64,
    mode: WeightMode,
) -> Result<(f64, Tensor)> {
    if sigma_t <= 0.0 {
        return Err(Error::invalid("dsm_loss: sigma_t must be positive"));
    }
    if score.shape() != s_t.shape() || s_t.shape() != mu_t.shape() {
        return Err(Error::shape(
            "dsm_loss",
            format!("{:?}, {:?}, {:?}", score.shape(), s_t.shape(), mu_t.shape()),
        ));
    }
    let lambda = match mode {
        WeightMode::SigmaSq => sigma_t * sigma_t,
        WeightMode::Unit => 1.0,
    };
    let inv_var = 1.0 / (sigma_t * sigma_t);
    let n = score.len() as f64;
    let residual = Tensor::from_fn(score.shape(), |i| {
        score.data()[i] + (s_t.data()[i] - mu_t.data()[i]) * inv_var
    });
    let loss = lambda * residual.sum_sq() / n;
    let grad = residual.scaled(2.0 * lambda / n);
    Ok((loss, grad))
}

pub fn dsm_loss(score: &Tensor, s_t: &Tensor, mu_t: &Tensor, sigma_t: f64, mode: WeightMode) -> Result<f64> {
    dsm_loss_and_grad(score, s_t, mu_t, sigma_t, mode).map(|(l, _)| l)
}

/// Source of the standard normal draws used by the sampler.
pub trait NoiseSource {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor;
}

pub struct GaussianNoise<R>(pub R);

impl<R: Rng> NoiseSource for GaussianNoise<R> {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, &mut self.0)
    }
}

/// Always returns zeros, turning the sampler into a deterministic integrator.
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }
}

/// The noisy observation split into reference and auxiliary channels.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub reference: Tensor,
    pub others: Vec<Tensor>,
}

/// Score model signature: `(s_t, t, x_ref, x_others) -> score`.
pub trait ScoreFn {
    fn score(&mut self, s_t: &Tensor, t: f64, x_ref: &Tensor, x_others: &[Tensor]) -> Result<Tensor>;
}

impl<F> ScoreFn for F
where
    F: FnMut(&Tensor, f64, &Tensor, &[Tensor]) -> Result<Tensor>,
{
    fn score(&mut self, s_t: &Tensor, t: f64, x_ref: &Tensor, x_others: &[Tensor]) -> Result<Tensor> {
        self(s_t, t, x_ref, x_others)
    }
}

/// Optional per-step observer: `(step index, t after the step, state)`.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, f64, &Tensor);

/// Predictor-corrector reverse sampling from `t = 1` down to `t_eps`.
///
/// Starts at `x_ref + sigma(1) z`, takes `n_steps` reverse Euler-Maruyama
/// steps and follows every predictor step except the last with
/// `corrector_steps` Langevin steps. The last predictor step adds no noise.
pub fn pc_sample(
    score_fn: &mut dyn ScoreFn,
    x: &Conditioner,
    p: &SdeParams,
    noise: &mut dyn NoiseSource,
    mut hook: Option<StepHook<'_>>,
) -> Result<Tensor> {
    p.validate()?;
    let x_ref = &x.reference;
    let shape = x_ref.shape().to_vec();
    let dt = p.step_size();
    let mut s = x_ref.clone();
    s.axpy(std(1.0, p)?, &noise.standard_normal(&shape))?;

    let eval = |score_fn: &mut dyn ScoreFn, s: &Tensor, t: f64, step: usize| -> Result<Tensor> {
        let score = score_fn.score(s, t, x_ref, &x.others)?;
        if score.shape() != shape.as_slice() {
            return Err(Error::shape(
                "pc_sample",
                format!("score {:?} vs state {:?}", score.shape(), shape),
            ));
        }
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("score output at reverse step {step}")));
        }
        Ok(score)
    };

    for step in 0..p.n_steps {
        let t = 1.0 - step as f64 * dt;
        let last = step + 1 == p.n_steps;
        let score = eval(score_fn, &s, t, step)?;
        let f = drift(&s, x_ref, p)?;
        let g = diffusion_coeff(t, p)?;
        // s <- s - (f - g^2 score) dt + g sqrt(dt) z
        s.axpy(-dt, &f)?;
        s.axpy(g * g * dt, &score)?;
        if !last {
            s.axpy(g * dt.sqrt(), &noise.standard_normal(&shape))?;
        }
        let t_next = if last { p.t_eps } else { 1.0 - (step + 1) as f64 * dt };
        if !last {
            for _ in 0..p.corrector_steps {
                let score = eval(score_fn, &s, t_next, step)?;
                let z = noise.standard_normal(&shape);
                let score_norm = score.norm();
                if score_norm == 0.0 {
                    continue;
                }
                let eps = 2.0 * (p.corrector_snr * z.norm() / score_norm).powi(2);
                s.axpy(eps, &score)?;
                s.axpy((2.0 * eps).sqrt(), &z)?;
            }
        }
        if let Some(h) = hook.as_mut() {
            h(step, t_next, &s);
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::relative_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p() -> SdeParams {
        SdeParams::default()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mean_endpoints() {
        let mut r = rng(1);
        let s0 = Tensor::randn(&[2, 3, 4], &mut r);
        let x = Tensor::randn(&[2, 3, 4], &mut r);
        assert_eq!(mean(&s0, &x, 0.0, &p()).unwrap(), s0);
        let half = mean(&s0, &x, std::f64::consts::LN_2 / 1.5, &p()).unwrap();
        for i in 0..s0.len() {
            let want = 0.5 * s0.data()[i] + 0.5 * x.data()[i];
            assert!((half.data()[i] - want).abs() < 1e-14);
        }
        let fixed = mean(&s0, &s0, 0.7, &p()).unwrap();
        assert!(relative_error(fixed.data(), s0.data()) < 1e-15);
        assert!(mean(&s0, &Tensor::zeros(&[3]), 0.5, &p()).is_err());
    }

    #[test]
    fn std_closed_form() {
        assert_eq!(std(0.0, &p()).unwrap(), 0.0);
        assert!((std(1.0, &p()).unwrap() - 0.23294).abs() < 1e-4);
        let mut prev = 0.0;
        for i in 1..=100 {
            let s = std(i as f64 / 100.0, &p()).unwrap();
            assert!(s > prev);
            prev = s;
        }
        let degenerate = SdeParams { sigma_max: 0.05, ..p() };
        assert!(std(0.5, &degenerate).is_err());
    }

    /// Classic RK4 on dv/dt = g(t)^2 - 2 gamma v, v(0) = 0.
    fn rk4_variance(t_end: f64, p: &SdeParams, steps: usize) -> f64 {
        let g2 = |t: f64| diffusion_coeff(t, p).unwrap().powi(2);
        let f = |t: f64, v: f64| g2(t) - 2.0 * p.gamma * v;
        let h = t_end / steps as f64;
        let mut v = 0.0;
        for i in 0..steps {
            let t = i as f64 * h;
            let k1 = f(t, v);
            let k2 = f(t + h / 2.0, v + h / 2.0 * k1);
            let k3 = f(t + h / 2.0, v + h / 2.0 * k2);
            let k4 = f(t + h, v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        v
    }

    #[test]
    fn rk4_oracle_reproduces_the_ode_solution() {
        // Exact solution of the variance ODE for this g(t); checks the oracle itself.
        let p = p();
        let lr = (p.sigma_max / p.sigma_min).ln();
        for &t in &[0.1, 0.5, 1.0] {
            let exact =
                p.sigma_min.powi(2) * lr * ((p.sigma_max / p.sigma_min).powf(2.0 * t) - (-2.0 * p.gamma * t).exp())
                    / (p.gamma + lr);
            assert!((rk4_variance(t, &p, 2000) - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn diffusion_coefficient_values() {
        assert!((diffusion_coeff(0.0, &p()).unwrap() - 0.10730).abs() < 1e-5);
        assert!((diffusion_coeff(1.0, &p()).unwrap() - 1.07298).abs() < 1e-5);
        for &(t, d) in &[(0.1, 0.2), (0.3, 0.05), (0.0, 1.0)] {
            let ratio = diffusion_coeff(t + d, &p()).unwrap() / diffusion_coeff(t, &p()).unwrap();
            assert!((ratio - 10f64.powf(d)).abs() < 1e-12);
        }
    }

    #[test]
    fn drift_pulls_toward_reference() {
        let s = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let x = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert_eq!(drift(&s, &x, &p()).unwrap().data(), &[-1.5, 3.0]);
    }

    #[test]
    fn perturb_with_zero_noise_is_the_mean() {
        let mut r = rng(2);
        let s0 = Tensor::randn(&[5], &mut r);
        let x = Tensor::randn(&[5], &mut r);
        let st = perturb(&s0, &x, 0.4, &Tensor::zeros(&[5]), &p()).unwrap();
        assert_eq!(st.s_t, mean(&s0, &x, 0.4, &p()).unwrap());
        assert!(perturb(&s0, &x, 0.4, &Tensor::zeros(&[4]), &p()).is_err());
    }

    #[test]
    fn perturb_moments_match_closed_forms() {
        let mut r = rng(3);
        let s0 = Tensor::randn(&[6], &mut r);
        let x = Tensor::randn(&[6], &mut r);
        let t = 0.5;
        let n = 10_000;
        let mu = mean(&s0, &x, t, &p()).unwrap();
        let sigma = std(t, &p()).unwrap();
        let mut sum = [0.0; 6];
        let mut sum_sq = [0.0; 6];
        for _ in 0..n {
            let z = Tensor::randn(&[6], &mut r);
            let st = perturb(&s0, &x, t, &z, &p()).unwrap();
            for i in 0..6 {
                sum[i] += st.s_t.data()[i];
                sum_sq[i] += st.s_t.data()[i].powi(2);
            }
        }
        for i in 0..6 {
            let m = sum[i] / n as f64;
            let sd = (sum_sq[i] / n as f64 - m * m).sqrt();
            assert!((m - mu.data()[i]).abs() < 3.0 * sigma / (n as f64).sqrt());
            assert!((sd / sigma - 1.0).abs() < 0.03);
        }
    }

    #[test]
    fn dsm_loss_properties() {
        let mut r = rng(4);
        let s0 = Tensor::randn(&[4, 4], &mut r);
        let x = Tensor::randn(&[4, 4], &mut r);
        let t = 0.3;
        let sigma = std(t, &p()).unwrap();
        let z = Tensor::randn(&[4, 4], &mut r);
        let st = perturb(&s0, &x, t, &z, &p()).unwrap().s_t;
        let mu = mean(&s0, &x, t, &p()).unwrap();
        let true_score = st.zip_map(&mu, |s, m| -(s - m) / (sigma * sigma)).unwrap();
        assert!(dsm_loss(&true_score, &st, &mu, sigma, WeightMode::SigmaSq).unwrap() < 1e-24);

        let zero = Tensor::zeros(&[4, 4]);
        let l0 = dsm_loss(&zero, &st, &mu, sigma, WeightMode::SigmaSq).unwrap();
        assert!((l0 - z.sum_sq() / 16.0).abs() < 1e-12);

        // adding the true score and then its negation leaves the loss unchanged
        let other = Tensor::randn(&[4, 4], &mut r);
        let mut shifted = other.clone();
        shifted.axpy(1.0, &true_score).unwrap();
        shifted.axpy(-1.0, &true_score).unwrap();
        let a = dsm_loss(&other, &st, &mu, sigma, WeightMode::Unit).unwrap();
        let b = dsm_loss(&shifted, &st, &mu, sigma, WeightMode::Unit).unwrap();
        assert!((a - b).abs() <= 1e-9 * a);

        assert!(dsm_loss(&zero, &st, &mu, 0.0, WeightMode::SigmaSq).is_err());
    }

    #[test]
    fn zero_score_loss_is_about_one() {
        let mut r = rng(5);
        let s0 = Tensor::randn(&[8], &mut r);
        let x = Tensor::randn(&[8], &mut r);
        let zero = Tensor::zeros(&[8]);
        let mut acc = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let t = r.random_range(p().t_eps..1.0);
            let z = Tensor::randn(&[8], &mut r);
            let st = perturb(&s0, &x, t, &z, &p()).unwrap().s_t;
            let mu = mean(&s0, &x, t, &p()).unwrap();
            acc += dsm_loss(&zero, &st, &mu, std(t, &p()).unwrap(), WeightMode::SigmaSq).unwrap();
        }
        assert!((acc / n as f64 - 1.0).abs() < 0.05);
    }

    #[test]
    fn loss_gradient_matches_finite_difference() {
        let mut r = rng(6);
        let score = Tensor::randn(&[5], &mut r);
        let st = Tensor::randn(&[5], &mut r);
        let mu = Tensor::randn(&[5], &mut r);
        let (_, g) = dsm_loss_and_grad(&score, &st, &mu, 0.2, WeightMode::SigmaSq).unwrap();
        for i in 0..5 {
            let mut a = score.clone();
            a.data_mut()[i] += 1e-6;
            let mut b = score.clone();
            b.data_mut()[i] -= 1e-6;
            let fd = (dsm_loss(&a, &st, &mu, 0.2, WeightMode::SigmaSq).unwrap()
                - dsm_loss(&b, &st, &mu, 0.2, WeightMode::SigmaSq).unwrap())
                / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-6 * g.data()[i].abs().max(1.0));
        }
    }

    /// Exact kernel score toward a known `s0`.
    pub(crate) fn exact_score(
        s0: Tensor,
        p: SdeParams,
    ) -> impl FnMut(&Tensor, f64, &Tensor, &[Tensor]) -> Result<Tensor> {
        move |s, t, x_ref, _| {
            let mu = mean(&s0, x_ref, t, &p)?;
            let var = std(t, &p)?.powi(2);
            s.zip_map(&mu, |s, m| -(s - m) / var)
        }
    }

    fn problem(seed: u64) -> (Tensor, Conditioner) {
        let mut r = rng(seed);
        let s0 = Tensor::randn(&[2, 8, 8], &mut r);
        let mut x = s0.clone();
        x.axpy(0.5, &Tensor::randn(&[2, 8, 8], &mut r)).unwrap();
        (
            s0,
            Conditioner {
                reference: x,
                others: vec![],
            },
        )
    }

    #[test]
    fn exact_score_recovers_clean_sample() {
        let (s0, cond) = problem(7);
        let mut score = exact_score(s0.clone(), p());
        let out = pc_sample(&mut score, &cond, &p(), &mut GaussianNoise(rng(8)), None).unwrap();
        assert!(relative_error(out.data(), s0.data()) < 0.05);
    }

    #[test]
    fn zero_noise_trajectory_converges_monotonically() {
        let (s0, cond) = problem(9);
        let mut score = exact_score(s0.clone(), p());
        let mut errors = Vec::new();
        let mut hook = |_: usize, _: f64, s: &Tensor| errors.push(relative_error(s.data(), s0.data()));
        pc_sample(&mut score, &cond, &p(), &mut ZeroNoise, Some(&mut hook)).unwrap();
        let tail = &errors[errors.len() - 10..];
        assert!(tail.windows(2).all(|w| w[1] < w[0]), "{tail:?}");
    }

    #[test]
    fn sampler_is_deterministic_for_a_seed() {
        let (s0, cond) = problem(10);
        let run = || {
            let mut score = exact_score(s0.clone(), p());
            pc_sample(&mut score, &cond, &p(), &mut GaussianNoise(rng(3)), None).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_score_aborts_with_step() {
        let (_, cond) = problem(11);
        let mut calls = 0;
        let mut bad = |s: &Tensor, _: f64, _: &Tensor, _: &[Tensor]| {
            calls += 1;
            Ok(if calls == 4 {
                s.map(|_| f64::NAN)
            } else {
                Tensor::zeros(s.shape())
            })
        };
        let err = pc_sample(&mut bad, &cond, &p(), &mut ZeroNoise, None).unwrap_err();
        assert!(err.to_string().contains("reverse step 1"), "{err}");
    }
}
