//! PIMDO: physics-informed anisotropic diffusion with a learned conductance
//! controller.
//!
//! Each channel evolves under x ← x + dt·div(c(|∇x|)·∇x) for a fixed number
//! of explicit Euler steps. The controller c is a pointwise 1→8→1 network
//! with a sigmoid output, so conductance stays in [0, 1] and the scheme
//! stays inside the 2D stability bound for dt ≤ 0.25. Fluxes live on cell
//! edges (conductance averaged between the two adjacent cells, clamped edge
//! values outside the image), which makes the update conservative: what
//! leaves one cell enters its neighbor.

use rand_chacha::ChaCha8Rng;

use super::{sobel_gradients, DEFAULT_OUTPUT_SCALE};
use crate::tensor::{xavier_uniform, Fill, Graph, Module, Pad, Real, Tensor, ValueId};
use crate::{Error, Result};

/// Width of the pointwise controller's hidden layer.
pub const CONTROLLER_HIDDEN: usize = 8;
/// Smoothing constant inside sqrt(gx² + gy² + ε).
pub const MAGNITUDE_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Pimdo<F: Real> {
    pub ctrl1_w: Tensor<F>,
    pub ctrl1_b: Tensor<F>,
    pub ctrl2_w: Tensor<F>,
    pub ctrl2_b: Tensor<F>,
    pub out_scale: Tensor<F>,
    pub dt: f64,
    pub steps: usize,
}

impl<F: Real> Pimdo<F> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        Pimdo {
            ctrl1_w: xavier_uniform(&[CONTROLLER_HIDDEN, 1, 1, 1], 1, CONTROLLER_HIDDEN, rng),
            ctrl1_b: Tensor::zeros(&[CONTROLLER_HIDDEN]),
            ctrl2_w: xavier_uniform(&[1, CONTROLLER_HIDDEN, 1, 1], CONTROLLER_HIDDEN, 1, rng),
            ctrl2_b: Tensor::zeros(&[1]),
            out_scale: Tensor::scalar(F::f(DEFAULT_OUTPUT_SCALE)),
            dt: 0.2,
            steps: 3,
        }
    }

    /// Pin the controller output to sigmoid(logit) for every input; ±1000
    /// saturates to exactly 0 or 1.
    pub fn force_controller(&mut self, logit: f64) {
        self.ctrl2_w.fill(F::zero());
        self.ctrl2_b.fill(F::f(logit));
    }

    pub fn forward(&self, g: &mut Graph<F>, prefix: &str, x: ValueId) -> Result<ValueId> {
        if !(self.dt > 0.0 && self.dt <= 0.25) {
            return Err(Error::Config(format!("pimdo: dt {} outside the stable range (0, 0.25]", self.dt)));
        }
        let s = g.tape.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("pimdo: expected NCHW, got {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let c1w = g.param(&format!("{prefix}.ctrl1_w"), &self.ctrl1_w)?;
        let c1b = g.param(&format!("{prefix}.ctrl1_b"), &self.ctrl1_b)?;
        let c2w = g.param(&format!("{prefix}.ctrl2_w"), &self.ctrl2_w)?;
        let c2b = g.param(&format!("{prefix}.ctrl2_b"), &self.ctrl2_b)?;
        let scale = g.param(&format!("{prefix}.out_scale"), &self.out_scale)?;

        let mut u = g.tape.reshape(x, &[n * c, 1, h, w])?;
        for _ in 0..self.steps {
            let t = &mut g.tape;
            let (gx, gy) = sobel_gradients(t, u)?;
            let gx2 = t.mul(gx, gx)?;
            let gy2 = t.mul(gy, gy)?;
            let mag2 = t.add(gx2, gy2)?;
            let mag2 = t.add_const(mag2, F::f(MAGNITUDE_EPS))?;
            let mag = t.sqrt(mag2)?;
            let h1 = t.conv2d(mag, c1w, Some(c1b), 1, Pad::Zero)?;
            let h1 = t.relu(h1)?;
            let logits = t.conv2d(h1, c2w, Some(c2b), 1, Pad::Zero)?;
            let cond = t.sigmoid(logits)?;

            let east = flux(t, u, cond, 0, 1)?;
            let south = flux(t, u, cond, 1, 0)?;
            let from_west = t.shift2d(east, 0, -1, Fill::Zero)?;
            let from_north = t.shift2d(south, -1, 0, Fill::Zero)?;
            let div_x = t.sub(east, from_west)?;
            let div_y = t.sub(south, from_north)?;
            let div = t.add(div_x, div_y)?;
            let delta = t.mul_const(div, F::f(self.dt))?;
            u = t.add(u, delta)?;
        }
        let back = g.tape.reshape(u, &[n, c, h, w])?;
        g.tape.mul_scalar_param(back, scale)
    }
}

/// Edge flux toward the (dy, dx) neighbor: mean conductance of the two
/// cells times the value difference. Clamped shifts make the outermost
/// flux zero (the neighbor equals the cell itself), i.e. no-flux borders.
fn flux<F: Real>(
    t: &mut crate::tensor::Tape<F>,
    u: ValueId,
    cond: ValueId,
    dy: isize,
    dx: isize,
) -> Result<ValueId> {
    let un = t.shift2d(u, dy, dx, Fill::Clamp)?;
    let cn = t.shift2d(cond, dy, dx, Fill::Clamp)?;
    let csum = t.add(cond, cn)?;
    let cavg = t.mul_const(csum, F::f(0.5))?;
    let diff = t.sub(un, u)?;
    t.mul(cavg, diff)
}

impl<F: Real> Module<F> for Pimdo<F> {
    fn params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("ctrl1_w".into(), &self.ctrl1_w),
            ("ctrl1_b".into(), &self.ctrl1_b),
            ("ctrl2_w".into(), &self.ctrl2_w),
            ("ctrl2_b".into(), &self.ctrl2_b),
            ("out_scale".into(), &self.out_scale),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            ("ctrl1_w".into(), &mut self.ctrl1_w),
            ("ctrl1_b".into(), &mut self.ctrl1_b),
            ("ctrl2_w".into(), &mut self.ctrl2_w),
            ("ctrl2_b".into(), &mut self.ctrl2_b),
            ("out_scale".into(), &mut self.out_scale),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::test_support::{gradcheck_module, random_input};
    use rand::{Rng, SeedableRng};

    fn unit_scale(rng: &mut ChaCha8Rng) -> Pimdo<f64> {
        let mut p = Pimdo::new(rng);
        p.out_scale.fill(1.0);
        p
    }

    fn run(p: &Pimdo<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new(false);
        let xid = g.input(x.clone());
        let out = p.forward(&mut g, "pimdo", xid).unwrap();
        g.tape.value(out)
    }

    #[test]
    fn constant_image_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let p = unit_scale(&mut rng);
        let x = Tensor::full(&[1, 2, 5, 5], 0.8);
        assert_eq!(run(&p, &x).data(), x.data());
    }

    #[test]
    fn zero_conductance_freezes_diffusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut p = unit_scale(&mut rng);
        p.force_controller(-1000.0);
        let x = random_input(&[2, 3, 6, 6], 52);
        assert_eq!(run(&p, &x).data(), x.data());
    }

    #[test]
    fn unit_conductance_matches_scalar_heat_euler_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut p = unit_scale(&mut rng);
        p.force_controller(1000.0);
        // Vertical step edge.
        let x = Tensor::from_fn(&[1, 1, 5, 5], |i| if i % 5 < 2 { 1.0 } else { 0.0 });
        let got = run(&p, &x);

        // Independent plain-loop Euler stepping of the heat equation with
        // no-flux borders (neighbor differences vanish at the boundary).
        let mut u: Vec<f64> = x.data().to_vec();
        let at = |v: &[f64], i: isize, j: isize| -> f64 {
            let ci = i.clamp(0, 4) as usize;
            let cj = j.clamp(0, 4) as usize;
            v[ci * 5 + cj]
        };
        for _ in 0..3 {
            let mut next = u.clone();
            for i in 0..5isize {
                for j in 0..5isize {
                    let lap = at(&u, i, j + 1) + at(&u, i, j - 1) + at(&u, i + 1, j) + at(&u, i - 1, j) - 4.0 * at(&u, i, j);
                    next[(i * 5 + j) as usize] += 0.2 * lap;
                }
            }
            u = next;
        }
        for (g, w) in got.data().iter().zip(&u) {
            assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn maximum_principle_holds_for_random_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        for trial in 0..100 {
            let p = unit_scale(&mut rng);
            let mut r = ChaCha8Rng::seed_from_u64(1000 + trial);
            let x = Tensor::from_fn(&[1, 1, 8, 8], |_| r.gen_range(-2.0..2.0));
            let lo = x.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = run(&p, &x);
            for v in out.data() {
                assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12, "trial {trial}: {v} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn unit_conductance_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut p = unit_scale(&mut rng);
        p.force_controller(1000.0);
        let x = random_input(&[1, 1, 9, 9], 56);
        let before: f64 = x.data().iter().sum();
        let after: f64 = run(&p, &x).data().iter().sum();
        assert!((after - before).abs() / before.abs().max(1.0) <= 1e-6);
    }

    #[test]
    fn invalid_dt_is_a_configuration_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let mut p = unit_scale(&mut rng);
        p.dt = 0.3;
        let mut g = Graph::new(false);
        let x = g.input(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(matches!(p.forward(&mut g, "pimdo", x), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_matches_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let p = Pimdo::<f64>::new(&mut rng);
        let x = random_input(&[2, 4, 8, 8], 59);
        assert_eq!(run(&p, &x).shape(), &[2, 4, 8, 8]);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for seed in 60..65 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Pimdo::<f64>::new(&mut rng);
            let x = random_input(&[1, 4, 8, 8], seed + 100);
            gradcheck_module(&p, &x, seed, "pimdo", |g, m, xid| m.forward(g, "pimdo", xid));
        }
    }
}
