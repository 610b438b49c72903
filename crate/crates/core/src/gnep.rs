//! Forward mean-field equilibrium solver.
//!
//! Player 1 picks an occupation measure `ν` given the mean field `μ`,
//! player 2 picks `μ` given `ν`:
//!
//! ```text
//! player 1:  min ⟨ν, c_μ⟩  s.t.  h1(ν, μ) = (−ν ; −ν^X + (1−β)μ + β ν p_μ) ≤ 0
//! player 2:  min g(ν, μ)   s.t.  h2(ν, μ) = (−μ ; 1 − ⟨μ, 1⟩ ; −μ + ν p_μ) ≤ 0
//! ```
//!
//! The joint KKT system is turned into the root-finding problem
//! `H(z) = (F ; h + w ; (λ, γ) ∘ w) = 0` over
//! `z = (ν, μ, λ, γ, λ̄, γ̄)` and solved by an interior-point
//! potential-reduction iteration with Armijo backtracking.
//!
//! Off the simplex the kernel is extended homogeneously,
//! `p_μ = P0·⟨μ, 1⟩ + P1·μ`, so that `(ν p_μ)(X) = ν(X×A)·μ(X)`. On
//! probability vectors this is the model kernel. The homogeneous extension
//! is what forces every solution of the system to consist of probability
//! measures; with the plain affine extension the mass of `μ` is not pinned
//! and the iteration drifts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::mdp::{self, OccupationMeasure, Policy};
use crate::model::{ModelSpec, SimplexVector};
use crate::numerics::{self, dot, norm2, DenseMatrix};

/// Cutoff of the second pseudo-inverse attempt when the first direction
/// does not descend.
const FALLBACK_RCOND: f64 = 1e-12;

/// Block sizes of the iterate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dimensions {
    pub n_states: usize,
    pub n_pairs: usize,
    /// Player-1 constraints, `|X||A| + |X|`.
    pub m1: usize,
    /// Player-2 constraints, `2|X| + 1`.
    pub m2: usize,
}

impl Dimensions {
    pub fn of(spec: &ModelSpec) -> Self {
        let nx = spec.n_states();
        let np = spec.n_pairs();
        Self {
            n_states: nx,
            n_pairs: np,
            m1: np + nx,
            m2: 2 * nx + 1,
        }
    }

    /// Number of primal variables.
    pub fn n(&self) -> usize {
        self.n_pairs + self.n_states
    }

    /// Number of constraints.
    pub fn m(&self) -> usize {
        self.m1 + self.m2
    }

    pub fn len(&self) -> usize {
        self.n() + 2 * self.m()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn offsets(&self) -> [usize; 6] {
        let nu = 0;
        let mu = nu + self.n_pairs;
        let lambda = mu + self.n_states;
        let gamma = lambda + self.m1;
        let sl = gamma + self.m2;
        let sg = sl + self.m1;
        [nu, mu, lambda, gamma, sl, sg]
    }
}

/// Interior-point iterate `z = (ν, μ, λ, γ, λ̄, γ̄)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnepVariables {
    pub nu: Vec<f64>,
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub slack_lambda: Vec<f64>,
    pub slack_gamma: Vec<f64>,
}

impl GnepVariables {
    pub fn from_vec(dims: Dimensions, z: &[f64]) -> Result<Self> {
        if z.len() != dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "iterate has length {}, expected {}",
                z.len(),
                dims.len()
            )));
        }
        let [_, mu, lambda, gamma, sl, sg] = dims.offsets();
        Ok(Self {
            nu: z[..mu].to_vec(),
            mu: z[mu..lambda].to_vec(),
            lambda: z[lambda..gamma].to_vec(),
            gamma: z[gamma..sl].to_vec(),
            slack_lambda: z[sl..sg].to_vec(),
            slack_gamma: z[sg..].to_vec(),
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        [
            &self.nu[..],
            &self.mu,
            &self.lambda,
            &self.gamma,
            &self.slack_lambda,
            &self.slack_gamma,
        ]
        .concat()
    }

    /// Multipliers and slacks all strictly positive.
    pub fn is_interior(&self) -> bool {
        [
            &self.lambda,
            &self.gamma,
            &self.slack_lambda,
            &self.slack_gamma,
        ]
        .iter()
        .all(|b| b.iter().all(|v| *v > 0.0))
    }
}

/// Objective of the second player.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SecondPlayerObjective {
    /// `g(ν, μ) = ⟨ν, c_μ⟩`.
    SharedCost,
    /// `g(ν, μ) = ⟨ν, c_μ⟩ + (weight/2)‖μ‖²`.
    Proximal { weight: f64 },
}

/// How `∇H` is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JacobianMode {
    FiniteDifference,
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnepConfig {
    pub sigma: f64,
    pub kappa: f64,
    pub armijo_alpha: f64,
    /// Potential constant; `None` means `2m`.
    pub k_potential: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
    pub jacobian: JacobianMode,
    pub fd_step: f64,
    /// Singular values below `pinv_rcond · σ_max` are dropped when the
    /// Newton system is (numerically) singular.
    pub pinv_rcond: f64,
    pub second_player: SecondPlayerObjective,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for GnepConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            kappa: 0.001,
            armijo_alpha: 0.1,
            k_potential: None,
            tol: 1e-8,
            max_iter: 10_000,
            max_backtracks: 200,
            jacobian: JacobianMode::Analytic,
            fd_step: numerics::DEFAULT_FD_STEP,
            pinv_rcond: 1e-4,
            second_player: SecondPlayerObjective::SharedCost,
            execution: Execution::default(),
        }
    }
}

impl GnepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadParameter(m.into()));
        if !(0.0..1.0).contains(&self.sigma) {
            return bad("sigma must lie in [0, 1)");
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return bad("kappa must lie in (0, 1)");
        }
        if !(self.armijo_alpha > 0.0 && self.armijo_alpha <= 1.0) {
            return bad("armijo_alpha must lie in (0, 1]");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if !(self.pinv_rcond > 0.0 && self.pinv_rcond < 1.0) {
            return bad("pinv_rcond must lie in (0, 1)");
        }
        if let SecondPlayerObjective::Proximal { weight } = self.second_player {
            if !(weight >= 0.0 && weight.is_finite()) {
                return bad("proximal weight must be nonnegative");
            }
        }
        Ok(())
    }

    pub fn potential_constant(&self, dims: Dimensions) -> f64 {
        self.k_potential.unwrap_or(2.0 * dims.m() as f64)
    }
}

/// Diagnostics of a potential-reduction run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `‖H(z_k)‖₂` for `k = 0..=iterations`.
    pub h_norm_history: Vec<f64>,
    /// `ψ(z_k)` for `k = 0..=iterations`.
    pub psi_history: Vec<f64>,
    /// Accepted step sizes.
    pub step_history: Vec<f64>,
    /// Final `‖F‖₂`.
    pub residual_stationarity: f64,
    /// Final `‖h + w‖₂`.
    pub residual_feasibility: f64,
    /// Final `‖(λ, γ) ∘ w‖₂`.
    pub residual_complementarity: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Iterations whose Newton system needed the pseudo-inverse.
    pub pseudo_inverse_steps: usize,
    /// Iterations that fell back to steepest descent on `ψ ∘ H`.
    pub steepest_descent_steps: usize,
}

impl KktReport {
    pub fn h_norm_final(&self) -> f64 {
        self.h_norm_history.last().copied().unwrap_or(f64::NAN)
    }

    /// True when `ψ` went strictly down on every accepted step.
    pub fn psi_strictly_decreasing(&self) -> bool {
        self.psi_history.windows(2).all(|w| w[1] < w[0])
    }
}

/// Verification residuals of a candidate equilibrium.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfeResiduals {
    /// `J(π, μ) − min_π' J(π', μ)`, cost convention, initial law `μ`.
    pub optimality_gap: f64,
    /// `|J(π_opt, μ)|`, the scale for relative gaps.
    pub optimal_cost: f64,
    /// `‖μ − μ P_{π,μ}‖∞`.
    pub invariance_residual: f64,
}

impl MfeResiduals {
    pub fn relative_gap(&self) -> f64 {
        self.optimality_gap / self.optimal_cost.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Equilibrium {
    pub policy: Policy,
    pub mean_field: SimplexVector,
    pub occupation: OccupationMeasure,
    pub optimality_gap: f64,
    pub invariance_residual: f64,
}

/// Model data rearranged for fast evaluation of `H` and `∇H`.
#[derive(Clone, Debug)]
pub struct KktSystem {
    dims: Dimensions,
    n_actions: usize,
    beta: f64,
    /// `c(x, a, 0)`, row-major `(x, a)`.
    c0: Vec<f64>,
    /// `∂c(x, a)/∂μ(z)`, layout `[xa][z]`.
    dc: Vec<f64>,
    /// `∂p(y | x, a)/∂μ(z) = P0 + P1`, layout `[xa][y][z]`.
    dp: Vec<f64>,
    second_player: SecondPlayerObjective,
}

impl KktSystem {
    pub fn new(spec: &ModelSpec, second_player: SecondPlayerObjective) -> Result<Self> {
        let theta = spec.require_theta()?;
        let dims = Dimensions::of(spec);
        let (nx, na, k) = (spec.n_states(), spec.n_actions(), spec.feature_dim());
        let np = dims.n_pairs;
        let mut c0 = vec![0.0; np];
        let mut dc = vec![0.0; np * nx];
        let mut dp = vec![0.0; np * nx * nx];
        for x in 0..nx {
            for a in 0..na {
                let xa = x * na + a;
                c0[xa] = (0..k).map(|j| theta[j] * spec.f0(x, a, j)).sum();
                for z in 0..nx {
                    dc[xa * nx + z] = (0..k).map(|j| theta[j] * spec.f1(x, a, j, z)).sum();
                    for y in 0..nx {
                        dp[(xa * nx + y) * nx + z] = spec.p0(y, x, a) + spec.p1(y, x, a, z);
                    }
                }
            }
        }
        Ok(Self {
            dims,
            n_actions: na,
            beta: spec.beta(),
            c0,
            dc,
            dp,
            second_player,
        })
    }

    pub fn dims(&self) -> Dimensions {
        self.dims
    }

    fn costs(&self, mu: &[f64]) -> Vec<f64> {
        let nx = self.dims.n_states;
        self.c0
            .iter()
            .enumerate()
            .map(|(xa, c)| c + dot(&self.dc[xa * nx..(xa + 1) * nx], mu))
            .collect()
    }

    /// Homogeneous kernel `p(y | x, a) = Σ_z (P0 + P1)[y][x][a][z] μ(z)`,
    /// layout `[xa][y]`.
    fn kernel(&self, mu: &[f64]) -> Vec<f64> {
        let nx = self.dims.n_states;
        self.dp.chunks(nx).map(|row| dot(row, mu)).collect()
    }

    fn push_forward(&self, nu: &[f64], p: &[f64]) -> Vec<f64> {
        let nx = self.dims.n_states;
        let mut out = vec![0.0; nx];
        for (w, row) in nu.iter().zip(p.chunks(nx)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
        out
    }

    /// `(h1, h2)` at `(ν, μ)`.
    pub fn constraints(&self, nu: &[f64], mu: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nx = self.dims.n_states;
        let na = self.n_actions;
        let beta = self.beta;
        let p = self.kernel(mu);
        let push = self.push_forward(nu, &p);
        let mut h1: Vec<f64> = nu.iter().map(|v| -v).collect();
        for y in 0..nx {
            let marg: f64 = nu[y * na..(y + 1) * na].iter().sum();
            h1.push(-marg + (1.0 - beta) * mu[y] + beta * push[y]);
        }
        let mut h2: Vec<f64> = mu.iter().map(|v| -v).collect();
        h2.push(1.0 - mu.iter().sum::<f64>());
        h2.extend(mu.iter().zip(&push).map(|(m, q)| q - m));
        (h1, h2)
    }

    /// `H(z)` for a flat iterate.
    pub fn evaluate(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dims;
        let [o_nu, o_mu, o_l, o_g, o_sl, o_sg] = d.offsets();
        let (nx, np, na) = (d.n_states, d.n_pairs, self.n_actions);
        let nu = &z[o_nu..o_mu];
        let mu = &z[o_mu..o_l];
        let lam = &z[o_l..o_g];
        let gam = &z[o_g..o_sl];
        let sl = &z[o_sl..o_sg];
        let sg = &z[o_sg..];
        let beta = self.beta;
        let p = self.kernel(mu);
        let c = self.costs(mu);
        let (lam_top, lam_bot) = lam.split_at(np);
        let gam_c = &gam[nx + 1..];

        let mut out = Vec::with_capacity(d.len());
        // ∇_ν L1
        for xa in 0..np {
            let x = xa / na;
            let flow = beta * dot(&p[xa * nx..(xa + 1) * nx], lam_bot);
            out.push(c[xa] - lam_top[xa] - lam_bot[x] + flow);
        }
        // ∇_μ L2
        for z_ in 0..nx {
            let mut v = -gam[z_] - gam[nx] - gam_c[z_];
            for xa in 0..np {
                let w = nu[xa];
                if w == 0.0 {
                    continue;
                }
                let mut s = self.dc[xa * nx + z_];
                for y in 0..nx {
                    s += gam_c[y] * self.dp[(xa * nx + y) * nx + z_];
                }
                v += w * s;
            }
            if let SecondPlayerObjective::Proximal { weight } = self.second_player {
                v += weight * mu[z_];
            }
            out.push(v);
        }
        let (h1, h2) = self.constraints(nu, mu);
        out.extend(h1.iter().zip(sl).map(|(h, s)| h + s));
        out.extend(h2.iter().zip(sg).map(|(h, s)| h + s));
        out.extend(lam.iter().zip(sl).map(|(l, s)| l * s));
        out.extend(gam.iter().zip(sg).map(|(g, s)| g * s));
        out
    }

    /// Closed-form `∇H(z)`.
    pub fn jacobian_analytic(&self, z: &[f64]) -> DenseMatrix {
        let d = self.dims;
        let [o_nu, o_mu, o_l, o_g, o_sl, o_sg] = d.offsets();
        let (nx, np, na) = (d.n_states, d.n_pairs, self.n_actions);
        let (m1, m2) = (d.m1, d.m2);
        let nu = &z[o_nu..o_mu];
        let mu = &z[o_mu..o_l];
        let lam = &z[o_l..o_g];
        let gam = &z[o_g..o_sl];
        let sl = &z[o_sl..o_sg];
        let sg = &z[o_sg..];
        let beta = self.beta;
        let p = self.kernel(mu);
        let lam_bot = &lam[np..];
        let gam_c = &gam[nx + 1..];
        let dp = |xa: usize, y: usize, z_: usize| self.dp[(xa * nx + y) * nx + z_];

        let mut j = DenseMatrix::zeros(d.len(), d.len());
        // F_ν rows
        for xa in 0..np {
            let x = xa / na;
            for z_ in 0..nx {
                let s: f64 = (0..nx).map(|y| lam_bot[y] * dp(xa, y, z_)).sum();
                j[(xa, o_mu + z_)] = self.dc[xa * nx + z_] + beta * s;
            }
            j[(xa, o_l + xa)] = -1.0;
            j[(xa, o_l + np + x)] -= 1.0;
            for y in 0..nx {
                j[(xa, o_l + np + y)] += beta * p[xa * nx + y];
            }
        }
        // F_μ rows
        for z_ in 0..nx {
            let r = np + z_;
            for xa in 0..np {
                let s: f64 = (0..nx).map(|y| gam_c[y] * dp(xa, y, z_)).sum();
                j[(r, o_nu + xa)] = self.dc[xa * nx + z_] + s;
            }
            if let SecondPlayerObjective::Proximal { weight } = self.second_player {
                j[(r, o_mu + z_)] = weight;
            }
            j[(r, o_g + z_)] = -1.0;
            j[(r, o_g + nx)] = -1.0;
            j[(r, o_g + nx + 1 + z_)] -= 1.0;
            for y in 0..nx {
                let s: f64 = (0..np).map(|xa| nu[xa] * dp(xa, y, z_)).sum();
                j[(r, o_g + nx + 1 + y)] += s;
            }
        }
        // h1 + λ̄
        let base = d.n();
        for xa in 0..np {
            j[(base + xa, o_nu + xa)] = -1.0;
        }
        for y in 0..nx {
            let r = base + np + y;
            for xa in 0..np {
                let own = if xa / na == y { 1.0 } else { 0.0 };
                j[(r, o_nu + xa)] = -own + beta * p[xa * nx + y];
            }
            for z_ in 0..nx {
                let s: f64 = (0..np).map(|xa| nu[xa] * dp(xa, y, z_)).sum();
                let id = if y == z_ { 1.0 - beta } else { 0.0 };
                j[(r, o_mu + z_)] = id + beta * s;
            }
        }
        for i in 0..m1 {
            j[(base + i, o_sl + i)] = 1.0;
        }
        // h2 + γ̄
        let base2 = base + m1;
        for z_ in 0..nx {
            j[(base2 + z_, o_mu + z_)] = -1.0;
            j[(base2 + nx, o_mu + z_)] = -1.0;
        }
        for y in 0..nx {
            let r = base2 + nx + 1 + y;
            for xa in 0..np {
                j[(r, o_nu + xa)] = p[xa * nx + y];
            }
            for z_ in 0..nx {
                let s: f64 = (0..np).map(|xa| nu[xa] * dp(xa, y, z_)).sum();
                j[(r, o_mu + z_)] = s - if y == z_ { 1.0 } else { 0.0 };
            }
        }
        for i in 0..m2 {
            j[(base2 + i, o_sg + i)] = 1.0;
        }
        // complementarity
        let base3 = base + m1 + m2;
        for i in 0..m1 {
            j[(base3 + i, o_l + i)] = sl[i];
            j[(base3 + i, o_sl + i)] = lam[i];
        }
        for i in 0..m2 {
            j[(base3 + m1 + i, o_g + i)] = sg[i];
            j[(base3 + m1 + i, o_sg + i)] = gam[i];
        }
        j
    }

    pub fn jacobian(&self, z: &[f64], config: &GnepConfig) -> Result<DenseMatrix> {
        match config.jacobian {
            JacobianMode::Analytic => Ok(self.jacobian_analytic(z)),
            JacobianMode::FiniteDifference => {
                numerics::jacobian_fd(|w| self.evaluate(w), z, config.fd_step, config.execution)
            }
        }
    }

    /// Multiplier/slack blocks positive and `v`-block of `H` positive.
    fn admissible(&self, z: &[f64], hz: &[f64]) -> bool {
        let n = self.dims.n();
        z[n..].iter().all(|v| *v > 0.0) && hz[n..].iter().all(|v| *v > 0.0)
    }

    /// Lagrangians `(L1, L2)` at a flat iterate.
    pub fn lagrangians(&self, z: &[f64]) -> (f64, f64) {
        let d = self.dims;
        let [o_nu, o_mu, o_l, o_g, o_sl, _] = d.offsets();
        let nu = &z[o_nu..o_mu];
        let mu = &z[o_mu..o_l];
        let shared = dot(nu, &self.costs(mu));
        let (h1, h2) = self.constraints(nu, mu);
        let mut g = shared;
        if let SecondPlayerObjective::Proximal { weight } = self.second_player {
            g += 0.5 * weight * dot(mu, mu);
        }
        (shared + dot(&h1, &z[o_l..o_g]), g + dot(&h2, &z[o_g..o_sl]))
    }

    /// Newton direction `∇H⁻¹(σ⟨a, H⟩a − H)` and the slope `⟨∇ψ, d⟩`.
    pub fn newton_direction(
        &self,
        hz: &[f64],
        jac: &DenseMatrix,
        k: f64,
        config: &GnepConfig,
        iteration: usize,
    ) -> Result<NewtonStep> {
        let n = self.dims.n();
        let two_m = hz.len() - n;
        let a_scale = 1.0 / (two_m as f64).sqrt();
        let ah: f64 = hz[n..].iter().sum::<f64>() * a_scale;
        let rhs: Vec<f64> = hz
            .iter()
            .enumerate()
            .map(|(i, h)| {
                if i < n {
                    -h
                } else {
                    config.sigma * ah * a_scale - h
                }
            })
            .collect();
        let grad_psi = jac.tr_mul_vec(&potential_gradient(hz, n, k)?);

        let scale = jac.max_abs();
        let rhs_norm = norm2(&rhs);
        let lu = numerics::solve_linear(jac, &rhs)
            .ok()
            .filter(|d| scale * norm2(d) <= rhs_norm / config.pinv_rcond);
        let (direction, used_pseudo_inverse) = match lu {
            Some(d) => (d, false),
            None => (
                numerics::pseudo_inverse(jac, config.pinv_rcond).mul_vec(&rhs),
                true,
            ),
        };
        let mut step = NewtonStep {
            slope: dot(&grad_psi, &direction),
            direction,
            kind: if used_pseudo_inverse {
                StepKind::PseudoInverse
            } else {
                StepKind::Newton
            },
        };
        if step.slope >= 0.0 && step.kind == StepKind::Newton {
            let d = numerics::pseudo_inverse(jac, config.pinv_rcond).mul_vec(&rhs);
            step = NewtonStep {
                slope: dot(&grad_psi, &d),
                direction: d,
                kind: StepKind::PseudoInverse,
            };
        }
        if step.slope >= 0.0 {
            let d = numerics::pseudo_inverse(jac, FALLBACK_RCOND).mul_vec(&rhs);
            step = NewtonStep {
                slope: dot(&grad_psi, &d),
                direction: d,
                kind: StepKind::PseudoInverse,
            };
        }
        if step.slope >= 0.0 {
            let d: Vec<f64> = grad_psi.iter().map(|g| -g).collect();
            step = NewtonStep {
                slope: -dot(&grad_psi, &grad_psi),
                direction: d,
                kind: StepKind::SteepestDescent,
            };
        }
        if !(step.slope < 0.0) {
            return Err(Error::NonDescent {
                iteration,
                slope: step.slope,
            });
        }
        Ok(step)
    }

    /// Backtracking over `t = κ^l`.
    pub fn armijo_step(
        &self,
        z: &[f64],
        psi: f64,
        step: &NewtonStep,
        k: f64,
        config: &GnepConfig,
        iteration: usize,
    ) -> Result<LineSearch> {
        let n = self.dims.n();
        let mut t = 1.0;
        for l in 0..=config.max_backtracks {
            let z_next: Vec<f64> = z
                .iter()
                .zip(&step.direction)
                .map(|(a, b)| a + t * b)
                .collect();
            let h_next = self.evaluate(&z_next);
            if self.admissible(&z_next, &h_next) {
                if let Ok(psi_next) = potential(&h_next, n, k) {
                    if psi_next <= psi + config.armijo_alpha * t * step.slope {
                        return Ok(LineSearch {
                            t,
                            backtracks: l,
                            z_next,
                            h_next,
                            psi_next,
                        });
                    }
                }
            }
            t *= config.kappa;
        }
        Err(Error::LineSearchStall {
            iteration,
            backtracks: config.max_backtracks,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonStep {
    pub direction: Vec<f64>,
    /// `⟨∇ψ(z), d⟩`.
    pub slope: f64,
    pub kind: StepKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    /// LU solve of the Newton system.
    Newton,
    /// Truncated pseudo-inverse of an ill-conditioned Newton system.
    PseudoInverse,
    /// `−∇(ψ ∘ H)` when no Newton-type direction descends.
    SteepestDescent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineSearch {
    pub t: f64,
    pub backtracks: usize,
    pub z_next: Vec<f64>,
    pub h_next: Vec<f64>,
    pub psi_next: f64,
}

/// `(h1, h2)` of the two players at `(ν, μ)`.
pub fn constraints(spec: &ModelSpec, nu: &[f64], mu: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = Dimensions::of(spec);
    if nu.len() != d.n_pairs || mu.len() != d.n_states {
        return Err(Error::DimensionMismatch("constraint arguments".into()));
    }
    // The constraints do not involve θ.
    let sys = KktSystem::new(&spec_with_theta(spec), SecondPlayerObjective::SharedCost)?;
    Ok(sys.constraints(nu, mu))
}

fn spec_with_theta(spec: &ModelSpec) -> ModelSpec {
    if spec.theta().is_some() {
        spec.clone()
    } else {
        spec.clone()
            .with_theta(vec![0.0; spec.feature_dim()])
            .expect("zero weights are valid")
    }
}

/// `H(z)` with the shared-cost second player.
pub fn kkt_map(spec: &ModelSpec, z: &GnepVariables) -> Result<Vec<f64>> {
    let sys = KktSystem::new(spec, SecondPlayerObjective::SharedCost)?;
    let flat = z.to_vec();
    if flat.len() != sys.dims().len() {
        return Err(Error::DimensionMismatch(
            "iterate does not match model".into(),
        ));
    }
    Ok(sys.evaluate(&flat))
}

/// `K log(‖u‖² + ‖v‖²) − Σ log vᵢ` with `u` the first `n` entries of `hz`.
pub fn potential(hz: &[f64], n: usize, k: f64) -> Result<f64> {
    let (u, v) = hz.split_at(n);
    if let Some((i, &bad)) = v.iter().enumerate().find(|(_, x)| !(**x > 0.0)) {
        return Err(Error::BoundaryViolation {
            index: n + i,
            value: bad,
        });
    }
    let s = dot(u, u) + dot(v, v);
    Ok(k * s.ln() - v.iter().map(|x| x.ln()).sum::<f64>())
}

/// Gradient of the potential with respect to `(u, v)`.
pub fn potential_gradient(hz: &[f64], n: usize, k: f64) -> Result<Vec<f64>> {
    let (_, v) = hz.split_at(n);
    if let Some((i, &bad)) = v.iter().enumerate().find(|(_, x)| !(**x > 0.0)) {
        return Err(Error::BoundaryViolation {
            index: n + i,
            value: bad,
        });
    }
    let s = dot(hz, hz);
    Ok(hz
        .iter()
        .enumerate()
        .map(|(i, h)| {
            if i < n {
                2.0 * k * h / s
            } else {
                2.0 * k * h / s - 1.0 / h
            }
        })
        .collect())
}

/// Uniform `ν`, `μ`; unit multipliers; slacks `max(1, 1 − h)`.
pub fn initial_point(spec: &ModelSpec) -> GnepVariables {
    let d = Dimensions::of(spec);
    let nu = vec![1.0 / d.n_pairs as f64; d.n_pairs];
    let mu = vec![1.0 / d.n_states as f64; d.n_states];
    let (h1, h2) = constraints(spec, &nu, &mu).expect("dimensions agree by construction");
    GnepVariables {
        slack_lambda: h1.iter().map(|h| (1.0 - h).max(1.0)).collect(),
        slack_gamma: h2.iter().map(|h| (1.0 - h).max(1.0)).collect(),
        lambda: vec![1.0; d.m1],
        gamma: vec![1.0; d.m2],
        nu,
        mu,
    }
}

/// Runs the potential-reduction iteration from [`initial_point`].
pub fn solve_gnep(spec: &ModelSpec, config: &GnepConfig) -> Result<(Equilibrium, KktReport)> {
    solve_gnep_from(spec, config, &initial_point(spec))
}

pub fn solve_gnep_from(
    spec: &ModelSpec,
    config: &GnepConfig,
    start: &GnepVariables,
) -> Result<(Equilibrium, KktReport)> {
    config.validate()?;
    let sys = KktSystem::new(spec, config.second_player)?;
    let dims = sys.dims();
    let n = dims.n();
    let k = config.potential_constant(dims);
    let mut z = start.to_vec();
    if z.len() != dims.len() {
        return Err(Error::DimensionMismatch(
            "start point does not match model".into(),
        ));
    }
    let mut hz = sys.evaluate(&z);
    if !sys.admissible(&z, &hz) {
        return Err(Error::BadParameter("start point is not interior".into()));
    }
    let mut psi = potential(&hz, n, k)?;
    let mut report = KktReport {
        h_norm_history: vec![norm2(&hz)],
        psi_history: vec![psi],
        step_history: Vec::new(),
        residual_stationarity: 0.0,
        residual_feasibility: 0.0,
        residual_complementarity: 0.0,
        converged: false,
        iterations: 0,
        pseudo_inverse_steps: 0,
        steepest_descent_steps: 0,
    };
    for iteration in 0..config.max_iter {
        if report.h_norm_final() <= config.tol {
            break;
        }
        let jac = sys.jacobian(&z, config)?;
        let step = sys.newton_direction(&hz, &jac, k, config, iteration)?;
        match step.kind {
            StepKind::Newton => {}
            StepKind::PseudoInverse => report.pseudo_inverse_steps += 1,
            StepKind::SteepestDescent => report.steepest_descent_steps += 1,
        }
        let ls = sys.armijo_step(&z, psi, &step, k, config, iteration)?;
        z = ls.z_next;
        hz = ls.h_next;
        psi = ls.psi_next;
        report.iterations += 1;
        report.step_history.push(ls.t);
        report.h_norm_history.push(norm2(&hz));
        report.psi_history.push(psi);
        if report.iterations.is_multiple_of(1000) {
            log::debug!(
                "gnep iteration {}: ||H|| = {:e}, t = {:e}",
                report.iterations,
                report.h_norm_final(),
                ls.t
            );
        }
    }
    report.converged = report.h_norm_final() <= config.tol;
    report.residual_stationarity = norm2(&hz[..n]);
    report.residual_feasibility = norm2(&hz[n..n + dims.m()]);
    report.residual_complementarity = norm2(&hz[n + dims.m()..]);
    if !report.converged {
        return Err(Error::GnepNotConverged(Box::new(report)));
    }
    let vars = GnepVariables::from_vec(dims, &z)?;
    let equilibrium = extract_equilibrium(spec, &vars)?;
    Ok((equilibrium, report))
}

/// Policy by disintegration of `ν`, mean field from the `μ` block
/// (negative round-off clipped, renormalized), plus verification.
pub fn extract_equilibrium(spec: &ModelSpec, vars: &GnepVariables) -> Result<Equilibrium> {
    let nu: Vec<f64> = vars.nu.iter().map(|v| v.max(0.0)).collect();
    let occupation = OccupationMeasure::from_table(nu, spec.n_actions(), spec.beta())?;
    let policy = mdp::disintegrate(&occupation);
    let mu: Vec<f64> = vars.mu.iter().map(|v| v.max(0.0)).collect();
    let mean_field = SimplexVector::normalized(&mu)?;
    let res = verify_mfe(spec, &policy, &mean_field)?;
    Ok(Equilibrium {
        policy,
        mean_field,
        occupation,
        optimality_gap: res.optimality_gap,
        invariance_residual: res.invariance_residual,
    })
}

/// Optimality gap against the optimal policy of the frozen MDP and
/// invariance residual of `μ` under `π`.
pub fn verify_mfe(spec: &ModelSpec, pi: &Policy, mu: &SimplexVector) -> Result<MfeResiduals> {
    let (_, pi_opt) = mdp::value_iteration(spec, mu, 1e-13)?;
    let j_opt = mdp::discounted_cost(spec, &pi_opt, mu)?;
    let j = mdp::discounted_cost(spec, pi, mu)?;
    let t = mdp::policy_chain(spec, pi, mu);
    let moved = t.tr_mul_vec(mu);
    let invariance_residual = mu
        .iter()
        .zip(&moved)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(MfeResiduals {
        optimality_gap: (j - j_opt).max(0.0),
        optimal_cost: j_opt,
        invariance_residual,
    })
}
