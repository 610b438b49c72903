//! Finite mean-field game instances.
//!
//! Transitions and features are affine in the mean-field term μ:
//!
//! ```text
//! p(y | x, a, μ) = P0[y][x][a] + Σ_z P1[y][x][a][z] · μ(z)
//! f(x, a, μ)_j   = F0[x][a][j] + Σ_z F1[x][a][j][z] · μ(z)
//! ```
//!
//! Costs are `c(x, a, μ) = ⟨θ, f(x, a, μ)⟩`; reward-maximizing code paths use
//! `r = -c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a probability vector.
pub const SIMPLEX_SUM_TOL: f64 = 1e-9;
/// Kernel entries in `[-NEG_CLAMP, 0)` are clamped to zero.
pub const NEG_CLAMP: f64 = 1e-12;

/// Probability vector over a finite set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Validation("empty probability vector".into()));
        }
        if let Some((i, v)) = entries
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < -NEG_CLAMP)
        {
            return Err(Error::Validation(format!(
                "probability vector entry {i} is {v}"
            )));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::Validation(format!(
                "probability vector sums to {sum}"
            )));
        }
        Ok(Self(entries.into_iter().map(|v| v.max(0.0)).collect()))
    }

    /// Rescales nonnegative weights to unit mass.
    pub fn normalized(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().map(|w| w.max(0.0)).sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::Validation(
                "cannot normalize weights with zero or non-finite mass".into(),
            ));
        }
        Ok(Self(weights.iter().map(|w| w.max(0.0) / sum).collect()))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn dirac(n: usize, at: usize) -> Self {
        let mut v = vec![0.0; n];
        v[at] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for SimplexVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for SimplexVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SimplexVector> for Vec<f64> {
    fn from(v: SimplexVector) -> Self {
        v.0
    }
}

/// Transition kernel frozen at some μ, stored as rows `p(· | x, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    n_states: usize,
    n_actions: usize,
    data: Vec<f64>,
}

impl Kernel {
    /// `p(· | x, a)`.
    pub fn row(&self, x: usize, a: usize) -> &[f64] {
        let start = (x * self.n_actions + a) * self.n_states;
        &self.data[start..start + self.n_states]
    }

    /// `p(y | x, a)`.
    pub fn prob(&self, y: usize, x: usize, a: usize) -> f64 {
        self.row(x, a)[y]
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// `(ν p)(y) = Σ_{x,a} p(y | x, a) ν(x, a)` for `ν` laid out row-major
    /// over `(x, a)`.
    pub fn push_forward(&self, nu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_states];
        for (xa, &w) in nu.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = &self.data[xa * self.n_states..(xa + 1) * self.n_states];
            for (o, p) in out.iter_mut().zip(row) {
                *o += w * p;
            }
        }
        out
    }
}

/// Features `f(x, a)` frozen at some μ.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    n_actions: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureTable {
    pub fn get(&self, x: usize, a: usize) -> &[f64] {
        let start = (x * self.n_actions + a) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Iterates `f(x, a)` in row-major `(x, a)` order.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data
            .chunks(self.dim.max(1))
            .take(self.data.len() / self.dim.max(1))
    }
}

/// Per-pair costs `c(x, a)` for a fixed μ.
#[derive(Clone, Debug, PartialEq)]
pub struct CostTable {
    n_actions: usize,
    data: Vec<f64>,
}

impl CostTable {
    pub fn get(&self, x: usize, a: usize) -> f64 {
        self.data[x * self.n_actions + a]
    }

    /// Row-major `(x, a)` layout.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
}

/// Finite MFG instance with affine μ-dependence.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    n_states: usize,
    n_actions: usize,
    feature_dim: usize,
    beta: f64,
    theta: Option<Vec<f64>>,
    state_labels: Option<Vec<f64>>,
    // ((y * X + x) * A + a)
    p0: Vec<f64>,
    // (((y * X + x) * A + a) * X + z)
    p1: Vec<f64>,
    // ((x * A + a) * k + j)
    f0: Vec<f64>,
    // (((x * A + a) * k + j) * X + z)
    f1: Vec<f64>,
}

/// Serialized form of a [`ModelSpec`]; nesting follows the index order of
/// each tensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub feature_dim: usize,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_labels: Option<Vec<f64>>,
    #[serde(rename = "P0")]
    pub p0: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "P1", default, skip_serializing_if = "Option::is_none")]
    pub p1: Option<Vec<Vec<Vec<Vec<f64>>>>>,
    #[serde(rename = "F0")]
    pub f0: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "F1", default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<Vec<Vec<Vec<Vec<f64>>>>>,
}

fn flatten3(name: &str, t: &[Vec<Vec<f64>>], dims: [usize; 3]) -> Result<Vec<f64>> {
    let bad = || {
        Error::Validation(format!(
            "{name} must have shape [{}][{}][{}]",
            dims[0], dims[1], dims[2]
        ))
    };
    if t.len() != dims[0] {
        return Err(bad());
    }
    let mut out = Vec::with_capacity(dims.iter().product());
    for a in t {
        if a.len() != dims[1] {
            return Err(bad());
        }
        for b in a {
            if b.len() != dims[2] {
                return Err(bad());
            }
            out.extend_from_slice(b);
        }
    }
    Ok(out)
}

fn flatten4(name: &str, t: &[Vec<Vec<Vec<f64>>>], dims: [usize; 4]) -> Result<Vec<f64>> {
    let bad = || {
        Error::Validation(format!(
            "{name} must have shape [{}][{}][{}][{}]",
            dims[0], dims[1], dims[2], dims[3]
        ))
    };
    if t.len() != dims[0] {
        return Err(bad());
    }
    let mut out = Vec::with_capacity(dims.iter().product());
    for a in t {
        out.extend(flatten3(name, a, [dims[1], dims[2], dims[3]]).map_err(|_| bad())?);
    }
    Ok(out)
}

fn nest3(flat: &[f64], dims: [usize; 3]) -> Vec<Vec<Vec<f64>>> {
    flat.chunks(dims[1] * dims[2])
        .map(|a| a.chunks(dims[2]).map(<[f64]>::to_vec).collect())
        .collect()
}

fn nest4(flat: &[f64], dims: [usize; 4]) -> Vec<Vec<Vec<Vec<f64>>>> {
    flat.chunks(dims[1] * dims[2] * dims[3])
        .map(|a| nest3(a, [dims[1], dims[2], dims[3]]))
        .collect()
}

impl ModelSpec {
    /// Validates a document and builds the model.
    pub fn from_document(doc: ModelDocument) -> Result<Self> {
        let (x, a, k) = (doc.n_states, doc.n_actions, doc.feature_dim);
        if x == 0 || a == 0 {
            return Err(Error::Validation(
                "n_states and n_actions must be positive".into(),
            ));
        }
        let p0 = flatten3("P0", &doc.p0, [x, x, a])?;
        let p1 = match &doc.p1 {
            Some(t) => flatten4("P1", t, [x, x, a, x])?,
            None => vec![0.0; x * x * a * x],
        };
        let f0 = flatten3("F0", &doc.f0, [x, a, k])?;
        let f1 = match &doc.f1 {
            Some(t) => flatten4("F1", t, [x, a, k, x])?,
            None => vec![0.0; x * a * k * x],
        };
        let spec = Self {
            n_states: x,
            n_actions: a,
            feature_dim: k,
            beta: doc.beta,
            theta: doc.theta,
            state_labels: doc.state_labels,
            p0,
            p1,
            f0,
            f1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_document(&self) -> ModelDocument {
        let (x, a, k) = (self.n_states, self.n_actions, self.feature_dim);
        let p1_zero = self.p1.iter().all(|v| *v == 0.0);
        let f1_zero = self.f1.iter().all(|v| *v == 0.0);
        ModelDocument {
            n_states: x,
            n_actions: a,
            feature_dim: k,
            beta: self.beta,
            theta: self.theta.clone(),
            state_labels: self.state_labels.clone(),
            p0: nest3(&self.p0, [x, x, a]),
            p1: (!p1_zero).then(|| nest4(&self.p1, [x, x, a, x])),
            f0: nest3(&self.f0, [x, a, k]),
            f1: (!f1_zero).then(|| nest4(&self.f1, [x, a, k, x])),
        }
    }

    /// Pretty-printed JSON model document.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("model document serializes")
    }

    fn validate(&self) -> Result<()> {
        let (nx, na, k) = (self.n_states, self.n_actions, self.feature_dim);
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Validation(format!(
                "beta = {} is outside (0, 1)",
                self.beta
            )));
        }
        if let Some(theta) = &self.theta {
            if theta.len() != k {
                return Err(Error::Validation(format!(
                    "theta has length {}, feature_dim is {k}",
                    theta.len()
                )));
            }
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("theta has non-finite entries".into()));
            }
        }
        if let Some(labels) = &self.state_labels {
            if labels.len() != nx {
                return Err(Error::Validation(format!(
                    "state_labels has length {}, n_states is {nx}",
                    labels.len()
                )));
            }
        }
        for (name, t) in [
            ("P0", &self.p0),
            ("P1", &self.p1),
            ("F0", &self.f0),
            ("F1", &self.f1),
        ] {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("{name} has non-finite entries")));
            }
        }
        for x in 0..nx {
            for a in 0..na {
                let sum: f64 = (0..nx).map(|y| self.p0(y, x, a)).sum();
                if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
                    return Err(Error::Validation(format!(
                        "rows of P0 at (x={x},a={a}) sum to {sum}"
                    )));
                }
                for z in 0..nx {
                    let s1: f64 = (0..nx).map(|y| self.p1(y, x, a, z)).sum();
                    if s1.abs() > SIMPLEX_SUM_TOL {
                        return Err(Error::Validation(format!(
                            "rows of P1 at (x={x},a={a},z={z}) sum to {s1}, expected 0"
                        )));
                    }
                    for y in 0..nx {
                        let v = self.p0(y, x, a) + self.p1(y, x, a, z);
                        if v < -NEG_CLAMP {
                            return Err(Error::Validation(format!(
                                "p(y={y}|x={x},a={a}) is {v} at simplex vertex mu=e_{z}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Number of state-action pairs.
    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn theta(&self) -> Option<&[f64]> {
        self.theta.as_deref()
    }

    pub fn require_theta(&self) -> Result<&[f64]> {
        self.theta().ok_or(Error::MissingTheta)
    }

    pub fn state_labels(&self) -> Option<&[f64]> {
        self.state_labels.as_deref()
    }

    pub fn with_theta(mut self, theta: Vec<f64>) -> Result<Self> {
        self.theta = Some(theta);
        self.validate()?;
        Ok(self)
    }

    pub fn without_theta(mut self) -> Self {
        self.theta = None;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        self.beta = beta;
        self.validate()?;
        Ok(self)
    }

    #[inline]
    pub fn p0(&self, y: usize, x: usize, a: usize) -> f64 {
        self.p0[(y * self.n_states + x) * self.n_actions + a]
    }

    #[inline]
    pub fn p1(&self, y: usize, x: usize, a: usize, z: usize) -> f64 {
        self.p1[((y * self.n_states + x) * self.n_actions + a) * self.n_states + z]
    }

    #[inline]
    pub fn f0(&self, x: usize, a: usize, j: usize) -> f64 {
        self.f0[(x * self.n_actions + a) * self.feature_dim + j]
    }

    #[inline]
    pub fn f1(&self, x: usize, a: usize, j: usize, z: usize) -> f64 {
        self.f1[((x * self.n_actions + a) * self.feature_dim + j) * self.n_states + z]
    }

    /// True when some transition probability depends on μ.
    pub fn has_mu_dependent_transitions(&self) -> bool {
        self.p1.iter().any(|v| *v != 0.0)
    }

    /// `∂c(x, a, μ)/∂μ(z) = Σ_j θ_j F1[x][a][j][z]`.
    pub fn cost_mu_derivative(&self, x: usize, a: usize, z: usize) -> Result<f64> {
        let theta = self.require_theta()?;
        Ok((0..self.feature_dim)
            .map(|j| theta[j] * self.f1(x, a, j, z))
            .sum())
    }

    /// Affine kernel evaluation at an arbitrary (not necessarily
    /// probability) vector. Entries in `[-NEG_CLAMP, 0)` are clamped.
    pub fn kernel_at(&self, mu: &[f64]) -> Kernel {
        assert_eq!(mu.len(), self.n_states, "mean-field length mismatch");
        let (nx, na) = (self.n_states, self.n_actions);
        let mut data = vec![0.0; nx * na * nx];
        let mu_dependent = self.has_mu_dependent_transitions();
        for x in 0..nx {
            for a in 0..na {
                let row = &mut data[(x * na + a) * nx..(x * na + a + 1) * nx];
                for (y, out) in row.iter_mut().enumerate() {
                    let mut v = self.p0(y, x, a);
                    if mu_dependent {
                        v += (0..nx).map(|z| self.p1(y, x, a, z) * mu[z]).sum::<f64>();
                    }
                    if (-NEG_CLAMP..0.0).contains(&v) {
                        v = 0.0;
                    }
                    *out = v;
                }
            }
        }
        Kernel {
            n_states: nx,
            n_actions: na,
            data,
        }
    }

    pub fn features_at(&self, mu: &[f64]) -> FeatureTable {
        assert_eq!(mu.len(), self.n_states, "mean-field length mismatch");
        let (nx, na, k) = (self.n_states, self.n_actions, self.feature_dim);
        let mut data = Vec::with_capacity(nx * na * k);
        for x in 0..nx {
            for a in 0..na {
                for j in 0..k {
                    let lin: f64 = (0..nx).map(|z| self.f1(x, a, j, z) * mu[z]).sum();
                    data.push(self.f0(x, a, j) + lin);
                }
            }
        }
        FeatureTable {
            n_actions: na,
            dim: k,
            data,
        }
    }

    pub fn costs_at(&self, mu: &[f64]) -> Result<CostTable> {
        let theta = self.require_theta()?;
        let f = self.features_at(mu);
        Ok(CostTable {
            n_actions: self.n_actions,
            data: f
                .iter()
                .map(|fx| fx.iter().zip(theta).map(|(a, b)| a * b).sum())
                .collect(),
        })
    }
}

/// `p(y | x, a, μ)` at a probability vector μ.
pub fn transition_kernel(spec: &ModelSpec, mu: &SimplexVector) -> Kernel {
    spec.kernel_at(mu)
}

pub fn feature_table(spec: &ModelSpec, mu: &SimplexVector) -> FeatureTable {
    spec.features_at(mu)
}

pub fn cost_table(spec: &ModelSpec, mu: &SimplexVector) -> Result<CostTable> {
    spec.costs_at(mu)
}

/// Parses and validates a JSON model document.
pub fn load_model(document: &str) -> Result<ModelSpec> {
    let doc: ModelDocument =
        serde_json::from_str(document).map_err(|e| Error::Parse(e.to_string()))?;
    ModelSpec::from_document(doc)
}

/// The malware-spread models: two states (healthy/infected) or ten states on
/// the grid `{0, 0.1, …, 0.9}`. Action 0 does nothing, action 1 repairs.
/// Features are `(x, x · m(μ), a)` with `m(μ) = μ(1)` for two states and the
/// label-weighted mean of μ for ten states.
pub fn builtin_malware(
    n_states: usize,
    theta: &[f64],
    q: Option<f64>,
    beta: f64,
) -> Result<ModelSpec> {
    if theta.len() != 3 {
        return Err(Error::BadParameter(format!(
            "malware models take 3 weights, got {}",
            theta.len()
        )));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::BadParameter(format!(
            "beta = {beta} is outside (0, 1)"
        )));
    }
    let labels: Vec<f64> = match n_states {
        2 => vec![0.0, 1.0],
        10 => (0..10).map(|i| i as f64 / 10.0).collect(),
        n => {
            return Err(Error::BadParameter(format!(
                "malware model with {n} states is not defined (use 2 or 10)"
            )))
        }
    };
    let nx = n_states;
    let na = 2;
    let k = 3;
    let mut p0 = vec![vec![vec![0.0; na]; nx]; nx];
    if nx == 2 {
        let q = match q {
            Some(q) if q > 0.0 && q < 1.0 => q,
            Some(q) => {
                return Err(Error::BadParameter(format!(
                    "infection probability q = {q} is outside (0, 1)"
                )))
            }
            None => {
                return Err(Error::BadParameter(
                    "the two-state model needs an infection probability q".into(),
                ))
            }
        };
        p0[0][0][0] = 1.0 - q;
        p0[1][0][0] = q;
        p0[1][1][0] = 1.0;
        p0[0][0][1] = 1.0;
        p0[0][1][1] = 1.0;
    } else {
        for x in 0..nx {
            let w = 1.0 / (nx - x) as f64;
            for row in p0.iter_mut().skip(x) {
                row[x][0] = w;
            }
            p0[0][x][1] = 1.0;
        }
    }
    let mut f0 = vec![vec![vec![0.0; k]; na]; nx];
    let mut f1 = vec![vec![vec![vec![0.0; nx]; k]; na]; nx];
    for x in 0..nx {
        for a in 0..na {
            f0[x][a][0] = labels[x];
            f0[x][a][2] = a as f64;
            for z in 0..nx {
                f1[x][a][1][z] = if nx == 2 {
                    if z == 1 {
                        labels[x]
                    } else {
                        0.0
                    }
                } else {
                    labels[x] * labels[z]
                };
            }
        }
    }
    ModelSpec::from_document(ModelDocument {
        n_states: nx,
        n_actions: na,
        feature_dim: k,
        beta,
        theta: Some(theta.to_vec()),
        state_labels: Some(labels),
        p0,
        p1: None,
        f0,
        f1: Some(f1),
    })
}
