//! Relaxation policies: residual features, normalization and a small MLP.
//!
//! The scalar policy maps six global features to one `α` used for every row
//! and for the x-block. The vector policy runs the same network once per row
//! on the five global features (without `log ρ`) followed by eight row
//! features, so it is equivariant under row permutations and works for any
//! number of constraints.

use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{PolicyInput, RelaxationPolicy, RelaxationUpdate};
use crate::error::{Error, Result};
use crate::qp::{QpProblem, Residuals};
use crate::rng::Stream;

pub const HIDDEN: usize = 64;
pub const FEATURE_EPS: f64 = 1e-8;
pub const LOG_CLAMP: f64 = 6.0;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const STD_FLOOR: f64 = 1e-6;
pub const ALPHA_MIN: f64 = 1.25;
pub const ALPHA_MAX: f64 = 1.95;

pub const GLOBAL_SCALAR_DIM: usize = 6;
pub const GLOBAL_VECTOR_DIM: usize = 5;
pub const ROW_DIM: usize = 8;

/// Rows per rayon task in the vector policy.
const ROW_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Scalar,
    Vector,
}

impl Variant {
    pub fn input_dim(self) -> usize {
        match self {
            Variant::Scalar => GLOBAL_SCALAR_DIM,
            Variant::Vector => GLOBAL_VECTOR_DIM + ROW_DIM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Scalar => "scalar",
            Variant::Vector => "vector",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(Variant::Scalar),
            "vector" => Ok(Variant::Vector),
            _ => Err(Error::Input(format!("unknown policy variant '{s}'"))),
        }
    }
}

/// `ln v` clamped to `[−6, 6]`; NaN maps to 0.
pub fn clamped_log(v: f64) -> f64 {
    let l = v.ln();
    if l.is_nan() {
        0.0
    } else {
        l.clamp(-LOG_CLAMP, LOG_CLAMP)
    }
}

/// Global residual features. `prev` is taken one stage earlier.
pub fn extract_global(now: &Residuals, prev: &Residuals, rho: f64, variant: Variant) -> Vec<f64> {
    let (r, s) = (now.r_prim_inf, now.r_dual_inf);
    let mut f = vec![
        clamped_log(r),
        clamped_log(s),
        clamped_log(r / (prev.r_prim_inf + FEATURE_EPS)),
        clamped_log(s / (prev.r_dual_inf + FEATURE_EPS)),
        clamped_log(r / (s + FEATURE_EPS)),
    ];
    if variant == Variant::Scalar {
        f.push(clamped_log(rho));
    }
    f
}

/// Features of one constraint row.
#[allow(clippy::too_many_arguments)]
pub fn extract_row(
    l: f64,
    u: f64,
    z: f64,
    r: f64,
    lambda: f64,
    r_prev: f64,
    rho: f64,
    a_row_inf: f64,
) -> [f64; ROW_DIM] {
    let sign = if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    };
    [
        clamped_log(z - l),
        clamped_log(u - z),
        clamped_log(r.abs()),
        sign,
        clamped_log(lambda.abs()),
        clamped_log(r.abs() / (r_prev.abs() + FEATURE_EPS)),
        clamped_log(rho),
        a_row_inf,
    ]
}

/// Row features for every constraint, from `r = Ax − z` now and one stage earlier.
pub fn extract_rows(
    prob: &QpProblem,
    z: &[f64],
    r: &[f64],
    lambda: &[f64],
    r_prev: &[f64],
    rho: &[f64],
) -> Vec<[f64; ROW_DIM]> {
    (0..prob.m())
        .map(|i| {
            extract_row(
                prob.l[i],
                prob.u[i],
                z[i],
                r[i],
                lambda[i],
                r_prev[i],
                rho[i],
                prob.a.row_inf_norm(i),
            )
        })
        .collect()
}

/// Per-feature affine normalization fitted on baseline rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub source: String,
    pub frozen: bool,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            source: "identity".into(),
            frozen: true,
        }
    }

    /// Population mean and standard deviation, std floored at `10⁻⁶`.
    pub fn fit(samples: &[Vec<f64>], source: impl Into<String>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Input(
                "no feature vectors to fit normalization".into(),
            ));
        };
        let dim = first.len();
        if samples.iter().any(|s| s.len() != dim) {
            return Err(Error::Dimension("feature vectors differ in length".into()));
        }
        let count = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; dim];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / count).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self {
            mean,
            std,
            source: source.into(),
            frozen: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, features: &mut [f64]) {
        for ((f, m), s) in features.iter_mut().zip(&self.mean).zip(&self.std) {
            *f = (*f - m) / s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Iter,
    Rho,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Selection>,
    pub init_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_source: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

/// Two hidden layers with LayerNorm and ELU, sigmoid head scaled to
/// `[alpha_min, alpha_max]`. Weight matrices are row-major, one row per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyCheckpoint {
    pub variant: Variant,
    pub dims: Dims,
    #[serde(rename = "W1")]
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub ln1_gain: Vec<f64>,
    pub ln1_offset: Vec<f64>,
    #[serde(rename = "W2")]
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_offset: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub metadata: CheckpointMetadata,
}

fn layer_norm_elu(h: &mut [f64], gain: &[f64], offset: &[f64]) {
    let k = h.len() as f64;
    let mean = h.iter().sum::<f64>() / k;
    let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for ((v, g), o) in h.iter_mut().zip(gain).zip(offset) {
        let t = g * (*v - mean) * inv + o;
        *v = if t > 0.0 { t } else { t.exp_m1() };
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        *o = b[i] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl PolicyCheckpoint {
    /// Fresh network: fan-in uniform hidden weights, unit gains, zero biases
    /// and a zero output layer, so every prediction is the bound midpoint.
    pub fn init(variant: Variant, norm: NormStats, seed: u64) -> Result<Self> {
        let input = variant.input_dim();
        if norm.dim() != input {
            return Err(Error::Dimension(format!(
                "normalization has {} features, the {} policy needs {input}",
                norm.dim(),
                variant.name()
            )));
        }
        let mut st = Stream::new("policy", input, seed, "init");
        let mut uniform = |len: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..len)
                .map(|_| bound * (2.0 * st.uniform() - 1.0))
                .collect()
        };
        let w1 = uniform(HIDDEN * input, input);
        let w2 = uniform(HIDDEN * HIDDEN, HIDDEN);
        let ckpt = Self {
            variant,
            dims: Dims {
                input,
                hidden1: HIDDEN,
                hidden2: HIDDEN,
            },
            w1,
            b1: vec![0.0; HIDDEN],
            ln1_gain: vec![1.0; HIDDEN],
            ln1_offset: vec![0.0; HIDDEN],
            w2,
            b2: vec![0.0; HIDDEN],
            ln2_gain: vec![1.0; HIDDEN],
            ln2_offset: vec![0.0; HIDDEN],
            w_out: vec![0.0; HIDDEN],
            b_out: 0.0,
            alpha_min: ALPHA_MIN,
            alpha_max: ALPHA_MAX,
            metadata: CheckpointMetadata {
                init_seed: seed,
                norm_source: Some(norm.source.clone()),
                ..Default::default()
            },
            norm_mean: norm.mean,
            norm_std: norm.std,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        let bad = |what: String| Err(Error::Input(format!("invalid checkpoint: {what}")));
        if d.input != self.variant.input_dim() {
            return bad(format!(
                "input width {} for the {} variant",
                d.input,
                self.variant.name()
            ));
        }
        if d.hidden1 != HIDDEN || d.hidden2 != HIDDEN {
            return bad(format!("hidden widths {}, {}", d.hidden1, d.hidden2));
        }
        let lens = [
            ("W1", self.w1.len(), d.hidden1 * d.input),
            ("b1", self.b1.len(), d.hidden1),
            ("ln1_gain", self.ln1_gain.len(), d.hidden1),
            ("ln1_offset", self.ln1_offset.len(), d.hidden1),
            ("W2", self.w2.len(), d.hidden2 * d.hidden1),
            ("b2", self.b2.len(), d.hidden2),
            ("ln2_gain", self.ln2_gain.len(), d.hidden2),
            ("ln2_offset", self.ln2_offset.len(), d.hidden2),
            ("w_out", self.w_out.len(), d.hidden2),
            ("norm_mean", self.norm_mean.len(), d.input),
            ("norm_std", self.norm_std.len(), d.input),
        ];
        if let Some((name, got, want)) = lens.iter().find(|(_, g, w)| g != w) {
            return bad(format!("{name} has {got} entries, expected {want}"));
        }
        if !(self.alpha_min == ALPHA_MIN && self.alpha_max == ALPHA_MAX) {
            return bad(format!(
                "output range [{}, {}]",
                self.alpha_min, self.alpha_max
            ));
        }
        if self.norm_std.iter().any(|s| !(*s >= STD_FLOOR)) {
            return bad("normalization std below floor".into());
        }
        if !self
            .params()
            .iter()
            .chain(&self.norm_mean)
            .all(|v| v.is_finite())
        {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn norm_stats(&self) -> NormStats {
        NormStats {
            mean: self.norm_mean.clone(),
            std: self.norm_std.clone(),
            source: self.metadata.norm_source.clone().unwrap_or_default(),
            frozen: true,
        }
    }

    /// Network output for an already normalized input.
    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        if input.len() != self.dims.input {
            return Err(Error::Dimension(format!(
                "policy input has {} entries, expected {}",
                input.len(),
                self.dims.input
            )));
        }
        let mut h1 = [0.0; HIDDEN];
        affine(&self.w1, &self.b1, input, &mut h1);
        layer_norm_elu(&mut h1, &self.ln1_gain, &self.ln1_offset);
        let mut h2 = [0.0; HIDDEN];
        affine(&self.w2, &self.b2, &h1, &mut h2);
        layer_norm_elu(&mut h2, &self.ln2_gain, &self.ln2_offset);
        let t = self.b_out + self.w_out.iter().zip(&h2).map(|(a, b)| a * b).sum::<f64>();
        let out = self.alpha_min + (self.alpha_max - self.alpha_min) * sigmoid(t);
        if !out.is_finite() {
            return Err(Error::Policy(format!(
                "non-finite output (pre-activation {t})"
            )));
        }
        Ok(out)
    }

    /// Output for raw features; normalization is applied here.
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        let mut f = features.to_vec();
        for ((v, m), s) in f.iter_mut().zip(&self.norm_mean).zip(&self.norm_std) {
            *v = (*v - m) / s;
        }
        self.forward(&f)
    }

    /// Scalar head: one `α` for every row and the x-block.
    pub fn step_scalar(&self, global: &[f64], m: usize) -> Result<RelaxationUpdate> {
        if self.variant != Variant::Scalar {
            return Err(Error::Policy(
                "vector checkpoint used as scalar policy".into(),
            ));
        }
        let alpha = self.predict(global)?;
        Ok(RelaxationUpdate {
            gamma: vec![alpha; m],
            alpha_x: alpha,
        })
    }

    /// Vector head: one forward pass per row, `alpha_x` is the row mean.
    pub fn step_vector(&self, global: &[f64], rows: &[[f64; ROW_DIM]]) -> Result<RelaxationUpdate> {
        if self.variant != Variant::Vector {
            return Err(Error::Policy(
                "scalar checkpoint used as vector policy".into(),
            ));
        }
        let eval = |row: &[f64; ROW_DIM]| {
            let mut f = [0.0; GLOBAL_VECTOR_DIM + ROW_DIM];
            f[..GLOBAL_VECTOR_DIM].copy_from_slice(global);
            f[GLOBAL_VECTOR_DIM..].copy_from_slice(row);
            self.predict(&f)
        };
        let gamma: Vec<f64> = if rows.len() > ROW_CHUNK {
            rows.par_iter()
                .with_min_len(ROW_CHUNK)
                .map(eval)
                .collect::<Result<_>>()?
        } else {
            rows.iter().map(eval).collect::<Result<_>>()?
        };
        // No rows: the x-block keeps the midpoint.
        let alpha_x = if gamma.is_empty() {
            0.5 * (self.alpha_min + self.alpha_max)
        } else {
            gamma.iter().sum::<f64>() / gamma.len() as f64
        };
        Ok(RelaxationUpdate { gamma, alpha_x })
    }

    /// Features for the current solver state in this checkpoint's layout.
    pub fn features(&self, input: &PolicyInput<'_>) -> (Vec<f64>, Vec<[f64; ROW_DIM]>) {
        policy_features(self.variant, input)
    }

    /// Trainable parameters as one flat vector.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for part in [
            &self.w1,
            &self.b1,
            &self.ln1_gain,
            &self.ln1_offset,
            &self.w2,
            &self.b2,
            &self.ln2_gain,
            &self.ln2_offset,
            &self.w_out,
        ] {
            p.extend_from_slice(part);
        }
        p.push(self.b_out);
        p
    }

    pub fn param_count(&self) -> usize {
        let d = self.dims;
        d.hidden1 * (d.input + 3) + d.hidden2 * (d.hidden1 + 3) + d.hidden2 + 1
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "{} parameters, expected {}",
                p.len(),
                self.param_count()
            )));
        }
        let mut rest = p;
        for part in [
            &mut self.w1,
            &mut self.b1,
            &mut self.ln1_gain,
            &mut self.ln1_offset,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gain,
            &mut self.ln2_offset,
            &mut self.w_out,
        ] {
            let (head, tail) = rest.split_at(part.len());
            part.copy_from_slice(head);
            rest = tail;
        }
        self.b_out = rest[0];
        Ok(())
    }
}

/// Raw (unnormalized) features for a policy query.
pub fn policy_features(
    variant: Variant,
    input: &PolicyInput<'_>,
) -> (Vec<f64>, Vec<[f64; ROW_DIM]>) {
    let state = input.state;
    let global = extract_global(
        input.residuals,
        input.prev_residuals,
        state.rho_scalar,
        variant,
    );
    let rows = match variant {
        Variant::Scalar => Vec::new(),
        Variant::Vector => extract_rows(
            input.prob,
            state.z(),
            &input.residuals.r_prim,
            state.y(),
            &input.prev_residuals.r_prim,
            state.rho.values(),
        ),
    };
    (global, rows)
}

impl RelaxationPolicy for PolicyCheckpoint {
    fn relaxation(&self, input: &PolicyInput<'_>) -> Result<RelaxationUpdate> {
        let (global, rows) = self.features(input);
        match self.variant {
            Variant::Scalar => self.step_scalar(&global, input.prob.m()),
            Variant::Vector => self.step_vector(&global, &rows),
        }
    }

    fn label(&self) -> String {
        self.variant.name().to_string()
    }
}

/// Fixed `Γ ≡ α` policy that records the features it is shown; used to fit
/// normalization statistics from baseline rollouts.
pub struct FeatureRecorder {
    variant: Variant,
    alpha: f64,
    samples: Mutex<Vec<Vec<f64>>>,
}

impl FeatureRecorder {
    pub fn new(variant: Variant, alpha: f64) -> Self {
        Self {
            variant,
            alpha,
            samples: Mutex::new(Vec::new()),
        }
    }

    pub fn into_samples(self) -> Vec<Vec<f64>> {
        self.samples.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

impl RelaxationPolicy for FeatureRecorder {
    fn relaxation(&self, input: &PolicyInput<'_>) -> Result<RelaxationUpdate> {
        let (global, rows) = policy_features(self.variant, input);
        let mut out = self.samples.lock().unwrap_or_else(|e| e.into_inner());
        match self.variant {
            Variant::Scalar => out.push(global),
            Variant::Vector => out.extend(rows.iter().map(|r| {
                let mut f = global.clone();
                f.extend_from_slice(r);
                f
            })),
        }
        Ok(RelaxationUpdate {
            gamma: vec![self.alpha; input.prob.m()],
            alpha_x: self.alpha,
        })
    }

    fn label(&self) -> String {
        format!("recorder({})", self.alpha)
    }
}

/// Normalization statistics from short `Γ ≡ 1.6` rollouts on `problems`.
pub fn fit_norm_from_rollouts(
    problems: &[QpProblem],
    cfg: &crate::engine::SolverConfig,
    variant: Variant,
    iters: usize,
    source: impl Into<String>,
) -> Result<NormStats> {
    let cfg = crate::engine::SolverConfig {
        max_iter: iters,
        ..cfg.clone()
    };
    let mut samples = Vec::new();
    for prob in problems {
        let rec = FeatureRecorder::new(variant, 1.6);
        crate::engine::solve(prob, &cfg, &rec)?;
        samples.extend(rec.into_samples());
    }
    NormStats::fit(&samples, source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{solve, SolverConfig};
    use crate::suite::random_qp;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn residuals(r: f64, s: f64) -> Residuals {
        Residuals {
            r_prim: vec![r],
            r_dual: vec![s],
            r_prim_inf: r,
            r_dual_inf: s,
            ax_inf: 0.0,
            z_inf: 0.0,
            px_inf: 0.0,
            aty_inf: 0.0,
            q_inf: 0.0,
        }
    }

    fn random_checkpoint(variant: Variant, seed: u64) -> PolicyCheckpoint {
        let mut c = PolicyCheckpoint::init(variant, NormStats::identity(variant.input_dim()), seed)
            .unwrap();
        let mut st = Stream::from_seed(seed ^ 0xabc);
        let p: Vec<f64> = c.params().iter().map(|v| v + 0.3 * st.normal()).collect();
        c.set_params(&p).unwrap();
        c
    }

    /// Independent transcription of the forward pass on nalgebra types.
    fn oracle(c: &PolicyCheckpoint, input: &[f64]) -> f64 {
        let x = DVector::from_column_slice(input);
        let w1 = DMatrix::from_row_slice(HIDDEN, c.dims.input, &c.w1);
        let w2 = DMatrix::from_row_slice(HIDDEN, HIDDEN, &c.w2);
        let ln = |h: DVector<f64>, g: &[f64], o: &[f64]| {
            let mu = h.mean();
            let var = h.map(|v| (v - mu).powi(2)).mean();
            DVector::from_iterator(
                HIDDEN,
                h.iter().enumerate().map(|(i, v)| {
                    let t = g[i] * (v - mu) / (var + 1e-5).sqrt() + o[i];
                    if t > 0.0 {
                        t
                    } else {
                        t.exp() - 1.0
                    }
                }),
            )
        };
        let h1 = ln(
            w1 * x + DVector::from_column_slice(&c.b1),
            &c.ln1_gain,
            &c.ln1_offset,
        );
        let h2 = ln(
            w2 * h1 + DVector::from_column_slice(&c.b2),
            &c.ln2_gain,
            &c.ln2_offset,
        );
        let t = DVector::from_column_slice(&c.w_out).dot(&h2) + c.b_out;
        1.25 + 0.7 / (1.0 + (-t).exp())
    }

    #[test]
    fn global_features_example() {
        let now = residuals(1.0, 1.0);
        let f = extract_global(&now, &now, 0.1, Variant::Scalar);
        assert_eq!(f.len(), 6);
        assert_eq!(&f[..2], &[0.0, 0.0]);
        for v in &f[2..5] {
            assert!(v.abs() < 1e-7);
        }
        assert!((f[5] - 0.1f64.ln()).abs() < 1e-15);
        assert_eq!(extract_global(&now, &now, 0.1, Variant::Vector).len(), 5);
        let zero = residuals(0.0, 1.0);
        assert_eq!(extract_global(&zero, &now, 0.1, Variant::Scalar)[0], -6.0);
    }

    #[test]
    fn row_features_examples() {
        let inf = f64::INFINITY;
        let f = extract_row(-inf, inf, 0.3, 0.0, 0.0, 0.0, 0.1, 1.0);
        assert_eq!((f[0], f[1]), (6.0, 6.0));
        assert_eq!(f[3], 0.0);
        let f = extract_row(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.1, 1.0);
        assert_eq!(f[0], -6.0);
        let f = extract_row(0.0, 1.0, 0.5, 0.01, 2.0, 0.1, 0.1, 3.0);
        let want = [
            0.5f64.ln(),
            0.5f64.ln(),
            0.01f64.ln(),
            1.0,
            2.0f64.ln(),
            (0.01f64 / (0.1 + 1e-8)).ln(),
            0.1f64.ln(),
            3.0,
        ];
        for (g, w) in f.iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{g} vs {w}");
        }
    }

    #[test]
    fn norm_stats() {
        let s = NormStats::fit(&[vec![0.0, 5.0], vec![2.0, 5.0]], "t").unwrap();
        assert_eq!(s.mean, vec![1.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1e-6]);
        assert!(NormStats::fit(&[], "t").is_err());
        assert_eq!(
            s,
            NormStats::fit(&[vec![0.0, 5.0], vec![2.0, 5.0]], "t").unwrap()
        );
    }

    #[test]
    fn untrained_outputs_midpoint() {
        for v in [Variant::Scalar, Variant::Vector] {
            let c = PolicyCheckpoint::init(v, NormStats::identity(v.input_dim()), 3).unwrap();
            assert_eq!(c.forward(&vec![0.7; v.input_dim()]).unwrap(), 1.6);
        }
    }

    #[test]
    fn saturated_head_stays_in_bounds() {
        let mut c = random_checkpoint(Variant::Scalar, 1);
        c.b_out = 1e300;
        assert_eq!(c.forward(&[0.0; 6]).unwrap(), 1.95);
        c.b_out = -1e300;
        assert_eq!(c.forward(&[0.0; 6]).unwrap(), 1.25);
    }

    #[test]
    fn forward_matches_oracle() {
        for (v, seed) in [(Variant::Scalar, 5), (Variant::Vector, 6)] {
            let c = random_checkpoint(v, seed);
            let mut st = Stream::from_seed(seed);
            for _ in 0..5 {
                let x = st.normals(v.input_dim());
                let got = c.forward(&x).unwrap();
                assert!((got - oracle(&c, &x)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn vector_rows_match_per_row_oracle() {
        let c = random_checkpoint(Variant::Vector, 8);
        let mut st = Stream::from_seed(2);
        let global = st.normals(5);
        let rows: Vec<[f64; 8]> = (0..3).map(|_| st.normals(8).try_into().unwrap()).collect();
        let up = c.step_vector(&global, &rows).unwrap();
        for (g, r) in up.gamma.iter().zip(&rows) {
            let x: Vec<f64> = global.iter().chain(r.iter()).copied().collect();
            assert!((g - oracle(&c, &x)).abs() < 1e-10);
        }
        let mean = up.gamma.iter().sum::<f64>() / 3.0;
        assert_eq!(up.alpha_x, mean);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let c = random_checkpoint(Variant::Vector, 4);
        let back = PolicyCheckpoint::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(
            c.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.params()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );
        assert_eq!(c, back);
        let text = c.to_json().unwrap();
        for key in ["\"W1\"", "\"ln2_offset\"", "\"norm_std\"", "\"metadata\""] {
            assert!(text.contains(key));
        }
    }

    #[test]
    fn rejects_bad_checkpoints() {
        let mut c = random_checkpoint(Variant::Scalar, 1);
        c.w1.pop();
        assert!(c.validate().is_err());
        let mut c = random_checkpoint(Variant::Scalar, 1);
        c.alpha_max = 1.99;
        assert!(c.validate().is_err());
    }

    #[test]
    fn size_transfer() {
        let c = random_checkpoint(Variant::Vector, 9);
        for (n, m) in [(50, 25), (500, 250)] {
            let prob = random_qp(n, m, 1).unwrap();
            let cfg = SolverConfig {
                max_iter: 30,
                ..SolverConfig::default()
            };
            let rep = solve(&prob, &cfg, &c).unwrap();
            assert!(rep.relaxation_updates.iter().all(|r| r.gamma.len() == m));
        }
    }

    #[test]
    fn recorder_collects_one_sample_per_stage() {
        let prob = random_qp(10, 5, 0).unwrap();
        let s = fit_norm_from_rollouts(
            &[prob],
            &SolverConfig {
                eps_abs: 1e-12,
                eps_rel: 0.0,
                ..Default::default()
            },
            Variant::Vector,
            50,
            "t",
        )
        .unwrap();
        assert_eq!(s.dim(), 13);
    }

    proptest! {
        #[test]
        fn outputs_bounded(seed in 0u64..50, x in proptest::collection::vec(-1e6f64..1e6, 6)) {
            let c = random_checkpoint(Variant::Scalar, seed);
            let a = c.forward(&x).unwrap();
            prop_assert!((1.25..=1.95).contains(&a));
        }

        #[test]
        fn rows_permute_with_outputs(seed in 0u64..20, perm_seed in 0u64..1000) {
            let c = random_checkpoint(Variant::Vector, seed);
            let mut st = Stream::from_seed(perm_seed);
            let global = st.normals(5);
            let rows: Vec<[f64; 8]> = (0..7).map(|_| st.normals(8).try_into().unwrap()).collect();
            let mut order: Vec<usize> = (0..7).collect();
            for i in (1..7).rev() {
                order.swap(i, st.index(i + 1));
            }
            let permuted: Vec<[f64; 8]> = order.iter().map(|&i| rows[i]).collect();
            let a = c.step_vector(&global, &rows).unwrap().gamma;
            let b = c.step_vector(&global, &permuted).unwrap().gamma;
            for (k, &i) in order.iter().enumerate() {
                prop_assert_eq!(a[i].to_bits(), b[k].to_bits());
            }
        }

        #[test]
        fn features_always_finite(r in prop_oneof![Just(0.0), Just(f64::INFINITY), 0.0f64..1e9],
                                  z in -1e3f64..1e3, lam in prop_oneof![Just(0.0), -1e9f64..1e9]) {
            let f = extract_row(f64::NEG_INFINITY, 0.0, z, r, lam, r, 1e-6, 2.0);
            prop_assert!(f.iter().all(|v| v.is_finite()));
            let g = extract_global(&residuals(r, r), &residuals(r, 0.0), 1e6, Variant::Scalar);
            prop_assert!(g.iter().all(|v| v.is_finite() && v.abs() <= 6.0));
        }
    }
}
