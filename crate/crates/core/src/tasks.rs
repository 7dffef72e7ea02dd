//! Synthetic datasets: logistic-map trajectories rendered as tokens, and a regression
//! task whose target adds a non-linear teacher to the student's own frozen output.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Model, ModelMode};
use crate::nn::{silu, Mode};
use crate::rng::{streams, RngState};
use crate::tensor::Tensor;

/// Decimal places used when rendering trajectory values.
pub const TRAJECTORY_DECIMALS: u32 = 4;

fn round_to(x: f64, decimals: u32) -> f64 {
    let f = 10f64.powi(decimals as i32);
    (x * f).round() / f
}

/// Iterates `x ← r·x·(1 − x)` `n` times from `x0`.
///
/// With `step_decimals = Some(d)` every iterate is rounded to `d` decimals before it
/// feeds the next step, which is how a hand computation carried at fixed precision
/// proceeds. `None` keeps full precision.
pub fn logistic_map(r: f64, x0: f64, n: usize, step_decimals: Option<u32>) -> Result<Vec<f64>> {
    if !(0.0..=4.0).contains(&r) {
        return Err(Error::Domain(format!("logistic parameter r = {r} outside [0, 4]")));
    }
    if !(0.0..=1.0).contains(&x0) {
        return Err(Error::Domain(format!("initial state x0 = {x0} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(n + 1);
    let mut x = x0;
    out.push(x);
    for _ in 0..n {
        x = r * x * (1.0 - x);
        if let Some(d) = step_decimals {
            x = round_to(x, d);
        }
        out.push(x);
    }
    Ok(out)
}

/// A run of identical values (at the given display precision).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Collapse {
    pub start: usize,
    pub length: usize,
    pub value: f64,
}

/// Finds the first run of at least `min_run` consecutive values that agree at
/// `decimals` places.
pub fn detect_state_collapse(values: &[f64], decimals: u32, min_run: usize) -> Option<Collapse> {
    let min_run = min_run.max(2);
    let keys: Vec<i64> = values
        .iter()
        .map(|v| (v * 10f64.powi(decimals as i32)).round() as i64)
        .collect();
    let mut start = 0;
    for i in 1..=keys.len() {
        if i == keys.len() || keys[i] != keys[start] {
            if i - start >= min_run {
                return Some(Collapse {
                    start,
                    length: i - start,
                    value: round_to(values[start], decimals),
                });
            }
            start = i;
        }
    }
    None
}

/// Token ids of the trajectory vocabulary: digits `0-9`, then `.`, then the step separator `;`.
pub mod vocab {
    pub const DOT: usize = 10;
    pub const SEP: usize = 11;
    pub const SIZE: usize = 12;
}

/// Renders values as `d.dddd;` groups.
pub fn render(values: &[f64]) -> String {
    let mut s = String::new();
    for v in values {
        write!(s, "{:.*};", TRAJECTORY_DECIMALS as usize, v).expect("writing to a String");
    }
    s
}

pub fn tokenize(values: &[f64]) -> Result<Vec<usize>> {
    if let Some(v) = values.iter().find(|v| !(0.0..=9.99995).contains(*v)) {
        return Err(Error::Domain(format!("value {v} cannot be rendered in the trajectory vocabulary")));
    }
    Ok(render(values)
        .chars()
        .map(|c| match c {
            '.' => vocab::DOT,
            ';' => vocab::SEP,
            d => d.to_digit(10).expect("rendered digits") as usize,
        })
        .collect())
}

pub fn detokenize(tokens: &[usize]) -> Result<Vec<f64>> {
    let mut text = String::with_capacity(tokens.len());
    for &t in tokens {
        text.push(match t {
            0..=9 => char::from(b'0' + t as u8),
            vocab::DOT => '.',
            vocab::SEP => ';',
            _ => return Err(Error::Input(format!("token {t} outside the trajectory vocabulary"))),
        });
    }
    text.split(';')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Input(format!("{s:?} is not a rendered value")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryParams {
    pub r_range: (f64, f64),
    pub x0_range: (f64, f64),
    pub n_steps: usize,
    pub count: usize,
    pub test_fraction: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        TrajectoryParams {
            r_range: (3.4, 3.9),
            x0_range: (0.05, 0.95),
            n_steps: 8,
            count: 512,
            test_fraction: 0.2,
        }
    }
}

/// Token sequences split into disjoint train and test sets.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub task_id: String,
    pub seed: u64,
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

/// Samples `(r, x0)` pairs, renders each trajectory (values rounded per step to four
/// places) and splits the distinct sequences into train and test.
pub fn trajectory_sequences(params: &TrajectoryParams, seed: u64) -> Result<SequenceDataset> {
    let (rl, rh) = params.r_range;
    let (xl, xh) = params.x0_range;
    if !(0.0 <= rl && rl <= rh && rh <= 4.0) || !(0.0 <= xl && xl <= xh && xh <= 1.0) {
        return Err(Error::Config("trajectory ranges must lie within r ∈ [0, 4], x0 ∈ [0, 1]".into()));
    }
    if !(0.0..1.0).contains(&params.test_fraction) {
        return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
    }
    let mut rng = RngState::new(seed, streams::TASK);
    let mut seen = BTreeSet::new();
    let mut all = Vec::with_capacity(params.count);
    for _ in 0..params.count {
        let r = round_to(rng.uniform(rl, rh), 3);
        let x0 = round_to(rng.uniform(xl, xh), TRAJECTORY_DECIMALS);
        let traj = logistic_map(r, x0, params.n_steps, Some(TRAJECTORY_DECIMALS))?;
        let toks = tokenize(&traj)?;
        if seen.insert(toks.clone()) {
            all.push(toks);
        }
    }
    let order = rng.permutation(all.len());
    let n_test = (all.len() as f64 * params.test_fraction).round() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, idx) in order.into_iter().enumerate() {
        if i < n_test {
            test.push(all[idx].clone());
        } else {
            train.push(all[idx].clone());
        }
    }
    Ok(SequenceDataset {
        task_id: "logistic_trajectories".into(),
        seed,
        train,
        test,
    })
}

/// Shifted next-token pairs: inputs drop the last token, targets drop the first.
pub fn next_token_pairs(seqs: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let inputs = seqs.iter().map(|s| s[..s.len().saturating_sub(1)].to_vec()).collect();
    let targets = seqs.iter().flat_map(|s| s.iter().skip(1).copied()).collect();
    (inputs, targets)
}

impl SequenceDataset {
    /// Writes `train.txt` and `test.txt`, one rendered sequence per line.
    pub fn export(&self, dir: &Path) -> Result<()> {
        for (name, split) in [("train.txt", &self.train), ("test.txt", &self.test)] {
            let mut text = String::new();
            for s in split {
                text.push_str(&render(&detokenize(s)?));
                text.push('\n');
            }
            crate::io::write_atomic(&dir.join(name), text.as_bytes())?;
        }
        Ok(())
    }

    pub fn import(dir: &Path, task_id: &str, seed: u64) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<Vec<usize>>> {
            let text = std::fs::read_to_string(dir.join(name))?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    let values = detokenize(&tokenize_text(l.trim())?)?;
                    tokenize(&values)
                })
                .collect()
        };
        Ok(SequenceDataset {
            task_id: task_id.into(),
            seed,
            train: read("train.txt")?,
            test: read("test.txt")?,
        })
    }
}

fn tokenize_text(s: &str) -> Result<Vec<usize>> {
    s.chars()
        .map(|c| match c {
            '.' => Ok(vocab::DOT),
            ';' => Ok(vocab::SEP),
            d if d.is_ascii_digit() => Ok(d as usize - '0' as usize),
            _ => Err(Error::Input(format!("character {c:?} outside the trajectory vocabulary"))),
        })
        .collect()
}

/// `T(x) = V·silu(U·x)` with fixed random `U: hidden × in`, `V: out × hidden`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub u: Tensor,
    pub v: Tensor,
}

impl Teacher {
    /// Row-wise evaluation: `x: N × in` → `N × out`.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let hidden = silu(&x.matmul_t(&self.u)?);
        hidden.matmul_t(&self.v)
    }

    pub fn scaled(&self, c: f64) -> Teacher {
        Teacher {
            u: self.u.clone(),
            v: self.v.scale(c),
        }
    }
}

/// `U ~ N(0, gain²/in)`, `V ~ N(0, 1/hidden)`.
pub fn nonlinear_teacher(seed: u64, in_dim: usize, out_dim: usize, hidden: usize, hidden_gain: f64) -> Result<Teacher> {
    if in_dim == 0 || out_dim == 0 || hidden == 0 {
        return Err(Error::Config("teacher dimensions must be at least 1".into()));
    }
    let mut rng = RngState::new(seed, streams::TEACHER);
    let u = rng.normal_tensor(&[hidden, in_dim], hidden_gain / (in_dim as f64).sqrt());
    let v = rng.normal_tensor(&[out_dim, hidden], 1.0 / (hidden as f64).sqrt());
    Ok(Teacher { u, v })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherTaskParams {
    pub n_train: usize,
    pub n_test: usize,
    pub hidden: usize,
    pub hidden_gain: f64,
    /// Share of total target variance carried by the teacher term.
    pub residual_fraction: f64,
    /// Input covariance eigenvalues decay as `i^(−input_decay)`; 0 gives isotropic inputs.
    pub input_decay: f64,
}

impl Default for TeacherTaskParams {
    fn default() -> Self {
        TeacherTaskParams {
            n_train: 4096,
            n_test: 1024,
            hidden: 32,
            hidden_gain: 4.0,
            residual_fraction: 0.25,
            input_decay: 2.0,
        }
    }
}

/// Feature regression data with inputs `N × k` and targets `N × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionDataset {
    pub task_id: String,
    pub seed: u64,
    pub train_x: Tensor,
    pub train_y: Tensor,
    pub test_x: Tensor,
    pub test_y: Tensor,
    /// Targets minus the frozen model's output, used by the floor oracle.
    pub train_residual: Tensor,
    pub test_residual: Tensor,
}

/// Orthonormal matrix from modified Gram–Schmidt on a Gaussian draw.
fn random_orthogonal(n: usize, rng: &mut RngState) -> Tensor {
    let g = rng.normal_tensor(&[n, n], 1.0);
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| g.at(i, j)).collect()).collect();
    for j in 0..n {
        for p in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let dot: f64 = done[p].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
            for (x, q) in rest[0].iter_mut().zip(&done[p]) {
                *x -= dot * q;
            }
        }
        let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|x| *x /= norm);
    }
    let mut data = vec![0.0; n * n];
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            data[i * n + j] = x;
        }
    }
    Tensor::new(vec![n, n], data).expect("square")
}

/// Draws `N × dim` inputs with covariance `Q·diag(λ)·Qᵀ`, `λ_i ∝ i^(−decay)` normalized to mean 1.
pub fn anisotropic_inputs(n: usize, dim: usize, decay: f64, basis: &Tensor, rng: &mut RngState) -> Result<Tensor> {
    let lambda: Vec<f64> = (1..=dim).map(|i| (i as f64).powf(-decay)).collect();
    let mean = lambda.iter().sum::<f64>() / dim as f64;
    let scale: Vec<f64> = lambda.iter().map(|l| (l / mean).sqrt()).collect();
    let mut z = rng.normal_tensor(&[n, dim], 1.0);
    for i in 0..n {
        for (j, s) in scale.iter().enumerate() {
            z.data_mut()[i * dim + j] *= s;
        }
    }
    // rows are z·diag(√λ)·Qᵀ
    z.matmul_t(basis)
}

fn centered_second_moment(a: &Tensor) -> f64 {
    let (n, d) = (a.rows(), a.cols());
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| a.at(i, j)).sum::<f64>() / n as f64;
        total += (0..n).map(|i| (a.at(i, j) - mean).powi(2)).sum::<f64>();
    }
    total / n as f64
}

fn centered_cross_moment(a: &Tensor, b: &Tensor) -> f64 {
    let (n, d) = (a.rows(), a.cols());
    let mut total = 0.0;
    for j in 0..d {
        let ma = (0..n).map(|i| a.at(i, j)).sum::<f64>() / n as f64;
        let mb = (0..n).map(|i| b.at(i, j)).sum::<f64>() / n as f64;
        total += (0..n).map(|i| (a.at(i, j) - ma) * (b.at(i, j) - mb)).sum::<f64>();
    }
    total / n as f64
}

/// Builds the regression task `f(x) = frozen(x) + c·T(x)` for a regressor-mode model.
///
/// `c` is chosen on the training inputs so that `c·T` carries `residual_fraction` of
/// the total target variance. A `hidden_gain` of zero leaves a purely linear target.
pub fn teacher_task(model: &Model, params: &TeacherTaskParams, seed: u64) -> Result<RegressionDataset> {
    let cfg = model.config();
    if cfg.mode != ModelMode::Regressor {
        return Err(Error::Config("the teacher task needs a regressor-mode model".into()));
    }
    if params.n_train == 0 || params.n_test == 0 {
        return Err(Error::Config("teacher task needs non-empty train and test splits".into()));
    }
    if !(0.0..1.0).contains(&params.residual_fraction) {
        return Err(Error::Config("residual_fraction must lie in [0, 1)".into()));
    }
    let d = cfg.d_model;
    let mut rng = RngState::new(seed, streams::TASK);
    let basis = random_orthogonal(d, &mut rng);
    let train_x = anisotropic_inputs(params.n_train, d, params.input_decay, &basis, &mut rng)?;
    let test_x = anisotropic_inputs(params.n_test, d, params.input_decay, &basis, &mut rng)?;

    let bare = crate::model::Model::new(model.backbone().clone());
    let mut probe = RngState::new(seed, streams::PROBE);
    let frozen_train = bare.forward(Batch::Features(&train_x), Mode::Eval, &mut probe)?;
    let frozen_test = bare.forward(Batch::Features(&test_x), Mode::Eval, &mut probe)?;

    let teacher = nonlinear_teacher(seed, d, cfg.output_dim(), params.hidden, params.hidden_gain)?;
    let t_train = teacher.eval(&train_x)?;
    let vt = centered_second_moment(&t_train);
    let c = if vt == 0.0 || params.residual_fraction == 0.0 {
        0.0
    } else {
        // solve c²·vt = f·(vg + 2c·cov + c²·vt) for the positive root
        let f = params.residual_fraction;
        let vg = centered_second_moment(&frozen_train);
        let cov = centered_cross_moment(&frozen_train, &t_train);
        let (qa, qb, qc) = ((1.0 - f) * vt, -2.0 * f * cov, -f * vg);
        (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa)
    };
    let teacher = teacher.scaled(c);
    let train_residual = teacher.eval(&train_x)?;
    let test_residual = teacher.eval(&test_x)?;
    Ok(RegressionDataset {
        task_id: "nonlinear_teacher".into(),
        seed,
        train_y: frozen_train.add(&train_residual)?,
        test_y: frozen_test.add(&test_residual)?,
        train_x,
        test_x,
        train_residual,
        test_residual,
    })
}

/// Solves `(A + ridge·I)·X = B` for symmetric positive semi-definite `A: n × n`, `B: n × m`.
fn cholesky_solve(a: &Tensor, b: &Tensor, ridge: f64) -> Result<Tensor> {
    let n = a.rows();
    let m = b.cols();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j) + if i == j { ridge } else { 0.0 };
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::Numeric(format!(
                        "normal matrix is not positive definite at pivot {i} (ridge {ridge})"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut x = b.data().to_vec();
    for c in 0..m {
        for i in 0..n {
            let mut s = x[i * m + c];
            for p in 0..i {
                s -= l[i * n + p] * x[p * m + c];
            }
            x[i * m + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i * m + c];
            for p in i + 1..n {
                s -= l[p * n + i] * x[p * m + c];
            }
            x[i * m + c] = s / l[i * n + i];
        }
    }
    Tensor::new(vec![n, m], x)
}

/// Least-squares map `L` minimizing `‖R − X·Lᵀ‖² + ridge·‖L‖²`; returns `Lᵀ` (`k × d`).
pub fn least_squares_map(x: &Tensor, r: &Tensor, ridge: f64) -> Result<Tensor> {
    if x.rows() != r.rows() {
        return Err(Error::shape("least_squares_map", format!("{} inputs for {} targets", x.rows(), r.rows())));
    }
    let xtx = x.transpose()?.matmul(x)?;
    let xtr = x.transpose()?.matmul(r)?;
    cholesky_solve(&xtx, &xtr, ridge)
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.sub(b)?;
    Ok(diff.data().iter().map(|x| x * x).sum::<f64>() / diff.len().max(1) as f64)
}

/// Default conditioning term of the floor oracle.
pub const FLOOR_RIDGE: f64 = 1e-9;

/// Test MSE of the best linear map from inputs to residual targets, fitted on train.
///
/// Every linear weight-level update acting on the same inputs is some such map, so no
/// linear adapter can go below this value on the test split (up to the ridge term).
pub fn linear_floor(ds: &RegressionDataset, ridge: f64) -> Result<f64> {
    let lt = least_squares_map(&ds.train_x, &ds.train_residual, ridge)?;
    mse(&ds.test_x.matmul(&lt)?, &ds.test_residual)
}

/// Train-split counterpart of [`linear_floor`].
pub fn linear_floor_train(ds: &RegressionDataset, ridge: f64) -> Result<f64> {
    let lt = least_squares_map(&ds.train_x, &ds.train_residual, ridge)?;
    mse(&ds.train_x.matmul(&lt)?, &ds.train_residual)
}

impl RegressionDataset {
    pub fn in_dim(&self) -> usize {
        self.train_x.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.train_y.cols()
    }

    /// Rows of a split as a feature batch and its targets.
    pub fn rows(&self, test: bool, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let (x, y) = if test {
            (&self.test_x, &self.test_y)
        } else {
            (&self.train_x, &self.train_y)
        };
        let gather = |t: &Tensor| -> Result<Tensor> {
            let c = t.cols();
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= t.rows() {
                    return Err(Error::Input(format!("row {i} outside split of {}", t.rows())));
                }
                out.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![idx.len(), c], out)
        };
        Ok((gather(x)?, gather(y)?))
    }

    /// CSV with columns `split, x0.., y0..`.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["split".to_string()];
        header.extend((0..self.in_dim()).map(|i| format!("x{i}")));
        header.extend((0..self.out_dim()).map(|i| format!("y{i}")));
        w.write_record(&header)?;
        for (name, x, y) in [("train", &self.train_x, &self.train_y), ("test", &self.test_x, &self.test_y)] {
            for i in 0..x.rows() {
                let mut rec = vec![name.to_string()];
                rec.extend(x.row(i).iter().map(|v| format!("{v:e}")));
                rec.extend(y.row(i).iter().map(|v| format!("{v:e}")));
                w.write_record(&rec)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        crate::io::write_atomic(path, &bytes)
    }

    /// Reads a CSV written by [`RegressionDataset::export_csv`]. Residuals are not stored,
    /// so they come back equal to the targets.
    pub fn import_csv(path: &Path, in_dim: usize, task_id: &str, seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let width = r.headers()?.len();
        if width < in_dim + 2 {
            return Err(Error::Input(format!("{} has only {width} columns", path.display())));
        }
        let out_dim = width - 1 - in_dim;
        let mut parts: [(Vec<f64>, Vec<f64>); 2] = Default::default();
        for rec in r.records() {
            let rec = rec?;
            let slot = match &rec[0] {
                "train" => 0,
                "test" => 1,
                other => return Err(Error::Input(format!("unknown split {other:?}"))),
            };
            for (j, field) in rec.iter().skip(1).enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Input(format!("{field:?} is not a number")))?;
                if j < in_dim {
                    parts[slot].0.push(v);
                } else {
                    parts[slot].1.push(v);
                }
            }
        }
        let [(trx, try_), (tex, tey)] = parts;
        let t = |d: Vec<f64>, c: usize| Tensor::new(vec![d.len() / c.max(1), c], d);
        let train_y = t(try_, out_dim)?;
        let test_y = t(tey, out_dim)?;
        Ok(RegressionDataset {
            task_id: task_id.into(),
            seed,
            train_x: t(trx, in_dim)?,
            test_x: t(tex, in_dim)?,
            train_residual: train_y.clone(),
            test_residual: test_y.clone(),
            train_y,
            test_y,
        })
    }
}
