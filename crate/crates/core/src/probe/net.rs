//! Probe networks over a flat parameter vector.
//!
//! Weight matrices are stored row-major as (outputs x inputs), so a slice
//! viewed column-major as (inputs x outputs) is the transpose needed for
//! `scores = X * W^T + b` with X holding one example per row.
//!
//! Layout: linear `[W (K x d) | b (K)]`; MLP `[W1 (H x d) | b1 (H) | W2 (K x H) | b2 (K)]`.
//! Binary problems use a single output logit (K = 1); C > 2 classes use K = C.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[serde(alias = "logistic")]
    Logreg,
    Mlp,
    /// Linear model trained with a hinge loss.
    Svm,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logreg" | "logistic" => Ok(ModelKind::Logreg),
            "mlp" => Ok(ModelKind::Mlp),
            "svm" => Ok(ModelKind::Svm),
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Logreg => "logreg",
            ModelKind::Mlp => "mlp",
            ModelKind::Svm => "svm",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub kind: ModelKind,
    pub dim: usize,
    pub num_classes: usize,
    /// Hidden width; ignored by linear kinds.
    pub hidden: usize,
}

impl Architecture {
    pub fn new(kind: ModelKind, dim: usize, num_classes: usize, hidden: usize) -> Self {
        Architecture {
            kind,
            dim,
            num_classes,
            hidden,
        }
    }

    pub fn outputs(&self) -> usize {
        if self.num_classes == 2 {
            1
        } else {
            self.num_classes
        }
    }

    fn first_width(&self) -> usize {
        match self.kind {
            ModelKind::Mlp => self.hidden,
            _ => self.outputs(),
        }
    }

    pub fn param_count(&self) -> usize {
        let h = self.first_width();
        let first = h * self.dim + h;
        match self.kind {
            ModelKind::Mlp => first + self.outputs() * h + self.outputs(),
            _ => first,
        }
    }

    /// Offsets of (W1, b1, W2, b2) in the flat vector.
    fn offsets(&self) -> [usize; 4] {
        let h = self.first_width();
        let w1 = 0;
        let b1 = h * self.dim;
        let w2 = b1 + h;
        let b2 = w2 + self.outputs() * h;
        [w1, b1, w2, b2]
    }

    /// Zero weights for linear kinds; uniform(+-1/sqrt(fan_in)) for the MLP.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.param_count()];
        if self.kind == ModelKind::Mlp {
            let [_, _, w2, _] = self.offsets();
            let a1 = 1.0 / (self.dim as f64).sqrt();
            let a2 = 1.0 / (self.hidden as f64).sqrt();
            for (i, v) in p.iter_mut().enumerate() {
                let a = if i < w2 { a1 } else { a2 };
                *v = rng.random_range(-a..a);
            }
        }
        p
    }

    fn is_hinge(&self) -> bool {
        self.kind == ModelKind::Svm
    }
}

struct Forward {
    /// Pre-activations of the hidden layer (MLP only).
    hidden_pre: Option<DMatrix<f64>>,
    hidden_act: Option<DMatrix<f64>>,
    scores: DMatrix<f64>,
}

fn affine(x: &DMatrix<f64>, wt: DMatrixView<'_, f64>, b: &[f64]) -> DMatrix<f64> {
    let mut z = x * wt;
    for (j, mut col) in z.column_iter_mut().enumerate() {
        col.add_scalar_mut(b[j]);
    }
    z
}

fn forward(arch: &Architecture, params: &[f64], x: &DMatrix<f64>) -> Forward {
    assert_eq!(params.len(), arch.param_count());
    assert_eq!(x.ncols(), arch.dim);
    let [w1, b1, w2, b2] = arch.offsets();
    let h = arch.first_width();
    let wt1 = DMatrixView::from_slice(&params[w1..b1], arch.dim, h);
    let z1 = affine(x, wt1, &params[b1..w2]);
    match arch.kind {
        ModelKind::Mlp => {
            let a1 = z1.map(|v| v.max(0.0));
            let wt2 = DMatrixView::from_slice(&params[w2..b2], h, arch.outputs());
            let scores = affine(&a1, wt2, &params[b2..]);
            Forward {
                hidden_pre: Some(z1),
                hidden_act: Some(a1),
                scores,
            }
        }
        _ => Forward {
            hidden_pre: None,
            hidden_act: None,
            scores: z1,
        },
    }
}

/// Raw output scores, one row per example.
pub fn scores(arch: &Architecture, params: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
    forward(arch, params, x).scores
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Softmax of one score row, shifted by its maximum.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean loss over the rows of `x` and the gradient of that mean with
/// respect to the scores.
fn loss_and_score_grad(
    arch: &Architecture,
    scores: &DMatrix<f64>,
    y: &[usize],
) -> (f64, DMatrix<f64>) {
    let n = scores.nrows();
    let k = scores.ncols();
    let inv = 1.0 / n as f64;
    let mut d = DMatrix::zeros(n, k);
    let mut total = 0.0;
    for (i, &label) in y.iter().enumerate() {
        if k == 1 {
            let z = scores[(i, 0)];
            let t = label as f64;
            if arch.is_hinge() {
                let s = 2.0 * t - 1.0;
                let margin = 1.0 - s * z;
                if margin > 0.0 {
                    total += margin;
                    d[(i, 0)] = -s * inv;
                }
            } else {
                total += softplus(z) - t * z;
                d[(i, 0)] = (sigmoid(z) - t) * inv;
            }
        } else {
            let row: Vec<f64> = (0..k).map(|j| scores[(i, j)]).collect();
            if arch.is_hinge() {
                let (rival, best) = row.iter().enumerate().filter(|&(j, _)| j != label).fold(
                    (usize::MAX, f64::NEG_INFINITY),
                    |acc, (j, &v)| {
                        if v > acc.1 {
                            (j, v)
                        } else {
                            acc
                        }
                    },
                );
                let margin = 1.0 + best - row[label];
                if margin > 0.0 {
                    total += margin;
                    d[(i, rival)] += inv;
                    d[(i, label)] -= inv;
                }
            } else {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
                total += lse - row[label];
                for j in 0..k {
                    let p = (row[j] - lse).exp();
                    d[(i, j)] = (p - if j == label { 1.0 } else { 0.0 }) * inv;
                }
            }
        }
    }
    (total * inv, d)
}

/// Mean loss over a batch.
pub fn loss(arch: &Architecture, params: &[f64], x: &DMatrix<f64>, y: &[usize]) -> f64 {
    let f = forward(arch, params, x);
    loss_and_score_grad(arch, &f.scores, y).0
}

fn bias_grad(d: &DMatrix<f64>, out: &mut [f64]) {
    for (j, col) in d.column_iter().enumerate() {
        out[j] = col.sum();
    }
}

/// Mean loss over a batch; writes the gradient of the mean into `grad`.
pub fn loss_and_grad(
    arch: &Architecture,
    params: &[f64],
    x: &DMatrix<f64>,
    y: &[usize],
    grad: &mut [f64],
) -> f64 {
    assert_eq!(grad.len(), params.len());
    assert_eq!(x.nrows(), y.len());
    let f = forward(arch, params, x);
    let (loss, dscores) = loss_and_score_grad(arch, &f.scores, y);
    let [w1, b1, w2, b2] = arch.offsets();
    let h = arch.first_width();
    match arch.kind {
        ModelKind::Mlp => {
            let a1 = f.hidden_act.as_ref().unwrap();
            let z1 = f.hidden_pre.as_ref().unwrap();
            let (g_first, g_second) = grad.split_at_mut(w2);
            {
                let (gw2, gb2) = g_second.split_at_mut(b2 - w2);
                let mut gwt2 = DMatrixViewMut::from_slice(gw2, h, arch.outputs());
                gwt2.gemm_tr(1.0, a1, &dscores, 0.0);
                bias_grad(&dscores, gb2);
            }
            let wt2 = DMatrixView::from_slice(&params[w2..b2], h, arch.outputs());
            let mut dz1 = &dscores * wt2.transpose();
            dz1.zip_apply(z1, |g, z| {
                if z <= 0.0 {
                    *g = 0.0
                }
            });
            let (gw1, gb1) = g_first.split_at_mut(b1);
            let mut gwt1 = DMatrixViewMut::from_slice(gw1, arch.dim, h);
            gwt1.gemm_tr(1.0, x, &dz1, 0.0);
            bias_grad(&dz1, gb1);
        }
        _ => {
            let (gw1, gb1) = grad.split_at_mut(b1);
            let mut gwt1 = DMatrixViewMut::from_slice(&mut gw1[w1..], arch.dim, h);
            gwt1.gemm_tr(1.0, x, &dscores, 0.0);
            bias_grad(&dscores, gb1);
        }
    }
    loss
}

/// Builds an (n x d) matrix from rows.
pub fn rows_to_matrix<T: Copy + Into<f64>>(rows: &[&[T]], dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j].into())
}
