//! Sigmoid contrastive objectives: the supervised class loss against text
//! targets, the self-supervised loss against descriptors of unseen views, and
//! the semantic class mask that turns same-class pairs into positives.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// ±1 targets for every (fused descriptor, target) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SignMatrix {
    rows: usize,
    cols: usize,
    z: Vec<f64>,
}

impl SignMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.z[i * self.cols + j]
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.cols, self.z.clone())
    }

    pub fn flip(&mut self, i: usize, j: usize) {
        self.z[i * self.cols + j] *= -1.0;
    }
}

/// Column `j` belongs to batch instance `owners[j]`. A pair `(i, j)` is
/// positive when `owners[j] == i`, or, with the class mask enabled, when
/// instance `i` and instance `owners[j]` share a class.
pub fn build_sign_matrix(class_ids: &[i64], owners: &[usize], class_mask: bool) -> Result<SignMatrix> {
    let rows = class_ids.len();
    let cols = owners.len();
    if let Some(&bad) = owners.iter().find(|&&o| o >= rows) {
        return Err(Error::Contract(format!(
            "target owner {bad} outside batch of {rows}"
        )));
    }
    let mut z = vec![-1.0; rows * cols];
    for i in 0..rows {
        for (j, &o) in owners.iter().enumerate() {
            if o == i || (class_mask && class_ids[i] == class_ids[o]) {
                z[i * cols + j] = 1.0;
            }
        }
    }
    Ok(SignMatrix { rows, cols, z })
}

/// Owners for the class loss: target `j` is instance `j`'s own text embedding.
pub fn identity_owners(batch: usize) -> Vec<usize> {
    (0..batch).collect()
}

/// `-(1/norm) Σ_ij log σ(z_ij (t·⟨f_i, g_j⟩ − b))` on the graph.
pub fn sigmoid_pair_loss(
    g: &mut Graph,
    fused: Var,
    targets: Var,
    signs: &SignMatrix,
    temperature: Var,
    bias: Var,
    norm: f64,
) -> Result<Var> {
    let sims = g.matmul_nt(fused, targets)?;
    let (r, c) = g.value(sims).dims2();
    if r != signs.rows || c != signs.cols {
        return Err(Error::shape("sign matrix", &[r, c], &[signs.rows, signs.cols]));
    }
    let scaled = g.scale_by(sims, temperature)?;
    let neg_bias = g.scale(bias, -1.0);
    let logits = g.add_scalar(scaled, neg_bias)?;
    let signed = g.mul_const(logits, Arc::new(signs.as_tensor()))?;
    let ls = g.log_sigmoid(signed);
    let total = g.sum(ls);
    Ok(g.scale(total, -1.0 / norm))
}

/// Everything the two losses see for one batch.
#[derive(Clone, Debug)]
pub struct ContrastiveBatchView {
    /// `|B|×D` fused descriptors, unit rows.
    pub fused: Tensor,
    /// `|B|×D` class text embeddings, row `i` for instance `i`.
    pub class_targets: Tensor,
    pub class_ids: Vec<i64>,
    /// `|U|×D` descriptors of held-out views.
    pub unseen: Tensor,
    pub unseen_owner: Vec<usize>,
    pub t: f64,
    pub b: f64,
    pub class_mask_enabled: bool,
}

fn check_unit_rows(name: &'static str, t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("{name} row {i} has norm {n}")));
        }
    }
    Ok(())
}

impl ContrastiveBatchView {
    fn batch_len(&self) -> Result<usize> {
        let b = self.class_ids.len();
        if b == 0 {
            return Err(Error::Empty("contrastive batch"));
        }
        if self.fused.rows() != b || self.class_targets.rows() != b {
            return Err(Error::shape(
                "contrastive batch",
                &[b],
                &[self.fused.rows(), self.class_targets.rows()],
            ));
        }
        check_unit_rows("fused", &self.fused)?;
        check_unit_rows("class target", &self.class_targets)?;
        Ok(b)
    }

    fn eval(&self, targets: &Tensor, owners: &[usize], norm: f64) -> Result<f64> {
        let signs = build_sign_matrix(&self.class_ids, owners, self.class_mask_enabled)?;
        let mut g = Graph::new();
        let f = g.constant(self.fused.clone());
        let y = g.constant(targets.clone());
        let t = g.constant(Tensor::scalar(self.t));
        let b = g.constant(Tensor::scalar(self.b));
        let loss = sigmoid_pair_loss(&mut g, f, y, &signs, t, b, norm)?;
        Ok(g.value(loss).item())
    }
}

pub fn class_loss(batch: &ContrastiveBatchView) -> Result<f64> {
    let b = batch.batch_len()?;
    batch.eval(&batch.class_targets, &identity_owners(b), b as f64)
}

pub fn multiview_loss(batch: &ContrastiveBatchView) -> Result<f64> {
    let b = batch.batch_len()?;
    let u = batch.unseen_owner.len();
    if u == 0 || batch.unseen.is_empty() {
        return Err(Error::Empty("unseen view set"));
    }
    if batch.unseen.rows() != u {
        return Err(Error::shape("unseen views", &[u], &[batch.unseen.rows()]));
    }
    check_unit_rows("unseen", &batch.unseen)?;
    batch.eval(&batch.unseen, &batch.unseen_owner, (b * u) as f64)
}

/// `L_c + L_mv`; with `multiview` off the unseen views are ignored.
pub fn total_loss(batch: &ContrastiveBatchView, multiview: bool) -> Result<f64> {
    let lc = class_loss(batch)?;
    if multiview {
        Ok(lc + multiview_loss(batch)?)
    } else {
        Ok(lc)
    }
}
