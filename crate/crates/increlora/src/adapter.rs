//! Low-rank adapter attached to one linear layer.
//!
//! The adapter's update is a sum of rank-1 components
//! `scale * lambda_i * b_i * a_i` with `a_i` a row (1 x in) and `b_i` a
//! column (out x 1). Besides its active components each adapter usually
//! holds one *reserve* component: `lambda` is pinned to [`RESERVE_LAMBDA`]
//! so the reserve barely affects outputs, but its vectors still receive
//! gradients and train in place. Granting rank to a module activates the
//! reserve (the pin is dropped, the tiny lambda value is kept and becomes
//! trainable) and appends a fresh reserve behind it.

use serde::{Deserialize, Serialize};

use crate::numkernel::{gaussian_fill, matmul, matmul_nt, matmul_tn, DenseMatrix, Rng};

/// Scale pinned on reserve components: small enough to leave the forward
/// pass effectively untouched, large enough to keep gradients exact.
pub const RESERVE_LAMBDA: f64 = 1e-5;

/// One rank-1 component. `frozen` marks a reserve whose lambda is pinned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub id: u32,
    /// 1 x in_dim row vector.
    pub a: DenseMatrix,
    /// out_dim x 1 column vector.
    pub b: DenseMatrix,
    pub lambda: f64,
    pub frozen: bool,
}

/// Adapter state for a single module (one linear layer).
#[derive(Debug, Clone, PartialEq)]
pub struct SvdAdapter {
    module: usize,
    in_dim: usize,
    out_dim: usize,
    scale: f64,
    active: Vec<Component>,
    reserve: Option<Component>,
    next_id: u32,
}

impl SvdAdapter {
    /// Empty adapter: no components, contributes nothing to the forward pass.
    pub fn new(module: usize, in_dim: usize, out_dim: usize, scale: f64) -> Self {
        assert!(in_dim > 0 && out_dim > 0, "adapter dims must be positive, got {in_dim}x{out_dim}");
        assert!(scale > 0.0 && scale.is_finite(), "adapter scale must be positive, got {scale}");
        SvdAdapter { module, in_dim, out_dim, scale, active: Vec::new(), reserve: None, next_id: 0 }
    }

    /// Starting state for incremental allocation: a single reserve component.
    pub fn with_reserve(
        module: usize,
        in_dim: usize,
        out_dim: usize,
        scale: f64,
        rng: &mut Rng,
        init_std: f64,
    ) -> Self {
        let mut ad = SvdAdapter::new(module, in_dim, out_dim, scale);
        ad.append_reserve(rng, init_std);
        ad
    }

    /// Baseline state: `rank` trainable components, lambdas starting at zero
    /// so the initial update is exactly the zero matrix. No reserve.
    pub fn fixed_rank(
        module: usize,
        in_dim: usize,
        out_dim: usize,
        scale: f64,
        rank: u32,
        rng: &mut Rng,
        init_std: f64,
    ) -> Self {
        let mut ad = SvdAdapter::new(module, in_dim, out_dim, scale);
        for _ in 0..rank {
            let id = ad.next_id;
            ad.next_id += 1;
            ad.active.push(Component {
                id,
                a: gaussian_fill(rng, 1, in_dim, init_std),
                b: gaussian_fill(rng, out_dim, 1, init_std),
                lambda: 0.0,
                frozen: false,
            });
        }
        ad
    }

    pub fn module(&self) -> usize {
        self.module
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Rank counting the reserve: what the allocation budget pays for.
    pub fn rank(&self) -> usize {
        self.active.len() + usize::from(self.reserve.is_some())
    }

    /// Rank that survives once reserves are masked out at budget close.
    pub fn deployed_rank(&self) -> usize {
        self.active.len()
    }

    pub fn active(&self) -> &[Component] {
        &self.active
    }

    pub fn reserve(&self) -> Option<&Component> {
        self.reserve.as_ref()
    }

    /// All present components, actives first, reserve last.
    pub fn components(&self) -> impl Iterator<Item = &Component> {
        self.active.iter().chain(self.reserve.iter())
    }

    pub fn components_mut(&mut self) -> impl Iterator<Item = &mut Component> {
        self.active.iter_mut().chain(self.reserve.iter_mut())
    }

    pub fn component_mut(&mut self, id: u32) -> Option<&mut Component> {
        self.components_mut().find(|c| c.id == id)
    }

    /// Promotes the reserve into the active set. Its lambda keeps the pinned
    /// value but becomes trainable from here on. Panics without a reserve.
    pub fn activate_reserve(&mut self) -> u32 {
        let mut comp = self
            .reserve
            .take()
            .unwrap_or_else(|| panic!("module {}: activate_reserve with no reserve present", self.module));
        comp.frozen = false;
        let id = comp.id;
        self.active.push(comp);
        id
    }

    /// Installs a fresh reserve. Panics if one is already present.
    pub fn append_reserve(&mut self, rng: &mut Rng, init_std: f64) -> u32 {
        assert!(
            self.reserve.is_none(),
            "module {}: append_reserve while a reserve is present",
            self.module
        );
        assert!(init_std > 0.0, "init_std must be positive, got {init_std}");
        let id = self.next_id;
        self.next_id += 1;
        self.reserve = Some(Component {
            id,
            a: gaussian_fill(rng, 1, self.in_dim, init_std),
            b: gaussian_fill(rng, self.out_dim, 1, init_std),
            lambda: RESERVE_LAMBDA,
            frozen: true,
        });
        id
    }

    /// Removes the reserve for good (budget close). Returns its id, or None
    /// when no reserve was present.
    pub fn mask_reserve(&mut self) -> Option<u32> {
        self.reserve.take().map(|c| c.id)
    }

    /// Restores a component list read back from a checkpoint.
    pub fn restore(&mut self, active: Vec<Component>, reserve: Option<Component>) {
        for c in active.iter().chain(reserve.iter()) {
            assert_eq!(c.a.shape(), (1, self.in_dim), "module {}: bad a shape in restore", self.module);
            assert_eq!(c.b.shape(), (self.out_dim, 1), "module {}: bad b shape in restore", self.module);
        }
        self.next_id = active
            .iter()
            .chain(reserve.iter())
            .map(|c| c.id + 1)
            .max()
            .unwrap_or(0)
            .max(self.next_id);
        self.active = active;
        self.reserve = reserve;
    }

    /// Materialized update `scale * sum_i lambda_i * b_i * a_i` over every
    /// present component, reserve included. Empty adapter gives exact zeros.
    pub fn delta_w(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.out_dim, self.in_dim);
        for comp in self.components() {
            let coef = self.scale * comp.lambda;
            if coef == 0.0 {
                continue;
            }
            for (r, bv) in comp.b.as_slice().iter().enumerate() {
                let w = coef * bv;
                let orow = &mut out.as_mut_slice()[r * self.in_dim..(r + 1) * self.in_dim];
                for (o, av) in orow.iter_mut().zip(comp.a.as_slice()) {
                    *o += w * av;
                }
            }
        }
        out
    }

    fn stacked(&self, include_reserve: bool) -> (Vec<&Component>, usize) {
        let comps: Vec<&Component> = if include_reserve {
            self.components().collect()
        } else {
            self.active.iter().collect()
        };
        let r = comps.len();
        (comps, r)
    }

    /// Orthogonality penalty `||A A^T - I||_F^2 + ||B^T B - I||_F^2` where
    /// A stacks component rows and B stacks component columns. Zero when the
    /// a's and b's each form orthonormal sets; lambdas play no part.
    pub fn regularizer_loss(&self, include_reserve: bool) -> f64 {
        let (comps, r) = self.stacked(include_reserve);
        if r == 0 {
            return 0.0;
        }
        let (ga, gb) = gram_residuals(&comps, r);
        ga.frobenius_norm_sq() + gb.frobenius_norm_sq()
    }

    /// Regularizer value plus its gradient for every participating
    /// component: `dA = 4 (A A^T - I) A` row-wise, `dB = 4 B (B^T B - I)`
    /// column-wise.
    pub fn regularizer_grads(&self, include_reserve: bool) -> (f64, Vec<ComponentGrad>) {
        let (comps, r) = self.stacked(include_reserve);
        if r == 0 {
            return (0.0, Vec::new());
        }
        let (ga, gb) = gram_residuals(&comps, r);
        let loss = ga.frobenius_norm_sq() + gb.frobenius_norm_sq();

        let mut a_stack = DenseMatrix::zeros(r, self.in_dim);
        let mut b_stack = DenseMatrix::zeros(self.out_dim, r);
        for (i, c) in comps.iter().enumerate() {
            for j in 0..self.in_dim {
                a_stack.set(i, j, c.a.get(0, j));
            }
            for j in 0..self.out_dim {
                b_stack.set(j, i, c.b.get(j, 0));
            }
        }
        let da = matmul(&ga, &a_stack).scale(4.0);
        let db = matmul(&b_stack, &gb).scale(4.0);

        let grads = comps
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut ga_row = DenseMatrix::zeros(1, self.in_dim);
                for j in 0..self.in_dim {
                    ga_row.set(0, j, da.get(i, j));
                }
                let mut gb_col = DenseMatrix::zeros(self.out_dim, 1);
                for j in 0..self.out_dim {
                    gb_col.set(j, 0, db.get(j, i));
                }
                ComponentGrad { id: c.id, da: ga_row, db: gb_col }
            })
            .collect();
        (loss, grads)
    }
}

/// Regularizer gradient for one component's vectors.
#[derive(Debug, Clone)]
pub struct ComponentGrad {
    pub id: u32,
    /// 1 x in_dim.
    pub da: DenseMatrix,
    /// out_dim x 1.
    pub db: DenseMatrix,
}

/// (A A^T - I, B^T B - I) for the stacked component vectors.
fn gram_residuals(comps: &[&Component], r: usize) -> (DenseMatrix, DenseMatrix) {
    let in_dim = comps[0].a.cols();
    let out_dim = comps[0].b.rows();
    let mut a_stack = DenseMatrix::zeros(r, in_dim);
    let mut b_stack = DenseMatrix::zeros(out_dim, r);
    for (i, c) in comps.iter().enumerate() {
        for j in 0..in_dim {
            a_stack.set(i, j, c.a.get(0, j));
        }
        for j in 0..out_dim {
            b_stack.set(j, i, c.b.get(j, 0));
        }
    }
    let mut ga = matmul_nt(&a_stack, &a_stack);
    let mut gb = matmul_tn(&b_stack, &b_stack);
    for i in 0..r {
        ga.set(i, i, ga.get(i, i) - 1.0);
        gb.set(i, i, gb.get(i, i) - 1.0);
    }
    (ga, gb)
}
