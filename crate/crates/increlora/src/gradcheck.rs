//! Finite-difference verification of every analytic gradient path.
//!
//! A small fixture net is built with active components, set to realistic
//! magnitudes, plus a pinned reserve per module. Active-component gradients
//! (lambda and both vectors) are checked against central differences of the
//! task loss; regularizer gradients, reserve included, against central
//! differences of the penalty. The reserve's task-loss path cannot be
//! finite-differenced directly because its pinned coefficient scales those
//! gradients to the difference scheme's roundoff floor, so it is verified
//! algebraically instead: the gradients are exactly linear in the
//! coefficient, and the fixture compares against the unit-coefficient run.

use serde::Serialize;

use crate::adapter::SvdAdapter;
use crate::netgraph::{
    backward, forward, task_loss_and_grad, Activation, Backbone, LossKind, Targets,
};
use crate::numkernel::{gaussian_fill, DenseMatrix, Rng};

pub const FD_EPSILON: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Entries below this magnitude are measured against the floor itself;
/// a relative comparison against a vanishing denominator only amplifies
/// the difference scheme's roundoff.
const REL_DENOM_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Lambda,
    A(usize),
    B(usize),
}

/// One table row: the worst relative error across every checked entry of
/// one gradient class.
#[derive(Debug, Clone, Serialize)]
pub struct ClassRow {
    pub class: &'static str,
    pub max_rel: f64,
    pub entries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    /// Fixed order: a, b, lambda, regularizer-a, regularizer-b.
    pub rows: Vec<ClassRow>,
    /// Worst deviation of reserve vector gradients from exact linearity in
    /// the pinned coefficient. Zero when the adapter scale is 1.
    pub reserve_linearity_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel < self.tolerance)
            && self.reserve_linearity_err < self.tolerance
    }
}

struct Fixture {
    backbone: Backbone,
    adapters: Vec<SvdAdapter>,
    x: DenseMatrix,
    targets: Targets,
    loss: LossKind,
}

impl Fixture {
    /// Two active components per module at O(1) coefficients plus a
    /// reserve, over a small biased backbone. Batch of 4.
    fn build(seed: u64, dims: &[usize], activation: Activation, loss: LossKind) -> Fixture {
        assert!(dims.len() >= 2, "need at least one layer");
        let mut rng = Rng::substream(seed, 90);
        let backbone = Backbone::random(dims, activation, 0.45, true, &mut rng);
        let mut adapters = Vec::new();
        for (k, w) in dims.windows(2).enumerate() {
            let mut ad = SvdAdapter::with_reserve(k, w[0], w[1], 1.0, &mut rng, 0.3);
            for step in 0..2u32 {
                let id = ad.activate_reserve();
                ad.append_reserve(&mut rng, 0.3);
                ad.component_mut(id).unwrap().lambda = 0.5 + 0.1 * f64::from(step);
            }
            adapters.push(ad);
        }
        let batch = 4;
        let x = gaussian_fill(&mut rng, batch, dims[0], 1.0);
        let targets = match loss {
            LossKind::Mse => Targets::Values(gaussian_fill(&mut rng, batch, *dims.last().unwrap(), 1.0)),
            LossKind::SoftmaxCrossEntropy => {
                let classes = *dims.last().unwrap();
                Targets::Labels((0..batch).map(|r| (seed as usize + r) % classes).collect())
            }
        };
        Fixture { backbone, adapters, x, targets, loss }
    }

    fn task_loss(&self) -> f64 {
        let (out, _) = forward(&self.backbone, &self.adapters, &self.x);
        task_loss_and_grad(self.loss, &out, &self.targets).0
    }

    fn regu_loss(&self) -> f64 {
        self.adapters.iter().map(|a| a.regularizer_loss(true)).sum()
    }

    fn read(&self, l: usize, id: u32, field: Field) -> f64 {
        let c = self.adapters[l].components().find(|c| c.id == id).unwrap();
        match field {
            Field::Lambda => c.lambda,
            Field::A(i) => c.a.as_slice()[i],
            Field::B(i) => c.b.as_slice()[i],
        }
    }

    fn write(&mut self, l: usize, id: u32, field: Field, value: f64) {
        let c = self.adapters[l].component_mut(id).unwrap();
        match field {
            Field::Lambda => c.lambda = value,
            Field::A(i) => c.a.as_mut_slice()[i] = value,
            Field::B(i) => c.b.as_mut_slice()[i] = value,
        }
    }

    /// Central (f(x+e) - f(x-e)) / 2e with exact restore of the entry.
    fn fd(&mut self, l: usize, id: u32, field: Field, eval: fn(&Fixture) -> f64) -> f64 {
        let orig = self.read(l, id, field);
        self.write(l, id, field, orig + FD_EPSILON);
        let plus = eval(self);
        self.write(l, id, field, orig - FD_EPSILON);
        let minus = eval(self);
        self.write(l, id, field, orig);
        (plus - minus) / (2.0 * FD_EPSILON)
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_DENOM_FLOOR)
}

struct RowAccum {
    class: &'static str,
    max_rel: f64,
    entries: usize,
}

impl RowAccum {
    fn new(class: &'static str) -> RowAccum {
        RowAccum { class, max_rel: 0.0, entries: 0 }
    }
    fn push(&mut self, analytic: f64, fd: f64) {
        self.max_rel = self.max_rel.max(rel_err(analytic, fd));
        self.entries += 1;
    }
    fn finish(self) -> ClassRow {
        ClassRow { class: self.class, max_rel: self.max_rel, entries: self.entries }
    }
}

/// Runs the full battery on one fixture and returns the report table.
pub fn run_check(
    seed: u64,
    dims: &[usize],
    activation: Activation,
    loss: LossKind,
    tolerance: f64,
) -> GradCheckReport {
    let mut fx = Fixture::build(seed, dims, activation, loss);

    let (out, cache) = forward(&fx.backbone, &fx.adapters, &fx.x);
    let (_, grad_out) = task_loss_and_grad(fx.loss, &out, &fx.targets);
    let layer_grads = backward(&fx.backbone, &fx.adapters, cache, &grad_out);

    let mut row_a = RowAccum::new("a");
    let mut row_b = RowAccum::new("b");
    let mut row_lambda = RowAccum::new("lambda");
    for l in 0..fx.adapters.len() {
        let active: Vec<u32> = fx.adapters[l].active().iter().map(|c| c.id).collect();
        for id in active {
            let cg = layer_grads[l].comps.iter().find(|c| c.id == id).unwrap().clone();
            row_lambda.push(cg.dlambda, fx.fd(l, id, Field::Lambda, Fixture::task_loss));
            for i in 0..cg.da.cols() {
                row_a.push(cg.da.as_slice()[i], fx.fd(l, id, Field::A(i), Fixture::task_loss));
            }
            for i in 0..cg.db.rows() {
                row_b.push(cg.db.as_slice()[i], fx.fd(l, id, Field::B(i), Fixture::task_loss));
            }
        }
    }

    let mut row_ra = RowAccum::new("regularizer-a");
    let mut row_rb = RowAccum::new("regularizer-b");
    for l in 0..fx.adapters.len() {
        let (_, regu_grads) = fx.adapters[l].regularizer_grads(true);
        for rg in regu_grads {
            for i in 0..rg.da.cols() {
                row_ra.push(rg.da.as_slice()[i], fx.fd(l, rg.id, Field::A(i), Fixture::regu_loss));
            }
            for i in 0..rg.db.rows() {
                row_rb.push(rg.db.as_slice()[i], fx.fd(l, rg.id, Field::B(i), Fixture::regu_loss));
            }
        }
    }

    let reserve_linearity_err = reserve_linearity_err(&mut fx, &layer_grads);

    GradCheckReport {
        seed,
        dims: dims.to_vec(),
        activation,
        loss,
        rows: vec![
            row_a.finish(),
            row_b.finish(),
            row_lambda.finish(),
            row_ra.finish(),
            row_rb.finish(),
        ],
        reserve_linearity_err,
        tolerance,
    }
}

/// The reserve's task gradients must equal its coefficient times the
/// gradients of the same component at unit coefficient; both runs see the
/// same inputs, so with unit adapter scale the match is exact.
fn reserve_linearity_err(
    fx: &mut Fixture,
    pinned_grads: &[crate::netgraph::LayerGrads],
) -> f64 {
    let mut worst = 0.0f64;
    for l in 0..fx.adapters.len() {
        let Some(reserve) = fx.adapters[l].reserve() else { continue };
        let id = reserve.id;
        let pinned_lambda = reserve.lambda;
        fx.write(l, id, Field::Lambda, 1.0);
        let (out, cache) = forward(&fx.backbone, &fx.adapters, &fx.x);
        let (_, grad_out) = task_loss_and_grad(fx.loss, &out, &fx.targets);
        let unit_grads = backward(&fx.backbone, &fx.adapters, cache, &grad_out);
        fx.write(l, id, Field::Lambda, pinned_lambda);

        let pinned = pinned_grads[l].comps.iter().find(|c| c.id == id).unwrap();
        let unit = unit_grads[l].comps.iter().find(|c| c.id == id).unwrap();
        for (p, u) in pinned
            .da
            .as_slice()
            .iter()
            .chain(pinned.db.as_slice())
            .zip(unit.da.as_slice().iter().chain(unit.db.as_slice()))
        {
            let expect = pinned_lambda * u;
            worst = worst.max(rel_err(*p, expect).min((p - expect).abs()));
        }
    }
    worst
}

/// The standard battery: both activations crossed with both losses on a
/// 3-dim chain, plus the degenerate single-weight net.
pub fn standard_battery(seed: u64, tolerance: f64) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    for activation in [Activation::Tanh, Activation::Relu] {
        for loss in [LossKind::Mse, LossKind::SoftmaxCrossEntropy] {
            reports.push(run_check(seed, &[5, 4, 3], activation, loss, tolerance));
        }
    }
    reports.push(run_check(seed, &[1, 1], Activation::Tanh, LossKind::Mse, tolerance));
    reports
}
