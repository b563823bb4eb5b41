//! The two recurrent units: a standard GRU step for the sequence encoder and
//! the multi-dimension GRU (MDGRU) step for the table encoder.
//!
//! Both cells share one interpolation convention,
//! `h = z ⊙ h̃ + (1 − z) ⊙ h_blend`, the form the table cell uses.

use std::rc::Rc;

use crate::numerics::{Graph, NumericsError, Parameter, RunRng, ValueId};

/// Gate and candidate weights for a GRU with input and hidden size `d_h`.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w_r: Rc<Parameter>,
    pub b_r: Rc<Parameter>,
    pub w_z: Rc<Parameter>,
    pub b_z: Rc<Parameter>,
    pub w_x: Rc<Parameter>,
    pub w_h: Rc<Parameter>,
    pub b_h: Rc<Parameter>,
}

impl GruParams {
    pub fn init(prefix: &str, d_h: usize, rng: &mut RunRng) -> Result<GruParams, NumericsError> {
        Ok(GruParams {
            w_r: Parameter::uniform(format!("{prefix}.w_r"), vec![2 * d_h, d_h], 2 * d_h, rng)?,
            b_r: Parameter::zeros(format!("{prefix}.b_r"), vec![1, d_h]),
            w_z: Parameter::uniform(format!("{prefix}.w_z"), vec![2 * d_h, d_h], 2 * d_h, rng)?,
            b_z: Parameter::zeros(format!("{prefix}.b_z"), vec![1, d_h]),
            w_x: Parameter::uniform(format!("{prefix}.w_x"), vec![d_h, d_h], d_h, rng)?,
            w_h: Parameter::uniform(format!("{prefix}.w_h"), vec![d_h, d_h], d_h, rng)?,
            b_h: Parameter::zeros(format!("{prefix}.b_h"), vec![1, d_h]),
        })
    }

    pub fn params(&self) -> Vec<Rc<Parameter>> {
        vec![
            Rc::clone(&self.w_r),
            Rc::clone(&self.b_r),
            Rc::clone(&self.w_z),
            Rc::clone(&self.b_z),
            Rc::clone(&self.w_x),
            Rc::clone(&self.w_h),
            Rc::clone(&self.b_h),
        ]
    }

    /// Registers every weight in a graph once so repeated steps share leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundGru {
        BoundGru {
            w_r: g.param(&self.w_r),
            b_r: g.param(&self.b_r),
            w_z: g.param(&self.w_z),
            b_z: g.param(&self.b_z),
            w_x: g.param(&self.w_x),
            w_h: g.param(&self.w_h),
            b_h: g.param(&self.b_h),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGru {
    w_r: ValueId,
    b_r: ValueId,
    w_z: ValueId,
    b_z: ValueId,
    w_x: ValueId,
    w_h: ValueId,
    b_h: ValueId,
}

/// One GRU step: `r = σ([x;h]W_r + b_r)`, `z = σ([x;h]W_z + b_z)`,
/// `h̃ = tanh(xW_x + r ⊙ (hW_h) + b_h)`, `h' = z ⊙ h̃ + (1−z) ⊙ h`.
pub fn gru_step(
    g: &mut Graph,
    p: &BoundGru,
    x: ValueId,
    h_prev: ValueId,
) -> Result<ValueId, NumericsError> {
    let xh = g.concat(&[x, h_prev], 1)?;
    let r = {
        let a = g.matmul(xh, p.w_r)?;
        let a = g.add_bias(a, p.b_r)?;
        g.sigmoid(a)?
    };
    let z = {
        let a = g.matmul(xh, p.w_z)?;
        let a = g.add_bias(a, p.b_z)?;
        g.sigmoid(a)?
    };
    let candidate = {
        let xw = g.matmul(x, p.w_x)?;
        let hw = g.matmul(h_prev, p.w_h)?;
        let gated = g.mul(r, hw)?;
        let pre = g.add(xw, gated)?;
        let pre = g.add_bias(pre, p.b_h)?;
        g.tanh(pre)?
    };
    interpolate(g, z, candidate, h_prev)
}

/// Weights for an MDGRU: three predecessor hidden states, gates over the
/// `[x; h1; h2; h3]` concatenation, and per-slot blend gates normalized by a
/// softmax across the three slots.
#[derive(Debug, Clone)]
pub struct MdgruParams {
    pub w_r: Rc<Parameter>,
    pub b_r: Rc<Parameter>,
    pub w_z: Rc<Parameter>,
    pub b_z: Rc<Parameter>,
    pub w_x: Rc<Parameter>,
    pub w_p: Rc<Parameter>,
    pub b_h: Rc<Parameter>,
    pub w_gate: [Rc<Parameter>; 3],
    pub b_gate: [Rc<Parameter>; 3],
}

impl MdgruParams {
    pub fn init(prefix: &str, d_h: usize, rng: &mut RunRng) -> Result<MdgruParams, NumericsError> {
        let mut gate_w = Vec::with_capacity(3);
        let mut gate_b = Vec::with_capacity(3);
        let w_r = Parameter::uniform(format!("{prefix}.w_r"), vec![4 * d_h, d_h], 4 * d_h, rng)?;
        let b_r = Parameter::zeros(format!("{prefix}.b_r"), vec![1, d_h]);
        let w_z = Parameter::uniform(format!("{prefix}.w_z"), vec![4 * d_h, d_h], 4 * d_h, rng)?;
        let b_z = Parameter::zeros(format!("{prefix}.b_z"), vec![1, d_h]);
        let w_x = Parameter::uniform(format!("{prefix}.w_x"), vec![d_h, d_h], d_h, rng)?;
        let w_p = Parameter::uniform(format!("{prefix}.w_p"), vec![3 * d_h, d_h], 3 * d_h, rng)?;
        let b_h = Parameter::zeros(format!("{prefix}.b_h"), vec![1, d_h]);
        for m in 1..=3 {
            gate_w.push(Parameter::uniform(
                format!("{prefix}.w_gate{m}"),
                vec![4 * d_h, d_h],
                4 * d_h,
                rng,
            )?);
            gate_b.push(Parameter::zeros(
                format!("{prefix}.b_gate{m}"),
                vec![1, d_h],
            ));
        }
        Ok(MdgruParams {
            w_r,
            b_r,
            w_z,
            b_z,
            w_x,
            w_p,
            b_h,
            w_gate: [gate_w.remove(0), gate_w.remove(0), gate_w.remove(0)],
            b_gate: [gate_b.remove(0), gate_b.remove(0), gate_b.remove(0)],
        })
    }

    pub fn params(&self) -> Vec<Rc<Parameter>> {
        let mut out = vec![
            Rc::clone(&self.w_r),
            Rc::clone(&self.b_r),
            Rc::clone(&self.w_z),
            Rc::clone(&self.b_z),
            Rc::clone(&self.w_x),
            Rc::clone(&self.w_p),
            Rc::clone(&self.b_h),
        ];
        for m in 0..3 {
            out.push(Rc::clone(&self.w_gate[m]));
            out.push(Rc::clone(&self.b_gate[m]));
        }
        out
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMdgru {
        BoundMdgru {
            w_r: g.param(&self.w_r),
            b_r: g.param(&self.b_r),
            w_z: g.param(&self.w_z),
            b_z: g.param(&self.b_z),
            w_x: g.param(&self.w_x),
            w_p: g.param(&self.w_p),
            b_h: g.param(&self.b_h),
            w_gate: [
                g.param(&self.w_gate[0]),
                g.param(&self.w_gate[1]),
                g.param(&self.w_gate[2]),
            ],
            b_gate: [
                g.param(&self.b_gate[0]),
                g.param(&self.b_gate[1]),
                g.param(&self.b_gate[2]),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMdgru {
    w_r: ValueId,
    b_r: ValueId,
    w_z: ValueId,
    b_z: ValueId,
    w_x: ValueId,
    w_p: ValueId,
    b_h: ValueId,
    w_gate: [ValueId; 3],
    b_gate: [ValueId; 3],
}

/// One MDGRU step over three predecessor states.
///
/// `h_prev = [h1; h2; h3]`, gates `r` and `z` read `[x; h_prev]`, the
/// candidate is `tanh(xW_x + r ⊙ (h_prev W_p) + b_h)`, and the carried state
/// is the gate-blended `Σ λ_m ⊙ h_m` with the three λ pre-activations
/// normalized elementwise by a softmax across slots.
pub fn mdgru_step(
    g: &mut Graph,
    p: &BoundMdgru,
    x: ValueId,
    h1: ValueId,
    h2: ValueId,
    h3: ValueId,
) -> Result<ValueId, NumericsError> {
    let h_prev = g.concat(&[h1, h2, h3], 1)?;
    let xh = g.concat(&[x, h_prev], 1)?;
    let r = {
        let a = g.matmul(xh, p.w_r)?;
        let a = g.add_bias(a, p.b_r)?;
        g.sigmoid(a)?
    };
    let z = {
        let a = g.matmul(xh, p.w_z)?;
        let a = g.add_bias(a, p.b_z)?;
        g.sigmoid(a)?
    };
    let candidate = {
        let xw = g.matmul(x, p.w_x)?;
        let hp = g.matmul(h_prev, p.w_p)?;
        let gated = g.mul(r, hp)?;
        let pre = g.add(xw, gated)?;
        let pre = g.add_bias(pre, p.b_h)?;
        g.tanh(pre)?
    };
    let mut gate_pre = Vec::with_capacity(3);
    for m in 0..3 {
        let a = g.matmul(xh, p.w_gate[m])?;
        gate_pre.push(g.add_bias(a, p.b_gate[m])?);
    }
    let stacked = g.concat(&gate_pre, 0)?; // 3×d_h
    let lambda = g.softmax(stacked, 0)?;
    let blended = {
        let l1 = g.row(lambda, 0)?;
        let l2 = g.row(lambda, 1)?;
        let l3 = g.row(lambda, 2)?;
        let a = g.mul(l1, h1)?;
        let b = g.mul(l2, h2)?;
        let c = g.mul(l3, h3)?;
        let ab = g.add(a, b)?;
        g.add(ab, c)?
    };
    interpolate(g, z, candidate, blended)
}

/// `z ⊙ candidate + (1 − z) ⊙ carry`.
fn interpolate(
    g: &mut Graph,
    z: ValueId,
    candidate: ValueId,
    carry: ValueId,
) -> Result<ValueId, NumericsError> {
    let zc = g.mul(z, candidate)?;
    let inv = g.affine_scalar(z, -1.0, 1.0)?;
    let keep = g.mul(inv, carry)?;
    g.add(zc, keep)
}
