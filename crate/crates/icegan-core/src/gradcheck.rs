//! Central-difference gradient checking against the autodiff tape.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// How many components per tensor are probed when the tensor is large.
const MAX_PROBES: usize = 8;

/// Below this gradient magnitude the comparison switches from relative to
/// absolute: finite differences carry ~1e-11 of roundoff, which would
/// dominate a ratio against a near-zero true gradient.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub probes: usize,
    pub non_finite: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries
            .iter()
            .all(|e| !e.non_finite && e.max_rel_err < self.tol)
    }

    pub fn max_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// Checks autodiff gradients of a scalar-valued tensor function against
/// central differences with step `h`. Large tensors are probed at a seeded
/// random subset of components.
pub fn gradcheck<F>(f: F, inputs: &[(&str, Tensor)], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf_data(t.shape.clone(), t.data.clone(), false))
            .collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
        }
        Ok(tape.value(out)[0])
    };

    // Autodiff pass with every input treated as differentiable.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(_, t)| tape.leaf_data(t.shape.clone(), t.data.clone(), true))
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    let base_value = tape.value(out)[0];
    tape.backward(out)?;
    let ad_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, (_, t))| {
            tape.grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut working: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let mut entries = Vec::with_capacity(inputs.len());

    for (idx, (name, tensor)) in inputs.iter().enumerate() {
        let n = tensor.numel();
        let probes: Vec<usize> = if n <= 2 * MAX_PROBES {
            (0..n).collect()
        } else {
            let mut picked: Vec<usize> = (0..MAX_PROBES).map(|_| rng.gen_range(0..n)).collect();
            picked.sort_unstable();
            picked.dedup();
            picked
        };
        let mut max_rel: f64 = 0.0;
        let mut non_finite = !base_value.is_finite();
        for &j in &probes {
            let orig = working[idx].data[j];
            working[idx].data[j] = orig + h;
            let up = eval(&working)?;
            working[idx].data[j] = orig - h;
            let down = eval(&working)?;
            working[idx].data[j] = orig;
            if !up.is_finite() || !down.is_finite() {
                non_finite = true;
                continue;
            }
            let fd = (up - down) / (2.0 * h);
            let ad = ad_grads[idx][j];
            let scale = ad.abs().max(fd.abs());
            let err = if scale > REL_FLOOR {
                (ad - fd).abs() / scale
            } else {
                (ad - fd).abs()
            };
            max_rel = max_rel.max(err);
        }
        entries.push(GradCheckEntry {
            name: name.to_string(),
            max_rel_err: max_rel,
            probes: probes.len(),
            non_finite,
        });
    }
    Ok(GradCheckReport { entries, tol })
}
