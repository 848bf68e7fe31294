//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which coordinates of the parameters to probe.
#[derive(Clone, Copy, Debug)]
pub enum Sampling {
    All,
    /// A seeded random fraction of coordinates (at least one per tensor).
    Fraction { fraction: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub sampling: Sampling,
    /// Corrupt one backward rule in the analytic pass (negative control).
    pub fault: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            sampling: Sampling::All,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Worst `|a - n| / max(1, |a|, |n|)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU branch; central
    /// differences are meaningless across a kink so these are not scored.
    pub skipped_kinks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(f: &F, params: &[Tensor], requires_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone(), requires_grad))
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NotScalar(tape.shape(out).to_vec()));
    }
    Ok((tape, vars, out))
}

/// Compares the tape's gradients of the scalar `f` against central
/// differences with step `config.step`.
pub fn grad_check<F>(f: F, params: &[Tensor], config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = evaluate(&f, params, true)?;
    if let Some(kind) = config.fault {
        tape.inject_fault(kind);
    }
    let base = tape.value(out).data()[0];
    let base_sig = tape.relu_signature();
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf requires grad"))
        .collect();
    drop(tape);

    let (again, _, again_out) = evaluate(&f, params, false)?;
    if again.value(again_out).data()[0].to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let scalar_at = |params: &[Tensor]| -> Result<(f64, u64)> {
        let (t, _, o) = evaluate(&f, params, false)?;
        Ok((t.value(o).data()[0], t.relu_signature()))
    };

    let mut report = GradCheckReport::default();
    let mut rng = match config.sampling {
        Sampling::All => None,
        Sampling::Fraction { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let mut work = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let coords: Vec<usize> = match (&config.sampling, rng.as_mut()) {
            (Sampling::Fraction { fraction, .. }, Some(rng)) => {
                let count = ((param.len() as f64 * fraction).ceil() as usize).clamp(1, param.len());
                let mut c = sample(rng, param.len(), count).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..param.len()).collect(),
        };
        for c in coords {
            let x0 = param.data()[c];
            work[pi].data_mut()[c] = x0 + config.step;
            let (plus, sig_plus) = scalar_at(&work)?;
            work[pi].data_mut()[c] = x0 - config.step;
            let (minus, sig_minus) = scalar_at(&work)?;
            work[pi].data_mut()[c] = x0;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * config.step);
            let err = relative_error(analytic[pi].data()[c], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}

/// `sum(out ⊙ R)` for a fixed pseudo-random `R`: turns any tensor-valued
/// function into a scalar whose gradient exercises every output entry.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::uniform(shape, 1.0, &mut rng));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}
