//! Finite-difference verification of the reverse-mode gradients.
//!
//! Meaningful only in double precision: central differences with
//! h = 1e-6 * (1 + |theta|) drown in rounding noise at f32.

use crate::graph::{Graph, NodeId, NumericsError, Parameter};
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Compare analytic gradients of a deterministic scalar function against
/// central finite differences, per parameter.
///
/// Relative error uses max(|analytic|, |numeric|, 1) as the denominator so
/// near-zero gradients are judged on absolute error.
pub fn gradcheck<T, F>(
    f: F,
    params: &[Parameter<T>],
    tolerance: f64,
) -> Result<GradCheckReport, NumericsError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>) -> Result<NodeId, NumericsError>,
{
    let eval = |f: &F| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let loss = f(&mut g)?;
        if !g.value(loss).is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: g.value(loss).shape().to_vec(),
            });
        }
        Ok(g.value(loss).item().to_f64())
    };

    let first = eval(&f)?;
    let second = eval(&f)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumericsError::NonDeterministic { a: first, b: second });
    }

    // Analytic pass.
    for p in params {
        p.zero_grad();
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let loss = f(&mut g)?;
        g.backward(loss)?;
        params
            .iter()
            .map(|p| p.grad().data().iter().map(|x| x.to_f64()).collect())
            .collect()
    };

    let mut entries = Vec::with_capacity(params.len());
    for (p, grads) in params.iter().zip(&analytic) {
        let shape = p.shape();
        let mut worst = GradCheckEntry {
            name: p.name(),
            max_rel_err: -1.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..grads.len() {
            let orig = p.value().data()[i];
            let h = T::from_f64(1e-6 * (1.0 + orig.to_f64().abs()));

            let mut bumped = p.value().clone();
            bumped.data_mut()[i] = orig + h;
            p.set_value(bumped);
            let plus = eval(&f)?;

            let mut bumped = p.value().clone();
            bumped.data_mut()[i] = orig - h;
            p.set_value(bumped);
            let minus = eval(&f)?;

            let mut restored = p.value().clone();
            restored.data_mut()[i] = orig;
            p.set_value(restored);

            let numeric = (plus - minus) / (2.0 * h.to_f64());
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        worst.max_rel_err = worst.max_rel_err.max(0.0);
        debug_assert_eq!(shape.iter().product::<usize>(), grads.len());
        entries.push(worst);
    }

    Ok(GradCheckReport { tolerance, entries })
}
