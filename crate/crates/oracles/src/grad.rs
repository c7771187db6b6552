use pte_core::model::ModelParams;
use pte_core::numerics::Matrix;
use pte_core::pte::AdapterBank;

/// Central-difference gradient of `f` with respect to the named matrix, which
/// may live in either the adapter bank or the base model.
pub fn numeric_gradient(
    params: &ModelParams,
    bank: &AdapterBank,
    name: &str,
    step: f64,
    mut f: impl FnMut(&ModelParams, &AdapterBank) -> f64,
) -> Option<Matrix> {
    let (rows, cols) = bank
        .named()
        .into_iter()
        .chain(params.named())
        .find(|(n, _)| n == name)
        .map(|(_, m)| (m.rows(), m.cols()))?;
    let mut p = params.clone();
    let mut b = bank.clone();
    let mut grad = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut eval = |delta: f64, p: &mut ModelParams, b: &mut AdapterBank| -> f64 {
                nudge(p, b, name, r, c, delta);
                let v = f(p, b);
                nudge(p, b, name, r, c, -delta);
                v
            };
            let plus = eval(step, &mut p, &mut b);
            let minus = eval(-step, &mut p, &mut b);
            grad.set(r, c, (plus - minus) / (2.0 * step));
        }
    }
    Some(grad)
}

fn nudge(p: &mut ModelParams, b: &mut AdapterBank, name: &str, r: usize, c: usize, delta: f64) {
    let slot = b.named_mut().into_iter().chain(p.named_mut()).find(|(n, _)| n == name);
    if let Some((_, m)) = slot {
        let v = m.get(r, c);
        m.set(r, c, v + delta);
    }
}
