use deferral_core::SurrogateSpec;
use deferral_train::model::{Activations, Architecture, ScorerModel};
use proptest::prelude::*;

fn loss_at(model: &ScorerModel, spec: SurrogateSpec, x: &[f64], k: usize, label: usize, preds: &[usize]) -> f64 {
    spec.loss(&model.forward(x), k, label, preds)
}

/// Smallest gap between adjacent sorted expert scores. A tiny gap would let
/// the finite difference cross an argmax switch.
fn expert_gap(scores: &[f64], k: usize) -> f64 {
    let mut e: Vec<f64> = scores[k..].to_vec();
    e.sort_by(|a, b| b.total_cmp(a));
    e.windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min)
}

type Case = (usize, usize, u64, Vec<f64>, usize, Vec<usize>, usize);

fn check(arch: Architecture, case: Case) -> std::result::Result<(), TestCaseError> {
    let (k, j, seed, x, label, preds, s) = case;
    let spec = SurrogateSpec::all()[s];
    let mut model = ScorerModel::new(arch, x.len(), k + j, seed).unwrap();
    let mut act = Activations::default();
    model.forward_into(&x, &mut act);
    prop_assume!(expert_gap(&act.scores, k) > 1e-3);
    let (_, dscores) = spec.loss_grad(&act.scores, k, label, &preds);
    let mut grad = vec![0.0; model.num_params()];
    let mut scratch = Vec::new();
    model.backward(&x, &act, &dscores, &mut grad, &mut scratch);
    let h = 1e-6;
    for (i, &g) in grad.iter().enumerate() {
        let p = model.params()[i];
        model.params_mut()[i] = p + h;
        let up = loss_at(&model, spec, &x, k, label, &preds);
        model.params_mut()[i] = p - h;
        let down = loss_at(&model, spec, &x, k, label, &preds);
        model.params_mut()[i] = p;
        let fd = (up - down) / (2.0 * h);
        let err = (fd - g).abs() / fd.abs().max(g.abs()).max(1.0);
        prop_assert!(err < 1e-4, "{spec} param {i}: backprop {g} vs fd {fd}");
    }
    Ok(())
}

fn case() -> impl Strategy<Value = Case> {
    (2usize..5, 1usize..4, any::<u64>(), 0usize..6).prop_flat_map(|(k, j, seed, spec)| {
        (
            Just(k),
            Just(j),
            Just(seed),
            prop::collection::vec(-2.0f64..2.0, 3),
            0..k,
            prop::collection::vec(0..k, j),
            Just(spec),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hidden_layer_backprop_matches_finite_differences(case in case()) {
        check(Architecture::OneHiddenLayer { width: 6 }, case)?;
    }

    #[test]
    fn linear_backprop_matches_finite_differences(case in case()) {
        check(Architecture::Linear, case)?;
    }
}
