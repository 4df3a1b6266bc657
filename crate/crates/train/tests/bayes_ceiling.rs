use deferral_core::experts::{build_expert_population, ExpertPattern};
use deferral_core::{BaseLoss, Family, SurrogateSpec};
use deferral_train::trainer::bayes_system_error;
use deferral_train::*;

#[test]
fn trained_systems_stay_below_the_bayes_ceiling() {
    let (k, j) = (6, 2);
    let task = SyntheticTask::circle(k, 2, 2.0, 0.6).unwrap();
    let pattern = ExpertPattern::DomainExpert { in_domain: 0.95, in_family: 0.5, domain_size: 1, family_size: None };
    let population = build_expert_population(&pattern, j, k, 3).unwrap();
    let train_set = sample_task(&task, 3000, &population, 1).unwrap();
    let test_set = sample_task(&task, 4000, &population, 2).unwrap();
    let bayes_acc = 1.0 - bayes_system_error(&task, &population, &test_set).unwrap();
    let se = (bayes_acc * (1.0 - bayes_acc) / test_set.len() as f64).sqrt();
    let config = TrainConfig { epochs: 15, ..TrainConfig::default() };
    for spec in [
        SurrogateSpec::new(Family::Vanilla, BaseLoss::CrossEntropy),
        SurrogateSpec::new(Family::Picce, BaseLoss::CrossEntropy),
        SurrogateSpec::new(Family::Picce, BaseLoss::OvaLog),
    ] {
        let model = ScorerModel::new(Architecture::OneHiddenLayer { width: 16 }, 2, k + j, 4).unwrap();
        let out = train(&train_set, k, spec, model, &config, 5).unwrap();
        let acc = 1.0 - evaluate(&out.model, &test_set, k).unwrap().system_error;
        assert!(acc <= bayes_acc + 3.0 * se, "{spec}: {acc} above Bayes {bayes_acc}");
        assert!(acc > bayes_acc - 0.1, "{spec}: {acc} far below Bayes {bayes_acc}");
    }
}

#[test]
fn separable_task_with_weak_experts_learns_full_coverage() {
    let task = SyntheticTask::new(vec![vec![-3.0, 0.0], vec![3.0, 0.0]], 0.3, vec![0.5, 0.5]).unwrap();
    let population = build_expert_population(&ExpertPattern::Custom { accuracy: vec![vec![0.3, 0.3]] }, 1, 2, 0).unwrap();
    let train_set = sample_task(&task, 1000, &population, 1).unwrap();
    let test_set = sample_task(&task, 1000, &population, 2).unwrap();
    let spec = SurrogateSpec::new(Family::Picce, BaseLoss::CrossEntropy);
    let model = ScorerModel::new(Architecture::Linear, 2, 3, 0).unwrap();
    let config = TrainConfig { epochs: 10, ..TrainConfig::default() };
    let out = train(&train_set, 2, spec, model, &config, 0).unwrap();
    let m = evaluate(&out.model, &test_set, 2).unwrap();
    assert!(m.coverage > 0.99, "{m:?}");
    assert_eq!(m.system_error, 0.0);
}
