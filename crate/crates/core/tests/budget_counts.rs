use adapterlab::adapters::{AdapterConfig, AdapterStack};
use adapterlab::budget::{
    budget_report, count_parameters, efficiency_ratios, megabytes, BudgetSpec, Component, RatioTask, ReferenceBudgets,
    BYTES_PER_PARAM,
};
use adapterlab::encoder::{Encoder, EncoderConfig};
use adapterlab::model::attach;
use adapterlab::adapters::PlacementPlan;
use adapterlab::tasks::pair_head;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_configs(n: usize) -> Vec<(EncoderConfig, AdapterConfig)> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    (0..n)
        .map(|_| {
            let heads = rng.random_range(1..=4);
            let hidden = heads * 2 * rng.random_range(1..=6);
            let enc = EncoderConfig {
                num_layers: rng.random_range(1..=5),
                hidden,
                heads,
                ffn: rng.random_range(3..=40),
                vocab_size: rng.random_range(10..=120),
                max_positions: rng.random_range(4..=40),
                dropout: 0.1,
                layer_norm_eps: 1e-5,
            };
            let ad = AdapterConfig {
                language_reduction: rng.random_range(1..=2),
                task_reduction: rng.random_range(1..=hidden),
                invertible_reduction: rng.random_range(1..=hidden / 2),
                coupling_steps: rng.random_range(1..=3),
                init_std: 1e-3,
            };
            (enc, ad)
        })
        .collect()
}

#[test]
fn closed_form_matches_instantiated_models() {
    for (enc_cfg, ad) in random_configs(12) {
        let spec = BudgetSpec::from_configs(&enc_cfg, &ad);
        let h = enc_cfg.hidden;
        let l = enc_cfg.num_layers;
        let enc = Encoder::new(enc_cfg.clone(), 1).unwrap();
        let backbone = enc.params.count();
        assert_eq!(count_parameters(&spec, Component::Backbone).unwrap(), backbone, "{enc_cfg:?}");

        let lang = AdapterStack::language(h, l, &ad, 2).unwrap();
        let inv = lang.invertible.as_ref().unwrap().param_count();
        assert_eq!(count_parameters(&spec, Component::InvertibleAdapter).unwrap(), inv);
        assert_eq!(count_parameters(&spec, Component::LanguageAdapters).unwrap(), lang.param_count() - inv);
        let task = AdapterStack::task(h, l, &ad, 3).unwrap();
        assert_eq!(count_parameters(&spec, Component::TaskAdapters).unwrap(), task.param_count());
        let head = pair_head(h).count();
        assert_eq!(count_parameters(&spec, Component::PairHead).unwrap(), head);

        // the whole composed model, tallied from its live parameter set
        let plan = PlacementPlan::language_prefix(l).with_task_layers(1..=l);
        let mut model = attach(enc, plan, &lang.merge(task)).unwrap();
        model.add_parameters(pair_head(h)).unwrap();
        let closed: u64 = [
            Component::Backbone,
            Component::LanguageAdapters,
            Component::InvertibleAdapter,
            Component::TaskAdapters,
            Component::PairHead,
        ]
        .into_iter()
        .map(|c| count_parameters(&spec, c).unwrap())
        .sum();
        assert_eq!(model.param_count(), closed);
    }
}

#[test]
fn paper_scale_task_adapter_figures() {
    let spec = BudgetSpec::paper_scale();
    assert_eq!(count_parameters(&spec, Component::TaskAdapters).unwrap(), 894_528);
    assert_eq!(count_parameters(&spec, Component::TaskAdapters).unwrap() / 12, 2 * 768 * 48 + 48 + 768);
    assert!((megabytes(894_528, BYTES_PER_PARAM) - 3.41).abs() < 0.005);
}

#[test]
fn mode_x_is_additive() {
    let spec = BudgetSpec::paper_scale();
    let r = budget_report(&spec, &ReferenceBudgets::default()).unwrap();
    let get = |n: &str| r.component(n).unwrap().parameters;
    assert_eq!(get("l_adapter_stack"), get("l_adapters") + get("invertible"));
    assert_eq!(get("mode_x"), get("l_adapter_stack") + get("t_adapter_stack"));
}

#[test]
fn ratio_formulas() {
    let reference = ReferenceBudgets::default();
    // the published ratios use the rounded 7.39M / 0.89M budgets
    let r = efficiency_ratios(&reference, 7_390_000, 890_000, RatioTask::Retrieval).unwrap();
    assert!((r.task_specific.unwrap() - 140.05).abs() < 0.01);
    let p = efficiency_ratios(&reference, 7_390_000, 890_000, RatioTask::PairClassification).unwrap();
    assert!((p.task_specific.unwrap() - 60.78).abs() < 0.01);
    assert!(efficiency_ratios(&reference, 0, 0, RatioTask::Retrieval).is_err());
    let c = efficiency_ratios(&reference, 0, 1, RatioTask::Cloze);
    assert!(c.is_err());
}

#[test]
fn missing_fields_are_listed_by_name() {
    let spec = BudgetSpec {
        hidden: Some(8),
        ..Default::default()
    };
    let err = count_parameters(&spec, Component::Backbone).unwrap_err().to_string();
    for f in ["num_layers", "ffn", "vocab_size", "max_positions"] {
        assert!(err.contains(f), "{err}");
    }
}
