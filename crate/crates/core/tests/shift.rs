use clustalign::data::{self, DomainSpec, Shift};
use clustalign::experiment::{run_variants, LossSet, ToyData, ToySetup};
use clustalign::metrics::{self, MiouReport};
use clustalign::model::{ObjectiveConfig, Segmenter};

fn source_only() -> Segmenter {
    let data = ToyData::generate(&ToySetup::default(), 0).unwrap();
    let runs = run_variants(&data, &ObjectiveConfig::toy(), &[LossSet::NONE]).map_err(|e| e.error).unwrap();
    runs.into_iter().next().unwrap().params
}

fn score(seg: &Segmenter, shift: Shift) -> MiouReport {
    let spec = data::shifted_spec(&DomainSpec::default(), shift).unwrap();
    metrics::evaluate(seg, &data::generate(&spec, 40, 777).unwrap()).unwrap()
}

#[test]
fn source_only_model_across_shifts() {
    let seg = source_only();
    let source = metrics::evaluate(&seg, &data::generate(&DomainSpec::default(), 40, 555).unwrap()).unwrap();
    let none = score(&seg, Shift::NONE);
    let default = score(&seg, Shift::DEFAULT);
    let extreme = score(&seg, Shift::EXTREME);
    println!(
        "source {:.4}, no shift {:.4}, default {:.4}, extreme {:.4} (acc {:.4})",
        source.miou, none.miou, default.miou, extreme.miou, extreme.pixel_accuracy
    );
    assert!((none.miou - source.miou).abs() <= 0.02);
    assert!(source.miou - default.miou >= 0.10);
    let chance = 1.0 / DomainSpec::default().num_classes as f64;
    assert!((extreme.miou - chance).abs() <= 0.05);
    assert!((extreme.pixel_accuracy - chance).abs() <= 0.05);
}
