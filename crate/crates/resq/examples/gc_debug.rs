// temporary debug: print per-group gradcheck errors
use resq::datagen::{build_split, DatasetSpec, GenConfig};
use resq::encoders::TokenVocabulary;
use resq::grounding::{AnchorSet, RegressionLoss};
use resq::harness::gradcheck_model;
use resq::model::{Model, ModelConfig};

fn main() {
    let spec = DatasetSpec {
        train: 2, val: 0, test: 0, seed: 17,
        gen: GenConfig {
            image_size: 16, min_objects: 2, max_objects: 3,
            small_extent: (2.0, 3.0), large_extent: (4.0, 5.0),
            ..GenConfig::default()
        },
    };
    let samples = build_split("train", 2, &spec).unwrap();
    let anchors = AnchorSet(vec![
        (4.0, 4.0),(5.0, 4.0),(4.0, 6.0),(6.0, 6.0),(8.0, 6.0),(6.0, 9.0),(9.0, 9.0),(11.0, 9.0),(9.0, 12.0),
    ]);
    let mut model = Model::new(ModelConfig::tiny(), TokenVocabulary::closed(), anchors, 5).unwrap();
    for eps in [1e-4f64, 1e-5, 1e-6, 1e-7] {
        let report = gradcheck_model(&mut model, &samples, 1.0, RegressionLoss::Mse, eps, 1e-4).unwrap();
        let worst = report.groups.iter().max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap()).unwrap();
        println!("eps={eps:.0e}  worst {}  max_rel={:.3e}  pass={}", worst.name, worst.max_rel_err, report.pass);
    }
}
