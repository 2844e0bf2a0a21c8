use survfuse::fusion::{
    build_model, train, FusionConfig, FusionModel, FusionSample, Profile, TrainOptions, Variant,
};
use survfuse::nn::gradcheck::check_parameters;
use survfuse::nn::{GradCheckOptions, Mode};
use survfuse::survival::{concordance_index, make_time_grid, GridSize};
use survfuse::synthetic::{generate_tabular, generate_volumes, BlobSpec, SyntheticSpec};
use survfuse::volume::{preprocess, PreprocessConfig, Shape3, Volume};
use survfuse::{SurvivalRecord, TimeGrid};

/// Desk cohort: 16×24×24 blob scans center-cropped to 16³. With `blind_ehr`
/// the covariates are replaced by a single zero column, so any signal must
/// come through the image path.
fn desk_samples(n: usize, seed: u64, variant: Variant, blind_ehr: bool) -> Vec<FusionSample> {
    let mut spec = SyntheticSpec::new(n, vec![1.5, 0.5], seed);
    spec.c_max = Some(40.0);
    spec.volumes = Some(BlobSpec {
        noise_sd: 0.2,
        ..BlobSpec::default()
    });
    let cohort = generate_tabular(&spec).unwrap();
    let volumes = generate_volumes(&cohort, &spec).unwrap();
    let cfg = PreprocessConfig {
        box_target: Shape3::new(16, 24, 24),
        crop: Shape3::cube(16),
        ..PreprocessConfig::default()
    };
    cohort
        .records
        .iter()
        .zip(&volumes)
        .map(|(r, v)| {
            let mut record = r.clone();
            if blind_ehr {
                record.covariates = vec![0.0];
            }
            FusionSample::from_prepared(
                record,
                preprocess(&v.ct, &v.pet, None, &cfg).unwrap(),
                variant,
            )
        })
        .collect()
}

fn desk_model(
    samples: &[FusionSample],
    variant: Variant,
    tweak: impl FnOnce(&mut FusionConfig),
) -> FusionModel {
    let mut cfg = FusionConfig::new(variant, Profile::Desk);
    tweak(&mut cfg);
    let records: Vec<SurvivalRecord> = samples.iter().map(|s| s.record.clone()).collect();
    let grid = make_time_grid(&records, GridSize::Auto).unwrap();
    build_model(&cfg, records[0].dim(), grid).unwrap()
}

#[test]
fn desk_gradients_match_finite_differences() {
    for variant in [Variant::V2, Variant::V1] {
        let samples = desk_samples(2, 3, variant, false);
        let refs: Vec<&FusionSample> = samples.iter().collect();
        // No dropout so the objective is a deterministic function of the parameters.
        let mut model = desk_model(&samples, variant, |c| c.dropout = 0.0);
        let (_, grads) = model
            .clone()
            .loss_and_grads(&refs, Mode::Train, 1, 1.0)
            .unwrap();
        let opts = GradCheckOptions {
            max_per_tensor: Some(if variant == Variant::V1 { 2 } else { 5 }),
            floor: 1e-4,
            seed: 9,
            ..GradCheckOptions::default()
        };
        let report = check_parameters(
            &mut model,
            &grads,
            |m: &mut FusionModel| m.clone().loss(&refs, Mode::Train, 1, 1.0),
            &opts,
        )
        .unwrap();
        assert!(report.passes(1e-3), "{variant:?}: {report:?}");
    }
}

#[test]
fn eval_prediction_is_batch_invariant() {
    let samples = desk_samples(8, 5, Variant::V2, false);
    let model = desk_model(&samples, Variant::V2, |c| c.train.batch_size = 8);
    let all = model.predict_risks(&samples).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let one = model.predict_risks(std::slice::from_ref(s)).unwrap();
        assert!((one[0].value - all[i].value).abs() < 1e-10);
    }
    let dup = model
        .predict_risks(&[samples[2].clone(), samples[2].clone()])
        .unwrap();
    assert_eq!(dup[0].value, dup[1].value);
}

#[test]
fn all_zero_inputs_give_equal_finite_risks() {
    let mut samples = desk_samples(4, 6, Variant::V1, false);
    for s in &mut samples {
        s.record.covariates.iter_mut().for_each(|x| *x = 0.0);
        s.images
            .iter_mut()
            .for_each(|v| *v = Volume::zeros(v.shape));
    }
    let model = desk_model(&samples, Variant::V1, |_| {});
    let risks = model.predict_risks(&samples).unwrap();
    assert!(risks
        .iter()
        .all(|r| r.value.is_finite() && r.value == risks[0].value));
}

#[test]
fn zero_epochs_returns_initialization() {
    let samples = desk_samples(6, 7, Variant::V2, false);
    let model = desk_model(&samples, Variant::V2, |c| c.train.epochs = 0);
    let fit = train(model.clone(), &samples, &TrainOptions::default()).unwrap();
    assert_eq!(fit.model, model);
    assert!(fit.log.is_empty());
}

#[test]
fn full_batch_training_is_bit_reproducible() {
    let samples = desk_samples(10, 8, Variant::V2, false);
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    let mut traces = Vec::new();
    for run in 0..2 {
        let model = desk_model(&samples, Variant::V2, |c| {
            c.train.epochs = 2;
            c.train.full_batch = true;
            c.train.seed = 42;
        });
        let fit = train(model, &samples, &TrainOptions::default()).unwrap();
        let stem = dir.path().join(format!("run{run}"));
        fit.model.save(&stem, 2).unwrap();
        bytes.push(std::fs::read(stem.with_extension("bin")).unwrap());
        traces.push(fit.log.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>());
    }
    assert_eq!(traces[0], traces[1]);
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let samples = desk_samples(5, 10, Variant::V1, false);
    let model = desk_model(&samples, Variant::V1, |_| {});
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("model");
    model.save(&stem, 0).unwrap();
    let back = FusionModel::load(&stem).unwrap();
    assert_eq!(back, model);
    assert_eq!(
        back.predict_risks(&samples).unwrap(),
        model.predict_risks(&samples).unwrap()
    );
}

#[test]
fn rejects_images_of_the_wrong_shape() {
    let mut samples = desk_samples(2, 11, Variant::V2, false);
    let model = desk_model(&samples, Variant::V2, |_| {});
    samples[1].images[0] = Volume::zeros(Shape3::cube(8));
    assert!(model.predict_risks(&samples).is_err());
    let grid = TimeGrid::new(vec![1.0]).unwrap();
    assert!(build_model(&FusionConfig::new(Variant::V2, Profile::Desk), 0, grid).is_ok());
}

#[test]
fn desk_training_learns_blob_risk() {
    let samples = desk_samples(120, 2024, Variant::V2, true);
    let model = desk_model(&samples, Variant::V2, |c| {
        c.train.epochs = 8;
        c.train.seed = 1;
    });
    let fit = train(model, &samples, &TrainOptions::default()).unwrap();
    let records: Vec<SurvivalRecord> = samples.iter().map(|s| s.record.clone()).collect();
    let c = concordance_index(&fit.model.predict_risks(&samples).unwrap(), &records).unwrap();
    assert!(c > 0.75, "training C-index {c}, log {:?}", fit.log);
}
