//! Finite-difference checks of every layer's backward pass and of a
//! desk-profile fusion network end to end.
//!
//! cargo run --example gradient_check

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survfuse::fusion::{build_model, FusionConfig, FusionModel, FusionSample, Profile, Variant};
use survfuse::nn::gradcheck::{check_parameters, projection_loss};
use survfuse::nn::{grad_check, GradCheckOptions, LayerSpec, Mode, Sequential, Tensor};
use survfuse::volume::{Shape3, Volume};
use survfuse::{SurvivalRecord, TimeGrid};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape")
}

fn main() -> survfuse::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layers = [
        (LayerSpec::conv3d(2, 3, 3), vec![2, 2, 4, 4, 4]),
        (LayerSpec::conv3d(2, 2, 5), vec![1, 2, 4, 4, 4]),
        (LayerSpec::batchnorm3d(2), vec![3, 2, 3, 3, 3]),
        (LayerSpec::Maxpool3d, vec![2, 2, 4, 4, 4]),
        (LayerSpec::GlobalAvgPool, vec![2, 3, 4, 4, 4]),
        (LayerSpec::linear(5, 3), vec![4, 5]),
        (LayerSpec::Dropout { p: 0.3 }, vec![3, 8]),
    ];
    for (spec, shape) in layers {
        let net = Sequential::new(&[spec], 1)?;
        let x = random(&shape, &mut rng);
        let loss = projection_loss(random(&net.output_shape(&shape)?, &mut rng));
        let report = grad_check(&net, &x, loss, &GradCheckOptions::default())?;
        println!(
            "{:<16} {:>4} entries  max rel err {:.2e}",
            spec.name(),
            report.checked,
            report.max_rel_err
        );
    }

    // Whole network: conv paths, head and MTLR layer, two patients.
    let mut cfg = FusionConfig::new(Variant::V2, Profile::Desk);
    cfg.dropout = 0.0;
    let mut model = build_model(&cfg, 2, TimeGrid::new(vec![2.0, 5.0, 9.0])?)?;
    let samples: Vec<FusionSample> = [(3.0, true), (7.0, false)]
        .iter()
        .enumerate()
        .map(|(i, &(t, e))| {
            let data = (0..cfg.input.len())
                .map(|_| rng.gen_range(0.0..1.0))
                .collect();
            FusionSample {
                record: SurvivalRecord::new(format!("p{i}"), vec![0.5, -1.0], t, e)
                    .expect("record"),
                images: vec![
                    Volume::new(Shape3::cube(16), [1.0; 3], [0.0; 3], data).expect("volume")
                ],
            }
        })
        .collect();
    let refs: Vec<&FusionSample> = samples.iter().collect();
    let (_, grads) = model.clone().loss_and_grads(&refs, Mode::Train, 1, 1.0)?;
    let opts = GradCheckOptions {
        max_per_tensor: Some(4),
        floor: 1e-4,
        ..GradCheckOptions::default()
    };
    let report = check_parameters(
        &mut model,
        &grads,
        |m: &mut FusionModel| m.clone().loss(&refs, Mode::Train, 1, 1.0),
        &opts,
    )?;
    println!(
        "fusion desk V2   {:>4} entries  max rel err {:.2e}",
        report.checked, report.max_rel_err
    );
    Ok(())
}
