mod common;

use palette_styler::encoder::EncoderParams;
use palette_styler::stylizer::{attention_color, attention_color_gradients, AcParams};
use palette_styler::training::{pair_gradients, pair_loss, EncodedImage, Gradients, PreparedPair};
use palette_styler::{StyleModel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::smooth_image;

fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn random_map(c: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(c, 4, 4, |_, _, _| rng.random_range(-1.0..1.0))
}

#[test]
fn attention_readout_matches_finite_differences_for_every_tensor() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = AcParams::<f64>::init(16, &mut rng);
    let content = random_map(16, &mut rng);
    let stylized: Vec<_> = (0..3).map(|_| random_map(16, &mut rng)).collect();
    let readout = random_map(16, &mut rng);
    let value = |p: &AcParams<f64>| -> f64 {
        let out = attention_color(&content, &stylized, p).unwrap();
        out.data()
            .iter()
            .zip(readout.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let grads = attention_color_gradients(&content, &stylized, &params, &readout).unwrap();
    let names: Vec<String> = params.named_params().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), 8);
    for (name, g) in grads.named_params() {
        for (i, &analytic) in g.iter().enumerate() {
            let orig = params.param_mut(&name).unwrap()[i];
            params.param_mut(&name).unwrap()[i] = orig + 1e-3;
            let plus = value(&params);
            params.param_mut(&name).unwrap()[i] = orig - 1e-3;
            let minus = value(&params);
            params.param_mut(&name).unwrap()[i] = orig;
            let fd = (plus - minus) / 2e-3;
            let rel = rel_error(analytic, fd, 1e-6);
            assert!(
                rel <= 1e-2,
                "{name}[{i}]: analytic {analytic:e} fd {fd:e} rel {rel:e}"
            );
        }
    }
}

#[test]
fn attention_gradients_reject_mismatched_upstream() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = AcParams::<f64>::init(16, &mut rng);
    let content = random_map(16, &mut rng);
    let stylized = vec![random_map(16, &mut rng)];
    assert!(
        attention_color_gradients(&content, &stylized, &params, &Tensor::zeros(16, 2, 2)).is_err()
    );
}

fn toy_pair(size: usize, model: &StyleModel<f64>, rng: &mut ChaCha8Rng) -> PreparedPair<f64> {
    let c = EncodedImage::new(&model.encoder, &smooth_image(size, 3).to_tensor()).unwrap();
    let s = EncodedImage::new(&model.encoder, &smooth_image(size, 4).to_tensor()).unwrap();
    PreparedPair::new(&c, &s, 12, 1, 3, rng).unwrap()
}

// A step small enough that no ReLU changes state, so the difference quotient
// tracks the derivative of the piece the analytic gradient is taken on.
#[test]
fn loss_gradients_match_small_step_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = StyleModel::init(EncoderParams::<f32>::synthetic(1).cast::<f64>(), &mut rng);
    let pair = toy_pair(32, &model, &mut rng);
    let mut grads = Gradients::zeros_like(&model);
    pair_gradients(&model, &pair, 30.0, 1.0, 1.0, &mut grads).unwrap();
    let tensors: Vec<(String, usize)> = model
        .trainable()
        .iter()
        .map(|(n, p)| (n.clone(), p.len()))
        .collect();
    let h = 1e-6;
    for (name, len) in &tensors {
        for _ in 0..2 {
            let i = rng.random_range(0..*len);
            let analytic = grads.get(name).unwrap()[i];
            let orig = model.trainable_param_mut(name).unwrap()[i];
            model.trainable_param_mut(name).unwrap()[i] = orig + h;
            let plus = pair_loss(&model, &pair, 30.0, 1.0).unwrap().total;
            model.trainable_param_mut(name).unwrap()[i] = orig - h;
            let minus = pair_loss(&model, &pair, 30.0, 1.0).unwrap().total;
            model.trainable_param_mut(name).unwrap()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let rel = rel_error(analytic, fd, 1e-4);
            assert!(
                rel <= 1e-3,
                "{name}[{i}]: analytic {analytic:e} fd {fd:e} rel {rel:e}"
            );
        }
    }
}

#[test]
fn output_bias_gradient_matches_at_toy_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = StyleModel::init(EncoderParams::<f32>::synthetic(1).cast::<f64>(), &mut rng);
    let pair = toy_pair(64, &model, &mut rng);
    let mut grads = Gradients::zeros_like(&model);
    pair_gradients(&model, &pair, 30.0, 1.0, 1.0, &mut grads).unwrap();
    let name = "decoder/conv1_1/bias";
    for i in 0..3 {
        let analytic = grads.get(name).unwrap()[i];
        let orig = model.trainable_param_mut(name).unwrap()[i];
        model.trainable_param_mut(name).unwrap()[i] = orig + 1e-3;
        let plus = pair_loss(&model, &pair, 30.0, 1.0).unwrap().total;
        model.trainable_param_mut(name).unwrap()[i] = orig - 1e-3;
        let minus = pair_loss(&model, &pair, 30.0, 1.0).unwrap().total;
        model.trainable_param_mut(name).unwrap()[i] = orig;
        let fd = (plus - minus) / 2e-3;
        let rel = rel_error(analytic, fd, 1e-6);
        assert!(
            rel <= 1e-2,
            "{name}[{i}]: analytic {analytic:e} fd {fd:e} rel {rel:e}"
        );
    }
}
