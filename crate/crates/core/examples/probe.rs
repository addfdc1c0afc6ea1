// debug probe 3: compare sequence_grad against externally composed backward
use mdn_core::predictor::{Mode, PredictorConfig, PredictorModel};
use mdn_core::rng::rng_from_seed;
use ndarray::Array2;
use rand::Rng as _;

fn main() {
    let mut rng = rng_from_seed(77);
    let config = PredictorConfig {
        context_width: 3,
        embedding_dim: 2,
        n_components: 2,
        conv_channels: 3,
        conv_kernel: 3,
        recurrent_width: 3,
        dropout_rate: 0.0,
    };
    let model = PredictorModel::init(config, &mut rng).unwrap();
    let k = 3;
    let ctx = Array2::from_shape_fn((k, 3), |_| rng.gen_range(-1.0..1.0));
    let target = Array2::from_shape_fn((k, 2), |_| rng.gen_range(-1.5..1.5));
    let (_, grad) = model.sequence_grad(&ctx, &target, &mut Mode::Eval).unwrap();
    println!("grad.norm2.shift = {:?}", grad.norm2.shift);
    println!("grad.norm1.shift = {:?}", grad.norm1.shift);
    println!("grad.conv2.bias  = {:?}", grad.conv2.bias);
    println!("grad.conv1.bias  = {:?}", grad.conv1.bias);

    // forward by hand to inspect intermediates
    let pre1 = model.conv1.forward(&ctx);
    let act1 = pre1.mapv(|v| v.max(0.0));
    let (normed1, _) = model.norm1.forward(&act1);
    let pre2 = model.conv2.forward(&normed1);
    println!("pre2 = {:?}", pre2);
    let act2 = pre2.mapv(|v| v.max(0.0));
    println!("act2 rows: {:?}", act2);
}
