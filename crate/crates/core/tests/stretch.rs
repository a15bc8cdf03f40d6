//! Full CIFAR-10 accuracy check. Hours of CPU time; run with
//! `PROBE_DATA_DIR=/path/to/cifar-10-batches-bin cargo test --release --test stretch -- --ignored`.

use probe_core::data::{cifar_shape, default_data_dir, load_cifar10, Normalization};
use probe_core::landscape::{linear_network, train_linear, LinearConfig};
use probe_core::net::{InitScheme, Network, NetworkSpec};
use probe_core::train::{train, EvalSpec, LrSchedule, Model, Regularizer, TrainConfig};
use probe_core::Shape;

#[test]
#[ignore = "needs CIFAR-10 under PROBE_DATA_DIR and hours of CPU time"]
fn full_cifar_mlp_and_linear_accuracy() {
    let dir = default_data_dir().expect("set PROBE_DATA_DIR to the CIFAR-10 binary directory");
    let flat = Shape::flat(cifar_shape().size());
    let data = load_cifar10(dir).unwrap().normalized(Normalization::PerChannel).reshape(flat).unwrap();

    let net = Network::new(NetworkSpec::mlp(flat.size(), &[512, 512, 512], 10)).unwrap();
    let mut model = Model::new(&net, net.init(InitScheme::HeUniform { seed: 0 }));
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 128,
        schedule: LrSchedule::Piecewise { base: 0.01, milestones: vec![60, 80, 90], factor: 0.1 },
        momentum: 0.9,
        regularizer: Regularizer::None,
        augment_padding: None,
        attack: None,
        seed: 0,
    };
    train(&net, &mut model, &data.train, &cfg, &EvalSpec::default(), |_, _| Ok(())).unwrap();
    let mlp_acc: f64 = 100.0 * net.accuracy(&model.params.values, &model.stats, &data.test).unwrap();

    let fit = train_linear(&data.train, &LinearConfig { weight_decay: 5e-4, ..Default::default() }).unwrap();
    let lin = linear_network(flat.size(), 10).unwrap();
    let lin_acc: f64 = 100.0 * lin.accuracy(&fit.map.to_params(), &lin.fresh_stats(), &data.test).unwrap();

    println!("mlp test accuracy {mlp_acc:.2}%, linear test accuracy {lin_acc:.2}%");
    assert!((mlp_acc - 58.79).abs() <= 3.0, "mlp {mlp_acc}");
    assert!((lin_acc - 40.53).abs() <= 1.5, "linear {lin_acc}");
}
