//! Scratch check for the classifier-only exploit and the stability sweep.

use muda_lab::datagen::{gen_blobs, split_forget_retain, BlobConfig, ForgetSpec};
use muda_lab::metrics::{accuracy, evaluate_model, mix};
use muda_lab::nnet::SgdConfig;
use muda_lab::unlearn::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("fco");
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.3);
    let iters: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1000);

    let train_cfg = TrainConfig {
        hidden_dims: vec![64, 32],
        epochs: 50,
        batch_size: 32,
        sgd: SgdConfig { learning_rate: 0.1, weight_decay: 0.03, lr_decay: 0.998, momentum: 0.0 },
    };
    let data = BlobConfig { spread: 0.9, ..BlobConfig::default() };

    for seed in 0..5u64 {
        let bundle = gen_blobs(&data, seed).unwrap();
        let bundle =
            split_forget_retain(bundle, ForgetSpec::Class { target: (seed as usize) % 5 }, mix(seed, "rp"))
                .unwrap();
        let theta_o =
            train_from_scratch(&bundle, &bundle.all_train_indices(), &train_cfg, mix(seed, "o")).unwrap();
        match mode {
            "fco" => {
                let cfg = UnlearnConfig {
                    method: Method::FtClassifierOnly,
                    alpha: 0.0,
                    beta: 0.0,
                    sgd: SgdConfig {
                        learning_rate: lr,
                        weight_decay: args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.0),
                        lr_decay: 1.0,
                        momentum: 0.0,
                    },
                    total_iterations: iters,
                    batch_size: 32,
                    k_layers: 1,
                    schedule: PhaseSchedule::RecoverOnly,
                    seed: mix(seed, "fco"),
                };
                let (theta_u, _) = ft_classifier_only(theta_o.clone(), &bundle, &cfg).unwrap();
                let (fx, fy) = bundle.gather_train(&bundle.forget_indices);
                let acc_f = accuracy(&theta_u, &fx, &fy).unwrap();
                let rr = evaluate_model(
                    &retrain_oracle(&bundle, &train_cfg, mix(seed, "r")).unwrap(),
                    &bundle, "retrained", seed, None,
                ).unwrap();
                let ro = evaluate_model(&theta_o, &bundle, "original", seed, Some(&rr)).unwrap();
                let ru = evaluate_model(&theta_u, &bundle, "fco", seed, Some(&rr)).unwrap();
                println!(
                    "seed {seed}: acc_f {acc_f:.4} | lp_f orig {:.3} fco {:.3} | mia orig {:.3} fco {:.3}",
                    ro.lp_forget.unwrap(), ru.lp_forget.unwrap(), ro.mia, ru.mia,
                );
            }
            "stability" => {
                // NegGrad LP(D_r) at 1x vs 5x, MUDA range over final half.
                for (name, method, m_lr, alpha, beta) in [
                    ("muda", Method::Muda, 0.02, 2.0, 0.3),
                    ("neggrad", Method::Neggrad, lr, 0.0, 0.0),
                ] {
                    let cfg = UnlearnConfig {
                        method,
                        alpha,
                        beta,
                        sgd: SgdConfig { learning_rate: m_lr, weight_decay: 0.0, lr_decay: 1.0, momentum: 0.0 },
                        total_iterations: iters * 5,
                        batch_size: 32,
                        k_layers: 2,
                        schedule: PhaseSchedule::Alternate,
                        seed: mix(seed, name),
                    };
                    let mut samples: Vec<(usize, f64)> = Vec::new();
                    let bundle_ref = &bundle;
                    let mut hook = |iter: usize, model: &muda_lab::MlpModel| {
                        if iter % 25 != 0 {
                            return;
                        }
                        // quick LP(D_r) proxy: retain-class test accuracy of a probe
                        let (rx, ry) = bundle_ref.gather_train(&bundle_ref.retain_indices);
                        let rf = model.forward(&rx).unwrap().features;
                        let tf = model.forward(&bundle_ref.test_x).unwrap().features;
                        let target = match bundle_ref.forget_spec.unwrap() {
                            ForgetSpec::Class { target } => target,
                            _ => unreachable!(),
                        };
                        let keep: Vec<usize> =
                            (0..bundle_ref.test_y.len()).filter(|&i| bundle_ref.test_y[i] != target).collect();
                        let mut ex = muda_lab::DenseMatrix::zeros(keep.len(), tf.cols());
                        let mut ey = Vec::new();
                        for (r, &i) in keep.iter().enumerate() {
                            for c in 0..tf.cols() {
                                ex.set(r, c, tf.get(i, c));
                            }
                            ey.push(bundle_ref.test_y[i]);
                        }
                        let lp = muda_lab::metrics::linear_probe(
                            &rf, &ry, &ex, &ey,
                            &muda_lab::metrics::ProbeConfig { seed: 7, ..Default::default() },
                        )
                        .unwrap();
                        samples.push((iter, lp));
                    };
                    run_method_with_hook(theta_o.clone(), &bundle, &cfg, &mut hook).unwrap();
                    let at = |it: usize| samples.iter().find(|(i, _)| *i == it).map(|(_, v)| *v).unwrap();
                    let half_start = samples.len() / 2;
                    let tail: Vec<f64> = samples[half_start..].iter().map(|(_, v)| *v).collect();
                    let range = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                        - tail.iter().cloned().fold(f64::INFINITY, f64::min);
                    println!(
                        "seed {seed} {name}: lp_r@{} {:.3} lp_r@{} {:.3} drop {:.3} | final-half range {:.3}",
                        iters, at(iters), iters * 5, at(iters * 5),
                        at(iters) - at(iters * 5), range,
                    );
                }
            }
            _ => panic!("unknown mode"),
        }
    }
}
