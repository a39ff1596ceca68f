//! Scratch end-to-end method comparison used while pinning method defaults.

use muda_lab::datagen::{gen_blobs, split_forget_retain, BlobConfig, ForgetSpec};
use muda_lab::metrics::{evaluate_model, mix};
use muda_lab::nnet::SgdConfig;
use muda_lab::unlearn::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let muda_lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let alpha: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let beta: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let iters: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(200);
    let wd: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.03);
    let spread: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.9);

    let train_cfg = TrainConfig {
        hidden_dims: vec![64, 32],
        epochs: 50,
        batch_size: 32,
        sgd: SgdConfig { learning_rate: 0.1, weight_decay: wd, lr_decay: 0.998, momentum: 0.0 },
    };
    let data = BlobConfig { spread, ..BlobConfig::default() };

    let mk_cfg = |method: Method, lr: f64| UnlearnConfig {
        method,
        alpha,
        beta,
        sgd: SgdConfig { learning_rate: lr, weight_decay: 0.0, lr_decay: 1.0, momentum: 0.0 },
        total_iterations: iters,
        batch_size: 32,
        k_layers: 2,
        schedule: PhaseSchedule::Alternate,
        seed: 0,
    };

    // (method, lr) pairs; per-method lr from the search ranges.
    // Override via arg 7: "ft=0.05,neggrad=0.01,neggrad_ft=0.01,eu_k=0.05,cf_k=0.05,fco=0.1"
    let mut lrs = std::collections::BTreeMap::from([
        ("ft", 0.01),
        ("neggrad", 1e-4),
        ("neggrad_ft", 1e-3),
        ("eu_k", 0.01),
        ("cf_k", 0.01),
        ("ft_classifier_only", 0.1),
    ]);
    if let Some(spec) = args.get(7) {
        for part in spec.split(',') {
            let (k, v) = part.split_once('=').unwrap();
            let key = if k == "fco" { "ft_classifier_only" } else { k };
            *lrs.get_mut(key).unwrap() = v.parse().unwrap();
        }
    }
    let methods: Vec<(Method, f64)> = vec![
        (Method::Ft, lrs["ft"]),
        (Method::Neggrad, lrs["neggrad"]),
        (Method::NeggradFt, lrs["neggrad_ft"]),
        (Method::EuK, lrs["eu_k"]),
        (Method::CfK, lrs["cf_k"]),
        (Method::FtClassifierOnly, lrs["ft_classifier_only"]),
        (Method::Muda, muda_lr),
    ];

    let names: Vec<&str> = methods.iter().map(|(m, _)| m.name()).collect();
    let mut sums = vec![[0.0f64; 6]; methods.len()]; // da, lp_f, lp_r, f1, nmi, acc_f diffs
    let mut o_sums = [0.0f64; 6];
    let mut lp_r_of_r = 0.0;

    for seed in 0..5u64 {
        let bundle = gen_blobs(&data, seed).unwrap();
        let bundle =
            split_forget_retain(bundle, ForgetSpec::Class { target: (seed as usize) % 5 }, mix(seed, "rp"))
                .unwrap();
        let theta_o =
            train_from_scratch(&bundle, &bundle.all_train_indices(), &train_cfg, mix(seed, "o")).unwrap();
        let theta_r = retrain_oracle(&bundle, &train_cfg, mix(seed, "r")).unwrap();
        let rr = evaluate_model(&theta_r, &bundle, "retrained", seed, None).unwrap();
        let ro = evaluate_model(&theta_o, &bundle, "original", seed, Some(&rr)).unwrap();
        lp_r_of_r += rr.lp_retain / 5.0;
        let d = ro.diffs.as_ref().unwrap();
        for (s, v) in o_sums.iter_mut().zip([
            d.da,
            d.lp_forget.unwrap_or(0.0),
            d.lp_retain,
            d.f1,
            d.nmi,
            d.acc_forget,
        ]) {
            *s += v / 5.0;
        }
        println!(
            "seed {seed}: r: da {:.3} lp_f {:.3} lp_r {:.3} f1 {:.2} nmi {:.2} | o: da {:.3} lp_f {:.3} lp_r {:.3} f1 {:.2} nmi {:.2}",
            rr.da, rr.lp_forget.unwrap(), rr.lp_retain, rr.f1, rr.nmi,
            ro.da, ro.lp_forget.unwrap(), ro.lp_retain, ro.f1, ro.nmi,
        );
        for (mi, (method, lr)) in methods.iter().enumerate() {
            let mut cfg = mk_cfg(*method, *lr);
            cfg.seed = mix(mix(seed, "unlearn"), method.name());
            match run_method(theta_o.clone(), &bundle, &cfg) {
                Ok((theta_u, _)) => {
                    let ru = evaluate_model(&theta_u, &bundle, method.name(), seed, Some(&rr)).unwrap();
                    let d = ru.diffs.as_ref().unwrap();
                    let vals = [
                        d.da,
                        d.lp_forget.unwrap_or(0.0),
                        d.lp_retain,
                        d.f1,
                        d.nmi,
                        d.acc_forget,
                    ];
                    for (s, v) in sums[mi].iter_mut().zip(vals) {
                        *s += v / 5.0;
                    }
                    println!(
                        "  {:<18} da {:.3}({:.3}) lp_f {:.3}({:.3}) lp_r {:.3}({:.3}) f1 {:.2}({:.2}) nmi {:.2}({:.2}) acc_f {:.2} mia {:.2}",
                        method.name(),
                        ru.da, d.da,
                        ru.lp_forget.unwrap_or(f64::NAN), d.lp_forget.unwrap_or(f64::NAN),
                        ru.lp_retain, d.lp_retain,
                        ru.f1, d.f1, ru.nmi, d.nmi, ru.acc_forget, ru.mia,
                    );
                }
                Err(e) => println!("  {:<18} FAILED: {e}", method.name()),
            }
        }
    }
    println!("\nmean |diff| over 5 seeds (da, lp_f, lp_r, f1, nmi, acc_f); score = mean of (da,lp_f,f1,nmi)");
    println!(
        "  {:<18} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4}  score {:.4}",
        "original", o_sums[0], o_sums[1], o_sums[2], o_sums[3], o_sums[4], o_sums[5],
        (o_sums[0] + o_sums[1] + o_sums[3] + o_sums[4]) / 4.0
    );
    for (mi, name) in names.iter().enumerate() {
        let s = &sums[mi];
        println!(
            "  {:<18} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4}  score {:.4}",
            name, s[0], s[1], s[2], s[3], s[4], s[5],
            (s[0] + s[1] + s[3] + s[4]) / 4.0
        );
    }
    println!("mean LP(D_r) of retrained: {lp_r_of_r:.3}");
}
