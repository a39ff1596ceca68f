//! Scratch backdoor-defense run used while pinning trigger defaults.

use muda_lab::datagen::{BlobConfig, ForgetSpec};
use muda_lab::harness::*;
use muda_lab::nnet::SgdConfig;
use muda_lab::unlearn::{Method, PhaseSchedule, TrainConfig, UnlearnConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let trigger_value: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3.0);
    let fraction: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let muda_iters: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(200);
    let n_dims: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2);
    let muda_lr: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let muda_alpha: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(2.0);

    let mk = |method: Method, lr: f64, iters: usize, wd: f64| UnlearnConfig {
        method,
        alpha: 2.0,
        beta: 0.3,
        sgd: SgdConfig { learning_rate: lr, weight_decay: wd, lr_decay: 1.0, momentum: 0.0 },
        total_iterations: iters,
        batch_size: 32,
        k_layers: 2,
        schedule: PhaseSchedule::Alternate,
        seed: 0,
    };
    let cfg = ExperimentConfig {
        data: BlobConfig { spread: 0.9, ..BlobConfig::default() },
        train: TrainConfig {
            hidden_dims: vec![64, 32],
            epochs: 50,
            batch_size: 32,
            sgd: SgdConfig { learning_rate: 0.1, weight_decay: 0.03, lr_decay: 0.998, momentum: 0.0 },
        },
        forget: ForgetSpec::Poisoned,
        methods: vec![
            mk(Method::Ft, 0.05, 200, 0.0),
            mk(Method::Neggrad, 0.003, 200, 0.0),
            mk(Method::NeggradFt, 0.003, 200, 0.0),
            mk(Method::EuK, 0.05, 200, 0.0),
            mk(Method::CfK, 0.05, 200, 0.0),
            mk(Method::FtClassifierOnly, 0.3, 1000, 0.01),
            {
                let mut c = mk(Method::Muda, muda_lr, muda_iters, 0.0);
                c.alpha = muda_alpha;
                c
            },
        ],
        seeds: vec![0, 1, 2, 3, 4],
        output_dir: "/tmp/bd_out".into(),
        flags: Flags::default(),
        backdoor: Some(BackdoorConfig {
            trigger_dims: (0..n_dims).collect(),
            trigger_value,
            target_label: 0,
            fraction,
        }),
        stability: None,
        rotate_targets: true,
    };
    let table = run_backdoor(&cfg).unwrap();
    for mean in &table.means {
        let g = |i: usize| mean.metrics[i].map(|v| format!("{v:.3}")).unwrap_or("-".into());
        // columns: da lp_forget lp_retain lp_sub f1 nmi acc_forget acc_retain mia asr
        println!(
            "{:<20} asr {}  acc_r {}  da {}  clean-accs...",
            mean.method,
            g(9),
            g(7),
            g(0)
        );
    }
    // per-seed ASR for original / retrained / muda
    for m in ["original", "retrained", "muda", "ft", "neggrad"] {
        let asrs: Vec<String> = table
            .rows_for(m)
            .map(|r| r.report.as_ref().and_then(|x| x.asr).map(|v| format!("{v:.2}")).unwrap_or("-".into()))
            .collect();
        println!("{m:<12} per-seed ASR: {}", asrs.join(" "));
    }
}
