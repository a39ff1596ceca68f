//! Scratch sweep used while pinning desk-scale defaults. Not part of the
//! documented example set.

use muda_lab::datagen::{gen_blobs, split_forget_retain, BlobConfig, ForgetSpec};
use muda_lab::linalg;
use muda_lab::metrics::{self, mix};
use muda_lab::nnet::SgdConfig;
use muda_lab::unlearn::{retrain_oracle, train_from_scratch, TrainConfig};

fn diag(model: &muda_lab::MlpModel, bundle: &muda_lab::DataBundle, tag: &str) {
    // Decompose the forget gram into mean vs within-cluster mass, and
    // measure tanh saturation of the feature layer.
    let (fx, _) = bundle.gather_train(&bundle.forget_indices);
    let (rx, _) = bundle.gather_train(&bundle.retain_indices);
    let ff = metrics::feature_columns(model, &fx).unwrap();
    let fr = metrics::feature_columns(model, &rx).unwrap();
    let gr = fr.gram();
    let d = linalg::sym_eig(&gr).unwrap();
    let lam: Vec<f64> = d.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let er = linalg::effective_rank(&lam).unwrap();
    let k = linalg::subspace_dim(&lam).unwrap();
    let da = metrics::dimensional_alignment(&ff, &fr).unwrap();
    // Energy fractions of the top spectrum.
    let total: f64 = lam.iter().sum();
    let top1 = lam[0] / total;
    let top4: f64 = lam.iter().take(4).sum::<f64>() / total;
    // saturation: mean |f|
    let sat: f64 = ff.data().iter().map(|v| v.abs()).sum::<f64>() / ff.data().len() as f64;
    // mean vs within decomposition of G_f
    let c = ff.rows();
    let n = ff.cols();
    let mu: Vec<f64> = (0..c).map(|i| (0..n).map(|j| ff.get(i, j)).sum::<f64>() / n as f64).collect();
    let mut gmu = muda_lab::DenseMatrix::zeros(c, c);
    for i in 0..c { for j in 0..c { gmu.set(i, j, n as f64 * mu[i] * mu[j]); } }
    let gf = ff.gram();
    let mut within = gf.clone();
    for i in 0..c*c { within.data_mut()[i] -= gmu.data()[i]; }
    let mean_mass = linalg::frobenius_norm(&gmu);
    let within_mass = linalg::frobenius_norm(&within);
    // how much of the pure mean direction lies in retain top-k
    let p = linalg::top_k_projector(&d, k).unwrap();
    let mu_m = muda_lab::DenseMatrix::from_vec_unchecked(1, c, mu.clone());
    let pmu = mu_m.matmul(&p);
    let mu_in = linalg::frobenius_norm(&pmu) / linalg::frobenius_norm(&mu_m).max(1e-300);
    println!(
        "  {tag}: DA {da:.3} er {er:.2} k {k} | top1 {top1:.2} top4 {top4:.2} | sat {sat:.2} mean/within {:.1}/{:.1} mu_in {mu_in:.2}",
        mean_mass, within_mass
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let hidden: Vec<usize> = if args.len() > 1 {
        args[1].split(',').map(|s| s.parse().unwrap()).collect()
    } else {
        vec![64, 32]
    };
    let wd: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(50);
    let spread: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let mean_scale: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    println!("hidden {hidden:?} wd {wd} epochs {epochs} spread {spread} mean_scale {mean_scale}");

    let train_cfg = TrainConfig {
        hidden_dims: hidden,
        epochs,
        batch_size: 32,
        sgd: SgdConfig { learning_rate: 0.1, weight_decay: wd, lr_decay: 0.998, momentum: 0.0 },
    };

    let subclasses: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(2);
    let n_per: usize = 400 / subclasses;
    let data = BlobConfig { spread, mean_scale, subclasses_per_class: subclasses, n_per_subclass: n_per, ..BlobConfig::default() };
    let mut dir = 0;
    for seed in 0..5u64 {
        let bundle = gen_blobs(&data, seed).unwrap();
        let bundle =
            split_forget_retain(bundle, ForgetSpec::Class { target: (seed as usize) % 5 }, mix(seed, "rp"))
                .unwrap();
        let theta_o =
            train_from_scratch(&bundle, &bundle.all_train_indices(), &train_cfg, mix(seed, "o")).unwrap();
        let theta_r = retrain_oracle(&bundle, &train_cfg, mix(seed, "r")).unwrap();
        let acc = metrics::accuracy(&theta_o, &bundle.test_x, &bundle.test_y).unwrap();
        println!("seed {seed} acc {acc:.3}");
        diag(&theta_o, &bundle, "orig");
        diag(&theta_r, &bundle, "retr");
        let (fx, _) = bundle.gather_train(&bundle.forget_indices);
        let (rx, _) = bundle.gather_train(&bundle.retain_indices);
        let da_o = metrics::dimensional_alignment(
            &metrics::feature_columns(&theta_o, &fx).unwrap(),
            &metrics::feature_columns(&theta_o, &rx).unwrap(),
        )
        .unwrap();
        let da_r = metrics::dimensional_alignment(
            &metrics::feature_columns(&theta_r, &fx).unwrap(),
            &metrics::feature_columns(&theta_r, &rx).unwrap(),
        )
        .unwrap();
        let cda_o = centered_da(&theta_o, &bundle, false);
        let cda_r = centered_da(&theta_r, &bundle, false);
        let oda_o = centered_da(&theta_o, &bundle, true);
        let oda_r = centered_da(&theta_r, &bundle, true);
        println!("  centered(retain-frame): o {cda_o:.3} r {cda_r:.3} | centered(own): o {oda_o:.3} r {oda_r:.3}");
        if da_r > da_o {
            dir += 1;
        }
    }
    println!("direction ok on {dir}/5");
}

// Centered-DA probe: subtract the retain feature mean from both sides.
#[allow(dead_code)]
fn centered_da(
    model: &muda_lab::MlpModel,
    bundle: &muda_lab::DataBundle,
    own_mean: bool,
) -> f64 {
    let (fx, _) = bundle.gather_train(&bundle.forget_indices);
    let (rx, _) = bundle.gather_train(&bundle.retain_indices);
    let mut ff = metrics::feature_columns(model, &fx).unwrap();
    let mut fr = metrics::feature_columns(model, &rx).unwrap();
    let c = ff.rows();
    let rmean: Vec<f64> = (0..c)
        .map(|i| (0..fr.cols()).map(|j| fr.get(i, j)).sum::<f64>() / fr.cols() as f64)
        .collect();
    let fmean: Vec<f64> = (0..c)
        .map(|i| (0..ff.cols()).map(|j| ff.get(i, j)).sum::<f64>() / ff.cols() as f64)
        .collect();
    for i in 0..c {
        for j in 0..fr.cols() {
            fr.set(i, j, fr.get(i, j) - rmean[i]);
        }
        let sub = if own_mean { fmean[i] } else { rmean[i] };
        for j in 0..ff.cols() {
            ff.set(i, j, ff.get(i, j) - sub);
        }
    }
    metrics::dimensional_alignment(&ff, &fr).unwrap()
}
