//! Scratch diagnostics for the end-to-end ordering criterion.
//! Run explicitly: cargo test -p deepkem-core --test diag -- --ignored --nocapture

use deepkem_core::deepkernel::{
    build_deep_kernel, dae_loss, train, FeatureNetwork, NetworkArchitecture, TrainSettings,
};
use deepkem_core::experiments::{
    build_empirical_kernel, rebin_stage, reconstruct_frames, simulate, snr_db,
    train_deep_kernel, CorruptedRecon, ExperimentConfig, Method,
};
use deepkem_core::kernel::SparseKernelMatrix;
use deepkem_core::recon::window_frame_ranges;
use deepkem_core::Image2D;

fn spec96_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.phantom.width = 96;
    cfg.phantom.height = 96;
    cfg.phantom.pixel_size_mm = 2.5;
    cfg.sim.total_counts = 2e6;
    cfg.seed = seed;
    cfg.kernel.k = 50;
    cfg.recon.record_every = 60;
    cfg.validate().unwrap();
    cfg
}

#[test]
#[ignore]
fn diagnose_training() {
    let cfg = spec96_config(11);
    let sim = simulate(&cfg).unwrap();
    let (composites, composite_backgrounds) =
        rebin_stage(&cfg, &sim.counts, &sim.backgrounds).unwrap();
    let composite_model = sim.composite_model().unwrap();
    let kp = build_empirical_kernel(&cfg, &composites, &composite_backgrounds, &composite_model)
        .unwrap();
    let tp = train_deep_kernel(&cfg, &kp, &composite_model).unwrap();

    println!(
        "loss trace: init {:.6e} -> final {:.6e} (min {:.6e})",
        tp.loss_trace[0],
        tp.loss_trace[tp.loss_trace.len() - 1],
        tp.loss_trace.iter().cloned().fold(f64::INFINITY, f64::min),
    );

    // DAE loss of the near-empirical kernel (theta = 0).
    let channels = kp.features.to_channel_images();
    let zero_net = FeatureNetwork::new(NetworkArchitecture::desk_default(
        channels.len(),
        cfg.train.hidden_channels,
    ))
    .unwrap();
    let loss_zero = dae_loss(&zero_net, &channels, &kp.graph, 1.0, &tp.pairs).unwrap();
    println!("dae loss at theta=0 (empirical kernel): {loss_zero:.6e}");

    // Composite truths: duration-weighted sums of truth frames, scaled by
    // count_scale like the reconstructions.
    let schedule = cfg.schedule().unwrap();
    let ranges = window_frame_ranges(&schedule, &cfg.composite_windows).unwrap();
    let comp_truths: Vec<Image2D> = ranges
        .iter()
        .map(|r| {
            let mut acc = vec![0.0; 96 * 96];
            for m in r.clone() {
                let dur = schedule.duration(m);
                for (a, v) in acc.iter_mut().zip(sim.truth.frame(m).values()) {
                    *a += dur * v;
                }
            }
            Image2D::new(96, 96, 2.5, acc).unwrap()
        })
        .collect();

    // True denoising quality: K ztilde vs composite truth.
    let deep = &tp.deep_kernel;
    let emp = &kp.empirical;
    for (m, pair) in tp.pairs.iter().enumerate() {
        let t = &comp_truths[m];
        let raw = snr_db(&pair.corrupted, t).unwrap();
        let target_snr = snr_db(&pair.target, t).unwrap();
        let emp_out = emp.matvec(&pair.corrupted).unwrap();
        let deep_out = deep.matvec(&pair.corrupted).unwrap();
        println!(
            "composite {m}: ztilde {raw:.2} dB | z (target) {target_snr:.2} dB | K_emp ztilde {:.2} dB | K_deep ztilde {:.2} dB",
            snr_db(&emp_out, t).unwrap(),
            snr_db(&deep_out, t).unwrap()
        );
        // And how well each kernel smooths the TARGET (z -> Kz vs truth):
        let emp_t = emp.matvec(&pair.target).unwrap();
        let deep_t = deep.matvec(&pair.target).unwrap();
        println!(
            "             K_emp z {:.2} dB | K_deep z {:.2} dB",
            snr_db(&emp_t, t).unwrap(),
            snr_db(&deep_t, t).unwrap()
        );
    }

    // Kernel sharpness: mean self-weight.
    let self_weight = |k: &SparseKernelMatrix| -> f64 {
        let n = k.n_pixels();
        (0..n)
            .map(|j| {
                let (idx, w) = k.row(j);
                idx.iter()
                    .zip(w)
                    .find(|(&l, _)| l as usize == j)
                    .map(|(_, &w)| w)
                    .unwrap_or(0.0)
            })
            .sum::<f64>()
            / n as f64
    };
    println!(
        "mean self-weight: empirical {:.4}, trained {:.4} (uniform would be {:.4})",
        self_weight(emp),
        self_weight(deep),
        1.0 / cfg.kernel.k as f64
    );

    // Feature spread before/after training.
    let spread = |f: &deepkem_core::kernel::FeatureSet| -> f64 {
        let n = f.n_pixels();
        let mut sum = 0.0;
        for c in 0..f.n_features() {
            let mean: f64 = (0..n).map(|j| f.row(j)[c]).sum::<f64>() / n as f64;
            let var: f64 = (0..n).map(|j| (f.row(j)[c] - mean).powi(2)).sum::<f64>() / n as f64;
            sum += var.sqrt();
        }
        sum / f.n_features() as f64
    };
    let trained_features = tp.network.forward(&channels).unwrap().features;
    println!(
        "feature std: input {:.3}, trained {:.3}",
        spread(&kp.features),
        spread(&trained_features)
    );

    // Per-frame SNR for the three methods.
    for method in Method::ALL {
        let kernel = match method {
            Method::Mlem => SparseKernelMatrix::identity(96, 96, 2.5),
            Method::Kem => emp.clone(),
            Method::DeepKem => deep.clone(),
        };
        let outputs = reconstruct_frames(
            &cfg,
            &sim.counts,
            &sim.backgrounds,
            &sim.frame_models,
            &kernel,
            None,
        )
        .unwrap();
        let snrs: Vec<f64> = outputs
            .iter()
            .enumerate()
            .map(|(m, out)| snr_db(&out.activity, sim.truth.frame(m)).unwrap())
            .collect();
        let mean = snrs.iter().sum::<f64>() / snrs.len() as f64;
        println!(
            "{method}: mean {mean:.2} dB | frames: {}",
            snrs.iter()
                .map(|s| format!("{s:.1}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
}

#[test]
#[ignore]
fn diagnose_kem_pairs() {
    // corrupted_recon = kem: training pairs reconstructed with the
    // empirical kernel instead of plain EM.
    let mut cfg = spec96_config(11);
    cfg.train.corrupted_recon = CorruptedRecon::Kem;
    let sim = simulate(&cfg).unwrap();
    let (composites, composite_backgrounds) =
        rebin_stage(&cfg, &sim.counts, &sim.backgrounds).unwrap();
    let composite_model = sim.composite_model().unwrap();
    let kp = build_empirical_kernel(&cfg, &composites, &composite_backgrounds, &composite_model)
        .unwrap();
    let tp = train_deep_kernel(&cfg, &kp, &composite_model).unwrap();
    println!(
        "kem-pairs loss: init {:.4e} -> final {:.4e}",
        tp.loss_trace[0],
        tp.loss_trace[tp.loss_trace.len() - 1]
    );
    for method in [Method::Kem, Method::DeepKem] {
        let kernel = match method {
            Method::Kem => kp.empirical.clone(),
            _ => tp.deep_kernel.clone(),
        };
        let outputs = reconstruct_frames(
            &cfg, &sim.counts, &sim.backgrounds, &sim.frame_models, &kernel, None,
        )
        .unwrap();
        let snrs: Vec<f64> = outputs
            .iter()
            .enumerate()
            .map(|(m, out)| snr_db(&out.activity, sim.truth.frame(m)).unwrap())
            .collect();
        let mean = snrs.iter().sum::<f64>() / snrs.len() as f64;
        println!("kem-pairs {method}: mean {mean:.2} dB, frame24 {:.2} dB", snrs[23]);
    }
}

#[test]
#[ignore]
fn diagnose_training_trajectory() {
    // True-denoising quality vs training iteration (50-iter chunks; Adam
    // state resets per chunk, fine for a qualitative look).
    let cfg = spec96_config(11);
    let sim = simulate(&cfg).unwrap();
    let (composites, composite_backgrounds) =
        rebin_stage(&cfg, &sim.counts, &sim.backgrounds).unwrap();
    let composite_model = sim.composite_model().unwrap();
    let kp = build_empirical_kernel(&cfg, &composites, &composite_backgrounds, &composite_model)
        .unwrap();
    // Pairs via the default (mlem) path.
    let identity = SparseKernelMatrix::identity(96, 96, 2.5);
    let pairs = deepkem_core::deepkernel::make_training_pairs(
        &composites,
        &composite_backgrounds,
        &composite_model,
        &identity,
        &cfg.recon,
        cfg.train.d,
        cfg.seed,
    )
    .unwrap();

    let schedule = cfg.schedule().unwrap();
    let ranges = window_frame_ranges(&schedule, &cfg.composite_windows).unwrap();
    let comp_truths: Vec<Image2D> = ranges
        .iter()
        .map(|r| {
            let mut acc = vec![0.0; 96 * 96];
            for m in r.clone() {
                let dur = schedule.duration(m);
                for (a, v) in acc.iter_mut().zip(sim.truth.frame(m).values()) {
                    *a += dur * v;
                }
            }
            Image2D::new(96, 96, 2.5, acc).unwrap()
        })
        .collect();

    let channels = kp.features.to_channel_images();
    let mut net = FeatureNetwork::new(NetworkArchitecture::desk_default(
        channels.len(),
        cfg.train.hidden_channels,
    ))
    .unwrap();
    net.init_uniform(deepkem_core::projector::derive_seed(
        cfg.seed,
        deepkem_core::experiments::SEED_TAG_NETINIT,
        0,
    ));

    let denoise_snr = |net: &FeatureNetwork| -> f64 {
        let kern = build_deep_kernel(net, &channels, &kp.graph, 1.0).unwrap();
        let mut sum = 0.0;
        for (m, pair) in pairs.iter().enumerate() {
            let out = kern.matvec(&pair.corrupted).unwrap();
            sum += snr_db(&out, &comp_truths[m]).unwrap();
        }
        sum / pairs.len() as f64
    };

    println!(
        "iter 0: loss {:.4e}, true-denoise {:.2} dB",
        dae_loss(&net, &channels, &kp.graph, 1.0, &pairs).unwrap(),
        denoise_snr(&net)
    );
    let settings = TrainSettings {
        learning_rate: cfg.train.learning_rate,
        n_iterations: 50,
        seed: cfg.seed,
        optimizer: cfg.train.optimizer,
    };
    for chunk in 1..=10 {
        let out = train(&net, &channels, &kp.graph, 1.0, &pairs, &settings).unwrap();
        net = out.network;
        println!(
            "iter {}: loss {:.4e}, true-denoise {:.2} dB",
            chunk * 50,
            dae_loss(&net, &channels, &kp.graph, 1.0, &pairs).unwrap(),
            denoise_snr(&net)
        );
    }
}

#[test]
#[ignore]
fn diagnose_window_sweep() {
    for window in [21usize, 31, 41, 61] {
        let mut cfg = spec96_config(11);
        cfg.kernel.window = window;
        let sim = simulate(&cfg).unwrap();
        let (composites, composite_backgrounds) =
            rebin_stage(&cfg, &sim.counts, &sim.backgrounds).unwrap();
        let composite_model = sim.composite_model().unwrap();
        let kp =
            build_empirical_kernel(&cfg, &composites, &composite_backgrounds, &composite_model)
                .unwrap();
        let tp = train_deep_kernel(&cfg, &kp, &composite_model).unwrap();
        let mut line = format!("window {window}: ");
        for method in Method::ALL {
            let kernel = match method {
                Method::Mlem => SparseKernelMatrix::identity(96, 96, 2.5),
                Method::Kem => kp.empirical.clone(),
                Method::DeepKem => tp.deep_kernel.clone(),
            };
            let outputs = reconstruct_frames(
                &cfg, &sim.counts, &sim.backgrounds, &sim.frame_models, &kernel, None,
            )
            .unwrap();
            let snrs: Vec<f64> = outputs
                .iter()
                .enumerate()
                .map(|(m, out)| snr_db(&out.activity, sim.truth.frame(m)).unwrap())
                .collect();
            let mean = snrs.iter().sum::<f64>() / snrs.len() as f64;
            line.push_str(&format!("{method} {mean:.2}/{:.2} dB  ", snrs[23]));
        }
        println!("{line}");
    }
}

#[test]
#[ignore]
fn diagnose_pair_recon_iters() {
    use deepkem_core::recon::ReconSettings;
    for (window, pair_iters) in [(21usize, 20usize), (21, 30), (41, 20), (41, 30)] {
        let mut cfg = spec96_config(11);
        cfg.kernel.window = window;
        let sim = simulate(&cfg).unwrap();
        let (composites, composite_backgrounds) =
            rebin_stage(&cfg, &sim.counts, &sim.backgrounds).unwrap();
        let composite_model = sim.composite_model().unwrap();

        // Priors and pairs reconstructed with fewer EM iterations.
        let mut pair_cfg = cfg.clone();
        pair_cfg.recon = ReconSettings {
            n_iterations: pair_iters,
            ..cfg.recon
        };
        let kp = build_empirical_kernel(
            &pair_cfg,
            &composites,
            &composite_backgrounds,
            &composite_model,
        )
        .unwrap();
        let tp = train_deep_kernel(&pair_cfg, &kp, &composite_model).unwrap();

        // Frame reconstructions keep the pinned 60 iterations.
        let tumor_pixel = sim.report.tumor_center_index;
        let tumor_mass = |kernel: &SparseKernelMatrix| -> f64 {
            let (indices, weights) = kernel.row(tumor_pixel);
            indices
                .iter()
                .zip(weights)
                .filter(|(&l, _)| {
                    sim.region_map.label(l as usize) == deepkem_core::imaging::Region::Tumor
                })
                .map(|(_, &w)| w)
                .sum()
        };
        let mut line = format!(
            "w{window} pair_iters {pair_iters}: tumor mass emp {:.3} deep {:.3} | ",
            tumor_mass(&kp.empirical),
            tumor_mass(&tp.deep_kernel)
        );
        for method in [Method::Kem, Method::DeepKem] {
            let kernel = match method {
                Method::Kem => kp.empirical.clone(),
                _ => tp.deep_kernel.clone(),
            };
            let outputs = reconstruct_frames(
                &cfg, &sim.counts, &sim.backgrounds, &sim.frame_models, &kernel, None,
            )
            .unwrap();
            let snrs: Vec<f64> = outputs
                .iter()
                .enumerate()
                .map(|(m, out)| snr_db(&out.activity, sim.truth.frame(m)).unwrap())
                .collect();
            let mean = snrs.iter().sum::<f64>() / snrs.len() as f64;
            line.push_str(&format!("{method} {mean:.2}/{:.2} dB  ", snrs[23]));
        }
        println!("{line}");
    }
}

#[test]
#[ignore]
fn diagnose_snr_curves_and_rebuilt_graph() {
    use deepkem_core::recon::reconstruct;
    for rebuild in [false, true] {
        let mut cfg = spec96_config(11);
        cfg.kernel.rebuild_graph_after_training = rebuild;
        cfg.recon.record_every = 5;
        let sim = simulate(&cfg).unwrap();
        let (composites, composite_backgrounds) =
            rebin_stage(&cfg, &sim.counts, &sim.backgrounds).unwrap();
        let composite_model = sim.composite_model().unwrap();
        let kp = build_empirical_kernel(
            &cfg,
            &composites,
            &composite_backgrounds,
            &composite_model,
        )
        .unwrap();
        let tp = train_deep_kernel(&cfg, &kp, &composite_model).unwrap();

        // SNR-vs-iteration for frames 2 and 24 (indices 1, 23).
        for frame in [1usize, 23] {
            for (kernel, name) in [(&kp.empirical, "kem "), (&tp.deep_kernel, "deep")] {
                let out = reconstruct(
                    &sim.counts[frame],
                    &sim.backgrounds[frame],
                    &sim.frame_models[frame],
                    kernel,
                    &cfg.recon,
                    Some(sim.truth.frame(frame)),
                )
                .unwrap();
                let curve: Vec<String> = out
                    .trace
                    .entries
                    .iter()
                    .map(|e| format!("{:.1}", e.snr_db.unwrap()))
                    .collect();
                println!(
                    "rebuild={rebuild} frame {frame} {name}: {}",
                    curve.join(" ")
                );
            }
        }

        let mut line = format!("rebuild={rebuild}: ");
        for method in [Method::Kem, Method::DeepKem] {
            let kernel = match method {
                Method::Kem => kp.empirical.clone(),
                _ => tp.deep_kernel.clone(),
            };
            let outputs = reconstruct_frames(
                &cfg, &sim.counts, &sim.backgrounds, &sim.frame_models, &kernel, None,
            )
            .unwrap();
            let snrs: Vec<f64> = outputs
                .iter()
                .enumerate()
                .map(|(m, out)| snr_db(&out.activity, sim.truth.frame(m)).unwrap())
                .collect();
            let mean = snrs.iter().sum::<f64>() / snrs.len() as f64;
            line.push_str(&format!("{method} {mean:.2}/{:.2} dB  ", snrs[23]));
        }
        println!("{line}");
    }
}

#[test]
#[ignore]
fn diagnose_rebuild_windows() {
    for window in [21usize, 31, 41] {
        let mut cfg = spec96_config(11);
        cfg.kernel.window = window;
        cfg.kernel.rebuild_graph_after_training = true;
        let sim = simulate(&cfg).unwrap();
        let (composites, composite_backgrounds) =
            rebin_stage(&cfg, &sim.counts, &sim.backgrounds).unwrap();
        let composite_model = sim.composite_model().unwrap();
        let kp = build_empirical_kernel(
            &cfg,
            &composites,
            &composite_backgrounds,
            &composite_model,
        )
        .unwrap();
        let tp = train_deep_kernel(&cfg, &kp, &composite_model).unwrap();
        let mut line = format!("rebuild w{window}: ");
        for method in [Method::Kem, Method::DeepKem] {
            let kernel = match method {
                Method::Kem => kp.empirical.clone(),
                _ => tp.deep_kernel.clone(),
            };
            let outputs = reconstruct_frames(
                &cfg, &sim.counts, &sim.backgrounds, &sim.frame_models, &kernel, None,
            )
            .unwrap();
            let snrs: Vec<f64> = outputs
                .iter()
                .enumerate()
                .map(|(m, out)| snr_db(&out.activity, sim.truth.frame(m)).unwrap())
                .collect();
            let mean = snrs.iter().sum::<f64>() / snrs.len() as f64;
            line.push_str(&format!("{method} {mean:.2}/{:.2} dB  ", snrs[23]));
        }
        println!("{line}");
    }
}
