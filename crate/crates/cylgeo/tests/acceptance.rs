//! Acceptance gate: one test per release criterion, each printing a single
//! PASS/FAIL line. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines on success.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::time::Instant;

use cylgeo::reduction::{circle_energy, random_stiefel, WOptions};
use cylgeo::{
    align, compute_w, degree_check_cylinder, energy, gamma, gamma_discrete, gradient,
    great_circle, multiplicity_experiment, phi, spectrum, CircleParam, ExperimentConfig,
    FormTerm, LoopTangent, PerturbationForm, ProfileSpec,
};

fn report(id: usize, name: &str, outcome: Result<String, String>) {
    match outcome {
        Ok(detail) => println!("ACCEPTANCE {id} {name}: PASS ({detail})"),
        Err(detail) => {
            println!("ACCEPTANCE {id} {name}: FAIL ({detail})");
            panic!("acceptance criterion {id} ({name}) failed: {detail}");
        }
    }
}

fn anisotropic_odd_form() -> PerturbationForm {
    PerturbationForm::odd_decay_diag(2, &[1.0, 0.8, 0.6]).unwrap()
}

fn gaussian_diag_form(n: usize, width: f64) -> PerturbationForm {
    let mut diag = DVector::zeros(n + 2);
    for i in 0..=n {
        diag[i + 1] = 1.0 - 0.4 * i as f64 / (n as f64).max(1.0);
    }
    PerturbationForm::new(
        n,
        vec![FormTerm {
            profile: ProfileSpec::Gaussian { center: 0.0, width },
            block: nalgebra::DMatrix::from_diagonal(&diag),
        }],
    )
    .unwrap()
}

#[test]
fn acceptance_1_unperturbed_baseline() {
    let start = Instant::now();
    let outcome = (|| -> Result<String, String> {
        let m = 256;
        let lp = great_circle(&CircleParam::coordinate_plane(2, 0.0, 0, 1), m)
            .map_err(|e| e.to_string())?;
        let form = PerturbationForm::zero(2);
        let e = energy(&lp, &form, 0.0).map_err(|e| e.to_string())?;
        let target = 2.0 * PI * PI;
        let rel = (e - target).abs() / target;
        if rel > 1e-3 {
            return Err(format!("energy relative error {rel:.3e} > 1e-3"));
        }
        let gnorm = gradient(&lp, &form, 0.0).map_err(|e| e.to_string())?.l2_norm();
        if gnorm > 1e-10 {
            return Err(format!("gradient norm {gnorm:.3e} > 1e-10"));
        }
        let dt = start.elapsed().as_secs_f64();
        if dt >= 1.0 {
            return Err(format!("runtime {dt:.2}s >= 1s"));
        }
        Ok(format!("rel err {rel:.2e}, grad {gnorm:.2e}, {dt:.2}s"))
    })();
    report(1, "unperturbed baseline", outcome);
}

#[test]
fn acceptance_2_kernel_dimension() {
    let start = Instant::now();
    let outcome = (|| -> Result<String, String> {
        let mut worst_gap = f64::INFINITY;
        for n in [1usize, 2, 3] {
            for m in [128usize, 256] {
                let lp = great_circle(&CircleParam::coordinate_plane(n, 0.0, 0, 1), m)
                    .map_err(|e| e.to_string())?;
                let form = PerturbationForm::zero(n);
                let s = spectrum(&lp, &form, 0.0).map_err(|e| e.to_string())?;
                if s.kernel_dim != 2 * n {
                    return Err(format!(
                        "N={n} M={m}: kernel dim {} != {}",
                        s.kernel_dim,
                        2 * n
                    ));
                }
                if s.gap_ratio < 10.0 {
                    return Err(format!("N={n} M={m}: gap ratio {:.2} < 10", s.gap_ratio));
                }
                worst_gap = worst_gap.min(s.gap_ratio);
            }
        }
        let dt = start.elapsed().as_secs_f64();
        if dt >= 30.0 {
            return Err(format!("runtime {dt:.1}s >= 30s"));
        }
        Ok(format!("kernel 2N for N in 1..3, min gap {worst_gap:.1e}, {dt:.1}s"))
    })();
    report(2, "kernel dimension 2N", outcome);
}

#[test]
fn acceptance_3_second_variation_values() {
    let outcome = (|| -> Result<String, String> {
        let m = 256;
        let lp = great_circle(&CircleParam::coordinate_plane(2, 0.0, 0, 1), m)
            .map_err(|e| e.to_string())?;
        let form = PerturbationForm::zero(2);
        for kmode in [0usize, 1, 2, 3] {
            let mut data = DVector::zeros(m * 4);
            for k in 0..m {
                let t = k as f64 / m as f64;
                let amp = if kmode == 0 {
                    0.5f64.sqrt()
                } else {
                    (2.0 * PI * kmode as f64 * t).sin()
                };
                data[k * 4 + 3] = amp; // normal direction to the circle plane
            }
            let v = LoopTangent::new(&lp, data).map_err(|e| e.to_string())?;
            let val =
                cylgeo::loop_space::hessian_quadratic_form(&lp, &form, 0.0, &v)
                    .map_err(|e| e.to_string())?;
            let expect = 2.0 * PI * PI * ((kmode * kmode) as f64 - 1.0);
            let tol = 0.02 * 2.0 * PI * PI * ((kmode * kmode) as f64).max(1.0);
            if (val - expect).abs() > tol {
                return Err(format!("mode {kmode}: {val:.4} vs {expect:.4}"));
            }
        }
        let s = spectrum(&lp, &form, 0.0).map_err(|e| e.to_string())?;
        if s.morse_index != 1 {
            return Err(format!("Morse index {} != 1 on R x S^2", s.morse_index));
        }
        Ok("modes 0..3 match 2pi^2(k^2-1), Morse index 1".into())
    })();
    report(3, "second variation values", outcome);
}

#[test]
fn acceptance_4_gamma_closed_form() {
    let outcome = (|| -> Result<String, String> {
        let eigs = [1.0, 0.8, 0.6];
        let form = PerturbationForm::odd_decay_diag(2, &eigs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(424242);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let (p, q) = random_stiefel(2, &mut rng);
            let r = rng.gen_range(-3.0..3.0);
            let param = CircleParam { r, p, q };
            let g = gamma(&param, &form, 128);
            let phi_r = r.tanh() / (1.0 + r * r);
            let quad: f64 = (0..3)
                .map(|i| eigs[i] * (param.p[i] * param.p[i] + param.q[i] * param.q[i]))
                .sum();
            let expect = PI * PI * phi_r * quad;
            let rel = (g - expect).abs() / expect.abs().max(1e-12);
            worst = worst.max(rel);
        }
        if worst > 1e-8 {
            return Err(format!("worst relative error {worst:.3e} > 1e-8"));
        }
        Ok(format!("100 samples, worst rel err {worst:.2e}"))
    })();
    report(4, "closed-form Gamma oracle", outcome);
}

#[test]
fn acceptance_5_expansion_order() {
    let start = Instant::now();
    let outcome = (|| -> Result<String, String> {
        let form = anisotropic_odd_form();
        let m = 64;
        let wopts = WOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params: Vec<CircleParam> = (0..10)
            .map(|_| {
                let (p, q) = random_stiefel(2, &mut rng);
                CircleParam {
                    r: rng.gen_range(-2.0..2.0),
                    p,
                    q,
                }
            })
            .collect();
        let eps_list = [0.04, 0.02, 0.01, 0.005];
        let mut pts = Vec::new();
        for &eps in &eps_list {
            let mut worst = 0.0f64;
            for param in &params {
                let b = circle_energy(param, m).map_err(|e| e.to_string())?;
                let g = gamma_discrete(param, &form, m).map_err(|e| e.to_string())?;
                let p = phi(param, &form, eps, m, &wopts).map_err(|e| e.to_string())?;
                worst = worst.max((p - b - eps * g).abs());
            }
            pts.push((eps.ln(), worst.ln()));
        }
        let np = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (np * sxy - sx * sy) / (np * sxx - sx * sx);
        let dt = start.elapsed().as_secs_f64();
        if slope < 1.9 {
            return Err(format!("log-log slope {slope:.3} < 1.9"));
        }
        if dt >= 120.0 {
            return Err(format!("runtime {dt:.1}s >= 120s"));
        }
        Ok(format!("slope {slope:.3}, {dt:.1}s"))
    })();
    report(5, "expansion order", outcome);
}

#[test]
fn acceptance_6_decay() {
    let outcome = (|| -> Result<String, String> {
        let form = gaussian_diag_form(2, 3.0);
        let eps = 0.02;
        let m = 64;
        let wopts = WOptions::default();
        let mut gaps = Vec::new();
        let mut wnorms = Vec::new();
        for &r in &[5.0, 10.0, 20.0] {
            let param = CircleParam::coordinate_plane(2, r, 0, 1);
            let b = circle_energy(&param, m).map_err(|e| e.to_string())?;
            let corr = compute_w(&param, &form, eps, m, &wopts).map_err(|e| e.to_string())?;
            let p = phi(&param, &form, eps, m, &wopts).map_err(|e| e.to_string())?;
            gaps.push((p - b).abs());
            wnorms.push(corr.w_norm());
        }
        for series in [&gaps, &wnorms] {
            if !(series[0] > series[1] && series[1] > series[2]) {
                return Err(format!("not monotone decreasing: {series:?}"));
            }
        }
        if gaps[2] > 1e-6 || wnorms[2] > 1e-6 {
            return Err(format!(
                "final values too large: gap {:.2e}, |w| {:.2e}",
                gaps[2], wnorms[2]
            ));
        }
        Ok(format!(
            "gap {:.1e}->{:.1e}, |w| {:.1e}->{:.1e}",
            gaps[0], gaps[2], wnorms[0], wnorms[2]
        ))
    })();
    report(6, "large-radius decay", outcome);
}

#[test]
fn acceptance_7_multiplicity() {
    let start = Instant::now();
    let outcome = (|| -> Result<String, String> {
        let form = anisotropic_odd_form();
        let mut cfg = ExperimentConfig::new(2);
        cfg.m = 128;
        cfg.eps = 0.02;
        let rep = multiplicity_experiment(&form, &cfg).map_err(|e| e.to_string())?;
        let nontrivial: Vec<_> = rep
            .orbits
            .iter()
            .filter(|o| !o.representative.trivial)
            .collect();
        if nontrivial.len() < 4 {
            return Err(format!(
                "{} nontrivial classes < 4 = 2N (warnings: {:?})",
                nontrivial.len(),
                rep.warnings
            ));
        }
        for o in &nontrivial {
            if o.representative.residual > 1e-9 {
                return Err(format!("residual {:.2e} > 1e-9", o.representative.residual));
            }
        }
        // distinct classes must be far apart relative to the dedup tolerance
        for i in 0..nontrivial.len() {
            for j in (i + 1)..nontrivial.len() {
                let d = align(
                    &nontrivial[i].representative.curve,
                    &nontrivial[j].representative.curve,
                )
                .map_err(|e| e.to_string())?
                .distance;
                if d < 10.0 * cfg.dedup_tol {
                    return Err(format!(
                        "classes {i},{j} only {d:.3e} apart (tol {:.3e})",
                        cfg.dedup_tol
                    ));
                }
            }
        }
        let dt = start.elapsed().as_secs_f64();
        if dt >= 300.0 {
            return Err(format!("runtime {dt:.1}s >= 300s"));
        }
        Ok(format!(
            "{} distinct nontrivial classes (target {}), {dt:.1}s",
            nontrivial.len(),
            rep.target
        ))
    })();
    report(7, "multiplicity 2N", outcome);
}

#[test]
fn acceptance_8_cylinder_existence() {
    let outcome = (|| -> Result<String, String> {
        let center = 0.5;
        let form = PerturbationForm::gaussian_identity(1, center, 1.0);
        let degree = degree_check_cylinder(&form, 2.0, 8, 128).map_err(|e| e.to_string())?;
        if degree.degree == 0 || degree.inconclusive {
            return Err(format!(
                "no sign change: degree {}, inconclusive {}",
                degree.degree, degree.inconclusive
            ));
        }
        let mut cfg = ExperimentConfig::new(1);
        cfg.m = 64;
        cfg.eps = 0.02;
        cfg.search.r_max = 5.0;
        let rep = multiplicity_experiment(&form, &cfg).map_err(|e| e.to_string())?;
        let hit = rep
            .orbits
            .iter()
            .filter(|o| !o.representative.trivial)
            .find_map(|o| {
                let curve = &o.representative.curve;
                let mean_r: f64 = (0..curve.node_count()).map(|k| curve.r(k)).sum::<f64>()
                    / curve.node_count() as f64;
                ((mean_r - center).abs() <= 0.1).then_some(mean_r)
            });
        match hit {
            Some(r) => Ok(format!(
                "degree {}, certified geodesic at r = {r:.4} (argmax phi = {center})",
                degree.degree
            )),
            None => Err(format!(
                "no certified geodesic within 0.1 of r* = {center} ({} classes)",
                rep.orbits.len()
            )),
        }
    })();
    report(8, "cylinder existence", outcome);
}

#[test]
fn acceptance_9_numerical_hygiene() {
    let outcome = (|| -> Result<String, String> {
        let form = anisotropic_odd_form();
        let eps = 0.02;
        let mut rng = ChaCha8Rng::seed_from_u64(909);
        let mut worst_fd = 0.0f64;
        let mut worst_o2 = 0.0f64;
        for _ in 0..50 {
            let m = 32;
            // random loops: noisy perturbations of random circles
            let (p, q) = random_stiefel(2, &mut rng);
            let z = great_circle(
                &CircleParam {
                    r: rng.gen_range(-1.5..1.5),
                    p,
                    q,
                },
                m,
            )
            .map_err(|e| e.to_string())?;
            let noise = DVector::from_fn(m * 4, |_, _| rng.gen_range(-0.05..0.05));
            let dir = z.project_tangent(&noise);
            let lp = z.retract(&dir, 1.0).map_err(|e| e.to_string())?;

            // central finite differences along a random tangent direction
            let g = gradient(&lp, &form, eps).map_err(|e| e.to_string())?;
            let dnoise = DVector::from_fn(m * 4, |_, _| rng.gen_range(-1.0..1.0));
            let d = lp.project_tangent(&dnoise);
            let h = 1e-6;
            let ep = energy(&lp.retract(&d, h).unwrap(), &form, eps).unwrap();
            let em = energy(&lp.retract(&d, -h).unwrap(), &form, eps).unwrap();
            let fd = (ep - em) / (2.0 * h);
            let an = g.flat().dot(d.flat());
            worst_fd = worst_fd.max((an - fd).abs() / fd.abs().max(1.0));

            // O(2) invariance of the energy
            let e0 = energy(&lp, &form, eps).unwrap();
            let shift = rng.gen_range(0..m);
            let reflect = rng.gen_bool(0.5);
            let moved = lp.o2_act(shift, reflect).unwrap();
            let e1 = energy(&moved, &form, eps).unwrap();
            worst_o2 = worst_o2.max((e0 - e1).abs() / e0.abs());
        }
        if worst_fd > 1e-5 {
            return Err(format!("worst FD gradient error {worst_fd:.3e} > 1e-5"));
        }
        if worst_o2 > 1e-14 {
            return Err(format!("worst O(2) energy deviation {worst_o2:.3e} > 1e-14"));
        }

        // rerun determinism: identical bytes from identical configuration
        let cfg = cylgeo::GammaSearchConfig::new(2);
        let a = cylgeo::find_gamma_critical_points(&form, &cfg).map_err(|e| e.to_string())?;
        let b = cylgeo::find_gamma_critical_points(&form, &cfg).map_err(|e| e.to_string())?;
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        if ja != jb {
            return Err("rerun of the reduction search is not byte-identical".into());
        }
        let ca = compute_w(
            &CircleParam::coordinate_plane(2, 0.7, 0, 1),
            &form,
            eps,
            64,
            &WOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        let cb = compute_w(
            &CircleParam::coordinate_plane(2, 0.7, 0, 1),
            &form,
            eps,
            64,
            &WOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        if serde_json::to_string(&ca).unwrap() != serde_json::to_string(&cb).unwrap() {
            return Err("rerun of the correction solve is not byte-identical".into());
        }
        Ok(format!(
            "FD err {worst_fd:.2e}, O(2) dev {worst_o2:.2e}, reruns byte-identical"
        ))
    })();
    report(9, "numerical hygiene", outcome);
}
