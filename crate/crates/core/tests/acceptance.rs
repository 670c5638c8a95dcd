//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use otsforge::cases;
use otsforge::diff_opf::gradcheck;
use otsforge::dispatch::{ots_violation, solve_dcopf, solve_ed, solve_ots_exact, OtsBudget, OtsMode, OtsOptions, SwitchVector};
use otsforge::matpower::{parse_case, write_case};
use otsforge::network::{build_network, Network};
use otsforge::neural::{adamw_step, backprop, init_params, mlp_forward, AdamWState};
use otsforge::qp::{solve_qp, QpProblem, QpStatus};
use otsforge::scenarios::{generate, GenConfig, Split};
use otsforge::synthetic::{random_network, SyntheticSpec};
use otsforge::trainer::{self, binarize, EvalOptions, TrainConfig};

const THETA: f64 = 0.5;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn case_net(text: &str) -> Network {
    build_network(&parse_case(text).unwrap(), THETA).unwrap()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let spec = SyntheticSpec::default();
    let opts = OtsOptions::default();
    let mut braess = 0;
    for k in 0..20 {
        let net = random_network(&mut rng, &spec);
        let d = net.nominal_demand.clone();
        let ed = solve_ed(&net, &d).map_err(|e| e.to_string())?.objective;
        let opf = solve_dcopf(&net, &d, &SwitchVector::all_closed(net.n_line)).map_err(|e| e.to_string())?.objective;
        let bb = solve_ots_exact(&net, &d, OtsMode::BranchAndBound, &opts).map_err(|e| e.to_string())?;
        let ex = solve_ots_exact(&net, &d, OtsMode::Exhaustive, &opts).map_err(|e| e.to_string())?;
        ensure!(bb.proved_optimal, "network {k}: branch and bound did not finish");
        ensure!(rel_close(bb.objective, ex.objective, 1e-6), "network {k}: bb {} vs exhaustive {}", bb.objective, ex.objective);
        ensure!(ed <= ex.objective + 1e-6 * (1.0 + ed.abs()), "network {k}: ED {ed} above OTS {}", ex.objective);
        ensure!(ex.objective <= opf + 1e-6 * (1.0 + opf.abs()), "network {k}: OTS {} above OPF {opf}", ex.objective);
        if ex.objective < opf * (1.0 - 1e-6) {
            braess += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("20 networks agree, {braess} with a switching gain, {secs:.1} s"))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let spec = SyntheticSpec {
        min_bus: 5,
        max_bus: 14,
        max_lines: 20,
        theta_bound: 1.0,
    };
    let mut errors = Vec::new();
    let mut networks = 0;
    while errors.len() < 50 && networks < 200 {
        let net = random_network(&mut rng, &spec);
        networks += 1;
        let report = gradcheck(&net, 5, &mut rng).map_err(|e| e.to_string())?;
        errors.extend(report.errors);
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = errors.iter().copied().fold(0.0, f64::max);
    ensure!(errors.len() >= 50, "only {} eligible instances", errors.len());
    ensure!(worst <= 1e-4, "max relative error {worst:.3e}");
    ensure!(secs < 120.0, "took {secs:.1} s");
    Ok(format!("{} instances on {networks} networks, max rel error {worst:.2e}, {secs:.1} s", errors.len()))
}

fn init_feasibility() -> Outcome {
    let net = case_net(cases::CASE14T);
    let data = generate(&net, 300, &GenConfig { seed: 5, ..GenConfig::default() }).map_err(|e| e.to_string())?;
    let train = data.subset(Split::Train);
    let cfg = TrainConfig::default();
    let params = trainer::initial_params(&net, &train, &cfg).map_err(|e| e.to_string())?;
    let (mut lo, mut hi, mut worst_gap) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for d in &train {
        let (z, _) = mlp_forward(&params, d).map_err(|e| e.to_string())?;
        lo = z.iter().copied().fold(lo, f64::min);
        hi = z.iter().copied().fold(hi, f64::max);
    }
    ensure!(lo >= 0.9998 && hi < 1.0, "outputs span [{lo}, {hi}]");
    let pass = trainer::relaxed_pass(&params, &net, &train).map_err(|e| e.to_string())?;
    ensure!(pass.infeasible == 0, "{} infeasible forwards at initialization", pass.infeasible);
    for (d, c) in train.iter().zip(&pass.costs) {
        let opf = solve_dcopf(&net, d, &SwitchVector::all_closed(net.n_line)).map_err(|e| e.to_string())?.objective;
        worst_gap = worst_gap.max((c.unwrap() - opf).abs() / opf);
    }
    ensure!(worst_gap <= 1e-3, "relaxed cost differs from DC-OPF by {worst_gap:.2e}");

    let r5 = case_net(cases::CASE5R);
    let d5 = generate(&r5, 60, &GenConfig { seed: 5, ..GenConfig::default() }).map_err(|e| e.to_string())?;
    let t5 = d5.subset(Split::Train);
    let random = TrainConfig {
        custom_head: false,
        ..TrainConfig::default()
    };
    let p5 = trainer::initial_params(&r5, &t5, &random).map_err(|e| e.to_string())?;
    let control = trainer::relaxed_pass(&p5, &r5, &t5).map_err(|e| e.to_string())?;
    ensure!(control.infeasible >= 1, "random head produced no infeasible forward on case5r");
    Ok(format!(
        "outputs in [{lo:.6}, {hi:.6}], cost gap {worst_gap:.1e}, random head infeasible on {}/{} case5r samples",
        control.infeasible,
        t5.len()
    ))
}

fn braess() -> Outcome {
    let net = case_net(cases::CASE3B);
    let d = net.nominal_demand.clone();
    let opf = solve_dcopf(&net, &d, &SwitchVector::all_closed(3)).map_err(|e| e.to_string())?.objective;
    let ex = solve_ots_exact(&net, &d, OtsMode::Exhaustive, &OtsOptions::default()).map_err(|e| e.to_string())?;
    let bb = solve_ots_exact(&net, &d, OtsMode::BranchAndBound, &OtsOptions::default()).map_err(|e| e.to_string())?;
    ensure!(rel_close(opf, 1400.0, 1e-6), "DC-OPF {opf}");
    ensure!(rel_close(ex.objective, 1000.0, 1e-6), "exhaustive OTS {}", ex.objective);
    ensure!(rel_close(bb.objective, 1000.0, 1e-6), "branch-and-bound OTS {}", bb.objective);
    ensure!(ex.z.open_lines() == vec![2], "open lines {:?}", ex.z.open_lines());
    Ok(format!("OTS {:.2} < OPF {:.2}, only A-C open", ex.objective, opf))
}

struct Trained {
    net: Network,
    data: otsforge::scenarios::Dataset,
    params: otsforge::neural::MlpParams,
}

fn desk_scale(out: &mut Option<Trained>) -> Outcome {
    let start = Instant::now();
    let net = case_net(cases::CASE14T);
    let d0 = net.nominal_demand.clone();
    let opf0 = solve_dcopf(&net, &d0, &SwitchVector::all_closed(net.n_line)).map_err(|e| e.to_string())?;
    let ots0 = solve_ots_exact(&net, &d0, OtsMode::BranchAndBound, &OtsOptions::default()).map_err(|e| e.to_string())?;
    let v0 = ots_violation(&net, &d0, ots0.z.values(), &ots0.dispatch.p_g, &ots0.dispatch.theta);
    let gap = (opf0.objective - ots0.objective) / opf0.objective;
    ensure!(v0 <= 1e-6 && gap > 0.005, "OTS-OPF gap {gap:.4} (violation {v0:.1e})");

    let data = generate(&net, 300, &GenConfig { seed: 11, ..GenConfig::default() }).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { seed: 11, ..TrainConfig::default() };
    let (params, history) = trainer::train(&net, &data, &cfg).map_err(|e| e.to_string())?;
    ensure!(history.epochs.len() == 50, "{} epochs", history.epochs.len());

    let train = data.subset(Split::Train);
    let mut opf_mean = 0.0;
    for d in &train {
        opf_mean += solve_dcopf(&net, d, &SwitchVector::all_closed(net.n_line)).map_err(|e| e.to_string())?.objective;
    }
    opf_mean /= train.len() as f64;
    let first = history.epochs[0].train_loss;
    ensure!(history.epochs[0].infeasible == 0, "{} infeasible forwards in the first epoch", history.epochs[0].infeasible);
    ensure!((first - opf_mean).abs() <= 1e-3 * opf_mean, "first-epoch loss {first} vs DC-OPF {opf_mean}");

    let opts = EvalOptions {
        ots_budget: Some(OtsBudget::seconds(2.0)),
        ..EvalOptions::default()
    };
    let report = trainer::evaluate(Some(&params), &net, &data, Split::Test, &opts).map_err(|e| e.to_string())?;
    let dadnn = report.dadnn.as_ref().and_then(|s| s.mean_cost).ok_or("DA-DNN column missing")?;
    let opf = report.opf.mean_cost.ok_or("DC-OPF column missing")?;
    ensure!(dadnn <= opf + 1e-9 * opf, "DA-DNN {dadnn} above DC-OPF {opf}");
    let worst = report.samples.iter().filter_map(|r| r.dadnn_violation).fold(0.0, f64::max);
    ensure!(worst <= 1e-6, "test inference violates switching constraints by {worst:.2e}");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 900.0, "took {secs:.0} s");

    let ots = report.ots.as_ref().and_then(|s| s.mean_cost);
    let ots_text = ots.map(|c| format!("{c:.2}")).unwrap_or_else(|| "NS".into());
    let summary = format!(
        "nominal gap {:.2}%, first loss {first:.2} vs OPF {opf_mean:.2}; test ED {:.2} OTS {ots_text} DA-DNN {dadnn:.2} OPF {opf:.2}; {} fallbacks, {secs:.0} s",
        100.0 * gap,
        report.ed.mean_cost.unwrap_or(f64::NAN),
        report.fallback_count
    );
    *out = Some(Trained { net, data, params });
    Ok(summary)
}

fn latency(trained: Option<&Trained>) -> Outcome {
    let t = trained.ok_or("needs the trained model from the desk-scale run")?;
    let test = t.data.subset(Split::Test);
    let closed = SwitchVector::all_closed(t.net.n_line);
    let mut opf_ms = Vec::new();
    let mut dadnn_ms = Vec::new();
    for d in &test {
        opf_ms.push(trainer::median_time(3, || {
            solve_dcopf(&t.net, d, &closed).unwrap();
        }));
        dadnn_ms.push(trainer::median_time(3, || {
            trainer::infer(&t.params, &t.net, d, 0.5).unwrap();
        }));
    }
    let opf = trainer::median(&mut opf_ms).unwrap();
    let dadnn = trainer::median(&mut dadnn_ms).unwrap();
    ensure!(dadnn <= 2.0 * opf, "DA-DNN {dadnn:.3} ms vs DC-OPF {opf:.3} ms");
    Ok(format!("median DA-DNN {dadnn:.3} ms, DC-OPF {opf:.3} ms, ratio {:.2}", dadnn / opf))
}

fn random_qp(rng: &mut ChaCha8Rng, n: usize, me: usize, mi: usize) -> QpProblem {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let eq_mat = DMatrix::from_fn(me, n, |_, _| rng.gen_range(-1.0..1.0));
    let ineq_mat = DMatrix::from_fn(mi, n, |_, _| rng.gen_range(-1.0..1.0));
    let slack = DVector::from_fn(mi, |_, _| rng.gen_range(0.0..1.0));
    QpProblem {
        quad: &m * m.transpose() + DMatrix::identity(n, n) * 0.1,
        lin: DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0)),
        eq_rhs: &eq_mat * &x0,
        ineq_rhs: &ineq_mat * &x0 + slack,
        eq_mat,
        ineq_mat,
    }
}

fn property_suites() -> Outcome {
    // Solver KKT residuals on random feasible QPs.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..200 {
        let n = rng.gen_range(2..9);
        let (me, mi) = (rng.gen_range(0..3.min(n)), rng.gen_range(1..15));
        let qp = random_qp(&mut rng, n, me, mi);
        let sol = solve_qp(&qp, 1e-8, 200).map_err(|e| format!("qp {k}: {e}"))?;
        ensure!(sol.status == QpStatus::Optimal, "qp {k}: {:?}", sol.status);
        let r = qp.residuals(&sol.x, &sol.lambda, &sol.mu);
        let worst = r.stationarity.max(r.primal).max(r.dual).max(r.complementarity);
        ensure!(worst <= 1e-6, "qp {k}: KKT residual {worst:.2e}");
    }

    // Parser round trip on every bundled case.
    for (name, text) in cases::ALL {
        let case = parse_case(text).map_err(|e| e.to_string())?;
        let again = parse_case(&write_case(&case, name)).map_err(|e| e.to_string())?;
        ensure!(case == again, "{name} does not round-trip");
    }

    // Binarization at and around the threshold.
    let z = binarize(&[0.5, 0.4999999, 1.0, 0.0, 0.73], 0.5);
    ensure!(z.values() == [1.0, 0.0, 1.0, 0.0, 1.0], "binarize gave {:?}", z.values());
    ensure!(binarize(&[0.3, 0.7], 0.8).open_lines() == vec![0, 1], "threshold not respected");

    // AdamW first step: m_hat = g and v_hat = g^2, so each parameter moves by
    // lr * (wd * p + sign(g)) up to eps.
    let mut params = init_params(1, &[3, 4, 2], 3.0, false).map_err(|e| e.to_string())?;
    let p0 = params.flatten();
    let (_, cache) = mlp_forward(&params, &[0.2, -0.4, 1.0]).map_err(|e| e.to_string())?;
    let grads = backprop(&params, &cache, &[1.0, -2.0]).map_err(|e| e.to_string())?;
    let g = grads.flatten();
    let mut state = AdamWState::new(params.n_params(), 1e-3, 1e-2);
    adamw_step(&mut params, &grads, &mut state).map_err(|e| e.to_string())?;
    for ((p, q), gi) in p0.iter().zip(params.flatten()).zip(&g) {
        let decayed = p - 1e-3 * 1e-2 * p;
        let expect = decayed - 1e-3 * gi / (gi.abs() + 1e-8);
        ensure!((q - expect).abs() <= 1e-12, "AdamW step {q} vs {expect}");
    }

    // Dataset determinism.
    let net = case_net(cases::CASE3B);
    let cfg = GenConfig { seed: 9, ..GenConfig::default() };
    let a = generate(&net, 40, &cfg).map_err(|e| e.to_string())?.to_text();
    let b = generate(&net, 40, &cfg).map_err(|e| e.to_string())?.to_text();
    let c = generate(&net, 40, &GenConfig { seed: 10, ..cfg }).map_err(|e| e.to_string())?.to_text();
    ensure!(a == b && a != c, "dataset generation is not seed-deterministic");
    Ok("solver KKT, parser round trip, binarization, AdamW, dataset determinism".into())
}

fn run(id: usize, name: &str, failures: &mut usize, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    match outcome {
        Ok(detail) => println!("criterion {id} [{name}]: PASS ({detail}) in {:.1?}", elapsed),
        Err(why) => {
            *failures += 1;
            println!("criterion {id} [{name}]: FAIL ({why}) in {:.1?}", elapsed);
        }
    }
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful for this target.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut failures = 0;
    let mut trained = None;
    run(1, "oracle equivalence", &mut failures, oracle_equivalence);
    run(2, "gradient fidelity", &mut failures, gradient_fidelity);
    run(3, "init feasibility", &mut failures, init_feasibility);
    run(4, "Braess regression", &mut failures, braess);
    run(5, "desk-scale training", &mut failures, || desk_scale(&mut trained));
    run(6, "latency", &mut failures, || latency(trained.as_ref()));
    run(7, "property suites", &mut failures, property_suites);
    println!("acceptance: {} of 7 criteria passed", 7 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
