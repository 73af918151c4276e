use crate::config::RunConfig;
use crate::report_failure;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use whiskers::celestial::{EscapeOptions, RestrictedOptions};
use whiskers::cohomology::{conjugate_normal_form, Engine, EngineOptions, ManifoldSolution};
use whiskers::dynamics::{integrate_flow, iterate_map, Domain};
use whiskers::error::{Error, Result};
use whiskers::fixtures::{benchmark_map, conjugacy_fixture, golden, ToyField};
use whiskers::fourier::{diophantine_scan, ScanKind};
use whiskers::model::{DynamicsKind, ModelData};
use whiskers::verify::{fit_error_orders_auto, sector_decay_check, stable_set_membership, FitOptions, OrderReport, Sector};
use whiskers::{build_restricted_field, escape_demo, PrimarySystem};

const FAILED_CHECK: i32 = 4;

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    write_text(dir, name, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Model named by the configuration plus any reduced-dynamics terms the
/// fixture requires.
fn load_model(cfg: &RunConfig) -> Result<(ModelData, BTreeMap<usize, f64>)> {
    let mut extra = BTreeMap::new();
    let model = match (&cfg.model, cfg.fixture.as_deref()) {
        (Some(path), _) => {
            let m = ModelData::load(path)?;
            match cfg.order_cap {
                Some(c) => m.with_cap(c),
                None => m,
            }
        }
        (None, Some("benchmark")) => benchmark_map(cfg.order_cap.unwrap_or(32)),
        (None, Some("conjugacy")) => conjugacy_fixture(
            cfg.fixture_params.b0.unwrap_or(0.7),
            cfg.fixture_params.seed.unwrap_or(1),
            (cfg.order + 2).max(8),
            cfg.order_cap.unwrap_or(32),
        )?,
        (None, Some("toy-flow")) => ToyField::default().flow_model(cfg.order_cap.unwrap_or(8)),
        (None, Some("toy-map")) => {
            let deg = cfg.order + 2;
            extra = ToyField::prescribed_map_terms(deg);
            ToyField::default().time_one_map(deg, cfg.order_cap.unwrap_or(8))?
        }
        (None, Some(other)) => return Err(Error::Invalid(format!("unknown fixture {other:?}"))),
        (None, None) => return Err(Error::Invalid("no model file or fixture given".into())),
    };
    Ok((model, extra))
}

fn engine_options(cfg: &RunConfig, extra: BTreeMap<usize, f64>) -> EngineOptions {
    let mut prescribed = extra;
    prescribed.extend(cfg.prescribed_x.iter().map(|(&k, &v)| (k, v)));
    EngineOptions {
        divisor_floor: cfg.divisor_floor,
        order_tolerance: cfg.order_tolerance,
        choices: cfg.choices.clone(),
        prescribed_x: prescribed,
        ..EngineOptions::default()
    }
}

fn fit_options(cfg: &RunConfig) -> FitOptions {
    FitOptions {
        slope_slack: cfg.slope_slack,
        ..FitOptions::default()
    }
}

#[derive(Serialize)]
struct OrderNorm {
    j: usize,
    residual_norm: f64,
}

#[derive(Serialize)]
struct SolveSummary {
    kind: DynamicsKind,
    n: usize,
    p: usize,
    p_declared: usize,
    j: usize,
    a_bar: f64,
    b: Option<f64>,
    reduced_x: BTreeMap<usize, f64>,
    per_order: Vec<OrderNorm>,
    order_report: Option<OrderReport>,
    fit_note: Option<String>,
    pass: bool,
}

/// Order report, or a note when every sample sits at the rounding floor.
fn fit_or_note(model: &ModelData, sol: &ManifoldSolution, cfg: &RunConfig) -> Result<(Option<OrderReport>, Option<String>)> {
    match fit_error_orders_auto(model, sol, &fit_options(cfg)) {
        Ok(r) => Ok((Some(r), None)),
        Err(e @ Error::WindowTooWide { .. }) => Ok((None, Some(e.to_string()))),
        Err(e) => Err(e),
    }
}

fn solve_one(cfg: &RunConfig, kind: DynamicsKind) -> Result<SolveSummary> {
    let (model, extra) = load_model(cfg)?;
    if model.kind != kind {
        return Err(Error::Invalid(format!("model is a {:?} model", model.kind)));
    }
    let opts = engine_options(cfg, extra);
    let engine = Engine::new(&model, opts)?;
    let mut per_order = Vec::new();
    let (sol, _) = engine.solve_with(cfg.order, |s, e| {
        let residual_norm = std::iter::once(&e.x)
            .chain(&e.y)
            .chain(&e.theta)
            .map(|j| j.max_abs())
            .fold(0.0, f64::max);
        per_order.push(OrderNorm { j: s.j, residual_norm });
        if cfg.checkpoint {
            write_json(&cfg.out, &format!("solution_j{}.json", s.j), s)?;
        }
        Ok(())
    })?;
    write_json(&cfg.out, "solution.json", &sol)?;
    let (report, fit_note) = fit_or_note(&model, &sol, cfg)?;
    if let Some(r) = &report {
        write_text(&cfg.out, "order_report.csv", &r.to_csv())?;
    }
    let pass = report.as_ref().is_none_or(|r| r.pass());
    let summary = SolveSummary {
        kind,
        n: model.n,
        p: model.p,
        p_declared: model.p_declared,
        j: sol.j,
        a_bar: model.a_bar(),
        b: sol.b(),
        reduced_x: sol.reduced.x_polynomial(),
        per_order,
        order_report: report,
        fit_note,
        pass,
    };
    write_json(&cfg.out, "summary.json", &summary)?;
    Ok(summary)
}

fn print_solve(label: &str, s: &SolveSummary) {
    let b = s.b.map_or("not fixed".to_string(), |b| format!("{b:.12e}"));
    println!("{label}a_bar = {}, b = {b}, j = {}", s.a_bar, s.j);
    for o in &s.per_order {
        println!("{label}  order {}: error jet norm {:.3e}", o.j, o.residual_norm);
    }
    if let Some(r) = &s.order_report {
        for c in &r.components {
            println!(
                "{label}  {}: slope {:.3} target {} {}",
                c.component,
                c.fitted_slope,
                c.target_order,
                if c.pass { "pass" } else { "FAIL" }
            );
        }
    }
    if let Some(n) = &s.fit_note {
        println!("{label}  {n}");
    }
}

pub fn solve(cfg: &RunConfig, kind: DynamicsKind) -> Result<i32> {
    if cfg.sweep.is_empty() {
        let s = solve_one(cfg, kind)?;
        print_solve("", &s);
        if !s.pass {
            report_failure("OrderCheckFailed", FAILED_CHECK, "fitted residual slopes below target");
            return Ok(FAILED_CHECK);
        }
        return Ok(0);
    }
    let results: Vec<(String, Result<SolveSummary>)> = cfg
        .sweep
        .par_iter()
        .map(|entry| {
            let mut c = cfg.clone();
            c.model = entry.model.clone();
            c.fixture = entry.fixture.clone();
            c.out = cfg.out.join(&entry.label);
            c.sweep.clear();
            (entry.label.clone(), solve_one(&c, kind))
        })
        .collect();
    let mut table = String::from("label,status,code,a_bar,b,pass\n");
    let mut code = 0;
    for (label, r) in &results {
        match r {
            Ok(s) => {
                print_solve(&format!("[{label}] "), s);
                let c = if s.pass { 0 } else { FAILED_CHECK };
                code = code.max(c);
                let b = s.b.map_or(String::new(), |b| format!("{b:e}"));
                table.push_str(&format!("{label},ok,{c},{:e},{b},{}\n", s.a_bar, s.pass));
            }
            Err(e) => {
                println!("[{label}] {}: {e}", e.kind());
                code = code.max(e.exit_code());
                table.push_str(&format!("{label},{},{},,,false\n", e.kind(), e.exit_code()));
            }
        }
    }
    write_text(&cfg.out, "sweep.csv", &table)?;
    if code != 0 {
        report_failure("SweepFailed", code, "at least one sweep entry failed");
    }
    Ok(code)
}

#[derive(Serialize)]
struct VerifySummary {
    order_report: Option<OrderReport>,
    fit_note: Option<String>,
    sector: Option<whiskers::verify::DecayReport>,
    pass: bool,
}

pub fn verify(cfg: &RunConfig) -> Result<i32> {
    let (model, _) = load_model(cfg)?;
    let path = cfg
        .solution
        .as_ref()
        .ok_or_else(|| Error::Invalid("verify needs --solution".into()))?;
    let sol: ManifoldSolution = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if sol.kind != model.kind || sol.n != model.n || sol.k.y.len() != model.m || sol.k.theta.len() != model.d() {
        return Err(Error::DimensionMismatch("solution does not belong to this model".into()));
    }
    let (report, fit_note) = fit_or_note(&model, &sol, cfg)?;
    if let Some(r) = &report {
        write_text(&cfg.out, "order_report.csv", &r.to_csv())?;
    }
    let sector = if model.kind == DynamicsKind::Map {
        let s = Sector {
            beta: cfg.sector.beta,
            rho: cfg.sector.rho,
        };
        let x0 = num_complex::Complex64::new(0.5 * s.rho, 0.0);
        Some(sector_decay_check(&sol.reduced, x0, 10_000, 0.1, &s)?)
    } else {
        None
    };
    let pass = report.as_ref().is_none_or(|r| r.pass());
    let summary = VerifySummary {
        order_report: report,
        fit_note,
        sector,
        pass,
    };
    write_json(&cfg.out, "verify.json", &summary)?;
    if let Some(r) = &summary.order_report {
        for c in &r.components {
            println!(
                "{}: slope {:.3} target {} {}",
                c.component,
                c.fitted_slope,
                c.target_order,
                if c.pass { "pass" } else { "FAIL" }
            );
        }
    }
    if let Some(d) = &summary.sector {
        println!("sector bound held for {} steps, max ratio {:.4}", d.steps, d.max_ratio);
    }
    if !pass {
        report_failure("OrderCheckFailed", FAILED_CHECK, "fitted residual slopes below target");
        return Ok(FAILED_CHECK);
    }
    println!("verify: pass");
    Ok(0)
}

#[derive(Serialize)]
struct IterateSummary {
    steps_taken: usize,
    left_domain: bool,
    final_state: Vec<f64>,
    max_normal_distance: Option<f64>,
}

pub fn iterate(cfg: &RunConfig) -> Result<i32> {
    let (model, extra) = load_model(cfg)?;
    let it = &cfg.iterate;
    let d = model.d();
    let theta0 = it.theta0.clone().unwrap_or_else(|| vec![0.0; d]);
    if theta0.len() != d {
        return Err(Error::DimensionMismatch(format!("{} angles for d = {d}", theta0.len())));
    }
    let on_manifold = it.state.is_none() && (it.on_manifold.unwrap_or(false) || it.x0.is_some());
    let sol = if on_manifold {
        let engine = Engine::new(&model, engine_options(cfg, extra))?;
        Some(engine.solve(cfg.order)?.0)
    } else {
        None
    };
    let mut state = match (&it.state, &sol) {
        (Some(s), _) => s.clone(),
        (None, Some(sol)) => {
            let x0 = it.x0.unwrap_or(0.5 * cfg.sector.rho);
            let (kx, ky, kt) = sol.k.evaluate(x0, &theta0);
            let mut s = vec![kx.re];
            s.extend(ky.iter().map(|c| c.re));
            s.extend(theta0.iter().zip(&kt).map(|(t, c)| t + c.re));
            s
        }
        (None, None) => return Err(Error::Invalid("iterate needs --state or --x0".into())),
    };
    let domain = Domain {
        rho: cfg.sector.rho,
        nonnegative_x: true,
    };
    let summary = match model.kind {
        DynamicsKind::Map => {
            let steps = it.steps.unwrap_or(100);
            if let Some(sol) = &sol {
                let rep = stable_set_membership(&model, sol, &state, steps, &domain)?;
                write_text(&cfg.out, "orbit.csv", &rep.orbit.to_csv())?;
                let s = IterateSummary {
                    steps_taken: rep.orbit.steps_taken,
                    left_domain: !rep.stayed,
                    final_state: rep.orbit.last().state.clone(),
                    max_normal_distance: Some(rep.distances.iter().copied().fold(0.0, f64::max)),
                };
                write_json(&cfg.out, "iterate.json", &s)?;
                rep.require_stays()?;
                s
            } else {
                let orbit = iterate_map(&model, &state, steps, Some(&domain))?;
                write_text(&cfg.out, "orbit.csv", &orbit.to_csv())?;
                IterateSummary {
                    steps_taken: orbit.steps_taken,
                    left_domain: orbit.left_domain.is_some(),
                    final_state: orbit.last().state.clone(),
                    max_normal_distance: None,
                }
            }
        }
        DynamicsKind::Flow => {
            if state.len() == 1 + model.m + d {
                state.extend(std::iter::repeat_n(0.0, model.freq.d_prime()));
            }
            let horizon = it.horizon.unwrap_or(10.0);
            let n = 200;
            let times: Vec<f64> = (0..=n).map(|i| horizon * i as f64 / n as f64).collect();
            let orbit = integrate_flow(&model, &state, (0.0, horizon), 1e-12, Some(&times))?;
            write_text(&cfg.out, "orbit.csv", &orbit.to_csv())?;
            IterateSummary {
                steps_taken: orbit.steps_taken,
                left_domain: orbit.left_domain.is_some(),
                final_state: orbit.last().state.clone(),
                max_normal_distance: None,
            }
        }
    };
    write_json(&cfg.out, "iterate.json", &summary)?;
    println!(
        "steps {}, left domain: {}, final state {:?}",
        summary.steps_taken, summary.left_domain, summary.final_state
    );
    if let Some(d) = summary.max_normal_distance {
        println!("max distance to the manifold fiber {d:.3e}");
    }
    Ok(0)
}

#[derive(Serialize)]
struct DemoSummary {
    n_computed: usize,
    n_stated: usize,
    a: f64,
    law_min: f64,
    law_max: f64,
    law_ok: bool,
    final_y: f64,
    final_energy: f64,
    completed: bool,
    control_law_min: f64,
    control_law_max: f64,
    control_fails_law: bool,
}

pub fn restricted_demo(cfg: &RunConfig) -> Result<i32> {
    let sys = match &cfg.demo.primaries {
        Some(p) => PrimarySystem::load(p)?,
        None => PrimarySystem::single(1.0, vec![golden()])?,
    };
    let ropts = RestrictedOptions {
        degree: (cfg.order + 6).max(12),
        ..RestrictedOptions::default()
    };
    let (model, chart, info) = build_restricted_field(&sys, &ropts)?;
    let engine = Engine::new(&model, engine_options(cfg, BTreeMap::new()))?;
    let (sol, _) = engine.solve(cfg.order)?;
    let mut eopts = EscapeOptions::default();
    if let Some(x0) = cfg.demo.x0 {
        eopts.x0 = x0;
    }
    if let Some(h) = cfg.demo.horizon {
        eopts.horizon = h;
        eopts.window = (h / 10.0, h);
    }
    if let Some(t) = cfg.demo.tol {
        eopts.tol = t;
    }
    let (rep, orbit) = escape_demo(&sys, &chart, &sol, &eopts)?;
    write_text(&cfg.out, "escape.csv", &rep.to_csv())?;
    write_text(&cfg.out, "orbit.csv", &orbit.to_csv())?;
    let m = &rep.manifold;
    let summary = DemoSummary {
        n_computed: info.n_computed,
        n_stated: info.n_stated,
        a: info.a,
        law_min: m.law_min,
        law_max: m.law_max,
        law_ok: m.law_ok,
        final_y: m.final_y,
        final_energy: m.final_energy,
        completed: m.completed,
        control_law_min: rep.control.law_min,
        control_law_max: rep.control.law_max,
        control_fails_law: rep.control_fails_law,
    };
    write_json(&cfg.out, "summary.json", &summary)?;
    println!(
        "law ratio in [{:.5}, {:.5}] on [{}, {}], within {}%: {}",
        m.law_min,
        m.law_max,
        eopts.window.0,
        eopts.window.1,
        eopts.law_tolerance * 100.0,
        if m.law_ok { "yes" } else { "no" }
    );
    println!("final radial velocity {:.3e}, energy {:.3e}", m.final_y, m.final_energy);
    println!(
        "control orbit law ratio in [{:.4}, {:.4}], follows law: {}",
        rep.control.law_min,
        rep.control.law_max,
        if rep.control_fails_law { "no" } else { "yes" }
    );
    if m.law_ok && m.completed && rep.control_fails_law {
        Ok(0)
    } else {
        report_failure("EscapeLawFailed", FAILED_CHECK, "escape orbit or control did not behave as expected");
        Ok(FAILED_CHECK)
    }
}

#[derive(Serialize)]
struct ConjugateSummary {
    b: f64,
    j: usize,
    conjugacy: whiskers::jet::ParamJet,
}

pub fn conjugate(cfg: &RunConfig) -> Result<i32> {
    let mut c = cfg.clone();
    if c.model.is_none() && c.fixture.is_none() {
        c.fixture = Some("conjugacy".into());
    }
    let (model, extra) = load_model(&c)?;
    let (b, k) = conjugate_normal_form(&model, c.order, &engine_options(&c, extra))?;
    let j = c.order.max(model.n);
    write_json(&c.out, "conjugacy.json", &ConjugateSummary { b, j, conjugacy: k })?;
    println!("b = {b:.12}");
    Ok(0)
}

pub fn scan(cfg: &RunConfig) -> Result<i32> {
    let (omega, nu) = match (&cfg.scan.omega, &cfg.model, &cfg.fixture) {
        (Some(o), _, _) => (o.clone(), cfg.scan.nu.clone().unwrap_or_default()),
        (None, Some(_), _) | (None, None, Some(_)) => {
            let (m, _) = load_model(cfg)?;
            (m.freq.omega.clone(), m.freq.nu.clone())
        }
        (None, None, None) => return Err(Error::Invalid("scan needs --omega or a model".into())),
    };
    let kind = if nu.is_empty() { ScanKind::Map } else { ScanKind::Flow };
    let tau = cfg.scan.tau.unwrap_or((omega.len() + nu.len()) as f64);
    let s = diophantine_scan(&omega, &nu, tau, cfg.scan_depth, kind)?;
    write_json(&cfg.out, "scan.json", &s)?;
    println!(
        "c = {:.6e} at k = {:?}, l = {} (tau = {tau}, |k| <= {})",
        s.freq.c_estimate, s.worst_k, s.worst_l, cfg.scan_depth
    );
    Ok(0)
}
