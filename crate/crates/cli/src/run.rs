use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gbp_core::factors::FactorParams;
use gbp_core::gaussian::GaussianMoments;
use gbp_core::json::{beliefs_value, ground_truth_value, moments_map_value, GraphJson};
use gbp_core::oracle::{assemble, gauss_newton, marginals};
use gbp_core::pgm::{read_pgm, write_p2, GrayImage};
use gbp_core::problems::{
    self, build_grid, build_line_fit, grid_means, linefit_outlier_preset, linefit_step_preset, simulate_poses,
    solve_multiscale, GridSpec, PoseSimSpec, OUTLIER_INDEX,
};
use gbp_core::schedules::{solve_traced, Focus, SchedulePolicy, Scheduler, SolveSummary};
use gbp_core::{FactorGraph, GraphConfig};
use serde_json::{json, Value};

use crate::{LinefitPreset, Loss, RunArgs, Schedule};

/// Reads `GBP_THREADS`: unset uses rayon's default pool, 0 runs sequentially,
/// n > 0 caps the pool at n workers.
pub fn configure_threads() -> Result<bool> {
    let Ok(raw) = std::env::var("GBP_THREADS") else {
        return Ok(true);
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("GBP_THREADS must be a worker count, got `{raw}`"))?;
    if n == 0 {
        return Ok(false);
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(true)
}

fn validate(run: &RunArgs) -> Result<()> {
    if !(run.tol > 0.0) {
        bail!("--tol must be > 0, got {}", run.tol);
    }
    if run.iters == 0 {
        bail!("--iters must be at least 1");
    }
    if run.levels == 0 {
        bail!("--levels must be at least 1");
    }
    if let Some(b) = run.damping {
        if !(b > 0.0 && b <= 1.0) {
            bail!("--damping must lie in (0, 1], got {b}");
        }
    }
    if run.loss == Some(Loss::Huber) && !(run.huber_t > 0.0 && run.huber_t.is_finite()) {
        bail!("--huber-t must be > 0, got {}", run.huber_t);
    }
    if run.levels > 1 && run.schedule != Schedule::Synchronous {
        bail!("--levels runs synchronous rounds at every level");
    }
    Ok(())
}

/// `None` keeps the input's loss; `Some(t)` sets (or with `None`, clears) Huber.
fn requested_loss(run: &RunArgs) -> Option<Option<f64>> {
    run.loss.map(|l| match l {
        Loss::Squared => None,
        Loss::Huber => Some(run.huber_t),
    })
}

fn set_loss(graph: &mut GraphJson, t: Option<f64>) {
    for f in &mut graph.factors {
        match &mut f.params {
            FactorParams::Offset1d { huber_t, .. }
            | FactorParams::Smooth1d { huber_t, .. }
            | FactorParams::RangeBearing { huber_t, .. }
            | FactorParams::CustomLinear { huber_t, .. } => *huber_t = t,
            FactorParams::Prior { .. } | FactorParams::RelPos2d { .. } => {}
        }
    }
}

fn from_json(mut graph: GraphJson, run: &RunArgs) -> Result<FactorGraph> {
    if let Some(t) = requested_loss(run) {
        set_loss(&mut graph, t);
    }
    let mut g = graph.to_graph(GraphConfig::default())?;
    g.config.damping = g.default_damping();
    Ok(g)
}

fn configure(g: &mut FactorGraph, run: &RunArgs, parallel: bool) -> Result<()> {
    let beta = run.damping.unwrap_or_else(|| g.default_damping());
    g.set_damping(beta)?;
    g.config.parallel = parallel;
    Ok(())
}

fn policy(run: &RunArgs) -> SchedulePolicy {
    SchedulePolicy {
        seed: Some(run.seed),
        focus: run.focus.clone().map(|id| Focus {
            id,
            radius: run.radius,
        }),
        ..SchedulePolicy::new(run.schedule.into())
    }
}

fn iterate(g: &mut FactorGraph, run: &RunArgs) -> Result<SolveSummary> {
    let mut s = Scheduler::new(policy(run))?;
    Ok(solve_traced(g, &mut s, run.iters, run.tol)?)
}

/// Dense reference marginals. Graphs with nonlinear or robust factors are
/// solved by Gauss-Newton from their current estimates, then linearized there.
fn oracle_of(g: &FactorGraph) -> Result<Vec<Option<GaussianMoments>>> {
    let nonlinear = g.factors().any(|(_, f)| f.model().requires_relinearization());
    if !nonlinear {
        return Ok(marginals(&assemble(g))?);
    }
    let gn = gauss_newton(g, 200, 1e-10)?;
    if !gn.converged {
        eprintln!("warning: Gauss-Newton oracle stopped after {} iterations", gn.iterations);
    }
    let mut work = g.clone();
    work.relinearize_all(&gn.means)?;
    let mut out = marginals(&assemble(&work))?;
    for (slot, mean) in out.iter_mut().zip(gn.means) {
        if let (Some(m), Some(mu)) = (slot.as_mut(), mean) {
            m.mean = mu;
        }
    }
    Ok(out)
}

struct Reference {
    graph: FactorGraph,
    moments: Vec<Option<GaussianMoments>>,
}

impl Reference {
    fn of(g: &FactorGraph) -> Result<Self> {
        Ok(Self {
            moments: oracle_of(g)?,
            graph: g.clone(),
        })
    }
}

/// Largest mean and covariance discrepancies over variables present in both graphs.
fn compare(g: &FactorGraph, reference: &Reference) -> (f64, f64) {
    let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
    for (id, v) in g.variables() {
        let Some(o) = reference
            .graph
            .var_id(v.name())
            .ok()
            .and_then(|r| reference.moments.get(r.0))
            .and_then(Option::as_ref)
        else {
            continue;
        };
        match g.belief_moments(id) {
            Some(b) => {
                mean_err = mean_err.max((&b.mean - &o.mean).amax());
                var_err = var_err.max((&b.covariance - &o.covariance).amax());
            }
            None => {
                mean_err = f64::INFINITY;
                var_err = f64::INFINITY;
            }
        }
    }
    (mean_err, var_err)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn trace_csv(summary: &SolveSummary) -> String {
    let mut out = String::from("iter,messages_sent,delta,total_energy\n");
    for r in &summary.trace {
        let _ = writeln!(out, "{},{},{},{}", r.iter, r.messages_sent, r.delta, r.total_energy);
    }
    out
}

/// Write trace, result and (optionally) oracle artifacts, print a one-line
/// summary, and return whether the run converged.
fn finish(g: &FactorGraph, summary: &SolveSummary, reference: Option<&Reference>, out_dir: &Path) -> Result<bool> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    fs::write(out_dir.join("trace.csv"), trace_csv(summary))?;
    write_json(&out_dir.join("result.json"), &beliefs_value(g))?;
    if let Some(r) = reference {
        write_json(&out_dir.join("oracle.json"), &moments_map_value(&r.graph, &r.moments))?;
        let (mean_err, var_err) = compare(g, r);
        write_json(
            &out_dir.join("comparison.json"),
            &json!({"max_mean_err": mean_err, "max_var_err": var_err}),
        )?;
        println!("oracle: max_mean_err {mean_err:e}, max_var_err {var_err:e}");
    }
    let energy = summary.trace.last().map_or(f64::NAN, |r| r.total_energy);
    println!(
        "{} after {} rounds: delta {:e}, total_energy {}",
        if summary.converged { "converged" } else { "stopped" },
        summary.rounds,
        summary.final_delta,
        energy
    );
    Ok(summary.converged)
}

pub fn solve(graph: Option<PathBuf>, preset: Option<String>, run: &RunArgs, parallel: bool) -> Result<bool> {
    validate(run)?;
    let parsed = match (graph, preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, Some(name)) => GraphJson::from_graph(&problems::preset(&name)?)?,
        (None, None) => bail!("pass --graph or --preset"),
    };
    let mut g = from_json(parsed, run)?;
    configure(&mut g, run, parallel)?;
    let reference = run.oracle.then(|| Reference::of(&g)).transpose()?;
    let summary = iterate(&mut g, run)?;
    finish(&g, &summary, reference.as_ref(), &run.out_dir)
}

/// With `--oracle`, the outlier preset is compared against the dense fit of
/// the same data without the outlier; the step preset against its own optimum.
pub fn linefit(preset: LinefitPreset, run: &RunArgs, parallel: bool) -> Result<bool> {
    validate(run)?;
    let base = match preset {
        LinefitPreset::Outlier => linefit_outlier_preset(),
        LinefitPreset::Step => linefit_step_preset(),
    };
    let spec = match requested_loss(run) {
        Some(t) => base.clone().with_loss(t),
        None => base.clone(),
    };
    let mut g = build_line_fit(&spec)?;
    configure(&mut g, run, parallel)?;
    let reference = if run.oracle {
        Some(match preset {
            LinefitPreset::Outlier => {
                Reference::of(&build_line_fit(&base.without_point(OUTLIER_INDEX).with_loss(None))?)?
            }
            LinefitPreset::Step => Reference::of(&g)?,
        })
    } else {
        None
    };
    let summary = iterate(&mut g, run)?;
    finish(&g, &summary, reference.as_ref(), &run.out_dir)
}

pub fn denoise(
    input: &Path,
    out: Option<&Path>,
    data_sigma: f64,
    smooth_sigma: f64,
    run: &RunArgs,
    parallel: bool,
) -> Result<bool> {
    validate(run)?;
    let image = read_pgm(input).with_context(|| format!("reading {}", input.display()))?;
    let mut spec = GridSpec::new(image.width, image.height, image.to_unit(), data_sigma, smooth_sigma);
    if let Some(t) = requested_loss(run) {
        spec = spec.with_loss(t);
    }
    let mut g = build_grid(&spec)?;
    configure(&mut g, run, parallel)?;
    let reference = run.oracle.then(|| Reference::of(&g)).transpose()?;
    let summary = if run.levels > 1 {
        spec.levels = run.levels;
        let report = solve_multiscale(&spec, &g.config, run.iters, run.tol)?;
        eprintln!("rounds per level (coarsest first): {:?}", report.level_rounds);
        g = report.graph;
        report.fine
    } else {
        iterate(&mut g, run)?
    };
    if let Some(out) = out {
        let result = GrayImage::from_unit(image.width, image.height, &grid_means(&g))?;
        write_p2(&result, out).with_context(|| format!("writing {}", out.display()))?;
    }
    finish(&g, &summary, reference.as_ref(), &run.out_dir)
}

/// Without `--graph`, simulates the 20-pose, 5-landmark circuit seeded by
/// `--seed` and also writes `graph.json` and `ground_truth.json`.
pub fn posegraph(graph: Option<PathBuf>, run: &RunArgs, parallel: bool) -> Result<bool> {
    validate(run)?;
    let (mut g, sim) = match graph {
        Some(path) => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            (from_json(serde_json::from_str(&text)?, run)?, None)
        }
        None => {
            let sim = simulate_poses(&PoseSimSpec::preset(run.seed))?;
            for id in &sim.unseen {
                eprintln!("warning: landmark {id} is never observed and was left out");
            }
            let g = from_json(GraphJson::from_graph(&sim.graph)?, run)?;
            fs::create_dir_all(&run.out_dir)?;
            write_json(&run.out_dir.join("graph.json"), &serde_json::to_value(GraphJson::from_graph(&g)?)?)?;
            write_json(&run.out_dir.join("ground_truth.json"), &ground_truth_value(&sim.ground_truth))?;
            (g, Some(sim))
        }
    };
    configure(&mut g, run, parallel)?;
    let reference = run.oracle.then(|| Reference::of(&g)).transpose()?;
    let summary = iterate(&mut g, run)?;
    if let Some(sim) = &sim {
        println!("position rmse {:.6}", sim.rmse(&g.belief_means())?);
    }
    finish(&g, &summary, reference.as_ref(), &run.out_dir)
}
