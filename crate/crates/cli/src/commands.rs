//! Subcommand handlers. Each returns the text to emit.

use std::path::PathBuf;

use serde::Serialize;

use dpflow::ccopf::{self, AffineSolution, CcopfConfig, ChanceLevels, Variant};
use dpflow::dopf::{self, DispatchSolution, DEFAULT_SIDES};
use dpflow::grid::{self, RadialGrid, TopologyIndex};
use dpflow::io::{self, histogram_bins};
use dpflow::mechanism::{self, MechanismConfig, MechanismRun, RealizedDispatch};
use dpflow::privacy::{self, PrivacySpec};
use dpflow::validation::{self, DpRatioOptions, McOptions, TimeseriesOptions};

use crate::args::*;
use crate::Failure;

const DEFAULT_EPSILON: f64 = 1.0;
const DEFAULT_BETA_FRAC: f64 = 0.1;
const DEFAULT_SAMPLES: usize = 5000;

/// Flags merged over the config file and built-in defaults.
pub struct Context {
    pub grid: RadialGrid,
    pub topo: TopologyIndex,
    pub config: ConfigFile,
    pub units: Units,
    pub sides: usize,
    pub format: OutputFormat,
}

impl Context {
    pub fn new(global: &GlobalArgs) -> Result<Context, Failure> {
        let config = match &global.config {
            Some(p) => ConfigFile::load(p).map_err(Failure::Domain)?,
            None => ConfigFile::default(),
        };
        let case: Option<PathBuf> = global.case.clone().or_else(|| config.case.clone());
        let grid = match case {
            Some(p) => grid::load_case_file(&p).map_err(|e| Failure::Domain(e.to_string()))?,
            None => grid::feeder15(),
        };
        let topo = grid::build_topology(&grid).map_err(|e| Failure::Domain(e.to_string()))?;
        Ok(Context {
            units: global.units.or(config.units).unwrap_or(Units::Mw),
            sides: global.sides.or(config.sides).unwrap_or(DEFAULT_SIDES),
            format: global.format,
            grid,
            topo,
            config,
        })
    }

    fn power(&self, pu: f64) -> f64 {
        match self.units {
            Units::Mw => self.grid.mw(pu),
            Units::PerUnit => pu,
        }
    }

    fn powers(&self, v: &mut [f64]) {
        v.iter_mut().for_each(|x| *x = self.power(*x));
    }

    fn input_power(&self, x: f64) -> f64 {
        match self.units {
            Units::Mw => self.grid.pu(x),
            Units::PerUnit => x,
        }
    }

    fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.config.seed).unwrap_or(0)
    }

    fn samples(&self, flag: Option<usize>) -> usize {
        flag.or(self.config.samples).unwrap_or(DEFAULT_SAMPLES)
    }

    fn epsilon(&self, flag: Option<f64>) -> f64 {
        flag.or(self.config.epsilon).unwrap_or(DEFAULT_EPSILON)
    }

    fn delta(&self, flag: Option<f64>) -> f64 {
        flag.or(self.config.delta).unwrap_or_else(|| privacy::default_delta(&self.grid))
    }

    fn spec(&self, p: &PrivacyArgs) -> Result<PrivacySpec, Failure> {
        let frac = p.beta_frac.or(self.config.beta_frac).unwrap_or(DEFAULT_BETA_FRAC);
        let beta = match &p.protect {
            Some(nodes) => {
                if let Some(bad) = nodes.iter().find(|&&i| i == 0 || i >= self.grid.node_count()) {
                    return Err(Failure::Domain(format!("--protect: node {bad} is not a load node")));
                }
                privacy::beta_on_nodes(&self.grid, frac, nodes)
            }
            None => privacy::beta_from_fraction(&self.grid, frac),
        };
        privacy::calibrate_sigma(self.epsilon(p.epsilon), self.delta(p.delta), &beta).map_err(Failure::from_display)
    }

    fn levels(&self, l: &LevelArgs) -> ChanceLevels {
        let d = ChanceLevels::default();
        ChanceLevels {
            eta_g: l.eta_g.or(self.config.eta_g).unwrap_or(d.eta_g),
            eta_u: l.eta_u.or(self.config.eta_u).unwrap_or(d.eta_u),
            eta_f: l.eta_f.or(self.config.eta_f).unwrap_or(d.eta_f),
        }
    }

    fn ccopf_config(&self, l: &LevelArgs, variant: Variant) -> CcopfConfig {
        CcopfConfig {
            levels: self.levels(l),
            sides: self.sides,
            variant,
        }
    }

    fn dispatch(&self, mut d: DispatchSolution) -> DispatchSolution {
        self.powers(&mut d.g_p);
        self.powers(&mut d.g_q);
        self.powers(&mut d.f_p);
        self.powers(&mut d.f_q);
        d
    }

    fn affine(&self, mut a: AffineSolution) -> AffineSolution {
        a.nominal = self.dispatch(a.nominal);
        self.powers(&mut a.sigma);
        self.powers(&mut a.sigma_target);
        self.powers(&mut a.flow_std);
        self.powers(&mut a.gen_std);
        if let Some(t) = a.target.as_mut() {
            self.powers(&mut t.t);
        }
        a
    }

    fn privacy_spec(&self, mut s: PrivacySpec) -> PrivacySpec {
        self.powers(&mut s.beta);
        self.powers(&mut s.sigma);
        s
    }

    fn realized(&self, mut r: RealizedDispatch) -> RealizedDispatch {
        self.powers(&mut r.xi);
        self.powers(&mut r.g_p);
        self.powers(&mut r.g_q);
        self.powers(&mut r.f_p);
        self.powers(&mut r.f_q);
        r
    }

    fn run(&self, r: MechanismRun) -> MechanismRun {
        MechanismRun {
            realized: self.realized(r.realized),
            ledger: r.ledger,
            spec: self.privacy_spec(r.spec),
            policy: r.policy.map(|a| self.affine(a)),
            nominal: r.nominal.map(|d| self.dispatch(d)),
        }
    }

    fn units_label(&self) -> &'static str {
        match self.units {
            Units::Mw => "mw",
            Units::PerUnit => "per-unit",
        }
    }

    /// JSON of `value`, or CSV of `rows` when CSV was requested.
    fn emit<J: Serialize, R: Serialize>(&self, value: &J, rows: impl FnOnce() -> Vec<R>) -> Result<String, Failure> {
        match self.format {
            OutputFormat::Json => io::to_json_string(value).map_err(Failure::from_display),
            OutputFormat::Csv => io::to_csv_string(&rows()).map_err(Failure::from_display),
        }
    }
}

#[derive(Serialize)]
struct Labelled<'a, T: Serialize> {
    units: &'a str,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
struct LineRow {
    line: usize,
    from: usize,
    f_p: f64,
    f_q: f64,
    sigma: f64,
    flow_std: f64,
}

#[derive(Serialize)]
struct NodeRow {
    node: usize,
    g_p: f64,
    g_q: f64,
    u: f64,
}

fn line_rows(ctx: &Context, f_p: &[f64], f_q: &[f64], sigma: &[f64], flow_std: &[f64]) -> Vec<LineRow> {
    (0..f_p.len())
        .map(|k| LineRow {
            line: RadialGrid::head(k),
            from: ctx.grid.parent[RadialGrid::head(k)].unwrap_or(0),
            f_p: f_p[k],
            f_q: f_q[k],
            sigma: sigma.get(k).copied().unwrap_or(0.0),
            flow_std: flow_std.get(k).copied().unwrap_or(0.0),
        })
        .collect()
}

pub fn solve_dopf(ctx: &Context) -> Result<String, Failure> {
    let sol = dopf::solve_dopf(&ctx.grid, &ctx.topo, ctx.sides)?;
    let sol = ctx.dispatch(sol);
    ctx.emit(
        &Labelled {
            units: ctx.units_label(),
            body: &sol,
        },
        || {
            (0..sol.g_p.len())
                .map(|i| NodeRow {
                    node: i,
                    g_p: sol.g_p[i],
                    g_q: sol.g_q[i],
                    u: sol.u[i],
                })
                .collect()
        },
    )
}

fn read_sigma_hat(ctx: &Context, path: &std::path::Path) -> Result<Vec<f64>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))?;
    let v: Vec<f64> = serde_json::from_str(&text).map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))?;
    Ok(v.into_iter().map(|x| ctx.input_power(x)).collect())
}

pub fn solve_ccopf(ctx: &Context, a: &CcopfArgs) -> Result<String, Failure> {
    let spec = ctx.spec(&a.privacy)?;
    let l = ctx.grid.line_count();
    let variant = match a.variant {
        VariantKind::Base => Variant::Base,
        VariantKind::Tov => Variant::ToleranceOfVariance { psi: vec![a.psi; l] },
        VariantKind::Tav => Variant::TargetVariance {
            sigma_hat: match &a.sigma_hat_file {
                Some(p) => read_sigma_hat(ctx, p)?,
                None => ccopf::default_sigma_hat(&ctx.grid, &ctx.topo, &spec.sigma),
            },
            psi: vec![a.psi; l],
            anchored: a.anchored,
        },
        VariantKind::Cvar => Variant::Cvar {
            theta: a.theta,
            varrho: a.varrho,
        },
        VariantKind::Meanstd => Variant::MeanStd { theta: a.theta },
    };
    let cfg = ctx.ccopf_config(&a.levels, variant);
    let sol = ccopf::solve_ccopf(&ctx.grid, &ctx.topo, &spec, &cfg)?;
    let sol = ctx.affine(sol);
    #[derive(Serialize)]
    struct Out<'a> {
        spec: PrivacySpec,
        solution: &'a AffineSolution,
    }
    ctx.emit(
        &Labelled {
            units: ctx.units_label(),
            body: Out {
                spec: ctx.privacy_spec(spec),
                solution: &sol,
            },
        },
        || line_rows(ctx, &sol.nominal.f_p, &sol.nominal.f_q, &sol.sigma, &sol.flow_std),
    )
}

pub fn mechanism(ctx: &Context, cmd: &MechanismCommand) -> Result<String, Failure> {
    let run = match cmd {
        MechanismCommand::Run(a) => {
            let spec = ctx.spec(&a.privacy)?;
            let mut cfg = MechanismConfig::with_levels(ctx.levels(&a.levels), ctx.sides);
            cfg.max_resamples = a.resamples;
            mechanism::run_dp_ccopf(
                &ctx.grid,
                &ctx.topo,
                spec.epsilon,
                spec.delta,
                &spec.beta,
                &cfg,
                ctx.seed(a.seed),
            )?
        }
        MechanismCommand::OpBaseline(a) => {
            let spec = ctx.spec(&a.privacy)?;
            mechanism::run_output_perturbation(
                &ctx.grid,
                &ctx.topo,
                spec.epsilon,
                spec.delta,
                &spec.beta,
                ctx.sides,
                ctx.seed(a.seed),
            )?
        }
    };
    let run = ctx.run(run);
    let r = &run.realized;
    let flow_std = run.policy.as_ref().map(|p| p.flow_std.clone()).unwrap_or_default();
    ctx.emit(
        &Labelled {
            units: ctx.units_label(),
            body: &run,
        },
        || line_rows(ctx, &r.f_p, &r.f_q, &run.spec.sigma, &flow_std),
    )
}

pub fn calibrate(ctx: &Context, p: &PrivacyArgs) -> Result<String, Failure> {
    let spec = ctx.privacy_spec(ctx.spec(p)?);
    #[derive(Serialize)]
    struct Row {
        line: usize,
        beta: f64,
        sigma: f64,
    }
    ctx.emit(
        &Labelled {
            units: ctx.units_label(),
            body: &spec,
        },
        || {
            (0..spec.sigma.len())
                .map(|k| Row {
                    line: RadialGrid::head(k),
                    beta: spec.beta[k],
                    sigma: spec.sigma[k],
                })
                .collect()
        },
    )
}

pub fn validate(ctx: &Context, cmd: &ValidateCommand) -> Result<String, Failure> {
    let (g, topo) = (&ctx.grid, &ctx.topo);
    match cmd {
        ValidateCommand::Mc(a) => {
            let spec = ctx.spec(&a.privacy)?;
            let levels = ctx.levels(&a.levels);
            let sol = ccopf::solve_ccopf(g, topo, &spec, &ctx.ccopf_config(&a.levels, Variant::Base))?;
            if a.histogram_line == 0 || a.histogram_line >= g.node_count() {
                return Err(Failure::Domain(format!(
                    "--histogram-line {} is not a line (1..={})",
                    a.histogram_line,
                    g.line_count()
                )));
            }
            let opts = McOptions {
                samples: ctx.samples(a.samples),
                seed: ctx.seed(a.seed),
                levels,
                sides: ctx.sides,
                varrho: a.varrho,
                histogram_line: RadialGrid::line_into(a.histogram_line),
                bins: a.bins,
            };
            let rep = validation::mc_validate(g, topo, &sol, &opts)?;
            ctx.emit(&rep, || histogram_bins(&rep.histogram))
        }
        ValidateCommand::Sensitivity(a) => {
            let frac = a.beta_frac.or(ctx.config.beta_frac).unwrap_or(DEFAULT_BETA_FRAC);
            let mut rows = validation::sensitivity_table(g, topo, frac, a.steps, ctx.sides)?;
            for r in rows.iter_mut() {
                r.beta = ctx.power(r.beta);
                r.sensitivity = ctx.power(r.sensitivity);
            }
            ctx.emit(
                &Labelled {
                    units: ctx.units_label(),
                    body: SensitivityOut { rows: &rows },
                },
                || rows.clone(),
            )
        }
        ValidateCommand::Stdfloor(a) => {
            let spec = ctx.spec(&a.privacy)?;
            let sol = ccopf::solve_ccopf(g, topo, &spec, &ctx.ccopf_config(&a.levels, Variant::Base))?;
            let mut rows = validation::std_floor_check(topo, &sol);
            for r in rows.iter_mut() {
                r.flow_std = ctx.power(r.flow_std);
                r.sigma = ctx.power(r.sigma);
            }
            ctx.emit(
                &Labelled {
                    units: ctx.units_label(),
                    body: FloorOut {
                        all_ok: rows.iter().all(|r| r.floor_ok && r.coordinate_ok),
                        rows: &rows,
                    },
                },
                || rows.clone(),
            )
        }
        ValidateCommand::Dpratio(a) => {
            let mut opts = DpRatioOptions::new(a.node, g.pu(a.beta_mw), ctx.epsilon(a.epsilon), ctx.delta(a.delta));
            opts.levels = ctx.levels(&a.levels);
            opts.sides = ctx.sides;
            opts.samples = ctx.samples(a.samples);
            opts.bins = a.bins;
            opts.seed = ctx.seed(a.seed);
            let rep = validation::dp_ratio_check(g, topo, &opts)?;
            #[derive(Serialize)]
            struct Row {
                lo: f64,
                hi: f64,
                base: f64,
                lower: f64,
                upper: f64,
            }
            ctx.emit(&rep, || {
                let (b, l, u) = (
                    histogram_bins(&rep.base),
                    rep.lower.frequencies(),
                    rep.upper.frequencies(),
                );
                b.iter()
                    .enumerate()
                    .map(|(i, bin)| Row {
                        lo: ctx.power(bin.lo),
                        hi: ctx.power(bin.hi),
                        base: bin.frequency,
                        lower: l[i],
                        upper: u[i],
                    })
                    .collect()
            })
        }
        ValidateCommand::CvarSweep(a) => {
            let spec = ctx.spec(&a.privacy)?;
            let rows = validation::cvar_sweep(
                g,
                topo,
                &spec,
                ctx.levels(&a.levels),
                ctx.sides,
                &a.thetas,
                a.varrho,
                ctx.samples(a.samples),
                ctx.seed(a.seed),
            )?;
            ctx.emit(&rows, || rows.clone())
        }
        ValidateCommand::Timeseries(a) => {
            let mut opts = TimeseriesOptions::new(a.node, a.beta_mw, ctx.epsilon(a.epsilon), ctx.delta(a.delta), a.steps);
            opts.seed = ctx.seed(a.seed);
            opts.config = ctx.ccopf_config(&a.levels, Variant::Base);
            let rep = validation::timeseries_demo(g, topo, &opts)?;
            ctx.emit(&rep, || rep.trace.clone())
        }
    }
}

#[derive(Serialize)]
struct SensitivityOut<'a> {
    rows: &'a [validation::SensitivityRow],
}

#[derive(Serialize)]
struct FloorOut<'a> {
    all_ok: bool,
    rows: &'a [validation::FloorCheck],
}
