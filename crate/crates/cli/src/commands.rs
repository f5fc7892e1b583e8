use std::fs;
use std::path::Path;

use dcstop_core::dpp::{check_dpp, extract_policy, solve, SolveOptions, ThetaRule, ValueTable};
use dcstop_core::lattice::{Lattice, LatticeMode, LatticeSpec};
use dcstop_core::mvm::{MvmDump, MvmTree};
use dcstop_core::oracle::oracle_value;
use dcstop_core::rst::{simulate, StoppingKernel};
use dcstop_core::stability::{concavity_check, convergence_sweep, dyadic_grids};
use num_rational::Ratio;
use serde_json::{json, Value};

use crate::config::{load, Config, KernelSource, Loaded};
use crate::{CliError, Command, Common};

const VERSION: &str = env!("CARGO_PKG_VERSION");
const DEFAULT_SEED: u64 = 0;

struct Ctx {
    config: Config,
    digest: String,
    out: std::path::PathBuf,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self, CliError> {
        let Loaded { mut config, digest } = load(&common.config)?;
        if let Some(s) = common.seed {
            config.seed = Some(s);
        }
        if let Some(r) = common.resolution {
            config.solver.resolution = r;
        }
        Ok(Self {
            config,
            digest,
            out: common.out.clone(),
        })
    }

    fn write_json(&self, name: &str, command: &str, body: Value) -> Result<(), CliError> {
        let mut doc = json!({
            "command": command,
            "version": VERSION,
            "config_sha256": self.digest,
        });
        if let (Value::Object(d), Value::Object(b)) = (&mut doc, body) {
            d.extend(b);
        }
        self.write(name, &(serde_json::to_string_pretty(&doc).expect("serializable") + "\n"))
    }

    fn write_csv(&self, name: &str, body: &str) -> Result<(), CliError> {
        let head = format!("# version={VERSION}\n# config_sha256={}\n", self.digest);
        self.write(name, &(head + body))
    }

    fn write(&self, name: &str, text: &str) -> Result<(), CliError> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join(name), text)?;
        Ok(())
    }

    fn solve(&self) -> Result<ValueTable, CliError> {
        let mut opts = SolveOptions::new(self.config.solver.resolution);
        if self.config.solver.check_scaling {
            opts = opts.with_scaling_check();
        }
        Ok(solve(&self.config.lattice, &self.config.cost, &self.config.measure, &opts)?)
    }

    /// History lattice with the config geometry, augmented when the cost
    /// reads the running maximum.
    fn history(&self) -> Result<Lattice, CliError> {
        let c = &self.config;
        let spec = c
            .lattice
            .clone()
            .with_mode(LatticeMode::History)
            .with_max(c.lattice.augment_max || c.cost.requires_max());
        Ok(Lattice::build(spec)?)
    }

    fn history_spec(&self) -> LatticeSpec {
        self.config.lattice.clone().with_mode(LatticeMode::History)
    }
}

fn f(x: f64) -> Value {
    json!(x)
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Solve(c) => cmd_solve(&Ctx::new(&c)?),
        Command::Policy(c) => cmd_policy(&Ctx::new(&c)?),
        Command::Oracle(c) => cmd_oracle(&Ctx::new(&c)?),
        Command::Compare(c) => cmd_compare(&Ctx::new(&c)?),
        Command::Simulate(c) => cmd_simulate(&Ctx::new(&c)?),
        Command::Stability(c) => cmd_stability(&Ctx::new(&c)?),
        Command::Validate { common, policy } => cmd_validate(&Ctx::new(&common)?, policy.as_deref()),
    }
}

fn cmd_solve(ctx: &Ctx) -> Result<(), CliError> {
    let t = ctx.solve()?;
    ctx.write_json(
        "result.json",
        "solve",
        json!({
            "value": f(t.value()),
            "slack": f(t.slack()),
            "lipschitz": f(t.lipschitz()),
            "resolution": t.resolution(),
            "atom_steps": t.atom_steps(),
            "scaling_residual": t.scaling_residual(),
        }),
    )?;
    ctx.write_csv("table.csv", &t.root_csv())?;
    println!("value {}", t.value());
    Ok(())
}

fn policy_tree(ctx: &Ctx, table: &ValueTable) -> Result<(Lattice, MvmTree), CliError> {
    let lattice = ctx.history()?;
    let tree = extract_policy(table, &lattice, &ctx.config.measure)?;
    Ok((lattice, tree))
}

fn cmd_policy(ctx: &Ctx) -> Result<(), CliError> {
    let table = ctx.solve()?;
    let (lattice, tree) = policy_tree(ctx, &table)?;
    let report = tree.validate(&ctx.config.measure);
    let kernel = tree.to_kernel(&lattice)?;
    let realized = kernel.objective_value(&lattice, &ctx.config.cost)?;
    ctx.write_json(
        "policy.json",
        "policy",
        json!({
            "value": f(table.value()),
            "realized_value": f(realized),
            "validation": report,
            "termination": tree.termination().terminating,
            "mvm": tree.to_dump(),
            "kernel": kernel.to_dump(&lattice)?,
        }),
    )?;
    println!("value {} realized {}", table.value(), realized);
    if !report.ok {
        return Err(CliError::Check(format!("extracted policy fails validation: {:?}", report.violation)));
    }
    Ok(())
}

fn cmd_oracle(ctx: &Ctx) -> Result<(), CliError> {
    let c = &ctx.config;
    let r = oracle_value(&ctx.history_spec(), &c.cost, &c.measure, c.oracle.exact)?;
    let lattice = ctx.history()?;
    let kernel = r.kernel.as_ref().map(|k| k.to_dump(&lattice)).transpose()?;
    ctx.write_json(
        "result.json",
        "oracle",
        json!({
            "value": r.value,
            "exact_value": r.exact_value,
            "status": r.status,
            "certificate": r.certificate,
            "pivots": r.pivots,
            "kernel": kernel,
        }),
    )?;
    println!("value {}", r.value.unwrap_or(f64::NAN));
    Ok(())
}

fn default_thetas(spec: &LatticeSpec) -> Vec<ThetaRule> {
    vec![
        ThetaRule::FixedStep(1),
        ThetaRule::HitLevel {
            level: 1,
            cap: spec.depth,
        },
    ]
}

fn cmd_compare(ctx: &Ctx) -> Result<(), CliError> {
    let c = &ctx.config;
    let table = ctx.solve()?;
    let oracle = oracle_value(&ctx.history_spec(), &c.cost, &c.measure, false)?;
    let ov = oracle.value.ok_or_else(|| CliError::Check("oracle returned no value".into()))?;
    let gap = (table.value() - ov).abs();
    let mut checks = Vec::new();
    let mut dpp_ok = true;
    for theta in default_thetas(&c.lattice) {
        let r = check_dpp(&table, &theta)?;
        dpp_ok &= r.residual <= r.slack;
        checks.push(json!({ "theta": theta, "residual": f(r.residual), "slack": f(r.slack) }));
    }
    let pass = gap <= c.compare.tolerance && dpp_ok;
    ctx.write_json(
        "result.json",
        "compare",
        json!({
            "solver_value": f(table.value()),
            "oracle_value": f(ov),
            "gap": f(gap),
            "tolerance": f(c.compare.tolerance),
            "slack": f(table.slack()),
            "dpp_checks": checks,
            "pass": pass,
        }),
    )?;
    println!("solver {} oracle {} gap {gap:e}", table.value(), ov);
    if !pass {
        return Err(CliError::Check(format!(
            "gap {gap:e} (tolerance {:e}) or DPP residual above slack",
            c.compare.tolerance
        )));
    }
    Ok(())
}

fn cmd_simulate(ctx: &Ctx) -> Result<(), CliError> {
    let c = &ctx.config;
    let lattice = ctx.history()?;
    let kernel: StoppingKernel = match c.simulate.kernel {
        KernelSource::Solver => policy_tree(ctx, &ctx.solve()?)?.1.to_kernel(&lattice)?,
        KernelSource::Oracle => oracle_value(&ctx.history_spec(), &c.cost, &c.measure, false)?
            .kernel
            .ok_or_else(|| CliError::Check("oracle returned no kernel".into()))?,
    };
    let seed = c.seed.unwrap_or(DEFAULT_SEED);
    let expected = kernel.objective_value(&lattice, &c.cost)?;
    let report = simulate(&kernel, &lattice, &c.cost, c.simulate.paths, seed)?;
    let z = (report.mean - expected).abs() / report.stderr.max(f64::MIN_POSITIVE);
    let consistent = (report.mean - expected).abs() <= 4.0 * report.stderr + 1e-12;
    ctx.write_json(
        "result.json",
        "simulate",
        json!({
            "seed": seed,
            "paths": report.n_paths,
            "mean": f(report.mean),
            "stderr": f(report.stderr),
            "objective_value": f(expected),
            "z": f(z),
            "consistent": consistent,
            "empirical_marginal": report.empirical_marginal,
        }),
    )?;
    println!("mean {} ± {} expected {}", report.mean, report.stderr, expected);
    if !consistent {
        return Err(CliError::Check(format!("simulated mean off by {z:.2} standard errors")));
    }
    Ok(())
}

fn cmd_stability(ctx: &Ctx) -> Result<(), CliError> {
    let c = &ctx.config;
    let s = &c.stability;
    let grids = s.grids.clone().unwrap_or_else(|| dyadic_grids(&c.lattice, s.levels));
    let sweep = convergence_sweep(&c.lattice, &c.cost, &c.measure, &grids, s.valuer)?;
    let concavity = match &s.concavity {
        Some(cc) => {
            let lambdas = cc
                .lambdas
                .iter()
                .map(|l| {
                    l.parse::<Ratio<u32>>()
                        .map_err(|e| CliError::Validation(format!("config error at `stability.concavity.lambdas`: {l:?}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Some(concavity_check(&c.lattice, &c.cost, &c.measure, &cc.other, &lambdas, s.valuer)?)
        }
        None => None,
    };
    let pass = sweep.pass != Some(false) && concavity.as_ref().is_none_or(|r| r.pass);
    ctx.write_csv("stability.csv", &sweep.to_csv())?;
    ctx.write_json(
        "result.json",
        "stability",
        json!({
            "valuer": s.valuer,
            "grids": grids,
            "sweep": sweep,
            "concavity": concavity,
            "pass": pass,
        }),
    )?;
    println!("sweep pass {:?}", sweep.pass);
    if !pass {
        return Err(CliError::Check("stability bound violated; see result.json".into()));
    }
    Ok(())
}

fn cmd_validate(ctx: &Ctx, policy: Option<&Path>) -> Result<(), CliError> {
    let c = &ctx.config;
    c.lattice.validate()?;
    c.cost.check_lattice(&c.lattice.clone().with_max(c.lattice.augment_max || c.cost.requires_max()))?;
    let steps = c.lattice.atom_steps(&c.measure)?;
    if c.solver.resolution < 1 {
        return Err(CliError::Validation("config error at `solver.resolution`: must be at least 1".into()));
    }
    let mut body = json!({ "atom_steps": steps, "config_ok": true });
    if let Some(path) = policy {
        let text = fs::read_to_string(path)?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let dump: MvmDump = serde_json::from_value(doc.get("mvm").cloned().unwrap_or(doc))
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let tree = MvmTree::from_dump(&dump)?;
        let report = tree.validate(&c.measure);
        body["policy"] = json!(report);
        ctx.write_json("result.json", "validate", body)?;
        if let Some(v) = report.violation {
            return Err(CliError::Check(format!(
                "{:?} violated at {} (residual {:e})",
                v.property, v.node, v.residual
            )));
        }
        println!("policy ok");
        return Ok(());
    }
    ctx.write_json("result.json", "validate", body)?;
    println!("config ok");
    Ok(())
}
