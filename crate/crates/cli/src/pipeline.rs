//! Stage runner: forward, demos, recover, infer, then classify or sweep.
//!
//! Every stage writes one artifact into the output directory and, in check
//! mode, asserts its own correctness properties before the next stage starts.

use std::path::{Path, PathBuf};

use forge_core::demo::{generate_demoset, DemoSet};
use forge_core::forward::{solve_forward_with, ForwardMode, ForwardSolution};
use forge_core::inverse::{
    active_components, build_kkt_program, cell_meets_region, classify_grid, infer_theta, recover_policy, replay,
    run_noise_sweep, sweep_csv, GridClassification, KktProgram, KktResiduals, ParamWitness, RecoveredPolicy,
    SweepOptions, SweepRow, Verdict,
};
use forge_core::io::{self, SPEC_VERSION};
use forge_core::linalg::{norm2, Vector};
use forge_core::model::{build_block_operators, ProblemInstance, System};
use forge_core::sls::{verify_response, FeedbackGain};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModeSpec, RunConfig, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub ok: bool,
    pub outputs: Vec<FileRecord>,
    /// Assertions that passed in check mode.
    pub checks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub forge_core: String,
    pub forge_cli: String,
    pub problem_spec_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub preset: Option<String>,
    pub target: Stage,
    pub seed: u64,
    /// SHA-256 over the resolved config and the problem file bytes.
    pub config_hash: String,
    pub versions: Versions,
    pub check: bool,
    pub stages: Vec<StageRecord>,
    pub failure: Option<Failure>,
}

impl Manifest {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

/// Problem-level report of the infer stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferReport {
    pub witness: ParamWitness,
    pub residuals: Option<KktResiduals>,
    /// Parameter components pinned by faces the true plan touches.
    pub active_components: Vec<usize>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_hash(cfg: &RunConfig) -> Result<String, String> {
    let problem = std::fs::read(cfg.problem_path()).map_err(|e| format!("{}: {e}", cfg.problem_path().display()))?;
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).map_err(|e| e.to_string())?);
    h.update(&problem);
    Ok(hex::encode(h.finalize()))
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out_dir: &'a Path,
    check: bool,
    inst: Option<ProblemInstance>,
    truth: Option<ForwardSolution>,
    demos: Option<DemoSet>,
    policy: Option<RecoveredPolicy>,
    kkt: Option<KktProgram>,
}

type StageResult = Result<(Vec<FileRecord>, Vec<String>), String>;

impl Ctx<'_> {
    fn write(&self, name: &str, bytes: &[u8]) -> Result<FileRecord, String> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| format!("writing {}: {e}", path.display()))?;
        Ok(FileRecord {
            name: name.to_string(),
            sha256: sha_hex(bytes),
        })
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<FileRecord, String> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| e.to_string())?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn inst(&self) -> &ProblemInstance {
        self.inst.as_ref().expect("problem loaded before any stage")
    }

    fn forward(&mut self) -> StageResult {
        let inst = io::load_problem(&self.cfg.problem_path()).map_err(|e| format!("problem file: {e}"))?;
        let mode = match &self.cfg.forward.mode {
            ModeSpec::Joint => ForwardMode::Joint,
            ModeSpec::FixedGain {
                static_block: Some(b), ..
            } => ForwardMode::FixedGain(FeedbackGain::static_block(b, inst.dims().horizon)),
            ModeSpec::FixedGain { file: Some(f), .. } => {
                let path = self.cfg.resolve(f);
                let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                let k: FeedbackGain = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
                ForwardMode::FixedGain(k)
            }
            ModeSpec::FixedGain { .. } => return Err("fixed_gain needs static_block or file".into()),
        };
        let sol = solve_forward_with(&inst, &mode, &self.cfg.forward_options()).map_err(|e| e.to_string())?;
        let file = self.write_json("solution.json", &sol)?;
        let checks = if self.check {
            check_forward(&inst, &sol)?
        } else {
            Vec::new()
        };
        self.inst = Some(inst);
        self.truth = Some(sol);
        Ok((vec![file], checks))
    }

    fn demos(&mut self) -> StageResult {
        let inst = self.inst();
        let truth = self.truth.as_ref().expect("forward ran");
        let dc = self.cfg.demos;
        let set = generate_demoset(truth, &inst.system, &inst.noise, dc.count, dc.strategy, self.cfg.seed)
            .map_err(|e| e.to_string())?;
        let file = self.write_json("demos.json", &set)?;
        let checks = if self.check {
            check_demos(inst, &set)?
        } else {
            Vec::new()
        };
        self.demos = Some(set);
        Ok((vec![file], checks))
    }

    fn recover(&mut self) -> StageResult {
        let inst = self.inst();
        let set = self.demos.as_ref().expect("demos ran");
        let pol = recover_policy(set, &inst.system).map_err(|e| e.to_string())?;
        let file = self.write_json("policy.json", &pol)?;
        let checks = if self.check {
            check_recovery(inst, self.truth.as_ref().expect("forward ran"), &pol)?
        } else {
            Vec::new()
        };
        self.policy = Some(pol);
        Ok((vec![file], checks))
    }

    fn infer(&mut self) -> StageResult {
        let inst = self.inst();
        let truth = self.truth.as_ref().expect("forward ran");
        let pol = self.policy.as_ref().expect("recover ran");
        let kkt = build_kkt_program(pol, inst, &self.cfg.kkt_options()).map_err(|e| e.to_string())?;
        let witness = infer_theta(&kkt).map_err(|e| e.to_string())?;
        let residuals = witness.is_feasible().then(|| replay(&kkt, &witness));
        let active = if inst.theta_star.is_some() && !inst.unknown.is_empty() {
            active_components(inst, truth, 1e-6).map_err(|e| e.to_string())?
        } else {
            Vec::new()
        };
        let report = InferReport {
            witness,
            residuals,
            active_components: active,
        };
        let file = self.write_json("witness.json", &report)?;
        let checks = if self.check {
            check_infer(inst, &kkt, &report)?
        } else {
            Vec::new()
        };
        if !report.witness.is_feasible() {
            return Err(format!(
                "no KKT-compatible parameter (status {:?})",
                report.witness.status
            ));
        }
        self.kkt = Some(kkt);
        Ok((vec![file], checks))
    }

    fn classify(&mut self) -> StageResult {
        let inst = self.inst();
        let grid = self
            .cfg
            .classify
            .ok_or("the config has no classify grid (\"classify\": {\"window\": [..], \"nx\": .., \"ny\": ..})")?;
        let kkt = self.kkt.as_ref().expect("infer ran");
        let g = classify_grid(kkt, &inst.unknown, &grid).map_err(|e| e.to_string())?;
        log::info!(
            "grid: {} safe, {} unsafe, {} unknown",
            g.count(Verdict::GuaranteedSafe),
            g.count(Verdict::GuaranteedUnsafe),
            g.count(Verdict::Unknown)
        );
        let file = self.write("grid.csv", g.to_csv().map_err(|e| e.to_string())?.as_bytes())?;
        let checks = if self.check { check_grid(inst, &g)? } else { Vec::new() };
        Ok((vec![file], checks))
    }

    fn sweep(&mut self) -> StageResult {
        let inst = self.inst();
        let truth = self.truth.as_ref().expect("forward ran");
        let sc = &self.cfg.sweep;
        let opts = SweepOptions {
            epsilons: sc.epsilons.clone(),
            trials: sc.trials,
            demos: sc.demos.unwrap_or(self.cfg.demos.count),
            strategy: self.cfg.demos.strategy,
            seed: self.cfg.seed,
            infer: sc.infer,
            kkt: self.cfg.kkt_options(),
        };
        let rows = run_noise_sweep(inst, truth, &opts).map_err(|e| e.to_string())?;
        let file = self.write("sweep.csv", sweep_csv(&rows).map_err(|e| e.to_string())?.as_bytes())?;
        let checks = if self.check { check_sweep(&rows)? } else { Vec::new() };
        Ok((vec![file], checks))
    }
}

fn ensure(cond: bool, what: String, checks: &mut Vec<String>) -> Result<(), String> {
    if cond {
        checks.push(what);
        Ok(())
    } else {
        Err(format!("check failed: {what}"))
    }
}

/// Largest constraint value of stacked `p` at `theta`: known rows directly,
/// each unknown conjunct through its best disjunct. `margins` shifts each row.
fn worst_value(inst: &ProblemInstance, p: &Vector, theta: &[f64], margins: Option<(&[f64], &[f64], &[usize])>) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for (k, h) in inst.known.halfspaces.iter().enumerate() {
        let m = margins.map_or(0.0, |(mk, _, _)| mk[k]);
        worst = worst.max(h.a.dot(p) - h.b + m);
    }
    for (c, cj) in inst.unknown.conjuncts(&inst.dims()).iter().enumerate() {
        let best = match margins {
            Some((_, mu, assign)) => cj.disjuncts[assign[c]].value(p, theta) + mu[c],
            None => cj
                .disjuncts
                .iter()
                .map(|r| r.value(p, theta))
                .fold(f64::INFINITY, f64::min),
        };
        worst = worst.max(best);
    }
    worst
}

fn check_forward(inst: &ProblemInstance, sol: &ForwardSolution) -> Result<Vec<String>, String> {
    let mut checks = Vec::new();
    let ops = build_block_operators(&sol.model).map_err(|e| e.to_string())?;
    let r = verify_response(&sol.phi, &ops, 1e-8);
    ensure(
        r.pass,
        format!(
            "response achievable and causal (residual {:.1e})",
            r.controllability.max(r.observability).max(r.upper_block)
        ),
        &mut checks,
    )?;
    if let Some(star) = &inst.theta_star {
        let p = sol.stacked();
        let margins = (
            sol.margins_known.as_slice(),
            sol.margins_unknown.as_slice(),
            sol.assignment.as_slice(),
        );
        let worst = worst_value(inst, &p, star.as_slice(), Some(margins));
        ensure(
            worst <= 1e-6,
            format!("tightened nominal feasible at theta* (worst {worst:.1e})"),
            &mut checks,
        )?;
    }
    Ok(checks)
}

fn check_demos(inst: &ProblemInstance, set: &DemoSet) -> Result<Vec<String>, String> {
    let mut checks = Vec::new();
    // Realized trajectories stay feasible exactly only for linear dynamics.
    if let (System::Ltv(_), Some(star)) = (&inst.system, &inst.theta_star) {
        let mut worst = f64::NEG_INFINITY;
        for demo in &set.demos {
            let x = demo.x.as_ref().ok_or("demonstration without states")?;
            let p = Vector::from_iterator(x.len() + demo.u.len(), x.iter().chain(demo.u.iter()).copied());
            worst = worst.max(worst_value(inst, &p, star.as_slice(), None));
        }
        ensure(
            worst <= 1e-9,
            format!("every realized trajectory satisfies the true constraints (worst {worst:.1e})"),
            &mut checks,
        )?;
    }
    Ok(checks)
}

fn check_recovery(
    inst: &ProblemInstance,
    truth: &ForwardSolution,
    pol: &RecoveredPolicy,
) -> Result<Vec<String>, String> {
    let mut checks = Vec::new();
    ensure(
        !pol.diagnostics.rank_deficient,
        format!(
            "output differences have rank {} >= {}",
            pol.diagnostics.rank_y, pol.diagnostics.required_rank
        ),
        &mut checks,
    )?;
    let nt = inst.dims().n * inst.dims().horizon;
    let nominal = (pol.z.rows(0, nt) - truth.z.rows(0, nt))
        .amax()
        .max((&pol.v - &truth.v).amax());
    match inst.system {
        System::Ltv(_) => {
            let k = norm2(&truth.gain.matrix);
            let dk = norm2(&(&pol.gain.matrix - &truth.gain.matrix)) / (1.0 + k);
            ensure(
                dk <= 1e-6,
                format!("gain recovered (relative error {dk:.1e})"),
                &mut checks,
            )?;
            ensure(
                nominal <= 1e-6,
                format!("nominal recovered (error {nominal:.1e})"),
                &mut checks,
            )?;
        }
        System::Nonlinear(_) => {
            ensure(
                pol.nonlinear_residual <= 1e-6,
                format!("nonlinear fit residual {:.1e}", pol.nonlinear_residual),
                &mut checks,
            )?;
            ensure(
                nominal <= 1e-3,
                format!("nominal recovered (error {nominal:.1e})"),
                &mut checks,
            )?;
        }
    }
    Ok(checks)
}

fn check_infer(inst: &ProblemInstance, kkt: &KktProgram, rep: &InferReport) -> Result<Vec<String>, String> {
    let mut checks = Vec::new();
    ensure(rep.witness.is_feasible(), "KKT program feasible".into(), &mut checks)?;
    if let Some(r) = &rep.residuals {
        let w = &rep.witness;
        let lmax = w
            .lambda_known
            .iter()
            .chain(&w.lambda_unknown)
            .fold(0.0_f64, |a, &b| a.max(b));
        let ok = r.primal <= 1e-6
            && r.dual <= 1e-9
            && r.complementarity <= 1e-6 * (1.0 + lmax)
            && r.stationarity <= 1e-5 * (1.0 + lmax);
        ensure(ok, format!("witness replays the KKT conditions ({r:?})"), &mut checks)?;
    }
    if let Some(star) = &inst.theta_star {
        let fixed = kkt.with_theta_fixed(star.as_slice()).map_err(|e| e.to_string())?;
        let w = infer_theta(&fixed).map_err(|e| e.to_string())?;
        ensure(w.is_feasible(), "theta* is KKT-compatible".into(), &mut checks)?;
    }
    Ok(checks)
}

fn check_grid(inst: &ProblemInstance, g: &GridClassification) -> Result<Vec<String>, String> {
    let mut checks = Vec::new();
    let Some(star) = &inst.theta_star else {
        return Ok(checks);
    };
    let fam = &inst.unknown;
    let mut bad = Vec::new();
    for j in 0..g.grid.ny {
        for i in 0..g.grid.nx {
            let cell = g.grid.cell(i, j);
            match g.verdict(i, j) {
                Verdict::GuaranteedSafe => {
                    // Meeting the open interior: every face holds with room to spare.
                    let hit = fam.obstacles.iter().any(|o| {
                        let faces: Vec<_> = o
                            .faces
                            .iter()
                            .map(|f| (f.normal.clone(), f.offset.eval(star.as_slice()) + 1e-9))
                            .collect();
                        cell_meets_region(&cell, &faces)
                    });
                    if hit {
                        bad.push(format!("safe cell ({i},{j}) meets the true obstacle"));
                    }
                }
                Verdict::GuaranteedUnsafe => {
                    let corners = [
                        [cell[0], cell[2]],
                        [cell[1], cell[2]],
                        [cell[0], cell[3]],
                        [cell[1], cell[3]],
                    ];
                    let inside = fam
                        .obstacles
                        .iter()
                        .any(|o| corners.iter().all(|c| o.contains(c, star.as_slice())));
                    if !inside {
                        bad.push(format!("unsafe cell ({i},{j}) leaves the true obstacle"));
                    }
                }
                Verdict::Unknown => {}
            }
        }
    }
    if !bad.is_empty() {
        return Err(format!("check failed: {}", bad.join("; ")));
    }
    checks.push("safe and unsafe cells agree with theta*".into());
    Ok(checks)
}

fn check_sweep(rows: &[SweepRow]) -> Result<Vec<String>, String> {
    let mut checks = Vec::new();
    let broken: Vec<String> = rows
        .iter()
        .filter(|r| r.report.is_some_and(|rep| !(rep.holds_k && rep.holds_zv)))
        .map(|r| format!("eps {} trial {}", r.epsilon, r.trial))
        .collect();
    if !broken.is_empty() {
        return Err(format!("check failed: bounds violated at {}", broken.join(", ")));
    }
    checks.push(format!("gain and nominal bounds hold on all {} trials", rows.len()));
    Ok(checks)
}

/// Runs every stage up to `target`, writing artifacts and `manifest.json` to
/// `out_dir`. The manifest is written even when a stage fails.
pub fn run_experiment(cfg: &RunConfig, target: Stage, out_dir: &Path, check: bool) -> Result<Manifest, String> {
    std::fs::create_dir_all(out_dir).map_err(|e| format!("creating {}: {e}", out_dir.display()))?;
    let mut manifest = Manifest {
        preset: cfg.preset.map(|p| p.name().to_string()),
        target,
        seed: cfg.seed,
        config_hash: config_hash(cfg)?,
        versions: Versions {
            forge_core: forge_core::VERSION.to_string(),
            forge_cli: env!("CARGO_PKG_VERSION").to_string(),
            problem_spec_version: SPEC_VERSION,
        },
        check,
        stages: Vec::new(),
        failure: None,
    };
    let mut ctx = Ctx {
        cfg,
        out_dir,
        check,
        inst: None,
        truth: None,
        demos: None,
        policy: None,
        kkt: None,
    };
    for stage in target.path() {
        log::info!("stage {stage}");
        let result = match stage {
            Stage::Forward => ctx.forward(),
            Stage::Demos => ctx.demos(),
            Stage::Recover => ctx.recover(),
            Stage::Infer => ctx.infer(),
            Stage::Classify => ctx.classify(),
            Stage::Sweep => ctx.sweep(),
        };
        match result {
            Ok((outputs, checks)) => manifest.stages.push(StageRecord {
                stage,
                ok: true,
                outputs,
                checks,
            }),
            Err(message) => {
                manifest.stages.push(StageRecord {
                    stage,
                    ok: false,
                    outputs: Vec::new(),
                    checks: Vec::new(),
                });
                manifest.failure = Some(Failure { stage, message });
                break;
            }
        }
    }
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| e.to_string())?;
    bytes.push(b'\n');
    let path: PathBuf = out_dir.join("manifest.json");
    std::fs::write(&path, bytes).map_err(|e| format!("writing {}: {e}", path.display()))?;
    Ok(manifest)
}
