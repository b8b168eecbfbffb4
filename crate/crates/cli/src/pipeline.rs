use crate::artifacts::{read_json, Manifest, StageTiming, Writer};
use crate::config::{ConfigError, RunConfig};
use bcq_core::binding::{build_critical_partition, AnchorPolicy, BindingConfig, CriticalPartition, DeltaTable};
use bcq_core::inducing::{build_induced_map, InducedSystem, InducingConfig};
use bcq_core::ldp::{
    covering_estimate, deviation_probability, legendre_check, rate_function, CoveringEstimate, DeviationEstimate, LegendreReport,
    Method, RateCurve, MAX_LAP_DEPTH,
};
use bcq_core::serde_ext::ext_f64;
use bcq_core::thermo::{
    alpha_grid, build_family, spectrum_property_check, variational_curves, AcipEstimate, Family, FamilyConfig, InducedFamilyData,
    Objective, SpectrumCheck, SpectrumCurve,
};
use bcq_core::{Observable, QuadraticMap};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

pub const PARTITION_JSON: &str = "partition.json";
pub const INDUCED_JSON: &str = "induced_system.json";
pub const SPECTRUM_JSON: &str = "spectrum.json";
pub const RATE_JSON: &str = "rate.json";
pub const LEGENDRE_JSON: &str = "legendre.json";
pub const DEVIATION_JSON: &str = "deviation.json";

/// Tolerances of the spectrum shape check.
pub const MONOTONE_TOLERANCE: f64 = 0.05;
pub const MAX_JUMP: f64 = 0.1;
pub const LEGENDRE_THRESHOLD: f64 = 0.02;
const IS_BINS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Partition,
    Induce,
    Spectrum,
    Ldp,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Partition => "partition",
            Stage::Induce => "induce",
            Stage::Spectrum => "spectrum",
            Stage::Ldp => "ldp",
        }
    }
}

pub fn parse_stages(s: &str) -> Result<Vec<Stage>, ConfigError> {
    let mut v = Vec::new();
    for t in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        v.push(match t {
            "partition" => Stage::Partition,
            "induce" => Stage::Induce,
            "spectrum" => Stage::Spectrum,
            "ldp" => Stage::Ldp,
            _ => return Err(ConfigError(format!("unknown stage '{t}'"))),
        });
    }
    if v.is_empty() {
        return Err(ConfigError("no stages given".into()));
    }
    v.sort();
    v.dedup();
    Ok(v)
}

pub enum Failure {
    /// Configuration or dependency problem (exit 2).
    Config(String),
    /// A stage ran and failed (exit 1).
    Stage { stage: Stage, message: String },
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Failure {
        Failure::Config(e.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaRow {
    pub p: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailRow {
    pub n: usize,
    pub tail: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub observable: String,
    pub alpha: f64,
    pub b: f64,
    pub witness_h: f64,
    pub witness_lambda: f64,
    pub witness_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateRow {
    pub observable: String,
    pub alpha: f64,
    pub f: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LegendreCsvRow {
    pub observable: String,
    pub n: usize,
    pub p_n: f64,
    pub family_max: f64,
    pub delta: f64,
    pub delta_raw: f64,
    pub richardson: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub curve: SpectrumCurve,
    pub check: SpectrumCheck,
    pub acip_mean: f64,
    /// B at the acip mean.
    #[serde(with = "ext_f64")]
    pub b_at_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilySummary {
    pub members: usize,
    pub rejected: usize,
    pub periodic_orbits: usize,
    pub acip: AcipEstimate,
    /// max F over members (Ruelle: ≤ 0 up to slack).
    pub max_free_energy: f64,
    /// max h over members (≤ log 2 up to slack).
    pub max_entropy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumArtifact {
    pub family: FamilySummary,
    pub spectra: Vec<SpectrumEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviationArtifact {
    pub plain: DeviationEstimate,
    pub importance: DeviationEstimate,
    pub covering: CoveringEstimate,
    /// max F_φ on the window from the rate curve.
    #[serde(with = "ext_f64")]
    pub rate_max_on_window: f64,
}

struct Ctx<'c> {
    cfg: &'c RunConfig,
    map: QuadraticMap,
    observables: Vec<Observable>,
    partition: Option<CriticalPartition>,
    system: Option<InducedSystem>,
    family: Option<Family>,
    rates: BTreeMap<String, RateCurve>,
}

fn binding_config(cfg: &RunConfig) -> BindingConfig {
    BindingConfig {
        epsilon: cfg.epsilon,
        big_n: cfg.big_n,
        p_max: cfg.p_max,
        anchor_horizon: cfg.horizon_anchor,
        precision_bits: cfg.precision_bits,
        anchor_policy: AnchorPolicy::MaximizeBase,
        ..Default::default()
    }
}

fn inducing_config(cfg: &RunConfig) -> InducingConfig {
    InducingConfig { t_max: cfg.horizon_induce, min_explicit_mass: cfg.explicit_threshold, ..Default::default() }
}

/// Loads an upstream artifact, checking its hash and the config fields it
/// depends on.
fn load_upstream<T: serde::de::DeserializeOwned>(
    cfg: &RunConfig,
    manifest: &Manifest,
    file: &str,
    same: impl Fn(&RunConfig, &RunConfig) -> bool,
) -> Result<T, Failure> {
    let path = cfg.path(file);
    if !path.exists() {
        return Err(Failure::Config(format!("missing upstream artifact {file}; run its stage first")));
    }
    if manifest.files.contains_key(file) && manifest.verify(cfg.out_dir()).contains(&file.to_string()) {
        return Err(Failure::Config(format!("{file} does not match its manifest hash")));
    }
    let art = read_json::<T>(&path).map_err(Failure::Config)?;
    if !same(&art.config, cfg) {
        return Err(Failure::Config(format!("{file} was produced with a different configuration")));
    }
    Ok(art.data)
}

fn same_partition(a: &RunConfig, b: &RunConfig) -> bool {
    a.a == b.a && a.epsilon == b.epsilon && a.big_n == b.big_n && a.p_max == b.p_max && a.horizon_anchor == b.horizon_anchor
}

fn same_induced(a: &RunConfig, b: &RunConfig) -> bool {
    same_partition(a, b) && a.horizon_induce == b.horizon_induce && a.explicit_threshold == b.explicit_threshold
}

fn io_fail(stage: Stage) -> impl Fn(std::io::Error) -> Failure {
    move |e| Failure::Stage { stage, message: e.to_string() }
}

fn core_fail(stage: Stage) -> impl Fn(bcq_core::Error) -> Failure {
    move |e| Failure::Stage { stage, message: e.to_string() }
}

impl Ctx<'_> {
    fn family(&mut self, stage: Stage) -> Result<&Family, Failure> {
        if self.family.is_none() {
            let system = self.system.as_ref().expect("dependency checked");
            let data = InducedFamilyData::sample(
                &self.map,
                &system.geometry,
                &self.observables,
                self.cfg.family_samples,
                self.cfg.horizon_induce,
            );
            let fc = FamilyConfig { seed: self.cfg.seed, ..Default::default() };
            self.family = Some(build_family(&self.map, vec![data], &fc).map_err(core_fail(stage))?);
        }
        Ok(self.family.as_ref().unwrap())
    }

    fn grid(&self, family: &Family, j: usize) -> Vec<f64> {
        let (c, d) = family.mean_range(j);
        alpha_grid(c, d, self.cfg.alpha_points)
    }
}

fn summarize(family: &Family) -> FamilySummary {
    FamilySummary {
        members: family.members.len(),
        rejected: family.rejected,
        periodic_orbits: family.periodic.len(),
        acip: family.acip.clone(),
        max_free_energy: family.members.iter().map(|m| m.stats.free_energy).fold(f64::NEG_INFINITY, f64::max),
        max_entropy: family.members.iter().map(|m| m.stats.h).fold(f64::NEG_INFINITY, f64::max),
    }
}

fn run_stage(ctx: &mut Ctx, stage: Stage, w: &mut Writer) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let io = io_fail(stage);
    match stage {
        Stage::Partition => {
            let part = build_critical_partition(&ctx.map, &binding_config(cfg)).map_err(core_fail(stage))?;
            let table: &DeltaTable = &part.table;
            w.json("delta_table.json", table).map_err(&io)?;
            let rows: Vec<DeltaRow> = table.rows().into_iter().map(|(p, delta)| DeltaRow { p, delta }).collect();
            w.csv("delta_table.csv", &rows).map_err(&io)?;
            w.json(PARTITION_JSON, &part).map_err(&io)?;
            eprintln!("partition: δ = {:.6}, Λ⁺ = [{:.6}, {:.6}], {} cells", part.delta, part.lambda_plus.0, part.lambda_plus.1, part.cells.len());
            ctx.partition = Some(part);
        }
        Stage::Induce => {
            let part = ctx.partition.as_ref().expect("dependency checked");
            let system = build_induced_map(&ctx.map, part, &inducing_config(cfg)).map_err(core_fail(stage))?;
            w.json(INDUCED_JSON, &system).map_err(&io)?;
            let rows: Vec<TailRow> = system.tail.iter().enumerate().map(|(n, &tail)| TailRow { n, tail }).collect();
            w.csv("tail.csv", &rows).map_err(&io)?;
            eprintln!(
                "induce: {} branches, coverage {:.5} (explicit {:.5})",
                system.branches.len(),
                system.coverage(),
                system.explicit_coverage()
            );
            ctx.system = Some(system);
        }
        Stage::Spectrum => {
            let observables = ctx.observables.clone();
            ctx.family(stage)?;
            let family = ctx.family.as_ref().unwrap();
            let mut entries = Vec::new();
            let mut rows = Vec::new();
            let mut rates = BTreeMap::new();
            for o in &observables {
                let name = o.name();
                let j = family.observable_index(&name).expect("family built from config observables");
                let grid = ctx.grid(family, j);
                let mut curves = variational_curves(family, &name, &grid, &[Objective::DimensionRatio, Objective::FreeEnergy])
                    .map_err(core_fail(stage))?;
                let rate = curves.pop().unwrap();
                let curve = curves.pop().unwrap();
                let mean = family.acip.means[&name];
                let b_at_mean = family.best_at(j, mean, Objective::DimensionRatio).map_or(f64::NAN, |m| m.stats.ratio().clamp(0.0, 1.0));
                let check = spectrum_property_check(&curve, mean, MONOTONE_TOLERANCE, MAX_JUMP);
                for p in &curve.points {
                    let (h, l, m) = p.witness.as_ref().map_or((f64::NAN, f64::NAN, f64::NAN), |w| {
                        (w.stats.h, w.stats.lambda, w.stats.mean(&name).unwrap_or(f64::NAN))
                    });
                    rows.push(SpectrumRow { observable: name.clone(), alpha: p.alpha, b: p.value, witness_h: h, witness_lambda: l, witness_mean: m });
                }
                eprintln!("spectrum {name}: B(μ(φ)) = {b_at_mean:.4} at μ(φ) = {mean:.3e}, [c, d] = [{:.4}, {:.4}]", curve.c_phi, curve.d_phi);
                rates.insert(name, RateCurve::from(rate));
                entries.push(SpectrumEntry { curve, check, acip_mean: mean, b_at_mean });
            }
            w.csv("spectrum.csv", &rows).map_err(&io)?;
            w.json(SPECTRUM_JSON, &SpectrumArtifact { family: summarize(family), spectra: entries }).map_err(&io)?;
            ctx.rates = rates;
        }
        Stage::Ldp => {
            if cfg.horizon_ldp > MAX_LAP_DEPTH {
                return Err(Failure::Stage { stage, message: format!("horizon_ldp > {MAX_LAP_DEPTH} exceeds the quadrature budget") });
            }
            let observables = ctx.observables.clone();
            ctx.family(stage)?;
            let family = ctx.family.as_ref().unwrap();
            let mut curves = Vec::new();
            let mut rows = Vec::new();
            for o in &observables {
                let name = o.name();
                let curve = match ctx.rates.get(&name) {
                    Some(c) => c.clone(),
                    None => {
                        let j = family.observable_index(&name).unwrap();
                        rate_function(family, &name, &ctx.grid(family, j)).map_err(core_fail(stage))?
                    }
                };
                rows.extend(curve.points.iter().map(|p| RateRow { observable: name.clone(), alpha: p.alpha, f: p.value }));
                curves.push(curve);
            }
            w.csv("rate.csv", &rows).map_err(&io)?;

            let mut phis = observables.clone();
            phis.push(Observable::Constant(0.0));
            let report: LegendreReport =
                legendre_check(&ctx.map, &phis, cfg.horizon_ldp, family, LEGENDRE_THRESHOLD, 4).map_err(core_fail(stage))?;
            let rows: Vec<LegendreCsvRow> = report
                .rows
                .iter()
                .map(|r| LegendreCsvRow {
                    observable: r.observable.clone(),
                    n: r.n,
                    p_n: r.p_n,
                    family_max: r.family_max,
                    delta: r.delta,
                    delta_raw: r.delta_raw,
                    richardson: r.richardson,
                })
                .collect();
            w.csv("legendre.csv", &rows).map_err(&io)?;
            for r in &report.rows {
                eprintln!("legendre {}: Δ = {:.4} ({})", r.observable, r.delta, if r.pass { "pass" } else { "fail" });
            }

            let phi = &observables[0];
            let n = cfg.ldp_deviation_n;
            let window = cfg.ldp_window;
            let dev = |method| deviation_probability(&ctx.map, phi, window, n, cfg.ldp_samples, cfg.seed, method).map_err(core_fail(stage));
            let plain = dev(Method::Plain)?;
            let importance = dev(Method::ImportanceSampled { s: cfg.ldp_tilt, bins: IS_BINS })?;
            let covering = covering_estimate(&ctx.map, phi, window, n.min(MAX_LAP_DEPTH)).map_err(core_fail(stage))?;
            let rate_max_on_window = curves[0].max_on(window.0, window.1).unwrap_or(f64::NAN);
            w.json(RATE_JSON, &curves).map_err(&io)?;
            w.json(LEGENDRE_JSON, &report).map_err(&io)?;
            w.json(DEVIATION_JSON, &DeviationArtifact { plain, importance, covering, rate_max_on_window }).map_err(&io)?;
        }
    }
    Ok(())
}

pub fn run_pipeline(cfg: &RunConfig, stages: &[Stage]) -> Result<(), Failure> {
    let observables = cfg.parsed_observables()?;
    let map = QuadraticMap::new(cfg.a).map_err(|e| Failure::Config(e.to_string()))?;
    let dir = cfg.out_dir();
    std::fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
    let mut manifest = Manifest::load(dir).unwrap_or_else(|| Manifest::new(cfg));
    let stale = manifest.verify(dir);
    if !stale.is_empty() {
        eprintln!("warning: files changed since they were recorded: {}", stale.join(", "));
    }

    let has = |s: Stage| stages.contains(&s);
    let mut ctx = Ctx { cfg, map, observables, partition: None, system: None, family: None, rates: BTreeMap::new() };
    if has(Stage::Induce) && !has(Stage::Partition) {
        ctx.partition = Some(load_upstream(cfg, &manifest, PARTITION_JSON, same_partition)?);
    }
    if (has(Stage::Spectrum) || has(Stage::Ldp)) && !has(Stage::Induce) {
        ctx.system = Some(load_upstream(cfg, &manifest, INDUCED_JSON, same_induced)?);
    }

    manifest.config = cfg.clone();
    manifest.config_sha256 = crate::artifacts::config_hash(cfg);
    manifest.seed = cfg.seed;
    for &stage in stages {
        let t = Instant::now();
        let mut w = Writer { dir, config: cfg, manifest: &mut manifest, stage: stage.name().to_string() };
        let result = run_stage(&mut ctx, stage, &mut w);
        manifest.stages.retain(|s| s.stage != stage.name());
        manifest.stages.push(StageTiming { stage: stage.name().into(), wall_seconds: t.elapsed().as_secs_f64() });
        if let Err(e) = result {
            let _ = manifest.save(dir);
            return Err(e);
        }
    }
    manifest.save(dir).map_err(|e| Failure::Stage { stage: *stages.last().unwrap(), message: e.to_string() })
}
