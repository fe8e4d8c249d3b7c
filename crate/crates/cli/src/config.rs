//! JSON run configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use fbinv::transform::invertibility_check;
use fbinv::{random_feedback, Domain, FeedbackMap, JetSource, SystemDef, TransformedSystem};
use serde::Deserialize;

use crate::exit::{CliResult, ResultExt};

/// Source grid used to seed preimage searches of pushed-forward systems.
const PUSHFORWARD_SEED_GRID: usize = 9;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub systems: BTreeMap<String, SystemSpec>,
    #[serde(default)]
    pub maps: BTreeMap<String, MapSpec>,
    #[serde(default = "default_grid")]
    pub grid: [usize; 3],
    #[serde(default = "default_tol")]
    pub tol_rel: f64,
    #[serde(default = "default_overlap")]
    pub min_overlap: f64,
    #[serde(default)]
    pub seed: u64,
    /// Threshold for the regularity flags reported by `invariants`.
    pub eps_reg: Option<f64>,
}

fn default_grid() -> [usize; 3] {
    [11, 11, 11]
}

fn default_tol() -> f64 {
    1e-4
}

fn default_overlap() -> f64 {
    0.3
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            systems: BTreeMap::new(),
            maps: BTreeMap::new(),
            grid: default_grid(),
            tol_rel: default_tol(),
            min_overlap: default_overlap(),
            seed: 0,
            eps_reg: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub x: [f64; 2],
    pub u: [f64; 2],
    pub u1: [f64; 2],
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapDomainSpec {
    pub x: [f64; 2],
    pub u: [f64; 2],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PushforwardSpec {
    pub system: String,
    pub map: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum SystemSpec {
    Expression { f: String, domain: DomainSpec },
    Pushforward { pushforward: PushforwardSpec },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MapSpec {
    Expression {
        #[serde(rename = "X")]
        x: String,
        #[serde(rename = "U")]
        u: String,
        #[serde(default)]
        domain: Option<MapDomainSpec>,
    },
    Random {
        random: u64,
        #[serde(default)]
        domain: Option<MapDomainSpec>,
    },
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .usage()?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))
            .usage()?;
        config.validate().usage()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.tol_rel > 0.0 && self.tol_rel.is_finite()) {
            bail!("tol_rel must be positive, got {}", self.tol_rel);
        }
        if !(0.0..=1.0).contains(&self.min_overlap) {
            bail!("min_overlap must lie in [0, 1], got {}", self.min_overlap);
        }
        if let Some(eps) = self.eps_reg {
            if !(eps > 0.0 && eps.is_finite()) {
                bail!("eps_reg must be positive, got {eps}");
            }
        }
        if self.grid.iter().any(|&n| n < 2) {
            bail!("grid counts must be at least 2, got {:?}", self.grid);
        }
        for (name, spec) in &self.systems {
            if let SystemSpec::Pushforward { pushforward } = spec {
                if !self.systems.contains_key(&pushforward.system) {
                    bail!("system `{name}` pushes forward unknown system `{}`", pushforward.system);
                }
                if !self.maps.contains_key(&pushforward.map) {
                    bail!("system `{name}` uses unknown map `{}`", pushforward.map);
                }
            }
        }
        Ok(())
    }

    fn system_spec(&self, name: &str) -> CliResult<&SystemSpec> {
        self.systems
            .get(name)
            .ok_or_else(|| anyhow!("unknown system `{name}`"))
            .usage()
    }

    /// The named map, on its own domain or on the `(x, u)` box of `domain`.
    pub fn map(&self, name: &str, domain: &Domain) -> CliResult<FeedbackMap> {
        let spec = self
            .maps
            .get(name)
            .ok_or_else(|| anyhow!("unknown map `{name}`"))
            .usage()?;
        let own = match spec {
            MapSpec::Expression { domain, .. } | MapSpec::Random { domain, .. } => *domain,
        };
        let boxed = own.map_or([domain.x, domain.u], |d| [d.x, d.u]);
        match spec {
            MapSpec::Expression { x, u, .. } => FeedbackMap::parse(name, x, u, boxed)
                .with_context(|| format!("map `{name}`"))
                .usage(),
            MapSpec::Random { random, .. } => random_feedback(*random, boxed)
                .with_context(|| format!("map `{name}`"))
                .eval(),
        }
    }

    pub fn system(&self, name: &str) -> CliResult<Arc<dyn JetSource>> {
        self.system_at_depth(name, 0)
    }

    fn system_at_depth(&self, name: &str, depth: usize) -> CliResult<Arc<dyn JetSource>> {
        if depth > self.systems.len() {
            return Err(anyhow!("system `{name}` is defined in terms of itself")).usage();
        }
        match self.system_spec(name)? {
            SystemSpec::Expression { f, domain } => {
                let domain = Domain::new(domain.x, domain.u, domain.u1)
                    .with_context(|| format!("system `{name}`"))
                    .usage()?;
                let sys = SystemDef::parse(name, f, domain)
                    .with_context(|| format!("system `{name}`"))
                    .usage()?;
                Ok(Arc::new(sys))
            }
            SystemSpec::Pushforward { pushforward } => {
                let source = self.system_at_depth(&pushforward.system, depth + 1)?;
                let map = self.map(&pushforward.map, &source.domain())?;
                require_invertible(&map)?;
                let g = TransformedSystem::new(source, map, PUSHFORWARD_SEED_GRID)
                    .with_context(|| format!("system `{name}`"))
                    .eval()?;
                Ok(Arc::new(NamedSource {
                    name: name.to_string(),
                    inner: g,
                }))
            }
        }
    }
}

pub fn require_invertible(map: &FeedbackMap) -> CliResult<()> {
    let report = invertibility_check(map, 11).eval()?;
    if let Some([x, u]) = report.violation {
        return Err(anyhow!(
            "map `{}` is not invertible: violation at (x, u) = ({x}, {u}); min |X'| = {}, min |U_u| = {}",
            map.name(),
            report.min_dx,
            report.min_uu
        ))
        .eval();
    }
    Ok(())
}

/// A pushed-forward system reported under its configured name.
struct NamedSource {
    name: String,
    inner: TransformedSystem,
}

impl JetSource for NamedSource {
    fn name(&self) -> &str {
        &self.name
    }

    fn domain(&self) -> Domain {
        self.inner.domain()
    }

    fn series_at(&self, p: [f64; 3], degree: usize) -> fbinv::Result<fbinv::TaylorValue> {
        self.inner.series_at(p, degree)
    }
}
