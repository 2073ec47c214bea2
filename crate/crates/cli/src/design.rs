use std::path::PathBuf;

use misspec_lab_core::design::{core_set_bound, default_max_iters, frank_wolfe_design, leverages};
use misspec_lab_core::hypothesis::{jl_dimension, jl_feature_matrix};
use misspec_lab_core::io::{read_features_file, write_features_file};
use misspec_lab_core::linalg::{numerical_rank, row_space_basis, RANK_TOL};
use misspec_lab_core::{stream_rng, FeatureMatrix};
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{in_open_unit, positive};
use crate::output::{num, Table};
use crate::plot::{self, Series};
use crate::{invalid, CliError, Result, RunContext};

pub const HELP: &str = "\
[design] keys (defaults):
  generator = \"gaussian\"   gaussian | identity | jl | file
  k = 500                   rows (gaussian, jl); identity uses k = d
  d = 10                    columns (gaussian, identity)
  epsilon = 0.5             inner-product bound for jl; d = ceil(8 ln k / epsilon^2)
  path                      feature CSV for generator = \"file\"
  target_g = 2r             stop once max leverage <= target_g, r = rank of the features
  max_support               floor(4 r lnln r + 16)
  max_iters                 max(10 r ceil(lnln r), 200)
Rank-deficient features (for example jl with k < d) are designed in
coordinates of their row space.
Logs are natural. Stream 0 of the seed draws the features.
Writes features.csv, design.csv (row_index, weight, leverage),
certificate.csv (g_value, support_size, iterations) and leverage.svg.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    #[default]
    Gaussian,
    Identity,
    Jl,
    File,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub generator: Generator,
    pub k: usize,
    pub d: usize,
    pub epsilon: f64,
    pub path: Option<PathBuf>,
    pub target_g: Option<f64>,
    pub max_support: Option<usize>,
    pub max_iters: Option<usize>,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            generator: Generator::Gaussian,
            k: 500,
            d: 10,
            epsilon: 0.5,
            path: None,
            target_g: None,
            max_support: None,
            max_iters: None,
        }
    }
}

impl DesignConfig {
    /// Validates and fills in the dimension-dependent defaults.
    pub fn resolved(mut self, ctx: &RunContext) -> Result<Self> {
        let working = match self.generator {
            Generator::Gaussian => {
                positive("design.d", self.d)?;
                if self.k < self.d {
                    return invalid(format!("design.k = {} must be at least design.d = {}", self.k, self.d));
                }
                self.d
            }
            Generator::Identity => {
                positive("design.d", self.d)?;
                self.k = self.d;
                self.d
            }
            Generator::Jl => {
                if self.k < 2 {
                    return invalid("design.k must be at least 2 for the jl generator");
                }
                in_open_unit("design.epsilon", self.epsilon)?;
                self.d = jl_dimension(self.k, self.epsilon);
                self.k.min(self.d)
            }
            Generator::File => {
                let Some(path) = &self.path else {
                    return invalid("design.path is required when generator = \"file\"");
                };
                let path = ctx.resolve(path);
                let (phi, _) = read_features_file(&path)
                    .map_err(|e| CliError::Validation(format!("design.path {}: {e}", path.display())))?;
                (self.k, self.d) = phi.shape();
                self.path = Some(path.canonicalize()?);
                numerical_rank(&phi, RANK_TOL)
            }
        };
        if working == 0 {
            return invalid("the feature matrix is zero");
        }
        let target = *self.target_g.get_or_insert(2.0 * working as f64);
        if !(target >= working as f64) {
            return invalid(format!("design.target_g = {target} is below the feature rank {working}, which no design reaches"));
        }
        let support = *self.max_support.get_or_insert(core_set_bound(working));
        if support < working {
            return invalid(format!("design.max_support = {support} is below the feature rank {working}"));
        }
        positive("design.max_iters", *self.max_iters.get_or_insert(default_max_iters(working)))?;
        Ok(self)
    }

    fn features(&self, seed: u64) -> Result<DMatrix<f64>> {
        let rows = match self.generator {
            Generator::Gaussian => {
                let mut rng = stream_rng(seed, 0);
                DMatrix::from_fn(self.k, self.d, |_, _| StandardNormal.sample(&mut rng))
            }
            Generator::Identity => DMatrix::identity(self.d, self.d),
            Generator::Jl => jl_feature_matrix(self.k, self.epsilon, &mut stream_rng(seed, 0))
                .map_err(CliError::runtime)?
                .rows()
                .clone(),
            Generator::File => {
                read_features_file(self.path.as_ref().expect("resolved")).map_err(CliError::runtime)?.0
            }
        };
        Ok(rows)
    }
}

pub fn run(cfg: &DesignConfig, ctx: &RunContext) -> Result<()> {
    let raw = cfg.features(ctx.seed)?;
    write_features_file(&ctx.path("features.csv"), &raw, None).map_err(CliError::runtime)?;
    // Leverages do not depend on the basis, so rank-deficient features are
    // handled in coordinates of their row space.
    let basis = row_space_basis(&raw, RANK_TOL);
    let rows = if basis.ncols() < raw.ncols() {
        eprintln!("note: features span {} of {} dimensions; designing in their span", basis.ncols(), raw.ncols());
        &raw * basis
    } else {
        raw
    };
    let phi = FeatureMatrix::new(rows).map_err(|e| CliError::Validation(format!("feature matrix: {e}")))?;
    let (rho, cert) = frank_wolfe_design(
        &phi,
        cfg.target_g.expect("resolved"),
        cfg.max_support.expect("resolved"),
        cfg.max_iters.expect("resolved"),
    )
    .map_err(CliError::runtime)?;
    let lev = leverages(&phi, &rho).map_err(CliError::runtime)?;

    let mut design = Table::create(&ctx.path("design.csv"), &["row_index", "weight", "leverage"])?;
    for i in 0..phi.k() {
        design.row([i.to_string(), num(rho.weight(i)), num(lev[i])])?;
    }
    design.finish()?;
    let mut certificate = Table::create(&ctx.path("certificate.csv"), &["g_value", "support_size", "iterations"])?;
    certificate.row([num(cert.g_value), cert.support_size.to_string(), cert.iterations.to_string()])?;
    certificate.finish()?;

    if ctx.plots {
        let d = phi.d() as f64;
        let k = phi.k() as f64;
        let series = vec![
            Series { name: "leverage".into(), points: lev.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect(), dashed: false },
            Series { name: "d".into(), points: vec![(0.0, d), (k - 1.0, d)], dashed: true },
            Series { name: "target".into(), points: vec![(0.0, cfg.target_g.unwrap()), (k - 1.0, cfg.target_g.unwrap())], dashed: true },
        ];
        plot::attempt("leverage.svg", plot::line_chart(&ctx.path("leverage.svg"), "Leverage profile", "row", "a^T G^-1 a", &series));
    }
    Ok(())
}
