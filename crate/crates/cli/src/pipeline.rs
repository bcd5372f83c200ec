//! The named pipelines.

use liouville::action_angle::{
    a_function, approximation_ladder, build_coordinates, coordinates_conjugation_defect,
    rotation_gradient_discrepancy, AFunction, ALCoordinates, Compact,
};
use liouville::c0::{bracket_report, nondegeneracy2_check, skew_defect_identity, HamiltonianTuple};
use liouville::conjugacy::{
    conjugacy_defect, generating_conjugacy, lipschitz_constants, rotation_vector,
};
use liouville::flow::LeafFlow;
use liouville::foliation::{
    build_foliation, c_map, foliation_bilipschitz_constant, generating_function, CMap, Foliation,
    FoliationSource, GeneratingFunction,
};
use liouville::models::HamiltonianModel;
use liouville::torus::{ClosednessTolerance, Grid};
use liouville::{Error, Result};

use crate::config::{FoliationConfig, Pipeline, PipelineConfig};
use crate::report::{columns, Check, Report, Table};

/// Injectivity gap below which two momenta count as having the same image.
const INJECTIVITY_TOL: f64 = 1e-9;

pub fn run(cfg: &PipelineConfig, pipeline: Pipeline) -> Result<Report> {
    let mut report = Report::default();
    if pipeline == Pipeline::C0check {
        c0check(cfg, &mut report)?;
        return Ok(report);
    }
    let ctx = Context::new(cfg)?;
    ctx.describe(&mut report);
    match pipeline {
        Pipeline::Rotation => {
            ctx.rotation(&mut report)?;
        }
        Pipeline::Conjugacy => {
            let rhos = ctx.rotation(&mut report)?;
            let stage = ctx.generating()?;
            ctx.conjugacy(&stage, &rhos, &mut report)?;
        }
        Pipeline::Coords => {
            let stage = ctx.generating()?;
            let (af, coords) = ctx.coordinates(&stage, &mut report)?;
            ctx.conjugation(&coords, &mut report)?;
            drop(af);
        }
        Pipeline::Approx => {
            let stage = ctx.generating()?;
            let (_, coords) = ctx.coordinates(&stage, &mut report)?;
            ctx.approx(&coords, &mut report)?;
        }
        Pipeline::Analyze => {
            let rhos = ctx.rotation(&mut report)?;
            let stage = ctx.generating()?;
            ctx.foliation_stats(&stage, &mut report)?;
            ctx.conjugacy(&stage, &rhos, &mut report)?;
            let (af, coords) = ctx.coordinates(&stage, &mut report)?;
            let disc = rotation_gradient_discrepancy(&af, &rhos)?;
            report.check(Check::at_most(
                "max_rotation_gradient_discrepancy",
                disc.iter().copied().fold(0.0, f64::max),
                cfg.tolerances.rotation_gradient,
            ));
            ctx.conjugation(&coords, &mut report)?;
        }
        Pipeline::C0check => unreachable!(),
    }
    Ok(report)
}

struct Context<'a> {
    cfg: &'a PipelineConfig,
    model: HamiltonianModel,
    fol: Foliation,
}

struct Generating {
    cmap: CMap,
    gen: GeneratingFunction,
}

fn max(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, f64::max)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl<'a> Context<'a> {
    fn new(cfg: &'a PipelineConfig) -> Result<Self> {
        let model = cfg
            .model
            .as_ref()
            .ok_or_else(|| Error::BadParameters("missing model".into()))?
            .build()?;
        let tol = ClosednessTolerance::relative(cfg.tolerances.closedness);
        let fol = match cfg.foliation.clone().unwrap_or(FoliationConfig::Oracle) {
            FoliationConfig::Oracle => {
                let leaf_grid = cfg
                    .leaf_grid
                    .clone()
                    .ok_or_else(|| Error::BadParameters("missing leaf_grid".into()))?;
                let res = cfg
                    .q_resolution
                    .ok_or_else(|| Error::BadParameters("missing q_resolution".into()))?;
                let q_grid = Grid::cubic(model.dim(), res)?;
                build_foliation(
                    FoliationSource::Oracle {
                        model: &model,
                        leaf_grid,
                        q_grid,
                    },
                    tol,
                )?
            }
            FoliationConfig::File { path } => build_foliation(FoliationSource::File(&path), tol)?,
        };
        if fol.dim() != model.dim() {
            return Err(Error::DimensionMismatch(
                "foliation and model dimensions differ".into(),
            ));
        }
        Ok(Context { cfg, model, fol })
    }

    fn describe(&self, report: &mut Report) {
        report.set("model", self.model.name());
        report.set("leaves", self.fol.len());
        report.set("q_shape", self.fol.q_grid().shape());
        report.set("leaf_grid", self.fol.leaf_grid());
        report.set(
            "max_closedness_defect",
            max(self.fol.closedness_defects().iter().copied()),
        );
    }

    fn leaf_flow(&self, leaf: usize) -> Result<LeafFlow> {
        LeafFlow::new(
            self.model.clone(),
            self.fol.leaf(leaf).clone(),
            self.cfg.integrator.clone(),
        )
    }

    fn rotation(&self, report: &mut Report) -> Result<Vec<Vec<f64>>> {
        let n = self.fol.dim();
        let rc = &self.cfg.rotation;
        let mut header = columns("a", n);
        header.extend(columns("rho", n));
        header.push("err".into());
        let mut table = Table::new("rotation.csv", header);
        let mut rhos = Vec::with_capacity(self.fol.len());
        let mut worst = 0.0f64;
        let mut oracle_err = 0.0f64;
        for i in 0..self.fol.len() {
            let est = rotation_vector(&self.leaf_flow(i)?, rc.horizon, rc.method)?;
            let a = self.fol.leaf_grid().point(i);
            if let Some(o) = self.model.oracle() {
                oracle_err = oracle_err.max(dist(&est.rho, &o.rotation(&a)?));
            }
            let mut row = a;
            row.extend(&est.rho);
            row.push(est.error);
            table.rows.push(row);
            worst = worst.max(est.error);
            rhos.push(est.rho);
        }
        report.tables.push(table);
        if self.model.oracle().is_some() {
            report.set("max_rotation_oracle_error", oracle_err);
        }
        report.check(Check::at_most(
            "max_rotation_error",
            worst,
            self.cfg.tolerances.rotation,
        ));
        Ok(rhos)
    }

    fn generating(&self) -> Result<Generating> {
        let cmap = c_map(&self.fol)?;
        let gen = generating_function(&self.fol, &cmap)?;
        Ok(Generating { cmap, gen })
    }

    fn foliation_stats(&self, stage: &Generating, report: &mut Report) -> Result<()> {
        report.set(
            "cmap_max_condition",
            max(stage.cmap.condition.iter().copied()),
        );
        report.set("cmap_injectivity", stage.cmap.injectivity);
        report.set("mixed_partial_defect", stage.gen.mixed_partial_defect);
        report.set(
            "foliation_bilipschitz",
            foliation_bilipschitz_constant(&self.fol)?.k,
        );
        if let Some(o) = self.model.oracle() {
            let err = (0..self.fol.len())
                .map(|i| dist(&stage.cmap.c[i], &o.c_map(&self.fol.leaf_grid().point(i))))
                .fold(0.0, f64::max);
            report.set("max_cmap_oracle_error", err);
        }
        Ok(())
    }

    fn sample_points(&self) -> Vec<Vec<f64>> {
        let n = self.fol.dim();
        let m = self.cfg.sampling.points_per_axis;
        (0..m.pow(n as u32))
            .map(|mut f| {
                let mut q = vec![0.0; n];
                for d in (0..n).rev() {
                    q[d] = (f % m) as f64 / m as f64;
                    f /= m;
                }
                q
            })
            .collect()
    }

    fn conjugacy(&self, stage: &Generating, rhos: &[Vec<f64>], report: &mut Report) -> Result<()> {
        let n = self.fol.dim();
        let mut header = columns("a", n);
        header.extend(["defect", "lip", "lip_inv"].map(String::from));
        let mut table = Table::new("conjugacy.csv", header);
        let points = self.sample_points();
        let times = &self.cfg.sampling.times;
        let (mut worst, mut lip, mut lip_inv, mut oracle_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for i in 0..self.fol.len() {
            let g = generating_conjugacy(&stage.gen, &stage.cmap, i)?;
            let defect = conjugacy_defect(&g, &self.leaf_flow(i)?, &rhos[i], times, &points)?;
            let l = lipschitz_constants(&g);
            let a = self.fol.leaf_grid().point(i);
            if let Some(o) = self.model.oracle() {
                for q in self.fol.q_grid().nodes() {
                    oracle_err = oracle_err.max(dist(&g.apply(&q), &o.conjugacy(&a, &q)));
                }
            }
            let mut row = a;
            row.extend([defect, l.forward, l.inverse]);
            table.rows.push(row);
            worst = worst.max(defect);
            lip = lip.max(l.forward);
            lip_inv = lip_inv.max(l.inverse);
        }
        report.tables.push(table);
        report.set("max_conjugacy_lipschitz", lip);
        report.set("max_conjugacy_inverse_lipschitz", lip_inv);
        if self.model.oracle().is_some() {
            report.set("max_conjugacy_oracle_error", oracle_err);
        }
        report.check(Check::at_most(
            "max_conjugacy_defect",
            worst,
            self.cfg.tolerances.conjugacy,
        ));
        Ok(())
    }

    fn coordinates(
        &self,
        stage: &Generating,
        report: &mut Report,
    ) -> Result<(AFunction, ALCoordinates)> {
        let af = a_function(
            &self.fol,
            &stage.cmap,
            &self.model,
            self.cfg.tolerances.energy,
        )?;
        let n = self.fol.dim();
        let mut header = columns("c", n);
        header.push("A".into());
        header.extend(columns("dA", n));
        let mut table = Table::new("a_function.csv", header);
        for i in 0..af.c.len() {
            let mut row = af.c[i].clone();
            row.push(af.values[i]);
            row.extend(&af.gradient[i]);
            table.rows.push(row);
        }
        report.tables.push(table);
        report.set(
            "max_energy_variation",
            max(af.energy_variation.iter().copied()),
        );
        report.set(
            "a_hessian_positive_definite",
            af.hessian_positive_definite(),
        );
        if let Some(o) = self.model.oracle() {
            let err = (0..af.c.len())
                .map(|i| o.a_function(&af.c[i]).map(|v| (v - af.values[i]).abs()))
                .collect::<Result<Vec<_>>>()?;
            report.set("max_a_function_oracle_error", max(err));
        }
        let coords = build_coordinates(&stage.gen, &stage.cmap, &af)?;
        report.set("coordinates_valid_lo", &coords.valid_lo);
        report.set("coordinates_valid_hi", &coords.valid_hi);
        Ok((af, coords))
    }

    fn conjugation(&self, coords: &ALCoordinates, report: &mut Report) -> Result<()> {
        let s = &self.cfg.sampling;
        let compact = Compact {
            c_lo: coords.valid_lo.clone(),
            c_hi: coords.valid_hi.clone(),
            c_count: 1,
            x_count: 1,
        };
        let samples = compact.random_samples(s.coordinate_samples, s.seed);
        let rep = coordinates_conjugation_defect(
            coords,
            &self.model,
            &s.times,
            &samples,
            &self.cfg.integrator,
        )?;
        report.set("conjugation_defect_per_time", &rep.per_time);
        report.check(Check::at_most(
            "max_conjugation_defect",
            rep.max_defect,
            self.cfg.tolerances.conjugation,
        ));
        Ok(())
    }

    fn approx(&self, coords: &ALCoordinates, report: &mut Report) -> Result<()> {
        let ac = self
            .cfg
            .approx
            .as_ref()
            .ok_or_else(|| Error::BadParameters("missing approx".into()))?;
        let sympl = ac
            .compact
            .random_samples(ac.symplecticity_samples, self.cfg.sampling.seed);
        let ladder = approximation_ladder(coords, &self.model, &ac.eps, &ac.compact, &sympl)?;
        let mut table = Table::new(
            "ladder.csv",
            ["eps", "c0_err", "c1_err"].map(String::from).to_vec(),
        );
        for l in &ladder {
            table.rows.push(vec![l.eps, l.c0_error, l.c1_error]);
        }
        report.tables.push(table);
        report.set("ladder", &ladder);
        report.check(Check::at_most(
            "max_symplecticity_defect",
            max(ladder.iter().map(|l| l.sympl_defect)),
            self.cfg.tolerances.symplecticity,
        ));
        Ok(())
    }
}

fn c0check(cfg: &PipelineConfig, report: &mut Report) -> Result<()> {
    let tc = cfg
        .tuple
        .as_ref()
        .ok_or_else(|| Error::BadParameters("missing tuple".into()))?;
    let tuple = HamiltonianTuple::from_expressions(&tc.expressions, tc.index)?;
    let n = tuple.dim();
    let br = bracket_report(&tuple, &tc.window, tc.q_resolution, tc.p_resolution)?;
    let mut table = Table::new("brackets.csv", ["j", "k", "sup"].map(String::from).to_vec());
    for (j, row) in br.brackets.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            table.rows.push(vec![(j + 1) as f64, (k + 1) as f64, *v]);
        }
    }
    report.tables.push(table);
    report.set("index", tc.index);
    report.set("bracket_sup", br.bracket_sup);
    report.set("bracket_report", &br);
    let q_samples: Vec<Vec<f64>> = Grid::cubic(n, 4)?.nodes().collect();
    let nd = nondegeneracy2_check(
        &tuple,
        &q_samples,
        &tc.window,
        tc.p_resolution,
        INJECTIVITY_TOL,
    )?;
    report.set("nondegeneracy2", &nd);
    if let Some(leaf) = &tc.leaf {
        let skew = skew_defect_identity(&tuple, &leaf.a, tc.q_resolution, &leaf.seed, &tc.window)?;
        report.set("leaf_p_norm", skew.p_norm);
        report.set("leaf_closedness_defect", skew.closedness_defect);
        report.check(Check::at_most(
            "skew_residual",
            skew.residual,
            cfg.tolerances.skew_residual,
        ));
    }
    Ok(())
}
