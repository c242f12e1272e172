use std::fmt::Write as _;

use super::{Config, Dataset, Trainer};
use crate::error::Result;
use crate::frontend::FrontendVariant;
use crate::losses::{LossReport, MetricReport};
use crate::scalar::Scalar;

/// A named modification of the baseline configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: Config,
}

/// Baseline plus one row per ablation switch, all with the baseline's seed.
pub fn default_variants(base: &Config) -> Vec<Variant> {
    let v = |name: &str, config: Config| Variant { name: name.to_string(), config };
    vec![
        v("baseline", base.clone()),
        v("single_branch", Config { single_branch: true, ..base.clone() }),
        v("random_mask_init", Config { random_mask_init: true, ..base.clone() }),
        v("disable_hierarchy", Config { disable_hierarchy: true, ..base.clone() }),
        v("linear_frontend", Config { frontend_variant: FrontendVariant::Linear, ..base.clone() }),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow<S: Scalar = f64> {
    pub variant: String,
    pub metrics: MetricReport<S>,
    /// Dataset-mean teacher-forced losses after training.
    pub losses: LossReport<S>,
}

/// Trains and evaluates every variant on `dataset`.
pub fn run_ablation_suite<S: Scalar>(variants: &[Variant], dataset: &Dataset<S>) -> Result<Vec<AblationRow<S>>> {
    variants
        .iter()
        .map(|v| {
            let mut t = Trainer::new(&v.config, dataset)?;
            t.train()?;
            Ok(AblationRow { variant: v.name.clone(), metrics: t.evaluate()?, losses: t.dataset_losses()? })
        })
        .collect()
}

pub fn ablation_csv<S: Scalar>(rows: &[AblationRow<S>]) -> String {
    let mut out = String::from("variant,lip_vertex_error,fdd,l_rec,l_total\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e}",
            r.variant,
            r.metrics.lip_vertex_error.to_f64_exact(),
            r.metrics.fdd.to_f64_exact(),
            r.losses.l_rec.to_f64_exact(),
            r.losses.l_total.to_f64_exact()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::tests::{tiny_config, tiny_data};

    #[test]
    fn one_row_per_variant_and_baseline_matches_standalone() {
        let base = Config { epochs: 1, ..tiny_config() };
        let data = tiny_data();
        let rows = run_ablation_suite(&default_variants(&base), &data).unwrap();
        assert_eq!(rows.len(), 5);
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().nth(1).unwrap().starts_with("baseline,"));

        let mut t = Trainer::new(&base, &data).unwrap();
        t.train().unwrap();
        assert_eq!(rows[0].metrics, t.evaluate().unwrap());
    }
}
