use serde::{Deserialize, Serialize};

use super::{Design, Factor, FitError, Result};
use crate::panel::{Panel, PanelObservation, Variable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Log,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariate {
    pub variable: Variable,
    pub transform: Transform,
}

impl Covariate {
    pub fn log(variable: Variable) -> Self {
        Covariate {
            variable,
            transform: Transform::Log,
        }
    }

    pub fn identity(variable: Variable) -> Self {
        Covariate {
            variable,
            transform: Transform::Identity,
        }
    }

    pub fn column_name(&self) -> String {
        match self.transform {
            Transform::Identity => self.variable.name().to_string(),
            Transform::Log => format!("ln_{}", self.variable.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedEffect {
    Product,
    ComparisonGroup,
    Date,
}

impl FixedEffect {
    pub fn name(&self) -> &'static str {
        match self {
            FixedEffect::Product => "product",
            FixedEffect::ComparisonGroup => "comparison_group",
            FixedEffect::Date => "date",
        }
    }

    fn label(&self, obs: &PanelObservation) -> Option<String> {
        match self {
            FixedEffect::Product => Some(obs.product_id.clone()),
            FixedEffect::ComparisonGroup => obs.comparison_group_id.clone(),
            FixedEffect::Date => Some(obs.date.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub outcome: Variable,
    /// Binary attribute whose coefficient is the quantity of interest.
    pub protected: Variable,
    pub covariates: Vec<Covariate>,
    pub fixed_effects: Vec<FixedEffect>,
    /// Defaults to the fixed-effect dimensions.
    #[serde(default)]
    pub clusters: Option<Vec<FixedEffect>>,
}

impl ModelSpec {
    /// Visibility on the platform indicator and the unprotected attributes,
    /// with `unit` and date fixed effects.
    pub fn coo(unit: FixedEffect) -> Self {
        ModelSpec {
            outcome: Variable::OrganicVisibility,
            protected: Variable::IsAmazon,
            covariates: vec![
                Covariate::log(Variable::SalesRank),
                Covariate::log(Variable::Price),
                Covariate::log(Variable::CountReviews),
                Covariate::identity(Variable::RatingProduct),
                Covariate::identity(Variable::RatingSeller),
                Covariate::identity(Variable::IsPrime),
            ],
            fixed_effects: vec![unit, FixedEffect::Date],
            clusters: None,
        }
    }

    /// Sales rank on the platform indicator, organic and sponsored
    /// visibility and price, with product and date fixed effects.
    pub fn ob() -> Self {
        ModelSpec {
            outcome: Variable::SalesRank,
            protected: Variable::IsAmazon,
            covariates: vec![
                Covariate::log(Variable::OrganicVisibility),
                Covariate::log(Variable::SponsoredVisibility),
                Covariate::log(Variable::Price),
            ],
            fixed_effects: vec![FixedEffect::Product, FixedEffect::Date],
            clusters: None,
        }
    }

    pub fn without(mut self, variable: &Variable) -> Self {
        self.covariates.retain(|c| &c.variable != variable);
        self
    }

    pub fn with_covariate(mut self, covariate: Covariate) -> Self {
        self.covariates.push(covariate);
        self
    }

    pub fn protected_name(&self) -> &str {
        self.protected.name()
    }

    pub fn column_names(&self) -> Vec<String> {
        std::iter::once(self.protected.name().to_string())
            .chain(self.covariates.iter().map(Covariate::column_name))
            .collect()
    }

    pub fn cluster_dims(&self) -> &[FixedEffect] {
        self.clusters.as_deref().unwrap_or(&self.fixed_effects)
    }

    /// Builds the numeric design. Rows are taken in (product, date) order
    /// whatever the order of the panel.
    pub fn design(&self, panel: &Panel) -> Result<Design> {
        if self.fixed_effects.len() > 2 {
            return Err(FitError::Spec("at most two fixed-effect dimensions".into()));
        }
        let mut order: Vec<usize> = (0..panel.rows.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (&panel.rows[a], &panel.rows[b]);
            (&ra.product_id, ra.date).cmp(&(&rb.product_id, rb.date))
        });
        let rows: Vec<&PanelObservation> = order.iter().map(|&i| &panel.rows[i]).collect();

        let value = |var: &Variable, row: usize, obs: &PanelObservation| {
            var.value(obs).ok_or_else(|| FitError::Data {
                row,
                message: format!("{} ({} {}) has no value for {}", row, obs.product_id, obs.date, var),
            })
        };

        let mut y = Vec::with_capacity(rows.len());
        for (i, obs) in rows.iter().enumerate() {
            y.push(value(&self.outcome, i, obs)?);
        }

        let mut columns = Vec::with_capacity(self.covariates.len() + 1);
        let mut protected = Vec::with_capacity(rows.len());
        for (i, obs) in rows.iter().enumerate() {
            let v = value(&self.protected, i, obs)?;
            if v != 0.0 && v != 1.0 {
                return Err(FitError::Data {
                    row: i,
                    message: format!("protected attribute {} must be 0 or 1, got {v}", self.protected),
                });
            }
            protected.push(v);
        }
        columns.push(protected);
        for c in &self.covariates {
            let mut col = Vec::with_capacity(rows.len());
            for (i, obs) in rows.iter().enumerate() {
                let v = value(&c.variable, i, obs)?;
                col.push(match c.transform {
                    Transform::Identity => v,
                    Transform::Log if v > 0.0 => v.ln(),
                    Transform::Log => {
                        return Err(FitError::Data {
                            row: i,
                            message: format!(
                                "{} = {v} cannot be logged ({} {})",
                                c.variable, obs.product_id, obs.date
                            ),
                        })
                    }
                });
            }
            columns.push(col);
        }

        let factor = |fe: &FixedEffect| -> Result<Factor> {
            let mut labels = Vec::with_capacity(rows.len());
            for (i, obs) in rows.iter().enumerate() {
                labels.push(fe.label(obs).ok_or_else(|| FitError::Data {
                    row: i,
                    message: format!("{} ({}) has no {}", obs.product_id, obs.date, fe.name()),
                })?);
            }
            Ok(Factor::from_labels(fe.name(), labels.iter().map(String::as_str)))
        };
        let fixed_effects = self.fixed_effects.iter().map(factor).collect::<Result<Vec<_>>>()?;
        let clusters = self.cluster_dims().iter().map(factor).collect::<Result<Vec<_>>>()?;

        let design = Design {
            outcome: self.outcome.name().to_string(),
            y,
            names: self.column_names(),
            columns,
            fixed_effects,
            clusters,
        };
        design.validate()?;
        Ok(design)
    }
}
