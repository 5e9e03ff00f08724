//! Generative-factor grids, exclusion predicates and train/test partitions.
//!
//! Every factor is a finite grid of normalized values in `[0, 1]`. Level `i`
//! of a `K`-level factor maps to `i / (K - 1)` (a single-level factor maps to
//! `0`). Combinations are addressed by a flat index in row-major factor order,
//! last factor fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorKind {
    Categorical,
    Ordinal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub kind: FactorKind,
    pub values: Vec<f64>,
    /// Category names for categorical factors, one per level.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

fn grid(k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![0.0];
    }
    let denom = (k - 1) as f64;
    (0..k).map(|i| i as f64 / denom).collect()
}

impl FactorSpec {
    pub fn ordinal(name: impl Into<String>, cardinality: usize) -> Self {
        FactorSpec {
            name: name.into(),
            kind: FactorKind::Ordinal,
            values: grid(cardinality),
            labels: Vec::new(),
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        labels: impl IntoIterator<Item = S>,
    ) -> Self {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        FactorSpec {
            name: name.into(),
            kind: FactorKind::Categorical,
            values: grid(labels.len()),
            labels,
        }
    }

    pub fn cardinality(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.values.len();
        if k == 0 {
            return Err(Error::config(format!("factor {:?} has no levels", self.name)));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!("factor {:?} has non-finite values", self.name)));
        }
        if k == 1 {
            if self.values[0] != 0.0 {
                return Err(Error::config(format!(
                    "single-level factor {:?} must have value 0",
                    self.name
                )));
            }
        } else {
            if self.values.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::config(format!(
                    "factor {:?} values must be strictly increasing",
                    self.name
                )));
            }
            if self.values[0] != 0.0 || self.values[k - 1] != 1.0 {
                return Err(Error::config(format!(
                    "factor {:?} values must span [0, 1]",
                    self.name
                )));
            }
        }
        if !self.labels.is_empty() && self.labels.len() != k {
            return Err(Error::config(format!(
                "factor {:?} has {} labels for {} levels",
                self.name,
                self.labels.len(),
                k
            )));
        }
        Ok(())
    }

    /// Grid index holding exactly `value`, if any.
    pub fn index_of_value(&self, value: f64) -> Option<usize> {
        self.values.iter().position(|&v| (v - value).abs() <= 1e-12)
    }

    pub fn value_of_label(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.values[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FactorSpec>", into = "Vec<FactorSpec>")]
pub struct FactorSpace {
    factors: Vec<FactorSpec>,
    strides: Vec<usize>,
    total: usize,
}

impl TryFrom<Vec<FactorSpec>> for FactorSpace {
    type Error = Error;

    fn try_from(factors: Vec<FactorSpec>) -> Result<Self> {
        FactorSpace::new(factors)
    }
}

impl From<FactorSpace> for Vec<FactorSpec> {
    fn from(space: FactorSpace) -> Self {
        space.factors
    }
}

impl FactorSpace {
    pub fn new(factors: Vec<FactorSpec>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::config("factor space needs at least one factor"));
        }
        for (i, f) in factors.iter().enumerate() {
            f.validate()?;
            if factors[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::config(format!("duplicate factor name {:?}", f.name)));
            }
        }
        let mut strides = vec![1usize; factors.len()];
        let mut total = 1usize;
        for i in (0..factors.len()).rev() {
            strides[i] = total;
            total = total
                .checked_mul(factors[i].cardinality())
                .ok_or_else(|| Error::config("factor space too large"))?;
        }
        Ok(FactorSpace {
            factors,
            strides,
            total,
        })
    }

    pub fn factors(&self) -> &[FactorSpec] {
        &self.factors
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.factors.iter().map(FactorSpec::cardinality).collect()
    }

    pub fn factor_index(&self, name: &str) -> Result<usize> {
        self.factors
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| Error::config(format!("unknown factor {name:?}")))
    }

    pub fn flat_index(&self, indices: &[usize]) -> Result<usize> {
        if indices.len() != self.factors.len() {
            return Err(Error::config(format!(
                "expected {} factor indices, got {}",
                self.factors.len(),
                indices.len()
            )));
        }
        let mut flat = 0;
        for ((&i, f), &s) in indices.iter().zip(&self.factors).zip(&self.strides) {
            if i >= f.cardinality() {
                return Err(Error::config(format!(
                    "index {i} out of range for factor {:?} with {} levels",
                    f.name,
                    f.cardinality()
                )));
            }
            flat += i * s;
        }
        Ok(flat)
    }

    /// Factor vector for a flat combination index.
    ///
    /// Panics if `flat >= total()`.
    pub fn vector(&self, flat: usize) -> FactorVector {
        assert!(flat < self.total, "flat index {flat} out of range");
        let indices: Vec<usize> = self
            .factors
            .iter()
            .zip(&self.strides)
            .map(|(f, &s)| (flat / s) % f.cardinality())
            .collect();
        self.make_vector(indices)
    }

    pub fn vector_from_indices(&self, indices: &[usize]) -> Result<FactorVector> {
        self.flat_index(indices)?;
        Ok(self.make_vector(indices.to_vec()))
    }

    fn make_vector(&self, indices: Vec<usize>) -> FactorVector {
        let values = indices
            .iter()
            .zip(&self.factors)
            .map(|(&i, f)| f.values[i])
            .collect();
        FactorVector { indices, values }
    }

    /// True if `fv` is a valid point of this space.
    pub fn contains(&self, fv: &FactorVector) -> bool {
        fv.indices.len() == self.factors.len()
            && fv.values.len() == self.factors.len()
            && fv
                .indices
                .iter()
                .zip(&fv.values)
                .zip(&self.factors)
                .all(|((&i, &v), f)| i < f.cardinality() && f.values[i] == v)
    }

    pub fn iter(&self) -> impl Iterator<Item = FactorVector> + '_ {
        (0..self.total).map(move |i| self.vector(i))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorVector {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Constraint {
    Equals { values: Vec<f64> },
    GreaterThan { threshold: f64 },
    LessThan { threshold: f64 },
    InOpenInterval { lo: f64, hi: f64 },
}

impl Constraint {
    fn holds(&self, v: f64) -> bool {
        match self {
            Constraint::Equals { values } => values.iter().any(|&x| (x - v).abs() <= 1e-12),
            Constraint::GreaterThan { threshold } => v > *threshold,
            Constraint::LessThan { threshold } => v < *threshold,
            Constraint::InOpenInterval { lo, hi } => *lo < v && v < *hi,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub factor: String,
    #[serde(flatten)]
    pub constraint: Constraint,
}

impl Atom {
    pub fn equals(factor: impl Into<String>, values: impl Into<Vec<f64>>) -> Self {
        Atom {
            factor: factor.into(),
            constraint: Constraint::Equals {
                values: values.into(),
            },
        }
    }

    pub fn greater_than(factor: impl Into<String>, threshold: f64) -> Self {
        Atom {
            factor: factor.into(),
            constraint: Constraint::GreaterThan { threshold },
        }
    }

    pub fn less_than(factor: impl Into<String>, threshold: f64) -> Self {
        Atom {
            factor: factor.into(),
            constraint: Constraint::LessThan { threshold },
        }
    }

    pub fn in_open_interval(factor: impl Into<String>, lo: f64, hi: f64) -> Self {
        Atom {
            factor: factor.into(),
            constraint: Constraint::InOpenInterval { lo, hi },
        }
    }
}

/// Conjunction of per-factor constraints. A combination satisfying every atom
/// is excluded from training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCondition {
    pub atoms: Vec<Atom>,
}

impl SplitCondition {
    pub fn new(atoms: Vec<Atom>) -> Self {
        SplitCondition { atoms }
    }

    /// Resolves the condition against `space` into per-factor level masks.
    pub fn compile(&self, space: &FactorSpace) -> Result<CompiledCondition> {
        if self.atoms.is_empty() {
            return Err(Error::config("split condition needs at least one atom"));
        }
        let mut masks: Vec<Option<Vec<bool>>> = vec![None; space.n_factors()];
        for atom in &self.atoms {
            let fi = space.factor_index(&atom.factor)?;
            let spec = &space.factors()[fi];
            match &atom.constraint {
                Constraint::Equals { values } => {
                    if let Some(v) = values.iter().find(|&&v| spec.index_of_value(v).is_none()) {
                        return Err(Error::config(format!(
                            "value {v} is not a level of factor {:?}",
                            spec.name
                        )));
                    }
                }
                Constraint::InOpenInterval { lo, hi } if lo >= hi => {
                    return Err(Error::config(format!(
                        "empty interval ({lo}, {hi}) on factor {:?}",
                        spec.name
                    )));
                }
                _ if spec.kind == FactorKind::Categorical => {
                    return Err(Error::config(format!(
                        "only equality constraints apply to categorical factor {:?}",
                        spec.name
                    )));
                }
                _ => {}
            }
            let mask = masks[fi].get_or_insert_with(|| vec![true; spec.cardinality()]);
            for (m, &v) in mask.iter_mut().zip(&spec.values) {
                *m &= atom.constraint.holds(v);
            }
        }
        Ok(CompiledCondition { masks })
    }

    /// True iff every atom holds on the normalized values of `fv`.
    pub fn evaluate(&self, space: &FactorSpace, fv: &FactorVector) -> Result<bool> {
        if !space.contains(fv) {
            return Err(Error::config("factor vector does not belong to the space"));
        }
        Ok(self.compile(space)?.matches(&fv.indices))
    }
}

#[derive(Clone, Debug)]
pub struct CompiledCondition {
    masks: Vec<Option<Vec<bool>>>,
}

impl CompiledCondition {
    pub fn matches(&self, indices: &[usize]) -> bool {
        self.masks
            .iter()
            .zip(indices)
            .all(|(m, &i)| m.as_ref().map_or(true, |m| m[i]))
    }
}

pub fn evaluate_condition(
    cond: &SplitCondition,
    space: &FactorSpace,
    fv: &FactorVector,
) -> Result<bool> {
    cond.evaluate(space, fv)
}

/// Exhaustive train/test partition of a factor space.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub condition: SplitCondition,
    in_test: Vec<bool>,
}

impl DatasetSplit {
    pub fn is_test(&self, flat: usize) -> bool {
        self.in_test[flat]
    }

    pub fn is_train(&self, flat: usize) -> bool {
        !self.in_test[flat]
    }

    pub fn total(&self) -> usize {
        self.in_test.len()
    }

    /// Rebuilds a split from a stored list of test indices.
    pub fn from_test_indices(
        total: usize,
        test: &[usize],
        condition: SplitCondition,
    ) -> Result<Self> {
        let mut in_test = vec![false; total];
        for &t in test {
            if t >= total {
                return Err(Error::Split(format!("test index {t} out of range {total}")));
            }
            in_test[t] = true;
        }
        Self::from_mask(in_test, condition)
    }

    fn from_mask(in_test: Vec<bool>, condition: SplitCondition) -> Result<Self> {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..in_test.len()).partition(|&i| in_test[i]);
        if train.is_empty() {
            return Err(Error::Split(
                "condition excludes every combination; training set is empty".into(),
            ));
        }
        Ok(DatasetSplit {
            train,
            test,
            condition,
            in_test,
        })
    }

    pub fn manifest(&self, dataset: &str, condition_name: &str) -> SplitManifest {
        SplitManifest {
            dataset: dataset.to_string(),
            condition_name: condition_name.to_string(),
            atoms: self.condition.atoms.clone(),
            train_count: self.train.len(),
            test_count: self.test.len(),
            test_indices: self.test.clone(),
        }
    }
}

pub fn partition(space: &FactorSpace, cond: &SplitCondition) -> Result<DatasetSplit> {
    let compiled = cond.compile(space)?;
    let in_test = space
        .iter()
        .map(|fv| compiled.matches(&fv.indices))
        .collect();
    DatasetSplit::from_mask(in_test, cond.clone())
}

/// On-disk description of a split; test indices sorted ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset: String,
    pub condition_name: String,
    pub atoms: Vec<Atom>,
    pub train_count: usize,
    pub test_count: usize,
    pub test_indices: Vec<usize>,
}

impl SplitManifest {
    pub fn to_split(&self, space: &FactorSpace) -> Result<DatasetSplit> {
        let split = DatasetSplit::from_test_indices(
            space.total(),
            &self.test_indices,
            SplitCondition::new(self.atoms.clone()),
        )?;
        if split.train.len() != self.train_count || split.test.len() != self.test_count {
            return Err(Error::Split("manifest counts disagree with test indices".into()));
        }
        Ok(split)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedCondition {
    pub name: String,
    pub condition: SplitCondition,
}

fn named(name: &str, atoms: Vec<Atom>) -> NamedCondition {
    NamedCondition {
        name: name.to_string(),
        condition: SplitCondition::new(atoms),
    }
}

/// Named exclusion conditions shipped for each synthesizable dataset.
///
/// Category values follow the label order used by the renderers:
/// simple `[square, triangle]`, sprites2d `[square, ellipse, triangle]`.
pub fn builtin_conditions(dataset: &str) -> Result<Vec<NamedCondition>> {
    let midpos = |f: &str| Atom::in_open_interval(f, 0.35, 0.65);
    let conds = match dataset {
        "circles" => vec![
            named(
                "circles_corner",
                vec![Atom::greater_than("posX", 0.5), Atom::greater_than("posY", 0.5)],
            ),
            named("circles_midpos", vec![midpos("posX"), midpos("posY")]),
        ],
        "simple" => vec![
            named(
                "simple_corner",
                vec![
                    Atom::equals("shape", [1.0]),
                    Atom::greater_than("posX", 0.5),
                    Atom::greater_than("posY", 0.75),
                ],
            ),
            named(
                "simple_midpos",
                vec![Atom::equals("shape", [1.0]), midpos("posX"), midpos("posY")],
            ),
        ],
        "sprites2d" => vec![named(
            "sprites2d_sqr2px",
            vec![Atom::equals("shape", [0.0]), Atom::greater_than("posX", 0.5)],
        )],
        "bands" => vec![named(
            "bands_success",
            vec![
                Atom::less_than("band_hue", 0.25),
                Atom::greater_than("sprite_hue", 0.75),
            ],
        )],
        other => return Err(Error::config(format!("unknown dataset {other:?}"))),
    };
    Ok(conds)
}

pub fn builtin_condition(dataset: &str, name: &str) -> Result<SplitCondition> {
    builtin_conditions(dataset)?
        .into_iter()
        .find(|c| c.name == name)
        .map(|c| c.condition)
        .ok_or_else(|| {
            Error::config(format!("no built-in condition {name:?} for dataset {dataset:?}"))
        })
}
