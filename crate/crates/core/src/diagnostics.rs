//! Per-combination statistics of matched latents and the drift score that
//! measures how far unseen combinations land from their additive prediction.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorspace::{DatasetSplit, FactorSpace};
use crate::image::ImageSet;
use crate::metrics::{encode_table, AssignmentMap};
use crate::nnmodels::LatentEncoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "test" => Ok(SplitTag::Test),
            _ => Err(Error::Header(format!("unknown split tag {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGroupStats {
    pub factor_a: String,
    pub factor_b: String,
    pub value_a: f64,
    pub value_b: f64,
    pub split: SplitTag,
    pub latents: [usize; 2],
    pub mean: [f64; 2],
    /// Population variance within the group.
    pub variance: [f64; 2],
    pub count: usize,
}

/// Groups precomputed latents (`z`, one row per entry of `indices`) by the
/// levels of two factors and by split membership.
pub fn group_latent_table(
    z: ArrayView2<f64>,
    indices: &[usize],
    space: &FactorSpace,
    split: &DatasetSplit,
    factor_a: &str,
    factor_b: &str,
    assignment: &AssignmentMap,
) -> Result<Vec<LatentGroupStats>> {
    let fa = space.factor_index(factor_a)?;
    let fb = space.factor_index(factor_b)?;
    if fa == fb {
        return Err(Error::config("grouping needs two distinct factors"));
    }
    let missing = |name: &str| Error::config(format!("factor {name:?} has no assigned latent"));
    let la = assignment.latent_for(fa).ok_or_else(|| missing(factor_a))?;
    let lb = assignment.latent_for(fb).ok_or_else(|| missing(factor_b))?;
    if la == lb {
        return Err(Error::config("both factors map to the same latent"));
    }
    if la >= z.ncols() || lb >= z.ncols() {
        return Err(Error::shape("assigned latent outside the latent table"));
    }
    if z.nrows() != indices.len() {
        return Err(Error::shape("one latent row per image is required"));
    }
    // key: (level_a, level_b, split) -> (n, sum, sum of squares)
    let mut acc: BTreeMap<(usize, usize, SplitTag), (usize, [f64; 2], Vec<[f64; 2]>)> = BTreeMap::new();
    for (row, &flat) in z.outer_iter().zip(indices) {
        let fv = space.vector(flat);
        let tag = if split.is_test(flat) { SplitTag::Test } else { SplitTag::Train };
        let e = acc
            .entry((fv.indices[fa], fv.indices[fb], tag))
            .or_insert((0, [0.0; 2], Vec::new()));
        e.0 += 1;
        e.1[0] += row[la];
        e.1[1] += row[lb];
        e.2.push([row[la], row[lb]]);
    }
    let va = &space.factors()[fa].values;
    let vb = &space.factors()[fb].values;
    Ok(acc
        .into_iter()
        .map(|((ia, ib, tag), (n, sum, pts))| {
            let nf = n as f64;
            let mean = [sum[0] / nf, sum[1] / nf];
            let mut variance = [0.0; 2];
            for p in &pts {
                for k in 0..2 {
                    variance[k] += (p[k] - mean[k]).powi(2) / nf;
                }
            }
            LatentGroupStats {
                factor_a: factor_a.to_string(),
                factor_b: factor_b.to_string(),
                value_a: va[ia],
                value_b: vb[ib],
                split: tag,
                latents: [la, lb],
                mean,
                variance,
                count: n,
            }
        })
        .collect())
}

/// Encodes every image of the space and groups the matched latents.
pub fn group_latents<E: LatentEncoder + ?Sized>(
    encoder: &E,
    images: &ImageSet,
    space: &FactorSpace,
    split: &DatasetSplit,
    factor_a: &str,
    factor_b: &str,
    assignment: &AssignmentMap,
) -> Result<Vec<LatentGroupStats>> {
    if images.len() != space.total() {
        return Err(Error::shape("images do not cover the factor space"));
    }
    let indices: Vec<usize> = (0..space.total()).collect();
    let z = encode_table(encoder, images, &indices)?;
    group_latent_table(z.view(), &indices, space, split, factor_a, factor_b, assignment)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDrift {
    pub value_a: f64,
    pub value_b: f64,
    pub expected: [f64; 2],
    pub observed: [f64; 2],
    pub displacement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub test_groups: Vec<GroupDrift>,
    /// Mean displacement over test groups.
    pub aggregate: f64,
    /// Mean displacement of the train groups themselves from the additive fit.
    pub train_baseline: f64,
    pub pooled_train_std: [f64; 2],
    /// Mean test variance over mean train variance, per matched latent.
    pub variance_inflation: [Option<f64>; 2],
}

/// Main-effects fit `mean ≈ alpha[value_a] + beta[value_b]` over train groups,
/// solved by backfitting from the marginal-mean starting point.
struct Additive {
    alpha: BTreeMap<u64, [f64; 2]>,
    beta: BTreeMap<u64, [f64; 2]>,
}

const BACKFIT_MAX_SWEEPS: usize = 100_000;
const BACKFIT_TOL: f64 = 1e-14;

fn mean_of(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let mut m = [0.0; 2];
    for p in points {
        m[0] += p[0] / n;
        m[1] += p[1] / n;
    }
    m
}

fn marginal(
    train: &[&LatentGroupStats],
    key: impl Fn(&LatentGroupStats) -> u64,
    offset: impl Fn(&LatentGroupStats) -> [f64; 2],
) -> BTreeMap<u64, [f64; 2]> {
    let mut acc: BTreeMap<u64, Vec<[f64; 2]>> = BTreeMap::new();
    for g in train {
        let o = offset(g);
        acc.entry(key(g)).or_default().push([g.mean[0] - o[0], g.mean[1] - o[1]]);
    }
    acc.into_iter().map(|(k, v)| (k, mean_of(&v))).collect()
}

impl Additive {
    fn fit(train: &[&LatentGroupStats]) -> Self {
        let ka = |g: &LatentGroupStats| g.value_a.to_bits();
        let kb = |g: &LatentGroupStats| g.value_b.to_bits();
        let all: Vec<[f64; 2]> = train.iter().map(|g| g.mean).collect();
        let grand = mean_of(&all);
        let mut alpha = marginal(train, ka, |_| [0.0; 2]);
        let mut beta = marginal(train, kb, |_| grand);
        let scale = all.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
        for _ in 0..BACKFIT_MAX_SWEEPS {
            let next_alpha = marginal(train, ka, |g| beta[&kb(g)]);
            let next_beta = marginal(train, kb, |g| next_alpha[&ka(g)]);
            let mut change = 0.0f64;
            for (old, new) in alpha.values().zip(next_alpha.values()).chain(beta.values().zip(next_beta.values())) {
                change = change.max((old[0] - new[0]).abs()).max((old[1] - new[1]).abs());
            }
            alpha = next_alpha;
            beta = next_beta;
            if change <= BACKFIT_TOL * scale {
                break;
            }
        }
        Additive { alpha, beta }
    }

    fn predict(&self, g: &LatentGroupStats) -> Result<[f64; 2]> {
        let a = self.alpha.get(&g.value_a.to_bits()).ok_or_else(|| {
            Error::Undefined(format!("{} = {} never occurs in a training group", g.factor_a, g.value_a))
        })?;
        let b = self.beta.get(&g.value_b.to_bits()).ok_or_else(|| {
            Error::Undefined(format!("{} = {} never occurs in a training group", g.factor_b, g.value_b))
        })?;
        Ok([a[0] + b[0], a[1] + b[1]])
    }
}

fn displacement(observed: [f64; 2], expected: [f64; 2], std: [f64; 2]) -> f64 {
    let mut s = 0.0;
    for k in 0..2 {
        let r = observed[k] - expected[k];
        if r != 0.0 {
            s += (r / std[k]).powi(2);
        }
    }
    s.sqrt()
}

/// Compares every test group with the additive prediction from train marginals.
pub fn drift_score(groups: &[LatentGroupStats]) -> Result<DriftReport> {
    let train: Vec<&LatentGroupStats> = groups.iter().filter(|g| g.split == SplitTag::Train).collect();
    let test: Vec<&LatentGroupStats> = groups.iter().filter(|g| g.split == SplitTag::Test).collect();
    if train.is_empty() {
        return Err(Error::Undefined("no training groups".into()));
    }
    if test.is_empty() {
        return Err(Error::Undefined("no test groups".into()));
    }
    let model = Additive::fit(&train);
    let n_train: usize = train.iter().map(|g| g.count).sum();
    let mut pooled = [0.0; 2];
    for g in &train {
        for k in 0..2 {
            pooled[k] += g.variance[k] * g.count as f64 / n_train as f64;
        }
    }
    // Singleton groups carry no within-group spread; use the total train
    // spread for such coordinates instead.
    let grand: [f64; 2] = std::array::from_fn(|k| {
        train.iter().map(|g| g.mean[k] * g.count as f64).sum::<f64>() / n_train as f64
    });
    for k in 0..2 {
        if pooled[k] == 0.0 {
            pooled[k] = train
                .iter()
                .map(|g| (g.mean[k] - grand[k]).powi(2) * g.count as f64 / n_train as f64)
                .sum();
        }
    }
    let pooled_std = [pooled[0].sqrt(), pooled[1].sqrt()];
    let mut test_groups = Vec::with_capacity(test.len());
    for g in &test {
        let expected = model.predict(g)?;
        test_groups.push(GroupDrift {
            value_a: g.value_a,
            value_b: g.value_b,
            expected,
            observed: g.mean,
            displacement: displacement(g.mean, expected, pooled_std),
        });
    }
    let mut baseline = 0.0;
    for g in &train {
        baseline += displacement(g.mean, model.predict(g)?, pooled_std) / train.len() as f64;
    }
    let aggregate = test_groups.iter().map(|d| d.displacement).sum::<f64>() / test_groups.len() as f64;
    if !aggregate.is_finite() || !baseline.is_finite() {
        return Err(Error::Numerical(
            "train groups have zero spread but test groups are displaced".into(),
        ));
    }
    let mean_var = |gs: &[&LatentGroupStats], k: usize| gs.iter().map(|g| g.variance[k]).sum::<f64>() / gs.len() as f64;
    let inflation = |k: usize| {
        let t = mean_var(&train, k);
        (t > 0.0).then(|| mean_var(&test, k) / t)
    };
    Ok(DriftReport {
        test_groups,
        aggregate,
        train_baseline: baseline,
        pooled_train_std: pooled_std,
        variance_inflation: [inflation(0), inflation(1)],
    })
}

pub const GROUP_CSV_HEADER: &str = "factor_a,factor_b,value_a,value_b,split,mean_0,mean_1,var_0,var_1,count,latent_0,latent_1";

pub fn export_group_csv(groups: &[LatentGroupStats], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{GROUP_CSV_HEADER}")?;
    for g in groups {
        if g.factor_a.contains(',') || g.factor_b.contains(',') {
            return Err(Error::config("factor names may not contain commas"));
        }
        writeln!(
            f,
            "{},{},{:?},{:?},{},{:?},{:?},{:?},{:?},{},{},{}",
            g.factor_a,
            g.factor_b,
            g.value_a,
            g.value_b,
            g.split.name(),
            g.mean[0],
            g.mean[1],
            g.variance[0],
            g.variance[1],
            g.count,
            g.latents[0],
            g.latents[1]
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_group_csv(path: impl AsRef<Path>) -> Result<Vec<LatentGroupStats>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(GROUP_CSV_HEADER) {
        return Err(Error::Header("unexpected group CSV header".into()));
    }
    let bad = |e: String| Error::Header(e);
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 12 {
                return Err(bad(format!("expected 12 fields, found {}", c.len())));
            }
            let f = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
            let u = |s: &str| s.parse::<usize>().map_err(|e| bad(e.to_string()));
            Ok(LatentGroupStats {
                factor_a: c[0].to_string(),
                factor_b: c[1].to_string(),
                value_a: f(c[2])?,
                value_b: f(c[3])?,
                split: SplitTag::parse(c[4])?,
                mean: [f(c[5])?, f(c[6])?],
                variance: [f(c[7])?, f(c[8])?],
                count: u(c[9])?,
                latents: [u(c[10])?, u(c[11])?],
            })
        })
        .collect()
}

pub fn export_drift_json(report: &DriftReport, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorspace::{partition, Atom, FactorSpec, SplitCondition};
    use ndarray::Array2;

    fn setup() -> (FactorSpace, DatasetSplit) {
        let space = FactorSpace::new(vec![
            FactorSpec::ordinal("a", 3),
            FactorSpec::ordinal("b", 3),
            FactorSpec::ordinal("c", 2),
        ])
        .unwrap();
        let cond = SplitCondition::new(vec![Atom::greater_than("a", 0.75), Atom::greater_than("b", 0.75)]);
        let split = partition(&space, &cond).unwrap();
        (space, split)
    }

    /// Latent 0 = 2a + small c effect, latent 1 = -b + small c effect, with an
    /// optional extra shift for test combinations.
    fn table(space: &FactorSpace, split: &DatasetSplit, shift: f64) -> (Array2<f64>, Vec<usize>) {
        let idx: Vec<usize> = (0..space.total()).collect();
        let mut z = Array2::zeros((idx.len(), 3));
        for &i in &idx {
            let v = space.vector(i).values;
            let s = if split.is_test(i) { shift } else { 0.0 };
            z[[i, 0]] = 2.0 * v[0] + 0.1 * v[2] + s;
            z[[i, 1]] = -v[1] - 0.1 * v[2];
            z[[i, 2]] = 7.0;
        }
        (z, idx)
    }

    #[test]
    fn groups_partition_images() {
        let (space, split) = setup();
        let (z, idx) = table(&space, &split, 0.0);
        let g = group_latent_table(z.view(), &idx, &space, &split, "a", "b", &AssignmentMap::identity(3)).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g.iter().map(|g| g.count).sum::<usize>(), 18);
        assert_eq!(g.iter().filter(|g| g.split == SplitTag::Test).count(), 1);
        assert!(g.iter().all(|g| g.variance[0] >= 0.0 && g.latents == [0, 1]));
        assert!(group_latent_table(z.view(), &idx, &space, &split, "a", "zz", &AssignmentMap::identity(3)).is_err());
        let short = AssignmentMap { factor_to_latent: vec![0] };
        assert!(group_latent_table(z.view(), &idx, &space, &split, "a", "b", &short).is_err());
    }

    #[test]
    fn constant_encoder_has_zero_variance() {
        let (space, split) = setup();
        let z = Array2::from_elem((18, 2), 0.5);
        let idx: Vec<usize> = (0..18).collect();
        let g = group_latent_table(z.view(), &idx, &space, &split, "a", "b", &AssignmentMap::identity(2)).unwrap();
        assert!(g.iter().all(|g| g.variance == [0.0, 0.0]));
    }

    #[test]
    fn additive_latents_give_zero_drift() {
        let (space, split) = setup();
        let (z, idx) = table(&space, &split, 0.0);
        let g = group_latent_table(z.view(), &idx, &space, &split, "a", "b", &AssignmentMap::identity(3)).unwrap();
        let r = drift_score(&g).unwrap();
        assert!(r.aggregate < 1e-9, "{r:?}");
        assert!(r.train_baseline < 1e-9);
        let t = &r.test_groups[0];
        assert!((t.expected[0] - 2.05).abs() < 1e-12 && (t.expected[1] + 1.05).abs() < 1e-12);
    }

    #[test]
    fn unit_shift_gives_unit_drift_and_affine_invariance() {
        let (space, split) = setup();
        let (z0, idx) = table(&space, &split, 0.0);
        let g0 = group_latent_table(z0.view(), &idx, &space, &split, "a", "b", &AssignmentMap::identity(3)).unwrap();
        let std0 = drift_score(&g0).unwrap().pooled_train_std[0];
        let (z, _) = table(&space, &split, std0);
        let g = group_latent_table(z.view(), &idx, &space, &split, "a", "b", &AssignmentMap::identity(3)).unwrap();
        let r = drift_score(&g).unwrap();
        assert!((r.aggregate - 1.0).abs() < 1e-9);
        let mut scaled = z.clone();
        scaled.column_mut(0).mapv_inplace(|v| -3.0 * v + 11.0);
        let gs = group_latent_table(scaled.view(), &idx, &space, &split, "a", "b", &AssignmentMap::identity(3)).unwrap();
        assert!((drift_score(&gs).unwrap().aggregate - r.aggregate).abs() < 1e-9);
    }

    #[test]
    fn singleton_groups_use_total_train_spread() {
        let space = FactorSpace::new(vec![FactorSpec::ordinal("a", 3), FactorSpec::ordinal("b", 3)]).unwrap();
        let cond = SplitCondition::new(vec![Atom::greater_than("a", 0.75), Atom::greater_than("b", 0.75)]);
        let split = partition(&space, &cond).unwrap();
        let idx: Vec<usize> = (0..9).collect();
        let mut z = Array2::zeros((9, 2));
        for &i in &idx {
            let v = space.vector(i).values;
            z[[i, 0]] = v[0] + if split.is_test(i) { 0.5 } else { 0.0 };
            z[[i, 1]] = v[1];
        }
        let g = group_latent_table(z.view(), &idx, &space, &split, "a", "b", &AssignmentMap::identity(2)).unwrap();
        assert!(g.iter().all(|g| g.count == 1));
        let r = drift_score(&g).unwrap();
        // Train values of a: 0 ×3, 0.5 ×3, 1 ×2.
        let mean: f64 = 3.5 / 8.0;
        let var = (3.0 * mean * mean + 3.0 * (0.5 - mean).powi(2) + 2.0 * (1.0 - mean).powi(2)) / 8.0;
        assert!((r.pooled_train_std[0] - var.sqrt()).abs() < 1e-12, "{g:?} {r:?}");
        assert!((r.aggregate - 0.5 / var.sqrt()).abs() < 1e-9, "{r:?}");
        assert!(r.train_baseline < 1e-9);
    }

    #[test]
    fn missing_marginal_is_an_error() {
        let g = |va: f64, vb: f64, split| LatentGroupStats {
            factor_a: "a".into(),
            factor_b: "b".into(),
            value_a: va,
            value_b: vb,
            split,
            latents: [0, 1],
            mean: [va, vb],
            variance: [0.1, 0.1],
            count: 2,
        };
        let groups = vec![g(0.0, 0.0, SplitTag::Train), g(1.0, 1.0, SplitTag::Test)];
        assert!(matches!(drift_score(&groups), Err(Error::Undefined(_))));
    }

    #[test]
    fn csv_round_trip_and_empty_export() {
        let (space, split) = setup();
        let (z, idx) = table(&space, &split, 0.3);
        let g = group_latent_table(z.view(), &idx, &space, &split, "a", "b", &AssignmentMap::identity(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        export_group_csv(&g, &p).unwrap();
        assert_eq!(read_group_csv(&p).unwrap(), g);
        export_group_csv(&[], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 1);
        let r = drift_score(&g).unwrap();
        let jp = dir.path().join("d.json");
        export_drift_json(&r, &jp).unwrap();
        let back: DriftReport = serde_json::from_slice(&fs::read(&jp).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
