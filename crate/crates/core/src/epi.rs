//! Population structure, contact matrices and the transmission rate matrix.
//!
//! Rate matrices use the "acquiring group first" index convention: row `a`
//! of `m` holds the rates at which susceptibles in group `a` meet
//! infectious people of each group, so the force of infection on `a` is
//! `sum_b m[a][b] * infectious_b / f_b`.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{structure, validation, Result};

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return Err(structure("matrix must have at least one row"));
        }
        let mut data = Vec::with_capacity(dim * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(structure(format!(
                    "row {i} has {} entries, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }
}

impl Index<(usize, usize)> for SquareMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.dim + j]
    }
}

impl IndexMut<(usize, usize)> for SquareMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.dim + j]
    }
}

/// Partition of the population into age groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeStructure {
    labels: Vec<String>,
    populations: Vec<f64>,
    total: f64,
    fractions: Vec<f64>,
}

impl AgeStructure {
    pub fn new(labels: Vec<String>, populations: Vec<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(structure("at least one age group is required"));
        }
        if labels.len() != populations.len() {
            return Err(structure(format!(
                "{} labels but {} populations",
                labels.len(),
                populations.len()
            )));
        }
        if let Some((label, pop)) = labels
            .iter()
            .zip(&populations)
            .find(|(_, p)| !(p.is_finite() && **p > 0.0))
        {
            return Err(validation(format!(
                "population of group {label} must be positive, got {pop}"
            )));
        }
        let total: f64 = populations.iter().sum();
        let fractions = populations.iter().map(|p| p / total).collect();
        Ok(Self {
            labels,
            populations,
            total,
            fractions,
        })
    }

    pub fn groups(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn populations(&self) -> &[f64] {
        &self.populations
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }
}

/// Average daily contacts per person between age groups, reciprocal with
/// respect to the population it was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactMatrix {
    entries: SquareMatrix,
}

impl ContactMatrix {
    /// Validates non-negativity and enforces reciprocity
    /// `C[a][b] N_a = C[b][a] N_b` by averaging the two directions.
    pub fn reciprocal(raw: SquareMatrix, ages: &AgeStructure) -> Result<Self> {
        check_dims(raw.dim(), ages.groups())?;
        check_non_negative(&raw)?;
        let n = ages.populations();
        let mut out = SquareMatrix::zeros(raw.dim());
        for a in 0..raw.dim() {
            for b in 0..raw.dim() {
                out[(a, b)] = (raw[(a, b)] * n[a] + raw[(b, a)] * n[b]) / (2.0 * n[a]);
            }
        }
        Ok(Self { entries: out })
    }

    /// Wraps entries without symmetrizing. Used when reciprocity already
    /// holds by construction (e.g. completed from an upper triangle).
    pub fn from_entries(entries: SquareMatrix) -> Result<Self> {
        check_non_negative(&entries)?;
        Ok(Self { entries })
    }

    /// Builds a reciprocal matrix from its upper triangle (row <= column),
    /// filling `C[b][a] = C[a][b] * f_a / f_b`.
    pub fn from_upper_triangle(upper: &[f64], ages: &AgeStructure) -> Result<Self> {
        let dim = ages.groups();
        if upper.len() != dim * (dim + 1) / 2 {
            return Err(structure(format!(
                "expected {} upper-triangle elements, got {}",
                dim * (dim + 1) / 2,
                upper.len()
            )));
        }
        let f = ages.fractions();
        let mut m = SquareMatrix::zeros(dim);
        let mut k = 0;
        for a in 0..dim {
            for b in a..dim {
                m[(a, b)] = upper[k];
                m[(b, a)] = upper[k] * f[a] / f[b];
                k += 1;
            }
        }
        Self::from_entries(m)
    }

    pub fn upper_triangle(&self) -> Vec<f64> {
        let dim = self.dim();
        let mut out = Vec::with_capacity(dim * (dim + 1) / 2);
        for a in 0..dim {
            for b in a..dim {
                out.push(self.entries[(a, b)]);
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.entries.dim()
    }

    pub fn entries(&self) -> &SquareMatrix {
        &self.entries
    }

    /// Largest relative violation of `C[a][b] N_a = C[b][a] N_b`.
    pub fn reciprocity_error(&self, ages: &AgeStructure) -> f64 {
        let n = ages.populations();
        let mut worst: f64 = 0.0;
        for a in 0..self.dim() {
            for b in 0..self.dim() {
                let lhs = self.entries[(a, b)] * n[a];
                let rhs = self.entries[(b, a)] * n[b];
                let scale = lhs.abs().max(rhs.abs());
                if scale > 0.0 {
                    worst = worst.max((lhs - rhs).abs() / scale);
                }
            }
        }
        worst
    }
}

fn check_dims(matrix: usize, groups: usize) -> Result<()> {
    if matrix != groups {
        return Err(structure(format!(
            "contact matrix is {matrix}x{matrix} but there are {groups} age groups"
        )));
    }
    Ok(())
}

fn check_non_negative(m: &SquareMatrix) -> Result<()> {
    if let Some(pos) = m.as_slice().iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(validation(format!(
            "contact entry ({}, {}) must be finite and non-negative, got {}",
            pos / m.dim(),
            pos % m.dim(),
            m.as_slice()[pos]
        )));
    }
    Ok(())
}

/// Population-weighted pooling of a fine-band contact matrix into coarser
/// groups, before any symmetrization. `groups[g]` lists the fine band
/// indices making up target group `g`; together they must partition the
/// bands exactly.
pub fn pool_contacts(
    raw: &SquareMatrix,
    fine_populations: &[f64],
    groups: &[Vec<usize>],
) -> Result<SquareMatrix> {
    let bands = raw.dim();
    if fine_populations.len() != bands {
        return Err(structure(format!(
            "{bands} contact bands but {} band populations",
            fine_populations.len()
        )));
    }
    let mut seen = vec![false; bands];
    for (g, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(structure(format!("target group {g} has no bands")));
        }
        for &i in members {
            if i >= bands {
                return Err(structure(format!("band index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(structure(format!("band {i} assigned to two groups")));
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(structure(format!("band {i} not assigned to any group")));
    }
    if let Some(p) = fine_populations.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(validation(format!("band population must be positive, got {p}")));
    }
    check_non_negative(raw)?;

    let mut pooled = SquareMatrix::zeros(groups.len());
    for (g, rows) in groups.iter().enumerate() {
        let weight: f64 = rows.iter().map(|&i| fine_populations[i]).sum();
        for (h, cols) in groups.iter().enumerate() {
            let contacts: f64 = rows
                .iter()
                .map(|&i| fine_populations[i] * cols.iter().map(|&j| raw[(i, j)]).sum::<f64>())
                .sum();
            pooled[(g, h)] = contacts / weight;
        }
    }
    Ok(pooled)
}

/// Aggregates a fine-band contact matrix to target groups and symmetrizes
/// the result for reciprocity against the aggregated populations.
pub fn aggregate_contact_matrix(
    raw: &SquareMatrix,
    fine_populations: &[f64],
    groups: &[Vec<usize>],
    labels: Vec<String>,
) -> Result<(ContactMatrix, AgeStructure)> {
    let pooled = pool_contacts(raw, fine_populations, groups)?;
    if labels.len() != groups.len() {
        return Err(structure(format!(
            "{} labels for {} target groups",
            labels.len(),
            groups.len()
        )));
    }
    let populations = groups
        .iter()
        .map(|g| g.iter().map(|&i| fine_populations[i]).sum())
        .collect();
    let ages = AgeStructure::new(labels, populations)?;
    Ok((ContactMatrix::reciprocal(pooled, &ages)?, ages))
}

/// Stage rates of the two-stage Erlang latent and infectious periods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    pub tau: f64,
    pub gamma: f64,
}

impl RateParams {
    pub fn new(tau: f64, gamma: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0 && gamma.is_finite() && gamma > 0.0) {
            return Err(validation(format!(
                "stage rates must be positive, got tau={tau}, gamma={gamma}"
            )));
        }
        Ok(Self { tau, gamma })
    }

    /// From mean latent and infectious periods in days.
    pub fn from_periods(latent: f64, infectious: f64) -> Result<Self> {
        Self::new(2.0 / latent, 2.0 / infectious)
    }

    pub fn mean_latent_period(&self) -> f64 {
        2.0 / self.tau
    }

    pub fn mean_infectious_period(&self) -> f64 {
        2.0 / self.gamma
    }
}

/// Single shared transmissibility path, or one path per age group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Sbm,
    Mbm,
}

impl ModelKind {
    pub fn paths(self, groups: usize) -> usize {
        match self {
            ModelKind::Sbm => 1,
            ModelKind::Mbm => groups,
        }
    }

    /// Index of the transmissibility path scaling row `group`.
    pub fn path_of(self, group: usize) -> usize {
        match self {
            ModelKind::Sbm => 0,
            ModelKind::Mbm => group,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sbm" => Ok(ModelKind::Sbm),
            "mbm" => Ok(ModelKind::Mbm),
            other => Err(validation(format!("unknown model kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Sbm => "sbm",
            ModelKind::Mbm => "mbm",
        })
    }
}

/// `m[a][b] = beta_{path(a)} * C[a][b]`.
pub fn transmission_rate_matrix(
    betas: &[f64],
    contact: &ContactMatrix,
    kind: ModelKind,
) -> Result<SquareMatrix> {
    let dim = contact.dim();
    let expected = kind.paths(dim);
    if betas.len() != expected {
        return Err(structure(format!(
            "{kind} model over {dim} groups needs {expected} transmissibilities, got {}",
            betas.len()
        )));
    }
    if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
        return Err(validation(format!("transmissibility must be positive, got {b}")));
    }
    let mut m = contact.entries().clone();
    fill_rate_matrix(betas, contact.entries(), kind, &mut m);
    Ok(m)
}

pub(crate) fn fill_rate_matrix(
    betas: &[f64],
    contact: &SquareMatrix,
    kind: ModelKind,
    out: &mut SquareMatrix,
) {
    let dim = contact.dim();
    for a in 0..dim {
        let beta = betas[kind.path_of(a)];
        for b in 0..dim {
            out[(a, b)] = beta * contact[(a, b)];
        }
    }
}

/// Transmission quantities at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionSnapshot {
    pub rate_matrix: SquareMatrix,
    pub betas: Vec<f64>,
    pub force_of_infection: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ages(pops: &[f64]) -> AgeStructure {
        let labels = (0..pops.len()).map(|i| format!("g{i}")).collect();
        AgeStructure::new(labels, pops.to_vec()).unwrap()
    }

    #[test]
    fn age_structure_fractions() {
        let a = ages(&[1.0e6, 2.5e6, 3.3e5]);
        assert!((a.fractions().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(a.total(), 1.0e6 + 2.5e6 + 3.3e5);
        assert!(AgeStructure::new(vec!["a".into()], vec![0.0]).is_err());
        assert!(AgeStructure::new(vec![], vec![]).is_err());
    }

    #[test]
    fn identity_aggregation_keeps_reciprocal_matrix() {
        let pops = [3.0, 5.0, 2.0];
        // reciprocal by construction: upper triangle completed with N_a/N_b
        let a = ages(&pops);
        let base = ContactMatrix::from_upper_triangle(&[4.0, 1.5, 0.7, 6.0, 2.2, 3.1], &a)
            .unwrap();
        let groups = vec![vec![0], vec![1], vec![2]];
        let labels = vec!["g0".into(), "g1".into(), "g2".into()];
        let (out, _) =
            aggregate_contact_matrix(base.entries(), &pops, &groups, labels).unwrap();
        for (x, y) in out.entries().as_slice().iter().zip(base.entries().as_slice()) {
            assert!((x - y).abs() <= 1e-12 * y.abs());
        }
    }

    /// Expands every band into individual persons and counts contacts
    /// person by person.
    fn brute_force_pooled(raw: &SquareMatrix, pops: &[usize], groups: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let mut people = Vec::new();
        for (band, &p) in pops.iter().enumerate() {
            people.extend(std::iter::repeat(band).take(p));
        }
        let group_of = |band: usize| groups.iter().position(|g| g.contains(&band)).unwrap();
        let mut total = vec![vec![0.0; groups.len()]; groups.len()];
        let mut heads = vec![0.0; groups.len()];
        for &band in &people {
            let g = group_of(band);
            heads[g] += 1.0;
            for other in 0..raw.dim() {
                total[g][group_of(other)] += raw[(band, other)];
            }
        }
        total
            .into_iter()
            .zip(heads)
            .map(|(row, n)| row.into_iter().map(|c| c / n).collect())
            .collect()
    }

    #[test]
    fn pooled_matches_per_person_oracle() {
        let raw = SquareMatrix::from_rows(&[
            vec![2.0, 1.0, 0.5, 0.25],
            vec![1.0, 3.0, 0.75, 0.5],
            vec![0.25, 0.375, 4.0, 1.0],
            vec![0.125, 0.25, 1.0, 5.0],
        ])
        .unwrap();
        let pops = [1usize, 1, 2, 2];
        let groups = vec![vec![0, 1], vec![2, 3]];
        let pooled = pool_contacts(
            &raw,
            &pops.iter().map(|&p| p as f64).collect::<Vec<_>>(),
            &groups,
        )
        .unwrap();
        let oracle = brute_force_pooled(&raw, &pops, &groups);
        for g in 0..2 {
            for h in 0..2 {
                assert!((pooled[(g, h)] - oracle[g][h]).abs() < 1e-12);
            }
        }
        // entry(ab, cd) by the closed form
        let closed = (1.0 * (0.5 + 0.25) + 1.0 * (0.75 + 0.5)) / 2.0;
        assert!((pooled[(0, 1)] - closed).abs() < 1e-15);

        // the raw matrix is reciprocal at band level, so symmetrization is a no-op
        let (agg, agg_ages) = aggregate_contact_matrix(
            &raw,
            &[1.0, 1.0, 2.0, 2.0],
            &groups,
            vec!["ab".into(), "cd".into()],
        )
        .unwrap();
        assert_eq!(agg_ages.populations(), &[2.0, 4.0]);
        for g in 0..2 {
            for h in 0..2 {
                assert!((agg.entries()[(g, h)] - oracle[g][h]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_errors() {
        let raw = SquareMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            pool_contacts(&raw, &[1.0, 1.0], &[vec![0]]),
            Err(crate::Error::Structure(_))
        ));
        assert!(matches!(
            pool_contacts(&raw, &[1.0, 1.0], &[vec![0, 1], vec![1]]),
            Err(crate::Error::Structure(_))
        ));
        assert!(matches!(
            pool_contacts(&raw, &[1.0], &[vec![0, 1]]),
            Err(crate::Error::Structure(_))
        ));
        let neg = SquareMatrix::from_rows(&[vec![1.0, -2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            pool_contacts(&neg, &[1.0, 1.0], &[vec![0], vec![1]]),
            Err(crate::Error::Validation(_))
        ));
        assert!(SquareMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn rate_matrix_examples() {
        let c = ContactMatrix::from_entries(
            SquareMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
        )
        .unwrap();
        let sbm = transmission_rate_matrix(&[1.0], &c, ModelKind::Sbm).unwrap();
        assert_eq!(&sbm, c.entries());
        let mbm = transmission_rate_matrix(&[0.5, 2.0], &c, ModelKind::Mbm).unwrap();
        assert_eq!(mbm.as_slice(), &[0.5, 1.0, 6.0, 8.0]);
        assert!(matches!(
            transmission_rate_matrix(&[1.0], &c, ModelKind::Mbm),
            Err(crate::Error::Structure(_))
        ));
        assert!(transmission_rate_matrix(&[-1.0], &c, ModelKind::Sbm).is_err());
    }

    #[test]
    fn rate_params_periods() {
        let r = RateParams::from_periods(3.0, 4.0).unwrap();
        assert_eq!(r.mean_latent_period(), 3.0);
        assert_eq!(r.mean_infectious_period(), 4.0);
        assert!(RateParams::new(0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn aggregation_is_reciprocal(
            raw in proptest::collection::vec(0.0f64..20.0, 36),
            pops in proptest::collection::vec(1.0f64..1e7, 6),
        ) {
            let raw = SquareMatrix::from_rows(&raw.chunks(6).map(<[f64]>::to_vec).collect::<Vec<_>>()).unwrap();
            let groups = vec![vec![0, 1], vec![2], vec![3, 4, 5]];
            let (c, a) = aggregate_contact_matrix(
                &raw, &pops, &groups, vec!["x".into(), "y".into(), "z".into()],
            ).unwrap();
            prop_assert!(c.reciprocity_error(&a) < 1e-9);
        }

        #[test]
        fn rate_matrix_is_homogeneous(
            betas in proptest::collection::vec(0.01f64..3.0, 3),
            scale in 0.1f64..10.0,
            entries in proptest::collection::vec(0.0f64..10.0, 9),
        ) {
            let c = ContactMatrix::from_entries(
                SquareMatrix::from_rows(&entries.chunks(3).map(<[f64]>::to_vec).collect::<Vec<_>>()).unwrap()
            ).unwrap();
            let base = transmission_rate_matrix(&betas, &c, ModelKind::Mbm).unwrap();
            let scaled_betas: Vec<f64> = betas.iter().map(|b| b * scale).collect();
            let scaled = transmission_rate_matrix(&scaled_betas, &c, ModelKind::Mbm).unwrap();
            for (x, y) in base.as_slice().iter().zip(scaled.as_slice()) {
                prop_assert!((x * scale - y).abs() <= 1e-12 * y.abs().max(1e-300));
            }
        }

        #[test]
        fn mbm_with_equal_betas_is_sbm(
            beta in 0.01f64..3.0,
            entries in proptest::collection::vec(0.0f64..10.0, 9),
        ) {
            let c = ContactMatrix::from_entries(
                SquareMatrix::from_rows(&entries.chunks(3).map(<[f64]>::to_vec).collect::<Vec<_>>()).unwrap()
            ).unwrap();
            let sbm = transmission_rate_matrix(&[beta], &c, ModelKind::Sbm).unwrap();
            let mbm = transmission_rate_matrix(&[beta; 3], &c, ModelKind::Mbm).unwrap();
            prop_assert_eq!(sbm, mbm);
        }
    }
}
