use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Partition of sample ids into cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    n_folds: usize,
    assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn new(n_folds: usize, assignment: BTreeMap<String, usize>) -> Result<Self> {
        if n_folds == 0 {
            return Err(Error::Config("number of folds must be positive".into()));
        }
        if let Some((id, f)) = assignment.iter().find(|(_, &f)| f >= n_folds) {
            return Err(Error::Validation(format!(
                "id `{id}` assigned to fold {f} outside 0..{n_folds}"
            )));
        }
        Ok(Self { n_folds, assignment })
    }

    pub fn n_folds(&self) -> usize {
        self.n_folds
    }

    pub fn assignment(&self) -> &BTreeMap<String, usize> {
        &self.assignment
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    /// Ids held out by `fold`, in lexicographic order.
    pub fn ids_in(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Write as CSV with header `id,fold`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
        w.write_record(["id", "fold"]).map_err(|e| Error::io(path, e))?;
        for (id, fold) in &self.assignment {
            w.write_record([id.as_str(), &fold.to_string()])
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e))?;
        let headers = r.headers().map_err(|e| Error::io(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "fold"] {
            return Err(Error::Format(format!(
                "{}: expected header `id,fold`",
                path.display()
            )));
        }
        let mut assignment = BTreeMap::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::io(path, e))?;
            let fold: usize = rec[1]
                .parse()
                .map_err(|_| Error::Format(format!("invalid fold index `{}`", &rec[1])))?;
            if assignment.insert(rec[0].to_string(), fold).is_some() {
                return Err(Error::Validation(format!("duplicate id `{}` in fold file", &rec[0])));
            }
        }
        let n_folds = assignment.values().max().map_or(0, |m| m + 1);
        Self::new(n_folds, assignment)
    }
}

/// Seeded shuffle followed by round-robin assignment, so fold sizes differ
/// by at most one.
pub fn make_folds(ids: &[String], n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if ids.is_empty() {
        return Err(Error::Config("cannot make folds from an empty id list".into()));
    }
    if n_folds == 0 || n_folds > ids.len() {
        return Err(Error::Config(format!(
            "{n_folds} folds requested for {} ids",
            ids.len()
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::Validation(format!("duplicate id `{dup}`")));
    }
    let mut order: Vec<&String> = ids.iter().collect();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i % n_folds))
        .collect();
    FoldAssignment::new(n_folds, assignment)
}
