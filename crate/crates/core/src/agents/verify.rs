//! Read-only checks that every file a task refers to exists and fits.

use std::fmt;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::domain::{Dataset, Spectrum};
use crate::error::{Error, Result};
use crate::surrogate::load_bundle;

use super::planner::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FileStatus {
    Exists,
    Missing,
    PermissionDenied,
}

/// Existence report per path, in input order. Never touches the files.
pub fn file_check<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<(PathBuf, FileStatus)>> {
    if paths.is_empty() {
        return Err(Error::Contract("file_check needs at least one path".into()));
    }
    Ok(paths
        .iter()
        .map(|p| {
            let p = p.as_ref();
            let status = match std::fs::metadata(p) {
                Ok(_) => FileStatus::Exists,
                Err(e) if e.kind() == ErrorKind::PermissionDenied => FileStatus::PermissionDenied,
                Err(_) => FileStatus::Missing,
            };
            (p.to_path_buf(), status)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemKind {
    Missing,
    PermissionDenied,
    /// Wrong spectrum length or column count.
    Dimension { expected: usize, actual: usize },
    Unreadable(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationProblem {
    pub field: &'static str,
    pub path: PathBuf,
    pub kind: ProblemKind,
}

impl VerificationProblem {
    /// What the user should do about it.
    pub fn hint(&self) -> String {
        match (&self.kind, self.field) {
            (ProblemKind::Missing, _) => format!("provide an existing file for {}", self.field),
            (ProblemKind::PermissionDenied, _) => "make the file readable or point to a copy".into(),
            (ProblemKind::Dimension { expected, .. }, "target_spectrum_path") => {
                format!("supply a target spectrum with exactly {expected} values")
            }
            (ProblemKind::Dimension { expected, .. }, "dataset_path") => {
                format!("supply a dataset with {expected} columns (geometry then spectrum)")
            }
            (ProblemKind::Dimension { .. }, _) => "supply a file matching the task dimensions".into(),
            (ProblemKind::Unreadable(_), _) => format!("correct or replace the {} file", self.field),
        }
    }
}

impl fmt::Display for VerificationProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match &self.kind {
            ProblemKind::Missing => "file not found".to_string(),
            ProblemKind::PermissionDenied => "permission denied".to_string(),
            ProblemKind::Dimension { expected, actual } => {
                format!("expected {expected}, found {actual}")
            }
            ProblemKind::Unreadable(msg) => msg.clone(),
        };
        write!(
            f,
            "{} ({}): {what}; {}",
            self.field,
            self.path.display(),
            self.hint()
        )
    }
}

/// Validates the task and every file it names. Returns the spec unchanged
/// when all checks pass, otherwise every problem found.
pub fn verify_inputs(spec: &TaskSpec) -> Result<TaskSpec> {
    spec.validate()?;
    let mut problems = Vec::new();
    let mut check = |field: &'static str, path: &Path, inspect: &dyn Fn(&Path) -> Option<ProblemKind>| {
        let status = file_check(&[path]).expect("one path")[0].1;
        let kind = match status {
            FileStatus::Missing => Some(ProblemKind::Missing),
            FileStatus::PermissionDenied => Some(ProblemKind::PermissionDenied),
            FileStatus::Exists => inspect(path),
        };
        if let Some(kind) = kind {
            problems.push(VerificationProblem {
                field,
                path: path.to_path_buf(),
                kind,
            });
        }
    };

    if let Some(p) = &spec.target_spectrum_path {
        check("target_spectrum_path", p, &|p| match Spectrum::read(p) {
            Ok(s) if s.len() == spec.output_dim => None,
            Ok(s) => Some(ProblemKind::Dimension {
                expected: spec.output_dim,
                actual: s.len(),
            }),
            Err(e) => Some(ProblemKind::Unreadable(e.to_string())),
        });
    }
    if let Some(p) = &spec.dataset_path {
        let expected = spec.input_dim + spec.output_dim;
        check("dataset_path", p, &|p| match Dataset::count_columns(p) {
            Ok(n) if n == expected => None,
            Ok(n) => Some(ProblemKind::Dimension { expected, actual: n }),
            Err(e) => Some(ProblemKind::Unreadable(e.to_string())),
        });
    }
    if let Some(p) = &spec.bundle_path {
        if spec.plan.runs_inverse() && !spec.plan.trains_forward() {
            check("bundle_path", p, &|p| match load_bundle(p) {
                Ok(b) if !b.is_trained() => Some(ProblemKind::Unreadable("bundle is not trained".into())),
                Ok(b) if b.input_dim() != spec.input_dim => Some(ProblemKind::Dimension {
                    expected: spec.input_dim,
                    actual: b.input_dim(),
                }),
                Ok(b) if b.output_dim() != spec.output_dim => Some(ProblemKind::Dimension {
                    expected: spec.output_dim,
                    actual: b.output_dim(),
                }),
                Ok(_) => None,
                Err(e) => Some(ProblemKind::Unreadable(e.to_string())),
            });
        }
    }

    if problems.is_empty() {
        Ok(spec.clone())
    } else {
        Err(Error::Verification(problems))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::planner::{aide_task_description, Plan, TaskMode};

    fn spec(dir: &Path) -> TaskSpec {
        TaskSpec {
            input_dim: 2,
            output_dim: 3,
            target_metric: 1e-3,
            target_spectrum_path: Some(dir.join("target.txt")),
            dataset_path: Some(dir.join("data.csv")),
            bundle_path: None,
            mode: TaskMode::FixedDataset,
            plan: Plan::Both,
            aide_task_description: aide_task_description(2, 3, 1e-3, TaskMode::FixedDataset),
        }
    }

    fn write_inputs(dir: &Path, spectrum_len: usize) {
        Spectrum::new(vec![0.5; spectrum_len])
            .write(&dir.join("target.txt"))
            .unwrap();
        std::fs::write(dir.join("data.csv"), "g0,g1,s0,s1,s2\n1,2,3,4,5\n").unwrap();
    }

    fn listing(dir: &Path) -> Vec<(String, u64)> {
        let mut v: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), e.metadata().unwrap().len())
            })
            .collect();
        v.sort();
        v
    }

    #[test]
    fn statuses_preserve_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        std::fs::write(&a, "x").unwrap();
        let b = dir.path().join("b");
        let report = file_check(&[&b, &a, &b]).unwrap();
        let statuses: Vec<_> = report.iter().map(|r| r.1).collect();
        assert_eq!(
            statuses,
            [FileStatus::Missing, FileStatus::Exists, FileStatus::Missing]
        );
        assert_eq!(report[1].0, a);
        assert!(file_check::<&Path>(&[]).is_err());
    }

    #[test]
    fn consistent_inputs_verify_without_writing() {
        let dir = tempfile::tempdir().unwrap();
        write_inputs(dir.path(), 3);
        let before = listing(dir.path());
        let s = spec(dir.path());
        assert_eq!(verify_inputs(&s).unwrap(), s);
        assert_eq!(listing(dir.path()), before);
    }

    #[test]
    fn wrong_spectrum_length_names_expected() {
        let dir = tempfile::tempdir().unwrap();
        write_inputs(dir.path(), 4);
        let err = verify_inputs(&spec(dir.path())).unwrap_err();
        match &err {
            Error::Verification(p) => {
                assert_eq!(p.len(), 1);
                assert_eq!(p[0].kind, ProblemKind::Dimension { expected: 3, actual: 4 });
            }
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().contains("exactly 3 values"), "{err}");
    }

    #[test]
    fn every_problem_is_listed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data.csv"), "1,2,3\n").unwrap();
        match verify_inputs(&spec(dir.path())) {
            Err(Error::Verification(p)) => {
                assert_eq!(p[0].kind, ProblemKind::Missing);
                assert_eq!(p[1].kind, ProblemKind::Dimension { expected: 5, actual: 3 });
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fixed_mode_without_dataset_is_missing_input() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(dir.path());
        s.dataset_path = None;
        assert!(matches!(verify_inputs(&s), Err(Error::MissingInput(f)) if f == ["dataset_path"]));
    }
}
