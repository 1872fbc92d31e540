use std::collections::HashSet;

use thiserror::Error;

use super::{Profile, TransformCatalog, TransformDef};
use crate::media::MediaType;

pub const DEFAULT_MAX_DEPTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    /// `mime` came up a second time; `path` holds the steps taken before the repeat.
    #[error("rule chain revisits {mime}")]
    Cycle { mime: MediaType, path: Vec<String> },
    #[error("rule chain longer than {max_depth} steps")]
    DepthExceeded { max_depth: usize, path: Vec<String> },
}

impl PlanError {
    /// Ids of the defs matched before planning stopped.
    pub fn partial_path(&self) -> &[String] {
        match self {
            PlanError::Cycle { path, .. } | PlanError::DepthExceeded { path, .. } => path,
        }
    }
}

/// A planned, acyclic sequence of transformations ending at a type no rule matches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformChain {
    steps: Vec<TransformDef>,
    initial_mime: MediaType,
    final_mime: MediaType,
}

impl TransformChain {
    pub fn empty(mime: MediaType) -> Self {
        TransformChain {
            steps: Vec::new(),
            final_mime: mime.clone(),
            initial_mime: mime,
        }
    }

    /// Builds a chain from explicit steps, checking that consecutive types line up
    /// and that no source type repeats. Returns `None` if either check fails.
    pub fn from_steps(initial_mime: MediaType, steps: Vec<TransformDef>) -> Option<Self> {
        let mut seen = HashSet::new();
        let mut current = initial_mime.clone();
        for step in &steps {
            if step.source_mime != current || !seen.insert(step.source_mime.clone()) {
                return None;
            }
            current = step.target_mime.clone();
        }
        Some(TransformChain {
            steps,
            initial_mime,
            final_mime: current,
        })
    }

    pub fn steps(&self) -> &[TransformDef] {
        &self.steps
    }

    pub fn initial_mime(&self) -> &MediaType {
        &self.initial_mime
    }

    pub fn final_mime(&self) -> &MediaType {
        &self.final_mime
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn ids(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.id.clone()).collect()
    }
}

/// Returns the profile's def whose source type is `mime`, if any.
///
/// Profiles never hold two rules for the same source, so at most one def can match.
pub fn match_rule<'c>(
    profile: &Profile,
    mime: &MediaType,
    catalog: &'c TransformCatalog,
) -> Option<&'c TransformDef> {
    profile
        .rules
        .iter()
        .filter_map(|r| catalog.get(&r.rule))
        .find(|def| &def.source_mime == mime)
}

/// Repeatedly matches the current type and follows the matched def's target
/// until nothing matches.
pub fn plan_chain(
    profile: &Profile,
    initial_mime: &MediaType,
    catalog: &TransformCatalog,
    max_depth: usize,
) -> Result<TransformChain, PlanError> {
    let mut seen = HashSet::from([initial_mime.clone()]);
    let mut steps: Vec<TransformDef> = Vec::new();
    let mut current = initial_mime.clone();

    while let Some(def) = match_rule(profile, &current, catalog) {
        let path = || steps.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        if steps.len() == max_depth {
            return Err(PlanError::DepthExceeded {
                max_depth,
                path: path(),
            });
        }
        if !seen.insert(def.target_mime.clone()) {
            let mut path = path();
            path.push(def.id.clone());
            return Err(PlanError::Cycle {
                mime: def.target_mime.clone(),
                path,
            });
        }
        current = def.target_mime.clone();
        steps.push(def.clone());
    }

    Ok(TransformChain {
        steps,
        initial_mime: initial_mime.clone(),
        final_mime: current,
    })
}
