//! Translation rules: the transformation catalog, per-user profiles and the
//! chain planner that re-matches each step's output type until no rule applies.

mod plan;
mod xml;

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::media::{InvalidMediaType, MediaType};

pub use plan::{match_rule, plan_chain, PlanError, TransformChain, DEFAULT_MAX_DEPTH};
pub use xml::{parse_profiles, parse_transformations, serialize_profiles, serialize_transformations};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RulesError {
    #[error("malformed XML at {line}:{column}: {message}")]
    Parse {
        line: u32,
        column: u32,
        message: String,
    },
    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("transform {id:?} maps {mime} onto itself")]
    SelfLoop { id: String, mime: MediaType },
    #[error("transform {id:?}: {source}")]
    InvalidMediaType {
        id: String,
        #[source]
        source: InvalidMediaType,
    },
    #[error("profile {profile:?} references unknown rule {rule:?}")]
    UnknownRule { profile: String, rule: String },
    #[error("profile {profile:?} has two rules for {mime}: {first:?} and {second:?}")]
    AmbiguousProfile {
        profile: String,
        mime: MediaType,
        first: String,
        second: String,
    },
    #[error("transform {id:?} uses unregistered translator {translator:?}")]
    UnknownTranslator { id: String, translator: String },
    #[error("default profile {0:?} does not exist")]
    UnknownDefaultProfile(String),
}

/// One catalog entry: convert `source_mime` into `target_mime` with `translator`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransformDef {
    pub id: String,
    pub description: String,
    pub source_mime: MediaType,
    pub target_mime: MediaType,
    pub translator: String,
}

impl TransformDef {
    pub fn new(
        id: impl Into<String>,
        description: impl Into<String>,
        source_mime: MediaType,
        target_mime: MediaType,
        translator: impl Into<String>,
    ) -> Result<Self, RulesError> {
        let id = id.into();
        if id.is_empty() {
            return Err(RulesError::Schema("transform id must be nonempty".into()));
        }
        if source_mime == target_mime {
            return Err(RulesError::SelfLoop {
                id,
                mime: source_mime,
            });
        }
        Ok(TransformDef {
            id,
            description: description.into(),
            source_mime,
            target_mime,
            translator: translator.into(),
        })
    }
}

/// Ordered set of [`TransformDef`]s keyed by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransformCatalog {
    defs: Vec<TransformDef>,
    index: HashMap<String, usize>,
}

impl TransformCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, def: TransformDef) -> Result<(), RulesError> {
        if self.index.contains_key(&def.id) {
            return Err(RulesError::DuplicateId {
                kind: "transform",
                id: def.id,
            });
        }
        self.index.insert(def.id.clone(), self.defs.len());
        self.defs.push(def);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&TransformDef> {
        self.index.get(id).map(|&i| &self.defs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransformDef> {
        self.defs.iter()
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    /// Fails on the first def whose translator is not known to `is_registered`.
    pub fn check_translators(
        &self,
        is_registered: impl Fn(&str) -> bool,
    ) -> Result<(), RulesError> {
        match self.defs.iter().find(|d| !is_registered(&d.translator)) {
            Some(d) => Err(RulesError::UnknownTranslator {
                id: d.id.clone(),
                translator: d.translator.clone(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProfileRule {
    pub id: String,
    pub rule: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Profile {
    pub id: String,
    pub rules: Vec<ProfileRule>,
}

impl Profile {
    /// The profile with no rules; requests resolved to it pass through untouched.
    pub fn empty() -> Self {
        Profile {
            id: String::new(),
            rules: Vec::new(),
        }
    }

    /// Builds a profile from an ordered list of rule ids, numbering them `001`, `002`, ...
    pub fn from_rule_ids<I, S>(id: impl Into<String>, rules: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Profile {
            id: id.into(),
            rules: rules
                .into_iter()
                .enumerate()
                .map(|(i, r)| ProfileRule {
                    id: ordinal_id(i + 1),
                    rule: r.into(),
                })
                .collect(),
        }
    }

    /// Appends `rule` under the next free ordinal id.
    pub fn push_rule(&mut self, rule: impl Into<String>) {
        let next = self
            .rules
            .iter()
            .filter_map(|r| r.id.parse::<usize>().ok())
            .max()
            .unwrap_or(0)
            + 1;
        self.rules.push(ProfileRule {
            id: ordinal_id(next),
            rule: rule.into(),
        });
    }

    pub fn rule_ids(&self) -> impl Iterator<Item = &str> {
        self.rules.iter().map(|r| r.rule.as_str())
    }

    /// Checks that every rule exists in `catalog` and that no two rules share a source type.
    pub fn validate(&self, catalog: &TransformCatalog) -> Result<(), RulesError> {
        if self.id.is_empty() {
            return Err(RulesError::Schema("profile id must be nonempty".into()));
        }
        let mut ordinals = HashMap::new();
        let mut sources: HashMap<&MediaType, &str> = HashMap::new();
        for rule in &self.rules {
            if ordinals.insert(rule.id.as_str(), ()).is_some() {
                return Err(RulesError::DuplicateId {
                    kind: "profile transform",
                    id: format!("{}/{}", self.id, rule.id),
                });
            }
            let def = catalog
                .get(&rule.rule)
                .ok_or_else(|| RulesError::UnknownRule {
                    profile: self.id.clone(),
                    rule: rule.rule.clone(),
                })?;
            if let Some(first) = sources.insert(&def.source_mime, &def.id) {
                return Err(RulesError::AmbiguousProfile {
                    profile: self.id.clone(),
                    mime: def.source_mime.clone(),
                    first: first.to_string(),
                    second: def.id.clone(),
                });
            }
        }
        Ok(())
    }
}

fn ordinal_id(n: usize) -> String {
    format!("{n:03}")
}

/// All known profiles plus the optional fallback for unidentified users.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProfileSet {
    profiles: Vec<Profile>,
    default_profile_id: Option<String>,
}

impl ProfileSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a profile after validating it against `catalog`.
    pub fn insert(&mut self, profile: Profile, catalog: &TransformCatalog) -> Result<(), RulesError> {
        if self.get(&profile.id).is_some() {
            return Err(RulesError::DuplicateId {
                kind: "profile",
                id: profile.id,
            });
        }
        profile.validate(catalog)?;
        self.profiles.push(profile);
        Ok(())
    }

    /// Replaces or appends a profile, keeping its position when it already exists.
    pub fn upsert(&mut self, profile: Profile, catalog: &TransformCatalog) -> Result<(), RulesError> {
        profile.validate(catalog)?;
        match self.profiles.iter_mut().find(|p| p.id == profile.id) {
            Some(slot) => *slot = profile,
            None => self.profiles.push(profile),
        }
        Ok(())
    }

    pub fn remove(&mut self, id: &str) -> Option<Profile> {
        let pos = self.profiles.iter().position(|p| p.id == id)?;
        if self.default_profile_id.as_deref() == Some(id) {
            self.default_profile_id = None;
        }
        Some(self.profiles.remove(pos))
    }

    pub fn get(&self, id: &str) -> Option<&Profile> {
        self.profiles.iter().find(|p| p.id == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Profile> {
        self.profiles.iter()
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn default_profile_id(&self) -> Option<&str> {
        self.default_profile_id.as_deref()
    }

    pub fn set_default_profile(&mut self, id: Option<String>) -> Result<(), RulesError> {
        if let Some(id) = &id {
            if self.get(id).is_none() {
                return Err(RulesError::UnknownDefaultProfile(id.clone()));
            }
        }
        self.default_profile_id = id;
        Ok(())
    }

    /// Re-validates every profile against a (possibly reloaded) catalog.
    pub fn validate(&self, catalog: &TransformCatalog) -> Result<(), RulesError> {
        self.profiles.iter().try_for_each(|p| p.validate(catalog))
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn catalog() -> TransformCatalog {
        parse_transformations(&extended_catalog_xml()).unwrap()
    }

    #[test]
    fn empty_profile_is_valid() {
        let p = Profile::from_rule_ids("nobody", Vec::<String>::new());
        p.validate(&catalog()).unwrap();
    }

    #[test]
    fn ambiguous_sources_rejected() {
        let mut cat = catalog();
        cat.insert(
            TransformDef::new(
                "JPG->PNG",
                "",
                MediaType::parse("image/jpeg").unwrap(),
                MediaType::parse("image/png").unwrap(),
                "TRImageMagick",
            )
            .unwrap(),
        )
        .unwrap();
        let p = Profile::from_rule_ids("x", ["JPG->GIF", "JPG->PNG"]);
        assert!(matches!(
            p.validate(&cat),
            Err(RulesError::AmbiguousProfile { ref first, ref second, .. })
                if first == "JPG->GIF" && second == "JPG->PNG"
        ));
    }

    #[test]
    fn unknown_rule_rejected() {
        let p = Profile::from_rule_ids("x", ["PDF->PNG"]);
        assert!(matches!(p.validate(&catalog()), Err(RulesError::UnknownRule { .. })));
    }

    #[test]
    fn self_loop_rejected_by_constructor() {
        let png = MediaType::parse("image/png").unwrap();
        assert!(matches!(
            TransformDef::new("P", "", png.clone(), png, "T"),
            Err(RulesError::SelfLoop { .. })
        ));
    }

    #[test]
    fn translator_check_names_offender() {
        let xml = PUBLISHED_CATALOG.replacen("TRImageMagick", "TROther", 1);
        let cat = parse_transformations(&xml).unwrap();
        let err = cat.check_translators(|n| n == "TRImageMagick").unwrap_err();
        assert_eq!(
            err,
            RulesError::UnknownTranslator {
                id: "JPG->GIF".into(),
                translator: "TROther".into()
            }
        );
    }

    #[test]
    fn default_profile_must_exist() {
        let cat = catalog();
        let mut set = parse_profiles(PUBLISHED_PROFILES, &cat).unwrap();
        assert!(set.set_default_profile(Some("nosuch".into())).is_err());
        set.set_default_profile(Some("mln".into())).unwrap();
        assert_eq!(set.default_profile_id(), Some("mln"));
        set.remove("mln");
        assert_eq!(set.default_profile_id(), None);
    }
}
