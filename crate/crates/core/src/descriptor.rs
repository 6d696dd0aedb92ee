//! `name:key=value,key=value` registry identifiers.

use std::collections::BTreeMap;

use crate::{Error, Result};

pub(crate) struct Descriptor<'a> {
    pub name: &'a str,
    fields: BTreeMap<&'a str, &'a str>,
}

impl<'a> Descriptor<'a> {
    pub fn parse(text: &'a str) -> Result<Self> {
        let (name, args) = text.split_once(':').unwrap_or((text, ""));
        let mut fields = BTreeMap::new();
        for part in args.split(',').filter(|p| !p.trim().is_empty()) {
            match part.split_once('=') {
                Some((k, v)) => {
                    fields.insert(k.trim(), v.trim());
                }
                // Bare flags such as `powerlaw:edge`.
                None => {
                    fields.insert(part.trim(), "");
                }
            }
        }
        Ok(Self {
            name: name.trim(),
            fields,
        })
    }

    pub fn has(&self, key: &str) -> bool {
        self.fields.contains_key(key)
    }

    pub fn str(&self, key: &str) -> Option<&'a str> {
        self.fields.get(key).copied()
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.fields.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::param(format!("'{key}' in '{}' is not a number: {raw}", self.name))),
        }
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        if !self.has(key) {
            return Err(Error::param(format!("'{}' needs '{key}'", self.name)));
        }
        self.f64_or(key, 0.0)
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.fields.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::param(format!("'{key}' in '{}' is not an integer: {raw}", self.name))),
        }
    }

    /// Rejects keys outside `allowed`.
    pub fn only(&self, allowed: &[&str]) -> Result<()> {
        match self.fields.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::param(format!("unknown field '{k}' for '{}'", self.name))),
            None => Ok(()),
        }
    }
}
