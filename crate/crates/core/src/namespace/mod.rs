//! The Utilities-layer file system: a flat table of symbolic names bound
//! to SUIDs. Also home to the append-only event recorder ([`event`]).

pub mod event;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::Suid;

pub use event::{Event, EventKind, EventLog, TraceError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NameError {
    #[error("unknown name `{0}`")]
    UnknownName(String),
    #[error("name `{0}` is already bound")]
    DuplicateName(String),
    #[error("invalid name `{0}`")]
    InvalidName(String),
}

/// Names are identifiers: ASCII letters, digits, `_` and `.`, not
/// starting with a digit.
pub fn is_valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NameTable {
    names: BTreeMap<String, Suid>,
}

impl NameTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lookup(&self, name: &str) -> Result<Suid, NameError> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| NameError::UnknownName(name.to_string()))
    }

    pub fn bind(&mut self, name: &str, suid: Suid) -> Result<(), NameError> {
        if !is_valid_name(name) {
            return Err(NameError::InvalidName(name.to_string()));
        }
        if self.names.contains_key(name) {
            return Err(NameError::DuplicateName(name.to_string()));
        }
        self.names.insert(name.to_string(), suid);
        Ok(())
    }

    pub fn unbind(&mut self, name: &str) -> Result<Suid, NameError> {
        self.names
            .remove(name)
            .ok_or_else(|| NameError::UnknownName(name.to_string()))
    }

    /// Moves the binding of `old` to `new`. The SUID is untouched.
    pub fn rename(&mut self, old: &str, new: &str) -> Result<(), NameError> {
        if !is_valid_name(new) {
            return Err(NameError::InvalidName(new.to_string()));
        }
        if self.names.contains_key(new) {
            return Err(NameError::DuplicateName(new.to_string()));
        }
        let suid = self.unbind(old)?;
        self.names.insert(new.to_string(), suid);
        Ok(())
    }

    /// All names bound to `suid`, in name order.
    pub fn names_of(&self, suid: Suid) -> impl Iterator<Item = &str> {
        self.names
            .iter()
            .filter(move |(_, s)| **s == suid)
            .map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Suid)> {
        self.names.iter().map(|(n, s)| (n.as_str(), *s))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    #[test]
    fn lookup_bound_and_unbound() {
        let mut t = NameTable::new();
        t.bind("foo", Suid(0x1003)).unwrap();
        assert_eq!(t.lookup("foo"), Ok(Suid(0x1003)));
        assert_eq!(t.lookup(""), Err(NameError::UnknownName(String::new())));
        assert!(t.lookup("bar").is_err());
    }

    #[test]
    fn hot_swap_rename_then_rebind() {
        let mut t = NameTable::new();
        t.bind("firewall", Suid(0x1000)).unwrap();
        t.rename("firewall", "oldfirewall").unwrap();
        t.bind("firewall", Suid(0x1005)).unwrap();
        assert_eq!(t.lookup("oldfirewall"), Ok(Suid(0x1000)));
        assert_eq!(t.lookup("firewall"), Ok(Suid(0x1005)));
    }

    #[test]
    fn rename_onto_existing_name_is_refused() {
        let mut t = NameTable::new();
        t.bind("a", Suid(1)).unwrap();
        t.bind("b", Suid(2)).unwrap();
        assert_eq!(
            t.rename("a", "b"),
            Err(NameError::DuplicateName("b".into()))
        );
        // nothing moved
        assert_eq!(t.lookup("a"), Ok(Suid(1)));
        assert_eq!(
            t.rename("zz", "c"),
            Err(NameError::UnknownName("zz".into()))
        );
    }

    #[test]
    fn one_suid_many_names() {
        let mut t = NameTable::new();
        t.bind("x", Suid(7)).unwrap();
        t.bind("y", Suid(7)).unwrap();
        assert_eq!(t.names_of(Suid(7)).collect::<Vec<_>>(), ["x", "y"]);
    }

    #[test]
    fn random_binds_agree_with_shadow_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000);
        let mut t = NameTable::new();
        let mut shadow = HashMap::new();
        while shadow.len() < 1000 {
            let len = rng.gen_range(1..12);
            let name: String = std::iter::once('n')
                .chain((0..len).map(|_| rng.gen_range(b'a'..=b'z') as char))
                .collect();
            let suid = Suid(rng.gen());
            match t.bind(&name, suid) {
                Ok(()) => assert!(shadow.insert(name, suid).is_none()),
                Err(NameError::DuplicateName(_)) => assert!(shadow.contains_key(&name)),
                Err(e) => panic!("{e}"),
            }
        }
        for (name, suid) in &shadow {
            assert_eq!(t.lookup(name), Ok(*suid));
        }
    }
}
