use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// Hex SHA-256 digest of a normalized accessibility tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fingerprint(String);

impl Fingerprint {
    pub fn of_normalized(normalized: &str) -> Self {
        Fingerprint(hex::encode(Sha256::digest(normalized.as_bytes())))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// First 12 hex chars, for logs and reports.
    pub fn short(&self) -> &str {
        &self.0[..12.min(self.0.len())]
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Maps raw tree text to the canonical form that is hashed.
pub trait Normalizer: Send + Sync {
    fn normalize(&self, tree_text: &str) -> String;
}

/// Collapses every interior whitespace run to one space, strips leading and
/// trailing whitespace on each line and drops trailing blank lines.
#[derive(Debug, Default, Clone, Copy)]
pub struct WhitespaceNormalizer;

impl Normalizer for WhitespaceNormalizer {
    fn normalize(&self, tree_text: &str) -> String {
        let mut lines: Vec<String> = tree_text
            .lines()
            .map(|line| {
                let mut out = String::with_capacity(line.len());
                let mut in_space = false;
                for c in line.chars() {
                    if c.is_whitespace() {
                        in_space = true;
                    } else {
                        if in_space && !out.is_empty() {
                            out.push(' ');
                        }
                        in_space = false;
                        out.push(c);
                    }
                }
                out
            })
            .collect();
        while lines.last().is_some_and(|l| l.is_empty()) {
            lines.pop();
        }
        lines.join("\n")
    }
}

/// An accessibility-tree observation. Equality is fingerprint equality.
#[derive(Clone)]
pub struct Observation {
    tree_text: Arc<str>,
    fingerprint: Fingerprint,
}

impl Observation {
    pub fn new(tree_text: impl Into<String>) -> Self {
        Self::with_normalizer(tree_text, &WhitespaceNormalizer)
    }

    pub fn with_normalizer(tree_text: impl Into<String>, normalizer: &dyn Normalizer) -> Self {
        let tree_text: String = tree_text.into();
        let fingerprint = Fingerprint::of_normalized(&normalizer.normalize(&tree_text));
        Observation {
            tree_text: tree_text.into(),
            fingerprint,
        }
    }

    pub fn tree_text(&self) -> &str {
        &self.tree_text
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }
}

/// Digest of an observation; pure in the normalized tree text.
pub fn observation_fingerprint(o: &Observation) -> Fingerprint {
    o.fingerprint.clone()
}

impl PartialEq for Observation {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint
    }
}

impl Eq for Observation {}

impl fmt::Debug for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let first = self.tree_text.lines().next().unwrap_or("");
        f.debug_struct("Observation")
            .field("fingerprint", &self.fingerprint.short())
            .field("head", &first)
            .finish()
    }
}

impl Serialize for Observation {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.tree_text)
    }
}

impl<'de> Deserialize<'de> for Observation {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(Observation::new(String::deserialize(deserializer)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Character-level reference normalizer, written independently of
    /// `WhitespaceNormalizer`: split on whitespace, rejoin, trim blank tail.
    fn reference_normalize(text: &str) -> String {
        let lines: Vec<String> = text
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l))
            .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
            .collect();
        let keep = lines.iter().rposition(|l| !l.is_empty()).map_or(0, |i| i + 1);
        lines[..keep].join("\n")
    }

    #[test]
    fn identical_trees_match() {
        let a = Observation::new("[1] RootWebArea 'Shop'\n[2] link 'Phones'");
        let b = Observation::new("[1] RootWebArea 'Shop'\n[2] link 'Phones'");
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a, b);
    }

    #[test]
    fn trailing_whitespace_is_ignored() {
        let plain = "[1] RootWebArea 'Shop'\n[2] link 'Phones'";
        let padded = "[1] RootWebArea 'Shop'   \n[2] link 'Phones'\t\n\n  \n";
        assert_eq!(reference_normalize(plain), reference_normalize(padded));
        assert_eq!(Observation::new(plain), Observation::new(padded));
    }

    #[test]
    fn label_change_is_detected() {
        let a = "[1] RootWebArea 'Shop'\n[2] link 'Phones'";
        let b = "[1] RootWebArea 'Shop'\n[2] link 'Tablets'";
        assert_ne!(reference_normalize(a), reference_normalize(b));
        assert_ne!(Observation::new(a), Observation::new(b));
    }

    #[test]
    fn normalizer_agrees_with_reference() {
        let samples = [
            "",
            "   ",
            "a  b\t c",
            "\n\na\n\n",
            "  [1]  link   'x'  \n    [2] button\r\n",
            "x\n \ny",
        ];
        for s in samples {
            assert_eq!(WhitespaceNormalizer.normalize(s), reference_normalize(s), "{s:?}");
        }
    }
}
