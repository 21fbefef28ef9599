//! Four-dimensional task signatures: `<input>_<output>_<dependency>_<depth>`.
//!
//! A [`TaskSignature`] labels the *final* turn of a dialogue: what the user
//! supplies, what the assistant produces, which kind of history it depends
//! on, and how far back that history sits. Signatures are always internally
//! consistent: a context-free dependency (`0`) forces depth `0` and vice
//! versa, so the only way to obtain one is through [`TaskSignature::new`] or
//! [`parse_signature`].
//!
//! The string form of a long-range depth is the literal `n`; the concrete
//! separation is recorded on the dialogue, not in the label.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaxonomyError {
    #[error("malformed signature {input:?}: {reason}")]
    MalformedSignature { input: String, reason: String },
    #[error("inconsistent signature: dependency {dep} with depth {depth}")]
    InconsistentSignature {
        dep: &'static str,
        depth: &'static str,
    },
}

/// What the user provides in the final turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InputModality {
    /// Text only.
    T,
    /// Text plus an uploaded image.
    TI,
}

/// What the assistant produces in the final turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OutputModality {
    /// A single image.
    I,
    /// An image followed by a text answer.
    TI,
}

/// Modality and multiplicity of the history the final turn refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DependencyModality {
    None,
    /// One textual round.
    T1,
    /// Several textual rounds.
    TN,
    /// One earlier image.
    I1,
    /// Several earlier images.
    IN,
}

/// Depth classification as it appears in a signature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DepthKind {
    Zero,
    One,
    N,
}

/// A measured dependency depth, carrying the concrete separation for the
/// long-range case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DependencyDepth {
    Zero,
    One,
    /// Long-range; the value is always at least 2.
    Long(u32),
}

impl DependencyDepth {
    /// Classifies a round separation (0 means "no dependency").
    pub fn from_separation(separation: u32) -> Self {
        match separation {
            0 => DependencyDepth::Zero,
            1 => DependencyDepth::One,
            n => DependencyDepth::Long(n),
        }
    }

    pub fn kind(self) -> DepthKind {
        match self {
            DependencyDepth::Zero => DepthKind::Zero,
            DependencyDepth::One => DepthKind::One,
            DependencyDepth::Long(_) => DepthKind::N,
        }
    }

    /// The concrete separation in rounds, `0` for [`DependencyDepth::Zero`].
    pub fn value(self) -> u32 {
        match self {
            DependencyDepth::Zero => 0,
            DependencyDepth::One => 1,
            DependencyDepth::Long(n) => n,
        }
    }
}

macro_rules! codes {
    ($ty:ty { $($variant:ident => $code:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$(<$ty>::$variant),+];

            pub fn code(self) -> &'static str {
                match self { $(<$ty>::$variant => $code),+ }
            }

            fn from_code(s: &str) -> Option<Self> {
                match s { $($code => Some(<$ty>::$variant),)+ _ => None }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.code())
            }
        }
    };
}

codes!(InputModality { T => "t", TI => "ti" });
codes!(OutputModality { I => "i", TI => "ti" });
codes!(DependencyModality { None => "0", T1 => "t1", TN => "tn", I1 => "i1", IN => "in" });
codes!(DepthKind { Zero => "0", One => "1", N => "n" });

impl DependencyModality {
    pub fn is_image(self) -> bool {
        matches!(self, DependencyModality::I1 | DependencyModality::IN)
    }

    pub fn is_text(self) -> bool {
        matches!(self, DependencyModality::T1 | DependencyModality::TN)
    }

    /// `true` for the `*n` codes that reference several history items.
    pub fn is_multiple(self) -> bool {
        matches!(self, DependencyModality::TN | DependencyModality::IN)
    }
}

/// The taxonomy label of a dialogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskSignature {
    input: InputModality,
    output: OutputModality,
    dep: DependencyModality,
    depth: DepthKind,
}

impl TaskSignature {
    pub fn new(
        input: InputModality,
        output: OutputModality,
        dep: DependencyModality,
        depth: DepthKind,
    ) -> Result<Self, TaxonomyError> {
        let context_free = dep == DependencyModality::None;
        if context_free != (depth == DepthKind::Zero) {
            return Err(TaxonomyError::InconsistentSignature {
                dep: dep.code(),
                depth: depth.code(),
            });
        }
        Ok(TaskSignature {
            input,
            output,
            dep,
            depth,
        })
    }

    pub fn input(&self) -> InputModality {
        self.input
    }

    pub fn output(&self) -> OutputModality {
        self.output
    }

    pub fn dep(&self) -> DependencyModality {
        self.dep
    }

    pub fn depth(&self) -> DepthKind {
        self.depth
    }

    /// Same signature with a different output modality.
    pub fn with_output(self, output: OutputModality) -> Self {
        TaskSignature { output, ..self }
    }

    /// Same signature with a different depth kind.
    pub fn with_depth(self, depth: DepthKind) -> Result<Self, TaxonomyError> {
        TaskSignature::new(self.input, self.output, self.dep, depth)
    }
}

impl fmt::Display for TaskSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}_{}_{}_{}",
            self.input, self.output, self.dep, self.depth
        )
    }
}

impl FromStr for TaskSignature {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_signature(s)
    }
}

impl Serialize for TaskSignature {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskSignature {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_signature(&s).map_err(serde::de::Error::custom)
    }
}

pub fn parse_signature(s: &str) -> Result<TaskSignature, TaxonomyError> {
    let malformed = |reason: String| TaxonomyError::MalformedSignature {
        input: s.to_string(),
        reason,
    };
    let fields: Vec<&str> = s.split('_').collect();
    if fields.len() != 4 {
        return Err(malformed(format!(
            "expected 4 fields, found {}",
            fields.len()
        )));
    }
    let input = InputModality::from_code(fields[0])
        .ok_or_else(|| malformed(format!("unknown input code {:?}", fields[0])))?;
    let output = OutputModality::from_code(fields[1])
        .ok_or_else(|| malformed(format!("unknown output code {:?}", fields[1])))?;
    let dep = DependencyModality::from_code(fields[2])
        .ok_or_else(|| malformed(format!("unknown dependency code {:?}", fields[2])))?;
    let depth = DepthKind::from_code(fields[3])
        .ok_or_else(|| malformed(format!("unknown depth code {:?}", fields[3])))?;
    TaskSignature::new(input, output, dep, depth)
}

pub fn format_signature(sig: &TaskSignature) -> String {
    sig.to_string()
}

/// Every consistent signature, sorted by string form.
pub fn enumerate_valid_signatures() -> Vec<TaskSignature> {
    let mut all = Vec::with_capacity(36);
    for &input in InputModality::ALL {
        for &output in OutputModality::ALL {
            for &dep in DependencyModality::ALL {
                for &depth in DepthKind::ALL {
                    if let Ok(sig) = TaskSignature::new(input, output, dep, depth) {
                        all.push(sig);
                    }
                }
            }
        }
    }
    all.sort_by_cached_key(|s| s.to_string());
    all
}
