use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The fixed prompt templates. Each kind maps to exactly one string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    VanillaQuality,
    ConditionalQuality,
    /// Whole prompt replaced by a plain "rate the second image" request.
    ConditionalQualityT1,
    /// "The visual quality of the first image is poor." removed.
    ConditionalQualityT2,
    /// "How about" replaced by "Rate".
    ConditionalQualityT3,
    SemanticConsistency,
}

const VANILLA: &str = "Rate the quality of the image. Good or poor? [IMAGE_TOKEN]";
const CONDITIONAL: &str = "The visual quality of the first image is poor. How about the visual quality of the second image? Good or poor? [IMAGE_TOKEN1, IMAGE_TOKEN2]";
const T1: &str = "Rate the quality of the second image. Good or poor? [IMAGE_TOKEN1, IMAGE_TOKEN2]";
const T2: &str =
    "How about the visual quality of the second image? Good or poor? [IMAGE_TOKEN1, IMAGE_TOKEN2]";
const T3: &str = "The visual quality of the first image is poor. Rate the visual quality of the second image. Good or poor? [IMAGE_TOKEN1, IMAGE_TOKEN2]";
const SEMANTIC: &str =
    "Do these two images describe the same object? Yes or no? [IMAGE_TOKEN1, IMAGE_TOKEN2]";

impl PromptKind {
    pub const ALL: [PromptKind; 6] = [
        PromptKind::VanillaQuality,
        PromptKind::ConditionalQuality,
        PromptKind::ConditionalQualityT1,
        PromptKind::ConditionalQualityT2,
        PromptKind::ConditionalQualityT3,
        PromptKind::SemanticConsistency,
    ];

    /// Full user-turn template including image placeholders.
    pub fn template(self) -> &'static str {
        match self {
            PromptKind::VanillaQuality => VANILLA,
            PromptKind::ConditionalQuality => CONDITIONAL,
            PromptKind::ConditionalQualityT1 => T1,
            PromptKind::ConditionalQualityT2 => T2,
            PromptKind::ConditionalQualityT3 => T3,
            PromptKind::SemanticConsistency => SEMANTIC,
        }
    }

    /// The question text alone, without image placeholders.
    pub fn question(self) -> &'static str {
        let t = self.template();
        t[..t.rfind(" [IMAGE_TOKEN").expect("placeholder")].trim_end()
    }

    /// Assistant-turn prefix preceding the score token.
    pub fn assistant_prefix(self) -> &'static str {
        match self {
            PromptKind::SemanticConsistency => "",
            _ => "The quality of the image is",
        }
    }

    pub fn is_conditional(self) -> bool {
        matches!(
            self,
            PromptKind::ConditionalQuality
                | PromptKind::ConditionalQualityT1
                | PromptKind::ConditionalQualityT2
                | PromptKind::ConditionalQualityT3
        )
    }

    pub fn image_count(self) -> usize {
        match self {
            PromptKind::VanillaQuality => 1,
            _ => 2,
        }
    }

    pub fn candidate_tokens(self) -> [&'static str; 2] {
        match self {
            PromptKind::SemanticConsistency => ["yes", "no"],
            _ => ["good", "poor"],
        }
    }

    /// Wire name, identical to the serde representation.
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::VanillaQuality => "vanilla_quality",
            PromptKind::ConditionalQuality => "conditional_quality",
            PromptKind::ConditionalQualityT1 => "conditional_quality_t1",
            PromptKind::ConditionalQualityT2 => "conditional_quality_t2",
            PromptKind::ConditionalQualityT3 => "conditional_quality_t3",
            PromptKind::SemanticConsistency => "semantic_consistency",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        let kind = match s.as_str() {
            "cond" => PromptKind::ConditionalQuality,
            "t1" => PromptKind::ConditionalQualityT1,
            "t2" => PromptKind::ConditionalQualityT2,
            "t3" => PromptKind::ConditionalQualityT3,
            "vanilla" => PromptKind::VanillaQuality,
            "semantic" => PromptKind::SemanticConsistency,
            other => PromptKind::ALL
                .into_iter()
                .find(|k| k.as_str() == other)
                .ok_or_else(|| format!("unknown prompt kind `{other}`"))?,
        };
        Ok(kind)
    }
}

/// The exact template for `kind`.
pub fn render_prompt(kind: PromptKind) -> &'static str {
    kind.template()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_templates() {
        assert_eq!(
            render_prompt(PromptKind::VanillaQuality),
            "Rate the quality of the image. Good or poor? [IMAGE_TOKEN]"
        );
        assert_eq!(
            render_prompt(PromptKind::ConditionalQuality),
            "The visual quality of the first image is poor. How about the visual quality of the second image? Good or poor? [IMAGE_TOKEN1, IMAGE_TOKEN2]"
        );
        assert_eq!(
            PromptKind::SemanticConsistency.question(),
            "Do these two images describe the same object? Yes or no?"
        );
        assert_eq!(
            PromptKind::ConditionalQualityT2.question(),
            "How about the visual quality of the second image? Good or poor?"
        );
    }

    #[test]
    fn arity_and_tokens() {
        for kind in PromptKind::ALL {
            let placeholders = kind.template().matches("IMAGE_TOKEN").count();
            assert_eq!(placeholders, kind.image_count(), "{kind}");
            assert_eq!(kind.as_str().parse::<PromptKind>().unwrap(), kind);
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{}\"", kind.as_str()));
        }
        assert_eq!(PromptKind::SemanticConsistency.candidate_tokens(), ["yes", "no"]);
        assert!(!PromptKind::VanillaQuality.is_conditional());
        assert!("t4".parse::<PromptKind>().is_err());
    }
}
