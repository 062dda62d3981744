//! Prompt templates and slot substitution.

use serde::{Deserialize, Serialize};

pub const TEMPLATE_VERSION: u32 = 1;

const DISCOVERY: &str = include_str!("../../assets/prompts/discovery.txt");
const CONVERSION: &str = include_str!("../../assets/prompts/conversion.txt");
const COMPOSITION: &str = include_str!("../../assets/prompts/composition.txt");
pub(crate) const CONSTRAINTS: &str = include_str!("../../assets/prompts/constraints.txt");
pub(crate) const GUIDANCE: &str = include_str!("../../assets/prompts/guidance.txt");
pub(crate) const GRAMMAR: &str = include_str!("../../assets/prompts/grammar.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Discovery,
    Conversion,
    Composition,
}

impl PromptRole {
    pub fn template(&self) -> &'static str {
        match self {
            PromptRole::Discovery => DISCOVERY,
            PromptRole::Conversion => CONVERSION,
            PromptRole::Composition => COMPOSITION,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub role: PromptRole,
    pub template: &'static str,
    pub rendered: String,
}

fn body(template: &str) -> &str {
    match template.split_once('\n') {
        Some((first, rest)) if first.starts_with("# template") => rest,
        _ => template,
    }
}

/// Replaces every `{slot}` in the role's template. Inserted values are not
/// rescanned. Fails on a slot with no value or a value with no slot.
pub fn render(role: PromptRole, slots: &[(&str, &str)]) -> Result<PromptBundle, String> {
    let template = role.template();
    let src = body(template);
    let mut out = String::with_capacity(src.len() * 2);
    let mut used = vec![false; slots.len()];
    let mut rest = src;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').filter(|&c| c > 0 && after[..c].chars().all(|ch| ch.is_ascii_lowercase() || ch == '_'));
        match close {
            Some(c) => {
                let name = &after[..c];
                let idx = slots
                    .iter()
                    .position(|(k, _)| *k == name)
                    .ok_or_else(|| format!("no value for slot {{{name}}}"))?;
                used[idx] = true;
                out.push_str(slots[idx].1);
                rest = &after[c + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    if let Some(i) = used.iter().position(|u| !u) {
        return Err(format!("slot {{{}}} not present in template", slots[i].0));
    }
    // Collapse the blank lines left by empty slots.
    let mut tidy = String::with_capacity(out.len());
    let mut blank = 0;
    for line in out.lines() {
        if line.trim().is_empty() {
            blank += 1;
            if blank > 1 {
                continue;
            }
        } else {
            blank = 0;
        }
        tidy.push_str(line);
        tidy.push('\n');
    }
    Ok(PromptBundle {
        role,
        template,
        rendered: tidy.trim().to_string() + "\n",
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_slots_filled() {
        let b = render(
            PromptRole::Discovery,
            &[("population", "A"), ("n", "1"), ("constraints", CONSTRAINTS), ("guidance", "")],
        )
        .unwrap();
        assert!(!b.rendered.contains("{population}") && b.rendered.contains("Propose 1 new"));
        assert!(b.rendered.contains("```formula"));
        assert!(!b.rendered.starts_with("# template"));
    }

    #[test]
    fn missing_or_extra_slot_fails() {
        assert!(render(PromptRole::Conversion, &[("formula", "k")]).is_err());
        assert!(render(
            PromptRole::Conversion,
            &[("formula", "k"), ("grammar", ""), ("constraints", ""), ("error", ""), ("bogus", "")]
        )
        .is_err());
    }

    #[test]
    fn inserted_braces_untouched() {
        let b = render(
            PromptRole::Conversion,
            &[("formula", "\\frac{a}{b} {error}"), ("grammar", ""), ("constraints", ""), ("error", "")],
        )
        .unwrap();
        assert!(b.rendered.contains("\\frac{a}{b} {error}"));
    }
}
