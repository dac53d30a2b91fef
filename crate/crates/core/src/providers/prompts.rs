//! Prompt templates with `{problem}`, `{solution}`, `{advice}` and `{real_answer}` placeholders.

use std::fs;
use std::io;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub inference: String,
    pub self_critic: String,
    pub verify: String,
    pub extract: String,
    pub value: String,
    pub cot: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            inference: include_str!("../../prompts/inference.txt").to_owned(),
            self_critic: include_str!("../../prompts/self_critic.txt").to_owned(),
            verify: include_str!("../../prompts/verify.txt").to_owned(),
            extract: include_str!("../../prompts/extract.txt").to_owned(),
            value: include_str!("../../prompts/value.txt").to_owned(),
            cot: include_str!("../../prompts/cot.txt").to_owned(),
        }
    }
}

impl PromptSet {
    /// Built-in templates, overridden by any `<name>.txt` present in `dir`.
    pub fn load_overrides(dir: &Path) -> io::Result<Self> {
        let mut set = Self::default();
        for (name, slot) in [
            ("inference", &mut set.inference),
            ("self_critic", &mut set.self_critic),
            ("verify", &mut set.verify),
            ("extract", &mut set.extract),
            ("value", &mut set.value),
            ("cot", &mut set.cot),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *slot = fs::read_to_string(path)?;
            }
        }
        Ok(set)
    }
}

/// Values substituted into a template.
#[derive(Debug, Default, Clone, Copy)]
pub struct PromptVars<'a> {
    pub problem: &'a str,
    pub solution: &'a str,
    pub advice: &'a str,
    pub real_answer: &'a str,
}

pub fn render(template: &str, vars: PromptVars<'_>) -> String {
    template
        .replace("{problem}", vars.problem)
        .replace("{solution}", vars.solution)
        .replace("{advice}", vars.advice)
        .replace("{real_answer}", vars.real_answer)
}
