//! Versioned prompt templates.
//!
//! Templates ship as text assets compiled into the binary; each carries a
//! stable id that is recorded in run traces, so a trace always names the
//! exact prompt wording that produced it. Placeholders use `{name}` and are
//! substituted in a single pass over the template, so placeholder-looking
//! text inside substituted values is never re-expanded.

/// Version tag for the whole template set, recorded in config snapshots.
pub const TEMPLATE_SET: &str = "v1";

/// A compiled-in prompt template.
#[derive(Debug, Clone, Copy)]
pub struct Template {
    pub id: &'static str,
    text: &'static str,
}

pub const RDU_DECOMPOSE: Template = Template {
    id: "rdu-decompose-v1",
    text: include_str!("../assets/prompts/rdu_decompose_v1.txt"),
};

pub const RDU_REVISE: Template = Template {
    id: "rdu-revise-v1",
    text: include_str!("../assets/prompts/rdu_revise_v1.txt"),
};

pub const RDU_REPAIR: Template = Template {
    id: "rdu-repair-v1",
    text: include_str!("../assets/prompts/rdu_repair_v1.txt"),
};

pub const CIE_STEP: Template = Template {
    id: "cie-step-v1",
    text: include_str!("../assets/prompts/cie_step_v1.txt"),
};

pub const CIE_FINAL: Template = Template {
    id: "cie-final-v1",
    text: include_str!("../assets/prompts/cie_final_v1.txt"),
};

pub const CIE_ALT: Template = Template {
    id: "cie-alt-v1",
    text: include_str!("../assets/prompts/cie_alt_v1.txt"),
};

pub const CAM_STEP: Template = Template {
    id: "cam-step-v1",
    text: include_str!("../assets/prompts/cam_step_v1.txt"),
};

pub const CAM_FINAL: Template = Template {
    id: "cam-final-v1",
    text: include_str!("../assets/prompts/cam_final_v1.txt"),
};

pub const CAM_REPAIR: Template = Template {
    id: "cam-repair-v1",
    text: include_str!("../assets/prompts/cam_repair_v1.txt"),
};

pub const ALL_TEMPLATES: [Template; 9] = [
    RDU_DECOMPOSE,
    RDU_REVISE,
    RDU_REPAIR,
    CIE_STEP,
    CIE_FINAL,
    CIE_ALT,
    CAM_STEP,
    CAM_FINAL,
    CAM_REPAIR,
];

impl Template {
    /// Substitutes `{name}` placeholders from `vars`. Unknown placeholders
    /// stay literal so a missing variable is visible in the prompt instead
    /// of silently vanishing.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            match rest[open..].find('}') {
                Some(offset) => {
                    let name = &rest[open + 1..open + offset];
                    match vars.iter().find(|(k, _)| *k == name) {
                        Some((_, value)) => out.push_str(value),
                        None => out.push_str(&rest[open..=open + offset]),
                    }
                    rest = &rest[open + offset + 1..];
                }
                None => {
                    out.push_str(&rest[open..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        out
    }

    pub fn raw(&self) -> &'static str {
        self.text
    }
}

/// Standard note injected when the query carries an image.
pub fn image_note(has_image: bool) -> &'static str {
    if has_image {
        "An image accompanies the question.\n"
    } else {
        ""
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_substitutes_known_placeholders() {
        let p = RDU_DECOMPOSE.render(&[
            ("question", "what is on the table?"),
            ("n_max", "8"),
            ("image_note", ""),
        ]);
        assert!(p.contains("Question: what is on the table?"));
        assert!(p.contains("at most 8 sub-problems"));
    }

    #[test]
    fn substituted_values_are_not_re_expanded() {
        let p = CIE_STEP.render(&[
            ("question", "literal {n_max} stays"),
            ("image_note", ""),
            ("context", ""),
            ("step_index", "1"),
            ("sub_question", "q"),
            ("region_note", ""),
            ("alt_note", ""),
        ]);
        assert!(p.contains("literal {n_max} stays"));
    }

    #[test]
    fn unknown_placeholders_stay_visible() {
        let p = CAM_REPAIR.render(&[]);
        assert!(p.contains("{reply}"));
    }

    #[test]
    fn template_ids_are_unique_and_versioned() {
        let mut ids: Vec<&str> = ALL_TEMPLATES.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        let before = ids.len();
        ids.dedup();
        assert_eq!(ids.len(), before);
        for t in ALL_TEMPLATES {
            assert!(t.id.ends_with("-v1"), "{} lacks a version suffix", t.id);
            assert!(!t.raw().is_empty());
        }
    }
}
