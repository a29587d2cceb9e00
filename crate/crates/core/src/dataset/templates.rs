use crate::error::{Error, Result};
use crate::geometry::catalog::{self, part_names};
use crate::geometry::{Affordance, ObjectClass};

/// The fixed response every instruction is trained to produce.
pub const TARGET_TEXT: &str = "Sure, it is <AFF>.";

// `{act}` is a verb phrase that takes the object as complement; `{verb}` is the bare verb.
const IRAS_TEMPLATES: [&str; 10] = [
    "i need to {act} this {obj}; which region should i act on?",
    "where should my hand go if i want to {act} the {obj}?",
    "which part of the {obj} lets me {act} it?",
    "to {act} this {obj}, what area should i use?",
    "if a robot must {act} the {obj}, where should it make contact?",
    "what region of this {obj} affords the action {verb}?",
    "which points of the {obj} would you use to {act} it?",
    "how would one {act} this {obj}, and which region matters?",
    "can you find where to {act} on this {obj}?",
    "i am about to {act} the {obj}; where exactly?",
];

const ROPS_TEMPLATES: [&str; 4] = [
    "the {part} of the {obj}",
    "segment the {part} of this {obj}",
    "where is the {part} of the {obj}?",
    "find the {obj} {part}",
];

fn act_phrase(verb: Affordance) -> &'static str {
    use Affordance::*;
    match verb {
        Grasp => "grasp",
        Cut => "cut with",
        Sit => "sit on",
        Pour => "pour from",
        Contain => "contain things in",
        Open => "open",
        Listen => "listen with",
        WrapGrasp => "wrap-grasp",
        Press => "press",
        Lift => "lift",
        Support => "support weight with",
        Twist => "twist",
    }
}

pub fn iras_template_count() -> usize {
    IRAS_TEMPLATES.len()
}

fn fill_iras(template: &str, verb: Affordance, class: ObjectClass) -> String {
    template
        .replace("{act}", act_phrase(verb))
        .replace("{verb}", verb.name())
        .replace("{obj}", class.name())
}

/// Reasoning-style instruction for a verb on an object. The part name is
/// never mentioned, so the model must infer the region from the verb.
pub fn render_instruction(
    verb: Affordance,
    class: ObjectClass,
    template_seed: u64,
) -> Result<String> {
    if !catalog::affordance_table(class)
        .iter()
        .any(|(v, _)| *v == verb)
    {
        return Err(Error::Catalog(format!(
            "{verb} is not an affordance of {class}"
        )));
    }
    let t = IRAS_TEMPLATES[(template_seed % IRAS_TEMPLATES.len() as u64) as usize];
    Ok(fill_iras(t, verb, class))
}

pub fn render_part_query(part: &str, class: ObjectClass, template_seed: u64) -> String {
    ROPS_TEMPLATES[(template_seed % ROPS_TEMPLATES.len() as u64) as usize]
        .replace("{part}", part)
        .replace("{obj}", class.name())
}

/// Every string the templates can produce, used to build the vocabulary.
pub fn corpus() -> Vec<String> {
    let mut out = vec![TARGET_TEXT.to_string()];
    for &class in ObjectClass::ALL {
        for (verb, _) in catalog::affordance_table(class) {
            for t in IRAS_TEMPLATES {
                out.push(fill_iras(t, *verb, class));
            }
        }
        for part in part_names(class) {
            for seed in 0..ROPS_TEMPLATES.len() as u64 {
                out.push(render_part_query(part, class, seed));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::vocab::split_words;

    #[test]
    fn instructions_never_name_parts() {
        let parts: Vec<&str> = ObjectClass::ALL
            .iter()
            .flat_map(|c| part_names(*c).iter().copied())
            .collect();
        for &class in ObjectClass::ALL {
            for (verb, _) in catalog::affordance_table(class) {
                for seed in 0..IRAS_TEMPLATES.len() as u64 {
                    let s = render_instruction(*verb, class, seed).unwrap();
                    let words = split_words(&s);
                    for p in &parts {
                        assert!(!words.iter().any(|w| w == p), "{s:?} names {p}");
                    }
                    assert!(s.ends_with('?') && !s.contains('.'), "{s:?}");
                }
            }
        }
    }

    #[test]
    fn cut_knife_mentions_verb_and_object() {
        let s = render_instruction(Affordance::Cut, ObjectClass::Knife, 0).unwrap();
        assert!(s.contains("cut") && s.contains("knife") && !s.contains("blade"));
    }

    #[test]
    fn eight_seeds_give_distinct_strings() {
        let set: std::collections::BTreeSet<_> = (0..8)
            .map(|s| render_instruction(Affordance::Grasp, ObjectClass::Mug, s).unwrap())
            .collect();
        assert!(set.len() >= 4);
    }

    #[test]
    fn unknown_pair_is_catalog_error() {
        assert!(matches!(
            render_instruction(Affordance::Sit, ObjectClass::Mug, 0),
            Err(Error::Catalog(_))
        ));
    }
}
