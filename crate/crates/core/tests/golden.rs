use augloop_core::gateway::{render_finetune_output, render_prompt, Bindings, Placeholder, TemplateId};
use augloop_core::pairs::{parse_dataset, render_dataset, PairProvenance, PreferencePair};

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden");

fn golden(name: &str) -> String {
    std::fs::read_to_string(format!("{GOLDEN}/{name}")).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Binds every placeholder to its own `{name}` text, which reproduces the
/// raw template.
fn identity_bindings() -> Bindings {
    Placeholder::ALL.iter().map(|p| (*p, format!("{{{}}}", p.as_str()))).collect()
}

fn concrete_bindings() -> Bindings {
    Bindings::from([
        (Placeholder::Accuracy, "0.5256".to_string()),
        (Placeholder::TransformCode, golden("binding_base.py")),
        (Placeholder::AddonAccuracy, "0.6124".to_string()),
        (Placeholder::AddonTransformCode, golden("binding_addon.py")),
    ])
}

const TEMPLATES: [TemplateId; 3] = [TemplateId::FinetuneDirect, TemplateId::GenerateDirect, TemplateId::GenerateCot];

#[test]
fn templates_match_transcriptions() {
    for t in TEMPLATES {
        let rendered = render_prompt(t, &identity_bindings()).unwrap();
        assert_eq!(rendered, golden(&format!("{}.txt", t.as_str())), "{t}");
    }
}

#[test]
fn bound_templates_match() {
    for t in TEMPLATES {
        let rendered = render_prompt(t, &concrete_bindings()).unwrap();
        assert_eq!(rendered, golden(&format!("{}.bound.txt", t.as_str())), "{t}");
        assert!(!rendered.contains("{accuracy}") && !rendered.contains("_code}"));
    }
}

#[test]
fn finetune_output_line() {
    assert_eq!(render_finetune_output("{addon_transform_code}"), golden("finetune_output.txt"));
}

#[test]
fn dataset_sample_is_byte_stable() {
    let pair = |acc: f64| PreferencePair {
        base_id: 0,
        addon_id: 1,
        base_accuracy: acc,
        addon_accuracy: 0.6124,
        base_code: golden("binding_base.py"),
        addon_code: golden("binding_addon.py"),
        provenance: PairProvenance::Original,
    };
    let pairs = [pair(0.4832), pair(0.5256)];
    let text = render_dataset(&pairs);
    assert_eq!(text, golden("dataset_sample.jsonl"));
    let back = parse_dataset(&text).unwrap();
    assert_eq!(back[1].prompt[1], "Baseline transform code (Accuracy: 0.5256):");
    assert_eq!(back[0].output, vec![format!("<tr>{}</tr>", golden("binding_addon.py"))]);
}
