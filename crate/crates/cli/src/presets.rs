//! Built-in experiment documents on the 3-state reference system.

use crate::config::{parse_document, ConfigDocument};
use crate::CliError;

const PRESETS: &[(&str, &str)] = &[
    ("reference-gd", include_str!("../presets/reference-gd.json")),
    ("reference-sgd-l200", include_str!("../presets/reference-sgd-l200.json")),
    (
        "reference-sgd-l2000",
        include_str!("../presets/reference-sgd-l2000.json"),
    ),
    ("drift-sgd-l200", include_str!("../presets/drift-sgd-l200.json")),
    ("drift-sgd-l2000", include_str!("../presets/drift-sgd-l2000.json")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(name, _)| *name)
}

pub fn source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn load(name: &str) -> Result<ConfigDocument, CliError> {
    let text = source(name).ok_or_else(|| {
        let known: Vec<_> = names().collect();
        CliError::Config(format!("unknown preset `{name}` (known: {})", known.join(", ")))
    })?;
    parse_document(text, &format!("preset {name}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use kfpo::instances::{reference_drift_noise, reference_system};

    #[test]
    fn presets_embed_the_reference_system() {
        let (model, noise) = reference_system();
        let drift = reference_drift_noise(&model);
        for name in names() {
            let (m, n) = load(name).unwrap().build_system().unwrap();
            assert_eq!(m.a(), model.a(), "{name}");
            assert_eq!(m.c(), model.c(), "{name}");
            assert_eq!(m.horizon(), model.horizon(), "{name}");
            let expected = if name.starts_with("drift") { &drift } else { &noise };
            assert_eq!(&n, expected, "{name}");
        }
    }

    #[test]
    fn unknown_preset_is_a_config_error() {
        assert_eq!(load("nope").unwrap_err().exit_code(), crate::EXIT_CONFIG);
    }
}
