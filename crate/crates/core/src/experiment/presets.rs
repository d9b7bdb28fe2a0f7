/// Named experiment presets shipped with the crate, as config text.
pub const PRESETS: [(&str, &str); 2] = [
    ("benchmark_oapl", include_str!("../../presets/benchmark_oapl.toml")),
    ("benchmark_grpo", include_str!("../../presets/benchmark_grpo.toml")),
];

/// Config text of the preset called `name`.
pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}
