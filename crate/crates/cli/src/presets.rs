//! Shipped experiment presets, addressable by name wherever a config path
//! is accepted.

pub const NAMES: [&str; 10] = [
    "mnist-clean",
    "mnist-noise-only",
    "mnist-mpgd",
    "mnist-alp",
    "mnist-clp",
    "mnist-squeeze",
    "mnist-label-smooth",
    "mnist-mixup",
    "svhn-params-preset",
    "synthetic-smoke",
];

const TEXTS: [&str; 10] = [
    include_str!("../presets/mnist-clean.toml"),
    include_str!("../presets/mnist-noise-only.toml"),
    include_str!("../presets/mnist-mpgd.toml"),
    include_str!("../presets/mnist-alp.toml"),
    include_str!("../presets/mnist-clp.toml"),
    include_str!("../presets/mnist-squeeze.toml"),
    include_str!("../presets/mnist-label-smooth.toml"),
    include_str!("../presets/mnist-mixup.toml"),
    include_str!("../presets/svhn-params-preset.toml"),
    include_str!("../presets/synthetic-smoke.toml"),
];

pub fn get(name: &str) -> Option<&'static str> {
    NAMES.iter().position(|n| *n == name).map(|i| TEXTS[i])
}
