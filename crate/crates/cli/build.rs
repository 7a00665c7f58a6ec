use std::process::Command;

/// `EMBRECON_VERSION`, in `git describe` style: `v<tag>[-<n>-g<hash>][-dirty]`,
/// or `v<pkg>-0-g<hash>[-dirty]` when the tree has no tags.
fn main() {
    println!("cargo:rerun-if-changed=../../.git/HEAD");
    println!("cargo:rerun-if-changed=../../.git/index");
    let pkg = std::env::var("CARGO_PKG_VERSION").unwrap_or_default();
    let describe = Command::new("git")
        .args(["describe", "--tags", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    let version = match describe {
        Some(d) if d.starts_with('v') => d,
        Some(d) if !d.is_empty() => format!("v{pkg}-0-g{d}"),
        _ => format!("v{pkg}"),
    };
    println!("cargo:rustc-env=EMBRECON_VERSION={version}");
}
