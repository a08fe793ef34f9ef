//! Shell-command adapters for external vocoders, extractors and ASR engines.

use std::process::Command;

use crate::error::{Error, Result};

/// Substitutes `{key}` placeholders and runs the template through `sh -c`.
/// Returns stdout on success.
pub fn run_template(template: &str, substitutions: &[(&str, &str)]) -> Result<String> {
    let mut cmd = template.to_string();
    for (key, value) in substitutions {
        cmd = cmd.replace(&format!("{{{key}}}"), &shell_quote(value));
    }
    let out = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| Error::External(format!("could not spawn `{cmd}`: {e}")))?;
    if !out.status.success() {
        return Err(Error::External(format!(
            "`{cmd}` exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}
