//! `--config <file>` support. The file holds `key = value` lines; each becomes
//! `--key value` spliced in right after the subcommand, so flags given on the
//! command line take precedence.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub fn parse(text: &str) -> Result<Vec<OsString>> {
    let mut args = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key=value", idx + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        if key.is_empty() {
            bail!("config line {}: empty key", idx + 1);
        }
        match value {
            "true" => args.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                args.push(format!("--{key}").into());
                args.push(value.into());
            }
        }
    }
    Ok(args)
}

/// Removes every `--config` from `argv` and splices the referenced files'
/// flags in after the subcommand name.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut injected = Vec::new();
    let mut iter = argv.into_iter();
    while let Some(arg) = iter.next() {
        let text = arg.to_string_lossy();
        let path = if text == "--config" {
            match iter.next() {
                Some(p) => p,
                None => bail!("--config requires a file path"),
            }
        } else if let Some(p) = text.strip_prefix("--config=") {
            p.into()
        } else {
            rest.push(arg);
            continue;
        };
        let path = Path::new(&path);
        let body = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        injected.extend(parse(&body).with_context(|| format!("in {}", path.display()))?);
    }
    if injected.is_empty() || rest.len() < 2 {
        return Ok(rest);
    }
    let mut out: Vec<OsString> = rest.drain(..2).collect();
    out.extend(injected);
    out.extend(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[OsString]) -> Vec<String> {
        v.iter().map(|s| s.to_string_lossy().into_owned()).collect()
    }

    #[test]
    fn booleans_and_values() {
        let args = parse("# comment\niterations = 5\nno_shuffle=true\ncharts=false\n\n").unwrap();
        assert_eq!(strings(&args), ["--iterations", "5", "--no-shuffle"]);
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(parse("iterations 5").is_err());
    }

    #[test]
    fn spliced_after_subcommand() {
        let dir = std::env::temp_dir().join(format!("semrank-config-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let file = dir.join("run.conf");
        fs::write(&file, "iterations=5\ngamma=0.1\n").unwrap();
        let argv = vec![
            OsString::from("semrank"),
            "train".into(),
            "--config".into(),
            file.clone().into(),
            "--gamma".into(),
            "0.2".into(),
        ];
        let out = expand(argv).unwrap();
        assert_eq!(
            strings(&out),
            [
                "semrank",
                "train",
                "--iterations",
                "5",
                "--gamma",
                "0.1",
                "--gamma",
                "0.2"
            ]
        );
        fs::remove_dir_all(dir).unwrap();
    }
}
