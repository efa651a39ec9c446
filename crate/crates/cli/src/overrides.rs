use anyhow::{bail, Context, Result};
use toml::{Table, Value};

/// Applies `path.to.key=value` assignments to a parsed config. Values are
/// read as TOML literals, falling back to plain strings.
pub fn apply(table: &mut Table, assignments: &[String]) -> Result<()> {
    for a in assignments {
        let (path, raw) = a
            .split_once('=')
            .with_context(|| format!("override {a:?} is not key=value"))?;
        let value = parse_value(raw.trim());
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            bail!("override {a:?} has an empty key");
        }
        let (last, parents) = keys.split_last().unwrap();
        let mut cur = &mut *table;
        for k in parents {
            let entry = cur
                .entry(k.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            cur = match entry {
                Value::Table(t) => t,
                _ => bail!("override {a:?}: {k} is not a table"),
            };
        }
        cur.insert(last.to_string(), value);
    }
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.to_owned()),
    }
}
