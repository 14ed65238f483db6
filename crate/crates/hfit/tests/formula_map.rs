use std::path::PathBuf;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn rows() -> Vec<(String, String)> {
    let text = std::fs::read_to_string(root().join("docs/formula_map.md")).unwrap();
    text.lines()
        .filter(|l| l.starts_with('|') && !l.starts_with("| key") && !l.starts_with("|--"))
        .map(|l| {
            let cells: Vec<&str> = l.trim_matches('|').split('|').map(str::trim).collect();
            assert_eq!(cells.len(), 3, "{l}");
            (cells[0].to_string(), cells[2].trim_matches('`').to_string())
        })
        .collect()
}

#[test]
fn fifteen_distinct_rows() {
    let rows = rows();
    assert_eq!(rows.len(), 15);
    let mut keys: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 15);
}

#[test]
fn every_operation_exists() {
    for (key, op) in rows() {
        let parts: Vec<&str> = op.split("::").collect();
        assert_eq!(parts[0], "hfit_core", "{key}");
        let src = std::fs::read_to_string(root().join(format!("crates/core/src/{}.rs", parts[1])))
            .unwrap_or_else(|_| panic!("{key}: no module {}", parts[1]));
        let func = parts.last().unwrap();
        assert!(src.contains(&format!("pub fn {func}(")), "{key}: {op}");
        if parts.len() == 4 {
            assert!(
                src.contains(&format!("impl {} {{", parts[2])),
                "{key}: {op}"
            );
        }
    }
}
