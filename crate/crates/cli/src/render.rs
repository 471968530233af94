//! Plain-text tables for the human output mode.

use std::fmt::Write;

/// Two-column key/value block followed by optional tables.
#[derive(Default)]
pub struct Text {
    buf: String,
    width: usize,
}

impl Text {
    pub fn new() -> Self {
        Self {
            buf: String::new(),
            width: 22,
        }
    }

    pub fn kv(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.buf, "{key:<w$} {value}", w = self.width);
        self
    }

    pub fn line(&mut self, s: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.buf, "{s}");
        self
    }

    pub fn table(&mut self, header: &[&str], rows: &[Vec<String>]) -> &mut Self {
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for r in rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let fmt_row = |cells: Vec<&str>| -> String {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let _ = writeln!(self.buf, "{}", fmt_row(header.to_vec()));
        let _ = writeln!(
            self.buf,
            "{}",
            widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")
        );
        for r in rows {
            let _ = writeln!(self.buf, "{}", fmt_row(r.iter().map(String::as_str).collect()));
        }
        self
    }

    pub fn finish(&mut self) -> String {
        std::mem::take(&mut self.buf)
    }
}

pub fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// 1-based `{1, 3}` rendering of a 0-based index set.
pub fn set(v: &[usize]) -> String {
    format!("{{{}}}", v.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(", "))
}

/// Shortest round-trip form, switching to scientific outside [1e-4, 1e6).
pub fn num(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e6).contains(&a) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

pub fn vector(v: &[f64]) -> String {
    format!("({})", v.iter().map(|&x| num(x)).collect::<Vec<_>>().join(", "))
}

pub fn matrix_rows(rows: &[Vec<f64>]) -> Vec<String> {
    rows.iter()
        .map(|r| format!("[{}]", r.iter().map(|&x| num(x)).collect::<Vec<_>>().join(", ")))
        .collect()
}

pub fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_switch_to_scientific_at_the_extremes() {
        assert_eq!(num(0.5), "0.5");
        assert_eq!(num(0.0), "0");
        assert_eq!(num(2.5e-25), "2.5e-25");
        assert_eq!(num(3e7), "3e7");
    }

    #[test]
    fn sets_are_one_based() {
        assert_eq!(set(&[0, 2]), "{1, 3}");
        assert_eq!(set(&[]), "{}");
    }

    #[test]
    fn table_aligns_columns() {
        let mut t = Text::new();
        t.table(&["a", "bb"], &[vec!["100".into(), "x".into()]]);
        assert_eq!(t.finish(), "  a  bb\n---  --\n100   x\n");
    }
}
