use crate::error::{Error, Result};

/// Partial assignment of tensor dimensions to mesh axes.
///
/// Unassigned dimensions are replicated across every mesh axis not used by
/// another dimension.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    assignments: Vec<(String, String)>,
}

impl Layout {
    pub fn new<A: AsRef<str>, B: AsRef<str>>(pairs: &[(A, B)]) -> Result<Self> {
        let mut assignments: Vec<(String, String)> = Vec::new();
        for (dim, axis) in pairs {
            let (dim, axis) = (dim.as_ref(), axis.as_ref());
            if assignments.iter().any(|(d, _)| d == dim) {
                return Err(Error::Layout(format!("tensor dimension `{dim}` assigned twice")));
            }
            if let Some((other, _)) = assignments.iter().find(|(_, a)| a == axis) {
                return Err(Error::Layout(format!(
                    "mesh axis `{axis}` assigned to both `{other}` and `{dim}`"
                )));
            }
            assignments.push((dim.to_string(), axis.to_string()));
        }
        Ok(Layout { assignments })
    }

    /// Maps mesh axes named `b`/`batch`, `x`, `y`, `z` to the batch and
    /// spatial dimensions; other axes are left as replicas.
    pub fn conventional(mesh: &super::MeshShape) -> Self {
        let pairs: Vec<(&str, &str)> = mesh
            .axes()
            .iter()
            .filter_map(|(a, _)| {
                let dim = match a.as_str() {
                    "b" | "batch" => "batch",
                    "x" => "dimx",
                    "y" => "dimy",
                    "z" => "dimz",
                    _ => return None,
                };
                Some((dim, a.as_str()))
            })
            .collect();
        Layout::new(&pairs).expect("axis names are distinct")
    }

    /// Layout with nothing split: every worker holds the full tensor.
    pub fn replicated() -> Self {
        Layout::default()
    }

    /// Parses `batch=b,dimx=x,dimy=y,dimz=z`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (dim, axis) = part
                .split_once('=')
                .ok_or_else(|| Error::Layout(format!("`{part}` is not dim=axis")))?;
            pairs.push((dim.trim().to_string(), axis.trim().to_string()));
        }
        Layout::new(&pairs)
    }

    pub fn axis_for(&self, dim: &str) -> Option<&str> {
        self.assignments
            .iter()
            .find(|(d, _)| d == dim)
            .map(|(_, a)| a.as_str())
    }

    pub fn assignments(&self) -> &[(String, String)] {
        &self.assignments
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .assignments
            .iter()
            .map(|(d, a)| format!("{d}={a}"))
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_cli_form() {
        let l = Layout::parse("batch=b,dimx=x,dimy=y,dimz=z").unwrap();
        assert_eq!(l.axis_for("dimy"), Some("y"));
        assert_eq!(l.axis_for("channels"), None);
        assert_eq!(l.to_string(), "batch=b,dimx=x,dimy=y,dimz=z");
    }

    #[test]
    fn one_axis_per_dimension() {
        assert!(Layout::parse("dimx=x,dimy=x").is_err());
        assert!(Layout::parse("dimx=x,dimx=y").is_err());
        assert!(Layout::parse("dimx").is_err());
    }
}
