use fmgp_core::FmgpError;
use serde::Serialize;

/// Failure category, which fixes the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub category: Category,
    /// Finer-grained origin, e.g. `parse` or `training`.
    pub kind: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
}

impl CliError {
    fn new(category: Category, kind: &str, message: impl Into<String>) -> Self {
        Self { category, kind: kind.into(), message: message.into(), row: None, column: None, iteration: None }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, "config", message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Category::Data, "data", message)
    }

    pub fn numeric(kind: &str, message: impl Into<String>) -> Self {
        Self::new(Category::Numeric, kind, message)
    }

    pub fn exit_code(&self) -> i32 {
        match self.category {
            Category::Config => 2,
            Category::Data => 3,
            Category::Numeric => 4,
        }
    }

    pub fn to_json(&self) -> String {
        let body = serde_json::json!({ "error": self, "exit_code": self.exit_code() });
        body.to_string()
    }
}

impl From<FmgpError> for CliError {
    fn from(e: FmgpError) -> Self {
        let category = match &e {
            FmgpError::Config(_) | FmgpError::Shape(_) | FmgpError::Json(_) => Category::Config,
            FmgpError::Parse { .. } | FmgpError::Data(_) | FmgpError::Domain(_) | FmgpError::Io(_) => Category::Data,
            FmgpError::Numeric(_) | FmgpError::Training { .. } => Category::Numeric,
        };
        let mut out = CliError::new(category, e.kind(), e.to_string());
        match e {
            FmgpError::Parse { row, column, .. } => {
                out.row = Some(row);
                out.column = Some(column);
            }
            FmgpError::Training { iteration, .. } => out.iteration = Some(iteration),
            _ => {}
        }
        out
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::config("x").exit_code(), 2);
        assert_eq!(CliError::data("x").exit_code(), 3);
        assert_eq!(CliError::numeric("numeric", "x").exit_code(), 4);
    }

    #[test]
    fn error_json_is_machine_readable() {
        let v: serde_json::Value = serde_json::from_str(&CliError::data("missing").to_json()).unwrap();
        assert_eq!(v["exit_code"], 3);
        assert_eq!(v["error"]["category"], "data");
        assert_eq!(v["error"]["message"], "missing");
    }
}
