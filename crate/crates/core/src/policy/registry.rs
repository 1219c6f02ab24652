use serde_json::Value;

use crate::agent::ToolArgs;
use crate::memory::{CLEAN_MEMORY, DELETE_MEMORY, EDIT_MEMORY};

pub const SEARCH_INTERNET: &str = "search_internet";
pub const BROWSE_PAGE: &str = "browse_page";
pub const CODE_INTERPRETER: &str = "code_interpreter";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamType {
    Str,
    /// Non-negative integer.
    Int,
}

impl ParamType {
    fn name(self) -> &'static str {
        match self {
            ParamType::Str => "str",
            ParamType::Int => "int",
        }
    }

    fn accepts(self, v: &Value) -> bool {
        match self {
            ParamType::Str => v.is_string(),
            ParamType::Int => v.is_u64(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToolSpec {
    pub name: &'static str,
    pub description: &'static str,
    pub params: &'static [(&'static str, ParamType)],
}

impl ToolSpec {
    pub fn signature(&self) -> String {
        let params: Vec<String> = self.params.iter().map(|(n, t)| format!("{n}: {}", t.name())).collect();
        format!("{}({})", self.name, params.join(", "))
    }

    pub fn param(&self, name: &str) -> Option<ParamType> {
        self.params.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
    }

    /// Checks `args` against the signature: every parameter present with
    /// its type, nothing extra.
    pub fn validate(&self, args: &ToolArgs) -> Result<(), String> {
        for key in args.keys() {
            if self.param(key).is_none() {
                return Err(format!("{} has no parameter `{key}`", self.name));
            }
        }
        for (name, ty) in self.params {
            match args.get(*name) {
                None => return Err(format!("{} is missing `{name}: {}`", self.name, ty.name())),
                Some(v) if !ty.accepts(v) => {
                    return Err(format!("{}: `{name}` must be {}, got {v}", self.name, ty.name()))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

const SEARCH: ToolSpec = ToolSpec {
    name: SEARCH_INTERNET,
    description: "top-10 web search results (title, url, snippet)",
    params: &[("query", ParamType::Str)],
};
const BROWSE: ToolSpec = ToolSpec {
    name: BROWSE_PAGE,
    description: "one section of the page as plain text, links removed; sections start at 0",
    params: &[("url", ParamType::Str), ("section_id", ParamType::Int)],
};
const CODE: ToolSpec = ToolSpec {
    name: CODE_INTERPRETER,
    description: "run a stateless Python script and return its output",
    params: &[("code", ParamType::Str)],
};
const CLEAN: ToolSpec = ToolSpec {
    name: CLEAN_MEMORY,
    description: "replace your memory with this summary",
    params: &[("content", ParamType::Str)],
};
const EDIT: ToolSpec = ToolSpec {
    name: EDIT_MEMORY,
    description: "replace the text of memory entry #index",
    params: &[("index", ParamType::Int), ("content", ParamType::Str)],
};
const DELETE: ToolSpec = ToolSpec {
    name: DELETE_MEMORY,
    description: "delete memory entry #index",
    params: &[("index", ParamType::Int)],
};

/// The tools a profile may call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolRegistry {
    tools: Vec<ToolSpec>,
}

impl ToolRegistry {
    pub fn single_turn() -> Self {
        Self { tools: vec![SEARCH, BROWSE, CODE, CLEAN] }
    }

    pub fn multi_turn() -> Self {
        Self { tools: vec![SEARCH, BROWSE, CODE, CLEAN, EDIT, DELETE] }
    }

    pub fn tools(&self) -> &[ToolSpec] {
        &self.tools
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.tools.iter().map(|t| t.name).collect()
    }
}
