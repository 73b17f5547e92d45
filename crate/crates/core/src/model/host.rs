use super::config::ArchConfig;
use super::layout::ParamSpec;
use crate::error::Result;
use crate::peft::PeftState;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub path: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Anything that owns a named parameter table: a materialized [`Model`] or a
/// shape-only [`ModelLayout`]. PEFT application is written against this
/// trait so both go through identical selection and injection logic.
///
/// [`Model`]: super::Model
/// [`ModelLayout`]: super::ModelLayout
pub trait ParamHost {
    fn config(&self) -> &ArchConfig;
    fn peft(&self) -> &PeftState;
    fn peft_mut(&mut self) -> &mut PeftState;
    /// Parameters in table order.
    fn param_infos(&self) -> Vec<ParamInfo>;
    fn shape_of(&self, path: &str) -> Option<Vec<usize>>;
    fn set_trainable(&mut self, path: &str, trainable: bool) -> Result<()>;
    /// Adds a new trainable parameter; fails if the path is taken.
    fn insert(&mut self, spec: ParamSpec) -> Result<()>;

    fn contains(&self, path: &str) -> bool {
        self.shape_of(path).is_some()
    }

    fn trainable_paths(&self) -> Vec<String> {
        self.param_infos()
            .into_iter()
            .filter(|p| p.trainable)
            .map(|p| p.path)
            .collect()
    }
}
