use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::topology::UNKNOWN_NAME;

/// Class arrival plan. Class ids are assigned in schedule order, so task 1's
/// classes take the lowest ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSchedule {
    names: Vec<String>,
    tasks: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
}

/// On-disk form: `tasks = [["aeroplane", "bicycle"], ["bird", "boat"]]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub tasks: Vec<Vec<String>>,
}

impl TaskSchedule {
    pub fn from_names(tasks: Vec<Vec<String>>) -> Result<Self, ProtocolError> {
        let mut names = Vec::new();
        let mut index = HashMap::new();
        let mut ids = Vec::with_capacity(tasks.len());
        for task in tasks {
            let mut task_ids = Vec::with_capacity(task.len());
            for name in task {
                if name == UNKNOWN_NAME {
                    return Err(ProtocolError::Schedule(format!(
                        "`{UNKNOWN_NAME}` cannot be scheduled as a class"
                    )));
                }
                if index.contains_key(&name) {
                    return Err(ProtocolError::Schedule(format!(
                        "class `{name}` appears in more than one task"
                    )));
                }
                index.insert(name.clone(), names.len());
                task_ids.push(names.len());
                names.push(name);
            }
            ids.push(task_ids);
        }
        Ok(Self {
            names,
            tasks: ids,
            index,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ProtocolError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ProtocolError::Schedule(format!("{}: {e}", path.display()))
        })?;
        let file: ScheduleFile = toml::from_str(&text)
            .map_err(|e| ProtocolError::Schedule(format!("{}: {e}", path.display())))?;
        Self::from_names(file.tasks)
    }

    pub fn to_file(&self) -> ScheduleFile {
        ScheduleFile {
            tasks: self
                .tasks
                .iter()
                .map(|t| t.iter().map(|&c| self.names[c].clone()).collect())
                .collect(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn tasks(&self) -> &[Vec<usize>] {
        &self.tasks
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn class_name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Classes introduced at time point `t` (1-based).
    pub fn task(&self, t: usize) -> &[usize] {
        &self.tasks[t - 1]
    }

    /// Zero-based index of the task introducing `class`.
    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.contains(&class))
    }

    pub fn task_of_name(&self, name: &str) -> Option<usize> {
        self.class_id(name).and_then(|c| self.task_of(c))
    }

    /// Known classes at time point `t` (tasks `1..=t`); `t = 0` is empty.
    pub fn known_at(&self, t: usize) -> BTreeSet<usize> {
        self.tasks[..t.min(self.tasks.len())].iter().flatten().copied().collect()
    }

    /// Scheduled classes still unknown at time point `t`.
    pub fn unknown_at(&self, t: usize) -> BTreeSet<usize> {
        self.tasks[t.min(self.tasks.len())..].iter().flatten().copied().collect()
    }

    /// Classes from tasks before `t`.
    pub fn previously_known(&self, t: usize) -> Vec<usize> {
        self.known_at(t.saturating_sub(1)).into_iter().collect()
    }
}
