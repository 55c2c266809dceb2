use std::collections::BTreeMap;

use crate::memory::VirtualAddress;
use crate::trace::{CallStack, Operand};

/// Register that receives the result of every external call.
pub const RESULT_REGISTER: &str = "rv";

/// Register file, variable bindings, call stack and event cursor of the
/// modeled program. Global words live in the memory image.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MachineState {
    pub registers: BTreeMap<String, u64>,
    /// Variables keep their address after `free` so traces can express
    /// dangling references.
    pub vars: BTreeMap<String, VirtualAddress>,
    pub call_stack: CallStack,
    pub cursor: usize,
}

impl MachineState {
    pub fn new() -> Self {
        MachineState::default()
    }

    pub fn var(&self, name: &str) -> Option<VirtualAddress> {
        self.vars.get(name).copied()
    }

    pub fn eval(&self, operand: &Operand) -> Option<u64> {
        match operand {
            Operand::Const(v) => Some(*v),
            Operand::Var { name, delta } => self.var(name).map(|a| a.offset(*delta).get()),
        }
    }

    /// Register values in name order, the register half of the root set.
    pub fn register_values(&self) -> impl Iterator<Item = u64> + '_ {
        self.registers.values().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_operands() {
        let mut m = MachineState::new();
        m.vars.insert("a".into(), VirtualAddress(0x1000));
        assert_eq!(m.eval(&Operand::Var { name: "a".into(), delta: -8 }), Some(0xff8));
        assert_eq!(m.eval(&Operand::Const(5)), Some(5));
        assert_eq!(m.eval(&Operand::Var { name: "b".into(), delta: 0 }), None);
    }
}
