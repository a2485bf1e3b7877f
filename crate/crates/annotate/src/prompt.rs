use moetune_core::data::VulnType;

/// What the generator is told to look at for each vulnerability family.
pub fn focus(kind: VulnType) -> &'static str {
    match kind {
        VulnType::Reentrancy => {
            "Analyze call.value() and call() usage, the order of state updates and external calls, \
             access control, and the implementation of internal functions."
        }
        VulnType::Timestamp => {
            "Analyze where block.timestamp or now is read, whether it decides control flow, randomness \
             or payouts, and how far a miner could shift it."
        }
        VulnType::IntegerOverflow => {
            "Analyze every arithmetic operation and type conversion, whether it is checked, and the value \
             range each variable can reach."
        }
        VulnType::Delegatecall => {
            "Analyze who controls the delegatecall target and call data, the inherited execution context, \
             and storage layout between caller and callee."
        }
        VulnType::Other => "Analyze the code for the stated weakness and the conditions needed to exploit it.",
    }
}

/// Label-guided prompt for one generator call.
pub fn render_prompt(code: &str, kind: VulnType) -> String {
    format!(
        "You are auditing a Solidity smart contract known to contain a {kind} vulnerability.\n\
         {}\n\
         Point to the exact statements responsible and explain how the flaw can be exploited.\n\
         \n\
         Code:\n{code}\n\
         \n\
         Explanation:",
        focus(kind)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reentrancy_prompt_snapshot() {
        let p = render_prompt("x.call{value:1}(\"\");", VulnType::Reentrancy);
        let want = "You are auditing a Solidity smart contract known to contain a reentrancy vulnerability.\n\
            Analyze call.value() and call() usage, the order of state updates and external calls, access control, \
            and the implementation of internal functions.\n\
            Point to the exact statements responsible and explain how the flaw can be exploited.\n\
            \n\
            Code:\nx.call{value:1}(\"\");\n\
            \n\
            Explanation:";
        assert_eq!(p, want);
        assert!(p.contains("the order of state updates and external calls"));
    }

    #[test]
    fn every_family_has_its_own_directive() {
        let mut seen: Vec<&str> = VulnType::DIALECTS.iter().map(|&k| focus(k)).collect();
        seen.dedup();
        assert_eq!(seen.len(), 4);
        assert!(render_prompt("", VulnType::Delegatecall).contains("delegatecall target"));
    }
}
